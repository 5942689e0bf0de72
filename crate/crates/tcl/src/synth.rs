//! Synthetic interaction generators for experiments, examples, and tests.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ingest::{Interaction, InteractionLog, NodeId, Vocab};

/// Planted personal-preference data: each user draws every interaction
/// from a small personal item subset.
#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Personal subset size per user.
    pub set_size: usize,
    pub events_per_user: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_users: 20,
            n_items: 60,
            set_size: 3,
            events_per_user: 100,
            seed: 1,
        }
    }
}

fn intern_users_items(n_users: usize, n_items: usize) -> (Vocab, Vec<NodeId>, Vec<NodeId>) {
    let mut vocab = Vocab::new();
    let users = (0..n_users)
        .map(|i| vocab.intern(&format!("u{i:03}")))
        .collect();
    let items = (0..n_items)
        .map(|i| vocab.intern(&format!("i{i:03}")))
        .collect();
    (vocab, users, items)
}

/// Generate the planted log: a shuffled deck of user slots, each filled
/// with a uniform draw from that user's personal subset. Timestamps are
/// consecutive integers.
pub fn planted_personal(cfg: &PlantedConfig) -> InteractionLog {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (vocab, users, items) = intern_users_items(cfg.n_users, cfg.n_items);
    let mut deck: Vec<usize> = (0..cfg.n_users)
        .flat_map(|u| std::iter::repeat_n(u, cfg.events_per_user))
        .collect();
    deck.shuffle(&mut rng);
    let events = deck
        .iter()
        .enumerate()
        .map(|(t, &u)| {
            let slot = rng.random_range(0..cfg.set_size);
            let item = items[(u * cfg.set_size + slot) % cfg.n_items];
            Interaction {
                source: users[u],
                target: item,
                timestamp: (t + 1) as f64,
            }
        })
        .collect();
    InteractionLog::from_events(events, Arc::new(vocab))
}

/// The personal item subset a [`planted_personal`] user draws from.
pub fn personal_set(cfg: &PlantedConfig, user_idx: usize) -> Vec<usize> {
    (0..cfg.set_size)
        .map(|s| (user_idx * cfg.set_size + s) % cfg.n_items)
        .collect()
}

/// Planted data with cross-correlated histories: users come in pairs that
/// first co-interact through a shared bridge item, then draw their future
/// interactions from a pair-shared item set. A user's partner history is
/// predictive of the user's own future items.
#[derive(Debug, Clone)]
pub struct CorrelatedConfig {
    pub n_pairs: usize,
    pub shared_set_size: usize,
    pub noise_items_per_user: usize,
    pub phase1_per_user: usize,
    pub phase2_per_user: usize,
    pub seed: u64,
}

impl Default for CorrelatedConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10,
            shared_set_size: 3,
            noise_items_per_user: 2,
            phase1_per_user: 50,
            phase2_per_user: 50,
            seed: 1,
        }
    }
}

pub fn planted_correlated(cfg: &CorrelatedConfig) -> InteractionLog {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n_users = 2 * cfg.n_pairs;
    let n_shared = cfg.n_pairs * cfg.shared_set_size;
    let n_items = n_shared + cfg.n_pairs + n_users * cfg.noise_items_per_user;
    let (vocab, users, items) = intern_users_items(n_users, n_items);
    let shared = |pair: usize, slot: usize| items[pair * cfg.shared_set_size + slot];
    let bridge = |pair: usize| items[n_shared + pair];
    let noise = |user: usize, slot: usize| {
        items[n_shared + cfg.n_pairs + user * cfg.noise_items_per_user + slot]
    };

    let mut events = Vec::new();
    let mut t = 0usize;
    let mut deck: Vec<usize> = (0..n_users)
        .flat_map(|u| std::iter::repeat_n(u, cfg.phase1_per_user))
        .collect();
    deck.shuffle(&mut rng);
    for &u in &deck {
        t += 1;
        let pair = u / 2;
        let item = if rng.random::<bool>() {
            bridge(pair)
        } else {
            noise(u, rng.random_range(0..cfg.noise_items_per_user))
        };
        events.push(Interaction {
            source: users[u],
            target: item,
            timestamp: t as f64,
        });
    }
    let mut deck: Vec<usize> = (0..n_users)
        .flat_map(|u| std::iter::repeat_n(u, cfg.phase2_per_user))
        .collect();
    deck.shuffle(&mut rng);
    for &u in &deck {
        t += 1;
        let pair = u / 2;
        let item = shared(pair, rng.random_range(0..cfg.shared_set_size));
        events.push(Interaction {
            source: users[u],
            target: item,
            timestamp: t as f64,
        });
    }
    InteractionLog::from_events(events, Arc::new(vocab))
}

/// Uniform random interaction stream over a small node set, with
/// non-decreasing integer timestamps (ties included). Useful for
/// structure oracles.
pub fn random_log(seed: u64, n_nodes: usize, n_events: usize) -> InteractionLog {
    assert!(n_nodes >= 2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    let nodes: Vec<NodeId> = (0..n_nodes)
        .map(|i| vocab.intern(&format!("n{i}")))
        .collect();
    let mut t = 1u64;
    let events = (0..n_events)
        .map(|_| {
            let s = nodes[rng.random_range(0..n_nodes)];
            let mut d = nodes[rng.random_range(0..n_nodes)];
            while d == s {
                d = nodes[rng.random_range(0..n_nodes)];
            }
            let ev = Interaction {
                source: s,
                target: d,
                timestamp: t as f64,
            };
            t += rng.random_range(0..2);
            ev
        })
        .collect();
    InteractionLog::from_events(events, Arc::new(vocab))
}

/// Render a log as tab-separated `source target timestamp` lines.
pub fn log_to_tsv(log: &InteractionLog) -> String {
    let mut out = String::new();
    for ev in &log.events {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            log.vocab.name(ev.source),
            log.vocab.name(ev.target),
            ev.timestamp
        ));
    }
    out
}
