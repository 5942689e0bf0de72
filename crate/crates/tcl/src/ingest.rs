//! Interaction log loading, chronological splits, and dataset statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, TclError};

/// Interned node identifier. Indexes into the shared [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

/// String-to-id interning table shared by a log and all of its splits.
#[derive(Debug, Default, Clone)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> NodeId {
        if let Some(&i) = self.index.get(name) {
            return NodeId(i);
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        NodeId(i)
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).map(|&i| NodeId(i))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One timestamped source-target event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub source: NodeId,
    pub target: NodeId,
    pub timestamp: f64,
}

/// Chronologically sorted events plus the vocabularies they draw from.
///
/// Splits share the parent log's `vocab`; `sources`/`targets` are recomputed
/// per log so they always describe the events actually present.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
    pub vocab: Arc<Vocab>,
    pub sources: BTreeSet<NodeId>,
    pub targets: BTreeSet<NodeId>,
}

impl InteractionLog {
    /// Build a log from events, stably sorting by timestamp (ties keep the
    /// given order).
    pub fn from_events(mut events: Vec<Interaction>, vocab: Arc<Vocab>) -> Self {
        events.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
        let mut sources = BTreeSet::new();
        let mut targets = BTreeSet::new();
        for ev in &events {
            sources.insert(ev.source);
            targets.insert(ev.target);
        }
        Self {
            events,
            vocab,
            sources,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Max timestamp minus min timestamp, in raw dataset units.
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    /// Target vocabulary as a sorted candidate list.
    pub fn target_candidates(&self) -> Vec<NodeId> {
        self.targets.iter().copied().collect()
    }
}

/// Column layout of a delimiter-separated event file. Extra columns are
/// ignored.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub source: usize,
    pub target: usize,
    pub timestamp: usize,
    /// `None` splits on runs of ASCII whitespace.
    pub delimiter: Option<char>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            source: 0,
            target: 1,
            timestamp: 2,
            delimiter: None,
        }
    }
}

/// Load a text event file into a chronologically sorted log.
///
/// Blank lines are skipped. Any malformed row is an error naming its
/// one-based line number. An empty file (no events) is an error.
pub fn load_interactions(path: impl AsRef<Path>, cols: &ColumnSpec) -> Result<InteractionLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, cols, &path.display().to_string())
}

/// Parse event text; see [`load_interactions`].
pub fn parse_interactions(
    text: &str,
    cols: &ColumnSpec,
    path_label: &str,
) -> Result<InteractionLog> {
    let mut vocab = Vocab::new();
    let mut events = Vec::new();
    let err = |line: usize, msg: String| TclError::Parse {
        path: path_label.to_string(),
        line,
        msg,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match cols.delimiter {
            Some(d) => raw.split(d).map(str::trim).collect(),
            None => raw.split_whitespace().collect(),
        };
        let need = cols.source.max(cols.target).max(cols.timestamp) + 1;
        if fields.len() < need {
            return Err(err(
                line_no,
                format!("expected at least {} columns, found {}", need, fields.len()),
            ));
        }
        let src = fields[cols.source];
        let dst = fields[cols.target];
        if src.is_empty() || dst.is_empty() {
            return Err(err(line_no, "empty node identifier".to_string()));
        }
        let ts: f64 = fields[cols.timestamp]
            .parse()
            .map_err(|_| err(line_no, format!("non-numeric timestamp `{}`", fields[cols.timestamp])))?;
        if !ts.is_finite() || ts < 0.0 {
            return Err(err(line_no, format!("timestamp {ts} is not finite and non-negative")));
        }
        events.push(Interaction {
            source: vocab.intern(src),
            target: vocab.intern(dst),
            timestamp: ts,
        });
    }
    if events.is_empty() {
        return Err(TclError::EmptyLog(path_label.to_string()));
    }
    Ok(InteractionLog::from_events(events, Arc::new(vocab)))
}

/// Train/validation/test fractions. Must lie in (0,1) and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64) -> Result<Self> {
        let s = Self {
            train_frac,
            val_frac,
            test_frac,
        };
        let sum = train_frac + val_frac + test_frac;
        let ok = [train_frac, val_frac, test_frac]
            .iter()
            .all(|f| *f > 0.0 && *f < 1.0)
            && (sum - 1.0).abs() <= 1e-9;
        if ok {
            Ok(s)
        } else {
            Err(TclError::BadSplit(format!(
                "{train_frac}/{val_frac}/{test_frac}"
            )))
        }
    }

    /// Parse a `"60/20/20"`-style percentage triple.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(TclError::BadSplit(s.to_string()));
        }
        let mut vals = [0.0f64; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .trim()
                .parse()
                .map_err(|_| TclError::BadSplit(s.to_string()))?;
        }
        Self::new(vals[0] / 100.0, vals[1] / 100.0, vals[2] / 100.0)
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.0}/{:.0}/{:.0}",
            self.train_frac * 100.0,
            self.val_frac * 100.0,
            self.test_frac * 100.0
        )
    }
}

/// Split a log chronologically: the first `⌊N·train⌋` events, the next
/// `⌊N·val⌋`, and the remainder. Concatenating the three reproduces the
/// input order exactly.
pub fn chronological_split(
    log: &InteractionLog,
    spec: &SplitSpec,
) -> Result<(InteractionLog, InteractionLog, InteractionLog)> {
    let n = log.events.len();
    if n == 0 {
        return Err(TclError::EmptyLog("split input".to_string()));
    }
    let n_train = (n as f64 * spec.train_frac).floor() as usize;
    let n_val = (n as f64 * spec.val_frac).floor() as usize;
    let n_test = n - n_train - n_val;
    for (which, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if count == 0 {
            return Err(TclError::EmptySplit {
                which,
                n_events: n,
                fractions: spec.to_string(),
            });
        }
    }
    let sub = |range: std::ops::Range<usize>| {
        InteractionLog::from_events(log.events[range].to_vec(), Arc::clone(&log.vocab))
    };
    Ok((
        sub(0..n_train),
        sub(n_train..n_train + n_val),
        sub(n_train + n_val..n),
    ))
}

/// Table-style dataset statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_sources: usize,
    pub n_targets: usize,
    pub n_interactions: usize,
    /// Fraction of test events whose (source, target) pair also occurs in
    /// train. Counts test event multiplicity.
    pub repetition_density: f64,
    pub duration_days: f64,
}

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Compute statistics over a split. `full` supplies the vocabulary counts
/// and duration; density compares `test` pairs against `train` pairs.
pub fn dataset_stats(
    train: &InteractionLog,
    test: &InteractionLog,
    full: &InteractionLog,
) -> Result<DatasetStats> {
    if !(Arc::ptr_eq(&train.vocab, &test.vocab) && Arc::ptr_eq(&train.vocab, &full.vocab)) {
        return Err(TclError::VocabMismatch);
    }
    if test.is_empty() {
        return Err(TclError::EmptyLog("test split".to_string()));
    }
    let train_pairs: HashSet<(NodeId, NodeId)> = train
        .events
        .iter()
        .map(|e| (e.source, e.target))
        .collect();
    let repeated = test
        .events
        .iter()
        .filter(|e| train_pairs.contains(&(e.source, e.target)))
        .count();
    Ok(DatasetStats {
        n_sources: full.sources.len(),
        n_targets: full.targets.len(),
        n_interactions: full.events.len(),
        repetition_density: repeated as f64 / test.events.len() as f64,
        duration_days: full.duration() / SECONDS_PER_DAY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(rows: &[(&str, &str, f64)]) -> InteractionLog {
        let mut vocab = Vocab::new();
        let events = rows
            .iter()
            .map(|(s, t, ts)| Interaction {
                source: vocab.intern(s),
                target: vocab.intern(t),
                timestamp: *ts,
            })
            .collect();
        InteractionLog::from_events(events, Arc::new(vocab))
    }

    #[test]
    fn load_sorts_by_timestamp_keeping_tie_order() {
        let text = "a x 5\nb y 1\nc z 1\n";
        let log = parse_interactions(text, &ColumnSpec::default(), "mem").unwrap();
        let ts: Vec<f64> = log.events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![1.0, 1.0, 5.0]);
        // the two t=1 rows keep file order: b before c
        assert_eq!(log.vocab.name(log.events[0].source), "b");
        assert_eq!(log.vocab.name(log.events[1].source), "c");
        assert_eq!(log.vocab.name(log.events[2].source), "a");
    }

    #[test]
    fn parse_error_names_line() {
        let mut text = String::new();
        for i in 0..6 {
            text.push_str(&format!("a b {i}\n"));
        }
        text.push_str("a b oops\n");
        let err = parse_interactions(&text, &ColumnSpec::default(), "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 7"), "got: {msg}");
        assert!(msg.contains("oops"), "got: {msg}");
    }

    #[test]
    fn empty_file_is_error() {
        let err = parse_interactions("", &ColumnSpec::default(), "mem").unwrap_err();
        assert!(matches!(err, TclError::EmptyLog(_)));
        let err = parse_interactions("\n  \n", &ColumnSpec::default(), "mem").unwrap_err();
        assert!(matches!(err, TclError::EmptyLog(_)));
    }

    #[test]
    fn extra_columns_ignored_and_custom_delimiter() {
        let cols = ColumnSpec {
            delimiter: Some(','),
            ..ColumnSpec::default()
        };
        let log = parse_interactions("a,b,3,junk,more\n", &cols, "mem").unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.events[0].timestamp, 3.0);
    }

    #[test]
    fn negative_or_nonfinite_timestamp_rejected() {
        for bad in ["a b -1", "a b inf", "a b nan"] {
            assert!(parse_interactions(bad, &ColumnSpec::default(), "mem").is_err());
        }
    }

    #[test]
    fn split_sizes_60_20_20() {
        let rows: Vec<(String, f64)> = (0..10).map(|i| (format!("s{i}"), i as f64)).collect();
        let rows: Vec<(&str, &str, f64)> = rows.iter().map(|(s, t)| (s.as_str(), "x", *t)).collect();
        let log = log_from(&rows);
        let spec = SplitSpec::parse("60/20/20").unwrap();
        let (tr, va, te) = chronological_split(&log, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
    }

    #[test]
    fn split_sizes_80_10_10() {
        let rows: Vec<(String, f64)> = (0..10).map(|i| (format!("s{i}"), i as f64)).collect();
        let rows: Vec<(&str, &str, f64)> = rows.iter().map(|(s, t)| (s.as_str(), "x", *t)).collect();
        let log = log_from(&rows);
        let spec = SplitSpec::parse("80/10/10").unwrap();
        let (tr, va, te) = chronological_split(&log, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_with_empty_piece_is_error() {
        let log = log_from(&[("a", "x", 0.0), ("b", "y", 1.0)]);
        let spec = SplitSpec::parse("60/20/20").unwrap();
        let err = chronological_split(&log, &spec).unwrap_err();
        assert!(matches!(err, TclError::EmptySplit { .. }));
    }

    #[test]
    fn split_concat_reproduces_input() {
        let rows: Vec<(String, f64)> = (0..23).map(|i| (format!("s{i}"), (i / 3) as f64)).collect();
        let rows: Vec<(&str, &str, f64)> = rows.iter().map(|(s, t)| (s.as_str(), "x", *t)).collect();
        let log = log_from(&rows);
        let spec = SplitSpec::parse("60/20/20").unwrap();
        let (tr, va, te) = chronological_split(&log, &spec).unwrap();
        let mut cat = tr.events.clone();
        cat.extend_from_slice(&va.events);
        cat.extend_from_slice(&te.events);
        assert_eq!(cat, log.events);
    }

    #[test]
    fn bad_split_fractions_rejected() {
        assert!(SplitSpec::parse("60/20/10").is_err());
        assert!(SplitSpec::parse("100/0/0").is_err());
        assert!(SplitSpec::new(0.5, 0.5, 0.0).is_err());
        assert!(SplitSpec::parse("60/20").is_err());
    }

    #[test]
    fn density_counts_test_event_multiplicity() {
        // train pairs {(a,x),(b,y)}, test events [(a,x),(a,z)] -> 0.5
        let full = log_from(&[
            ("a", "x", 0.0),
            ("b", "y", 1.0),
            ("a", "x", 2.0),
            ("a", "z", 3.0),
        ]);
        let spec = SplitSpec::new(0.5, 0.25, 0.25).unwrap();
        let (tr, va, te) = chronological_split(&full, &spec).unwrap();
        // train = [(a,x),(b,y)], val = [(a,x)], test = [(a,z)]
        let stats = dataset_stats(&tr, &va, &full).unwrap();
        assert_eq!(stats.repetition_density, 1.0);
        let stats = dataset_stats(&tr, &te, &full).unwrap();
        assert_eq!(stats.repetition_density, 0.0);
        // two-event test with one repeat -> 0.5
        let mut both = va.clone();
        both.events.extend_from_slice(&te.events);
        let stats = dataset_stats(&tr, &both, &full).unwrap();
        assert_eq!(stats.repetition_density, 0.5);
    }

    #[test]
    fn density_of_log_against_itself_is_one() {
        let log = log_from(&[("a", "x", 0.0), ("b", "y", 1.0), ("c", "z", 2.0)]);
        let stats = dataset_stats(&log, &log, &log).unwrap();
        assert_eq!(stats.repetition_density, 1.0);
    }

    #[test]
    fn stats_counts_and_duration() {
        let log = log_from(&[("a", "x", 0.0), ("b", "x", 43_200.0), ("a", "y", 86_400.0)]);
        let stats = dataset_stats(&log, &log, &log).unwrap();
        assert_eq!(stats.n_sources, 2);
        assert_eq!(stats.n_targets, 2);
        assert_eq!(stats.n_interactions, 3);
        assert!((stats.duration_days - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_test_split_is_error() {
        let log = log_from(&[("a", "x", 0.0)]);
        let empty = InteractionLog::from_events(vec![], Arc::clone(&log.vocab));
        assert!(dataset_stats(&log, &empty, &log).is_err());
    }

    #[test]
    fn sorted_load_equals_shuffled_load_modulo_ties() {
        // distinct timestamps: any permutation loads to the same event order
        let fwd = "a x 3\nb y 1\nc z 2\n";
        let rev = "b y 1\nc z 2\na x 3\n";
        let a = parse_interactions(fwd, &ColumnSpec::default(), "m").unwrap();
        let b = parse_interactions(rev, &ColumnSpec::default(), "m").unwrap();
        let names = |log: &InteractionLog| {
            log.events
                .iter()
                .map(|e| {
                    (
                        log.vocab.name(e.source).to_string(),
                        log.vocab.name(e.target).to_string(),
                        e.timestamp,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(names(&a), names(&b));
    }
}
