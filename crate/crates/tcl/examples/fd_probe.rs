// probe: criterion-5 pipeline — planted data, d=32 defaults, MR trajectory
use std::time::Instant;
use tcl::encoder::EncoderConfig;
use tcl::eval::evaluate;
use tcl::ingest::{chronological_split, InteractionLog, SplitSpec};
use tcl::objective::{train_with_hook, TrainConfig};
use tcl::synth::{planted_personal, PlantedConfig};

fn main() {
    let log = planted_personal(&PlantedConfig { seed: 11, ..PlantedConfig::default() });
    let split = SplitSpec::parse("60/20/20").unwrap();
    let (train_log, val_log, test_log) = chronological_split(&log, &split).unwrap();
    let enc = EncoderConfig::with_dim(32);
    let tcfg = TrainConfig { seed: 42, ..TrainConfig::default() };
    let candidates = log.target_candidates();
    println!("candidates: {}", candidates.len());
    // history for test eval = train + val
    let mut hist_events = train_log.events.clone();
    hist_events.extend_from_slice(&val_log.events);
    let history = InteractionLog::from_events(hist_events, log.vocab.clone());
    let t0 = Instant::now();
    let result = train_with_hook(&train_log, &enc, &tcfg, |epoch, params| {
        if epoch % 4 == 0 {
            let m = evaluate(params, &history, &test_log, &candidates)?;
            println!(
                "epoch {epoch:2} @ {:6.1}s: test MR {:6.2}  hit@10 {:.3}",
                t0.elapsed().as_secs_f64(),
                m.mean_rank,
                m.hit_at_10
            );
        }
        Ok(())
    })
    .unwrap();
    println!("train wall {:.1}s", t0.elapsed().as_secs_f64());
    let first = result.trace.first().unwrap().loss;
    let last = result.trace.last().unwrap().loss;
    println!("loss first {first:.4} last {last:.4} (drop {:.1}%)", 100.0 * (first - last) / first);
}
