//! Stage comparison on a synthetic race where the second transition drifts
//! less than the first. Prints mAP and rank-1 per loss and stage, averaged
//! over seeds and folds.
//!
//! ```text
//! cargo run --release --example critical_point
//! cargo run --release --example critical_point -- --ratio 1.0 --per-seed   # control
//! ```

use std::time::Instant;

use clap::Parser;
use gait_reid::optim::AdamConfig;
use gait_reid::synth::{generate, plant_drift_ratio, CP_DRIFT_RATIO};
use gait_reid::trainer::run_cv;
use gait_reid::{HeadConfig, LossKind, StagePair, SynthConfig, TrainConfig};

#[derive(Parser)]
struct Args {
    /// Number of root seeds to average over.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Stage-2 drift as a multiple of stage-1 drift.
    #[arg(long, default_value_t = CP_DRIFT_RATIO)]
    ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    drift: f64,
    /// Fraction of the drift shared by all runners.
    #[arg(long, default_value_t = 0.8)]
    shared: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    embed: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Per-epoch learning-rate decay.
    #[arg(long, default_value_t = 0.97)]
    decay: f64,
    /// Print the gap of every seed.
    #[arg(long)]
    per_seed: bool,
}

fn main() -> gait_reid::Result<()> {
    let args = Args::parse();
    let stages = [StagePair::new(1, 2)?, StagePair::new(2, 3)?];
    let losses = [LossKind::Triplet, LossKind::Quadruplet];
    // [loss][stage] -> per-seed (mAP, rank-1)
    let mut cells = vec![vec![Vec::new(); stages.len()]; losses.len()];
    let started = Instant::now();

    for seed in args.first_seed..args.first_seed + args.seeds {
        let base = SynthConfig {
            drift_sigma: vec![args.drift; 3],
            shared_drift_fraction: args.shared,
            ..SynthConfig::cp_reference(seed)
        };
        let data = generate(&plant_drift_ratio(&base, args.ratio)?)?.pool()?;
        for (li, &loss) in losses.iter().enumerate() {
            let reference = TrainConfig::cp_reference(loss, seed);
            let cfg = TrainConfig {
                epochs: args.epochs,
                head: HeadConfig {
                    hidden_dim: args.hidden,
                    embed_dim: args.embed,
                    ..reference.head
                },
                optimizer: AdamConfig {
                    learning_rate: args.lr,
                    ..reference.optimizer
                },
                lr_decay: args.decay,
                ..reference
            };
            for (si, &stage) in stages.iter().enumerate() {
                let run = run_cv(&data, stage, &cfg, 1)?;
                cells[li][si].push((run.mean_map(), run.mean_rank1()));
            }
            if args.per_seed {
                let (a, b) = (cells[li][0].last().unwrap(), cells[li][1].last().unwrap());
                println!(
                    "seed {seed:<3} {:<10} mAP gap {:+5.1}  rank-1 gap {:+5.1}",
                    loss.name(),
                    100.0 * (b.0 - a.0),
                    100.0 * (b.1 - a.1)
                );
            }
        }
    }

    println!("{:<18} {:>9} {:>9} {:>7}", "", "RP1->RP2", "RP2->RP3", "gap");
    for (li, loss) in losses.iter().enumerate() {
        let mean = |si: usize, pick: fn(&(f64, f64)) -> f64| {
            let v = &cells[li][si];
            100.0 * v.iter().map(pick).sum::<f64>() / v.len() as f64
        };
        for (label, pick) in [("mAP", (|c: &(f64, f64)| c.0) as fn(&(f64, f64)) -> f64), ("rank-1", |c| c.1)] {
            let (s1, s2) = (mean(0, pick), mean(1, pick));
            println!("{:<18} {:>8.1}% {:>8.1}% {:>+7.1}", format!("{} {label}", loss.name()), s1, s2, s2 - s1);
        }
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
