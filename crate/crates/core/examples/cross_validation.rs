//! Identity-disjoint k-fold evaluation on the race layout: which runners each
//! stage can use, how they split into folds, and per-fold retrieval scores.
//!
//! ```text
//! cargo run --release --example cross_validation -- --epochs 20
//! ```

use clap::Parser;
use gait_reid::synth::generate;
use gait_reid::trainer::{eligible_identities, stage_fold_plan};
use gait_reid::{run_cv, HeadConfig, LossKind, StagePair, SynthConfig, TrainConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// triplet or quadruplet
    #[arg(long, default_value = "triplet")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> gait_reid::Result<()> {
    let args = Args::parse();
    let loss = match args.loss.as_str() {
        "triplet" => LossKind::Triplet,
        "quadruplet" => LossKind::Quadruplet,
        other => return Err(gait_reid::Error::InvalidConfig(format!("unknown loss {other:?}"))),
    };
    let data = generate(&SynthConfig {
        feature_dim: 32,
        clips_per_footage: 3,
        seed: args.seed,
        ..SynthConfig::race_membership()
    })?
    .pool()?;
    let cfg = TrainConfig {
        loss,
        epochs: args.epochs,
        folds: args.folds,
        head: HeadConfig {
            hidden_dim: 64,
            embed_dim: 32,
            ..HeadConfig::default()
        },
        seed: args.seed,
        ..TrainConfig::default()
    };

    for stage in [StagePair::new(1, 2)?, StagePair::new(2, 3)?] {
        let ids = eligible_identities(&data, stage);
        let plan = stage_fold_plan(&data, stage, &cfg)?;
        plan.check_partition(&ids.positives)?;
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        println!(
            "{stage}: {} positives, {} negative-only, fold sizes {sizes:?}",
            ids.positives.len(),
            ids.negative_only.len()
        );

        let run = run_cv(&data, stage, &cfg, 1)?;
        for (i, fold) in run.folds.iter().enumerate() {
            println!(
                "  fold {i}: {} probes vs {} gallery, mAP {:.3}, rank-1 {:.3}",
                fold.report.num_probes,
                fold.report.num_gallery,
                fold.report.map_value,
                fold.report.rank1()
            );
        }
        let maps = run.fold_maps();
        let mean = run.mean_map();
        let sd = (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (maps.len() - 1) as f64).sqrt();
        println!("  mean mAP {mean:.3} ± {sd:.3}, rank-1 {:.3}\n", run.mean_rank1());
    }
    Ok(())
}
