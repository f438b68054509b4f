//! Gait-embedding re-identification across race checkpoints.
//!
//! The engine consumes per-clip backbone features, average-pools them per
//! (runner, recording point), trains an L2-normalized projection head with a
//! triplet or quadruplet hinge loss, and scores probe-to-gallery retrieval
//! (mAP, CMC) under k-fold identity cross-validation.
//!
//! Runnable walkthroughs live in this crate's `examples/` directory:
//!
//! ```bash
//! cargo run -p gait-reid --release --example clip_pooling
//! cargo run -p gait-reid --release --example metric_losses
//! cargo run -p gait-reid --release --example projection_head
//! cargo run -p gait-reid --release --example raw_retrieval
//! cargo run -p gait-reid --release --example cross_validation
//! cargo run -p gait-reid --release --example critical_point
//! ```

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod optim;
pub mod seed;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{evaluate_stage, EvalReport, RawFeatures, StagePair};
pub use head::{HeadConfig, HeadParams, Mode};
pub use losses::{LossKind, Margins, Mining};
pub use store::{load_dataset, save_dataset, BackboneMeta, ClipDataset, Dataset, FootageEmbedding};
pub use synth::SynthConfig;
pub use trainer::{run_cv, TrainConfig};
