//! From frames to footage vectors: the clip schedule for a seven-second
//! recording, a clip-level embedding file, and the pooled vectors it loads as.
//!
//! ```text
//! cargo run --example clip_pooling
//! ```

use gait_reid::store::{clip_schedule, load_clip_dataset, save_clip_dataset, ClipEmbedding};
use gait_reid::{load_dataset, BackboneMeta, ClipDataset};

fn main() -> gait_reid::Result<()> {
    // 7 s at 25 fps, seven 8-frame clips.
    let windows = clip_schedule(175, 8, 7)?;
    for (i, w) in windows.iter().enumerate() {
        println!("clip {i}: frames {}..{}", w.start, w.end());
    }

    // Stand-in backbone features: each clip vector encodes where it starts.
    let meta = BackboneMeta::new("toy", 8, 3)?;
    let mut clips = Vec::new();
    for (runner, offset) in [("R001", 0.0), ("R002", 10.0)] {
        for rp in 1..=2u32 {
            for (i, w) in windows.iter().enumerate() {
                clips.push(ClipEmbedding {
                    runner_id: runner.into(),
                    recording_point: rp,
                    clip_index: i,
                    vector: vec![offset + w.start as f64 / 175.0, rp as f64, 1.0],
                });
            }
        }
    }
    let dataset = ClipDataset::new(meta, clips)?;

    let dir = std::env::temp_dir().join(format!("gait-reid-clip-pooling-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("clips.csv");
    save_clip_dataset(&dataset, &path)?;
    let text = std::fs::read_to_string(&path)?;
    println!("\n{}", text.lines().take(3).collect::<Vec<_>>().join("\n"));
    println!("... {} rows\n", text.lines().count() - 1);

    assert_eq!(load_clip_dataset(&path)?, dataset);
    let pooled = load_dataset(&path)?;
    for rec in pooled.records() {
        println!("{} @ RP{}: {:?}", rec.runner_id, rec.recording_point, rec.vector);
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
