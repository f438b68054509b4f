//! The projection head on its own: forward passes in both modes, a short
//! Adam run that pulls same-label rows together, and a checkpoint round trip.
//!
//! ```text
//! cargo run --example projection_head
//! ```

use gait_reid::losses::{batch_loss, mine_batch};
use gait_reid::optim::{AdamConfig, OptimizerState};
use gait_reid::{HeadConfig, HeadParams, LossKind, Margins, Mining, Mode};
use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gait_reid::Result<()> {
    let cfg = HeadConfig {
        hidden_dim: 32,
        embed_dim: 8,
        ..HeadConfig::default()
    };
    let mut head = HeadParams::init(16, &cfg, 1)?;

    // Four identities, four noisy views each.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let centers = Array2::from_shape_simple_fn((4, 16), &mut gauss);
    let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
    let batch = Array2::from_shape_fn((16, 16), |(r, c)| centers[[labels[r], c]] + 1.5 * gauss());

    let (y, _) = head.forward(batch.view(), Mode::Train)?;
    let norms: Vec<String> = y.rows().into_iter().take(4).map(|r| format!("{:.6}", r.dot(&r).sqrt())).collect();
    println!("output rows are unit length: {}", norms.join(" "));

    let mut opt = OptimizerState::new(&head, AdamConfig::default());
    for step in 0..=40 {
        let (emb, cache) = head.forward_train(batch.view())?;
        let mined = mine_batch(emb.view(), &labels, None, LossKind::Triplet, Mining::Hard, step)?;
        let bl = batch_loss(emb.view(), &mined, Margins::default())?;
        if step % 5 == 0 {
            println!("step {step:>2}: loss {:.4}, {} of {} triplets active", bl.loss, bl.active, bl.total);
        }
        let grads = head.backward(&cache, bl.grad.view())?;
        opt.step(&mut head, &grads)?;
    }

    // Inference uses the running batch-norm statistics gathered above.
    let single = batch.slice(ndarray::s![0..1, ..]);
    println!("infer-mode embedding of one row: {:.3}", head.embed(single)?);

    let path = std::env::temp_dir().join(format!("gait-reid-head-{}.json", std::process::id()));
    head.save(&path)?;
    let restored = HeadParams::load(&path)?;
    std::fs::remove_file(&path)?;
    println!("checkpoint round trip exact: {}", restored == head);
    Ok(())
}
