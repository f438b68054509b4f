//! Triplet and quadruplet hinge losses on hand-placed points, then mining
//! over a labelled batch of unit vectors.
//!
//! ```text
//! cargo run --example metric_losses
//! ```

use gait_reid::losses::{
    batch_loss, mine_batch, quadruplet_loss, quadruplet_loss_grad, sq_l2, triplet_loss, triplet_loss_grad,
};
use gait_reid::{LossKind, Margins, Mining};
use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gait_reid::Result<()> {
    let margins = Margins::default();
    let a = [0.0, 0.0];
    let p = [0.3, 0.0];
    let n1 = [0.0, 0.35];
    let n2 = [0.1, 0.5];
    println!("margins m1={} m2={}", margins.m1, margins.m2);
    println!("D(a,p)^2={:.3} D(a,n1)^2={:.3} D(n1,n2)^2={:.3}", sq_l2(&a, &p)?, sq_l2(&a, &n1)?, sq_l2(&n1, &n2)?);
    println!("triplet    {:.4}", triplet_loss(&a, &p, &n1, margins.m1)?);
    println!("quadruplet {:.4}", quadruplet_loss(&a, &p, &n1, &n2, margins)?);
    let tg = triplet_loss_grad(&a, &p, &n1, margins.m1)?;
    println!("triplet grad: anchor {:?} positive {:?} negative {:?}", tg.anchor, tg.positive, tg.negative);
    let qg = quadruplet_loss_grad(&a, &p, &n1, &n2, margins)?;
    println!("quadruplet grad: negative2 {:?}", qg.negative2);

    // Slide the second negative away until its hinge goes quiet: the
    // quadruplet loss then equals the triplet loss.
    for shift in [0.0, 0.2, 0.5] {
        let far = [n2[0] + shift, n2[1] + shift];
        println!(
            "n2 shifted by {shift}: quadruplet {:.4} vs triplet {:.4}",
            quadruplet_loss(&a, &p, &n1, &far, margins)?,
            triplet_loss(&a, &p, &n1, margins.m1)?
        );
    }

    // Six identities, two samples each, on the unit sphere in 8 dimensions.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..12).map(|i| i / 2).collect();
    let mut emb = Array2::<f64>::from_shape_simple_fn((12, 8), || StandardNormal.sample(&mut rng));
    for mut row in emb.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    println!();
    for loss in [LossKind::Triplet, LossKind::Quadruplet] {
        for mining in [Mining::Random, Mining::Hard] {
            let mined = mine_batch(emb.view(), &labels, None, loss, mining, 7)?;
            let bl = batch_loss(emb.view(), &mined, margins)?;
            println!(
                "{:<10} {:<6} {:>3} tuples, {:>3} active, mean loss {:.4}",
                loss.name(),
                format!("{mining:?}"),
                bl.total,
                bl.active,
                bl.loss
            );
        }
    }
    Ok(())
}
