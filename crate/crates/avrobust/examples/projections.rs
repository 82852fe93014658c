//! Projections onto the l1, l2 and linf balls and a single PGD step.

use avrobust::attacks::{pgd_step, project, AttackConfig, Mask, Norm};
use avrobust::diffengine::Tensor;

fn main() -> avrobust::Result<()> {
    let v = Tensor::new(&[1, 4], vec![3.0, -1.0, 0.5, 2.0])?;
    for p in [Norm::L1, Norm::L2, Norm::Linf] {
        let q = project(&v, p, 1.0)?;
        println!("{p:>4}: {:?} (norm {:.3})", q.data(), p.of(&q));
    }

    let mut cfg = AttackConfig::new(Norm::L2, 0.5, 0.2)?;
    cfg.mask = Mask::freq(1, 3)?;
    let delta = Tensor::zeros(&[2, 4]);
    let grad = Tensor::new(&[2, 4], vec![1.0, 2.0, -2.0, 5.0, 0.0, 1.0, 1.0, -4.0])?;
    let mut d = delta;
    for step in 1..=4 {
        d = pgd_step(&d, &grad, &cfg)?;
        println!("step {step}: {:?} l2 {:.3}", d.data(), d.norm_l2());
    }
    Ok(())
}
