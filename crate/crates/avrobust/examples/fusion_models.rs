//! Builds the classifier at every fusion stage plus the residual baseline
//! and runs one clip through each.

use avrobust::diffengine::Tensor;
use avrobust::models::{CsnConfig, FusionStage, Model, ModelConfig, ResNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> avrobust::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let audio = Tensor::new(&[40, 64], (0..40 * 64).map(|_| rng.gen_range(-3.0..1.0)).collect())?;
    let video = Tensor::new(&[16, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    for stage in FusionStage::ALL {
        let cfg = CsnConfig {
            classes: 5,
            fusion: stage,
            ..CsnConfig::default()
        };
        let m = Model::new(&ModelConfig::Csn(cfg), 0)?;
        let p = m.predict(&audio, stage.uses_video().then_some(&video))?;
        println!("{stage:<10} {:>7} params  probs {:.3?}", m.params().count(), p);
    }
    let resnet = Model::new(&ModelConfig::Resnet(ResNetConfig { classes: 5, ..ResNetConfig::default() }), 0)?;
    println!("{:<10} {:>7} params  probs {:.3?}", "resnet", resnet.params().count(), resnet.predict(&audio, None)?);
    Ok(())
}
