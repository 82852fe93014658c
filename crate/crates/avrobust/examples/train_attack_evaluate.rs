//! End to end in library calls: train an audio classifier, learn a
//! frequency-masked universal perturbation, and compare clean and attacked
//! per-class AP.

use avrobust::attacks::{train_universal_perturbation, AttackConfig, Mask, Norm};
use avrobust::audiofeat::{synthesize_dataset, DatasetSpec, Split};
use avrobust::metrics::{compare_reports, evaluate, ReportMeta};
use avrobust::models::{train, CsnConfig, Model, ModelConfig, TrainConfig};

fn main() -> avrobust::Result<()> {
    let mut spec = DatasetSpec::default_with(4, 160, 0)?;
    spec.clip_seconds = 2.0;
    let ds = synthesize_dataset(&spec)?;
    let (train_set, eval_set) = (ds.split(Split::Train), ds.split(Split::Eval));

    let cfg = ModelConfig::Csn(CsnConfig {
        classes: 4,
        ..CsnConfig::default()
    });
    let mut model = Model::new(&cfg, 0)?;
    let outcome = train(&mut model, &train_set, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    println!("{} updates, final loss {:.4}", outcome.steps(), outcome.losses.last().unwrap());

    let names = ds.class_names();
    let clean = evaluate(&model, &eval_set, &names, None, ReportMeta::clean("in-memory", 0))?;

    let mut attack = AttackConfig::new(Norm::Linf, 5.0, 0.5)?;
    attack.steps = 20;
    attack.mask = Mask::freq(0, 32)?;
    let pert = train_universal_perturbation(&model, &train_set, &attack, "in-memory")?;
    let meta = ReportMeta {
        perturbation: "linf-5".into(),
        ..ReportMeta::clean("in-memory", 0)
    };
    let attacked = evaluate(&model, &eval_set, &names, Some(&pert.delta), meta)?;
    println!("mAP clean {:.3} attacked {:.3}", clean.aggregate.map, attacked.aggregate.map);

    let cmp = compare_reports(&clean, &attacked)?;
    print!("{}", cmp.to_csv());
    print!("{}", cmp.top_k(2).render());
    Ok(())
}
