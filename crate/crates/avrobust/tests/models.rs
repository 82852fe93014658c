use avrobust::audiofeat::{synthesize_dataset, DatasetSpec, Split};
use avrobust::diffengine::gradcheck::check;
use avrobust::diffengine::{Graph, Tensor};
use avrobust::models::*;
use avrobust::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RTOL: f64 = 1e-4;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn toy_csn(fusion: FusionStage) -> CsnConfig {
    CsnConfig {
        n_mels: 16,
        channels: vec![2, 3],
        convs_per_block: 1,
        pools: vec![(2, 2), (2, 2)],
        transformer_blocks: 2,
        heads: 2,
        d_model: 8,
        ff_hidden: 8,
        classes: 3,
        dropout: 0.0,
        fusion,
        video_dim: 4,
        video_bins: 4,
        video_width: 4,
        late_audio_weight: 0.5,
    }
}

fn toy_resnet() -> ResNetConfig {
    ResNetConfig {
        n_mels: 16,
        channels: 3,
        pools: vec![(2, 2), (2, 2)],
        classes: 3,
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn targets(bits: &[f64]) -> Tensor {
    Tensor::new(&[bits.len()], bits.to_vec()).unwrap()
}

fn csn(fusion: FusionStage, seed: u64) -> Model {
    Model::new(&ModelConfig::Csn(toy_csn(fusion)), seed).unwrap()
}

fn csn_inner(m: &Model) -> &CsnModel {
    match m {
        Model::Csn(c) => c,
        _ => unreachable!(),
    }
}

#[test]
fn default_config_is_valid_and_downsamples_time_by_four() {
    let c = CsnConfig::default();
    c.validate().unwrap();
    assert_eq!(c.time_downsample_total(), 4);
    assert_eq!(c.conv_blocks(), 4);
    assert_eq!(c.pooled_bins(), 4);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_time = CsnConfig {
        pools: vec![(2, 2), (1, 2), (1, 2), (1, 2)],
        ..CsnConfig::default()
    };
    assert!(matches!(bad_time.validate(), Err(Error::Config(_))));
    let bad_heads = CsnConfig {
        heads: 3,
        ..CsnConfig::default()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let bad_drop = CsnConfig {
        dropout: 1.0,
        ..CsnConfig::default()
    };
    assert!(matches!(bad_drop.validate(), Err(Error::Config(_))));
    assert!(matches!(CsnModel::new(bad_heads, 0), Err(Error::Config(_))));
}

#[test]
fn fusion_stage_parses() {
    for f in FusionStage::ALL {
        assert_eq!(f.as_str().parse::<FusionStage>().unwrap(), f);
    }
    assert_eq!("Mid-1".parse::<FusionStage>().unwrap(), FusionStage::Mid1);
    assert!(matches!("middle".parse::<FusionStage>(), Err(Error::Config(_))));
}

#[test]
fn encoder_maps_400_frames_to_100() {
    let m = CsnModel::new(CsnConfig::default(), 1).unwrap();
    for (t, want) in [(400, 100), (8, 2)] {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let x = g.constant(random(&[t, 64], 2, 5.0));
        let h = m.audio_encoder_forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(h), &[want, 64]);
    }
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(random(&[10, 64], 2, 5.0));
    assert!(matches!(m.audio_encoder_forward(&mut g, &p, x), Err(Error::Dimension(_))));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let m = CsnModel::new(toy_csn(FusionStage::AudioOnly), 3).unwrap();
    let r = check(&[random(&[8, 16], 4, 2.0)], 0, H, FLOOR, |g, v| {
        let p = m.params().bind(g, false);
        let h = m.audio_encoder_forward(g, &p, v[0])?;
        g.sum_all(h)
    })
    .unwrap();
    assert!(r.passes(RTOL), "max rel err {}", r.max_rel_err);
}

#[test]
fn zeroed_output_weights_make_transformer_identity() {
    let mut m = CsnModel::new(toy_csn(FusionStage::AudioOnly), 5).unwrap();
    for name in ["tf0.wo.w", "tf0.ff2.w"] {
        let t = m.params_mut().by_name_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let x = random(&[5, 8], 6, 1.0);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = m.transformer_block_forward(&mut g, &p, 0, xv, Mode::EVAL).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn transformer_rejects_width_mismatch() {
    let m = CsnModel::new(toy_csn(FusionStage::AudioOnly), 5).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(random(&[4, 6], 1, 1.0));
    assert!(matches!(
        m.transformer_block_forward(&mut g, &p, 0, x, Mode::EVAL),
        Err(Error::Dimension(_))
    ));
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transformer_is_permutation_equivariant(seed in 0u64..1000, t in 1usize..12) {
        let m = CsnModel::new(toy_csn(FusionStage::AudioOnly), seed).unwrap();
        let x = random(&[t, 8], seed + 1, 2.0);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.reverse();
        perm.rotate_left(t / 3);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, false);
            let xv = g.constant(x.clone());
            let y = m.transformer_block_forward(&mut g, &p, 0, xv, Mode::EVAL).unwrap();
            let y = m.transformer_block_forward(&mut g, &p, 1, y, Mode::EVAL).unwrap();
            let pooled = m.attention_pool(&mut g, &p, y).unwrap();
            (g.value(y).clone(), g.value(pooled).clone())
        };
        let (y, py) = run(&x);
        let (yp, pyp) = run(&permute_rows(&x, &perm));
        prop_assert_eq!(y.shape(), &[t, 8][..]);
        prop_assert!(permute_rows(&y, &perm).max_abs_diff(&yp) < 1e-12);
        prop_assert!(py.max_abs_diff(&pyp) < 1e-12);
        prop_assert!(py.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn attention_pool_convex_combination_cases() {
    let mut m = CsnModel::new(toy_csn(FusionStage::AudioOnly), 8).unwrap();
    let p_target: f64 = 0.3;
    let logit = (p_target / (1.0 - p_target)).ln();
    for (name, fill) in [("head.p.w", 0.0), ("head.a.w", 0.0), ("head.a.b", 0.0), ("head.p.b", logit)] {
        let t = m.params_mut().by_name_mut(name).unwrap();
        *t = Tensor::full(t.shape(), fill).unwrap();
    }
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(random(&[6, 8], 1, 3.0));
    let out = m.attention_pool(&mut g, &p, x).unwrap();
    for &v in g.value(out).data() {
        assert!((v - p_target).abs() < 1e-12);
    }

    let m = CsnModel::new(toy_csn(FusionStage::AudioOnly), 9).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(random(&[1, 8], 2, 3.0));
    let out = m.attention_pool(&mut g, &p, x).unwrap();
    let w = m.params().by_name("head.p.w").unwrap();
    let xs = random(&[1, 8], 2, 3.0);
    for c in 0..3 {
        let z: f64 = (0..8).map(|k| xs.data()[k] * w.get2(k, c)).sum();
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((g.value(out).data()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn audio_only_ignores_video_bitwise() {
    let m = csn(FusionStage::AudioOnly, 10);
    let x = random(&[8, 16], 1, 3.0);
    let a = m.predict(&x, Some(&random(&[4, 3], 2, 1.0))).unwrap();
    let b = m.predict(&x, Some(&random(&[4, 3], 3, 50.0))).unwrap();
    let c = m.predict(&x, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn fusion_models_require_video() {
    for f in [FusionStage::Early, FusionStage::Mid1, FusionStage::Mid2, FusionStage::Late] {
        let m = csn(f, 1);
        assert!(matches!(m.predict(&random(&[8, 16], 1, 1.0), None), Err(Error::Validation(_))));
        assert!(matches!(
            m.predict(&random(&[8, 16], 1, 1.0), Some(&random(&[5, 3], 1, 1.0))),
            Err(Error::Dimension(_))
        ));
    }
}

#[test]
fn late_fusion_with_identical_branches_returns_that_probability() {
    let mut m = csn(FusionStage::Late, 11);
    for head in ["head", "late.head"] {
        for (suffix, fill) in [("p.w", 0.0), ("p.b", 0.7), ("a.w", 0.0), ("a.b", 0.0)] {
            let t = m.params_mut().by_name_mut(&format!("{head}.{suffix}")).unwrap();
            *t = Tensor::full(t.shape(), fill).unwrap();
        }
    }
    let out = m.predict(&random(&[8, 16], 1, 3.0), Some(&random(&[4, 3], 2, 1.0))).unwrap();
    let want = 1.0 / (1.0 + (-0.7f64).exp());
    for v in out {
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn early_fusion_routes_gradient_to_video() {
    let m = csn(FusionStage::Early, 12);
    let x = random(&[8, 16], 1, 3.0);
    let v = random(&[4, 3], 2, 1.0);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let xa = g.constant(x.clone());
    let vv = g.leaf(v.clone().with_grad());
    let out = m.forward(&mut g, &p, xa, Some(vv), Mode::EVAL).unwrap();
    let s = g.sum_all(out).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(vv).unwrap().norm_l2() > 0.0);
    let zero = m.predict(&x, Some(&Tensor::zeros(&[4, 3]))).unwrap();
    assert_ne!(zero, m.predict(&x, Some(&v)).unwrap());
}

fn end_to_end_check(m: &Model, seed: u64) {
    let x = random(&[8, 16], seed, 3.0);
    let v = random(&[4, 3], seed + 1, 1.0);
    let y = targets(&[1.0, 0.0, 1.0]);
    let r = check(&[x, v], 0, H, FLOOR, |g, vars| {
        let p = m.params().bind(g, false);
        let video = if m.fusion().uses_video() { Some(vars[1]) } else { None };
        let probs = m.forward(g, &p, vars[0], video, Mode::EVAL)?;
        g.bce_probs(probs, &y)
    })
    .unwrap();
    assert!(r.passes(RTOL), "{:?}: max rel err {}", m.fusion(), r.max_rel_err);
}

#[test]
fn end_to_end_input_gradients_match_finite_differences() {
    for (i, f) in FusionStage::ALL.into_iter().enumerate() {
        for seed in 0..2 {
            end_to_end_check(&csn(f, 20 + seed), 100 * i as u64 + seed);
        }
    }
    for seed in 0..2 {
        end_to_end_check(&Model::new(&ModelConfig::Resnet(toy_resnet()), seed).unwrap(), 7 + seed);
    }
}

#[test]
fn input_gradient_agrees_with_graph_gradient() {
    let m = csn(FusionStage::Mid2, 3);
    let x = random(&[8, 16], 1, 3.0);
    let d = random(&[8, 16], 2, 0.1);
    let v = random(&[4, 3], 3, 1.0);
    let y = targets(&[0.0, 1.0, 0.0]);
    let (loss, grad) = m.input_gradient(&x, &d, Some(&v), &y).unwrap();
    let r = check(&[d], 0, H, FLOOR, |g, vars| {
        let p = m.params().bind(g, false);
        let xc = g.constant(x.clone());
        let xd = g.add(xc, vars[0])?;
        let vc = g.constant(v.clone());
        let probs = m.forward(g, &p, xd, Some(vc), Mode::EVAL)?;
        g.bce_probs(probs, &y)
    })
    .unwrap();
    assert_eq!(r.analytic.as_slice(), grad.data());
    assert!(r.passes(RTOL));
    assert!(loss.is_finite() && loss > 0.0);
    assert!(matches!(
        m.input_gradient(&x, &Tensor::zeros(&[4, 16]), Some(&v), &y),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn late_fusion_gradient_is_half_the_audio_branch_gradient() {
    let mut late = csn(FusionStage::Late, 30);
    for name in late.params().names().to_vec() {
        if name.starts_with("late.") {
            let t = late.params_mut().by_name_mut(&name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut audio = csn(FusionStage::AudioOnly, 0);
    for name in audio.params().names().to_vec() {
        let t = late.params().by_name(&name).unwrap().clone();
        audio.params_mut().set(&name, t).unwrap();
    }
    let x = random(&[8, 16], 4, 3.0);
    let v = random(&[4, 3], 5, 1.0);
    let grad_of_sum = |m: &Model| {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let xv = g.leaf(x.clone().with_grad());
        let vv = g.constant(v.clone());
        let out = m.forward(&mut g, &p, xv, Some(vv), Mode::EVAL).unwrap();
        let s = g.sum_all(out).unwrap();
        g.backward(s).unwrap().get(xv).unwrap().clone()
    };
    let gl = grad_of_sum(&late);
    let ga = grad_of_sum(&audio);
    assert!(ga.norm_l2() > 0.0);
    for (a, b) in gl.data().iter().zip(ga.data()) {
        assert!((a - 0.5 * b).abs() <= 1e-12 * b.abs().max(1e-12));
    }
}

#[test]
fn r21d_window_counts() {
    let cfg = R21dConfig {
        window: 8,
        height: 3,
        width: 3,
        spatial_channels: 2,
        temporal_channels: 3,
        out_dim: 5,
    };
    let b = R21dBlock::new(cfg, 1).unwrap();
    assert_eq!(b.embed(&random(&[32, 3, 3], 1, 1.0)).unwrap().shape(), &[5, 4]);
    let e33 = b.embed(&random(&[33, 3, 3], 1, 1.0)).unwrap();
    assert_eq!(e33.shape(), &[5, 5]);
    // The padded window holds frame 32 followed by zeros.
    let mut last = vec![0.0; 8 * 9];
    last[..9].copy_from_slice(&random(&[33, 3, 3], 1, 1.0).data()[32 * 9..]);
    let alone = b.embed(&Tensor::new(&[8, 3, 3], last).unwrap()).unwrap();
    for r in 0..5 {
        assert_eq!(e33.get2(r, 4), alone.get2(r, 0));
    }
    assert!(matches!(b.embed(&random(&[8, 4, 3], 1, 1.0)), Err(Error::Dimension(_))));
}

#[test]
fn r21d_gradient_matches_finite_differences() {
    let cfg = R21dConfig {
        window: 3,
        height: 4,
        width: 3,
        spatial_channels: 2,
        temporal_channels: 3,
        out_dim: 4,
    };
    let b = R21dBlock::new(cfg, 2).unwrap();
    let r = check(&[random(&[3, 4, 3], 3, 1.0)], 0, H, FLOOR, |g, v| {
        let p = b.params().bind(g, false);
        let e = b.forward(g, &p, v[0])?;
        let sq = g.mul(e, e)?;
        g.sum_all(sq)
    })
    .unwrap();
    assert!(r.passes(RTOL), "{}", r.max_rel_err);
    let r = check(&[random(&[7, 4, 3], 4, 1.0)], 0, H, FLOOR, |g, v| {
        let p = b.params().bind(g, false);
        let e = b.encode_video(g, &p, v[0])?;
        g.sum_all(e)
    })
    .unwrap();
    assert!(r.passes(RTOL), "{}", r.max_rel_err);
}

#[test]
fn resnet_with_zero_residual_convs_reduces_to_pooled_stem() {
    let mut m = ResNetModel::new(toy_resnet(), 3).unwrap();
    for name in m.params().names().to_vec() {
        if name.starts_with("res") {
            let t = m.params_mut().by_name_mut(&name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = random(&[8, 16], 1, 3.0);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let xv = g.constant(x);
    let stem = m.stem_forward(&mut g, &p, xv).unwrap();
    let out = m.forward(&mut g, &p, xv).unwrap();
    let s = g.value(stem);
    let (c, area) = (s.shape()[0], s.shape()[1] * s.shape()[2]);
    let means: Vec<f64> = s.data().chunks(area).map(|ch| ch.iter().sum::<f64>() / area as f64).collect();
    let w = m.params().by_name("out.w").unwrap();
    let b = m.params().by_name("out.b").unwrap();
    for k in 0..3 {
        let z = b.data()[k] + (0..c).map(|i| means[i] * w.get2(i, k)).sum::<f64>();
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((g.value(out).data()[k] - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probabilities_stay_in_open_unit_interval(seed in 0u64..1000, scale in 0.1f64..20.0, f in 0usize..6) {
        let x = random(&[8, 16], seed, scale);
        let v = random(&[4, 3], seed + 1, scale);
        let m = if f == 5 {
            Model::new(&ModelConfig::Resnet(toy_resnet()), seed).unwrap()
        } else {
            csn(FusionStage::ALL[f], seed)
        };
        let out = m.predict(&x, Some(&v)).unwrap();
        prop_assert_eq!(out.len(), 3);
        prop_assert!(out.iter().all(|&p| p > 0.0 && p < 1.0), "{:?}", out);
    }
}

#[test]
fn balancing_equalizes_group_norms() {
    let mut grads = vec![Tensor::full(&[2], 3.0).unwrap(), Tensor::full(&[3], 0.1).unwrap()];
    let groups = [ParamGroup::Audio, ParamGroup::Video];
    let (na, nv) = balance_gradients(&mut grads, &groups).unwrap();
    assert!((na - nv).abs() < 1e-12);
    let want = 0.5 * (18f64.sqrt() + 0.03f64.sqrt());
    assert!((na - want).abs() < 1e-12);
    let mut zero = vec![Tensor::full(&[2], 1.0).unwrap(), Tensor::zeros(&[3])];
    assert!(balance_gradients(&mut zero, &groups).is_none());
    assert_eq!(zero[0].data(), &[1.0, 1.0]);
}

fn toy_dataset(seed: u64) -> avrobust::audiofeat::Dataset {
    let mut spec = DatasetSpec::default_with(3, 20, seed).unwrap();
    spec.clip_seconds = 1.0;
    spec.eval_fraction = 0.0;
    spec.video_windows = 4;
    spec.max_labels = 1;
    synthesize_dataset(&spec).unwrap()
}

fn small_csn(fusion: FusionStage) -> ModelConfig {
    ModelConfig::Csn(CsnConfig {
        channels: vec![4, 8, 8, 8],
        d_model: 16,
        heads: 2,
        ff_hidden: 32,
        classes: 3,
        dropout: 0.0,
        fusion,
        ..CsnConfig::default()
    })
}

#[test]
fn toy_training_overfits() {
    let ds = toy_dataset(1);
    let clips = ds.split(Split::Train);
    assert_eq!(clips.len(), 20);
    let mut model = Model::new(&small_csn(FusionStage::AudioOnly), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch: 4,
        lr: 3e-3,
        seed: 1,
        balance: true,
        max_steps: Some(200),
    };
    let out = train(&mut model, &clips, &cfg).unwrap();
    assert_eq!(out.steps(), 200);
    let first = out.losses[0];
    let last = out.losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.25 * first, "initial {first}, final {last}");
    assert!(out.balanced_norms.is_empty());
}

#[test]
fn training_is_bit_reproducible_and_seed_sensitive() {
    let ds = toy_dataset(2);
    let clips = ds.split(Split::Train);
    let run = |seed: u64| {
        let mut model = Model::new(&small_csn(FusionStage::Mid1), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 5,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &clips, &cfg).unwrap();
        let ck = Checkpoint {
            model,
            adam: Some(out.adam),
            step: out.losses.len() as u64,
            rng_state: Some(RngState::capture(&out.rng)),
        };
        encode_checkpoint(&ck).unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn fusion_training_balances_every_step() {
    let ds = toy_dataset(3);
    let clips = ds.split(Split::Train);
    for fusion in [FusionStage::Early, FusionStage::Late] {
        let mut model = Model::new(&small_csn(fusion), 3).unwrap();
        let before = model.params().clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 5,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &clips, &cfg).unwrap();
        assert_eq!(out.balanced_norms.len(), out.steps());
        for (a, v) in &out.balanced_norms {
            assert!((a - v).abs() <= 1e-9 * a.max(*v), "{a} vs {v}");
        }
        // Both branches moved.
        for group in [ParamGroup::Audio, ParamGroup::Video] {
            let moved = (0..before.len())
                .filter(|&i| model.params().groups()[i] == group)
                .any(|i| model.params().get(i) != before.get(i));
            assert!(moved, "{fusion}: {group:?} branch did not train");
        }
    }
}

#[test]
fn empty_training_split_is_rejected() {
    let mut model = Model::new(&small_csn(FusionStage::AudioOnly), 1).unwrap();
    assert!(matches!(train(&mut model, &[], &TrainConfig::default()), Err(Error::Validation(_))));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in [small_csn(FusionStage::Late), ModelConfig::Resnet(toy_resnet())].into_iter().enumerate() {
        let model = Model::new(&cfg, 9).unwrap();
        let adam = avrobust::diffengine::AdamState::new(Default::default(), model.params().tensors());
        let rng = ChaCha8Rng::seed_from_u64(4);
        let ck = Checkpoint {
            model,
            adam: Some(adam),
            step: 17,
            rng_state: Some(RngState::capture(&rng)),
        };
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.model.config(), cfg);
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.rng_state.as_ref().unwrap().restore().unwrap(), rng);
        let n = cfg.n_mels();
        let x = random(&[8, n], 1, 3.0);
        let v = random(&[16, 10], 2, 1.0);
        let a = ck.model.predict(&x, Some(&v)).unwrap();
        let b = back.model.predict(&x, Some(&v)).unwrap();
        assert_eq!(
            a.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
        save_checkpoint(&dir.path().join("again"), &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again")).unwrap());
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(Model::new(&small_csn(FusionStage::AudioOnly), 1).unwrap());
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    for cut in [4, 100, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })), "cut at {cut}");
    }

    let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":7");
    let p = dir.path().join("v7");
    std::fs::write(&p, text.as_bytes()).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
}

#[test]
fn mismatched_class_count_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::new(Model::new(&small_csn(FusionStage::AudioOnly), 1).unwrap())).unwrap();
    let ModelConfig::Csn(mut wide) = small_csn(FusionStage::AudioOnly) else { unreachable!() };
    wide.classes = 10;
    match load_checkpoint_expecting(&path, &ModelConfig::Csn(wide)) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("head.p.w"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parameter_counts_are_reported() {
    let m = csn(FusionStage::Late, 0);
    assert!(m.params().count() > 0);
    assert_eq!(m.params().names().len(), m.params().len());
    assert!(m.params().groups().contains(&ParamGroup::Video));
    assert!(!csn(FusionStage::AudioOnly, 0).params().groups().contains(&ParamGroup::Video));
    let _ = csn_inner(&m).config();
}
