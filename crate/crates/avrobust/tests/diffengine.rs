use avrobust::diffengine::gradcheck::{self, GradCheck};
use avrobust::diffengine::{Graph, PoolMode, Tensor, Var};
use avrobust::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_check(c: GradCheck, rtol: f64, what: &str) {
    assert!(c.passes(rtol), "{what}: max rel err {:e}", c.max_rel_err);
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(v, w).unwrap();
    g.sum_all(p).unwrap()
}

#[test]
fn tensor_rejects_non_finite_and_bad_shapes() {
    assert!(matches!(Tensor::new(&[2], vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    assert!(matches!(Tensor::new(&[1], vec![f64::INFINITY]), Err(Error::NonFinite(_))));
    assert!(matches!(Tensor::new(&[2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let p = g.matmul(a, id).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[3.0]);

    let err = g.matmul(r, r).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[3, 4], &mut rng), random(&[4, 5], &mut rng)];
    for which in 0..2 {
        let c = gradcheck::check(&inputs, which, H, FLOOR, |g, v| {
            let p = g.matmul(v[0], v[1])?;
            g.sum_all(p)
        })
        .unwrap();
        assert_check(c, 1e-6, "matmul");
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k1 = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, k1, (0, 0)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);

    let k2 = g.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
    let y = g.conv2d(x, k2, (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);

    // Padded output extents follow T + 2p - kh + 1.
    let k3 = g.constant(t(&[2, 1, 3, 3], &[0.5; 18]));
    let y = g.conv2d(x, k3, (1, 1)).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 2]);

    let big = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
    assert!(matches!(g.conv2d(x, big, (0, 0)), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[2, 5, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
    for which in 0..2 {
        let c = gradcheck::check(&inputs, which, H, FLOOR, |g, v| {
            let y = g.conv2d(v[0], v[1], (1, 1))?;
            Ok(weighted_sum(g, y, 9))
        })
        .unwrap();
        assert_check(c, 1e-5, "conv2d");
    }
}

#[test]
fn pool_examples_and_max_routing() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
    let m = g.pool(x, (2, 2), PoolMode::Max).unwrap();
    assert_eq!(g.value(m).data(), &[4.0]);
    let s = g.sum_all(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.pool(x, (2, 2), PoolMode::Mean).unwrap();
    assert_eq!(g.value(m).data(), &[2.5]);
    assert!(matches!(g.pool(x, (3, 1), PoolMode::Max), Err(Error::Dimension(_))));
    assert!(matches!(g.pool(x, (0, 1), PoolMode::Max), Err(Error::Dimension(_))));

    // Remainder frames are dropped.
    let x = g.constant(random(&[2, 5, 7], &mut ChaCha8Rng::seed_from_u64(3)));
    let m = g.pool(x, (2, 3), PoolMode::Mean).unwrap();
    assert_eq!(g.shape(m), &[2, 2, 2]);
}

#[test]
fn pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[2, 6, 8], &mut rng)];
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let c = gradcheck::check(&inputs, 0, H, FLOOR, |g, v| {
            let y = g.pool(v[0], (2, 2), mode)?;
            Ok(weighted_sum(g, y, 5))
        })
        .unwrap();
        assert_check(c, 1e-4, "pool");
    }
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    let zz = g.constant(t(&[2], &[0.0, 0.0]));
    let sm = g.softmax_last(zz).unwrap();
    assert_eq!(g.value(sm).data(), &[0.5, 0.5]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[-3.0, 3.0]).with_grad());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    let s = g.sum_all(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-2.0, 0.25, 2.0]).with_grad());
    let c = g.clamp(x, -1.0, 1.0).unwrap();
    assert_eq!(g.value(c).data(), &[-1.0, 0.25, 1.0]);
    let s = g.sum_all(c).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn pointwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![random(&[3, 5], &mut rng)];
    for kind in 0..4 {
        let c = gradcheck::check(&inputs, 0, H, FLOOR, |g, v| {
            let y = match kind {
                0 => g.relu(v[0])?,
                1 => g.sigmoid(v[0])?,
                2 => g.clamp(v[0], -0.5, 0.5)?,
                _ => g.softmax_last(v[0])?,
            };
            Ok(weighted_sum(g, y, 7))
        })
        .unwrap();
        assert_check(c, 1e-4, "pointwise");
    }
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let q = g.constant(random(&[4, 6], &mut rng));
    let krow: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
    let k = g.constant(t(&[4, 6], &krow.repeat(4)));
    let vt = random(&[4, 6], &mut rng);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v, 2).unwrap();
    for row in g.value(o).data().chunks(6) {
        for j in 0..6 {
            let mean = (0..4).map(|i| vt.get2(i, j)).sum::<f64>() / 4.0;
            assert!((row[j] - mean).abs() < 1e-12);
        }
    }

    let single = random(&[1, 4], &mut rng);
    let q = g.constant(random(&[1, 4], &mut rng));
    let k = g.constant(random(&[1, 4], &mut rng));
    let v = g.constant(single.clone());
    let o = g.attention(q, k, v, 2).unwrap();
    assert_eq!(g.value(o).data(), single.data());

    assert!(matches!(g.attention(q, k, v, 3), Err(Error::Config(_))));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![
        random(&[5, 6], &mut rng),
        random(&[5, 6], &mut rng),
        random(&[5, 6], &mut rng),
    ];
    for which in 0..3 {
        let c = gradcheck::check(&inputs, which, H, FLOOR, |g, v| {
            let o = g.attention(v[0], v[1], v[2], 3)?;
            Ok(weighted_sum(g, o, 11))
        })
        .unwrap();
        assert_check(c, 1e-5, "attention");
    }
}

#[test]
fn dropout_contract() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert_eq!(g.dropout(x, 0.0, 1, true).unwrap(), x);
    assert_eq!(g.dropout(x, 0.9, 1, false).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, 1, true), Err(Error::Config(_))));
    assert!(matches!(g.dropout(x, -0.1, 1, false), Err(Error::Config(_))));
}

#[test]
fn dropout_preserves_the_mean_over_seeded_draws() {
    let data: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 0.25).collect();
    let mut acc = vec![0.0; data.len()];
    let draws = 10_000;
    for seed in 0..draws {
        let mut g = Graph::new();
        let x = g.constant(t(&[16], &data));
        let y = g.dropout(x, 0.5, seed, true).unwrap();
        for (a, v) in acc.iter_mut().zip(g.value(y).data()) {
            *a += v;
        }
    }
    let mean_in: f64 = data.iter().sum::<f64>() / 16.0;
    let mean_out: f64 = acc.iter().sum::<f64>() / (16.0 * draws as f64);
    assert!((mean_out - mean_in).abs() / mean_in < 0.02, "{mean_out} vs {mean_in}");
    for (a, x) in acc.iter().zip(&data) {
        let m = a / draws as f64;
        assert!((m - x).abs() / x < 0.05, "per-entry mean {m} vs {x}");
    }
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let y = t(&[1, 1], &[1.0]);
    let z = g.constant(t(&[1, 1], &[0.0]));
    let l = g.bce_logits(z, &y).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let z = g.constant(t(&[1, 1], &[50.0]));
    let l = g.bce_logits(z, &y).unwrap();
    assert!(g.value(l).item().abs() < 1e-20 && g.value(l).item().is_finite());
    let z = g.constant(t(&[1, 1], &[-50.0]));
    let l = g.bce_logits(z, &y).unwrap();
    assert!((g.value(l).item() - 50.0).abs() < 1e-12);

    let bad = t(&[1, 1], &[0.5]);
    assert!(matches!(g.bce_logits(z, &bad), Err(Error::Validation(_))));
}

#[test]
fn bce_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = random(&[3, 4], &mut rng);
    let targets = Tensor::new(&[3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let c = gradcheck::check(&[logits.clone()], 0, H, FLOOR, |g, v| g.bce_logits(v[0], &targets)).unwrap();
    assert_check(c, 1e-4, "bce_logits");
    let probs = logits.map(|z| 1.0 / (1.0 + (-z).exp())).unwrap();
    let c = gradcheck::check(&[probs], 0, H, FLOOR, |g, v| g.bce_probs(v[0], &targets)).unwrap();
    assert_check(c, 1e-4, "bce_probs");
}

#[test]
fn backward_examples_and_state_errors() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
    let unused = g.leaf(t(&[3], &[1.0, 1.0, 1.0]).with_grad());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(matches!(g.backward(s), Err(Error::State(_))));
}

#[test]
fn shape_plumbing_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![random(&[2, 3, 4], &mut rng), random(&[4, 6], &mut rng), random(&[6], &mut rng)];
    for which in 0..3 {
        let c = gradcheck::check(&inputs, which, H, FLOOR, |g, v| {
            let p = g.permute(v[0], &[1, 0, 2])?;
            let r = g.reshape(p, &[3, 8])?;
            let tr = g.transpose(r)?;
            let top = g.slice_rows(tr, 0, 4)?;
            let both = g.concat_cols(&[top, v[1]])?;
            let stacked = g.concat_rows(&[both, both])?;
            let gathered = g.gather_rows(stacked, &[0, 5, 5, 2])?;
            let left = g.slice_rows(gathered, 0, 4)?;
            let t6 = g.transpose(left)?;
            let t6 = g.slice_rows(t6, 3, 6)?;
            let t6 = g.transpose(t6)?;
            let biased = g.add_row_bias(t6, v[2])?;
            let b4 = v[2].clone_first4(g)?;
            let ch = g.add_channel_bias(biased, b4)?;
            let s0 = g.sum_axis(ch, 0)?;
            let s1 = g.mean_axis(ch, 1)?;
            let a = weighted_sum(g, s0, 15);
            let b = weighted_sum(g, s1, 16);
            let d = g.sub(a, b)?;
            let m = g.mean_all(d)?;
            g.scale(m, 1.5)
        })
        .unwrap();
        assert_check(c, 1e-6, "shape ops");
    }
}

trait First4 {
    fn clone_first4(self, g: &mut Graph) -> avrobust::Result<Var>;
}

impl First4 for Var {
    fn clone_first4(self, g: &mut Graph) -> avrobust::Result<Var> {
        let col = g.reshape(self, &[6, 1])?;
        let top = g.slice_rows(col, 0, 4)?;
        g.reshape(top, &[4])
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut g = Graph::new();
        let x = g.leaf(random(&[2, 8, 8], &mut rng).with_grad());
        let k = g.leaf(random(&[3, 2, 3, 3], &mut rng).with_grad());
        let y = g.conv2d(x, k, (1, 1)).unwrap();
        let y = g.pool(y, (2, 2), PoolMode::Max).unwrap();
        let y = g.reshape(y, &[12, 4]).unwrap();
        let y = g.attention(y, y, y, 2).unwrap();
        let y = g.dropout(y, 0.3, 99, true).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        let mut bits: Vec<u64> = grads.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.get(k).unwrap().data().iter().map(|v| v.to_bits()));
        bits.push(g.value(s).item().to_bits());
        bits
    };
    assert_eq!(run(), run());
}

/// Randomized shapes up to 4×8×8 for the conv/pool path.
#[test]
fn randomized_conv_pool_shapes_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for trial in 0..6 {
        let c = rng.gen_range(1..=4);
        let tt = rng.gen_range(3..=8);
        let f = rng.gen_range(3..=8);
        let co = rng.gen_range(1..=3);
        let inputs = vec![random(&[c, tt, f], &mut rng), random(&[co, c, 3, 3], &mut rng)];
        for which in 0..2 {
            let check = gradcheck::check(&inputs, which, H, FLOOR, |g, v| {
                let y = g.conv2d(v[0], v[1], (1, 1))?;
                let y = g.relu(y)?;
                let y = g.pool(y, (1, 2), PoolMode::Mean)?;
                Ok(weighted_sum(g, y, trial))
            })
            .unwrap();
            assert_check(check, 1e-4, "random conv");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn stable_bce_is_finite_on_extreme_logits(z in -1e4f64..1e4, y in 0u8..2) {
        let mut g = Graph::new();
        let zl = g.leaf(Tensor::new(&[1, 1], vec![z]).unwrap().with_grad());
        let l = g.bce_logits(zl, &Tensor::new(&[1, 1], vec![y as f64]).unwrap()).unwrap();
        prop_assert!(g.value(l).item().is_finite());
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(zl).unwrap().item().is_finite());
    }
}
