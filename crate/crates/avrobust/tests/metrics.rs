use avrobust::audiofeat::{synthesize_dataset, DatasetSpec, Split};
use avrobust::diffengine::Tensor;
use avrobust::metrics::*;
use avrobust::models::{CsnConfig, FusionStage, Model, ModelConfig};
use avrobust::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Precision-at-hit with ranks from explicit pairwise comparison.
fn ap_brute(s: &[f64], t: &[bool]) -> Option<f64> {
    let rank = |i: usize| 1 + (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
    let pos: Vec<usize> = (0..s.len()).filter(|&i| t[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn auc_brute(s: &[f64], t: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    for i in (0..s.len()).filter(|&i| t[i]) {
        for j in (0..s.len()).filter(|&j| !t[j]) {
            pairs += 1;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
    let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(average_precision(&[0.5; 4], &[true, false, false, false]), Some(1.0));
    assert_eq!(average_precision(&[0.5; 4], &[false, false, false, true]), Some(0.25));
    assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
}

#[test]
fn roc_auc_examples() {
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
    assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, false, true]), Some(0.5));
    assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
    assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
    assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]), None);
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let s: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let t: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.3)).collect();
        let auc = roc_auc(&s, &t).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }
}

#[test]
fn metrics_match_brute_force_on_500_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let b = rng.gen_range(1..=64);
        let c = rng.gen_range(1..=16);
        // Coarse levels force many ties.
        let levels = rng.gen_range(2..=40) as f64;
        for _ in 0..c {
            let s: Vec<f64> = (0..b).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
            let p = rng.gen_range(0.0..1.0);
            let t: Vec<bool> = (0..b).map(|_| rng.gen_bool(p)).collect();
            assert!(close(average_precision(&s, &t), ap_brute(&s, &t), 1e-9));
            assert!(close(roc_auc(&s, &t), auc_brute(&s, &t), 1e-9));
        }
    }
}

#[test]
fn report_aggregates_match_brute_force_on_50x8_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let names: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
    for _ in 0..20 {
        let s: Vec<f64> = (0..400).map(|_| rng.gen()).collect();
        let t: Vec<f64> = (0..400).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let m = ScoreMatrix::new(Tensor::new(&[50, 8], s.clone()).unwrap(), Tensor::new(&[50, 8], t.clone()).unwrap())
            .unwrap();
        let r = EvalReport::from_scores(&m, &names, ReportMeta::clean("x", 0)).unwrap();
        let (mut aps, mut aucs) = (vec![], vec![]);
        for c in 0..8 {
            let col: Vec<f64> = (0..50).map(|b| s[b * 8 + c]).collect();
            let tc: Vec<bool> = (0..50).map(|b| t[b * 8 + c] == 1.0).collect();
            if let Some(a) = auc_brute(&col, &tc) {
                aucs.push(a);
                aps.push(ap_brute(&col, &tc).unwrap());
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((r.aggregate.map - mean(&aps)).abs() < 1e-9);
        assert!((r.aggregate.auc - mean(&aucs)).abs() < 1e-9);
    }
}

#[test]
fn aggregates_skip_classes_without_both_label_values() {
    let s = Tensor::new(&[3, 3], vec![0.9, 0.1, 0.5, 0.2, 0.7, 0.5, 0.8, 0.3, 0.5]).unwrap();
    let t = Tensor::new(&[3, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let r = EvalReport::from_scores(&ScoreMatrix::new(s, t).unwrap(), &names, ReportMeta::clean("x", 0)).unwrap();
    assert_eq!(r.classes[2].ap, Some(1.0));
    assert_eq!(r.classes[2].auc, None);
    // Classes a and b separate perfectly.
    assert_eq!(r.aggregate.map, 1.0);
    assert_eq!(r.aggregate.auc, 1.0);
    assert_eq!(r.aggregate.dprime, f64::INFINITY);

    let json = r.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    assert_eq!(EvalReport::from_json(&json).unwrap(), r);

    let t = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
    let s = Tensor::new(&[2, 1], vec![0.1, 0.2]).unwrap();
    let r = EvalReport::from_scores(&ScoreMatrix::new(s, t).unwrap(), &names[..1], ReportMeta::clean("x", 0));
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn score_matrix_validation() {
    let ok = Tensor::zeros(&[2, 2]);
    assert!(matches!(ScoreMatrix::new(ok.clone(), Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
    let bad_t = Tensor::full(&[2, 2], 0.5).unwrap();
    assert!(matches!(ScoreMatrix::new(ok.clone(), bad_t), Err(Error::Validation(_))));
    let mut nan = Tensor::zeros(&[2, 2]);
    nan.data_mut()[0] = f64::NAN;
    assert!(matches!(ScoreMatrix::new(nan, ok), Err(Error::Validation(_))));
}

#[test]
fn d_prime_reference_pairs() {
    assert_eq!(d_prime(0.5), 0.0);
    for (auc, d) in [(0.967, 2.598), (0.942, 2.218), (0.865, 1.558), (0.902, 1.830)] {
        assert!((d_prime(auc) - d).abs() <= 0.005, "{auc}: {} vs {d}", d_prime(auc));
    }
    // Reference AUCs carry three decimals, so each d′ is only pinned to the
    // image of [auc − 0.0005, auc + 0.0005].
    for (auc, d) in [(0.967, 2.598), (0.942, 2.218), (0.942, 2.217), (0.865, 1.558), (0.902, 1.830)] {
        let (lo, hi) = (d_prime(auc - 0.0005), d_prime(auc + 0.0005));
        assert!(lo - 0.0005 <= d && d <= hi + 0.0005, "{auc}: {d} outside [{lo}, {hi}]");
    }
    assert_eq!(d_prime(1.0), f64::INFINITY);
    assert_eq!(d_prime(0.0), f64::NEG_INFINITY);
}

#[test]
fn d_prime_disagrees_with_two_inconsistent_reference_rows() {
    // Two reference (AUC, d′) pairs do not satisfy the √2·Φ⁻¹ relation; these
    // values pin what the formula gives instead.
    assert!((d_prime(0.920) - 1.987).abs() < 0.005);
    assert!((d_prime(0.920) - 2.360).abs() > 0.3);
    assert!((d_prime(0.865) - 1.378).abs() > 0.15);
}

/// Φ⁻¹ by bisection on the CDF. Upper-tail points use `Φ⁻¹(p) = −Φ⁻¹(1 − p)`
/// because `Φ` itself cannot resolve probabilities near one.
fn quantile_by_bisection(p: f64) -> f64 {
    if p > 0.5 {
        return -quantile_by_bisection(1.0 - p);
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn normal_quantile_matches_independent_oracles_at_1000_points() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut points: Vec<f64> = (1..=12).flat_map(|k| [10f64.powi(-k), 1.0 - 10f64.powi(-k)]).collect();
    while points.len() < 1000 {
        points.push(if rng.gen_bool(0.5) {
            rng.gen_range(1e-12..1.0 - 1e-12)
        } else {
            10f64.powf(-rng.gen_range(1.0..12.0))
        });
    }
    for p in points {
        let x = normal_quantile(p);
        let bis = quantile_by_bisection(p);
        assert!((x - bis).abs() < 1e-8, "p={p}: {x} vs bisection {bis}");
        if p > 1e-9 && p < 1.0 - 1e-9 {
            assert!((x - normal.inverse_cdf(p)).abs() < 1e-8, "p={p}");
        }
    }
}

proptest! {
    #[test]
    fn d_prime_is_monotone_and_antisymmetric(a in 1e-6f64..0.5, b in 1e-6f64..0.5) {
        prop_assert!((d_prime(1.0 - a) + d_prime(a)).abs() <= 1e-9);
        if a < b {
            prop_assert!(d_prime(a) < d_prime(b));
        }
    }

    #[test]
    fn metrics_are_invariant_to_increasing_transforms(
        s in prop::collection::vec(0.0f64..1.0, 2..64),
        bits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let t = &bits[..s.len()];
        let warped: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(average_precision(&s, t), average_precision(&warped, t));
        prop_assert_eq!(roc_auc(&s, t), roc_auc(&warped, t));
    }

    #[test]
    fn reports_round_trip_through_json(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
        let t: Vec<f64> = (0..60).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let m = ScoreMatrix::new(Tensor::new(&[12, 5], s).unwrap(), Tensor::new(&[12, 5], t).unwrap()).unwrap();
        let names: Vec<String> = (0..5).map(|i| format!("class, \"{i}\"")).collect();
        if let Ok(r) = EvalReport::from_scores(&m, &names, ReportMeta { checkpoint: "ab".into(), perturbation: "cd".into(), seed }) {
            let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}

fn report(aps: &[f64], checkpoint: &str) -> EvalReport {
    EvalReport {
        meta: ReportMeta::clean(checkpoint, 0),
        aggregate: Aggregate {
            map: 0.0,
            auc: 0.5,
            dprime: 0.0,
        },
        classes: aps
            .iter()
            .enumerate()
            .map(|(i, &ap)| ClassMetrics {
                id: i,
                name: format!("k{i}"),
                ap: Some(ap),
                auc: Some(0.5),
            })
            .collect(),
    }
}

#[test]
fn comparison_rows_drops_and_ordering() {
    let clean = report(&[0.8, 0.5, 0.9], "h");
    let same = compare_reports(&clean, &clean).unwrap();
    assert!(same.rows.iter().all(|r| r.abs_drop == 0.0 && r.rel_drop == 0.0));

    let attacked = report(&[0.2, 0.45, 0.9], "h");
    let c = compare_reports(&clean, &attacked).unwrap();
    assert_eq!(c.rows[0].class_id, 0);
    assert!((c.rows[0].abs_drop - 0.6).abs() < 1e-12);
    assert!((c.rows[0].rel_drop - 0.75).abs() < 1e-12);
    assert_eq!(c.rows.iter().map(|r| r.class_id).collect::<Vec<_>>(), vec![0, 1, 2]);

    let csv = c.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "class_id,class_name,ap_clean,ap_attacked,abs_drop,rel_drop");
    assert!(lines.next().unwrap().starts_with("0,k0,0.8,0.2,"));
    assert_eq!(csv.lines().count(), 4);

    let top = c.top_k(2);
    assert_eq!(top.clean, vec![("k2".to_string(), 0.9), ("k0".to_string(), 0.8)]);
    assert_eq!(top.attacked, vec![("k2".to_string(), 0.9), ("k1".to_string(), 0.45)]);
    assert!(top.render().contains("k2 (0.900)"));
}

#[test]
fn comparison_rejects_mismatched_reports() {
    let a = report(&[0.8, 0.5], "h");
    assert!(matches!(compare_reports(&a, &report(&[0.8], "h")), Err(Error::Validation(_))));
    assert!(matches!(compare_reports(&a, &report(&[0.8, 0.5], "other")), Err(Error::Validation(_))));
}

#[test]
fn evaluation_is_deterministic_and_zero_delta_is_clean() {
    let mut spec = DatasetSpec::default_with(3, 16, 7).unwrap();
    spec.clip_seconds = 1.0;
    spec.eval_fraction = 0.5;
    spec.video_windows = 4;
    let ds = synthesize_dataset(&spec).unwrap();
    let model = Model::new(
        &ModelConfig::Csn(CsnConfig {
            channels: vec![4, 8, 8, 8],
            d_model: 16,
            heads: 2,
            ff_hidden: 32,
            classes: 3,
            fusion: FusionStage::AudioOnly,
            ..CsnConfig::default()
        }),
        7,
    )
    .unwrap();
    let clips = ds.split(Split::Eval);
    let names = ds.class_names();
    let a = evaluate(&model, &clips, &names, None, ReportMeta::clean("h", 7)).unwrap();
    let b = evaluate(&model, &clips, &names, None, ReportMeta::clean("h", 7)).unwrap();
    assert_eq!(a, b);
    let zero = Tensor::zeros(clips[0].features.tensor().shape());
    let z = evaluate(&model, &clips, &names, Some(&zero), ReportMeta::clean("h", 7)).unwrap();
    assert_eq!(a, z);
    assert!(matches!(
        evaluate(&model, &[], &names, None, ReportMeta::clean("h", 7)),
        Err(Error::Validation(_))
    ));
}
