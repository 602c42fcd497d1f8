use proptest::prelude::*;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::autograd::NdArray;
use crate::model::{ModelConfig, PromptConfig, SegModel};
use crate::synth;
use crate::tuning::TuningStrategy;

use super::*;

#[test]
fn dice_identity_is_one() {
    let m = vec![0u8, 1, 1, 2, 0, 1];
    assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    assert_eq!(dice(&m, &m, 2).unwrap(), 1.0);
}

#[test]
fn dice_disjoint_is_zero() {
    let a = vec![1u8, 1, 0, 0];
    let b = vec![0u8, 0, 1, 1];
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
}

// Set-counting oracle: build masks with |P|=4, |T|=6, |P∩T|=3 by explicit
// placement; Dice must be 2·3/(4+6) = 0.6.
#[test]
fn dice_matches_set_counting_oracle() {
    let mut pred = vec![0u8; 20];
    let mut truth = vec![0u8; 20];
    for i in [0, 1, 2, 10] {
        pred[i] = 1;
    }
    for i in [0, 1, 2, 5, 6, 7] {
        truth[i] = 1;
    }
    assert_eq!(dice(&pred, &truth, 1).unwrap(), 0.6);
}

#[test]
fn dice_both_empty_is_one() {
    let a = vec![0u8; 10];
    assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    // one-sided empty is zero, not one
    let mut b = a.clone();
    b[3] = 1;
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
}

#[test]
fn dice_rejects_extent_mismatch() {
    assert!(dice(&[0u8; 4], &[0u8; 5], 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn dice_is_bounded_and_symmetric(
        pred in proptest::collection::vec(0u8..3, 64),
        truth in proptest::collection::vec(0u8..3, 64),
        class in 0u8..3,
    ) {
        let d = dice(&pred, &truth, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&truth, &pred, class).unwrap());
    }
}

fn toy_model() -> SegModel<f32> {
    let cfg = ModelConfig {
        spatial: [8, 8, 8],
        in_channels: 2,
        patch: 4,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        mlp_dim: 32,
        num_classes: 3,
        skip_layers: vec![1, 2],
        decoder_channels: vec![8],
        final_channels: 4,
    };
    SegModel::init(cfg, PromptConfig::none(), 0).unwrap()
}

fn toy_sample(seed: u64) -> synth::Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol: Vec<f32> = (0..2 * 512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<u8> = (0..512).map(|_| rng.gen_range(0u8..3)).collect();
    synth::Sample {
        volume: NdArray::new(vec![2, 8, 8, 8], vol).unwrap(),
        mask,
        center_id: "c".into(),
        sample_id: format!("c-{seed}"),
    }
}

#[test]
fn background_forcing_bias_scores_zero_on_foreground() {
    let mut model = toy_model();
    for x in model.param_mut("head.w").value.data_mut() {
        *x = 0.0;
    }
    model.param_mut("head.b").value.data_mut()[0] = 10.0;
    let sample = toy_sample(1);
    assert!(sample.mask.iter().any(|&m| m == 1));
    let reports = evaluate(&model, &[sample]).unwrap();
    assert_eq!(reports[0].primary, 0.0);
    assert_eq!(reports[0].nodal, 0.0);
    assert_eq!(reports[0].mean, 0.0);
}

#[test]
fn argmax_ties_break_toward_lowest_class() {
    let mut model = toy_model();
    // all-zero head → identical logits per class everywhere
    for name in ["head.w", "head.b"] {
        for x in model.param_mut(name).value.data_mut() {
            *x = 0.0;
        }
    }
    let pred = predict(&model, &toy_sample(2)).unwrap();
    assert!(pred.iter().all(|&p| p == 0));
}

#[test]
fn report_mean_is_average_of_class_scores() {
    let model = toy_model();
    for r in evaluate(&model, &[toy_sample(3), toy_sample(4)]).unwrap() {
        assert_eq!(r.mean, 0.5 * (r.primary + r.nodal));
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    let model = toy_model();
    let samples = [toy_sample(5), toy_sample(6)];
    let a = evaluate(&model, &samples).unwrap();
    let b = evaluate(&model, &samples).unwrap();
    assert_eq!(a, b);
}

// The n−1 std convention is pinned by reproducing the reference fold
// table: folds {0.6112, 0.7442, 0.6399, 0.6919, 0.6663} print as
// 0.6708 ± 0.0509.
#[test]
fn aggregation_matches_published_fold_table() {
    let folds = [0.6112, 0.7442, 0.6399, 0.6919, 0.6663];
    let (mean, std) = aggregate_folds(&folds).unwrap();
    assert!((mean - 0.6708).abs() < 1e-3, "mean {mean}");
    assert!((std - 0.0509).abs() < 1e-3, "std {std}");
    // population convention would give 0.0455 and must NOT match
    let pop = (folds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!((pop - 0.0509).abs() > 1e-3);
}

#[test]
fn aggregation_basics() {
    assert!(aggregate_folds(&[]).is_err());
    let (m, s) = aggregate_folds(&[0.5, 0.5, 0.5]).unwrap();
    assert_eq!((m, s), (0.5, 0.0));
    let (m, _) = aggregate_folds(&[0.2, 0.8]).unwrap();
    assert!((m - 0.5).abs() < 1e-15);
    let (m1, s1) = aggregate_folds(&[0.7]).unwrap();
    assert_eq!((m1, s1), (0.7, 0.0));
}

proptest! {
    #[test]
    fn aggregation_is_linear_in_scale(
        vals in proptest::collection::vec(-1.0f64..1.0, 2..8),
        lambda in -3.0f64..3.0,
    ) {
        let (m, s) = aggregate_folds(&vals).unwrap();
        let scaled: Vec<f64> = vals.iter().map(|v| lambda * v).collect();
        let (ms, ss) = aggregate_folds(&scaled).unwrap();
        prop_assert!((ms - lambda * m).abs() < 1e-9);
        prop_assert!((ss - lambda.abs() * s).abs() < 1e-9);
    }
}

#[test]
fn wilcoxon_all_positive_five_pairs_is_one_thirtysecond() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [0.5, 1.0, 2.0, 3.0, 4.0];
    let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
    assert!(r.exact);
    assert_eq!(r.m, 5);
    assert_eq!(r.statistic, 15.0);
    assert!((r.p_value - 1.0 / 32.0).abs() < 1e-12, "p {}", r.p_value);
}

// Hand enumeration for diffs {+1, −2, +3}: ranks (1, 2, 3), W = 1+3 = 4;
// of the 8 sign assignments, rank sums {0,1,2,3,3,4,5,6} give
// P(W ≥ 4) = 3/8.
#[test]
fn wilcoxon_matches_hand_enumeration() {
    let x = [1.0, 0.0, 3.0];
    let y = [0.0, 2.0, 0.0];
    let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
    assert_eq!(r.statistic, 4.0);
    assert!((r.p_value - 3.0 / 8.0).abs() < 1e-12);
}

#[test]
fn wilcoxon_identical_inputs_are_degenerate() {
    let x = [1.0, 2.0, 3.0];
    let err = wilcoxon_signed_rank(&x, &x, Alternative::TwoSided).unwrap_err();
    assert!(matches!(err, crate::Error::Degenerate(_)));
}

#[test]
fn wilcoxon_zero_differences_are_dropped() {
    let x = [1.0, 5.0, 2.0, 3.0, 4.0, 6.0];
    let y = [0.5, 5.0, 1.0, 2.0, 3.0, 5.0];
    let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
    assert_eq!(r.m, 5);
}

// Exact enumeration against an independently coded normal approximation on
// the same data; for 15 ≤ m ≤ 20 the two must agree within 0.02.
#[test]
fn wilcoxon_exact_vs_normal_on_same_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in 15..=20usize {
        for rep in 0..3 {
            let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let exact = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
            assert!(exact.exact);
            assert!(exact.p_value > 0.0 && exact.p_value <= 1.0);
            let approx = normal_approx_p(&x, &y);
            assert!(
                (exact.p_value - approx).abs() < 0.02,
                "m={m} rep={rep}: exact {} vs approx {approx}",
                exact.p_value
            );
        }
    }
}

// Independent normal-approximation oracle (no tie handling; inputs are
// continuous so ties have probability zero).
fn normal_approx_p(x: &[f64], y: &[f64]) -> f64 {
    let diffs: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a - b).filter(|d| *d != 0.0).collect();
    let m = diffs.len() as f64;
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut w = 0.0;
    for (rank0, &i) in idx.iter().enumerate() {
        if diffs[i] > 0.0 {
            w += (rank0 + 1) as f64;
        }
    }
    let mean = m * (m + 1.0) / 4.0;
    let sd = (m * (m + 1.0) * (2.0 * m + 1.0) / 24.0).sqrt();
    let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
    let phi = 0.5 * (1.0 + erf_approx(z / std::f64::consts::SQRT_2));
    (2.0 * (1.0 - phi)).min(1.0)
}

// Abramowitz–Stegun 7.1.26 rational erf approximation (|err| < 1.5e-7).
fn erf_approx(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

#[test]
fn t_test_identical_pairs_is_null() {
    let x = [0.3, 0.5, 0.9, 0.2];
    let (t, p) = t_test_two_tailed(&x, &x, true).unwrap();
    assert_eq!((t, p), (0.0, 1.0));
}

#[test]
fn t_test_is_antisymmetric() {
    let x = [0.6, 0.72, 0.55, 0.81, 0.64];
    let y = [0.58, 0.69, 0.60, 0.75, 0.61];
    for paired in [true, false] {
        let (t1, p1) = t_test_two_tailed(&x, &y, paired).unwrap();
        let (t2, p2) = t_test_two_tailed(&y, &x, paired).unwrap();
        assert!((t1 + t2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }
}

#[test]
fn t_test_zero_variance_is_degenerate() {
    let x = [1.0, 1.0, 1.0];
    let y = [0.0, 0.0, 0.0];
    // paired with constant nonzero difference: no variance to test against
    assert!(t_test_two_tailed(&x, &y, true).is_err());
    assert!(t_test_two_tailed(&x, &x, false).is_err());
    assert!(t_test_two_tailed(&[1.0], &[2.0], true).is_err());
}

// Quadrature oracle: integrate the Student-t density directly with
// Simpson's rule and compare the two-tailed p-value.
fn t_density(u: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp()
        / (df * std::f64::consts::PI).sqrt();
    c * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0)
}

fn two_tailed_p_quadrature(t: f64, df: f64) -> f64 {
    let a = t.abs();
    let b = a + 60.0;
    let n = 200_000;
    let h = (b - a) / n as f64;
    let mut s = t_density(a, df) + t_density(b, df);
    for i in 1..n {
        let u = a + i as f64 * h;
        s += t_density(u, df) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (2.0 * s * h / 3.0).min(1.0)
}

#[test]
fn t_test_p_matches_quadrature_oracle() {
    let x = [0.61, 0.72, 0.58, 0.80, 0.69];
    let y = [0.55, 0.70, 0.61, 0.73, 0.62];
    let (t, p) = t_test_two_tailed(&x, &y, true).unwrap();
    let oracle = two_tailed_p_quadrature(t, 4.0);
    assert!((p - oracle).abs() < 1e-4, "p {p} vs oracle {oracle}");

    let (tw, pw) = t_test_two_tailed(&x, &y, false).unwrap();
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, var)
    };
    let (nx, vx) = stats(&x);
    let (ny, vy) = stats(&y);
    let se2 = vx / nx + vy / ny;
    let df = se2 * se2 / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
    let oracle = two_tailed_p_quadrature(tw, df);
    assert!((pw - oracle).abs() < 1e-4, "welch p {pw} vs oracle {oracle}");
}

#[test]
fn matrix_single_cell_echoes_the_two_means() {
    let reports = [FoldReport {
        fold: 0,
        strategy: TuningStrategy::Full,
        new_center: "center7".into(),
        old_center_mean: 0.71,
        new_center_mean: 0.63,
    }];
    let m = build_comparison_matrix(&reports).unwrap();
    assert_eq!(m.centers, vec!["center7".to_string()]);
    assert_eq!(m.strategies, TuningStrategy::ALL.to_vec());
    let cell = m.cells[0][2].as_ref().unwrap(); // "full" is column 2
    assert_eq!(cell.old_mean, 0.71);
    assert_eq!(cell.new_mean, 0.63);
    assert_eq!(cell.new_std, 0.0);
    // every other strategy is an explicit gap
    for (i, c) in m.cells[0].iter().enumerate() {
        if i != 2 {
            assert!(c.is_none());
        }
    }
}

#[test]
fn matrix_column_order_is_fixed() {
    let m = build_comparison_matrix(&[]).unwrap();
    let names: Vec<&str> = m.strategies.iter().map(|s| s.name()).collect();
    assert_eq!(names, vec!["none", "partial", "full", "shallow", "deep"]);
}

#[test]
fn matrix_rejects_duplicate_folds() {
    let r = FoldReport {
        fold: 1,
        strategy: TuningStrategy::None,
        new_center: "c".into(),
        old_center_mean: 0.5,
        new_center_mean: 0.5,
    };
    assert!(build_comparison_matrix(&[r.clone(), r]).is_err());
}

#[test]
fn matrix_csv_round_trips() {
    let mut reports = Vec::new();
    for fold in 0..3 {
        for strategy in [TuningStrategy::Full, TuningStrategy::DeepPrompt] {
            for center in ["center6", "center7"] {
                reports.push(FoldReport {
                    fold,
                    strategy,
                    new_center: center.into(),
                    old_center_mean: 0.6 + 0.01 * fold as f64,
                    new_center_mean: 0.5 + 0.02 * fold as f64,
                });
            }
        }
    }
    let m = build_comparison_matrix(&reports).unwrap();
    let csv = m.to_csv();
    let back = ComparisonMatrix::from_csv(&csv).unwrap();
    assert_eq!(back, m);
    assert!(csv.contains("NA"), "gaps must be explicit");
    assert!(!m.to_json().is_empty());
}
