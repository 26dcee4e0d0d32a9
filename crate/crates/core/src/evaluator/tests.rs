use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::*;
use crate::ingest::{BinaryMask, ImageTensor, PairedSample, Provenance};
use crate::segmenter::Regime;

fn mask(side: usize, on: &[(usize, usize)]) -> BinaryMask {
    BinaryMask::from_fn(side, side, |y, x| on.contains(&(y, x)))
}

fn record(dice: f64) -> MetricRecord {
    MetricRecord {
        id: String::new(),
        dice,
        sensitivity: dice,
        specificity: dice,
        accuracy: dice,
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    }
}

#[test]
fn four_by_four_counts() {
    let gt = mask(4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let pred = mask(4, &[(0, 0), (0, 1), (3, 2), (3, 3)]);
    let r = confusion_metrics("a", &pred, &gt).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 2, 2, 10));
    assert_eq!(r.dice, 0.5);
    assert_eq!(r.sensitivity, 0.5);
    assert!((r.specificity - 10.0 / 12.0).abs() < 1e-15);
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.total(), 16);
}

#[test]
fn perfect_and_disjoint() {
    let gt = mask(4, &[(1, 1), (2, 2)]);
    let r = confusion_metrics("p", &gt, &gt).unwrap();
    for m in Metric::ALL {
        assert_eq!(r.get(m), 1.0);
    }
    let other = mask(4, &[(0, 3)]);
    let r = confusion_metrics("d", &other, &gt).unwrap();
    assert_eq!(r.dice, 0.0);
    assert_eq!(r.sensitivity, 0.0);
}

#[test]
fn degenerate_conventions() {
    let empty = BinaryMask::zeros(4, 4);
    let r = confusion_metrics("e", &empty, &empty).unwrap();
    assert_eq!(r.dice, DICE_BOTH_EMPTY);
    assert_eq!(r.sensitivity, SENSITIVITY_NO_POSITIVES);
    let some = mask(4, &[(0, 0)]);
    let r = confusion_metrics("fp", &some, &empty).unwrap();
    assert_eq!(r.dice, 0.0);
    assert_eq!(r.sensitivity, SENSITIVITY_NO_POSITIVES);
    let full = BinaryMask::from_fn(4, 4, |_, _| true);
    let r = confusion_metrics("full", &full, &full).unwrap();
    assert_eq!(r.specificity, SPECIFICITY_NO_NEGATIVES);
}

#[test]
fn dimension_mismatch_is_argument_error() {
    let e = confusion_metrics("x", &BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 5)).unwrap_err();
    assert!(matches!(e, Error::Argument(_)));
}

/// Pixel loop written independently of the indexed counter.
fn brute_force(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(y, x) == 1, gt.get(y, x) == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    (tp, fp, tn, fn_)
}

#[test]
fn agrees_with_pixel_loop_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let items: Vec<(String, BinaryMask, BinaryMask)> = (0..1000)
        .map(|i| {
            let p: f64 = rng.random();
            let q: f64 = rng.random();
            let a = BinaryMask::from_fn(16, 16, |_, _| rng.random::<f64>() < p);
            let b = BinaryMask::from_fn(16, 16, |_, _| rng.random::<f64>() < q);
            (format!("m{i}"), a, b)
        })
        .collect();
    let records = batch_metrics(&items).unwrap();
    for ((id, p, g), r) in items.iter().zip(&records) {
        assert_eq!(&r.id, id);
        let (tp, fp, tn, fn_) = brute_force(p, g);
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (tp, fp, tn, fn_));
        let dice = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        assert_eq!(r.dice, dice);
        assert_eq!(r.accuracy, (tp + tn) as f64 / 256.0);
        r.validate().unwrap();
    }
}

#[test]
fn validate_rejects_tampered_record() {
    let mut r = MetricRecord::from_counts("t", 3, 1, 10, 2).unwrap();
    r.dice += 1e-9;
    assert!(matches!(r.validate(), Err(Error::Validation(_))));
}

#[test]
fn two_point_standard_error() {
    let (m, se) = mean_and_standard_error(&[0.0, 1.0]);
    assert_eq!(m, 0.5);
    assert!((se - 0.5).abs() < 1e-15);
}

#[test]
fn identical_records_have_zero_error() {
    let recs: Vec<MetricRecord> = (0..150).map(|_| record(0.8)).collect();
    let rep = aggregate_metrics(&recs, Regime::NoAug).unwrap();
    assert_eq!(rep.n, 150);
    for m in Metric::ALL {
        assert!((rep.mean.get(m) - 0.8).abs() < 1e-12);
        assert!(rep.standard_error.get(m) < 1e-12);
    }
}

#[test]
fn single_record_and_empty() {
    let rep = aggregate_metrics(&[record(0.3)], Regime::AllAug).unwrap();
    assert_eq!(rep.standard_error.dice, 0.0);
    assert!(matches!(aggregate_metrics(&[], Regime::AllAug), Err(Error::Argument(_))));
}

#[test]
fn table_cell_format() {
    assert_eq!(format_mean_se(0.8144, 0.0160), "0.8144 ± 0.0160");
    let mut rep = aggregate_metrics(&[record(0.8144)], Regime::AllAug).unwrap();
    rep.standard_error.dice = 0.016;
    assert_eq!(rep.cell(Metric::Dice), "0.8144 ± 0.0160");
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(vals in prop::collection::vec(0.0f64..1.0, 1..60), seed: u64) {
        let recs: Vec<MetricRecord> = vals.iter().map(|&v| record(v)).collect();
        let mut shuffled = recs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate_metrics(&recs, Regime::NoAug).unwrap();
        let b = aggregate_metrics(&shuffled, Regime::NoAug).unwrap();
        prop_assert_eq!(a.mean, b.mean);
        prop_assert_eq!(a.standard_error, b.standard_error);
    }

    #[test]
    fn kde_is_normalized_and_nonnegative(
        vals in prop::collection::vec(0.0f64..1.0, 2..40),
        h in prop::option::of(0.005f64..0.5),
        reflect: bool,
    ) {
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(h.is_some() || spread > 1e-9);
        let boundary = if reflect { Boundary::Reflect } else { Boundary::Truncate };
        let c = kde_estimate_with(&vals, (0.0, 1.0), KdeOptions { bandwidth: h, boundary }).unwrap();
        prop_assert_eq!(c.grid.len(), KDE_GRID_POINTS);
        prop_assert!(c.density.iter().all(|&d| d >= 0.0));
        prop_assert!(c.grid.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((c.integral() - 1.0).abs() < 1e-6, "integral {}", c.integral());
    }
}

#[test]
fn kde_symmetric_input_gives_symmetric_curve() {
    let vals = [0.1, 0.25, 0.3, 0.7, 0.75, 0.9];
    let c = kde_estimate(&vals, (0.0, 1.0), None).unwrap();
    let n = c.density.len();
    let asym = (0..n).map(|i| (c.density[i] - c.density[n - 1 - i]).abs()).fold(0.0, f64::max);
    assert!(asym < 1e-9, "asymmetry {asym}");
    assert!((c.integral() - 1.0).abs() < 1e-6);
}

/// Mixture density from `centers`, renormalized by the trapezoidal rule on
/// an independently built 512-point grid over [0, 1].
fn mixture_oracle(centers: &[f64], n_samples: usize, h: f64, x: f64) -> f64 {
    let nd: Vec<Normal> = centers.iter().map(|&m| Normal::new(m, h).unwrap()).collect();
    let f = |t: f64| nd.iter().map(|d| d.pdf(t)).sum::<f64>() / n_samples as f64;
    let step = 1.0 / 511.0;
    let z: f64 = (0..511).map(|i| 0.5 * step * (f(i as f64 * step) + f(((i + 1) as f64 * step).min(1.0)))).sum();
    f(x) / z
}

#[test]
fn kde_two_point_closed_form() {
    let h = 0.1;
    let c = kde_estimate(&[0.4, 0.6], (0.0, 1.0), Some(h)).unwrap();
    let expected = mixture_oracle(&[0.4, 0.6], 2, h, 0.5);
    assert!((c.density_at(0.5) - expected).abs() < 1e-9, "{} vs {expected}", c.density_at(0.5));
    // the truncated mass is tiny here, so the exact-mass answer is close too
    let n = Normal::new(0.0, h).unwrap();
    let exact = n.pdf(0.1) / (n.cdf(0.6) - n.cdf(-0.4));
    assert!((c.density_at(0.5) - exact).abs() < 1e-6);
    assert_eq!(c.density_at(1.5), 0.0);
}

#[test]
fn kde_reflection_oracle() {
    let h = 0.2;
    let c = kde_estimate_with(&[0.05, 0.3], (0.0, 1.0), KdeOptions { bandwidth: Some(h), boundary: Boundary::Reflect }).unwrap();
    let centers = [0.05, 0.3, -0.05, -0.3, 1.95, 1.7];
    assert!((c.density_at(0.1) - mixture_oracle(&centers, 2, h, 0.1)).abs() < 1e-9);
    assert!((c.integral() - 1.0).abs() < 1e-6);
}

#[test]
fn kde_errors() {
    assert!(matches!(kde_estimate(&[0.5], (0.0, 1.0), None), Err(Error::Estimation(_))));
    assert!(matches!(kde_estimate(&[0.5, 0.5], (0.0, 1.0), None), Err(Error::Estimation(_))));
    assert!(kde_estimate(&[0.5, 0.5], (0.0, 1.0), Some(0.1)).is_ok());
    assert!(matches!(kde_estimate(&[0.5, 1.5], (0.0, 1.0), Some(0.1)), Err(Error::Argument(_))));
    assert!(matches!(kde_estimate(&[0.5, 0.6], (1.0, 0.0), Some(0.1)), Err(Error::Argument(_))));
}

#[test]
fn silverman_matches_hand_value() {
    let v = [0.0, 1.0, 2.0, 3.0, 4.0];
    // sd = sqrt(2.5); iqr = 3 - 1 = 2; min(1.5811, 1.4925) = 1.4925
    let expected = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
    assert!((silverman_bandwidth(&v).unwrap() - expected).abs() < 1e-12);
}

/// Published means and standard errors, one row per regime in table order
/// Dice, Sensitivity, Specificity, Accuracy.
const PUBLISHED: [(Regime, [(f64, f64); 4]); 4] = [
    (Regime::NoAug, [(0.7723, 0.0185), (0.7798, 0.0211), (0.9744, 0.0035), (0.9316, 0.0089)]),
    (Regime::ClassicAug, [(0.7743, 0.0203), (0.8094, 0.0222), (0.9672, 0.0047), (0.9321, 0.0086)]),
    (Regime::Mask2LesionAug, [(0.7849, 0.0160), (0.8197, 0.0186), (0.9698, 0.0045), (0.9311, 0.0087)]),
    (Regime::AllAug, [(0.8144, 0.0160), (0.8197, 0.0182), (0.9762, 0.0038), (0.9375, 0.0091)]),
];

fn set(v: [f64; 4]) -> MetricSet {
    MetricSet {
        dice: v[0],
        sensitivity: v[1],
        specificity: v[2],
        accuracy: v[3],
    }
}

pub(crate) fn report(regime: Regime, cells: [(f64, f64); 4]) -> RegimeReport {
    RegimeReport {
        regime,
        n: 150,
        mean: set(cells.map(|c| c.0)),
        standard_error: set(cells.map(|c| c.1)),
        per_image: Vec::new(),
    }
}

fn published_reports() -> Vec<RegimeReport> {
    PUBLISHED.iter().map(|&(r, c)| report(r, c)).collect()
}

#[test]
fn published_table_improvement_and_bolding() {
    let t = compare_regimes(&published_reports()).unwrap();
    let imp = t.improvement(Metric::Dice).unwrap();
    assert!((100.0 * imp.relative - 5.17).abs() <= 0.01, "{}", 100.0 * imp.relative);
    assert!((imp.absolute - 0.0401).abs() < 1e-12);
    for m in Metric::ALL {
        assert_eq!(t.best(m), Some(Regime::AllAug), "{m}");
    }
    // sensitivity ties at 0.8197; the smaller standard error wins
    assert!(!t.cell(Regime::Mask2LesionAug, Metric::Sensitivity).unwrap().best);
    let text = t.render_text();
    assert!(text.contains("0.8144 ± 0.0160*"));
    assert!(text.contains("ClassicAug"));
}

#[test]
fn identical_reports_show_no_improvement() {
    let c = PUBLISHED[1].1;
    let t = compare_regimes(&[report(Regime::ClassicAug, c), report(Regime::AllAug, c)]).unwrap();
    for m in Metric::ALL {
        assert_eq!(t.improvement(m).unwrap().relative, 0.0);
    }
}

#[test]
fn compare_rejects_bad_input() {
    let r = published_reports();
    assert!(matches!(compare_regimes(&r[..1]), Err(Error::Argument(_))));
    assert!(matches!(compare_regimes(&[r[0].clone(), r[0].clone()]), Err(Error::Argument(_))));
    let t = compare_regimes(&r[..2]).unwrap();
    assert!(t.improvement.is_none());
}

proptest! {
    #[test]
    fn improvement_is_scale_consistent(a in 0.05f64..1.0, c in 0.05f64..1.0, k in 0.01f64..100.0) {
        let mk = |ra: f64, rc: f64| {
            compare_regimes(&[
                report(Regime::ClassicAug, [(rc, 0.01); 4]),
                report(Regime::AllAug, [(ra, 0.01); 4]),
            ])
            .unwrap()
            .improvement(Metric::Dice)
            .unwrap()
            .relative
        };
        prop_assert!((mk(a, c) - mk(k * a, k * c)).abs() < 1e-12);
    }
}

fn synth_pairs(n: usize, side: usize) -> Vec<PairedSample> {
    (0..n)
        .map(|i| {
            let m = BinaryMask::from_fn(side, side, |y, x| y + x < side + i);
            let img = ImageTensor::filled(side, side, 3, 0.1 * i as f32).unwrap();
            PairedSample::new(format!("p{i}"), img, m, Provenance::Synthetic).unwrap()
        })
        .collect()
}

fn curves() -> Vec<KdeSeries> {
    let mut out = Vec::new();
    for m in [Metric::Dice, Metric::Sensitivity, Metric::Specificity] {
        for (r, vals) in [(Regime::ClassicAug, [0.6, 0.7, 0.8]), (Regime::AllAug, [0.7, 0.8, 0.9])] {
            out.push(KdeSeries {
                metric: m,
                regime: r,
                curve: kde_estimate(&vals, (0.0, 1.0), None).unwrap(),
            });
        }
    }
    out
}

#[test]
fn figures_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let man = emit_figures(&published_reports(), &curves(), &synth_pairs(4, 8), dir.path()).unwrap();
    assert!(man.failures.is_empty(), "{:?}", man.failures);
    let names: Vec<String> = man.written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for f in ["synthesis_grid_00.png", "kde_dice.png", "kde_sensitivity.png", "kde_specificity.png", "comparison.json", "comparison.txt"] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("kde_") && n.ends_with(".png")).count(), 3);
    let grid = image::open(dir.path().join("synthesis_grid_00.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (4 * 8, 2 * 8));
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("kde_dice.json")).unwrap()).unwrap();
    assert_eq!(side["series"].as_array().unwrap().len(), 2);
    assert!(side["series"][0]["bandwidth"].as_f64().unwrap() > 0.0);
}

#[test]
fn grids_split_after_eight_columns() {
    let dir = tempfile::tempdir().unwrap();
    let man = emit_figures(&published_reports(), &curves(), &synth_pairs(GRID_COLUMNS + 1, 8), dir.path()).unwrap();
    assert!(man.written.iter().any(|p| p.ends_with("synthesis_grid_01.png")));
    let second = image::open(dir.path().join("synthesis_grid_01.png")).unwrap();
    assert_eq!(second.width(), 8);
}

#[test]
fn missing_reports_fail_only_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let man = emit_figures(&[], &curves(), &synth_pairs(4, 8), dir.path()).unwrap();
    assert_eq!(man.failures.len(), 1);
    assert_eq!(man.failures[0].figure, "comparison");
    assert!(dir.path().join("synthesis_grid_00.png").exists());
    assert!(dir.path().join("kde_specificity.png").exists());

    let dir = tempfile::tempdir().unwrap();
    let man = emit_figures(&published_reports(), &[], &[], dir.path()).unwrap();
    let failed: Vec<&str> = man.failures.iter().map(|f| f.figure.as_str()).collect();
    assert_eq!(failed, ["synthesis_grid", "kde_dice", "kde_sensitivity", "kde_specificity"]);
    assert!(dir.path().join("comparison.txt").exists());
}
