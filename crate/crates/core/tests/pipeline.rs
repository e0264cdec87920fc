//! End-to-end checks on the default 720-sample dataset.

use std::sync::OnceLock;

use head_core::dataset::{generate_dataset, Dataset, DatasetConfig, Split};
use head_core::detector::{evaluate_detector, evaluate_split, train_detector, Confusion, TrainHyper, Variant};
use head_core::diffusion::make_schedule;
use head_core::rng::{derive_seed, SplitMix64};
use head_core::runtime::{measure_campaign, measure_operating_point, run_until_complete, RunPolicy, SeedStream};
use head_core::scene::{Catalog, MixtureSpec};
use head_core::timesaver::{monte_carlo_cost, sweep_tlast, AttemptDistribution, OperatingPoint};

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_dataset(&DatasetConfig::default(), &Catalog::builtin()).unwrap())
}

fn counts(c: &Confusion) -> (u64, u64, u64, u64) {
    (c.tp, c.fp, c.tn, c.r#fn)
}

fn held_out(ds: &Dataset) -> Vec<(usize, MixtureSpec)> {
    let splits = head_core::dataset::Splits::by_prompt(ds.prompts.len(), TrainHyper::default().seed);
    let mut ids = [splits.validation.clone(), splits.test.clone()].concat();
    ids.sort_unstable();
    ids.into_iter().map(|p| (p, ds.mixture(p).unwrap())).collect()
}

#[test]
fn default_dataset_shape_is_frozen() {
    let ds = dataset();
    assert_eq!(ds.samples.len(), 720);
    assert_eq!(ds.samples.iter().filter(|s| s.is_complete()).count(), 428);
}

#[test]
fn validation_confusions_are_frozen() {
    let ds = dataset();
    let expected = [
        (Variant::Combined, 5, (160, 12, 43, 1)),
        (Variant::Combined, 8, (159, 10, 45, 2)),
        (Variant::Combined, 10, (159, 8, 47, 2)),
        (Variant::Combined, 16, (159, 6, 49, 2)),
        (Variant::Combined, 20, (158, 4, 51, 3)),
        (Variant::Combined, 25, (158, 1, 54, 3)),
        (Variant::Combined, 40, (161, 0, 55, 0)),
        (Variant::AttentionOnly, 16, (159, 6, 49, 2)),
    ];
    for (variant, t, want) in expected {
        let tr = train_detector(ds, variant, &[t], &TrainHyper::default()).unwrap();
        let report = evaluate_split(&tr, ds, Split::Validation).unwrap();
        assert_eq!(counts(&report.pooled), want, "{variant} at {t}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let ds = dataset();
    let a = train_detector(ds, Variant::MultiTimestep, &[5, 8, 16], &TrainHyper::default()).unwrap();
    let b = train_detector(ds, Variant::MultiTimestep, &[5, 8, 16], &TrainHyper::default()).unwrap();
    assert_eq!(a.model.to_text(), b.model.to_text());
    assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
}

#[test]
fn shuffled_labels_predict_like_a_coin() {
    let mut ds = dataset().clone();
    let mut labels: Vec<Vec<u8>> = ds.samples.iter().map(|s| s.labels.clone()).collect();
    SplitMix64::new(31).shuffle(&mut labels);
    for (s, l) in ds.samples.iter_mut().zip(labels) {
        s.labels = l;
    }
    let tr = train_detector(&ds, Variant::Combined, &[16], &TrainHyper::default()).unwrap();
    let report = evaluate_split(&tr, &ds, Split::Validation).unwrap();
    let c = report.pooled;
    // A label-blind predictor says "present" at the same rate on both classes.
    let pos = (c.tp + c.r#fn) as f64;
    let neg = (c.tn + c.fp) as f64;
    let rate_pos = c.tp as f64 / pos;
    let rate_neg = c.fp as f64 / neg;
    let pooled = (c.tp + c.fp) as f64 / (pos + neg);
    let se = (pooled * (1.0 - pooled) * (1.0 / pos + 1.0 / neg)).sqrt();
    assert!((rate_pos - rate_neg).abs() <= 3.0 * se + 1e-12, "{c:?}");
}

#[test]
fn sweep_columns_agree_on_toy_detectors() {
    let ds = dataset();
    let mut points = Vec::new();
    for t in [5, 8, 16, 40] {
        let tr = train_detector(ds, Variant::Combined, &[t], &TrainHyper::default()).unwrap();
        let r = evaluate_split(&tr, ds, Split::Validation).unwrap();
        points.push(OperatingPoint::symmetric(t, r.recall().unwrap(), r.tn_rate().unwrap(), 2));
    }
    let dist = AttemptDistribution::symmetric_completeness(0.59, 2).unwrap();
    let rows = sweep_tlast(&points, &dist, 50, 1_000_000, 17).unwrap();
    for r in &rows {
        assert!(r.ci_lo <= r.saving_cf && r.saving_cf <= r.ci_hi, "{r:?}");
    }
}

#[test]
fn baseline_attempts_are_geometric() {
    let ds = dataset();
    let sched = make_schedule(50).unwrap();
    let mixture = ds.mixture(0).unwrap();
    let p = head_core::scene::completeness_probability(&mixture);
    assert!((p - 0.59).abs() < 1e-6);
    let policy = RunPolicy::baseline(0.5);
    let runs = 1000;
    let attempts: Vec<f64> = (0..runs)
        .map(|r| {
            let trace = run_until_complete(&mixture, &policy, &mut SeedStream::new(derive_seed(&[77, r])), &sched).unwrap();
            assert!(trace.check(50));
            trace.attempts.len() as f64
        })
        .collect();
    let mean = attempts.iter().sum::<f64>() / runs as f64;
    let sd = (1.0 - p).sqrt() / p;
    assert!((mean - 1.0 / p).abs() < 3.0 * sd / (runs as f64).sqrt(), "mean attempts {mean}");
}

#[test]
fn head_campaign_matches_simulated_cost() {
    let ds = dataset();
    let sched = make_schedule(50).unwrap();
    let tr = train_detector(ds, Variant::Combined, &[8], &TrainHyper::default()).unwrap();
    // tn_rate on the training prompts is only a sanity floor here
    let train_report = evaluate_detector(&tr.model, ds, &tr.splits.train).unwrap();
    assert!(train_report.tn_rate().unwrap() > 0.6);

    let prompts = held_out(ds);
    let (point, _) = measure_operating_point(&tr.model, &prompts, 200, 4242, &sched, 0.5).unwrap();
    let params = point.params(50).unwrap();
    let dist = AttemptDistribution::from_mixture(&prompts[0].1).unwrap();
    let mc = monte_carlo_cost(&dist, &params, 1_000_000, 5).unwrap();

    let report = measure_campaign(
        &prompts,
        &RunPolicy::baseline(0.5),
        &RunPolicy::head(tr.model.clone(), 0.5),
        60,
        23,
        &sched,
        0,
    )
    .unwrap();
    let steps: Vec<f64> = report
        .prompts
        .iter()
        .flat_map(|p| p.head.iter().map(|t| t.total_steps as f64))
        .collect();
    let n = steps.len() as f64;
    let mean = steps.iter().sum::<f64>() / n;
    let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt() + 50.0 * (mc.ci_hi - mc.ci_lo) / 2.0;
    let predicted = 50.0 * mc.expected_cost;
    assert!((mean - predicted).abs() < half, "campaign {mean:.2} vs simulated {predicted:.2} ± {half:.2}");
    for p in &report.prompts {
        for t in p.head.iter().chain(&p.baseline) {
            assert!(t.check(50));
        }
    }
}
