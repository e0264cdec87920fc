//! Economics of the abort-and-restart policy.
//!
//! One attempt draws a true presence pattern, then one verdict per object
//! (conditionally independent given the pattern). Any "absent" verdict
//! aborts the attempt at cost `f = t_last / T`; otherwise the attempt runs to
//! completion at cost 1, and a free final check either accepts it (every
//! object present) or triggers a restart. Costs are in full-generation
//! units. The closed form and the Monte Carlo simulator below compute the
//! same expectation by independent routes.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::scene::MixtureSpec;
use crate::stats::Accumulator;

pub const DEFAULT_RESTART_CAP: u64 = 1_000_000;
pub const REFERENCE_COMPLETENESS: f64 = 0.59;
const MC_CHUNKS: u64 = 64;

/// Detector operating point and abort cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Abort-cost fraction `t_last / T`.
    pub f: f64,
    pub recall: Vec<f64>,
    pub tn_rate: Vec<f64>,
}

impl PolicyParams {
    pub fn new(f: f64, recall: Vec<f64>, tn_rate: Vec<f64>) -> Result<Self> {
        let p = Self { f, recall, tn_rate };
        p.validate()?;
        Ok(p)
    }

    /// Same recall and TN-rate for each of `n` objects.
    pub fn symmetric(f: f64, recall: f64, tn_rate: f64, n: usize) -> Result<Self> {
        Self::new(f, vec![recall; n], vec![tn_rate; n])
    }

    pub fn objects(&self) -> usize {
        self.recall.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.recall.is_empty() || self.recall.len() != self.tn_rate.len() {
            return Err(Error::InvalidConfig(
                "need one recall and one TN-rate per object".into(),
            ));
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return Err(Error::InvalidConfig(format!("f = {} outside (0, 1]", self.f)));
        }
        if self.recall.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidConfig("recall must lie in (0, 1]".into()));
        }
        if self.tn_rate.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig("TN-rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Probability that every verdict is "present" under `pattern`.
    pub fn continue_probability(&self, pattern: usize) -> f64 {
        (0..self.objects())
            .map(|o| {
                if pattern >> o & 1 == 1 {
                    self.recall[o]
                } else {
                    1.0 - self.tn_rate[o]
                }
            })
            .product()
    }
}

/// Distribution of true presence patterns; bit `o` of the index is object `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptDistribution {
    objects: usize,
    probs: Vec<f64>,
}

impl AttemptDistribution {
    pub fn new(objects: usize, probs: Vec<f64>) -> Result<Self> {
        if objects == 0 || probs.len() != 1 << objects {
            return Err(Error::InvalidConfig(format!(
                "{} pattern probabilities for {objects} objects",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidConfig("pattern probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("pattern probabilities sum to {total}")));
        }
        if probs[(1 << objects) - 1] <= 0.0 {
            return Err(Error::NeverAccepts);
        }
        Ok(Self { objects, probs })
    }

    /// Independent per-object presence with probabilities `q`.
    pub fn independent(q: &[f64]) -> Result<Self> {
        let n = q.len();
        let probs = (0..1usize << n)
            .map(|s| {
                (0..n)
                    .map(|o| if s >> o & 1 == 1 { q[o] } else { 1.0 - q[o] })
                    .product()
            })
            .collect();
        Self::new(n, probs)
    }

    /// `n` symmetric objects with overall completeness `p`.
    pub fn symmetric_completeness(p: f64, n: usize) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidConfig(format!("completeness {p} outside (0, 1]")));
        }
        Self::independent(&vec![p.powf(1.0 / n as f64); n])
    }

    /// Exact pattern probabilities of a scene mixture.
    pub fn from_mixture(mixture: &MixtureSpec) -> Result<Self> {
        let n = mixture.objects().len();
        let mut probs = vec![0.0; 1 << n];
        for c in mixture.components() {
            let s = c
                .presence_pattern()
                .iter()
                .enumerate()
                .fold(0usize, |acc, (o, &p)| acc | (usize::from(p) << o));
            probs[s] += c.weight;
        }
        Self::new(n, probs)
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn all_present(&self) -> usize {
        (1 << self.objects) - 1
    }

    /// `P(all objects present)`.
    pub fn completeness(&self) -> f64 {
        self.probs[self.all_present()]
    }

    /// Expected cost without early detection, `1 / P(all present)`.
    pub fn baseline_cost(&self) -> f64 {
        1.0 / self.completeness()
    }

    fn sample(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (s, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        // rounding in the cumulative sum: fall back to the last nonzero cell
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn check_shapes(dist: &AttemptDistribution, params: &PolicyParams) -> Result<()> {
    params.validate()?;
    if dist.objects() != params.objects() {
        return Err(Error::InvalidConfig(format!(
            "distribution over {} objects, policy over {}",
            dist.objects(),
            params.objects()
        )));
    }
    Ok(())
}

/// Exact expected cost until acceptance (renewal-reward argument):
/// mean cost per attempt divided by the per-attempt acceptance probability.
pub fn expected_cost_closed_form(dist: &AttemptDistribution, params: &PolicyParams) -> Result<f64> {
    check_shapes(dist, params)?;
    let accept = dist.completeness() * params.recall.iter().product::<f64>();
    if !(accept > 0.0) {
        return Err(Error::NeverAccepts);
    }
    let per_attempt: f64 = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let c = params.continue_probability(s);
            p * (c + (1.0 - c) * params.f)
        })
        .sum();
    Ok(per_attempt / accept)
}

/// `1 - E_head / E_baseline`; negative when early detection costs time.
pub fn relative_saving(e_head: f64, e_baseline: f64) -> f64 {
    1.0 - e_head / e_baseline
}

pub fn closed_form_saving(dist: &AttemptDistribution, params: &PolicyParams) -> Result<f64> {
    Ok(relative_saving(
        expected_cost_closed_form(dist, params)?,
        dist.baseline_cost(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub expected_cost: f64,
    pub baseline_cost: f64,
    pub relative_saving: f64,
    pub trials: u64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl SimReport {
    /// 95% interval of the saving (bounds swap because saving falls as cost rises).
    pub fn saving_ci(&self) -> (f64, f64) {
        (
            relative_saving(self.ci_hi, self.baseline_cost),
            relative_saving(self.ci_lo, self.baseline_cost),
        )
    }
}

pub fn monte_carlo_cost(dist: &AttemptDistribution, params: &PolicyParams, trials: u64, seed: u64) -> Result<SimReport> {
    monte_carlo_cost_capped(dist, params, trials, seed, DEFAULT_RESTART_CAP)
}

/// Simulates `trials` independent episodes. Trials are split into a fixed
/// number of chunks with derived seeds, so the result does not depend on the
/// thread count.
pub fn monte_carlo_cost_capped(
    dist: &AttemptDistribution,
    params: &PolicyParams,
    trials: u64,
    seed: u64,
    restart_cap: u64,
) -> Result<SimReport> {
    check_shapes(dist, params)?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let chunks: Vec<(u64, u64)> = (0..MC_CHUNKS)
        .map(|c| {
            let n = trials / MC_CHUNKS + u64::from(c < trials % MC_CHUNKS);
            (c, n)
        })
        .filter(|&(_, n)| n > 0)
        .collect();
    let partials: Vec<Accumulator> = chunks
        .par_iter()
        .map(|&(chunk, n)| {
            let mut rng = SplitMix64::new(derive_seed(&[seed, chunk]));
            let mut acc = Accumulator::default();
            for _ in 0..n {
                acc.push(simulate_episode(dist, params, &mut rng, restart_cap)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Accumulator::default();
    for p in &partials {
        total.merge(p);
    }
    let est = total.estimate();
    let (ci_lo, ci_hi) = est.ci95();
    let baseline_cost = dist.baseline_cost();
    Ok(SimReport {
        expected_cost: est.mean,
        baseline_cost,
        relative_saving: relative_saving(est.mean, baseline_cost),
        trials,
        std_error: est.std_error,
        ci_lo,
        ci_hi,
    })
}

fn simulate_episode(dist: &AttemptDistribution, params: &PolicyParams, rng: &mut SplitMix64, cap: u64) -> Result<f64> {
    let all = dist.all_present();
    let mut cost = 0.0;
    for _ in 0..cap {
        let pattern = dist.sample(rng);
        let mut proceed = true;
        for o in 0..params.objects() {
            let p_present = if pattern >> o & 1 == 1 {
                params.recall[o]
            } else {
                1.0 - params.tn_rate[o]
            };
            if !rng.bernoulli(p_present) {
                proceed = false;
            }
        }
        if !proceed {
            cost += params.f;
            continue;
        }
        cost += 1.0;
        if pattern == all {
            return Ok(cost);
        }
    }
    Err(Error::TrialBudgetExceeded(cap))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub t_last: usize,
    pub f: f64,
    pub recall: f64,
    pub tn_rate: f64,
    pub saving_cf: f64,
    pub saving_mc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Measured operating point of one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub t_last: usize,
    /// Per target slot.
    pub recall: Vec<f64>,
    pub tn_rate: Vec<f64>,
}

impl OperatingPoint {
    pub fn symmetric(t_last: usize, recall: f64, tn_rate: f64, objects: usize) -> Self {
        Self {
            t_last,
            recall: vec![recall; objects],
            tn_rate: vec![tn_rate; objects],
        }
    }

    pub fn params(&self, steps: usize) -> Result<PolicyParams> {
        PolicyParams::new(
            self.t_last as f64 / steps as f64,
            self.recall.clone(),
            self.tn_rate.clone(),
        )
    }
}

/// One row per operating point (sorted by `t_last`): closed-form saving and a
/// Monte Carlo estimate with its 95% interval.
pub fn sweep_tlast(
    points: &[OperatingPoint],
    dist: &AttemptDistribution,
    steps: usize,
    trials: u64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if points.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two t_last values".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.t_last);
    sorted
        .iter()
        .map(|pt| {
            let params = pt.params(steps)?;
            let saving_cf = closed_form_saving(dist, &params)?;
            let mc = monte_carlo_cost(dist, &params, trials, derive_seed(&[seed, pt.t_last as u64]))?;
            let (ci_lo, ci_hi) = mc.saving_ci();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Ok(SweepRow {
                t_last: pt.t_last,
                f: params.f,
                recall: mean(&pt.recall),
                tn_rate: mean(&pt.tn_rate),
                saving_cf,
                saving_mc: mc.relative_saving,
                ci_lo,
                ci_hi,
            })
        })
        .collect()
}

/// Looks up the operating point for each requested `t_last`.
pub fn select_points(points: &[OperatingPoint], t_lasts: &[usize]) -> Result<Vec<OperatingPoint>> {
    t_lasts
        .iter()
        .map(|&t| {
            points
                .iter()
                .find(|p| p.t_last == t)
                .cloned()
                .ok_or(Error::MissingReport(t))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityRow {
    pub p: f64,
    pub t_last: usize,
    pub saving_cf: f64,
}

/// Closed-form saving against completeness `p` for each operating point.
/// The `p = 0.59` marker row is always emitted. Objects are symmetric with
/// per-object faithfulness `p^(1/n)`.
pub fn sweep_probability(points: &[OperatingPoint], p_grid: &[f64], steps: usize) -> Result<Vec<ProbabilityRow>> {
    if let Some(p) = p_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidConfig(format!("probability {p} outside (0, 1)")));
    }
    let mut grid = p_grid.to_vec();
    if !grid.iter().any(|p| (p - REFERENCE_COMPLETENESS).abs() < 1e-12) {
        grid.push(REFERENCE_COMPLETENESS);
    }
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for pt in points {
        let params = pt.params(steps)?;
        for &p in &grid {
            let dist = AttemptDistribution::symmetric_completeness(p, params.objects())?;
            rows.push(ProbabilityRow {
                p,
                t_last: pt.t_last,
                saving_cf: closed_form_saving(&dist, &params)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(writer: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
