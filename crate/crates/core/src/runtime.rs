//! The live abort-and-reseed loop and paired campaigns against the
//! generate-then-check baseline.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::label_with_mixture;
use crate::detector::{Confusion, DetectorModel};
use crate::diffusion::{NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, run_seed, SplitMix64};
use crate::scene::MixtureSpec;
use crate::stats::quantile;
use crate::timesaver::{expected_cost_closed_form, AttemptDistribution, OperatingPoint};

pub const DEFAULT_MAX_RESTARTS: usize = 1000;
pub const DEFAULT_BOOTSTRAP: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Baseline,
    Head(DetectorModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPolicy {
    pub mode: Mode,
    pub max_restarts: usize,
    pub label_threshold: f64,
}

impl RunPolicy {
    pub fn baseline(label_threshold: f64) -> Self {
        Self {
            mode: Mode::Baseline,
            max_restarts: DEFAULT_MAX_RESTARTS,
            label_threshold,
        }
    }

    pub fn head(model: DetectorModel, label_threshold: f64) -> Self {
        Self {
            mode: Mode::Head(model),
            max_restarts: DEFAULT_MAX_RESTARTS,
            label_threshold,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.mode {
            Mode::Baseline => "baseline",
            Mode::Head(_) => "head",
        }
    }

    /// Checks that every step the detector consults happens before the end.
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if let Mode::Head(model) = &self.mode {
            model.variant.check_steps(&model.steps)?;
            if let Some(&bad) = model.steps.iter().find(|&&s| s >= schedule.steps()) {
                return Err(Error::InvalidTimestep {
                    t: bad,
                    lo: 0,
                    hi: schedule.steps() - 1,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Aborted { step: usize },
    CompletedIncomplete,
    CompletedComplete,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Aborted { step } => write!(f, "aborted@{step}"),
            Outcome::CompletedIncomplete => f.write_str("completed-incomplete"),
            Outcome::CompletedComplete => f.write_str("completed-complete"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    /// Per-object "present" verdicts; empty in baseline mode.
    pub verdicts: Vec<bool>,
    /// Oracle labels of the final image; empty when aborted.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub attempts: Vec<Attempt>,
    pub total_steps: usize,
    pub accepted_seed: u64,
}

impl RunTrace {
    /// Checks the per-trace accounting invariants against horizon `steps`.
    pub fn check(&self, steps: usize) -> bool {
        let Some((last, rest)) = self.attempts.split_last() else {
            return false;
        };
        let sum: usize = self.attempts.iter().map(|a| a.steps).sum();
        let consistent = self.attempts.iter().all(|a| match a.outcome {
            Outcome::Aborted { step } => a.steps == step && a.verdicts.contains(&false),
            _ => a.steps == steps,
        });
        last.outcome == Outcome::CompletedComplete
            && last.seed == self.accepted_seed
            && rest.iter().all(|a| a.outcome != Outcome::CompletedComplete)
            && sum == self.total_steps
            && consistent
    }

    pub fn aborted(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| matches!(a.outcome, Outcome::Aborted { .. }))
            .count()
    }
}

/// Deterministic stream of fresh seeds: the root seed mixed with a counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(&[self.root, self.counter]);
        self.counter += 1;
        s
    }
}

/// Runs attempts from `seeds` until one is accepted as complete.
pub fn run_until_complete(
    mixture: &MixtureSpec,
    policy: &RunPolicy,
    seeds: &mut SeedStream,
    schedule: &NoiseSchedule,
) -> Result<RunTrace> {
    policy.validate(schedule)?;
    let mut attempts = Vec::new();
    let mut total_steps = 0;
    loop {
        if attempts.len() > policy.max_restarts {
            return Err(Error::RestartLimitExceeded(policy.max_restarts));
        }
        let attempt = run_attempt(mixture, policy, seeds.next_seed(), schedule)?;
        total_steps += attempt.steps;
        let done = attempt.outcome == Outcome::CompletedComplete;
        let seed = attempt.seed;
        attempts.push(attempt);
        if done {
            return Ok(RunTrace {
                attempts,
                total_steps,
                accepted_seed: seed,
            });
        }
    }
}

fn run_attempt(mixture: &MixtureSpec, policy: &RunPolicy, seed: u64, schedule: &NoiseSchedule) -> Result<Attempt> {
    let mut traj = Trajectory::start(mixture, schedule, seed);
    let mut verdicts = Vec::new();
    if let Mode::Head(model) = &policy.mode {
        let mut steps = model.steps.clone();
        steps.sort_unstable();
        let mut captures = Vec::with_capacity(steps.len());
        for s in steps {
            traj.advance_to(s)?;
            // the detector was trained on f32-precision captures
            captures.push(traj.capture()?.quantized());
        }
        for spec in mixture.objects() {
            verdicts.push(model.predict_presence(&model.features(&captures, spec)?)?.present);
        }
        if verdicts.contains(&false) {
            let step = traj.step();
            return Ok(Attempt {
                seed,
                outcome: Outcome::Aborted { step },
                steps: step,
                verdicts,
                labels: Vec::new(),
            });
        }
    }
    let image = traj.into_final()?.quantized();
    let labels = label_with_mixture(&image, mixture, policy.label_threshold);
    let outcome = if labels.iter().all(|&l| l == 1) {
        Outcome::CompletedComplete
    } else {
        Outcome::CompletedIncomplete
    };
    Ok(Attempt {
        seed,
        outcome,
        steps: schedule.steps(),
        verdicts,
        labels,
    })
}

/// Paired traces for one prompt: both policies consumed the same seed streams.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCampaign {
    pub prompt_id: usize,
    pub baseline: Vec<RunTrace>,
    pub head: Vec<RunTrace>,
}

impl PromptCampaign {
    fn steps(traces: &[RunTrace]) -> Vec<f64> {
        traces.iter().map(|t| t.total_steps as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignRow {
    pub prompt_id: String,
    pub policy: String,
    pub runs: usize,
    pub mean_steps: f64,
    pub saving: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub prompts: Vec<PromptCampaign>,
    pub rows: Vec<CampaignRow>,
    pub pooled_saving: f64,
    pub pooled_ci: (f64, f64),
}

impl CampaignReport {
    pub fn runs(&self) -> usize {
        self.prompts.iter().map(|p| p.baseline.len()).sum()
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        crate::timesaver::write_csv(writer, &self.rows)
    }
}

fn ratio_saving(base: &[f64], head: &[f64]) -> f64 {
    1.0 - head.iter().sum::<f64>() / base.iter().sum::<f64>()
}

/// Percentile bootstrap over paired runs.
fn bootstrap_ci(base: &[f64], head: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if resamples == 0 || base.is_empty() {
        let s = ratio_saving(base, head);
        return (s, s);
    }
    let n = base.len();
    let mut rng = SplitMix64::new(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let (mut b, mut h) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.below(n);
                b += base[i];
                h += head[i];
            }
            1.0 - h / b
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    (quantile(&stats, 0.025), quantile(&stats, 0.975))
}

/// Runs `runs_per_prompt` paired episodes per prompt. Run `r` of prompt `p`
/// gives both policies the seed stream rooted at `(root_seed, p, r)`.
pub fn measure_campaign(
    prompts: &[(usize, MixtureSpec)],
    baseline: &RunPolicy,
    head: &RunPolicy,
    runs_per_prompt: usize,
    root_seed: u64,
    schedule: &NoiseSchedule,
    bootstrap: usize,
) -> Result<CampaignReport> {
    if prompts.is_empty() || runs_per_prompt == 0 {
        return Err(Error::InvalidConfig("a campaign needs prompts and runs".into()));
    }
    baseline.validate(schedule)?;
    head.validate(schedule)?;
    let tasks: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..runs_per_prompt).map(move |r| (i, r)))
        .collect();
    let traces: Vec<(RunTrace, RunTrace)> = tasks
        .par_iter()
        .map(|&(i, r)| {
            let (pid, mixture) = &prompts[i];
            let root = derive_seed(&[root_seed, *pid as u64, r as u64]);
            let b = run_until_complete(mixture, baseline, &mut SeedStream::new(root), schedule)?;
            let h = run_until_complete(mixture, head, &mut SeedStream::new(root), schedule)?;
            Ok((b, h))
        })
        .collect::<Result<_>>()?;

    let mut campaigns: Vec<PromptCampaign> = prompts
        .iter()
        .map(|(pid, _)| PromptCampaign {
            prompt_id: *pid,
            baseline: Vec::with_capacity(runs_per_prompt),
            head: Vec::with_capacity(runs_per_prompt),
        })
        .collect();
    for (&(i, _), (b, h)) in tasks.iter().zip(traces) {
        campaigns[i].baseline.push(b);
        campaigns[i].head.push(h);
    }

    let mut rows = Vec::new();
    let mut all_base = Vec::new();
    let mut all_head = Vec::new();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut push_rows = |label: String, base: &[f64], hd: &[f64], seed: u64| {
        let saving = ratio_saving(base, hd);
        let (lo, hi) = bootstrap_ci(base, hd, bootstrap, seed);
        rows.push(CampaignRow {
            prompt_id: label.clone(),
            policy: baseline.name().into(),
            runs: base.len(),
            mean_steps: mean(base),
            saving: 0.0,
            ci_lo: 0.0,
            ci_hi: 0.0,
        });
        rows.push(CampaignRow {
            prompt_id: label,
            policy: head.name().into(),
            runs: hd.len(),
            mean_steps: mean(hd),
            saving,
            ci_lo: lo,
            ci_hi: hi,
        });
        (saving, (lo, hi))
    };
    for c in &campaigns {
        let base = PromptCampaign::steps(&c.baseline);
        let hd = PromptCampaign::steps(&c.head);
        push_rows(c.prompt_id.to_string(), &base, &hd, derive_seed(&[root_seed, c.prompt_id as u64, u64::MAX]));
        all_base.extend(base);
        all_head.extend(hd);
    }
    let (pooled_saving, pooled_ci) = push_rows("all".into(), &all_base, &all_head, derive_seed(&[root_seed, u64::MAX]));
    Ok(CampaignReport {
        prompts: campaigns,
        rows,
        pooled_saving,
        pooled_ci,
    })
}

/// Measures a detector's per-slot confusion on fresh generations of the given
/// prompts (`seeds_per_prompt` each, seeds derived from `global_seed`).
pub fn measure_operating_point(
    model: &DetectorModel,
    prompts: &[(usize, MixtureSpec)],
    seeds_per_prompt: usize,
    global_seed: u64,
    schedule: &NoiseSchedule,
    label_threshold: f64,
) -> Result<(OperatingPoint, Vec<Confusion>)> {
    let policy = RunPolicy::head(model.clone(), label_threshold);
    policy.validate(schedule)?;
    let slots = prompts
        .iter()
        .map(|(_, m)| m.objects().len())
        .max()
        .ok_or_else(|| Error::InvalidConfig("no prompts to measure on".into()))?;
    let tasks: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..seeds_per_prompt).map(move |s| (i, s)))
        .collect();
    let per_task: Vec<(Vec<bool>, Vec<u8>)> = tasks
        .par_iter()
        .map(|&(i, s)| {
            let (pid, mixture) = &prompts[i];
            let seed = run_seed(global_seed, *pid as u64, s as u64);
            let mut traj = Trajectory::start(mixture, schedule, seed);
            let mut captures = Vec::new();
            let mut steps = model.steps.clone();
            steps.sort_unstable();
            for st in steps {
                traj.advance_to(st)?;
                captures.push(traj.capture()?.quantized());
            }
            let verdicts = mixture
                .objects()
                .iter()
                .map(|spec| Ok(model.predict_presence(&model.features(&captures, spec)?)?.present))
                .collect::<Result<Vec<_>>>()?;
            let image = traj.into_final()?.quantized();
            Ok((verdicts, label_with_mixture(&image, mixture, label_threshold)))
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![Confusion::default(); slots];
    for (verdicts, labels) in &per_task {
        for (o, (&v, &l)) in verdicts.iter().zip(labels).enumerate() {
            confusion[o].record(v, l);
        }
    }
    let rate = |c: &Confusion, f: fn(&Confusion) -> Option<f64>| f(c).ok_or(Error::DegenerateLabels);
    let point = OperatingPoint {
        t_last: model.t_last(),
        recall: confusion.iter().map(|c| rate(c, Confusion::recall)).collect::<Result<_>>()?,
        tn_rate: confusion.iter().map(|c| rate(c, Confusion::tn_rate)).collect::<Result<_>>()?,
    };
    Ok((point, confusion))
}

/// Closed-form pooled saving for a campaign over `prompts` with equal runs
/// per prompt: `1 - Σ E_head / Σ E_baseline`.
pub fn predicted_campaign_saving(prompts: &[(usize, MixtureSpec)], point: &OperatingPoint, steps: usize) -> Result<f64> {
    let params = point.params(steps)?;
    let mut head = 0.0;
    let mut base = 0.0;
    for (_, m) in prompts {
        let dist = AttemptDistribution::from_mixture(m)?;
        head += expected_cost_closed_form(&dist, &params)?;
        base += dist.baseline_cost();
    }
    Ok(1.0 - head / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;
    use crate::diffusion::make_schedule;
    use crate::scene::{build_conditional_mixture, Catalog};

    fn mixture(q: f64) -> MixtureSpec {
        let targets = vec!["cat".to_string(), "bench".to_string()];
        build_conditional_mixture(&targets, &[q, q], &Catalog::builtin()).unwrap()
    }

    /// Always predicts "absent".
    fn pessimist(steps: Vec<usize>) -> DetectorModel {
        let mut m = DetectorModel::inert(Variant::Combined, steps);
        m.bias = -10.0;
        m
    }

    #[test]
    fn faithful_mixture_accepts_first_attempt() {
        let sched = make_schedule(20).unwrap();
        let m = mixture(1.0);
        let policy = RunPolicy::head(DetectorModel::inert(Variant::Combined, vec![4]), 0.5);
        let trace = run_until_complete(&m, &policy, &mut SeedStream::new(1), &sched).unwrap();
        assert_eq!(trace.attempts.len(), 1);
        assert_eq!(trace.total_steps, 20);
        assert!(trace.check(20));
    }

    #[test]
    fn inert_head_replays_baseline() {
        let sched = make_schedule(20).unwrap();
        let m = mixture(0.6);
        let inert = RunPolicy::head(DetectorModel::inert(Variant::Combined, vec![5]), 0.5);
        let base = RunPolicy::baseline(0.5);
        for root in 0..10 {
            let a = run_until_complete(&m, &base, &mut SeedStream::new(root), &sched).unwrap();
            let b = run_until_complete(&m, &inert, &mut SeedStream::new(root), &sched).unwrap();
            let key = |t: &RunTrace| t.attempts.iter().map(|a| (a.seed, a.outcome, a.steps)).collect::<Vec<_>>();
            assert_eq!(key(&a), key(&b));
            assert!(a.check(20) && b.check(20));
        }
    }

    #[test]
    fn restart_limit() {
        let sched = make_schedule(10).unwrap();
        let mut policy = RunPolicy::head(pessimist(vec![3]), 0.5);
        policy.max_restarts = 4;
        let err = run_until_complete(&mixture(0.9), &policy, &mut SeedStream::new(0), &sched).unwrap_err();
        assert!(matches!(err, Error::RestartLimitExceeded(4)));
    }

    #[test]
    fn late_decision_step_is_rejected() {
        let sched = make_schedule(10).unwrap();
        let policy = RunPolicy::head(DetectorModel::inert(Variant::Combined, vec![10]), 0.5);
        assert!(run_until_complete(&mixture(0.9), &policy, &mut SeedStream::new(0), &sched).is_err());
    }

    #[test]
    fn seed_stream_is_deterministic_and_fresh() {
        let mut a = SeedStream::new(3);
        let mut b = SeedStream::new(3);
        let xs: Vec<u64> = (0..50).map(|_| a.next_seed()).collect();
        let ys: Vec<u64> = (0..50).map(|_| b.next_seed()).collect();
        assert_eq!(xs, ys);
        let mut uniq = xs.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 50);
    }

    #[test]
    fn identical_policies_save_nothing() {
        let sched = make_schedule(12).unwrap();
        let prompts = vec![(0, mixture(0.7)), (3, mixture(0.8))];
        let base = RunPolicy::baseline(0.5);
        let r = measure_campaign(&prompts, &base, &base, 8, 5, &sched, 100).unwrap();
        assert_eq!(r.pooled_saving, 0.0);
        assert_eq!(r.pooled_ci, (0.0, 0.0));
        assert_eq!(r.runs(), 16);
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.rows[4].prompt_id, "all");
    }

    #[test]
    fn campaign_is_reproducible_and_accounted() {
        let sched = make_schedule(12).unwrap();
        let prompts = vec![(1, mixture(0.75))];
        let base = RunPolicy::baseline(0.5);
        let head = RunPolicy::head(DetectorModel::inert(Variant::Combined, vec![3]), 0.5);
        let a = measure_campaign(&prompts, &base, &head, 10, 9, &sched, 50).unwrap();
        let b = measure_campaign(&prompts, &base, &head, 10, 9, &sched, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pooled_saving, 0.0);
        for t in a.prompts[0].baseline.iter().chain(&a.prompts[0].head) {
            assert!(t.check(12));
        }
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("prompt_id,policy,runs,mean_steps,saving,ci_lo,ci_hi\n"));
    }

    #[test]
    fn bootstrap_ci_brackets_point_estimate() {
        let base: Vec<f64> = (0..200).map(|i| 50.0 * (1 + i % 3) as f64).collect();
        let head: Vec<f64> = base.iter().enumerate().map(|(i, b)| b - (i % 5) as f64 * 4.0).collect();
        let s = ratio_saving(&base, &head);
        let (lo, hi) = bootstrap_ci(&base, &head, 500, 1);
        assert!(lo < s && s < hi);
    }
}
