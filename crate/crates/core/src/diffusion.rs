//! Discrete variance-preserving diffusion driven by the exact score of a
//! scene mixture, with deterministic DDIM updates.
//!
//! Two clocks are in play. The diffusion index `t` runs from `T` (pure
//! noise) down to `0` (clean image). Critical timesteps are counted in
//! generation steps: step `k` is the latent after `k` denoising updates,
//! i.e. diffusion index `T - k`. An attempt aborted at step `k` has
//! therefore consumed `k` of its `T` updates.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::SplitMix64;
use crate::scene::MixtureSpec;

pub const DEFAULT_STEPS: usize = 50;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal levels `ᾱ_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphabar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`, `ᾱ_0` pinned to 1.
    ///
    /// The raw cosine reaches exactly zero at `t = T`; per-step betas are
    /// capped at 0.999, which keeps `ᾱ_T` strictly positive and far below
    /// 1e-3.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidT(steps));
        }
        let f = |u: usize| {
            let x = (u as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alphabar = Vec::with_capacity(steps + 1);
        alphabar.push(1.0);
        for t in 1..=steps {
            let raw = f(t) / f0;
            let prev = alphabar[t - 1];
            let floor = prev * (1.0 - MAX_BETA);
            alphabar.push(raw.max(floor).min(prev));
        }
        Ok(Self { alphabar })
    }

    pub fn steps(&self) -> usize {
        self.alphabar.len() - 1
    }

    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    /// Signal scale `α_t = √ᾱ_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphabar[t].sqrt()
    }

    /// Noise scale `σ_t = √(1 - ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alphabar[t]).sqrt()
    }

    /// Diffusion index reached after `step` generation steps.
    pub fn index_of_step(&self, step: usize) -> usize {
        self.steps() - step
    }
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Grid,
    /// Diffusion index.
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Grid, t: usize) -> Self {
        Self { z, t }
    }
}

/// Per-component posterior quantities at one latent.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// Component responsibilities `r_k(z)`, summing to 1.
    pub responsibilities: Vec<f64>,
    /// Marginal variance `α_t² s² + σ_t²`.
    pub variance: f64,
    pub alpha: f64,
    pub sigma: f64,
}

fn check_index(t: usize, lo: usize, schedule: &NoiseSchedule) -> Result<()> {
    let hi = schedule.steps();
    if t < lo || t > hi {
        return Err(Error::InvalidTimestep { t, lo, hi });
    }
    Ok(())
}

/// Posterior responsibilities of each component under
/// `p_t(z) = Σ_k w_k N(z; α_t μ_k, (α_t² s² + σ_t²) I)`, via log-sum-exp.
pub fn posterior(mixture: &MixtureSpec, state: &LatentState, schedule: &NoiseSchedule) -> Result<Posterior> {
    check_index(state.t, 0, schedule)?;
    let alpha = schedule.alpha(state.t);
    let sigma = schedule.sigma(state.t);
    let variance = alpha * alpha * mixture.variance() + sigma * sigma;
    if variance < 1e-12 {
        return Err(Error::DegenerateVariance(variance));
    }
    let z = state.z.as_slice();
    let logits: Vec<f64> = mixture
        .components()
        .iter()
        .map(|c| {
            let dist2: f64 = z
                .iter()
                .zip(c.mean_image.as_slice())
                .map(|(zi, mi)| (zi - alpha * mi).powi(2))
                .sum();
            c.weight.ln() - dist2 / (2.0 * variance)
        })
        .collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut responsibilities: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = responsibilities.iter().sum();
    for r in &mut responsibilities {
        *r /= total;
    }
    Ok(Posterior {
        responsibilities,
        variance,
        alpha,
        sigma,
    })
}

/// Noise prediction `ε = -σ_t ∇_z log p_t(z)` from the exact mixture score.
pub fn exact_epsilon(mixture: &MixtureSpec, state: &LatentState, schedule: &NoiseSchedule) -> Result<Grid> {
    check_index(state.t, 1, schedule)?;
    let post = posterior(mixture, state, schedule)?;
    Ok(epsilon_from_posterior(mixture, state, &post))
}

fn epsilon_from_posterior(mixture: &MixtureSpec, state: &LatentState, post: &Posterior) -> Grid {
    // ∇ log p = Σ_k r_k (α μ_k - z) / v
    let mut mean_signal = Grid::zeros(state.z.height(), state.z.width());
    for (c, &r) in mixture.components().iter().zip(&post.responsibilities) {
        if r > 0.0 {
            mean_signal.add_scaled(&c.mean_image, r * post.alpha);
        }
    }
    let scale = post.sigma / post.variance;
    let mut eps = state.z.clone();
    for (e, m) in eps.as_mut_slice().iter_mut().zip(mean_signal.as_slice()) {
        *e = scale * (*e - m);
    }
    eps
}

/// Deterministic DDIM transition (η = 0) from index `from` to `to`.
///
/// Panics if `to > from` or either index is past the schedule.
pub fn ddim_step(z: &Grid, eps: &Grid, from: usize, to: usize, schedule: &NoiseSchedule) -> Grid {
    assert!(to <= from && from <= schedule.steps(), "ddim_step({from} -> {to})");
    if to == from {
        return z.clone();
    }
    let (a_from, s_from) = (schedule.alpha(from), schedule.sigma(from));
    let (a_to, s_to) = (schedule.alpha(to), schedule.sigma(to));
    let data: Vec<f64> = z
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&zi, &ei)| {
            let x0 = (zi - s_from * ei) / a_from;
            a_to * x0 + s_to * ei
        })
        .collect();
    Grid::from_vec(z.height(), z.width(), data)
}

/// Scalar form of [`ddim_step`] with explicit coefficients.
pub fn ddim_scalar(z: f64, eps: f64, alpha_from: f64, sigma_from: f64, alpha_to: f64, sigma_to: f64) -> f64 {
    let x0 = (z - sigma_from * eps) / alpha_from;
    alpha_to * x0 + sigma_to * eps
}

/// Predicted final image: the latent projected straight to index 0.
pub fn predict_final_image(mixture: &MixtureSpec, state: &LatentState, schedule: &NoiseSchedule) -> Result<Grid> {
    if state.t == 0 {
        return Ok(state.z.clone());
    }
    let eps = exact_epsilon(mixture, state, schedule)?;
    Ok(ddim_step(&state.z, &eps, state.t, 0, schedule))
}

/// Responsibility-weighted placement map of object `object`, values in [0,1].
pub fn attention_map(
    mixture: &MixtureSpec,
    state: &LatentState,
    schedule: &NoiseSchedule,
    object: &str,
) -> Result<Grid> {
    let o = mixture.object_index(object)?;
    let post = posterior(mixture, state, schedule)?;
    Ok(attention_from_posterior(mixture, o, &post))
}

fn attention_from_posterior(mixture: &MixtureSpec, object: usize, post: &Posterior) -> Grid {
    let size = mixture.size();
    let mut map = Grid::zeros(size, size);
    for (c, &r) in mixture.components().iter().zip(&post.responsibilities) {
        if let Some(j) = c.placement[object] {
            map.add_scaled(mixture.template(object, j), r);
        }
    }
    map.map(|v| v.clamp(0.0, 1.0))
}

/// Everything captured at one critical timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedStep {
    /// Generation step (number of updates already applied).
    pub step: usize,
    /// Diffusion index of the captured latent.
    pub t: usize,
    pub pfi: Grid,
    /// One map per target, in prompt order.
    pub attention: Vec<(String, Grid)>,
    pub epsilon_norm: f64,
}

impl CapturedStep {
    pub fn attention_for(&self, object: &str) -> Option<&Grid> {
        self.attention
            .iter()
            .find(|(id, _)| id == object)
            .map(|(_, g)| g)
    }

    /// Values rounded to `f32`, the precision of the on-disk store.
    pub fn quantized(&self) -> Self {
        Self {
            step: self.step,
            t: self.t,
            pfi: self.pfi.quantized(),
            attention: self
                .attention
                .iter()
                .map(|(id, g)| (id.clone(), g.quantized()))
                .collect(),
            epsilon_norm: self.epsilon_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub prompt_id: usize,
    pub seed: u64,
    /// Ordered by generation step (descending diffusion index).
    pub captures: Vec<CapturedStep>,
    pub final_image: Grid,
    /// Component whose mean is nearest to the final image.
    pub nearest_component: usize,
}

/// Initial latent `z_T ~ N(0, I)` drawn row-major from the seeded stream.
pub fn initial_latent(size: usize, seed: u64) -> Grid {
    let mut rng = SplitMix64::new(seed);
    Grid::from_fn(size, size, |_, _| rng.next_gaussian())
}

/// A single generation in progress. Each call to [`Trajectory::advance`]
/// applies one DDIM update.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    mixture: &'a MixtureSpec,
    schedule: &'a NoiseSchedule,
    state: LatentState,
}

impl<'a> Trajectory<'a> {
    pub fn start(mixture: &'a MixtureSpec, schedule: &'a NoiseSchedule, seed: u64) -> Self {
        let z = initial_latent(mixture.size(), seed);
        Self {
            mixture,
            schedule,
            state: LatentState::new(z, schedule.steps()),
        }
    }

    /// Generation steps applied so far.
    pub fn step(&self) -> usize {
        self.schedule.steps() - self.state.t
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.t == 0
    }

    /// PFI and attention maps at the current latent.
    pub fn capture(&self) -> Result<CapturedStep> {
        let post = posterior(self.mixture, &self.state, self.schedule)?;
        let (pfi, epsilon_norm) = if self.state.t == 0 {
            (self.state.z.clone(), 0.0)
        } else {
            let eps = epsilon_from_posterior(self.mixture, &self.state, &post);
            let pfi = ddim_step(&self.state.z, &eps, self.state.t, 0, self.schedule);
            (pfi, eps.norm_sq().sqrt())
        };
        let attention = self
            .mixture
            .objects()
            .iter()
            .enumerate()
            .map(|(o, spec)| (spec.id.clone(), attention_from_posterior(self.mixture, o, &post)))
            .collect();
        Ok(CapturedStep {
            step: self.step(),
            t: self.state.t,
            pfi,
            attention,
            epsilon_norm,
        })
    }

    pub fn advance(&mut self) -> Result<()> {
        let t = self.state.t;
        if t == 0 {
            return Ok(());
        }
        let eps = exact_epsilon(self.mixture, &self.state, self.schedule)?;
        self.state.z = ddim_step(&self.state.z, &eps, t, t - 1, self.schedule);
        self.state.t = t - 1;
        Ok(())
    }

    /// Runs forward until `step` updates have been applied.
    pub fn advance_to(&mut self, step: usize) -> Result<()> {
        while self.step() < step && !self.is_finished() {
            self.advance()?;
        }
        Ok(())
    }

    pub fn into_final(mut self) -> Result<Grid> {
        self.advance_to(self.schedule.steps())?;
        Ok(self.state.z)
    }
}

/// Index of the component mean nearest to `image` in Euclidean distance.
pub fn nearest_component(mixture: &MixtureSpec, image: &Grid) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in mixture.components().iter().enumerate() {
        let d: f64 = image
            .as_slice()
            .iter()
            .zip(c.mean_image.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Full deterministic generation from `seed`, capturing at each critical
/// generation step in `critical_steps` (any order, duplicates ignored).
pub fn sample_with_capture(
    mixture: &MixtureSpec,
    schedule: &NoiseSchedule,
    prompt_id: usize,
    seed: u64,
    critical_steps: &[usize],
) -> Result<GenerationRecord> {
    let steps = schedule.steps();
    let mut wanted: Vec<usize> = critical_steps.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(&bad) = wanted.iter().find(|&&s| s >= steps) {
        return Err(Error::InvalidTimestep {
            t: bad,
            lo: 0,
            hi: steps - 1,
        });
    }
    let mut traj = Trajectory::start(mixture, schedule, seed);
    let mut captures = Vec::with_capacity(wanted.len());
    for &s in &wanted {
        traj.advance_to(s)?;
        captures.push(traj.capture()?);
    }
    let final_image = traj.into_final()?;
    let nearest = nearest_component(mixture, &final_image);
    Ok(GenerationRecord {
        prompt_id,
        seed,
        captures,
        final_image,
        nearest_component: nearest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_mixture_with, Catalog};

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn schedule_boundaries_and_monotonicity() {
        let s = make_schedule(50).unwrap();
        assert_eq!(s.alphabar(0), 1.0);
        assert!(s.alphabar(50) < s.alphabar(25) && s.alphabar(25) < s.alphabar(8));
        assert!(s.alphabar(50) <= 1e-3 && s.alphabar(50) > 0.0);
        for t in 1..=50 {
            assert!(s.alphabar(t) < s.alphabar(t - 1));
        }
        assert!(matches!(make_schedule(1), Err(Error::InvalidT(1))));
    }

    #[test]
    fn vp_identity_for_many_lengths() {
        for steps in [2, 3, 10, 50, 1000] {
            let s = make_schedule(steps).unwrap();
            for t in 0..=steps {
                let a = s.alpha(t);
                let b = s.sigma(t);
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
                assert!(s.alphabar(t) > 0.0 && s.alphabar(t) <= 1.0);
            }
            assert!(s.alphabar(steps) <= 1e-3);
        }
    }

    #[test]
    fn ddim_identity_and_boundary() {
        let s = make_schedule(50).unwrap();
        let z = Grid::from_vec(1, 2, vec![0.3, -1.2]);
        let e = Grid::from_vec(1, 2, vec![0.7, 0.1]);
        assert_eq!(ddim_step(&z, &e, 17, 17, &s), z);
        let to0 = ddim_step(&z, &e, 17, 0, &s);
        for i in 0..2 {
            let x0 = (z.as_slice()[i] - s.sigma(17) * e.as_slice()[i]) / s.alpha(17);
            assert!((to0.as_slice()[i] - x0).abs() < 1e-15);
        }
    }

    #[test]
    fn ddim_scalar_hand_arithmetic() {
        let sigma_to = (1.0f64 - 0.95 * 0.95).sqrt();
        assert!((sigma_to - 0.3122).abs() < 1e-4);
        // x0 = (0.9 - 0.6*0.5)/0.8 = 0.75; z' = 0.95*0.75 + 0.3122*0.5
        let z = ddim_scalar(0.9, 0.5, 0.8, 0.6, 0.95, sigma_to);
        assert!((z - 0.868_625).abs() < 1e-4);
        assert!((z - (0.95 * 0.75 + sigma_to * 0.5)).abs() < 1e-15);
    }

    fn single_component(mean: f64, var: f64, size: usize) -> MixtureSpec {
        MixtureSpec::custom(size, var, vec![(1.0, Grid::from_vec(size, size, vec![mean; size * size]))])
            .unwrap()
    }

    #[test]
    fn epsilon_vanishes_at_the_mode() {
        let s = make_schedule(50).unwrap();
        let m = single_component(0.4, 0.0025, 3);
        let t = 20;
        let z = m.components()[0].mean_image.map(|v| v * s.alpha(t));
        let eps = exact_epsilon(&m, &LatentState::new(z, t), &s).unwrap();
        assert!(eps.as_slice().iter().all(|e| e.abs() < 1e-14));
    }

    #[test]
    fn standard_normal_component_gives_sigma_z() {
        let s = make_schedule(50).unwrap();
        let m = single_component(0.0, 1.0, 2);
        let z = Grid::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.1]);
        for t in [1, 10, 49, 50] {
            let eps = exact_epsilon(&m, &LatentState::new(z.clone(), t), &s).unwrap();
            for (e, zi) in eps.as_slice().iter().zip(z.as_slice()) {
                assert!((e - s.sigma(t) * zi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn epsilon_rejects_index_zero() {
        let s = make_schedule(10).unwrap();
        let m = single_component(0.0, 1.0, 2);
        let st = LatentState::new(Grid::zeros(2, 2), 0);
        assert!(matches!(
            exact_epsilon(&m, &st, &s),
            Err(Error::InvalidTimestep { t: 0, .. })
        ));
    }

    #[test]
    fn pfi_at_zero_is_identity_and_tweedie_for_one_gaussian() {
        let s = make_schedule(50).unwrap();
        let var = 0.0025;
        let m = single_component(0.3, var, 2);
        let z = Grid::from_vec(2, 2, vec![0.2, -0.4, 1.1, 0.0]);
        assert_eq!(
            predict_final_image(&m, &LatentState::new(z.clone(), 0), &s).unwrap(),
            z
        );
        let t = 30;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let pfi = predict_final_image(&m, &LatentState::new(z.clone(), t), &s).unwrap();
        for (p, zi) in pfi.as_slice().iter().zip(z.as_slice()) {
            let expected = 0.3 + (a * var / (a * a * var + sg * sg)) * (zi - a * 0.3);
            assert!((p - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_absent_and_degenerate_cases() {
        let s = make_schedule(50).unwrap();
        let cat = Catalog::builtin();
        let m = build_mixture_with(&ids(&["cat", "bench"]), &[1.0, 0.5], &cat, 16, 0.0025).unwrap();
        let st = LatentState::new(initial_latent(16, 9), 25);
        let a = attention_map(&m, &st, &s, "cat").unwrap();
        assert!(a.max() > 0.0 && a.max() <= 1.0);
        assert!(matches!(
            attention_map(&m, &st, &s, "owl"),
            Err(Error::UnknownObject(_))
        ));

        let m1 = build_mixture_with(&ids(&["cat"]), &[1.0], &Catalog::parse("cat 1.5 8:8").unwrap(), 16, 0.0025)
            .unwrap();
        let a = attention_map(&m1, &st, &s, "cat").unwrap();
        assert_eq!(a, *m1.template(0, 0));
    }

    #[test]
    fn sampling_is_deterministic_and_captures_in_generation_order() {
        let s = make_schedule(50).unwrap();
        let cat = Catalog::builtin();
        let m = build_mixture_with(&ids(&["cat", "bench"]), &[0.8, 0.8], &cat, 16, 0.0025).unwrap();
        let a = sample_with_capture(&m, &s, 0, 1234, &[16, 8]).unwrap();
        let b = sample_with_capture(&m, &s, 0, 1234, &[8, 16]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.captures.len(), 2);
        assert_eq!((a.captures[0].step, a.captures[0].t), (8, 42));
        assert_eq!((a.captures[1].step, a.captures[1].t), (16, 34));
        assert!(sample_with_capture(&m, &s, 0, 1, &[50]).is_err());
    }
}
