//! DDIM timestep arithmetic: noise schedule, deterministic step, inversion
//! step, classifier-free guidance and the asymmetric guided step.
//!
//! Every per-element update goes through the scalar kernels at the bottom of
//! this file so that the latent and scalar paths agree bit-for-bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Timestep on the training grid; `0` is the clean latent.
pub type Timestep = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_train_steps: usize,
    pub num_sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            num_sample_steps: 50,
            beta_start: 0.00085,
            beta_end: 0.012,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    /// `alpha_bar[t]` for `t = 0..=num_train_steps`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// Descending sample grid, e.g. `[1000, 980, ..., 20]`.
    sample_steps: Vec<Timestep>,
}

/// One denoising transition `t -> t_prev`. `index` counts down from the number
/// of sample steps (the noisiest step) to 1 (the step producing `z_0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseStep {
    pub index: usize,
    pub t: Timestep,
    pub t_prev: Timestep,
}

pub fn make_schedule(
    num_train_steps: usize,
    num_sample_steps: usize,
    beta_range: (f64, f64),
    eta: f64,
) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(ScheduleParams {
        num_train_steps,
        num_sample_steps,
        beta_start: beta_range.0,
        beta_end: beta_range.1,
        eta,
    })
}

impl DiffusionSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            num_train_steps,
            num_sample_steps,
            beta_start,
            beta_end,
            eta,
        } = params;
        if num_train_steps == 0 {
            return Err(Error::config("num_train_steps must be positive"));
        }
        if num_sample_steps == 0 || num_sample_steps > num_train_steps {
            return Err(Error::config(format!(
                "num_sample_steps must be in 1..={num_train_steps}, got {num_sample_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::config(format!("eta must be >= 0, got {eta}")));
        }

        let mut alpha_bar = Vec::with_capacity(num_train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 0..num_train_steps {
            let beta = if num_train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (num_train_steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }

        let stride = num_train_steps / num_sample_steps;
        let sample_steps = (1..=num_sample_steps).rev().map(|k| k * stride).collect();

        Ok(Self {
            params,
            alpha_bar,
            sample_steps,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn num_train_steps(&self) -> usize {
        self.params.num_train_steps
    }

    pub fn num_sample_steps(&self) -> usize {
        self.sample_steps.len()
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }

    /// Descending inference timesteps (excluding the terminal `0`).
    pub fn sample_steps(&self) -> &[Timestep] {
        &self.sample_steps
    }

    /// All timesteps a trajectory visits, ascending, including `0`.
    pub fn trajectory_timesteps(&self) -> Vec<Timestep> {
        let mut ts: Vec<_> = self.sample_steps.iter().rev().copied().collect();
        ts.insert(0, 0);
        ts
    }

    pub fn alpha_bar(&self, t: Timestep) -> Result<f64> {
        let a = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::Schedule(format!("timestep {t} outside schedule")))?;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Schedule(format!("alpha_bar({t}) = {a} outside (0, 1]")));
        }
        Ok(a)
    }

    /// Denoising transitions from noisiest to cleanest.
    pub fn steps(&self) -> Vec<DenoiseStep> {
        let n = self.sample_steps.len();
        self.sample_steps
            .iter()
            .enumerate()
            .map(|(k, &t)| DenoiseStep {
                index: n - k,
                t,
                t_prev: self.sample_steps.get(k + 1).copied().unwrap_or(0),
            })
            .collect()
    }

    pub fn step_for(&self, t: Timestep) -> Option<DenoiseStep> {
        self.steps().into_iter().find(|s| s.t == t)
    }

    /// DDIM stochasticity `sigma_t` for the transition `t -> t_prev`.
    pub fn sigma(&self, t: Timestep, t_prev: Timestep) -> Result<f64> {
        let eta = self.params.eta;
        if eta == 0.0 {
            return Ok(0.0);
        }
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar(t_prev)?;
        if a_t >= 1.0 {
            return Ok(0.0);
        }
        Ok(eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).max(0.0).sqrt())
    }

    pub fn coefficients(&self, t: Timestep, t_prev: Timestep) -> Result<StepCoefficients> {
        if t <= t_prev {
            return Err(Error::contract(format!(
                "step requires t > t_prev, got t={t}, t_prev={t_prev}"
            )));
        }
        StepCoefficients::from_alphas(
            self.alpha_bar(t)?,
            self.alpha_bar(t_prev)?,
            self.sigma(t, t_prev)?,
        )
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.params).expect("schedule params serialize");
        hex::encode(Sha256::digest(&json))
    }
}

/// Scalar coefficients for one transition, validated once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha_t: f64,
    pub alpha_prev: f64,
    pub sigma: f64,
}

impl StepCoefficients {
    pub fn from_alphas(alpha_t: f64, alpha_prev: f64, sigma: f64) -> Result<Self> {
        for (name, a) in [("alpha_t", alpha_t), ("alpha_prev", alpha_prev)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Schedule(format!("{name} = {a} outside (0, 1]")));
            }
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Schedule(format!("sigma = {sigma} must be finite and >= 0")));
        }
        if sigma * sigma > 1.0 - alpha_prev {
            return Err(Error::Schedule(format!(
                "sigma^2 = {} exceeds 1 - alpha_prev = {}",
                sigma * sigma,
                1.0 - alpha_prev
            )));
        }
        Ok(Self {
            alpha_t,
            alpha_prev,
            sigma,
        })
    }

    /// Deterministic DDIM update in predicted-`x0` form.
    #[inline]
    pub fn ddim(&self, z: f64, eps: f64) -> f64 {
        let x0 = (z - (1.0 - self.alpha_t).sqrt() * eps) / self.alpha_t.sqrt();
        self.alpha_prev.sqrt() * x0 + (1.0 - self.alpha_prev).sqrt() * eps
    }

    /// Exact inverse of [`Self::ddim`] for a fixed `eps`.
    #[inline]
    pub fn ddim_inverse(&self, z_prev: f64, eps: f64) -> f64 {
        let x0 = (z_prev - (1.0 - self.alpha_prev).sqrt() * eps) / self.alpha_prev.sqrt();
        self.alpha_t.sqrt() * x0 + (1.0 - self.alpha_t).sqrt() * eps
    }

    /// Guided update: the `x0` term uses the optimized latent and its noise,
    /// the direction term uses `eps_raw`. With `eps_raw == eps_opt` this is the
    /// symmetric form; with `sigma == 0` that form is bit-identical to
    /// [`Self::ddim`].
    #[inline]
    pub fn asymmetric(&self, z_opt: f64, eps_opt: f64, eps_raw: f64) -> f64 {
        let x0 = (z_opt - (1.0 - self.alpha_t).sqrt() * eps_opt) / self.alpha_t.sqrt();
        let dir = ((1.0 - self.alpha_prev) - self.sigma * self.sigma).sqrt();
        self.alpha_prev.sqrt() * x0 + dir * eps_raw + self.sigma * z_opt
    }
}

/// Conditional/unconditional noise pair with its guidance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub conditional: Latent,
    pub unconditional: Latent,
    pub guidance_weight: f64,
}

impl NoisePrediction {
    pub fn new(conditional: Latent, unconditional: Latent, guidance_weight: f64) -> Result<Self> {
        conditional.ensure_same_shape(&unconditional, "noise prediction")?;
        Ok(Self {
            conditional,
            unconditional,
            guidance_weight,
        })
    }
}

/// Classifier-free guidance `w * cond + (1 - w) * uncond`, evaluated as
/// `uncond + w * (cond - uncond)` so that equal inputs come back exactly.
pub fn cfg_combine(pred: &NoisePrediction) -> Result<Latent> {
    pred.conditional
        .ensure_same_shape(&pred.unconditional, "cfg_combine")?;
    let w = pred.guidance_weight;
    if w == 1.0 {
        return Ok(pred.conditional.clone());
    }
    Ok(pred
        .unconditional
        .zip_map(&pred.conditional, |u, c| u + w * (c - u)))
}

pub fn ddim_step(
    z_t: &Latent,
    eps: &Latent,
    t: Timestep,
    t_prev: Timestep,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    z_t.ensure_same_shape(eps, "ddim_step")?;
    let c = sched.coefficients(t, t_prev)?;
    Ok(z_t.zip_map(eps, |z, e| c.ddim(z, e)))
}

pub fn ddim_inversion_step(
    z_t_prev: &Latent,
    eps: &Latent,
    t_prev: Timestep,
    t: Timestep,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    z_t_prev.ensure_same_shape(eps, "ddim_inversion_step")?;
    let c = sched.coefficients(t, t_prev)?;
    Ok(z_t_prev.zip_map(eps, |z, e| c.ddim_inverse(z, e)))
}

/// Guided DDIM update. Pass `eps_opt` as `eps_raw` for the symmetric form.
#[allow(clippy::too_many_arguments)]
pub fn asymmetric_step(
    z_opt: &Latent,
    z_raw: &Latent,
    eps_opt: &Latent,
    eps_raw: &Latent,
    t: Timestep,
    t_prev: Timestep,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    z_opt.ensure_same_shape(z_raw, "asymmetric_step latents")?;
    z_opt.ensure_same_shape(eps_opt, "asymmetric_step eps_opt")?;
    z_opt.ensure_same_shape(eps_raw, "asymmetric_step eps_raw")?;
    let c = sched.coefficients(t, t_prev)?;
    let data = z_opt
        .as_slice()
        .iter()
        .zip(eps_opt.as_slice())
        .zip(eps_raw.as_slice())
        .map(|((&z, &eo), &er)| c.asymmetric(z, eo, er))
        .collect();
    Latent::from_vec(z_opt.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;

    fn scalar(v: f64) -> Latent {
        Latent::filled(LatentShape::new(1, 1, 1), v)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1, (0.5, 0.5), 0.0).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert_eq!(s.sample_steps(), &[1]);
    }

    #[test]
    fn two_step_cumulative_product() {
        let s = make_schedule(2, 2, (0.1, 0.3), 0.0).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.63).abs() < 1e-15);
    }

    #[test]
    fn zero_eta_has_zero_sigma() {
        let s = make_schedule(1000, 50, (0.00085, 0.012), 0.0).unwrap();
        for st in s.steps() {
            assert_eq!(s.sigma(st.t, st.t_prev).unwrap(), 0.0);
        }
    }

    #[test]
    fn default_grid_is_leading_and_descending() {
        let s = DiffusionSchedule::new(ScheduleParams::default()).unwrap();
        assert_eq!(s.sample_steps().len(), 50);
        assert_eq!(s.sample_steps()[0], 1000);
        assert_eq!(*s.sample_steps().last().unwrap(), 20);
        let steps = s.steps();
        assert_eq!(steps[0].index, 50);
        assert_eq!(steps[49], DenoiseStep { index: 1, t: 20, t_prev: 0 });
        assert_eq!(s.trajectory_timesteps().len(), 51);
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        for (n, k, b) in [
            (0, 1, (0.1, 0.2)),
            (10, 0, (0.1, 0.2)),
            (10, 11, (0.1, 0.2)),
            (10, 5, (0.0, 0.2)),
            (10, 5, (0.3, 0.2)),
            (10, 5, (0.1, 1.0)),
        ] {
            assert!(matches!(make_schedule(n, k, b, 0.0), Err(Error::Config(_))));
        }
        assert!(matches!(make_schedule(10, 5, (0.1, 0.2), -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn cfg_identity_cases() {
        let c = scalar(0.3);
        let u = scalar(-1.7);
        let w1 = cfg_combine(&NoisePrediction::new(c.clone(), u.clone(), 1.0).unwrap()).unwrap();
        assert_eq!(w1, c);
        let w0 = cfg_combine(&NoisePrediction::new(c, u.clone(), 0.0).unwrap()).unwrap();
        assert_eq!(w0, u);
        let w75 = cfg_combine(&NoisePrediction::new(scalar(1.0), scalar(0.0), 7.5).unwrap()).unwrap();
        assert_eq!(w75.as_slice()[0], 7.5);
    }

    #[test]
    fn cfg_rejects_shape_mismatch() {
        let a = Latent::zeros(LatentShape::new(1, 2, 2));
        let b = Latent::zeros(LatentShape::new(1, 2, 3));
        assert!(NoisePrediction::new(a, b, 2.0).is_err());
    }

    #[test]
    fn ddim_hand_values() {
        let c = StepCoefficients::from_alphas(0.5, 0.5, 0.0).unwrap();
        assert_eq!(c.ddim(0.37, 0.0), 0.37);
        let c = StepCoefficients::from_alphas(0.25, 1.0, 0.0).unwrap();
        let expected = (1.0 - 0.75f64.sqrt()) / 0.5;
        assert!((c.ddim(1.0, 1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.267949).abs() < 1e-6);
        let c = StepCoefficients::from_alphas(0.25, 0.64, 0.0).unwrap();
        assert!((c.ddim(1.0, 0.0) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn ddim_matches_ratio_form() {
        // z' = sqrt(a_prev / a_t) z + (sqrt(1/a_prev - 1) - sqrt(1/a_t - 1)) sqrt(a_prev) eps
        for &(a_t, a_prev, z, e) in &[(0.3, 0.7, 0.4, -1.1), (0.01, 0.02, 2.0, 0.9), (0.9, 1.0, -0.5, 0.2)] {
            let c = StepCoefficients::from_alphas(a_t, a_prev, 0.0).unwrap();
            let ratio_form = (a_prev / a_t).sqrt() * z
                + ((1.0 / a_prev - 1.0f64).sqrt() - (1.0 / a_t - 1.0f64).sqrt()) * a_prev.sqrt() * e;
            assert!((c.ddim(z, e) - ratio_form).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_hand_values() {
        let c = StepCoefficients::from_alphas(0.25, 1.0, 0.0).unwrap();
        let forward = c.ddim(1.0, 1.0);
        assert!((c.ddim_inverse(forward, 1.0) - 1.0).abs() < 1e-14);
        let c = StepCoefficients::from_alphas(0.4, 0.4, 0.0).unwrap();
        assert_eq!(c.ddim_inverse(0.81, 3.0), 0.81);
        let c = StepCoefficients::from_alphas(0.25, 0.64, 0.0).unwrap();
        assert!((c.ddim(c.ddim_inverse(0.3, 0.0), 0.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_hand_value() {
        let c = StepCoefficients::from_alphas(0.25, 0.64, 0.0).unwrap();
        let got = c.asymmetric(1.0, 0.2, 0.5);
        let expected = 0.8 * (1.0 - 0.75f64.sqrt() * 0.2) / 0.5 + 0.6 * 0.5;
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 1.622872).abs() < 1e-6);
    }

    #[test]
    fn asymmetric_symmetric_case_equals_ddim() {
        let c = StepCoefficients::from_alphas(0.3, 0.55, 0.0).unwrap();
        assert_eq!(c.asymmetric(0.7, -0.2, -0.2), c.ddim(0.7, -0.2));
    }

    #[test]
    fn sigma_term_is_inert_at_zero_eta() {
        let s = make_schedule(10, 5, (0.1, 0.2), 0.0).unwrap();
        let z = scalar(123.0);
        let e = scalar(0.0);
        let out = asymmetric_step(&z, &z, &e, &e, 4, 2, &s).unwrap();
        let c = s.coefficients(4, 2).unwrap();
        let expected = (c.alpha_prev / c.alpha_t).sqrt() * 123.0;
        assert!((out.as_slice()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn oversized_sigma_is_a_schedule_error() {
        assert!(matches!(
            StepCoefficients::from_alphas(0.25, 0.64, 0.7),
            Err(Error::Schedule(_))
        ));
        // eta = 2 on a coarse grid pushes sigma^2 past 1 - alpha_prev.
        let s = make_schedule(10, 2, (0.1, 0.5), 3.0).unwrap();
        assert!(matches!(s.coefficients(10, 5), Err(Error::Schedule(_))));
    }

    #[test]
    fn step_rejects_non_decreasing_timesteps() {
        let s = make_schedule(10, 5, (0.1, 0.2), 0.0).unwrap();
        let z = scalar(1.0);
        assert!(ddim_step(&z, &z, 2, 4, &s).is_err());
        assert!(ddim_step(&z, &z, 4, 4, &s).is_err());
    }
}
