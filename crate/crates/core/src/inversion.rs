//! DDIM inversion of a clean latent, per-step null-embedding optimization so
//! guided sampling retraces the inversion path, and an on-disk trajectory
//! cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{null_embedding_gradient, DenoiserBackend, ForwardControl, NullEmbedding};
use crate::error::{Error, Result};
use crate::latent::{f32_le_to_f64, f64_to_f32_le, Latent, LatentShape};
use crate::prompts::TokenSequence;
use crate::schedule::{
    cfg_combine, ddim_inversion_step, ddim_step, DiffusionSchedule, NoisePrediction, Timestep,
};

/// Environment variable naming the trajectory cache directory.
pub const CACHE_DIR_ENV: &str = "MASKGUIDE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    /// `z_t` for `t = 0` and every sample timestep.
    pub latents: BTreeMap<Timestep, Latent>,
    /// Null embedding used by the denoising step that starts at `t`.
    pub null_embeddings: BTreeMap<Timestep, NullEmbedding>,
    /// L2 distance between the replayed and the original `z_0`, once measured.
    pub reconstruction_error: Option<f64>,
    /// The same distance for a replay with the backend's default null embedding.
    pub plain_replay_error: Option<f64>,
    /// Optimization made things worse and the default embeddings were kept.
    pub null_text_fallback: bool,
    /// Timestep at which the inner loss went non-finite.
    pub aborted_at: Option<Timestep>,
}

impl InversionTrajectory {
    pub fn z0(&self) -> Result<&Latent> {
        self.latent_at(0)
    }

    pub fn latent_at(&self, t: Timestep) -> Result<&Latent> {
        self.latents
            .get(&t)
            .ok_or_else(|| Error::MissingTrajectory(format!("no latent at t={t}")))
    }

    /// The noisiest latent, where sampling starts.
    pub fn z_start(&self, sched: &DiffusionSchedule) -> Result<&Latent> {
        let t = *sched
            .sample_steps()
            .first()
            .ok_or_else(|| Error::MissingTrajectory("empty sample grid".into()))?;
        self.latent_at(t)
    }

    pub fn null_for(&self, t: Timestep) -> Option<&NullEmbedding> {
        self.null_embeddings.get(&t)
    }

    pub fn covers(&self, sched: &DiffusionSchedule) -> bool {
        let want = sched.trajectory_timesteps();
        self.latents.len() == want.len() && want.iter().all(|t| self.latents.contains_key(t))
    }

    /// Same trajectory with every value rounded through `f32`, the precision
    /// of the cache files.
    pub fn rounded_to_f32(&self) -> InversionTrajectory {
        let r = |v: f64| v as f32 as f64;
        InversionTrajectory {
            latents: self.latents.iter().map(|(&t, z)| (t, z.map(r))).collect(),
            null_embeddings: self
                .null_embeddings
                .iter()
                .map(|(&t, n)| {
                    (
                        t,
                        NullEmbedding {
                            rows: n.rows,
                            dim: n.dim,
                            values: n.values.iter().map(|&v| r(v)).collect(),
                        },
                    )
                })
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionOptions {
    /// Extra passes per step that re-predict the noise at the current
    /// estimate of `z_t` instead of at `z_{t-1}`. Zero is plain inversion.
    pub fixed_point_iters: usize,
    /// Stop refining once successive estimates differ by less than this (L-inf).
    pub fixed_point_tol: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            fixed_point_iters: 20,
            fixed_point_tol: 1e-12,
        }
    }
}

impl InversionOptions {
    pub fn plain() -> Self {
        Self {
            fixed_point_iters: 0,
            ..Self::default()
        }
    }
}

/// Encodes `z0` to noise with conditional-only predictions and the default
/// refinement.
pub fn ddim_invert(
    z0: &Latent,
    prompt: &TokenSequence,
    backend: &dyn DenoiserBackend,
    sched: &DiffusionSchedule,
) -> Result<InversionTrajectory> {
    ddim_invert_with(z0, prompt, backend, sched, &InversionOptions::default())
}

pub fn ddim_invert_with(
    z0: &Latent,
    prompt: &TokenSequence,
    backend: &dyn DenoiserBackend,
    sched: &DiffusionSchedule,
    opts: &InversionOptions,
) -> Result<InversionTrajectory> {
    if !z0.is_finite() {
        return Err(Error::contract("z0 has non-finite entries"));
    }
    let mut latents = BTreeMap::new();
    latents.insert(0, z0.clone());
    let mut z = z0.clone();
    for step in sched.steps().into_iter().rev() {
        let predict = |at: &Latent| -> Result<Latent> {
            backend
                .forward_conditional(at, prompt, step.t, &ForwardControl::default())
                .map(|(eps, _)| eps)
                .map_err(|e| e.with_context(format!("inversion at t={}", step.t)))
        };
        let mut next = ddim_inversion_step(&z, &predict(&z)?, step.t_prev, step.t, sched)?;
        for _ in 0..opts.fixed_point_iters {
            let refined = ddim_inversion_step(&z, &predict(&next)?, step.t_prev, step.t, sched)?;
            let change = refined.max_abs_diff(&next);
            next = refined;
            if !(change > opts.fixed_point_tol) {
                break;
            }
        }
        if !next.is_finite() {
            return Err(Error::NumericAbort {
                location: format!("inversion at t={}", step.t),
                message: "non-finite latent".into(),
            });
        }
        z = next;
        latents.insert(step.t, z.clone());
    }
    Ok(InversionTrajectory {
        latents,
        null_embeddings: BTreeMap::new(),
        reconstruction_error: None,
        plain_replay_error: None,
        null_text_fallback: false,
        aborted_at: None,
    })
}

/// Guided denoising from the trajectory's start with the given null
/// embeddings (the backend default where a step has none).
pub fn replay(
    traj: &InversionTrajectory,
    prompt: &TokenSequence,
    backend: &dyn DenoiserBackend,
    sched: &DiffusionSchedule,
    guidance_scale: f64,
    nulls: Option<&BTreeMap<Timestep, NullEmbedding>>,
) -> Result<BTreeMap<Timestep, Latent>> {
    let default_null = backend.null_embedding();
    let mut z = traj.z_start(sched)?.clone();
    let mut out = BTreeMap::new();
    out.insert(sched.sample_steps()[0], z.clone());
    for step in sched.steps() {
        let null = nulls.and_then(|n| n.get(&step.t)).unwrap_or(&default_null);
        let eps = guided_eps(backend, &z, prompt, step.t, null, guidance_scale)?;
        z = ddim_step(&z, &eps, step.t, step.t_prev, sched)?;
        out.insert(step.t_prev, z.clone());
    }
    Ok(out)
}

fn guided_eps(
    backend: &dyn DenoiserBackend,
    z: &Latent,
    prompt: &TokenSequence,
    t: Timestep,
    null: &NullEmbedding,
    w: f64,
) -> Result<Latent> {
    let pred = backend
        .predict(z, prompt, t, Some(null), &ForwardControl::default())
        .map_err(|e| e.with_context(format!("replay at t={t}")))?;
    cfg_combine(&NoisePrediction::new(pred.conditional, pred.unconditional, w)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullTextOptions {
    pub inner_steps: usize,
    pub lr: f64,
    pub early_stop: f64,
    pub guidance_scale: f64,
}

impl Default for NullTextOptions {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            lr: 0.01,
            early_stop: 1e-5,
            guidance_scale: 7.5,
        }
    }
}

impl NullTextOptions {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::config("null-text inner_steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("null-text lr must be positive"));
        }
        if !(self.early_stop >= 0.0) {
            return Err(Error::config("null-text early_stop must be non-negative"));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Optimizes one null embedding per denoising step so that guided sampling
/// lands on the inversion latents. Each step keeps its best iterate and the
/// next step starts from it. If the optimized replay ends farther from `z_0`
/// than the plain one, the default embeddings are kept and the result is
/// flagged.
pub fn null_text_optimize(
    traj: &InversionTrajectory,
    prompt: &TokenSequence,
    backend: &dyn DenoiserBackend,
    sched: &DiffusionSchedule,
    opts: &NullTextOptions,
) -> Result<InversionTrajectory> {
    opts.validate()?;
    if !traj.covers(sched) {
        return Err(Error::MissingTrajectory(
            "trajectory does not cover the sample grid".into(),
        ));
    }
    let w = opts.guidance_scale;
    let z0 = traj.z0()?;
    let default_null = backend.null_embedding();
    let plain = replay(traj, prompt, backend, sched, w, None)?;
    let plain_err = plain[&0].l2_distance(z0);

    let mut nulls = BTreeMap::new();
    let mut current = default_null.clone();
    let mut zbar = traj.z_start(sched)?.clone();
    let mut aborted_at = None;
    for step in sched.steps() {
        let (t, t_prev) = (step.t, step.t_prev);
        let target = traj.latent_at(t_prev)?;
        if aborted_at.is_some() {
            let eps = guided_eps(backend, &zbar, prompt, t, &current, w)?;
            zbar = ddim_step(&zbar, &eps, t, t_prev, sched)?;
            nulls.insert(t, current.clone());
            continue;
        }
        let (cond, _) = backend
            .forward_conditional(&zbar, prompt, t, &ForwardControl::default())
            .map_err(|e| e.with_context(format!("null-text at t={t}")))?;
        let eps_coeff = sched.coefficients(t, t_prev)?.ddim(0.0, 1.0);
        let evaluate = |null: &NullEmbedding| -> Result<(f64, Latent)> {
            let uncond = backend
                .forward_unconditional(&zbar, t, null)
                .map_err(|e| e.with_context(format!("null-text at t={t}")))?;
            let eps = cfg_combine(&NoisePrediction::new(cond.clone(), uncond, w)?)?;
            let out = ddim_step(&zbar, &eps, t, t_prev, sched)?;
            let loss = out
                .as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok((loss, out))
        };

        let (mut loss, mut out) = evaluate(&current)?;
        let mut best = (loss, current.clone(), out.clone());
        let mut adam = Adam::new(current.len(), opts.lr);
        let mut probe = current.clone();
        for _ in 0..opts.inner_steps {
            if !loss.is_finite() || loss < opts.early_stop {
                break;
            }
            let k = 2.0 * eps_coeff * (1.0 - w);
            let upstream = out.zip_map(target, |a, b| k * (a - b));
            let grad = null_embedding_gradient(backend, &zbar, t, &probe, &upstream, 1e-4)?;
            adam.update(&mut probe.values, &grad);
            (loss, out) = evaluate(&probe)?;
            if !loss.is_finite() {
                aborted_at = Some(t);
                break;
            }
            if loss < best.0 {
                best = (loss, probe.clone(), out.clone());
            }
        }
        current = best.1;
        zbar = best.2;
        nulls.insert(t, current.clone());
    }

    let optimized_err = zbar.l2_distance(z0);
    let mut result = InversionTrajectory {
        plain_replay_error: Some(plain_err),
        aborted_at,
        ..traj.clone()
    };
    if optimized_err <= plain_err {
        result.null_embeddings = nulls;
        result.reconstruction_error = Some(optimized_err);
    } else {
        result.null_embeddings = sched
            .sample_steps()
            .iter()
            .map(|&t| (t, default_null.clone()))
            .collect();
        result.reconstruction_error = Some(plain_err);
        result.null_text_fallback = true;
    }
    Ok(result)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_latent(z: &Latent) -> String {
    let bytes: Vec<u8> = z.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub fn hash_prompt(prompt: &TokenSequence) -> String {
    let json = serde_json::to_vec(prompt).expect("token sequence serializes");
    sha256_hex(&json)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub image_hash: String,
    pub prompt_hash: String,
    pub schedule_hash: String,
    /// Backend fingerprint and inversion settings.
    pub settings_hash: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        sha256_hex(
            format!(
                "{}|{}|{}|{}",
                self.image_hash, self.prompt_hash, self.schedule_hash, self.settings_hash
            )
            .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheManifest {
    format: u32,
    dtype: String,
    shape: LatentShape,
    timesteps: Vec<Timestep>,
    null_timesteps: Vec<Timestep>,
    null_rows: usize,
    null_dim: usize,
    key: CacheKey,
    reconstruction_error: Option<f64>,
    plain_replay_error: Option<f64>,
    null_text_fallback: bool,
    aborted_at: Option<Timestep>,
}

const CACHE_FORMAT: u32 = 1;

/// Directory of cached trajectories, one subdirectory per key digest holding
/// `manifest.json`, `latent_<t>.f32` and `null_<t>.f32`.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    root: PathBuf,
}

impl TrajectoryCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(Self::new)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.digest())
    }

    pub fn load(&self, key: &CacheKey) -> Result<Option<InversionTrajectory>> {
        let dir = self.entry_dir(key);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Ok(None);
        }
        let manifest: CacheManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format != CACHE_FORMAT || manifest.dtype != "f32le" || &manifest.key != key {
            return Ok(None);
        }
        let mut latents = BTreeMap::new();
        for &t in &manifest.timesteps {
            let bytes = fs::read(dir.join(format!("latent_{t}.f32")))?;
            latents.insert(t, Latent::from_f32_le_bytes(manifest.shape, &bytes)?);
        }
        let mut null_embeddings = BTreeMap::new();
        for &t in &manifest.null_timesteps {
            let values = f32_le_to_f64(&fs::read(dir.join(format!("null_{t}.f32")))?)?;
            null_embeddings.insert(
                t,
                NullEmbedding::new(manifest.null_rows, manifest.null_dim, values)?,
            );
        }
        Ok(Some(InversionTrajectory {
            latents,
            null_embeddings,
            reconstruction_error: manifest.reconstruction_error,
            plain_replay_error: manifest.plain_replay_error,
            null_text_fallback: manifest.null_text_fallback,
            aborted_at: manifest.aborted_at,
        }))
    }

    /// Writes into a scratch directory and renames it into place.
    pub fn store(&self, key: &CacheKey, traj: &InversionTrajectory) -> Result<PathBuf> {
        let shape = traj.z0()?.shape();
        let (null_rows, null_dim) = traj
            .null_embeddings
            .values()
            .next()
            .map_or((0, 0), |n| (n.rows, n.dim));
        fs::create_dir_all(&self.root)?;
        let final_dir = self.entry_dir(key);
        let tmp = self.root.join(format!(
            ".{}.tmp-{}",
            key.digest(),
            std::process::id()
        ));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        for (t, z) in &traj.latents {
            fs::write(tmp.join(format!("latent_{t}.f32")), z.to_f32_le_bytes())?;
        }
        for (t, n) in &traj.null_embeddings {
            fs::write(tmp.join(format!("null_{t}.f32")), f64_to_f32_le(&n.values))?;
        }
        let manifest = CacheManifest {
            format: CACHE_FORMAT,
            dtype: "f32le".into(),
            shape,
            timesteps: traj.latents.keys().copied().collect(),
            null_timesteps: traj.null_embeddings.keys().copied().collect(),
            null_rows,
            null_dim,
            key: key.clone(),
            reconstruction_error: traj.reconstruction_error,
            plain_replay_error: traj.plain_replay_error,
            null_text_fallback: traj.null_text_fallback,
            aborted_at: traj.aborted_at,
        };
        fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&tmp, &final_dir)?;
        Ok(final_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionBundle;
    use crate::backend::Capabilities;
    use crate::schedule::{make_schedule, ScheduleParams};

    /// Predicts the same noise everywhere; attention is empty.
    struct ConstEps {
        value: f64,
        shape: LatentShape,
    }

    impl DenoiserBackend for ConstEps {
        fn name(&self) -> &str {
            "const"
        }
        fn latent_shape(&self) -> LatentShape {
            self.shape
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn max_prompt_len(&self) -> usize {
            8
        }
        fn tokenize(&self, _text: &str) -> Result<TokenSequence> {
            Ok(TokenSequence::from_pairs(Vec::<(String, u32)>::new()))
        }
        fn null_embedding(&self) -> NullEmbedding {
            NullEmbedding::new(1, 2, vec![0.0, 0.0]).unwrap()
        }
        fn forward_conditional(
            &self,
            z: &Latent,
            _prompt: &TokenSequence,
            t: Timestep,
            _control: &ForwardControl<'_>,
        ) -> Result<(Latent, AttentionBundle)> {
            Ok((
                Latent::filled(z.shape(), self.value),
                AttentionBundle {
                    maps: vec![],
                    branch: crate::attention::Branch::Editing,
                    timestep: t,
                    layer_count: 1,
                    head_count: 1,
                },
            ))
        }
        fn forward_unconditional(&self, z: &Latent, _t: Timestep, _null: &NullEmbedding) -> Result<Latent> {
            Ok(Latent::filled(z.shape(), self.value))
        }
    }

    fn z0() -> Latent {
        let shape = LatentShape::new(1, 2, 2);
        Latent::from_vec(shape, vec![0.3, -0.7, 1.1, 0.05]).unwrap()
    }

    #[test]
    fn zero_noise_inversion_scales_by_sqrt_alpha() {
        let b = ConstEps {
            value: 0.0,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = DiffusionSchedule::new(ScheduleParams::default()).unwrap();
        let p = b.tokenize("").unwrap();
        let traj = ddim_invert(&z0(), &p, &b, &sched).unwrap();
        assert!(traj.covers(&sched));
        for (&t, z) in &traj.latents {
            let a = sched.alpha_bar(t).unwrap().sqrt();
            for (v, o) in z.as_slice().iter().zip(z0().as_slice()) {
                assert!((v - a * o).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn single_step_trajectory_has_two_entries() {
        let b = ConstEps {
            value: 0.2,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = make_schedule(1000, 1, (0.00085, 0.012), 0.0).unwrap();
        let traj = ddim_invert(&z0(), &b.tokenize("").unwrap(), &b, &sched).unwrap();
        assert_eq!(traj.latents.len(), 2);
    }

    #[test]
    fn constant_noise_round_trip_is_exact() {
        let b = ConstEps {
            value: -0.4,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = DiffusionSchedule::new(ScheduleParams::default()).unwrap();
        let p = b.tokenize("").unwrap();
        let traj = ddim_invert(&z0(), &p, &b, &sched).unwrap();
        let back = replay(&traj, &p, &b, &sched, 7.5, None).unwrap();
        assert!(back[&0].max_abs_diff(&z0()) < 1e-8);
    }

    #[test]
    fn aligned_branches_leave_embeddings_unchanged() {
        let b = ConstEps {
            value: 0.1,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = make_schedule(1000, 5, (0.00085, 0.012), 0.0).unwrap();
        let p = b.tokenize("").unwrap();
        let traj = ddim_invert(&z0(), &p, &b, &sched).unwrap();
        let opt = null_text_optimize(&traj, &p, &b, &sched, &NullTextOptions::default()).unwrap();
        assert!(!opt.null_text_fallback);
        for n in opt.null_embeddings.values() {
            assert_eq!(n, &b.null_embedding());
        }
        assert_eq!(opt.null_embeddings.len(), 5);
    }

    #[test]
    fn zero_inner_steps_is_config_error() {
        let b = ConstEps {
            value: 0.1,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = make_schedule(1000, 5, (0.00085, 0.012), 0.0).unwrap();
        let p = b.tokenize("").unwrap();
        let traj = ddim_invert(&z0(), &p, &b, &sched).unwrap();
        let opts = NullTextOptions {
            inner_steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            null_text_optimize(&traj, &p, &b, &sched, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cache_round_trip_at_f32_precision() {
        let b = ConstEps {
            value: 0.1,
            shape: LatentShape::new(1, 2, 2),
        };
        let sched = make_schedule(1000, 5, (0.00085, 0.012), 0.0).unwrap();
        let p = b.tokenize("").unwrap();
        let traj = ddim_invert(&z0(), &p, &b, &sched).unwrap();
        let traj = null_text_optimize(&traj, &p, &b, &sched, &NullTextOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = TrajectoryCache::new(dir.path());
        let key = CacheKey {
            image_hash: hash_latent(&z0()),
            prompt_hash: hash_prompt(&p),
            schedule_hash: sched.hash(),
            settings_hash: "x".into(),
        };
        assert!(cache.load(&key).unwrap().is_none());
        cache.store(&key, &traj).unwrap();
        let back = cache.load(&key).unwrap().unwrap();
        assert_eq!(back, traj.rounded_to_f32());
        let other = CacheKey {
            settings_hash: "y".into(),
            ..key
        };
        assert!(cache.load(&other).unwrap().is_none());
    }
}
