//! Full edits: inversion, two-branch denoising with guidance at every step,
//! latent blending, plus the multi-prompt, iterative and re-weighting
//! variants. Every run produces a [`RunManifest`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{Branch, EditMask};
use crate::backend::{DenoiserBackend, GradientOptions};
use crate::constraints::{ConstraintRegistry, ConstraintSpec};
use crate::error::{Error, Result};
use crate::guidance::{
    mag_denoise_step, recon_denoise_step, GuidanceConfig, LatentState, StepContext, StepTrace,
};
use crate::inversion::{
    ddim_invert_with, hash_latent, hash_prompt, null_text_optimize, sha256_hex, CacheKey,
    InversionOptions, InversionTrajectory, NullTextOptions, TrajectoryCache,
};
use crate::latent::Latent;
use crate::prompts::PromptPair;
use crate::schedule::{DiffusionSchedule, ScheduleParams};

pub const WINDOW_INTERPRETATION: &str = "windows count sampling steps s = T..1 (T = num_sample_steps); \
     [T, tau] means s > tau; the latent blend applies to the output of steps with s <= blend_window_start";

/// Where the clean latent comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceRef {
    /// PNG encoded by the backend.
    Image(PathBuf),
    Latent(Latent),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "scale")]
pub enum EditMode {
    /// Guidance optimization inside the `[T, tau2]` window.
    Guided,
    /// Injection only; the optimization window is empty.
    InjectionOnly,
    /// Injection with the edit tokens' maps scaled, no optimization.
    Reweight(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    pub options: InversionOptions,
    /// `None` skips null-text optimization.
    pub null_text: Option<NullTextOptions>,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            options: InversionOptions::default(),
            null_text: Some(NullTextOptions::default()),
        }
    }
}

#[derive(Clone)]
pub struct EditSession {
    pub source: SourceRef,
    /// Latent update region; with per-group masks this should be their union.
    pub mask: EditMask,
    pub group_masks: Option<Vec<EditMask>>,
    pub pair: PromptPair,
    pub spec: ConstraintSpec,
    pub cfg: GuidanceConfig,
    pub sched: DiffusionSchedule,
    pub backend: Arc<dyn DenoiserBackend>,
    pub seed: u64,
    pub mode: EditMode,
    pub inversion: InversionSettings,
    /// Precomputed trajectory; skips inversion when present.
    pub trajectory: Option<InversionTrajectory>,
    pub cache: Option<TrajectoryCache>,
    pub gradient_fd_step: f64,
    pub force_finite_difference: bool,
}

impl fmt::Debug for EditSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EditSession")
            .field("backend", &self.backend.name())
            .field("pair", &self.pair.edit_phrase())
            .field("mode", &self.mode)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl EditSession {
    /// Session with default guidance, constraint and schedule.
    pub fn new(
        source: SourceRef,
        mask: EditMask,
        pair: PromptPair,
        backend: Arc<dyn DenoiserBackend>,
    ) -> Result<Self> {
        Ok(Self {
            source,
            mask,
            group_masks: None,
            pair,
            spec: ConstraintSpec::default(),
            cfg: GuidanceConfig::default(),
            sched: DiffusionSchedule::new(ScheduleParams::default())?,
            backend,
            seed: 0,
            mode: EditMode::Guided,
            inversion: InversionSettings::default(),
            trajectory: None,
            cache: None,
            gradient_fd_step: 1e-4,
            force_finite_difference: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate(self.sched.num_sample_steps())?;
        self.spec.validate()?;
        self.pair.validate()?;
        let shape = self.backend.latent_shape();
        let check = |m: &EditMask| -> Result<()> {
            if m.area == 0 {
                return Err(Error::EmptyMask);
            }
            if m.latent.width() != shape.width || m.latent.height() != shape.height {
                return Err(Error::config(format!(
                    "mask latent resolution {}x{} does not match backend latent {}x{}",
                    m.latent.width(),
                    m.latent.height(),
                    shape.width,
                    shape.height
                )));
            }
            Ok(())
        };
        check(&self.mask)?;
        if let Some(gm) = &self.group_masks {
            if gm.len() != self.pair.groups.len() {
                return Err(Error::config(format!(
                    "{} group masks for {} edit groups",
                    gm.len(),
                    self.pair.groups.len()
                )));
            }
            gm.iter().try_for_each(check)?;
        }
        if let EditMode::Reweight(scale) = self.mode {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::config(format!("reweight scale must be > 0, got {scale}")));
            }
        }
        if let Some(nt) = &self.inversion.null_text {
            nt.validate()?;
        }
        Ok(())
    }

    fn effective_cfg(&self) -> GuidanceConfig {
        let mut cfg = self.cfg.clone();
        if self.mode != EditMode::Guided {
            cfg.tau2 = self.sched.num_sample_steps();
        }
        cfg
    }

    fn null_text_for_run(&self) -> Option<NullTextOptions> {
        self.inversion.null_text.clone().map(|mut n| {
            n.guidance_scale = self.cfg.guidance_scale;
            n
        })
    }

    pub fn config_snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "seed": self.seed,
            "backend": self.backend.name(),
            "backend_fingerprint": self.backend.fingerprint(),
            "source_prompt": self.pair.source.text(),
            "target_prompt": self.pair.target.text(),
            "edit_phrase": self.pair.edit_phrase(),
            "weights": self.pair.weights(),
            "negative_prompts": self.pair.negatives.iter().map(|n| n.phrase.text()).collect::<Vec<_>>(),
            "constraint": self.spec,
            "guidance": self.cfg,
            "schedule": self.sched.params(),
            "inversion": self.inversion,
            "mask_area": self.mask.area,
            "group_masks": self.group_masks.as_ref().map(|g| g.len()),
            "window_interpretation": WINDOW_INTERPRETATION,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTraceBlock {
    pub step_index: usize,
    pub t: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub source: String,
    pub reconstruction_error: Option<f64>,
    pub plain_replay_error: Option<f64>,
    pub null_text_fallback: bool,
    pub aborted_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub status: String,
    pub error_class: Option<String>,
    pub error_message: Option<String>,
    pub config: serde_json::Value,
    pub schedule_hash: Option<String>,
    pub backend_fingerprint: Option<String>,
    pub window_interpretation: String,
    pub inversion: Option<InversionSummary>,
    /// One block per timestep where the optimization loop ran.
    pub loss_traces: Vec<LossTraceBlock>,
    /// Per-timestep diagnostics of the editing branch.
    pub steps: Vec<StepTrace>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
    pub summary: BTreeMap<String, f64>,
    /// Manifests of chained runs.
    pub children: Vec<RunManifest>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            status: "running".into(),
            error_class: None,
            error_message: None,
            config,
            schedule_hash: None,
            backend_fingerprint: None,
            window_interpretation: WINDOW_INTERPRETATION.to_string(),
            inversion: None,
            loss_traces: Vec::new(),
            steps: Vec::new(),
            timings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            summary: BTreeMap::new(),
            children: Vec::new(),
        }
    }

    pub fn mark_ok(&mut self) {
        self.status = "ok".into();
        self.error_class = None;
        self.error_message = None;
    }

    pub fn mark_failed(&mut self, err: &Error) {
        self.status = "error".into();
        self.error_class = Some(err.class().to_string());
        self.error_message = Some(err.to_string());
    }

    pub fn record_step(&mut self, trace: StepTrace) {
        if trace.optimized {
            self.loss_traces.push(LossTraceBlock {
                step_index: trace.step_index,
                t: trace.t,
                losses: trace.losses(),
            });
        }
        self.steps.push(trace);
    }

    /// Writes pretty JSON to a sibling temp file, then renames it over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Per-timestep CSV of the optimization losses.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(StepTrace::csv_header());
        out.push('\n');
        for s in &self.steps {
            for row in s.csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }
}

/// A failed run with whatever the manifest had recorded.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub manifest: Box<RunManifest>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

pub type RunResult<T> = std::result::Result<T, RunFailure>;

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub latent: Latent,
    /// Final latent of the reconstruction branch.
    pub reconstruction: Latent,
    pub trajectory: InversionTrajectory,
    pub manifest: RunManifest,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *timings.entry(phase.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
    out
}

fn source_hash(session: &EditSession) -> Result<String> {
    match &session.source {
        SourceRef::Latent(z) => Ok(hash_latent(z)),
        SourceRef::Image(path) => Ok(sha256_hex(&fs::read(path)?)),
    }
}

fn source_latent(session: &EditSession) -> Result<Latent> {
    match &session.source {
        SourceRef::Latent(z) => Ok(z.clone()),
        SourceRef::Image(path) => {
            let img = image::open(path)?.to_rgb8();
            session.backend.encode_image(&img)
        }
    }
}

/// Cache key of the session's inversion; computed without backend calls.
pub fn trajectory_key(session: &EditSession) -> Result<CacheKey> {
    Ok(CacheKey {
        image_hash: source_hash(session)?,
        prompt_hash: hash_prompt(&session.pair.source),
        schedule_hash: session.sched.hash(),
        settings_hash: sha256_hex(
            serde_json::to_string(&(
                session.backend.fingerprint(),
                &session.inversion.options,
                &session.null_text_for_run(),
            ))?
            .as_bytes(),
        ),
    })
}

#[derive(Debug, Clone)]
pub struct PreparedTrajectory {
    pub trajectory: InversionTrajectory,
    pub summary: InversionSummary,
    pub cache_dir: Option<PathBuf>,
}

/// The session's trajectory: supplied, loaded from the cache, or computed
/// (and stored when a cache is configured).
pub fn prepare_trajectory(
    session: &EditSession,
    timings: &mut BTreeMap<String, f64>,
) -> Result<PreparedTrajectory> {
    if let Some(t) = &session.trajectory {
        if !t.covers(&session.sched) {
            return Err(Error::MissingTrajectory(
                "supplied trajectory does not cover the sample grid".into(),
            ));
        }
        return Ok(PreparedTrajectory {
            summary: summary("supplied", t),
            trajectory: t.clone(),
            cache_dir: None,
        });
    }
    let key = trajectory_key(session)?;
    if let Some(cache) = &session.cache {
        if let Some(t) = cache.load(&key)? {
            if t.covers(&session.sched) {
                return Ok(PreparedTrajectory {
                    summary: summary("cache", &t),
                    trajectory: t,
                    cache_dir: Some(cache.entry_dir(&key)),
                });
            }
        }
    }
    let backend = session.backend.as_ref();
    let z0 = timed(timings, "encode", || source_latent(session))?;
    let traj = timed(timings, "inversion", || -> Result<_> {
        let traj = ddim_invert_with(
            &z0,
            &session.pair.source,
            backend,
            &session.sched,
            &session.inversion.options,
        )?;
        match &session.null_text_for_run() {
            Some(opts) => null_text_optimize(&traj, &session.pair.source, backend, &session.sched, opts),
            None => Ok(traj),
        }
    })?;
    match &session.cache {
        Some(cache) => {
            let rounded = traj.rounded_to_f32();
            let dir = cache.store(&key, &rounded)?;
            Ok(PreparedTrajectory {
                summary: summary("computed", &rounded),
                trajectory: rounded,
                cache_dir: Some(dir),
            })
        }
        None => Ok(PreparedTrajectory {
            summary: summary("computed", &traj),
            trajectory: traj,
            cache_dir: None,
        }),
    }
}

fn obtain_trajectory(
    session: &EditSession,
    manifest: &mut RunManifest,
) -> Result<InversionTrajectory> {
    let prepared = prepare_trajectory(session, &mut manifest.timings)?;
    if let Some(dir) = &prepared.cache_dir {
        manifest
            .artifacts
            .insert("trajectory_cache".into(), dir.display().to_string());
    }
    manifest.inversion = Some(prepared.summary);
    Ok(prepared.trajectory)
}

fn summary(source: &str, t: &InversionTrajectory) -> InversionSummary {
    InversionSummary {
        source: source.to_string(),
        reconstruction_error: t.reconstruction_error,
        plain_replay_error: t.plain_replay_error,
        null_text_fallback: t.null_text_fallback,
        aborted_at: t.aborted_at,
    }
}

/// `M * edit + (1 - M) * recon` at latent resolution.
pub fn latent_blend(edit: &Latent, recon: &Latent, mask: &EditMask) -> Result<Latent> {
    edit.ensure_same_shape(recon, "latent_blend")?;
    let shape = edit.shape();
    let m = &mask.latent;
    if m.width() != shape.width || m.height() != shape.height {
        return Err(Error::contract("blend mask does not match latent"));
    }
    let spatial = shape.spatial();
    let cells = m.cells();
    let data = edit
        .as_slice()
        .iter()
        .zip(recon.as_slice())
        .enumerate()
        .map(|(i, (&e, &r))| if cells[i % spatial] { e } else { r })
        .collect();
    Latent::from_vec(shape, data)
}

fn run_inner(session: &EditSession, manifest: &mut RunManifest) -> Result<EditOutput> {
    session.validate()?;
    manifest.schedule_hash = Some(session.sched.hash());
    manifest.backend_fingerprint = Some(session.backend.fingerprint());
    let traj = obtain_trajectory(session, manifest)?;
    let backend = session.backend.as_ref();
    let constraint = ConstraintRegistry::default().for_spec(&session.spec)?;
    let cfg = session.effective_cfg();
    let ctx = StepContext {
        backend,
        sched: &session.sched,
        cfg: &cfg,
        spec: &session.spec,
        constraint: constraint.as_ref(),
        pair: &session.pair,
        mask: &session.mask,
        group_masks: session.group_masks.as_deref(),
        reweight_scale: match session.mode {
            EditMode::Reweight(s) => Some(s),
            _ => None,
        },
        gradient: GradientOptions {
            fd_step: session.gradient_fd_step,
            restrict_to: None,
            force_finite_difference: session.force_finite_difference,
        },
    };
    let z_start = traj.z_start(&session.sched)?.clone();
    let t_start = session.sched.sample_steps()[0];
    let mut recon = LatentState {
        latent: z_start.clone(),
        timestep: t_start,
        branch: Branch::Reconstruction,
    };
    let mut edit = LatentState {
        latent: z_start,
        timestep: t_start,
        branch: Branch::Editing,
    };
    let default_null = backend.null_embedding();
    let start = Instant::now();
    for step in session.sched.steps() {
        let null = traj.null_for(step.t).unwrap_or(&default_null);
        let r = recon_denoise_step(&ctx, &recon, null)?;
        let out = mag_denoise_step(&ctx, &recon, &edit, null, Some(&r.bundle))?;
        recon = r.next;
        edit = out.next;
        if cfg.blends_at(step.index) {
            edit.latent = latent_blend(&edit.latent, &recon.latent, &session.mask)?;
        }
        manifest.record_step(out.trace);
    }
    *manifest.timings.entry("denoise".into()).or_insert(0.0) += start.elapsed().as_secs_f64();

    if let Some(last) = manifest.steps.iter().rev().find(|s| s.optimized) {
        if let Some(v) = last.in_mask_after {
            manifest.summary.insert("last_guided_in_mask_mean".into(), v);
        }
    }
    if let Some(v) = manifest.steps.first().and_then(|s| s.in_mask_before) {
        manifest.summary.insert("initial_in_mask_mean".into(), v);
    }
    manifest
        .summary
        .insert("out_of_mask_max_diff_vs_reconstruction".into(), {
            let spatial = edit.latent.shape().spatial();
            let cells = session.mask.latent.cells();
            edit.latent
                .as_slice()
                .iter()
                .zip(recon.latent.as_slice())
                .enumerate()
                .filter(|(i, _)| !cells[i % spatial])
                .map(|(_, (a, b))| (a - b).abs())
                .fold(0.0, f64::max)
        });
    Ok(EditOutput {
        latent: edit.latent,
        reconstruction: recon.latent,
        trajectory: traj,
        manifest: manifest.clone(),
    })
}

fn run_with(session: &EditSession, command: &str) -> RunResult<EditOutput> {
    let mut manifest = RunManifest::new(command, session.config_snapshot());
    match run_inner(session, &mut manifest) {
        Ok(mut out) => {
            manifest.mark_ok();
            out.manifest = manifest;
            Ok(out)
        }
        Err(error) => {
            manifest.mark_failed(&error);
            Err(RunFailure {
                error,
                manifest: Box::new(manifest),
            })
        }
    }
}

pub fn run_edit(session: &EditSession) -> RunResult<EditOutput> {
    run_with(session, "edit")
}

/// As [`run_edit`] but requires at least two weighted edit groups.
pub fn run_edit_multi(session: &EditSession) -> RunResult<EditOutput> {
    if session.pair.groups.len() < 2 {
        let error = Error::config(format!(
            "multi-prompt edit needs at least two edit groups, got {}",
            session.pair.groups.len()
        ));
        let mut manifest = RunManifest::new("edit-multi", session.config_snapshot());
        manifest.mark_failed(&error);
        return Err(RunFailure {
            error,
            manifest: Box::new(manifest),
        });
    }
    run_with(session, "edit-multi")
}

/// Injection with the edit tokens' maps scaled by `scale` in place of
/// optimization.
pub fn run_reweight_baseline(session: &EditSession, scale: f64) -> RunResult<EditOutput> {
    let mut s = session.clone();
    s.mode = EditMode::Reweight(scale);
    run_with(&s, "reweight")
}

#[derive(Debug)]
pub struct IterativeOutcome {
    pub outputs: Vec<EditOutput>,
    pub failure: Option<RunFailure>,
}

impl IterativeOutcome {
    /// Parent manifest holding each step's manifest as a child.
    pub fn manifest(&self) -> RunManifest {
        let mut m = RunManifest::new("iterate", serde_json::json!({ "steps": self.outputs.len() }));
        m.children = self.outputs.iter().map(|o| o.manifest.clone()).collect();
        match &self.failure {
            Some(f) => {
                m.children.push((*f.manifest).clone());
                m.mark_failed(&Error::config(format!(
                    "chained edit {} failed: {}",
                    self.outputs.len() + 1,
                    f.error
                )));
                m.error_class = Some(f.error.class().to_string());
            }
            None => m.mark_ok(),
        }
        m
    }
}

/// Runs sessions in order; each one after the first edits the previous
/// output latent. Stops at the first failure and keeps earlier outputs.
pub fn run_iterative(sessions: &[EditSession]) -> IterativeOutcome {
    let mut outputs: Vec<EditOutput> = Vec::with_capacity(sessions.len());
    for (i, session) in sessions.iter().enumerate() {
        let mut s = session.clone();
        if let Some(prev) = outputs.last() {
            s.source = SourceRef::Latent(prev.latent.clone());
            s.trajectory = None;
        }
        match run_with(&s, &format!("iterate[{i}]")) {
            Ok(out) => outputs.push(out),
            Err(f) => {
                return IterativeOutcome {
                    outputs,
                    failure: Some(f),
                }
            }
        }
    }
    IterativeOutcome {
        outputs,
        failure: None,
    }
}

/// Writes the latent (raw f32 + JSON header) and, when the backend decodes,
/// a PNG. Returns artifact name → path.
pub fn write_latent_artifacts(
    backend: &dyn DenoiserBackend,
    latent: &Latent,
    dir: &Path,
    stem: &str,
) -> Result<BTreeMap<String, String>> {
    fs::create_dir_all(dir)?;
    let mut out = BTreeMap::new();
    let raw = dir.join(format!("{stem}.f32"));
    fs::write(&raw, latent.to_f32_le_bytes())?;
    out.insert(format!("{stem}_latent"), raw.display().to_string());
    let header = dir.join(format!("{stem}.json"));
    fs::write(
        &header,
        serde_json::to_vec_pretty(&serde_json::json!({
            "shape": latent.shape(),
            "dtype": "f32le",
            "sha256_f64": hash_latent(latent),
        }))?,
    )?;
    out.insert(format!("{stem}_header"), header.display().to_string());
    if backend.capabilities().has_vae {
        let img = backend.decode_latent(latent)?;
        let png = dir.join(format!("{stem}.png"));
        img.save(&png)?;
        out.insert(format!("{stem}_image"), png.display().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::BinaryRaster;

    #[test]
    fn blend_takes_reconstruction_outside_mask() {
        let shape = crate::latent::LatentShape::new(2, 16, 16);
        let img = BinaryRaster::from_fn(64, 64, |x, _| x < 32);
        let m = EditMask::from_image(img, 16, 16).unwrap();
        let e = Latent::filled(shape, 1.0);
        let r = Latent::filled(shape, -1.0);
        let b = latent_blend(&e, &r, &m).unwrap();
        assert_eq!(b.get(1, 5, 3), 1.0);
        assert_eq!(b.get(1, 5, 12), -1.0);
    }

    #[test]
    fn manifest_writes_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/run.json");
        let mut m = RunManifest::new("edit", serde_json::json!({"a": 1}));
        m.mark_failed(&Error::EmptyMask);
        m.write_atomic(&p).unwrap();
        let back = RunManifest::read(&p).unwrap();
        assert_eq!(back.error_class.as_deref(), Some("empty_mask"));
        assert!(!dir.path().join("sub/run.json.tmp").exists());
    }
}
