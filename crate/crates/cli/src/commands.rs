use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use serde_json::{json, Value};

use maskguide::attention::{BinaryRaster, EditMask};
use maskguide::backend::{
    serve, BackendOptions, BackendRegistry, DenoiserBackend, ToyConfig, ToyDenoiser,
};
use maskguide::guidance::DeltaMode;
use maskguide::inversion::TrajectoryCache;
use maskguide::pipeline::{
    prepare_trajectory, run_edit, run_edit_multi, run_iterative, write_latent_artifacts,
    EditMode, EditOutput, EditSession, RunFailure, RunManifest, SourceRef,
};
use maskguide::prompts::{align_prompts, attach_negative_tokens, PromptPair};
use maskguide::schedule::DiffusionSchedule;
use maskguide::{Error, Result};

use crate::config::{EditType, IterStep, RunConfig};
use crate::eval::{evaluate, ScorerRegistry};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "maskguide", version, about = "Mask-guided cross-attention image editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert an image into a cached trajectory.
    Invert(RunArgs),
    /// Edit one region with one target prompt.
    Edit(RunArgs),
    /// Edit with two or more weighted new-token groups.
    EditMulti(RunArgs),
    /// Chain edits, each starting from the previous result.
    Iterate(RunArgs),
    /// Score an edited image against its source inside the mask's bounding box.
    Eval(EvalArgs),
    /// Generate a synthetic image and mask, then edit them on the toy backend.
    ToyDemo(RunArgs),
    /// Serve the toy backend over the adapter protocol on stdin/stdout.
    #[command(hide = true)]
    ServeToy(ServeArgs),
}

/// Flags overriding the config file. Unset flags leave file values alone.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub source_prompt: Option<String>,
    #[arg(long)]
    pub target_prompt: Option<String>,
    /// Comma-separated negative phrases.
    #[arg(long, value_delimiter = ',')]
    pub negative_tokens: Vec<String>,
    /// One mask per new-token group (repeatable).
    #[arg(long = "group-mask")]
    pub group_masks: Vec<PathBuf>,
    /// Comma-separated group weights summing to 1.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Constraint strategy (tr or sr).
    #[arg(long)]
    pub constraint: Option<String>,
    #[arg(long, value_enum)]
    pub edit_type: Option<EditType>,
    #[arg(long)]
    pub max_it: Option<usize>,
    #[arg(long)]
    pub tau1: Option<usize>,
    #[arg(long)]
    pub tau2: Option<usize>,
    /// snr_schedule or constant.
    #[arg(long)]
    pub delta_mode: Option<String>,
    #[arg(long)]
    pub delta_constant: Option<f64>,
    #[arg(long)]
    pub sa_window_end: Option<usize>,
    #[arg(long)]
    pub blend_window_start: Option<usize>,
    /// Use the plain guided step instead of the asymmetric one.
    #[arg(long)]
    pub no_asymmetric: bool,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub lambda_sr: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub lambda_ng: Option<f64>,
    /// Run the attention re-weighting baseline with this scale instead of guidance.
    #[arg(long)]
    pub reweight_scale: Option<f64>,
    #[arg(long)]
    pub num_sample_steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Skip null-text optimization during inversion.
    #[arg(long)]
    pub no_null_text: bool,
    #[arg(long)]
    pub null_text_inner_steps: Option<usize>,
    #[arg(long)]
    pub fixed_point_iters: Option<usize>,
    /// toy or external.
    #[arg(long)]
    pub backend: Option<String>,
    /// Command line of the external adapter process.
    #[arg(long)]
    pub backend_endpoint: Option<String>,
    /// Backend option as key=value (repeatable).
    #[arg(long = "backend-option")]
    pub backend_options: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Trajectory cache root; overrides MASKGUIDE_CACHE_DIR.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub edited: PathBuf,
    /// Source image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Text scored by text-alignment scorers; derived from the prompts if absent.
    #[arg(long)]
    pub edit_phrase: Option<String>,
    #[arg(long)]
    pub source_prompt: Option<String>,
    #[arg(long)]
    pub target_prompt: Option<String>,
    /// Scorer name (repeatable); all built-ins when absent.
    #[arg(long = "scorer")]
    pub scorers: Vec<String>,
    #[arg(long, default_value = "maskguide-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Toy option as key=value (repeatable).
    #[arg(long = "option")]
    pub options: Vec<String>,
}

fn parse_kv(items: &[String]) -> Result<BTreeMap<String, String>> {
    items
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("expected key=value, got '{kv}'")))
        })
        .collect()
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        set!(image, mask, source_prompt, target_prompt, constraint, edit_type, tau1);
        set!(max_it, tau2, delta_constant, sa_window_end, blend_window_start, guidance_scale);
        set!(lambda_sr, lambda_p, lambda_ng, reweight_scale, num_sample_steps, eta);
        set!(null_text_inner_steps, fixed_point_iters, backend, backend_endpoint, seed);
        set!(out_dir, cache_dir);
        if let Some(m) = &self.delta_mode {
            let mode: DeltaMode = serde_json::from_value(Value::String(m.clone()))
                .map_err(|_| Error::config(format!("unknown delta mode '{m}'")))?;
            cfg.delta_mode = Some(mode);
        }
        if !self.negative_tokens.is_empty() {
            cfg.negative_tokens = self.negative_tokens.clone();
        }
        if !self.group_masks.is_empty() {
            cfg.group_masks = self.group_masks.clone();
        }
        if !self.weights.is_empty() {
            cfg.weights = Some(self.weights.clone());
        }
        if self.no_asymmetric {
            cfg.asymmetric = false;
        }
        if self.no_null_text {
            cfg.null_text = false;
        }
        cfg.backend_options.extend(parse_kv(&self.backend_options)?);
        Ok(())
    }

    /// Defaults, then the config file, then flags, then presets.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.resolve()
    }
}

/// Process exit code for an error class.
pub fn exit_code(class: &str) -> i32 {
    match class {
        "backend" => 3,
        "numeric_abort" => 4,
        "io" | "json" | "image" => 1,
        _ => 2,
    }
}

/// A failed command with the manifest describing it.
#[derive(Debug)]
pub struct Failed {
    pub class: String,
    pub message: String,
    pub manifest: Box<RunManifest>,
}

impl Failed {
    fn new(command: &str, config: Value, error: Error) -> Self {
        let mut manifest = RunManifest::new(command, config);
        manifest.mark_failed(&error);
        Self::from_manifest(manifest)
    }

    fn from_manifest(manifest: RunManifest) -> Self {
        Self {
            class: manifest.error_class.clone().unwrap_or_else(|| "config".into()),
            message: manifest.error_message.clone().unwrap_or_default(),
            manifest: Box::new(manifest),
        }
    }

    fn from_run(f: RunFailure, run_config: &Value) -> Self {
        let mut m = *f.manifest;
        attach_run_config(&mut m, run_config);
        Self::from_manifest(m)
    }
}

type CmdResult = std::result::Result<RunManifest, Failed>;

fn attach_run_config(m: &mut RunManifest, run_config: &Value) {
    match &mut m.config {
        Value::Object(map) => {
            map.insert("run_config".into(), run_config.clone());
        }
        other => *other = json!({ "run_config": run_config }),
    }
}

fn make_backend(cfg: &RunConfig) -> Result<Arc<dyn DenoiserBackend>> {
    BackendRegistry::default().create(
        &cfg.backend,
        &BackendOptions {
            seed: cfg.seed,
            endpoint: cfg.backend_endpoint.clone(),
            options: cfg.backend_options.clone(),
        },
    )
}

fn cache_for(cfg: &RunConfig) -> Option<TrajectoryCache> {
    cfg.cache_dir
        .clone()
        .map(TrajectoryCache::new)
        .or_else(TrajectoryCache::from_env)
}

fn load_mask(path: &Path, backend: &dyn DenoiserBackend) -> Result<EditMask> {
    let raster = BinaryRaster::load_png(path)?;
    let shape = backend.latent_shape();
    EditMask::from_image(raster, shape.height, shape.width)
}

fn prompt_pair(
    backend: &dyn DenoiserBackend,
    source: &str,
    target: &str,
    weights: Option<&[f64]>,
    negatives: &[String],
) -> Result<PromptPair> {
    let mut pair = align_prompts(&backend.tokenize(source)?, &backend.tokenize(target)?)?;
    if let Some(w) = weights {
        pair = pair.with_weights(w)?;
    }
    let negs = negatives
        .iter()
        .map(|n| backend.tokenize(n))
        .collect::<Result<Vec<_>>>()?;
    attach_negative_tokens(pair, &negs)
}

fn build_session(
    cfg: &RunConfig,
    backend: Arc<dyn DenoiserBackend>,
    source: SourceRef,
    mask: EditMask,
    pair: PromptPair,
) -> Result<EditSession> {
    let mut s = EditSession::new(source, mask, pair, backend)?;
    s.spec = cfg.constraint_spec()?;
    s.cfg = cfg.guidance();
    s.sched = DiffusionSchedule::new(cfg.schedule())?;
    s.seed = cfg.seed;
    s.inversion = cfg.inversion();
    s.cache = cache_for(cfg);
    if let Some(scale) = cfg.reweight_scale {
        s.mode = EditMode::Reweight(scale);
    }
    Ok(s)
}

/// Session for `edit` and `edit-multi`: the mask defaults to the union of the
/// group masks.
fn edit_session(cfg: &RunConfig) -> Result<EditSession> {
    let image = RunConfig::require(&cfg.image, "image")?;
    let source = RunConfig::require(&cfg.source_prompt, "source_prompt")?;
    let target = RunConfig::require(&cfg.target_prompt, "target_prompt")?;
    if cfg.mask.is_none() && cfg.group_masks.is_empty() {
        return Err(Error::config("missing required setting 'mask'"));
    }
    let backend = make_backend(cfg)?;
    let pair = prompt_pair(
        backend.as_ref(),
        source,
        target,
        cfg.weights.as_deref(),
        &cfg.negative_tokens,
    )?;
    let group_masks = cfg
        .group_masks
        .iter()
        .map(|p| load_mask(p, backend.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mask = match &cfg.mask {
        Some(p) => load_mask(p, backend.as_ref())?,
        None => {
            let mut it = group_masks.iter();
            let first = it.next().expect("checked non-empty").clone();
            it.try_fold(first, |acc, m| acc.union(m))?
        }
    };
    let mut s = build_session(cfg, backend, SourceRef::Image(image.clone()), mask, pair)?;
    if !group_masks.is_empty() {
        s.group_masks = Some(group_masks);
    }
    Ok(s)
}

fn write_outputs(
    backend: &dyn DenoiserBackend,
    out: &EditOutput,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    manifest
        .artifacts
        .extend(write_latent_artifacts(backend, &out.latent, dir, "edited")?);
    manifest.artifacts.extend(write_latent_artifacts(
        backend,
        &out.reconstruction,
        dir,
        "reconstruction",
    )?);
    let csv = dir.join("loss_trace.csv");
    fs::write(&csv, manifest.loss_csv())?;
    manifest
        .artifacts
        .insert("loss_trace".into(), csv.display().to_string());
    Ok(())
}

fn finish_edit(
    session: &EditSession,
    result: std::result::Result<EditOutput, RunFailure>,
    cfg: &RunConfig,
    run_config: &Value,
    command: &str,
) -> CmdResult {
    let out = result.map_err(|f| Failed::from_run(f, run_config))?;
    let mut manifest = out.manifest.clone();
    manifest.command = command.to_string();
    attach_run_config(&mut manifest, run_config);
    if let Err(e) = write_outputs(session.backend.as_ref(), &out, &cfg.out_dir, &mut manifest) {
        manifest.mark_failed(&e);
        return Err(Failed::from_manifest(manifest));
    }
    Ok(manifest)
}

fn cmd_edit(cfg: &RunConfig, run_config: &Value, command: &str, multi: bool) -> CmdResult {
    let session = edit_session(cfg).map_err(|e| Failed::new(command, run_config.clone(), e))?;
    let result = if multi {
        run_edit_multi(&session)
    } else {
        run_edit(&session)
    };
    finish_edit(&session, result, cfg, run_config, command)
}

fn cmd_invert(cfg: &RunConfig, run_config: &Value) -> CmdResult {
    let fail = |e| Failed::new("invert", run_config.clone(), e);
    let image = RunConfig::require(&cfg.image, "image").map_err(fail)?;
    let source = RunConfig::require(&cfg.source_prompt, "source_prompt").map_err(fail)?;
    let backend = make_backend(cfg).map_err(fail)?;
    let (w, h) = image::image_dimensions(image)
        .map_err(Error::from)
        .map_err(fail)?;
    let full = BinaryRaster::filled(w as usize, h as usize, true);
    let shape = backend.latent_shape();
    let session = (|| {
        let mask = EditMask::from_image(full, shape.height, shape.width)?;
        let pair = prompt_pair(backend.as_ref(), source, source, None, &[])?;
        let mut s = build_session(cfg, backend.clone(), SourceRef::Image(image.clone()), mask, pair)?;
        if s.cache.is_none() {
            s.cache = Some(TrajectoryCache::new(cfg.out_dir.join("cache")));
        }
        Ok(s)
    })()
    .map_err(fail)?;
    let mut manifest = RunManifest::new("invert", session.config_snapshot());
    attach_run_config(&mut manifest, run_config);
    manifest.schedule_hash = Some(session.sched.hash());
    manifest.backend_fingerprint = Some(backend.fingerprint());
    match prepare_trajectory(&session, &mut manifest.timings) {
        Ok(prepared) => {
            let dir = prepared.cache_dir.clone().expect("invert always caches");
            if prepared.summary.source == "cache" {
                println!("cache hit: {}", dir.display());
            } else {
                println!("cache miss: stored {}", dir.display());
            }
            manifest
                .summary
                .insert("latent_files".into(), prepared.trajectory.latents.len() as f64);
            manifest
                .artifacts
                .insert("trajectory_cache".into(), dir.display().to_string());
            manifest.inversion = Some(prepared.summary);
            manifest.mark_ok();
            Ok(manifest)
        }
        Err(e) => {
            manifest.mark_failed(&e);
            Err(Failed::from_manifest(manifest))
        }
    }
}

fn iterate_steps(cfg: &RunConfig) -> Vec<IterStep> {
    if !cfg.steps.is_empty() {
        return cfg.steps.clone();
    }
    match (&cfg.target_prompt, &cfg.mask) {
        (Some(t), Some(m)) => vec![IterStep {
            target_prompt: t.clone(),
            mask: m.clone(),
            negative_tokens: cfg.negative_tokens.clone(),
        }],
        _ => Vec::new(),
    }
}

fn cmd_iterate(cfg: &RunConfig, run_config: &Value) -> CmdResult {
    let fail = |e| Failed::new("iterate", run_config.clone(), e);
    let steps = iterate_steps(cfg);
    let sessions = (|| -> Result<Vec<EditSession>> {
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        let image = RunConfig::require(&cfg.image, "image")?;
        let mut source = RunConfig::require(&cfg.source_prompt, "source_prompt")?.clone();
        let backend = make_backend(cfg)?;
        let mut sessions = Vec::with_capacity(steps.len());
        for step in &steps {
            let pair = prompt_pair(
                backend.as_ref(),
                &source,
                &step.target_prompt,
                None,
                &step.negative_tokens,
            )?;
            let mask = load_mask(&step.mask, backend.as_ref())?;
            sessions.push(build_session(
                cfg,
                backend.clone(),
                SourceRef::Image(image.clone()),
                mask,
                pair,
            )?);
            source = step.target_prompt.clone();
        }
        Ok(sessions)
    })()
    .map_err(fail)?;

    let outcome = run_iterative(&sessions);
    let mut manifest = outcome.manifest();
    attach_run_config(&mut manifest, run_config);
    for (i, out) in outcome.outputs.iter().enumerate() {
        let dir = cfg.out_dir.join(format!("step_{i}"));
        let child = &mut manifest.children[i];
        let written = write_outputs(sessions[i].backend.as_ref(), out, &dir, child)
            .and_then(|_| child.write_atomic(&dir.join(MANIFEST_FILE)));
        if let Err(e) = written {
            manifest.mark_failed(&e);
            return Err(Failed::from_manifest(manifest));
        }
    }
    if let Some(f) = &outcome.failure {
        let dir = cfg.out_dir.join(format!("step_{}", outcome.outputs.len()));
        let _ = fs::create_dir_all(&dir).and_then(|_| {
            f.manifest
                .write_atomic(&dir.join(MANIFEST_FILE))
                .map_err(std::io::Error::other)
        });
        return Err(Failed::from_manifest(manifest));
    }
    Ok(manifest)
}

/// Synthetic 128x128 scene: a vertical gradient with a disc in the middle.
pub fn demo_image() -> RgbImage {
    RgbImage::from_fn(128, 128, |x, y| {
        let (dx, dy) = (x as f64 - 64.0, y as f64 - 64.0);
        if dx * dx + dy * dy < 28.0 * 28.0 {
            image::Rgb([200, 190, 60])
        } else {
            image::Rgb([40, (60 + y / 2) as u8, (120 + x / 4) as u8])
        }
    })
}

/// Square mask covering the demo disc.
pub fn demo_mask() -> BinaryRaster {
    BinaryRaster::from_fn(128, 128, |x, y| (32..96).contains(&x) && (32..96).contains(&y))
}

fn cmd_toy_demo(mut cfg: RunConfig, run_config: &Value) -> CmdResult {
    let dir = cfg.out_dir.join("demo");
    let written = (|| -> Result<()> {
        fs::create_dir_all(&dir)?;
        demo_image().save(dir.join("source.png"))?;
        demo_mask().save_png(&dir.join("mask.png"))?;
        Ok(())
    })();
    if let Err(e) = written {
        return Err(Failed::new("toy-demo", run_config.clone(), e));
    }
    cfg.image.get_or_insert(dir.join("source.png"));
    cfg.mask.get_or_insert(dir.join("mask.png"));
    cfg.source_prompt.get_or_insert_with(|| "a photo of a cat".into());
    cfg.target_prompt.get_or_insert_with(|| "a photo of a red cat".into());
    let run_config = serde_json::to_value(&cfg).expect("config serializes");
    let mut m = cmd_edit(&cfg, &run_config, "toy-demo", false)?;
    m.artifacts
        .insert("demo_source".into(), dir.join("source.png").display().to_string());
    m.artifacts
        .insert("demo_mask".into(), dir.join("mask.png").display().to_string());
    Ok(m)
}

fn edit_phrase(args: &EvalArgs) -> Result<Option<String>> {
    if let Some(p) = &args.edit_phrase {
        return Ok(Some(p.clone()));
    }
    match (&args.source_prompt, &args.target_prompt) {
        (Some(s), Some(t)) => {
            let tok = ToyDenoiser::new(ToyConfig::default());
            Ok(Some(prompt_pair(&tok, s, t, None, &[])?.edit_phrase()))
        }
        _ => Ok(None),
    }
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let config = json!({
        "edited": args.edited,
        "image": args.image,
        "mask": args.mask,
        "edit_phrase": args.edit_phrase,
        "source_prompt": args.source_prompt,
        "target_prompt": args.target_prompt,
        "scorers": args.scorers,
    });
    let mut manifest = RunManifest::new("eval", config);
    let result = (|| -> Result<crate::eval::EvalReport> {
        let registry = ScorerRegistry::default();
        let names = if args.scorers.is_empty() {
            registry.names()
        } else {
            args.scorers.clone()
        };
        let scorers = names
            .iter()
            .map(|n| registry.get(n))
            .collect::<Result<Vec<_>>>()?;
        let edited = image::open(&args.edited)?.to_rgb8();
        let source = image::open(&args.image)?.to_rgb8();
        let mask = BinaryRaster::load_png(&args.mask)?;
        let phrase = edit_phrase(args)?;
        let report = evaluate(&edited, &source, &mask, phrase.as_deref(), &scorers)?;
        fs::create_dir_all(&args.out_dir)?;
        let path = args.out_dir.join("report.json");
        fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        manifest
            .artifacts
            .insert("report".into(), path.display().to_string());
        Ok(report)
    })();
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            let mut errors = 0;
            for s in &report.scores {
                match s.score {
                    Some(v) => {
                        manifest.summary.insert(format!("score.{}", s.scorer), v);
                    }
                    None => errors += 1,
                }
            }
            manifest.summary.insert("scorer_errors".into(), errors as f64);
            manifest.mark_ok();
            Ok(manifest)
        }
        Err(e) => {
            manifest.mark_failed(&e);
            Err(Failed::from_manifest(manifest))
        }
    }
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let opts = BackendOptions {
        seed: args.seed,
        endpoint: None,
        options: parse_kv(&args.options)?,
    };
    let backend = ToyDenoiser::new(ToyConfig::from_options(&opts)?);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(&backend, stdin.lock(), stdout.lock())
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Invert(_) => "invert",
        Command::Edit(_) => "edit",
        Command::EditMulti(_) => "edit-multi",
        Command::Iterate(_) => "iterate",
        Command::Eval(_) => "eval",
        Command::ToyDemo(_) => "toy-demo",
        Command::ServeToy(_) => "serve-toy",
    }
}

fn dispatch_run(name: &str, args: &RunArgs) -> (PathBuf, CmdResult) {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => {
            let out_dir = args
                .out_dir
                .clone()
                .unwrap_or_else(|| RunConfig::default().out_dir);
            let config = json!({ "config_file": args.config, "error": "config not resolved" });
            return (out_dir, Err(Failed::new(name, config, e)));
        }
    };
    let run_config = serde_json::to_value(&cfg).expect("config serializes");
    let result = match name {
        "invert" => cmd_invert(&cfg, &run_config),
        "edit" => cmd_edit(&cfg, &run_config, "edit", false),
        "edit-multi" => cmd_edit(&cfg, &run_config, "edit-multi", true),
        "iterate" => cmd_iterate(&cfg, &run_config),
        "toy-demo" => cmd_toy_demo(cfg.clone(), &run_config),
        other => unreachable!("{other} is not a run command"),
    };
    (cfg.out_dir, result)
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(MANIFEST_FILE);
    manifest.write_atomic(&path)?;
    Ok(path)
}

/// Best-effort manifest for arguments clap rejected.
fn usage_failure(args: &[OsString], err: &clap::Error) {
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut out_dir = RunConfig::default().out_dir;
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if let Some(v) = a.strip_prefix("--out-dir=") {
            out_dir = PathBuf::from(v);
        } else if a == "--out-dir" {
            if let Some(v) = it.next() {
                out_dir = PathBuf::from(v);
            }
        }
    }
    let command = argv
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .cloned()
        .unwrap_or_default();
    if command == "serve-toy" {
        return;
    }
    let mut m = RunManifest::new(&command, json!({ "argv": argv }));
    m.mark_failed(&Error::config(err.to_string()));
    m.error_class = Some("usage".into());
    let _ = write_manifest(&out_dir, &m);
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => {
                    usage_failure(&args, &e);
                    2
                }
            };
        }
    };
    let name = command_name(&cli.command);
    let (out_dir, result) = match &cli.command {
        Command::ServeToy(a) => {
            return match cmd_serve(a) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(e.class())
                }
            };
        }
        Command::Eval(a) => (a.out_dir.clone(), cmd_eval(a)),
        Command::Invert(a)
        | Command::Edit(a)
        | Command::EditMulti(a)
        | Command::Iterate(a)
        | Command::ToyDemo(a) => dispatch_run(name, a),
    };
    let (manifest, code) = match &result {
        Ok(m) => (m, 0),
        Err(f) => {
            eprintln!("error: {}", f.message);
            (&*f.manifest, exit_code(&f.class))
        }
    };
    match write_manifest(&out_dir, manifest) {
        Ok(path) => {
            if code == 0 {
                println!("manifest: {}", path.display());
            }
            let _ = std::io::stdout().flush();
            code
        }
        Err(e) => {
            eprintln!("error: cannot write manifest: {e}");
            if code == 0 {
                exit_code(e.class())
            } else {
                code
            }
        }
    }
}
