//! Flat run configuration: defaults, then a JSON file, then command-line
//! flags, with presets resolved last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use maskguide::constraints::{ConstraintKind, ConstraintRegistry, ConstraintSpec};
use maskguide::guidance::{DeltaMode, GuidanceConfig};
use maskguide::inversion::{InversionOptions, NullTextOptions};
use maskguide::pipeline::InversionSettings;
use maskguide::schedule::ScheduleParams;
use maskguide::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EditType {
    Color,
    Texture,
    Shape,
}

impl EditType {
    pub fn tau1(self) -> usize {
        match self {
            EditType::Color | EditType::Texture => 10,
            EditType::Shape => 40,
        }
    }

    pub fn constraint(self) -> &'static str {
        match self {
            EditType::Color | EditType::Texture => "tr",
            EditType::Shape => "sr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterStep {
    pub target_prompt: String,
    pub mask: PathBuf,
    #[serde(default)]
    pub negative_tokens: Vec<String>,
}

/// Every knob of a run. `None` fields are filled from presets by
/// [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub source_prompt: Option<String>,
    pub target_prompt: Option<String>,
    pub negative_tokens: Vec<String>,
    pub group_masks: Vec<PathBuf>,
    pub weights: Option<Vec<f64>>,
    pub steps: Vec<IterStep>,

    pub constraint: Option<String>,
    pub edit_type: Option<EditType>,
    pub lambda_sr: f64,
    pub lambda_p: f64,
    pub lambda_ng: f64,

    pub max_it: usize,
    pub tau1: Option<usize>,
    pub tau2: usize,
    pub delta_mode: Option<DeltaMode>,
    pub delta_constant: f64,
    pub sa_window_end: usize,
    pub blend_window_start: usize,
    pub asymmetric: bool,
    pub guidance_scale: f64,
    pub reweight_scale: Option<f64>,

    pub num_train_steps: usize,
    pub num_sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,

    pub null_text: bool,
    pub null_text_inner_steps: usize,
    pub null_text_lr: f64,
    pub null_text_early_stop: f64,
    pub fixed_point_iters: usize,

    pub backend: String,
    pub backend_endpoint: Option<String>,
    pub backend_options: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let c = ConstraintSpec::default();
        let s = ScheduleParams::default();
        let n = NullTextOptions::default();
        Self {
            image: None,
            mask: None,
            source_prompt: None,
            target_prompt: None,
            negative_tokens: Vec::new(),
            group_masks: Vec::new(),
            weights: None,
            steps: Vec::new(),
            constraint: None,
            edit_type: None,
            lambda_sr: c.lambda_sr,
            lambda_p: c.lambda_p,
            lambda_ng: c.lambda_ng,
            max_it: g.max_it,
            tau1: None,
            tau2: g.tau2,
            delta_mode: None,
            delta_constant: g.delta_constant,
            sa_window_end: g.sa_window_end,
            blend_window_start: g.blend_window_start,
            asymmetric: g.asymmetric,
            guidance_scale: g.guidance_scale,
            reweight_scale: None,
            num_train_steps: s.num_train_steps,
            num_sample_steps: s.num_sample_steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            eta: s.eta,
            null_text: true,
            null_text_inner_steps: n.inner_steps,
            null_text_lr: n.lr,
            null_text_early_stop: n.early_stop,
            fixed_point_iters: InversionOptions::default().fixed_point_iters,
            backend: "toy".into(),
            backend_endpoint: None,
            backend_options: BTreeMap::new(),
            seed: 0,
            out_dir: PathBuf::from("maskguide-out"),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills preset-dependent fields: the edit type picks `tau1` and the
    /// constraint; the constraint picks the delta rule.
    pub fn resolve(mut self) -> Result<Self> {
        let edit_type = self.edit_type.unwrap_or(EditType::Color);
        if self.constraint.is_none() {
            self.constraint = Some(edit_type.constraint().to_string());
        }
        if self.tau1.is_none() {
            self.tau1 = Some(edit_type.tau1());
        }
        let kind = self.constraint_kind()?;
        if self.delta_mode.is_none() {
            self.delta_mode = Some(DeltaMode::for_constraint(kind));
        }
        Ok(self)
    }

    pub fn constraint_kind(&self) -> Result<ConstraintKind> {
        let name = self.constraint.as_deref().unwrap_or("tr");
        let spec = ConstraintSpec::default();
        Ok(ConstraintRegistry::default().build(name, &spec)?.kind())
    }

    pub fn constraint_spec(&self) -> Result<ConstraintSpec> {
        let spec = ConstraintSpec {
            kind: self.constraint_kind()?,
            lambda_sr: self.lambda_sr,
            lambda_p: self.lambda_p,
            lambda_ng: self.lambda_ng,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            max_it: self.max_it,
            tau1: self.tau1.unwrap_or(10),
            tau2: self.tau2,
            delta_mode: self.delta_mode.unwrap_or(DeltaMode::SnrSchedule),
            delta_constant: self.delta_constant,
            sa_window_end: self.sa_window_end,
            blend_window_start: self.blend_window_start,
            asymmetric: self.asymmetric,
            guidance_scale: self.guidance_scale,
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            num_train_steps: self.num_train_steps,
            num_sample_steps: self.num_sample_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            eta: self.eta,
        }
    }

    pub fn inversion(&self) -> InversionSettings {
        InversionSettings {
            options: InversionOptions {
                fixed_point_iters: self.fixed_point_iters,
                ..InversionOptions::default()
            },
            null_text: self.null_text.then_some(NullTextOptions {
                inner_steps: self.null_text_inner_steps,
                lr: self.null_text_lr,
                early_stop: self.null_text_early_stop,
                guidance_scale: self.guidance_scale,
            }),
        }
    }

    pub fn require<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::config(format!("missing required setting '{name}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"max_iterations": 3}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn round_trip_is_identical() {
        let mut cfg = RunConfig::default();
        cfg.target_prompt = Some("a red cat".into());
        cfg.weights = Some(vec![0.25, 0.75]);
        cfg.edit_type = Some(EditType::Shape);
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn presets() {
        let c = RunConfig {
            edit_type: Some(EditType::Color),
            constraint: Some("tr".into()),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.tau1, Some(10));
        assert_eq!(c.delta_mode, Some(DeltaMode::SnrSchedule));
        let s = RunConfig {
            edit_type: Some(EditType::Shape),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(s.tau1, Some(40));
        assert_eq!(s.constraint.as_deref(), Some("sr"));
        assert_eq!(s.delta_mode, Some(DeltaMode::Constant));
        let o = RunConfig {
            edit_type: Some(EditType::Shape),
            tau1: Some(7),
            delta_mode: Some(DeltaMode::SnrSchedule),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(o.tau1, Some(7));
        assert_eq!(o.delta_mode, Some(DeltaMode::SnrSchedule));
    }

    #[test]
    fn unknown_constraint_is_config_error() {
        let c = RunConfig {
            constraint: Some("bogus".into()),
            ..Default::default()
        };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }
}
