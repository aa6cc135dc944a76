//! Mask-aware guidance: the per-timestep optimization loop on the editing
//! latent, its step-size schedule and window bookkeeping, and the full
//! two-branch denoising step built around it.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::attention::{inject, inject_with, reweight, AttentionBundle, AttnMap, Branch, EditMask};
use crate::backend::{
    loss_gradient, AttentionObjective, DenoiserBackend, ForwardControl, GradientOptions,
    NullEmbedding,
};
use crate::constraints::{
    evaluate_groups, group_in_mask_mean, Constraint, ConstraintKind, ConstraintSpec,
    ConstraintValue,
};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::prompts::{NegativePrompt, PromptPair, TokenGroup};
use crate::schedule::{
    asymmetric_step, cfg_combine, ddim_step, DenoiseStep, DiffusionSchedule, NoisePrediction, Timestep,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    SnrSchedule,
    Constant,
}

impl DeltaMode {
    /// The step-size rule that pairs with a constraint.
    pub fn for_constraint(kind: ConstraintKind) -> Self {
        match kind {
            ConstraintKind::TokenRatio => DeltaMode::SnrSchedule,
            ConstraintKind::SpatialRatio => DeltaMode::Constant,
        }
    }
}

/// Window bounds are sampling-step indices: the sampler counts `s` from the
/// number of sample steps down to 1, and a window `[T, tau]` holds `s > tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub max_it: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub delta_mode: DeltaMode,
    pub delta_constant: f64,
    pub sa_window_end: usize,
    pub blend_window_start: usize,
    pub asymmetric: bool,
    pub guidance_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            max_it: 15,
            tau1: 10,
            tau2: 25,
            delta_mode: DeltaMode::SnrSchedule,
            delta_constant: 1.0,
            sa_window_end: 25,
            blend_window_start: 15,
            asymmetric: true,
            guidance_scale: 7.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, num_sample_steps: usize) -> Result<()> {
        if self.max_it == 0 {
            return Err(Error::config("max_it must be at least 1"));
        }
        for (name, v) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("sa_window_end", self.sa_window_end),
            ("blend_window_start", self.blend_window_start),
        ] {
            if v > num_sample_steps {
                return Err(Error::config(format!(
                    "{name} = {v} exceeds the {num_sample_steps} sample steps"
                )));
            }
        }
        if !(self.delta_constant.is_finite() && self.delta_constant > 0.0) {
            return Err(Error::config("delta_constant must be a positive number"));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("guidance_scale must be finite"));
        }
        Ok(())
    }

    pub fn optimizes_at(&self, step_index: usize) -> bool {
        step_index > self.tau2
    }

    pub fn injects_at(&self, step_index: usize) -> bool {
        step_index > self.tau1
    }

    pub fn self_attention_at(&self, step_index: usize) -> bool {
        step_index > self.sa_window_end
    }

    /// Whether the output of step `step_index` is blended with the
    /// reconstruction branch.
    pub fn blends_at(&self, step_index: usize) -> bool {
        step_index <= self.blend_window_start
    }
}

/// Optimization step size at timestep `t`.
pub fn delta_at(t: Timestep, sched: &DiffusionSchedule, cfg: &GuidanceConfig) -> Result<f64> {
    match cfg.delta_mode {
        DeltaMode::Constant => Ok(cfg.delta_constant),
        DeltaMode::SnrSchedule => Ok(snr_delta(sched.alpha_bar(t)?)),
    }
}

pub fn snr_delta(alpha_t: f64) -> f64 {
    ((1.0 - alpha_t) / alpha_t).sqrt()
}

/// `z - delta * grad` inside the latent mask; cells outside are copied.
pub fn masked_latent_update(z: &Latent, grad: &Latent, mask: &EditMask, delta: f64) -> Result<Latent> {
    z.ensure_same_shape(grad, "masked_latent_update")?;
    let shape = z.shape();
    let m = &mask.latent;
    if m.width() != shape.width || m.height() != shape.height {
        return Err(Error::contract(format!(
            "latent mask {}x{} does not match latent {}x{}",
            m.width(),
            m.height(),
            shape.width,
            shape.height
        )));
    }
    let mut out = z.clone();
    let spatial = shape.spatial();
    let cells = m.cells();
    for (i, (o, g)) in out.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
        if cells[i % spatial] {
            *o -= delta * g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub latent: Latent,
    pub timestep: Timestep,
    pub branch: Branch,
}

/// Loss of the editing branch's injected maps.
struct EditObjective<'a> {
    constraint: &'a dyn Constraint,
    recon: &'a AttentionBundle,
    pair: &'a PromptPair,
    common: Vec<usize>,
    mask: &'a EditMask,
    group_masks: Option<&'a [EditMask]>,
    last: RefCell<Option<ConstraintValue>>,
}

impl EditObjective<'_> {
    fn evaluate(&self, bundle: &AttentionBundle) -> Result<crate::constraints::GroupedLoss> {
        let injected = inject(self.recon, bundle, self.pair)?;
        evaluate_groups(
            self.constraint,
            &injected,
            &self.pair.groups,
            &self.common,
            self.mask,
            self.group_masks,
        )
    }

    /// Breakdown at `z`, reusing the one recorded by the analytic path.
    fn breakdown(
        &self,
        backend: &dyn DenoiserBackend,
        z: &Latent,
        t: Timestep,
    ) -> Result<ConstraintValue> {
        if let Some(v) = self.last.borrow_mut().take() {
            return Ok(v);
        }
        let (_, b) = backend.forward_conditional(z, &self.pair.target, t, &ForwardControl::default())?;
        Ok(self.evaluate(&b)?.value)
    }
}

impl AttentionObjective for EditObjective<'_> {
    fn value(&self, bundle: &AttentionBundle) -> Result<f64> {
        Ok(self.evaluate(bundle)?.value.total)
    }

    fn value_and_map_grads(&self, bundle: &AttentionBundle) -> Result<(f64, Vec<(usize, AttnMap)>)> {
        let g = self.evaluate(bundle)?;
        let total = g.value.total;
        *self.last.borrow_mut() = Some(g.value);
        Ok((total, g.grads))
    }
}

/// Loss of one negative phrase on its auxiliary pass.
struct NegativeObjective<'a> {
    constraint: &'a dyn Constraint,
    recon: &'a AttentionBundle,
    neg: &'a NegativePrompt,
    own: Vec<usize>,
    common: Vec<usize>,
    group: [TokenGroup; 1],
    mask: &'a EditMask,
}

impl<'a> NegativeObjective<'a> {
    fn new(
        constraint: &'a dyn Constraint,
        recon: &'a AttentionBundle,
        neg: &'a NegativePrompt,
        mask: &'a EditMask,
    ) -> Self {
        Self {
            constraint,
            recon,
            own: neg.own_positions(),
            common: neg.common.iter().map(|&(_, a)| a).collect(),
            group: [TokenGroup {
                positions: neg.positions.clone(),
                weight: 1.0,
            }],
            neg,
            mask,
        }
    }
}

impl AttentionObjective for NegativeObjective<'_> {
    fn value(&self, bundle: &AttentionBundle) -> Result<f64> {
        self.value_and_map_grads(bundle).map(|(v, _)| v)
    }

    fn value_and_map_grads(&self, bundle: &AttentionBundle) -> Result<(f64, Vec<(usize, AttnMap)>)> {
        let mut aux = inject_with(self.recon, bundle, &self.neg.common, &self.own)?;
        aux.branch = Branch::AuxiliaryNegative;
        let g = evaluate_groups(self.constraint, &aux, &self.group, &self.common, self.mask, None)?;
        Ok((g.value.total, g.grads))
    }
}

/// Diagnostics of one optimization iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: f64,
    pub positive: f64,
    pub negatives: Vec<f64>,
    pub per_group: Vec<f64>,
    pub in_mask_attention_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: usize,
    pub t: Timestep,
    pub optimized: bool,
    pub injected: bool,
    pub self_attention: bool,
    pub delta: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    /// In-mask mean of the first edit group's maps at the step's entry latent.
    pub in_mask_before: Option<f64>,
    /// Same quantity at the latent handed to the final forward.
    pub in_mask_after: Option<f64>,
    /// Per-group in-mask means at the final latent.
    pub group_in_mask_after: Vec<f64>,
    /// Out-of-mask mean of the first edit group's maps at the final latent,
    /// after any re-weighting.
    pub out_mask_after: Option<f64>,
    /// In-mask mean after any re-weighting.
    pub injected_in_mask_after: Option<f64>,
}

impl StepTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loss).collect()
    }

    pub fn csv_header() -> &'static str {
        "step_index,t,iteration,loss,positive,in_mask_attention_mean"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.iterations
            .iter()
            .enumerate()
            .map(|(i, r)| {
                format!(
                    "{},{},{},{},{},{}",
                    self.step_index, self.t, i, r.loss, r.positive, r.in_mask_attention_mean
                )
            })
            .collect()
    }
}

/// Everything a denoising step needs besides the two latents.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub sched: &'a DiffusionSchedule,
    pub cfg: &'a GuidanceConfig,
    pub spec: &'a ConstraintSpec,
    pub constraint: &'a dyn Constraint,
    pub pair: &'a PromptPair,
    pub mask: &'a EditMask,
    /// One mask per edit group; the update region is `mask` either way.
    pub group_masks: Option<&'a [EditMask]>,
    /// Attention re-weighting in place of optimization.
    pub reweight_scale: Option<f64>,
    pub gradient: GradientOptions<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconStep {
    pub next: LatentState,
    pub bundle: AttentionBundle,
}

/// One plain denoising step of the reconstruction branch; its maps are what
/// the editing branch injects at this timestep.
pub fn recon_denoise_step(
    ctx: &StepContext<'_>,
    z_recon: &LatentState,
    null: &NullEmbedding,
) -> Result<ReconStep> {
    let step = step_of(ctx.sched, z_recon.timestep)?;
    let control = ForwardControl {
        attention_override: None,
        self_attention_injection: false,
    };
    let pred = ctx
        .backend
        .predict(&z_recon.latent, &ctx.pair.source, step.t, Some(null), &control)
        .map_err(|e| e.with_context(format!("reconstruction branch at t={}", step.t)))?;
    let eps = cfg_combine(&NoisePrediction::new(
        pred.conditional,
        pred.unconditional,
        ctx.cfg.guidance_scale,
    )?)?;
    let next = ddim_step(&z_recon.latent, &eps, step.t, step.t_prev, ctx.sched)?;
    let mut bundle = pred.attention;
    bundle.branch = Branch::Reconstruction;
    Ok(ReconStep {
        next: LatentState {
            latent: next,
            timestep: step.t_prev,
            branch: Branch::Reconstruction,
        },
        bundle,
    })
}

fn step_of(sched: &DiffusionSchedule, t: Timestep) -> Result<DenoiseStep> {
    sched
        .step_for(t)
        .ok_or_else(|| Error::contract(format!("timestep {t} is not on the sample grid")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: LatentState,
    /// The editing latent after this step's optimization loop.
    pub optimized: Latent,
    pub trace: StepTrace,
}

/// One editing-branch step: optional optimization of `z_edit` inside the
/// mask, then a guided forward with injected maps and the DDIM update.
///
/// `recon_bundle` is the reconstruction branch's capture at this timestep;
/// when absent it is computed from `z_recon`.
pub fn mag_denoise_step(
    ctx: &StepContext<'_>,
    z_recon: &LatentState,
    z_edit: &LatentState,
    null: &NullEmbedding,
    recon_bundle: Option<&AttentionBundle>,
) -> Result<StepOutcome> {
    if z_recon.timestep != z_edit.timestep {
        return Err(Error::contract(format!(
            "branches at different timesteps: {} vs {}",
            z_recon.timestep, z_edit.timestep
        )));
    }
    let step = step_of(ctx.sched, z_edit.timestep)?;
    let t = step.t;
    let owned_recon;
    let recon = match recon_bundle {
        Some(b) => b,
        None => {
            owned_recon = recon_denoise_step(ctx, z_recon, null)?.bundle;
            &owned_recon
        }
    };
    let backend = ctx.backend;
    let target = &ctx.pair.target;
    let has_groups = !ctx.pair.groups.is_empty();
    let optimize = has_groups && ctx.reweight_scale.is_none() && ctx.cfg.optimizes_at(step.index);
    let injected = ctx.cfg.injects_at(step.index);
    let self_attention = ctx.cfg.self_attention_at(step.index);

    let z_in = &z_edit.latent;
    let (eps_in, bundle_in) = backend
        .forward_conditional(z_in, target, t, &ForwardControl::default())
        .map_err(|e| e.with_context(format!("editing branch at t={t}")))?;
    let first_group_mean = |b: &AttentionBundle| -> Result<Option<f64>> {
        match ctx.pair.groups.first() {
            Some(g) => {
                let m = ctx.group_masks.map_or(ctx.mask, |gm| &gm[0]);
                Ok(Some(group_in_mask_mean(b, g, m)?))
            }
            None => Ok(None),
        }
    };
    let in_mask_before = first_group_mean(&bundle_in)?;

    let mut trace = StepTrace {
        step_index: step.index,
        t,
        optimized: optimize,
        injected,
        self_attention,
        delta: None,
        iterations: Vec::new(),
        in_mask_before,
        in_mask_after: None,
        group_in_mask_after: Vec::new(),
        out_mask_after: None,
        injected_in_mask_after: None,
    };

    let mut z = z_in.clone();
    if optimize {
        let delta = delta_at(t, ctx.sched, ctx.cfg)?;
        trace.delta = Some(delta);
        let objective = EditObjective {
            constraint: ctx.constraint,
            recon,
            pair: ctx.pair,
            common: ctx.pair.common_target_positions(),
            mask: ctx.mask,
            group_masks: ctx.group_masks,
            last: RefCell::new(None),
        };
        let neg_mask = ctx.group_masks.map_or(ctx.mask, |gm| &gm[0]);
        let negatives: Vec<NegativeObjective<'_>> = ctx
            .pair
            .negatives
            .iter()
            .map(|n| NegativeObjective::new(ctx.constraint, recon, n, neg_mask))
            .collect();
        let mut opts = ctx.gradient;
        if opts.restrict_to.is_none() {
            opts.restrict_to = Some(&ctx.mask.latent);
        }
        for it in 0..ctx.cfg.max_it {
            let wrap = |e: Error| e.with_context(format!("iteration {it} at t={t}"));
            let (positive, g_pos) =
                loss_gradient(backend, &z, target, t, &objective, &opts).map_err(wrap)?;
            let value = objective.breakdown(backend, &z, t).map_err(wrap)?;
            let (loss, grad, neg_values) = if negatives.is_empty() {
                (positive, g_pos, Vec::new())
            } else {
                let mut neg_values = Vec::with_capacity(negatives.len());
                let mut g_neg = Latent::zeros(z.shape());
                for (obj, neg) in negatives.iter().zip(&ctx.pair.negatives) {
                    let (v, g) = loss_gradient(backend, &z, &neg.prompt, t, obj, &opts)
                        .map_err(wrap)?;
                    neg_values.push(v);
                    g_neg = g_neg.zip_map(&g, |a, b| a + b);
                }
                let k = 1.0 / negatives.len() as f64;
                let mean_neg = neg_values.iter().sum::<f64>() * k;
                let (lp, ln) = (ctx.spec.lambda_p, ctx.spec.lambda_ng);
                let grad = g_pos.zip_map(&g_neg, |p, n| lp * p - ln * k * n);
                (lp * positive - ln * mean_neg, grad, neg_values)
            };
            if !loss.is_finite() {
                return Err(Error::NumericAbort {
                    location: format!("t={t}, iteration {it}"),
                    message: format!(
                        "non-finite guidance loss {loss}; trace so far: {:?}",
                        trace.losses()
                    ),
                });
            }
            trace.iterations.push(IterationRecord {
                loss,
                positive,
                negatives: neg_values,
                per_group: value.per_group,
                in_mask_attention_mean: value.in_mask_attention_mean,
            });
            z = masked_latent_update(&z, &grad, ctx.mask, delta)?;
        }
    }

    let moved = optimize && z != *z_in;
    let (eps_c_plain, bundle_z) = if moved {
        backend
            .forward_conditional(&z, target, t, &ForwardControl::default())
            .map_err(|e| e.with_context(format!("editing branch at t={t}")))?
    } else {
        (eps_in.clone(), bundle_in.clone())
    };
    trace.in_mask_after = first_group_mean(&bundle_z)?;
    for (gi, g) in ctx.pair.groups.iter().enumerate() {
        let m = ctx.group_masks.map_or(ctx.mask, |gm| &gm[gi]);
        trace.group_in_mask_after.push(group_in_mask_mean(&bundle_z, g, m)?);
    }

    let eps_for = |zz: &Latent, bundle: &AttentionBundle, plain: &Latent| -> Result<Latent> {
        let overridden = if injected {
            let mut inj = inject(recon, bundle, ctx.pair)?;
            if let Some(scale) = ctx.reweight_scale {
                for g in &ctx.pair.groups {
                    for &p in &g.positions {
                        inj = reweight(&inj, p, scale)?;
                    }
                }
            }
            Some(inj)
        } else {
            None
        };
        let cond = if overridden.is_some() || self_attention {
            let control = ForwardControl {
                attention_override: overridden.as_ref(),
                self_attention_injection: self_attention,
            };
            backend
                .forward_conditional(zz, target, t, &control)
                .map_err(|e| e.with_context(format!("injected forward at t={t}")))?
                .0
        } else {
            plain.clone()
        };
        let uncond = backend
            .forward_unconditional(zz, t, null)
            .map_err(|e| e.with_context(format!("unconditional forward at t={t}")))?;
        cfg_combine(&NoisePrediction::new(cond, uncond, ctx.cfg.guidance_scale)?)
    };

    if let Some(g) = ctx.pair.groups.first() {
        let m = ctx.group_masks.map_or(ctx.mask, |gm| &gm[0]);
        let mut used = bundle_z.clone();
        if injected {
            if let Some(scale) = ctx.reweight_scale {
                for &p in &g.positions {
                    used = reweight(&used, p, scale)?;
                }
            }
        }
        let inside = group_in_mask_mean(&used, g, m)?;
        let outside_cells = m.attn.cells().iter().filter(|&&c| !c).count();
        let outside = if outside_cells == 0 {
            0.0
        } else {
            let total: f64 = g
                .positions
                .iter()
                .map(|&p| {
                    used.maps[p]
                        .as_slice()
                        .iter()
                        .zip(m.attn.cells())
                        .filter(|(_, &c)| !c)
                        .map(|(v, _)| v)
                        .sum::<f64>()
                })
                .sum();
            total / (outside_cells * g.positions.len()) as f64
        };
        trace.injected_in_mask_after = Some(inside);
        trace.out_mask_after = Some(outside);
    }

    let eps_opt = eps_for(&z, &bundle_z, &eps_c_plain)?;
    let eps_raw = if moved && ctx.cfg.asymmetric {
        eps_for(z_in, &bundle_in, &eps_in)?
    } else {
        eps_opt.clone()
    };
    let next = asymmetric_step(&z, z_in, &eps_opt, &eps_raw, t, step.t_prev, ctx.sched)?;
    if !next.is_finite() {
        return Err(Error::NumericAbort {
            location: format!("t={t}"),
            message: "non-finite latent after the denoising update".into(),
        });
    }
    Ok(StepOutcome {
        next: LatentState {
            latent: next,
            timestep: step.t_prev,
            branch: Branch::Editing,
        },
        optimized: z,
        trace,
    })
}
