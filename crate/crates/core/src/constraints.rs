//! Mask-based attention constraints. Each functional is a [`Constraint`]
//! strategy registered by name; every strategy returns its value together with
//! the derivative with respect to the edit token's map so backends can chain it
//! into a latent gradient.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBundle, AttnMap, BinaryRaster, EditMask, ATTN_CELLS};
use crate::error::{Error, Result};
use crate::prompts::{validate_weights, TokenGroup};

/// Floor applied to ratio denominators.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    TokenRatio,
    SpatialRatio,
}

impl ConstraintKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ConstraintKind::TokenRatio => "tr",
            ConstraintKind::SpatialRatio => "sr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub lambda_sr: f64,
    pub lambda_p: f64,
    pub lambda_ng: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            kind: ConstraintKind::TokenRatio,
            lambda_sr: 3.0,
            lambda_p: 2.5,
            lambda_ng: 5.5,
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sr > 0.0 && self.lambda_sr.is_finite()) {
            return Err(Error::config(format!("lambda_sr must be > 0, got {}", self.lambda_sr)));
        }
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_ng", self.lambda_ng)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Value of one token's constraint and its derivative w.r.t. that token's map.
#[derive(Debug, Clone)]
pub struct TokenLoss {
    pub value: f64,
    pub grad: AttnMap,
}

pub trait Constraint: Send + Sync + Debug {
    fn kind(&self) -> ConstraintKind;

    /// `common` lists the positions whose (reconstruction) maps enter the
    /// token-ratio denominator; strategies that ignore them may do so.
    fn token_loss(
        &self,
        bundle: &AttentionBundle,
        token: usize,
        common: &[usize],
        mask: &EditMask,
    ) -> Result<TokenLoss>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenRatio;

#[derive(Debug, Clone, Copy)]
pub struct SpatialRatio {
    pub lambda: f64,
}

impl Constraint for TokenRatio {
    fn kind(&self) -> ConstraintKind {
        ConstraintKind::TokenRatio
    }

    fn token_loss(
        &self,
        bundle: &AttentionBundle,
        token: usize,
        common: &[usize],
        mask: &EditMask,
    ) -> Result<TokenLoss> {
        token_ratio_with_grad(bundle, token, common, mask)
    }
}

impl Constraint for SpatialRatio {
    fn kind(&self) -> ConstraintKind {
        ConstraintKind::SpatialRatio
    }

    fn token_loss(
        &self,
        bundle: &AttentionBundle,
        token: usize,
        _common: &[usize],
        mask: &EditMask,
    ) -> Result<TokenLoss> {
        spatial_ratio_with_grad(bundle.map(token)?, &mask.attn, self.lambda)
    }
}

fn token_ratio_with_grad(
    bundle: &AttentionBundle,
    token: usize,
    common: &[usize],
    mask: &EditMask,
) -> Result<TokenLoss> {
    if mask.area == 0 {
        return Err(Error::EmptyMask);
    }
    let a = bundle.map(token)?.as_slice();
    let mut others = vec![0.0; ATTN_CELLS];
    for &j in common {
        for (o, v) in others.iter_mut().zip(bundle.map(j)?.as_slice()) {
            *o += v;
        }
    }
    let cells = mask.attn.cells();
    let inv_area = 1.0 / mask.area as f64;
    let mut ratio_sum = 0.0;
    for n in 0..ATTN_CELLS {
        if cells[n] {
            ratio_sum += a[n] / (a[n] + others[n]).max(RATIO_EPS);
        }
    }
    let shortfall = 1.0 - inv_area * ratio_sum;
    let value = shortfall * shortfall;

    let mut grad = AttnMap::zeros();
    let g = grad.as_mut_slice();
    for n in 0..ATTN_CELLS {
        if cells[n] {
            let d = a[n] + others[n];
            let dratio = if d >= RATIO_EPS {
                others[n] / (d * d)
            } else {
                1.0 / RATIO_EPS
            };
            g[n] = -2.0 * shortfall * inv_area * dratio;
        }
    }
    Ok(TokenLoss { value, grad })
}

/// In-mask share `r` of a map's total mass.
pub fn in_mask_ratio(map: &AttnMap, mask: &BinaryRaster) -> f64 {
    let (inside, total) = masked_sums(map, mask);
    inside / total.max(RATIO_EPS)
}

fn masked_sums(map: &AttnMap, mask: &BinaryRaster) -> (f64, f64) {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (v, &m) in map.as_slice().iter().zip(mask.cells()) {
        total += v;
        if m {
            inside += v;
        }
    }
    (inside, total)
}

fn spatial_ratio_with_grad(map: &AttnMap, mask: &BinaryRaster, lambda: f64) -> Result<TokenLoss> {
    let (inside, total) = masked_sums(map, mask);
    let denom = total.max(RATIO_EPS);
    let r = inside / denom;
    let value = lambda * (1.0 - r) - r;
    let scale = -(lambda + 1.0);
    let mut grad = AttnMap::zeros();
    for (g, &m) in grad.as_mut_slice().iter_mut().zip(mask.cells()) {
        let mv = if m { 1.0 } else { 0.0 };
        let dr = if total >= RATIO_EPS {
            (mv - r) / denom
        } else {
            mv / RATIO_EPS
        };
        *g = scale * dr;
    }
    Ok(TokenLoss { value, grad })
}

/// Squared shortfall of the new token's mean in-mask share against the
/// common tokens' maps. Lies in `[0, 1]`.
pub fn token_ratio_loss(
    bundle: &AttentionBundle,
    new_pos: usize,
    common_pos: &[usize],
    mask: &EditMask,
) -> Result<f64> {
    token_ratio_with_grad(bundle, new_pos, common_pos, mask).map(|l| l.value)
}

/// `lambda * (1 - r) - r` with `r` the in-mask share of the token's map.
pub fn spatial_ratio_loss(
    bundle: &AttentionBundle,
    new_pos: usize,
    mask: &EditMask,
    lambda_sr: f64,
) -> Result<f64> {
    spatial_ratio_with_grad(bundle.map(new_pos)?, &mask.attn, lambda_sr).map(|l| l.value)
}

pub fn combine_with_negative(positive: f64, negative: f64, lambda_p: f64, lambda_ng: f64) -> f64 {
    lambda_p * positive - lambda_ng * negative
}

pub fn combine_multi_prompt(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::config(format!(
            "{} losses vs {} weights",
            losses.len(),
            weights.len()
        )));
    }
    validate_weights(weights)?;
    Ok(losses
        .iter()
        .zip(weights)
        .fold(0.0, |acc, (l, w)| acc + w * l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintValue {
    pub total: f64,
    pub per_token: BTreeMap<usize, f64>,
    pub per_group: Vec<f64>,
    /// Mean of the first edit group's maps inside the mask.
    pub in_mask_attention_mean: f64,
}

/// Weighted, group-averaged constraint over an injected bundle, with the
/// derivative for every constrained position.
#[derive(Debug, Clone)]
pub struct GroupedLoss {
    pub value: ConstraintValue,
    pub grads: Vec<(usize, AttnMap)>,
}

/// Evaluates `sum_i weight_i * mean_{tokens in group i} L(token)`.
///
/// `group_masks`, when given, supplies one mask per group; otherwise every
/// group is measured against `mask`.
pub fn evaluate_groups(
    constraint: &dyn Constraint,
    bundle: &AttentionBundle,
    groups: &[TokenGroup],
    common: &[usize],
    mask: &EditMask,
    group_masks: Option<&[EditMask]>,
) -> Result<GroupedLoss> {
    if groups.is_empty() {
        return Err(Error::contract("no edit groups to constrain"));
    }
    if let Some(gm) = group_masks {
        if gm.len() != groups.len() {
            return Err(Error::config(format!(
                "{} group masks for {} groups",
                gm.len(),
                groups.len()
            )));
        }
    }
    let mut per_token = BTreeMap::new();
    let mut per_group = Vec::with_capacity(groups.len());
    let mut grads: Vec<(usize, AttnMap)> = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let gmask = group_masks.map_or(mask, |gm| &gm[gi]);
        let inv = 1.0 / group.positions.len() as f64;
        let mut sum = 0.0;
        for &p in &group.positions {
            let tl = constraint.token_loss(bundle, p, common, gmask)?;
            per_token.insert(p, tl.value);
            sum += tl.value;
            let k = group.weight * inv;
            grads.push((p, tl.grad.scaled(k)));
        }
        per_group.push(sum * inv);
    }
    let weights: Vec<f64> = groups.iter().map(|g| g.weight).collect();
    let total = combine_multi_prompt(&per_group, &weights)?;
    let first_mask = group_masks.map_or(mask, |gm| &gm[0]);
    let in_mask_attention_mean = group_in_mask_mean(bundle, &groups[0], first_mask)?;
    Ok(GroupedLoss {
        value: ConstraintValue {
            total,
            per_token,
            per_group,
            in_mask_attention_mean,
        },
        grads,
    })
}

pub fn group_in_mask_mean(
    bundle: &AttentionBundle,
    group: &TokenGroup,
    mask: &EditMask,
) -> Result<f64> {
    let mut s = 0.0;
    for &p in &group.positions {
        s += bundle.map(p)?.masked_mean(&mask.attn);
    }
    Ok(s / group.positions.len() as f64)
}

type ConstraintFactory = Arc<dyn Fn(&ConstraintSpec) -> Arc<dyn Constraint> + Send + Sync>;

/// Name → constraint strategy.
#[derive(Clone)]
pub struct ConstraintRegistry {
    factories: HashMap<String, ConstraintFactory>,
}

impl Default for ConstraintRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: HashMap::new(),
        };
        let tr: ConstraintFactory = Arc::new(|_| Arc::new(TokenRatio));
        let sr: ConstraintFactory = Arc::new(|spec| {
            Arc::new(SpatialRatio {
                lambda: spec.lambda_sr,
            })
        });
        reg.register_factory("tr", tr.clone());
        reg.register_factory("token_ratio", tr);
        reg.register_factory("sr", sr.clone());
        reg.register_factory("spatial_ratio", sr);
        reg
    }
}

impl ConstraintRegistry {
    pub fn register_factory(&mut self, name: &str, factory: ConstraintFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&ConstraintSpec) -> Arc<dyn Constraint> + Send + Sync + 'static,
    {
        self.register_factory(name, Arc::new(f));
    }

    pub fn build(&self, name: &str, spec: &ConstraintSpec) -> Result<Arc<dyn Constraint>> {
        self.factories
            .get(name)
            .map(|f| f(spec))
            .ok_or_else(|| Error::config(format!("unknown constraint '{name}'")))
    }

    pub fn for_spec(&self, spec: &ConstraintSpec) -> Result<Arc<dyn Constraint>> {
        self.build(spec.kind.short_name(), spec)
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.factories.keys().cloned().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Branch;

    fn bundle(maps: Vec<AttnMap>) -> AttentionBundle {
        AttentionBundle {
            maps,
            branch: Branch::Editing,
            timestep: 0,
            layer_count: 1,
            head_count: 1,
        }
    }

    fn mask_from_attn(f: impl Fn(usize, usize) -> bool) -> EditMask {
        let r = BinaryRaster::from_fn(16, 16, f);
        EditMask::from_image(r, 16, 16).unwrap()
    }

    #[test]
    fn token_ratio_examples() {
        let mask = mask_from_attn(|x, y| x < 8 && y < 4);
        let b = bundle(vec![AttnMap::filled(0.3), AttnMap::filled(0.3)]);
        assert!((token_ratio_loss(&b, 0, &[1], &mask).unwrap() - 0.25).abs() < 1e-12);

        let b = bundle(vec![AttnMap::zeros(), AttnMap::filled(0.6)]);
        assert_eq!(token_ratio_loss(&b, 0, &[1], &mask).unwrap(), 1.0);

        let single = mask_from_attn(|x, y| x == 3 && y == 9);
        let b = bundle(vec![AttnMap::filled(0.2), AttnMap::filled(0.6)]);
        assert!((token_ratio_loss(&b, 0, &[1], &single).unwrap() - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn token_ratio_zero_denominator_is_finite() {
        let mask = mask_from_attn(|_, _| true);
        let b = bundle(vec![AttnMap::zeros(), AttnMap::zeros()]);
        let l = token_ratio_with_grad(&b, 0, &[1], &mask).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(l.grad.as_slice().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn spatial_ratio_examples() {
        let full = mask_from_attn(|_, _| true);
        let m = AttnMap::from_fn(|y, x| 0.1 + 0.01 * ((x * y) % 7) as f64);
        for lambda in [0.5, 3.0, 10.0] {
            let v = spatial_ratio_loss(&bundle(vec![m.clone()]), 0, &full, lambda).unwrap();
            assert!((v + 1.0).abs() < 1e-12);
        }
        let left = mask_from_attn(|x, _| x < 8);
        let right_only = AttnMap::from_fn(|_, x| if x >= 8 { 0.2 } else { 0.0 });
        let v = spatial_ratio_loss(&bundle(vec![right_only]), 0, &left, 3.0).unwrap();
        assert_eq!(v, 3.0);
        let half = AttnMap::filled(0.05);
        let v = spatial_ratio_loss(&bundle(vec![half]), 0, &left, 3.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_ratio_all_zero_map_is_finite() {
        let left = mask_from_attn(|x, _| x < 8);
        let l = spatial_ratio_with_grad(&AttnMap::zeros(), &left.attn, 3.0).unwrap();
        assert_eq!(l.value, 3.0);
        assert!(l.grad.as_slice().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn negative_combination_examples() {
        assert_eq!(combine_with_negative(0.4, 0.9, 2.5, 0.0), 2.5 * 0.4);
        assert_eq!(combine_with_negative(0.4, 0.4, 1.5, 1.5), 0.0);
        assert!((combine_with_negative(0.25, 0.81, 2.5, 5.5) + 3.83).abs() < 1e-12);
    }

    #[test]
    fn multi_prompt_examples() {
        assert_eq!(combine_multi_prompt(&[0.37], &[1.0]).unwrap(), 0.37);
        assert!((combine_multi_prompt(&[0.2, 0.8], &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(combine_multi_prompt(&[0.123, 9.0], &[1.0, 0.0]).unwrap(), 0.123);
        assert!(matches!(combine_multi_prompt(&[0.1, 0.2], &[0.5, 0.6]), Err(Error::Config(_))));
        assert!(combine_multi_prompt(&[0.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn registry_resolves_builtin_names() {
        let reg = ConstraintRegistry::default();
        let spec = ConstraintSpec::default();
        assert_eq!(reg.build("tr", &spec).unwrap().kind(), ConstraintKind::TokenRatio);
        assert_eq!(reg.build("spatial_ratio", &spec).unwrap().kind(), ConstraintKind::SpatialRatio);
        assert_eq!(reg.for_spec(&spec).unwrap().kind(), ConstraintKind::TokenRatio);
        assert!(reg.build("nope", &spec).is_err());
    }

    #[test]
    fn analytic_map_gradients_match_finite_differences() {
        let mask = mask_from_attn(|x, y| (3..11).contains(&x) && (2..9).contains(&y));
        let a = AttnMap::from_fn(|y, x| 0.05 + 0.3 * (((x * 7 + y * 3) % 11) as f64 / 11.0));
        let c = AttnMap::from_fn(|y, x| 0.1 + 0.2 * (((x + y * 5) % 13) as f64 / 13.0));
        let strategies: Vec<Box<dyn Constraint>> =
            vec![Box::new(TokenRatio), Box::new(SpatialRatio { lambda: 3.0 })];
        for s in strategies {
            let b = bundle(vec![a.clone(), c.clone()]);
            let tl = s.token_loss(&b, 0, &[1], &mask).unwrap();
            let h = 1e-6;
            for n in [0usize, 37, 50, 100, 133, 255] {
                let mut plus = b.clone();
                plus.maps[0].as_mut_slice()[n] += h;
                let mut minus = b.clone();
                minus.maps[0].as_mut_slice()[n] -= h;
                let fd = (s.token_loss(&plus, 0, &[1], &mask).unwrap().value
                    - s.token_loss(&minus, 0, &[1], &mask).unwrap().value)
                    / (2.0 * h);
                assert!((fd - tl.grad.as_slice()[n]).abs() < 1e-7, "{:?} cell {n}", s.kind());
            }
        }
    }
}
