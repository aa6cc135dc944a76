//! The denoiser contract and the registry that selects an implementation by
//! name at runtime.
//!
//! A backend answers four questions about a latent: the conditional noise and
//! its cross-attention maps (optionally with maps injected), the unconditional
//! noise for a given null embedding, and two vector-Jacobian products that let
//! guidance losses flow back to the latent and to the null embedding. Backends
//! without analytic gradients leave the VJPs unimplemented and the central
//! finite-difference fallback below is used instead.

mod external;
mod toy;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBundle, AttnMap, BinaryRaster};
use crate::error::{Error, Result};
use crate::latent::{Latent, LatentShape};
use crate::prompts::TokenSequence;
use crate::schedule::Timestep;

pub use external::{serve, ExternalBackend};
pub use toy::{ToyConfig, ToyDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub concurrent_safe: bool,
    pub analytic_gradient: bool,
    pub has_vae: bool,
}

/// Unconditional-pass text embedding, `rows x dim` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullEmbedding {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl NullEmbedding {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::contract(format!(
                "null embedding {rows}x{dim} with {} values",
                values.len()
            )));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-call forward options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardControl<'a> {
    /// Replaces the conditional pass's cross-attention probabilities.
    pub attention_override: Option<&'a AttentionBundle>,
    /// Self-attention injection hook; backends without self-attention ignore it.
    pub self_attention_injection: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub conditional: Latent,
    pub unconditional: Latent,
    /// Captured maps of the conditional pass.
    pub attention: AttentionBundle,
}

pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Identifies the weights as well as the implementation; cache keys use it.
    fn fingerprint(&self) -> String {
        self.name().to_string()
    }

    fn latent_shape(&self) -> LatentShape;

    fn capabilities(&self) -> Capabilities;

    fn max_prompt_len(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    /// The default unconditional embedding.
    fn null_embedding(&self) -> NullEmbedding;

    fn forward_conditional(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        control: &ForwardControl<'_>,
    ) -> Result<(Latent, AttentionBundle)>;

    fn forward_unconditional(&self, z: &Latent, t: Timestep, null: &NullEmbedding) -> Result<Latent>;

    /// Gradient w.r.t. `z` of `sum_k <map_grads_k, A_k(z)>` for the
    /// conditional pass. `Ok(None)` means "not supported".
    fn attention_vjp(
        &self,
        _z: &Latent,
        _prompt: &TokenSequence,
        _t: Timestep,
        _map_grads: &[(usize, AttnMap)],
    ) -> Result<Option<Latent>> {
        Ok(None)
    }

    /// Gradient w.r.t. the null embedding of `<upstream, eps_uncond>`.
    fn null_embedding_vjp(
        &self,
        _z: &Latent,
        _t: Timestep,
        _null: &NullEmbedding,
        _upstream: &Latent,
    ) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn encode_image(&self, _image: &RgbImage) -> Result<Latent> {
        Err(Error::backend(format!("{} has no image encoder", self.name())))
    }

    fn decode_latent(&self, _z: &Latent) -> Result<RgbImage> {
        Err(Error::backend(format!("{} has no image decoder", self.name())))
    }

    fn predict(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        uncond: Option<&NullEmbedding>,
        control: &ForwardControl<'_>,
    ) -> Result<Prediction> {
        let (conditional, attention) = self.forward_conditional(z, prompt, t, control)?;
        let default_null;
        let null = match uncond {
            Some(n) => n,
            None => {
                default_null = self.null_embedding();
                &default_null
            }
        };
        let unconditional = self.forward_unconditional(z, t, null)?;
        Ok(Prediction {
            conditional,
            unconditional,
            attention,
        })
    }
}

/// A scalar objective over a captured attention bundle.
pub trait AttentionObjective {
    fn value(&self, bundle: &AttentionBundle) -> Result<f64>;

    /// Value and derivative w.r.t. each map the objective depends on.
    fn value_and_map_grads(&self, bundle: &AttentionBundle) -> Result<(f64, Vec<(usize, AttnMap)>)>;
}

/// Objective built from a pair of closures.
pub struct FnObjective<V, G> {
    pub value: V,
    pub grads: G,
}

impl<V, G> AttentionObjective for FnObjective<V, G>
where
    V: Fn(&AttentionBundle) -> f64,
    G: Fn(&AttentionBundle) -> Vec<(usize, AttnMap)>,
{
    fn value(&self, bundle: &AttentionBundle) -> Result<f64> {
        Ok((self.value)(bundle))
    }

    fn value_and_map_grads(&self, bundle: &AttentionBundle) -> Result<(f64, Vec<(usize, AttnMap)>)> {
        Ok(((self.value)(bundle), (self.grads)(bundle)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradientOptions<'a> {
    /// Central-difference step for the fallback path.
    pub fd_step: f64,
    /// Spatial cells (latent resolution) the fallback perturbs; all when `None`.
    pub restrict_to: Option<&'a BinaryRaster>,
    /// Skip analytic VJPs even when the backend offers them.
    pub force_finite_difference: bool,
}

impl Default for GradientOptions<'_> {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            restrict_to: None,
            force_finite_difference: false,
        }
    }
}

fn check_finite(grad: &Latent) -> Result<()> {
    if let Some(i) = grad.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericAbort {
            location: format!("gradient cell {i}"),
            message: "non-finite latent gradient".into(),
        });
    }
    Ok(())
}

/// Gradient of `objective(capture(z))` w.r.t. `z`, returned with the value at `z`.
pub fn loss_gradient(
    backend: &dyn DenoiserBackend,
    z: &Latent,
    prompt: &TokenSequence,
    t: Timestep,
    objective: &dyn AttentionObjective,
    opts: &GradientOptions<'_>,
) -> Result<(f64, Latent)> {
    if backend.capabilities().analytic_gradient && !opts.force_finite_difference {
        let (_, bundle) = backend.forward_conditional(z, prompt, t, &ForwardControl::default())?;
        let (value, map_grads) = objective.value_and_map_grads(&bundle)?;
        if let Some(g) = backend.attention_vjp(z, prompt, t, &map_grads)? {
            check_finite(&g)?;
            return Ok((value, g));
        }
    }
    finite_difference_gradient(backend, z, prompt, t, objective, opts)
}

/// Central finite differences over the (optionally restricted) latent cells.
pub fn finite_difference_gradient(
    backend: &dyn DenoiserBackend,
    z: &Latent,
    prompt: &TokenSequence,
    t: Timestep,
    objective: &dyn AttentionObjective,
    opts: &GradientOptions<'_>,
) -> Result<(f64, Latent)> {
    let shape = z.shape();
    if let Some(r) = opts.restrict_to {
        if r.width() != shape.width || r.height() != shape.height {
            return Err(Error::contract("finite-difference mask does not match latent"));
        }
    }
    let eval = |zz: &Latent| -> Result<f64> {
        let (_, b) = backend.forward_conditional(zz, prompt, t, &ForwardControl::default())?;
        objective.value(&b)
    };
    let value = eval(z)?;
    let h = opts.fd_step;
    let mut grad = Latent::zeros(shape);
    let mut probe = z.clone();
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                if let Some(r) = opts.restrict_to {
                    if !r.get(x, y) {
                        continue;
                    }
                }
                let i = z.index(c, y, x);
                let orig = z.as_slice()[i];
                probe.as_mut_slice()[i] = orig + h;
                let up = eval(&probe)?;
                probe.as_mut_slice()[i] = orig - h;
                let down = eval(&probe)?;
                probe.as_mut_slice()[i] = orig;
                grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
            }
        }
    }
    check_finite(&grad)?;
    Ok((value, grad))
}

/// Gradient of `<upstream, eps_uncond(null)>` w.r.t. the null embedding.
pub fn null_embedding_gradient(
    backend: &dyn DenoiserBackend,
    z: &Latent,
    t: Timestep,
    null: &NullEmbedding,
    upstream: &Latent,
    fd_step: f64,
) -> Result<Vec<f64>> {
    if backend.capabilities().analytic_gradient {
        if let Some(g) = backend.null_embedding_vjp(z, t, null, upstream)? {
            return Ok(g);
        }
    }
    let dot = |n: &NullEmbedding| -> Result<f64> {
        let eps = backend.forward_unconditional(z, t, n)?;
        Ok(eps
            .as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut probe = null.clone();
    let mut grad = vec![0.0; null.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = null.values[i];
        probe.values[i] = orig + fd_step;
        let up = dot(&probe)?;
        probe.values[i] = orig - fd_step;
        let down = dot(&probe)?;
        probe.values[i] = orig;
        *g = (up - down) / (2.0 * fd_step);
    }
    Ok(grad)
}

/// Construction parameters handed to backend factories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendOptions {
    pub seed: u64,
    /// Command line of an external adapter process.
    pub endpoint: Option<String>,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

type BackendFactory =
    Arc<dyn Fn(&BackendOptions) -> Result<Arc<dyn DenoiserBackend>> + Send + Sync>;

/// Name → backend constructor.
#[derive(Clone)]
pub struct BackendRegistry {
    factories: HashMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: HashMap::new(),
        };
        reg.register("toy", |opts| {
            let cfg = ToyConfig::from_options(opts)?;
            Ok(Arc::new(ToyDenoiser::new(cfg)) as Arc<dyn DenoiserBackend>)
        });
        reg.register("external", |opts| {
            let endpoint = opts
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::config("external backend needs an endpoint command"))?;
            Ok(Arc::new(ExternalBackend::spawn(endpoint)?) as Arc<dyn DenoiserBackend>)
        });
        reg
    }
}

impl BackendRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BackendOptions) -> Result<Arc<dyn DenoiserBackend>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn create(&self, name: &str, opts: &BackendOptions) -> Result<Arc<dyn DenoiserBackend>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown backend '{name}'")))?;
        f(opts)
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.factories.keys().cloned().collect();
        v.sort();
        v
    }
}
