#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskguide::attention::{AttentionBundle, AttnMap, BinaryRaster, EditMask};
use maskguide::backend::{
    Capabilities, DenoiserBackend, ForwardControl, NullEmbedding, ToyConfig, ToyDenoiser,
};
use maskguide::prompts::{align_prompts, PromptPair, TokenSequence};
use maskguide::schedule::Timestep;
use maskguide::{Latent, LatentShape, Result};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy(seed: u64) -> Arc<ToyDenoiser> {
    Arc::new(ToyDenoiser::new(ToyConfig::with_seed(seed)))
}

pub fn random_latent(shape: LatentShape, rng: &mut ChaCha8Rng) -> Latent {
    Latent::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Square block of `side` cells (on the 16x16 grid) at a random spot of a
/// 64x64 mask image.
pub fn random_block_mask(rng: &mut ChaCha8Rng, side: usize) -> EditMask {
    let x0 = rng.random_range(0..=16 - side);
    let y0 = rng.random_range(0..=16 - side);
    let img = BinaryRaster::from_fn(64, 64, |x, y| {
        (x0..x0 + side).contains(&(x / 4)) && (y0..y0 + side).contains(&(y / 4))
    });
    EditMask::from_image(img, 16, 16).unwrap()
}

pub fn block_mask(x0: usize, y0: usize, w: usize, h: usize) -> EditMask {
    let img = BinaryRaster::from_fn(64, 64, |x, y| {
        (x0..x0 + w).contains(&(x / 4)) && (y0..y0 + h).contains(&(y / 4))
    });
    EditMask::from_image(img, 16, 16).unwrap()
}

pub fn pair(backend: &dyn DenoiserBackend, source: &str, target: &str) -> PromptPair {
    align_prompts(
        &backend.tokenize(source).unwrap(),
        &backend.tokenize(target).unwrap(),
    )
    .unwrap()
}

pub fn tokens(backend: &dyn DenoiserBackend, text: &str) -> TokenSequence {
    backend.tokenize(text).unwrap()
}

/// How a [`Wrapped`] backend alters the toy's behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quirk {
    /// Analytic gradient is identically zero.
    ZeroGradient,
    /// Analytic gradient fails.
    FailingGradient,
    /// Captured maps contain NaN.
    NanMaps,
}

/// Toy backend with one behaviour changed.
pub struct Wrapped {
    pub inner: ToyDenoiser,
    pub quirk: Quirk,
}

impl Wrapped {
    pub fn new(seed: u64, quirk: Quirk) -> Self {
        Self {
            inner: ToyDenoiser::new(ToyConfig::with_seed(seed)),
            quirk,
        }
    }
}

impl DenoiserBackend for Wrapped {
    fn name(&self) -> &str {
        "wrapped-toy"
    }

    fn latent_shape(&self) -> LatentShape {
        self.inner.latent_shape()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn max_prompt_len(&self) -> usize {
        self.inner.max_prompt_len()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.inner.tokenize(text)
    }

    fn null_embedding(&self) -> NullEmbedding {
        self.inner.null_embedding()
    }

    fn forward_conditional(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        control: &ForwardControl<'_>,
    ) -> Result<(Latent, AttentionBundle)> {
        let (eps, mut bundle) = self.inner.forward_conditional(z, prompt, t, control)?;
        if self.quirk == Quirk::NanMaps {
            for m in &mut bundle.maps {
                m.as_mut_slice()[0] = f64::NAN;
            }
        }
        Ok((eps, bundle))
    }

    fn forward_unconditional(&self, z: &Latent, t: Timestep, null: &NullEmbedding) -> Result<Latent> {
        self.inner.forward_unconditional(z, t, null)
    }

    fn attention_vjp(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        map_grads: &[(usize, AttnMap)],
    ) -> Result<Option<Latent>> {
        match self.quirk {
            Quirk::ZeroGradient => Ok(Some(Latent::zeros(z.shape()))),
            Quirk::FailingGradient => Err(maskguide::Error::backend("gradient tap unavailable")),
            Quirk::NanMaps => self.inner.attention_vjp(z, prompt, t, map_grads),
        }
    }
}
