//! Deterministic single-layer cross-attention denoiser with exact gradients.
//!
//! Every latent column `z_n` (one per 16x16 cell) attends over the prompt's
//! token embeddings:
//!
//! ```text
//! q_n = W_q z_n        k_j = W_k e_j        v_j = W_v e_j
//! A_nj = softmax_j(q_n . k_j / sqrt(d_k))
//! eps_n = W_o sum_j A_nj v_j + c * z_n
//! ```
//!
//! The unconditional pass attends over the null embedding rows instead. The
//! timestep is accepted but unused.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BackendOptions, Capabilities, DenoiserBackend, ForwardControl, NullEmbedding};
use crate::attention::{AttentionBundle, AttnMap, Branch, ATTN_CELLS, ATTN_RES};
use crate::error::{Error, Result};
use crate::latent::{Latent, LatentShape};
use crate::prompts::TokenSequence;
use crate::schedule::Timestep;

/// Token id reserved for the null prompt.
pub const NULL_TOKEN_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub channels: usize,
    /// Multiplier on `W_q`; zero gives uniform attention.
    pub attn_gain: f64,
    /// Multiplier on `W_o`.
    pub output_gain: f64,
    /// Coefficient of the `c * z` term.
    pub linear_coeff: f64,
    pub max_prompt_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 49408,
            embed_dim: 16,
            key_dim: 8,
            value_dim: 8,
            channels: 4,
            attn_gain: 2.0,
            output_gain: 1.0,
            linear_coeff: 0.1,
            max_prompt_len: 77,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Reads the seed plus optional overrides (`embed_dim`, `key_dim`,
    /// `value_dim`, `channels`, `attn_gain`, `output_gain`, `linear_coeff`).
    pub fn from_options(opts: &BackendOptions) -> Result<Self> {
        let mut cfg = Self::with_seed(opts.seed);
        for (k, v) in &opts.options {
            let bad = || Error::config(format!("toy option {k}={v} is not valid"));
            match k.as_str() {
                "embed_dim" => cfg.embed_dim = v.parse().map_err(|_| bad())?,
                "key_dim" => cfg.key_dim = v.parse().map_err(|_| bad())?,
                "value_dim" => cfg.value_dim = v.parse().map_err(|_| bad())?,
                "channels" => cfg.channels = v.parse().map_err(|_| bad())?,
                "attn_gain" => cfg.attn_gain = v.parse().map_err(|_| bad())?,
                "output_gain" => cfg.output_gain = v.parse().map_err(|_| bad())?,
                "linear_coeff" => cfg.linear_coeff = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown toy option '{k}'"))),
            }
        }
        if cfg.embed_dim == 0 || cfg.key_dim == 0 || cfg.value_dim == 0 || cfg.channels == 0 {
            return Err(Error::config("toy dimensions must be positive"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyConfig,
    /// `key_dim x channels`
    w_q: Vec<f64>,
    /// `key_dim x embed_dim`
    w_k: Vec<f64>,
    /// `value_dim x embed_dim`
    w_v: Vec<f64>,
    /// `channels x value_dim`
    w_o: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let scale = gain / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

/// `out = M x` for row-major `M` (`rows x cols`).
#[inline]
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += M^T y`.
#[inline]
fn matvec_t_acc(m: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * yr;
        }
    }
}

/// Projected keys and values for a set of embedding rows.
struct KeyValues {
    count: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

fn fnv1a(s: &str) -> u32 {
    s.bytes()
        .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

impl ToyDenoiser {
    pub fn new(cfg: ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w_q = gaussian_matrix(&mut rng, cfg.key_dim, cfg.channels, cfg.attn_gain);
        let w_k = gaussian_matrix(&mut rng, cfg.key_dim, cfg.embed_dim, 1.0);
        let w_v = gaussian_matrix(&mut rng, cfg.value_dim, cfg.embed_dim, 1.0);
        let w_o = gaussian_matrix(&mut rng, cfg.channels, cfg.value_dim, cfg.output_gain);
        Self {
            cfg,
            w_q,
            w_k,
            w_v,
            w_o,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(ToyConfig::with_seed(seed))
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Copy with the output head multiplied by `k`.
    pub fn with_output_scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for w in &mut out.w_o {
            *w *= k;
        }
        out
    }

    /// Seeded pseudorandom unit vector for a token id.
    pub fn token_embedding(&self, id: u32) -> Vec<f64> {
        let seed = self
            .cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(id as u64)
            .rotate_left(17)
            ^ 0xA076_1D64_78BD_642F;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.cfg.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }

    fn prompt_embeddings(&self, prompt: &TokenSequence) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::contract("empty prompt"));
        }
        if prompt.len() > self.cfg.max_prompt_len {
            return Err(Error::contract(format!(
                "prompt has {} tokens, maximum is {}",
                prompt.len(),
                self.cfg.max_prompt_len
            )));
        }
        Ok(prompt
            .tokens()
            .iter()
            .flat_map(|t| self.token_embedding(t.id))
            .collect())
    }

    fn project(&self, embeddings: &[f64]) -> KeyValues {
        let de = self.cfg.embed_dim;
        let (dk, dv) = (self.cfg.key_dim, self.cfg.value_dim);
        let count = embeddings.len() / de;
        let mut keys = vec![0.0; count * dk];
        let mut values = vec![0.0; count * dv];
        for j in 0..count {
            let e = &embeddings[j * de..(j + 1) * de];
            matvec(&self.w_k, dk, de, e, &mut keys[j * dk..(j + 1) * dk]);
            matvec(&self.w_v, dv, de, e, &mut values[j * dv..(j + 1) * dv]);
        }
        KeyValues {
            count,
            keys,
            values,
        }
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::contract(format!(
                "latent shape {:?}, toy expects {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }

    fn column(&self, z: &Latent, n: usize, out: &mut [f64]) {
        let zs = z.as_slice();
        for (c, o) in out.iter_mut().enumerate() {
            *o = zs[c * ATTN_CELLS + n];
        }
    }

    /// Query and softmax probabilities for one cell.
    fn cell_probs(&self, zn: &[f64], kv: &KeyValues, q: &mut [f64], probs: &mut [f64]) {
        let (dk, ch) = (self.cfg.key_dim, self.cfg.channels);
        matvec(&self.w_q, dk, ch, zn, q);
        let inv = 1.0 / (dk as f64).sqrt();
        let mut max = f64::NEG_INFINITY;
        for j in 0..kv.count {
            let s = q
                .iter()
                .zip(&kv.keys[j * dk..(j + 1) * dk])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * inv;
            probs[j] = s;
            max = max.max(s);
        }
        let mut total = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
    }

    /// Full forward; returns noise and `probs[n * count + j]`.
    fn attend(
        &self,
        z: &Latent,
        kv: &KeyValues,
        probs_override: Option<&AttentionBundle>,
    ) -> Result<(Latent, Vec<f64>)> {
        let (dk, dv, ch) = (self.cfg.key_dim, self.cfg.value_dim, self.cfg.channels);
        if let Some(ov) = probs_override {
            if ov.len() != kv.count {
                return Err(Error::contract(format!(
                    "attention override has {} maps for {} tokens",
                    ov.len(),
                    kv.count
                )));
            }
        }
        let mut eps = Latent::zeros(z.shape());
        let mut all_probs = vec![0.0; ATTN_CELLS * kv.count];
        let mut zn = vec![0.0; ch];
        let mut q = vec![0.0; dk];
        let mut mixed = vec![0.0; dv];
        let mut out = vec![0.0; ch];
        for n in 0..ATTN_CELLS {
            self.column(z, n, &mut zn);
            let probs = &mut all_probs[n * kv.count..(n + 1) * kv.count];
            match probs_override {
                Some(ov) => {
                    for (j, p) in probs.iter_mut().enumerate() {
                        *p = ov.maps[j].as_slice()[n];
                    }
                }
                None => self.cell_probs(&zn, kv, &mut q, probs),
            }
            mixed.iter_mut().for_each(|m| *m = 0.0);
            for (j, &p) in probs.iter().enumerate() {
                for (m, v) in mixed.iter_mut().zip(&kv.values[j * dv..(j + 1) * dv]) {
                    *m += p * v;
                }
            }
            matvec(&self.w_o, ch, dv, &mixed, &mut out);
            let es = eps.as_mut_slice();
            for c in 0..ch {
                es[c * ATTN_CELLS + n] = out[c] + self.cfg.linear_coeff * zn[c];
            }
        }
        Ok((eps, all_probs))
    }

    fn bundle_from_probs(probs: &[f64], count: usize, t: Timestep) -> AttentionBundle {
        let maps = (0..count)
            .map(|j| {
                AttnMap::from_vec((0..ATTN_CELLS).map(|n| probs[n * count + j]).collect())
                    .expect("cell count")
            })
            .collect();
        AttentionBundle {
            maps,
            branch: Branch::Editing,
            timestep: t,
            layer_count: 1,
            head_count: 1,
        }
    }

    fn null_rows(&self, null: &NullEmbedding) -> Result<()> {
        if null.dim != self.cfg.embed_dim || null.rows == 0 || null.len() != null.rows * null.dim {
            return Err(Error::contract(format!(
                "null embedding must be rows x {}, got {}x{}",
                self.cfg.embed_dim, null.rows, null.dim
            )));
        }
        Ok(())
    }
}

impl DenoiserBackend for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn fingerprint(&self) -> String {
        format!("toy:{:?}", self.cfg)
    }

    fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.cfg.channels, ATTN_RES, ATTN_RES)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            analytic_gradient: true,
            has_vae: self.cfg.channels >= 3,
        }
    }

    fn max_prompt_len(&self) -> usize {
        self.cfg.max_prompt_len
    }

    /// Lowercased whitespace words; ids hash into `1..vocab_size`.
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let span = self.cfg.vocab_size.saturating_sub(1).max(1);
        let seq = TokenSequence::from_pairs(text.split_whitespace().map(|w| {
            let w = w.to_lowercase();
            let id = 1 + fnv1a(&w) % span;
            (w, id)
        }));
        if seq.len() > self.cfg.max_prompt_len {
            return Err(Error::contract(format!(
                "prompt has {} tokens, maximum is {}",
                seq.len(),
                self.cfg.max_prompt_len
            )));
        }
        Ok(seq)
    }

    fn null_embedding(&self) -> NullEmbedding {
        NullEmbedding {
            rows: 1,
            dim: self.cfg.embed_dim,
            values: self.token_embedding(NULL_TOKEN_ID),
        }
    }

    fn forward_conditional(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        control: &ForwardControl<'_>,
    ) -> Result<(Latent, AttentionBundle)> {
        self.check_latent(z)?;
        let kv = self.project(&self.prompt_embeddings(prompt)?);
        let (eps, probs) = self.attend(z, &kv, control.attention_override)?;
        Ok((eps, Self::bundle_from_probs(&probs, kv.count, t)))
    }

    fn forward_unconditional(&self, z: &Latent, _t: Timestep, null: &NullEmbedding) -> Result<Latent> {
        self.check_latent(z)?;
        self.null_rows(null)?;
        let kv = self.project(&null.values);
        Ok(self.attend(z, &kv, None)?.0)
    }

    fn attention_vjp(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        _t: Timestep,
        map_grads: &[(usize, AttnMap)],
    ) -> Result<Option<Latent>> {
        self.check_latent(z)?;
        let kv = self.project(&self.prompt_embeddings(prompt)?);
        let count = kv.count;
        let mut dense = vec![0.0; ATTN_CELLS * count];
        for (p, g) in map_grads {
            if *p >= count {
                return Err(Error::contract(format!("map gradient for unknown position {p}")));
            }
            for (n, v) in g.as_slice().iter().enumerate() {
                dense[n * count + p] += v;
            }
        }
        let (dk, ch) = (self.cfg.key_dim, self.cfg.channels);
        let inv = 1.0 / (dk as f64).sqrt();
        let mut grad = Latent::zeros(z.shape());
        let mut zn = vec![0.0; ch];
        let mut q = vec![0.0; dk];
        let mut probs = vec![0.0; count];
        let mut gq = vec![0.0; dk];
        let mut gz = vec![0.0; ch];
        for n in 0..ATTN_CELLS {
            let ga = &dense[n * count..(n + 1) * count];
            if ga.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.column(z, n, &mut zn);
            self.cell_probs(&zn, &kv, &mut q, &mut probs);
            let inner: f64 = probs.iter().zip(ga).map(|(p, g)| p * g).sum();
            gq.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..count {
                let gs = probs[j] * (ga[j] - inner) * inv;
                for (o, k) in gq.iter_mut().zip(&kv.keys[j * dk..(j + 1) * dk]) {
                    *o += gs * k;
                }
            }
            gz.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&self.w_q, dk, ch, &gq, &mut gz);
            let gs = grad.as_mut_slice();
            for c in 0..ch {
                gs[c * ATTN_CELLS + n] = gz[c];
            }
        }
        Ok(Some(grad))
    }

    fn null_embedding_vjp(
        &self,
        z: &Latent,
        _t: Timestep,
        null: &NullEmbedding,
        upstream: &Latent,
    ) -> Result<Option<Vec<f64>>> {
        self.check_latent(z)?;
        self.null_rows(null)?;
        z.ensure_same_shape(upstream, "null embedding vjp")?;
        let (de, dk, dv, ch) = (
            self.cfg.embed_dim,
            self.cfg.key_dim,
            self.cfg.value_dim,
            self.cfg.channels,
        );
        let kv = self.project(&null.values);
        let count = kv.count;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut g_keys = vec![0.0; count * dk];
        let mut g_values = vec![0.0; count * dv];
        let mut zn = vec![0.0; ch];
        let mut un = vec![0.0; ch];
        let mut q = vec![0.0; dk];
        let mut probs = vec![0.0; count];
        let mut go = vec![0.0; dv];
        let mut ga = vec![0.0; count];
        for n in 0..ATTN_CELLS {
            self.column(z, n, &mut zn);
            self.column(upstream, n, &mut un);
            self.cell_probs(&zn, &kv, &mut q, &mut probs);
            go.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&self.w_o, ch, dv, &un, &mut go);
            for j in 0..count {
                let vj = &kv.values[j * dv..(j + 1) * dv];
                ga[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (g, o) in g_values[j * dv..(j + 1) * dv].iter_mut().zip(&go) {
                    *g += probs[j] * o;
                }
            }
            let inner: f64 = probs.iter().zip(&ga).map(|(p, g)| p * g).sum();
            for j in 0..count {
                let gs = probs[j] * (ga[j] - inner) * inv;
                for (g, qv) in g_keys[j * dk..(j + 1) * dk].iter_mut().zip(&q) {
                    *g += gs * qv;
                }
            }
        }
        let mut grad = vec![0.0; count * de];
        for j in 0..count {
            let ge = &mut grad[j * de..(j + 1) * de];
            matvec_t_acc(&self.w_k, dk, de, &g_keys[j * dk..(j + 1) * dk], ge);
            matvec_t_acc(&self.w_v, dv, de, &g_values[j * dv..(j + 1) * dv], ge);
        }
        Ok(Some(grad))
    }

    /// Box-averages RGB into the 16x16 grid; channels 0..3 carry RGB scaled to
    /// `[-1, 1]`, remaining channels carry the luma.
    fn encode_image(&self, image: &RgbImage) -> Result<Latent> {
        if self.cfg.channels < 3 {
            return Err(Error::backend("toy encoder needs at least 3 channels"));
        }
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w < ATTN_RES || h < ATTN_RES {
            return Err(Error::contract(format!("image {w}x{h} smaller than {ATTN_RES}x{ATTN_RES}")));
        }
        let mut z = Latent::zeros(self.latent_shape());
        for gy in 0..ATTN_RES {
            for gx in 0..ATTN_RES {
                let (x0, x1) = (gx * w / ATTN_RES, (gx + 1) * w / ATTN_RES);
                let (y0, y1) = (gy * h / ATTN_RES, (gy + 1) * h / ATTN_RES);
                let mut acc = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as f64;
                let rgb: Vec<f64> = acc.iter().map(|a| a / count / 127.5 - 1.0).collect();
                let luma = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                for c in 0..self.cfg.channels {
                    z.set(c, gy, gx, if c < 3 { rgb[c] } else { luma });
                }
            }
        }
        Ok(z)
    }

    /// Nearest-neighbour upsampling of channels 0..3 to 128x128.
    fn decode_latent(&self, z: &Latent) -> Result<RgbImage> {
        self.check_latent(z)?;
        if self.cfg.channels < 3 {
            return Err(Error::backend("toy decoder needs at least 3 channels"));
        }
        let scale = 8u32;
        let side = ATTN_RES as u32 * scale;
        Ok(RgbImage::from_fn(side, side, |x, y| {
            let (gx, gy) = ((x / scale) as usize, (y / scale) as usize);
            let px = |c: usize| ((z.get(c, gy, gx) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        }))
    }
}
