//! Out-of-process backends speaking newline-delimited JSON over stdio.
//!
//! Each request is one JSON object with an `op` field; each response is one
//! line, either `{"ok": <payload>}` or `{"error": "<message>"}`. Latents and
//! maps travel as flat `f64` arrays in the layouts used in-process. [`serve`]
//! implements the server side for any in-process backend, which is also how
//! the adapter is tested.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Capabilities, DenoiserBackend, ForwardControl, NullEmbedding};
use crate::attention::{AttentionBundle, AttnMap, Branch};
use crate::error::{Error, Result};
use crate::latent::{Latent, LatentShape};
use crate::prompts::TokenSequence;
use crate::schedule::Timestep;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Tokenize {
        text: String,
    },
    ForwardConditional {
        latent: Vec<f64>,
        prompt: TokenSequence,
        timestep: Timestep,
        attention_override: Option<Vec<Vec<f64>>>,
        self_attention_injection: bool,
    },
    ForwardUnconditional {
        latent: Vec<f64>,
        timestep: Timestep,
        null: NullEmbedding,
    },
    AttentionVjp {
        latent: Vec<f64>,
        prompt: TokenSequence,
        timestep: Timestep,
        map_grads: Vec<(usize, Vec<f64>)>,
    },
    NullEmbeddingVjp {
        latent: Vec<f64>,
        timestep: Timestep,
        null: NullEmbedding,
        upstream: Vec<f64>,
    },
    Encode {
        width: u32,
        height: u32,
        rgb: Vec<u8>,
    },
    Decode {
        latent: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub latent_shape: LatentShape,
    pub capabilities: Capabilities,
    pub max_prompt_len: usize,
    pub null_embedding: NullEmbedding,
}

#[derive(Debug, Serialize, Deserialize)]
struct ForwardReply {
    eps: Vec<f64>,
    maps: Vec<Vec<f64>>,
    layer_count: usize,
    head_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageReply {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Reply {
    Ok(serde_json::Value),
    Error(String),
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Backend proxied to a child process. Calls are serialized.
pub struct ExternalBackend {
    info: BackendInfo,
    channel: Mutex<Channel>,
}

impl ExternalBackend {
    /// Spawns `endpoint` (a whitespace-separated command line) and performs the
    /// `info` handshake.
    pub fn spawn(endpoint: &str) -> Result<Self> {
        let mut parts = endpoint.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::config("empty external endpoint"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(format!("cannot start '{endpoint}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let channel = Mutex::new(Channel {
            child,
            stdin,
            stdout,
        });
        let mut backend = Self {
            info: BackendInfo {
                name: String::new(),
                latent_shape: LatentShape::new(0, 0, 0),
                capabilities: Capabilities::default(),
                max_prompt_len: 0,
                null_embedding: NullEmbedding {
                    rows: 0,
                    dim: 0,
                    values: Vec::new(),
                },
            },
            channel,
        };
        backend.info = backend.call(&Request::Info)?;
        // The proxy itself serializes every call.
        backend.info.capabilities.concurrent_safe = false;
        Ok(backend)
    }

    pub fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn call<T: DeserializeOwned>(&self, req: &Request) -> Result<T> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::backend("external channel poisoned"))?;
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        ch.stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::backend(format!("write to adapter failed: {e}")))?;
        let mut reply = String::new();
        let n = ch
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::backend(format!("read from adapter failed: {e}")))?;
        if n == 0 {
            return Err(Error::backend("adapter closed its output"));
        }
        match serde_json::from_str::<Reply>(&reply)? {
            Reply::Ok(v) => Ok(serde_json::from_value(v)?),
            Reply::Error(msg) => Err(Error::backend(msg)),
        }
    }

    fn latent(&self, data: Vec<f64>) -> Result<Latent> {
        Latent::from_vec(self.info.latent_shape, data)
            .map_err(|e| Error::backend(format!("adapter returned bad latent: {e}")))
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

fn bundle_from_reply(reply: &ForwardReply, t: Timestep) -> Result<AttentionBundle> {
    let maps = reply
        .maps
        .iter()
        .map(|m| AttnMap::from_vec(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionBundle {
        maps,
        branch: Branch::Editing,
        timestep: t,
        layer_count: reply.layer_count,
        head_count: reply.head_count,
    })
}

impl DenoiserBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.info.name
    }

    fn latent_shape(&self) -> LatentShape {
        self.info.latent_shape
    }

    fn capabilities(&self) -> Capabilities {
        self.info.capabilities
    }

    fn max_prompt_len(&self) -> usize {
        self.info.max_prompt_len
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.call(&Request::Tokenize {
            text: text.to_string(),
        })
    }

    fn null_embedding(&self) -> NullEmbedding {
        self.info.null_embedding.clone()
    }

    fn forward_conditional(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        control: &ForwardControl<'_>,
    ) -> Result<(Latent, AttentionBundle)> {
        let reply: ForwardReply = self.call(&Request::ForwardConditional {
            latent: z.as_slice().to_vec(),
            prompt: prompt.clone(),
            timestep: t,
            attention_override: control
                .attention_override
                .map(|b| b.maps.iter().map(|m| m.as_slice().to_vec()).collect()),
            self_attention_injection: control.self_attention_injection,
        })?;
        let bundle = bundle_from_reply(&reply, t)?;
        Ok((self.latent(reply.eps)?, bundle))
    }

    fn forward_unconditional(&self, z: &Latent, t: Timestep, null: &NullEmbedding) -> Result<Latent> {
        let eps: Vec<f64> = self.call(&Request::ForwardUnconditional {
            latent: z.as_slice().to_vec(),
            timestep: t,
            null: null.clone(),
        })?;
        self.latent(eps)
    }

    fn attention_vjp(
        &self,
        z: &Latent,
        prompt: &TokenSequence,
        t: Timestep,
        map_grads: &[(usize, AttnMap)],
    ) -> Result<Option<Latent>> {
        if !self.info.capabilities.analytic_gradient {
            return Ok(None);
        }
        let g: Option<Vec<f64>> = self.call(&Request::AttentionVjp {
            latent: z.as_slice().to_vec(),
            prompt: prompt.clone(),
            timestep: t,
            map_grads: map_grads
                .iter()
                .map(|(p, m)| (*p, m.as_slice().to_vec()))
                .collect(),
        })?;
        g.map(|g| self.latent(g)).transpose()
    }

    fn null_embedding_vjp(
        &self,
        z: &Latent,
        t: Timestep,
        null: &NullEmbedding,
        upstream: &Latent,
    ) -> Result<Option<Vec<f64>>> {
        if !self.info.capabilities.analytic_gradient {
            return Ok(None);
        }
        self.call(&Request::NullEmbeddingVjp {
            latent: z.as_slice().to_vec(),
            timestep: t,
            null: null.clone(),
            upstream: upstream.as_slice().to_vec(),
        })
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent> {
        let data: Vec<f64> = self.call(&Request::Encode {
            width: image.width(),
            height: image.height(),
            rgb: image.as_raw().clone(),
        })?;
        self.latent(data)
    }

    fn decode_latent(&self, z: &Latent) -> Result<RgbImage> {
        let img: ImageReply = self.call(&Request::Decode {
            latent: z.as_slice().to_vec(),
        })?;
        RgbImage::from_raw(img.width, img.height, img.rgb)
            .ok_or_else(|| Error::backend("adapter returned a malformed image"))
    }
}

fn handle(backend: &dyn DenoiserBackend, req: Request) -> Result<serde_json::Value> {
    let shape = backend.latent_shape();
    Ok(match req {
        Request::Info => serde_json::to_value(&BackendInfo {
            name: backend.name().to_string(),
            latent_shape: shape,
            capabilities: backend.capabilities(),
            max_prompt_len: backend.max_prompt_len(),
            null_embedding: backend.null_embedding(),
        })?,
        Request::Tokenize { text } => serde_json::to_value(&backend.tokenize(&text)?)?,
        Request::ForwardConditional {
            latent,
            prompt,
            timestep,
            attention_override,
            self_attention_injection,
        } => {
            let z = Latent::from_vec(shape, latent)?;
            let ov = attention_override
                .map(|maps| -> Result<AttentionBundle> {
                    Ok(AttentionBundle {
                        maps: maps
                            .into_iter()
                            .map(AttnMap::from_vec)
                            .collect::<Result<Vec<_>>>()?,
                        branch: Branch::Editing,
                        timestep,
                        layer_count: 1,
                        head_count: 1,
                    })
                })
                .transpose()?;
            let control = ForwardControl {
                attention_override: ov.as_ref(),
                self_attention_injection,
            };
            let (eps, bundle) = backend.forward_conditional(&z, &prompt, timestep, &control)?;
            serde_json::to_value(&ForwardReply {
                eps: eps.into_vec(),
                maps: bundle.maps.iter().map(|m| m.as_slice().to_vec()).collect(),
                layer_count: bundle.layer_count,
                head_count: bundle.head_count,
            })?
        }
        Request::ForwardUnconditional {
            latent,
            timestep,
            null,
        } => {
            let z = Latent::from_vec(shape, latent)?;
            serde_json::to_value(backend.forward_unconditional(&z, timestep, &null)?.into_vec())?
        }
        Request::AttentionVjp {
            latent,
            prompt,
            timestep,
            map_grads,
        } => {
            let z = Latent::from_vec(shape, latent)?;
            let grads = map_grads
                .into_iter()
                .map(|(p, m)| Ok((p, AttnMap::from_vec(m)?)))
                .collect::<Result<Vec<_>>>()?;
            let g = backend.attention_vjp(&z, &prompt, timestep, &grads)?;
            serde_json::to_value(g.map(Latent::into_vec))?
        }
        Request::NullEmbeddingVjp {
            latent,
            timestep,
            null,
            upstream,
        } => {
            let z = Latent::from_vec(shape, latent)?;
            let u = Latent::from_vec(shape, upstream)?;
            serde_json::to_value(&backend.null_embedding_vjp(&z, timestep, &null, &u)?)?
        }
        Request::Encode { width, height, rgb } => {
            let img = RgbImage::from_raw(width, height, rgb)
                .ok_or_else(|| Error::contract("image buffer size mismatch"))?;
            serde_json::to_value(backend.encode_image(&img)?.into_vec())?
        }
        Request::Decode { latent } => {
            let z = Latent::from_vec(shape, latent)?;
            let img = backend.decode_latent(&z)?;
            serde_json::to_value(&ImageReply {
                width: img.width(),
                height: img.height(),
                rgb: img.into_raw(),
            })?
        }
    })
}

/// Serves `backend` over newline-delimited JSON until `input` closes.
pub fn serve(
    backend: &dyn DenoiserBackend,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match handle(backend, req) {
                Ok(v) => Reply::Ok(v),
                Err(e) => Reply::Error(e.to_string()),
            },
            Err(e) => Reply::Error(format!("bad request: {e}")),
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
