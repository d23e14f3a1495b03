//! Joint image/text embedding backends and the directional edit loss.

use crate::autodiff::Tensor;
use crate::diffrender::RenderedImage;
use crate::error::{Error, Result};
use crate::rng::{self, normal_vec};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

/// Images are resampled to this square size before encoding.
pub const INPUT_RES: usize = 224;
pub const DEFAULT_DIM: usize = 512;
pub const INIT_PROMPT: &str = "A photo of a face";
const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub v: Vec<f64>,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone(), &[self.v.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub t_init: String,
    pub t_tgt: String,
}

impl PromptPair {
    pub fn new(t_init: impl Into<String>, t_tgt: impl Into<String>) -> Result<Self> {
        let (t_init, t_tgt) = (t_init.into(), t_tgt.into());
        if t_init.trim().is_empty() || t_tgt.trim().is_empty() {
            return Err(Error::InvalidPrompt("prompts must be non-empty".into()));
        }
        if t_init == t_tgt {
            return Err(Error::InvalidPrompt(format!("target prompt equals initial prompt {t_init:?}")));
        }
        Ok(Self { t_init, t_tgt })
    }

    /// Pairs `t_tgt` with the default initial prompt.
    pub fn target(t_tgt: impl Into<String>) -> Result<Self> {
        Self::new(INIT_PROMPT, t_tgt)
    }

    pub fn swapped(&self) -> Self {
        Self {
            t_init: self.t_tgt.clone(),
            t_tgt: self.t_init.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Stub {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Pretrained {
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Stub {
            seed: 0,
            dim: DEFAULT_DIM,
        }
    }
}

pub trait EmbeddingBackend {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    /// Differentiable embedding `[d]` of an `[H,W,3]` image tensor.
    fn embed_image_tensor(&self, image: &Tensor) -> Result<Tensor>;
}

pub fn load_backend(cfg: &BackendConfig) -> Result<Box<dyn EmbeddingBackend>> {
    match cfg {
        BackendConfig::Stub { seed, dim } => Ok(Box::new(StubBackend::new(*seed, *dim)?)),
        BackendConfig::Pretrained { weights } => {
            let what = weights
                .as_ref()
                .map(|p| p.display().to_string())
                .or_else(|| std::env::var("FACETEX_PRETRAINED_WEIGHTS").ok())
                .unwrap_or_else(|| "pretrained".into());
            Err(Error::BackendUnavailable(what))
        }
    }
}

/// Offline backend: a seeded random ±1 projection of the 224-resampled image
/// and averaged hashed token vectors for text.
pub struct StubBackend {
    seed: u64,
    dim: usize,
    /// Projection composed with the resampler, keyed by input size.
    composed: Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>,
}

impl StubBackend {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        Ok(Self {
            seed,
            dim,
            composed: Mutex::new(HashMap::new()),
        })
    }

    /// `[H*W*3, d]` matrix equal to resample-then-project.
    pub fn image_matrix(&self, h: usize, w: usize) -> Arc<Vec<f64>> {
        let mut cache = self.composed.lock().expect("stub cache poisoned");
        cache
            .entry((h, w))
            .or_insert_with(|| Arc::new(self.compose(h, w)))
            .clone()
    }

    fn compose(&self, h: usize, w: usize) -> Vec<f64> {
        let d = self.dim;
        let n = INPUT_RES * INPUT_RES * 3;
        let scale = 1.0 / (n as f64).sqrt();
        let taps = |out: usize, size: usize| {
            let s = ((out as f64 + 0.5) * size as f64 / INPUT_RES as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            let f = s - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        };
        let mut rng = rng::stream(self.seed, "stub-image-projection");
        let mut m = vec![0.0; h * w * 3 * d];
        let mut row = vec![0.0; d];
        for oy in 0..INPUT_RES {
            let ty = taps(oy, h);
            for ox in 0..INPUT_RES {
                let tx = taps(ox, w);
                for c in 0..3 {
                    for chunk in row.chunks_mut(64) {
                        let bits: u64 = rng.random();
                        for (k, x) in chunk.iter_mut().enumerate() {
                            *x = if bits >> k & 1 == 1 { scale } else { -scale };
                        }
                    }
                    for &(y, wy) in &ty {
                        for &(x, wx) in &tx {
                            let wt = wy * wx;
                            if wt == 0.0 {
                                continue;
                            }
                            let dst = &mut m[((y * w + x) * 3 + c) * d..][..d];
                            for (a, b) in dst.iter_mut().zip(&row) {
                                *a += wt * b;
                            }
                        }
                    }
                }
            }
        }
        m
    }

    fn token(&self, tok: &str) -> Vec<f64> {
        normal_vec(&mut rng::stream(self.seed, &format!("stub-token:{tok}")), self.dim)
    }
}

impl EmbeddingBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt("empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            for (a, b) in v.iter_mut().zip(self.token(t)) {
                *a += b;
            }
        }
        let n = tokens.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        Ok(EmbeddingVector { v })
    }

    fn embed_image_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Validation(format!("image tensor must be [H,W,3], got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let m = self.image_matrix(h, w);
        let m = Tensor::from_vec(m.to_vec(), &[h * w * 3, self.dim]);
        Ok(image.reshape(&[1, h * w * 3]).matmul(&m).reshape(&[self.dim]))
    }
}

pub fn embed_text(backend: &dyn EmbeddingBackend, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::InvalidPrompt("empty text".into()));
    }
    backend.embed_text(text)
}

pub fn embed_image(backend: &dyn EmbeddingBackend, image: &RenderedImage) -> Result<EmbeddingVector> {
    if image.rgb.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Validation("image values must lie in [0,1]".into()));
    }
    let t = Tensor::from_vec(image.rgb.clone(), &[image.height, image.width, 3]);
    Ok(EmbeddingVector {
        v: backend.embed_image_tensor(&t)?.to_vec(),
    })
}

/// `E_T(t_tgt) - E_T(t_init)`.
pub fn text_direction(backend: &dyn EmbeddingBackend, pair: &PromptPair) -> Result<EmbeddingVector> {
    let a = embed_text(backend, &pair.t_init)?;
    let b = embed_text(backend, &pair.t_tgt)?;
    let d = EmbeddingVector {
        v: b.v.iter().zip(&a.v).map(|(x, y)| x - y).collect(),
    };
    let n = d.norm();
    if n < EPS {
        return Err(Error::DegeneratePrompt(n));
    }
    Ok(d)
}

/// Image direction against a fixed initial render, embedded once.
pub struct ImageDirection {
    init: EmbeddingVector,
}

impl ImageDirection {
    pub fn new(backend: &dyn EmbeddingBackend, init: &RenderedImage) -> Result<Self> {
        Ok(Self {
            init: embed_image(backend, init)?,
        })
    }

    pub fn from_tensor(backend: &dyn EmbeddingBackend, init: &Tensor) -> Result<Self> {
        Ok(Self {
            init: EmbeddingVector {
                v: backend.embed_image_tensor(&init.detach())?.to_vec(),
            },
        })
    }

    pub fn init_embedding(&self) -> &EmbeddingVector {
        &self.init
    }

    /// `E_I(target) - E_I(init)`, differentiable through `target` only.
    pub fn direction(&self, backend: &dyn EmbeddingBackend, target: &Tensor) -> Result<Tensor> {
        Ok(backend.embed_image_tensor(target)?.sub(&self.init.to_tensor()))
    }
}

pub fn image_direction(
    backend: &dyn EmbeddingBackend,
    i_init: &RenderedImage,
    i_tgt: &RenderedImage,
) -> Result<EmbeddingVector> {
    let init = embed_image(backend, i_init)?;
    let tgt = embed_image(backend, i_tgt)?;
    Ok(EmbeddingVector {
        v: tgt.v.iter().zip(&init.v).map(|(x, y)| x - y).collect(),
    })
}

/// `1 - cos(di, dt)`. Returns the constant 1 (no gradient) when either
/// direction is shorter than 1e-8.
pub fn directional_loss(di: &Tensor, dt: &Tensor) -> Tensor {
    let ni = di.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = dt.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if ni < EPS || nt < EPS {
        return Tensor::scalar(1.0);
    }
    let cos = di.dot(dt).div(&di.square().sum().sqrt().mul(&dt.square().sum().sqrt()));
    cos.neg().add_scalar(1.0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    dot / (na * nb)
}

/// Mean cosine similarity between each image and the text.
pub fn clip_score(backend: &dyn EmbeddingBackend, images: &[RenderedImage], text: &str) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("image list"));
    }
    let t = embed_text(backend, text)?;
    let mut total = 0.0;
    for img in images {
        total += cosine(&embed_image(backend, img)?.v, &t.v);
    }
    Ok(total / images.len() as f64)
}
