//! Time-varying texture edits driven by an expression/pose sequence.

use crate::autodiff::{grad, no_grad, Tensor};
use crate::clipspace::{directional_loss, text_direction, EmbeddingBackend, ImageDirection, PromptPair};
use crate::diffrender::{shade, FragmentBuffer, RenderedImage, UVTexture};
use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::mappers::{to_image, texture_tensor, FaceRenderer, StackedMlp};
use crate::morphable::{FaceParams, MorphableModel, POSE_DIM};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::texgen::{map_latent, sample_z, Generator, LatentStack, LATENT_DIM};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::path::Path;

const PRETRAIN_CODES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AnimationSequence {
    pub poses: Vec<Vec<f64>>,
    pub expressions: Vec<Vec<f64>>,
    pub neutral_pose: Vec<f64>,
    pub neutral_expression: Vec<f64>,
}

#[derive(Deserialize)]
struct FrameRecord {
    pose: Vec<f64>,
    expression: Vec<f64>,
    #[serde(default)]
    neutral: bool,
}

impl AnimationSequence {
    pub fn new(
        poses: Vec<Vec<f64>>,
        expressions: Vec<Vec<f64>>,
        neutral_pose: Vec<f64>,
        neutral_expression: Vec<f64>,
    ) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Empty("animation sequence"));
        }
        if poses.len() != expressions.len() {
            return Err(Error::dim("expression frames", poses.len(), expressions.len()));
        }
        let e = neutral_expression.len();
        for (t, (p, x)) in poses.iter().zip(&expressions).enumerate() {
            if p.len() != POSE_DIM {
                return Err(Error::dim(format!("pose of frame {t}"), POSE_DIM, p.len()));
            }
            if x.len() != e {
                return Err(Error::dim(format!("expression of frame {t}"), e, x.len()));
            }
        }
        if neutral_pose.len() != POSE_DIM {
            return Err(Error::dim("neutral pose", POSE_DIM, neutral_pose.len()));
        }
        let all = poses.iter().chain(&expressions).chain([&neutral_pose, &neutral_expression]);
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("animation sequence".into()));
        }
        Ok(Self {
            poses,
            expressions,
            neutral_pose,
            neutral_expression,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// JSON lines of `{"pose": [6], "expression": [E]}`; exactly one record
    /// carries `"neutral": true`.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut frames = Vec::new();
        let mut neutral = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: FrameRecord = serde_json::from_str(line)
                .map_err(|e| Error::load(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
            if rec.neutral {
                if neutral.replace(rec).is_some() {
                    return Err(Error::load(path.display().to_string(), "more than one neutral record"));
                }
            } else {
                frames.push(rec);
            }
        }
        let neutral = neutral.ok_or_else(|| Error::load(path.display().to_string(), "missing neutral record"))?;
        let (poses, exprs) = frames.into_iter().map(|f| (f.pose, f.expression)).unzip();
        Self::new(poses, exprs, neutral.pose, neutral.expression)
    }

    pub fn validate(&self, model: &MorphableModel) -> Result<()> {
        if self.neutral_expression.len() != model.expr_rank() {
            return Err(Error::dim("sequence expression", model.expr_rank(), self.neutral_expression.len()));
        }
        Ok(())
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            poses: order.iter().map(|&i| self.poses[i].clone()).collect(),
            expressions: order.iter().map(|&i| self.expressions[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// `‖[θ_neutral; ψ_neutral] - [θ_t; ψ_t]‖` per frame.
pub fn deviations(seq: &AnimationSequence) -> Vec<f64> {
    (0..seq.len())
        .map(|t| {
            let dp = seq.poses[t].iter().zip(&seq.neutral_pose).map(|(a, b)| (a - b).powi(2));
            let de = seq.expressions[t].iter().zip(&seq.neutral_expression).map(|(a, b)| (a - b).powi(2));
            dp.chain(de).sum::<f64>().sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub i: Vec<f64>,
}

/// Min-max normalised deviations; all ones when the deviations are constant.
pub fn importance_weights(seq: &AnimationSequence) -> ImportanceWeights {
    let d = deviations(seq);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = if hi > lo {
        d.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; d.len()]
    };
    ImportanceWeights { i }
}

/// Per-level input `[w_init^l ; ψ ; θ]`.
pub fn frame_embedding(w_init: &LatentStack, pose: &[f64], expression: &[f64]) -> Vec<Vec<f64>> {
    (0..w_init.levels)
        .map(|l| w_init.level(l).iter().chain(expression).chain(pose).copied().collect())
        .collect()
}

/// `w_init + i_t · w_delta^t` for every frame.
pub fn apply_time_offsets(w_init: &LatentStack, w_delta: &[LatentStack], i: &ImportanceWeights) -> Result<Vec<LatentStack>> {
    if w_delta.len() != i.i.len() {
        return Err(Error::dim("offset frames", i.i.len(), w_delta.len()));
    }
    w_delta
        .iter()
        .zip(&i.i)
        .map(|(d, &it)| {
            if d.levels != w_init.levels {
                return Err(Error::dim("latent levels", w_init.levels, d.levels));
            }
            LatentStack::new(w_init.levels, w_init.w.iter().zip(&d.w).map(|(a, b)| a + it * b).collect())
        })
        .collect()
}

/// Texture mapper shared over time, one 568-input network per level.
#[derive(Clone)]
pub struct TimeVaryingTextureMapper {
    pub net: StackedMlp,
}

impl TimeVaryingTextureMapper {
    pub fn new(levels: usize, expr_dim: usize, rng: &mut Rng) -> Self {
        let d = LATENT_DIM + expr_dim + POSE_DIM;
        Self {
            net: StackedMlp::new("time_texture", levels, &[d, LATENT_DIM, LATENT_DIM, LATENT_DIM, LATENT_DIM], rng),
        }
    }

    /// `[L,B,568]` embeddings to `[L,B,512]` offsets.
    pub fn forward(&self, emb: &Tensor) -> Tensor {
        self.net.forward(emb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::create(path)?;
        let expr_dim = self.net.in_dim() - LATENT_DIM - POSE_DIM;
        w.json(
            "manifest.json",
            &serde_json::json!({ "levels": self.net.levels(), "expression_dim": expr_dim }),
        )?;
        self.net.ps.save(&mut w, "time_texture")?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = ContainerReader::open(path)?;
        let meta = r.json("manifest.json")?;
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::load(format!("manifest.json:{k}"), "missing"))
        };
        let mut m = Self::new(field("levels")?, field("expression_dim")?, &mut rng::stream(0, "mapper-load"));
        m.net.ps.load(&r, "time_texture")?;
        Ok(m)
    }
}

fn embeddings_tensor(w_init: &LatentStack, seq: &AnimationSequence, frames: &[usize]) -> Tensor {
    let l = w_init.levels;
    let d = LATENT_DIM + seq.neutral_expression.len() + POSE_DIM;
    let per: Vec<Vec<Vec<f64>>> = frames
        .iter()
        .map(|&t| frame_embedding(w_init, &seq.poses[t], &seq.expressions[t]))
        .collect();
    let mut data = Vec::with_capacity(l * frames.len() * d);
    for lv in 0..l {
        for f in &per {
            data.extend_from_slice(&f[lv]);
        }
    }
    Tensor::from_vec(data, &[l, frames.len(), d])
}

/// Zero-offset pretraining with linear step-size decay; returns the largest
/// offset on held-out codes and frames of `seq`.
pub fn pretrain_zero_time(
    mapper: &mut TimeVaryingTextureMapper,
    gen: &Generator,
    seq: &AnimationSequence,
    n_steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut opt = Adam::new(&mapper.net.ps, lr, 0.9, 0.999);
    let all: Vec<usize> = (0..seq.len()).collect();
    for step in 0..n_steps {
        opt.lr = lr * (1.0 - step as f64 / n_steps as f64);
        let mut parts = Vec::with_capacity(PRETRAIN_CODES);
        for _ in 0..PRETRAIN_CODES {
            parts.push(embeddings_tensor(&map_latent(gen, &sample_z(rng))?, seq, &all));
        }
        let out = mapper.forward(&Tensor::concat(&parts, 1));
        let loss = out.square().mean();
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("time mapper pretraining loss at step {step}")));
        }
        let g = grad(&loss, &mapper.net.ps.tensors(), false);
        opt.step(&mut mapper.net.ps, &g);
    }
    let _g = no_grad();
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let w = map_latent(gen, &sample_z(rng))?;
        let out = mapper.forward(&embeddings_tensor(&w, seq, &all));
        worst = out.data().iter().fold(worst, |m, x| m.max(x.abs()));
    }
    if worst >= 1e-3 {
        log::warn!("time mapper pretraining reached max offset {worst:.3e} after {n_steps} steps (target 1e-3)");
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnimationConfig {
    pub lr: f64,
    pub iterations: usize,
    pub frame_batch: usize,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub render_resolution: usize,
    pub camera: [f64; 3],
}

impl Default for AnimationConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            iterations: 20_000,
            frame_batch: 8,
            seed: 0,
            pretrain_steps: 100,
            pretrain_lr: 1e-5,
            render_resolution: 224,
            camera: [8.5, 0.0, 0.0],
        }
    }
}

impl AnimationConfig {
    pub fn toy() -> Self {
        Self {
            iterations: 300,
            render_resolution: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.frame_batch == 0 {
            return Err(Error::Validation("iterations and frame batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Validation("learning rate must be >= 0".into()));
        }
        if self.render_resolution < 8 || !(self.camera[0] > 0.0) {
            return Err(Error::Validation("render resolution must be >= 8 and camera scale positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationLoss {
    pub iteration: usize,
    /// Sum of per-frame directional losses over the frames of this step.
    pub total: f64,
    pub frames: Vec<usize>,
}

pub struct AnimationResult {
    pub mapper: TimeVaryingTextureMapper,
    pub weights: ImportanceWeights,
    pub w_tgt: Vec<LatentStack>,
    pub textures: Vec<UVTexture>,
    pub renders: Vec<RenderedImage>,
    pub trace: Vec<AnimationLoss>,
}

pub struct Animator<'a> {
    gen: &'a Generator,
    backend: &'a dyn EmbeddingBackend,
    pub cfg: AnimationConfig,
    pub mapper: TimeVaryingTextureMapper,
    opt: Adam,
    seq: AnimationSequence,
    weights: ImportanceWeights,
    w_init: LatentStack,
    w_init_t: Tensor,
    dt: Tensor,
    frags: Vec<FragmentBuffer>,
    init: Vec<ImageDirection>,
    rng: Rng,
    iteration: usize,
}

impl<'a> Animator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gen: &'a Generator,
        model: &'a MorphableModel,
        backend: &'a dyn EmbeddingBackend,
        seq: AnimationSequence,
        w_init: &LatentStack,
        base: FaceParams,
        pair: &PromptPair,
        cfg: AnimationConfig,
        mapper: TimeVaryingTextureMapper,
    ) -> Result<Self> {
        cfg.validate()?;
        seq.validate(model)?;
        if w_init.levels != gen.levels() || mapper.net.levels() != gen.levels() {
            return Err(Error::dim("latent levels", gen.levels(), w_init.levels.min(mapper.net.levels())));
        }
        let want = LATENT_DIM + model.expr_rank() + POSE_DIM;
        if mapper.net.in_dim() != want {
            return Err(Error::dim("time mapper input", want, mapper.net.in_dim()));
        }
        let dt = text_direction(backend, pair)?.to_tensor();
        let renderer = FaceRenderer::new(model, base, cfg.render_resolution, cfg.camera)?;
        let w_init_t = w_init.to_tensor();
        let tex0 = {
            let _g = no_grad();
            texture_tensor(gen, &w_init_t)
        };
        let mut frags = Vec::with_capacity(seq.len());
        let mut init = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let frag = renderer.fragments(&seq.expressions[t], &seq.poses[t])?;
            init.push(ImageDirection::from_tensor(backend, &shade(&frag, &tex0))?);
            frags.push(frag);
        }
        Ok(Self {
            gen,
            backend,
            opt: Adam::new(&mapper.net.ps, cfg.lr, 0.9, 0.999),
            rng: rng::stream(cfg.seed, "animation-frames"),
            weights: importance_weights(&seq),
            cfg,
            mapper,
            seq,
            w_init: w_init.clone(),
            w_init_t,
            dt,
            frags,
            init,
            iteration: 0,
        })
    }

    pub fn weights(&self) -> &ImportanceWeights {
        &self.weights
    }

    fn frames(&mut self) -> Vec<usize> {
        let t = self.seq.len();
        if t <= self.cfg.frame_batch {
            (0..t).collect()
        } else {
            let mut f = sample(&mut self.rng, t, self.cfg.frame_batch).into_vec();
            f.sort_unstable();
            f
        }
    }

    /// Target codes `[L,512]` for `frames`, each `w_init + i_t Δ_t`.
    fn targets(&self, frames: &[usize]) -> Vec<Tensor> {
        let l = self.gen.levels();
        let out = self.mapper.forward(&embeddings_tensor(&self.w_init, &self.seq, frames));
        frames
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let delta = out.narrow(1, k, 1).reshape(&[l, LATENT_DIM]);
                self.w_init_t.add(&delta.scale(self.weights.i[t]))
            })
            .collect()
    }

    /// Summed directional loss over `frames`, with the per-frame textures.
    pub fn loss(&self, frames: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut total = Tensor::scalar(0.0);
        let mut textures = Vec::with_capacity(frames.len());
        for (&t, w) in frames.iter().zip(self.targets(frames)) {
            let tex = texture_tensor(self.gen, &w);
            let img = shade(&self.frags[t], &tex);
            let di = self.init[t].direction(self.backend, &img)?;
            total = total.add(&directional_loss(&di, &self.dt));
            textures.push(tex);
        }
        Ok((total, textures))
    }

    pub fn step(&mut self) -> Result<AnimationLoss> {
        let frames = self.frames();
        let (total, _) = self.loss(&frames)?;
        let value = total.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("animation loss at iteration {}", self.iteration)));
        }
        let g = grad(&total, &self.mapper.net.ps.tensors(), false);
        if !g.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("animation gradient at iteration {}", self.iteration)));
        }
        self.opt.step(&mut self.mapper.net.ps, &g);
        let rec = AnimationLoss {
            iteration: self.iteration,
            total: value,
            frames,
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// Current per-frame codes, textures and renders for every frame.
    pub fn outputs(&self) -> Result<(Vec<LatentStack>, Vec<UVTexture>, Vec<RenderedImage>)> {
        let _g = no_grad();
        let all: Vec<usize> = (0..self.seq.len()).collect();
        let r = self.gen.resolution();
        let mut ws = Vec::new();
        let mut texs = Vec::new();
        let mut imgs = Vec::new();
        for (&t, w) in all.iter().zip(self.targets(&all)) {
            let tex = texture_tensor(self.gen, &w);
            imgs.push(to_image(&shade(&self.frags[t], &tex), &self.frags[t]));
            texs.push(UVTexture::new(r, tex.to_vec())?);
            ws.push(LatentStack::new(self.gen.levels(), w.to_vec())?);
        }
        Ok((ws, texs, imgs))
    }

    pub fn run(mut self) -> Result<AnimationResult> {
        let mut trace = Vec::with_capacity(self.cfg.iterations);
        for _ in 0..self.cfg.iterations {
            trace.push(self.step()?);
        }
        let (w_tgt, textures, renders) = self.outputs()?;
        Ok(AnimationResult {
            mapper: self.mapper,
            weights: self.weights,
            w_tgt,
            textures,
            renders,
            trace,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_animation(
    gen: &Generator,
    model: &MorphableModel,
    backend: &dyn EmbeddingBackend,
    seq: AnimationSequence,
    w_init: &LatentStack,
    base: FaceParams,
    pair: &PromptPair,
    cfg: AnimationConfig,
    mapper: TimeVaryingTextureMapper,
) -> Result<AnimationResult> {
    Animator::new(gen, model, backend, seq, w_init, base, pair, cfg, mapper)?.run()
}
