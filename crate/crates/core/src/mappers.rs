//! Text-guided texture and expression editing through latent offset networks.

use crate::autodiff::{grad, no_grad, Tensor};
use crate::clipspace::{directional_loss, text_direction, EmbeddingBackend, ImageDirection, PromptPair};
use crate::diffrender::{project, project_tensor, rasterize_screen, shade, shade_with_geometry, FragmentBuffer, RenderedImage, UVTexture};
use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::morphable::{FaceParams, Mesh, MorphableModel, ModelTensors};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::rng::{self, normal_vec, Rng};
use crate::texgen::{map_latent, sample_z, Generator, LatentStack, LATENT_DIM};
use serde::{Deserialize, Serialize};

const SLOPE: f64 = 0.2;
const PRETRAIN_BATCH: usize = 8;
/// Output layers start small so initial offsets are near zero but not degenerate.
const OUTPUT_INIT_GAIN: f64 = 1e-3;

/// `levels` independent MLPs evaluated as one batched stack.
#[derive(Clone)]
pub struct StackedMlp {
    pub ps: ParamSet,
    levels: usize,
    dims: Vec<usize>,
}

impl StackedMlp {
    pub fn new(name: &str, levels: usize, dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2);
        let mut ps = ParamSet::new();
        let depth = dims.len() - 1;
        for (k, pair) in dims.windows(2).enumerate() {
            let (fi, fo) = (pair[0], pair[1]);
            let gain = if k + 1 == depth { OUTPUT_INIT_GAIN } else { 1.0 };
            let std = gain / (fi as f64).sqrt();
            let w = normal_vec(rng, levels * fi * fo).into_iter().map(|x| x * std).collect();
            ps.add(format!("{name}.fc{k}.weight"), w, &[levels, fi, fo]);
            ps.add(format!("{name}.fc{k}.bias"), vec![0.0; levels * fo], &[levels, 1, fo]);
        }
        Self {
            ps,
            levels,
            dims: dims.to_vec(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    /// `[levels, B, in]` to `[levels, B, out]`; the last layer is linear.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let depth = self.dims.len() - 1;
        let mut h = x.clone();
        for k in 0..depth {
            h = h.matmul(self.ps.get(2 * k)).add(self.ps.get(2 * k + 1));
            if k + 1 < depth {
                h = h.leaky_relu(SLOPE);
            }
        }
        h
    }

    pub fn zero(&mut self) {
        for i in 0..self.ps.len() {
            let n = self.ps.get(i).numel();
            self.ps.set(i, vec![0.0; n]);
        }
    }
}

/// One 512→512×4 network per style level.
#[derive(Clone)]
pub struct TextureMapper {
    pub net: StackedMlp,
}

impl TextureMapper {
    pub fn new(levels: usize, rng: &mut Rng) -> Self {
        Self {
            net: StackedMlp::new("texture", levels, &[LATENT_DIM; 5], rng),
        }
    }

    /// `[L,512]` codes to `[L,512]` offsets.
    pub fn forward(&self, w: &Tensor) -> Tensor {
        let l = self.net.levels();
        self.net.forward(&w.reshape(&[l, 1, LATENT_DIM])).reshape(&[l, LATENT_DIM])
    }
}

#[derive(Clone)]
pub struct ExpressionMapper {
    pub net: StackedMlp,
}

impl ExpressionMapper {
    pub fn new(expr_dim: usize, rng: &mut Rng) -> Self {
        Self {
            net: StackedMlp::new("expression", 1, &[LATENT_DIM, expr_dim, expr_dim, expr_dim, expr_dim], rng),
        }
    }

    /// `[512]` mean code to `[E]` expression offsets.
    pub fn forward(&self, w_mean: &Tensor) -> Tensor {
        let e = self.net.out_dim();
        self.net.forward(&w_mean.reshape(&[1, 1, LATENT_DIM])).reshape(&[e])
    }
}

#[derive(Clone)]
pub struct Mappers {
    pub texture: TextureMapper,
    pub expression: ExpressionMapper,
}

impl Mappers {
    pub fn new(levels: usize, expr_dim: usize, rng: &mut Rng) -> Self {
        Self {
            texture: TextureMapper::new(levels, rng),
            expression: ExpressionMapper::new(expr_dim, rng),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = ContainerWriter::create(path)?;
        w.json(
            "manifest.json",
            &serde_json::json!({
                "levels": self.texture.net.levels(),
                "expression_dim": self.expression.net.out_dim(),
            }),
        )?;
        self.texture.net.ps.save(&mut w, "texture")?;
        self.expression.net.ps.save(&mut w, "expression")?;
        w.finish()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let r = ContainerReader::open(path)?;
        let meta = r.json("manifest.json")?;
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::load(format!("manifest.json:{k}"), "missing"))
        };
        let mut m = Self::new(field("levels")?, field("expression_dim")?, &mut rng::stream(0, "mapper-load"));
        m.texture.net.ps.load(&r, "texture")?;
        m.expression.net.ps.load(&r, "expression")?;
        Ok(m)
    }
}

pub fn texture_offsets(t: &TextureMapper, w_init: &LatentStack) -> Result<LatentStack> {
    if w_init.levels != t.net.levels() {
        return Err(Error::dim("latent levels", t.net.levels(), w_init.levels));
    }
    let _g = no_grad();
    LatentStack::new(w_init.levels, t.forward(&w_init.to_tensor()).to_vec())
}

/// Per-coordinate mean over levels of `w_init + w_delta`.
pub fn mean_latent(w_init: &LatentStack, w_delta: &LatentStack) -> Result<Vec<f64>> {
    if w_init.levels != w_delta.levels {
        return Err(Error::dim("latent levels", w_init.levels, w_delta.levels));
    }
    let mut m = vec![0.0; LATENT_DIM];
    for l in 0..w_init.levels {
        for (k, v) in m.iter_mut().enumerate() {
            *v += w_init.level(l)[k] + w_delta.level(l)[k];
        }
    }
    m.iter_mut().for_each(|v| *v /= w_init.levels as f64);
    Ok(m)
}

fn mean_levels(w: &Tensor) -> Tensor {
    w.sum_axis_keep(0).scale(1.0 / w.dim(0) as f64).reshape(&[LATENT_DIM])
}

pub fn expression_offsets(e: &ExpressionMapper, w_mean: &[f64]) -> Result<Vec<f64>> {
    if w_mean.len() != LATENT_DIM {
        return Err(Error::dim("mean latent", LATENT_DIM, w_mean.len()));
    }
    let _g = no_grad();
    Ok(e.forward(&Tensor::from_vec(w_mean.to_vec(), &[LATENT_DIM])).to_vec())
}

/// Largest absolute offset either mapper produces on `samples`.
pub fn max_offset(mappers: &Mappers, samples: &[LatentStack]) -> f64 {
    let _g = no_grad();
    let mut worst: f64 = 0.0;
    for w in samples {
        let t = mappers.texture.forward(&w.to_tensor());
        let wm = mean_levels(&w.to_tensor().add(&t));
        let e = mappers.expression.forward(&wm);
        for x in t.data().iter().chain(e.data()) {
            worst = worst.max(x.abs());
        }
    }
    worst
}

/// `[L, B, 512]` tensor of `batch` freshly sampled codes.
fn sample_codes(gen: &Generator, batch: usize, rng: &mut Rng) -> Result<Tensor> {
    let l = gen.levels();
    let ws: Vec<LatentStack> = (0..batch).map(|_| map_latent(gen, &sample_z(rng))).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(l * batch * LATENT_DIM);
    for lv in 0..l {
        for w in &ws {
            data.extend_from_slice(w.level(lv));
        }
    }
    Ok(Tensor::from_vec(data, &[l, batch, LATENT_DIM]))
}

/// Fits both mappers to output zero on sampled codes, with a linearly decaying
/// step size. Returns the largest offset on fresh held-out samples.
pub fn pretrain_zero(mappers: &mut Mappers, gen: &Generator, n_steps: usize, lr: f64, rng: &mut Rng) -> Result<f64> {
    let mut opt_t = Adam::new(&mappers.texture.net.ps, lr, 0.9, 0.999);
    let mut opt_e = Adam::new(&mappers.expression.net.ps, lr, 0.9, 0.999);
    let (l, batch) = (gen.levels(), PRETRAIN_BATCH);
    let n_tex = mappers.texture.net.ps.len();
    for step in 0..n_steps {
        let decay = 1.0 - step as f64 / n_steps as f64;
        opt_t.lr = lr * decay;
        opt_e.lr = lr * decay;
        let w = sample_codes(gen, batch, rng)?;
        let t = mappers.texture.net.forward(&w);
        let w_mean = w.add(&t).sum_axis_keep(0).scale(1.0 / l as f64);
        let e = mappers.expression.net.forward(&w_mean);
        let loss = t.square().mean().add(&e.square().mean());
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("zero-offset pretraining loss at step {step}")));
        }
        let mut params = mappers.texture.net.ps.tensors();
        params.extend(mappers.expression.net.ps.tensors());
        let mut g = grad(&loss, &params, false);
        let ge = g.split_off(n_tex);
        opt_t.step(&mut mappers.texture.net.ps, &g);
        opt_e.step(&mut mappers.expression.net.ps, &ge);
    }
    let held: Vec<LatentStack> = (0..16).map(|_| map_latent(gen, &sample_z(rng))).collect::<Result<_>>()?;
    let achieved = max_offset(mappers, &held);
    if achieved >= 1e-3 {
        log::warn!("zero-offset pretraining reached max offset {achieved:.3e} after {n_steps} steps (target 1e-3)");
    }
    Ok(achieved)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulationConfig {
    pub lambda_reg: f64,
    pub lr_texture: f64,
    pub lr_expression: f64,
    pub iterations: usize,
    pub freeze_expression: bool,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub render_resolution: usize,
    /// Fixed frontal camera `[scale, tx, ty]`.
    pub camera: [f64; 3],
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.1,
            lr_texture: 1e-4,
            lr_expression: 5e-3,
            iterations: 5000,
            freeze_expression: false,
            seed: 0,
            pretrain_steps: 100,
            pretrain_lr: 1e-5,
            render_resolution: 224,
            camera: [8.5, 0.0, 0.0],
        }
    }
}

impl ManipulationConfig {
    /// Longer schedule used for the animation-style experiments.
    pub fn long() -> Self {
        Self {
            iterations: 20_000,
            ..Self::default()
        }
    }

    pub fn toy() -> Self {
        Self {
            iterations: 300,
            render_resolution: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Validation(format!("lambda_reg = {} must be >= 0", self.lambda_reg)));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be >= 1".into()));
        }
        if !(self.lr_texture >= 0.0) || !(self.lr_expression >= 0.0) {
            return Err(Error::Validation("learning rates must be >= 0".into()));
        }
        if self.render_resolution < 8 {
            return Err(Error::Validation("render resolution must be >= 8".into()));
        }
        if !(self.camera[0] > 0.0) {
            return Err(Error::Validation("camera scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub clip: f64,
    pub reg: f64,
    pub total: f64,
}

pub struct ManipulationResult {
    pub mappers: Mappers,
    pub w_tgt: LatentStack,
    pub psi_tgt: Vec<f64>,
    pub texture: UVTexture,
    pub render: RenderedImage,
    pub mesh: Mesh,
    pub trace: Vec<LossRecord>,
}

/// Differentiable render of a `[R,R,3]` texture on the fixed-β/θ face with
/// expression `psi`.
pub struct FaceRenderer<'a> {
    model: &'a MorphableModel,
    tensors: ModelTensors,
    base: FaceParams,
    res: usize,
    camera: [f64; 3],
}

impl<'a> FaceRenderer<'a> {
    pub fn new(model: &'a MorphableModel, base: FaceParams, res: usize, camera: [f64; 3]) -> Result<Self> {
        base.validate(model)?;
        Ok(Self {
            model,
            tensors: model.tensors(),
            base,
            res,
            camera,
        })
    }

    pub fn base(&self) -> &FaceParams {
        &self.base
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    fn params_with(&self, psi: &[f64], pose: &[f64]) -> FaceParams {
        FaceParams {
            expression: psi.to_vec(),
            pose: pose.to_vec(),
            ..self.base.clone()
        }
    }

    pub fn mesh(&self, psi: &[f64], pose: &[f64]) -> Result<Mesh> {
        self.model.decode(&self.params_with(psi, pose))
    }

    /// Visibility for expression `psi` and pose, mouth interior removed.
    pub fn fragments(&self, psi: &[f64], pose: &[f64]) -> Result<FragmentBuffer> {
        let mesh = self.mesh(psi, pose)?;
        let screen = project(&mesh.vertices, self.camera, self.res, self.res);
        Ok(rasterize_screen(&screen, &mesh.topology, self.res, self.res).without_mouth())
    }

    /// Render differentiable in the texture and in `psi`.
    pub fn render(&self, texture: &Tensor, psi: &Tensor, pose: &Tensor) -> Result<Tensor> {
        let frag = self.fragments(psi.data(), pose.data())?;
        let shape = Tensor::from_vec(self.base.shape.clone(), &[self.base.shape.len()]);
        let verts = self.tensors.decode(&shape, pose, psi);
        let screen = project_tensor(&verts, self.camera, self.res, self.res);
        Ok(shade_with_geometry(&frag, &screen, texture))
    }

    pub fn expression_prior(&self, psi: &Tensor) -> Tensor {
        self.tensors.expression_prior(psi)
    }
}

pub(crate) fn texture_tensor(gen: &Generator, w: &Tensor) -> Tensor {
    let (l, r) = (gen.levels(), gen.resolution());
    gen.synthesize(&w.reshape(&[1, l, LATENT_DIM])).reshape(&[r, r, 3])
}

pub(crate) fn to_image(t: &Tensor, frag: &FragmentBuffer) -> RenderedImage {
    RenderedImage {
        height: t.dim(0),
        width: t.dim(1),
        rgb: t.to_vec(),
        mask: frag.coverage.clone(),
    }
}

/// One text-driven edit: mappers, optimizers and the cached initial render.
pub struct Manipulator<'a> {
    gen: &'a Generator,
    backend: &'a dyn EmbeddingBackend,
    renderer: FaceRenderer<'a>,
    pub cfg: ManipulationConfig,
    pub mappers: Mappers,
    opt_t: Adam,
    opt_e: Adam,
    w_init: Tensor,
    psi_init: Tensor,
    pose: Tensor,
    dt: Tensor,
    init: ImageDirection,
    frozen_frag: Option<FragmentBuffer>,
    iteration: usize,
}

pub struct Forward {
    pub w_tgt: Tensor,
    pub psi_tgt: Tensor,
    pub texture: Tensor,
    pub image: Tensor,
    pub clip: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

impl<'a> Manipulator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gen: &'a Generator,
        model: &'a MorphableModel,
        backend: &'a dyn EmbeddingBackend,
        w_init: &LatentStack,
        base: FaceParams,
        pair: &PromptPair,
        cfg: ManipulationConfig,
        mappers: Mappers,
    ) -> Result<Self> {
        cfg.validate()?;
        if w_init.levels != gen.levels() {
            return Err(Error::dim("latent levels", gen.levels(), w_init.levels));
        }
        if mappers.texture.net.levels() != gen.levels() {
            return Err(Error::dim("texture mapper levels", gen.levels(), mappers.texture.net.levels()));
        }
        if mappers.expression.net.out_dim() != model.expr_rank() {
            return Err(Error::dim("expression mapper output", model.expr_rank(), mappers.expression.net.out_dim()));
        }
        let dt = text_direction(backend, pair)?.to_tensor();
        let renderer = FaceRenderer::new(model, base.clone(), cfg.render_resolution, cfg.camera)?;
        let w0 = w_init.to_tensor();
        let psi_init = Tensor::from_vec(base.expression.clone(), &[base.expression.len()]);
        let pose = Tensor::from_vec(base.pose.clone(), &[base.pose.len()]);
        let init_img = {
            let _g = no_grad();
            renderer.render(&texture_tensor(gen, &w0), &psi_init, &pose)?
        };
        let init = ImageDirection::from_tensor(backend, &init_img)?;
        let frozen_frag = if cfg.freeze_expression {
            Some(renderer.fragments(&base.expression, &base.pose)?)
        } else {
            None
        };
        Ok(Self {
            gen,
            backend,
            renderer,
            opt_t: Adam::new(&mappers.texture.net.ps, cfg.lr_texture, 0.9, 0.999),
            opt_e: Adam::new(&mappers.expression.net.ps, cfg.lr_expression, 0.9, 0.999),
            cfg,
            mappers,
            w_init: w0,
            psi_init,
            pose,
            dt,
            init,
            frozen_frag,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn text_direction(&self) -> &Tensor {
        &self.dt
    }

    pub fn initial_embedding(&self) -> &[f64] {
        &self.init.init_embedding().v
    }

    pub fn forward(&self) -> Result<Forward> {
        let offsets = self.mappers.texture.forward(&self.w_init);
        let w_tgt = self.w_init.add(&offsets);
        let texture = texture_tensor(self.gen, &w_tgt);
        let (psi_tgt, image) = match &self.frozen_frag {
            Some(frag) => (self.psi_init.clone(), shade(frag, &texture)),
            None => {
                let psi = self.psi_init.add(&self.mappers.expression.forward(&mean_levels(&w_tgt)));
                let image = self.renderer.render(&texture, &psi, &self.pose)?;
                (psi, image)
            }
        };
        let di = self.init.direction(self.backend, &image)?;
        let clip = directional_loss(&di, &self.dt);
        let reg = self.renderer.expression_prior(&psi_tgt);
        let total = clip.add(&reg.scale(self.cfg.lambda_reg));
        Ok(Forward {
            w_tgt,
            psi_tgt,
            texture,
            image,
            clip,
            reg,
            total,
        })
    }

    /// Evaluates the loss at the current mappers, then updates them.
    pub fn step(&mut self) -> Result<LossRecord> {
        let f = self.forward()?;
        let rec = LossRecord {
            iteration: self.iteration,
            clip: f.clip.item(),
            reg: f.reg.item(),
            total: f.total.item(),
        };
        if !(rec.total.is_finite() && rec.clip.is_finite() && rec.reg.is_finite()) {
            return Err(Error::NonFinite(format!("manipulation loss at iteration {}", self.iteration)));
        }
        let gt = grad(&f.total, &self.mappers.texture.net.ps.tensors(), false);
        let ge = (!self.cfg.freeze_expression).then(|| grad(&f.total, &self.mappers.expression.net.ps.tensors(), false));
        if !gt.iter().chain(ge.iter().flatten()).all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("manipulation gradient at iteration {}", self.iteration)));
        }
        self.opt_t.step(&mut self.mappers.texture.net.ps, &gt);
        if let Some(ge) = ge {
            self.opt_e.step(&mut self.mappers.expression.net.ps, &ge);
        }
        self.iteration += 1;
        Ok(rec)
    }

    /// Current edit as plain artifacts.
    pub fn snapshot(&self) -> Result<(LatentStack, Vec<f64>, UVTexture, RenderedImage, Mesh)> {
        let _g = no_grad();
        let f = self.forward()?;
        let r = self.gen.resolution();
        let psi = f.psi_tgt.to_vec();
        let frag = match &self.frozen_frag {
            Some(fr) => fr.clone(),
            None => self.renderer.fragments(&psi, &self.renderer.base.pose)?,
        };
        Ok((
            LatentStack::new(self.gen.levels(), f.w_tgt.to_vec())?,
            psi.clone(),
            UVTexture::new(r, f.texture.to_vec())?,
            to_image(&f.image, &frag),
            self.renderer.mesh(&psi, &self.renderer.base.pose)?,
        ))
    }

    pub fn run(mut self) -> Result<ManipulationResult> {
        let mut trace = Vec::with_capacity(self.cfg.iterations);
        for _ in 0..self.cfg.iterations {
            trace.push(self.step()?);
        }
        let (w_tgt, psi_tgt, texture, render, mesh) = self.snapshot()?;
        Ok(ManipulationResult {
            mappers: self.mappers,
            w_tgt,
            psi_tgt,
            texture,
            render,
            mesh,
            trace,
        })
    }
}

/// Runs a full edit with already pretrained mappers.
#[allow(clippy::too_many_arguments)]
pub fn manipulate(
    gen: &Generator,
    model: &MorphableModel,
    backend: &dyn EmbeddingBackend,
    w_init: &LatentStack,
    base: FaceParams,
    pair: &PromptPair,
    cfg: ManipulationConfig,
    mappers: Mappers,
) -> Result<ManipulationResult> {
    Manipulator::new(gen, model, backend, w_init, base, pair, cfg, mappers)?.run()
}

/// Neutral β/θ/ψ with the configured frontal camera.
pub fn frontal_params(model: &MorphableModel, cfg: &ManipulationConfig) -> FaceParams {
    FaceParams::neutral(model, cfg.camera)
}
