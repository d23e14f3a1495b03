use super::augment::{extract_patches, sample_patch_offsets};
use super::{Discriminator, Generator, GeneratorConfig, TrainingRecord, LATENT_DIM};
use crate::autodiff::{grad, no_grad, Tensor};
use crate::diffrender::{apply_mask, rasterize, shade, FragmentBuffer};
use crate::error::{Error, Result};
use crate::io::{read_png, ContainerReader, ContainerWriter};
use crate::morphable::{FaceParams, MorphableModel};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::rng::{self, normal_vec, Rng, RngState};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub d_loss: f64,
    pub d_patch_loss: f64,
    pub g_loss: f64,
    /// R1 penalty (unweighted) when evaluated this step, else 0.
    pub r1: f64,
    /// Path-length penalty (unweighted) when evaluated this step, else 0.
    pub pl: f64,
}

/// Masked real images and fake-geometry fragments, computed on first use.
#[derive(Default)]
pub struct PreparedData {
    reals: HashMap<PathBuf, (Tensor, Vec<bool>)>,
    frags: HashMap<usize, FragmentBuffer>,
}

impl PreparedData {
    fn real(&mut self, rec: &TrainingRecord, model: &MorphableModel, res: usize) -> Result<(Tensor, Vec<bool>)> {
        if let Some(hit) = self.reals.get(&rec.image) {
            return Ok(hit.clone());
        }
        let (img, h, w) = read_png(&rec.image)?;
        if h != res || w != res {
            return Err(Error::Validation(format!(
                "{} is {h}x{w}, expected {res}x{res}",
                rec.image.display()
            )));
        }
        let frag = rasterize(&model.decode(&rec.params)?, rec.params.camera3(), res, res)?.without_mouth();
        let masked = apply_mask(&img, &frag);
        let entry = (Tensor::from_vec(masked.rgb, &[res, res, 3]), masked.mask);
        self.reals.insert(rec.image.clone(), entry.clone());
        Ok(entry)
    }

    fn frag(&mut self, idx: usize, p: &FaceParams, model: &MorphableModel, res: usize) -> Result<&FragmentBuffer> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.frags.entry(idx) {
            let f = rasterize(&model.decode(p)?, p.camera3(), res, res)?.without_mouth();
            e.insert(f);
        }
        Ok(&self.frags[&idx])
    }
}

pub struct TrainState {
    pub cfg: GeneratorConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub patch_disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    opt_p: Adam,
    pub step: usize,
    pub pl_mean: f64,
    cache: PreparedData,
}

fn stack(images: &[Tensor]) -> Tensor {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        })
        .collect();
    Tensor::concat(&parts, 0)
}

fn mean_softplus(logits: &Tensor, sign: f64) -> Tensor {
    logits.scale(sign).softplus().mean()
}

fn check(value: &Tensor, what: &str, step: usize) -> Result<f64> {
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} at step {step}")));
    }
    Ok(v)
}

fn check_grads(grads: &[Tensor], what: &str, step: usize) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} gradient at step {step}")))
    }
}

/// Mean over the batch of `‖∂ Σ D(x) / ∂x‖²` for `[B,H,W,3]` inputs.
pub fn r1_penalty(disc: &Discriminator, images: &Tensor, create_graph: bool) -> Tensor {
    let x = Tensor::param(images.to_vec(), images.shape());
    let logits = disc.forward(&x);
    let g = grad(&logits.sum(), &[&x], true).remove(0);
    let p = g.square().sum().scale(1.0 / images.dim(0) as f64);
    if create_graph {
        p
    } else {
        p.detach()
    }
}

fn params_of(ps: &ParamSet) -> Vec<&Tensor> {
    ps.tensors()
}

fn add_grads(a: Vec<Tensor>, b: Vec<Tensor>) -> Vec<Tensor> {
    a.into_iter().zip(b).map(|(x, y)| x.add(&y)).collect()
}

impl TrainState {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(&cfg, &mut rng::stream(seed, "init-generator"));
        let disc = Discriminator::new(cfg.render_resolution, |r| cfg.disc_channels(r), "disc", &mut rng::stream(seed, "init-disc"));
        // patch critic layers see the same pixel scale as the full critic's
        let zoom = cfg.render_resolution / cfg.patch_size;
        let patch_disc = Discriminator::new(cfg.patch_size, |r| cfg.disc_channels(r * zoom), "patch", &mut rng::stream(seed, "init-patch"));
        let lr = cfg.learning_rate;
        Ok(Self {
            opt_g: Adam::new(&gen.ps, lr, 0.0, 0.99),
            opt_d: Adam::new(&disc.ps, lr, 0.0, 0.99),
            opt_p: Adam::new(&patch_disc.ps, lr, 0.0, 0.99),
            cfg,
            gen,
            disc,
            patch_disc,
            step: 0,
            pl_mean: 0.0,
            cache: PreparedData::default(),
        })
    }

    /// Renders a `[B,R,R,3]` texture batch on randomly drawn training geometries.
    fn render_fakes(
        &mut self,
        textures: &Tensor,
        model: &MorphableModel,
        geometry: &[FaceParams],
        rng: &mut Rng,
    ) -> Result<(Vec<Tensor>, Vec<Vec<bool>>)> {
        let (b, r) = (textures.dim(0), textures.dim(1));
        let res = self.cfg.render_resolution;
        let mut imgs = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for i in 0..b {
            // uniform draw over the geometry set
            let gi = rng.random_range(0..geometry.len());
            let frag = self.cache.frag(gi, &geometry[gi], model, res)?;
            let tex = textures.narrow(0, i, 1).reshape(&[r, r, 3]);
            imgs.push(shade(frag, &tex));
            masks.push(frag.coverage.clone());
        }
        Ok((imgs, masks))
    }

    fn augment_all(&self, imgs: &[Tensor], rng: &mut Rng) -> Vec<Tensor> {
        imgs.iter().map(|t| self.cfg.augment.draw(rng).apply(t)).collect()
    }

    fn patches(&self, imgs: &[Tensor], masks: &[Vec<bool>], rng: &mut Rng) -> Tensor {
        let res = self.cfg.render_resolution;
        let size = self.cfg.patch_size;
        let parts: Vec<Tensor> = imgs
            .iter()
            .zip(masks)
            .map(|(img, m)| {
                let offs = sample_patch_offsets(res, res, self.cfg.patches_per_image, size, Some(m), rng);
                extract_patches(img, &offs, size)
            })
            .collect();
        Tensor::concat(&parts, 0)
    }

    fn latents(&self, b: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(normal_vec(rng, b * LATENT_DIM), &[b, LATENT_DIM])
    }

    fn broadcast_levels(&self, w: &Tensor) -> Tensor {
        let b = w.dim(0);
        let l = self.gen.levels();
        w.reshape(&[b, 1, LATENT_DIM]).broadcast_to(&[b, l, LATENT_DIM])
    }

    /// One alternating critic / generator update on `batch`, with fakes
    /// rendered on geometries drawn uniformly from `geometry`.
    pub fn train_step(
        &mut self,
        model: &MorphableModel,
        batch: &[TrainingRecord],
        geometry: &[FaceParams],
        rng: &mut Rng,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if geometry.is_empty() {
            return Err(Error::Empty("geometry distribution"));
        }
        for rec in batch.iter().map(|r| &r.params).chain(geometry) {
            rec.validate(model)?;
        }
        let res = self.cfg.render_resolution;
        let mut reals = Vec::with_capacity(batch.len());
        let mut real_masks = Vec::with_capacity(batch.len());
        for rec in batch {
            let (t, m) = self.cache.real(rec, model, res)?;
            reals.push(t);
            real_masks.push(m);
        }
        let b = batch.len();
        let step = self.step;
        let use_patch = self.cfg.use_patch_discriminator;
        let mut metrics = StepMetrics {
            step,
            ..Default::default()
        };

        // critic update
        let z = self.latents(b, rng);
        let textures = {
            let _g = no_grad();
            self.gen.synthesize(&self.broadcast_levels(&self.gen.map(&z)))
        };
        let (fakes, fake_masks) = self.render_fakes(&textures, model, geometry, rng)?;
        let real_aug = self.augment_all(&reals, rng);
        let fake_aug = self.augment_all(&fakes, rng);
        let real_batch = stack(&real_aug);
        let fake_batch = stack(&fake_aug);
        let d_loss = mean_softplus(&self.disc.forward(&fake_batch), 1.0)
            .add(&mean_softplus(&self.disc.forward(&real_batch), -1.0));
        metrics.d_loss = check(&d_loss, "critic loss", step)?;
        let mut d_grads = grad(&d_loss, &params_of(&self.disc.ps), false);

        let mut p_grads = None;
        let mut real_patches = None;
        if use_patch {
            let rp = self.patches(&real_aug, &real_masks, rng);
            let fp = self.patches(&fake_aug, &fake_masks, rng);
            let p_loss = mean_softplus(&self.patch_disc.forward(&fp), 1.0)
                .add(&mean_softplus(&self.patch_disc.forward(&rp), -1.0));
            metrics.d_patch_loss = check(&p_loss, "patch critic loss", step)?;
            p_grads = Some(grad(&p_loss, &params_of(&self.patch_disc.ps), false));
            real_patches = Some(rp);
        }

        if self.cfg.r1_weight > 0.0 && step.is_multiple_of(self.cfg.r1_interval) {
            let scale = 0.5 * self.cfg.r1_weight * self.cfg.r1_interval as f64;
            let r1 = r1_penalty(&self.disc, &real_batch.detach(), true);
            metrics.r1 = check(&r1, "R1 penalty", step)?;
            d_grads = add_grads(d_grads, grad(&r1.scale(scale), &params_of(&self.disc.ps), false));
            if let (Some(pg), Some(rp)) = (p_grads.take(), &real_patches) {
                let r1p = r1_penalty(&self.patch_disc, &rp.detach(), true);
                check(&r1p, "patch R1 penalty", step)?;
                p_grads = Some(add_grads(pg, grad(&r1p.scale(scale), &params_of(&self.patch_disc.ps), false)));
            }
        }
        check_grads(&d_grads, "critic", step)?;
        if let Some(pg) = &p_grads {
            check_grads(pg, "patch critic", step)?;
        }
        self.opt_d.step(&mut self.disc.ps, &d_grads);
        if let Some(pg) = p_grads {
            self.opt_p.step(&mut self.patch_disc.ps, &pg);
        }

        // generator update
        let z = self.latents(b, rng);
        let textures = self.gen.synthesize(&self.broadcast_levels(&self.gen.map(&z)));
        let (fakes, fake_masks) = self.render_fakes(&textures, model, geometry, rng)?;
        let fake_aug = self.augment_all(&fakes, rng);
        let mut g_loss = mean_softplus(&self.disc.forward(&stack(&fake_aug)), -1.0);
        if use_patch {
            let fp = self.patches(&fake_aug, &fake_masks, rng);
            g_loss = g_loss.add(&mean_softplus(&self.patch_disc.forward(&fp), -1.0));
        }
        metrics.g_loss = check(&g_loss, "generator loss", step)?;
        let g_grads = grad(&g_loss, &params_of(&self.gen.ps), false);
        check_grads(&g_grads, "generator", step)?;
        self.opt_g.step(&mut self.gen.ps, &g_grads);

        if self.cfg.pl_weight > 0.0 && step.is_multiple_of(self.cfg.pl_interval) {
            let pb = (b / 2).max(1);
            let z = self.latents(pb, rng);
            let ws = self.broadcast_levels(&self.gen.map(&z));
            let img = self.gen.synthesize(&ws);
            let r = self.gen.resolution();
            let noise = Tensor::from_vec(normal_vec(rng, img.numel()), img.shape()).scale(1.0 / r as f64);
            let gw = grad(&img.mul(&noise).sum(), &[&ws], true).remove(0);
            let lengths = gw
                .square()
                .sum_axis_keep(2)
                .sum_axis_keep(1)
                .scale(1.0 / self.gen.levels() as f64)
                .add_scalar(1e-12)
                .sqrt();
            let mean_len = lengths.data().iter().sum::<f64>() / pb as f64;
            let target = self.pl_mean + self.cfg.pl_decay * (mean_len - self.pl_mean);
            let pl = lengths.add_scalar(-target).square().mean();
            metrics.pl = check(&pl, "path-length penalty", step)?;
            let scaled = pl.scale(self.cfg.pl_weight * self.cfg.pl_interval as f64);
            let pl_grads = grad(&scaled, &params_of(&self.gen.ps), false);
            check_grads(&pl_grads, "path-length", step)?;
            self.pl_mean = target;
            self.opt_g.step(&mut self.gen.ps, &pl_grads);
        }

        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub config_hash: String,
    pub seed: u64,
    pub rng: RngState,
    pub pl_mean: f64,
    pub config: GeneratorConfig,
}

pub fn save_checkpoint(state: &TrainState, path: &Path, config_hash: &str, seed: u64, rng: &Rng) -> Result<()> {
    let manifest = CheckpointManifest {
        step: state.step,
        config_hash: config_hash.to_string(),
        seed,
        rng: RngState::capture(rng),
        pl_mean: state.pl_mean,
        config: state.cfg.clone(),
    };
    let mut w = ContainerWriter::create(path)?;
    w.json("manifest.json", &serde_json::to_value(&manifest)?)?;
    state.gen.ps.save(&mut w, "generator")?;
    state.disc.ps.save(&mut w, "disc")?;
    state.patch_disc.ps.save(&mut w, "patch")?;
    state.opt_g.save(&mut w, "adam_generator")?;
    state.opt_d.save(&mut w, "adam_disc")?;
    state.opt_p.save(&mut w, "adam_patch")?;
    w.finish()
}

/// Restores a training state plus its manifest (seed, rng position, hash).
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let r = ContainerReader::open(path)?;
    let manifest: CheckpointManifest =
        serde_json::from_value(r.json("manifest.json")?).map_err(|e| Error::load("manifest.json", e.to_string()))?;
    let mut state = TrainState::new(manifest.config.clone(), manifest.seed)?;
    state.gen.ps.load(&r, "generator")?;
    state.disc.ps.load(&r, "disc")?;
    state.patch_disc.ps.load(&r, "patch")?;
    state.opt_g.load(&r, "adam_generator")?;
    state.opt_d.load(&r, "adam_disc")?;
    state.opt_p.load(&r, "adam_patch")?;
    state.step = manifest.step;
    state.pl_mean = manifest.pl_mean;
    Ok((state, manifest))
}
