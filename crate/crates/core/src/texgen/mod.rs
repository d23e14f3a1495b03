//! Style-based UV texture generator trained through the renderer against
//! masked real photographs, with a full-image and a patch critic.

mod augment;
mod dataset;
mod networks;
mod train;

pub use augment::{augment, extract_patches, sample_patch_offsets, sample_patches, AugmentConfig, AugmentDraw};
pub use dataset::{ingest_dataset, make_synthetic_dataset, procedural_texture, TrainingRecord};
pub use networks::{Discriminator, Generator};
pub use train::{load_checkpoint, r1_penalty, save_checkpoint, PreparedData, StepMetrics, TrainState};

pub use crate::diffrender::UVTexture;

use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use serde::{Deserialize, Serialize};

pub const LATENT_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Texture resolution R.
    pub resolution: usize,
    /// Render (and discriminator) resolution.
    pub render_resolution: usize,
    pub channel_base: usize,
    pub channel_max: usize,
    pub disc_channel_base: usize,
    pub disc_channel_max: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mult: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub r1_weight: f64,
    pub r1_interval: usize,
    pub pl_weight: f64,
    pub pl_interval: usize,
    pub pl_decay: f64,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub use_patch_discriminator: bool,
    pub augment: AugmentConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 512,
            render_resolution: 512,
            channel_base: 32768,
            channel_max: 512,
            disc_channel_base: 32768,
            disc_channel_max: 512,
            mapping_layers: 8,
            mapping_lr_mult: 0.01,
            learning_rate: 2e-3,
            batch_size: 8,
            r1_weight: 10.0,
            r1_interval: 16,
            pl_weight: 2.0,
            pl_interval: 8,
            pl_decay: 0.01,
            patch_size: 64,
            patches_per_image: 4,
            use_patch_discriminator: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// CPU-sized preset: 64² textures and renders, thin layers.
    pub fn toy() -> Self {
        Self {
            resolution: 64,
            render_resolution: 64,
            channel_base: 512,
            channel_max: 32,
            disc_channel_base: 512,
            disc_channel_max: 32,
            mapping_layers: 4,
            patch_size: 32,
            ..Self::default()
        }
    }

    /// Number of style levels, `2 log2 R - 2`.
    pub fn levels(&self) -> usize {
        2 * self.resolution.trailing_zeros() as usize - 2
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    pub fn disc_channels(&self, res: usize) -> usize {
        (self.disc_channel_base / res).clamp(1, self.disc_channel_max)
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |x: usize| x.is_power_of_two();
        if !pow2(self.resolution) || self.resolution < 16 {
            return Err(Error::Validation(format!("texture resolution {} must be a power of two >= 16", self.resolution)));
        }
        if !pow2(self.render_resolution) || self.render_resolution < 8 {
            return Err(Error::Validation(format!(
                "render resolution {} must be a power of two >= 8",
                self.render_resolution
            )));
        }
        if !pow2(self.patch_size) || self.patch_size < 8 || self.patch_size > self.render_resolution {
            return Err(Error::Validation(format!(
                "patch size {} must be a power of two in [8, {}]",
                self.patch_size, self.render_resolution
            )));
        }
        if self.batch_size == 0 || self.r1_interval == 0 || self.pl_interval == 0 || self.mapping_layers == 0 {
            return Err(Error::Validation("batch size, intervals and mapping depth must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.r1_weight >= 0.0) || !(self.pl_weight >= 0.0) {
            return Err(Error::Validation("learning rate and penalty weights must be non-negative".into()));
        }
        self.augment.validate()
    }
}

/// Per-level style codes `[L × 512]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStack {
    pub levels: usize,
    pub w: Vec<f64>,
}

impl LatentStack {
    pub fn new(levels: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != levels * LATENT_DIM {
            return Err(Error::dim("latent stack", levels * LATENT_DIM, w.len()));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent stack".into()));
        }
        Ok(Self { levels, w })
    }

    pub fn broadcast(levels: usize, w: &[f64]) -> Self {
        assert_eq!(w.len(), LATENT_DIM);
        Self {
            levels,
            w: (0..levels).flat_map(|_| w.iter().copied()).collect(),
        }
    }

    pub fn level(&self, l: usize) -> &[f64] {
        &self.w[l * LATENT_DIM..(l + 1) * LATENT_DIM]
    }

    /// `[L, 512]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.w.clone(), &[self.levels, LATENT_DIM])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            levels: t.dim(0),
            w: t.to_vec(),
        }
    }
}

pub fn sample_z(rng: &mut Rng) -> Vec<f64> {
    normal_vec(rng, LATENT_DIM)
}

/// Maps `z` through the mapping network and repeats the code on every level.
pub fn map_latent(gen: &Generator, z: &[f64]) -> Result<LatentStack> {
    if z.len() != LATENT_DIM {
        return Err(Error::dim("z", LATENT_DIM, z.len()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("z".into()));
    }
    let _g = no_grad();
    let w = gen.map(&Tensor::from_vec(z.to_vec(), &[1, LATENT_DIM]));
    Ok(LatentStack::broadcast(gen.levels(), w.data()))
}

pub fn synthesize(gen: &Generator, w: &LatentStack) -> Result<UVTexture> {
    if w.levels != gen.levels() {
        return Err(Error::dim("latent levels", gen.levels(), w.levels));
    }
    let _g = no_grad();
    let r = gen.resolution();
    let t = gen.synthesize(&w.to_tensor().reshape(&[1, w.levels, LATENT_DIM]));
    UVTexture::new(r, t.to_vec())
}

/// Draws `n` codes, synthesizes their textures and renders each on a geometry
/// drawn from `geometry`.
pub fn sample_renders(
    gen: &Generator,
    model: &crate::morphable::MorphableModel,
    geometry: &[crate::morphable::FaceParams],
    n: usize,
    render_resolution: usize,
    rng: &mut Rng,
) -> Result<Vec<(UVTexture, crate::diffrender::RenderedImage)>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let tex = synthesize(gen, &map_latent(gen, &sample_z(rng))?)?;
        let p = crate::morphable::sample_geometry(geometry, rng)?;
        let frag = crate::diffrender::rasterize(&model.decode(p)?, p.camera3(), render_resolution, render_resolution)?;
        let img = crate::diffrender::shade_image(&frag, &tex);
        out.push((tex, img));
    }
    Ok(out)
}
