//! Differentiable image augmentation and patch cropping for the critics.

use crate::autodiff::{IndexMap, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_rotate: f64,
    /// Maximum absolute rotation in radians.
    pub max_rotate: f64,
    pub p_scale: f64,
    /// Standard deviation of the log2 scale factor.
    pub scale_std: f64,
    pub p_color: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Maximum absolute hue rotation in radians.
    pub hue: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_rotate: 0.2,
            max_rotate: 0.15,
            p_scale: 0.2,
            scale_std: 0.1,
            p_color: 0.5,
            brightness: 0.1,
            contrast: 0.2,
            hue: 0.1,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_scale: 0.0,
            p_color: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("p_rotate", self.p_rotate),
            ("p_scale", self.p_scale),
            ("p_color", self.p_color),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("augment.{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// Draws one set of transform parameters. The number of random draws is
    /// fixed, so streams stay aligned whatever the outcome.
    pub fn draw(&self, rng: &mut Rng) -> AugmentDraw {
        let mut coin = |p: f64| rng.random::<f64>() < p;
        let (flip, rot, scale, color) = (coin(self.p_flip), coin(self.p_rotate), coin(self.p_scale), coin(self.p_color));
        let u: [f64; 7] = rng.random();
        let sym = |x: f64| 2.0 * x - 1.0;
        let gauss = {
            // Box-Muller from the two uniforms reserved for the scale draw
            let r = (-2.0 * (1.0 - u[1]).ln()).sqrt();
            r * (2.0 * std::f64::consts::PI * u[2]).cos()
        };
        AugmentDraw {
            flip,
            rotate: if rot { sym(u[0]) * self.max_rotate } else { 0.0 },
            scale: if scale { 2f64.powf(gauss * self.scale_std) } else { 1.0 },
            brightness: if color { sym(u[3]) * self.brightness } else { 0.0 },
            contrast: if color { 1.0 + sym(u[4]) * self.contrast } else { 1.0 },
            hue: if color { sym(u[5]) * self.hue } else { 0.0 },
            saturation: if color { 1.0 + sym(u[6]) * self.saturation } else { 1.0 },
        }
    }
}

/// Concrete transform parameters; applying one draw to several images
/// transforms them identically.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotate: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
    pub saturation: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip: false,
            rotate: 0.0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            hue: 0.0,
            saturation: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Applies the transform to an `[H,W,3]` image tensor.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = (img.dim(0), img.dim(1));
        let mut x = self.geometric(img, h, w);
        let color = self.brightness != 0.0 || self.contrast != 1.0 || self.hue != 0.0 || self.saturation != 1.0;
        if color {
            x = x.add_scalar(self.brightness);
            let mean = x.mean();
            x = x.sub(&mean).scale(self.contrast).add(&mean);
            x = x.reshape(&[h * w, 3]).matmul(&Tensor::from_vec(self.color_matrix(), &[3, 3])).reshape(&[h, w, 3]);
        }
        x.clamp(0.0, 1.0)
    }

    fn geometric(&self, img: &Tensor, h: usize, w: usize) -> Tensor {
        if self.rotate == 0.0 && self.scale == 1.0 {
            if !self.flip {
                return img.clone();
            }
            let idx: Vec<i64> = (0..h)
                .flat_map(|y| (0..w).flat_map(move |x| (0..3).map(move |c| ((y * w + (w - 1 - x)) * 3 + c) as i64)))
                .collect();
            return img.take(&IndexMap::new(idx), &[h, w, 3]);
        }
        // inverse map each output pixel center, bilinear with zero outside
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (sn, cs) = self.rotate.sin_cos();
        let mut idx = Vec::with_capacity(h * w * 12);
        let mut wts = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let mut dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if self.flip {
                    dx = -dx;
                }
                let sx = (cs * dx + sn * dy) / self.scale + cx - 0.5;
                let sy = (-sn * dx + cs * dy) / self.scale + cy - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let taps = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1.0, y0, fx * (1.0 - fy)), (x0, y0 + 1.0, (1.0 - fx) * fy), (x0 + 1.0, y0 + 1.0, fx * fy)];
                for (tx, ty, tw) in taps {
                    let inside = tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64;
                    for c in 0..3 {
                        idx.push(if inside { ((ty as usize * w + tx as usize) * 3 + c) as i64 } else { -1 });
                    }
                    wts.push(tw);
                }
            }
        }
        let taps = img.take(&IndexMap::new(idx), &[h * w, 4, 3]);
        taps.mul(&Tensor::from_vec(wts, &[h * w, 4, 1])).sum_axis_keep(1).reshape(&[h, w, 3])
    }

    /// Right-multiplied 3×3 matrix for hue rotation about the gray axis then
    /// saturation scaling.
    fn color_matrix(&self) -> Vec<f64> {
        let k = 1.0 / 3f64.sqrt();
        let (s, c) = self.hue.sin_cos();
        let kx = [[0.0, -k, k], [k, 0.0, -k], [-k, k, 0.0]];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                let rot = c * eye + s * kx[i][j] + (1.0 - c) * k * k;
                // gray + sat * (rot - gray)
                m[i][j] = self.saturation * rot + (1.0 - self.saturation) / 3.0;
            }
        }
        // row vectors times matrix: out_j = sum_i x_i M[j][i]
        (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[j][i]).collect()
    }
}

/// Augments an `[H,W,3]` image with a fresh draw.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    cfg.draw(rng).apply(img)
}

fn coverage(mask: &[bool], w: usize, oy: usize, ox: usize, size: usize) -> f64 {
    let mut n = 0;
    for y in oy..oy + size {
        n += mask[y * w + ox..y * w + ox + size].iter().filter(|&&m| m).count();
    }
    n as f64 / (size * size) as f64
}

/// Top-left corners of `k` patches. With a mask, each patch is redrawn up to
/// eight times until at least half of it is covered; the best try is kept.
pub fn sample_patch_offsets(
    h: usize,
    w: usize,
    k: usize,
    size: usize,
    mask: Option<&[bool]>,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    assert!(size <= h.min(w), "patch larger than image");
    (0..k)
        .map(|_| {
            let mut draw = || (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
            match mask {
                None => draw(),
                Some(m) => {
                    let mut best = (draw(), -1.0);
                    for attempt in 0..8 {
                        let o = if attempt == 0 { best.0 } else { draw() };
                        let c = coverage(m, w, o.0, o.1, size);
                        if c > best.1 {
                            best = (o, c);
                        }
                        if c >= 0.5 {
                            break;
                        }
                    }
                    best.0
                }
            }
        })
        .collect()
}

/// Crops `[k, size, size, 3]` patches from an `[H,W,3]` image tensor.
pub fn extract_patches(img: &Tensor, offsets: &[(usize, usize)], size: usize) -> Tensor {
    let w = img.dim(1);
    let mut idx = Vec::with_capacity(offsets.len() * size * size * 3);
    for &(oy, ox) in offsets {
        for y in oy..oy + size {
            for x in ox..ox + size {
                for c in 0..3 {
                    idx.push(((y * w + x) * 3 + c) as i64);
                }
            }
        }
    }
    img.take(&IndexMap::new(idx), &[offsets.len(), size, size, 3])
}

/// Plain-value patch sampling of an `[H,W,3]` image.
pub fn sample_patches(
    img: &[f64],
    h: usize,
    w: usize,
    k: usize,
    size: usize,
    mask: Option<&[bool]>,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    let offsets = sample_patch_offsets(h, w, k, size, mask, rng);
    let t = Tensor::from_vec(img.to_vec(), &[h, w, 3]);
    let p = extract_patches(&t, &offsets, size);
    p.data().chunks(size * size * 3).map(<[f64]>::to_vec).collect()
}
