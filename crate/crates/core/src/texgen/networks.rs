use super::{GeneratorConfig, LATENT_DIM};
use crate::autodiff::Tensor;
use crate::nn::{avg_pool2, lrelu, upsample2x, Conv, Dense, ParamSet};
use crate::rng::{normal_vec, Rng};

fn log2(x: usize) -> usize {
    x.trailing_zeros() as usize
}

/// One modulated 3×3 (or 1×1) convolution with its style affine.
#[derive(Clone, Debug)]
struct StyleLayer {
    affine: Dense,
    conv: Conv,
    demodulate: bool,
    upsample: bool,
    /// index of the per-layer noise strength, with the frozen noise image
    noise: Option<(usize, Tensor)>,
    level: usize,
}

impl StyleLayer {
    fn forward(&self, ps: &ParamSet, x: &Tensor, w: &Tensor) -> Tensor {
        let b = x.dim(0);
        let x = if self.upsample { upsample2x(x) } else { x.clone() };
        let s = self.affine.forward(ps, w);
        let cin = self.conv.cin;
        let weight = self.conv.weight(ps);
        let xs = x.mul(&s.reshape(&[b, 1, 1, cin]));
        let mut y = self.conv.apply(&xs, &weight, 1);
        if self.demodulate {
            let kk = self.conv.k * self.conv.k;
            let wsq = weight
                .reshape(&[kk, cin * self.conv.cout])
                .square()
                .sum_axis_keep(0)
                .reshape(&[cin, self.conv.cout]);
            let d = s.square().matmul(&wsq).add_scalar(1e-8).powf(-0.5);
            y = y.mul(&d.reshape(&[b, 1, 1, self.conv.cout]));
        }
        if let Some((strength, noise)) = &self.noise {
            y = y.add(&noise.mul(ps.get(*strength)));
        }
        if let Some(bias) = self.conv.bias(ps) {
            y = y.add(&bias);
        }
        if self.demodulate {
            lrelu(&y)
        } else {
            y
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn style_layer(
    ps: &mut ParamSet,
    name: String,
    level: usize,
    res: usize,
    cin: usize,
    cout: usize,
    k: usize,
    upsample: bool,
    rgb: bool,
    rng: &mut Rng,
) -> StyleLayer {
    let affine = Dense::new(ps, &format!("{name}.affine"), LATENT_DIM, cin, 1.0, 1.0, rng);
    let conv = Conv::new(ps, &name, k, cin, cout, true, rng);
    let noise = (!rgb).then(|| {
        let s = ps.add(format!("{name}.noise_strength"), vec![0.0], &[1]);
        (s, Tensor::from_vec(normal_vec(rng, res * res), &[1, res, res, 1]))
    });
    StyleLayer {
        affine,
        conv,
        demodulate: !rgb,
        upsample,
        noise,
        level,
    }
}

/// Style-based synthesis network with skip-connected RGB outputs.
#[derive(Clone)]
pub struct Generator {
    pub ps: ParamSet,
    mapping: Vec<Dense>,
    constant: usize,
    convs: Vec<StyleLayer>,
    to_rgb: Vec<StyleLayer>,
    resolution: usize,
    levels: usize,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Self {
        let mut ps = ParamSet::new();
        let mapping = (0..cfg.mapping_layers)
            .map(|i| Dense::new(&mut ps, &format!("mapping.{i}"), LATENT_DIM, LATENT_DIM, cfg.mapping_lr_mult, 0.0, rng))
            .collect();
        let ch = |res: usize| cfg.channels(res);
        let constant = ps.add("synthesis.const", normal_vec(rng, 16 * ch(4)), &[1, 4, 4, ch(4)]);
        let mut convs = Vec::new();
        let mut to_rgb = Vec::new();
        convs.push(style_layer(&mut ps, "synthesis.b4.conv".into(), 0, 4, ch(4), ch(4), 3, false, false, rng));
        to_rgb.push(style_layer(&mut ps, "synthesis.b4.torgb".into(), 1, 4, ch(4), 3, 1, false, true, rng));
        for i in 1..=log2(cfg.resolution) - 2 {
            let res = 4 << i;
            let (cin, cout) = (ch(res / 2), ch(res));
            convs.push(style_layer(&mut ps, format!("synthesis.b{res}.conv0"), 2 * i - 1, res, cin, cout, 3, true, false, rng));
            convs.push(style_layer(&mut ps, format!("synthesis.b{res}.conv1"), 2 * i, res, cout, cout, 3, false, false, rng));
            to_rgb.push(style_layer(&mut ps, format!("synthesis.b{res}.torgb"), 2 * i + 1, res, cout, 3, 1, false, true, rng));
        }
        Self {
            ps,
            mapping,
            constant,
            convs,
            to_rgb,
            resolution: cfg.resolution,
            levels: cfg.levels(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `[B,512]` latents to `[B,512]` intermediate codes.
    pub fn map(&self, z: &Tensor) -> Tensor {
        let inv_rms = z.square().sum_axis_keep(1).scale(1.0 / z.dim(1) as f64).add_scalar(1e-8).powf(-0.5);
        let mut x = z.mul(&inv_rms);
        for layer in &self.mapping {
            x = lrelu(&layer.forward(&self.ps, &x));
        }
        x
    }

    /// `[B,L,512]` style stack to `[B,R,R,3]` textures in (0,1).
    pub fn synthesize(&self, ws: &Tensor) -> Tensor {
        let b = ws.dim(0);
        assert_eq!(ws.dim(1), self.levels, "latent level count");
        let level = |l: usize| ws.narrow(1, l, 1).reshape(&[b, LATENT_DIM]);
        let c4 = self.ps.get(self.constant);
        let mut x = c4.broadcast_to(&[b, 4, 4, c4.dim(3)]);
        x = self.convs[0].forward(&self.ps, &x, &level(self.convs[0].level));
        let mut rgb = self.to_rgb[0].forward(&self.ps, &x, &level(self.to_rgb[0].level));
        for (i, pair) in self.convs[1..].chunks(2).enumerate() {
            for layer in pair {
                x = layer.forward(&self.ps, &x, &level(layer.level));
            }
            let t = &self.to_rgb[i + 1];
            rgb = upsample2x(&rgb).add(&t.forward(&self.ps, &x, &level(t.level)));
        }
        rgb.sigmoid()
    }
}

/// Residual convolutional critic on NHWC images of one fixed resolution.
#[derive(Clone)]
pub struct Discriminator {
    pub ps: ParamSet,
    from_rgb: Conv,
    blocks: Vec<(Conv, Conv, Conv)>,
    final_conv: Conv,
    fc: Dense,
    out: Dense,
    resolution: usize,
}

impl Discriminator {
    pub fn new(resolution: usize, channels: impl Fn(usize) -> usize, name: &str, rng: &mut Rng) -> Self {
        let mut ps = ParamSet::new();
        let from_rgb = Conv::new(&mut ps, &format!("{name}.fromrgb"), 1, 3, channels(resolution), true, rng);
        let mut blocks = Vec::new();
        let mut res = resolution;
        while res > 4 {
            let (c, c2) = (channels(res), channels(res / 2));
            let a = Conv::new(&mut ps, &format!("{name}.b{res}.conv0"), 3, c, c, true, rng);
            let b = Conv::new(&mut ps, &format!("{name}.b{res}.conv1"), 3, c, c2, true, rng);
            let skip = Conv::new(&mut ps, &format!("{name}.b{res}.skip"), 1, c, c2, false, rng);
            blocks.push((a, b, skip));
            res /= 2;
        }
        let c4 = channels(4);
        let final_conv = Conv::new(&mut ps, &format!("{name}.b4.conv"), 3, c4, c4, true, rng);
        let fc = Dense::new(&mut ps, &format!("{name}.b4.fc"), 16 * c4, c4, 1.0, 0.0, rng);
        let out = Dense::new(&mut ps, &format!("{name}.b4.out"), c4, 1, 1.0, 0.0, rng);
        Self {
            ps,
            from_rgb,
            blocks,
            final_conv,
            fc,
            out,
            resolution,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Logits `[B]` for `[B,R,R,3]` images.
    pub fn forward(&self, img: &Tensor) -> Tensor {
        let b = img.dim(0);
        assert_eq!(img.dim(1), self.resolution, "discriminator input resolution");
        let mut x = lrelu(&self.from_rgb.forward(&self.ps, img, 1));
        for (a, c, skip) in &self.blocks {
            let y = lrelu(&a.forward(&self.ps, &x, 1));
            let y = avg_pool2(&lrelu(&c.forward(&self.ps, &y, 1)));
            let s = skip.forward(&self.ps, &avg_pool2(&x), 1);
            x = y.add(&s).scale(std::f64::consts::FRAC_1_SQRT_2);
        }
        let x = lrelu(&self.final_conv.forward(&self.ps, &x, 1));
        let x = lrelu(&self.fc.forward(&self.ps, &x.reshape(&[b, x.numel() / b])));
        self.out.forward(&self.ps, &x).reshape(&[b])
    }

    /// Zeroes the output layer so the critic is a constant function.
    pub fn freeze_constant_head(&mut self) {
        let n = self.ps.len();
        for i in [n - 2, n - 1] {
            let len = self.ps.get(i).numel();
            self.ps.set(i, vec![0.0; len]);
        }
    }
}
