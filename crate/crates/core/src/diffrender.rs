//! Orthographic rasterizer with differentiable texture and barycentric paths.
//!
//! Screen convention: `x_ndc = s (X + tx)`, `y_ndc = s (Y + ty)`, pixel
//! `px = (x_ndc + 1) W / 2`, `py = (1 - y_ndc) H / 2`, pixel centers at
//! half-integers. The camera looks down -Z; larger Z is nearer.
//! Texel `(i, j)` of an `R×R` texture has its center at
//! `u = (j + 0.5) / R`, `v = 1 - (i + 0.5) / R` (row 0 is the top of the atlas).

use crate::autodiff::{IndexMap, Tensor};
use crate::error::{Error, Result};
use crate::morphable::{FaceParams, Mesh, MorphableModel, Topology};

/// Square RGB texture, row-major `[R×R×3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UVTexture {
    pub res: usize,
    pub rgb: Vec<f64>,
}

impl UVTexture {
    pub fn new(res: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != res * res * 3 {
            return Err(Error::dim("texture", res * res * 3, rgb.len()));
        }
        Ok(Self { res, rgb })
    }

    pub fn constant(res: usize, color: [f64; 3]) -> Self {
        Self {
            res,
            rgb: (0..res * res).flat_map(|_| color).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.rgb.clone(), &[self.res, self.res, 3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FragmentBuffer {
    pub height: usize,
    pub width: usize,
    /// -1 for background.
    pub face_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub coverage: Vec<bool>,
    topology: Option<std::sync::Arc<Topology>>,
}

impl FragmentBuffer {
    fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            face_id: vec![-1; n],
            bary: vec![[0.0; 3]; n],
            uv: vec![[0.0; 2]; n],
            coverage: vec![false; n],
            topology: None,
        }
    }

    /// Covered pixels as `(pixel index, face)`, in raster order.
    pub fn covered(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.face_id
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= 0)
            .map(|(p, &f)| (p, f as usize))
    }

    /// Same buffer with mouth-interior pixels turned into background.
    pub fn without_mouth(&self) -> Self {
        let mut out = self.clone();
        if let Some(topo) = &self.topology {
            for p in 0..out.face_id.len() {
                let f = out.face_id[p];
                if f >= 0 && topo.is_mouth(f as usize) {
                    out.face_id[p] = -1;
                    out.bary[p] = [0.0; 3];
                    out.uv[p] = [0.0; 2];
                    out.coverage[p] = false;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Screen-space `(px, py, depth)` per vertex.
pub fn project(vertices: &[[f64; 3]], camera: [f64; 3], height: usize, width: usize) -> Vec<[f64; 3]> {
    let [s, tx, ty] = camera;
    vertices
        .iter()
        .map(|v| {
            let x = s * (v[0] + tx);
            let y = s * (v[1] + ty);
            [(x + 1.0) * 0.5 * width as f64, (1.0 - y) * 0.5 * height as f64, v[2]]
        })
        .collect()
}

/// Differentiable counterpart of [`project`] for `[n,3]` vertices; returns `[n,2]`.
pub fn project_tensor(vertices: &Tensor, camera: [f64; 3], height: usize, width: usize) -> Tensor {
    let n = vertices.dim(0);
    let [s, tx, ty] = camera;
    let xy = vertices.narrow(1, 0, 2).add(&Tensor::from_vec(vec![tx, ty], &[1, 2]));
    let a = Tensor::from_vec(vec![0.5 * width as f64 * s, -0.5 * height as f64 * s], &[1, 2]);
    let b = Tensor::from_vec(vec![0.5 * width as f64, 0.5 * height as f64], &[1, 2]);
    let out = xy.mul(&a).add(&b);
    debug_assert_eq!(out.shape(), &[n, 2]);
    out
}

fn edge(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

fn top_left(a: [f64; 3], b: [f64; 3]) -> bool {
    let dy = b[1] - a[1];
    let dx = b[0] - a[0];
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// Rasterizes screen-space vertices. Both windings are drawn.
pub fn rasterize_screen(screen: &[[f64; 3]], topology: &std::sync::Arc<Topology>, height: usize, width: usize) -> FragmentBuffer {
    let mut buf = FragmentBuffer::empty(height, width);
    buf.topology = Some(std::sync::Arc::clone(topology));
    let mut depth = vec![f64::NEG_INFINITY; height * width];
    for (fi, f) in topology.faces.iter().enumerate() {
        let mut v = [screen[f[0] as usize], screen[f[1] as usize], screen[f[2] as usize]];
        let mut order = [0usize, 1, 2];
        let mut area = edge(v[0], v[1], v[2][0], v[2][1]);
        if !(area.abs() > 0.0) || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            v.swap(1, 2);
            order.swap(1, 2);
            area = -area;
        }
        let xmin = v.iter().map(|p| p[0]).fold(f64::MAX, f64::min);
        let xmax = v.iter().map(|p| p[0]).fold(f64::MIN, f64::max);
        let ymin = v.iter().map(|p| p[1]).fold(f64::MAX, f64::min);
        let ymax = v.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
        // pixel x covers center x + 0.5
        let x0 = ((xmin - 0.5).ceil().max(0.0)) as usize;
        let x1 = (xmax - 0.5).floor().min(width as f64 - 1.0);
        let y0 = ((ymin - 0.5).ceil().max(0.0)) as usize;
        let y1 = (ymax - 0.5).floor().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let tl = [top_left(v[1], v[2]), top_left(v[2], v[0]), top_left(v[0], v[1])];
        for py in y0..=y1 {
            let cy = py as f64 + 0.5;
            for px in x0..=x1 {
                let cx = px as f64 + 0.5;
                let e = [edge(v[1], v[2], cx, cy), edge(v[2], v[0], cx, cy), edge(v[0], v[1], cx, cy)];
                if !(0..3).all(|k| e[k] > 0.0 || (e[k] == 0.0 && tl[k])) {
                    continue;
                }
                let b = [e[0] / area, e[1] / area, e[2] / area];
                let z = b[0] * v[0][2] + b[1] * v[1][2] + b[2] * v[2][2];
                let p = py * width + px;
                if z > depth[p] {
                    depth[p] = z;
                    let mut bary = [0.0; 3];
                    for k in 0..3 {
                        bary[order[k]] = b[k];
                    }
                    let uvs = &topology.uv[fi];
                    buf.face_id[p] = fi as i32;
                    buf.bary[p] = bary;
                    buf.uv[p] = [
                        bary[0] * uvs[0][0] + bary[1] * uvs[1][0] + bary[2] * uvs[2][0],
                        bary[0] * uvs[0][1] + bary[1] * uvs[1][1] + bary[2] * uvs[2][1],
                    ];
                    buf.coverage[p] = true;
                }
            }
        }
    }
    buf
}

fn check_target(camera: [f64; 3], height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 {
        return Err(Error::Validation(format!("render resolution {height}x{width} is below 8x8")));
    }
    if !(camera[0] > 0.0) || camera.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation(format!("camera scale must be positive and finite, got {camera:?}")));
    }
    Ok(())
}

pub fn rasterize(mesh: &Mesh, camera: [f64; 3], height: usize, width: usize) -> Result<FragmentBuffer> {
    check_target(camera, height, width)?;
    let screen = project(&mesh.vertices, camera, height, width);
    Ok(rasterize_screen(&screen, &mesh.topology, height, width))
}

/// Bilinear taps and weights for texture coordinate `uv`, clamp-to-edge.
fn taps(uv: [f64; 2], res: usize) -> ([usize; 4], [f64; 2]) {
    let x = uv[0] * res as f64 - 0.5;
    let y = (1.0 - uv[1]) * res as f64 - 0.5;
    let (xf, yf) = (x.floor(), y.floor());
    let clampi = |i: f64| i.clamp(0.0, res as f64 - 1.0) as usize;
    let (x0, x1, y0, y1) = (clampi(xf), clampi(xf + 1.0), clampi(yf), clampi(yf + 1.0));
    ([y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1], [x - xf, y - yf])
}

fn bilinear_weights(f: [f64; 2]) -> [f64; 4] {
    let [fx, fy] = f;
    [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
}

/// Gather indices for `[P,4,3]` texel taps of every covered pixel.
fn tap_index(frag: &FragmentBuffer, res: usize) -> (IndexMap, Vec<[f64; 2]>) {
    let mut idx = Vec::new();
    let mut fracs = Vec::new();
    for (p, _) in frag.covered() {
        let (t, f) = taps(frag.uv[p], res);
        for texel in t {
            for c in 0..3 {
                idx.push((texel * 3 + c) as i64);
            }
        }
        fracs.push(f);
    }
    (IndexMap::new(idx), fracs)
}

fn scatter_pixels(frag: &FragmentBuffer, colors: &Tensor) -> Tensor {
    let idx: Vec<i64> = frag
        .covered()
        .flat_map(|(p, _)| (0..3).map(move |c| (p * 3 + c) as i64))
        .collect();
    let n = frag.covered().count();
    colors
        .reshape(&[n * 3])
        .scatter_add(&IndexMap::new(idx), &[frag.height * frag.width * 3])
        .reshape(&[frag.height, frag.width, 3])
}

/// Renders `[H,W,3]`, differentiable in the `[R,R,3]` texture (exact bilinear adjoint).
pub fn shade(frag: &FragmentBuffer, texture: &Tensor) -> Tensor {
    let res = texture.dim(0);
    let n = frag.covered().count();
    if n == 0 {
        return Tensor::zeros(&[frag.height, frag.width, 3]);
    }
    let (idx, fracs) = tap_index(frag, res);
    let w: Vec<f64> = fracs.iter().flat_map(|&f| bilinear_weights(f)).collect();
    let w = Tensor::from_vec(w, &[n, 4, 1]);
    let texels = texture.reshape(&[res * res * 3]).take(&idx, &[n, 4, 3]);
    let colors = texels.mul(&w).sum_axis_keep(1);
    scatter_pixels(frag, &colors)
}

/// Like [`shade`] but also differentiable in the `[n,2]` screen-space vertex
/// positions through barycentric and uv interpolation. Visibility is taken
/// from `frag`; silhouette motion is not differentiated.
pub fn shade_with_geometry(frag: &FragmentBuffer, screen: &Tensor, texture: &Tensor) -> Tensor {
    let res = texture.dim(0);
    let topo = frag.topology.as_ref().expect("fragment buffer from rasterize");
    let covered: Vec<(usize, usize)> = frag.covered().collect();
    let n = covered.len();
    if n == 0 {
        return Tensor::zeros(&[frag.height, frag.width, 3]);
    }
    let flat = screen.reshape(&[screen.numel()]);
    let gather = |corner: usize, axis: usize| {
        let idx: Vec<i64> = covered
            .iter()
            .map(|&(_, f)| (topo.faces[f][corner] as usize * 2 + axis) as i64)
            .collect();
        flat.take(&IndexMap::new(idx), &[n])
    };
    let px = Tensor::from_vec(covered.iter().map(|&(p, _)| (p % frag.width) as f64 + 0.5).collect(), &[n]);
    let py = Tensor::from_vec(covered.iter().map(|&(p, _)| (p / frag.width) as f64 + 0.5).collect(), &[n]);
    let rel: Vec<(Tensor, Tensor)> = (0..3).map(|k| (gather(k, 0).sub(&px), gather(k, 1).sub(&py))).collect();
    let cross = |i: usize, j: usize| rel[i].0.mul(&rel[j].1).sub(&rel[i].1.mul(&rel[j].0));
    let e = [cross(1, 2), cross(2, 0), cross(0, 1)];
    let area = e[0].add(&e[1]).add(&e[2]);
    let corner_uv = |k: usize, a: usize| {
        Tensor::from_vec(covered.iter().map(|&(_, f)| topo.uv[f][k][a]).collect(), &[n])
    };
    let mut u = Tensor::zeros(&[n]);
    let mut v = Tensor::zeros(&[n]);
    for (k, ek) in e.iter().enumerate() {
        let b = ek.div(&area);
        u = u.add(&b.mul(&corner_uv(k, 0)));
        v = v.add(&b.mul(&corner_uv(k, 1)));
    }
    // fractional tap offsets, floors taken from the forward values
    let x = u.scale(res as f64).add_scalar(-0.5);
    let y = v.scale(-(res as f64)).add_scalar(res as f64 - 0.5);
    let xf = Tensor::from_vec(x.data().iter().map(|a| a.floor()).collect(), &[n]);
    let yf = Tensor::from_vec(y.data().iter().map(|a| a.floor()).collect(), &[n]);
    let fx = x.sub(&xf).reshape(&[n, 1]);
    let fy = y.sub(&yf).reshape(&[n, 1]);
    let gx = fx.neg().add_scalar(1.0);
    let gy = fy.neg().add_scalar(1.0);
    let w = Tensor::concat(&[gx.mul(&gy), fx.mul(&gy), gx.mul(&fy), fx.mul(&fy)], 1).reshape(&[n, 4, 1]);

    let mut geo_frag = frag.clone();
    for (i, &(p, _)) in covered.iter().enumerate() {
        geo_frag.uv[p] = [u.data()[i], v.data()[i]];
    }
    let (idx, _) = tap_index(&geo_frag, res);
    let texels = texture.reshape(&[res * res * 3]).take(&idx, &[n, 4, 3]);
    scatter_pixels(frag, &texels.mul(&w).sum_axis_keep(1))
}

/// Plain-value render of a texture through `frag`.
pub fn shade_image(frag: &FragmentBuffer, texture: &UVTexture) -> RenderedImage {
    let mut rgb = vec![0.0; frag.height * frag.width * 3];
    for (p, _) in frag.covered() {
        let (t, f) = taps(frag.uv[p], texture.res);
        let w = bilinear_weights(f);
        for c in 0..3 {
            rgb[p * 3 + c] = (0..4).map(|k| w[k] * texture.rgb[t[k] * 3 + c]).sum();
        }
    }
    RenderedImage {
        height: frag.height,
        width: frag.width,
        rgb,
        mask: frag.coverage.clone(),
    }
}

/// Zeros pixels of `image` that the decoded face does not cover or that show
/// the mouth interior.
pub fn mask_real_image(
    image: &[f64],
    height: usize,
    width: usize,
    params: &FaceParams,
    model: &MorphableModel,
) -> Result<RenderedImage> {
    if image.len() != height * width * 3 {
        return Err(Error::dim("image", height * width * 3, image.len()));
    }
    let mesh = model.decode(params)?;
    let frag = rasterize(&mesh, params.camera3(), height, width)?.without_mouth();
    Ok(apply_mask(image, &frag))
}

/// Keeps `image` only where `frag` is covered.
pub fn apply_mask(image: &[f64], frag: &FragmentBuffer) -> RenderedImage {
    let mut rgb = image.to_vec();
    for (p, &c) in frag.coverage.iter().enumerate() {
        if !c {
            rgb[p * 3..p * 3 + 3].fill(0.0);
        }
    }
    RenderedImage {
        height: frag.height,
        width: frag.width,
        rgb,
        mask: frag.coverage.clone(),
    }
}
