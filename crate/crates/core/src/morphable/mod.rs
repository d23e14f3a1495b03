//! Parametric face geometry: linear shape and expression blendshapes followed
//! by two-joint (head, jaw) linear blend skinning.
//!
//! Posed vertices are computed as `v + Σ_j w_j ((R_j - I) v + t_j)`, which is
//! algebraically the usual `Σ_j w_j (R_j v + t_j)` for convex weights but
//! returns the rest pose bit-exactly at zero pose.

mod container;
mod toy;

pub use container::{load_model, save_model};
pub use toy::make_toy_model;
pub(crate) use toy::MOUTH_POLAR;

use crate::autodiff::{IndexMap, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const SHAPE_DIM: usize = 100;
pub const EXPR_DIM: usize = 50;
pub const POSE_DIM: usize = 6;
pub const CAMERA_DIM: usize = 3;
pub const NUM_JOINTS: usize = 2;
pub const HEAD: usize = 0;
pub const JAW: usize = 1;

/// Per-instance face parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub shape: Vec<f64>,
    /// Axis-angle head rotation (first three) then jaw rotation.
    pub pose: Vec<f64>,
    pub expression: Vec<f64>,
    /// Orthographic camera: scale, x translation, y translation.
    pub camera: Vec<f64>,
}

impl FaceParams {
    pub fn neutral(model: &MorphableModel, camera: [f64; 3]) -> Self {
        Self {
            shape: vec![0.0; model.shape_rank()],
            pose: vec![0.0; POSE_DIM],
            expression: vec![0.0; model.expr_rank()],
            camera: camera.to_vec(),
        }
    }

    pub fn validate(&self, model: &MorphableModel) -> Result<()> {
        let checks = [
            ("shape", &self.shape, model.shape_rank()),
            ("pose", &self.pose, POSE_DIM),
            ("expression", &self.expression, model.expr_rank()),
            ("camera", &self.camera, CAMERA_DIM),
        ];
        for (what, v, n) in checks {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what.to_string()));
            }
        }
        Ok(())
    }

    pub fn camera3(&self) -> [f64; 3] {
        [self.camera[0], self.camera[1], self.camera[2]]
    }
}

/// Faces, texture atlas and the mouth-interior region shared by every mesh of
/// one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub faces: Vec<[u32; 3]>,
    /// Texture coordinates per face corner, in [0,1]².
    pub uv: Vec<[[f64; 2]; 3]>,
    pub mouth_faces: Vec<u32>,
    mouth_mask: Vec<bool>,
}

impl Topology {
    pub fn new(faces: Vec<[u32; 3]>, uv: Vec<[[f64; 2]; 3]>, mouth_faces: Vec<u32>) -> Self {
        let mut mouth_mask = vec![false; faces.len()];
        for &f in &mouth_faces {
            if let Some(m) = mouth_mask.get_mut(f as usize) {
                *m = true;
            }
        }
        Self {
            faces,
            uv,
            mouth_faces,
            mouth_mask,
        }
    }

    pub fn is_mouth(&self, face: usize) -> bool {
        self.mouth_mask[face]
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }
}

#[derive(Clone, Debug)]
pub struct MorphableModel {
    /// Rest vertices, `[n × 3]` row-major, meters.
    pub template: Vec<f64>,
    /// `[3n × shape_rank]` row-major.
    pub shape_basis: Vec<f64>,
    /// `[3n × expr_rank]` row-major.
    pub expr_basis: Vec<f64>,
    pub joints: [[f64; 3]; NUM_JOINTS],
    pub skin_weights: Vec<[f64; NUM_JOINTS]>,
    pub topology: Arc<Topology>,
    /// Diagonal of the expression covariance.
    pub expr_covariance: Vec<f64>,
    shape_rank: usize,
    expr_rank: usize,
}

/// Deformed vertices of one face instance.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub topology: Arc<Topology>,
}

impl Mesh {
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }
}

impl MorphableModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Vec<f64>,
        shape_basis: Vec<f64>,
        expr_basis: Vec<f64>,
        joints: [[f64; 3]; NUM_JOINTS],
        skin_weights: Vec<[f64; NUM_JOINTS]>,
        topology: Topology,
        expr_covariance: Vec<f64>,
    ) -> Result<Self> {
        if !template.len().is_multiple_of(3) || template.is_empty() {
            return Err(Error::load("template", "length must be a positive multiple of 3"));
        }
        let n = template.len() / 3;
        if !shape_basis.len().is_multiple_of(3 * n) {
            return Err(Error::load("shape_basis", format!("length {} is not a multiple of 3N={}", shape_basis.len(), 3 * n)));
        }
        if !expr_basis.len().is_multiple_of(3 * n) {
            return Err(Error::load("expr_basis", format!("length {} is not a multiple of 3N={}", expr_basis.len(), 3 * n)));
        }
        let shape_rank = shape_basis.len() / (3 * n);
        let expr_rank = expr_basis.len() / (3 * n);
        if skin_weights.len() != n {
            return Err(Error::load("skin_weights", format!("expected {n} rows, got {}", skin_weights.len())));
        }
        for row in &skin_weights {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (s - 1.0).abs() > 1e-5 {
                return Err(Error::load("skin_weights", "skin_weights not convex"));
            }
        }
        if expr_covariance.len() != expr_rank {
            return Err(Error::load(
                "expr_covariance",
                format!("expected {expr_rank} entries, got {}", expr_covariance.len()),
            ));
        }
        if expr_covariance.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::load("expr_covariance", "entries must be positive"));
        }
        if topology.uv.len() != topology.faces.len() {
            return Err(Error::load("uv", "one uv triple per face is required"));
        }
        if topology.faces.iter().flatten().any(|&i| i as usize >= n) {
            return Err(Error::load("faces", format!("face index out of range (N={n})")));
        }
        if topology.uv.iter().flatten().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::load("uv", "coordinates must lie in [0,1]"));
        }
        if topology.mouth_faces.iter().any(|&f| f as usize >= topology.faces.len()) {
            return Err(Error::load("mouth_faces", "face index out of range"));
        }
        for (name, v) in [("template", &template), ("shape_basis", &shape_basis), ("expr_basis", &expr_basis)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::load(name, "non-finite entries"));
            }
        }
        // -0.0 would break the bitwise rest-pose identity.
        let template = template.into_iter().map(|x| x + 0.0).collect();
        Ok(Self {
            template,
            shape_basis,
            expr_basis,
            joints,
            skin_weights,
            topology: Arc::new(topology),
            expr_covariance,
            shape_rank,
            expr_rank,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len() / 3
    }

    pub fn shape_rank(&self) -> usize {
        self.shape_rank
    }

    pub fn expr_rank(&self) -> usize {
        self.expr_rank
    }

    pub fn template_vertices(&self) -> Vec<[f64; 3]> {
        self.template.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Posed mesh for `params`.
    pub fn decode(&self, params: &FaceParams) -> Result<Mesh> {
        params.validate(self)?;
        let n = self.num_vertices();
        let mut offset = vec![0.0; 3 * n];
        accumulate_basis(&mut offset, &self.shape_basis, &params.shape);
        accumulate_basis(&mut offset, &self.expr_basis, &params.expression);
        let rest: Vec<f64> = self.template.iter().zip(&offset).map(|(t, o)| t + o).collect();

        let transforms = joint_transforms(&self.joints, &params.pose);
        let mut vertices = Vec::with_capacity(n);
        for (i, w) in self.skin_weights.iter().enumerate() {
            let v = [rest[3 * i], rest[3 * i + 1], rest[3 * i + 2]];
            let mut d = [0.0; 3];
            for (j, (r, t)) in transforms.iter().enumerate() {
                if w[j] == 0.0 {
                    continue;
                }
                for (a, da) in d.iter_mut().enumerate() {
                    let rv = (r[a][0] - eye(a, 0)) * v[0] + (r[a][1] - eye(a, 1)) * v[1] + (r[a][2] - eye(a, 2)) * v[2];
                    *da += w[j] * (rv + t[a]);
                }
            }
            vertices.push([v[0] + d[0], v[1] + d[1], v[2] + d[2]]);
        }
        Ok(Mesh {
            vertices,
            topology: Arc::clone(&self.topology),
        })
    }

    /// Tensors needed for differentiable decoding; build once per run.
    pub fn tensors(&self) -> ModelTensors {
        let n = self.num_vertices();
        let weights = |j: usize| {
            Tensor::from_vec(self.skin_weights.iter().map(|w| w[j]).collect(), &[n, 1])
        };
        ModelTensors {
            template: Tensor::from_vec(self.template.clone(), &[n, 3]),
            shape_basis: Tensor::from_vec(self.shape_basis.clone(), &[3 * n, self.shape_rank]),
            expr_basis: Tensor::from_vec(self.expr_basis.clone(), &[3 * n, self.expr_rank]),
            weights: [weights(HEAD), weights(JAW)],
            inv_cov: Tensor::from_vec(self.expr_covariance.iter().map(|c| 1.0 / c).collect(), &[self.expr_rank]),
            joints: self.joints,
            n,
        }
    }

    /// Mahalanobis expression prior `ψᵀ Σ⁻¹ ψ`.
    pub fn expression_prior(&self, expression: &[f64]) -> Result<f64> {
        if expression.len() != self.expr_rank {
            return Err(Error::dim("expression", self.expr_rank, expression.len()));
        }
        Ok(expression
            .iter()
            .zip(&self.expr_covariance)
            .map(|(p, c)| p * p / c)
            .sum())
    }
}

fn eye(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn accumulate_basis(out: &mut [f64], basis: &[f64], coeffs: &[f64]) {
    let k = coeffs.len();
    if coeffs.iter().all(|&c| c == 0.0) {
        return;
    }
    for (row, o) in out.iter_mut().enumerate() {
        let b = &basis[row * k..(row + 1) * k];
        *o += b.iter().zip(coeffs).map(|(x, c)| x * c).sum::<f64>();
    }
}

type Mat3 = [[f64; 3]; 3];

/// Rotation matrix of an axis-angle vector (Rodrigues), exact at zero.
pub fn rotation_matrix(aa: [f64; 3]) -> Mat3 {
    let a2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let (s, c) = rodrigues_coeffs(a2);
    let k = [[0.0, -aa[2], aa[1]], [aa[2], 0.0, -aa[0]], [-aa[1], aa[0], 0.0]];
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = eye(i, j) + s * k[i][j] + c * k2[i][j];
        }
    }
    r
}

/// `(sin a / a, (1 - cos a) / a²)` as functions of `a²`.
fn rodrigues_coeffs(a2: f64) -> (f64, f64) {
    if a2 < 1e-8 {
        (1.0 - a2 / 6.0 + a2 * a2 / 120.0, 0.5 - a2 / 24.0 + a2 * a2 / 720.0)
    } else {
        let a = a2.sqrt();
        (a.sin() / a, (1.0 - a.cos()) / a2)
    }
}

fn rodrigues_coeff_derivs(a2: f64) -> (f64, f64) {
    if a2 < 1e-6 {
        (-1.0 / 6.0 + a2 / 60.0, -1.0 / 24.0 + a2 / 360.0)
    } else {
        let a = a2.sqrt();
        let (s, c) = (a.sin(), a.cos());
        // d/d(a²) of sin(a)/a and (1-cos a)/a²
        let ds = (a * c - s) / (2.0 * a2 * a);
        let dc = (a * s - 2.0 * (1.0 - c)) / (2.0 * a2 * a2);
        (ds, dc)
    }
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// World transforms `(R, t)` of the head joint and of the jaw (child of head).
fn joint_transforms(joints: &[[f64; 3]; NUM_JOINTS], pose: &[f64]) -> [(Mat3, [f64; 3]); NUM_JOINTS] {
    let r_head = rotation_matrix([pose[0], pose[1], pose[2]]);
    let r_jaw_local = rotation_matrix([pose[3], pose[4], pose[5]]);
    let jh = joints[HEAD];
    let jj = joints[JAW];
    let rh_jh = mat_vec(&r_head, &jh);
    let t_head = [jh[0] - rh_jh[0], jh[1] - rh_jh[1], jh[2] - rh_jh[2]];
    let rj_jj = mat_vec(&r_jaw_local, &jj);
    let local_t = [jj[0] - rj_jj[0], jj[1] - rj_jj[1], jj[2] - rj_jj[2]];
    let r_jaw = mat_mul(&r_head, &r_jaw_local);
    let rt = mat_vec(&r_head, &local_t);
    let t_jaw = [rt[0] + t_head[0], rt[1] + t_head[1], rt[2] + t_head[2]];
    [(r_head, t_head), (r_jaw, t_jaw)]
}

/// Model data as constant tensors for differentiable decoding.
pub struct ModelTensors {
    template: Tensor,
    shape_basis: Tensor,
    expr_basis: Tensor,
    weights: [Tensor; NUM_JOINTS],
    inv_cov: Tensor,
    joints: [[f64; 3]; NUM_JOINTS],
    n: usize,
}

fn rotation_tensor(aa: &Tensor) -> Tensor {
    // K = skew(aa) gathered from aa with signs.
    let idx = IndexMap::new(vec![-1, 2, 1, 2, -1, 0, 1, 0, -1]);
    let sign = Tensor::from_vec(vec![0.0, -1.0, 1.0, 1.0, 0.0, -1.0, -1.0, 1.0, 0.0], &[3, 3]);
    let k = aa.take(&idx, &[3, 3]).mul(&sign);
    let k2 = k.matmul(&k);
    let a2 = aa.square().sum();
    let s = a2.map_first_order(|x| rodrigues_coeffs(x).0, |x| rodrigues_coeff_derivs(x).0);
    let c = a2.map_first_order(|x| rodrigues_coeffs(x).1, |x| rodrigues_coeff_derivs(x).1);
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
    eye.add(&k.mul(&s)).add(&k2.mul(&c))
}

impl ModelTensors {
    pub fn num_vertices(&self) -> usize {
        self.n
    }

    /// Differentiable decode to `[n, 3]` vertices. Pose gradients are first
    /// order only; shape and expression gradients are exact to any order.
    pub fn decode(&self, shape: &Tensor, pose: &Tensor, expression: &Tensor) -> Tensor {
        let n = self.n;
        let ks = self.shape_basis.dim(1);
        let ke = self.expr_basis.dim(1);
        let offs = self
            .shape_basis
            .matmul(&shape.reshape(&[ks, 1]))
            .add(&self.expr_basis.matmul(&expression.reshape(&[ke, 1])))
            .reshape(&[n, 3]);
        let rest = self.template.add(&offs);

        let r_head = rotation_tensor(&pose.narrow(0, 0, 3));
        let r_jaw_local = rotation_tensor(&pose.narrow(0, 3, 3));
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let jh = Tensor::from_vec(self.joints[HEAD].to_vec(), &[3, 1]);
        let jj = Tensor::from_vec(self.joints[JAW].to_vec(), &[3, 1]);
        let t_head = jh.sub(&r_head.matmul(&jh));
        let local_t = jj.sub(&r_jaw_local.matmul(&jj));
        let r_jaw = r_head.matmul(&r_jaw_local);
        let t_jaw = r_head.matmul(&local_t).add(&t_head);

        let mut disp: Option<Tensor> = None;
        for (j, (r, t)) in [(r_head, t_head), (r_jaw, t_jaw)].into_iter().enumerate() {
            // rows: ((R - I) v + t)ᵀ
            let moved = rest.matmul_ex(&r.sub(&eye), false, true).add(&t.reshape(&[1, 3]));
            let term = moved.mul(&self.weights[j]);
            disp = Some(match disp {
                Some(d) => d.add(&term),
                None => term,
            });
        }
        rest.add(&disp.expect("two joints"))
    }

    /// Differentiable `ψᵀ Σ⁻¹ ψ`.
    pub fn expression_prior(&self, expression: &Tensor) -> Tensor {
        expression.square().mul(&self.inv_cov).sum()
    }
}

/// Uniform draw from a discrete set of face parameters.
pub fn sample_geometry<'a>(dist: &'a [FaceParams], rng: &mut Rng) -> Result<&'a FaceParams> {
    if dist.is_empty() {
        return Err(Error::Empty("geometry distribution"));
    }
    Ok(&dist[rng.random_range(0..dist.len())])
}
