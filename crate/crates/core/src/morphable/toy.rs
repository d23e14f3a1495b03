//! Procedural stand-in for a licensed head model: a closed, head-shaped
//! ellipsoid with a spherical UV atlas, a jaw region, a mouth-interior face
//! set and orthonormal random-field blendshape bases.

use super::{MorphableModel, Topology, EXPR_DIM, HEAD, JAW, SHAPE_DIM};
use crate::rng::{self, Rng};
use rand::Rng as _;
use std::f64::consts::PI;

/// Polar angle (from the top) of the mouth center; longitude 0 faces +z.
pub(crate) const MOUTH_POLAR: f64 = PI / 2.0 + 0.45;

struct Sphere {
    /// (polar, azimuth) per vertex.
    angles: Vec<(f64, f64)>,
    faces: Vec<[u32; 3]>,
}

/// Splits `n - 2` vertices over latitude rings proportionally to ring length.
fn ring_counts(n: usize) -> Vec<usize> {
    let inner = n - 2;
    let rings = ((inner as f64 / 2.0).sqrt().round() as usize).max(3);
    let polar: Vec<f64> = (0..rings).map(|k| PI * (k + 1) as f64 / (rings + 1) as f64).collect();
    let total: f64 = polar.iter().map(|p| p.sin()).sum();
    let raw: Vec<f64> = polar.iter().map(|p| inner as f64 * p.sin() / total).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(3)).collect();
    let mut assigned: usize = counts.iter().sum();
    // hand out the remainder by largest fractional part, ties by ring index
    let mut order: Vec<usize> = (0..rings).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < inner {
        counts[order[i % rings]] += 1;
        assigned += 1;
        i += 1;
    }
    while assigned > inner {
        let k = (0..rings).max_by_key(|&k| (counts[k], k)).unwrap();
        counts[k] -= 1;
        assigned -= 1;
    }
    counts
}

fn build_sphere(n: usize) -> Sphere {
    let counts = ring_counts(n);
    let rings = counts.len();
    let mut angles = vec![(0.0, 0.0)];
    let mut starts = Vec::with_capacity(rings);
    for (k, &c) in counts.iter().enumerate() {
        starts.push(angles.len());
        let polar = PI * (k + 1) as f64 / (rings + 1) as f64;
        let shift = if k % 2 == 1 { 0.5 } else { 0.0 };
        for i in 0..c {
            let az = 2.0 * PI * (i as f64 + shift) / c as f64 - PI;
            angles.push((polar, az));
        }
    }
    let bottom = angles.len();
    angles.push((PI, 0.0));
    debug_assert_eq!(angles.len(), n);

    let mut faces = Vec::new();
    let ring = |k: usize, i: usize| (starts[k] + i % counts[k]) as u32;
    for i in 0..counts[0] {
        faces.push([0, ring(0, i + 1), ring(0, i)]);
    }
    for k in 0..rings - 1 {
        let (na, nb) = (counts[k], counts[k + 1]);
        let fa = |i: usize| (i as f64 + if k % 2 == 1 { 0.5 } else { 0.0 }) / na as f64;
        let fb = |j: usize| (j as f64 + if (k + 1) % 2 == 1 { 0.5 } else { 0.0 }) / nb as f64;
        let (mut i, mut j) = (0, 0);
        while i < na || j < nb {
            let advance_a = j >= nb || (i < na && fa(i + 1) <= fb(j + 1));
            if advance_a {
                faces.push([ring(k, i), ring(k, i + 1), ring(k + 1, j)]);
                i += 1;
            } else {
                faces.push([ring(k, i), ring(k + 1, j + 1), ring(k + 1, j)]);
                j += 1;
            }
        }
    }
    let last = rings - 1;
    for i in 0..counts[last] {
        faces.push([bottom as u32, ring(last, i), ring(last, i + 1)]);
    }
    Sphere { angles, faces }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn angular_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let mut daz = (a.1 - b.1).abs();
    if daz > PI {
        daz = 2.0 * PI - daz;
    }
    let dp = a.0 - b.0;
    (dp * dp + (daz * a.0.sin().max(b.0.sin())).powi(2)).sqrt()
}

/// Random smooth vector field sampled at the vertices, weighted by `mask`.
fn random_field(rng: &mut Rng, pos: &[[f64; 3]], mask: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pos.len() * 3];
    for _ in 0..3 {
        let freq: [f64; 3] = [
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
        ];
        let phase = rng.random_range(0.0..2.0 * PI);
        let dir: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        for (i, p) in pos.iter().enumerate() {
            let s = (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin() * mask[i];
            for a in 0..3 {
                out[3 * i + a] += dir[a] * s;
            }
        }
    }
    out
}

/// Modified Gram-Schmidt (two passes). Returns columns as `[rows × k]` row-major.
fn orthonormalize(columns: Vec<Vec<f64>>) -> Vec<f64> {
    let k = columns.len();
    let rows = columns[0].len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for mut c in columns {
        for _ in 0..2 {
            for q in &cols {
                let d: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                for (x, y) in c.iter_mut().zip(q) {
                    *x -= d * y;
                }
            }
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate random field");
        c.iter_mut().for_each(|x| *x /= norm);
        cols.push(c);
    }
    let mut out = vec![0.0; rows * k];
    for (j, c) in cols.iter().enumerate() {
        for (r, v) in c.iter().enumerate() {
            out[r * k + j] = *v;
        }
    }
    out
}

/// Deterministic toy head model with `n_vertices` vertices (at least 100).
pub fn make_toy_model(seed: u64, n_vertices: usize) -> MorphableModel {
    assert!(n_vertices >= 100, "toy model needs at least 100 vertices");
    let mut rng = rng::stream(seed, "toy-model");
    let sphere = build_sphere(n_vertices);

    let radii = [
        rng.random_range(0.075..0.085),
        rng.random_range(0.100..0.110),
        rng.random_range(0.088..0.098),
    ];
    let nose = (PI / 2.0 + 0.1, 0.0);
    let bumps: Vec<((f64, f64), f64, f64)> = (0..6)
        .map(|_| {
            (
                (rng.random_range(0.3..PI - 0.3), rng.random_range(-PI..PI)),
                rng.random_range(-0.006..0.006),
                rng.random_range(0.3..0.8),
            )
        })
        .collect();

    let mut pos = Vec::with_capacity(n_vertices);
    for &(polar, az) in &sphere.angles {
        let dir = [polar.sin() * az.sin(), polar.cos(), polar.sin() * az.cos()];
        let mut scale = 1.0;
        let dn = angular_dist((polar, az), nose);
        scale += 0.12 * (-(dn / 0.18).powi(2)).exp();
        // flatten the back and elongate the chin
        if dir[2] < 0.0 {
            scale -= 0.05 * dir[2] * dir[2];
        }
        if dir[1] < -0.3 && dir[2] > 0.0 {
            scale += 0.06 * dir[2] * (-dir[1] - 0.3);
        }
        let mut bump = 0.0;
        for &(c, amp, width) in &bumps {
            bump += amp * (-(angular_dist((polar, az), c) / width).powi(2)).exp();
        }
        pos.push([
            dir[0] * (radii[0] * scale + bump) + 0.0,
            dir[1] * (radii[1] * scale + bump) + 0.0,
            dir[2] * (radii[2] * scale + bump) + 0.0,
        ]);
    }

    // texture atlas: azimuth -> u (front at u = 0.5), polar -> v (top at v = 1)
    let mut uv = Vec::with_capacity(sphere.faces.len());
    for f in &sphere.faces {
        let mut corners = [[0.0; 2]; 3];
        let mut pole = None;
        for (c, &vi) in f.iter().enumerate() {
            let (polar, az) = sphere.angles[vi as usize];
            if polar == 0.0 || polar == PI {
                pole = Some(c);
            }
            corners[c] = [(az + PI) / (2.0 * PI), 1.0 - polar / PI];
        }
        let others: Vec<usize> = (0..3).filter(|&c| Some(c) != pole).collect();
        let (umin, umax) = others
            .iter()
            .map(|&c| corners[c][0])
            .fold((f64::MAX, f64::MIN), |(lo, hi), u| (lo.min(u), hi.max(u)));
        if umax - umin > 0.5 {
            for &c in &others {
                if corners[c][0] < 0.5 {
                    corners[c][0] = (corners[c][0] + 1.0).min(1.0);
                }
            }
        }
        if let Some(p) = pole {
            corners[p][0] = others.iter().map(|&c| corners[c][0]).sum::<f64>() / others.len() as f64;
        }
        uv.push(corners);
    }

    // mouth interior: faces closest to the mouth center
    let mouth_center = (MOUTH_POLAR, 0.0);
    let mut by_dist: Vec<(f64, usize)> = sphere
        .faces
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let (mut p, mut a) = (0.0, 0.0);
            for &vi in f {
                let (pp, aa) = sphere.angles[vi as usize];
                p += pp / 3.0;
                a += aa / 3.0;
            }
            (angular_dist((p, a), mouth_center), fi)
        })
        .collect();
    by_dist.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    let n_mouth = (sphere.faces.len() / 60).max(2);
    let mut mouth_faces: Vec<u32> = by_dist[..n_mouth].iter().map(|&(_, f)| f as u32).collect();
    mouth_faces.sort_unstable();

    let mouth_y = radii[1] * MOUTH_POLAR.cos();
    let skin_weights: Vec<[f64; 2]> = pos
        .iter()
        .map(|p| {
            let below = smoothstep((mouth_y + 0.01 - p[1]) / 0.03);
            let front = smoothstep(p[2] / 0.04);
            let jaw = below * front;
            let mut w = [0.0; 2];
            w[JAW] = jaw;
            w[HEAD] = 1.0 - jaw;
            w
        })
        .collect();
    let joints = {
        let mut j = [[0.0; 3]; 2];
        j[HEAD] = [0.0, -radii[1] * 0.9, -0.01];
        j[JAW] = [0.0, mouth_y + 0.005, -0.01];
        j
    };

    let ones = vec![1.0; n_vertices];
    let face_mask: Vec<f64> = sphere
        .angles
        .iter()
        .map(|&(polar, az)| {
            let front = smoothstep((az.cos() - 0.2) / 0.6);
            let band = smoothstep((polar - 0.6) / 0.4) * smoothstep((PI - 0.35 - polar) / 0.4);
            0.05 + front * band
        })
        .collect();
    let shape_cols: Vec<Vec<f64>> = (0..SHAPE_DIM).map(|_| random_field(&mut rng, &pos, &ones)).collect();
    let expr_cols: Vec<Vec<f64>> = (0..EXPR_DIM).map(|_| random_field(&mut rng, &pos, &face_mask)).collect();
    let shape_basis = orthonormalize(shape_cols);
    let expr_basis = orthonormalize(expr_cols);
    let expr_covariance: Vec<f64> = (0..EXPR_DIM).map(|k| 1.0 / (1.0 + 0.2 * k as f64)).collect();

    let template: Vec<f64> = pos.iter().flatten().copied().collect();
    MorphableModel::new(
        template,
        shape_basis,
        expr_basis,
        joints,
        skin_weights,
        Topology::new(sphere.faces, uv, mouth_faces),
        expr_covariance,
    )
    .expect("toy model satisfies its invariants")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sphere_is_closed_two_manifold() {
        for n in [100, 257, 1000] {
            let s = build_sphere(n);
            assert_eq!(s.angles.len(), n);
            // Euler characteristic 2 for a closed sphere: V - E + F = 2, F = 2V - 4.
            assert_eq!(s.faces.len(), 2 * n - 4);
            let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
            for f in &s.faces {
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    *edges.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            assert!(edges.values().all(|&c| c == 2), "every edge borders two faces");
        }
    }

    #[test]
    fn toy_model_invariants() {
        let m = make_toy_model(3, 400);
        assert_eq!(m.num_vertices(), 400);
        assert!(!m.topology.mouth_faces.is_empty());
        for w in &m.skin_weights {
            assert!((w[0] + w[1] - 1.0).abs() < 1e-12 && w[0] >= 0.0 && w[1] >= 0.0);
        }
        assert!(m.topology.uv.iter().flatten().flatten().all(|c| (0.0..=1.0).contains(c)));
    }
}
