use facetex::autodiff::{grad, Tensor};
use facetex::morphable::{
    load_model, make_toy_model, sample_geometry, save_model, FaceParams, MorphableModel, Topology, EXPR_DIM,
};
use facetex::rng;
use rand::Rng;

fn toy() -> MorphableModel {
    make_toy_model(1, 1000)
}

fn with_weights(m: &MorphableModel, w: impl Fn(usize) -> [f64; 2]) -> MorphableModel {
    MorphableModel::new(
        m.template.clone(),
        m.shape_basis.clone(),
        m.expr_basis.clone(),
        m.joints,
        (0..m.num_vertices()).map(w).collect(),
        Topology::clone(&m.topology),
        m.expr_covariance.clone(),
    )
    .unwrap()
}

fn random_params(m: &MorphableModel, r: &mut rng::Rng, pose_scale: f64) -> FaceParams {
    let mut p = FaceParams::neutral(m, [8.0, 0.0, 0.0]);
    p.shape.iter_mut().for_each(|x| *x = r.random_range(-0.2..0.2));
    p.expression.iter_mut().for_each(|x| *x = r.random_range(-0.2..0.2));
    p.pose.iter_mut().for_each(|x| *x = pose_scale * r.random_range(-1.0..1.0));
    p
}

#[test]
fn toy_model_is_deterministic_and_seeded() {
    let a = make_toy_model(1, 1000);
    let b = make_toy_model(1, 1000);
    let c = make_toy_model(2, 1000);
    assert_eq!(a.template, b.template);
    assert_eq!(a.shape_basis, b.shape_basis);
    assert_eq!(a.expr_basis, b.expr_basis);
    assert_eq!(a.topology, b.topology);
    assert_ne!(a.template, c.template);
    assert_eq!((a.num_vertices(), a.shape_rank(), a.expr_rank()), (1000, 100, 50));
}

#[test]
fn basis_columns_have_unit_norm() {
    let m = toy();
    for (basis, k) in [(&m.shape_basis, m.shape_rank()), (&m.expr_basis, m.expr_rank())] {
        let rows = basis.len() / k;
        for j in 0..k {
            let mut acc = 0.0f64;
            for r in 0..rows {
                acc = acc.hypot(basis[r * k + j]);
            }
            assert!((acc - 1.0).abs() < 1e-9, "column {j} norm {acc}");
        }
    }
}

#[test]
fn container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("toy.zip");
    let m = toy();
    save_model(&m, &p).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!((back.num_vertices(), back.shape_rank(), back.expr_rank()), (1000, 100, 50));
    assert_eq!(back.topology.faces, m.topology.faces);
    assert_eq!(back.topology.mouth_faces, m.topology.mouth_faces);
    for (a, b) in back.template.iter().zip(&m.template) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

fn rewrite_without(src: &std::path::Path, dst: &std::path::Path, skip: &str, replace: Option<(&str, Vec<u8>)>) {
    use std::io::{Read, Write};
    let mut zin = zip::ZipArchive::new(std::fs::File::open(src).unwrap()).unwrap();
    let mut zout = zip::ZipWriter::new(std::fs::File::create(dst).unwrap());
    for i in 0..zin.len() {
        let mut f = zin.by_index(i).unwrap();
        let name = f.name().to_string();
        if name == skip {
            continue;
        }
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).unwrap();
        if let Some((rname, bytes)) = &replace {
            if *rname == name {
                buf = bytes.clone();
            }
        }
        zout.start_file(name, zip::write::SimpleFileOptions::default()).unwrap();
        zout.write_all(&buf).unwrap();
    }
    zout.finish().unwrap();
}

#[test]
fn load_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("toy.zip");
    let m = make_toy_model(4, 200);
    save_model(&m, &p).unwrap();

    let missing = dir.path().join("missing.zip");
    rewrite_without(&p, &missing, "expr_cov.bin", None);
    let err = load_model(&missing).unwrap_err().to_string();
    assert!(err.contains("expr_covariance"), "{err}");

    let mut sw: Vec<f32> = m.skin_weights.iter().flatten().map(|&w| w as f32).collect();
    sw[0] = 0.9;
    sw[1] = 0.0;
    let bytes: Vec<u8> = sw.iter().flat_map(|w| w.to_le_bytes()).collect();
    let bad = dir.path().join("bad.zip");
    rewrite_without(&p, &bad, "", Some(("skin_weights.bin", bytes)));
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("skin_weights not convex"), "{err}");

    let mut cov: Vec<f32> = m.expr_covariance.iter().map(|&c| c as f32).collect();
    cov[3] = 0.0;
    let bytes: Vec<u8> = cov.iter().flat_map(|w| w.to_le_bytes()).collect();
    let bad = dir.path().join("cov.zip");
    rewrite_without(&p, &bad, "", Some(("expr_cov.bin", bytes)));
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("expr_covariance"), "{err}");
}

#[test]
fn zero_params_decode_to_template_bitwise() {
    let m = toy();
    let mesh = m.decode(&FaceParams::neutral(&m, [8.0, 0.0, 0.0])).unwrap();
    assert_eq!(mesh.flat(), m.template);
    let t = m.tensors();
    let z = |n| Tensor::zeros(&[n]);
    let out = t.decode(&z(100), &z(6), &z(50));
    assert_eq!(out.to_vec(), m.template);
}

#[test]
fn blendshapes_are_linear_at_zero_pose() {
    let m = toy();
    let mut r = rng::stream(3, "test");
    let mut p1 = random_params(&m, &mut r, 0.0);
    let mut p2 = random_params(&m, &mut r, 0.0);
    p1.pose = vec![0.0; 6];
    p2.pose = vec![0.0; 6];
    let mut p12 = p1.clone();
    for i in 0..100 {
        p12.shape[i] += p2.shape[i];
    }
    for i in 0..50 {
        p12.expression[i] += p2.expression[i];
    }
    let d = |p: &FaceParams| -> Vec<f64> {
        m.decode(p).unwrap().flat().iter().zip(&m.template).map(|(a, b)| a - b).collect()
    };
    let (a, b, ab) = (d(&p1), d(&p2), d(&p12));
    for i in 0..ab.len() {
        assert!((ab[i] - a[i] - b[i]).abs() < 1e-6);
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn head_rotation_preserves_distances() {
    let m = with_weights(&toy(), |_| [1.0, 0.0]);
    let mut r = rng::stream(5, "pairs");
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.pose = vec![0.4, -0.7, 0.25, 0.3, 0.0, 0.0];
    let rest = m.template_vertices();
    let posed = m.decode(&p).unwrap().vertices;
    for _ in 0..50 {
        let i = r.random_range(0..rest.len());
        let j = r.random_range(0..rest.len());
        let d0 = dist(rest[i], rest[j]);
        let d1 = dist(posed[i], posed[j]);
        assert!((d0 - d1).abs() <= 1e-6 * d0.max(1e-12), "{d0} vs {d1}");
    }
}

#[test]
fn one_hot_skinning_is_rigid_per_group() {
    let base = toy();
    // split vertices between joints by height
    let m = with_weights(&base, |i| if base.template[3 * i + 1] < -0.03 { [0.0, 1.0] } else { [1.0, 0.0] });
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.pose = vec![0.1, 0.3, -0.2, 0.35, 0.05, -0.1];
    let rest = m.template_vertices();
    let posed = m.decode(&p).unwrap().vertices;
    for f in &m.topology.faces {
        for k in 0..3 {
            let (a, b) = (f[k] as usize, f[(k + 1) % 3] as usize);
            if m.skin_weights[a] != m.skin_weights[b] {
                continue;
            }
            let d0 = dist(rest[a], rest[b]);
            let d1 = dist(posed[a], posed[b]);
            assert!((d0 - d1).abs() <= 1e-6 * d0);
        }
    }
}

#[test]
fn expression_prior_cases() {
    let mut m = toy();
    assert_eq!(m.expression_prior(&[0.0; EXPR_DIM]).unwrap(), 0.0);
    m.expr_covariance[7] = 4.0;
    let mut e = vec![0.0; EXPR_DIM];
    e[7] = 1.0;
    assert_eq!(m.expression_prior(&e).unwrap(), 0.25);
    let mut r = rng::stream(9, "psi");
    let psi: Vec<f64> = (0..EXPR_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
    let psi2: Vec<f64> = psi.iter().map(|x| 2.0 * x).collect();
    let (a, b) = (m.expression_prior(&psi).unwrap(), m.expression_prior(&psi2).unwrap());
    assert!((b - 4.0 * a).abs() <= 1e-12 * b);
    assert!(m.expression_prior(&[0.0; 3]).is_err());
}

#[test]
fn expression_prior_gradient_matches_fd() {
    let m = toy();
    let t = m.tensors();
    let mut r = rng::stream(10, "psi");
    for _ in 0..20 {
        let psi: Vec<f64> = (0..EXPR_DIM).map(|_| r.random_range(-1.5..1.5)).collect();
        let x = Tensor::param(psi.clone(), &[EXPR_DIM]);
        let g = grad(&t.expression_prior(&x), &[&x], false).remove(0);
        let h = 1e-6;
        for k in 0..EXPR_DIM {
            let mut p = psi.clone();
            p[k] += h;
            let mut q = psi.clone();
            q[k] -= h;
            let fd = (m.expression_prior(&p).unwrap() - m.expression_prior(&q).unwrap()) / (2.0 * h);
            let a = g.data()[k];
            assert!((a - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{a} vs {fd}");
        }
    }
}

#[test]
fn decode_jvp_matches_fd() {
    let m = toy();
    let t = m.tensors();
    let mut r = rng::stream(11, "jvp");
    let p = random_params(&m, &mut r, 0.3);
    let u: Vec<f64> = (0..3 * m.num_vertices()).map(|_| r.random_range(-1.0..1.0)).collect();
    let ut = Tensor::from_vec(u.clone(), &[m.num_vertices(), 3]);
    let beta = Tensor::param(p.shape.clone(), &[100]);
    let theta = Tensor::param(p.pose.clone(), &[6]);
    let psi = Tensor::param(p.expression.clone(), &[50]);
    let out = t.decode(&beta, &theta, &psi);
    for (a, b) in out.data().iter().zip(m.decode(&p).unwrap().flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    let gs = grad(&out.mul(&ut).sum(), &[&beta, &theta, &psi], false);
    let dirs = [
        (0, (0..100).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>()),
        (1, (0..6).map(|_| r.random_range(-1.0..1.0)).collect()),
        (2, (0..50).map(|_| r.random_range(-1.0..1.0)).collect()),
    ];
    for (which, dir) in dirs {
        let analytic: f64 = gs[which].data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let h = 1e-5;
        let eval = |s: f64| -> f64 {
            let mut q = p.clone();
            let target = match which {
                0 => &mut q.shape,
                1 => &mut q.pose,
                _ => &mut q.expression,
            };
            target.iter_mut().zip(&dir).for_each(|(x, d)| *x += s * d);
            m.decode(&q).unwrap().flat().iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-4 * fd.abs(), "param {which}: {analytic} vs {fd}");
    }
}

#[test]
fn non_finite_or_mismatched_params_are_rejected() {
    let m = make_toy_model(2, 150);
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.expression[0] = f64::NAN;
    assert!(m.decode(&p).is_err());
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.shape.pop();
    assert!(m.decode(&p).is_err());
}

#[test]
fn sample_geometry_cases() {
    let m = make_toy_model(2, 150);
    let a = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    let b = FaceParams::neutral(&m, [9.0, 0.1, 0.0]);
    let mut r = rng::stream(1, "geo");
    assert!(sample_geometry(&[], &mut r).is_err());
    for _ in 0..20 {
        assert_eq!(sample_geometry(std::slice::from_ref(&a), &mut r).unwrap(), &a);
    }
    let dist = [a.clone(), b];
    let hits = (0..10_000).filter(|_| sample_geometry(&dist, &mut r).unwrap() == &a).count();
    let freq = hits as f64 / 10_000.0;
    assert!((0.45..=0.55).contains(&freq), "{freq}");

    let seq = |seed| {
        let mut r = rng::stream(seed, "geo");
        (0..30).map(|_| sample_geometry(&dist, &mut r).unwrap().camera[0]).collect::<Vec<_>>()
    };
    assert_eq!(seq(4), seq(4));
}
