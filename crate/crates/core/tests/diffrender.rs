use facetex::autodiff::{grad, Tensor};
use facetex::diffrender::{
    mask_real_image, project, project_tensor, rasterize, rasterize_screen, shade, shade_image, shade_with_geometry,
    FragmentBuffer, UVTexture,
};
use facetex::morphable::{make_toy_model, FaceParams, Mesh, Topology};
use facetex::rng;
use rand::Rng;
use std::sync::Arc;

fn mesh(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>, uv: Vec<[[f64; 2]; 3]>, mouth: Vec<u32>) -> Mesh {
    Mesh {
        vertices,
        topology: Arc::new(Topology::new(faces, uv, mouth)),
    }
}

const UV0: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]];

#[test]
fn full_viewport_triangle_covers_everything() {
    let m = mesh(vec![[-10.0, -10.0, 0.0], [10.0, -10.0, 0.0], [0.0, 10.0, 0.0]], vec![[0, 1, 2]], vec![UV0], vec![]);
    let f = rasterize(&m, [1.0, 0.0, 0.0], 16, 12).unwrap();
    assert!(f.coverage.iter().all(|&c| c));
    assert!(f.face_id.iter().all(|&id| id == 0));
    for b in &f.bary {
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(b.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn empty_and_degenerate_meshes_render_background() {
    let m = mesh(vec![[0.0, 0.0, 0.0]; 3], vec![], vec![], vec![]);
    let f = rasterize(&m, [1.0, 0.0, 0.0], 8, 8).unwrap();
    assert!(f.coverage.iter().all(|&c| !c));
    assert!(f.face_id.iter().all(|&id| id == -1));
    let m = mesh(vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [1.0, 1.0, 0.0]], vec![[0, 1, 2]], vec![UV0], vec![]);
    let f = rasterize(&m, [1.0, 0.0, 0.0], 8, 8).unwrap();
    assert!(f.coverage.iter().all(|&c| !c));
}

#[test]
fn invalid_targets_are_rejected() {
    let m = mesh(vec![[0.0, 0.0, 0.0]; 3], vec![], vec![], vec![]);
    assert!(rasterize(&m, [1.0, 0.0, 0.0], 4, 8).is_err());
    assert!(rasterize(&m, [0.0, 0.0, 0.0], 8, 8).is_err());
}

fn inside(tri: [[f64; 3]; 3], px: f64, py: f64) -> Option<[f64; 3]> {
    let e = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
    let area = e(tri[0], tri[1]) + e(tri[1], tri[2]) + e(tri[2], tri[0]);
    if area == 0.0 {
        return None;
    }
    let b = [e(tri[1], tri[2]) / area, e(tri[2], tri[0]) / area, e(tri[0], tri[1]) / area];
    // strict interior only, so edge ties never enter the comparison
    b.iter().all(|&x| x > 1e-9).then_some(b)
}

#[test]
fn nearer_triangle_wins() {
    let mut r = rng::stream(2, "tri");
    for _ in 0..20 {
        let mut verts = Vec::new();
        for _ in 0..6 {
            verts.push([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        }
        let m = mesh(verts.clone(), vec![[0, 1, 2], [3, 4, 5]], vec![UV0, UV0], vec![]);
        let f = rasterize(&m, [0.9, 0.0, 0.0], 24, 24).unwrap();
        let screen = project(&verts, [0.9, 0.0, 0.0], 24, 24);
        for py in 0..24 {
            for px in 0..24 {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut best: Option<(f64, i32)> = None;
                for t in 0..2 {
                    let tri = [screen[3 * t], screen[3 * t + 1], screen[3 * t + 2]];
                    if let Some(b) = inside(tri, cx, cy) {
                        let z = b[0] * tri[0][2] + b[1] * tri[1][2] + b[2] * tri[2][2];
                        if best.is_none_or(|(bz, _)| z > bz) {
                            best = Some((z, t as i32));
                        }
                    }
                }
                if let Some((_, t)) = best {
                    assert_eq!(f.face_id[py * 24 + px], t, "pixel ({px},{py})");
                }
            }
        }
    }
}

#[test]
fn shared_edge_pixels_are_drawn_once() {
    // a square split along its diagonal, exactly through pixel centers
    let v = vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
    let m = mesh(v, vec![[0, 1, 2], [0, 2, 3]], vec![UV0, UV0], vec![]);
    let f = rasterize(&m, [0.75, 0.0, 0.0], 8, 8).unwrap();
    let covered = f.coverage.iter().filter(|&&c| c).count();
    assert_eq!(covered, 36);
}

#[test]
fn constant_texture_and_bilinear_identity() {
    let m = make_toy_model(1, 400);
    let p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    let f = rasterize(&m.decode(&p).unwrap(), p.camera3(), 32, 32).unwrap();
    let img = shade_image(&f, &UVTexture::constant(8, [0.3, 0.6, 0.9]));
    for (px, &c) in f.coverage.iter().enumerate() {
        let expect = if c { [0.3, 0.6, 0.9] } else { [0.0; 3] };
        for k in 0..3 {
            assert!((img.rgb[px * 3 + k] - expect[k]).abs() < 1e-12);
        }
    }

    let tri = mesh(
        vec![[-10.0, -10.0, 0.0], [10.0, -10.0, 0.0], [0.0, 10.0, 0.0]],
        vec![[0, 1, 2]],
        vec![[[0.5, 0.5]; 3]],
        vec![],
    );
    let f = rasterize(&tri, [1.0, 0.0, 0.0], 8, 8).unwrap();
    let tex = UVTexture::new(2, vec![0.1, 0.2, 0.3, 0.5, 0.4, 0.3, 0.9, 0.0, 0.6, 0.2, 0.2, 0.2]).unwrap();
    let img = shade(&f, &tex.to_tensor());
    let mean = [(0.1 + 0.5 + 0.9 + 0.2) / 4.0, (0.2 + 0.4 + 0.0 + 0.2) / 4.0, (0.3 + 0.3 + 0.6 + 0.2) / 4.0];
    for p in 0..64 {
        for k in 0..3 {
            assert!((img.data()[p * 3 + k] - mean[k]).abs() < 1e-12);
        }
    }
}

fn toy_frag(res: usize) -> (FragmentBuffer, facetex::morphable::MorphableModel, FaceParams) {
    let m = make_toy_model(1, 400);
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.pose[1] = 0.2;
    let f = rasterize(&m.decode(&p).unwrap(), p.camera3(), res, res).unwrap();
    (f, m, p)
}

#[test]
fn texture_gradient_matches_fd() {
    let (f, _, _) = toy_frag(8);
    let mut r = rng::stream(3, "tex");
    let res = 8;
    let base: Vec<f64> = (0..res * res * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let weights: Vec<f64> = (0..8 * 8 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let wt = Tensor::from_vec(weights.clone(), &[8, 8, 3]);
    let tex = Tensor::param(base.clone(), &[res, res, 3]);
    let g = grad(&shade(&f, &tex).mul(&wt).sum(), &[&tex], false).remove(0);
    let h = 1e-4;
    let eval = |t: &Vec<f64>| -> f64 {
        let img = shade_image(&f, &UVTexture::new(res, t.clone()).unwrap());
        img.rgb.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    for i in 0..base.len() {
        let mut a = base.clone();
        a[i] += h;
        let mut b = base.clone();
        b[i] -= h;
        let fd = (eval(&a) - eval(&b)) / (2.0 * h);
        assert!((g.data()[i] - fd).abs() < 1e-5, "texel {i}: {} vs {fd}", g.data()[i]);
    }
}

#[test]
fn shade_is_linear_and_deterministic() {
    let (f, _, _) = toy_frag(24);
    let mut r = rng::stream(4, "lin");
    let t1: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let t2: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let (a, b) = (0.7, -1.3);
    let mix: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
    let s = |t: &Vec<f64>| shade(&f, &Tensor::from_vec(t.clone(), &[16, 16, 3])).to_vec();
    let (s1, s2, sm) = (s(&t1), s(&t2), s(&mix));
    for i in 0..sm.len() {
        assert!((sm[i] - a * s1[i] - b * s2[i]).abs() < 1e-6);
    }
    assert_eq!(s(&t1), s1);
    let (f2, _, _) = toy_frag(24);
    assert_eq!(f, f2);
}

#[test]
fn geometry_path_agrees_with_plain_shade() {
    let (f, m, p) = toy_frag(16);
    let verts = Tensor::from_vec(m.decode(&p).unwrap().flat(), &[m.num_vertices(), 3]);
    let screen = project_tensor(&verts, p.camera3(), 16, 16);
    let tex = UVTexture::constant(8, [0.2, 0.4, 0.6]);
    let mut t = tex.clone();
    let mut r = rng::stream(5, "t");
    t.rgb.iter_mut().for_each(|x| *x = r.random_range(0.0..1.0));
    let a = shade_with_geometry(&f, &screen, &t.to_tensor()).to_vec();
    let b = shade_image(&f, &t).rgb;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn vertex_gradient_matches_fd_on_stable_pixels() {
    let res = 16;
    let (f, m, p) = toy_frag(res);
    let base = m.decode(&p).unwrap().vertices;
    let mut r = rng::stream(6, "vg");
    let mut tex = UVTexture::constant(16, [0.0; 3]);
    tex.rgb.iter_mut().for_each(|x| *x = r.random_range(0.0..1.0));
    let dir: Vec<[f64; 3]> = base
        .iter()
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.0])
        .collect();
    let h = 1e-7;
    let shifted = |s: f64| -> Vec<[f64; 3]> {
        base.iter()
            .zip(&dir)
            .map(|(v, d)| [v[0] + s * d[0], v[1] + s * d[1], v[2] + s * d[2]])
            .collect()
    };
    let frag_at = |s: f64| rasterize_screen(&project(&shifted(s), p.camera3(), res, res), &m.topology, res, res);
    let (fp, fm) = (frag_at(h), frag_at(-h));
    let tap_cell = |fr: &FragmentBuffer, px: usize| {
        let uv = fr.uv[px];
        (((uv[0] * 16.0 - 0.5).floor()) as i64, ((1.0 - uv[1]) * 16.0 - 0.5).floor() as i64)
    };
    let stable: Vec<f64> = (0..res * res)
        .map(|px| {
            let same = f.face_id[px] == fp.face_id[px] && f.face_id[px] == fm.face_id[px];
            let same_cell = tap_cell(&f, px) == tap_cell(&fp, px) && tap_cell(&f, px) == tap_cell(&fm, px);
            if f.coverage[px] && same && same_cell {
                r.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    assert!(stable.iter().filter(|&&w| w != 0.0).count() > 30);
    let loss_of = |img: &[f64]| -> f64 {
        (0..res * res).map(|px| stable[px] * (img[px * 3] + img[px * 3 + 1] + img[px * 3 + 2])).sum()
    };

    let flat: Vec<f64> = base.iter().flatten().copied().collect();
    let verts = Tensor::param(flat, &[base.len(), 3]);
    let screen = project_tensor(&verts, p.camera3(), res, res);
    let img = shade_with_geometry(&f, &screen, &tex.to_tensor());
    let wt = Tensor::from_vec(stable.iter().flat_map(|&w| [w; 3]).collect(), &[res, res, 3]);
    let g = grad(&img.mul(&wt).sum(), &[&verts], false).remove(0);
    let analytic: f64 = g.data().iter().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
    let fd = (loss_of(&shade_image(&fp, &tex).rgb) - loss_of(&shade_image(&fm, &tex).rgb)) / (2.0 * h);
    assert!((analytic - fd).abs() <= 1e-3 * fd.abs(), "{analytic} vs {fd}");
}

#[test]
fn masking_cases() {
    let img: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let m = make_toy_model(1, 400);
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    // camera pushed away: nothing covered
    p.camera = vec![8.0, 5.0, 5.0];
    let out = mask_real_image(&img, 16, 16, &p, &m).unwrap();
    assert!(out.rgb.iter().all(|&x| x == 0.0));

    // full-coverage buffer, no mouth faces: unchanged
    let tri = mesh(vec![[-10.0, -10.0, 0.0], [10.0, -10.0, 0.0], [0.0, 10.0, 0.0]], vec![[0, 1, 2]], vec![UV0], vec![]);
    let f = rasterize(&tri, [1.0, 0.0, 0.0], 16, 16).unwrap().without_mouth();
    assert_eq!(facetex::diffrender::apply_mask(&img, &f).rgb, img);

    // mouth pixels of the toy face: recompute by brute force
    let res = 48;
    let img: Vec<f64> = vec![0.5; res * res * 3];
    let mut p = FaceParams::neutral(&m, [8.0, 0.0, 0.0]);
    p.pose[3] = 0.2;
    let out = mask_real_image(&img, res, res, &p, &m).unwrap();
    let screen = project(&m.decode(&p).unwrap().vertices, p.camera3(), res, res);
    let mut zeroed_expect = 0;
    for py in 0..res {
        for px in 0..res {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut best: Option<(f64, usize)> = None;
            for (fi, face) in m.topology.faces.iter().enumerate() {
                let tri = [screen[face[0] as usize], screen[face[1] as usize], screen[face[2] as usize]];
                if let Some(b) = inside(tri, cx, cy) {
                    let z = b[0] * tri[0][2] + b[1] * tri[1][2] + b[2] * tri[2][2];
                    if best.is_none_or(|(bz, _)| z > bz) {
                        best = Some((z, fi));
                    }
                }
            }
            let pix = py * res + px;
            let Some((_, fi)) = best else { continue };
            let mouth = m.topology.is_mouth(fi);
            if mouth {
                zeroed_expect += 1;
                assert_eq!(out.rgb[pix * 3], 0.0, "mouth pixel ({px},{py}) kept");
            } else {
                assert_eq!(out.rgb[pix * 3], 0.5, "face pixel ({px},{py}) zeroed");
            }
        }
    }
    assert!(zeroed_expect > 0, "the test view should show some mouth interior");
}
