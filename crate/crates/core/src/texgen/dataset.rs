//! Training corpora: directory ingestion and an offline synthetic generator.

use crate::diffrender::{project, rasterize_screen, shade_image, UVTexture};
use crate::error::{Error, Result};
use crate::io::write_png;
use crate::morphable::{FaceParams, MorphableModel, CAMERA_DIM, EXPR_DIM, POSE_DIM, SHAPE_DIM};
use crate::rng::{self, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub image: PathBuf,
    pub params: FaceParams,
}

fn parse_params(path: &Path) -> Result<FaceParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: FaceParams = serde_json::from_str(&text).map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    for (what, got, want) in [
        ("shape", p.shape.len(), SHAPE_DIM),
        ("pose", p.pose.len(), POSE_DIM),
        ("expression", p.expression.len(), EXPR_DIM),
        ("camera", p.camera.len(), CAMERA_DIM),
    ] {
        if got != want {
            return Err(Error::dim(format!("{} in {}", what, path.display()), want, got));
        }
    }
    if [&p.shape, &p.pose, &p.expression, &p.camera].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(p)
}

/// Pairs `NNNNN.png` with `NNNNN.json`. Orphans on either side are reported
/// and skipped; records come back sorted by stem.
pub fn ingest_dataset(dir: &Path) -> Result<Vec<TrainingRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let slot = stems.entry(stem.to_string_lossy().into_owned()).or_default();
        match ext.to_string_lossy().to_ascii_lowercase().as_str() {
            "png" => slot.0 = Some(path),
            "json" => slot.1 = Some(path),
            _ => {}
        }
    }
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for pair in stems.into_values() {
        match pair {
            (Some(image), Some(json)) => records.push(TrainingRecord {
                image,
                params: parse_params(&json)?,
            }),
            (Some(p), None) | (None, Some(p)) => orphans.push(p),
            (None, None) => {}
        }
    }
    for o in &orphans {
        log::warn!("skipping orphan dataset file {}", o.display());
    }
    log::info!("ingested {} records from {} ({} orphans)", records.len(), dir.display(), orphans.len());
    Ok(records)
}

fn smooth_noise(rng: &mut Rng, res: usize, cells: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let gx = x as f64 / res as f64 * cells as f64;
            let gy = y as f64 / res as f64 * cells as f64;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let g = |i: usize, j: usize| grid[j * (cells + 1) + i];
            out[y * res + x] = g(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + g(x0 + 1, y0) * fx * (1.0 - fy)
                + g(x0, y0 + 1) * (1.0 - fx) * fy
                + g(x0 + 1, y0 + 1) * fx * fy;
        }
    }
    out
}

fn blob(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    let d = ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2);
    (1.0 - d).clamp(0.0, 1.0).powf(0.5)
}

/// Random face-like albedo in the toy model's UV atlas (front of the head at
/// u = 0.5, crown at v = 1).
pub fn procedural_texture(rng: &mut Rng, res: usize) -> UVTexture {
    let skin_tones = [[0.93, 0.76, 0.64], [0.80, 0.60, 0.46], [0.62, 0.44, 0.32], [0.42, 0.29, 0.21], [0.96, 0.84, 0.74]];
    let hair_tones = [[0.10, 0.07, 0.05], [0.35, 0.22, 0.12], [0.75, 0.60, 0.35], [0.45, 0.45, 0.45]];
    let jitter = |rng: &mut Rng, c: [f64; 3], a: f64| c.map(|x| (x + rng.random_range(-a..a)).clamp(0.0, 1.0));
    let base = skin_tones[rng.random_range(0..skin_tones.len())];
    let skin = jitter(rng, base, 0.04);
    let base = hair_tones[rng.random_range(0..hair_tones.len())];
    let hair = jitter(rng, base, 0.05);
    let iris = jitter(rng, [0.25, 0.35, 0.45], 0.15);
    let lips = jitter(rng, [0.70, 0.30, 0.30], 0.08);
    let hairline = rng.random_range(0.70..0.80);
    let side = rng.random_range(0.22..0.30);
    let eye_v = rng.random_range(0.54..0.58);
    let eye_du = rng.random_range(0.055..0.07);
    let mouth_v = 1.0 - crate::morphable::MOUTH_POLAR / std::f64::consts::PI;
    let blush = rng.random_range(0.0..0.12);
    let noise = smooth_noise(rng, res, 6);

    let mut rgb = Vec::with_capacity(res * res * 3);
    for i in 0..res {
        let v = 1.0 - (i as f64 + 0.5) / res as f64;
        for j in 0..res {
            let u = (j as f64 + 0.5) / res as f64;
            let n = noise[i * res + j];
            let mut c = skin.map(|x| x * (1.0 + 0.05 * n));
            let cheek = blob(u, v, 0.5 - 0.08, 0.47, 0.05, 0.05).max(blob(u, v, 0.5 + 0.08, 0.47, 0.05, 0.05));
            c = [c[0] + blush * cheek, c[1] - 0.3 * blush * cheek, c[2] - 0.3 * blush * cheek];
            for du in [-eye_du, eye_du] {
                let brow = blob(u, v, 0.5 + du, eye_v + 0.06, 0.04, 0.012);
                c = mix(c, hair, 0.8 * brow);
                let white = blob(u, v, 0.5 + du, eye_v, 0.03, 0.018);
                c = mix(c, [0.95, 0.95, 0.93], white.min(1.0) * 0.9);
                let pupil = blob(u, v, 0.5 + du, eye_v, 0.012, 0.014);
                c = mix(c, iris, pupil.sqrt());
            }
            let lip = blob(u, v, 0.5, mouth_v, 0.055, 0.03);
            c = mix(c, lips, lip.sqrt());
            let nose = blob(u, v, 0.5, 0.47, 0.015, 0.04);
            c = c.map(|x| x * (1.0 - 0.08 * nose));
            let back = ((u - 0.5).abs() - side).max(0.0) * 12.0;
            let top = (v - hairline).max(0.0) * 14.0;
            let h = (back + top).min(1.0);
            c = mix(c, hair.map(|x| x * (1.0 + 0.15 * n)), h);
            rgb.extend(c.map(|x| x.clamp(0.0, 1.0)));
        }
    }
    UVTexture { res, rgb }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn sample_params(model: &MorphableModel, rng: &mut Rng) -> FaceParams {
    let shape_n = Normal::new(0.0, 0.15).expect("valid normal");
    let mut p = FaceParams::neutral(model, [0.0; 3]);
    p.shape.iter_mut().for_each(|x| *x = shape_n.sample(rng));
    for (k, x) in p.expression.iter_mut().enumerate() {
        *x = Normal::new(0.0, 0.3 * model.expr_covariance[k].sqrt()).expect("valid normal").sample(rng);
    }
    p.pose[0] = rng.random_range(-0.15..0.15);
    p.pose[1] = rng.random_range(-0.3..0.3);
    p.pose[2] = rng.random_range(-0.1..0.1);
    p.pose[3] = rng.random_range(0.0..0.3);
    p.camera = vec![rng.random_range(8.0..9.5), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)];
    p
}

/// Renders `n` procedurally textured toy faces over random backgrounds into
/// `dir` as `NNNNN.png` + `NNNNN.json`.
pub fn make_synthetic_dataset(model: &MorphableModel, n: usize, seed: u64, dir: &Path, res: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = rng::stream(seed, "synthetic-dataset");
    for i in 0..n {
        let params = sample_params(model, &mut rng);
        let tex = procedural_texture(&mut rng, 64);
        let mesh = model.decode(&params)?;
        let frag = rasterize_screen(&project(&mesh.vertices, params.camera3(), res, res), &mesh.topology, res, res);
        let face = shade_image(&frag, &tex);
        let bg0: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let bg1: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mouth = [0.25, 0.05, 0.06];
        let mut img = vec![0.0; res * res * 3];
        for p in 0..res * res {
            let t = (p / res) as f64 / res as f64;
            let color = if frag.face_id[p] < 0 {
                mix(bg0, bg1, t)
            } else if mesh.topology.is_mouth(frag.face_id[p] as usize) {
                mouth
            } else {
                [face.rgb[3 * p], face.rgb[3 * p + 1], face.rgb[3 * p + 2]]
            };
            img[3 * p..3 * p + 3].copy_from_slice(&color);
        }
        let stem = format!("{i:05}");
        write_png(&dir.join(format!("{stem}.png")), &img, res, res)?;
        let json = serde_json::to_string_pretty(&params)?;
        let jp = dir.join(format!("{stem}.json"));
        std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    }
    Ok(dir.to_path_buf())
}
