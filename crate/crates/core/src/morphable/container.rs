use super::{MorphableModel, Topology, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use serde_json::json;
use std::path::Path;

const VERSION: u64 = 1;

pub fn save_model(model: &MorphableModel, path: &Path) -> Result<()> {
    let topo = &model.topology;
    let mut w = ContainerWriter::create(path)?;
    w.json(
        "meta.json",
        &json!({
            "version": VERSION,
            "n_vertices": model.num_vertices(),
            "n_faces": topo.num_faces(),
            "shape_rank": model.shape_rank(),
            "expr_rank": model.expr_rank(),
            "n_joints": NUM_JOINTS,
            "dtypes": {
                "template.bin": "float32", "shape_basis.bin": "float32", "expr_basis.bin": "float32",
                "skin_weights.bin": "float32", "joints.bin": "float32", "uv.bin": "float32",
                "faces.bin": "uint32", "expr_cov.bin": "float32", "mouth_faces.bin": "uint32",
            },
        }),
    )?;
    w.f32("template.bin", &model.template)?;
    w.f32("shape_basis.bin", &model.shape_basis)?;
    w.f32("expr_basis.bin", &model.expr_basis)?;
    w.f32("skin_weights.bin", &model.skin_weights.iter().flatten().copied().collect::<Vec<_>>())?;
    w.f32("joints.bin", &model.joints.iter().flatten().copied().collect::<Vec<_>>())?;
    w.f32("uv.bin", &topo.uv.iter().flatten().flatten().copied().collect::<Vec<_>>())?;
    w.u32("faces.bin", &topo.faces.iter().flatten().copied().collect::<Vec<_>>())?;
    w.f32("expr_cov.bin", &model.expr_covariance)?;
    w.u32("mouth_faces.bin", &topo.mouth_faces)?;
    w.finish()
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::load(format!("meta.json:{key}"), "missing or not an integer"))
}

fn expect_len(field: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::load(field, format!("expected {expected} values, got {got}")));
    }
    Ok(())
}

fn f32_field(r: &ContainerReader, file: &str, field: &str) -> Result<Vec<f64>> {
    if !r.has(file) {
        return Err(Error::load(field, format!("{file} missing from container")));
    }
    r.f32(file)
}

fn u32_field(r: &ContainerReader, file: &str, field: &str) -> Result<Vec<u32>> {
    if !r.has(file) {
        return Err(Error::load(field, format!("{file} missing from container")));
    }
    r.u32(file)
}

pub fn load_model(path: &Path) -> Result<MorphableModel> {
    let r = ContainerReader::open(path)?;
    let meta = r.json("meta.json")?;
    let n = meta_usize(&meta, "n_vertices")?;
    let nf = meta_usize(&meta, "n_faces")?;
    let ks = meta_usize(&meta, "shape_rank")?;
    let ke = meta_usize(&meta, "expr_rank")?;

    let template = f32_field(&r, "template.bin", "template")?;
    expect_len("template", template.len(), 3 * n)?;
    let shape_basis = f32_field(&r, "shape_basis.bin", "shape_basis")?;
    expect_len("shape_basis", shape_basis.len(), 3 * n * ks)?;
    let expr_basis = f32_field(&r, "expr_basis.bin", "expr_basis")?;
    expect_len("expr_basis", expr_basis.len(), 3 * n * ke)?;
    let sw = f32_field(&r, "skin_weights.bin", "skin_weights")?;
    expect_len("skin_weights", sw.len(), NUM_JOINTS * n)?;
    let jt = f32_field(&r, "joints.bin", "joints")?;
    expect_len("joints", jt.len(), 3 * NUM_JOINTS)?;
    let uv = f32_field(&r, "uv.bin", "uv")?;
    expect_len("uv", uv.len(), 6 * nf)?;
    let faces = u32_field(&r, "faces.bin", "faces")?;
    expect_len("faces", faces.len(), 3 * nf)?;
    let cov = f32_field(&r, "expr_cov.bin", "expr_covariance")?;
    expect_len("expr_covariance", cov.len(), ke)?;
    let mouth = u32_field(&r, "mouth_faces.bin", "mouth_faces")?;

    let skin_weights = sw.chunks_exact(NUM_JOINTS).map(|c| [c[0], c[1]]).collect();
    let joints = [[jt[0], jt[1], jt[2]], [jt[3], jt[4], jt[5]]];
    let uv = uv
        .chunks_exact(6)
        .map(|c| [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]])
        .collect();
    let faces = faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    MorphableModel::new(
        template,
        shape_basis,
        expr_basis,
        joints,
        skin_weights,
        Topology::new(faces, uv, mouth),
        cov,
    )
}
