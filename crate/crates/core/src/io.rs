//! File formats: zip array containers, 8-bit PNG images and Wavefront OBJ.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use zip::write::SimpleFileOptions;

/// Writes a zip archive of named little-endian arrays plus JSON documents.
pub struct ContainerWriter {
    zip: zip::ZipWriter<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl ContainerWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            zip: zip::ZipWriter::new(BufWriter::new(file)),
            path: path.to_path_buf(),
        })
    }

    fn entry(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let opts = SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
        self.zip.start_file(name, opts)?;
        self.zip.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }

    pub fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value)?;
        self.entry(name, &bytes)
    }

    /// Stores values as float32.
    pub fn f32(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.entry(name, &bytes)
    }

    pub fn u32(&mut self, name: &str, values: &[u32]) -> Result<()> {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entry(name, &bytes)
    }

    pub fn finish(self) -> Result<()> {
        let mut inner = self.zip.finish()?;
        inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Fully-loaded zip container.
pub struct ContainerReader {
    entries: BTreeMap<String, Vec<u8>>,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut zip = zip::ZipArchive::new(file)?;
        let mut entries = BTreeMap::new();
        for i in 0..zip.len() {
            let mut f = zip.by_index(i)?;
            let mut buf = Vec::with_capacity(f.size() as usize);
            f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
            entries.insert(f.name().to_string(), buf);
        }
        Ok(Self { entries })
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::load(name, "missing from container"))
    }

    pub fn json(&self, name: &str) -> Result<serde_json::Value> {
        serde_json::from_slice(self.bytes(name)?).map_err(|e| Error::load(name, e.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<Vec<f64>> {
        let b = self.bytes(name)?;
        if b.len() % 4 != 0 {
            return Err(Error::load(name, format!("byte length {} is not a multiple of 4", b.len())));
        }
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn u32(&self, name: &str) -> Result<Vec<u32>> {
        let b = self.bytes(name)?;
        if b.len() % 4 != 0 {
            return Err(Error::load(name, format!("byte length {} is not a multiple of 4", b.len())));
        }
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Reads an 8-bit PNG as row-major RGB floats in [0,1]; returns (data, height, width).
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok((data, h as usize, w as usize))
}

/// Writes row-major RGB floats (clamped to [0,1]) as an 8-bit PNG.
pub fn write_png(path: &Path, rgb: &[f64], height: usize, width: usize) -> Result<()> {
    assert_eq!(rgb.len(), height * width * 3);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

/// Writes a mesh with per-corner texture coordinates as Wavefront OBJ.
pub fn write_obj(path: &Path, vertices: &[[f64; 3]], faces: &[[u32; 3]], corner_uv: &[[[f64; 2]; 3]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for v in vertices {
        writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]).map_err(io)?;
    }
    for corners in corner_uv {
        for uv in corners {
            writeln!(out, "vt {:.6} {:.6}", uv[0], uv[1]).map_err(io)?;
        }
    }
    for (fi, f) in faces.iter().enumerate() {
        let t = 3 * fi + 1;
        writeln!(
            out,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            t,
            f[1] + 1,
            t + 1,
            f[2] + 1,
            t + 2
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
