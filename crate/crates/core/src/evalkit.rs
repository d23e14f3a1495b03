//! Distribution metrics over image features.

use crate::clipspace::{clip_score, EmbeddingBackend};
use crate::diffrender::RenderedImage;
use crate::error::{Error, Result};
use crate::rng::{self, normal_vec};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub const KID_BLOCK: usize = 1000;
pub const KID_DEGREE: i32 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// Row-major `[n, d]`.
    pub features: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(features: Vec<f64>, n: usize, d: usize, extractor: impl Into<String>) -> Result<Self> {
        if features.len() != n * d {
            return Err(Error::dim("feature matrix", n * d, features.len()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(Self {
            features,
            n,
            d,
            extractor: extractor.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.features)
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = self.matrix();
        let mu = DVector::from_iterator(self.d, (0..self.d).map(|j| x.column(j).mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centered.transpose() * &centered / (self.n as f64 - 1.0);
        (mu, cov)
    }
}

fn compatible(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.extractor != b.extractor {
        return Err(Error::Validation(format!(
            "feature extractors differ: {} vs {}",
            a.extractor, b.extractor
        )));
    }
    if a.d != b.d {
        return Err(Error::dim("feature dimension", a.d, b.d));
    }
    Ok(())
}

/// Square root of a symmetric PSD matrix; eigenvalues below 1e-6 are treated as zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| if l < 1e-6 { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    compatible(a, b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::Validation("FID needs at least two samples per set".into()));
    }
    let (mu_a, cov_a) = a.mean_cov();
    let (mu_b, cov_b) = b.mean_cov();
    let diff = (&mu_a - &mu_b).norm_squared();
    // tr sqrt(Σa Σb) = tr sqrt(Σa^½ Σb Σa^½), which is symmetric
    let ra = sqrtm_psd(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok(diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

fn poly_kernel(x: &[f64], y: &[f64], d: usize) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d as f64 + 1.0).powi(KID_DEGREE)
}

/// Unbiased squared MMD of two index sets. Cross pairs holding the same
/// sample (bitwise equal rows) are left out like the within-set diagonals.
pub fn mmd2_unbiased(a: &FeatureSet, ai: &[usize], b: &FeatureSet, bi: &[usize]) -> f64 {
    let (m, n, d) = (ai.len(), bi.len(), a.d);
    let k = |x: &[f64], y: &[f64]| poly_kernel(x, y, d);
    let mut kxx = 0.0;
    for (p, &i) in ai.iter().enumerate() {
        for &j in &ai[p + 1..] {
            kxx += 2.0 * k(a.row(i), a.row(j));
        }
    }
    let mut kyy = 0.0;
    for (p, &i) in bi.iter().enumerate() {
        for &j in &bi[p + 1..] {
            kyy += 2.0 * k(b.row(i), b.row(j));
        }
    }
    let (mut kxy, mut pairs) = (0.0, 0usize);
    for &i in ai {
        for &j in bi {
            let (x, y) = (a.row(i), b.row(j));
            if x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()) {
                continue;
            }
            kxy += k(x, y);
            pairs += 1;
        }
    }
    let cross = if pairs == 0 { 0.0 } else { kxy / pairs as f64 };
    kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * cross
}

fn row_hash(row: &[f64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for x in row {
        h ^= x.to_bits();
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Sample indices in an order that depends only on the row contents.
fn content_order(f: &FeatureSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.n).collect();
    idx.sort_by_cached_key(|&i| (row_hash(f.row(i)), i));
    idx
}

/// Kernel inception distance: unbiased MMD² with the cubic polynomial kernel,
/// averaged over blocks of at most `block` samples. Blocks are cut from a
/// content-hashed ordering so the result does not depend on sample order.
pub fn kid_blocked(a: &FeatureSet, b: &FeatureSet, block: usize) -> Result<f64> {
    compatible(a, b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::Validation("KID needs at least two samples per set".into()));
    }
    let blocks = (a.n.min(b.n) / block.max(2)).max(1);
    if blocks == 1 {
        let (ai, bi): (Vec<usize>, Vec<usize>) = ((0..a.n).collect(), (0..b.n).collect());
        return Ok(mmd2_unbiased(a, &ai, b, &bi));
    }
    let (oa, ob) = (content_order(a), content_order(b));
    let bounds = |n: usize, k: usize| (k * n / blocks, (k + 1) * n / blocks);
    let mut total = 0.0;
    for k in 0..blocks {
        let (a0, a1) = bounds(a.n, k);
        let (b0, b1) = bounds(b.n, k);
        total += mmd2_unbiased(a, &oa[a0..a1], b, &ob[b0..b1]);
    }
    Ok(total / blocks as f64)
}

pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    kid_blocked(a, b, KID_BLOCK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorConfig {
    Stub {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_feature_dim")]
        dim: usize,
        #[serde(default = "default_side")]
        side: usize,
    },
    Pretrained {
        #[serde(default)]
        weights: Option<std::path::PathBuf>,
    },
}

fn default_feature_dim() -> usize {
    64
}

fn default_side() -> usize {
    16
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Stub {
            seed: 0,
            dim: default_feature_dim(),
            side: default_side(),
        }
    }
}

/// Seeded Gaussian projection of area-downsampled pixels.
pub struct StubExtractor {
    side: usize,
    dim: usize,
    proj: Vec<f64>,
    id: String,
}

impl StubExtractor {
    pub fn new(seed: u64, dim: usize, side: usize) -> Result<Self> {
        if dim == 0 || side == 0 {
            return Err(Error::Validation("stub extractor needs positive dim and side".into()));
        }
        let inputs = side * side * 3;
        let scale = 1.0 / (inputs as f64).sqrt();
        let proj = normal_vec(&mut rng::stream(seed, "stub-features"), inputs * dim)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Ok(Self {
            side,
            dim,
            proj,
            id: format!("stub(seed={seed},dim={dim},side={side})"),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn downsample(&self, img: &RenderedImage) -> Vec<f64> {
        let s = self.side;
        let mut out = vec![0.0; s * s * 3];
        let mut count = vec![0usize; s * s];
        for y in 0..img.height {
            for x in 0..img.width {
                let (oy, ox) = (y * s / img.height, x * s / img.width);
                count[oy * s + ox] += 1;
                for c in 0..3 {
                    out[(oy * s + ox) * 3 + c] += img.rgb[(y * img.width + x) * 3 + c];
                }
            }
        }
        for (p, &n) in count.iter().enumerate() {
            if n > 0 {
                out[p * 3..p * 3 + 3].iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        out
    }

    pub fn features(&self, img: &RenderedImage) -> Vec<f64> {
        let x = self.downsample(img);
        let mut f = vec![0.0; self.dim];
        for (i, xi) in x.iter().enumerate() {
            let row = &self.proj[i * self.dim..(i + 1) * self.dim];
            for (o, w) in f.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        f
    }
}

pub fn load_extractor(cfg: &ExtractorConfig) -> Result<StubExtractor> {
    match cfg {
        ExtractorConfig::Stub { seed, dim, side } => StubExtractor::new(*seed, *dim, *side),
        ExtractorConfig::Pretrained { weights } => Err(Error::BackendUnavailable(
            weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "pretrained feature network".into()),
        )),
    }
}

pub fn extract_features(extractor: &StubExtractor, images: &[RenderedImage]) -> Result<FeatureSet> {
    let mut feats = Vec::with_capacity(images.len() * extractor.dim);
    for img in images {
        if img.rgb.len() != img.height * img.width * 3 {
            return Err(Error::dim("image", img.height * img.width * 3, img.rgb.len()));
        }
        feats.extend(extractor.features(img));
    }
    FeatureSet::new(feats, images.len(), extractor.dim, extractor.id.clone())
}

/// Mean of per-backend clip scores.
pub fn average_clip_score(backends: &[&dyn EmbeddingBackend], images: &[RenderedImage], text: &str) -> Result<f64> {
    if backends.is_empty() {
        return Err(Error::Empty("backend list"));
    }
    let mut s = 0.0;
    for b in backends {
        s += clip_score(*b, images, text)?;
    }
    Ok(s / backends.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub clip_score: Option<f64>,
    pub n: usize,
    pub extractor: String,
    pub kid_block: usize,
    pub kid_kernel: String,
}
