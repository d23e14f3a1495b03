use facetex::clipspace::{EmbeddingBackend, StubBackend};
use facetex::diffrender::RenderedImage;
use facetex::evalkit::{
    average_clip_score, extract_features, fid, kid, kid_blocked, load_extractor, ExtractorConfig, FeatureSet,
    StubExtractor,
};
use facetex::rng::{self, normal_vec, Rng};
use facetex::Error;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn gaussian(r: &mut Rng, n: usize, d: usize, mu: &[f64]) -> FeatureSet {
    let z = normal_vec(r, n * d);
    let f = z.iter().enumerate().map(|(k, x)| x + mu[k % d]).collect();
    FeatureSet::new(f, n, d, "test").unwrap()
}

fn permute(f: &FeatureSet, order: &[usize]) -> FeatureSet {
    let rows = order.iter().flat_map(|&i| f.row(i).to_vec()).collect();
    FeatureSet::new(rows, f.n, f.d, f.extractor.clone()).unwrap()
}

/// Quadratic-time unbiased MMD² written out over full kernel matrices.
fn brute_mmd(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let d = a.d as f64;
    let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let (m, n) = (a.n, b.n);
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += k(a.row(i), a.row(j));
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += k(b.row(i), b.row(j));
            }
        }
    }
    let mut sxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sxy += k(a.row(i), b.row(j));
        }
    }
    sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64
}

#[test]
fn fid_matches_closed_form_for_shifted_gaussians() {
    let mut r = rng::stream(1, "fid");
    let mu = [0.8, -0.5, 0.3, 1.0, -0.7, 0.2, 0.6, -0.9];
    let expected: f64 = mu.iter().map(|x| x * x).sum();
    let a = gaussian(&mut r, 10_000, 8, &[0.0; 8]);
    let b = gaussian(&mut r, 10_000, 8, &mu);
    let got = fid(&a, &b).unwrap();
    assert!((got - expected).abs() <= 0.05 * expected, "fid {got} vs {expected}");
}

#[test]
fn fid_self_symmetry_and_order() {
    let mut r = rng::stream(2, "fid");
    let a = gaussian(&mut r, 300, 6, &[0.0; 6]);
    let b = gaussian(&mut r, 250, 6, &[0.5; 6]);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
    assert!((ab - ba).abs() <= 1e-6);
    let mut order: Vec<usize> = (0..a.n).collect();
    order.shuffle(&mut r);
    assert!((fid(&permute(&a, &order), &b).unwrap() - ab).abs() <= 1e-6);
}

#[test]
fn fid_handles_rank_deficient_covariance() {
    let mut r = rng::stream(3, "fid");
    // fewer samples than dimensions
    let a = gaussian(&mut r, 5, 12, &[0.0; 12]);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    let b = gaussian(&mut r, 5, 12, &[0.0; 12]);
    assert!(fid(&a, &b).unwrap().is_finite());
}

#[test]
fn kid_matches_brute_force() {
    let mut r = rng::stream(4, "kid");
    for (m, n) in [(50, 50), (50, 37)] {
        let a = gaussian(&mut r, m, 5, &[0.0; 5]);
        let b = gaussian(&mut r, n, 5, &[0.3; 5]);
        let got = kid(&a, &b).unwrap();
        let want = brute_mmd(&a, &b);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn kid_identical_and_separated_sets() {
    let mut r = rng::stream(5, "kid");
    let a = gaussian(&mut r, 60, 4, &[0.0; 4]);
    assert!(kid(&a, &a).unwrap().abs() <= 1e-6);
    assert!(kid_blocked(&a, &a, 10).unwrap().abs() <= 1e-6);
    let near: Vec<f64> = (0..40).flat_map(|i| vec![0.01 * i as f64; 4]).collect();
    let far: Vec<f64> = (0..40).flat_map(|i| vec![3.0 + 0.01 * i as f64; 4]).collect();
    let (p, q) = (FeatureSet::new(near, 40, 4, "c").unwrap(), FeatureSet::new(far, 40, 4, "c").unwrap());
    assert!(kid(&p, &q).unwrap() > 0.0);
}

#[test]
fn kid_is_unbiased_under_resampling() {
    let mut r = rng::stream(6, "kid");
    let vals: Vec<f64> = (0..200)
        .map(|_| {
            let a = gaussian(&mut r, 40, 4, &[0.0; 4]);
            let b = gaussian(&mut r, 40, 4, &[0.0; 4]);
            kid(&a, &b).unwrap()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean} se {}", sd / n.sqrt());
}

#[test]
fn kid_ignores_sample_order() {
    let mut r = rng::stream(7, "kid");
    let a = gaussian(&mut r, 90, 3, &[0.0; 3]);
    let b = gaussian(&mut r, 90, 3, &[0.2; 3]);
    let mut oa: Vec<usize> = (0..90).collect();
    let mut ob = oa.clone();
    oa.shuffle(&mut r);
    ob.shuffle(&mut r);
    for block in [1000, 30] {
        let base = kid_blocked(&a, &b, block).unwrap();
        let perm = kid_blocked(&permute(&a, &oa), &permute(&b, &ob), block).unwrap();
        assert!((base - perm).abs() < 1e-10, "block {block}: {base} vs {perm}");
    }
}

#[test]
fn mismatched_extractors_are_rejected() {
    let mut r = rng::stream(8, "x");
    let a = gaussian(&mut r, 10, 3, &[0.0; 3]);
    let mut b = gaussian(&mut r, 10, 3, &[0.0; 3]);
    b.extractor = "other".into();
    assert!(matches!(fid(&a, &b), Err(Error::Validation(_))));
    assert!(matches!(kid(&a, &b), Err(Error::Validation(_))));
    let c = FeatureSet::new(vec![0.0; 8], 2, 4, "test").unwrap();
    assert!(fid(&a, &c).is_err());
    assert!(FeatureSet::new(vec![0.0; 7], 2, 4, "t").is_err());
    assert!(FeatureSet::new(vec![f64::NAN; 8], 2, 4, "t").is_err());
    let one = FeatureSet::new(vec![0.0; 3], 1, 3, "test").unwrap();
    assert!(fid(&one, &a).is_err());
}

fn images(seed: u64, n: usize, h: usize, w: usize) -> Vec<RenderedImage> {
    let mut r = rng::stream(seed, "imgs");
    (0..n)
        .map(|_| RenderedImage {
            height: h,
            width: w,
            rgb: (0..h * w * 3).map(|_| r.random::<f64>()).collect(),
            mask: vec![true; h * w],
        })
        .collect()
}

#[test]
fn stub_extractor_is_deterministic() {
    let ex = load_extractor(&ExtractorConfig::default()).unwrap();
    let imgs = images(9, 4, 20, 24);
    let f1 = extract_features(&ex, &imgs).unwrap();
    let f2 = extract_features(&StubExtractor::new(0, 64, 16).unwrap(), &imgs).unwrap();
    assert_eq!(f1, f2);
    assert_eq!((f1.n, f1.d), (4, 64));
    assert_eq!(f1.extractor, ex.id());
    let other = extract_features(&StubExtractor::new(1, 64, 16).unwrap(), &imgs).unwrap();
    assert!(fid(&f1, &other).is_err());
    assert!(matches!(
        load_extractor(&ExtractorConfig::Pretrained { weights: None }),
        Err(Error::BackendUnavailable(_))
    ));
}

#[test]
fn averaged_clip_score_is_mean_over_backends() {
    let (b1, b2) = (StubBackend::new(1, 32).unwrap(), StubBackend::new(2, 32).unwrap());
    let imgs = images(10, 2, 8, 8);
    let s1 = facetex::clipspace::clip_score(&b1, &imgs, "a face").unwrap();
    let s2 = facetex::clipspace::clip_score(&b2, &imgs, "a face").unwrap();
    let both: [&dyn EmbeddingBackend; 2] = [&b1, &b2];
    let avg = average_clip_score(&both, &imgs, "a face").unwrap();
    assert!((avg - 0.5 * (s1 + s2)).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&avg));
}
