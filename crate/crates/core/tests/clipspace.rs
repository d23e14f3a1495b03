use facetex::autodiff::{grad, Tensor};
use facetex::clipspace::{
    clip_score, cosine, directional_loss, embed_image, embed_text, image_direction, load_backend, text_direction,
    BackendConfig, EmbeddingBackend, EmbeddingVector, ImageDirection, PromptPair, StubBackend, DEFAULT_DIM,
    INIT_PROMPT,
};
use facetex::diffrender::RenderedImage;
use facetex::rng::{self, normal_vec};
use facetex::{Error, Result};
use rand::Rng;

fn stub() -> StubBackend {
    StubBackend::new(7, DEFAULT_DIM).unwrap()
}

fn image(seed: u64, h: usize, w: usize) -> RenderedImage {
    let mut r = rng::stream(seed, "img");
    RenderedImage {
        height: h,
        width: w,
        rgb: (0..h * w * 3).map(|_| r.random::<f64>()).collect(),
        mask: vec![true; h * w],
    }
}

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), &[v.len()])
}

#[test]
fn text_embedding_is_deterministic_and_distinguishes_texts() {
    let b = stub();
    let a1 = embed_text(&b, "a").unwrap();
    let a2 = embed_text(&b, "a").unwrap();
    let bb = embed_text(&b, "b").unwrap();
    assert_eq!(a1, a2);
    assert_ne!(a1, bb);
    assert_eq!(a1.v.len(), 512);
    assert!(a1.v.iter().all(|x| x.is_finite()));
    let other_seed = StubBackend::new(8, DEFAULT_DIM).unwrap();
    assert_ne!(embed_text(&other_seed, "a").unwrap(), a1);
}

#[test]
fn empty_text_and_bad_prompts_are_rejected() {
    let b = stub();
    assert!(matches!(embed_text(&b, "  "), Err(Error::InvalidPrompt(_))));
    assert!(matches!(PromptPair::new("x", "x"), Err(Error::InvalidPrompt(_))));
    assert!(matches!(PromptPair::new("", "x"), Err(Error::InvalidPrompt(_))));
    assert!(matches!(PromptPair::target(INIT_PROMPT), Err(Error::InvalidPrompt(_))));
    assert_eq!(PromptPair::target("an old face").unwrap().t_init, "A photo of a face");
}

#[test]
fn pretrained_backend_reports_unavailable() {
    let err = load_backend(&BackendConfig::Pretrained { weights: None }).err().unwrap();
    assert!(matches!(err, Error::BackendUnavailable(_)));
    assert!(err.to_string().contains("stub"));
    let cfg: BackendConfig = toml::from_str("kind = \"stub\"\nseed = 3").unwrap();
    assert_eq!(cfg, BackendConfig::Stub { seed: 3, dim: 512 });
    assert_eq!(load_backend(&cfg).unwrap().dim(), 512);
}

#[test]
fn text_direction_is_difference_and_negates_on_swap() {
    let b = stub();
    let pair = PromptPair::new("a face", "a smiling face").unwrap();
    let d = text_direction(&b, &pair).unwrap();
    let (ea, eb) = (embed_text(&b, "a face").unwrap(), embed_text(&b, "a smiling face").unwrap());
    for k in 0..d.v.len() {
        assert_eq!(d.v[k], eb.v[k] - ea.v[k]);
    }
    let s = text_direction(&b, &pair.swapped()).unwrap();
    assert!(d.v.iter().zip(&s.v).all(|(x, y)| *x == -*y));
}

#[test]
fn tokens_that_average_equal_are_degenerate() {
    let b = stub();
    // identical token bags after lowercasing embed identically
    let pair = PromptPair::new("Red face", "face red").unwrap();
    assert!(matches!(text_direction(&b, &pair), Err(Error::DegeneratePrompt(_))));
}

#[test]
fn image_embedding_is_deterministic_and_bounds_checked() {
    let b = stub();
    let img = image(1, 12, 10);
    let e1 = embed_image(&b, &img).unwrap();
    let e2 = embed_image(&b, &img).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.v.len(), 512);
    let mut bad = img.clone();
    bad.rgb[0] = 1.5;
    assert!(matches!(embed_image(&b, &bad), Err(Error::Validation(_))));
}

#[test]
fn image_is_resampled_to_input_resolution() {
    let b = stub();
    // a constant image encodes identically at any size
    let flat = |h: usize, w: usize| RenderedImage {
        height: h,
        width: w,
        rgb: vec![0.3; h * w * 3],
        mask: vec![true; h * w],
    };
    let a = embed_image(&b, &flat(16, 16)).unwrap();
    let c = embed_image(&b, &flat(224, 224)).unwrap();
    let d = embed_image(&b, &flat(37, 51)).unwrap();
    for k in 0..a.v.len() {
        assert!((a.v[k] - c.v[k]).abs() < 1e-9);
        assert!((a.v[k] - d.v[k]).abs() < 1e-9);
    }
}

#[test]
fn image_gradient_matches_finite_differences() {
    let b = stub();
    let img = image(2, 16, 16);
    let probe = normal_vec(&mut rng::stream(3, "probe"), 512);
    let f = |x: &Tensor| b.embed_image_tensor(x).unwrap().dot(&t(&probe));
    let x = Tensor::param(img.rgb.clone(), &[16, 16, 3]);
    let g = grad(&f(&x), &[&x], false).remove(0);
    let h = 1e-4;
    let mut r = rng::stream(4, "coords");
    for _ in 0..24 {
        let k = r.random_range(0..img.rgb.len());
        let mut p = img.rgb.clone();
        p[k] += h;
        let mut m = img.rgb.clone();
        m[k] -= h;
        let fd = (f(&Tensor::from_vec(p, &[16, 16, 3])).item() - f(&Tensor::from_vec(m, &[16, 16, 3])).item()) / (2.0 * h);
        assert!((fd - g.data()[k]).abs() < 1e-5, "coord {k}: {fd} vs {}", g.data()[k]);
    }
}

#[test]
fn image_direction_properties() {
    let b = stub();
    let (i0, i1, i2) = (image(5, 16, 16), image(6, 16, 16), image(7, 16, 16));
    let zero = image_direction(&b, &i0, &i0).unwrap();
    assert!(zero.v.iter().all(|&x| x == 0.0));
    // linear encoder: directions add along a path
    let d01 = image_direction(&b, &i0, &i1).unwrap();
    let d12 = image_direction(&b, &i1, &i2).unwrap();
    let d02 = image_direction(&b, &i0, &i2).unwrap();
    for k in 0..d02.v.len() {
        assert!((d01.v[k] + d12.v[k] - d02.v[k]).abs() < 1e-9);
    }
    let cached = ImageDirection::new(&b, &i0).unwrap();
    assert_eq!(cached.init_embedding(), &embed_image(&b, &i0).unwrap());
    let tgt = Tensor::from_vec(i1.rgb.clone(), &[16, 16, 3]);
    let via_cache = cached.direction(&b, &tgt).unwrap().to_vec();
    for k in 0..via_cache.len() {
        assert!((via_cache[k] - d01.v[k]).abs() < 1e-12);
    }
}

#[test]
fn cached_direction_only_differentiates_the_target() {
    let b = stub();
    let init = Tensor::param(image(8, 8, 8).rgb, &[8, 8, 3]);
    let tgt = Tensor::param(image(9, 8, 8).rgb, &[8, 8, 3]);
    let dir = ImageDirection::from_tensor(&b, &init).unwrap();
    let out = dir.direction(&b, &tgt).unwrap().sum();
    let g = grad(&out, &[&init, &tgt], false);
    assert!(g[0].data().iter().all(|&x| x == 0.0));
    assert!(g[1].data().iter().any(|&x| x != 0.0));
}

#[test]
fn directional_loss_identities() {
    let dt = normal_vec(&mut rng::stream(10, "dt"), 64);
    let par = directional_loss(&t(&dt), &t(&dt)).item();
    let anti: Vec<f64> = dt.iter().map(|x| -x).collect();
    let anti = directional_loss(&t(&anti), &t(&dt)).item();
    let mut orth = normal_vec(&mut rng::stream(11, "o"), 64);
    let proj: f64 = orth.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() / dt.iter().map(|x| x * x).sum::<f64>();
    orth.iter_mut().zip(&dt).for_each(|(o, d)| *o -= proj * d);
    let orth = directional_loss(&t(&orth), &t(&dt)).item();
    assert!(par.abs() < 1e-6, "{par}");
    assert!((anti - 2.0).abs() < 1e-6, "{anti}");
    assert!((orth - 1.0).abs() < 1e-6, "{orth}");
}

#[test]
fn directional_loss_is_scale_invariant_and_bounded() {
    let mut r = rng::stream(12, "s");
    for _ in 0..50 {
        let di = normal_vec(&mut r, 32);
        let dt = normal_vec(&mut r, 32);
        let (a, b) = (r.random_range(1e-3..1e3), r.random_range(1e-3..1e3));
        let base = directional_loss(&t(&di), &t(&dt)).item();
        let sa: Vec<f64> = di.iter().map(|x| a * x).collect();
        let sb: Vec<f64> = dt.iter().map(|x| b * x).collect();
        let scaled = directional_loss(&t(&sa), &t(&sb)).item();
        assert!((base - scaled).abs() < 1e-6);
        assert!((0.0..=2.0).contains(&base));
    }
}

#[test]
fn directional_loss_guard_returns_one_without_gradient() {
    let di = Tensor::param(vec![1e-10, 0.0, 0.0], &[3]);
    let dt = t(&[1.0, 2.0, 3.0]);
    let l = directional_loss(&di, &dt);
    assert_eq!(l.item(), 1.0);
    let g = grad(&l, &[&di], false).remove(0);
    assert!(g.data().iter().all(|&x| x == 0.0));
}

#[test]
fn directional_loss_gradient_matches_finite_differences() {
    let di0 = normal_vec(&mut rng::stream(13, "di"), 16);
    let dt = t(&normal_vec(&mut rng::stream(13, "dt"), 16));
    let di = Tensor::param(di0.clone(), &[16]);
    let g = grad(&directional_loss(&di, &dt), &[&di], false).remove(0);
    let h = 1e-6;
    for k in 0..16 {
        let mut p = di0.clone();
        p[k] += h;
        let mut m = di0.clone();
        m[k] -= h;
        let fd = (directional_loss(&t(&p), &dt).item() - directional_loss(&t(&m), &dt).item()) / (2.0 * h);
        let an = g.data()[k];
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{k}: {fd} vs {an}");
    }
}

/// Backend whose image and text embeddings are chosen directly.
struct Fixed {
    text: Vec<f64>,
    sign: f64,
}

impl EmbeddingBackend for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }
    fn dim(&self) -> usize {
        self.text.len()
    }
    fn embed_text(&self, _: &str) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector { v: self.text.clone() })
    }
    fn embed_image_tensor(&self, image: &Tensor) -> Result<Tensor> {
        // positive multiple of the text vector, scaled by mean brightness
        let m = image.mean().item() + 0.1;
        Ok(t(&self.text).scale(self.sign * m))
    }
}

#[test]
fn clip_score_extremes() {
    let text = vec![0.3, -1.0, 2.0, 0.5];
    let imgs = vec![image(14, 8, 8), image(15, 6, 9)];
    let same = Fixed { text: text.clone(), sign: 1.0 };
    let opposite = Fixed { text, sign: -1.0 };
    assert!((clip_score(&same, &imgs, "x").unwrap() - 1.0).abs() < 1e-12);
    assert!((clip_score(&opposite, &imgs, "x").unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(clip_score(&same, &[], "x"), Err(Error::Empty(_))));
    assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
}
