//! C ABI over the facetex core.
//!
//! Every fallible call returns a `FacetexStatus`; on failure a message is
//! kept per thread and can be read with `facetex_last_error_message`.
//! Handles are opaque, owned by the caller and released with their `_free`
//! function. They are not thread-safe: use each handle from one thread.
//!
//! Pointer arguments must be null or valid for the documented length;
//! strings are NUL-terminated UTF-8. Null is reported, never dereferenced.

#![allow(clippy::missing_safety_doc)]

use facetex::animator::{importance_weights, AnimationSequence};
use facetex::clipspace::{self, EmbeddingBackend, StubBackend};
use facetex::diffrender::RenderedImage;
use facetex::evalkit::{self, FeatureSet};
use facetex::morphable::{self, FaceParams, MorphableModel, CAMERA_DIM, EXPR_DIM, POSE_DIM, SHAPE_DIM};
use facetex::texgen::{self, Generator};
use facetex::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FacetexStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Io = 5,
    Load = 6,
    BackendUnavailable = 7,
    InvalidPrompt = 8,
    DegeneratePrompt = 9,
    Aborted = 10,
    BufferTooSmall = 11,
    Internal = 12,
}

/// Opaque morphable face model.
pub struct FacetexModel(MorphableModel);

/// Opaque trained texture generator.
pub struct FacetexGenerator(Generator);

/// Opaque image/text embedding backend.
pub struct FacetexBackend(Box<dyn EmbeddingBackend>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FacetexStatus {
    match e {
        Error::Io { .. } => FacetexStatus::Io,
        Error::Load { .. } | Error::Container(_) | Error::Image(_) | Error::Json(_) => FacetexStatus::Load,
        Error::Dimension { .. } => FacetexStatus::Dimension,
        Error::NonFinite(_) => FacetexStatus::NonFinite,
        Error::DegeneratePrompt(_) => FacetexStatus::DegeneratePrompt,
        Error::InvalidPrompt(_) => FacetexStatus::InvalidPrompt,
        Error::BackendUnavailable(_) => FacetexStatus::BackendUnavailable,
        Error::Validation(_) | Error::Empty(_) => FacetexStatus::InvalidArgument,
        Error::Aborted { .. } => FacetexStatus::Aborted,
    }
}

struct Fail(FacetexStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type Out<T> = std::result::Result<T, Fail>;

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Out<()>) -> FacetexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FacetexStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            FacetexStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FacetexStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Out<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text(p: *const c_char, what: &str) -> Out<String> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Fail(FacetexStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Out<&'a [f64]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `values` into a caller buffer of `cap` doubles.
unsafe fn fill(out: *mut f64, cap: usize, values: &[f64]) -> Out<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    if cap < values.len() {
        return Err(Fail(
            FacetexStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T) -> Out<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

unsafe fn boxed<T>(out: *mut *mut T, value: T) -> Out<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn facetex_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn facetex_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn facetex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fixed parameter sizes: shape, expression, pose, camera.
#[no_mangle]
pub unsafe extern "C" fn facetex_param_dims(shape: *mut usize, expression: *mut usize, pose: *mut usize, camera: *mut usize) -> FacetexStatus {
    guard(|| unsafe {
        write(shape, SHAPE_DIM)?;
        write(expression, EXPR_DIM)?;
        write(pose, POSE_DIM)?;
        write(camera, CAMERA_DIM)
    })
}

/// Procedural toy head with about `n_vertices` vertices.
#[no_mangle]
pub unsafe extern "C" fn facetex_model_toy(seed: u64, n_vertices: usize, out: *mut *mut FacetexModel) -> FacetexStatus {
    guard(|| unsafe {
        if n_vertices < 16 {
            return Err(Fail(FacetexStatus::InvalidArgument, "n_vertices must be >= 16".into()));
        }
        boxed(out, FacetexModel(morphable::make_toy_model(seed, n_vertices)))
    })
}

/// Loads a model container written by `facetex_model_save` or the CLI.
#[no_mangle]
pub unsafe extern "C" fn facetex_model_load(path: *const c_char, out: *mut *mut FacetexModel) -> FacetexStatus {
    guard(|| {
        let p = PathBuf::from(text(path, "path")?);
        boxed(out, FacetexModel(morphable::load_model(&p)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn facetex_model_save(model: *const FacetexModel, path: *const c_char) -> FacetexStatus {
    guard(|| {
        let m = handle(model, "model")?;
        morphable::save_model(&m.0, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn facetex_model_free(model: *mut FacetexModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn facetex_model_num_vertices(model: *const FacetexModel, out: *mut usize) -> FacetexStatus {
    guard(|| write(out, handle(model, "model")?.0.num_vertices()))
}

#[no_mangle]
pub unsafe extern "C" fn facetex_model_num_faces(model: *const FacetexModel, out: *mut usize) -> FacetexStatus {
    guard(|| write(out, handle(model, "model")?.0.topology.num_faces()))
}

/// Deformed vertices, `3 * num_vertices` doubles row-major. `shape`,
/// `expression` and `pose` must hold the sizes from `facetex_param_dims`.
#[no_mangle]
pub unsafe extern "C" fn facetex_model_decode(
    model: *const FacetexModel,
    shape: *const f64,
    expression: *const f64,
    pose: *const f64,
    out_vertices: *mut f64,
    capacity: usize,
) -> FacetexStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let params = FaceParams {
            shape: slice(shape, SHAPE_DIM, "shape")?.to_vec(),
            pose: slice(pose, POSE_DIM, "pose")?.to_vec(),
            expression: slice(expression, EXPR_DIM, "expression")?.to_vec(),
            camera: vec![1.0, 0.0, 0.0],
        };
        let mesh = m.decode(&params)?;
        fill(out_vertices, capacity, &mesh.flat())
    })
}

/// Generator from a training checkpoint.
#[no_mangle]
pub unsafe extern "C" fn facetex_generator_load(path: *const c_char, out: *mut *mut FacetexGenerator) -> FacetexStatus {
    guard(|| {
        let (state, _) = texgen::load_checkpoint(&PathBuf::from(text(path, "path")?))?;
        boxed(out, FacetexGenerator(state.gen))
    })
}

#[no_mangle]
pub unsafe extern "C" fn facetex_generator_free(gen: *mut FacetexGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Texture side length R; textures are `R * R * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn facetex_generator_resolution(gen: *const FacetexGenerator, out: *mut usize) -> FacetexStatus {
    guard(|| write(out, handle(gen, "generator")?.0.resolution()))
}

/// Texture for the code drawn from `seed`, RGB in [0,1], row-major.
#[no_mangle]
pub unsafe extern "C" fn facetex_generator_sample(
    gen: *const FacetexGenerator,
    seed: u64,
    out_rgb: *mut f64,
    capacity: usize,
) -> FacetexStatus {
    guard(|| {
        let g = &handle(gen, "generator")?.0;
        let z = texgen::sample_z(&mut facetex::rng::stream(seed, "ffi-sample"));
        let tex = texgen::synthesize(g, &texgen::map_latent(g, &z)?)?;
        fill(out_rgb, capacity, &tex.rgb)
    })
}

/// Offline stub embedding backend.
#[no_mangle]
pub unsafe extern "C" fn facetex_backend_stub(seed: u64, dim: usize, out: *mut *mut FacetexBackend) -> FacetexStatus {
    guard(|| unsafe { boxed(out, FacetexBackend(Box::new(StubBackend::new(seed, dim)?))) })
}

#[no_mangle]
pub unsafe extern "C" fn facetex_backend_free(backend: *mut FacetexBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

#[no_mangle]
pub unsafe extern "C" fn facetex_backend_dim(backend: *const FacetexBackend, out: *mut usize) -> FacetexStatus {
    guard(|| write(out, handle(backend, "backend")?.0.dim()))
}

#[no_mangle]
pub unsafe extern "C" fn facetex_embed_text(
    backend: *const FacetexBackend,
    text_in: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> FacetexStatus {
    guard(|| {
        let b = &handle(backend, "backend")?.0;
        let e = clipspace::embed_text(&**b, &text(text_in, "text")?)?;
        fill(out, capacity, &e.v)
    })
}

fn image(rgb: &[f64], height: usize, width: usize) -> RenderedImage {
    RenderedImage {
        height,
        width,
        rgb: rgb.to_vec(),
        mask: vec![true; height * width],
    }
}

/// Image embedding of an `height * width * 3` RGB buffer in [0,1].
#[no_mangle]
pub unsafe extern "C" fn facetex_embed_image(
    backend: *const FacetexBackend,
    rgb: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    capacity: usize,
) -> FacetexStatus {
    guard(|| {
        let b = &handle(backend, "backend")?.0;
        let img = image(slice(rgb, height * width * 3, "rgb")?, height, width);
        fill(out, capacity, &clipspace::embed_image(&**b, &img)?.v)
    })
}

/// Cosine similarity between one image and a text.
#[no_mangle]
pub unsafe extern "C" fn facetex_clip_score(
    backend: *const FacetexBackend,
    rgb: *const f64,
    height: usize,
    width: usize,
    text_in: *const c_char,
    out: *mut f64,
) -> FacetexStatus {
    guard(|| {
        let b = &handle(backend, "backend")?.0;
        let img = image(slice(rgb, height * width * 3, "rgb")?, height, width);
        write(out, clipspace::clip_score(&**b, &[img], &text(text_in, "text")?)?)
    })
}

/// `1 - cos(di, dt)` over `n`-vectors, 1 when `di` is near zero.
#[no_mangle]
pub unsafe extern "C" fn facetex_directional_loss(di: *const f64, dt: *const f64, n: usize, out: *mut f64) -> FacetexStatus {
    guard(|| {
        let t = |v: &[f64]| facetex::autodiff::Tensor::from_vec(v.to_vec(), &[v.len()]);
        let l = clipspace::directional_loss(&t(slice(di, n, "di")?), &t(slice(dt, n, "dt")?));
        write(out, l.item())
    })
}

unsafe fn features(p: *const f64, n: usize, d: usize, what: &str) -> Out<FeatureSet> {
    Ok(FeatureSet::new(slice(p, n * d, what)?.to_vec(), n, d, "caller")?)
}

/// Fréchet distance between two row-major feature matrices of width `d`.
#[no_mangle]
pub unsafe extern "C" fn facetex_fid(a: *const f64, na: usize, b: *const f64, nb: usize, d: usize, out: *mut f64) -> FacetexStatus {
    guard(|| write(out, evalkit::fid(&features(a, na, d, "a")?, &features(b, nb, d, "b")?)?))
}

/// Unbiased cubic-kernel MMD² between two feature matrices.
#[no_mangle]
pub unsafe extern "C" fn facetex_kid(a: *const f64, na: usize, b: *const f64, nb: usize, d: usize, out: *mut f64) -> FacetexStatus {
    guard(|| write(out, evalkit::kid(&features(a, na, d, "a")?, &features(b, nb, d, "b")?)?))
}

/// Per-frame importance weights in [0,1]. `poses` is `frames * 6`,
/// `expressions` is `frames * expr_dim`, both row-major.
#[no_mangle]
pub unsafe extern "C" fn facetex_importance_weights(
    poses: *const f64,
    expressions: *const f64,
    frames: usize,
    expr_dim: usize,
    neutral_pose: *const f64,
    neutral_expression: *const f64,
    out: *mut f64,
    capacity: usize,
) -> FacetexStatus {
    guard(|| {
        let p = slice(poses, frames * POSE_DIM, "poses")?;
        let e = slice(expressions, frames * expr_dim, "expressions")?;
        let rows = |v: &[f64], k: usize| -> Vec<Vec<f64>> { (0..frames).map(|t| v[t * k..(t + 1) * k].to_vec()).collect() };
        let seq = AnimationSequence::new(
            rows(p, POSE_DIM),
            rows(e, expr_dim),
            slice(neutral_pose, POSE_DIM, "neutral_pose")?.to_vec(),
            slice(neutral_expression, expr_dim, "neutral_expression")?.to_vec(),
        )?;
        fill(out, capacity, &importance_weights(&seq).i)
    })
}

/// Runs a command-line invocation in-process (`argv[0]` is the program
/// name) and returns its exit code: 0 success, 2 validation, 3 abort.
#[no_mangle]
pub unsafe extern "C" fn facetex_run_cli(argc: usize, argv: *const *const c_char) -> i32 {
    use clap::Parser;
    let mut args = Vec::with_capacity(argc);
    if argc > 0 && argv.is_null() {
        set_error("`argv` is null".into());
        return 2;
    }
    for i in 0..argc {
        match text(*argv.add(i), "argv") {
            Ok(a) => args.push(a),
            Err(Fail(_, m)) => {
                set_error(m);
                return 2;
            }
        }
    }
    let cli = match facetex::cli::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            set_error(e.to_string());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match catch_unwind(AssertUnwindSafe(|| facetex::cli::execute(&cli))) {
        Ok(Ok(_)) => 0,
        Ok(Err(e)) => {
            set_error(e.to_string());
            e.exit_code()
        }
        Err(_) => {
            set_error("internal error: panic".into());
            1
        }
    }
}
