//! Command-line front end: run configuration, validation and the commands.

use crate::animator::{deviations, pretrain_zero_time, AnimationConfig, AnimationSequence, Animator, TimeVaryingTextureMapper};
use crate::clipspace::{clip_score, load_backend, text_direction, BackendConfig, PromptPair};
use crate::diffrender::RenderedImage;
use crate::error::{Error, Result};
use crate::evalkit::{self, extract_features, load_extractor, ExtractorConfig, Metrics, KID_BLOCK, KID_DEGREE};
use crate::io::{read_png, write_obj, write_png};
use crate::mappers::{frontal_params, pretrain_zero, ManipulationConfig, Manipulator, Mappers};
use crate::morphable::{load_model, make_toy_model, save_model, FaceParams, MorphableModel, POSE_DIM};
use crate::rng::{self, normal_vec};
use crate::texgen::{
    ingest_dataset, load_checkpoint, make_synthetic_dataset, map_latent, sample_renders, sample_z, save_checkpoint,
    Generator, GeneratorConfig, LatentStack, StepMetrics, TrainState, TrainingRecord,
};
use clap::{Args, Parser, Subcommand};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser, Debug, Clone)]
#[command(name = "facetex", version, about = "Face texture synthesis, text-guided editing and animation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML run configuration. Keys it leaves out keep their toy defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,
    /// Morphable model container (overrides `model.path`).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Training image directory (overrides `dataset.dir`).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Generator checkpoint (overrides `checkpoint`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Override any config key, e.g. `--set generator.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write a toy morphable model, a synthetic training set and a sample sequence.
    MakeToyAssets {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the texture generator.
    TexgenTrain {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample textures and render them on drawn geometry.
    TexgenSample {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Text-guided edit of one sampled face.
    Manipulate {
        #[arg(long)]
        prompt: String,
        /// Source prompt; defaults to the neutral face description.
        #[arg(long)]
        init_prompt: Option<String>,
        #[arg(long)]
        freeze_expression: bool,
        #[arg(long)]
        iterations: Option<usize>,
        /// Start from saved mappers instead of zero-offset pretraining.
        #[arg(long)]
        init_mappers: Option<PathBuf>,
    },
    /// Time-varying edit over an expression/pose sequence.
    Animate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        init_prompt: Option<String>,
        /// JSON-lines sequence with one neutral record.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// FID/KID between two image directories and/or clip score toward a prompt.
    Evaluate {
        /// Generated images.
        #[arg(long)]
        images: PathBuf,
        /// Reference images for FID and KID.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeToyAssets { .. } => "make-toy-assets",
            Command::TexgenTrain { .. } => "texgen-train",
            Command::TexgenSample { .. } => "texgen-sample",
            Command::Manipulate { .. } => "manipulate",
            Command::Animate { .. } => "animate",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    /// Model container; the toy model is built when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub toy_seed: u64,
    pub toy_vertices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Images written by `make-toy-assets`.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: usize,
    pub checkpoint_every: usize,
    pub snapshot_every: usize,
    pub snapshot_count: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSource,
    pub dataset: DatasetConfig,
    pub train: TrainSchedule,
    pub generator: GeneratorConfig,
    pub manipulation: ManipulationConfig,
    pub animation: AnimationConfig,
    pub backend: BackendConfig,
    pub extractor: ExtractorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("facetex-out"),
            checkpoint: None,
            model: ModelSource {
                path: None,
                toy_seed: 3,
                toy_vertices: 600,
            },
            dataset: DatasetConfig { dir: None, count: 200 },
            train: TrainSchedule {
                steps: 2000,
                checkpoint_every: 500,
                snapshot_every: 500,
                snapshot_count: 4,
                log_every: 50,
            },
            generator: GeneratorConfig::toy(),
            manipulation: ManipulationConfig::toy(),
            animation: AnimationConfig::toy(),
            backend: BackendConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

/// Overlays `top` on `base`. A table carrying `kind` replaces its
/// counterpart wholesale, since variants have disjoint fields.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if !(v.is_table() && v.get("kind").is_some()) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn parse_set(entry: &str) -> Result<toml::Value> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got `{entry}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Validation(format!("--set has an empty key in `{entry}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    Ok(key.rsplit('.').fold(value, |acc, part| {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), acc);
        toml::Value::Table(t)
    }))
}

impl RunConfig {
    /// Toy defaults, then the file, then `--set` entries, then dedicated flags.
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Validation(e.to_string()))?;
        if let Some(path) = &args.config {
            if !path.is_file() {
                return Err(Error::Validation(format!("config file {} does not exist", path.display())));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for entry in &args.set {
            merge(&mut value, parse_set(entry)?);
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Validation(e.to_string()))?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = &args.output {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = &args.model {
            cfg.model.path = Some(m.clone());
        }
        if let Some(d) = &args.dataset {
            cfg.dataset.dir = Some(d.clone());
        }
        if let Some(c) = &args.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        // one root seed drives every module
        cfg.manipulation.seed = cfg.seed;
        cfg.animation.seed = cfg.seed;
        Ok(cfg)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn must_exist(what: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn required<'a>(what: &str, path: &'a Option<PathBuf>, hint: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("{what} is required ({hint})")))?;
    must_exist(what, p)?;
    Ok(p)
}

fn prompt_pair(init: &Option<String>, target: &str) -> Result<PromptPair> {
    match init {
        Some(i) => PromptPair::new(i.clone(), target),
        None => PromptPair::target(target),
    }
}

/// Applies command flags to the config, then checks everything that can be
/// checked without heavy compute.
fn prepare(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(&cli.global)?;
    match &cli.command {
        Command::MakeToyAssets { count } => {
            if let Some(c) = count {
                cfg.dataset.count = *c;
            }
        }
        Command::TexgenTrain { steps, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
        }
        Command::Manipulate {
            freeze_expression,
            iterations,
            ..
        } => {
            cfg.manipulation.freeze_expression |= *freeze_expression;
            if let Some(i) = iterations {
                cfg.manipulation.iterations = *i;
            }
        }
        Command::Animate { iterations, .. } => {
            if let Some(i) = iterations {
                cfg.animation.iterations = *i;
            }
        }
        _ => {}
    }
    cfg.generator.validate()?;
    cfg.manipulation.validate()?;
    cfg.animation.validate()?;
    if cfg.train.checkpoint_every == 0 || cfg.train.snapshot_every == 0 || cfg.train.log_every == 0 {
        return Err(Error::Validation("train intervals must be >= 1".into()));
    }
    if let Some(p) = &cfg.model.path {
        must_exist("model", p)?;
    }
    let ckpt_hint = "--checkpoint or `checkpoint = ...`";
    match &cli.command {
        Command::MakeToyAssets { .. } => {
            if cfg.dataset.count == 0 {
                return Err(Error::Validation("dataset.count must be >= 1".into()));
            }
        }
        Command::TexgenTrain { resume, .. } => {
            required("dataset directory", &cfg.dataset.dir, "--dataset or `dataset.dir = ...`")?;
            if let Some(r) = resume {
                must_exist("resume checkpoint", r)?;
            }
        }
        Command::TexgenSample { n } => {
            required("checkpoint", &cfg.checkpoint, ckpt_hint)?;
            if let Some(d) = &cfg.dataset.dir {
                must_exist("dataset directory", d)?;
            }
            if *n == 0 {
                return Err(Error::Validation("--n must be >= 1".into()));
            }
        }
        Command::Manipulate {
            prompt,
            init_prompt,
            init_mappers,
            ..
        } => {
            required("checkpoint", &cfg.checkpoint, ckpt_hint)?;
            if let Some(m) = init_mappers {
                must_exist("mapper checkpoint", m)?;
            }
            text_direction(&*load_backend(&cfg.backend)?, &prompt_pair(init_prompt, prompt)?)?;
        }
        Command::Animate {
            prompt,
            init_prompt,
            sequence,
            ..
        } => {
            required("checkpoint", &cfg.checkpoint, ckpt_hint)?;
            must_exist("sequence", sequence)?;
            text_direction(&*load_backend(&cfg.backend)?, &prompt_pair(init_prompt, prompt)?)?;
        }
        Command::Evaluate {
            images,
            reference,
            prompt,
        } => {
            must_exist("image directory", images)?;
            if let Some(r) = reference {
                must_exist("reference directory", r)?;
            }
            if reference.is_none() && prompt.is_none() {
                return Err(Error::Validation("evaluate needs --reference, --prompt or both".into()));
            }
            load_extractor(&cfg.extractor)?;
            if let Some(p) = prompt {
                if p.trim().is_empty() {
                    return Err(Error::InvalidPrompt("empty prompt".into()));
                }
                load_backend(&cfg.backend)?;
            }
        }
    }
    Ok(cfg)
}

struct Run {
    cfg: RunConfig,
    command: &'static str,
    hash: String,
    out: PathBuf,
    started: Instant,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn manifest(&self, status: &str, result: &serde_json::Value) -> Result<()> {
        let m = json!({
            "command": self.command,
            "status": status,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "config_hash": self.hash,
            "config": self.cfg,
            "elapsed_seconds": self.started.elapsed().as_secs_f64(),
            "result": result,
        });
        let path = self.path(&format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Parses, validates and runs one command. The returned summary is also
/// stored in the command's manifest.
pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = prepare(cli)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let run = Run {
        hash: cfg.hash(),
        command: cli.command.name(),
        cfg,
        out,
        started: Instant::now(),
    };
    run.write(&format!("{}.config.toml", run.command), &run.cfg.to_toml())?;
    run.manifest("running", &serde_json::Value::Null)?;
    log::info!("{} seed={} config={}", run.command, run.cfg.seed, run.hash);
    let res = match &cli.command {
        Command::MakeToyAssets { .. } => make_toy_assets(&run),
        Command::TexgenTrain { resume, .. } => texgen_train(&run, resume.as_deref()),
        Command::TexgenSample { n } => texgen_sample(&run, *n),
        Command::Manipulate {
            prompt,
            init_prompt,
            init_mappers,
            ..
        } => manipulate(&run, &prompt_pair(init_prompt, prompt)?, init_mappers.as_deref()),
        Command::Animate {
            prompt,
            init_prompt,
            sequence,
            ..
        } => animate(&run, &prompt_pair(init_prompt, prompt)?, sequence),
        Command::Evaluate {
            images,
            reference,
            prompt,
        } => evaluate(&run, images, reference.as_deref(), prompt.as_deref()),
    };
    match &res {
        Ok(v) => run.manifest("complete", v)?,
        Err(e) => run.manifest(
            if e.exit_code() == 3 { "aborted" } else { "failed" },
            &json!({ "error": e.to_string() }),
        )?,
    }
    res
}

fn load_model_source(src: &ModelSource) -> Result<MorphableModel> {
    match &src.path {
        Some(p) => load_model(p),
        None => Ok(make_toy_model(src.toy_seed, src.toy_vertices)),
    }
}

fn load_generator(run: &Run) -> Result<Generator> {
    let path = run.cfg.checkpoint.as_deref().expect("validated");
    let (state, manifest) = load_checkpoint(path)?;
    log::info!("generator from {} (step {})", path.display(), manifest.step);
    Ok(state.gen)
}

fn initial_latent(gen: &Generator, seed: u64) -> Result<LatentStack> {
    map_latent(gen, &sample_z(&mut rng::stream(seed, "w-init")))
}

fn png(path: &Path, img: &RenderedImage) -> Result<()> {
    write_png(path, &img.rgb, img.height, img.width)
}

fn make_toy_assets(run: &Run) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let model = make_toy_model(cfg.model.toy_seed, cfg.model.toy_vertices);
    let model_path = run.path("model.zip");
    save_model(&model, &model_path)?;
    let data = run.path("dataset");
    let res = cfg.generator.render_resolution;
    make_synthetic_dataset(&model, cfg.dataset.count, cfg.seed, &data, res)?;

    // a short mouth-opening, head-turning clip around a neutral record
    let mut r = rng::stream(cfg.seed, "toy-sequence");
    let e = model.expr_rank();
    let mut lines = vec![json!({ "neutral": true, "pose": vec![0.0; POSE_DIM], "expression": vec![0.0; e] })];
    for t in 0..4 {
        let a = t as f64 / 3.0;
        let mut pose = vec![0.0; POSE_DIM];
        pose[1] = 0.2 * (a - 0.5);
        pose[3] = 0.25 * a;
        let expression: Vec<f64> = normal_vec(&mut r, e)
            .iter()
            .zip(&model.expr_covariance)
            .map(|(z, v)| 0.3 * a * z * v.sqrt())
            .collect();
        lines.push(json!({ "pose": pose, "expression": expression }));
    }
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    run.write("sequence.jsonl", &text)?;
    Ok(json!({
        "model": model_path,
        "dataset": data,
        "images": cfg.dataset.count,
        "resolution": res,
        "sequence": run.path("sequence.jsonl"),
    }))
}

const TRAIN_HEADER: &str = "step,d_loss,d_patch_loss,g_loss,r1,pl";

fn train_row(m: &StepMetrics) -> String {
    format!("{},{},{},{},{},{}", m.step, m.d_loss, m.d_patch_loss, m.g_loss, m.r1, m.pl)
}

/// Rows of an existing trace strictly before `step`, so a resumed run
/// rewrites the same file it would have produced uninterrupted.
fn rows_before(path: &Path, step: usize) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step))
        .map(str::to_string)
        .collect()
}

fn write_csv(run: &Run, name: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    run.write(name, &text)
}

fn texgen_train(run: &Run, resume: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let model = load_model_source(&cfg.model)?;
    let dir = cfg.dataset.dir.as_deref().expect("validated");
    let records: Vec<TrainingRecord> = ingest_dataset(dir)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("no image/parameter pairs in {}", dir.display())));
    }
    let (mut state, mut rng) = match resume {
        Some(p) => {
            let (s, m) = load_checkpoint(p)?;
            if m.config != cfg.generator {
                log::warn!("resuming with the checkpoint's generator config, which differs from the run config");
            }
            log::info!("resuming from {} at step {}", p.display(), m.step);
            (s, m.rng.restore())
        }
        None => (TrainState::new(cfg.generator.clone(), cfg.seed)?, rng::stream(cfg.seed, "texgen-train")),
    };
    let res = state.cfg.render_resolution;
    let (w, h) = image::image_dimensions(&records[0].image)?;
    if (h as usize, w as usize) != (res, res) {
        return Err(Error::Validation(format!(
            "{} is {h}x{w}, the generator renders at {res}x{res}",
            records[0].image.display()
        )));
    }
    let geometry: Vec<FaceParams> = records.iter().map(|r| r.params.clone()).collect();
    let ckdir = run.subdir("checkpoints")?;
    let snapdir = run.subdir("snapshots")?;
    let mut rows = rows_before(&run.path("loss.csv"), state.step);
    let first_step = state.step;
    let steps = cfg.train.steps;
    let bs = state.cfg.batch_size;

    let snapshot = |state: &TrainState| -> Result<bool> {
        let mut r = rng::stream(cfg.seed, "snapshots");
        let samples = sample_renders(&state.gen, &model, &geometry, cfg.train.snapshot_count, res, &mut r)?;
        let mut clean = true;
        for (k, (_, img)) in samples.iter().enumerate() {
            clean &= background_is_zero(img);
            png(&snapdir.join(format!("step_{:06}_{k}.png", state.step)), img)?;
        }
        Ok(clean)
    };

    let mut last = None;
    while state.step < steps {
        let batch: Vec<TrainingRecord> = (0..bs)
            .map(|_| records[rng.random_range(0..records.len())].clone())
            .collect();
        let m = match state.train_step(&model, &batch, &geometry, &mut rng) {
            Ok(m) => m,
            Err(Error::NonFinite(what)) => {
                let snap = ckdir.join(format!("abort_{:06}.zip", state.step));
                save_checkpoint(&state, &snap, &run.hash, cfg.seed, &rng)?;
                write_csv(run, "loss.csv", TRAIN_HEADER, &rows)?;
                return Err(Error::Aborted {
                    step: state.step,
                    what,
                    snapshot: snap.display().to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        rows.push(train_row(&m));
        let s = state.step;
        if m.step % cfg.train.log_every == 0 {
            log::info!("step {} d={:.4} patch={:.4} g={:.4}", m.step, m.d_loss, m.d_patch_loss, m.g_loss);
        }
        if s % cfg.train.checkpoint_every == 0 || s == steps {
            save_checkpoint(&state, &ckdir.join(format!("step_{s:06}.zip")), &run.hash, cfg.seed, &rng)?;
            write_csv(run, "loss.csv", TRAIN_HEADER, &rows)?;
        }
        if s % cfg.train.snapshot_every == 0 || s == steps {
            snapshot(&state)?;
        }
        last = Some(m);
    }
    let final_ckpt = run.path("checkpoint.zip");
    save_checkpoint(&state, &final_ckpt, &run.hash, cfg.seed, &rng)?;
    write_csv(run, "loss.csv", TRAIN_HEADER, &rows)?;
    Ok(json!({
        "checkpoint": final_ckpt,
        "first_step": first_step,
        "steps": state.step,
        "final": last,
    }))
}

/// True when every pixel outside the face coverage is exactly zero.
pub fn background_is_zero(img: &RenderedImage) -> bool {
    img.mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .all(|(p, _)| img.rgb[3 * p..3 * p + 3].iter().all(|&c| c == 0.0))
}

fn texgen_sample(run: &Run, n: usize) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let gen = load_generator(run)?;
    let model = load_model_source(&cfg.model)?;
    let geometry: Vec<FaceParams> = match &cfg.dataset.dir {
        Some(d) => ingest_dataset(d)?.into_iter().map(|r| r.params).collect(),
        None => vec![FaceParams::neutral(&model, cfg.manipulation.camera)],
    };
    let res = cfg.generator.render_resolution;
    let dir = run.subdir("samples")?;
    let samples = sample_renders(&gen, &model, &geometry, n, res, &mut rng::stream(cfg.seed, "texgen-sample"))?;
    let mut clean = true;
    for (k, (tex, img)) in samples.iter().enumerate() {
        write_png(&dir.join(format!("texture_{k:03}.png")), &tex.rgb, tex.res, tex.res)?;
        png(&dir.join(format!("render_{k:03}.png")), img)?;
        clean &= background_is_zero(img);
    }
    Ok(json!({ "samples": n, "dir": dir, "background_zero": clean }))
}

const MANIP_HEADER: &str = "iteration,clip,reg,total";

fn manipulate(run: &Run, pair: &PromptPair, init_mappers: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let mc = cfg.manipulation.clone();
    let gen = load_generator(run)?;
    let model = load_model_source(&cfg.model)?;
    let backend = load_backend(&cfg.backend)?;
    let w_init = initial_latent(&gen, cfg.seed)?;
    let (mappers, pretrain) = match init_mappers {
        Some(p) => (Mappers::load(p)?, None),
        None => {
            let mut m = Mappers::new(gen.levels(), model.expr_rank(), &mut rng::stream(cfg.seed, "mappers"));
            let mut r = rng::stream(cfg.seed, "mapper-pretrain");
            let achieved = pretrain_zero(&mut m, &gen, mc.pretrain_steps, mc.pretrain_lr, &mut r)?;
            (m, Some(achieved))
        }
    };
    let base = frontal_params(&model, &mc);
    let iterations = mc.iterations;
    let psi0 = base.expression.clone();
    let mut man = Manipulator::new(&gen, &model, &*backend, &w_init, base, pair, mc, mappers)?;
    let mut rows = Vec::with_capacity(iterations);
    let (mut first, mut last) = (None, None);
    for _ in 0..iterations {
        let rec = match man.step() {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                let snap = run.path("mappers_abort.zip");
                man.mappers.save(&snap)?;
                write_csv(run, "loss.csv", MANIP_HEADER, &rows)?;
                return Err(Error::Aborted {
                    step: man.iteration(),
                    what,
                    snapshot: snap.display().to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        if rec.iteration % 50 == 0 {
            log::info!("iteration {} clip={:.5} reg={:.5}", rec.iteration, rec.clip, rec.reg);
        }
        rows.push(format!("{},{},{},{}", rec.iteration, rec.clip, rec.reg, rec.total));
        first.get_or_insert(rec.clone());
        last = Some(rec);
    }
    let (_, psi, texture, render, mesh) = man.snapshot()?;
    write_png(&run.path("texture.png"), &texture.rgb, texture.res, texture.res)?;
    png(&run.path("render.png"), &render)?;
    write_obj(&run.path("mesh.obj"), &mesh.vertices, &mesh.topology.faces, &mesh.topology.uv)?;
    write_csv(run, "loss.csv", MANIP_HEADER, &rows)?;
    man.mappers.save(&run.path("mappers.zip"))?;
    let psi_norm = psi
        .iter()
        .zip(&psi0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(json!({
        "prompt": pair.t_tgt,
        "init_prompt": pair.t_init,
        "pretrain_max_offset": pretrain,
        "first": first,
        "last": last,
        "expression_offset_norm": psi_norm,
    }))
}

const ANIM_HEADER: &str = "iteration,total,frames";

fn animate(run: &Run, pair: &PromptPair, sequence: &Path) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let ac = cfg.animation.clone();
    let gen = load_generator(run)?;
    let model = load_model_source(&cfg.model)?;
    let seq = AnimationSequence::load_jsonl(sequence)?;
    seq.validate(&model)?;
    let backend = load_backend(&cfg.backend)?;
    let w_init = initial_latent(&gen, cfg.seed)?;
    let mut mapper = TimeVaryingTextureMapper::new(gen.levels(), model.expr_rank(), &mut rng::stream(cfg.seed, "time-mapper"));
    let mut r = rng::stream(cfg.seed, "time-mapper-pretrain");
    let pretrain = pretrain_zero_time(&mut mapper, &gen, &seq, ac.pretrain_steps, ac.pretrain_lr, &mut r)?;
    let base = FaceParams::neutral(&model, ac.camera);
    let delta = deviations(&seq);
    let iterations = ac.iterations;
    let mut anim = Animator::new(&gen, &model, &*backend, seq, &w_init, base, pair, ac, mapper)?;
    let weights = anim.weights().i.clone();
    let mut rows = Vec::with_capacity(iterations);
    let (mut first, mut last) = (None, None);
    for _ in 0..iterations {
        let rec = match anim.step() {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                let snap = run.path("time_mapper_abort.zip");
                anim.mapper.save(&snap)?;
                write_csv(run, "loss.csv", ANIM_HEADER, &rows)?;
                return Err(Error::Aborted {
                    step: rows.len(),
                    what,
                    snapshot: snap.display().to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        if rec.iteration % 50 == 0 {
            log::info!("iteration {} loss={:.5}", rec.iteration, rec.total);
        }
        let frames: Vec<String> = rec.frames.iter().map(|f| f.to_string()).collect();
        rows.push(format!("{},{},{}", rec.iteration, rec.total, frames.join(";")));
        first.get_or_insert(rec.total);
        last = Some(rec.total);
    }
    let (_, textures, renders) = anim.outputs()?;
    let fdir = run.subdir("frames")?;
    let tdir = run.subdir("textures")?;
    for (t, (tex, img)) in textures.iter().zip(&renders).enumerate() {
        png(&fdir.join(format!("frame_{t:04}.png")), img)?;
        write_png(&tdir.join(format!("texture_{t:04}.png")), &tex.rgb, tex.res, tex.res)?;
    }
    let wrows: Vec<String> = weights
        .iter()
        .zip(&delta)
        .enumerate()
        .map(|(t, (i, d))| format!("{t},{d},{i}"))
        .collect();
    write_csv(run, "weights.csv", "frame,deviation,weight", &wrows)?;
    write_csv(run, "loss.csv", ANIM_HEADER, &rows)?;
    anim.mapper.save(&run.path("time_mapper.zip"))?;
    Ok(json!({
        "prompt": pair.t_tgt,
        "frames": renders.len(),
        "pretrain_max_offset": pretrain,
        "first": first,
        "last": last,
    }))
}

/// Every PNG in `dir`, in file-name order, fully unmasked.
pub fn load_image_dir(dir: &Path) -> Result<Vec<RenderedImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let (rgb, height, width) = read_png(p)?;
            Ok(RenderedImage {
                height,
                width,
                rgb,
                mask: vec![true; height * width],
            })
        })
        .collect()
}

fn evaluate(run: &Run, images: &Path, reference: Option<&Path>, prompt: Option<&str>) -> Result<serde_json::Value> {
    let cfg = &run.cfg;
    let fake = load_image_dir(images)?;
    let ex = load_extractor(&cfg.extractor)?;
    let (fid, kid) = match reference {
        Some(r) => {
            let real = load_image_dir(r)?;
            let (fr, ff) = (extract_features(&ex, &real)?, extract_features(&ex, &fake)?);
            (Some(evalkit::fid(&fr, &ff)?), Some(evalkit::kid(&fr, &ff)?))
        }
        None => (None, None),
    };
    let clip = match prompt {
        Some(p) => Some(clip_score(&*load_backend(&cfg.backend)?, &fake, p)?),
        None => None,
    };
    let metrics = Metrics {
        fid,
        kid,
        clip_score: clip,
        n: fake.len(),
        extractor: ex.id().to_string(),
        kid_block: KID_BLOCK,
        kid_kernel: format!("(x.y/d + 1)^{KID_DEGREE}"),
    };
    let text = serde_json::to_string_pretty(&metrics)?;
    run.write("metrics.json", &text)?;
    Ok(serde_json::to_value(&metrics)?)
}
