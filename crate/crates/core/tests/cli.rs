use facetex::cli::{Cli, GlobalArgs, RunConfig};
use facetex::clipspace::BackendConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5
[dataset]
count = 6
[generator]
resolution = 16
render_resolution = 32
channel_base = 128
channel_max = 8
disc_channel_base = 128
disc_channel_max = 8
mapping_layers = 2
batch_size = 2
patch_size = 16
[train]
steps = 4
checkpoint_every = 2
snapshot_every = 2
snapshot_count = 2
[manipulation]
iterations = 4
render_resolution = 32
pretrain_steps = 5
[animation]
iterations = 3
render_resolution = 32
pretrain_steps = 5
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facetex"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Assets and a short-trained generator, built once.
fn shared() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("small.toml"), SMALL).unwrap();
        ok(d.path(), &["--config", "small.toml", "-o", "assets", "make-toy-assets"]);
        ok(
            d.path(),
            &["--config", "small.toml", "-o", "train", "--model", "assets/model.zip", "--dataset", "assets/dataset", "texgen-train"],
        );
        d
    })
    .path()
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn missing_asset_path_is_a_validation_error_before_compute() {
    let d = tempfile::tempdir().unwrap();
    let out = bin(d.path(), &["-o", "out", "--model", "nope/model.zip", "--dataset", "nope", "texgen-train"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!d.path().join("out").exists(), "no output before validation passes");

    let out = bin(d.path(), &["-o", "out", "manipulate", "--prompt", "a red face", "--checkpoint", "missing.zip"]);
    assert_eq!(code(&out), 2);
    let out = bin(d.path(), &["-o", "out", "texgen-train"]);
    assert_eq!(code(&out), 2, "dataset is required");
    let out = bin(d.path(), &["-o", "out", "evaluate", "--images", "nowhere", "--prompt", "x"]);
    assert_eq!(code(&out), 2);
    assert!(!d.path().join("out").exists());
}

#[test]
fn bad_configuration_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "[generator]\nbogus = 1\n").unwrap();
    assert_eq!(code(&bin(d.path(), &["--config", "bad.toml", "make-toy-assets"])), 2);
    assert_eq!(code(&bin(d.path(), &["--config", "absent.toml", "make-toy-assets"])), 2);
    assert_eq!(code(&bin(d.path(), &["--set", "generator.resolution=48", "make-toy-assets"])), 2);
    assert_eq!(code(&bin(d.path(), &["--set", "novalue", "make-toy-assets"])), 2);
    assert_eq!(code(&bin(d.path(), &["--set", "dataset.count=0", "make-toy-assets"])), 2);
    // clap usage errors share the validation code
    assert_eq!(code(&bin(d.path(), &["manipulate"])), 2);
}

#[test]
fn config_layers_and_hash() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("c.toml");
    std::fs::write(&file, "seed = 9\n[generator]\nbatch_size = 3\n[backend]\nkind = \"stub\"\nseed = 4\n").unwrap();
    let args = GlobalArgs {
        config: Some(file.clone()),
        set: vec!["generator.learning_rate=0.01".into(), "output_dir=\"elsewhere\"".into()],
        ..Default::default()
    };
    let cfg = RunConfig::resolve(&args).unwrap();
    let toy = RunConfig::default();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.generator.batch_size, 3);
    assert_eq!(cfg.generator.learning_rate, 0.01);
    // untouched keys keep the toy preset
    assert_eq!(cfg.generator.resolution, toy.generator.resolution);
    assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    assert_eq!(cfg.backend, BackendConfig::Stub { seed: 4, dim: 512 });
    assert_eq!(cfg.manipulation.seed, 9);

    let flagged = RunConfig::resolve(&GlobalArgs {
        seed: Some(11),
        ..args.clone()
    })
    .unwrap();
    assert_eq!(flagged.seed, 11);
    assert_ne!(flagged.hash(), cfg.hash());
    assert_eq!(RunConfig::resolve(&args).unwrap().hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);

    // a variant switch replaces the whole table
    let pre = RunConfig::resolve(&GlobalArgs {
        set: vec!["backend.kind=\"pretrained\"".into()],
        ..Default::default()
    })
    .unwrap();
    assert_eq!(pre.backend, BackendConfig::Pretrained { weights: None });

    // the rendered config round-trips
    let again: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn unavailable_backend_and_bad_prompts_exit_with_validation_code() {
    let d = shared();
    let base = ["--config", "small.toml", "--model", "assets/model.zip", "--checkpoint", "train/checkpoint.zip"];
    let run = |extra: &[&str]| code(&bin(d, &[&base[..], extra].concat()));
    assert_eq!(run(&["-o", "v1", "--set", "backend.kind=\"pretrained\"", "manipulate", "--prompt", "a red face"]), 2);
    assert_eq!(run(&["-o", "v2", "manipulate", "--prompt", "  "]), 2);
    assert_eq!(run(&["-o", "v3", "manipulate", "--prompt", "Red face", "--init-prompt", "face red"]), 2);
    assert_eq!(run(&["-o", "v4", "evaluate", "--images", "assets/dataset"]), 2);
}

#[test]
fn toy_pipeline_writes_declared_artifacts() {
    let d = shared();
    for f in ["model.zip", "sequence.jsonl", "dataset/00000.png", "dataset/00005.json", "make-toy-assets.manifest.json"] {
        assert!(d.join("assets").join(f).exists(), "{f}");
    }
    for f in [
        "checkpoint.zip",
        "checkpoints/step_000002.zip",
        "checkpoints/step_000004.zip",
        "snapshots/step_000004_1.png",
        "loss.csv",
        "texgen-train.manifest.json",
        "texgen-train.config.toml",
    ] {
        assert!(d.join("train").join(f).exists(), "{f}");
    }
    let loss = String::from_utf8(read(d.join("train/loss.csv"))).unwrap();
    assert_eq!(loss.lines().count(), 5);
    assert!(loss.starts_with("step,d_loss,d_patch_loss,g_loss,r1,pl\n"));

    let m: serde_json::Value = serde_json::from_slice(&read(d.join("train/texgen-train.manifest.json"))).unwrap();
    assert_eq!(m["status"], "complete");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let base = ["--config", "small.toml", "--model", "assets/model.zip", "--checkpoint", "train/checkpoint.zip"];
    ok(d, &[&base[..], &["-o", "sample", "--dataset", "assets/dataset", "texgen-sample", "--n", "2"]].concat());
    for f in ["samples/texture_000.png", "samples/render_001.png"] {
        assert!(d.join("sample").join(f).exists(), "{f}");
    }
    let sm: serde_json::Value = serde_json::from_slice(&read(d.join("sample/texgen-sample.manifest.json"))).unwrap();
    assert_eq!(sm["result"]["background_zero"], true);

    ok(d, &[&base[..], &["-o", "man", "manipulate", "--prompt", "a face with green skin"]].concat());
    for f in ["texture.png", "mesh.obj", "render.png", "loss.csv", "mappers.zip", "manipulate.manifest.json"] {
        assert!(d.join("man").join(f).exists(), "{f}");
    }
    let obj = String::from_utf8(read(d.join("man/mesh.obj"))).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("v ")) && obj.lines().any(|l| l.starts_with("f ")));
    assert!(facetex::mappers::Mappers::load(&d.join("man/mappers.zip")).is_ok());

    // saved mappers seed a second edit
    ok(
        d,
        &[&base[..], &["-o", "man2", "manipulate", "--prompt", "a face with green skin", "--init-mappers", "man/mappers.zip", "--freeze-expression"]]
            .concat(),
    );

    ok(d, &[&base[..], &["-o", "anim", "animate", "--prompt", "a face with green skin", "--sequence", "assets/sequence.jsonl"]].concat());
    for t in 0..4 {
        assert!(d.join(format!("anim/frames/frame_{t:04}.png")).exists());
        assert!(d.join(format!("anim/textures/texture_{t:04}.png")).exists());
    }
    let w = String::from_utf8(read(d.join("anim/weights.csv"))).unwrap();
    assert_eq!(w.lines().count(), 5);
    assert!(facetex::animator::TimeVaryingTextureMapper::load(&d.join("anim/time_mapper.zip")).is_ok());

    ok(d, &["-o", "ev", "evaluate", "--images", "sample/samples", "--reference", "assets/dataset", "--prompt", "a face"]);
    let metrics: serde_json::Value = serde_json::from_slice(&read(d.join("ev/metrics.json"))).unwrap();
    for k in ["fid", "kid", "clip_score", "n", "extractor", "kid_block", "kid_kernel"] {
        assert!(!metrics[k].is_null(), "{k}");
    }
    assert_eq!(metrics["n"], 4);
    let c = metrics["clip_score"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&c));
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let d = shared();
    let base = ["--config", "small.toml", "--model", "assets/model.zip"];
    ok(d, &[&base[..], &["-o", "train_again", "--dataset", "assets/dataset", "texgen-train"]].concat());
    assert_eq!(read(d.join("train/loss.csv")), read(d.join("train_again/loss.csv")));

    let man = |out: &str, seed: &str| {
        ok(
            d,
            &[&base[..], &["--checkpoint", "train/checkpoint.zip", "--seed", seed, "-o", out, "manipulate", "--prompt", "an old face"]].concat(),
        );
        read(d.join(out).join("loss.csv"))
    };
    let (a, b, c) = (man("det_a", "7"), man("det_b", "7"), man("det_c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);

    let anim = |out: &str| {
        ok(
            d,
            &[&base[..], &["--checkpoint", "train/checkpoint.zip", "-o", out, "animate", "--prompt", "an old face", "--sequence", "assets/sequence.jsonl"]]
                .concat(),
        );
        read(d.join(out).join("loss.csv"))
    };
    assert_eq!(anim("anim_a"), anim("anim_b"));
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let d = shared();
    let args = |out: &str| {
        vec![
            "--config".to_string(),
            "small.toml".into(),
            "--model".into(),
            "assets/model.zip".into(),
            "--dataset".into(),
            "assets/dataset".into(),
            "-o".into(),
            out.into(),
            "texgen-train".into(),
            "--resume".into(),
            "train/checkpoints/step_000002.zip".into(),
        ]
    };
    for out in ["resume_a", "resume_b"] {
        std::fs::create_dir_all(d.join(out)).unwrap();
        std::fs::copy(d.join("train/loss.csv"), d.join(out).join("loss.csv")).unwrap();
        let a: Vec<String> = args(out);
        ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let full = String::from_utf8(read(d.join("train/loss.csv"))).unwrap();
    let ra = String::from_utf8(read(d.join("resume_a/loss.csv"))).unwrap();
    let rb = String::from_utf8(read(d.join("resume_b/loss.csv"))).unwrap();
    assert_eq!(ra, rb, "resumes are deterministic");
    assert_eq!(ra.lines().count(), 5);
    // rows before the checkpoint are kept verbatim
    assert_eq!(ra.lines().take(3).collect::<Vec<_>>(), full.lines().take(3).collect::<Vec<_>>());
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("resume_a/texgen-train.manifest.json"))).unwrap();
    assert_eq!(m["result"]["first_step"], 2);
    assert_eq!(m["result"]["steps"], 4);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let d = shared();
    let out = bin(
        d,
        &[
            "--config",
            "small.toml",
            "--model",
            "assets/model.zip",
            "--checkpoint",
            "train/checkpoint.zip",
            "-o",
            "blowup",
            "--set",
            "manipulation.lr_texture=1e300",
            "manipulate",
            "--prompt",
            "a face with green skin",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("blowup/mappers_abort.zip").exists());
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("blowup/manipulate.manifest.json"))).unwrap();
    assert_eq!(m["status"], "aborted");
}

#[test]
fn in_process_execution_matches_the_binary() {
    use clap::Parser;
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("assets");
    let cli = Cli::try_parse_from(["facetex", "-o", out.to_str().unwrap(), "--set", "dataset.count=2", "make-toy-assets"]).unwrap();
    let summary = facetex::cli::execute(&cli).unwrap();
    assert_eq!(summary["images"], 2);
    assert!(out.join("dataset/00001.png").exists());
}
