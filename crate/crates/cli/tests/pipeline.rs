//! End-to-end runs of the `worldgen` binary: synth -> extract -> train ->
//! generate -> eval, plus weightmap/upscale/bench and idempotency checks.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_worldgen"))
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_model() -> serde_json::Value {
    serde_json::json!({
        "dit": {"num_blocks": 4, "num_heads": 2, "model_dim": 16,
                 "text_dim": 8, "sigma_dim": 8, "cond_blocks": 3},
        "tokenizer_seed": 7,
        "base_seed": 5
    })
}

struct Workspace {
    root: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        Workspace { root: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    fn synth(&self, clips: usize) -> PathBuf {
        let corpus = self.path("corpus");
        let cfg = self.path("synth.json");
        write_json(
            &cfg,
            serde_json::json!({
                "out_dir": corpus,
                "clips": clips,
                "extents": [9, 32, 32],
                "seed": 11
            }),
        );
        run_ok(&["synth", "--config", cfg.to_str().unwrap()]);
        corpus
    }

    fn extract(&self, corpus: &Path, modalities: &[&str]) {
        let cfg = self.path("extract.json");
        write_json(
            &cfg,
            serde_json::json!({
                "corpus_dir": corpus,
                "modalities": modalities,
                "seg_seed": 3
            }),
        );
        run_ok(&["extract", "--config", cfg.to_str().unwrap()]);
    }
}

#[test]
fn synth_extract_products_exist() {
    let ws = Workspace::new();
    let corpus = ws.synth(2);
    ws.extract(&corpus, &["vis", "edge", "depth", "seg", "hdmap", "lidar"]);
    for clip in ["clip_000", "clip_001"] {
        let dir = corpus.join(clip);
        for file in [
            "video.tensor",
            "depth.tensor",
            "labels.json",
            "scene.json",
            "masks.json",
            "control_vis.tensor",
            "control_edge.tensor",
            "control_depth.tensor",
            "control_seg.tensor",
            "control_hdmap.tensor",
            "control_lidar.tensor",
        ] {
            assert!(dir.join(file).exists(), "{clip}/{file} missing");
        }
    }
    assert!(corpus.join("provenance.json").exists());
}

#[test]
fn full_chain_and_self_eval() {
    let ws = Workspace::new();
    let corpus = ws.synth(2);
    ws.extract(&corpus, &["seg"]);

    // Train a seg branch briefly (mechanics, not quality).
    let branch_dir = ws.path("branch_seg");
    let train_cfg = ws.path("train.json");
    write_json(
        &train_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "out_dir": branch_dir,
            "modality": "seg",
            "model": small_model(),
            "steps": 30,
            "seed": 21
        }),
    );
    run_ok(&["train-branch", "--config", train_cfg.to_str().unwrap()]);
    assert!(branch_dir.join("manifest.json").exists());
    assert!(branch_dir.join("losses.json").exists());

    // Generate with the branch.
    let gen_dir = ws.path("gen");
    let gen_cfg = ws.path("gen.json");
    write_json(
        &gen_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "out_dir": gen_dir,
            "model": small_model(),
            "branches": [branch_dir],
            "schedule": {"sigma_min": 0.1, "sigma_max": 10.0, "steps": 3, "rho": 7.0},
            "guidance": {"scale": 1.5, "negative_prompt": "low quality"},
            "seeds": [1, 2]
        }),
    );
    run_ok(&["generate", "--config", gen_cfg.to_str().unwrap()]);
    assert!(gen_dir.join("clip_000/gen_1.tensor").exists());
    assert!(gen_dir.join("clip_000/gen_2.tensor").exists());

    // Eval the generated videos: report exists with the alignment columns.
    let eval_dir = ws.path("eval");
    let eval_cfg = ws.path("eval.json");
    write_json(
        &eval_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "gen_dir": gen_dir,
            "out_dir": eval_dir,
            "fg_bg_split": true,
            "diversity": true
        }),
    );
    run_ok(&["eval", "--config", eval_cfg.to_str().unwrap()]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    for want in ["blur_ssim", "edge_f1", "depth_sirmse", "mask_miou"] {
        assert!(names.contains(&want), "missing column {want} in {names:?}");
    }
    assert!(eval_dir.join("diversity.json").exists());
    assert!(eval_dir.join("report.md").exists());

    // Self-eval: copying the reference videos as "generated" must produce the
    // perfect scores.
    let self_gen = ws.path("self_gen");
    for clip in ["clip_000", "clip_001"] {
        std::fs::create_dir_all(self_gen.join(clip)).unwrap();
        std::fs::copy(corpus.join(clip).join("video.tensor"), self_gen.join(clip).join("gen_0.tensor"))
            .unwrap();
    }
    let self_eval_dir = ws.path("self_eval");
    let self_cfg = ws.path("self_eval.json");
    write_json(
        &self_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "gen_dir": self_gen,
            "out_dir": self_eval_dir
        }),
    );
    run_ok(&["eval", "--config", self_cfg.to_str().unwrap()]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(self_eval_dir.join("report.json")).unwrap())
            .unwrap();
    let mean_of = |name: &str| -> f64 {
        report["columns"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["name"] == name)
            .unwrap_or_else(|| panic!("column {name}"))["mean"]
            .as_f64()
            .unwrap()
    };
    assert!((mean_of("blur_ssim") - 1.0).abs() < 1e-6);
    assert!((mean_of("edge_f1") - 1.0).abs() < 1e-6);
    assert!(mean_of("depth_sirmse").abs() < 1e-6);
    assert!((mean_of("mask_miou") - 1.0).abs() < 1e-6);
}

#[test]
fn generate_is_idempotent_per_config_and_seed() {
    let ws = Workspace::new();
    let corpus = ws.synth(1);
    let gen_cfg = ws.path("gen.json");
    let gen_dir = ws.path("gen");
    write_json(
        &gen_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "out_dir": gen_dir,
            "model": small_model(),
            "schedule": {"sigma_min": 0.1, "sigma_max": 10.0, "steps": 2, "rho": 7.0},
            "guidance": {"scale": 1.0, "negative_prompt": ""},
            "seeds": [9]
        }),
    );
    let tensor_path = gen_dir.join("clip_000/gen_9.tensor");
    run_ok(&["generate", "--config", gen_cfg.to_str().unwrap()]);
    let a = std::fs::read(&tensor_path).unwrap();
    let pa: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gen_dir.join("provenance.json")).unwrap()).unwrap();
    run_ok(&["generate", "--config", gen_cfg.to_str().unwrap()]);
    let b = std::fs::read(&tensor_path).unwrap();
    let pb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gen_dir.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(a, b, "same config + seed must give byte-identical output");
    // Provenance may differ only in its timestamp.
    for key in ["command", "config_sha256", "seeds", "code_version"] {
        assert_eq!(pa[key], pb[key], "{key}");
    }
}

#[test]
fn base_generation_documented_when_no_branches() {
    let ws = Workspace::new();
    let corpus = ws.synth(1);
    let gen_cfg = ws.path("gen.json");
    let gen_dir = ws.path("gen");
    write_json(
        &gen_cfg,
        serde_json::json!({
            "corpus_dir": corpus,
            "out_dir": gen_dir,
            "model": small_model(),
            "schedule": {"sigma_min": 0.1, "sigma_max": 10.0, "steps": 2, "rho": 7.0},
            "guidance": {"scale": 1.0, "negative_prompt": ""},
            "seeds": [4]
        }),
    );
    let out = bin().args(["generate", "--config", gen_cfg.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("base model"), "stdout: {stdout}");
}

#[test]
fn weightmap_command_writes_raw_and_normalized() {
    let ws = Workspace::new();
    let corpus = ws.synth(1);
    let cfg = ws.path("wm.json");
    let raw = ws.path("maps/raw.tensor");
    let norm = ws.path("maps/norm.tensor");
    write_json(
        &cfg,
        serde_json::json!({
            "clip_dir": corpus.join("clip_000"),
            "out_raw": raw,
            "out_normalized": norm,
            "preset": "robotics-setting1"
        }),
    );
    run_ok(&["weightmap", "--config", cfg.to_str().unwrap()]);
    assert!(raw.exists() && norm.exists());
}

#[test]
fn upscale_command_runs() {
    let ws = Workspace::new();
    let corpus = ws.synth(1);
    let cfg = ws.path("up.json");
    let out = ws.path("up/out.tensor");
    write_json(
        &cfg,
        serde_json::json!({
            "input": corpus.join("clip_000/video.tensor"),
            "out": out,
            "model": small_model(),
            "start_sigma": 0.5
        }),
    );
    run_ok(&[
        "upscale",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "2x2",
        "--overlap",
        "32",
        "--scale",
        "2",
        "--steps",
        "2",
        "--seed",
        "3",
    ]);
    assert!(out.exists());
}

#[test]
fn bench_command_emits_two_row_csv() {
    let ws = Workspace::new();
    let cfg = ws.path("bench.json");
    let csv = ws.path("bench/bench.csv");
    write_json(
        &cfg,
        serde_json::json!({
            "model": small_model(),
            "extents": [9, 32, 32],
            "repeats": 1
        }),
    );
    run_ok(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--workers",
        "1,2",
        "--steps",
        "1",
        "--seed",
        "5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("workers,1,2"));
    assert!(lines[1].starts_with("Diffusion only,"));
    assert!(lines[2].starts_with("End-to-end,"));
}

#[test]
fn bad_config_fails_with_pointer() {
    let ws = Workspace::new();
    let cfg = ws.path("bad.json");
    write_json(
        &cfg,
        serde_json::json!({
            "out_dir": "x", "clips": 1, "extents": [9, 32, 32], "seed": 1, "typo_key": 5
        }),
    );
    let out = bin().args(["synth", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config error at /"), "stderr: {stderr}");
}
