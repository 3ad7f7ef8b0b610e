use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use nep_core::data::{edit_triples, parse_edit_shard, parse_t2i_shard};
use nep_core::model::load_checkpoint;
use nep_core::tokenizer::{png_bytes_gray, PixelMask};
use nep_core::train::TrainConfig;
use nep_service::cli::{apply_overrides, run, Cli};

fn nep(args: &[&str]) {
    let cli = Cli::try_parse_from(std::iter::once("nep").chain(args.iter().copied())).unwrap();
    run(cli).unwrap();
}

const TINY: &str = r#"{
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32},
  "pretrain": {"steps": 3, "batch_size": 2},
  "finetune": {"steps": 3, "batch_size": 2},
  "critic": {"c1": 2, "c2": 2, "c3": 2},
  "critic_train": {"steps": 3, "batch_size": 2},
  "t2i_count": 8, "edit_count": 8, "pool_count": 8, "critic_examples": 8
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn overrides_merge_and_reject_unknown_keys() {
    let base = TrainConfig::default();
    let got: TrainConfig = apply_overrides(&base, Some(r#"{"steps": 7, "optimizer": {"lr": 0.5}}"#)).unwrap();
    assert_eq!(got.steps, 7);
    assert_eq!(got.optimizer.lr, 0.5);
    assert_eq!(got.optimizer.beta2, base.optimizer.beta2);
    assert!(apply_overrides(&base, Some(r#"{"stepz": 7}"#)).is_err());
    assert!(apply_overrides(&base, Some(r#"{"steps": "many"}"#)).is_err());
    assert_eq!(apply_overrides(&base, None).unwrap(), base);
}

#[test]
fn make_data_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    nep(&["make-data", "--kind", "edit", "--count", "12", "--seed", "5", "--out", s(&a)]);
    nep(&["--seed", "5", "make-data", "--kind", "edit", "--count", "12", "--out", s(&b)]);
    nep(&["make-data", "--kind", "t2i", "--count", "12", "--seed", "5", "--out", s(&c)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(parse_edit_shard(&std::fs::read_to_string(&a).unwrap()).unwrap().len(), 12);
    assert_eq!(parse_t2i_shard(&std::fs::read_to_string(&c).unwrap()).unwrap().len(), 12);
}

#[test]
fn every_subcommand_runs_on_a_tiny_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    nep(&["make-data", "--kind", "t2i", "--count", "8", "--out", s(&p("t2i.jsonl"))]);
    nep(&["make-data", "--kind", "edit", "--count", "8", "--out", s(&p("edit.jsonl"))]);
    nep(&["train-t2i", "--data", s(&p("t2i.jsonl")), "--config", TINY, "--out", s(&p("s1.nep"))]);
    nep(&["train-edit", "--ckpt", s(&p("s1.nep")), "--data", s(&p("edit.jsonl")), "--config", TINY, "--out", s(&p("s2.nep"))]);
    nep(&["train-critic", "--config", TINY, "--out", s(&p("critic.nepc"))]);

    let (m1, _) = load_checkpoint(&p("s1.nep")).unwrap();
    let (m2, _) = load_checkpoint(&p("s2.nep")).unwrap();
    assert_eq!(m2.num_params() - m1.num_params(), 2 * 16);
    let log = std::fs::read_to_string(p("s1.nep.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    nep(&["generate", "--ckpt", s(&p("s1.nep")), "--prompt", "a red square top left on blue", "--out", s(&p("g.png"))]);
    nep(&["generate", "--ckpt", s(&p("s1.nep")), "--prompt", "a red background", "--random-order", "--out", s(&p("g2.png"))]);
    let mut mask = PixelMask::empty(32, 32);
    mask.fill_rect(0, 0, 8, 8);
    std::fs::write(p("mask.png"), png_bytes_gray(&mask.to_gray()).unwrap()).unwrap();
    nep(&[
        "edit", "--ckpt", s(&p("s2.nep")), "--image", s(&p("g.png")), "--mask", s(&p("mask.png")),
        "--instruction", "make the red square blue", "--config", r#"{"greedy": true}"#, "--out", s(&p("e.png")),
    ]);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(p("e.png.json")).unwrap()).unwrap();
    assert_eq!(sidecar["l_e"], 4);
    assert_eq!(sidecar["steps"], 4);
    let (src, out) = (image::open(p("g.png")).unwrap().to_rgb8(), image::open(p("e.png")).unwrap().to_rgb8());
    for (x, y, px) in src.enumerate_pixels() {
        if x >= 8 || y >= 8 {
            assert_eq!(out.get_pixel(x, y), px);
        }
    }
    nep(&[
        "refine", "--ckpt", s(&p("s2.nep")), "--critic", s(&p("critic.nepc")), "--prompt", "a red square top left on blue",
        "--config", r#"{"k": 4, "candidates": 2}"#, "--rounds", "2", "--out-dir", s(&p("rounds")), "--out", s(&p("r.png")),
    ]);
    assert!(p("r.png").exists());
    assert!(p("rounds/round_0.png").exists() && p("rounds/round_2.png").exists());
    let traj: serde_json::Value = serde_json::from_slice(&std::fs::read(p("rounds/trajectory.json")).unwrap()).unwrap();
    assert_eq!(traj.as_array().unwrap().len(), 3);
    nep(&["eval", "--ckpt", s(&p("s2.nep")), "--count", "3", "--mode", "ntp_full", "--out", s(&p("report.json"))]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["mean_steps"], 64.0);
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 3);
    assert_eq!(edit_triples(3, 0).len(), 3);
}

#[test]
fn train_edit_refuses_an_already_fine_tuned_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    nep(&["train-t2i", "--config", TINY, "--out", s(&p("s1.nep"))]);
    nep(&["train-edit", "--ckpt", s(&p("s1.nep")), "--config", TINY, "--out", s(&p("s2.nep"))]);
    let cli = Cli::try_parse_from(["nep", "train-edit", "--ckpt", s(&p("s2.nep")), "--config", TINY]).unwrap();
    assert!(run(cli).is_err());
}

#[test]
fn binary_lists_every_subcommand() {
    let out = Process::new(env!("CARGO_BIN_EXE_nep")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in ["make-data", "train-t2i", "train-edit", "train-critic", "generate", "edit", "refine", "eval", "serve"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    for flag in ["--seed", "--config", "--out"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let bad = Process::new(env!("CARGO_BIN_EXE_nep")).args(["make-data", "--kind", "video"]).output().unwrap();
    assert!(!bad.status.success());
}
