use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use trl_cli::{cmd_alignviz, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, StageSelection, TrainOptions, LOSS_LOG};
use trl_core::config::{Alignment, RunConfig};

/// Small dataset and model; keys in `extra` replace the defaults below.
fn config(dir: &Path, extra: &str) -> RunConfig {
    let base = format!(
        "data.root = {root}
run.out_dir = {out}
synth.identities = 6
synth.sequences_per_camera = 1
synth.frames = 5
synth.height = 16
synth.width = 16
synth.clutter = 1
backbone.input_height = 16
backbone.input_width = 16
backbone.front_channels = 4
backbone.front_pool = 2
backbone.tail_channels = 6
backbone.tail_pool = 2
backbone.descriptor_dim = 6
st2n.loc_width = 5
st2n.loc_hidden = 3
trl.hidden = 4
train.stage1_iterations = 6
train.stage2_iterations = 4
train.batch_size = 2
train.frames = 3
train.checkpoint_interval = 2
eval.trials = 2
",
        root = dir.join("data").display(),
        out = dir.join("out").display(),
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    trl_cli::load_config(&path, &Default::default()).unwrap()
}

fn prepared(extra: &str) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), extra);
    cmd_gen(&cfg).unwrap();
    (dir, cfg)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn all_stages() -> TrainOptions {
    TrainOptions::default()
}

#[test]
fn gen_is_fast_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "synth.identities = 2\nsynth.sequences_per_camera = 1\nsynth.frames = 3\nsynth.height = 64\nsynth.width = 64",
    );
    let start = Instant::now();
    let out = cmd_gen(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert!(out.contains("2 identities, 4 sequences, 12 frames"), "{out}");
    let first = files(&dir.path().join("data"));
    cmd_gen(&cfg).unwrap();
    assert_eq!(first, files(&dir.path().join("data")));
}

#[test]
fn missing_data_root_is_named() {
    let cfg = RunConfig::parse("synth.identities = 2").unwrap();
    let err = cmd_gen(&cfg).unwrap_err();
    assert!(format!("{err:#}").contains("data.root"));
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = RunConfig::parse("synth.identities = 2\nsynth.frames = three\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn train_all_writes_both_checkpoints_and_a_monotone_log() {
    let (dir, cfg) = prepared("");
    let s = cmd_train(&cfg, &all_stages()).unwrap();
    let out = dir.path().join("out");
    assert!(out.join("stage1.ckpt").exists() && out.join("stage2.ckpt").exists());
    assert_eq!(s.iterations, 10);
    assert!(!s.interrupted);
    assert!(s.report.contains("parameters"), "{}", s.report);
    let log = std::fs::read_to_string(out.join(LOSS_LOG)).unwrap();
    let iters: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (1..=6).chain(7..=10).collect::<Vec<_>>());
}

#[test]
fn interrupted_training_resumes_on_the_same_trajectory() {
    let (a, cfg_a) = prepared("");
    cmd_train(&cfg_a, &all_stages()).unwrap();

    let (b, cfg_b) = prepared("");
    for stop in [3, 7] {
        let s = cmd_train(
            &cfg_b,
            &TrainOptions {
                stop_after: Some(stop),
                ..all_stages()
            },
        )
        .unwrap();
        assert!(s.interrupted);
    }
    cmd_train(&cfg_b, &all_stages()).unwrap();
    for f in ["stage1.ckpt", "stage2.ckpt", LOSS_LOG] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
}

#[test]
fn stage_two_needs_stage_one() {
    let (_dir, cfg) = prepared("");
    let opts = TrainOptions {
        stages: StageSelection::Two,
        ..all_stages()
    };
    let err = cmd_train(&cfg, &opts).unwrap_err();
    assert!(format!("{err:#}").contains("stage-1 checkpoint"));
    cmd_train(
        &cfg,
        &TrainOptions {
            stages: StageSelection::One,
            ..all_stages()
        },
    )
    .unwrap();
    assert_eq!(cmd_train(&cfg, &opts).unwrap().iterations, 4);
}

#[test]
fn training_without_a_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    assert!(cmd_train(&cfg, &all_stages()).is_err());
}

#[test]
fn no_alignment_has_no_localization_network() {
    let (dir, cfg) = prepared("st2n.alignment = none");
    assert_eq!(cfg.model.st2n.alignment, Alignment::None);
    cmd_train(&cfg, &all_stages()).unwrap();
    let ck = trl_core::checkpoint::Checkpoint::<f32>::load(dir.path().join("out/stage2.ckpt")).unwrap();
    let m = ck.model(&cfg.model).unwrap();
    assert_eq!(m.store.count_with_prefix("loc."), 0);
}

#[test]
fn untrained_model_evaluation_is_bounded() {
    let (dir, cfg) = prepared("train.stage1_iterations = 0\ntrain.stage2_iterations = 0\neval.ranks = 1, 3");
    cmd_train(&cfg, &all_stages()).unwrap();
    let ck = dir.path().join("out/stage2.ckpt");
    let (reports, text) = cmd_eval(&cfg, &[ck], None).unwrap();
    // Three test identities, one gallery sequence each.
    for r in &reports {
        assert_eq!(r.rank(3), Some(1.0));
        assert!((0.0..=1.0).contains(&r.map));
    }
    assert!(text.starts_with("trial   Rank-1  Rank-5 Rank-20     mAP\n"), "{text}");
    assert!(dir.path().join("out/eval_cmc.csv").exists());
}

#[test]
fn cross_evaluation_on_the_same_dataset_matches() {
    let (dir, cfg) = prepared("");
    let mut ckpts = Vec::new();
    for trial in 0..2 {
        let mut c = cfg.clone();
        c.out_dir = dir.path().join(format!("t{trial}")).display().to_string();
        cmd_train(&c, &TrainOptions { trial, ..all_stages() }).unwrap();
        ckpts.push(dir.path().join(format!("t{trial}/stage2.ckpt")));
    }
    let (within, _) = cmd_eval(&cfg, &ckpts, None).unwrap();
    let (cross, text) = cmd_eval(&cfg, &ckpts, Some(&dir.path().join("data"))).unwrap();
    assert!(text.starts_with("trained on data, tested on data"));
    for (w, c) in within.iter().zip(&cross) {
        assert_eq!((&w.cmc, w.map), (&c.cmc, c.map));
    }
}

#[test]
fn eval_rejects_a_checkpoint_of_another_model() {
    let (dir, cfg) = prepared("");
    cmd_train(&cfg, &all_stages()).unwrap();
    let mut other = cfg.clone();
    other.model.trl.hidden = 5;
    assert!(cmd_eval(&other, &[dir.path().join("out/stage2.ckpt")], None).is_err());
}

#[test]
fn gradcheck_passes_and_names_the_worst_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = cmd_gradcheck(&cfg).unwrap();
    assert!(out.contains("worst block: "), "{out}");
    assert!(out.contains("gradient check passed"));
}

#[test]
fn corrupted_backward_makes_the_binary_fail() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "gradcheck.corrupt_backward = true");
    let status = Command::new(env!("CARGO_BIN_EXE_trl"))
        .args(["gradcheck", "--config"])
        .arg(dir.path().join("run.conf"))
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("gradient check failed"));
}

#[test]
fn binary_runs_gen() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_trl"))
        .args(["gen", "--config"])
        .arg(dir.path().join("run.conf"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("wrote 6 identities"));
}

#[test]
fn alignviz_on_an_untrained_model() {
    let (_dir, cfg) = prepared("");
    let r = cmd_alignviz(&cfg, None, "id0000/cam1/seq00").unwrap();
    assert_eq!(r.theta.len(), 5);
    assert!(r.theta.iter().all(|th| *th == [1.0, 1.0, 0.0, 0.0]));
    assert_eq!(r.images.len(), 10);
    assert!(r.images.iter().all(|p| p.exists()));
    let csv = std::fs::read_to_string(&r.theta_csv).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(r.correlation.is_some());
    assert!(cmd_alignviz(&cfg, None, "id9999/cam1/seq00").is_err());
}
