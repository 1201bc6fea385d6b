//! Stage-wise training with checkpoints and a loss log in the output
//! directory:
//!
//! ```text
//! stage1.ckpt  stage2.ckpt  loss.csv  config.txt
//! ```
//!
//! A run finding a partial checkpoint of the stage it is about to train
//! resumes from it and drops loss-log rows written after that checkpoint.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trl_core::checkpoint::Checkpoint;
use trl_core::config::RunConfig;
use trl_core::model::{parameter_count, TwoStreamModel};
use trl_core::pipeline::{load_all, training_examples};
use trl_core::training::{run_stage, stage_settings, StageState};

use crate::{open_dataset, out_dir, split_for_trial};

pub const LOSS_LOG: &str = "loss.csv";
const LOSS_HEADER: &str = "iteration,stage,stage_iteration,loss";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    All,
}

impl StageSelection {
    fn stages(self) -> &'static [u8] {
        match self {
            StageSelection::One => &[1],
            StageSelection::Two => &[2],
            StageSelection::All => &[1, 2],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub stages: StageSelection,
    /// Split of the configured protocol whose training identities are used.
    pub trial: usize,
    /// Stop (after checkpointing) once this many iterations, counted across
    /// both stages, have completed.
    pub stop_after: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            stages: StageSelection::All,
            trial: 0,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub loss_log: PathBuf,
    /// Iterations executed by this invocation.
    pub iterations: usize,
    pub last_loss: Option<f64>,
    /// Whether `stop_after` ended the run early.
    pub interrupted: bool,
    pub report: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LossRow {
    stage: u8,
    stage_iteration: usize,
    loss: f64,
}

fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (f.len() == 4)
            .then(|| Some((f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?)))
            .flatten();
        let Some((stage, stage_iteration, loss)) = parsed else {
            bail!("{}: malformed line {}", path.display(), i + 1);
        };
        rows.push(LossRow {
            stage,
            stage_iteration,
            loss,
        });
    }
    Ok(rows)
}

fn write_loss_log(path: &Path, rows: &[LossRow], stage1_budget: usize) -> trl_core::Result<()> {
    let mut text = String::from(LOSS_HEADER);
    text.push('\n');
    for r in rows {
        let global = if r.stage == 1 { r.stage_iteration } else { stage1_budget + r.stage_iteration };
        text.push_str(&format!("{global},{},{},{:?}\n", r.stage, r.stage_iteration, r.loss));
    }
    std::fs::write(path, text).map_err(|e| trl_core::Error::io(path, e))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, classes: usize) -> Result<Checkpoint<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    ck.check_digest(&cfg.model_digest())
        .with_context(|| format!("checkpoint {}", path.display()))?;
    if ck.num_classes as usize != classes {
        bail!(
            "checkpoint {} has {} identity classes, the training split has {classes}",
            path.display(),
            ck.num_classes
        );
    }
    Ok(ck)
}

/// Trains the selected stages on the training identities of one split.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let index = open_dataset(cfg)?;
    let split = split_for_trial(cfg, &index, opts.trial)?;
    let frames = load_all::<f32>(&index)?;
    let examples = training_examples(&index, &frames, &split.train)?;
    let classes = split.train.len();
    let digest = cfg.model_digest();
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
    let log_path = dir.join(LOSS_LOG);
    let mut log = read_loss_log(&log_path)?;
    let stage1_budget = cfg.train.stage1_iterations;

    let m = &cfg.model;
    let mut report = format!(
        "model {}-{}-{}: {} parameters, {classes} identities\n",
        m.trl.cell.keyword(),
        m.st2n.alignment.keyword(),
        m.trl.features.keyword(),
        parameter_count(m, classes)
    );
    let mut model: Option<TwoStreamModel<f32>> = None;
    let mut checkpoints = Vec::new();
    let mut iterations = 0;
    let mut last_loss = None;
    let mut interrupted = false;

    for &stage in opts.stages.stages() {
        let path = checkpoint_path(&dir, stage);
        let (budget, _) = stage_settings(&cfg.train, stage)?;
        let (mut current, mut state) = if path.exists() {
            let ck = load_checkpoint(&path, cfg, classes)?;
            if ck.stage != stage {
                bail!("{} holds stage {} state", path.display(), ck.stage);
            }
            (ck.model(&cfg.model)?, ck.stage_state())
        } else if stage == 2 {
            let start = match model.take() {
                Some(m) => m,
                None => {
                    let p1 = checkpoint_path(&dir, 1);
                    if !p1.exists() {
                        bail!("stage 2 needs a stage-1 checkpoint at {} (or use --stage all)", p1.display());
                    }
                    let ck = load_checkpoint(&p1, cfg, classes)?;
                    if (ck.iteration as usize) < stage1_budget {
                        bail!(
                            "stage-1 checkpoint {} stopped at iteration {} of {stage1_budget}",
                            p1.display(),
                            ck.iteration
                        );
                    }
                    ck.model(&cfg.model)?
                }
            };
            (start, StageState::new(2))
        } else {
            (TwoStreamModel::new(cfg.model.clone(), classes, cfg.seed)?, StageState::new(1))
        };

        // Later stages' rows are trimmed when their own checkpoint is read.
        log.retain(|r| r.stage != stage || r.stage_iteration <= state.iteration);
        let offset = if stage == 1 { 0 } else { stage1_budget };
        let until = opts.stop_after.map_or(usize::MAX, |g| g.saturating_sub(offset));
        let resumed_at = state.iteration;
        let interval = cfg.train.checkpoint_interval;

        run_stage(&mut current, &examples, &cfg.train, cfg.seed, &mut state, until, |m, st, loss| {
            log.push(LossRow {
                stage,
                stage_iteration: st.iteration,
                loss,
            });
            if interval > 0 && st.iteration % interval == 0 && st.iteration < budget {
                Checkpoint::new(digest, &m.store, classes, st).save(&path)?;
                write_loss_log(&log_path, &log, stage1_budget)?;
            }
            Ok(())
        })?;
        Checkpoint::new(digest, &current.store, classes, &state).save(&path)?;
        write_loss_log(&log_path, &log, stage1_budget)?;
        checkpoints.push(path.clone());

        let ran = state.iteration - resumed_at;
        iterations += ran;
        if ran > 0 {
            last_loss = log.last().map(|r| r.loss);
        }
        report.push_str(&format!(
            "stage {stage}: iterations {resumed_at}..{} of {budget}{}\n",
            state.iteration,
            last_loss.map_or_else(String::new, |l| format!(", last loss {l:.4}"))
        ));
        if state.iteration < budget {
            interrupted = true;
            report.push_str(&format!("stopped early; rerun to resume from {}\n", path.display()));
            break;
        }
        model = Some(current);
    }
    Ok(TrainSummary {
        checkpoints,
        loss_log: log_path,
        iterations,
        last_loss,
        interrupted,
        report,
    })
}
