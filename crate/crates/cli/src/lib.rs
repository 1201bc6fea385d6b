//! Commands behind the `trl` binary. Each `cmd_*` function does the work of
//! one subcommand and returns what it printed, so tests can drive the same
//! code paths without spawning processes.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trl_core::config::{Protocol, RunConfig};
use trl_core::data::{load_dataset, synth_generate, DatasetIndex};
use trl_core::eval::{protocol_splits, Split};
use trl_core::training::full_model_gradcheck;

mod alignviz;
mod evaluate;
mod train;

pub use alignviz::{cmd_alignviz, AlignvizReport};
pub use evaluate::cmd_eval;
pub use train::{cmd_train, StageSelection, TrainOptions, TrainSummary, LOSS_LOG};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub protocol: Option<Protocol>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out_dir {
            cfg.out_dir = out.to_string_lossy().into_owned();
        }
        if let Some(p) = self.protocol {
            cfg.eval.protocol = p;
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// The dataset named by `data.root`; an empty index is an error.
pub fn open_dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    let root = cfg.data_root()?;
    if !Path::new(root).is_dir() {
        bail!("dataset root {root} does not exist (run `trl gen` first)");
    }
    let index = load_dataset(root, cfg.min_length)?;
    if index.is_empty() {
        bail!("no sequences with at least {} frames under {root}", cfg.min_length);
    }
    Ok(index)
}

/// Split `trial` of the configured protocol.
pub fn split_for_trial(cfg: &RunConfig, index: &DatasetIndex, trial: usize) -> Result<Split> {
    let mut splits = protocol_splits(index, cfg.eval.protocol, cfg.eval.trials, cfg.eval.train_identities, cfg.seed)?;
    if trial >= splits.len() {
        bail!(
            "trial {trial} does not exist: the {} protocol has {} split(s)",
            cfg.eval.protocol.keyword(),
            splits.len()
        );
    }
    Ok(splits.swap_remove(trial))
}

/// Renders the synthetic dataset into `data.root`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    let root = cfg.data_root()?;
    let s = synth_generate(&cfg.synth, root)?;
    Ok(format!(
        "wrote {} identities, {} sequences, {} frames to {}\n",
        s.identities,
        s.sequences,
        s.frames,
        s.root.display()
    ))
}

/// Full-model finite-difference check; fails when any block exceeds the
/// configured tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    let reports = full_model_gradcheck(&cfg.model, &cfg.gradcheck, cfg.seed)?;
    let mut out = String::new();
    for r in &reports {
        out.push_str(&format!(
            "{:<32} checked {:>4}  max rel error {:.3e}\n",
            r.name, r.checked, r.max_error
        ));
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .context("gradient check covered no parameters")?;
    out.push_str(&format!(
        "worst block: {} (error {:.3e} at element {}, analytic {:.6e}, numeric {:.6e})\n",
        worst.name, worst.max_error, worst.worst_index, worst.analytic, worst.numeric
    ));
    if !(worst.max_error <= cfg.gradcheck.tolerance) {
        bail!(
            "{out}gradient check failed: {} exceeds tolerance {:.1e} with {:.3e}",
            worst.name,
            cfg.gradcheck.tolerance,
            worst.max_error
        );
    }
    out.push_str(&format!("gradient check passed (tolerance {:.1e})\n", cfg.gradcheck.tolerance));
    Ok(out)
}
