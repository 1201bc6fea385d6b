use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trl_core::checkpoint::Checkpoint;
use trl_core::config::RunConfig;
use trl_core::data::{load_dataset, DatasetIndex};
use trl_core::eval::{average_reports, cmc_csv, probe_gallery, protocol_splits, summary_csv, EvalReport};
use trl_core::pipeline::{describe_records, evaluation_records, load_all};

use crate::{open_dataset, out_dir};

pub const CMC_FILE: &str = "eval_cmc.csv";
pub const SUMMARY_FILE: &str = "eval_summary.csv";

fn domain_name(index: &DatasetIndex) -> String {
    index
        .root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| index.root.display().to_string())
}

/// Evaluates checkpoint `t` on split `t` of the configured protocol and
/// averages over the checkpoints given. With `cross`, the test identities
/// and sequences come from that dataset instead. Returns the per-trial
/// reports followed by their mean.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], cross: Option<&Path>) -> Result<(Vec<EvalReport>, String)> {
    if checkpoints.is_empty() {
        bail!("no checkpoint given");
    }
    let train_index = open_dataset(cfg)?;
    let test_index = match cross {
        Some(root) => {
            let idx = load_dataset(root, cfg.min_length)?;
            if idx.is_empty() {
                bail!("no sequences under {}", root.display());
            }
            idx
        }
        None => train_index.clone(),
    };
    let protocol = cfg.eval.protocol;
    let splits = protocol_splits(&test_index, protocol, cfg.eval.trials, cfg.eval.train_identities, cfg.seed)?;
    if checkpoints.len() > splits.len() {
        bail!(
            "{} checkpoints given but the {} protocol has {} split(s)",
            checkpoints.len(),
            protocol.keyword(),
            splits.len()
        );
    }
    let frames = load_all::<f32>(&test_index)?;
    let domains = cross.map(|_| (domain_name(&train_index), domain_name(&test_index)));
    let digest = cfg.model_digest();

    let mut reports = Vec::with_capacity(checkpoints.len());
    let mut width = None;
    for (t, (path, split)) in checkpoints.iter().zip(&splits).enumerate() {
        let ck = Checkpoint::<f32>::load(path)?;
        ck.check_digest(&digest).with_context(|| format!("checkpoint {}", path.display()))?;
        let model = ck.model(&cfg.model)?;
        let wanted = evaluation_records(&test_index, split, cfg)?;
        let descriptors = describe_records(&model, &frames, &wanted)?;
        let dim = descriptors[wanted[0]].len();
        if *width.get_or_insert(dim) != dim {
            bail!("checkpoint {} yields {dim}-dimensional descriptors, earlier ones {}", path.display(), width.unwrap_or(0));
        }
        let (probes, gallery) = probe_gallery(&test_index, &split.test, protocol)?;
        let mut report = trl_core::eval::evaluate(&descriptors, &test_index, &probes, &gallery, &cfg.eval.ranks, protocol, Some(t))?;
        report.domains = domains.clone();
        reports.push(report);
    }
    let mean = average_reports(&reports)?;
    reports.push(mean);

    let dir = out_dir(cfg)?;
    std::fs::write(dir.join(CMC_FILE), cmc_csv(&reports)).context("writing CMC table")?;
    std::fs::write(dir.join(SUMMARY_FILE), summary_csv(&reports)).context("writing summary table")?;

    let mut text = String::new();
    if let Some((a, b)) = &domains {
        text.push_str(&format!("trained on {a}, tested on {b}\n"));
    }
    text.push_str(&format!("{:<6} {:>7} {:>7} {:>7} {:>7}\n", "trial", "Rank-1", "Rank-5", "Rank-20", "mAP"));
    for r in &reports {
        text.push_str(&format!("{:<6} {}\n", r.trial_label(), r.summary_line()));
    }
    Ok((reports, text))
}
