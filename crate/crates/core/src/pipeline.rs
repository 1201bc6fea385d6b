//! Glue between datasets, splits, training and evaluation.

use crate::data::loader::load_frames;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Split};
use crate::model::{describe_sequences, TwoStreamModel};
use crate::config::RunConfig;
use crate::tensor::{Real, Tensor};
use crate::training::{run_stage, Example, StageState};

/// Frames of every indexed sequence, in index order.
pub fn load_all<F: Real>(index: &DatasetIndex) -> Result<Vec<Tensor<F>>> {
    index.records.iter().map(load_frames).collect()
}

/// Training examples for the given identities, labelled by their position
/// in `identities` (which must be sorted).
pub fn training_examples<F: Real>(index: &DatasetIndex, frames: &[Tensor<F>], identities: &[String]) -> Result<Vec<Example<F>>> {
    let examples: Vec<Example<F>> = index
        .records
        .iter()
        .zip(frames)
        .filter_map(|(r, f)| {
            identities.binary_search(&r.identity).ok().map(|label| Example {
                label,
                frames: f.clone(),
            })
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::Contract("no training sequences for the selected identities".into()));
    }
    Ok(examples)
}

/// Fresh model trained through both stages; `log(stage, iteration, loss)` is
/// called after every step.
pub fn train_model<F: Real>(
    cfg: &RunConfig,
    examples: &[Example<F>],
    num_classes: usize,
    mut log: impl FnMut(u8, usize, f64),
) -> Result<TwoStreamModel<F>> {
    let mut model = TwoStreamModel::new(cfg.model.clone(), num_classes, cfg.seed)?;
    for stage in [1, 2] {
        let mut state = StageState::new(stage);
        run_stage(&mut model, examples, &cfg.train, cfg.seed, &mut state, usize::MAX, |_, st, loss| {
            log(stage, st.iteration, loss);
            Ok(())
        })?;
    }
    Ok(model)
}

/// Descriptors for the records in `wanted`; other entries stay empty.
pub fn describe_records<F: Real>(model: &TwoStreamModel<F>, frames: &[Tensor<F>], wanted: &[usize]) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<&Tensor<F>> = wanted.iter().map(|&r| &frames[r]).collect();
    let described = describe_sequences(model, &seqs)?;
    let mut out = vec![Vec::new(); frames.len()];
    for (&r, d) in wanted.iter().zip(described) {
        out[r] = d;
    }
    Ok(out)
}

/// Every probe and gallery record of a split's test identities.
pub fn evaluation_records(index: &DatasetIndex, split: &Split, cfg: &RunConfig) -> Result<Vec<usize>> {
    let (mut probes, gallery) = eval::probe_gallery(index, &split.test, cfg.eval.protocol)?;
    probes.extend(gallery);
    probes.sort_unstable();
    probes.dedup();
    Ok(probes)
}

/// Trains on a split's training identities and evaluates on its test
/// identities.
pub fn train_and_evaluate<F: Real>(
    cfg: &RunConfig,
    index: &DatasetIndex,
    frames: &[Tensor<F>],
    split: &Split,
    trial: usize,
) -> Result<(TwoStreamModel<F>, EvalReport)> {
    let examples = training_examples(index, frames, &split.train)?;
    let model = train_model(cfg, &examples, split.train.len(), |_, _, _| {})?;
    let wanted = evaluation_records(index, split, cfg)?;
    let descriptors = describe_records(&model, frames, &wanted)?;
    let (probes, gallery) = eval::probe_gallery(index, &split.test, cfg.eval.protocol)?;
    let report = eval::evaluate(
        &descriptors,
        index,
        &probes,
        &gallery,
        &cfg.eval.ranks,
        cfg.eval.protocol,
        Some(trial),
    )?;
    Ok((model, report))
}
