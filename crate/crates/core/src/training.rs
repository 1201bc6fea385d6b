//! Gradient clipping, Adam, batch sampling and the two training stages.
//!
//! Stage 1 trains the shared front-end and the transformer with a per-frame
//! identity loss; stage 2 trains everything with one sequence-level identity
//! loss per stream. Every random draw of iteration `i` comes from streams
//! named after `(stage, i)`, so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would have.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{BackboneConfig, GradcheckConfig, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_blocks_with, relative_error_floored, BlockReport};
use crate::graph::Fault;
use crate::model::{self, TwoStreamModel};
use crate::nn::{update_running_stats, Grads, Session};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Clamps every gradient component to `[-bound, bound]`.
pub fn clip_gradients<F: Real>(grads: &mut Grads<F>, bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::Contract(format!("clip bound {bound} must be positive")));
    }
    let b = F::lit(bound);
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = v.max(-b).min(b);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moment estimates per parameter, and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Increments `state.step` first, so the first call uses `t = 1`.
pub fn adam_step<F: Real>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &Grads<F>,
    state: &mut AdamState<F>,
    hp: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != g.shape() {
                    return Err(Error::dim("adam_step", format!("`{name}`: optimizer state {:?}", t.shape())));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(hp.beta1), F::lit(hp.beta2));
    let one = F::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = F::lit(hp.lr);
    let eps = F::lit(hp.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One labelled training sequence, frames `[T,H,W,3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F> {
    pub label: usize,
    pub frames: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    /// `[B·T,H,W,3]`, sequence-major.
    pub frames: Tensor<F>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
}

impl<F> Batch<F> {
    /// One label per frame.
    pub fn frame_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .flat_map(|&l| std::iter::repeat_n(l, self.steps))
            .collect()
    }
}

/// Frame indices of a `steps`-long window starting at `start`, wrapping
/// around sequences shorter than the window.
pub fn window_indices(len: usize, start: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|k| (start + k) % len).collect()
}

/// Batch `iteration` of `stage`. Sequences are visited in shuffled epochs;
/// each visit takes a uniformly random consecutive window of `cfg.frames`
/// frames (cyclically extended when the sequence is shorter).
pub fn sample_batch<F: Real>(
    data: &[Example<F>],
    cfg: &TrainConfig,
    seed: u64,
    stage: u8,
    iteration: usize,
) -> Result<Batch<F>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let (b, steps) = (cfg.batch_size, cfg.frames);
    let mut window = rng::stream(seed, &format!("sample/stage{stage}/window/{iteration}"));
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    let mut frames = Vec::with_capacity(b * steps);
    let mut labels = Vec::with_capacity(b);
    for slot in 0..b {
        let pos = iteration * b + slot;
        let epoch = pos / n;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, &format!("sample/stage{stage}/epoch/{epoch}")));
            perm_epoch = epoch;
        }
        let ex = &data[perm[pos % n]];
        let len = ex.frames.shape()[0];
        let start = if len > steps { window.gen_range(0..=len - steps) } else { 0 };
        for t in window_indices(len, start, steps) {
            frames.push(ex.frames.index_leading(t));
        }
        labels.push(ex.label);
    }
    Ok(Batch {
        frames: Tensor::stack_leading(&frames)?,
        labels,
        batch: b,
        steps,
    })
}

/// One optimizer step; returns the loss before the update.
pub fn train_step<F: Real>(
    model: &mut TwoStreamModel<F>,
    batch: &Batch<F>,
    stage: u8,
    adam: &mut AdamState<F>,
    hp: &AdamConfig,
    clip: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let cfg = model.config.clone();
    let (loss, mut grads, stats) = {
        let mut s = model.session(true, rng::stream(dropout_seed, "dropout"));
        if stage == 1 {
            s = s.with_trainable(model::is_stage1_param);
        }
        let frames = s.graph.constant(batch.frames.clone());
        let loss = if stage == 1 {
            let enc = model::encode(&mut s, &cfg, frames, batch.batch, batch.steps)?;
            model::frame_loss(&mut s, &enc, &batch.frame_labels())?
        } else {
            let out = model::forward(&mut s, &cfg, frames, batch.batch, batch.steps)?;
            model::sequence_loss(&mut s, &out, &batch.labels)?
        };
        let value = s.graph.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("stage {stage} loss is {value}")));
        }
        s.graph.backward(loss)?;
        (value, s.grads(), s.take_batch_stats())
    };
    clip_gradients(&mut grads, clip)?;
    adam_step(&mut model.store.params, &grads, adam, hp)?;
    update_running_stats(&mut model.store, &stats);
    Ok(loss)
}

/// Progress of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState<F> {
    pub stage: u8,
    /// Completed iterations.
    pub iteration: usize,
    pub adam: AdamState<F>,
}

impl<F: Real> StageState<F> {
    pub fn new(stage: u8) -> Self {
        StageState {
            stage,
            iteration: 0,
            adam: AdamState::new(),
        }
    }
}

pub fn stage_settings(cfg: &TrainConfig, stage: u8) -> Result<(usize, AdamConfig)> {
    match stage {
        1 => Ok((cfg.stage1_iterations, AdamConfig::from_train(cfg, cfg.stage1_lr))),
        2 => Ok((cfg.stage2_iterations, AdamConfig::from_train(cfg, cfg.stage2_lr))),
        other => Err(Error::Contract(format!("no training stage {other}"))),
    }
}

/// Runs `state.stage` from `state.iteration` up to `until` iterations
/// (capped at the stage's budget), calling `after_step(model, state, loss)`
/// after every update.
pub fn run_stage<F: Real>(
    model: &mut TwoStreamModel<F>,
    data: &[Example<F>],
    cfg: &TrainConfig,
    seed: u64,
    state: &mut StageState<F>,
    until: usize,
    mut after_step: impl FnMut(&TwoStreamModel<F>, &StageState<F>, f64) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= model.num_classes) {
        return Err(Error::Contract(format!(
            "label {} outside the model's {} classes",
            bad.label, model.num_classes
        )));
    }
    let stage = state.stage;
    let (budget, hp) = stage_settings(cfg, stage)?;
    while state.iteration < budget.min(until) {
        let i = state.iteration;
        let batch = sample_batch(data, cfg, seed, stage, i)?;
        let dropout_seed = rng::derive_seed(seed, &format!("dropout/stage{stage}/{i}"));
        let loss = train_step(model, &batch, stage, &mut state.adam, &hp, cfg.clip, dropout_seed)?;
        state.iteration += 1;
        after_step(model, state, loss)?;
    }
    Ok(())
}

/// Stage 1 over its full budget; returns the per-iteration losses.
pub fn stage1_pretrain<F: Real>(
    model: &mut TwoStreamModel<F>,
    data: &[Example<F>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut state = StageState::new(1);
    let mut losses = Vec::new();
    run_stage(model, data, cfg, seed, &mut state, usize::MAX, |_, _, l| {
        losses.push(l);
        Ok(())
    })?;
    Ok(losses)
}

/// Stage 2 over its full budget; returns the per-iteration losses.
pub fn stage2_joint_train<F: Real>(
    model: &mut TwoStreamModel<F>,
    data: &[Example<F>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut state = StageState::new(2);
    let mut losses = Vec::new();
    run_stage(model, data, cfg, seed, &mut state, usize::MAX, |_, _, l| {
        losses.push(l);
        Ok(())
    })?;
    Ok(losses)
}

/// Tiny instance of a model configuration for the full-model gradient
/// check: 8x8 input, one stage per backbone part and narrow layers. The
/// ablation flags and trade-off weights are kept; dropout is off.
pub fn gradcheck_instance(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.backbone = BackboneConfig {
        input_height: 8,
        input_width: 8,
        front_channels: vec![3],
        front_pool: vec![2],
        tail_channels: vec![4],
        tail_pool: vec![1],
        descriptor_dim: 4,
    };
    c.st2n.loc_width = 4;
    c.st2n.loc_hidden = 3;
    c.st2n.dropout = 0.0;
    c.trl.hidden = 3;
    c
}

/// Central-difference check of every parameter block of the tiny model (two
/// identities, two frames each, 64-bit) against the analytic gradient of the
/// summed sequence and frame losses, with errors measured relative to
/// `max(|analytic|, |numeric|, gc.floor)`. Parameters are moved off their
/// initial values first so that no unit starts on a kink or at the identity
/// warp, whose grid lands exactly on pixel centres.
pub fn full_model_gradcheck(cfg: &ModelConfig, gc: &GradcheckConfig, seed: u64) -> Result<Vec<BlockReport>> {
    let tiny = gradcheck_instance(cfg);
    let mut model = TwoStreamModel::<f64>::new(tiny.clone(), 2, seed)?;
    let mut r = rng::stream(seed, "gradcheck/perturb");
    for t in model.store.params.values_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let (b, steps) = (2, 2);
    let frames = Tensor::from_fn(&[b * steps, 8, 8, 3], |_| r.gen_range(0.0..1.0));
    let fault = gc.corrupt_backward.then_some(Fault::SigmoidBackward);
    let blocks: Vec<(String, Tensor<f64>)> = model.store.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let names: Vec<String> = blocks.iter().map(|(k, _)| k.clone()).collect();
    let store = &model.store;
    let floor = gc.floor;
    let error = move |a: f64, n: f64| relative_error_floored(a, n, floor);
    check_blocks_with(&blocks, gc.step, &error, None, |g, vars| {
        let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mut s = Session::new(store, true, rng::stream(seed, "gradcheck/dropout"))
            .with_graph(std::mem::take(g))
            .with_bound(bound);
        s.graph.set_fault(fault);
        let x = s.graph.constant(frames.clone());
        let out = model::forward(&mut s, &tiny, x, b, steps)?;
        let seq = model::sequence_loss(&mut s, &out, &[0, 1])?;
        let per_frame = model::frame_loss(&mut s, &out.encoded, &[0, 0, 1, 1])?;
        let loss = s.graph.add(seq, per_frame)?;
        *g = s.graph;
        Ok(loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_wrap_short_sequences() {
        assert_eq!(window_indices(3, 0, 5), vec![0, 1, 2, 0, 1]);
        assert_eq!(window_indices(10, 4, 3), vec![4, 5, 6]);
    }

    #[test]
    fn sampler_is_a_function_of_the_iteration() {
        let data: Vec<Example<f32>> = (0..5)
            .map(|i| Example {
                label: i,
                frames: Tensor::from_fn(&[7, 2, 2, 3], |k| (k + 100 * i) as f32),
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 3,
            frames: 4,
            ..TrainConfig::default()
        };
        let a = sample_batch(&data, &cfg, 9, 1, 4).unwrap();
        let b = sample_batch(&data, &cfg, 9, 1, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.shape(), &[12, 2, 2, 3]);
        // Over one epoch every sequence is visited exactly once.
        let mut seen: Vec<usize> = (0..5)
            .flat_map(|i| {
                let cfg = TrainConfig {
                    batch_size: 1,
                    ..cfg.clone()
                };
                sample_batch(&data, &cfg, 9, 1, i).unwrap().labels
            })
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
