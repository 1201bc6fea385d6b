//! Two-stream convolutional feature extractor: one shared front-end producing
//! low-level maps `Y`, and a separate tail per stream producing high-level
//! maps `X` and per-frame descriptors.
//!
//! All maps are channels-last and batched over frames: `[N,H,W,C]`.

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{global_avg_pool, init_gaussian, ParamStore, Session, GAUSSIAN_INIT_VARIANCE};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Original frames (OSD).
    Main,
    /// Spatially transformed frames (ASD).
    Aligned,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Main, Stream::Aligned];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Main => "main",
            Stream::Aligned => "aligned",
        }
    }
}

/// Parameter name prefix of a stream's tail.
pub fn tail_prefix(stream: Stream) -> String {
    format!("tail.{}", stream.tag())
}

/// Parameter name prefix of a stream's descriptor projection.
pub fn projection_prefix(stream: Stream) -> String {
    format!("desc.{}", stream.tag())
}

fn init_conv<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, &format!("init/{name}"));
    store.insert(
        format!("{name}.w"),
        init_gaussian(&[KERNEL, KERNEL, cin, cout], GAUSSIAN_INIT_VARIANCE, &mut r)?,
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    Ok(())
}

/// Gaussian conv weights and zero biases for the front-end, both tails and
/// (when `descriptor_dim` differs from the tail width) both projections.
pub fn init_backbone<F: Real>(store: &mut ParamStore<F>, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut cin = 3;
    for (k, &c) in cfg.front_channels.iter().enumerate() {
        init_conv(store, &format!("front.conv{k}"), cin, c, seed)?;
        cin = c;
    }
    let c1 = cin;
    for stream in Stream::BOTH {
        let mut cin = c1;
        for (k, &c) in cfg.tail_channels.iter().enumerate() {
            init_conv(store, &format!("{}.conv{k}", tail_prefix(stream)), cin, c, seed)?;
            cin = c;
        }
        if cin != cfg.descriptor_dim {
            let name = projection_prefix(stream);
            let mut r = rng::stream(seed, &format!("init/{name}"));
            store.insert(
                format!("{name}.w"),
                init_gaussian(&[cin, cfg.descriptor_dim], GAUSSIAN_INIT_VARIANCE, &mut r)?,
            );
            store.insert(format!("{name}.b"), Tensor::zeros(&[cfg.descriptor_dim]));
        }
    }
    Ok(())
}

/// Stack of `conv3x3 + bias + ReLU (+ maxpool)` stages.
fn conv_stack<F: Real>(s: &mut Session<F>, prefix: &str, mut x: Var, pools: &[usize]) -> Result<Var> {
    for (k, &pool) in pools.iter().enumerate() {
        let w = s.p(&format!("{prefix}.conv{k}.w"))?;
        let b = s.p(&format!("{prefix}.conv{k}.b"))?;
        let g = &mut s.graph;
        x = g.conv2d(x, w, 1, KERNEL / 2)?;
        x = g.add_row_bias(x, b)?;
        x = g.relu(x);
        if pool > 1 {
            x = g.max_pool2d(x, pool, pool)?;
        }
    }
    Ok(x)
}

/// Shared low-level maps `Y: [N,H1,W1,C1]` from frames `[N,Hin,Win,3]`.
pub fn front_end<F: Real>(s: &mut Session<F>, cfg: &BackboneConfig, frames: Var) -> Result<Var> {
    let shape = s.graph.shape(frames).to_vec();
    let expected = [cfg.input_height, cfg.input_width, 3];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::dim(
            "front_end",
            format!("frames {shape:?}, expected [N, {}, {}, 3]", expected[0], expected[1]),
        ));
    }
    conv_stack(s, "front", frames, &cfg.front_pool)
}

/// High-level maps `X: [N,H2,W2,C2]` from `Y` (or aligned `Ŷ`) using the
/// given stream's own tail.
pub fn tail<F: Real>(s: &mut Session<F>, cfg: &BackboneConfig, y: Var, stream: Stream) -> Result<Var> {
    let (h, w, c) = cfg.front_shape();
    let shape = s.graph.shape(y).to_vec();
    if shape.len() != 4 || shape[1..] != [h, w, c] {
        return Err(Error::dim(
            "tail",
            format!("input {shape:?}, expected [N, {h}, {w}, {c}]"),
        ));
    }
    conv_stack(s, &tail_prefix(stream), y, &cfg.tail_pool)
}

/// Per-frame descriptors `f: [N,D]`: global average pooling of `X`, then the
/// stream's projection if one exists.
pub fn frame_descriptor<F: Real>(s: &mut Session<F>, x: Var, stream: Stream) -> Result<Var> {
    let pooled = global_avg_pool(&mut s.graph, x)?;
    let proj = projection_prefix(stream);
    if s.has(&format!("{proj}.w")) {
        s.linear(&proj, pooled)
    } else {
        Ok(pooled)
    }
}
