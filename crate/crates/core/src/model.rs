//! The full two-stream network: shared front-end, per-stream tails and
//! temporal layers, the transformer feeding the aligned stream, and the
//! identity classifier heads used for supervision.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, Stream};
use crate::config::{Alignment, Features, ModelConfig, TemporalCell};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{init_gaussian, ParamStore, Session, GAUSSIAN_INIT_VARIANCE};
use crate::rng;
use crate::st2n::{self, TransformParams};
use crate::tensor::{Real, Tensor};
use crate::trl::{self, StreamFeatures};

/// Classifier on the aligned stream's per-frame descriptors, used while the
/// convolutional layers and the transformer are trained alone.
pub const FRAME_HEAD: &str = "head.frame";

pub fn head_prefix(stream: Stream) -> String {
    format!("head.{}", stream.tag())
}

pub fn trl_prefix(stream: Stream) -> String {
    format!("trl.{}", stream.tag())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel<F: Real> {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore<F>,
}

/// Per-frame outputs of the convolutional part, all batched over `B·T`
/// frames.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub y: Var,
    pub x_main: Var,
    pub theta: Option<Var>,
    pub y_aligned: Var,
    pub x_aligned: Var,
    /// `[B·T,D]`
    pub f_main: Var,
    pub f_aligned: Var,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub encoded: Encoded,
    pub main: StreamFeatures,
    pub aligned: StreamFeatures,
}

fn insert_fc<F: Real>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, &format!("init/{name}"));
    store.insert(
        format!("{name}.w"),
        init_gaussian(&[input, output], GAUSSIAN_INIT_VARIANCE, &mut r)?,
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[output]));
    Ok(())
}

impl<F: Real> TwoStreamModel<F> {
    pub fn new(config: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("at least one identity class is required".into()));
        }
        let mut store = ParamStore::new();
        backbone::init_backbone(&mut store, &config.backbone, seed)?;
        st2n::init_localization(&mut store, &config, seed)?;
        let d = config.backbone.descriptor_dim;
        let k = config.trl.feature_dim();
        for stream in Stream::BOTH {
            trl::init_trl(&mut store, &config.trl, d, &trl_prefix(stream), seed)?;
            insert_fc(&mut store, &head_prefix(stream), k, num_classes, seed)?;
        }
        insert_fc(&mut store, FRAME_HEAD, d, num_classes, seed)?;
        Ok(TwoStreamModel {
            config,
            num_classes,
            store,
        })
    }

    pub fn session(&self, training: bool, rng: ChaCha8Rng) -> Session<'_, F> {
        Session::new(&self.store, training, rng)
    }

    /// Width of the overall sequence descriptor.
    pub fn embedding_dim(&self) -> usize {
        2 * self.config.trl.feature_dim()
    }
}

/// Subtracted from every pixel before the front-end.
pub const PIXEL_MEAN: f64 = 0.5;

/// Convolutional part for `frames: [B·T,H,W,3]` with pixels in `[0,1]`.
pub fn encode<F: Real>(s: &mut Session<F>, cfg: &ModelConfig, frames: Var, batch: usize, steps: usize) -> Result<Encoded> {
    let b = &cfg.backbone;
    let mean = s.graph.constant(Tensor::full(s.graph.shape(frames), F::lit(PIXEL_MEAN)));
    let centred = s.graph.sub(frames, mean)?;
    let y = backbone::front_end(s, b, centred)?;
    let x_main = backbone::tail(s, b, y, Stream::Main)?;
    let (y_aligned, theta) = match cfg.st2n.alignment {
        Alignment::None => (y, None),
        _ => {
            let (ya, th) = st2n::align_sequence(s, cfg, y, x_main, batch, steps)?;
            (ya, Some(th))
        }
    };
    let x_aligned = backbone::tail(s, b, y_aligned, Stream::Aligned)?;
    let f_main = backbone::frame_descriptor(s, x_main, Stream::Main)?;
    let f_aligned = backbone::frame_descriptor(s, x_aligned, Stream::Aligned)?;
    Ok(Encoded {
        y,
        x_main,
        theta,
        y_aligned,
        x_aligned,
        f_main,
        f_aligned,
    })
}

/// Full forward pass for `batch` sequences of `steps` frames.
pub fn forward<F: Real>(s: &mut Session<F>, cfg: &ModelConfig, frames: Var, batch: usize, steps: usize) -> Result<SequenceOutput> {
    let n = s.graph.shape(frames)[0];
    if steps == 0 {
        return Err(Error::EmptySequence("forward"));
    }
    if n != batch * steps {
        return Err(Error::dim("forward", format!("{n} frames for {batch}x{steps}")));
    }
    let encoded = encode(s, cfg, frames, batch, steps)?;
    let d = cfg.backbone.descriptor_dim;
    let run = |s: &mut Session<F>, f: Var, stream: Stream| -> Result<StreamFeatures> {
        let seq = s.graph.reshape(f, &[batch, steps, d])?;
        trl::stream_features(s, &cfg.trl, &trl_prefix(stream), seq)
    };
    let main = run(s, encoded.f_main, Stream::Main)?;
    let aligned = run(s, encoded.f_aligned, Stream::Aligned)?;
    Ok(SequenceOutput {
        encoded,
        main,
        aligned,
    })
}

/// Overall sequence descriptor `[B, 2K]`.
pub fn embed<F: Real>(s: &mut Session<F>, cfg: &ModelConfig, out: &SequenceOutput) -> Result<Var> {
    trl::fuse_overall(&mut s.graph, out.main.fused, out.aligned.fused, cfg.trl.beta)
}

/// Summed identity loss of both streams' sequence features.
pub fn sequence_loss<F: Real>(s: &mut Session<F>, out: &SequenceOutput, labels: &[usize]) -> Result<Var> {
    let lm = s.linear(&head_prefix(Stream::Main), out.main.fused)?;
    let la = s.linear(&head_prefix(Stream::Aligned), out.aligned.fused)?;
    let main = s.graph.softmax_xent(lm, labels)?;
    let aligned = s.graph.softmax_xent(la, labels)?;
    s.graph.add(main, aligned)
}

/// Identity loss of the aligned per-frame descriptors; `labels` has one
/// entry per frame.
pub fn frame_loss<F: Real>(s: &mut Session<F>, enc: &Encoded, labels: &[usize]) -> Result<Var> {
    let logits = s.linear(FRAME_HEAD, enc.f_aligned)?;
    s.graph.softmax_xent(logits, labels)
}

/// Trainable scalar count of a model, from the configuration alone.
pub fn parameter_count(cfg: &ModelConfig, num_classes: usize) -> usize {
    let b = &cfg.backbone;
    let conv_stack = |cin: usize, widths: &[usize]| {
        let mut c = cin;
        widths
            .iter()
            .map(|&w| {
                let n = backbone::KERNEL * backbone::KERNEL * c * w + w;
                c = w;
                n
            })
            .sum::<usize>()
    };
    let (_, _, c1) = b.front_shape();
    let (_, _, c2) = b.tail_shape();
    let d = b.descriptor_dim;
    let projection = if d == c2 { 0 } else { c2 * d + d };
    let mut total = conv_stack(3, &b.front_channels) + 2 * (conv_stack(c1, &b.tail_channels) + projection);

    let lstm = |input: usize, hidden: usize| 4 * hidden * (input + hidden + 1);
    let cell = |input: usize, hidden: usize| match cfg.trl.cell {
        TemporalCell::Lstm => lstm(input, hidden),
        TemporalCell::BiLstm => 2 * lstm(input, hidden),
    };

    let st = &cfg.st2n;
    if st.alignment != Alignment::None {
        let w = st.loc_width;
        let norm = if st.batch_norm { 2 * w } else { w };
        total += c2 * w + w * w + 2 * norm;
        let fc_in = if st.alignment == Alignment::St2n {
            total += 2 * lstm(w, st.loc_hidden);
            2 * st.loc_hidden
        } else {
            w
        };
        total += fc_in * 4 + 4;
    }

    let h = cfg.trl.hidden;
    let k = cfg.trl.feature_dim();
    let mut per_stream = cell(d, h) + k * num_classes + num_classes;
    if cfg.trl.features != Features::Generic {
        per_stream += cell(k, h);
    }
    total + 2 * per_stream + d * num_classes + num_classes
}

/// Parameters trained while the temporal layers are not yet involved: every
/// convolutional block, the localization network and the frame head.
pub fn is_stage1_param(name: &str) -> bool {
    !name.starts_with("trl.") && !name.starts_with("head.main.") && !name.starts_with("head.aligned.")
}

/// Sequences fed to the network per forward pass during inference.
const INFERENCE_BATCH: usize = 16;

/// Overall descriptors of whole sequences (`[T,H,W,3]` each) in eval mode.
/// Sequences of equal length share forward passes.
pub fn describe_sequences<F: Real>(model: &TwoStreamModel<F>, sequences: &[&Tensor<F>]) -> Result<Vec<Vec<f64>>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seq) in sequences.iter().enumerate() {
        if seq.rank() != 4 {
            return Err(Error::dim("describe_sequences", format!("sequence {i} shape {:?}", seq.shape())));
        }
        by_len.entry(seq.shape()[0]).or_default().push(i);
    }
    let mut out = vec![Vec::new(); sequences.len()];
    for (steps, members) in by_len {
        for chunk in members.chunks(INFERENCE_BATCH) {
            let frames: Vec<Tensor<F>> = chunk
                .iter()
                .flat_map(|&i| (0..steps).map(move |t| sequences[i].index_leading(t)))
                .collect();
            let mut s = model.session(false, rng::stream(0, "inference"));
            let x = s.graph.constant(Tensor::stack_leading(&frames)?);
            let fwd = forward(&mut s, &model.config, x, chunk.len(), steps)?;
            let e = embed(&mut s, &model.config, &fwd)?;
            let v = s.graph.value(e);
            let width = v.shape()[1];
            for (row, &i) in chunk.iter().enumerate() {
                out[i] = v.data()[row * width..(row + 1) * width].iter().map(|x| x.as_f64()).collect();
            }
        }
    }
    Ok(out)
}

/// Eval-mode alignment of one sequence `[T,H,W,3]`: low-level maps `Y`,
/// aligned maps `Ŷ` (both `[T,H1,W1,C1]`) and `θ` (`[T,4]`, identity when
/// alignment is disabled).
pub fn inspect_alignment<F: Real>(model: &TwoStreamModel<F>, frames: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let steps = frames.shape()[0];
    let mut s = model.session(false, rng::stream(0, "inference"));
    let x = s.graph.constant(frames.clone());
    let enc = encode(&mut s, &model.config, x, 1, steps)?;
    let theta = match enc.theta {
        Some(t) => s.graph.value(t).clone(),
        None => {
            let id = TransformParams::IDENTITY.to_array();
            Tensor::from_fn(&[steps, 4], |i| F::lit(id[i % 4]))
        }
    };
    Ok((s.graph.value(enc.y).clone(), s.graph.value(enc.y_aligned).clone(), theta))
}
