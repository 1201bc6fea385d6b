//! Spatial-temporal transformer. A localization network reads each frame's
//! high-level map, a BiLSTM mixes context across the sequence, and a final
//! fully connected layer predicts `θ_t = (s_x, s_y, τ_x, τ_y)`. Each frame's
//! low-level map is then resampled through the scale/translation warp.
//!
//! Frames of a batch of `B` sequences of length `T` are laid out
//! sequence-major: row `b·T + t`.

use crate::config::{Alignment, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{global_avg_pool, init_gaussian, BiLstmParams, ParamStore, Session, GAUSSIAN_INIT_VARIANCE};
use crate::nn::{bilstm_steps, time_steps};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Per-frame scale/translation parameters. Translations are in normalized
/// coordinates where the map spans `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Splits `θ: [N,4]` into per-frame parameters.
    pub fn from_tensor<F: Real>(theta: &Tensor<F>) -> Result<Vec<TransformParams>> {
        if theta.rank() != 2 || theta.shape()[1] != 4 {
            return Err(Error::dim("TransformParams", format!("theta shape {:?}", theta.shape())));
        }
        Ok(theta
            .to_f64_vec()
            .chunks(4)
            .map(|r| TransformParams {
                sx: r[0],
                sy: r[1],
                tx: r[2],
                ty: r[3],
            })
            .collect())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sx, self.sy, self.tx, self.ty]
    }

    /// `[[s_x, 0, τ_x], [0, s_y, τ_y]]`.
    pub fn affine(self) -> [[f64; 3]; 2] {
        [[self.sx, 0.0, self.tx], [0.0, self.sy, self.ty]]
    }
}

pub const LOC_PREFIX: &str = "loc";

/// Localization network parameters. The final layer starts at zero weights
/// with bias `(1, 1, 0, 0)` so every frame begins at the identity warp.
pub fn init_localization<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let st = &cfg.st2n;
    if st.alignment == Alignment::None {
        return Ok(());
    }
    let (_, _, c2) = cfg.backbone.tail_shape();
    let width = st.loc_width;
    for (k, cin) in [(0, c2), (1, width)] {
        let name = format!("{LOC_PREFIX}.conv{k}");
        let mut r = rng::stream(seed, &format!("init/{name}"));
        store.insert(
            format!("{name}.w"),
            init_gaussian(&[1, 1, cin, width], GAUSSIAN_INIT_VARIANCE, &mut r)?,
        );
        if st.batch_norm {
            let bn = format!("{LOC_PREFIX}.bn{k}");
            store.insert(format!("{bn}.gamma"), Tensor::full(&[width], F::one()));
            store.insert(format!("{bn}.beta"), Tensor::zeros(&[width]));
            store.buffers.insert(format!("{bn}.running_mean"), Tensor::zeros(&[width]));
            store.buffers.insert(format!("{bn}.running_var"), Tensor::full(&[width], F::one()));
        } else {
            store.insert(format!("{name}.b"), Tensor::zeros(&[width]));
        }
    }
    let fc_in = match st.alignment {
        Alignment::St2n => {
            let name = format!("{LOC_PREFIX}.bilstm");
            let mut r = rng::stream(seed, &format!("init/{name}"));
            BiLstmParams::<F>::init(width, st.loc_hidden, &mut r)?.insert_into(store, &name);
            2 * st.loc_hidden
        }
        _ => width,
    };
    store.insert(format!("{LOC_PREFIX}.fc.w"), Tensor::zeros(&[fc_in, 4]));
    store.insert(
        format!("{LOC_PREFIX}.fc.b"),
        Tensor::from_f64(&[4], &TransformParams::IDENTITY.to_array())?,
    );
    Ok(())
}

/// Per-frame context vectors `c: [N,width]`: two 1x1 convolutions with
/// normalization and ReLU around a 2x2 max pool, then global average pooling.
fn context_vectors<F: Real>(s: &mut Session<F>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for k in 0..2 {
        let w = s.p(&format!("{LOC_PREFIX}.conv{k}.w"))?;
        h = s.graph.conv2d(h, w, 1, 0)?;
        if cfg.st2n.batch_norm {
            h = s.batch_norm(&format!("{LOC_PREFIX}.bn{k}"), h)?;
        } else {
            let b = s.p(&format!("{LOC_PREFIX}.conv{k}.b"))?;
            h = s.graph.add_row_bias(h, b)?;
        }
        h = s.graph.relu(h);
        if k == 0 {
            h = s.graph.max_pool2d(h, 2, 2)?;
        }
    }
    global_avg_pool(&mut s.graph, h)
}

/// Raw transform parameters `θ: [B·T,4]` for the high-level maps
/// `x: [B·T,H2,W2,C2]` of `batch` sequences of `steps` frames.
pub fn localize<F: Real>(s: &mut Session<F>, cfg: &ModelConfig, x: Var, batch: usize, steps: usize) -> Result<Var> {
    if steps == 0 || batch == 0 {
        return Err(Error::EmptySequence("localize"));
    }
    let n = s.graph.shape(x)[0];
    if n != batch * steps {
        return Err(Error::dim("localize", format!("{n} maps for {batch}x{steps} frames")));
    }
    let c = context_vectors(s, cfg, x)?;
    let features = match cfg.st2n.alignment {
        Alignment::St2n => {
            let width = s.graph.shape(c)[1];
            let seq = s.graph.reshape(c, &[batch, steps, width])?;
            let per_step = time_steps(&mut s.graph, seq)?;
            let p = s.bilstm(&format!("{LOC_PREFIX}.bilstm"))?;
            let outs = bilstm_steps(&mut s.graph, &per_step, &p)?;
            let stacked = s.graph.stack(&outs, 1)?;
            let k = s.graph.shape(stacked)[2];
            let flat = s.graph.reshape(stacked, &[n, k])?;
            s.dropout(flat, cfg.st2n.dropout)?
        }
        Alignment::Stn => c,
        Alignment::None => {
            return Err(Error::Contract("localize called with alignment disabled".into()));
        }
    };
    s.linear(&format!("{LOC_PREFIX}.fc"), features)
}

/// Affine matrices `[N,2,3]` from `θ: [N,4]`.
pub fn build_affine<F: Real>(g: &mut Graph<F>, theta: Var, scale_clamp: Option<(f64, f64)>) -> Result<Var> {
    g.affine_from_theta(theta, scale_clamp.map(|(lo, hi)| (F::lit(lo), F::lit(hi))))
}

/// Source coordinates `[N,out_h,out_w,2]` for each target pixel.
pub fn generate_grid<F: Real>(g: &mut Graph<F>, affine: Var, out_h: usize, out_w: usize) -> Result<Var> {
    g.affine_grid(affine, out_h, out_w)
}

/// Bilinear resampling of `y: [N,H,W,C]` at `grid`; out-of-bounds taps read
/// zero.
pub fn bilinear_sample<F: Real>(g: &mut Graph<F>, y: Var, grid: Var) -> Result<Var> {
    g.bilinear_sample(y, grid)
}

/// Aligned low-level maps `Ŷ` (same shape as `y`) and the predicted `θ`.
pub fn align_sequence<F: Real>(
    s: &mut Session<F>,
    cfg: &ModelConfig,
    y: Var,
    x: Var,
    batch: usize,
    steps: usize,
) -> Result<(Var, Var)> {
    let (ny, nx) = (s.graph.shape(y)[0], s.graph.shape(x)[0]);
    if ny != nx {
        return Err(Error::dim("align_sequence", format!("{ny} low-level maps, {nx} high-level maps")));
    }
    let theta = localize(s, cfg, x, batch, steps)?;
    let (h, w) = (s.graph.shape(y)[1], s.graph.shape(y)[2]);
    let g = &mut s.graph;
    let affine = build_affine(g, theta, cfg.st2n.scale_clamp)?;
    let grid = generate_grid(g, affine, h, w)?;
    let aligned = bilinear_sample(g, y, grid)?;
    Ok((aligned, theta))
}
