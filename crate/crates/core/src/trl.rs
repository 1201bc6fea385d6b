//! Temporal residual learning. A first recurrent layer over the per-frame
//! descriptors gives generic features (their temporal mean); the deviations
//! of each step from that mean go through a second recurrent layer whose
//! temporal mean gives the specific features. The two are mixed with weight
//! `α` per stream, and the two streams are joined with weight `β`.
//!
//! Everything is batched: per-step tensors are `[B,K]`.

use crate::config::{Features, TemporalCell, TrlConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{bilstm_steps, lstm_steps, time_steps, BiLstmParams, BiLstmVars, LstmParams, LstmVars, ParamStore, Session};
use crate::rng;
use crate::tensor::Real;

/// Bound recurrent layer of either kind.
#[derive(Clone, Copy, Debug)]
pub enum TemporalVars {
    Lstm(LstmVars),
    BiLstm(BiLstmVars),
}

impl TemporalVars {
    pub fn run<F: Real>(&self, g: &mut Graph<F>, steps: &[Var]) -> Result<Vec<Var>> {
        match self {
            TemporalVars::Lstm(p) => lstm_steps(g, steps, p),
            TemporalVars::BiLstm(p) => bilstm_steps(g, steps, p),
        }
    }
}

fn init_cell<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cell: TemporalCell,
    input: usize,
    hidden: usize,
    seed: u64,
) -> Result<()> {
    let mut r = rng::stream(seed, &format!("init/{prefix}"));
    match cell {
        TemporalCell::Lstm => LstmParams::<F>::init(input, hidden, &mut r)?.insert_into(store, prefix),
        TemporalCell::BiLstm => BiLstmParams::<F>::init(input, hidden, &mut r)?.insert_into(store, prefix),
    }
    Ok(())
}

pub fn bind_cell<F: Real>(s: &mut Session<F>, prefix: &str, cell: TemporalCell) -> Result<TemporalVars> {
    Ok(match cell {
        TemporalCell::Lstm => TemporalVars::Lstm(s.lstm(prefix)?),
        TemporalCell::BiLstm => TemporalVars::BiLstm(s.bilstm(prefix)?),
    })
}

/// Recurrent layers for one stream under `prefix` (`{prefix}.lstm1`, and
/// `{prefix}.lstm2` unless only generic features are used).
pub fn init_trl<F: Real>(store: &mut ParamStore<F>, cfg: &TrlConfig, input: usize, prefix: &str, seed: u64) -> Result<()> {
    init_cell(store, &format!("{prefix}.lstm1"), cfg.cell, input, cfg.hidden, seed)?;
    if cfg.features != Features::Generic {
        let d = cfg.feature_dim();
        init_cell(store, &format!("{prefix}.lstm2"), cfg.cell, d, cfg.hidden, seed)?;
    }
    Ok(())
}

/// Mean over a list of equally shaped `[B,K]` steps.
pub fn temporal_mean<F: Real>(g: &mut Graph<F>, steps: &[Var]) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::EmptySequence("temporal_mean"));
    }
    let stacked = g.stack(steps, 1)?;
    g.mean(stacked, 1)
}

/// First recurrent layer and its temporal mean `ḡ1`.
pub fn generic_features<F: Real>(g: &mut Graph<F>, f_steps: &[Var], lstm1: &TemporalVars) -> Result<(Vec<Var>, Var)> {
    let g1 = lstm1.run(g, f_steps)?;
    let mean = temporal_mean(g, &g1)?;
    Ok((g1, mean))
}

/// Residuals `r_t = ḡ1 − g1_t`.
pub fn residuals<F: Real>(g: &mut Graph<F>, g1_steps: &[Var], gbar1: Var) -> Result<Vec<Var>> {
    g1_steps.iter().map(|&s| g.sub(gbar1, s)).collect()
}

/// Second recurrent layer over the residuals; returns `(r, g2, ḡ2)`.
pub fn specific_features<F: Real>(
    g: &mut Graph<F>,
    g1_steps: &[Var],
    gbar1: Var,
    lstm2: &TemporalVars,
) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let r = residuals(g, g1_steps, gbar1)?;
    let g2 = lstm2.run(g, &r)?;
    let mean = temporal_mean(g, &g2)?;
    Ok((r, g2, mean))
}

/// `α·ḡ1 + (1−α)·ḡ2`.
pub fn fuse_stream<F: Real>(g: &mut Graph<F>, gbar1: Var, gbar2: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")));
    }
    let a = g.scale(gbar1, F::lit(alpha));
    let b = g.scale(gbar2, F::lit(1.0 - alpha));
    g.add(a, b)
}

/// Unit-normalizes each stream vector, weights them `β` and `1−β`, and
/// concatenates. Accepts `[K]` or batched `[B,K]` inputs.
pub fn fuse_overall<F: Real>(g: &mut Graph<F>, g_main: Var, g_aligned: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta = {beta} outside [0, 1]")));
    }
    let single = g.shape(g_main).len() == 1;
    let as_rows = |g: &mut Graph<F>, v: Var| -> Result<Var> {
        if g.shape(v).len() == 1 {
            let k = g.shape(v)[0];
            g.reshape(v, &[1, k])
        } else {
            Ok(v)
        }
    };
    let m = as_rows(g, g_main)?;
    let a = as_rows(g, g_aligned)?;
    let m = g
        .l2_normalize_rows(m)
        .map_err(|e| Error::Numeric(format!("main-stream sequence feature: {e}")))?;
    let a = g
        .l2_normalize_rows(a)
        .map_err(|e| Error::Numeric(format!("aligned-stream sequence feature: {e}")))?;
    let m = g.scale(m, F::lit(beta));
    let a = g.scale(a, F::lit(1.0 - beta));
    let out = g.concat(&[m, a], 1)?;
    if single {
        let k = g.shape(out)[1];
        g.reshape(out, &[k])
    } else {
        Ok(out)
    }
}

/// Every intermediate of one stream's temporal pass.
#[derive(Clone, Debug)]
pub struct StreamFeatures {
    pub g1_steps: Vec<Var>,
    pub gbar1: Var,
    pub residuals: Vec<Var>,
    pub g2_steps: Vec<Var>,
    pub gbar2: Option<Var>,
    /// Fused per-stream sequence feature `[B,K]`.
    pub fused: Var,
}

/// Temporal pass over per-frame descriptors `f: [B,T,D]` using the
/// recurrent layers under `prefix`.
pub fn stream_features<F: Real>(s: &mut Session<F>, cfg: &TrlConfig, prefix: &str, f: Var) -> Result<StreamFeatures> {
    let steps = time_steps(&mut s.graph, f)?;
    let lstm1 = bind_cell(s, &format!("{prefix}.lstm1"), cfg.cell)?;
    let (g1_steps, gbar1) = generic_features(&mut s.graph, &steps, &lstm1)?;
    if cfg.features == Features::Generic {
        return Ok(StreamFeatures {
            g1_steps,
            gbar1,
            residuals: Vec::new(),
            g2_steps: Vec::new(),
            gbar2: None,
            fused: gbar1,
        });
    }
    let lstm2 = bind_cell(s, &format!("{prefix}.lstm2"), cfg.cell)?;
    let (residuals, g2_steps, gbar2) = specific_features(&mut s.graph, &g1_steps, gbar1, &lstm2)?;
    let fused = match cfg.features {
        Features::Specific => gbar2,
        _ => fuse_stream(&mut s.graph, gbar1, gbar2, cfg.alpha)?,
    };
    Ok(StreamFeatures {
        g1_steps,
        gbar1,
        residuals,
        g2_steps,
        gbar2: Some(gbar2),
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fusion_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2], &[2.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2], &[0.0, 4.0]).unwrap());
        let f = fuse_stream(&mut g, a, b, 0.5).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 3.0]);
        assert!(matches!(fuse_stream(&mut g, a, b, 1.5), Err(Error::Config(_))));

        let o = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let al = g.constant(Tensor::from_f64(&[2], &[0.0, 5.0]).unwrap());
        let v = fuse_overall(&mut g, o, al, 0.5).unwrap();
        let got = g.value(v).data();
        for (x, y) in got.iter().zip([0.3, 0.4, 0.0, 0.5]) {
            assert!((x - y).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn zero_stream_is_a_numeric_error() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[2]));
        let err = fuse_overall(&mut g, o, z, 0.5).unwrap_err();
        assert!(err.to_string().contains("aligned-stream"), "{err}");
    }
}
