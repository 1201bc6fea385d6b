//! Layer building blocks: parameter storage and binding, initializers,
//! LSTM / BiLSTM recurrences, fully connected layers, dropout, batch
//! normalization and global average pooling.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Variance of the Gaussian used for convolution and fully connected weights.
pub const GAUSSIAN_INIT_VARIANCE: f64 = 0.01;
pub const FORGET_GATE_BIAS: f64 = 1.0;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Named parameter blocks plus non-trainable buffers (normalization running
/// statistics). Both maps iterate in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    pub params: BTreeMap<String, Tensor<F>>,
    pub buffers: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Gradients keyed by parameter name.
pub type Grads<F> = BTreeMap<String, Tensor<F>>;

/// One forward pass: a fresh graph, the parameters it binds lazily, the
/// train/eval mode and the dropout stream.
pub struct Session<'p, F: Real> {
    pub graph: Graph<F>,
    store: &'p ParamStore<F>,
    bound: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    training: bool,
    rng: ChaCha8Rng,
    batch_stats: Vec<(String, Vec<F>, Vec<F>)>,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(store: &'p ParamStore<F>, training: bool, rng: ChaCha8Rng) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: Box::new(|_| true),
            training,
            rng,
            batch_stats: Vec::new(),
        }
    }

    pub fn with_graph(mut self, graph: Graph<F>) -> Self {
        self.graph = graph;
        self
    }

    /// Pre-bound variables for named parameters, used instead of the store's
    /// values.
    pub fn with_bound(mut self, bound: BTreeMap<String, Var>) -> Self {
        self.bound = bound;
        self
    }

    /// Restrict which parameters receive gradients; the rest are bound as
    /// constants.
    pub fn with_trainable(mut self, f: impl Fn(&str) -> bool + 'p) -> Self {
        self.trainable = Box::new(f);
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    /// Graph variable for a named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.params.contains_key(name)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn grads(&self) -> Grads<F> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.graph.grad(v).map(|g| (k.clone(), g)))
            .collect()
    }

    /// Batch statistics observed by normalization layers during a training
    /// forward pass, as `(layer prefix, mean, variance)`.
    pub fn take_batch_stats(&mut self) -> Vec<(String, Vec<F>, Vec<F>)> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn lstm(&mut self, prefix: &str) -> Result<LstmVars> {
        let w_hh = self.p(&format!("{prefix}.w_hh"))?;
        Ok(LstmVars {
            w_ih: self.p(&format!("{prefix}.w_ih"))?,
            w_hh,
            bias: self.p(&format!("{prefix}.b"))?,
            hidden: self.graph.shape(w_hh)[0],
        })
    }

    pub fn bilstm(&mut self, prefix: &str) -> Result<BiLstmVars> {
        Ok(BiLstmVars {
            forward: self.lstm(&format!("{prefix}.fw"))?,
            backward: self.lstm(&format!("{prefix}.bw"))?,
        })
    }

    /// Fully connected layer `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        fully_connected(&mut self.graph, x, w, b)
    }

    /// Batch normalization over all axes but the channel axis, with running
    /// statistics `{prefix}.running_mean` / `.running_var` in eval mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let eps = F::lit(BATCH_NORM_EPS);
        if self.training {
            let (y, mean, var) = self.graph.batch_norm(x, gamma, beta, None, eps)?;
            self.batch_stats.push((prefix.to_string(), mean, var));
            Ok(y)
        } else {
            let store = self.store;
            let mean = buffer(store, &format!("{prefix}.running_mean"))?;
            let var = buffer(store, &format!("{prefix}.running_var"))?;
            let (y, _, _) = self
                .graph
                .batch_norm(x, gamma, beta, Some((mean.data(), var.data())), eps)?;
            Ok(y)
        }
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let training = self.training;
        dropout(&mut self.graph, x, rate, training, &mut self.rng)
    }
}

fn buffer<'a, F: Real>(store: &'a ParamStore<F>, name: &str) -> Result<&'a Tensor<F>> {
    store
        .buffers
        .get(name)
        .ok_or_else(|| Error::Contract(format!("unknown buffer `{name}`")))
}

/// Folds batch statistics into running averages.
pub fn update_running_stats<F: Real>(store: &mut ParamStore<F>, stats: &[(String, Vec<F>, Vec<F>)]) {
    let m = F::lit(BATCH_NORM_MOMENTUM);
    for (prefix, mean, var) in stats {
        for (suffix, fresh) in [("running_mean", mean), ("running_var", var)] {
            if let Some(buf) = store.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                for (r, &v) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (F::one() - m) * *r + m * v;
                }
            }
        }
    }
}

// -------------------------------------------------------------------------
// Initializers

/// Gaussian with mean 0 and the given variance.
pub fn init_gaussian<F: Real>(shape: &[usize], variance: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim("init_gaussian", format!("degenerate shape {shape:?}")));
    }
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| Error::Contract(format!("gaussian variance {variance}: {e}")))?;
    Ok(Tensor::from_fn(shape, |_| F::lit(normal.sample(rng))))
}

/// Orthogonal initialization. The shape is read as a matrix
/// `shape[0] × prod(shape[1..])`; the shorter side comes out orthonormal, so
/// a square matrix satisfies `WᵀW = I`.
pub fn init_orthogonal<F: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(Error::dim("init_orthogonal", format!("degenerate shape {shape:?}")));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Orthonormalize the `k` vectors of length `len` along the shorter side.
    let (k, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..len).map(|_| normal.sample(rng)).collect())
        .collect();
    for i in 0..k {
        // Two Gram-Schmidt passes keep the result orthogonal to round-off.
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vecs.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
        }
        let norm = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("orthogonal init hit a degenerate draw".into()));
        }
        vecs[i].iter_mut().for_each(|v| *v /= norm);
    }
    let data = (0..rows * cols)
        .map(|idx| {
            let (r, c) = (idx / cols, idx % cols);
            if rows >= cols {
                vecs[c][r]
            } else {
                vecs[r][c]
            }
        })
        .map(F::lit)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

// -------------------------------------------------------------------------
// Recurrent layers

/// LSTM weights in row-vector layout: gates are `x·w_ih + h·w_hh + b`, with
/// the four gate blocks ordered input, forget, cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F> {
    pub w_ih: Tensor<F>,
    pub w_hh: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LstmParams<F> {
    /// Orthogonal weights, forget-gate bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w_ih = init_orthogonal(&[input, 4 * hidden], rng)?;
        let w_hh = init_orthogonal(&[hidden, 4 * hidden], rng)?;
        let bias = Tensor::from_fn(&[4 * hidden], |i| {
            if i / hidden == 1 {
                F::lit(FORGET_GATE_BIAS)
            } else {
                F::zero()
            }
        });
        Ok(LstmParams { w_ih, w_hh, bias })
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<F>) -> LstmVars {
        LstmVars {
            w_ih: g.param(self.w_ih.clone()),
            w_hh: g.param(self.w_hh.clone()),
            bias: g.param(self.bias.clone()),
            hidden: self.hidden(),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore<F>, prefix: &str) {
        store.insert(format!("{prefix}.w_ih"), self.w_ih);
        store.insert(format!("{prefix}.w_hh"), self.w_hh);
        store.insert(format!("{prefix}.b"), self.bias);
    }

    pub fn count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }
}

/// Independent forward and backward LSTMs; outputs concatenate to `2H`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams<F> {
    pub forward: LstmParams<F>,
    pub backward: LstmParams<F>,
}

impl<F: Real> BiLstmParams<F> {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BiLstmParams {
            forward: LstmParams::init(input, hidden, rng)?,
            backward: LstmParams::init(input, hidden, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden()
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BiLstmVars {
        BiLstmVars {
            forward: self.forward.bind(g),
            backward: self.backward.bind(g),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore<F>, prefix: &str) {
        self.forward.insert_into(store, &format!("{prefix}.fw"));
        self.backward.insert_into(store, &format!("{prefix}.bw"));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

/// One LSTM step on a batch: `x: [B,D]`, `h, c: [B,H]` → `(h', c')`.
pub fn lstm_cell_step<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hdim = p.hidden;
    if g.shape(h_prev).last() != Some(&hdim) || g.shape(c_prev) != g.shape(h_prev) {
        return Err(Error::dim(
            "lstm_cell_step",
            format!(
                "state shapes {:?}/{:?} for hidden size {hdim}",
                g.shape(h_prev),
                g.shape(c_prev)
            ),
        ));
    }
    let xw = g.matmul(x, p.w_ih)?;
    let hw = g.matmul(h_prev, p.w_hh)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_row_bias(pre, p.bias)?;
    let gate = |g: &mut Graph<F>, k: usize| g.slice(pre, 1, k * hdim, hdim);
    let i = gate(g, 0)?;
    let f = gate(g, 1)?;
    let cand = gate(g, 2)?;
    let o = gate(g, 3)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one LSTM over per-step inputs `[B,D]`, from zero initial states, in
/// the given order. Returns the hidden state after each consumed step, in
/// consumption order.
fn run_lstm<F: Real>(g: &mut Graph<F>, steps: &[Var], p: &LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let batch = g.shape(steps[0])[0];
    let zeros = Tensor::zeros(&[batch, p.hidden]);
    let mut h = g.constant(zeros.clone());
    let mut c = g.constant(zeros);
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps.len()).rev())
    } else {
        Box::new(0..steps.len())
    };
    let mut outs = vec![h; steps.len()];
    for t in order {
        let (h2, c2) = lstm_cell_step(g, steps[t], h, c, p)?;
        h = h2;
        c = c2;
        outs[t] = h;
    }
    Ok(outs)
}

/// Forward-direction LSTM over per-step inputs; output `t` is `[B,H]`.
pub fn lstm_steps<F: Real>(g: &mut Graph<F>, steps: &[Var], p: &LstmVars) -> Result<Vec<Var>> {
    if steps.is_empty() {
        return Err(Error::EmptySequence("lstm"));
    }
    run_lstm(g, steps, p, false)
}

/// Bidirectional LSTM over per-step inputs `[B,D]`: output `t` is
/// `[forward h_t ; backward h_t]` of shape `[B,2H]`. The forward pass
/// consumes steps `0..T`, the backward pass `T..0`.
pub fn bilstm_steps<F: Real>(g: &mut Graph<F>, steps: &[Var], p: &BiLstmVars) -> Result<Vec<Var>> {
    if steps.is_empty() {
        return Err(Error::EmptySequence("bilstm"));
    }
    let fw = run_lstm(g, steps, &p.forward, false)?;
    let bw = run_lstm(g, steps, &p.backward, true)?;
    fw.into_iter()
        .zip(bw)
        .map(|(f, b)| g.concat(&[f, b], 1))
        .collect()
}

/// Splits `[T,D]` or `[B,T,D]` into per-step `[B,D]` inputs (`B = 1` for a
/// single sequence).
pub fn time_steps<F: Real>(g: &mut Graph<F>, seq: Var) -> Result<Vec<Var>> {
    let s = g.shape(seq).to_vec();
    let seq = match s.len() {
        2 => g.reshape(seq, &[1, s[0], s[1]])?,
        3 => seq,
        _ => return Err(Error::dim("time_steps", format!("sequence shape {s:?}"))),
    };
    let t = g.shape(seq)[1];
    (0..t).map(|i| g.select(seq, 1, i)).collect()
}

/// Inverse of [`time_steps`]: stacks `[B,K]` outputs to `[B,T,K]`, or to
/// `[T,K]` when `single` is set.
pub fn stack_steps<F: Real>(g: &mut Graph<F>, outs: &[Var], single: bool) -> Result<Var> {
    let stacked = g.stack(outs, 1)?;
    if single {
        let s = g.shape(stacked).to_vec();
        g.reshape(stacked, &[s[1], s[2]])
    } else {
        Ok(stacked)
    }
}

/// BiLSTM over a whole sequence `[T,D]` (or a batch `[B,T,D]`), returning
/// `[T,2H]` (or `[B,T,2H]`).
pub fn bilstm_forward<F: Real>(g: &mut Graph<F>, seq: Var, p: &BiLstmVars) -> Result<Var> {
    let single = g.shape(seq).len() == 2;
    if g.shape(seq).get(usize::from(!single)).copied() == Some(0) {
        return Err(Error::EmptySequence("bilstm"));
    }
    let steps = time_steps(g, seq)?;
    let outs = bilstm_steps(g, &steps, p)?;
    stack_steps(g, &outs, single)
}

// -------------------------------------------------------------------------
// Feed-forward pieces

/// Affine map `x·W + b` for `x: [D]` or `[B,D]`, `W: [D,K]`, `b: [K]`.
pub fn fully_connected<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    match s.len() {
        1 => {
            let x2 = g.reshape(x, &[1, s[0]])?;
            let y = g.matmul(x2, w)?;
            let y = g.add_row_bias(y, b)?;
            let k = g.shape(y)[1];
            g.reshape(y, &[k])
        }
        2 => {
            let y = g.matmul(x, w)?;
            g.add_row_bias(y, b)
        }
        _ => Err(Error::dim("fully_connected", format!("input shape {s:?}"))),
    }
}

/// Inverted dropout: in training each unit is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; in eval mode (or at rate
/// 0) the input is returned unchanged.
pub fn dropout<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect();
    g.mul_mask(x, mask)
}

/// Per-channel spatial mean of `[H,W,C]` (or `[N,H,W,C]`).
pub fn global_avg_pool<F: Real>(g: &mut Graph<F>, maps: Var) -> Result<Var> {
    let rank = g.shape(maps).len();
    if !(3..=4).contains(&rank) {
        return Err(Error::dim("global_avg_pool", format!("shape {:?}", g.shape(maps))));
    }
    let h_axis = rank - 3;
    let rows = g.mean(maps, h_axis)?;
    g.mean(rows, h_axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gaussian_statistics() {
        let mut rng = stream(0, "test");
        let t: Tensor<f64> = init_gaussian(&[100_000], GAUSSIAN_INIT_VARIANCE, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.002, "{mean}");
        assert!((var - 0.01).abs() <= 0.002, "{var}");
    }

    fn gram_error(w: &Tensor<f64>, transpose: bool) -> f64 {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        let (k, len) = if transpose { (r, c) } else { (c, r) };
        let at = |v: usize, i: usize| if transpose { w.at(&[v, i]) } else { w.at(&[i, v]) };
        let mut worst: f64 = 0.0;
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..len).map(|i| at(a, i) * at(b, i)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_square_and_recurrent_block() {
        let mut rng = stream(3, "orth");
        let w: Tensor<f64> = init_orthogonal(&[8, 8], &mut rng).unwrap();
        assert!(gram_error(&w, false) <= 1e-4);
        // Hidden-to-hidden block [H, 4H]: rows are orthonormal, i.e. the
        // column-vector 4H×H matrix has orthonormal columns.
        let p: LstmParams<f64> = LstmParams::init(5, 6, &mut rng).unwrap();
        assert!(gram_error(&p.w_hh, true) <= 1e-4);
        assert!(init_orthogonal::<f64>(&[4], &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a: Tensor<f32> = init_gaussian(&[64], 0.01, &mut stream(5, "x")).unwrap();
        let b: Tensor<f32> = init_gaussian(&[64], 0.01, &mut stream(5, "x")).unwrap();
        assert_eq!(a, b);
        let a: Tensor<f32> = init_orthogonal(&[6, 9], &mut stream(5, "y")).unwrap();
        let b: Tensor<f32> = init_orthogonal(&[6, 9], &mut stream(5, "y")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forget_bias_layout() {
        let p: LstmParams<f32> = LstmParams::init(3, 2, &mut stream(0, "b")).unwrap();
        assert_eq!(p.bias.data(), &[0., 0., 1., 1., 0., 0., 0., 0.]);
    }
}
