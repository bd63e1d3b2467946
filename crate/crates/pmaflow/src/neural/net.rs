//! Scalar softplus MLP with input-derivative propagation and hand-written
//! reverse mode through the (value, input-tangent) pair.

use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::jet::{sigmoid, softplus, Jet3, Smooth};

/// Fully connected scalar network. Hidden layers use softplus, the output is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentNet {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Default)]
pub struct Workspace {
    a: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    ht: Vec<Vec<f64>>,
    ab: Vec<f64>,
    tb: Vec<f64>,
    ab_next: Vec<f64>,
    tb_next: Vec<f64>,
    /// Whether the last forward pass propagated input tangents.
    tangent: bool,
}

impl StudentNet {
    /// Uniform(±1/√fan_in) initialization of weights and biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths[0] != 1 || *widths.last().unwrap() != 1 || widths.contains(&0) {
            return arg(format!("widths must run 1 -> ... -> 1, got {widths:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..widths.len() - 1 {
            let bound = 1.0 / (widths[l] as f64).sqrt();
            for _ in 0..(widths[l] + 1) * widths[l + 1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let mut n = Self::new(widths, 0)?;
        n.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(n)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let n = Self::zeros(widths)?;
        if params.len() != n.params.len() {
            return arg(format!("expected {} parameters, got {}", n.params.len(), params.len()));
        }
        Ok(Self { params, ..n })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l`'s weight block; its biases follow the weights.
    fn offset(&self, l: usize) -> usize {
        (0..l).map(|i| (self.widths[i] + 1) * self.widths[i + 1]).sum()
    }

    /// Shift the output by a constant.
    pub fn add_output_bias(&mut self, c: f64) {
        let n = self.params.len();
        self.params[n - 1] += c;
    }

    /// Generic forward pass; the input can be a number, a [`Jet3`] or a series.
    pub fn forward<S: Smooth>(&self, x: &S) -> S {
        let mut act = vec![x.clone()];
        for l in 0..self.n_layers() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let mut next = Vec::with_capacity(nout);
            for j in 0..nout {
                let mut h = x.constant_like(b[j]);
                for i in 0..nin {
                    h.axpy(w[j * nin + i], &act[i]);
                }
                next.push(if l + 1 < self.n_layers() { h.softplus() } else { h });
            }
            act = next;
        }
        act.pop().unwrap()
    }

    pub fn value(&self, x: f64) -> f64 {
        let mut ws = Workspace::default();
        self.value_tangent(x, &mut ws).0
    }

    pub fn jet(&self, x: f64) -> Jet3 {
        self.forward(&Jet3::variable(x))
    }

    /// Output value and its input derivative, filling the workspace for a backward pass.
    pub fn value_tangent(&self, x: f64, ws: &mut Workspace) -> (f64, f64) {
        self.forward_ws(x, ws, true)
    }

    fn forward_ws(&self, x: f64, ws: &mut Workspace, tangent: bool) -> (f64, f64) {
        ws.tangent = tangent;
        let nl = self.n_layers();
        ws.a.resize(nl + 1, Vec::new());
        ws.t.resize(nl + 1, Vec::new());
        ws.s.resize(nl, Vec::new());
        ws.ht.resize(nl, Vec::new());
        ws.a[0].clear();
        ws.a[0].push(x);
        ws.t[0].clear();
        ws.t[0].push(1.0);
        for l in 0..nl {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let (lo_a, hi_a) = ws.a.split_at_mut(l + 1);
            let (lo_t, hi_t) = ws.t.split_at_mut(l + 1);
            let (ain, tin) = (&lo_a[l], &lo_t[l]);
            let (aout, tout) = (&mut hi_a[0], &mut hi_t[0]);
            aout.clear();
            tout.clear();
            ws.s[l].clear();
            ws.ht[l].clear();
            let last = l + 1 == nl;
            for j in 0..nout {
                let row = &w[j * nin..(j + 1) * nin];
                let mut h = b[j];
                let mut ht = 0.0;
                if tangent {
                    for i in 0..nin {
                        h += row[i] * ain[i];
                        ht += row[i] * tin[i];
                    }
                } else {
                    for i in 0..nin {
                        h += row[i] * ain[i];
                    }
                }
                if last {
                    aout.push(h);
                    tout.push(ht);
                } else {
                    let s = sigmoid(h);
                    aout.push(softplus(h));
                    tout.push(if tangent { s * ht } else { 0.0 });
                    ws.s[l].push(s);
                    ws.ht[l].push(ht);
                }
            }
        }
        (ws.a[nl][0], ws.t[nl][0])
    }

    /// Value-only forward pass that still records what `backward` needs.
    pub fn value_only(&self, x: f64, ws: &mut Workspace) -> f64 {
        self.forward_ws(x, ws, false).0
    }

    /// Accumulate parameter gradients of a loss with partials `dy` (w.r.t. output)
    /// and `dyt` (w.r.t. the output's input-derivative). Uses the last forward pass.
    pub fn backward(&self, dy: f64, dyt: f64, ws: &mut Workspace, grad: &mut [f64]) {
        if !ws.tangent {
            debug_assert!(dyt == 0.0, "tangent adjoint after a value-only pass");
            return self.backward_value(dy, ws, grad);
        }
        let nl = self.n_layers();
        ws.ab.clear();
        ws.ab.push(dy);
        ws.tb.clear();
        ws.tb.push(dyt);
        for l in (0..nl).rev() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            // turn output adjoints into pre-activation adjoints, in place
            if l + 1 < nl {
                for j in 0..nout {
                    let s = ws.s[l][j];
                    let hb = ws.ab[j] * s + ws.tb[j] * ws.ht[l][j] * s * (1.0 - s);
                    ws.tb[j] *= s;
                    ws.ab[j] = hb;
                }
            }
            let (ain, tin) = (&ws.a[l], &ws.t[l]);
            ws.ab_next.clear();
            ws.ab_next.resize(nin, 0.0);
            ws.tb_next.clear();
            ws.tb_next.resize(nin, 0.0);
            let w = &self.params[off..off + nin * nout];
            let (gw, gb) = grad[off..off + (nin + 1) * nout].split_at_mut(nin * nout);
            for j in 0..nout {
                let (hb, htb) = (ws.ab[j], ws.tb[j]);
                gb[j] += hb;
                let row = &w[j * nin..(j + 1) * nin];
                let grow = &mut gw[j * nin..(j + 1) * nin];
                for i in 0..nin {
                    grow[i] += hb * ain[i] + htb * tin[i];
                    ws.ab_next[i] += row[i] * hb;
                    ws.tb_next[i] += row[i] * htb;
                }
            }
            std::mem::swap(&mut ws.ab, &mut ws.ab_next);
            std::mem::swap(&mut ws.tb, &mut ws.tb_next);
        }
    }

    fn backward_value(&self, dy: f64, ws: &mut Workspace, grad: &mut [f64]) {
        let nl = self.n_layers();
        ws.ab.clear();
        ws.ab.push(dy);
        for l in (0..nl).rev() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            if l + 1 < nl {
                for j in 0..nout {
                    ws.ab[j] *= ws.s[l][j];
                }
            }
            let ain = &ws.a[l];
            ws.ab_next.clear();
            ws.ab_next.resize(nin, 0.0);
            let w = &self.params[off..off + nin * nout];
            let (gw, gb) = grad[off..off + (nin + 1) * nout].split_at_mut(nin * nout);
            for j in 0..nout {
                let hb = ws.ab[j];
                gb[j] += hb;
                let row = &w[j * nin..(j + 1) * nin];
                let grow = &mut gw[j * nin..(j + 1) * nin];
                for i in 0..nin {
                    grow[i] += hb * ain[i];
                    ws.ab_next[i] += row[i] * hb;
                }
            }
            std::mem::swap(&mut ws.ab, &mut ws.ab_next);
        }
    }

    /// Flat `layer,row,col,value` dump; the bias of row j sits in column `fan_in`.
    pub fn write_weights_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
        w.write_record(["layer", "row", "col", "value"]).map_err(io)?;
        for l in 0..self.n_layers() {
            let (nin, nout) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            for j in 0..nout {
                for i in 0..=nin {
                    let v = if i < nin { self.params[off + j * nin + i] } else { self.params[off + nin * nout + j] };
                    w.write_record(&[l.to_string(), j.to_string(), i.to_string(), format!("{v:?}")]).map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Numeric(e.to_string()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { first_moment: vec![0.0; n], second_moment: vec![0.0; n], step_count: 0, lr, beta1: 0.9, beta2: 0.999, eps_stab: 1e-8 }
    }
}

/// One Adam update in place.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training { epoch: state.step_count as usize });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        weights[i] -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps_stab);
    }
    Ok(())
}

/// Full-batch optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// Stop when the loss improved by less than `min_improve` over this many epochs.
    pub patience: usize,
    pub min_improve: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { widths: vec![1, 32, 32, 1], lr: 1e-3, epochs: 2000, patience: 50, min_improve: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
}

/// Per-point loss: given (output, output input-derivative) return (loss, ∂/∂out, ∂/∂out').
pub trait PointLoss {
    fn needs_tangent(&self) -> bool;
    fn eval(&self, i: usize, y: f64, yt: f64) -> (f64, f64, f64);
}

/// Mean of a per-point loss over `xs` and its parameter gradient.
pub fn batch_loss_grad(net: &StudentNet, xs: &[f64], loss: &impl PointLoss, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let tangent = loss.needs_tangent();
    for (i, &x) in xs.iter().enumerate() {
        let (y, yt) = net.forward_ws(x, ws, tangent);
        let (l, dy, dyt) = loss.eval(i, y, yt);
        total += l;
        net.backward(dy, dyt, ws, grad);
    }
    let n = xs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    total / n
}

/// Full-batch Adam training with the plateau stop.
pub fn train(net: &mut StudentNet, xs: &[f64], loss: &impl PointLoss, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; net.params.len()];
    let mut adam = AdamState::new(net.params.len(), cfg.lr);
    let mut history: Vec<f64> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let l = batch_loss_grad(net, xs, loss, &mut ws, &mut grad);
        if !l.is_finite() {
            return Err(Error::Training { epoch });
        }
        history.push(l);
        if cfg.patience > 0 && epoch >= cfg.patience && history[epoch - cfg.patience] - l < cfg.min_improve {
            break;
        }
        adam_step(&mut net.params, &grad, &mut adam).map_err(|_| Error::Training { epoch })?;
    }
    let mut final_ws = Workspace::default();
    let final_loss = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (y, yt) = net.value_tangent(x, &mut final_ws);
            loss.eval(i, y, yt).0
        })
        .sum::<f64>()
        / xs.len() as f64;
    Ok(TrainReport { epochs_run: history.len(), final_loss })
}
