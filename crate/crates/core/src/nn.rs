//! Minimal differentiable feed-forward approximators.
//!
//! Plain fully-connected nets with rectifier hidden activations and identity
//! outputs, reverse-mode gradients for the fixed loss graphs used in this
//! crate, and bias-corrected Adam updates. Everything is `f64` and owned by a
//! single run; nets are plain values that can be moved across threads.

use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One affine layer, weights row-major `[out_dim x in_dim]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Per-parameter first/second moment accumulators plus step counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
    step: u64,
}

/// Feed-forward approximator: rectifier on hidden layers, identity output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    adam: AdamState,
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug)]
pub struct GradBuf {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Cached activations from one forward pass, consumed by `backward`.
pub struct Forward {
    /// `acts[0]` is the input; `acts[k]` the post-activation of layer k.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("forward has at least the input")
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp {
    /// Build a net with the given hidden widths. Weights are drawn uniformly
    /// from `[-b, b]` with `b = sqrt(6/(fan_in+fan_out))`, biases start at
    /// zero, and the draw is deterministic for a given seed. An empty
    /// `hidden` slice yields a single affine layer.
    pub fn init(hidden: &[usize], in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        for (name, d) in [("in_dim", in_dim), ("out_dim", out_dim)]
            .into_iter()
            .chain(hidden.iter().map(|&h| ("hidden width", h)))
        {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let mut rng = rng::from_seed(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (i, o) = (d[0], d[1]);
                let bound = xavier_bound(i, o);
                let w = (0..i * o).map(|_| rng.random_range(-bound..bound)).collect();
                Layer { w, b: vec![0.0; o], in_dim: i, out_dim: o }
            })
            .collect::<Vec<_>>();
        let adam = AdamState {
            m: layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect(),
            v: layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect(),
            step: 0,
        };
        Ok(Self { layers, adam })
    }

    /// Build a net with every parameter at zero (used for free parameter
    /// vectors that should start at a known value).
    pub fn init_zeroed(hidden: &[usize], in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut net = Self::init(hidden, in_dim, out_dim, 0)?;
        for k in 0..net.layers.len() {
            let (w_len, b_len) = (net.layers[k].w.len(), net.layers[k].b.len());
            net.layers[k].w = vec![0.0; w_len];
            net.layers[k].b = vec![0.0; b_len];
        }
        Ok(net)
    }

    /// Reset the optimizer accumulators (fresh training phase).
    pub fn reset_optimizer(&mut self) {
        self.reset_adam();
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Widths of the hidden layers.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Pure forward application.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut fwd = self.forward(input)?;
        Ok(fwd.acts.pop().expect("forward keeps the output"))
    }

    /// Forward pass retaining activations for a later backward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Forward> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match in_dim {}",
                input.len(),
                self.in_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(input.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let x = &acts[k];
            let mut z = layer.b.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                *zo += acc;
            }
            let a = if k + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Forward { acts, pre })
    }

    /// Zeroed gradient buffer matching this net's parameter shapes.
    pub fn grad_buf(&self) -> GradBuf {
        GradBuf {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    /// Accumulate parameter gradients for one sample into `grads` given the
    /// loss gradient w.r.t. the output, returning the loss gradient w.r.t.
    /// the input.
    pub fn backward(&self, fwd: &Forward, d_out: &[f64], grads: &mut GradBuf) -> Vec<f64> {
        debug_assert_eq!(d_out.len(), self.out_dim());
        let n_layers = self.layers.len();
        let mut dz = d_out.to_vec();
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            if k + 1 != n_layers {
                for (o, d) in dz.iter_mut().enumerate() {
                    if fwd.pre[k][o] <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (gw, gb) = &mut grads.layers[k];
            let x = &fwd.acts[k];
            for (o, &d) in dz.iter().enumerate() {
                gb[o] += d;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, xi) in row.iter_mut().zip(x.iter()) {
                    *g += d * xi;
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (o, &d) in dz.iter().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (dxi, wi) in dx.iter_mut().zip(row.iter()) {
                    *dxi += d * wi;
                }
            }
            if k == 0 {
                return dx;
            }
            dz = dx;
        }
        unreachable!("nets have at least one layer")
    }

    /// Bias-corrected Adam update. Moments update even at `lr = 0`; the step
    /// counter always increments. Non-finite gradients abort the run.
    pub fn adam_step(&mut self, grads: &GradBuf, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match net".into()));
        }
        for ((gw, gb), layer) in grads.layers.iter().zip(&self.layers) {
            if gw.len() != layer.w.len() || gb.len() != layer.b.len() {
                return Err(Error::Shape("gradient buffer does not match net".into()));
            }
            if gw.iter().chain(gb.iter()).any(|g| !g.is_finite()) {
                return Err(Error::Numeric("non-finite gradient in adam_step".into()));
            }
        }
        self.adam.step += 1;
        let t = self.adam.step;
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[k];
            let (mw, mb) = &mut self.adam.m[k];
            let (vw, vb) = &mut self.adam.v[k];
            for i in 0..layer.w.len() {
                mw[i] = ADAM_BETA1 * mw[i] + (1.0 - ADAM_BETA1) * gw[i];
                vw[i] = ADAM_BETA2 * vw[i] + (1.0 - ADAM_BETA2) * gw[i] * gw[i];
                layer.w[i] -= lr * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + ADAM_EPS);
            }
            for i in 0..layer.b.len() {
                mb[i] = ADAM_BETA1 * mb[i] + (1.0 - ADAM_BETA1) * gb[i];
                vb[i] = ADAM_BETA2 * vb[i] + (1.0 - ADAM_BETA2) * gb[i] * gb[i];
                layer.b[i] -= lr * (mb[i] / bc1) / ((vb[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Append a fresh Xavier-initialized input column at the end of the first
    /// layer (a new scalar input feeding every first-hidden unit).
    pub fn grow_input(&mut self, seed: u64) {
        let mut rng = rng::from_seed(seed);
        let first = &mut self.layers[0];
        let (old_in, out) = (first.in_dim, first.out_dim);
        let new_in = old_in + 1;
        let bound = xavier_bound(new_in, out);
        let mut w = Vec::with_capacity(new_in * out);
        for o in 0..out {
            w.extend_from_slice(&first.w[o * old_in..(o + 1) * old_in]);
            w.push(rng.random_range(-bound..bound));
        }
        first.w = w;
        first.in_dim = new_in;
        self.reset_adam();
    }

    /// Append a fresh Xavier-initialized output row (one new output unit) to
    /// the final layer, bias zero.
    pub fn grow_output(&mut self, seed: u64) {
        let mut rng = rng::from_seed(seed);
        let last = self.layers.last_mut().expect("nonempty");
        let bound = xavier_bound(last.in_dim, last.out_dim + 1);
        for _ in 0..last.in_dim {
            last.w.push(rng.random_range(-bound..bound));
        }
        last.b.push(0.0);
        last.out_dim += 1;
        self.reset_adam();
    }

    fn reset_adam(&mut self) {
        self.adam = AdamState {
            m: self.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect(),
            v: self.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect(),
            step: 0,
        };
    }

    #[cfg(test)]
    pub(crate) fn set_layer(&mut self, k: usize, w: Vec<f64>, b: Vec<f64>) {
        assert_eq!(w.len(), self.layers[k].w.len());
        assert_eq!(b.len(), self.layers[k].b.len());
        self.layers[k].w = w;
        self.layers[k].b = b;
    }

    /// Flat view of all parameters; pairs with `nudge` for gradient checks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Add `delta` to the parameter at flat index `i`.
    pub fn nudge(&mut self, i: usize, delta: f64) {
        let mut off = 0;
        for l in &mut self.layers {
            if i < off + l.w.len() {
                l.w[i - off] += delta;
                return;
            }
            off += l.w.len();
            if i < off + l.b.len() {
                l.b[i - off] += delta;
                return;
            }
            off += l.b.len();
        }
        panic!("flat index {i} out of range");
    }
}

/// Fit a logistic model (single affine layer plus sigmoid) by full-batch
/// Adam on log-loss. Errors if the loss fails to decrease.
pub fn fit_logistic(
    inputs: &[Vec<f64>],
    targets: &[f64],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Mlp> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Contract("logistic fit needs matched nonempty data".into()));
    }
    let dim = inputs[0].len();
    let mut net = Mlp::init(&[], dim, 1, seed)?;
    let n = inputs.len() as f64;
    let mut first_loss = None;
    let mut last_loss = f64::INFINITY;
    for _ in 0..steps {
        let mut grads = net.grad_buf();
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(targets) {
            let fwd = net.forward(x)?;
            let logit = fwd.output()[0];
            let q = crate::scm::sigmoid(logit);
            loss -= y * q.max(1e-300).ln() + (1.0 - y) * (1.0 - q).max(1e-300).ln();
            net.backward(&fwd, &[(q - y) / n], &mut grads);
        }
        loss /= n;
        first_loss.get_or_insert(loss);
        last_loss = loss;
        net.adam_step(&grads, lr)?;
    }
    let first = first_loss.ok_or_else(|| Error::Config("logistic fit needs steps >= 1".into()))?;
    if !(last_loss.is_finite() && last_loss < first) {
        return Err(Error::Diagnostic(format!(
            "logistic fit loss went from {first} to {last_loss}"
        )));
    }
    Ok(net)
}

impl GradBuf {
    /// Flat view matching `Mlp::flat_params` order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (gw, gb) in &self.layers {
            out.extend_from_slice(gw);
            out.extend_from_slice(gb);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for (gw, gb) in &mut self.layers {
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= factor);
        }
    }

    pub fn add(&mut self, other: &GradBuf) {
        for ((gw, gb), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (g, o) in gw.iter_mut().zip(ow) {
                *g += o;
            }
            for (g, o) in gb.iter_mut().zip(ob) {
                *g += o;
            }
        }
    }
}
