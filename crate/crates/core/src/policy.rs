//! The actor network.
//!
//! Agents form a cyclic sequence along the contour. Each layer runs a
//! linear state-space recurrence over that sequence in both directions,
//! fuses the two hidden-state streams with windowed cross-attention, and
//! re-runs both recurrences with the fused state added as a gated bias.
//! A small perceptron head maps the final features to a Gaussian over a
//! tanh-squashed displacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{self, Axis, DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::environment::Action;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Pre-squash values are clipped here so `tanh` stays strictly below 1.
pub const PRE_TANH_LIMIT: f64 = 15.0;

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub window: usize,
    pub head_hidden: usize,
    pub init_log_std: f64,
}

impl PolicyConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 16,
            layers: 3,
            window: 8,
            head_hidden: 32,
            init_log_std: -1.0,
        }
    }
}

/// Graph handles for one recurrence direction.
#[derive(Debug, Clone, Copy)]
pub struct BranchIds {
    pub a: NodeId,
    pub b: NodeId,
    pub c_out: NodeId,
    pub d_skip: NodeId,
}

/// Graph handles for one bidirectional layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub fwd: BranchIds,
    pub bwd: BranchIds,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub gamma: NodeId,
}

const PER_LAYER: usize = 12;
const HEAD_PARAMS: usize = 4;

/// Linear recurrence over the agent sequence: `h_t = A h_{t-1} + B x_t (+ bias_t)`
/// and `y_t = C_out h_t + D_skip x_t`. Returns `(y, h)`.
pub fn ss2d_scan(
    g: &mut Graph,
    x: NodeId,
    p: &BranchIds,
    reverse: bool,
    bias: Option<NodeId>,
) -> Result<(NodeId, NodeId), DiffError> {
    let bt = g.transpose(p.b);
    let mut u = g.matmul(x, bt)?;
    if let Some(b) = bias {
        u = g.add(u, b)?;
    }
    let h = g.scan(u, p.a, reverse)?;
    let ct = g.transpose(p.c_out);
    let dt = g.transpose(p.d_skip);
    let hy = g.matmul(h, ct)?;
    let xy = g.matmul(x, dt)?;
    Ok((g.add(hy, xy)?, h))
}

fn attend(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> Result<NodeId, DiffError> {
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, scale);
    let p = g.softmax(s, Axis::Cols);
    g.matmul(p, v)
}

/// Cross-attention between the two hidden-state streams inside
/// non-overlapping windows of `window` agents. A short last window is
/// padded by repeating its final row; padded rows are dropped again.
pub fn bchfm_fuse(
    g: &mut Graph,
    h_fwd: NodeId,
    h_bwd: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    window: usize,
) -> Result<NodeId, DiffError> {
    let (n, d) = g.shape(h_fwd);
    if g.shape(h_bwd) != (n, d) {
        return Err(DiffError::ShapeMismatch {
            op: "bchfm_fuse",
            left: (n, d),
            right: g.shape(h_bwd),
        });
    }
    let window = window.clamp(1, n.max(1));
    let scale = 1.0 / (d as f64).sqrt();
    let qf = g.matmul(h_fwd, w_q)?;
    let kf = g.matmul(h_fwd, w_k)?;
    let vf = g.matmul(h_fwd, w_v)?;
    let qb = g.matmul(h_bwd, w_q)?;
    let kb = g.matmul(h_bwd, w_k)?;
    let vb = g.matmul(h_bwd, w_v)?;
    let mut parts = Vec::with_capacity(n.div_ceil(window));
    let mut start = 0;
    while start < n {
        let len = window.min(n - start);
        let take = |g: &mut Graph, t: NodeId| -> Result<NodeId, DiffError> {
            let s = g.slice(t, Axis::Rows, start, len)?;
            if len == window {
                return Ok(s);
            }
            let last = g.slice(t, Axis::Rows, n - 1, 1)?;
            let mut rows = vec![s];
            rows.extend(std::iter::repeat_n(last, window - len));
            g.concat(&rows, Axis::Rows)
        };
        let (wqf, wkf, wvf) = (take(g, qf)?, take(g, kf)?, take(g, vf)?);
        let (wqb, wkb, wvb) = (take(g, qb)?, take(g, kb)?, take(g, vb)?);
        let fb = attend(g, wqf, wkb, wvb, scale)?;
        let bf = attend(g, wqb, wkf, wvf, scale)?;
        let mut fused = g.add(fb, bf)?;
        if len < window {
            fused = g.slice(fused, Axis::Rows, 0, len)?;
        }
        parts.push(fused);
        start += len;
    }
    g.concat(&parts, Axis::Rows)
}

/// Two-pass bidirectional layer: independent scans, fusion, then both
/// scans again with `gamma * h_fused` injected; output is the mean of the
/// second-pass outputs.
pub fn layer_forward(g: &mut Graph, x: NodeId, p: &LayerIds, window: usize) -> Result<NodeId, DiffError> {
    let (_, hf) = ss2d_scan(g, x, &p.fwd, false, None)?;
    let (_, hb) = ss2d_scan(g, x, &p.bwd, true, None)?;
    let fused = bchfm_fuse(g, hf, hb, p.w_q, p.w_k, p.w_v, window)?;
    let bias = g.scale_by(fused, p.gamma)?;
    let (yf, _) = ss2d_scan(g, x, &p.fwd, false, Some(bias))?;
    let (yb, _) = ss2d_scan(g, x, &p.bwd, true, Some(bias))?;
    let sum = g.add(yf, yb)?;
    Ok(g.scale(sum, 0.5))
}

/// Parameters of the actor plus the layout needed to address them in a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Random transition matrix rescaled to Frobenius norm `target` (an upper
/// bound on the spectral norm).
pub(crate) fn stable_transition(rng: &mut ChaCha8Rng, d: usize, target: f64) -> Tensor {
    let mut a = uniform(rng, d, d, 1.0);
    let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        a.scale_in_place(target / norm);
    }
    a
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dh = config.hidden;
        for l in 0..config.layers {
            let din = if l == 0 { config.input_dim } else { dh };
            for dir in ["fwd", "bwd"] {
                params.push(format!("l{l}.{dir}.A"), stable_transition(&mut rng, dh, 0.5));
                params.push(format!("l{l}.{dir}.B"), uniform(&mut rng, dh, din, 1.0 / (din as f64).sqrt()));
                params.push(format!("l{l}.{dir}.C"), uniform(&mut rng, dh, dh, 1.0 / (dh as f64).sqrt()));
                params.push(format!("l{l}.{dir}.D"), uniform(&mut rng, dh, din, 1.0 / (din as f64).sqrt()));
            }
            for w in ["Wq", "Wk", "Wv"] {
                params.push(format!("l{l}.{w}"), uniform(&mut rng, dh, dh, 1.0 / (dh as f64).sqrt()));
            }
            params.push(format!("l{l}.gamma"), Tensor::scalar(0.1));
        }
        let hh = config.head_hidden;
        params.push("head.W1", uniform(&mut rng, dh, hh, 1.0 / (dh as f64).sqrt()));
        params.push("head.b1", Tensor::zeros(1, hh));
        params.push("head.W2", uniform(&mut rng, hh, 4, 1e-2));
        let mut b2 = Tensor::zeros(1, 4);
        b2.data_mut()[2] = config.init_log_std;
        b2.data_mut()[3] = config.init_log_std;
        params.push("head.b2", b2);
        Self { config, params }
    }

    pub fn layer_ids(&self, ids: &[NodeId], layer: usize) -> LayerIds {
        let o = layer * PER_LAYER;
        let branch = |k: usize| BranchIds {
            a: ids[o + k],
            b: ids[o + k + 1],
            c_out: ids[o + k + 2],
            d_skip: ids[o + k + 3],
        };
        LayerIds {
            fwd: branch(0),
            bwd: branch(4),
            w_q: ids[o + 8],
            w_k: ids[o + 9],
            w_v: ids[o + 10],
            gamma: ids[o + 11],
        }
    }

    /// Builds the network on `x` (`N x input_dim`) and returns
    /// `(mu, log_std)`, both `N x 2`, with `log_std` already clamped.
    pub fn forward_graph(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<(NodeId, NodeId), DiffError> {
        let mut h = x;
        for l in 0..self.config.layers {
            let p = self.layer_ids(ids, l);
            let y = layer_forward(g, h, &p, self.config.window)?;
            h = g.tanh(y);
        }
        let o = self.config.layers * PER_LAYER;
        let z = g.matmul(h, ids[o])?;
        let z = g.add_row(z, ids[o + 1])?;
        let z = g.tanh(z);
        let out = g.matmul(z, ids[o + 2])?;
        let out = g.add_row(out, ids[o + 3])?;
        let mu = g.slice(out, Axis::Cols, 0, 2)?;
        let raw = g.slice(out, Axis::Cols, 2, 2)?;
        Ok((mu, g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Gradient-free forward pass: `(mu, sigma)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor), DiffError> {
        let mut g = Graph::new();
        let ids = self.params.bind_frozen(&mut g);
        let xn = g.constant(x.clone());
        let (mu, log_std) = self.forward_graph(&mut g, &ids, xn)?;
        Ok((g.value(mu).clone(), g.value(log_std).map(f64::exp)))
    }

    pub fn param_count(&self) -> usize {
        PER_LAYER * self.config.layers + HEAD_PARAMS
    }
}

/// Opens every gate, enlarges the attention projections and randomizes the
/// head output layer. At initialization the gates are nearly closed and the
/// attention almost uniform, which leaves some gradients below the
/// resolution of finite differences; this gives every parameter a
/// measurable effect for gradient checking.
pub fn sharpen_for_check(pol: &mut Policy, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = pol.params.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        let t = pol.params.get_mut(i);
        if name.ends_with("gamma") {
            *t = Tensor::scalar(rng.random_range(0.8..1.2));
        } else if name.ends_with("Wq") || name.ends_with("Wk") || name.ends_with("Wv") {
            let (r, c) = (t.rows(), t.cols());
            *t = uniform(rng, r, c, 1.0);
        } else if name == "head.W2" {
            let (r, c) = (t.rows(), t.cols());
            *t = uniform(rng, r, c, 1.0);
        }
    }
}

/// Reparameterized squashed-Gaussian sample in the graph: with fixed noise
/// `eps` (`N x 2`), `u = mu + sigma * eps` and `a = delta * tanh(u)`.
/// Returns `(a, log_prob)` with `log_prob` of shape `N x 1`.
pub fn squashed_sample(
    g: &mut Graph,
    mu: NodeId,
    log_std: NodeId,
    eps: &Tensor,
    delta: f64,
) -> Result<(NodeId, NodeId), DiffError> {
    let e = g.constant(eps.clone());
    let sigma = g.exp(log_std);
    let noise = g.mul(sigma, e)?;
    let u = g.add(mu, noise)?;
    let u = g.clamp(u, -PRE_TANH_LIMIT, PRE_TANH_LIMIT);
    let t = g.tanh(u);
    let a = g.scale(t, delta);
    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let inner = g.add(u, sp)?;
    let log_jac = g.scale(inner, -2.0);
    let gauss_const = eps.map(|v| -0.5 * v * v - HALF_LN_2PI - delta.ln() - 2.0 * LN_2);
    let c = g.constant(gauss_const);
    let per_dim = g.sub(c, log_std)?;
    let per_dim = g.sub(per_dim, log_jac)?;
    let logp = g.sum(per_dim, Axis::Cols);
    Ok((a, logp))
}

/// Density of one squashed coordinate at pre-squash value `u`.
pub fn log_prob_pre_tanh(u: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    let z = (u - mu) / sigma;
    let log_jac = 2.0 * (LN_2 - u - diffcore::softplus(-2.0 * u));
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI - delta.ln() - log_jac
}

/// Density of one squashed coordinate at action value `a` in `(-delta, delta)`.
pub fn log_prob_action(a: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    log_prob_pre_tanh((a / delta).atanh(), mu, sigma, delta)
}

/// Draws one action per agent and its log-density.
pub fn sample_action<R: Rng>(mu: &Tensor, sigma: &Tensor, delta: f64, rng: &mut R) -> (Vec<Action>, Vec<f64>) {
    let n = mu.rows();
    let mut actions = Vec::with_capacity(n);
    let mut logp = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = [0.0; 2];
        let mut lp = 0.0;
        for k in 0..2 {
            let (m, s) = (mu.at(i, k), sigma.at(i, k));
            let e: f64 = StandardNormal.sample(rng);
            let u = (m + s * e).clamp(-PRE_TANH_LIMIT, PRE_TANH_LIMIT);
            a[k] = delta * u.tanh();
            lp += log_prob_pre_tanh(u, m, s, delta);
        }
        actions.push(a);
        logp.push(lp);
    }
    (actions, logp)
}

/// Mean-free evaluation action `delta * tanh(mu)`.
pub fn deterministic_action(mu: &Tensor, delta: f64) -> Vec<Action> {
    (0..mu.rows())
        .map(|i| [delta * mu.at(i, 0).tanh(), delta * mu.at(i, 1).tanh()])
        .collect()
}

/// Noise matrix for [`squashed_sample`].
pub fn standard_noise(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    Tensor::from_fn(rows, 2, |_, _| StandardNormal.sample(rng))
}
