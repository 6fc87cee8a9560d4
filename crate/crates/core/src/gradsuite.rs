//! Finite-difference verification of every differentiable block used in
//! training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::critic::{init_q, q_graph, CriticConfig};
use crate::diffcore::{grad_check_detail, Axis, DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::policy::{
    bchfm_fuse, layer_forward, sharpen_for_check, squashed_sample, ss2d_scan, stable_transition, standard_noise,
    uniform, BranchIds, LayerIds, Policy, PolicyConfig,
};
use crate::sac::{critic_loss_graph, policy_loss_graph, BatchGroup};

/// Block names in reporting order.
pub const BLOCKS: [&str; 9] = [
    "ops",
    "ss2d_scan",
    "bchfm",
    "gated_layer",
    "action_head",
    "log_prob",
    "critic",
    "critic_loss",
    "policy_loss",
];

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub eps: f64,
    pub trials: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            trials: 20,
            threshold: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl BlockReport {
    /// False for NaN errors as well as large ones.
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_error < threshold
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>>;

struct Instance {
    params: Vec<Tensor>,
    build: Builder,
}

fn instance(params: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError> + 'static) -> Instance {
    Instance {
        params,
        build: Box::new(build),
    }
}

/// Weighted sum of `x` against a fixed random tensor, so no gradient entry
/// vanishes by symmetry.
fn probe(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId, DiffError> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Pushes entries that sit within `margin` of a kink at `at` away from it.
fn avoid(t: &mut Tensor, at: &[f64], margin: f64) {
    for v in t.data_mut() {
        for &k in at {
            if (*v - k).abs() < margin {
                *v = k + if *v >= k { margin } else { -margin } * 2.0;
            }
        }
    }
}

fn margin(eps: f64) -> f64 {
    (100.0 * eps).max(1e-3)
}

fn op_instances(rng: &mut ChaCha8Rng, eps: f64) -> Vec<Instance> {
    let m = margin(eps);
    let mut out = Vec::new();
    let w = |rng: &mut ChaCha8Rng, r, c| rand_t(rng, r, c, -1.0, 1.0);

    let (a, b, p) = (w(rng, 3, 4), w(rng, 4, 2), w(rng, 3, 2));
    out.push(instance(vec![a, b], move |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y, &p)
    }));
    let (a, r, p) = (w(rng, 4, 3), w(rng, 1, 3), w(rng, 4, 3));
    out.push(instance(vec![a, r], move |g, x| {
        let y = g.add_row(x[0], x[1])?;
        let y = g.tanh(y);
        probe(g, y, &p)
    }));
    let (a, b, p) = (w(rng, 3, 2), w(rng, 3, 2), w(rng, 3, 2));
    out.push(instance(vec![a, b], move |g, x| {
        let s = g.sub(x[0], x[1])?;
        let t = g.add(s, x[1])?;
        let y = g.mul(t, s)?;
        let y = g.neg(y);
        probe(g, y, &p)
    }));
    let (a, s, p) = (w(rng, 2, 3), w(rng, 1, 1), w(rng, 2, 3));
    out.push(instance(vec![a, s], move |g, x| {
        let y = g.scale_by(x[0], x[1])?;
        let y = g.square(y);
        let y = g.scale(y, 0.7);
        probe(g, y, &p)
    }));
    let mut a = rand_t(rng, 3, 3, -2.0, 2.0);
    avoid(&mut a, &[0.0], m);
    let p = w(rng, 3, 3);
    out.push(instance(vec![a], move |g, x| {
        let y = g.relu(x[0]);
        probe(g, y, &p)
    }));
    let (a, p) = (rand_t(rng, 3, 3, -2.0, 2.0), w(rng, 3, 3));
    out.push(instance(vec![a], move |g, x| {
        let y = g.exp(x[0]);
        probe(g, y, &p)
    }));
    let (a, p) = (rand_t(rng, 3, 3, 0.5, 3.0), w(rng, 3, 3));
    out.push(instance(vec![a], move |g, x| {
        let y = g.log(x[0]);
        probe(g, y, &p)
    }));
    let (a, p) = (rand_t(rng, 3, 3, -3.0, 3.0), w(rng, 3, 3));
    out.push(instance(vec![a], move |g, x| {
        let y = g.softplus(x[0]);
        probe(g, y, &p)
    }));
    let (a, pc, pr) = (rand_t(rng, 3, 4, -2.0, 2.0), w(rng, 3, 4), w(rng, 3, 4));
    out.push(instance(vec![a], move |g, x| {
        let c = g.softmax(x[0], Axis::Cols);
        let r = g.softmax(x[0], Axis::Rows);
        let c = probe(g, c, &pc)?;
        let r = probe(g, r, &pr)?;
        g.add(c, r)
    }));
    let (a, b, c) = (w(rng, 2, 3), w(rng, 2, 2), w(rng, 1, 2));
    let (p1, p2) = (w(rng, 2, 5), w(rng, 3, 2));
    out.push(instance(vec![a, b, c], move |g, x| {
        let h = g.concat(&[x[0], x[1]], Axis::Cols)?;
        let h = g.square(h);
        let v = g.concat(&[x[1], x[2]], Axis::Rows)?;
        let v = g.tanh(v);
        let h = probe(g, h, &p1)?;
        let v = probe(g, v, &p2)?;
        g.add(h, v)
    }));
    let (a, p1, p2) = (w(rng, 5, 4), w(rng, 2, 4), w(rng, 5, 2));
    out.push(instance(vec![a], move |g, x| {
        let r = g.slice(x[0], Axis::Rows, 1, 2)?;
        let r = g.square(r);
        let c = g.slice(x[0], Axis::Cols, 2, 2)?;
        let r = probe(g, r, &p1)?;
        let c = probe(g, c, &p2)?;
        g.add(r, c)
    }));
    let (a, p1, p2, p3) = (w(rng, 3, 4), w(rng, 1, 4), w(rng, 3, 1), w(rng, 4, 3));
    out.push(instance(vec![a], move |g, x| {
        let s = g.sum(x[0], Axis::Rows);
        let s = g.square(s);
        let m = g.mean(x[0], Axis::Cols);
        let m = g.square(m);
        let t = g.transpose(x[0]);
        let t = g.square(t);
        let s = probe(g, s, &p1)?;
        let m = probe(g, m, &p2)?;
        let t = probe(g, t, &p3)?;
        let y = g.add(s, m)?;
        let y = g.add(y, t)?;
        let z = g.mean_all(x[0]);
        let z = g.square(z);
        g.add(y, z)
    }));
    let mut a = rand_t(rng, 3, 3, -2.0, 2.0);
    avoid(&mut a, &[-1.0, 1.0], m);
    let p = w(rng, 3, 3);
    out.push(instance(vec![a], move |g, x| {
        let y = g.clamp(x[0], -1.0, 1.0);
        let y = g.square(y);
        probe(g, y, &p)
    }));
    let (u, t, p, rev) = (w(rng, 6, 3), rand_t(rng, 3, 3, -0.4, 0.4), w(rng, 6, 3), rng.random_bool(0.5));
    out.push(instance(vec![u, t], move |g, x| {
        let h = g.scan(x[0], x[1], rev)?;
        let h = g.tanh(h);
        probe(g, h, &p)
    }));
    out
}

fn branch(rng: &mut ChaCha8Rng, dh: usize, din: usize) -> Vec<Tensor> {
    vec![
        stable_transition(rng, dh, 0.6),
        uniform(rng, dh, din, 0.7),
        uniform(rng, dh, dh, 0.7),
        uniform(rng, dh, din, 0.7),
    ]
}

fn branch_ids(p: &[NodeId]) -> BranchIds {
    BranchIds {
        a: p[0],
        b: p[1],
        c_out: p[2],
        d_skip: p[3],
    }
}

fn ss2d_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (n, din, dh) = (7, 3, 4);
    let params = branch(rng, dh, din);
    let x = uniform(rng, n, din, 1.0);
    let bias = rng.random_bool(0.5).then(|| uniform(rng, n, dh, 0.5));
    let reverse = rng.random_bool(0.5);
    let (py, ph) = (uniform(rng, n, dh, 1.0), uniform(rng, n, dh, 1.0));
    instance(params, move |g, p| {
        let xn = g.constant(x.clone());
        let b = bias.clone().map(|b| g.constant(b));
        let (y, h) = ss2d_scan(g, xn, &branch_ids(p), reverse, b)?;
        let y = probe(g, y, &py)?;
        let h = probe(g, h, &ph)?;
        g.add(y, h)
    })
}

fn bchfm_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (7, 4);
    let window = rng.random_range(2..=4);
    let params = vec![
        uniform(rng, n, d, 1.0),
        uniform(rng, n, d, 1.0),
        uniform(rng, d, d, 1.5),
        uniform(rng, d, d, 1.5),
        uniform(rng, d, d, 0.7),
    ];
    let pw = uniform(rng, n, d, 1.0);
    instance(params, move |g, p| {
        let f = bchfm_fuse(g, p[0], p[1], p[2], p[3], p[4], window)?;
        probe(g, f, &pw)
    })
}

fn layer_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (n, din, dh) = (7, 3, 4);
    let mut params = branch(rng, dh, din);
    params.extend(branch(rng, dh, din));
    params.push(uniform(rng, dh, dh, 1.5));
    params.push(uniform(rng, dh, dh, 1.5));
    params.push(uniform(rng, dh, dh, 0.7));
    params.push(Tensor::scalar(rng.random_range(0.8..1.2)));
    let x = uniform(rng, n, din, 1.0);
    let pw = uniform(rng, n, dh, 1.0);
    let window = rng.random_range(2..=4);
    instance(params, move |g, p| {
        let ids = LayerIds {
            fwd: branch_ids(&p[0..4]),
            bwd: branch_ids(&p[4..8]),
            w_q: p[8],
            w_k: p[9],
            w_v: p[10],
            gamma: p[11],
        };
        let xn = g.constant(x.clone());
        let y = layer_forward(g, xn, &ids, window)?;
        probe(g, y, &pw)
    })
}

fn small_policy(rng: &mut ChaCha8Rng, input_dim: usize, layers: usize) -> Policy {
    let cfg = PolicyConfig {
        input_dim,
        hidden: 6,
        layers,
        window: 3,
        head_hidden: 6,
        init_log_std: -0.5,
    };
    let mut pol = Policy::new(cfg, rng.random());
    sharpen_for_check(&mut pol, rng);
    pol
}

fn head_instance(rng: &mut ChaCha8Rng) -> Instance {
    let pol = small_policy(rng, 5, 2);
    let x = uniform(rng, 8, 5, 1.0);
    let (wm, ws) = (uniform(rng, 8, 2, 1.0), uniform(rng, 8, 2, 1.0));
    let params: Vec<Tensor> = pol.params.tensors().cloned().collect();
    instance(params, move |g, p| {
        let xn = g.constant(x.clone());
        let (mu, ls) = pol.forward_graph(g, p, xn)?;
        let a = probe(g, mu, &wm)?;
        let b = probe(g, ls, &ws)?;
        g.add(a, b)
    })
}

fn log_prob_instance(rng: &mut ChaCha8Rng) -> Instance {
    let mu = uniform(rng, 6, 2, 1.5);
    let ls = uniform(rng, 6, 2, 1.0);
    let eps = standard_noise(rng, 6);
    let wa = uniform(rng, 6, 2, 0.04);
    let delta = rng.random_range(5.0..30.0);
    instance(vec![mu, ls], move |g, p| {
        let (a, lp) = squashed_sample(g, p[0], p[1], &eps, delta)?;
        let a = probe(g, a, &wa)?;
        let l = g.mean_all(lp);
        g.add(a, l)
    })
}

fn random_critic(rng: &mut ChaCha8Rng, state_dim: usize) -> ParamSet {
    let mut p = init_q(CriticConfig { state_dim, hidden: 6 }, rng);
    for i in [1, 3, 5] {
        let t = p.get_mut(i);
        *t = uniform(rng, t.rows(), t.cols(), 0.5);
    }
    p
}

/// Amplifies the action columns and the output layer so the policy
/// gradient through the critic is not swamped by rounding.
fn action_sensitive(mut p: ParamSet, state_dim: usize) -> ParamSet {
    let w1 = p.get_mut(0);
    *w1 = Tensor::from_fn(w1.rows(), w1.cols(), |r, c| {
        w1.at(r, c) * if r >= state_dim { 4.0 } else { 1.0 }
    });
    let w3 = p.get_mut(4);
    *w3 = w3.map(|v| 3.0 * v);
    p
}

/// Smallest distance of any ReLU input to the kink, and the outputs.
fn critic_kinks(params: &ParamSet, input: &Tensor) -> (f64, Tensor) {
    let layer = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let z = x.matmul(w);
        Tensor::from_fn(z.rows(), z.cols(), |r, c| z.at(r, c) + b.at(0, c))
    };
    let z1 = layer(input, params.get(0), params.get(1));
    let h1 = z1.map(|v| v.max(0.0));
    let z2 = layer(&h1, params.get(2), params.get(3));
    let h2 = z2.map(|v| v.max(0.0));
    let q = layer(&h2, params.get(4), params.get(5));
    let closest = z1.data().iter().chain(z2.data()).fold(f64::INFINITY, |m, v| m.min(v.abs()));
    (closest, q)
}

fn critic_instance(rng: &mut ChaCha8Rng, eps: f64, with_loss: bool) -> Instance {
    loop {
        let p = random_critic(rng, 4);
        let x = uniform(rng, 5, 6, 1.0);
        if critic_kinks(&p, &x).0 < margin(eps) {
            continue;
        }
        let params: Vec<Tensor> = p.tensors().cloned().collect();
        if with_loss {
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            return instance(params, move |g, ids| critic_loss_graph(g, ids, &x, &y));
        }
        let w = uniform(rng, 5, 1, 1.0);
        return instance(params, move |g, ids| {
            let xn = g.constant(x.clone());
            let q = q_graph(g, ids, xn)?;
            probe(g, q, &w)
        });
    }
}

fn policy_loss_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Instance, DiffError> {
    let d = 5;
    loop {
        let pol = small_policy(rng, d, 1);
        let q1 = action_sensitive(random_critic(rng, d), d);
        let q2 = action_sensitive(random_critic(rng, d), d);
        let alpha = rng.random_range(0.05..0.3);
        let delta = 1.0;
        let batch: Vec<BatchGroup> = [vec![0, 2, 5], vec![1, 3, 4]]
            .into_iter()
            .map(|agents| {
                let states = uniform(rng, 6, d, 1.0);
                BatchGroup {
                    next_states: states.clone(),
                    states,
                    actions: Tensor::zeros(agents.len(), 2),
                    rewards: vec![0.0; agents.len()],
                    agents,
                    terminal: false,
                }
            })
            .collect();
        let noise: Vec<Tensor> = batch.iter().map(|b| standard_noise(rng, b.agents.len())).collect();

        // critic inputs at the base point, to keep ReLU and min kinks out
        // of finite-difference reach
        let mut ok = true;
        for (grp, e) in batch.iter().zip(&noise) {
            let (mu, sigma) = pol.forward(&grp.states)?;
            let mut g = Graph::new();
            let sel = |t: &Tensor| Tensor::from_fn(grp.agents.len(), t.cols(), |r, c| t.at(grp.agents[r], c));
            let m = g.constant(sel(&mu));
            let ls = g.constant(sel(&sigma).map(f64::ln));
            let (a, _) = squashed_sample(&mut g, m, ls, e, delta)?;
            let a = g.value(a).map(|v| v / delta);
            let s = sel(&grp.states);
            let input = Tensor::from_fn(s.rows(), d + 2, |r, c| if c < d { s.at(r, c) } else { a.at(r, c - d) });
            let (k1, v1) = critic_kinks(&q1, &input);
            let (k2, v2) = critic_kinks(&q2, &input);
            let gap = v1.zip_map(&v2, |x, y| (x - y).abs()).data().iter().fold(f64::INFINITY, |m, v| m.min(*v));
            ok &= k1.min(k2).min(gap) >= margin(eps);
        }
        if !ok {
            continue;
        }
        let params: Vec<Tensor> = pol.params.tensors().cloned().collect();
        return Ok(instance(params, move |g, actor| {
            let c1 = q1.bind_frozen(g);
            let c2 = q2.bind_frozen(g);
            policy_loss_graph(g, &pol, actor, &c1, &c2, &batch, alpha, delta, &noise)
        }));
    }
}

fn instances(block: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<Vec<Instance>, SuiteError> {
    Ok(match block {
        "ops" => op_instances(rng, eps),
        "ss2d_scan" => vec![ss2d_instance(rng)],
        "bchfm" => vec![bchfm_instance(rng)],
        "gated_layer" => vec![layer_instance(rng)],
        "action_head" => vec![head_instance(rng)],
        "log_prob" => vec![log_prob_instance(rng)],
        "critic" => vec![critic_instance(rng, eps, false)],
        "critic_loss" => vec![critic_instance(rng, eps, true)],
        "policy_loss" => vec![policy_loss_instance(rng, eps)?],
        other => return Err(SuiteError::UnknownBlock(other.to_string())),
    })
}

/// Checks `config.trials` random instances of one block (for `ops`, every
/// op per trial) and reports the worst relative error.
pub fn check_block(block: &str, config: &SuiteConfig) -> Result<BlockReport, SuiteError> {
    let name = BLOCKS
        .iter()
        .copied()
        .find(|b| *b == block)
        .ok_or_else(|| SuiteError::UnknownBlock(block.to_string()))?;
    let idx = BLOCKS.iter().position(|b| *b == name).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(idx);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..config.trials {
        for inst in instances(name, &mut rng, config.eps)? {
            let detail = grad_check_detail(&inst.params, config.eps, &inst.build)?;
            for w in detail {
                worst = if w.error.is_nan() { f64::NAN } else { worst.max(w.error) };
                if worst.is_nan() {
                    break;
                }
            }
            count += 1;
        }
    }
    Ok(BlockReport {
        block: name,
        instances: count,
        max_error: worst,
    })
}

pub fn run_suite(config: &SuiteConfig) -> Result<Vec<BlockReport>, SuiteError> {
    BLOCKS.iter().map(|b| check_block(b, config)).collect()
}
