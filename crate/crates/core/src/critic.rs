//! Twin per-agent Q-functions with slowly tracking target copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub hidden: usize,
}

impl CriticConfig {
    pub fn new(state_dim: usize) -> Self {
        Self { state_dim, hidden: 64 }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 2
    }
}

/// Three-layer ReLU perceptron over `[state, action / delta]`.
pub fn init_q(config: CriticConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let din = config.input_dim();
    let h = config.hidden;
    let mut u = |r: usize, c: usize, fan_in: usize| {
        let b = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(r, c, |_, _| rng.random_range(-b..=b))
    };
    let mut p = ParamSet::new();
    p.push("W1", u(din, h, din));
    p.push("b1", Tensor::zeros(1, h));
    p.push("W2", u(h, h, h));
    p.push("b2", Tensor::zeros(1, h));
    p.push("W3", u(h, 1, h));
    p.push("b3", Tensor::zeros(1, 1));
    p
}

/// `Q` for every row of `input` (`B x (state_dim + 2)`), as `B x 1`.
pub fn q_graph(g: &mut Graph, ids: &[NodeId], input: NodeId) -> Result<NodeId, DiffError> {
    let h = g.matmul(input, ids[0])?;
    let h = g.add_row(h, ids[1])?;
    let h = g.relu(h);
    let h = g.matmul(h, ids[2])?;
    let h = g.add_row(h, ids[3])?;
    let h = g.relu(h);
    let q = g.matmul(h, ids[4])?;
    g.add_row(q, ids[5])
}

/// Gradient-free evaluation of one critic.
pub fn critic_forward(params: &ParamSet, input: &Tensor) -> Result<Tensor, DiffError> {
    let mut g = Graph::new();
    let ids = params.bind_frozen(&mut g);
    let x = g.constant(input.clone());
    let q = q_graph(&mut g, &ids, x)?;
    Ok(g.value(q).clone())
}

/// Builds the critic input rows from flat states and raw actions.
pub fn critic_input(states: &Tensor, actions: &Tensor, delta: f64) -> Tensor {
    let (b, s) = (states.rows(), states.cols());
    Tensor::from_fn(b, s + 2, |r, c| {
        if c < s {
            states.at(r, c)
        } else {
            actions.at(r, c - s) / delta
        }
    })
}

/// `target <- tau * online + (1 - tau) * target`, elementwise. Written as
/// `target + tau * (online - target)` so equal entries stay bit-identical.
pub fn soft_update(online: &ParamSet, target: &mut ParamSet, tau: f64) {
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = if tau == 1.0 { ov } else { *tv + tau * (ov - *tv) };
        }
    }
}

/// Online critics and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Critics {
    pub config: CriticConfig,
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub target1: ParamSet,
    pub target2: ParamSet,
}

impl Critics {
    pub fn new(config: CriticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q1 = init_q(config, &mut rng);
        let q2 = init_q(config, &mut rng);
        Self {
            config,
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
        }
    }

    pub fn soft_update(&mut self, tau: f64) {
        soft_update(&self.q1, &mut self.target1, tau);
        soft_update(&self.q2, &mut self.target2, tau);
    }
}
