//! Soft actor-critic training for contour agents.
//!
//! The entropy coefficient is not tuned against a target entropy; it is
//! set every step from how irregular the current contour is
//! (`alpha = alpha0 / (1 + beta * C)`), so ragged contours explore less.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::critic::{critic_input, q_graph, CriticConfig, Critics};
use crate::diffcore::{
    cosine_lr, load_tensors, save_tensors, AdamW, Axis, DiffError, Graph, NodeId, ParamSet, Tensor,
};
use crate::environment::{
    build_states, clamp_action, run_episode, Action, AgentState, EnvConfig, EnvError, EpisodeResult, EpisodeState,
    FeatureGrid, RewardWeights, StepOutcome,
};
use crate::geometry::{consistency_index, perturb_bbox, BoundingBox, ConsistencyWeights, Contour, GeometryError};
use crate::metrics::{MetricError, MetricReport};
use crate::policy::{deterministic_action, sample_action, squashed_sample, standard_noise, Policy, PolicyConfig};
use crate::synthdata::{Sample, Split};

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("corpus has no {0} samples")]
    EmptyCorpus(&'static str),
    #[error("non-finite {what} at update {update} (epoch {epoch}, episode {episode})")]
    NonFinite {
        what: &'static str,
        update: u64,
        epoch: usize,
        episode: usize,
    },
    #[error("checkpoint does not match the configured networks: {0}")]
    CheckpointMismatch(DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SacError + '_ {
    move |source| SacError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `alpha0 / (1 + beta * c_index)`.
pub fn eram_alpha(alpha0: f64, beta: f64, c_index: f64) -> f64 {
    alpha0 / (1.0 + beta * c_index)
}

macro_rules! sac_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every training hyperparameter. Config files use these field
        /// names as keys.
        #[derive(Debug, Clone, PartialEq)]
        pub struct SacConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for SacConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl SacConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value
                            .parse::<$ty>()
                            .map_err(|e| format!("{key} = {value:?}: {e}"))?;
                    } )*
                    other => return Err(format!("unknown key {other:?}")),
                }
                Ok(())
            }

            /// `key = value` lines that [`SacConfig::parse`] reads back exactly.
            pub fn to_config_string(&self) -> String {
                let mut s = String::new();
                $( let _ = writeln!(s, "{} = {}", stringify!($name), self.$name); )*
                s
            }
        }
    };
}

sac_config! {
    seed: u64 = 0,
    gamma_discount: f64 = 0.99,
    tau: f64 = 0.005,
    /// Transitions per gradient update.
    batch_size: usize = 128,
    /// Contour steps the batch is drawn from; `batch_size / batch_groups`
    /// agents come from each.
    batch_groups: usize = 4,
    update_rounds: usize = 1,
    alpha0: f64 = 0.2,
    beta: f64 = 0.5,
    lambda1: f64 = 0.1,
    lambda2: f64 = 0.5,
    w0: f64 = 0.5,
    w1: f64 = 1.0,
    w2: f64 = 1.5,
    w3: f64 = 0.1,
    delta: f64 = 25.0,
    n_points: usize = 128,
    horizon: usize = 5,
    k_neighbors: usize = 4,
    embed_dim: usize = 16,
    feature_radius: f64 = 6.0,
    epochs: usize = 200,
    lr_init: f64 = 1e-4,
    lr_final: f64 = 1e-6,
    /// Critic learning rate relative to the actor's.
    critic_lr_scale: f64 = 1.0,
    weight_decay: f64 = 0.0,
    replay_capacity: usize = 1_000_000,
    hidden: usize = 16,
    layers: usize = 3,
    window: usize = 8,
    head_hidden: usize = 32,
    critic_hidden: usize = 64,
    init_log_std: f64 = -1.0,
}

impl SacConfig {
    /// Reads `key = value` lines; `#` starts a comment. Keys not in
    /// [`SacConfig::KEYS`] are rejected.
    pub fn parse(text: &str) -> Result<Self, SacError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SacError::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            c.set(k.trim(), v.trim())
                .map_err(|msg| SacError::Config { line: i + 1, msg })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::Invalid(m.to_string()));
        if !(self.gamma_discount > 0.0 && self.gamma_discount < 1.0) {
            return bad("gamma_discount must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.batch_groups == 0 || self.batch_groups > self.batch_size {
            return bad("batch_size and batch_groups must be positive with batch_groups <= batch_size");
        }
        if self.batch_size.div_ceil(self.batch_groups) > self.n_points {
            return bad("batch_size / batch_groups exceeds n_points");
        }
        if !(self.alpha0 > 0.0) || self.beta < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("alpha0 must be positive; beta, lambda1, lambda2 non-negative");
        }
        if [self.w0, self.w1, self.w2, self.w3].iter().any(|w| !(*w >= 0.0)) {
            return bad("reward weights must be non-negative");
        }
        if !(self.delta > 0.0) || self.n_points < 3 || self.horizon == 0 {
            return bad("delta must be positive, n_points >= 3, horizon >= 1");
        }
        if self.k_neighbors % 2 != 0 || self.k_neighbors >= self.n_points {
            return bad("k_neighbors must be even and below n_points");
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad("embed_dim must be a positive multiple of 4");
        }
        if !(self.feature_radius > 0.0) {
            return bad("feature_radius must be positive");
        }
        if !(self.lr_init >= 0.0 && self.lr_final >= 0.0 && self.critic_lr_scale >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative");
        }
        if self.replay_capacity < self.n_points {
            return bad("replay_capacity must hold at least one contour step");
        }
        if self.hidden == 0 || self.layers == 0 || self.window == 0 || self.head_hidden == 0 || self.critic_hidden == 0 {
            return bad("network sizes must be positive");
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            delta: self.delta,
            horizon: self.horizon,
            n_points: self.n_points,
            k_neighbors: self.k_neighbors,
            embed_dim: self.embed_dim,
            feature_radius: self.feature_radius,
            weights: RewardWeights {
                w0: self.w0,
                w1: self.w1,
                w2: self.w2,
                w3: self.w3,
            },
        }
    }

    pub fn consistency_weights(&self) -> ConsistencyWeights {
        ConsistencyWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn policy_config(&self, channels: usize) -> PolicyConfig {
        PolicyConfig {
            input_dim: self.env_config().state_dim(channels),
            hidden: self.hidden,
            layers: self.layers,
            window: self.window,
            head_hidden: self.head_hidden,
            init_log_std: self.init_log_std,
        }
    }

    pub fn critic_config(&self, channels: usize) -> CriticConfig {
        CriticConfig {
            state_dim: self.env_config().state_dim(channels),
            hidden: self.critic_hidden,
        }
    }
}

/// One contour step of every agent. Agent `i`'s transition is
/// `(s_i(before), actions[i], rewards[i], s_i(after), terminal)`; states
/// are rebuilt from the contours on demand.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub grid: Arc<FeatureGrid>,
    pub before: Contour,
    pub after: Contour,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl StepRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// FIFO store of contour steps, bounded by total transition count.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    records: VecDeque<StepRecord>,
    transitions: usize,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::new(),
            transitions: 0,
            capacity,
        }
    }

    pub fn push(&mut self, record: StepRecord) {
        self.transitions += record.len();
        self.records.push_back(record);
        while self.transitions > self.capacity {
            let old = self.records.pop_front().expect("over capacity implies non-empty");
            self.transitions -= old.len();
        }
    }

    /// Number of stored transitions (agents times steps).
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn records(&self) -> usize {
        self.records.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn record(&self, i: usize) -> &StepRecord {
        &self.records[i]
    }

    /// `groups` records drawn uniformly with replacement, each with
    /// `per_group` distinct agents drawn uniformly.
    pub fn sample<R: Rng>(&self, rng: &mut R, groups: usize, per_group: usize) -> Vec<(usize, Vec<usize>)> {
        (0..groups)
            .map(|_| {
                let r = rng.random_range(0..self.records.len());
                let n = self.records[r].len();
                let mut agents = rand::seq::index::sample(rng, n, per_group.min(n)).into_vec();
                agents.sort_unstable();
                (r, agents)
            })
            .collect()
    }
}

/// Flattened network inputs for every agent.
pub fn state_matrix(states: &[AgentState], width: usize, height: usize) -> Tensor {
    let d = states.first().map_or(0, AgentState::input_len);
    let mut data = Vec::with_capacity(states.len() * d);
    for s in states {
        data.extend(s.input_vector(width, height));
    }
    Tensor::matrix(states.len(), d, data).expect("consistent state length")
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    Tensor::from_fn(rows.len(), t.cols(), |r, c| t.at(rows[r], c))
}

/// `m x n` 0/1 matrix picking `rows` out of `n`.
fn selector(rows: &[usize], n: usize) -> Tensor {
    Tensor::from_fn(rows.len(), n, |r, c| if rows[r] == c { 1.0 } else { 0.0 })
}

/// Elementwise minimum of two `B x 1` nodes, differentiable through
/// whichever side is smaller.
fn min_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
    let pick = g.value(a).zip_map(g.value(b), |x, y| if x <= y { 1.0 } else { 0.0 });
    let rest = pick.map(|p| 1.0 - p);
    let pa = g.constant(pick);
    let pb = g.constant(rest);
    let x = g.mul(a, pa)?;
    let y = g.mul(b, pb)?;
    g.add(x, y)
}

/// Sampled transitions from one contour step, with states materialized.
#[derive(Debug, Clone)]
pub struct BatchGroup {
    /// Full-contour state matrices, before and after the step.
    pub states: Tensor,
    pub next_states: Tensor,
    pub agents: Vec<usize>,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

pub fn materialize(
    buffer: &ReplayBuffer,
    picks: &[(usize, Vec<usize>)],
    env: &EnvConfig,
) -> Result<Vec<BatchGroup>, EnvError> {
    picks
        .iter()
        .map(|(r, agents)| {
            let rec = buffer.record(*r);
            let (w, h) = (rec.grid.width(), rec.grid.height());
            let build = |c: &Contour| {
                build_states(c, &rec.grid, env.k_neighbors, env.embed_dim, env.feature_radius)
                    .map(|s| state_matrix(&s, w, h))
            };
            Ok(BatchGroup {
                states: build(&rec.before)?,
                next_states: build(&rec.after)?,
                agents: agents.clone(),
                actions: Tensor::from_fn(agents.len(), 2, |i, k| rec.actions[agents[i]][k]),
                rewards: agents.iter().map(|&a| rec.rewards[a]).collect(),
                terminal: rec.terminal,
            })
        })
        .collect()
}

/// Soft Bellman targets `r + gamma (min_j Qbar_j(s', a') - alpha log pi(a'|s'))`,
/// with `y = r` on terminal steps. Noise for `a'` comes from `rng`.
pub fn compute_target<R: Rng>(
    batch: &[BatchGroup],
    policy: &Policy,
    critics: &Critics,
    alpha: f64,
    gamma_discount: f64,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DiffError> {
    let mut y = Vec::new();
    for grp in batch {
        if grp.terminal {
            y.extend_from_slice(&grp.rewards);
            continue;
        }
        let (mu, sigma) = policy.forward(&grp.next_states)?;
        let (mu, sigma) = (select_rows(&mu, &grp.agents), select_rows(&sigma, &grp.agents));
        let (a_next, logp) = sample_action(&mu, &sigma, delta, rng);
        let a_next = Tensor::from_fn(a_next.len(), 2, |r, c| a_next[r][c]);
        let input = critic_input(&select_rows(&grp.next_states, &grp.agents), &a_next, delta);
        let q1 = crate::critic::critic_forward(&critics.target1, &input)?;
        let q2 = crate::critic::critic_forward(&critics.target2, &input)?;
        for i in 0..grp.agents.len() {
            let q = q1.at(i, 0).min(q2.at(i, 0));
            y.push(grp.rewards[i] + gamma_discount * (q - alpha * logp[i]));
        }
    }
    Ok(y)
}

fn batch_critic_input(batch: &[BatchGroup], delta: f64) -> Tensor {
    let parts: Vec<Tensor> = batch
        .iter()
        .map(|g| critic_input(&select_rows(&g.states, &g.agents), &g.actions, delta))
        .collect();
    let cols = parts[0].cols();
    let rows: usize = parts.iter().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::matrix(rows, cols, data).expect("uniform widths")
}

/// Mean squared error of the critic bound at `ids` against `targets`.
pub fn critic_loss_graph(g: &mut Graph, ids: &[NodeId], input: &Tensor, targets: &[f64]) -> Result<NodeId, DiffError> {
    let x = g.constant(input.clone());
    let q = q_graph(g, ids, x)?;
    let y = g.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let d = g.sub(q, y)?;
    let d2 = g.square(d);
    Ok(g.mean_all(d2))
}

/// [`critic_loss_graph`] value and gradients for one critic.
pub fn critic_loss(params: &ParamSet, input: &Tensor, targets: &[f64]) -> Result<(f64, Vec<Tensor>), DiffError> {
    let mut g = Graph::new();
    let ids = params.bind(&mut g);
    let loss = critic_loss_graph(&mut g, &ids, input, targets)?;
    let mut grads = g.backward(loss)?;
    Ok((g.value(loss).item(), ids.iter().map(|&i| grads.take(i)).collect()))
}

/// `mean(alpha log pi(a|s) - min_j Q_j(s, a))` over the batch with
/// reparameterized actions from the fixed noise `eps` (one `m x 2` block
/// per group). `actor`, `c1` and `c2` are the bound parameter handles.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss_graph(
    g: &mut Graph,
    policy: &Policy,
    actor: &[NodeId],
    c1: &[NodeId],
    c2: &[NodeId],
    batch: &[BatchGroup],
    alpha: f64,
    delta: f64,
    eps: &[Tensor],
) -> Result<NodeId, DiffError> {
    let mut terms = Vec::with_capacity(batch.len());
    for (grp, e) in batch.iter().zip(eps) {
        let x = g.constant(grp.states.clone());
        let (mu, log_std) = policy.forward_graph(g, actor, x)?;
        let sel = g.constant(selector(&grp.agents, grp.states.rows()));
        let mu = g.matmul(sel, mu)?;
        let log_std = g.matmul(sel, log_std)?;
        let (a, logp) = squashed_sample(g, mu, log_std, e, delta)?;
        let s = g.constant(select_rows(&grp.states, &grp.agents));
        let a_norm = g.scale(a, 1.0 / delta);
        let input = g.concat(&[s, a_norm], Axis::Cols)?;
        let q1 = q_graph(g, c1, input)?;
        let q2 = q_graph(g, c2, input)?;
        let q = min_node(g, q1, q2)?;
        let ent = g.scale(logp, alpha);
        terms.push(g.sub(ent, q)?);
    }
    let all = g.concat(&terms, Axis::Rows)?;
    Ok(g.mean_all(all))
}

/// [`policy_loss_graph`] value and actor gradients, with the online
/// critics held fixed.
pub fn policy_loss(
    batch: &[BatchGroup],
    policy: &Policy,
    critics: &Critics,
    alpha: f64,
    delta: f64,
    eps: &[Tensor],
) -> Result<(f64, Vec<Tensor>), DiffError> {
    let mut g = Graph::new();
    let actor = policy.params.bind(&mut g);
    let c1 = critics.q1.bind_frozen(&mut g);
    let c2 = critics.q2.bind_frozen(&mut g);
    let loss = policy_loss_graph(&mut g, policy, &actor, &c1, &c2, batch, alpha, delta, eps)?;
    let mut grads = g.backward(loss)?;
    Ok((g.value(loss).item(), actor.iter().map(|&i| grads.take(i)).collect()))
}

/// Optimizer state for all three trained networks.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: AdamW,
    pub critic1: AdamW,
    pub critic2: AdamW,
}

/// Networks, optimizers and bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: SacConfig,
    pub policy: Policy,
    pub critics: Critics,
    pub optim: Optimizers,
    pub updates: u64,
}

impl Agent {
    pub fn new(config: SacConfig, channels: usize) -> Self {
        let policy = Policy::new(config.policy_config(channels), config.seed.wrapping_mul(31).wrapping_add(1));
        let critics = Critics::new(config.critic_config(channels), config.seed.wrapping_mul(31).wrapping_add(2));
        let optim = Optimizers {
            actor: AdamW::new(&policy.params, config.weight_decay),
            critic1: AdamW::new(&critics.q1, config.weight_decay),
            critic2: AdamW::new(&critics.q2, config.weight_decay),
        };
        Self {
            config,
            policy,
            critics,
            optim,
            updates: 0,
        }
    }

    /// Network parameters under their checkpoint prefixes.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.policy.params.prefixed("actor.");
        out.extend(self.critics.q1.prefixed("critic1."));
        out.extend(self.critics.q2.prefixed("critic2."));
        out.extend(self.critics.target1.prefixed("target1."));
        out.extend(self.critics.target2.prefixed("target2."));
        out
    }

    pub fn load_checkpoint_tensors(&mut self, t: &[(String, Tensor)]) -> Result<(), SacError> {
        let r = (|| {
            self.policy.params.load_prefixed("actor.", t)?;
            self.critics.q1.load_prefixed("critic1.", t)?;
            self.critics.q2.load_prefixed("critic2.", t)?;
            self.critics.target1.load_prefixed("target1.", t)?;
            self.critics.target2.load_prefixed("target2.", t)
        })();
        r.map_err(|e| match e {
            e @ (DiffError::MissingParam(_) | DiffError::ParamShape { .. }) => SacError::CheckpointMismatch(e),
            e => e.into(),
        })
    }

    fn optimizer_tensors(&self, epoch: usize) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("state.epoch".to_string(), Tensor::scalar(epoch as f64)),
            ("state.updates".to_string(), Tensor::scalar(self.updates as f64)),
        ];
        for (name, opt, params) in [
            ("actor", &self.optim.actor, &self.policy.params),
            ("critic1", &self.optim.critic1, &self.critics.q1),
            ("critic2", &self.optim.critic2, &self.critics.q2),
        ] {
            let (step, m, v) = opt.state();
            out.push((format!("opt.{name}.step"), Tensor::scalar(step as f64)));
            for ((pn, _), (mt, vt)) in params.iter().zip(m.iter().zip(v)) {
                out.push((format!("opt.{name}.m.{pn}"), mt.clone()));
                out.push((format!("opt.{name}.v.{pn}"), vt.clone()));
            }
        }
        out
    }

    /// Restores optimizer moments; returns the last completed epoch.
    fn load_optimizer_tensors(&mut self, t: &[(String, Tensor)]) -> Result<usize, SacError> {
        let find = |k: &str| -> Result<&Tensor, SacError> {
            t.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v)
                .ok_or_else(|| SacError::CheckpointMismatch(DiffError::MissingParam(k.to_string())))
        };
        let epoch = find("state.epoch")?.item() as usize;
        self.updates = find("state.updates")?.item() as u64;
        for (name, which) in [("actor", 0), ("critic1", 1), ("critic2", 2)] {
            let params = match which {
                0 => &self.policy.params,
                1 => &self.critics.q1,
                _ => &self.critics.q2,
            };
            let step = find(&format!("opt.{name}.step"))?.item() as u64;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (pn, p) in params.iter() {
                let mt = find(&format!("opt.{name}.m.{pn}"))?;
                let vt = find(&format!("opt.{name}.v.{pn}"))?;
                if mt.shape() != p.shape() || vt.shape() != p.shape() {
                    return Err(SacError::CheckpointMismatch(DiffError::ParamShape {
                        name: format!("opt.{name}.{pn}"),
                        found: mt.shape().to_vec(),
                        expected: p.shape().to_vec(),
                    }));
                }
                m.push(mt.clone());
                v.push(vt.clone());
            }
            let opt = match which {
                0 => &mut self.optim.actor,
                1 => &mut self.optim.critic1,
                _ => &mut self.optim.critic2,
            };
            opt.restore(step, m, v);
        }
        Ok(epoch)
    }

    fn params_finite(&self) -> bool {
        self.policy.params.all_finite()
            && self.critics.q1.all_finite()
            && self.critics.q2.all_finite()
            && self.critics.target1.all_finite()
            && self.critics.target2.all_finite()
    }

    /// One critic step, one actor step and a target update on `batch`.
    pub fn update<R: Rng>(
        &mut self,
        batch: &[BatchGroup],
        alpha: f64,
        lr: f64,
        rng: &mut R,
    ) -> Result<UpdateStats, DiffError> {
        let c = &self.config;
        let y = compute_target(batch, &self.policy, &self.critics, alpha, c.gamma_discount, c.delta, rng)?;
        let input = batch_critic_input(batch, c.delta);
        let (l1, g1) = critic_loss(&self.critics.q1, &input, &y)?;
        let (l2, g2) = critic_loss(&self.critics.q2, &input, &y)?;
        let critic_lr = lr * c.critic_lr_scale;
        self.optim.critic1.step(&mut self.critics.q1, &g1, critic_lr);
        self.optim.critic2.step(&mut self.critics.q2, &g2, critic_lr);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let eps: Vec<Tensor> = batch
            .iter()
            .map(|g| standard_noise(&mut noise_rng, g.agents.len()))
            .collect();
        let (lp, gp) = policy_loss(batch, &self.policy, &self.critics, alpha, c.delta, &eps)?;
        self.optim.actor.step(&mut self.policy.params, &gp, lr);
        self.critics.soft_update(c.tau);
        self.updates += 1;
        Ok(UpdateStats {
            critic1: l1,
            critic2: l2,
            actor: lp,
        })
    }

    /// Deterministic actions for the current contour.
    pub fn act(&self, ep: &EpisodeState) -> Result<Vec<Action>, SacError> {
        let x = state_matrix(&ep.states()?, ep.width(), ep.height());
        let (mu, _) = self.policy.forward(&x)?;
        Ok(deterministic_action(&mu, ep.config.delta))
    }
}

/// Samples actions for every agent, steps `ep` and returns the stored
/// record, the step outcome and the entropy coefficient used.
pub fn collect_step<R: Rng>(
    agent: &Agent,
    ep: &mut EpisodeState,
    rng: &mut R,
) -> Result<(StepRecord, StepOutcome, f64), SacError> {
    let c = &agent.config;
    let alpha = eram_alpha(c.alpha0, c.beta, consistency_index(&ep.contour, c.consistency_weights()));
    let x = state_matrix(&ep.states()?, ep.width(), ep.height());
    let (mu, sigma) = agent.policy.forward(&x)?;
    let (raw, _) = sample_action(&mu, &sigma, c.delta, rng);
    let actions: Vec<Action> = raw.iter().map(|&a| clamp_action(a, c.delta)).collect();
    let before = ep.contour.clone();
    let out = ep.step(&actions)?;
    let record = StepRecord {
        grid: ep.feature_grid.clone(),
        before,
        after: ep.contour.clone(),
        actions,
        rewards: out.rewards.total.clone(),
        terminal: out.done,
    };
    Ok((record, out, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
}

pub const LOG_NAME: &str = "train_log.csv";
pub const EPISODE_LOG_NAME: &str = "episodes.csv";
pub const STATE_NAME: &str = "trainer_state.bin";
const LOG_HEADER: &str = "epoch,episodes,miou,mdice,mboundf,alpha,critic_loss,actor_loss,mean_return,lr";
const EPISODE_HEADER: &str = "episode,epoch,return,miou,mdice,mboundf";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_{epoch:04}.bin"))
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub episodes: usize,
    pub miou: f64,
    pub mdice: f64,
    pub mboundf: f64,
    pub alpha: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_return: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub epochs: Vec<EpochStats>,
    /// Mean per-agent return of every training episode, in order.
    pub episode_returns: Vec<f64>,
}

/// Keeps only lines whose leading epoch field is at most `epoch`.
fn truncate_log(path: &Path, epoch: usize, header: &str, field: usize) -> Result<String, SacError> {
    let mut out = String::from(header);
    out.push('\n');
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let keep = line
                .split(',')
                .nth(field)
                .and_then(|v| v.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch);
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn read_returns(text: &str) -> Vec<f64> {
    text.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2).and_then(|v| v.parse().ok()))
        .collect()
}

/// Runs the training loop, writing checkpoints and CSV logs into `out_dir`.
/// With `resume`, continues after the last completed epoch found there.
pub fn train(config: &SacConfig, corpus: &[Sample], out_dir: &Path, resume: bool) -> Result<TrainOutcome, SacError> {
    config.validate()?;
    let train_set: Vec<&Sample> = corpus.iter().filter(|s| s.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(SacError::EmptyCorpus("train"));
    }
    let channels = train_set[0].grid.channels();
    let env = config.env_config();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut agent = Agent::new(config.clone(), channels);
    let log_path = out_dir.join(LOG_NAME);
    let ep_path = out_dir.join(EPISODE_LOG_NAME);
    let state_path = out_dir.join(STATE_NAME);

    let mut start_epoch = 0;
    if resume && state_path.exists() {
        let done = agent.load_optimizer_tensors(&load_tensors(&state_path)?)?;
        agent.load_checkpoint_tensors(&load_tensors(checkpoint_path(out_dir, done))?)?;
        start_epoch = done + 1;
    }
    let mut log = if start_epoch > 0 {
        truncate_log(&log_path, start_epoch - 1, LOG_HEADER, 0)?
    } else {
        format!("{LOG_HEADER}\n")
    };
    let mut ep_log = if start_epoch > 0 {
        truncate_log(&ep_path, start_epoch - 1, EPISODE_HEADER, 1)?
    } else {
        format!("{EPISODE_HEADER}\n")
    };
    let mut episode_returns = read_returns(&ep_log);
    fs::write(&log_path, &log).map_err(io_err(&log_path))?;
    fs::write(&ep_path, &ep_log).map_err(io_err(&ep_path))?;
    if start_epoch == 0 {
        save_tensors(checkpoint_path(out_dir, 0), &agent.checkpoint_tensors())?;
        save_tensors(&state_path, &agent.optimizer_tensors(0))?;
    }

    let per_group = config.batch_size / config.batch_groups;
    let groups = config.batch_groups;
    let total = (config.epochs * train_set.len()).max(1) as f64;
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut history = Vec::new();
    for epoch in start_epoch.max(1)..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<&Sample> = train_set.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 7];
        let mut n_updates = 0usize;
        let mut n_steps = 0usize;
        let mut lr = config.lr_init;
        for (i, sample) in order.iter().enumerate() {
            let global = (epoch - 1) * train_set.len() + i;
            lr = cosine_lr(config.lr_init, config.lr_final, global as f64 / total);
            let mut ep = EpisodeState::new(
                Arc::new(sample.mask.clone()),
                Arc::new(sample.grid.clone()),
                sample.bbox,
                env,
            )?;
            let mut ret = vec![0.0; ep.n_agents()];
            let mut last = ep.metrics()?;
            while !ep.is_done() {
                let (record, out, alpha) = collect_step(&agent, &mut ep, &mut rng)?;
                for (r, v) in ret.iter_mut().zip(&out.rewards.total) {
                    *r += v;
                }
                last = out.metrics;
                buffer.push(record);
                sums[3] += alpha;
                n_steps += 1;
                if buffer.records() >= groups {
                    for _ in 0..config.update_rounds {
                        let picks = buffer.sample(&mut rng, groups, per_group);
                        let batch = materialize(&buffer, &picks, &env)?;
                        let stats = agent.update(&batch, alpha, lr, &mut rng)?;
                        let where_ = |what| SacError::NonFinite {
                            what,
                            update: agent.updates,
                            epoch,
                            episode: i,
                        };
                        if !(stats.critic1.is_finite() && stats.critic2.is_finite()) {
                            return Err(where_("critic loss"));
                        }
                        if !stats.actor.is_finite() {
                            return Err(where_("actor loss"));
                        }
                        if !agent.params_finite() {
                            return Err(where_("parameters"));
                        }
                        sums[4] += 0.5 * (stats.critic1 + stats.critic2);
                        sums[5] += stats.actor;
                        n_updates += 1;
                    }
                }
            }
            let mean_ret = ret.iter().sum::<f64>() / ret.len() as f64;
            sums[0] += last.iou;
            sums[1] += last.dice;
            sums[2] += last.boundf;
            sums[6] += mean_ret;
            episode_returns.push(mean_ret);
            let _ = writeln!(
                ep_log,
                "{},{},{},{},{},{}",
                episode_returns.len(),
                epoch,
                mean_ret,
                last.iou,
                last.dice,
                last.boundf
            );
        }
        let n = order.len() as f64;
        let stats = EpochStats {
            epoch,
            episodes: order.len(),
            miou: sums[0] / n,
            mdice: sums[1] / n,
            mboundf: sums[2] / n,
            alpha: sums[3] / n_steps.max(1) as f64,
            critic_loss: sums[4] / n_updates.max(1) as f64,
            actor_loss: sums[5] / n_updates.max(1) as f64,
            mean_return: sums[6] / n,
            lr,
        };
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{},{},{},{}",
            stats.epoch,
            stats.episodes,
            stats.miou,
            stats.mdice,
            stats.mboundf,
            stats.alpha,
            stats.critic_loss,
            stats.actor_loss,
            stats.mean_return,
            stats.lr
        );
        fs::write(&log_path, &log).map_err(io_err(&log_path))?;
        fs::write(&ep_path, &ep_log).map_err(io_err(&ep_path))?;
        save_tensors(checkpoint_path(out_dir, epoch), &agent.checkpoint_tensors())?;
        save_tensors(&state_path, &agent.optimizer_tensors(epoch))?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        agent,
        epochs: history,
        episode_returns,
    })
}

/// Builds an agent for `config` and loads network weights from `path`.
pub fn load_agent(config: &SacConfig, channels: usize, path: &Path) -> Result<Agent, SacError> {
    let mut agent = Agent::new(config.clone(), channels);
    agent.load_checkpoint_tensors(&load_tensors(path)?)?;
    Ok(agent)
}

/// Bounding-box jitter applied before the initial octagon is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub shift_frac: f64,
    pub scale_frac: f64,
    pub seed: u64,
}

/// Per-object evaluation output.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub baseline: MetricReport,
    pub ids: Vec<String>,
    /// Per-object step traces; empty unless requested.
    pub traces: Vec<EpisodeResult>,
}

/// Deterministic rollouts of `agent` on the eval split with horizon
/// `env.horizon` and `env.n_points` agents.
pub fn evaluate(
    agent: &Agent,
    corpus: &[Sample],
    env: EnvConfig,
    perturb: Option<Perturbation>,
) -> Result<EvalOutcome, SacError> {
    rollouts(corpus, env, perturb, |ep| agent.act(ep), false)
}

/// Like [`evaluate`], also keeping every intermediate contour.
pub fn evaluate_traced(
    agent: &Agent,
    corpus: &[Sample],
    env: EnvConfig,
    perturb: Option<Perturbation>,
) -> Result<EvalOutcome, SacError> {
    rollouts(corpus, env, perturb, |ep| agent.act(ep), true)
}

/// Like [`evaluate`] with an arbitrary action source.
pub fn evaluate_with<P>(
    corpus: &[Sample],
    env: EnvConfig,
    perturb: Option<Perturbation>,
    policy: P,
) -> Result<EvalOutcome, SacError>
where
    P: FnMut(&EpisodeState) -> Result<Vec<Action>, SacError>,
{
    rollouts(corpus, env, perturb, policy, false)
}

fn rollouts<P>(
    corpus: &[Sample],
    env: EnvConfig,
    perturb: Option<Perturbation>,
    mut policy: P,
    record: bool,
) -> Result<EvalOutcome, SacError>
where
    P: FnMut(&EpisodeState) -> Result<Vec<Action>, SacError>,
{
    let eval: Vec<&Sample> = corpus.iter().filter(|s| s.split == Split::Eval).collect();
    if eval.is_empty() {
        return Err(SacError::EmptyCorpus("eval"));
    }
    let mut finals = Vec::with_capacity(eval.len());
    let mut starts = Vec::with_capacity(eval.len());
    let mut traces = Vec::new();
    for (k, s) in eval.iter().enumerate() {
        let ep = eval_episode(s, env, perturb, k)?;
        starts.push(ep.metrics()?);
        let mut err = None;
        let res = run_episode(ep, |e| match policy(e) {
            Ok(a) => Ok(a),
            Err(SacError::Env(x)) => Err(x),
            Err(other) => {
                err = Some(other);
                Ok(vec![[0.0, 0.0]; e.n_agents()])
            }
        }, record)?;
        if let Some(e) = err {
            return Err(e);
        }
        finals.push(res.report.per_object[0]);
        if record {
            traces.push(res);
        }
    }
    Ok(EvalOutcome {
        report: MetricReport::from_objects(finals)?,
        baseline: MetricReport::from_objects(starts)?,
        ids: eval.iter().map(|s| s.id.clone()).collect(),
        traces,
    })
}

/// The starting episode for eval object `index`.
pub fn eval_episode(
    s: &Sample,
    env: EnvConfig,
    perturb: Option<Perturbation>,
    index: usize,
) -> Result<EpisodeState, SacError> {
    let bbox = match perturb {
        Some(p) => {
            let b = perturb_bbox(&s.bbox, p.shift_frac, p.scale_frac, p.seed.wrapping_add(index as u64))?;
            clip_box(&b, s.mask.width() as f64, s.mask.height() as f64)?
        }
        None => s.bbox,
    };
    Ok(EpisodeState::new(
        Arc::new(s.mask.clone()),
        Arc::new(s.grid.clone()),
        bbox,
        env,
    )?)
}

fn clip_box(b: &BoundingBox, w: f64, h: f64) -> Result<BoundingBox, GeometryError> {
    let x0 = b.x_min.clamp(0.0, w - 1.0);
    let y0 = b.y_min.clamp(0.0, h - 1.0);
    BoundingBox::new(x0, y0, b.x_max.clamp(x0 + 1.0, w), b.y_max.clamp(y0 + 1.0, h))
}

/// Mean of the first and last `frac` of `values`.
pub fn head_tail_means(values: &[f64], frac: f64) -> (f64, f64) {
    let k = ((values.len() as f64 * frac).round() as usize).clamp(1, values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&values[..k.min(values.len())]), mean(&values[values.len().saturating_sub(k)..]))
}
