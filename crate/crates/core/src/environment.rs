//! The cooperative contour MDP.
//!
//! Each vertex of the contour is an agent. An agent observes its own
//! position, a bilinear patch of the feature grid around it and a
//! sinusoidal embedding of where its cyclic neighbours sit relative to it.
//! Every step all agents move at once; region and boundary rewards are the
//! change in the contour's IoU and boundary F-score against the ground truth
//! and are shared by all agents, while the cooperation penalty is local.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::geometry::{
    self, octagon_from_bbox, rasterize, uniform_resample, BinaryMask, BoundingBox, Contour,
    GeometryError, Point,
};
use crate::metrics::{self, MetricError, MetricReport, ObjectMetrics};

/// A 2-D displacement in pixels.
pub type Action = [f64; 2];

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("feature grid {channels}x{height}x{width} needs {expected} values, got {got}")]
    GridShape {
        channels: usize,
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature grid contains a non-finite value at index {0}")]
    NonFiniteGrid(usize),
    #[error("embedding dimension {0} is not a positive multiple of 4")]
    EmbedDim(usize),
    #[error("neighbour count {0} must be even")]
    OddNeighbours(usize),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {index} is not finite: ({dx}, {dy})")]
    NonFiniteAction { index: usize, dx: f64, dy: f64 },
    #[error("episode already finished after {0} steps")]
    Finished(usize),
    #[error("grid is {grid:?} but mask is {mask:?}")]
    GridMaskMismatch {
        grid: (usize, usize),
        mask: (usize, usize),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("trace export: {0}")]
    Io(#[from] std::io::Error),
}

/// Channel-major `C x H x W` feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self, EnvError> {
        let expected = width * height * channels;
        if channels == 0 || width == 0 || height == 0 || values.len() != expected {
            return Err(EnvError::GridShape {
                channels,
                height,
                width,
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EnvError::NonFiniteGrid(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, channel: usize, col: usize, row: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    /// Bilinear interpolation between pixel centers; positions outside the
    /// grid read the nearest border value.
    pub fn sample(&self, channel: usize, x: f64, y: f64) -> f64 {
        let u = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let top = self.get(channel, c0, r0) * (1.0 - fu) + self.get(channel, c1, r0) * fu;
        let bottom = self.get(channel, c0, r1) * (1.0 - fu) + self.get(channel, c1, r1) * fu;
        top * (1.0 - fv) + bottom * fv
    }
}

/// What one agent observes.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub coords: Point,
    pub local_features: Vec<f64>,
    pub neighbor_embed: Vec<f64>,
}

impl AgentState {
    /// Flat network input: coordinates scaled to `[0, 1]`, then features,
    /// then the neighbour embedding.
    pub fn input_vector(&self, width: usize, height: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_len());
        v.push(self.coords.x / width as f64);
        v.push(self.coords.y / height as f64);
        v.extend_from_slice(&self.local_features);
        v.extend_from_slice(&self.neighbor_embed);
        v
    }

    pub fn input_len(&self) -> usize {
        2 + self.local_features.len() + self.neighbor_embed.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w0: 0.5,
            w1: 1.0,
            w2: 1.5,
            w3: 0.1,
        }
    }
}

/// Episode dynamics and observation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub delta: f64,
    pub horizon: usize,
    pub n_points: usize,
    pub k_neighbors: usize,
    pub embed_dim: usize,
    pub feature_radius: f64,
    pub weights: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            delta: 25.0,
            horizon: 5,
            n_points: 128,
            k_neighbors: 4,
            embed_dim: 16,
            feature_radius: 6.0,
            weights: RewardWeights::default(),
        }
    }
}

impl EnvConfig {
    /// Length of [`AgentState::input_vector`] for a grid with `channels`.
    pub fn state_dim(&self, channels: usize) -> usize {
        2 + LATTICE * LATTICE * channels + self.k_neighbors * self.embed_dim
    }
}

const LATTICE: usize = 5;

/// Interleaved `sin, cos` pairs over a geometric frequency ladder (base
/// 10000), `dim / 2` entries for `x` followed by `dim / 2` for `y`.
pub fn sinusoidal_embed(coords: Point, dim: usize) -> Result<Vec<f64>, EnvError> {
    if dim == 0 || dim % 4 != 0 {
        return Err(EnvError::EmbedDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    embed_into(coords, dim, &mut out);
    Ok(out)
}

fn embed_into(coords: Point, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for v in [coords.x, coords.y] {
        for k in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / half as f64);
            let (s, c) = (v * freq).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

/// All channels sampled on a 5x5 lattice spanning `[x - r, x + r] x [y - r, y + r]`,
/// channel-major, rows of the lattice top to bottom.
pub fn extract_local_features(grid: &FeatureGrid, x: f64, y: f64, r: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(LATTICE * LATTICE * grid.channels());
    let step = 2.0 * r / (LATTICE - 1) as f64;
    for ch in 0..grid.channels() {
        for i in 0..LATTICE {
            let sy = y - r + step * i as f64;
            for j in 0..LATTICE {
                let sx = x - r + step * j as f64;
                out.push(grid.sample(ch, sx, sy));
            }
        }
    }
    out
}

/// Cyclic neighbour offsets: `k/2` predecessors then `k/2` successors.
pub fn neighbor_indices(i: usize, n: usize, k: usize) -> impl Iterator<Item = usize> {
    let h = k / 2;
    (1..=h)
        .rev()
        .map(move |d| (i + n * h - d) % n)
        .chain((1..=h).map(move |d| (i + d) % n))
}

pub fn build_states(
    contour: &Contour,
    grid: &FeatureGrid,
    k_neighbors: usize,
    embed_dim: usize,
    radius: f64,
) -> Result<Vec<AgentState>, EnvError> {
    if k_neighbors % 2 != 0 {
        return Err(EnvError::OddNeighbours(k_neighbors));
    }
    if embed_dim == 0 || embed_dim % 4 != 0 {
        return Err(EnvError::EmbedDim(embed_dim));
    }
    let pts = contour.points();
    let n = pts.len();
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut neighbor_embed = Vec::with_capacity(k_neighbors * embed_dim);
            for j in neighbor_indices(i, n, k_neighbors) {
                let q = pts[j];
                embed_into(Point::new(q.x - p.x, q.y - p.y), embed_dim, &mut neighbor_embed);
            }
            AgentState {
                coords: p,
                local_features: extract_local_features(grid, p.x, p.y, radius),
                neighbor_embed,
            }
        })
        .collect())
}

/// Rescales `a` onto the disc of radius `delta` when it leaves it.
pub fn clamp_action(a: Action, delta: f64) -> Action {
    let norm = a[0].hypot(a[1]);
    if norm <= delta {
        a
    } else {
        let s = delta / norm;
        [a[0] * s, a[1] * s]
    }
}

pub fn reward_init(init_box: &BoundingBox, gt: &BinaryMask, w: RewardWeights) -> Result<f64, EnvError> {
    let region = rasterize(&init_box.to_contour(), gt.width(), gt.height())?;
    Ok(w.w0 * metrics::dice(&region, gt)?)
}

/// `-w3 * sum_j |p_i - p_j|^2` over the cyclic neighbour set of each agent.
pub fn coop_rewards(points: &[Point], k_neighbors: usize, w3: f64) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            -w3 * neighbor_indices(i, n, k_neighbors)
                .map(|j| points[i].dist_sq(points[j]))
                .sum::<f64>()
        })
        .collect()
}

/// Per-step reward streams; `total[i]` is what agent `i` receives.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRewards {
    pub init: f64,
    pub region: f64,
    pub boundary: f64,
    pub coop: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: StepRewards,
    pub metrics: ObjectMetrics,
    pub done: bool,
}

/// One contour evolving against one ground-truth object.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub contour: Contour,
    pub gt_mask: Arc<BinaryMask>,
    pub feature_grid: Arc<FeatureGrid>,
    pub init_box: BoundingBox,
    pub t: usize,
    pub prev_miou: f64,
    pub prev_mboundf: f64,
    pub config: EnvConfig,
    init_reward: f64,
}

impl EpisodeState {
    /// Starts from the octagon of `init_box`, resampled to `config.n_points`.
    pub fn new(
        gt_mask: Arc<BinaryMask>,
        feature_grid: Arc<FeatureGrid>,
        init_box: BoundingBox,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        let contour = uniform_resample(&octagon_from_bbox(&init_box), config.n_points)?;
        Self::with_contour(gt_mask, feature_grid, init_box, contour, config)
    }

    pub fn with_contour(
        gt_mask: Arc<BinaryMask>,
        feature_grid: Arc<FeatureGrid>,
        init_box: BoundingBox,
        contour: Contour,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        if (feature_grid.width(), feature_grid.height()) != gt_mask.dims() {
            return Err(EnvError::GridMaskMismatch {
                grid: (feature_grid.width(), feature_grid.height()),
                mask: gt_mask.dims(),
            });
        }
        if config.k_neighbors % 2 != 0 {
            return Err(EnvError::OddNeighbours(config.k_neighbors));
        }
        if config.embed_dim == 0 || config.embed_dim % 4 != 0 {
            return Err(EnvError::EmbedDim(config.embed_dim));
        }
        let m = contour_metrics(&contour, &gt_mask)?;
        let init_reward = reward_init(&init_box, &gt_mask, config.weights)?;
        Ok(Self {
            contour,
            gt_mask,
            feature_grid,
            init_box,
            t: 0,
            prev_miou: m.iou,
            prev_mboundf: m.boundf,
            config,
            init_reward,
        })
    }

    pub fn width(&self) -> usize {
        self.gt_mask.width()
    }

    pub fn height(&self) -> usize {
        self.gt_mask.height()
    }

    pub fn n_agents(&self) -> usize {
        self.contour.len()
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn states(&self) -> Result<Vec<AgentState>, EnvError> {
        build_states(
            &self.contour,
            &self.feature_grid,
            self.config.k_neighbors,
            self.config.embed_dim,
            self.config.feature_radius,
        )
    }

    pub fn metrics(&self) -> Result<ObjectMetrics, EnvError> {
        contour_metrics(&self.contour, &self.gt_mask)
    }

    /// Moves every agent by its clamped action and scores the new contour.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::Finished(self.t));
        }
        let moved = apply_actions(&self.contour, actions, self.config.delta, self.width(), self.height())?;
        let m = contour_metrics(&moved, &self.gt_mask)?;
        let w = self.config.weights;
        let init = if self.t == 0 { self.init_reward } else { 0.0 };
        let region = w.w1 * (m.iou - self.prev_miou);
        let boundary = w.w2 * (m.boundf - self.prev_mboundf);
        let coop = coop_rewards(moved.points(), self.config.k_neighbors, w.w3);
        let total = coop.iter().map(|c| init + region + boundary + c).collect();
        self.contour = moved;
        self.prev_miou = m.iou;
        self.prev_mboundf = m.boundf;
        self.t += 1;
        Ok(StepOutcome {
            rewards: StepRewards {
                init,
                region,
                boundary,
                coop,
                total,
            },
            metrics: m,
            done: self.is_done(),
        })
    }
}

/// Clamped moves with every point kept inside `[0, width] x [0, height]`.
pub fn apply_actions(
    contour: &Contour,
    actions: &[Action],
    delta: f64,
    width: usize,
    height: usize,
) -> Result<Contour, EnvError> {
    if actions.len() != contour.len() {
        return Err(EnvError::ActionCount {
            expected: contour.len(),
            got: actions.len(),
        });
    }
    if let Some((index, a)) = actions
        .iter()
        .enumerate()
        .find(|(_, a)| !(a[0].is_finite() && a[1].is_finite()))
    {
        return Err(EnvError::NonFiniteAction {
            index,
            dx: a[0],
            dy: a[1],
        });
    }
    let pts = contour
        .points()
        .iter()
        .zip(actions)
        .map(|(p, &a)| {
            let [dx, dy] = clamp_action(a, delta);
            Point::new(
                (p.x + dx).clamp(0.0, width as f64),
                (p.y + dy).clamp(0.0, height as f64),
            )
        })
        .collect();
    Ok(Contour::from_ordered(pts)?)
}

pub fn contour_metrics(contour: &Contour, gt: &BinaryMask) -> Result<ObjectMetrics, EnvError> {
    let pred = rasterize(contour, gt.width(), gt.height())?;
    Ok(metrics::object_metrics(&pred, gt)?)
}

/// One recorded step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub contour: Contour,
    pub metrics: ObjectMetrics,
    pub region: f64,
    pub boundary: f64,
    pub coop_mean: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub final_contour: Contour,
    pub report: MetricReport,
    pub initial_contour: Contour,
    pub trace: Vec<TraceStep>,
}

/// Steps `ep` to its horizon with actions from `policy`.
pub fn run_episode<P>(mut ep: EpisodeState, mut policy: P, record: bool) -> Result<EpisodeResult, EnvError>
where
    P: FnMut(&EpisodeState) -> Result<Vec<Action>, EnvError>,
{
    let initial_contour = ep.contour.clone();
    let mut trace = Vec::new();
    let mut last = ep.metrics()?;
    while !ep.is_done() {
        let actions = policy(&ep)?;
        let out = ep.step(&actions)?;
        last = out.metrics;
        if record {
            let n = out.rewards.coop.len() as f64;
            trace.push(TraceStep {
                step: ep.t,
                contour: ep.contour.clone(),
                metrics: out.metrics,
                region: out.rewards.region,
                boundary: out.rewards.boundary,
                coop_mean: out.rewards.coop.iter().sum::<f64>() / n,
            });
        }
    }
    Ok(EpisodeResult {
        final_contour: ep.contour,
        report: MetricReport::from_objects(vec![last])?,
        initial_contour,
        trace,
    })
}

pub fn zero_policy(ep: &EpisodeState) -> Result<Vec<Action>, EnvError> {
    Ok(vec![[0.0, 0.0]; ep.n_agents()])
}

/// Midpoints of the pixel edges separating object from background,
/// including edges on the grid border.
pub fn boundary_targets(mask: &BinaryMask) -> Vec<Point> {
    let (w, h) = mask.dims();
    let inside = |c: isize, r: isize| {
        c >= 0 && r >= 0 && (c as usize) < w && (r as usize) < h && mask.get(c as usize, r as usize)
    };
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if !inside(c, r) {
                continue;
            }
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if !inside(c - 1, r) {
                out.push(Point::new(x - 0.5, y));
            }
            if !inside(c + 1, r) {
                out.push(Point::new(x + 0.5, y));
            }
            if !inside(c, r - 1) {
                out.push(Point::new(x, y - 0.5));
            }
            if !inside(c, r + 1) {
                out.push(Point::new(x, y + 0.5));
            }
        }
    }
    out
}

/// Scripted reference policy: every agent heads for the nearest point of
/// the ground-truth outline, moving at most `delta`.
pub fn greedy_oracle_actions(ep: &EpisodeState, targets: &[Point]) -> Vec<Action> {
    ep.contour
        .points()
        .iter()
        .map(|&p| {
            let Some(&q) = targets
                .iter()
                .min_by(|a, b| p.dist_sq(**a).total_cmp(&p.dist_sq(**b)))
            else {
                return [0.0, 0.0];
            };
            let d = p.dist(q);
            if d == 0.0 {
                return [0.0, 0.0];
            }
            let s = d.min(ep.config.delta) / d;
            [(q.x - p.x) * s, (q.y - p.y) * s]
        })
        .collect()
}

/// SVG with the ground-truth outline, the initial contour and one polyline
/// per recorded step.
pub fn trace_svg(result: &EpisodeResult, gt: &BinaryMask, scale: f64) -> String {
    let (w, h) = gt.dims();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}">"#,
        w as f64 * scale,
        h as f64 * scale
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let edges = metrics::boundary_pixels(gt);
    for r in 0..h {
        for c in 0..w {
            if edges.get(c, r) {
                let _ = writeln!(s, r##"<rect x="{c}" y="{r}" width="1" height="1" fill="#bbbbbb"/>"##);
            }
        }
    }
    let _ = writeln!(
        s,
        r##"<polygon points="{}" fill="none" stroke="#3366cc" stroke-width="0.3" stroke-dasharray="1 1"/>"##,
        point_list(result.initial_contour.points())
    );
    let frames = result.trace.len().max(1) as f64;
    for (i, step) in result.trace.iter().enumerate() {
        let mut pts = step.contour.points().to_vec();
        pts.push(pts[0]);
        let shade = (200.0 * (1.0 - (i + 1) as f64 / frames)) as u8;
        let _ = writeln!(
            s,
            r##"<polyline data-step="{}" points="{}" fill="none" stroke="#{:02x}{:02x}{:02x}" stroke-width="0.3"/>"##,
            step.step,
            point_list(&pts),
            220,
            shade,
            shade
        );
    }
    s.push_str("</svg>\n");
    s
}

fn point_list(pts: &[Point]) -> String {
    let mut s = String::new();
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.3},{:.3}", p.x, p.y);
    }
    s
}

pub fn trace_csv(result: &EpisodeResult) -> String {
    let mut s = String::from("step,miou,mdice,mboundf,r_region,r_boundary,r_coop_mean\n");
    for t in &result.trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            t.step, t.metrics.iou, t.metrics.dice, t.metrics.boundf, t.region, t.boundary, t.coop_mean
        );
    }
    s
}

/// Consistency index of the current contour with default weights.
pub fn consistency(contour: &Contour) -> f64 {
    geometry::consistency_index(contour, Default::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn square_mask(w: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(w, w, |c, r| c >= x0 && c < x0 + side && r >= y0 && r < y0 + side).unwrap()
    }

    fn ramp_grid(w: usize, h: usize) -> FeatureGrid {
        let mut v = Vec::new();
        for _ in 0..h {
            for c in 0..w {
                v.push(c as f64 + 0.5);
            }
        }
        for r in 0..h {
            for _ in 0..w {
                v.push(2.0 * (r as f64 + 0.5) - 3.0);
            }
        }
        FeatureGrid::new(w, h, 2, v).unwrap()
    }

    fn episode(mask: BinaryMask, bbox: BoundingBox, config: EnvConfig) -> EpisodeState {
        let (w, h) = mask.dims();
        let grid = FeatureGrid::new(w, h, 1, vec![0.0; w * h]).unwrap();
        EpisodeState::new(Arc::new(mask), Arc::new(grid), bbox, config).unwrap()
    }

    #[test]
    fn embed_at_origin() {
        let e = sinusoidal_embed(Point::new(0.0, 0.0), 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert!(matches!(sinusoidal_embed(Point::new(0.0, 0.0), 6), Err(EnvError::EmbedDim(6))));
    }

    #[test]
    fn embed_matches_closed_form() {
        let e = sinusoidal_embed(Point::new(3.5, 7.25), 16).unwrap();
        let mut oracle = Vec::new();
        for v in [3.5f64, 7.25] {
            for k in 0..4 {
                let w = 1.0 / 10000f64.powf(k as f64 / 4.0);
                oracle.push((v * w).sin());
                oracle.push((v * w).cos());
            }
        }
        for (a, b) in e.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_grid_features() {
        let g = FeatureGrid::new(8, 6, 2, vec![0.7; 96]).unwrap();
        let f = extract_local_features(&g, 1.0, 5.5, 3.0);
        assert_eq!(f.len(), 50);
        assert!(f.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn ramp_is_reproduced() {
        let g = ramp_grid(20, 20);
        let f = extract_local_features(&g, 9.3, 8.1, 4.0);
        for i in 0..5 {
            for j in 0..5 {
                let x = 9.3 - 4.0 + 2.0 * j as f64;
                let y = 8.1 - 4.0 + 2.0 * i as f64;
                assert!((f[i * 5 + j] - x).abs() < 1e-12);
                assert!((f[25 + i * 5 + j] - (2.0 * y - 3.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_sample_clamps() {
        let g = FeatureGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.sample(0, -5.0, -5.0), 1.0);
        assert_eq!(g.sample(0, 0.0, 1.0), 2.0);
        // manual bilinear at (1.25, 0.75): u = 0.75, v = 0.25
        let oracle = (1.0 * 0.25 + 2.0 * 0.75) * 0.75 + (3.0 * 0.25 + 4.0 * 0.75) * 0.25;
        assert!((g.sample(0, 1.25, 0.75) - oracle).abs() < 1e-15);
        assert_eq!(g.sample(0, 10.0, 10.0), 4.0);
    }

    #[test]
    fn neighbour_sets() {
        let n: Vec<usize> = neighbor_indices(0, 3, 2).collect();
        assert_eq!(n, vec![2, 1]);
        let n: Vec<usize> = neighbor_indices(1, 128, 4).collect();
        assert_eq!(n, vec![127, 0, 2, 3]);
    }

    #[test]
    fn states_shapes_and_translation() {
        let g = FeatureGrid::new(64, 64, 4, vec![0.1; 4 * 64 * 64]).unwrap();
        let c = uniform_resample(&octagon_from_bbox(&BoundingBox::new(10.0, 10.0, 40.0, 30.0).unwrap()), 128).unwrap();
        let s = build_states(&c, &g, 4, 16, 6.0).unwrap();
        assert_eq!(s.len(), 128);
        assert_eq!(s[0].neighbor_embed.len(), 64);
        assert_eq!(s[0].input_len(), EnvConfig::default().state_dim(4));
        let moved = build_states(&c.translated(10.0, 10.0), &g, 4, 16, 6.0).unwrap();
        for (a, b) in s.iter().zip(&moved) {
            for (x, y) in a.neighbor_embed.iter().zip(&b.neighbor_embed) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(matches!(build_states(&c, &g, 3, 16, 6.0), Err(EnvError::OddNeighbours(3))));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_action([30.0, 40.0], 25.0), [15.0, 20.0]);
        assert_eq!(clamp_action([3.0, 4.0], 25.0), [3.0, 4.0]);
        assert_eq!(clamp_action([0.0, 0.0], 25.0), [0.0, 0.0]);
    }

    #[test]
    fn init_reward_examples() {
        let w = RewardWeights::default();
        let gt = square_mask(32, 8, 8, 10);
        let exact = BoundingBox::new(8.0, 8.0, 18.0, 18.0).unwrap();
        assert_eq!(reward_init(&exact, &gt, w).unwrap(), 0.5);
        let far = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(reward_init(&far, &gt, w).unwrap(), 0.0);
        let double = BoundingBox::new(8.0, 8.0, 28.0, 18.0).unwrap();
        let r = reward_init(&double, &gt, w).unwrap();
        assert!((r - 0.5 * 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_actions_give_no_metric_reward() {
        let gt = square_mask(32, 8, 8, 12);
        let mut ep = episode(gt, BoundingBox::new(6.0, 7.0, 22.0, 21.0).unwrap(), EnvConfig::default());
        let out = ep.step(&vec![[0.0, 0.0]; 128]).unwrap();
        assert_eq!(out.rewards.region, 0.0);
        assert_eq!(out.rewards.boundary, 0.0);
        assert!(out.rewards.init > 0.0);
        let out = ep.step(&vec![[0.0, 0.0]; 128]).unwrap();
        assert_eq!(out.rewards.init, 0.0);
        assert!(matches!(ep.step(&[[0.0, 0.0]]), Err(EnvError::ActionCount { .. })));
        let mut bad = vec![[0.0, 0.0]; 128];
        bad[4] = [f64::NAN, 0.0];
        assert!(matches!(ep.step(&bad), Err(EnvError::NonFiniteAction { index: 4, .. })));
    }

    #[test]
    fn coop_penalty() {
        let pts = [
            Point::new(1.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(4.0, 5.0),
        ];
        let r = coop_rewards(&pts, 2, 0.1);
        // agent 0's neighbours are 2 and 1
        assert!((r[0] + 0.1 * 25.0).abs() < 1e-12);
        let same = coop_rewards(&[Point::new(2.0, 2.0); 4], 2, 0.1);
        assert!(same.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scripted_square_telescopes() {
        let gt = square_mask(32, 8, 8, 12);
        let bbox = BoundingBox::new(4.0, 5.0, 24.0, 23.0).unwrap();
        let mut ep = episode(gt.clone(), bbox, EnvConfig::default());
        let m0 = ep.metrics().unwrap();
        let targets = boundary_targets(&gt);
        let (mut region, mut boundary) = (0.0, 0.0);
        while !ep.is_done() {
            let a = greedy_oracle_actions(&ep, &targets);
            let out = ep.step(&a).unwrap();
            region += out.rewards.region;
            boundary += out.rewards.boundary;
        }
        let mt = ep.metrics().unwrap();
        assert!((region - (mt.iou - m0.iou)).abs() < 1e-9);
        assert!((boundary - 1.5 * (mt.boundf - m0.boundf)).abs() < 1e-9);
        assert!(mt.dice > 0.95, "{mt:?}");
    }

    #[test]
    fn zero_policy_keeps_contour() {
        let gt = square_mask(32, 8, 8, 12);
        let ep = episode(gt, BoundingBox::new(6.0, 7.0, 22.0, 21.0).unwrap(), EnvConfig::default());
        let start = ep.contour.clone();
        let res = run_episode(ep, zero_policy, true).unwrap();
        assert_eq!(res.final_contour, start);
        assert_eq!(res.trace.len(), 5);
        let svg = trace_svg(&res, &square_mask(32, 8, 8, 12), 4.0);
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert_eq!(trace_csv(&res).lines().count(), 6);
    }

    #[test]
    fn greedy_oracle_is_monotone_on_convex_shape() {
        let gt = BinaryMask::from_fn(64, 64, |c, r| {
            let x = (c as f64 + 0.5 - 30.0) / 18.0;
            let y = (r as f64 + 0.5 - 34.0) / 11.0;
            x * x + y * y <= 1.0
        })
        .unwrap();
        let bbox = gt.bounding_box().unwrap();
        let targets = boundary_targets(&gt);
        let ep = episode(gt, bbox, EnvConfig::default());
        let res = run_episode(ep, |e| Ok(greedy_oracle_actions(e, &targets)), true).unwrap();
        for pair in res.trace.windows(2) {
            assert!(pair[1].metrics.dice >= pair[0].metrics.dice - 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn displacement_bounded(seed in 0u64..1000, scale in 0.0f64..200.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gt = square_mask(64, 20, 20, 20);
            let mut ep = episode(gt, BoundingBox::new(15.0, 15.0, 45.0, 45.0).unwrap(), EnvConfig::default());
            let before = ep.contour.clone();
            let actions: Vec<Action> = (0..128)
                .map(|_| [rng.random_range(-scale..=scale), rng.random_range(-scale..=scale)])
                .collect();
            ep.step(&actions).unwrap();
            for (a, b) in before.points().iter().zip(ep.contour.points()) {
                prop_assert!(a.dist(*b) <= 25.0 + 1e-12);
            }
        }

        #[test]
        fn rewards_translation_equivariant(dx in 0usize..10, dy in 0usize..10, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let actions: Vec<Action> = (0..128)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect();
            let run = |ox: usize, oy: usize| {
                let gt = BinaryMask::from_fn(64, 64, |c, r| {
                    c >= 20 + ox && c < 38 + ox && r >= 22 + oy && r < 35 + oy
                })
                .unwrap();
                let bbox = BoundingBox::new(17.0 + ox as f64, 20.0 + oy as f64, 40.0 + ox as f64, 36.0 + oy as f64).unwrap();
                let mut ep = episode(gt, bbox, EnvConfig::default());
                ep.step(&actions).unwrap().rewards
            };
            let a = run(0, 0);
            let b = run(dx, dy);
            prop_assert_eq!(a.region, b.region);
            prop_assert_eq!(a.boundary, b.boundary);
            prop_assert_eq!(a.init, b.init);
            for (x, y) in a.coop.iter().zip(&b.coop) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(*x <= 0.0);
            }
        }
    }
}
