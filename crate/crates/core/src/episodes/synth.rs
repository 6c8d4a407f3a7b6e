//! Junction-graph wayfinding simulator.
//!
//! An agent walks a route through a corridor graph with pure-pursuit steering.
//! At every junction its route-choice distribution over the incident edges is
//! fixed by signage and occlusion; the ground-truth uncertainty is the
//! normalized entropy of that distribution, blended in as the agent nears the
//! junction. Behaviours (hesitation, scanning, wrong turns and returns) are
//! scripted from the same distribution, and the visual features are a fixed
//! linear embedding of local scene descriptors.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BehaviorLabel, EnvLabel, Episode, FeatureGrid, LabelSet, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_rot6d, wrap_angle, BodyDelta, GazePoint, Pose2, RotMatrix};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub occluded: bool,
    #[serde(default)]
    pub signage: bool,
    #[serde(default)]
    pub crowd: bool,
    #[serde(default)]
    pub vertical: bool,
    #[serde(default)]
    pub transition: bool,
    /// Route-choice weights over the incident edges, ordered by ascending
    /// neighbour index. Overrides the signage/occlusion rule.
    #[serde(default)]
    pub choice_weights: Option<Vec<f64>>,
}

/// Hand-specified corridor graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<[usize; 2]>,
    /// Node sequence walked by the agent.
    pub route: Vec<usize>,
    /// Goal nodes in route order; defaults to the last route node.
    #[serde(default)]
    pub waypoints: Option<Vec<usize>>,
    /// Entropy normalizer; defaults to the maximum node degree.
    #[serde(default)]
    pub k_max: Option<usize>,
}

/// Random Manhattan-style route with side stubs at junctions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProceduralSpec {
    pub segments: usize,
    pub segment_len: [f64; 2],
    pub stub_len: [f64; 2],
    pub junction_prob: f64,
    pub four_way_prob: f64,
    pub corner_prob: f64,
    pub p_occluded: f64,
    pub p_signage: f64,
    pub p_crowd: f64,
    pub p_vertical: f64,
    pub p_transition: f64,
    /// Every n-th route node becomes a waypoint (plus the last).
    pub waypoint_every: usize,
    pub max_degree: usize,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        ProceduralSpec {
            segments: 8,
            segment_len: [6.0, 12.0],
            stub_len: [4.0, 8.0],
            junction_prob: 0.6,
            four_way_prob: 0.4,
            corner_prob: 0.3,
            p_occluded: 0.3,
            p_signage: 0.3,
            p_crowd: 0.15,
            p_vertical: 0.1,
            p_transition: 0.1,
            waypoint_every: 1,
            max_degree: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Explicit(GraphSpec),
    Procedural(ProceduralSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub layout: Layout,
    /// Nominal walking speed, m/s.
    pub speed: f64,
    /// Per-episode multiplicative speed jitter, uniform in `1 ± speed_jitter`.
    pub speed_jitter: f64,
    pub sway_amplitude: f64,
    pub sway_hz: f64,
    pub lookahead: f64,
    pub heading_gain: f64,
    pub max_turn_rate: f64,
    pub uncertainty_slowdown: f64,
    pub crowd_speed_factor: f64,
    pub approach_radius: f64,
    pub core_radius: f64,
    pub exit_radius: f64,
    pub label_radius: f64,
    pub theta_scan: f64,
    pub theta_hes: f64,
    pub hes_steps: usize,
    pub hes_distance: f64,
    /// Wrong-turn probability is `wrong_gain * U_j` at junctions above
    /// `theta_scan`.
    pub wrong_gain: f64,
    pub excursion_len: f64,
    pub signage_bonus: f64,
    pub clear_bonus: f64,
    pub occluded_bonus: f64,
    pub back_weight: f64,
    pub scan_amplitude: f64,
    pub scan_hz: f64,
    pub head_lookahead: f64,
    pub head_smoothing: f64,
    pub head_noise: f64,
    pub gaze_noise: f64,
    pub grid: usize,
    pub channels: usize,
    pub embedding_seed: u64,
    pub feature_noise: f64,
    pub appearance_std: f64,
    pub max_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            layout: Layout::Procedural(ProceduralSpec::default()),
            speed: 1.2,
            speed_jitter: 0.15,
            sway_amplitude: 0.03,
            sway_hz: 0.9,
            lookahead: 0.9,
            heading_gain: 0.45,
            max_turn_rate: 0.3,
            uncertainty_slowdown: 0.4,
            crowd_speed_factor: 0.8,
            approach_radius: 4.0,
            core_radius: 0.6,
            exit_radius: 2.0,
            label_radius: 3.0,
            theta_scan: 0.4,
            theta_hes: 0.6,
            hes_steps: 5,
            hes_distance: 1.5,
            wrong_gain: 0.6,
            excursion_len: 3.0,
            signage_bonus: 4.0,
            clear_bonus: 1.0,
            occluded_bonus: 0.0,
            back_weight: 0.3,
            scan_amplitude: 0.6,
            scan_hz: 0.6,
            head_lookahead: 2.5,
            head_smoothing: 0.3,
            head_noise: 0.01,
            gaze_noise: 0.03,
            grid: 4,
            channels: 32,
            embedding_seed: 17,
            feature_noise: 0.05,
            appearance_std: 0.1,
            max_steps: 5000,
        }
    }
}

/// Number of scene descriptors embedded into the feature grid.
const DESCRIPTORS: usize = 10;
const LB_ERROR: f64 = 1.2;
const PATH_SAMPLE: f64 = 0.1;
const PROJECTION_WINDOW: f64 = 2.5;

struct Graph {
    nodes: Vec<NodeSpec>,
    adj: Vec<Vec<usize>>,
    route: Vec<usize>,
    waypoints: Vec<usize>,
    k_max: usize,
}

impl Graph {
    fn pos(&self, i: usize) -> [f64; 2] {
        [self.nodes[i].x, self.nodes[i].y]
    }

    fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }
}

fn build_explicit(spec: &GraphSpec) -> Result<Graph> {
    let n = spec.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for &[a, b] in &spec.edges {
        if a >= n || b >= n || a == b {
            return Err(Error::BadConfig(format!("bad edge [{a}, {b}]")));
        }
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    adj.iter_mut().for_each(|v| v.sort_unstable());
    if spec.route.len() < 2 {
        return Err(Error::BadConfig("route needs at least two nodes".into()));
    }
    for w in spec.route.windows(2) {
        if w[0] >= n || w[1] >= n || !adj[w[0]].contains(&w[1]) {
            return Err(Error::BadConfig(format!("route step {} -> {} is not an edge", w[0], w[1])));
        }
    }
    for (i, node) in spec.nodes.iter().enumerate() {
        if let Some(w) = &node.choice_weights {
            if w.len() != adj[i].len() || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::BadConfig(format!(
                    "node {i}: choice_weights must be {} non-negative values with positive sum",
                    adj[i].len()
                )));
            }
        }
    }
    let waypoints = spec.waypoints.clone().unwrap_or_else(|| vec![*spec.route.last().unwrap()]);
    if let Some(w) = waypoints.iter().find(|w| !spec.route.contains(w)) {
        return Err(Error::BadConfig(format!("waypoint {w} is not on the route")));
    }
    let max_deg = adj.iter().map(Vec::len).max().unwrap_or(0);
    let k_max = spec.k_max.unwrap_or(max_deg);
    if k_max < max_deg {
        return Err(Error::BadConfig(format!("k_max {k_max} below maximum degree {max_deg}")));
    }
    Ok(Graph {
        nodes: spec.nodes.clone(),
        adj,
        route: spec.route.clone(),
        waypoints,
        k_max,
    })
}

fn build_procedural(spec: &ProceduralSpec, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let probs = [
        spec.junction_prob,
        spec.four_way_prob,
        spec.corner_prob,
        spec.p_occluded,
        spec.p_signage,
        spec.p_crowd,
        spec.p_vertical,
        spec.p_transition,
    ];
    if spec.segments == 0
        || spec.waypoint_every == 0
        || spec.max_degree < 4
        || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        || !(spec.segment_len[0] > 0.0 && spec.segment_len[0] <= spec.segment_len[1])
        || !(spec.stub_len[0] > 0.0 && spec.stub_len[0] <= spec.stub_len[1])
    {
        return Err(Error::BadConfig("invalid procedural layout parameters".into()));
    }
    let mut nodes = vec![NodeSpec::default()];
    let mut edges = Vec::new();
    let mut route = vec![0usize];
    let mut heading = 0.0f64;
    let mut pos = [0.0f64, 0.0];
    for seg in 0..spec.segments {
        let len = rng.gen_range(spec.segment_len[0]..=spec.segment_len[1]);
        pos = [pos[0] + len * heading.cos(), pos[1] + len * heading.sin()];
        let id = nodes.len();
        let last = seg + 1 == spec.segments;
        let mut node = NodeSpec {
            x: pos[0],
            y: pos[1],
            ..NodeSpec::default()
        };
        if !last {
            node.occluded = rng.gen_bool(spec.p_occluded);
            node.signage = !node.occluded && rng.gen_bool(spec.p_signage);
            node.crowd = rng.gen_bool(spec.p_crowd);
            node.vertical = rng.gen_bool(spec.p_vertical);
            node.transition = rng.gen_bool(spec.p_transition);
        }
        nodes.push(node);
        edges.push([*route.last().unwrap(), id]);
        route.push(id);
        if last {
            break;
        }
        let turns = [0.0, FRAC_PI_2, -FRAC_PI_2];
        let take = if rng.gen_bool(spec.junction_prob) {
            let exits: Vec<f64> = if rng.gen_bool(spec.four_way_prob) {
                turns.to_vec()
            } else {
                turns.choose_multiple(rng, 2).copied().collect()
            };
            let take = *exits.choose(rng).unwrap();
            for &e in exits.iter().filter(|&&e| e != take) {
                let sl = rng.gen_range(spec.stub_len[0]..=spec.stub_len[1]);
                let h = heading + e;
                nodes.push(NodeSpec {
                    x: pos[0] + sl * h.cos(),
                    y: pos[1] + sl * h.sin(),
                    ..NodeSpec::default()
                });
                edges.push([id, nodes.len() - 1]);
            }
            take
        } else if rng.gen_bool(spec.corner_prob) {
            *turns[1..].choose(rng).unwrap()
        } else {
            0.0
        };
        heading += take;
    }
    let mut waypoints: Vec<usize> = route
        .iter()
        .enumerate()
        .filter(|(r, _)| *r > 0 && r % spec.waypoint_every == 0)
        .map(|(_, &n)| n)
        .collect();
    if waypoints.last() != route.last() {
        waypoints.push(*route.last().unwrap());
    }
    build_explicit(&GraphSpec {
        nodes,
        edges,
        route,
        waypoints: Some(waypoints),
        k_max: Some(spec.max_degree),
    })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Route-choice distribution at a route junction.
struct Junction {
    node: usize,
    /// Choice probabilities over `adj[node]`.
    probs: Vec<f64>,
    /// Index of the correct continuation within `adj[node]`.
    correct: usize,
    u: f64,
    s_in: f64,
    s_out: f64,
}

impl Junction {
    /// Normalized entropy of the choice distribution blended toward certainty.
    fn uncertainty(&self, prox: f64, k_max: usize) -> f64 {
        if k_max < 2 {
            return 0.0;
        }
        let mixed: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| prox * p + if i == self.correct { 1.0 - prox } else { 0.0 })
            .collect();
        (entropy(&mixed) / (k_max as f64).ln()).clamp(0.0, 1.0)
    }
}

fn choice_probs(g: &Graph, cfg: &SynthConfig, node: usize, prev: Option<usize>, next: usize) -> Vec<f64> {
    let spec = &g.nodes[node];
    let weights: Vec<f64> = match &spec.choice_weights {
        Some(w) => w.clone(),
        None => {
            let bonus = if spec.signage {
                cfg.signage_bonus
            } else if spec.occluded {
                cfg.occluded_bonus
            } else {
                cfg.clear_bonus
            };
            g.adj[node]
                .iter()
                .map(|&nb| {
                    if nb == next {
                        1.0 + bonus
                    } else if Some(nb) == prev {
                        cfg.back_weight
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    };
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Normal,
    Wrong(usize),
    Back(usize),
}

/// Polyline the agent tracks; `tags[i]` applies to the segment starting at
/// vertex `i`.
struct Path {
    pts: Vec<[f64; 2]>,
    tags: Vec<Phase>,
    arc: Vec<f64>,
}

impl Path {
    fn new() -> Self {
        Path {
            pts: Vec::new(),
            tags: Vec::new(),
            arc: Vec::new(),
        }
    }

    fn push(&mut self, p: [f64; 2], tag: Phase) {
        let s = match self.pts.last() {
            Some(q) => self.arc.last().unwrap() + (p[0] - q[0]).hypot(p[1] - q[1]),
            None => 0.0,
        };
        self.pts.push(p);
        self.tags.push(tag);
        self.arc.push(s);
    }

    fn total(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.pts.len();
        let i = self.arc.partition_point(|&a| a <= s);
        i.saturating_sub(1).min(n - 2)
    }

    fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.total());
        let i = self.segment_at(s);
        let len = self.arc[i + 1] - self.arc[i];
        let t = if len > 0.0 { (s - self.arc[i]) / len } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    fn phase_at(&self, s: f64) -> Phase {
        self.tags[self.segment_at(s)]
    }

    /// Closest path point to `p` with arc length in `[s0, s0 + window]`;
    /// ties go to the smaller arc length.
    fn project(&self, p: [f64; 2], s0: f64, window: f64) -> f64 {
        let s1 = (s0 + window).min(self.total());
        let mut best = (f64::INFINITY, s0);
        for i in self.segment_at(s0)..self.pts.len() - 1 {
            if self.arc[i] > s1 {
                break;
            }
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let len = self.arc[i + 1] - self.arc[i];
            if len <= 0.0 {
                continue;
            }
            let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
            let s = (self.arc[i] + t * len).clamp(s0.max(self.arc[i]), s1.min(self.arc[i + 1]));
            let q = self.point_at(s);
            let d = (q[0] - p[0]).hypot(q[1] - p[1]);
            if d < best.0 {
                best = (d, s);
            }
        }
        best.1
    }

    /// First path point beyond `s` at least `dist` away from `p`.
    fn lookahead(&self, p: [f64; 2], s: f64, dist: f64) -> [f64; 2] {
        let mut a = s;
        let limit = (s + 4.0 * dist + 1.0).min(self.total());
        while a < limit {
            a = (a + PATH_SAMPLE).min(limit);
            let q = self.point_at(a);
            if (q[0] - p[0]).hypot(q[1] - p[1]) >= dist {
                return q;
            }
        }
        self.point_at(limit)
    }
}

/// Lays out the walked path, pre-drawing wrong turns.
fn plan(g: &Graph, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Path, Vec<Junction>, Vec<f64>) {
    let mut path = Path::new();
    let mut junctions = Vec::new();
    let mut node_arrival = vec![0.0; g.route.len()];
    path.push(g.pos(g.route[0]), Phase::Normal);
    for r in 1..g.route.len() {
        let node = g.route[r];
        path.push(g.pos(node), Phase::Normal);
        node_arrival[r] = path.total();
        if r + 1 == g.route.len() || g.degree(node) < 3 {
            continue;
        }
        let next = g.route[r + 1];
        let probs = choice_probs(g, cfg, node, Some(g.route[r - 1]), next);
        let correct = g.adj[node].iter().position(|&n| n == next).unwrap();
        let mut j = Junction {
            node,
            u: 0.0,
            probs,
            correct,
            s_in: path.total(),
            s_out: path.total(),
        };
        j.u = j.uncertainty(1.0, g.k_max);
        // Wrong branches exclude the correct and the arrival edge.
        let options: Vec<(usize, f64)> = g.adj[node]
            .iter()
            .enumerate()
            .filter(|(i, &nb)| *i != correct && nb != g.route[r - 1])
            .map(|(i, &nb)| (nb, j.probs[i]))
            .collect();
        if j.u > cfg.theta_scan && !options.is_empty() && rng.gen_bool((cfg.wrong_gain * j.u).clamp(0.0, 1.0)) {
            let total: f64 = options.iter().map(|o| o.1).sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut branch = options[0].0;
            for &(nb, w) in &options {
                branch = nb;
                if pick < w {
                    break;
                }
                pick -= w;
            }
            let (a, b) = (g.pos(node), g.pos(branch));
            let edge = (b[0] - a[0]).hypot(b[1] - a[1]);
            let len = cfg.excursion_len.min(0.7 * edge);
            let tip = [a[0] + (b[0] - a[0]) * len / edge, a[1] + (b[1] - a[1]) * len / edge];
            let idx = junctions.len();
            *path.tags.last_mut().unwrap() = Phase::Wrong(idx);
            path.push(tip, Phase::Back(idx));
            path.push(a, Phase::Normal);
            j.s_out = path.total();
        }
        junctions.push(j);
    }
    (path, junctions, node_arrival)
}

fn ramp(d: f64, radius: f64, core: f64) -> f64 {
    if d <= core {
        1.0
    } else {
        ((radius - d) / (radius - core)).clamp(0.0, 1.0)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fixed projection of scene descriptors into the feature grid.
struct Embedding {
    /// `C x DESCRIPTORS`, row-major.
    matrix: Vec<f64>,
    /// One gain per grid cell.
    spatial: Vec<f64>,
}

impl Embedding {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding_seed);
        let scale = 1.0 / (DESCRIPTORS as f64).sqrt();
        let matrix = (0..cfg.channels * DESCRIPTORS).map(|_| gaussian(&mut rng) * scale).collect();
        let spatial = (0..cfg.grid * cfg.grid).map(|_| 1.0 + 0.5 * gaussian(&mut rng)).collect();
        Embedding { matrix, spatial }
    }

    fn project(&self, z: &[f64; DESCRIPTORS], channels: usize) -> Vec<f64> {
        (0..channels)
            .map(|c| {
                self.matrix[c * DESCRIPTORS..(c + 1) * DESCRIPTORS]
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

fn check_config(cfg: &SynthConfig) -> Result<()> {
    let positive = [
        cfg.speed,
        cfg.lookahead,
        cfg.max_turn_rate,
        cfg.approach_radius,
        cfg.exit_radius,
        cfg.label_radius,
        cfg.excursion_len,
        cfg.head_lookahead,
    ];
    if positive.iter().any(|v| !(*v > 0.0))
        || !(0.0..cfg.approach_radius.min(cfg.exit_radius)).contains(&cfg.core_radius)
        || !(0.0..1.0).contains(&cfg.speed_jitter)
        || !(0.0..=1.0).contains(&cfg.uncertainty_slowdown)
        || !(0.0..=1.0).contains(&cfg.head_smoothing)
        || cfg.grid == 0
        || cfg.channels == 0
        || cfg.max_steps < 2
    {
        return Err(Error::BadConfig("invalid synthetic generator parameters".into()));
    }
    Ok(())
}

/// Junction context and environment flags at one pose.
struct Scene {
    phase: Phase,
    /// Most proximate junction: (index, proximity, distance, still ahead).
    active: Option<(usize, f64, f64, bool)>,
    u: f64,
    env: LabelSet,
    near_signage: bool,
}

fn scene(g: &Graph, cfg: &SynthConfig, path: &Path, junctions: &[Junction], p: [f64; 2], s: f64) -> Scene {
    let phase = path.phase_at(s);
    let mut active: Option<(usize, f64, f64, bool)> = None;
    for (i, j) in junctions.iter().enumerate() {
        let np = g.pos(j.node);
        let d = (np[0] - p[0]).hypot(np[1] - p[1]);
        let (prox, ahead) = if s < j.s_in {
            (ramp(d, cfg.approach_radius, cfg.core_radius), true)
        } else if s > j.s_out {
            (ramp(d, cfg.exit_radius, cfg.core_radius), false)
        } else {
            (1.0, false)
        };
        let prox = match phase {
            Phase::Wrong(k) | Phase::Back(k) if k == i => 1.0,
            Phase::Wrong(_) | Phase::Back(_) => 0.0,
            Phase::Normal => prox,
        };
        if prox > 0.0 && active.is_none_or(|a| prox > a.1) {
            active = Some((i, prox, d, ahead));
        }
    }
    let u = active.map_or(0.0, |(i, prox, _, _)| junctions[i].uncertainty(prox, g.k_max));

    let mut env = LabelSet::EMPTY;
    let mut near_signage = false;
    for (i, n) in g.nodes.iter().enumerate() {
        if (n.x - p[0]).hypot(n.y - p[1]) > cfg.label_radius {
            continue;
        }
        if g.degree(i) >= 3 {
            env.insert(EnvLabel::Jct);
        }
        if n.occluded {
            env.insert(EnvLabel::Occ);
        }
        if n.vertical {
            env.insert(EnvLabel::Mult);
        }
        if n.crowd {
            env.insert(EnvLabel::Crowd);
        }
        if n.transition {
            env.insert(EnvLabel::St);
        }
        near_signage |= n.signage;
    }
    Scene {
        phase,
        active,
        u,
        env,
        near_signage,
    }
}

/// Generates one episode; identical `(config, seed)` give identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Episode> {
    check_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = match &cfg.layout {
        Layout::Explicit(spec) => build_explicit(spec)?,
        Layout::Procedural(spec) => build_procedural(spec, &mut rng)?,
    };
    let (path, junctions, node_arrival) = plan(&g, cfg, &mut rng);
    let speed = cfg.speed * (1.0 + cfg.speed_jitter * rng.gen_range(-1.0..=1.0));
    let appearance: Vec<f64> = (0..cfg.channels).map(|_| cfg.appearance_std * gaussian(&mut rng)).collect();
    let embedding = Embedding::new(cfg);

    let start = path.pts[0];
    let first = path.pts[1];
    let mut pose = Pose2::new(start[0], start[1], (first[1] - start[1]).atan2(first[0] - start[0]));
    let origin = pose;
    let mut s = 0.0;
    let mut paused = vec![false; junctions.len()];
    let mut pause_left = 0usize;
    let (mut yaw, mut pitch) = (0.0f64, -0.1f64);
    let mut sway_phase = 0.0f64;

    let mut ep = Episode {
        id: format!("synth-{seed}"),
        origin,
        times: Vec::new(),
        motion: Vec::new(),
        head: Vec::new(),
        gaze: Vec::new(),
        goal_xy: Vec::new(),
        uncertainty: Vec::new(),
        env: Vec::new(),
        behavior: Vec::new(),
        features: Arc::new(FeatureGrid::zeros(0, cfg.grid, cfg.channels)),
    };
    let mut feats: Vec<f32> = Vec::new();
    let cell_count = cfg.grid * cfg.grid;

    for step in 0..cfg.max_steps {
        // Control from the current pose.
        let p = [pose.x, pose.y];
        s = path.project(p, s, PROJECTION_WINDOW);
        let before = scene(&g, cfg, &path, &junctions, p, s);
        if let Some((i, _, d, true)) = before.active {
            let j = &junctions[i];
            if j.u > cfg.theta_hes && d < cfg.hes_distance && !paused[i] {
                paused[i] = true;
                pause_left = cfg.hes_steps;
            }
        }
        let target = path.lookahead(p, s, cfg.lookahead);
        let err = wrap_angle((target[1] - p[1]).atan2(target[0] - p[0]) - pose.psi);
        let hesitating = pause_left > 0;
        let delta = if hesitating {
            pause_left -= 1;
            BodyDelta::new(0.0, 0.0, 0.0)
        } else {
            let crowd = if before.env.has(EnvLabel::Crowd) { cfg.crowd_speed_factor } else { 1.0 };
            let v = speed * (1.0 - cfg.uncertainty_slowdown * before.u) * crowd * err.cos().powi(2);
            let dx = v * STEP_SECONDS;
            if path.total() - s < dx {
                break;
            }
            let w = 2.0 * PI * cfg.sway_hz;
            let dy = cfg.sway_amplitude * ((sway_phase + w * STEP_SECONDS).sin() - sway_phase.sin());
            sway_phase += w * STEP_SECONDS;
            let dpsi = (cfg.heading_gain * err).clamp(-cfg.max_turn_rate, cfg.max_turn_rate);
            BodyDelta::new(dx, dy, dpsi)
        };
        pose = pose.step(&delta);

        // Everything recorded for this step describes the new pose.
        let t = step as f64 * STEP_SECONDS;
        let p = [pose.x, pose.y];
        s = path.project(p, s, PROJECTION_WINDOW);
        let now = scene(&g, cfg, &path, &junctions, p, s);
        let (u, env) = (now.u, now.env);
        let mut behavior = LabelSet::EMPTY;
        let mut scanning = false;
        if let Some((i, _, d, true)) = now.active {
            if junctions[i].u > cfg.theta_scan && d < cfg.approach_radius {
                scanning = true;
                behavior.insert(BehaviorLabel::Scan);
            }
        }
        match now.phase {
            Phase::Wrong(_) => behavior.insert(BehaviorLabel::Wrong),
            Phase::Back(_) => behavior.insert(BehaviorLabel::Back),
            Phase::Normal => {
                if now.near_signage {
                    behavior.insert(BehaviorLabel::Confirm);
                }
            }
        }
        if hesitating {
            behavior.insert(BehaviorLabel::Hes);
        }
        let turning = wrap_angle(err - delta.dpsi);
        if matches!(now.phase, Phase::Wrong(_) | Phase::Back(_)) && turning.abs() > LB_ERROR {
            behavior.insert(BehaviorLabel::Lb);
        }

        // Head: anticipate the path, scan at uncertain junctions, look back
        // while turning around.
        let ahead_pt = path.point_at(s + cfg.head_lookahead);
        let mut yaw_target = if (ahead_pt[0] - pose.x).hypot(ahead_pt[1] - pose.y) > 1e-6 {
            wrap_angle((ahead_pt[1] - pose.y).atan2(ahead_pt[0] - pose.x) - pose.psi).clamp(-0.8, 0.8)
        } else {
            0.0
        };
        if scanning {
            yaw_target += cfg.scan_amplitude * (2.0 * PI * cfg.scan_hz * t).sin();
        }
        if behavior.has(BehaviorLabel::Lb) {
            yaw_target = turning.clamp(-1.4, 1.4);
        }
        let pitch_target = if behavior.has(BehaviorLabel::Confirm) { 0.15 } else { -0.1 };
        yaw += cfg.head_smoothing * (yaw_target - yaw);
        pitch += cfg.head_smoothing * (pitch_target - pitch);
        let hy = yaw + cfg.head_noise * gaussian(&mut rng);
        let hp = pitch + cfg.head_noise * gaussian(&mut rng);
        let head = matrix_to_rot6d(&RotMatrix::rz(hy).mul(&RotMatrix::ry(hp)))?;
        let (gaze, _) = GazePoint::clamped(
            0.5 + 0.4 * (yaw_target - yaw) + cfg.gaze_noise * gaussian(&mut rng),
            0.5 - 0.5 * pitch + cfg.gaze_noise * gaussian(&mut rng),
        );

        let r_now = node_arrival.partition_point(|&a| a <= s).saturating_sub(1);
        let goal_node = g
            .waypoints
            .iter()
            .copied()
            .find(|w| g.route.iter().position(|n| n == w).unwrap() > r_now)
            .unwrap_or(*g.route.last().unwrap());
        let goal = g.pos(goal_node);

        let mut z = [0.0; DESCRIPTORS];
        if let Some((i, prox, _, _)) = now.active {
            let j = &junctions[i];
            let deg = g.degree(j.node);
            let n = &g.nodes[j.node];
            z[0] = prox;
            z[1] = prox * (deg == 3) as u8 as f64;
            z[2] = prox * (deg >= 4) as u8 as f64;
            z[3] = prox * n.occluded as u8 as f64;
            z[4] = prox * n.signage as u8 as f64;
        }
        z[5] = env.has(EnvLabel::Crowd) as u8 as f64;
        z[6] = env.has(EnvLabel::Mult) as u8 as f64;
        z[7] = env.has(EnvLabel::St) as u8 as f64;
        z[8] = ((goal[0] - pose.x).hypot(goal[1] - pose.y) < 6.0) as u8 as f64;
        z[9] = 1.0;
        let base = embedding.project(&z, cfg.channels);
        for cell in 0..cell_count {
            for c in 0..cfg.channels {
                let v = embedding.spatial[cell] * base[c] + appearance[c] + cfg.feature_noise * gaussian(&mut rng);
                feats.push(v as f32);
            }
        }

        ep.times.push(t);
        ep.motion.push(delta);
        ep.head.push(head);
        ep.gaze.push(gaze);
        ep.goal_xy.push(goal);
        ep.uncertainty.push(u);
        ep.env.push(env);
        ep.behavior.push(behavior);
    }

    let steps = ep.times.len();
    if steps < 2 {
        return Err(Error::BadConfig("route too short to produce an episode".into()));
    }
    ep.features = Arc::new(FeatureGrid::new(steps, cfg.grid, cfg.channels, feats)?);
    ep.validate()?;
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::integrate_deltas;

    fn corridor(length: f64) -> SynthConfig {
        SynthConfig {
            layout: Layout::Explicit(GraphSpec {
                nodes: vec![
                    NodeSpec::default(),
                    NodeSpec {
                        x: length / 2.0,
                        ..NodeSpec::default()
                    },
                    NodeSpec {
                        x: length,
                        ..NodeSpec::default()
                    },
                ],
                edges: vec![[0, 1], [1, 2]],
                route: vec![0, 1, 2],
                waypoints: None,
                k_max: None,
            }),
            sway_amplitude: 0.0,
            speed_jitter: 0.0,
            ..SynthConfig::default()
        }
    }

    fn four_way(weights: Vec<f64>) -> SynthConfig {
        let node = |x: f64, y: f64| NodeSpec { x, y, ..NodeSpec::default() };
        SynthConfig {
            layout: Layout::Explicit(GraphSpec {
                nodes: vec![
                    node(-10.0, 0.0),
                    NodeSpec {
                        choice_weights: Some(weights),
                        ..node(0.0, 0.0)
                    },
                    node(10.0, 0.0),
                    node(0.0, 10.0),
                    node(0.0, -10.0),
                ],
                edges: vec![[0, 1], [1, 2], [1, 3], [1, 4]],
                route: vec![0, 1, 2],
                waypoints: None,
                k_max: Some(4),
            }),
            wrong_gain: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn straight_corridor_has_zero_uncertainty_and_constant_deltas() {
        let ep = synth_generate(&corridor(30.0), 1).unwrap();
        assert!(ep.len() > 200);
        assert!(ep.uncertainty.iter().all(|u| *u == 0.0));
        let d0 = ep.motion[0];
        assert!(d0.dx > 0.0);
        assert!(ep.motion.iter().all(|d| *d == d0));
        assert!(ep.behavior.iter().all(|b| b.is_empty()));
    }

    #[test]
    fn uniform_four_way_reaches_one() {
        let ep = synth_generate(&four_way(vec![1.0; 4]), 3).unwrap();
        let peak = ep.uncertainty.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-12, "{peak}");
        // The agent passes within the core radius of the junction.
        let poses = integrate_deltas(ep.origin, &ep.motion);
        let at_core: Vec<usize> = (0..ep.len())
            .filter(|&i| poses[i].x.hypot(poses[i].y) <= 0.6)
            .collect();
        assert!(!at_core.is_empty());
        for i in at_core {
            assert!((ep.uncertainty[i] - 1.0).abs() < 1e-12);
        }
        assert!(ep.behavior.iter().any(|b| b.has(BehaviorLabel::Hes)));
        assert!(ep.behavior.iter().any(|b| b.has(BehaviorLabel::Scan)));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg, 42).unwrap();
        let b = synth_generate(&cfg, 42).unwrap();
        assert_eq!(a.motion, b.motion);
        assert_eq!(a.head, b.head);
        assert_eq!(a.uncertainty, b.uncertainty);
        assert_eq!(a.behavior, b.behavior);
        assert_eq!(*a.features, *b.features);
        let c = synth_generate(&cfg, 43).unwrap();
        assert_ne!(a.motion, c.motion);
    }

    #[test]
    fn procedural_episodes_are_valid_and_show_every_behavior() {
        let cfg = SynthConfig::default();
        let mut seen = LabelSet::EMPTY;
        let mut seen_env = LabelSet::EMPTY;
        for seed in 0..30 {
            let ep = synth_generate(&cfg, seed).unwrap();
            ep.validate().unwrap();
            for b in &ep.behavior {
                seen = seen.union(*b);
            }
            for e in &ep.env {
                seen_env = seen_env.union(*e);
            }
            // Wrong/back steps sit above the neutral mean.
            let neutral: Vec<f64> = (0..ep.len())
                .filter(|&i| ep.behavior[i].is_empty())
                .map(|i| ep.uncertainty[i])
                .collect();
            let mean = neutral.iter().sum::<f64>() / neutral.len() as f64;
            for i in 0..ep.len() {
                let b = ep.behavior[i];
                if b.has(BehaviorLabel::Wrong) || b.has(BehaviorLabel::Back) {
                    assert!(ep.uncertainty[i] > mean, "seed {seed} step {i}");
                }
            }
        }
        for l in BehaviorLabel::ALL {
            assert!(seen.has(l), "{l:?} never generated");
        }
        for l in EnvLabel::ALL {
            assert!(seen_env.has(l), "{l:?} never generated");
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = four_way(vec![1.0; 3]);
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::BadConfig(_))));
        cfg = corridor(10.0);
        if let Layout::Explicit(g) = &mut cfg.layout {
            g.route = vec![0, 2];
        }
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::BadConfig(_))));
        let cfg = SynthConfig {
            speed: -1.0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::BadConfig(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SynthConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<SynthConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
