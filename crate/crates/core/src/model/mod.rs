//! The multimodal forecaster and the early-fusion comparison network.

mod early_fusion;
mod egocog;
pub(crate) mod layers;

use serde::{Deserialize, Serialize};

pub use early_fusion::{EarlyFusionConfig, EarlyFusionTransformer};
pub use egocog::{EgoCogNav, FusedSequence};
pub use layers::positional_encoding;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::episodes::{WindowSample, WindowSpec};
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_rot6d, rot6d_to_matrix, BodyDelta, Rot6D};

/// Input streams of the forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Video,
    Motion,
    Head,
    Gaze,
    Goal,
}

/// Which input streams reach the network; masked streams are fed as zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modalities {
    pub video: bool,
    pub motion: bool,
    pub head: bool,
    pub gaze: bool,
    pub goal: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities {
            video: true,
            motion: true,
            head: true,
            gaze: true,
            goal: true,
        }
    }
}

impl Modalities {
    pub fn enabled(&self, s: Stream) -> bool {
        match s {
            Stream::Video => self.video,
            Stream::Motion => self.motion,
            Stream::Head => self.head,
            Stream::Gaze => self.gaze,
            Stream::Goal => self.goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_fusion_layers: usize,
    pub n_decoder_layers: usize,
    pub n_video_layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub u_hidden: usize,
    pub past: usize,
    pub future: usize,
    pub grid: usize,
    pub channels: usize,
    pub n_env_classes: usize,
    pub n_behavior_classes: usize,
    /// Order in which the video stream cross-attends to the action streams.
    pub cross_order: Vec<Stream>,
    pub modalities: Modalities,
    /// Multiplier applied to past `(dx, dy, dpsi)` inputs.
    pub motion_scale: f64,
    /// Goal distances are divided by this (meters).
    pub goal_distance_scale: f64,
    /// Decoder trajectory outputs are multiplied by this.
    pub traj_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_fusion_layers: 2,
            n_decoder_layers: 2,
            n_video_layers: 1,
            ffn_mult: 2,
            u_hidden: 32,
            past: 30,
            future: 10,
            grid: 4,
            channels: 32,
            n_env_classes: 5,
            n_behavior_classes: 6,
            cross_order: vec![Stream::Motion, Stream::Head, Stream::Gaze],
            modalities: Modalities::default(),
            motion_scale: 10.0,
            goal_distance_scale: 10.0,
            traj_scale: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.ffn_mult,
            self.u_hidden,
            self.past,
            self.future,
            self.grid,
            self.channels,
            self.n_env_classes,
            self.n_behavior_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::BadConfig("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_decoder_layers == 0 {
            return Err(Error::BadConfig("at least one decoder layer is required".into()));
        }
        if self.cross_order.iter().any(|s| !matches!(s, Stream::Motion | Stream::Head | Stream::Gaze)) {
            return Err(Error::BadConfig("cross_order may only list motion, head and gaze".into()));
        }
        if !(self.motion_scale > 0.0 && self.goal_distance_scale > 0.0 && self.traj_scale > 0.0) {
            return Err(Error::BadConfig("input/output scales must be positive".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            past: self.past,
            future: self.future,
        }
    }
}

/// Network-ready tensors for one window.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// Spatially pooled features, `T1 x C`.
    pub video: Tensor,
    /// Scaled body deltas, `T1 x 3`.
    pub motion: Tensor,
    /// `T1 x 6`.
    pub head: Tensor,
    /// `T1 x 2`.
    pub gaze: Tensor,
    /// `(d / scale, sin, cos)`, `T1 x 3`.
    pub goal: Tensor,
}

impl ModelInput {
    pub fn from_window(s: &WindowSample, motion_scale: f64, goal_distance_scale: f64) -> Result<Self> {
        let t = s.past_len();
        if s.features.len() != t {
            return Err(Error::LengthMismatch {
                expected: t,
                got: s.features.len(),
            });
        }
        let video: Vec<f64> = (0..t).flat_map(|i| s.features.pooled(i)).collect();
        let motion = s
            .past_motion
            .iter()
            .flat_map(|d| d.to_array().map(|v| v * motion_scale))
            .collect();
        let head = s.past_head.iter().flat_map(|h| h.0).collect();
        let gaze = s.past_gaze.iter().flat_map(|g| [g.u, g.v]).collect();
        let goal = s
            .past_goal
            .iter()
            .flat_map(|e| [e.d / goal_distance_scale, e.sb, e.cb])
            .collect();
        Ok(ModelInput {
            video: Tensor::matrix(t, s.features.channels(), video)?,
            motion: Tensor::matrix(t, 3, motion)?,
            head: Tensor::matrix(t, 6, head)?,
            gaze: Tensor::matrix(t, 2, gaze)?,
            goal: Tensor::matrix(t, 3, goal)?,
        })
    }

    pub fn stream(&self, s: Stream) -> &Tensor {
        match s {
            Stream::Video => &self.video,
            Stream::Motion => &self.motion,
            Stream::Head => &self.head,
            Stream::Gaze => &self.gaze,
            Stream::Goal => &self.goal,
        }
    }

    pub fn stream_mut(&mut self, s: Stream) -> &mut Tensor {
        match s {
            Stream::Video => &mut self.video,
            Stream::Motion => &mut self.motion,
            Stream::Head => &mut self.head,
            Stream::Gaze => &mut self.gaze,
            Stream::Goal => &mut self.goal,
        }
    }
}

/// Future body deltas and head rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionForecast {
    pub traj: Vec<BodyDelta>,
    pub head: Vec<Rot6D>,
}

/// Full output of the multimodal forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub traj: Vec<BodyDelta>,
    /// Gram-Schmidt-normalized 6D rotations.
    pub head: Vec<Rot6D>,
    pub u_hat: f64,
    pub env_logits: Vec<f64>,
    pub behavior_logits: Vec<f64>,
}

impl ForecastBundle {
    pub fn motion(&self) -> MotionForecast {
        MotionForecast {
            traj: self.traj.clone(),
            head: self.head.clone(),
        }
    }
}

/// Tape nodes produced by a network's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForecastVars {
    /// `T2 x 3` body deltas.
    pub traj: Var,
    /// `T2 x 6` raw 6D head rotations.
    pub head: Var,
    /// `1 x 1` in [0, 1].
    pub u_hat: Option<Var>,
    pub env_logits: Option<Var>,
    pub behavior_logits: Option<Var>,
}

/// Prediction of any trainable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub motion: MotionForecast,
    pub u_hat: Option<f64>,
    pub env_logits: Option<Vec<f64>>,
    pub behavior_logits: Option<Vec<f64>>,
}

/// A network trainable by the generic training loop.
pub trait Forecaster {
    fn name(&self) -> &str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn input_scales(&self) -> (f64, f64);
    /// Records the forward pass on `g`, which must be bound to `self.params()`.
    fn forward_graph(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<ForecastVars>;
    /// JSON description stored alongside checkpoints.
    fn config_json(&self) -> serde_json::Value;

    fn prepare(&self, s: &WindowSample) -> Result<ModelInput> {
        let (m, gd) = self.input_scales();
        ModelInput::from_window(s, m, gd)
    }

    fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let mut g = Graph::with_params(self.params());
        let vars = self.forward_graph(&mut g, input)?;
        let rows = |v: Var, g: &Graph<'_>| g.value(v).data().to_vec();
        Ok(Prediction {
            motion: decode_motion(g.value(vars.traj), g.value(vars.head))?,
            u_hat: vars.u_hat.map(|u| g.value(u).data()[0]),
            env_logits: vars.env_logits.map(|v| rows(v, &g)),
            behavior_logits: vars.behavior_logits.map(|v| rows(v, &g)),
        })
    }
}

/// Converts decoder tensors to deltas and normalized 6D rotations.
pub fn decode_motion(traj: &Tensor, head: &Tensor) -> Result<MotionForecast> {
    let traj = (0..traj.rows())
        .map(|i| {
            let r = traj.row(i);
            BodyDelta::new(r[0], r[1], r[2])
        })
        .collect();
    let head = (0..head.rows())
        .map(|i| {
            let r = head.row(i);
            let raw = Rot6D([r[0], r[1], r[2], r[3], r[4], r[5]]);
            matrix_to_rot6d(&rot6d_to_matrix(&raw)?)
        })
        .collect::<Result<_>>()?;
    Ok(MotionForecast { traj, head })
}

/// Every `T x 6` row set to the identity rotation.
pub(crate) fn identity_6d(rows: usize) -> Tensor {
    let data = (0..rows).flat_map(|_| Rot6D::IDENTITY.0).collect();
    Tensor::matrix(rows, 6, data).expect("6 columns")
}

/// Returns `t` or a zero tensor of the same shape when the stream is masked.
pub(crate) fn masked(t: &Tensor, on: bool) -> Tensor {
    if on {
        t.clone()
    } else {
        Tensor::zeros(t.shape())
    }
}
