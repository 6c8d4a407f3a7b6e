//! Episode data model, ingestion, 10 Hz synchronisation, windowing and the
//! synthetic wayfinding generator.

mod ingest;
mod labels;
mod resample;
mod savgol;
mod store;
mod synth;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ingest::{
    assemble_episode, gps_to_local_meters, parse_gaze_imu_tsv, parse_gpx, parse_joystick_csv,
    GazeImuRecord, GazeImuTable, GpsFix, JoystickSample, JoystickTable, RawRecording,
};
pub use labels::{BehaviorLabel, EnvLabel, LabelKind, LabelSet};
pub use resample::{resample_10hz, Resampled, ResampleMode};
pub use savgol::{savgol_coefficients, savgol_smooth, savgol_smooth_with, EdgeMode};
pub use store::{
    read_episode_dir, read_feature_cache, write_episode_dir, write_feature_cache,
    EpisodeManifest, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{
    synth_generate, GraphSpec, Layout, NodeSpec, ProceduralSpec, SynthConfig,
};

use crate::error::{Error, Result};
use crate::geometry::{encode_goal, integrate_deltas, BodyDelta, GazePoint, GoalEncoding, Pose2, Rot6D};

/// Sample period of the synchronized timeline.
pub const STEP_SECONDS: f64 = 0.1;

/// Per-step visual feature maps, `T x G x G x C`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    steps: usize,
    grid: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(steps: usize, grid: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if grid == 0 || channels == 0 {
            return Err(Error::BadConfig("feature grid and channels must be positive".into()));
        }
        let expected = steps * grid * grid * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(FeatureGrid {
            steps,
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(steps: usize, grid: usize, channels: usize) -> Self {
        FeatureGrid {
            steps,
            grid,
            channels,
            data: vec![0.0; steps * grid * grid * channels],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn step_len(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    /// All cells of one step, `G*G*C` values.
    pub fn step(&self, t: usize) -> &[f32] {
        let n = self.step_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.step_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Spatial mean over the `G x G` cells of one step.
    pub fn pooled(&self, t: usize) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; c];
        for cell in self.step(t).chunks(c) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += *v as f64;
            }
        }
        let inv = 1.0 / (self.grid * self.grid) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// A contiguous range of steps of a shared [`FeatureGrid`].
#[derive(Debug, Clone)]
pub struct FeatureWindow {
    grid: Arc<FeatureGrid>,
    start: usize,
    len: usize,
}

impl FeatureWindow {
    pub fn new(grid: Arc<FeatureGrid>, start: usize, len: usize) -> Result<Self> {
        if start + len > grid.steps() {
            return Err(Error::TooShort {
                needed: start + len,
                got: grid.steps(),
            });
        }
        Ok(FeatureWindow { grid, start, len })
    }

    /// Wraps an owned grid as a full-length window.
    pub fn owned(grid: FeatureGrid) -> Self {
        let len = grid.steps();
        FeatureWindow {
            grid: Arc::new(grid),
            start: 0,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn grid_size(&self) -> usize {
        self.grid.grid()
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    pub fn step(&self, t: usize) -> &[f32] {
        self.grid.step(self.start + t)
    }

    pub fn pooled(&self, t: usize) -> Vec<f64> {
        self.grid.pooled(self.start + t)
    }
}

/// One synchronized 10 Hz recording.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: String,
    /// Pose before the first motion delta.
    pub origin: Pose2,
    pub times: Vec<f64>,
    pub motion: Vec<BodyDelta>,
    pub head: Vec<Rot6D>,
    pub gaze: Vec<GazePoint>,
    pub goal_xy: Vec<[f64; 2]>,
    pub uncertainty: Vec<f64>,
    pub env: Vec<LabelSet>,
    pub behavior: Vec<LabelSet>,
    pub features: Arc<FeatureGrid>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Checks stream-length equality, `U` range and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.motion.len(),
            self.head.len(),
            self.gaze.len(),
            self.goal_xy.len(),
            self.uncertainty.len(),
            self.env.len(),
            self.behavior.len(),
            self.features.steps(),
        ];
        if let Some(bad) = lens.iter().find(|&&l| l != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                got: *bad,
            });
        }
        if let Some(u) = self.uncertainty.iter().find(|u| !(0.0..=1.0).contains(*u)) {
            return Err(Error::OutOfRange {
                what: "uncertainty",
                value: *u,
            });
        }
        let finite = self.times.iter().all(|v| v.is_finite())
            && self.motion.iter().all(|d| d.to_array().iter().all(|v| v.is_finite()))
            && self.head.iter().all(|h| h.0.iter().all(|v| v.is_finite()))
            && self.goal_xy.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite { op: "episode" });
        }
        Ok(())
    }

    /// World poses after each motion delta.
    pub fn poses(&self) -> Vec<Pose2> {
        integrate_deltas(self.origin, &self.motion)
    }

    /// Body-frame goal encoding at every step.
    pub fn goal_encodings(&self) -> Vec<GoalEncoding> {
        self.poses()
            .iter()
            .zip(&self.goal_xy)
            .map(|(p, g)| encode_goal(*p, (g[0], g[1])))
            .collect()
    }
}

/// Past/future horizon lengths in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub past: usize,
    pub future: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            past: 30,
            future: 10,
        }
    }
}

/// One training/evaluation instance.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub episode_id: String,
    /// Episode step index of the first past step.
    pub start: usize,
    pub past_motion: Vec<BodyDelta>,
    pub past_head: Vec<Rot6D>,
    pub past_gaze: Vec<GazePoint>,
    pub past_goal: Vec<GoalEncoding>,
    pub features: FeatureWindow,
    pub future_motion: Vec<BodyDelta>,
    pub future_head: Vec<Rot6D>,
    /// Uncertainty at the last past step.
    pub u_target: f64,
    /// Labels at the last past step.
    pub env_now: LabelSet,
    pub behavior_now: LabelSet,
    /// Per-step environment labels over the past window.
    pub past_env: Vec<LabelSet>,
    /// Union of labels over the past window.
    pub aux_env: LabelSet,
    pub aux_behavior: LabelSet,
    /// Goal distance at the last past step (meters).
    pub goal_distance: f64,
}

impl WindowSample {
    pub fn past_len(&self) -> usize {
        self.past_motion.len()
    }

    pub fn future_len(&self) -> usize {
        self.future_motion.len()
    }

    /// Episode step index of the prediction time (last past step).
    pub fn now_index(&self) -> usize {
        self.start + self.past_len() - 1
    }

    /// Counts the past steps carrying `label` in the env stream.
    pub fn env_count(&self, label: EnvLabel) -> usize {
        self.past_env
            .iter()
            .filter(|s| s.has(label))
            .count()
    }
}

/// Number of windows [`extract_windows`] produces.
pub fn window_count(len: usize, spec: WindowSpec, stride: usize) -> usize {
    let need = spec.past + spec.future;
    if stride == 0 || len < need {
        0
    } else {
        (len - need) / stride + 1
    }
}

/// Slides a `past + future` window over the episode with the given stride.
pub fn extract_windows(ep: &Episode, spec: WindowSpec, stride: usize) -> Result<Vec<WindowSample>> {
    if stride == 0 || spec.past == 0 || spec.future == 0 {
        return Err(Error::BadConfig(format!(
            "stride {stride}, past {}, future {} must be positive",
            spec.past, spec.future
        )));
    }
    let need = spec.past + spec.future;
    if ep.len() < need {
        return Err(Error::TooShort {
            needed: need,
            got: ep.len(),
        });
    }
    let goals = ep.goal_encodings();
    let count = window_count(ep.len(), spec, stride);
    (0..count)
        .map(|w| {
            let s = w * stride;
            let now = s + spec.past - 1;
            let past = s..s + spec.past;
            let future = s + spec.past..s + need;
            Ok(WindowSample {
                episode_id: ep.id.clone(),
                start: s,
                past_motion: ep.motion[past.clone()].to_vec(),
                past_head: ep.head[past.clone()].to_vec(),
                past_gaze: ep.gaze[past.clone()].to_vec(),
                past_goal: goals[past.clone()].to_vec(),
                features: FeatureWindow::new(ep.features.clone(), s, spec.past)?,
                future_motion: ep.motion[future.clone()].to_vec(),
                future_head: ep.head[future].to_vec(),
                u_target: ep.uncertainty[now],
                env_now: ep.env[now],
                behavior_now: ep.behavior[now],
                past_env: ep.env[past.clone()].to_vec(),
                aux_env: ep.env[past.clone()].iter().fold(LabelSet::EMPTY, |a, b| a.union(*b)),
                aux_behavior: ep.behavior[past].iter().fold(LabelSet::EMPTY, |a, b| a.union(*b)),
                goal_distance: goals[now].d,
            })
        })
        .collect()
}
