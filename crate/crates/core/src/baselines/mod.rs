//! Motion and uncertainty comparison methods.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::episodes::{EnvLabel, WindowSample};
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_rot6d, rot6d_to_matrix, BodyDelta, Rot6D};
use crate::model::MotionForecast;

fn require_past(s: &WindowSample) -> Result<()> {
    if s.past_len() < 2 || s.past_head.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: s.past_len().min(s.past_head.len()),
        });
    }
    Ok(())
}

/// Repeats the last body delta and keeps composing the last relative head
/// rotation `R_{T-1}^T R_T` onto the last head pose.
pub fn const_vel(s: &WindowSample, future: usize) -> Result<MotionForecast> {
    require_past(s)?;
    let last = *s.past_motion.last().expect("checked");
    let n = s.past_head.len();
    let prev = rot6d_to_matrix(&s.past_head[n - 2])?;
    let cur = rot6d_to_matrix(&s.past_head[n - 1])?;
    let step = prev.transpose().mul(&cur);
    let mut pose = cur;
    let mut head = Vec::with_capacity(future);
    for _ in 0..future {
        pose = pose.mul(&step);
        head.push(matrix_to_rot6d(&pose)?);
    }
    Ok(MotionForecast {
        traj: vec![last; future],
        head,
    })
}

/// Per-axis least-squares lines `y = intercept + slope * t` over `t = 0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
}

impl LinearFit {
    /// Fits each column of `series` (rows are time steps).
    pub fn fit(series: &[Vec<f64>]) -> Result<Self> {
        let t = series.len();
        if t < 2 {
            return Err(Error::TooShort { needed: 2, got: t });
        }
        let d = series[0].len();
        if series.iter().any(|r| r.len() != d) {
            return Err(Error::shape("LinearFit::fit", "ragged series"));
        }
        let a = DMatrix::from_fn(t, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DMatrix::from_fn(t, d, |i, j| series[i][j]);
        let coef = a
            .svd(true, true)
            .solve(&y, 1e-14)
            .map_err(|e| Error::DegenerateInput(e.to_string()))?;
        Ok(LinearFit {
            intercept: (0..d).map(|j| coef[(0, j)]).collect(),
            slope: (0..d).map(|j| coef[(1, j)]).collect(),
        })
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        self.intercept.iter().zip(&self.slope).map(|(b, m)| b + m * t).collect()
    }
}

/// Extends per-axis lines fitted to past deltas and 6D head vectors;
/// predicted 6D vectors are re-orthonormalized.
pub fn lin_ext(s: &WindowSample, future: usize) -> Result<MotionForecast> {
    require_past(s)?;
    let t1 = s.past_len();
    let motion: Vec<Vec<f64>> = s.past_motion.iter().map(|d| d.to_array().to_vec()).collect();
    let head: Vec<Vec<f64>> = s.past_head.iter().map(|h| h.0.to_vec()).collect();
    let mf = LinearFit::fit(&motion)?;
    let hf = LinearFit::fit(&head)?;
    let mut traj = Vec::with_capacity(future);
    let mut rots = Vec::with_capacity(future);
    for k in 0..future {
        let t = (t1 + k) as f64;
        let m = mf.at(t);
        traj.push(BodyDelta::new(m[0], m[1], m[2]));
        let h = hf.at(t);
        let raw = Rot6D([h[0], h[1], h[2], h[3], h[4], h[5]]);
        rots.push(matrix_to_rot6d(&rot6d_to_matrix(&raw)?)?);
    }
    Ok(MotionForecast { traj, head: rots })
}

/// Least-squares affine regressor clamped to [0, 1], serializable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearRegressor {
    pub fn fit(names: &[&str], x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        let d = names.len();
        if x.len() < d + 1 {
            return Err(Error::TooFew {
                needed: d + 1,
                got: x.len(),
            });
        }
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::shape("LinearRegressor::fit", format!("rows must have {d} features")));
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "regressor fit" });
        }
        let a = DMatrix::from_fn(x.len(), d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        let b = DVector::from_column_slice(y);
        let coef = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::DegenerateInput(e.to_string()))?;
        Ok(LinearRegressor {
            features: names.iter().map(|s| s.to_string()).collect(),
            weights: coef.iter().take(d).copied().collect(),
            bias: coef[d],
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        let z = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        Ok(z.clamp(0.0, 1.0))
    }
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of the past heading increments.
pub fn motion_variability(s: &WindowSample) -> f64 {
    let dpsi: Vec<f64> = s.past_motion.iter().map(|d| d.dpsi).collect();
    if dpsi.is_empty() {
        0.0
    } else {
        population_std(&dpsi)
    }
}

/// Normalized entropy of the softmax over per-channel energies (mean squared
/// activation over grid cells) at the last past step.
pub fn perceptual_ambiguity(s: &WindowSample) -> Result<f64> {
    if s.features.is_empty() {
        return Err(Error::EmptyStream);
    }
    let step = s.features.step(s.features.len() - 1);
    let c = s.features.channels();
    if c < 2 {
        return Err(Error::DegenerateInput("ambiguity needs at least two channels".into()));
    }
    let cells = step.len() / c;
    let energy: Vec<f64> = (0..c)
        .map(|k| (0..cells).map(|i| (step[i * c + k] as f64).powi(2)).sum::<f64>() / cells as f64)
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = energy.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let h: f64 = exp.iter().map(|e| e / z).filter(|p| *p > 0.0).map(|p| -p * p.ln()).sum();
    Ok((h / (c as f64).ln()).clamp(0.0, 1.0))
}

/// Entropy-and-variability proxy for perceived uncertainty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmuProxy {
    pub fit: Option<LinearRegressor>,
}

const EMU_FEATURES: [&str; 2] = ["ambiguity", "variability"];

impl EmuProxy {
    pub fn features(s: &WindowSample) -> Result<Vec<f64>> {
        Ok(vec![perceptual_ambiguity(s)?, motion_variability(s)])
    }

    pub fn fit(samples: &[WindowSample], labels: &[f64]) -> Result<Self> {
        let x = samples.iter().map(Self::features).collect::<Result<Vec<_>>>()?;
        Ok(EmuProxy {
            fit: Some(LinearRegressor::fit(&EMU_FEATURES, &x, labels)?),
        })
    }

    pub fn predict(&self, s: &WindowSample) -> Result<f64> {
        self.fit.as_ref().ok_or(Error::UnfitModel)?.predict(&Self::features(s)?)
    }
}

/// Five route-complexity features regressed onto perceived uncertainty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathU {
    pub fit: Option<LinearRegressor>,
}

const PATH_FEATURES: [&str; 5] = [
    "junction_count",
    "occlusion_count",
    "crowd_flag",
    "goal_distance",
    "motion_variability",
];

impl PathU {
    pub fn features(s: &WindowSample) -> Vec<f64> {
        let crowd = s.past_env.iter().any(|l| l.has(EnvLabel::Crowd));
        vec![
            s.env_count(EnvLabel::Jct) as f64,
            s.env_count(EnvLabel::Occ) as f64,
            if crowd { 1.0 } else { 0.0 },
            s.goal_distance,
            motion_variability(s),
        ]
    }

    pub fn fit(samples: &[WindowSample], labels: &[f64]) -> Result<Self> {
        let x: Vec<Vec<f64>> = samples.iter().map(Self::features).collect();
        Ok(PathU {
            fit: Some(LinearRegressor::fit(&PATH_FEATURES, &x, labels)?),
        })
    }

    pub fn predict(&self, s: &WindowSample) -> Result<f64> {
        self.fit.as_ref().ok_or(Error::UnfitModel)?.predict(&Self::features(s))
    }
}

/// Fitted uncertainty baselines, stored together as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBaselines {
    pub emu_proxy: EmuProxy,
    pub path_u: PathU,
}

impl UncertaintyBaselines {
    pub fn fit(samples: &[WindowSample]) -> Result<Self> {
        let labels: Vec<f64> = samples.iter().map(|s| s.u_target).collect();
        Ok(UncertaintyBaselines {
            emu_proxy: EmuProxy::fit(samples, &labels)?,
            path_u: PathU::fit(samples, &labels)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
