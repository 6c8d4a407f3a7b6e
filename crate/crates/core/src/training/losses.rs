use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{relative_rotation_l1, rot6d_to_matrix, BodyDelta, Rot6D};

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_traj: f64,
    pub lambda_head: f64,
    pub lambda_u: f64,
    pub lambda_var: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_traj: 1.0,
            lambda_head: 1.0,
            lambda_u: 1.0,
            lambda_var: 0.3,
            alpha: 0.3,
            gamma: 0.98,
        }
    }
}

impl LossWeights {
    /// Plain undiscounted L1 trajectory loss without the spread term.
    pub fn without_traj_extras(self) -> Self {
        LossWeights {
            gamma: 1.0,
            lambda_var: 0.0,
            ..self
        }
    }

    /// `gamma` must lie in [0.95, 0.99]. The only exception is the plain L1
    /// objective of [`LossWeights::without_traj_extras`] (`gamma = 1`,
    /// `lambda_var = 0`).
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_traj, self.lambda_head, self.lambda_u, self.lambda_var, self.alpha];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::BadConfig("loss weights must be finite and non-negative".into()));
        }
        let plain = self.gamma == 1.0 && self.lambda_var == 0.0;
        if !plain && !(0.95..=0.99).contains(&self.gamma) {
            return Err(Error::BadConfig(format!("gamma {} outside [0.95, 0.99]", self.gamma)));
        }
        Ok(())
    }

    /// `gamma^i` for `i = 1..=steps`.
    pub fn discounts(&self, steps: usize) -> Vec<f64> {
        (1..=steps).map(|i| self.gamma.powi(i as i32)).collect()
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub traj: f64,
    pub head: f64,
    pub u: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.traj += other.traj;
        self.head += other.head;
        self.u += other.u;
        self.aux += other.aux;
    }

    pub fn scaled(&self, k: f64) -> LossParts {
        LossParts {
            traj: self.traj * k,
            head: self.head * k,
            u: self.u * k,
            aux: self.aux * k,
        }
    }
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Discounted L1 over future steps plus the per-dimension spread penalty.
pub fn traj_loss(pred: &[BodyDelta], gt: &[BodyDelta], w: &LossWeights) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("traj_loss", format!("{} vs {} steps", pred.len(), gt.len())));
    }
    let l1: f64 = w
        .discounts(pred.len())
        .iter()
        .zip(pred.iter().zip(gt))
        .map(|(d, (p, g))| {
            let (p, g) = (p.to_array(), g.to_array());
            d * (0..3).map(|k| (p[k] - g[k]).abs()).sum::<f64>()
        })
        .sum();
    let spread: f64 = (0..3)
        .map(|k| {
            let sp = population_std(pred.iter().map(move |p| p.to_array()[k]));
            let sg = population_std(gt.iter().map(move |g| g.to_array()[k]));
            (sp - sg).powi(2)
        })
        .sum();
    Ok(l1 + w.lambda_var * spread)
}

/// Mean relative rotation L1 over future steps.
pub fn head_loss(pred: &[Rot6D], gt: &[Rot6D]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("head_loss", format!("{} vs {} steps", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += relative_rotation_l1(&rot6d_to_matrix(p)?, &rot6d_to_matrix(g)?);
    }
    Ok(total / pred.len() as f64)
}

pub fn u_loss(u_hat: f64, u_human: f64) -> Result<f64> {
    for (what, v) in [("u_hat", u_hat), ("u_human", u_human)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { what, value: v });
        }
    }
    Ok((u_hat - u_human).powi(2))
}

fn mean_bce(logits: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    sum / logits.len() as f64
}

/// Mean per-class binary cross-entropy of each head, summed over heads.
pub fn aux_loss(env_logits: &[f64], behavior_logits: &[f64], env_targets: &[f64], behavior_targets: &[f64]) -> Result<f64> {
    if env_logits.len() != env_targets.len() || behavior_logits.len() != behavior_targets.len() {
        return Err(Error::shape(
            "aux_loss",
            format!(
                "logits {}/{} vs targets {}/{}",
                env_logits.len(),
                behavior_logits.len(),
                env_targets.len(),
                behavior_targets.len()
            ),
        ));
    }
    if env_logits.is_empty() || behavior_logits.is_empty() {
        return Err(Error::shape("aux_loss", "empty logits"));
    }
    Ok(mean_bce(env_logits, env_targets) + mean_bce(behavior_logits, behavior_targets))
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    if [parts.traj, parts.head, parts.u, parts.aux].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(w.lambda_traj * parts.traj + w.lambda_head * parts.head + w.lambda_u * parts.u + w.alpha * parts.aux)
}

/// Supervision for one window in tensor form.
#[derive(Debug, Clone)]
pub struct Target {
    /// `T2 x 3` body deltas.
    pub traj: Tensor,
    /// `T2 x 9` row-major rotation matrices.
    pub head: Tensor,
    pub u: f64,
    /// `1 x n_env` multi-hot.
    pub env: Tensor,
    /// `1 x n_behavior` multi-hot.
    pub behavior: Tensor,
}

/// Graph nodes of one sample's loss.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LossVars {
    pub total: Var,
    pub traj: Var,
    pub head: Var,
    pub u: Option<Var>,
    pub aux: Option<Var>,
}

impl LossVars {
    pub fn parts(&self, g: &Graph<'_>) -> LossParts {
        let v = |x: Var| g.value(x).data()[0];
        LossParts {
            traj: v(self.traj),
            head: v(self.head),
            u: self.u.map_or(0.0, v),
            aux: self.aux.map_or(0.0, v),
        }
    }
}

pub(crate) fn traj_loss_graph(g: &mut Graph<'_>, pred: Var, gt: &Tensor, w: &LossWeights) -> Result<Var> {
    let steps = gt.rows();
    let discount: Vec<f64> = w.discounts(steps).iter().flat_map(|d| [*d; 3]).collect();
    let target = g.constant(gt.clone())?;
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    let weights = g.constant(Tensor::matrix(steps, 3, discount)?)?;
    let weighted = g.mul(abs, weights)?;
    let l1 = g.sum(weighted)?;
    if w.lambda_var == 0.0 {
        return Ok(l1);
    }
    let gt_std: Vec<f64> = (0..3).map(|k| population_std((0..steps).map(|i| gt.get(i, k)))).collect();
    let sp = g.col_std(pred)?;
    let sg = g.constant(Tensor::matrix(1, 3, gt_std)?)?;
    let d = g.sub(sp, sg)?;
    let sq = g.square(d)?;
    let spread = g.sum(sq)?;
    let spread = g.scale(spread, w.lambda_var)?;
    g.add(l1, spread)
}

pub(crate) fn head_loss_graph(g: &mut Graph<'_>, pred6: Var, gt9: &Tensor) -> Result<Var> {
    let m = g.rot6d_to_matrix(pred6)?;
    let r = g.rel_rot_residual(m, gt9.clone())?;
    let a = g.abs(r)?;
    let s = g.sum(a)?;
    g.scale(s, 1.0 / gt9.rows() as f64)
}

fn mean_bce_graph(g: &mut Graph<'_>, logits: Var, targets: &Tensor) -> Result<Var> {
    let b = g.bce_with_logits(logits, targets.clone())?;
    let s = g.sum(b)?;
    g.scale(s, 1.0 / targets.len() as f64)
}

/// Builds the weighted per-sample objective. Terms whose outputs the network
/// does not produce are omitted.
pub(crate) fn sample_loss(
    g: &mut Graph<'_>,
    out: &crate::model::ForecastVars,
    target: &Target,
    w: &LossWeights,
) -> Result<LossVars> {
    let traj = traj_loss_graph(g, out.traj, &target.traj, w)?;
    let head = head_loss_graph(g, out.head, &target.head)?;
    let mut total = g.scale(traj, w.lambda_traj)?;
    let h = g.scale(head, w.lambda_head)?;
    total = g.add(total, h)?;
    let u = match out.u_hat {
        Some(u_hat) => {
            let t = g.constant(Tensor::scalar(target.u))?;
            let d = g.sub(u_hat, t)?;
            let sq = g.square(d)?;
            let l = g.sum(sq)?;
            let weighted = g.scale(l, w.lambda_u)?;
            total = g.add(total, weighted)?;
            Some(l)
        }
        None => None,
    };
    let aux = match (out.env_logits, out.behavior_logits) {
        (Some(env), Some(beh)) => {
            let a = mean_bce_graph(g, env, &target.env)?;
            let b = mean_bce_graph(g, beh, &target.behavior)?;
            let l = g.add(a, b)?;
            let weighted = g.scale(l, w.alpha)?;
            total = g.add(total, weighted)?;
            Some(l)
        }
        _ => None,
    };
    Ok(LossVars {
        total,
        traj,
        head,
        u,
        aux,
    })
}
