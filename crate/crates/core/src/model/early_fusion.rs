use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{positional_encoding, AttentionBlock, Linear};
use super::{identity_6d, masked, ForecastVars, Forecaster, Modalities, ModelInput, Stream};
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyFusionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub past: usize,
    pub future: usize,
    pub channels: usize,
    pub modalities: Modalities,
    pub motion_scale: f64,
    pub goal_distance_scale: f64,
    pub traj_scale: f64,
    pub init_seed: u64,
}

impl Default for EarlyFusionConfig {
    fn default() -> Self {
        EarlyFusionConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_mult: 2,
            past: 30,
            future: 10,
            channels: 32,
            modalities: Modalities::default(),
            motion_scale: 10.0,
            goal_distance_scale: 10.0,
            traj_scale: 0.1,
            init_seed: 0,
        }
    }
}

impl EarlyFusionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.n_heads, self.ffn_mult, self.past, self.future, self.channels];
        if dims.contains(&0) {
            return Err(Error::BadConfig("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.motion_scale > 0.0 && self.goal_distance_scale > 0.0 && self.traj_scale > 0.0) {
            return Err(Error::BadConfig("input/output scales must be positive".into()));
        }
        Ok(())
    }
}

const STREAMS: [(Stream, usize); 4] = [(Stream::Motion, 3), (Stream::Head, 6), (Stream::Gaze, 2), (Stream::Goal, 3)];

/// Early-fusion comparison network: per-step stream embeddings are
/// concatenated, projected, passed through one self-attention stack and
/// read out by two linear heads. It has no uncertainty output.
#[derive(Debug, Clone)]
pub struct EarlyFusionTransformer {
    cfg: EarlyFusionConfig,
    store: ParamStore,
    pe: Tensor,
    embed: Vec<Linear>,
    mix: Linear,
    blocks: Vec<AttentionBlock>,
    traj_out: Linear,
    head_out: Linear,
}

impl EarlyFusionTransformer {
    pub fn new(cfg: EarlyFusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let mut embed = vec![Linear::new(&mut s, "embed.video", cfg.channels, d, true, &mut rng)];
        for (i, (_, width)) in STREAMS.iter().enumerate() {
            embed.push(Linear::new(&mut s, &format!("embed.stream{i}"), *width, d, true, &mut rng));
        }
        let mix = Linear::new(&mut s, "mix", d * embed.len(), d, true, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|l| AttentionBlock::new(&mut s, &format!("self{l}"), d, cfg.n_heads, d * cfg.ffn_mult, &mut rng))
            .collect();
        let traj_out = Linear::new(&mut s, "traj.out", d, cfg.future * 3, true, &mut rng);
        let head_out = Linear::new(&mut s, "head.out", d, cfg.future * 6, true, &mut rng);
        Ok(EarlyFusionTransformer {
            pe: positional_encoding(cfg.past, d),
            cfg,
            store: s,
            embed,
            mix,
            blocks,
            traj_out,
            head_out,
        })
    }

    pub fn config(&self) -> &EarlyFusionConfig {
        &self.cfg
    }
}

impl Forecaster for EarlyFusionTransformer {
    fn name(&self) -> &str {
        "m_transformer"
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_scales(&self) -> (f64, f64) {
        (self.cfg.motion_scale, self.cfg.goal_distance_scale)
    }

    fn forward_graph(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<ForecastVars> {
        let t = self.cfg.past;
        let streams = std::iter::once((Stream::Video, self.cfg.channels)).chain(STREAMS);
        let mut parts = Vec::with_capacity(self.embed.len());
        for ((stream, width), lin) in streams.zip(&self.embed) {
            let x = input.stream(stream);
            if x.shape() != [t, width] {
                return Err(Error::shape("model input", format!("{:?} is {:?}, expected [{t}, {width}]", stream, x.shape())));
            }
            let x = g.constant(masked(x, self.cfg.modalities.enabled(stream)))?;
            parts.push(lin.apply(g, x)?);
        }
        let cat = g.concat_cols(&parts)?;
        let h = self.mix.apply(g, cat)?;
        let pe = g.constant(self.pe.clone())?;
        let mut h = g.add(h, pe)?;
        for block in &self.blocks {
            h = block.apply(g, h, h)?;
        }
        let pooled = g.mean_rows(h)?;
        let traj = self.traj_out.apply(g, pooled)?;
        let traj = g.reshape(traj, &[self.cfg.future, 3])?;
        let traj = g.scale(traj, self.cfg.traj_scale)?;
        let head = self.head_out.apply(g, pooled)?;
        let head = g.reshape(head, &[self.cfg.future, 6])?;
        let id = g.constant(identity_6d(self.cfg.future))?;
        let head = g.add(head, id)?;
        Ok(ForecastVars {
            traj,
            head,
            u_hat: None,
            env_logits: None,
            behavior_logits: None,
        })
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "m_transformer", "model": self.cfg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_relative_error_all;
    use rand::Rng;

    fn small() -> EarlyFusionConfig {
        EarlyFusionConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            past: 4,
            future: 3,
            channels: 5,
            ..EarlyFusionConfig::default()
        }
    }

    fn input(cfg: &EarlyFusionConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c: usize| Tensor::matrix(cfg.past, c, (0..cfg.past * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        ModelInput {
            video: t(cfg.channels),
            motion: t(3),
            head: t(6),
            gaze: t(2),
            goal: t(3),
        }
    }

    #[test]
    fn outputs_motion_only() {
        let cfg = small();
        let m = EarlyFusionTransformer::new(cfg.clone()).unwrap();
        let p = m.predict(&input(&cfg, 1)).unwrap();
        assert_eq!(p.motion.traj.len(), 3);
        assert_eq!(p.motion.head.len(), 3);
        assert!(p.u_hat.is_none() && p.env_logits.is_none());
    }

    #[test]
    fn masked_stream_has_no_effect() {
        let mut cfg = small();
        cfg.modalities.video = false;
        let m = EarlyFusionTransformer::new(cfg.clone()).unwrap();
        let a = input(&cfg, 2);
        let mut b = a.clone();
        b.video.data_mut().iter_mut().for_each(|v| *v *= -4.0);
        assert_eq!(m.predict(&a).unwrap(), m.predict(&b).unwrap());
    }

    #[test]
    fn gradient_check() {
        let cfg = small();
        let mut m = EarlyFusionTransformer::new(cfg.clone()).unwrap();
        let x = input(&cfg, 3);
        let m2 = m.clone();
        let f = move |g: &mut Graph<'_>| {
            let v = m2.forward_graph(g, &x)?;
            let a = g.square(v.traj)?;
            let a = g.sum(a)?;
            let b = g.abs(v.head)?;
            let b = g.sum(b)?;
            g.add(a, b)
        };
        let (err, name) = max_relative_error_all(m.params_mut(), 1e-5, 6, 2, f).unwrap();
        assert!(err < 1e-3, "{name}: {err}");
    }
}
