use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{positional_encoding, AttentionBlock, Linear};
use super::{
    decode_motion, identity_6d, masked, ForecastBundle, ForecastVars, Forecaster, ModelConfig, ModelInput, Stream,
};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Per-step fused features and goal embeddings, both `T1 x d`.
#[derive(Debug, Clone, Copy)]
pub struct FusedSequence {
    pub h_fuse: Var,
    pub h_goal: Var,
}

/// Embedded action streams, each `T1 x d`.
#[derive(Debug, Clone, Copy)]
pub struct ActionStreams {
    pub motion: Var,
    pub head: Var,
    pub gaze: Var,
    pub goal: Var,
}

impl ActionStreams {
    fn get(&self, s: Stream) -> Var {
        match s {
            Stream::Motion => self.motion,
            Stream::Head => self.head,
            Stream::Gaze => self.gaze,
            Stream::Goal | Stream::Video => self.goal,
        }
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    queries: ParamId,
    layers: Vec<AttentionBlock>,
    out: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let queries = store.uniform(format!("{name}.queries"), &[cfg.future, d], d, true, rng);
        let layers = (0..cfg.n_decoder_layers)
            .map(|l| AttentionBlock::new(store, &format!("{name}.layer{l}"), d, cfg.n_heads, d * cfg.ffn_mult, rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), d, out_dim, true, rng);
        Decoder { queries, layers, out }
    }

    fn apply(&self, g: &mut Graph<'_>, memory: Var) -> Result<Var> {
        let mut x = g.param(self.queries)?;
        for layer in &self.layers {
            x = layer.apply(g, x, memory)?;
        }
        self.out.apply(g, x)
    }
}

/// Multimodal forecaster: video self-attention, cross-attention fusion with
/// the action streams, an uncertainty head, uncertainty-gated goal
/// conditioning, two query decoders and auxiliary label heads.
#[derive(Debug, Clone)]
pub struct EgoCogNav {
    cfg: ModelConfig,
    store: ParamStore,
    pe: Tensor,
    video_in: Linear,
    video_blocks: Vec<AttentionBlock>,
    motion_in: Linear,
    head_in: Linear,
    gaze_in: Linear,
    goal_in: Linear,
    fusion: Vec<Vec<AttentionBlock>>,
    u_hidden: Linear,
    u_out: Linear,
    traj_dec: Decoder,
    head_dec: Decoder,
    env_head: Linear,
    behavior_head: Linear,
}

impl EgoCogNav {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let ffn = d * cfg.ffn_mult;
        let video_in = Linear::new(&mut s, "video.in", cfg.channels, d, true, &mut rng);
        let video_blocks = (0..cfg.n_video_layers)
            .map(|l| AttentionBlock::new(&mut s, &format!("video.self{l}"), d, cfg.n_heads, ffn, &mut rng))
            .collect();
        let motion_in = Linear::new(&mut s, "motion.in", 3, d, true, &mut rng);
        let head_in = Linear::new(&mut s, "head.in", 6, d, true, &mut rng);
        let gaze_in = Linear::new(&mut s, "gaze.in", 2, d, true, &mut rng);
        let goal_in = Linear::new(&mut s, "goal.in", 3, d, true, &mut rng);
        let fusion = (0..cfg.n_fusion_layers)
            .map(|l| {
                cfg.cross_order
                    .iter()
                    .map(|st| {
                        let name = format!("fusion{l}.{}", stream_name(*st));
                        AttentionBlock::new(&mut s, &name, d, cfg.n_heads, ffn, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let u_hidden = Linear::new(&mut s, "cognition.hidden", d, cfg.u_hidden, true, &mut rng);
        let u_out = Linear::new(&mut s, "cognition.out", cfg.u_hidden, 1, true, &mut rng);
        let traj_dec = Decoder::new(&mut s, "traj", &cfg, 3, &mut rng);
        let head_dec = Decoder::new(&mut s, "head", &cfg, 6, &mut rng);
        let env_head = Linear::new(&mut s, "aux.env", d, cfg.n_env_classes, true, &mut rng);
        let behavior_head = Linear::new(&mut s, "aux.behavior", d, cfg.n_behavior_classes, true, &mut rng);
        Ok(EgoCogNav {
            pe: positional_encoding(cfg.past, d),
            cfg,
            store: s,
            video_in,
            video_blocks,
            motion_in,
            head_in,
            gaze_in,
            goal_in,
            fusion,
            u_hidden,
            u_out,
            traj_dec,
            head_dec,
            env_head,
            behavior_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let t = self.cfg.past;
        let expect = [
            (Stream::Video, self.cfg.channels),
            (Stream::Motion, 3),
            (Stream::Head, 6),
            (Stream::Gaze, 2),
            (Stream::Goal, 3),
        ];
        for (s, c) in expect {
            let shape = input.stream(s).shape();
            if shape != [t, c] {
                return Err(Error::shape(
                    "model input",
                    format!("{} stream is {:?}, expected [{t}, {c}]", stream_name(s), shape),
                ));
            }
        }
        Ok(())
    }

    /// Linear projection of pooled features, before position and attention.
    pub fn project_video(&self, g: &mut Graph<'_>, video: &Tensor) -> Result<Var> {
        if video.shape() != [self.cfg.past, self.cfg.channels] {
            return Err(Error::shape(
                "encode_video",
                format!("{:?}, expected [{}, {}]", video.shape(), self.cfg.past, self.cfg.channels),
            ));
        }
        let x = g.constant(masked(video, self.cfg.modalities.video))?;
        self.video_in.apply(g, x)
    }

    /// `T1 x C` pooled features to `T1 x d` temporal tokens.
    pub fn encode_video(&self, g: &mut Graph<'_>, video: &Tensor) -> Result<Var> {
        let tokens = self.project_video(g, video)?;
        let pe = g.constant(self.pe.clone())?;
        let mut x = g.add(tokens, pe)?;
        for block in &self.video_blocks {
            x = block.apply(g, x, x)?;
        }
        Ok(x)
    }

    fn embed(&self, g: &mut Graph<'_>, lin: &Linear, t: &Tensor, on: bool, pe: Var) -> Result<Var> {
        let x = g.constant(masked(t, on))?;
        let e = lin.apply(g, x)?;
        g.add(e, pe)
    }

    pub fn encode_actions(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<ActionStreams> {
        self.check_input(input)?;
        let m = self.cfg.modalities;
        let pe = g.constant(self.pe.clone())?;
        Ok(ActionStreams {
            motion: self.embed(g, &self.motion_in, &input.motion, m.motion, pe)?,
            head: self.embed(g, &self.head_in, &input.head, m.head, pe)?,
            gaze: self.embed(g, &self.gaze_in, &input.gaze, m.gaze, pe)?,
            goal: self.embed(g, &self.goal_in, &input.goal, m.goal, pe)?,
        })
    }

    /// Video tokens query each action stream in `cross_order`.
    pub fn fuse(&self, g: &mut Graph<'_>, video: Var, actions: &ActionStreams) -> Result<FusedSequence> {
        let mut x = video;
        for layer in &self.fusion {
            for (block, stream) in layer.iter().zip(&self.cfg.cross_order) {
                x = block.apply(g, x, actions.get(*stream))?;
            }
        }
        Ok(FusedSequence {
            h_fuse: x,
            h_goal: actions.goal,
        })
    }

    /// Temporal mean-pool, MLP, sigmoid: `1 x 1` in [0, 1].
    pub fn predict_uncertainty(&self, g: &mut Graph<'_>, f: &FusedSequence) -> Result<Var> {
        let pooled = g.mean_rows(f.h_fuse)?;
        let h = self.u_hidden.apply(g, pooled)?;
        let h = g.gelu(h)?;
        let z = self.u_out.apply(g, h)?;
        g.sigmoid(z)
    }

    /// `(1 - u) h_fuse + u h_goal` at every step.
    pub fn condition_on_goal(&self, g: &mut Graph<'_>, f: &FusedSequence, u_hat: Var) -> Result<Var> {
        g.blend(f.h_fuse, f.h_goal, u_hat)
    }

    /// `T2 x 3` body deltas.
    pub fn decode_trajectory(&self, g: &mut Graph<'_>, conditioned: Var) -> Result<Var> {
        let raw = self.traj_dec.apply(g, conditioned)?;
        g.scale(raw, self.cfg.traj_scale)
    }

    /// `T2 x 6` raw 6D rotations, offset from the identity.
    pub fn decode_head(&self, g: &mut Graph<'_>, conditioned: Var) -> Result<Var> {
        let raw = self.head_dec.apply(g, conditioned)?;
        let id = g.constant(identity_6d(self.cfg.future))?;
        g.add(raw, id)
    }

    /// Environment and behaviour logits from mean-pooled fused features.
    pub fn auxiliary_heads(&self, g: &mut Graph<'_>, f: &FusedSequence) -> Result<(Var, Var)> {
        let pooled = g.mean_rows(f.h_fuse)?;
        Ok((self.env_head.apply(g, pooled)?, self.behavior_head.apply(g, pooled)?))
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForecastBundle> {
        let mut g = Graph::with_params(&self.store);
        let v = self.forward_graph(&mut g, input)?;
        let motion = decode_motion(g.value(v.traj), g.value(v.head))?;
        let data = |x: Option<Var>| x.map(|x| g.value(x).data().to_vec()).unwrap_or_default();
        Ok(ForecastBundle {
            traj: motion.traj,
            head: motion.head,
            u_hat: g.value(v.u_hat.expect("always present")).data()[0],
            env_logits: data(v.env_logits),
            behavior_logits: data(v.behavior_logits),
        })
    }
}

fn stream_name(s: Stream) -> &'static str {
    match s {
        Stream::Video => "video",
        Stream::Motion => "motion",
        Stream::Head => "head",
        Stream::Gaze => "gaze",
        Stream::Goal => "goal",
    }
}

impl Forecaster for EgoCogNav {
    fn name(&self) -> &str {
        "egocognav"
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
        let video = self.encode_video(g, &input.video)?;
        let actions = self.encode_actions(g, input)?;
        let fused = self.fuse(g, video, &actions)?;
        let u_hat = self.predict_uncertainty(g, &fused)?;
        let conditioned = self.condition_on_goal(g, &fused, u_hat)?;
        let traj = self.decode_trajectory(g, conditioned)?;
        let head = self.decode_head(g, conditioned)?;
        let (env, behavior) = self.auxiliary_heads(g, &fused)?;
        Ok(ForecastVars {
            traj,
            head,
            u_hat: Some(u_hat),
            env_logits: Some(env),
            behavior_logits: Some(behavior),
        })
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "egocognav", "model": self.cfg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_relative_error_all;
    use crate::geometry::rot6d_to_matrix;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_fusion_layers: 1,
            n_decoder_layers: 1,
            u_hidden: 4,
            past: 5,
            future: 3,
            grid: 2,
            channels: 4,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c: usize| {
            Tensor::matrix(cfg.past, c, (0..cfg.past * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        ModelInput {
            video: t(cfg.channels),
            motion: t(3),
            head: t(6),
            gaze: t(2),
            goal: t(3),
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let m = EgoCogNav::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 1);
        let mut g = Graph::with_params(m.params());
        let v = m.encode_video(&mut g, &input.video).unwrap();
        assert_eq!(g.shape(v), &[30, 64]);
        let a = m.encode_actions(&mut g, &input).unwrap();
        let f = m.fuse(&mut g, v, &a).unwrap();
        assert_eq!(g.shape(f.h_fuse), &[30, 64]);
        let out = m.forward(&input).unwrap();
        assert_eq!(out.traj.len(), 10);
        assert_eq!(out.head.len(), 10);
        assert_eq!(out.env_logits.len(), 5);
        assert_eq!(out.behavior_logits.len(), 6);
        assert!((0.0..=1.0).contains(&out.u_hat));
        for h in &out.head {
            rot6d_to_matrix(h).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn invalid_config_and_input() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(EgoCogNav::new(cfg), Err(Error::BadConfig(_))));
        let cfg = small_cfg();
        let m = EgoCogNav::new(cfg.clone()).unwrap();
        let mut input = random_input(&cfg, 1);
        input.gaze = Tensor::zeros(&[4, 2]);
        assert!(matches!(m.forward(&input), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_video_projects_to_bias_rows() {
        let cfg = small_cfg();
        let mut m = EgoCogNav::new(cfg.clone()).unwrap();
        let bias = m.video_in.b.unwrap();
        m.store.get_mut(bias).value.data_mut().copy_from_slice(&[1., 2., 3., 4., 5., 6., 7., 8.]);
        let mut g = Graph::with_params(&m.store);
        let v = m.project_video(&mut g, &Tensor::zeros(&[5, 4])).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(v).row(r), &[1., 2., 3., 4., 5., 6., 7., 8.]);
        }
    }

    #[test]
    fn pooled_features_make_tokens_invariant_to_cell_order() {
        use crate::episodes::{FeatureGrid, FeatureWindow};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, gsz, c) = (5, 2, 4);
        let data: Vec<f32> = (0..t * gsz * gsz * c).map(|_| rng.gen()).collect();
        let mut permuted = data.clone();
        for step in 0..t {
            let base = step * gsz * gsz * c;
            // Reverse the order of the four cells.
            for cell in 0..4 {
                let src = base + cell * c;
                let dst = base + (3 - cell) * c;
                permuted[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
        let pool = |d: Vec<f32>| {
            let w = FeatureWindow::owned(FeatureGrid::new(t, gsz, c, d).unwrap());
            Tensor::matrix(t, c, (0..t).flat_map(|i| w.pooled(i)).collect()).unwrap()
        };
        let m = EgoCogNav::new(small_cfg()).unwrap();
        let mut g = Graph::with_params(m.params());
        let a = m.encode_video(&mut g, &pool(data)).unwrap();
        let b = m.encode_video(&mut g, &pool(permuted)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let m = EgoCogNav::new(small_cfg()).unwrap();
        let input = random_input(&small_cfg(), 3);
        let mut g = Graph::with_params(m.params());
        let v = m.encode_video(&mut g, &input.video).unwrap();
        let a = m.encode_actions(&mut g, &input).unwrap();
        let f = m.fuse(&mut g, v, &a).unwrap();
        for (u, expect) in [(0.0, f.h_fuse), (1.0, f.h_goal)] {
            let uv = g.constant(Tensor::scalar(u)).unwrap();
            let c = m.condition_on_goal(&mut g, &f, uv).unwrap();
            assert_eq!(g.value(c), g.value(expect));
        }
        let mut g = Graph::new();
        let hf = g.constant(Tensor::scalar(2.0)).unwrap();
        let hg = g.constant(Tensor::scalar(4.0)).unwrap();
        let u = g.constant(Tensor::scalar(0.5)).unwrap();
        let c = g.blend(hf, hg, u).unwrap();
        assert_eq!(g.value(c).item().unwrap(), 3.0);
    }

    #[test]
    fn zero_weight_cognition_head_gives_half() {
        let cfg = small_cfg();
        let mut m = EgoCogNav::new(cfg.clone()).unwrap();
        for id in [m.u_out.w, m.u_out.b.unwrap()] {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        assert_eq!(m.forward(&random_input(&cfg, 5)).unwrap().u_hat, 0.5);
    }

    #[test]
    fn zero_aux_weights_give_zero_logits() {
        let cfg = small_cfg();
        let mut m = EgoCogNav::new(cfg.clone()).unwrap();
        for l in [m.env_head.clone(), m.behavior_head.clone()] {
            m.store.get_mut(l.w).value.data_mut().fill(0.0);
            m.store.get_mut(l.b.unwrap()).value.data_mut().fill(0.0);
        }
        let out = m.forward(&random_input(&cfg, 5)).unwrap();
        assert!(out.env_logits.iter().chain(&out.behavior_logits).all(|v| *v == 0.0));
    }

    #[test]
    fn u_hat_bounded_over_many_draws() {
        let cfg = small_cfg();
        let m = EgoCogNav::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..10_000u64 {
            let mut input = random_input(&cfg, i);
            // Widen the range to push the sigmoid toward saturation.
            let k = rng.gen_range(1.0..50.0);
            input.video.data_mut().iter_mut().for_each(|v| *v *= k);
            let mut g = Graph::with_params(m.params());
            let v = m.encode_video(&mut g, &input.video).unwrap();
            let a = m.encode_actions(&mut g, &input).unwrap();
            let f = m.fuse(&mut g, v, &a).unwrap();
            let u = m.predict_uncertainty(&mut g, &f).unwrap();
            let u = g.value(u).item().unwrap();
            assert!((0.0..=1.0).contains(&u));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let a = EgoCogNav::new(cfg.clone()).unwrap();
        let b = EgoCogNav::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 9);
        assert_eq!(a.forward(&input).unwrap(), a.forward(&input).unwrap());
        assert_eq!(a.forward(&input).unwrap(), b.forward(&input).unwrap());
    }

    #[test]
    fn masked_streams_do_not_affect_output() {
        let mut cfg = small_cfg();
        cfg.modalities.head = false;
        cfg.modalities.gaze = false;
        let m = EgoCogNav::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 10);
        let mut probe = input.clone();
        probe.head.data_mut().iter_mut().for_each(|v| *v += 3.0);
        probe.gaze.data_mut().iter_mut().for_each(|v| *v -= 1.0);
        assert_eq!(m.forward(&input).unwrap(), m.forward(&probe).unwrap());
        let mut live = input.clone();
        live.motion.data_mut()[0] += 1.0;
        assert_ne!(m.forward(&input).unwrap(), m.forward(&live).unwrap());
    }

    #[test]
    fn aux_loss_reaches_shared_encoder() {
        let cfg = small_cfg();
        let m = EgoCogNav::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 11);
        let mut g = Graph::with_params(m.params());
        let v = m.forward_graph(&mut g, &input).unwrap();
        let env = g.bce_with_logits(v.env_logits.unwrap(), Tensor::matrix(1, 5, vec![1., 0., 1., 0., 0.]).unwrap()).unwrap();
        let loss = g.sum(env).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(m.video_in.w).norm_sq() > 0.0);
        assert!(grads.get(m.motion_in.w).norm_sq() > 0.0);
    }

    #[test]
    fn small_model_gradient_check() {
        let cfg = small_cfg();
        let mut m = EgoCogNav::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 12);
        let gt = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.01).collect()).unwrap();
        let m2 = m.clone();
        let f = move |g: &mut Graph<'_>| {
            let v = m2.forward_graph(g, &input)?;
            let t = g.constant(gt.clone())?;
            let d = g.sub(v.traj, t)?;
            let d = g.square(d)?;
            let a = g.sum(d)?;
            let h = g.square(v.head)?;
            let b = g.sum(h)?;
            let s = g.add(a, b)?;
            let s = g.add(s, v.u_hat.unwrap())?;
            let e = g.sum(v.env_logits.unwrap())?;
            g.add(s, e)
        };
        let (err, name) = max_relative_error_all(m.params_mut(), 1e-5, 6, 1, f).unwrap();
        assert!(err < 1e-3, "{name}: {err}");
    }
}
