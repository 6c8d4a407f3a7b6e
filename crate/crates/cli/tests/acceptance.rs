//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use egocog_cli::commands::prepare_data;
use egocog_cli::{cmd_eval, cmd_synth, cmd_train, resolve, Overrides, RunConfig};
use egocog_core::autodiff::{max_relative_error_all, scaled_dot_attention, Graph, ParamId, ParamStore, Tensor, Var};
use egocog_core::baselines::{const_vel, lin_ext};
use egocog_core::episodes::{
    extract_windows, read_episode_dir, resample_10hz, savgol_smooth, synth_generate, write_episode_dir,
    BehaviorLabel, EnvLabel, Episode, FeatureGrid, LabelSet, ResampleMode, SynthConfig, WindowSpec,
};
use egocog_core::geometry::{matrix_to_rot6d, rot6d_to_matrix, BodyDelta, GazePoint, Pose2, Rot6D, RotMatrix};
use egocog_core::metrics::{
    ade, delta_u, effect_size, fde, head_l1, high_u_precision, mae, spearman, UncertaintyRecord,
};
use egocog_core::model::{EgoCogNav, ModelConfig};
use egocog_core::training::{example_loss, total_loss, Example, LossParts, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn op_check<F>(seed: u64, shapes: &[(usize, usize)], positive: bool, op: F) -> Result<f64, String>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> egocog_core::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, (r, c))| {
            let data = (0..r * c)
                .map(|_| {
                    let m: f64 = rng.gen_range(0.2..1.0);
                    if positive || rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            store.insert(format!("x{i}"), Tensor::matrix(*r, *c, data).unwrap(), false)
        })
        .collect();
    let f = |g: &mut Graph<'_>| {
        let vars = ids.iter().map(|id| g.param(*id)).collect::<egocog_core::Result<Vec<_>>>()?;
        let out = op(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let w = Tensor::new(shape, (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect())?;
        let w = g.constant(w)?;
        let p = g.mul(out, w)?;
        g.sum(p)
    };
    max_relative_error_all(&mut store, 1e-5, 64, seed, f).map(|(e, _)| e).map_err(err)
}

fn per_op_errors() -> Result<Vec<(&'static str, f64)>, String> {
    let (r, c) = (4, 5);
    let gt9: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..r).flat_map(|_| rot6d_to_matrix(&random_rot6d(&mut rng)).unwrap().to_flat()).collect()
    };
    let targets: Vec<f64> = (0..r * c).map(|i| (i % 2) as f64).collect();
    let gt9 = Tensor::matrix(r, 9, gt9).unwrap();
    let targets = Tensor::matrix(r, c, targets).unwrap();
    let rc = [(r, c)];
    let rc2 = [(r, c), (r, c)];
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $shapes:expr, $pos:expr, |$g:ident, $v:ident| $body:expr) => {
            out.push(($name, op_check(out.len() as u64 + 1, $shapes, $pos, |$g, $v| $body)?));
        };
    }
    check!("matmul", &[(r, c), (c, 3)], false, |g, v| g.matmul(v[0], v[1]));
    check!("transpose", &rc, false, |g, v| g.transpose(v[0]));
    check!("add", &rc2, false, |g, v| g.add(v[0], v[1]));
    check!("sub", &rc2, false, |g, v| g.sub(v[0], v[1]));
    check!("mul", &rc2, false, |g, v| g.mul(v[0], v[1]));
    check!("add_row", &[(r, c), (1, c)], false, |g, v| g.add_row(v[0], v[1]));
    check!("mul_row", &[(r, c), (1, c)], false, |g, v| g.mul_row(v[0], v[1]));
    check!("scale", &rc, false, |g, v| g.scale(v[0], -1.3));
    check!("mul_scalar", &[(r, c), (1, 1)], false, |g, v| g.mul_scalar(v[0], v[1]));
    check!("blend", &[(r, c), (r, c), (1, 1)], false, |g, v| g.blend(v[0], v[1], v[2]));
    check!("concat_cols", &[(r, c), (r, 2)], false, |g, v| g.concat_cols(&[v[0], v[1]]));
    check!("concat_rows", &[(r, c), (2, c)], false, |g, v| g.concat_rows(&[v[0], v[1]]));
    check!("slice_cols", &rc, false, |g, v| g.slice_cols(v[0], 1, 4));
    check!("slice_rows", &rc, false, |g, v| g.slice_rows(v[0], 1, 3));
    check!("reshape", &rc, false, |g, v| g.reshape(v[0], &[2, r * c / 2]));
    check!("mean_rows", &rc, false, |g, v| g.mean_rows(v[0]));
    check!("sum", &rc, false, |g, v| g.sum(v[0]));
    check!("softmax", &rc, false, |g, v| g.softmax(v[0]));
    check!("layer_norm", &rc, false, |g, v| g.layer_norm(v[0], 1e-5));
    check!("gelu", &rc, false, |g, v| g.gelu(v[0]));
    check!("relu", &rc, false, |g, v| g.relu(v[0]));
    check!("sigmoid", &rc, false, |g, v| g.sigmoid(v[0]));
    check!("abs", &rc, false, |g, v| g.abs(v[0]));
    check!("square", &rc, false, |g, v| g.square(v[0]));
    check!("col_std", &rc, false, |g, v| g.col_std(v[0]));
    check!("bce_with_logits", &rc, false, |g, v| g.bce_with_logits(v[0], targets.clone()));
    check!("rot6d_to_matrix", &[(r, 6)], true, |g, v| g.rot6d_to_matrix(v[0]));
    check!("rel_rot_residual", &[(r, 6)], true, |g, v| {
        let m = g.rot6d_to_matrix(v[0])?;
        g.rel_rot_residual(m, gt9.clone())
    });
    check!("attention", &[(r, c), (6, c), (6, 3)], false, |g, v| {
        Ok(scaled_dot_attention(g, v[0], v[1], v[2], None)?.output)
    });
    Ok(out)
}

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let ops = per_op_errors()?;
    let (worst_op, op_err) = ops.iter().fold(("", 0.0f64), |a, (n, e)| if *e > a.1 { (n, *e) } else { a });
    let ep = synth_generate(&SynthConfig::default(), 11).map_err(err)?;
    let windows = extract_windows(&ep, WindowSpec::default(), 50).map_err(err)?;
    let mut model = EgoCogNav::new(ModelConfig::default()).map_err(err)?;
    let ex = Example::from_window(&model, &windows[windows.len() / 2]).map_err(err)?;
    let w = LossWeights::default();
    let frozen = model.clone();
    let f = move |g: &mut Graph<'_>| example_loss(g, &frozen, &ex, &w);
    let (full_err, name) = max_relative_error_all(egocog_core::model::Forecaster::params_mut(&mut model), 1e-5, 4, 7, f)
        .map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        full_err < 1e-3 && op_err < 1e-4 && secs < 120.0,
        format!(
            "full model max rel err {full_err:.2e} ({name}); worst per-op {op_err:.2e} ({worst_op}, {} ops); {secs:.1} s",
            ops.len()
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn random_rotation(rng: &mut ChaCha8Rng) -> RotMatrix {
    let pi = std::f64::consts::PI;
    RotMatrix::rz(rng.gen_range(-pi..pi))
        .mul(&RotMatrix::ry(rng.gen_range(-pi..pi)))
        .mul(&RotMatrix::rx(rng.gen_range(-pi..pi)))
}

fn random_rot6d(rng: &mut ChaCha8Rng) -> Rot6D {
    matrix_to_rot6d(&random_rotation(rng)).unwrap()
}

fn frobenius(a: &RotMatrix, b: &RotMatrix) -> f64 {
    a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_trip = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..10_000 {
        let m = random_rotation(&mut rng);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m).map_err(err)?).map_err(err)?;
        worst_trip = worst_trip.max(frobenius(&m, &back));

        let raw: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let base = match rot6d_to_matrix(&Rot6D(raw)) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let s = rng.gen_range(0.1..10.0);
        let mut scaled = raw;
        scaled.iter_mut().for_each(|v| *v *= s);
        worst_scale = worst_scale.max(frobenius(&base, &rot6d_to_matrix(&Rot6D(scaled)).map_err(err)?));
    }
    Ok((
        worst_trip < 1e-6 && worst_scale <= 1e-12,
        format!("round-trip max Frobenius {worst_trip:.2e}; scale invariance max {worst_scale:.2e}"),
    ))
}

// ---------------------------------------------------------------- 3

fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

fn naive_gram_schmidt(r: &Rot6D) -> [[f64; 3]; 3] {
    let a = [r.0[0], r.0[1], r.0[2]];
    let b = [r.0[3], r.0[4], r.0[5]];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let e1 = [a[0] / na, a[1] / na, a[2] / na];
    let d = e1[0] * b[0] + e1[1] * b[1] + e1[2] * b[2];
    let p = [b[0] - d * e1[0], b[1] - d * e1[1], b[2] - d * e1[2]];
    let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let e2 = [p[0] / np, p[1] / np, p[2] / np];
    let e3 = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    // Columns e1, e2, e3.
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i] = [e1[i], e2[i], e3[i]];
    }
    m
}

fn naive_head_l1(pred: &[Rot6D], gt: &[Rot6D]) -> f64 {
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (naive_gram_schmidt(p), naive_gram_schmidt(g));
        for i in 0..3 {
            for j in 0..3 {
                let rel: f64 = (0..3).map(|k| p[k][i] * g[k][j]).sum();
                total += (rel - if i == j { 1.0 } else { 0.0 }).abs();
            }
        }
    }
    total / pred.len() as f64
}

fn naive_cohen(a: &[f64], b: &[f64]) -> f64 {
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>())
    };
    let (ma, sa) = var(a);
    let (mb, sb) = var(b);
    (ma - mb) / ((sa + sb) / (a.len() + b.len() - 2) as f64).sqrt()
}

fn random_behavior(rng: &mut ChaCha8Rng) -> LabelSet {
    if rng.gen_bool(0.55) {
        LabelSet::EMPTY
    } else {
        LabelSet::of(&[BehaviorLabel::ALL[rng.gen_range(0..BehaviorLabel::ALL.len())]])
    }
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |k: &'static str, a: f64, b: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max((a - b).abs());
    };
    for _ in 0..100 {
        let n = rng.gen_range(2..15);
        let p: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let q: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let d: Vec<f64> = p.iter().zip(&q).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect();
        bump("ADE", ade(&p, &q).map_err(err)?, d.iter().sum::<f64>() / n as f64);
        bump("FDE", fde(&p, &q).map_err(err)?, d[n - 1]);

        let hp: Vec<Rot6D> = (0..n).map(|_| random_rot6d(&mut rng)).collect();
        let hg: Vec<Rot6D> = (0..n).map(|_| random_rot6d(&mut rng)).collect();
        bump("head L1", head_l1(&hp, &hg).map_err(err)?, naive_head_l1(&hp, &hg));

        let m = rng.gen_range(5..40);
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let h: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        bump("MAE", mae(&u, &h).map_err(err)?, u.iter().zip(&h).map(|(a, b)| (a - b).abs()).sum::<f64>() / m as f64);

        // Integer-valued data forces ties.
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
        if let Ok(rho) = spearman(&a, &b) {
            bump("Spearman", rho, naive_pearson(&naive_ranks(&a), &naive_ranks(&b)));
        }

        let beh: Vec<LabelSet> = (0..m).map(|_| random_behavior(&mut rng)).collect();
        let k = (0.2 * m as f64).ceil() as usize;
        let mut chosen = vec![false; m];
        for _ in 0..k {
            let best = (0..m).filter(|i| !chosen[*i]).fold(None, |acc: Option<usize>, i| match acc {
                Some(j) if u[j] >= u[i] => Some(j),
                _ => Some(i),
            });
            chosen[best.unwrap()] = true;
        }
        let difficulty = LabelSet::of(&BehaviorLabel::DIFFICULTY);
        let hits = (0..m).filter(|i| chosen[*i] && beh[*i].intersects(difficulty)).count();
        bump("precision", high_u_precision(&u, &beh).map_err(err)?, hits as f64 / k as f64);

        // Two episodes of consecutive steps, presented in shuffled order.
        let mut recs = Vec::new();
        for (e, len) in [("a", m / 2 + 1), ("b", m - m / 2 + 1)] {
            for s in 0..len {
                recs.push(UncertaintyRecord {
                    episode_id: e.into(),
                    step: 100 + s,
                    u_hat: rng.gen_range(0.0..1.0),
                    u_human: 0.0,
                    behavior: random_behavior(&mut rng),
                });
            }
        }
        let mut onset = Vec::new();
        let mut neutral = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            if r.behavior.is_empty() {
                neutral.push(r.u_hat);
            } else if i == 0 || recs[i - 1].episode_id != r.episode_id || recs[i - 1].behavior.is_empty() {
                onset.push(r.u_hat);
            }
        }
        let mut shuffled = recs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        if !onset.is_empty() && !neutral.is_empty() {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            bump("dU", delta_u(&shuffled).map_err(err)?, mean(&onset) - mean(&neutral));
        }

        let ga: Vec<f64> = (0..rng.gen_range(2..20)).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let gb: Vec<f64> = (0..rng.gen_range(2..20)).map(|_| rng.gen_range(-2.0..2.0)).collect();
        bump("Cohen d", effect_size(&ga, &gb).map_err(err)?, naive_cohen(&ga, &gb));
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((max <= 1e-9 && worst.len() == 8, format!("max abs diff: {detail}")))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let w = LossWeights::default();
    let d10 = w.discounts(10)[9];
    let unit = LossParts {
        traj: 1.0,
        head: 1.0,
        u: 1.0,
        aux: 1.0,
    };
    let total = total_loss(&unit, &w).map_err(err)?;
    Ok((
        (d10 - 0.817).abs() <= 1e-3 && total == 3.3,
        format!("step-10 weight {d10:.6}; unit-part total {total:?}"),
    ))
}

// ---------------------------------------------------------------- 5

fn episode_from_motion(motion: Vec<BodyDelta>, head: Vec<Rot6D>) -> Episode {
    let n = motion.len();
    Episode {
        id: "probe".into(),
        origin: Pose2::new(1.5, -2.0, 0.4),
        times: (0..n).map(|k| k as f64 / 10.0).collect(),
        motion,
        head,
        gaze: vec![GazePoint { u: 0.5, v: 0.5 }; n],
        goal_xy: vec![[50.0, 50.0]; n],
        uncertainty: vec![0.0; n],
        env: vec![LabelSet::EMPTY; n],
        behavior: vec![LabelSet::EMPTY; n],
        features: Arc::new(FeatureGrid::zeros(n, 2, 4)),
    }
}

/// World positions by explicit trigonometric integration.
fn oracle_positions(start: Pose2, deltas: &[BodyDelta]) -> Vec<[f64; 2]> {
    let (mut x, mut y, mut psi) = (start.x, start.y, start.psi);
    deltas
        .iter()
        .map(|d| {
            x += d.dx * psi.cos() - d.dy * psi.sin();
            y += d.dx * psi.sin() + d.dy * psi.cos();
            psi += d.dpsi;
            [x, y]
        })
        .collect()
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = WindowSpec::default();
    let (mut cv_worst, mut le_worst, mut cv_head) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = 60;
        // Constant body-frame velocity and constant head angular velocity.
        let d = BodyDelta::new(rng.gen_range(0.05..0.2), rng.gen_range(-0.02..0.02), rng.gen_range(-0.05..0.05));
        let step = RotMatrix::rz(rng.gen_range(-0.05..0.05)).mul(&RotMatrix::ry(rng.gen_range(-0.03..0.03)));
        let mut r = random_rotation(&mut rng);
        let head: Vec<Rot6D> = (0..n)
            .map(|_| {
                r = r.mul(&step);
                matrix_to_rot6d(&r).unwrap()
            })
            .collect();
        let ep = episode_from_motion(vec![d; n], head);
        let poses = ep.poses();
        for w in extract_windows(&ep, spec, 7).map_err(err)? {
            let f = const_vel(&w, spec.future).map_err(err)?;
            let start = poses[w.now_index()];
            let pred = oracle_positions(start, &f.traj);
            let gt = oracle_positions(start, &w.future_motion);
            cv_worst = cv_worst.max(ade(&pred, &gt).map_err(err)?).max(fde(&pred, &gt).map_err(err)?);
            cv_head = cv_head.max(head_l1(&f.head, &w.future_head).map_err(err)?);
        }

        // Deltas linear in time, constant head.
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.003..0.003));
        let motion: Vec<BodyDelta> = (0..n)
            .map(|k| {
                let t = k as f64;
                BodyDelta::new(a[0] + b[0] * t, a[1] + b[1] * t, a[2] + b[2] * t)
            })
            .collect();
        let h = random_rot6d(&mut rng);
        let ep = episode_from_motion(motion, vec![h; n]);
        let poses = ep.poses();
        for w in extract_windows(&ep, spec, 7).map_err(err)? {
            let f = lin_ext(&w, spec.future).map_err(err)?;
            let t1 = w.start + spec.past;
            let oracle: Vec<BodyDelta> = (0..spec.future)
                .map(|k| {
                    let t = (t1 + k) as f64;
                    BodyDelta::new(a[0] + b[0] * t, a[1] + b[1] * t, a[2] + b[2] * t)
                })
                .collect();
            let start = poses[w.now_index()];
            let pred = oracle_positions(start, &f.traj);
            let gt = oracle_positions(start, &oracle);
            let delta_err = f
                .traj
                .iter()
                .zip(&oracle)
                .flat_map(|(p, o)| [(p.dx - o.dx).abs(), (p.dy - o.dy).abs(), (p.dpsi - o.dpsi).abs()])
                .fold(0.0, f64::max);
            le_worst = le_worst.max(ade(&pred, &gt).map_err(err)?).max(delta_err);
            le_worst = le_worst.max(head_l1(&f.head, &w.future_head).map_err(err)?);
        }
    }
    Ok((
        cv_worst <= 1e-9 && le_worst <= 1e-9,
        format!("Const_Vel max ADE/FDE {cv_worst:.1e} (head L1 {cv_head:.1e}); Lin_Ext max error {le_worst:.1e}"),
    ))
}

// ---------------------------------------------------------------- 6-8

struct Desk {
    windows: usize,
    junction_windows: usize,
    rho: f64,
    mae: f64,
    ade: BTreeMap<String, f64>,
    l1: BTreeMap<String, f64>,
    epochs: usize,
    minutes: f64,
    effect: Result<(f64, usize, usize), String>,
}

fn desk_run(root: &Path) -> Result<Desk, String> {
    let t0 = Instant::now();
    let data = root.join("data");
    let run = root.join("run");
    let base = |out: &Path| -> Result<RunConfig, String> {
        resolve(&Overrides {
            config: Some(PathBuf::from(CONFIGS).join("desk.json")),
            dataset: Some(data.clone()),
            out: Some(out.into()),
            ..Overrides::default()
        })
        .map_err(err)
    };
    let cfg = base(&data)?;
    cmd_synth(&cfg).map_err(err)?;
    let prepared = prepare_data(&cfg).map_err(err)?;
    let windows = prepared.train.len() + prepared.val.len() + prepared.test.len();
    let junction_windows = prepared.test.iter().filter(|w| w.env_now.has(EnvLabel::Jct)).count();
    let cfg = base(&run)?;
    cmd_train(&cfg, None).map_err(err)?;
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let mut ecfg = base(&root.join("eval"))?;
    ecfg.methods = vec!["egocognav".into(), "const_vel".into()];
    let report = cmd_eval(&ecfg, Some(&run)).map_err(err)?;
    let row2 = report.table2.iter().find(|r| r.method == "egocognav").ok_or("no egocognav row")?;

    // Every held-out step for the behaviour coupling check.
    let mut dense = base(&root.join("eval_dense"))?;
    dense.methods = vec!["egocognav".into()];
    dense.data.eval_stride = 1;
    let dense = cmd_eval(&dense, Some(&run)).map_err(err)?;
    let recs = &dense.records["egocognav"];
    let coupled = LabelSet::of(&[BehaviorLabel::Wrong, BehaviorLabel::Back]);
    let a: Vec<f64> = recs.iter().filter(|r| r.behavior.intersects(coupled)).map(|r| r.u_hat).collect();
    let b: Vec<f64> = recs.iter().filter(|r| r.behavior.is_empty()).map(|r| r.u_hat).collect();
    let effect = effect_size(&a, &b).map(|d| (d, a.len(), b.len())).map_err(err);

    Ok(Desk {
        windows,
        junction_windows,
        rho: row2.rho.unwrap_or(f64::NAN),
        mae: row2.mae.unwrap_or(f64::NAN),
        ade: report.table1.iter().map(|r| (r.method.clone(), r.ade)).collect(),
        l1: report.table1.iter().map(|r| (r.method.clone(), r.l1)).collect(),
        epochs: cfg.train.epochs,
        minutes,
        effect,
    })
}

fn criterion_6(d: &Desk) -> Check {
    Ok((
        d.windows >= 2000 && d.epochs <= 50 && d.minutes < 30.0 && d.rho >= 0.5 && d.mae <= 0.25,
        format!(
            "{} windows, {} epochs, {:.1} min; held-out rho {:.3}, MAE {:.3}",
            d.windows, d.epochs, d.minutes, d.rho, d.mae
        ),
    ))
}

fn criterion_7(d: &Desk) -> Check {
    let (ma, ca) = (d.ade["egocognav"], d.ade["const_vel"]);
    let (ml, cl) = (d.l1["egocognav"], d.l1["const_vel"]);
    Ok((
        d.junction_windows > 0 && ma < ca && ml < cl,
        format!(
            "ADE {ma:.4} vs Const_Vel {ca:.4}; head L1 {ml:.4} vs {cl:.4}; {} held-out junction windows",
            d.junction_windows
        ),
    ))
}

fn criterion_8(d: &Desk) -> Check {
    let (e, na, nb) = d.effect.clone()?;
    Ok((e >= 0.3, format!("Cohen's d {e:.3} (WRONG/BACK n={na}, neutral n={nb})")))
}

// ---------------------------------------------------------------- 9

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn episodes_identical(a: &Episode, b: &Episode) -> bool {
    let flat_m = |e: &Episode| e.motion.iter().flat_map(|d| d.to_array()).collect::<Vec<_>>();
    let flat_h = |e: &Episode| e.head.iter().flat_map(|h| h.0).collect::<Vec<_>>();
    let flat_g = |e: &Episode| e.gaze.iter().flat_map(|g| [g.u, g.v]).collect::<Vec<_>>();
    let flat_goal = |e: &Episode| e.goal_xy.iter().flatten().copied().collect::<Vec<_>>();
    let origin = |e: &Episode| [e.origin.x, e.origin.y, e.origin.psi];
    a.id == b.id
        && same_bits(&origin(a), &origin(b))
        && same_bits(&a.times, &b.times)
        && same_bits(&flat_m(a), &flat_m(b))
        && same_bits(&flat_h(a), &flat_h(b))
        && same_bits(&flat_g(a), &flat_g(b))
        && same_bits(&flat_goal(a), &flat_goal(b))
        && same_bits(&a.uncertainty, &b.uncertainty)
        && a.env == b.env
        && a.behavior == b.behavior
        && a.features.grid() == b.features.grid()
        && a.features.channels() == b.features.channels()
        && a.features.data().iter().zip(b.features.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.features.data().len() == b.features.data().len()
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sg_worst = 0.0f64;
    for _ in 0..100 {
        let (window, order) = [(5, 2), (7, 3), (9, 3), (11, 3), (7, 2), (15, 3)][rng.gen_range(0..6)];
        let degree = rng.gen_range(0..=order);
        let c: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let len = rng.gen_range(window..60);
        let x: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 * 0.1 - 1.0;
                c.iter().rev().fold(0.0, |acc, k| acc * t + k)
            })
            .collect();
        let y = savgol_smooth(&x, window, order).map_err(err)?;
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        sg_worst = sg_worst.max(x.iter().zip(&y).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max));
    }

    let mut rs_ok = true;
    let mut rs_points = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..200);
        let mut t = rng.gen_range(0.0..3.0);
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            times.push(t);
            t += rng.gen_range(0.01..0.35);
        }
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = resample_10hz(&times, &values, ResampleMode::Nearest).map_err(err)?;
        let (t0, t1) = (times[0], times[n - 1]);
        let grid: Vec<f64> = ((t0 * 10.0).floor() as i64 - 1..=(t1 * 10.0).ceil() as i64 + 1)
            .map(|k| k as f64 / 10.0)
            .filter(|g| *g >= t0 && *g <= t1)
            .collect();
        let oracle: Vec<f64> = grid
            .iter()
            .map(|g| {
                let mut best = 0;
                for i in 1..n {
                    if (times[i] - g).abs() < (times[best] - g).abs() {
                        best = i;
                    }
                }
                values[best]
            })
            .collect();
        rs_points += grid.len();
        rs_ok &= same_bits(&r.times, &grid) && same_bits(&r.values, &oracle);
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let mut rt_ok = true;
    for seed in 0..3 {
        let ep = synth_generate(&SynthConfig::default(), 900 + seed).map_err(err)?;
        let (a, b) = (dir.path().join(format!("a{seed}")), dir.path().join(format!("b{seed}")));
        write_episode_dir(&a, &ep, Some(seed)).map_err(err)?;
        let (back, _) = read_episode_dir(&a).map_err(err)?;
        write_episode_dir(&b, &back, Some(seed)).map_err(err)?;
        rt_ok &= episodes_identical(&ep, &back) && tree(&a)? == tree(&b)?;
    }
    Ok((
        sg_worst <= 1e-9 && rs_ok && rt_ok,
        format!(
            "SG max rel residual {sg_worst:.1e}; resampler {} on {rs_points} grid points; episode round trip {}",
            if rs_ok { "matches oracle" } else { "MISMATCH" },
            if rt_ok { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}

// ---------------------------------------------------------------- 10

/// Relative path to bytes for every file under `root`.
fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let cfg = |out: &str| {
        resolve(&Overrides {
            config: Some(PathBuf::from(CONFIGS).join("smoke.json")),
            dataset: Some(root.join("data")),
            out: Some(root.join(out)),
            methods: Some(vec!["egocognav".into(), "m_transformer".into()]),
            ..Overrides::default()
        })
        .map_err(err)
    };
    cmd_synth(&cfg("data")?).map_err(err)?;
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let run = root.join("run");
        if run.exists() {
            fs::remove_dir_all(&run).map_err(err)?;
        }
        cmd_train(&cfg("run")?, None).map_err(err)?;
        let mut ecfg = cfg("run/eval")?;
        ecfg.methods.clear();
        cmd_eval(&ecfg, Some(&run)).map_err(err)?;
        snapshots.push(tree(&run)?);
    }
    let files = snapshots[0].len();
    let differing: Vec<String> = snapshots[0]
        .iter()
        .filter(|(k, v)| snapshots[1].get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let ok = differing.is_empty() && snapshots[0].len() == snapshots[1].len() && files > 10;
    Ok((ok, format!("{files} output files compared; differing: {differing:?}")))
}

// ----------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let desk_dir = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(usize, Check)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];
    match desk_run(desk_dir.path()) {
        Ok(d) => {
            results.push((6, criterion_6(&d)));
            results.push((7, criterion_7(&d)));
            results.push((8, criterion_8(&d)));
        }
        Err(e) => {
            for n in 6..=8 {
                results.push((n, Err(format!("desk-scale run failed: {e}"))));
            }
        }
    }
    results.push((9, criterion_9()));
    results.push((10, criterion_10()));

    let mut failed = 0;
    for (n, r) in &results {
        let (ok, detail) = match r {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!("criterion {n:>2}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} passed in {:.1} s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
