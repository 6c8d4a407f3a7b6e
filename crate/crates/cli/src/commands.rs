use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use egocog_core::autodiff::load_checkpoint;
use egocog_core::baselines::{const_vel, lin_ext, UncertaintyBaselines};
use egocog_core::episodes::{synth_generate, write_episode_dir, Episode, WindowSample};
use egocog_core::geometry::{integrate_deltas, Pose2};
use egocog_core::metrics::{
    ade, behavior_breakdown, delta_u, effect_size, fde, head_l1, high_u_precision, mae, onset_flags, spearman,
    top_fraction, write_table1, write_table2, write_table3, Table1Row, Table2Row, Table3Row, UncertaintyRecord,
};
use egocog_core::model::{
    EarlyFusionConfig, EarlyFusionTransformer, EgoCogNav, Forecaster, Modalities, ModelConfig, ModelInput, Stream,
    MotionForecast,
};
use egocog_core::training::{self, checkpoint_model_config, prepare_examples, TrainConfig, TrainReport, BEST_DIR};
use egocog_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ALL_VARIANTS, TRAINABLE};
use crate::dataset::{self, DatasetEntry, DatasetManifest, Splits};
use crate::error::{config_error, exit, CliError, CliResult, Stage};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const BASELINES_FILE: &str = "baselines.json";
pub const PLOT_DIR: &str = "plotdata";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub variants: Option<Vec<String>>,
}

/// Loads and validates the effective configuration. The run seed also
/// seeds model initialisation and batch order.
pub fn resolve(o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.out.is_some() {
        cfg.out = o.out.clone();
    }
    if o.dataset.is_some() {
        cfg.dataset = o.dataset.clone();
    }
    if let Some(m) = &o.methods {
        cfg.methods = m.clone();
    }
    if let Some(v) = &o.variants {
        cfg.variants = v.clone();
    }
    cfg.model.init_seed = cfg.seed;
    cfg.m_transformer.init_seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e)).stage(exit::OTHER, "creating output directory")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from).stage(exit::OTHER, "encoding json")?;
    fs::write(path, text).map_err(|e| io_err(path, e)).stage(exit::OTHER, "writing json")
}

/// Writes `cfg.episodes` synthetic episodes with seeds `seed, seed + 1, ...`.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let out = cfg.require_out()?;
    if cfg.episodes == 0 {
        return Err(config_error("episodes must be positive"));
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let seed = cfg.seed + i as u64;
        let ep = synth_generate(&cfg.synth, seed).stage(exit::CONFIG, "synthesizing episode")?;
        let dir = format!("ep_{i:04}");
        write_episode_dir(&out.join(&dir), &ep, Some(seed)).stage(exit::OTHER, "writing episode")?;
        log::info!("episode {dir}: seed {seed}, {} steps", ep.len());
        entries.push(DatasetEntry {
            dir,
            id: ep.id.clone(),
            seed: Some(seed),
            length: ep.len(),
        });
    }
    let manifest = DatasetManifest {
        total_steps: entries.iter().map(|e| e.length).sum(),
        episodes: entries,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Split episodes plus their windows.
pub struct Prepared {
    pub splits: Splits,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn prepare_data(cfg: &RunConfig) -> CliResult<Prepared> {
    let root = cfg.require_dataset()?;
    let episodes = dataset::load_episodes(root)?;
    let splits = dataset::split_episodes(episodes, &cfg.data)?;
    let spec = cfg.model.window();
    let train = dataset::subsample(dataset::windows(&splits.train, spec, cfg.data.stride)?, cfg.data.max_train_windows);
    let val = dataset::windows(&splits.val, spec, cfg.data.eval_stride)?;
    let test = dataset::windows(&splits.test, spec, cfg.data.eval_stride)?;
    if train.is_empty() || test.is_empty() {
        return Err(crate::error::data_error(
            "windowing dataset",
            Error::TooFew {
                needed: 1,
                got: train.len().min(test.len()),
            },
        ));
    }
    log::info!("windows: train {}, val {}, test {}", train.len(), val.len(), test.len());
    Ok(Prepared {
        splits,
        train,
        val,
        test,
    })
}

fn trainable_methods(cfg: &RunConfig) -> Vec<String> {
    let chosen: Vec<String> = cfg.methods.iter().filter(|m| TRAINABLE.contains(&m.as_str())).cloned().collect();
    if chosen.is_empty() {
        vec!["egocognav".into()]
    } else {
        chosen
    }
}

fn build_model(method: &str, cfg: &RunConfig) -> CliResult<Box<dyn Forecaster>> {
    Ok(match method {
        "egocognav" => Box::new(EgoCogNav::new(cfg.model.clone()).stage(exit::CONFIG, "building model")?),
        "m_transformer" => Box::new(EarlyFusionTransformer::new(cfg.m_transformer.clone()).stage(exit::CONFIG, "building model")?),
        other => return Err(config_error(format!("`{other}` is not trainable"))),
    })
}

fn train_one(
    model: &mut dyn Forecaster,
    data: &Prepared,
    train_cfg: &TrainConfig,
    dir: &Path,
    resume: bool,
) -> CliResult<TrainReport> {
    let tr = prepare_examples(model, &data.train).stage(exit::DATA, "preparing training windows")?;
    let va = prepare_examples(model, &data.val).stage(exit::DATA, "preparing validation windows")?;
    if resume {
        training::resume(model, &tr, &va, train_cfg, dir).stage(exit::CHECKPOINT, "resuming training")
    } else {
        training::train(model, &tr, &va, train_cfg, Some(dir)).stage(exit::DATA, "training")
    }
}

/// Trains the selected networks (default: the multimodal forecaster) and fits
/// the uncertainty baselines. With `checkpoint`, continues the run stored
/// there instead of starting fresh.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<BTreeMap<String, TrainReport>> {
    let run_dir = match checkpoint {
        Some(c) => c.to_path_buf(),
        None => cfg.require_out()?.to_path_buf(),
    };
    let data = prepare_data(cfg)?;
    create_dir(&run_dir)?;
    write_json(&run_dir.join(RUN_CONFIG_FILE), cfg)?;
    let mut reports = BTreeMap::new();
    for method in trainable_methods(cfg) {
        let mut model = build_model(&method, cfg)?;
        let report = train_one(model.as_mut(), &data, &cfg.train, &run_dir.join(&method), checkpoint.is_some())?;
        reports.insert(method, report);
    }
    let fitted = UncertaintyBaselines::fit(&data.train).stage(exit::DATA, "fitting uncertainty baselines")?;
    fitted.save(&run_dir.join(BASELINES_FILE)).stage(exit::OTHER, "saving baselines")?;
    Ok(reports)
}

#[derive(Debug, Deserialize)]
struct StoredModel {
    kind: String,
    model: serde_json::Value,
}

/// Rebuilds a trained network from a checkpoint directory.
pub fn load_trained(dir: &Path) -> CliResult<Box<dyn Forecaster>> {
    let stored: StoredModel = serde_json::from_value(checkpoint_model_config(dir).stage(exit::CHECKPOINT, "reading checkpoint")?)
        .map_err(Error::from)
        .stage(exit::CHECKPOINT, "reading checkpoint model description")?;
    let mut model: Box<dyn Forecaster> = match stored.kind.as_str() {
        "egocognav" => {
            let c: ModelConfig = serde_json::from_value(stored.model).map_err(Error::from).stage(exit::CHECKPOINT, "model config")?;
            Box::new(EgoCogNav::new(c).stage(exit::CHECKPOINT, "model config")?)
        }
        "m_transformer" => {
            let c: EarlyFusionConfig =
                serde_json::from_value(stored.model).map_err(Error::from).stage(exit::CHECKPOINT, "model config")?;
            Box::new(EarlyFusionTransformer::new(c).stage(exit::CHECKPOINT, "model config")?)
        }
        other => {
            return Err(CliError {
                code: exit::CHECKPOINT,
                context: "reading checkpoint".into(),
                source: Error::BadConfig(format!("unknown model kind `{other}`")),
            })
        }
    };
    load_checkpoint(dir, model.params_mut()).stage(exit::CHECKPOINT, "loading checkpoint")?;
    Ok(model)
}

/// Per-window motion predictions of one method, in world coordinates.
struct MotionRun {
    method: String,
    comparable: bool,
    pred_xy: Vec<Vec<[f64; 2]>>,
    forecasts: Vec<MotionForecast>,
}

fn poses_by_episode(episodes: &[Episode]) -> BTreeMap<String, Vec<Pose2>> {
    episodes.iter().map(|e| (e.id.clone(), e.poses())).collect()
}

fn world_xy(start: Pose2, traj: &[egocog_core::geometry::BodyDelta]) -> Vec<[f64; 2]> {
    integrate_deltas(start, traj).iter().map(|p| [p.x, p.y]).collect()
}

fn start_pose(poses: &BTreeMap<String, Vec<Pose2>>, w: &WindowSample) -> CliResult<Pose2> {
    poses
        .get(&w.episode_id)
        .and_then(|p| p.get(w.now_index()))
        .copied()
        .ok_or_else(|| crate::error::data_error("locating window", Error::EmptyGroup(w.episode_id.clone())))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Report produced by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub table3: Vec<Table3Row>,
    /// Per-method uncertainty records on the test windows.
    pub records: BTreeMap<String, Vec<UncertaintyRecord>>,
}

fn uncertainty_table_row(method: &str, records: &[UncertaintyRecord]) -> Table2Row {
    let u_hat: Vec<f64> = records.iter().map(|r| r.u_hat).collect();
    let u_human: Vec<f64> = records.iter().map(|r| r.u_human).collect();
    let behavior: Vec<_> = records.iter().map(|r| r.behavior).collect();
    let flags = onset_flags(records);
    let onset: Vec<f64> = records.iter().zip(&flags).filter(|(_, f)| **f).map(|(r, _)| r.u_hat).collect();
    let neutral: Vec<f64> = records.iter().filter(|r| r.behavior.is_empty()).map(|r| r.u_hat).collect();
    Table2Row {
        method: method.into(),
        mae: mae(&u_hat, &u_human).ok(),
        rho: spearman(&u_hat, &u_human).ok(),
        precision: high_u_precision(&u_hat, &behavior).ok(),
        delta_u: delta_u(records).ok(),
        effect: effect_size(&onset, &neutral).ok(),
    }
}

fn predict_all(model: &dyn Forecaster, windows: &[WindowSample]) -> CliResult<Vec<egocog_core::model::Prediction>> {
    windows
        .iter()
        .map(|w| {
            let input = model.prepare(w).stage(exit::DATA, "preparing window")?;
            model.predict(&input).stage(exit::DATA, "predicting")
        })
        .collect()
}

/// Evaluates the selected methods on the test split and writes
/// `table1.csv`, `table2.csv`, `table3.csv` and `plotdata/`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<EvalReport> {
    let out = cfg.require_out()?.to_path_buf();
    let methods: Vec<String> = if cfg.methods.is_empty() {
        let mut m = Vec::new();
        if let Some(c) = checkpoint {
            m.push("egocognav".to_string());
            if c.join("m_transformer").join(BEST_DIR).exists() {
                m.push("m_transformer".into());
            }
        }
        m.extend(["const_vel", "lin_ext", "emu_proxy", "path_u"].map(String::from));
        m
    } else {
        cfg.methods.clone()
    };
    let data = prepare_data(cfg)?;
    let test = &data.test;
    let poses = poses_by_episode(&data.splits.test);
    let starts = test.iter().map(|w| start_pose(&poses, w)).collect::<CliResult<Vec<_>>>()?;
    let gt_xy: Vec<Vec<[f64; 2]>> = test.iter().zip(&starts).map(|(w, s)| world_xy(*s, &w.future_motion)).collect();
    let future = cfg.model.future;

    let mut motion_runs = Vec::new();
    let mut u_series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut fitted: Option<UncertaintyBaselines> = None;
    for method in &methods {
        match method.as_str() {
            "egocognav" | "m_transformer" => {
                let root = checkpoint.ok_or_else(|| config_error(format!("{method} needs --checkpoint")))?;
                let model = load_trained(&root.join(method).join(BEST_DIR))?;
                let preds = predict_all(model.as_ref(), test)?;
                if let Some(u) = preds.iter().map(|p| p.u_hat).collect::<Option<Vec<f64>>>() {
                    u_series.insert(method.clone(), u);
                }
                let forecasts: Vec<MotionForecast> = preds.into_iter().map(|p| p.motion).collect();
                motion_runs.push(MotionRun {
                    method: method.clone(),
                    comparable: true,
                    pred_xy: forecasts.iter().zip(&starts).map(|(f, s)| world_xy(*s, &f.traj)).collect(),
                    forecasts,
                });
            }
            "const_vel" | "lin_ext" => {
                let f = if method == "const_vel" { const_vel } else { lin_ext };
                let forecasts = test.iter().map(|w| f(w, future)).collect::<egocog_core::Result<Vec<_>>>().stage(exit::DATA, method)?;
                motion_runs.push(MotionRun {
                    method: method.clone(),
                    comparable: method == "const_vel",
                    pred_xy: forecasts.iter().zip(&starts).map(|(f, s)| world_xy(*s, &f.traj)).collect(),
                    forecasts,
                });
            }
            "emu_proxy" | "path_u" => {
                if fitted.is_none() {
                    let stored = checkpoint.map(|c| c.join(BASELINES_FILE)).filter(|p| p.exists());
                    fitted = Some(match stored {
                        Some(p) => UncertaintyBaselines::load(&p).stage(exit::CHECKPOINT, "loading baselines")?,
                        None => UncertaintyBaselines::fit(&data.train).stage(exit::DATA, "fitting baselines")?,
                    });
                }
                let b = fitted.as_ref().expect("set above");
                let u = test
                    .iter()
                    .map(|w| if method == "emu_proxy" { b.emu_proxy.predict(w) } else { b.path_u.predict(w) })
                    .collect::<egocog_core::Result<Vec<f64>>>()
                    .stage(exit::DATA, method)?;
                u_series.insert(method.clone(), u);
            }
            other => return Err(config_error(format!("unknown method `{other}`"))),
        }
    }

    let u_human: Vec<f64> = test.iter().map(|w| w.u_target).collect();
    let high = top_fraction(&u_human, 0.2);
    let mut table1 = Vec::new();
    for run in &motion_runs {
        let per = |idx: &mut dyn Iterator<Item = usize>| -> CliResult<[f64; 3]> {
            let mut acc = [Vec::new(), Vec::new(), Vec::new()];
            for i in idx {
                acc[0].push(ade(&run.pred_xy[i], &gt_xy[i]).stage(exit::DATA, "ade")?);
                acc[1].push(fde(&run.pred_xy[i], &gt_xy[i]).stage(exit::DATA, "fde")?);
                acc[2].push(head_l1(&run.forecasts[i].head, &test[i].future_head).stage(exit::DATA, "head L1")?);
            }
            Ok(acc.map(|v| mean(v.into_iter())))
        };
        let all = per(&mut (0..test.len()))?;
        let hi = per(&mut high.iter().copied())?;
        table1.push(Table1Row {
            method: run.method.clone(),
            ade: all[0],
            fde: all[1],
            l1: all[2],
            ade_high: hi[0],
            fde_high: hi[1],
            l1_high: hi[2],
            comparable: run.comparable,
        });
    }

    let mut records = BTreeMap::new();
    let mut table2 = Vec::new();
    for method in methods.iter().filter(|m| u_series.contains_key(*m)) {
        let recs: Vec<UncertaintyRecord> = test
            .iter()
            .zip(&u_series[method])
            .map(|(w, u)| UncertaintyRecord {
                episode_id: w.episode_id.clone(),
                step: w.now_index(),
                u_hat: *u,
                u_human: w.u_target,
                behavior: w.behavior_now,
            })
            .collect();
        table2.push(uncertainty_table_row(method, &recs));
        records.insert(method.clone(), recs);
    }
    let primary = methods.iter().find(|m| records.contains_key(*m));
    let table3: Vec<Table3Row> = primary
        .map(|m| {
            behavior_breakdown(&records[m])
                .rows
                .into_iter()
                .map(|r| Table3Row {
                    behavior: r.behavior,
                    mean_u: r.mean_u,
                    effect: r.effect,
                })
                .collect()
        })
        .unwrap_or_default();

    create_dir(&out)?;
    write_table1(&out.join("table1.csv"), &table1).stage(exit::OTHER, "writing table1")?;
    write_table2(&out.join("table2.csv"), &table2).stage(exit::OTHER, "writing table2")?;
    write_table3(&out.join("table3.csv"), &table3).stage(exit::OTHER, "writing table3")?;
    write_plotdata(&out.join(PLOT_DIR), test, &gt_xy, &motion_runs, &u_series).stage(exit::OTHER, "writing plot data")?;
    Ok(EvalReport {
        table1,
        table2,
        table3,
        records,
    })
}

fn write_plotdata(
    dir: &Path,
    test: &[WindowSample],
    gt_xy: &[Vec<[f64; 2]>],
    runs: &[MotionRun],
    u_series: &BTreeMap<String, Vec<f64>>,
) -> egocog_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for run in runs {
        let path = dir.join(format!("trajectories_{}.csv", run.method));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["window", "episode", "step", "k", "pred_x", "pred_y", "gt_x", "gt_y"])?;
        for (i, win) in test.iter().enumerate() {
            for (k, (p, g)) in run.pred_xy[i].iter().zip(&gt_xy[i]).enumerate() {
                w.write_record(&[
                    i.to_string(),
                    win.episode_id.clone(),
                    win.now_index().to_string(),
                    (k + 1).to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                    g[0].to_string(),
                    g[1].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join("u_series.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["window".to_string(), "episode".into(), "step".into(), "u_human".into(), "behavior".into()];
    header.extend(u_series.keys().cloned());
    w.write_record(&header)?;
    for (i, win) in test.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            win.episode_id.clone(),
            win.now_index().to_string(),
            win.u_target.to_string(),
            win.behavior_now.0.to_string(),
        ];
        row.extend(u_series.values().map(|u| u[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

/// One ablation variant: loss weights and input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub weights: egocog_core::training::LossWeights,
    pub modalities: Modalities,
}

pub fn variant(name: &str, base: &RunConfig) -> CliResult<Variant> {
    let w = base.train.weights;
    let all = Modalities::default();
    let only = |video: bool, motion: bool| Modalities {
        video,
        motion,
        head: false,
        gaze: false,
        goal: true,
    };
    let (weights, modalities) = match name {
        "full" => (w, all),
        "no-aux" => (egocog_core::training::LossWeights { alpha: 0.0, ..w }, all),
        "no-traj-extras" => (w.without_traj_extras(), all),
        "video+motion" => (w, only(true, true)),
        "video-only" => (w, only(true, false)),
        "motion-only" => (w, only(false, true)),
        other => return Err(config_error(format!("unknown variant `{other}`"))),
    };
    Ok(Variant {
        name: name.into(),
        weights,
        modalities,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub variant: String,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_var: f64,
    pub streams: String,
    #[serde(rename = "ADE")]
    pub ade: f64,
    #[serde(rename = "FDE")]
    pub fde: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "MAE")]
    pub mae: Option<f64>,
    pub rho: Option<f64>,
    /// Result of perturbing masked streams: `pass`, `fail` or `n/a`.
    pub mask_probe: String,
}

const STREAMS: [Stream; 5] = [Stream::Video, Stream::Motion, Stream::Head, Stream::Gaze, Stream::Goal];

fn stream_name(s: Stream) -> &'static str {
    match s {
        Stream::Video => "video",
        Stream::Motion => "motion",
        Stream::Head => "head",
        Stream::Gaze => "gaze",
        Stream::Goal => "goal",
    }
}

/// Perturbs every masked stream of `input` and checks the prediction is
/// bit-identical. Returns `None` when no stream is masked.
pub fn mask_probe(model: &dyn Forecaster, input: &ModelInput, modalities: &Modalities) -> CliResult<Option<bool>> {
    let masked: Vec<Stream> = STREAMS.into_iter().filter(|s| !modalities.enabled(*s)).collect();
    if masked.is_empty() {
        return Ok(None);
    }
    let base = model.predict(input).stage(exit::DATA, "probe")?;
    let mut probe = input.clone();
    for s in masked {
        probe.stream_mut(s).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 1.0 + (i % 7) as f64);
    }
    Ok(Some(model.predict(&probe).stage(exit::DATA, "probe")? == base))
}

/// Trains each variant with the shared seed and writes `table4.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<Vec<Table4Row>> {
    let out = cfg.require_out()?.to_path_buf();
    let names: Vec<String> = if cfg.variants.is_empty() {
        ALL_VARIANTS.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.variants.clone()
    };
    let variants = names.iter().map(|n| variant(n, cfg)).collect::<CliResult<Vec<_>>>()?;
    let data = prepare_data(cfg)?;
    let test = &data.test;
    let poses = poses_by_episode(&data.splits.test);
    let starts = test.iter().map(|w| start_pose(&poses, w)).collect::<CliResult<Vec<_>>>()?;
    let gt_xy: Vec<Vec<[f64; 2]>> = test.iter().zip(&starts).map(|(w, s)| world_xy(*s, &w.future_motion)).collect();
    create_dir(&out)?;
    let mut rows = Vec::new();
    for v in &variants {
        let mut model_cfg = cfg.model.clone();
        model_cfg.modalities = v.modalities;
        let train_cfg = TrainConfig {
            weights: v.weights,
            ..cfg.train.clone()
        };
        let mut model = EgoCogNav::new(model_cfg).stage(exit::CONFIG, "building model")?;
        let report = train_one(&mut model, &data, &train_cfg, &out.join(&v.name), false)?;
        log::info!("variant {}: best epoch {} val {:.5}", v.name, report.best_epoch, report.best_val);
        let preds = predict_all(&model, test)?;
        let mut acc = [0.0; 3];
        for (i, p) in preds.iter().enumerate() {
            let xy = world_xy(starts[i], &p.motion.traj);
            acc[0] += ade(&xy, &gt_xy[i]).stage(exit::DATA, "ade")?;
            acc[1] += fde(&xy, &gt_xy[i]).stage(exit::DATA, "fde")?;
            acc[2] += head_l1(&p.motion.head, &test[i].future_head).stage(exit::DATA, "head L1")?;
        }
        let n = test.len() as f64;
        let u_hat: Vec<f64> = preds.iter().filter_map(|p| p.u_hat).collect();
        let u_human: Vec<f64> = test.iter().map(|w| w.u_target).collect();
        let input = model.prepare(&test[0]).stage(exit::DATA, "probe input")?;
        let probe = mask_probe(&model, &input, &v.modalities)?;
        let streams: Vec<&str> = STREAMS.into_iter().filter(|s| v.modalities.enabled(*s)).map(stream_name).collect();
        rows.push(Table4Row {
            variant: v.name.clone(),
            alpha: v.weights.alpha,
            gamma: v.weights.gamma,
            lambda_var: v.weights.lambda_var,
            streams: streams.join("+"),
            ade: acc[0] / n,
            fde: acc[1] / n,
            l1: acc[2] / n,
            mae: mae(&u_hat, &u_human).ok(),
            rho: spearman(&u_hat, &u_human).ok(),
            mask_probe: match probe {
                None => "n/a".into(),
                Some(true) => "pass".into(),
                Some(false) => "fail".into(),
            },
        });
    }
    let path = out.join("table4.csv");
    let write = || -> egocog_core::Result<()> {
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| io_err(&path, e))
    };
    write().stage(exit::OTHER, "writing table4")?;
    Ok(rows)
}

/// Reads `table4.csv`.
pub fn read_table4(path: &Path) -> egocog_core::Result<Vec<Table4Row>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<Table4Row>, _>>()?)
}
