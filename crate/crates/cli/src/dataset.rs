use std::fs;
use std::path::{Path, PathBuf};

use egocog_core::episodes::{extract_windows, read_episode_dir, Episode, WindowSample, WindowSpec};
use egocog_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{data_error, exit, CliResult, Stage};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Directory relative to the dataset root.
    pub dir: String,
    pub id: String,
    pub seed: Option<u64>,
    pub length: usize,
}

/// Index of episode directories written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<DatasetEntry>,
    pub total_steps: usize,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> CliResult<Self> {
        let path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })
            .stage(exit::DATA, "reading dataset index")?;
        serde_json::from_str(&text).map_err(Error::from).stage(exit::DATA, "parsing dataset index")
    }

    pub fn write(&self, root: &Path) -> CliResult<()> {
        let path = root.join(DATASET_FILE);
        let text = serde_json::to_string_pretty(self).map_err(Error::from).stage(exit::OTHER, "encoding dataset index")?;
        fs::write(&path, text)
            .map_err(|e| Error::Io { path, source: e })
            .stage(exit::OTHER, "writing dataset index")
    }
}

/// Episode directories under `root`: those listed in the index, or else every
/// subdirectory holding a `manifest.json`, in name order.
pub fn episode_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join(DATASET_FILE).exists() {
        let m = DatasetManifest::read(root)?;
        return Ok(m.episodes.iter().map(|e| root.join(&e.dir)).collect());
    }
    let entries = fs::read_dir(root)
        .map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })
        .stage(exit::DATA, "listing dataset")?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_episodes(root: &Path) -> CliResult<Vec<Episode>> {
    let dirs = episode_dirs(root)?;
    if dirs.is_empty() {
        return Err(data_error("loading dataset", Error::EmptyStream));
    }
    dirs.iter()
        .map(|d| read_episode_dir(d).map(|(ep, _)| ep).stage(exit::DATA, &format!("reading {}", d.display())))
        .collect()
}

/// Episode-level split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

/// Shuffles episodes by `split_seed` and assigns test, validation and
/// training episodes in that order. Test and training sets are never empty.
pub fn split_episodes(mut episodes: Vec<Episode>, cfg: &DataConfig) -> CliResult<Splits> {
    let n = episodes.len();
    if n < 2 {
        return Err(data_error("splitting dataset", Error::TooFew { needed: 2, got: n }));
    }
    episodes.sort_by(|a, b| a.id.cmp(&b.id));
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).min(n - n_test - 1);
    let train = episodes.split_off(n_test + n_val);
    let val = episodes.split_off(n_test);
    Ok(Splits {
        train,
        val,
        test: episodes,
    })
}

pub fn windows(episodes: &[Episode], spec: WindowSpec, stride: usize) -> CliResult<Vec<WindowSample>> {
    let mut out = Vec::new();
    for ep in episodes {
        if ep.len() < spec.past + spec.future {
            log::warn!("episode {} is shorter than one window; skipped", ep.id);
            continue;
        }
        out.extend(extract_windows(ep, spec, stride).stage(exit::DATA, &format!("windowing {}", ep.id))?);
    }
    Ok(out)
}

/// Keeps `max` windows spread evenly over the input.
pub fn subsample(windows: Vec<WindowSample>, max: Option<usize>) -> Vec<WindowSample> {
    match max {
        Some(m) if m < windows.len() => {
            let n = windows.len();
            let keep: Vec<usize> = (0..m).map(|i| i * n / m).collect();
            let mut it = keep.into_iter().peekable();
            windows
                .into_iter()
                .enumerate()
                .filter_map(|(i, w)| {
                    if it.peek() == Some(&i) {
                        it.next();
                        Some(w)
                    } else {
                        None
                    }
                })
                .collect()
        }
        _ => windows,
    }
}
