use std::fs;
use std::path::{Path, PathBuf};

use egocog_core::episodes::SynthConfig;
use egocog_core::model::{EarlyFusionConfig, ModelConfig};
use egocog_core::training::TrainConfig;
use egocog_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{config_error, exit, CliResult, Stage};

/// Episode splitting and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Window stride for training windows.
    pub stride: usize,
    /// Window stride for validation and test windows.
    pub eval_stride: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seeds the episode-level split.
    pub split_seed: u64,
    /// Caps the number of training windows (evenly subsampled).
    pub max_train_windows: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            stride: 5,
            eval_stride: 5,
            val_fraction: 0.1,
            test_fraction: 0.2,
            split_seed: 0,
            max_train_windows: None,
        }
    }
}

/// Everything a command needs; command-line flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Number of episodes written by `synth`.
    pub episodes: usize,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub m_transformer: EarlyFusionConfig,
    pub train: TrainConfig,
    pub methods: Vec<String>,
    pub variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: None,
            seed: 0,
            episodes: 10,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            m_transformer: EarlyFusionConfig::default(),
            train: TrainConfig::default(),
            methods: Vec::new(),
            variants: Vec::new(),
        }
    }
}

pub const TRAINABLE: [&str; 2] = ["egocognav", "m_transformer"];
pub const ALL_METHODS: [&str; 6] = ["egocognav", "m_transformer", "const_vel", "lin_ext", "emu_proxy", "path_u"];
pub const ALL_VARIANTS: [&str; 6] = ["full", "no-aux", "no-traj-extras", "video+motion", "video-only", "motion-only"];

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
            .stage(exit::CONFIG, "reading config")?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(Error::from).stage(exit::CONFIG, "parsing config")?;
        Ok(cfg)
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().stage(exit::CONFIG, "model config")?;
        self.m_transformer.validate().stage(exit::CONFIG, "m_transformer config")?;
        self.train.validate().stage(exit::CONFIG, "train config")?;
        let d = &self.data;
        if d.stride == 0 || d.eval_stride == 0 {
            return Err(config_error("strides must be positive"));
        }
        let fr = [d.val_fraction, d.test_fraction];
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) || d.val_fraction + d.test_fraction >= 1.0 {
            return Err(config_error("split fractions must be in [0, 1) and sum below 1"));
        }
        if self.m_transformer.past != self.model.past || self.m_transformer.future != self.model.future {
            return Err(config_error("m_transformer horizons must match the model"));
        }
        if self.m_transformer.channels != self.model.channels {
            return Err(config_error("m_transformer channels must match the model"));
        }
        for m in &self.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(config_error(format!("unknown method `{m}`")));
            }
        }
        for v in &self.variants {
            if !ALL_VARIANTS.contains(&v.as_str()) {
                return Err(config_error(format!("unknown variant `{v}`")));
            }
        }
        Ok(())
    }

    pub fn require_dataset(&self) -> CliResult<&Path> {
        self.dataset.as_deref().ok_or_else(|| config_error("no dataset given"))
    }

    pub fn require_out(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| config_error("no output directory given"))
    }
}

/// Splits a comma-separated list, dropping empty entries.
pub fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}
