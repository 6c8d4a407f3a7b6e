use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BehaviorLabel, Episode, EnvLabel, FeatureGrid, LabelKind, LabelSet};
use crate::error::{Error, Result};
use crate::geometry::{BodyDelta, GazePoint, Pose2, Rot6D};

pub const FEATURE_MAGIC: &[u8; 4] = b"ECNF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STREAMS_FILE: &str = "streams.csv";
pub const FEATURES_FILE: &str = "features.bin";

const COLUMNS: [&str; 17] = [
    "t", "dx", "dy", "dpsi", "h1", "h2", "h3", "h4", "h5", "h6", "u", "v", "goal_x", "goal_y", "U",
    "env", "behavior",
];

pub(crate) fn encode_feature_cache(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        grid.steps() as u32,
        grid.grid() as u32,
        grid.grid() as u32,
        grid.channels() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_feature_cache(bytes: &[u8], origin: &str) -> Result<FeatureGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, steps, gh, gw, channels) = (word(0), word(1), word(2), word(3), word(4));
    if version != FEATURE_VERSION as usize {
        return Err(Error::BadConfig(format!("{origin}: unsupported feature cache version {version}")));
    }
    if gh != gw {
        return Err(Error::BadConfig(format!("{origin}: non-square grid {gh}x{gw}")));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = steps * gh * gw * channels * 4;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            got: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureGrid::new(steps, gh, channels, data)
}

pub fn write_feature_cache(path: &Path, grid: &FeatureGrid) -> Result<()> {
    fs::write(path, encode_feature_cache(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes, &path.display().to_string())
}

/// `manifest.json` of an episode directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub id: String,
    pub length: usize,
    pub grid: usize,
    pub channels: usize,
    /// Bit order of the `env` column.
    pub env_labels: Vec<String>,
    /// Bit order of the `behavior` column.
    pub behavior_labels: Vec<String>,
    /// World pose before the first motion delta, `[x, y, psi]`.
    pub origin: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn label_names<L: LabelKind>(all: &[L]) -> Vec<String> {
    all.iter().map(|l| l.name().to_string()).collect()
}

/// Writes `manifest.json`, `streams.csv` and `features.bin` into `dir`.
pub fn write_episode_dir(dir: &Path, ep: &Episode, seed: Option<u64>) -> Result<()> {
    ep.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = EpisodeManifest {
        id: ep.id.clone(),
        length: ep.len(),
        grid: ep.features.grid(),
        channels: ep.features.channels(),
        env_labels: label_names(&EnvLabel::ALL),
        behavior_labels: label_names(&BehaviorLabel::ALL),
        origin: [ep.origin.x, ep.origin.y, ep.origin.psi],
        seed,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(STREAMS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(COLUMNS)?;
    for i in 0..ep.len() {
        let m = ep.motion[i];
        let h = ep.head[i].0;
        // f64 Display is the shortest representation that parses back exactly.
        let mut row: Vec<String> = [ep.times[i], m.dx, m.dy, m.dpsi]
            .iter()
            .chain(h.iter())
            .chain([ep.gaze[i].u, ep.gaze[i].v, ep.goal_xy[i][0], ep.goal_xy[i][1], ep.uncertainty[i]].iter())
            .map(|v| v.to_string())
            .collect();
        row.push(ep.env[i].0.to_string());
        row.push(ep.behavior[i].0.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_feature_cache(&dir.join(FEATURES_FILE), &ep.features)
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column {col}: cannot parse `{s}` as a number"),
    })
}

/// Reads an episode directory written by [`write_episode_dir`].
pub fn read_episode_dir(dir: &Path) -> Result<(Episode, EpisodeManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EpisodeManifest = serde_json::from_str(&text)?;
    if manifest.env_labels != label_names(&EnvLabel::ALL)
        || manifest.behavior_labels != label_names(&BehaviorLabel::ALL)
    {
        return Err(Error::BadConfig(format!("{}: unexpected label order", path.display())));
    }

    let path = dir.join(STREAMS_FILE);
    let mut r = csv::Reader::from_path(&path)?;
    let headers = r.headers()?.clone();
    let mut idx = [0usize; 17];
    for (slot, name) in idx.iter_mut().zip(&COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let n = manifest.length;
    let mut ep = Episode {
        id: manifest.id.clone(),
        origin: Pose2::new(manifest.origin[0], manifest.origin[1], manifest.origin[2]),
        times: Vec::with_capacity(n),
        motion: Vec::with_capacity(n),
        head: Vec::with_capacity(n),
        gaze: Vec::with_capacity(n),
        goal_xy: Vec::with_capacity(n),
        uncertainty: Vec::with_capacity(n),
        env: Vec::with_capacity(n),
        behavior: Vec::with_capacity(n),
        features: Arc::new(FeatureGrid::zeros(0, 1, 1)),
    };
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row_no + 2;
        let mut v = [0.0f64; 15];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = parse_f64(&rec[idx[k]], line, COLUMNS[k])?;
        }
        let mask = |k: usize| -> Result<LabelSet> {
            rec[idx[k]].trim().parse::<u8>().map(LabelSet).map_err(|_| Error::Parse {
                line,
                msg: format!("column {}: bad bitmask `{}`", COLUMNS[k], &rec[idx[k]]),
            })
        };
        ep.times.push(v[0]);
        ep.motion.push(BodyDelta::new(v[1], v[2], v[3]));
        ep.head.push(Rot6D([v[4], v[5], v[6], v[7], v[8], v[9]]));
        ep.gaze.push(GazePoint { u: v[10], v: v[11] });
        ep.goal_xy.push([v[12], v[13]]);
        ep.uncertainty.push(v[14]);
        ep.env.push(mask(15)?);
        ep.behavior.push(mask(16)?);
    }
    if ep.times.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: ep.times.len(),
        });
    }
    let features = read_feature_cache(&dir.join(FEATURES_FILE))?;
    if features.grid() != manifest.grid || features.channels() != manifest.channels {
        return Err(Error::BadConfig(format!(
            "{}: feature grid {}x{} does not match manifest {}x{}",
            dir.display(),
            features.grid(),
            features.channels(),
            manifest.grid,
            manifest.channels
        )));
    }
    ep.features = Arc::new(features);
    ep.validate()?;
    Ok((ep, manifest))
}
