use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    #[default]
    Nearest,
    Linear,
}

/// A stream on the 10 Hz grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// For nearest mode the chosen input index; for linear mode the left
    /// bracket index.
    pub source: Vec<usize>,
}

const GRID_TOL: f64 = 1e-9;

/// Grid indices `k` with `k / 10` inside `[t0, t1]`.
pub(crate) fn grid_range(t0: f64, t1: f64) -> std::ops::RangeInclusive<i64> {
    let first = (t0 * 10.0 - GRID_TOL).ceil() as i64;
    let last = (t1 * 10.0 + GRID_TOL).floor() as i64;
    first..=last
}

/// Resamples `(times, values)` onto `k * 0.1 s` within the input span.
///
/// Nearest mode breaks exact ties toward the earlier sample.
pub fn resample_10hz(times: &[f64], values: &[f64], mode: ResampleMode) -> Result<Resampled> {
    if times.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: times.len(),
            got: values.len(),
        });
    }
    if times.is_empty() {
        return Err(Error::EmptyStream);
    }
    if let Some(i) = (1..times.len()).find(|&i| !(times[i] > times[i - 1])) {
        return Err(Error::Parse {
            line: i + 1,
            msg: format!("timestamps not strictly increasing ({} after {})", times[i], times[i - 1]),
        });
    }
    let n = times.len();
    let mut out = Resampled {
        times: Vec::new(),
        values: Vec::new(),
        source: Vec::new(),
    };
    let mut j = 0;
    for k in grid_range(times[0], times[n - 1]) {
        let t = k as f64 / 10.0;
        // Advance j to the last sample with times[j] <= t.
        while j + 1 < n && times[j + 1] <= t {
            j += 1;
        }
        let (v, src) = match mode {
            ResampleMode::Nearest => {
                let pick = if j + 1 < n && (times[j + 1] - t) < (t - times[j]) {
                    j + 1
                } else {
                    j
                };
                (values[pick], pick)
            }
            ResampleMode::Linear => {
                if j + 1 >= n || t <= times[j] {
                    (values[j], j)
                } else {
                    let w = (t - times[j]) / (times[j + 1] - times[j]);
                    (values[j] + w * (values[j + 1] - values[j]), j)
                }
            }
        };
        out.times.push(t);
        out.values.push(v);
        out.source.push(src);
    }
    Ok(out)
}
