use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the first and last `window_len / 2` samples are filtered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Evaluate the polynomial fitted to the first/last full window at the
    /// edge positions. Reproduces polynomials up to `poly_order` everywhere.
    #[default]
    Interp,
    /// Reflect the series about its end samples (`x[-k] = x[k]`) and apply the
    /// central kernel.
    Mirror,
}

fn check_window(len: usize, window_len: usize, poly_order: usize) -> Result<()> {
    if window_len.is_multiple_of(2) {
        return Err(Error::BadWindow(format!("window length {window_len} is even")));
    }
    if window_len <= poly_order {
        return Err(Error::BadWindow(format!(
            "window length {window_len} must exceed polynomial order {poly_order}"
        )));
    }
    if len < window_len {
        return Err(Error::BadWindow(format!(
            "series of length {len} is shorter than window {window_len}"
        )));
    }
    Ok(())
}

/// Hat matrix `A (A^T A)^-1 A^T` of the windowed polynomial fit; row `i`
/// holds the weights that evaluate the fit at window position `i`.
fn hat_matrix(window_len: usize, poly_order: usize) -> DMatrix<f64> {
    let half = (window_len / 2) as f64;
    let scale = if half > 0.0 { half } else { 1.0 };
    let a = DMatrix::from_fn(window_len, poly_order + 1, |i, j| {
        ((i as f64 - half) / scale).powi(j as i32)
    });
    let pinv = a
        .clone()
        .pseudo_inverse(1e-12)
        .expect("Vandermonde matrix with distinct nodes has full column rank");
    a * pinv
}

/// Central smoothing weights for `window_len` and `poly_order`.
pub fn savgol_coefficients(window_len: usize, poly_order: usize) -> Result<Vec<f64>> {
    check_window(window_len, window_len, poly_order)?;
    let h = hat_matrix(window_len, poly_order);
    let mid = window_len / 2;
    Ok((0..window_len).map(|j| h[(mid, j)]).collect())
}

/// Savitzky-Golay smoothing with polynomial-fit edges.
pub fn savgol_smooth(series: &[f64], window_len: usize, poly_order: usize) -> Result<Vec<f64>> {
    savgol_smooth_with(series, window_len, poly_order, EdgeMode::Interp)
}

pub fn savgol_smooth_with(
    series: &[f64],
    window_len: usize,
    poly_order: usize,
    edges: EdgeMode,
) -> Result<Vec<f64>> {
    check_window(series.len(), window_len, poly_order)?;
    let n = series.len();
    let half = window_len / 2;
    let h = hat_matrix(window_len, poly_order);
    let dot = |row: usize, start: usize| -> f64 {
        (0..window_len).map(|j| h[(row, j)] * series[start + j]).sum()
    };

    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate().take(n - half).skip(half) {
        *o = dot(half, i - half);
    }
    match edges {
        EdgeMode::Interp => {
            for i in 0..half {
                out[i] = dot(i, 0);
                out[n - 1 - i] = dot(window_len - 1 - i, n - window_len);
            }
        }
        EdgeMode::Mirror => {
            // Reflection without repeating the end sample.
            let at = |k: isize| -> f64 {
                let last = n as isize - 1;
                let idx = if k < 0 {
                    -k
                } else if k > last {
                    2 * last - k
                } else {
                    k
                };
                series[idx as usize]
            };
            let edge_rows = (0..half).chain(n - half..n);
            for i in edge_rows {
                out[i] = (0..window_len)
                    .map(|j| h[(half, j)] * at(i as isize - half as isize + j as isize))
                    .sum();
            }
        }
    }
    Ok(out)
}
