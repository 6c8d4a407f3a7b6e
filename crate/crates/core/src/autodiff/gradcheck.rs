use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

fn loss_value<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    g.value(loss).item()
}

/// Compares the analytic gradient of `f` w.r.t. `param` against central
/// differences on up to `max_coords` sampled coordinates.
///
/// Returns `max |analytic - central| / (|central| + 1e-8)`. `f` builds the
/// scalar loss on a fresh tape each time it is called.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    param: ParamId,
    eps: f64,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::BadConfig(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?.get(param).clone()
    };
    let n = store.get(param).value.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, n, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut worst = 0.0f64;
    for c in coords {
        let orig = store.get(param).value.data()[c];
        store.get_mut(param).value.data_mut()[c] = orig + eps;
        let plus = loss_value(store, &f);
        store.get_mut(param).value.data_mut()[c] = orig - eps;
        let minus = loss_value(store, &f);
        store.get_mut(param).value.data_mut()[c] = orig;
        let central = (plus? - minus?) / (2.0 * eps);
        let err = (analytic.data()[c] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`finite_difference_check`] over every parameter; returns the worst error
/// and the name of the parameter where it occurred.
pub fn max_relative_error_all<F>(
    store: &mut ParamStore,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    f: F,
) -> Result<(f64, String)>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let err = finite_difference_check(store, id, eps, coords_per_param, seed.wrapping_add(i as u64), &f)?;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, store.get(id).name.clone());
        }
    }
    Ok(worst)
}
