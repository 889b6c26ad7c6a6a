use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors.
const REL_FLOOR: f64 = 1e-12;

fn scalar_value<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("objective returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between reverse-mode gradients and central finite
/// differences over every parameter entry.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> =
        params.iter().flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id.0, i))).collect();
    check_entries(&f, params, step, &entries)
}

/// Like [`finite_diff_check`] but over at most `max_entries` entries drawn
/// uniformly (without replacement) with `seed`.
pub fn finite_diff_check_sampled<F>(f: F, params: &ParamStore, step: f64, max_entries: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = params.iter().flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id.0, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), max_entries.min(all.len())).into_vec();
    picked.sort_unstable();
    let entries: Vec<_> = picked.into_iter().map(|i| all[i]).collect();
    check_entries(&f, params, step, &entries)
}

fn check_entries<F>(f: &F, params: &ParamStore, step: f64, entries: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let first = scalar_value(f, params)?;
    let second = scalar_value(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &(pid, i) in entries {
        let id = super::ParamId(pid);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        let orig = params.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + step;
        let up = scalar_value(f, &probe)?;
        probe.get_mut(id).data_mut()[i] = orig - step;
        let down = scalar_value(f, &probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
