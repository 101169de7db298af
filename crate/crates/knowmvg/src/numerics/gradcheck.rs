//! Central-difference gradient verification.
//!
//! The checker drives an arbitrary scalar loss `f(params)` twice per sampled
//! coordinate (θ±h) and compares the quotient against the analytic gradient
//! reported by the same closure. Coordinates are subsampled per tensor with a
//! seeded stream so the check stays cheap on large models while remaining
//! reproducible. Defaults are tuned for `f64`; `f32` callers should widen
//! `step` and the tolerances to match the coarser machine epsilon.

use indexmap::IndexMap;

use super::params::ParamSet;
use super::rng::derive_rng;
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type GradMap<T> = IndexMap<String, Tensor<T>>;

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    /// Perturbation h for the (f(θ+h) − f(θ−h)) / 2h quotient.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Coordinates sampled per tensor; 0 checks every element.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords_per_tensor: 8,
            seed: 0x9e3779b97f4a7c15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub coords_checked: usize,
    /// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8), worst coord.
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} coords={:<3} max_rel={:.3e} (analytic {:.6e}, numeric {:.6e})",
            if self.pass { "ok  " } else { "FAIL" },
            self.name,
            self.coords_checked,
            self.max_rel_err,
            self.worst_analytic,
            self.worst_numeric,
        )
    }
}

/// Verify analytic gradients of `f` for every trainable tensor in `params`.
///
/// The closure is called as `f(params, need_grads)`; when `need_grads` is
/// true it must return the analytic gradient map alongside the loss. A
/// trainable tensor absent from the map is treated as all-zero analytic
/// gradient (and must therefore also be numerically flat).
pub fn check_gradients<T, F>(
    params: &mut ParamSet<T>,
    mut f: F,
    settings: &GradCheckSettings,
) -> Result<Vec<GradReport>>
where
    T: Real,
    F: FnMut(&ParamSet<T>, bool) -> Result<(T, Option<GradMap<T>>)>,
{
    let (_, grads) = f(params, true)?;
    let grads = grads.ok_or_else(|| Error::contract("loss closure returned no gradients"))?;
    let names = params.trainable_names();
    let h = T::cast(settings.step);

    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let len = params.value(&name)?.len();
        let coords = sample_coords(len, settings.max_coords_per_tensor, settings.seed, &name);
        let analytic_tensor = grads.get(&name).cloned();
        if let Some(a) = &analytic_tensor {
            if a.len() != len {
                return Err(Error::contract(format!(
                    "gradient for `{name}` has {} elements, parameter has {len}",
                    a.len()
                )));
            }
        }

        let mut max_rel = 0.0f64;
        let mut worst = (0.0f64, 0.0f64);
        for &i in &coords {
            let orig = params.value(&name)?.as_slice()[i];
            params.value_mut(&name)?.as_mut_slice()[i] = orig + h;
            let (lp, _) = f(params, false)?;
            params.value_mut(&name)?.as_mut_slice()[i] = orig - h;
            let (lm, _) = f(params, false)?;
            params.value_mut(&name)?.as_mut_slice()[i] = orig;

            let numeric = (lp.as_f64() - lm.as_f64()) / (2.0 * settings.step);
            let analytic = analytic_tensor
                .as_ref()
                .map_or(0.0, |t| t.as_slice()[i].as_f64());
            let diff = (analytic - numeric).abs();
            let denom = analytic.abs().max(numeric.abs());
            let rel = diff / denom.max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (analytic, numeric);
            }
        }

        let pass = {
            let denom = worst.0.abs().max(worst.1.abs());
            (worst.0 - worst.1).abs() <= settings.abs_tol + settings.rel_tol * denom
        };
        reports.push(GradReport {
            name,
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            worst_analytic: worst.0,
            worst_numeric: worst.1,
            pass,
        });
    }
    Ok(reports)
}

fn sample_coords(len: usize, max: usize, seed: u64, name: &str) -> Vec<usize> {
    if max == 0 || len <= max {
        return (0..len).collect();
    }
    use rand::Rng;
    let mut rng = derive_rng(seed, name);
    let mut picked = Vec::with_capacity(max);
    while picked.len() < max {
        let i = rng.random_range(0..len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}
