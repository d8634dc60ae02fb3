//! Central finite-difference check of autodiff gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Allowed `|analytic − numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of relative error;
    /// guards coordinates whose true derivative is zero.
    pub abs_floor: f64,
    /// Coordinates sampled per call.
    pub coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, rel_tol: 1e-4, abs_floor: 1e-9, coords: 12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

fn loss_value<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let v = f(&mut g)?;
    ensure!(g.value(v).numel() == 1, "loss must be a scalar");
    Ok(g.value(v).item())
}

/// Compares the autodiff gradient of the loss built by `f` against central
/// differences on randomly sampled parameter coordinates. `f` must be a pure
/// function of the parameter values.
pub fn check_gradients<F>(store: &ParamStore, cfg: &GradCheckConfig, rng: &mut Rng, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let coords: Vec<(ParamId, usize)> =
        store.iter().flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i))).collect();
    ensure!(!coords.is_empty(), "no parameters to check");
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for _ in 0..cfg.coords {
        let (id, i) = coords[rng.below(coords.len())];
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + cfg.h;
        let up = loss_value(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig - cfg.h;
        let down = loss_value(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.checked += 1;
        if diff > cfg.abs_floor {
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.rel_tol {
                report.mismatches.push(Mismatch { param: store.name(id).to_string(), index: i, analytic, numeric });
            }
        }
    }
    Ok(report)
}
