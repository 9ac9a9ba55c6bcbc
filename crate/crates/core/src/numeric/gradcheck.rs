//! Central finite-difference gradient checker.

use super::params::{GradRecord, GroupId, ParamSet};
use crate::error::Result;

/// Denominator floor for relative errors, so that components whose true
/// gradient is ~0 are judged on absolute error instead.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: GroupId,
    pub name: String,
    pub max_rel_err: f64,
    pub components: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    /// Frozen groups whose analytic gradient was not exactly zero.
    pub frozen_nonzero: Vec<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.frozen_nonzero.is_empty()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its value, component by component, over every trainable
/// group. `f` returns `(value, gradient)`.
pub fn grad_check<F>(f: F, params: &ParamSet, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradRecord)>,
{
    grad_check_with_floor(f, params, step, tol, DEFAULT_ABS_FLOOR)
}

pub fn grad_check_with_floor<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradRecord)>,
{
    let (_, analytic) = f(params)?;
    let mut groups = Vec::new();
    let mut frozen_nonzero = Vec::new();
    let mut overall: f64 = 0.0;
    let mut probe = params.clone();
    for g in params.ids() {
        if !params.is_trainable(g) {
            if !analytic.is_zero(g) {
                frozen_nonzero.push(params.name(g).to_string());
            }
            continue;
        }
        let n = params.get(g).len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(g).as_slice()[i];
            probe.get_mut(g).as_mut_slice()[i] = orig + step;
            let (plus, _) = f(&probe)?;
            probe.get_mut(g).as_mut_slice()[i] = orig - step;
            let (minus, _) = f(&probe)?;
            probe.get_mut(g).as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic.get(g).as_slice()[i], numeric, floor));
        }
        overall = overall.max(worst);
        groups.push(GroupReport {
            group: g,
            name: params.name(g).to_string(),
            max_rel_err: worst,
            components: n,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
        frozen_nonzero,
        tol,
    })
}
