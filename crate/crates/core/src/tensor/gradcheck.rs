//! Central finite-difference comparison against tape gradients.

use super::{ParamSet, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Perturbs every scalar of `params` by `±FD_STEP` and compares the central
/// difference of `loss` with `analytic`.
pub fn check_params(params: &ParamSet, analytic: &[Tensor], mut loss: impl FnMut(&ParamSet) -> Result<f64>, floor: f64) -> Result<GradCheck> {
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = params.clone();
    for (pi, name) in params.names().iter().enumerate() {
        for k in 0..params.tensors()[pi].len() {
            let orig = params.tensors()[pi].data()[k];
            work.tensors_mut()[pi].data_mut()[k] = orig + FD_STEP;
            let up = loss(&work)?;
            work.tensors_mut()[pi].data_mut()[k] = orig - FD_STEP;
            let down = loss(&work)?;
            work.tensors_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = relative_error(analytic[pi].data()[k], numeric, floor);
            out.checked += 1;
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(out)
}
