use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::expr::{grad_of, Expr};
use super::{PolicyModel, Result};

const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter with the largest error, as a flat index.
    pub worst_index: usize,
    pub checked: usize,
}

/// Central differences against the analytic gradient on a random subsample
/// of parameters. Half the sample is drawn from parameters the loss touches
/// (non-zero analytic gradient), half uniformly from all parameters.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps
/// central-difference roundoff on near-zero components (about 1e-11 at
/// `epsilon = 1e-5`) from reading as a large relative error.
pub fn finite_diff_check<R: Rng + ?Sized>(
    model: &PolicyModel,
    expr: &Expr<'_>,
    epsilon: f64,
    sample_size: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (_, grad) = grad_of(model, expr)?;
    let total = model.params().len();
    let touched: Vec<usize> = grad
        .values
        .iter()
        .enumerate()
        .filter(|(_, g)| *g != 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut picks: Vec<usize> = Vec::with_capacity(sample_size);
    let half = sample_size / 2;
    if !touched.is_empty() {
        picks.extend(sample(rng, touched.len(), half.min(touched.len())).into_iter().map(|i| touched[i]));
    }
    let rest = sample_size - picks.len();
    picks.extend(sample(rng, total, rest.min(total)));

    let mut probe = model.clone();
    let mut worst = (0.0f64, 0usize);
    for &i in &picks {
        let x = model.params().get(i);
        probe.params_mut().set(i, x + epsilon);
        let up = expr.value(&probe)?;
        probe.params_mut().set(i, x - epsilon);
        let down = expr.value(&probe)?;
        probe.params_mut().set(i, x);
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grad.values.get(i);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: picks.len(),
    })
}
