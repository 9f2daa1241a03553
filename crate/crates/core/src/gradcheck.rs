//! Central finite-difference verification of analytic gradients.

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per parameter group: (name, max relative error over sampled coords).
    pub per_group: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Central differences on an O(1) double-precision loss carry roughly
/// |L| * u / (2 eps) ~ 1e-11 of cancellation noise. Below this absolute
/// difference the relative measure reads only that noise, so such
/// coordinates count as exact agreement.
pub const ABS_NOISE_FLOOR: f64 = 1e-8;

/// Compare analytic gradients against central differences on a random
/// subsample of at least `min_coords` coordinates spanning every group.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &ParamSet,
    analytic: &[Tensor],
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(CoreError::Autodiff(format!(
            "gradient list has {} entries, params {}",
            analytic.len(),
            params.len()
        )));
    }
    let total = params.total_numel();
    if total == 0 {
        return Err(CoreError::Autodiff("empty parameter set".into()));
    }
    let mut rng = Rng::new(seed);
    let mut work = params.clone();
    let mut per_group = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for gi in 0..params.len() {
        let numel = params.tensor(gi).numel();
        // proportional share, at least one coordinate per group; sampling
        // is with replacement so the share may exceed the group size
        let share =
            ((min_coords as f64 * numel as f64 / total as f64).ceil() as usize).max(1);
        let mut group_max = 0.0f64;
        for _ in 0..share {
            let ci = rng.below(numel);
            let orig = params.tensor(gi).data()[ci];

            work.tensor_mut(gi).data_mut()[ci] = orig + epsilon;
            let up = loss_fn(&work)?;
            work.tensor_mut(gi).data_mut()[ci] = orig - epsilon;
            let down = loss_fn(&work)?;
            work.tensor_mut(gi).data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[gi].data()[ci];
            let rel = if (a - numeric).abs() <= ABS_NOISE_FLOOR {
                0.0
            } else {
                relative_error(a, numeric)
            };
            group_max = group_max.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(group_max);
        per_group.push((params.name(gi).to_string(), group_max));
    }

    Ok(GradCheckReport {
        per_group,
        max_rel_error: max_rel,
        coords_checked: checked,
    })
}
