use rand::seq::index;

use crate::error::{Error, Result};

use super::{ParamId, ParamSet, RngState, Scalar};

/// Below this magnitude both gradients are treated as zero.
const ZERO_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_and_grad` must evaluate the scalar loss at the current parameter
/// values and write the analytic gradient into the trainable entries'
/// `grad` tensors. At least `min(samples, total)` coordinates of trainable
/// entries are probed, chosen uniformly without replacement.
///
/// The relative error of one coordinate is `|a − n| / max(|a|, |n|)`, and `0`
/// when both magnitudes fall below `1e-10`.
pub fn grad_check<T, F>(
    mut loss_and_grad: F,
    params: &mut ParamSet<T>,
    eps: f64,
    samples: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut ParamSet<T>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("grad_check eps must be positive, got {eps}")));
    }
    params.zero_trainable_grads();
    loss_and_grad(params)?;

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, _, e)| e.trainable)
        .flat_map(|(id, _, e)| (0..e.value.len()).map(move |i| (id, i)))
        .collect();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| params.grad(id).data()[i].to_f64().unwrap())
        .collect();

    let picks = index::sample(rng, coords.len(), samples.min(coords.len()));
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for k in picks.iter() {
        let (id, i) = coords[k];
        let original = params.value(id).data()[i];
        let step = T::from(eps).unwrap();
        let plus = original + step;
        let minus = original - step;

        params.value_mut(id).data_mut()[i] = plus;
        let loss_plus = loss_and_grad(params)?;
        params.value_mut(id).data_mut()[i] = minus;
        let loss_minus = loss_and_grad(params)?;
        params.value_mut(id).data_mut()[i] = original;

        let width = (plus - minus).to_f64().unwrap();
        let numeric = (loss_plus - loss_minus) / width;
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < ZERO_FLOOR { 0.0 } else { (a - numeric).abs() / scale };
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((params.name(id).to_string(), i));
        }
    }
    // leave the analytic gradient in place for callers that inspect it
    params.zero_trainable_grads();
    loss_and_grad(params)?;
    Ok(report)
}
