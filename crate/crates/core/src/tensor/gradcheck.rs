use crate::error::{Error, Result};

use super::{Tape, Tensor, TensorId};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input, flat index) where the worst disagreement occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of a scalar function against central
/// differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
///
/// `f` receives one leaf per input tensor and must return a scalar. The
/// relative error of each component uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`; the maximum over all components of all
/// inputs is returned.
pub fn finite_diff_check<F>(mut f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        tape.value(out).item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                probe[k].data_mut()[i] = x0 + dx;
                eval(&probe)
            };
            let (plus, minus) = (at(h)?, at(-h)?);
            probe[k].data_mut()[i] = x0;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if report.checked == 0 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64([4], &[0.3, -1.0, 2.0, 5.0]).unwrap();
        let r = finite_diff_check(|t, ids| Ok(t.sum(ids[0])), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn rejects_vector_valued_functions() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        assert!(finite_diff_check(|_, ids| Ok(ids[0]), &[x], 1e-5).is_err());
    }
}
