use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Mean softmax cross-entropy over the batch. `logits` has dims
/// `(Bt, classes, 1, 1)` (any trailing spatial extent is flattened into the
/// class axis). Returns the loss and `(softmax − one_hot)/Bt`.
pub fn cross_entropy_loss<T: Element>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<(f64, Tensor4<T>)> {
    let bt = logits.batch();
    if labels.len() != bt || bt == 0 {
        return Err(Error::shape(format!(
            "{} labels for a batch of {bt}",
            labels.len()
        )));
    }
    let classes = logits.len() / bt;
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let inv_bt = 1.0 / bt as f64;
    for (b, (row, &label)) in logits.data().chunks_exact(classes).zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::argument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[label].as_f64();
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (k, (gv, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / sum;
            let target = if k == label { 1.0 } else { 0.0 };
            *gv = T::of((p - target) * inv_bt);
        }
    }
    Ok((total * inv_bt, Tensor4::new(logits.dims(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor4::filled([3, 10, 1, 1], 0.7f64);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction() {
        let mut v = vec![0.0f64; 5];
        v[2] = 200.0;
        let (loss, _) = cross_entropy_loss(&Tensor4::new([1, 5, 1, 1], v).unwrap(), &[2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor4::from_fn([4, 10, 1, 1], |b, c, _, _| {
            ((b * 7 + c * 3) % 11) as f64 * 0.37 - 1.2
        });
        let (_, g) = cross_entropy_loss(&logits, &[1, 3, 5, 7]).unwrap();
        for row in g.data().chunks_exact(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor4::<f32>::zeros([1, 3, 1, 1]);
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(Error::Argument(_))
        ));
    }
}
