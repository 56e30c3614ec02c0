//! Softmax and cross-entropy against soft (distribution-valued) targets.

use crate::bbox::CellDistribution;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn rows<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.dims() {
        &[n, k] => Ok((n, k)),
        d => Err(Error::Shape(format!("logits must be N x K, got {d:?}"))),
    }
}

/// Row-wise softmax of `logits`, computed in shifted form in `f64`.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = rows(logits)?;
    let data = logits
        .data()
        .chunks(k)
        .flat_map(|r| softmax_row(r).into_iter().map(T::from_f64))
        .collect();
    Tensor::new(vec![n, k], data)
}

/// Mean cross-entropy `-(1/N) sum t log softmax(z)` and its gradient
/// `(softmax(z) - t) / N`.
pub fn softmax_xent_soft<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[CellDistribution],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = rows(logits)?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} target rows for {n} logit rows",
            targets.len()
        )));
    }
    logits.ensure_finite("logits")?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, target) in logits.data().chunks(k).zip(targets) {
        if target.len() != k {
            return Err(Error::Distribution(format!(
                "target has {} entries, logits have {k}",
                target.len()
            )));
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        for (&z, &t) in row.iter().zip(target.probs()) {
            let log_p = z.as_f64() - max - log_z;
            if t > 0.0 {
                loss -= t * log_p;
            }
            grad.push(T::from_f64((log_p.exp() - t) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}
