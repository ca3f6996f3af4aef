use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    /// Mean negative log-softmax of the true class.
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor,
    /// Rows whose arg-max equals the label (first maximum wins ties).
    pub correct: usize,
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    let b = logits.rows();
    let c = logits.row_len();
    if labels.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = Tensor::zeros(vec![b, c]);
    let mut total = 0.0;
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        let row = logits.row(s);
        let (argmax, max) = row.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            },
        );
        if argmax == label {
            correct += 1;
        }
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = grad.row_mut(s);
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok(CrossEntropy {
        loss: total / b as f64,
        grad,
        correct,
    })
}
