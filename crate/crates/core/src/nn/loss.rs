use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= z;
        }
    }
    out
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Input("softmax of a rank-0 tensor".into()))?;
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), k))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::Input(format!("label {y} of sample {i} outside [0, {k})")));
    }
    Ok(())
}

fn batch_dims(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        &[n, k] => Ok((n, k)),
        s => Err(Error::Input(format!("logits must be [N, k], got {s:?}"))),
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = batch_dims(logits)?;
    check_labels(n, k, labels)?;
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / n as f64)
}

/// Loss and `∂loss/∂logits` for mean cross-entropy.
pub(crate) fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, k) = batch_dims(logits)?;
    let loss = cross_entropy(logits, labels)?;
    let mut d = softmax_rows(logits.data(), k);
    for (row, &y) in d.chunks_exact_mut(k).zip(labels) {
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss, d))
}
