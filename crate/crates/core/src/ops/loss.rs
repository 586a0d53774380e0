use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of `[N×K]` logits, with the
/// gradient `(softmax − onehot)/N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::dim(format!("logits must be N×K, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for batch of {n}", labels.len())));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[y];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[i * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], grad)))
}

/// Per-pixel softmax cross-entropy for `[N×K×H×W]` logits against `N` label
/// grids of `H·W` entries, averaged over all pixels.
pub fn pixel_softmax_cross_entropy(logits: &Tensor, labels: &[&[u8]]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = *logits.shape() else {
        return Err(Error::dim(format!("pixel logits must be N×K×H×W, got {:?}", logits.shape())));
    };
    let hw = h * w;
    if labels.len() != n || labels.iter().any(|l| l.len() != hw) {
        return Err(Error::dim("label grids do not match logits"));
    }
    let total = (n * hw) as f64;
    let src = logits.data();
    let mut grad = vec![0.0; src.len()];
    let mut loss = 0.0;
    for (b, lab) in labels.iter().enumerate() {
        let base = b * k * hw;
        for p in 0..hw {
            let y = lab[p] as usize;
            if y >= k {
                return Err(Error::Domain(format!("label {y} out of range for {k} classes")));
            }
            let at = |c: usize| base + c * hw + p;
            let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (src[at(c)] - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - src[at(y)];
            for c in 0..k {
                let pr = (src[at(c)] - log_z).exp();
                grad[at(c)] = (pr - if c == y { 1.0 } else { 0.0 }) / total;
            }
        }
    }
    Ok((loss / total, Tensor::from_parts(logits.shape().to_vec(), grad)))
}
