use crate::error::{Error, Result};
use crate::generator::SemanticMask;
use crate::tensor::Map3;

fn check(logits: &Map3, target: &SemanticMask) -> Result<()> {
    if (logits.height, logits.width) != (target.height, target.width) {
        return Err(Error::ShapeMismatch(format!(
            "logits {}x{} vs mask {}x{}",
            logits.height, logits.width, target.height, target.width
        )));
    }
    target.check_classes(logits.channels)
}

/// Mean per-pixel cross-entropy `log Σ_k exp(S[k]) − S[Y]`.
pub fn cross_entropy(logits: &Map3, target: &SemanticMask) -> Result<f64> {
    check(logits, target)?;
    let n = logits.plane_len();
    let mut total = 0.0;
    for (p, &label) in target.labels.iter().enumerate() {
        let lse = log_sum_exp((0..logits.channels).map(|k| logits.data[k * n + p]));
        total += lse - logits.data[usize::from(label) * n + p];
    }
    Ok(total / n as f64)
}

/// Loss and its gradient with respect to the logits (`(softmax − onehot)/n`).
pub fn cross_entropy_grad(logits: &Map3, target: &SemanticMask) -> Result<(f64, Map3)> {
    check(logits, target)?;
    let n = logits.plane_len();
    let m = logits.channels;
    let mut grad = Map3::zeros(m, logits.height, logits.width);
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    for (p, &label) in target.labels.iter().enumerate() {
        let max = (0..m).map(|k| logits.data[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..m).map(|k| (logits.data[k * n + p] - max).exp()).sum();
        let lse = max + sum.ln();
        let y = usize::from(label);
        total += lse - logits.data[y * n + p];
        for k in 0..m {
            let prob = (logits.data[k * n + p] - lse).exp();
            grad.data[k * n + p] = inv * (prob - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok((total * inv, grad))
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-pixel argmax over classes; ties go to the lowest index.
pub fn argmax_mask(logits: &Map3) -> SemanticMask {
    let n = logits.plane_len();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..logits.channels {
                if logits.data[k * n + p] > logits.data[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    SemanticMask {
        height: logits.height,
        width: logits.width,
        labels,
    }
}
