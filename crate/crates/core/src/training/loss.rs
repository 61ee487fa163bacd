use crate::error::{ensure, Result};
use crate::grid::{check_same_shape, LabelMap, Prediction};
use crate::nets::{Act, Scalar};

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Clamp from below while letting NaN through.
fn floored(p: f64) -> f64 {
    if p < PROB_FLOOR {
        PROB_FLOOR
    } else {
        p
    }
}

/// Mean per-pixel cross-entropy `-ln p(true class)` over a batch.
pub fn cross_entropy_loss(predictions: &[Prediction], ground_truth: &[LabelMap]) -> Result<f64> {
    ensure!(
        predictions.len() == ground_truth.len() && !predictions.is_empty(),
        "need matching non-empty batches, got {} predictions and {} label maps",
        predictions.len(),
        ground_truth.len()
    );
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in predictions.iter().zip(ground_truth) {
        check_same_shape(g.shape(), p.shape())?;
        ensure!(p.num_classes() == g.num_classes(), "class count mismatch");
        let c = p.num_classes();
        for (px, &l) in p.probs().chunks_exact(c).zip(g.labels()) {
            total -= floored(px[l as usize] as f64).ln();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Loss and its gradient w.r.t. the logits for a `[C][N][H][W]` softmax output.
///
/// The gradient of mean softmax cross-entropy is `(p - onehot) / pixels`.
pub(crate) fn softmax_cross_entropy<T: Scalar>(probs: &Act<T>, labels: &[&LabelMap]) -> (f64, Act<T>) {
    let plane = probs.plane();
    let hw = probs.height * probs.width;
    let scale = T::from_f64(1.0 / plane as f64);
    let mut grad = probs.clone();
    grad.data.iter_mut().for_each(|v| *v *= scale);
    let mut total = 0.0;
    for (n, lm) in labels.iter().enumerate() {
        for (p, &l) in lm.labels().iter().enumerate() {
            let idx = l as usize * plane + n * hw + p;
            total -= floored(probs.data[idx].to_f64()).ln();
            grad.data[idx] -= scale;
        }
    }
    (total / plane as f64, grad)
}

/// Gradient w.r.t. the logits given the gradient w.r.t. softmax outputs:
/// `p * (dp - sum_c p_c dp_c)` per pixel.
pub(crate) fn softmax_backward<T: Scalar>(probs: &Act<T>, dprobs: &Act<T>) -> Act<T> {
    let plane = probs.plane();
    let mut out = probs.zeros_like();
    for p in 0..plane {
        let mut dot = T::ZERO;
        for k in 0..probs.channels {
            dot += probs.data[k * plane + p] * dprobs.data[k * plane + p];
        }
        for k in 0..probs.channels {
            let i = k * plane + p;
            out.data[i] = probs.data[i] * (dprobs.data[i] - dot);
        }
    }
    out
}
