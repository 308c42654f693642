use super::tensor::Tensor;

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f32) -> Vec<f32> {
    let k = logits.c;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data.chunks_exact(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v / temperature - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Mean softmax cross-entropy; returns `(loss, dlogits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let n = logits.n;
    assert_eq!(labels.len(), n);
    let k = logits.c;
    let mut grad = softmax_rows(logits, 1.0);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} outside head of size {k}");
        loss -= grad[i * k + y].max(1e-12).ln();
        grad[i * k + y] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n as f32);
    (loss / n as f32, Tensor::matrix(n, k, grad))
}

/// Temperature-scaled distillation of the first `old_logits.c` outputs of
/// `logits` towards `old_logits`.
///
/// Returns `(loss, dlogits)` where the loss is `T^2 * KL(p_old || p_new)`
/// averaged over the batch; gradients on the new-class outputs are zero.
pub fn distillation(logits: &Tensor, old_logits: &Tensor, temperature: f32) -> (f32, Tensor) {
    let n = logits.n;
    let k_old = old_logits.c;
    let k = logits.c;
    assert!(k_old <= k && old_logits.n == n);
    let mut sub = Vec::with_capacity(n * k_old);
    for row in logits.data.chunks_exact(k) {
        sub.extend_from_slice(&row[..k_old]);
    }
    let p_new = softmax_rows(&Tensor::matrix(n, k_old, sub), temperature);
    let p_old = softmax_rows(old_logits, temperature);
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k_old {
            let (po, pn) = (p_old[i * k_old + j], p_new[i * k_old + j]);
            if po > 0.0 {
                loss += po * (po.max(1e-12).ln() - pn.max(1e-12).ln());
            }
            grad[i * k + j] = temperature * (pn - po) / n as f32;
        }
    }
    (temperature * temperature * loss / n as f32, Tensor::matrix(n, k, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor) -> f32, x: &Tensor) -> Vec<f32> {
        let eps = 1e-3;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut m = x.clone();
                m.data[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels);
        let fd = numeric_grad(|x| cross_entropy(x, &labels).0, &logits);
        for (a, b) in g.data.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let logits = Tensor::matrix(2, 4, vec![0.3, -1.2, 2.0, 0.1, 0.0, 0.5, -0.5, 1.0]);
        let old = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.2, 0.4]);
        let (loss, g) = distillation(&logits, &old, 2.0);
        assert!(loss >= 0.0);
        let fd = numeric_grad(|x| distillation(x, &old, 2.0).0, &logits);
        for (a, b) in g.data.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
