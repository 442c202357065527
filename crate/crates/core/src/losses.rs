//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its logit-like inputs, so the objective in [`crate::objective`] can chain
//! them into the model backward passes.

use crate::error::{Error, Result};
use crate::numerics::{entropy, log_softmax, softmax_unchecked, Matrix};

/// Scalar loss plus gradient with respect to one input matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

/// Symmetric KL loss plus gradients with respect to both logit matrices.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub grad_s: Matrix,
    pub grad_o: Matrix,
}

/// Symmetric image/text contrastive loss over a `B x B` similarity matrix.
///
/// `P = softmax_rows(S / tau)`, `Q = softmax_rows(S^T / tau)` and
/// `L = -(1/B) sum_j (ln P_jj + ln Q_jj) / 2`.
pub fn contrastive_loss(sim: &Matrix, tau: f64) -> Result<LossGrad> {
    let b = sim.rows;
    if b == 0 {
        return Err(Error::Empty("contrastive loss on empty batch".into()));
    }
    if sim.cols != b {
        return Err(Error::mismatch(
            b,
            sim.cols,
            "similarity matrix must be square",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let bf = b as f64;
    let mut grad = Matrix::zeros(b, b);
    let mut value = 0.0;
    let coeff = 1.0 / (2.0 * bf * tau);
    for j in 0..b {
        // Image-to-text: row j of S.
        let row = sim.row(j);
        let logp = log_softmax(row, tau);
        value -= logp[j];
        for k in 0..b {
            let p = logp[k].exp();
            let delta = if k == j { 1.0 } else { 0.0 };
            grad.data[j * b + k] += coeff * (p - delta);
        }
        // Text-to-image: row j of S^T is column j of S.
        let col: Vec<f64> = (0..b).map(|k| sim.get(k, j)).collect();
        let logq = log_softmax(&col, tau);
        value -= logq[j];
        for k in 0..b {
            let q = logq[k].exp();
            let delta = if k == j { 1.0 } else { 0.0 };
            grad.data[k * b + j] += coeff * (q - delta);
        }
    }
    Ok(LossGrad {
        value: value / (2.0 * bf),
        grad,
    })
}

/// Mean cross-entropy from logits, `-(1/B) sum_j ln softmax(o_j)[y_j]`.
pub fn mlp_ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossGrad> {
    let b = logits.rows;
    if b == 0 {
        return Err(Error::Empty("cross-entropy on empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::mismatch(b, labels.len(), "labels"));
    }
    let c = logits.cols;
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut value = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(j), 1.0);
        value -= logp[y];
        let g = grad.row_mut(j);
        for k in 0..c {
            g[k] = (logp[k].exp() - if k == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(LossGrad {
        value: value / b as f64,
        grad,
    })
}

/// Temperature softmax over the batch dimension, independently per class column.
pub fn classwise_temp_softmax(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if logits.rows == 0 {
        return Err(Error::Empty("class-wise softmax on empty batch".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for c in 0..logits.cols {
        let col: Vec<f64> = (0..logits.rows).map(|i| logits.get(i, c)).collect();
        for (i, v) in softmax_unchecked(&col, temperature).into_iter().enumerate() {
            out.set(i, c, v);
        }
    }
    Ok(out)
}

/// Entropy-weighted class-wise symmetric KL between FAM logits `s` and MLP
/// logits `o`:
///
/// `L = (1/C) sum_c sum_i [ w q ln(q/p) + (1-w) p ln(p/q) ]`
///
/// with `q`, `p` the class-wise temperature softmaxes of `s` and `o`. Both
/// sides receive gradients; `w` is a constant.
pub fn classwise_kl_loss(s: &Matrix, o: &Matrix, temperature: f64, varpi: f64) -> Result<KlGrad> {
    if s.rows != o.rows || s.cols != o.cols {
        return Err(Error::mismatch(
            s.rows * s.cols,
            o.rows * o.cols,
            "distillation logits shape",
        ));
    }
    if s.rows == 0 || s.cols == 0 {
        return Err(Error::Empty("distillation on empty batch".into()));
    }
    if !(0.0..=1.0).contains(&varpi) {
        return Err(Error::InvalidInput(format!(
            "dynamic weight {varpi} outside [0,1]"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (b, c) = (s.rows, s.cols);
    let scale = 1.0 / c as f64;
    let mut grad_s = Matrix::zeros(b, c);
    let mut grad_o = Matrix::zeros(b, c);
    let mut value = 0.0;
    for k in 0..c {
        let sc: Vec<f64> = (0..b).map(|i| s.get(i, k)).collect();
        let oc: Vec<f64> = (0..b).map(|i| o.get(i, k)).collect();
        let lq = log_softmax(&sc, temperature);
        let lp = log_softmax(&oc, temperature);
        let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let kl_qp: f64 = (0..b).map(|i| q[i] * (lq[i] - lp[i])).sum();
        let kl_pq: f64 = (0..b).map(|i| p[i] * (lp[i] - lq[i])).sum();
        value += varpi * kl_qp + (1.0 - varpi) * kl_pq;
        // d KL(q||p)/ds = q (ln q/p - KL) / T,  d KL(q||p)/do = (p - q) / T,
        // and symmetrically for KL(p||q).
        for i in 0..b {
            let gs = varpi * q[i] * (lq[i] - lp[i] - kl_qp) + (1.0 - varpi) * (q[i] - p[i]);
            let go = varpi * (p[i] - q[i]) + (1.0 - varpi) * p[i] * (lp[i] - lq[i] - kl_pq);
            grad_s.set(i, k, scale * gs / temperature);
            grad_o.set(i, k, scale * go / temperature);
        }
    }
    Ok(KlGrad {
        value: scale * value,
        grad_s,
        grad_o,
    })
}

/// `H(p_v) / (H(p_m) + H(p_v))` with batch-mean entropies; 0.5 if both vanish.
pub fn dynamic_weight(p_v: &[Vec<f64>], p_m: &[Vec<f64>]) -> Result<f64> {
    if p_v.is_empty() || p_m.is_empty() {
        return Err(Error::Empty("dynamic weight on empty batch".into()));
    }
    if p_v.len() != p_m.len() {
        return Err(Error::mismatch(
            p_v.len(),
            p_m.len(),
            "dynamic weight batch sizes",
        ));
    }
    let mean = |ps: &[Vec<f64>]| ps.iter().map(|p| entropy(p)).sum::<f64>() / ps.len() as f64;
    Ok(entropy_ratio(mean(p_v), mean(p_m)))
}

pub(crate) fn entropy_ratio(h_v: f64, h_m: f64) -> f64 {
    let denom = h_m + h_v;
    if denom <= 0.0 {
        0.5
    } else {
        (h_v / denom).clamp(0.0, 1.0)
    }
}

/// `L_contr + L_mlp + lambda * L_sim`.
pub fn total_loss(contr: f64, mlp: f64, sim: f64, lambda: f64) -> f64 {
    contr + mlp + lambda * sim
}

/// Per-sample ensemble `w p_mlp + (1-w) p_fam`, with `w` from the entropies
/// of this sample's two distributions.
pub fn ensemble_predict(p_mlp: &[f64], p_fam: &[f64]) -> Result<Vec<f64>> {
    if p_mlp.len() != p_fam.len() {
        return Err(Error::mismatch(p_mlp.len(), p_fam.len(), "ensemble inputs"));
    }
    let w = entropy_ratio(entropy(p_fam), entropy(p_mlp));
    Ok(p_mlp
        .iter()
        .zip(p_fam)
        .map(|(m, f)| w * m + (1.0 - w) * f)
        .collect())
}
