//! The full per-batch training objective over one FAM and one MLP, with
//! gradients for every parameter of both models.

use crate::error::{Error, Result};
use crate::losses::{classwise_kl_loss, contrastive_loss, dynamic_weight, mlp_ce_loss, total_loss};
use crate::masked::{FamModel, MaskAnchor, MlpModel};
use crate::numerics::{cosine_grad_a, dot, norm, softmax_unchecked, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    /// Softmax temperature of the CLIP-style similarity logits.
    pub tau: f64,
    /// Temperature of the class-wise distillation softmax.
    pub temperature: f64,
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Stop the cross-entropy gradient at the MLP input, so the FAM only
    /// learns from the contrastive and distillation terms.
    pub detach_mlp_input: bool,
    /// Use this weight instead of the entropy ratio. The weight is never
    /// differentiated, so finite-difference checks must hold it fixed.
    pub fixed_varpi: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            temperature: 2.0,
            lambda: 0.04,
            detach_mlp_input: false,
            fixed_varpi: None,
        }
    }
}

/// Relaxed-mask anchors for both models, used by gradient checks.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub fam: Vec<MaskAnchor>,
    pub mlp: Vec<MaskAnchor>,
}

impl Anchors {
    pub fn capture(fam: &FamModel, mlp: &MlpModel) -> Self {
        Self {
            fam: fam.anchors(),
            mlp: mlp.anchors(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub contrastive: f64,
    pub cross_entropy: f64,
    pub similarity: f64,
    pub total: f64,
    pub varpi: f64,
    /// Gradients in the FAM's canonical parameter order.
    pub fam_grads: Vec<Vec<f64>>,
    /// Gradients in the MLP's canonical parameter order.
    pub mlp_grads: Vec<Vec<f64>>,
}

/// Cosine similarities `B x C` between masked features and text features.
pub fn cosine_matrix(masked: &Matrix, text: &Matrix) -> Result<Matrix> {
    if masked.cols != text.cols {
        return Err(Error::mismatch(
            text.cols,
            masked.cols,
            "feature dim vs text features",
        ));
    }
    let text_norms: Vec<f64> = (0..text.rows).map(|c| norm(text.row(c))).collect();
    if text_norms.contains(&0.0) {
        return Err(Error::Degenerate("zero-norm text feature".into()));
    }
    let mut out = Matrix::zeros(masked.rows, text.rows);
    for j in 0..masked.rows {
        let x = masked.row(j);
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::Degenerate(format!(
                "masked feature {j} has zero norm"
            )));
        }
        for c in 0..text.rows {
            out.set(
                j,
                c,
                (dot(x, text.row(c)) / (nx * text_norms[c])).clamp(-1.0, 1.0),
            );
        }
    }
    Ok(out)
}

/// Row-wise softmax of `cos / tau`: the FAM-path class probabilities.
pub fn fam_probabilities(cos: &Matrix, tau: f64) -> Vec<Vec<f64>> {
    (0..cos.rows)
        .map(|j| softmax_unchecked(cos.row(j), tau))
        .collect()
}

/// Loss terms and all parameter gradients for one minibatch.
pub fn batch_objective(
    fam: &FamModel,
    mlp: &MlpModel,
    images: &Matrix,
    labels: &[usize],
    text: &Matrix,
    cfg: &ObjectiveConfig,
    anchors: Option<&Anchors>,
) -> Result<BatchOutcome> {
    let b = images.rows;
    if b == 0 {
        return Err(Error::Empty("objective on empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::mismatch(b, labels.len(), "labels"));
    }
    let classes = text.rows;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let (masked, fam_cache) = fam.forward(images, anchors.map(|a| a.fam.as_slice()))?;
    let cos = cosine_matrix(&masked, text)?;

    // B x B image/text similarity over the batch labels.
    let mut sim = Matrix::zeros(b, b);
    for j in 0..b {
        for (k, &y) in labels.iter().enumerate() {
            sim.set(j, k, cos.get(j, y));
        }
    }
    let contr = contrastive_loss(&sim, cfg.tau)?;
    let mut grad_cos = Matrix::zeros(b, classes);
    for j in 0..b {
        for (k, &y) in labels.iter().enumerate() {
            grad_cos.data[j * classes + y] += contr.grad.get(j, k);
        }
    }

    let fam_logits = Matrix {
        rows: b,
        cols: classes,
        data: cos.data.iter().map(|v| v / cfg.tau).collect(),
    };
    let p_v = fam_probabilities(&cos, cfg.tau);

    let (logits, mlp_cache) = mlp.forward(&masked, anchors.map(|a| a.mlp.as_slice()))?;
    if logits.cols != classes {
        return Err(Error::mismatch(classes, logits.cols, "MLP output classes"));
    }
    let ce = mlp_ce_loss(&logits, labels)?;
    let p_m: Vec<Vec<f64>> = (0..b)
        .map(|j| softmax_unchecked(logits.row(j), 1.0))
        .collect();
    let varpi = match cfg.fixed_varpi {
        Some(w) => w,
        None => dynamic_weight(&p_v, &p_m)?,
    };

    let kl = classwise_kl_loss(&fam_logits, &logits, cfg.temperature, varpi)?;
    let mut grad_logits = ce.grad;
    for (g, k) in grad_logits.data.iter_mut().zip(&kl.grad_o.data) {
        *g += cfg.lambda * k;
    }
    for (g, k) in grad_cos.data.iter_mut().zip(&kl.grad_s.data) {
        *g += cfg.lambda * k / cfg.tau;
    }

    let (mlp_grads, grad_from_mlp) = mlp.backward(&masked, &mlp_cache, &grad_logits);

    let mut grad_masked = if cfg.detach_mlp_input {
        Matrix::zeros(b, masked.cols)
    } else {
        grad_from_mlp
    };
    for j in 0..b {
        let x = masked.row(j);
        for c in 0..classes {
            let g = grad_cos.get(j, c);
            if g == 0.0 {
                continue;
            }
            let dc = cosine_grad_a(x, text.row(c), cos.get(j, c));
            for (acc, d) in grad_masked.row_mut(j).iter_mut().zip(dc) {
                *acc += g * d;
            }
        }
    }
    let fam_grads = fam.backward(images, &fam_cache, &grad_masked);

    Ok(BatchOutcome {
        contrastive: contr.value,
        cross_entropy: ce.value,
        similarity: kl.value,
        total: total_loss(contr.value, ce.value, kl.value, cfg.lambda),
        varpi,
        fam_grads,
        mlp_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::params::Parameterized;
    use crate::rng::{stream, StreamId};
    use rand_distr::{Distribution, StandardNormal};

    struct Instance {
        fam: FamModel,
        mlp: MlpModel,
        images: Matrix,
        labels: Vec<usize>,
        text: Matrix,
    }

    fn instance(b: usize, d: usize, c: usize, seed: u64) -> Instance {
        let mut rng = stream(seed, StreamId::Custom(41));
        let fam = FamModel::init(d, 1.0, true, &mut rng);
        let mlp = MlpModel::init(d, 6, c, 1.0, &mut rng);
        let mut randn =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let images = Matrix::from_vec(b, d, randn(b * d)).unwrap();
        let text = Matrix::from_vec(c, d, randn(c * d)).unwrap();
        let labels = (0..b).map(|i| (i + seed as usize) % c).collect();
        Instance {
            fam,
            mlp,
            images,
            labels,
            text,
        }
    }

    fn check_total(inst: &Instance, cfg: ObjectiveConfig) -> f64 {
        let anchors = Anchors::capture(&inst.fam, &inst.mlp);
        let at = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &cfg,
            Some(&anchors),
        )
        .unwrap();
        let cfg = ObjectiveConfig {
            fixed_varpi: Some(at.varpi),
            ..cfg
        };
        let n_fam = inst.fam.num_params();
        let theta = [inst.fam.flat(), inst.mlp.flat()].concat();
        let f = |t: &[f64]| {
            let mut fam = inst.fam.clone();
            let mut mlp = inst.mlp.clone();
            fam.set_flat(&t[..n_fam])?;
            mlp.set_flat(&t[n_fam..])?;
            let out = batch_objective(
                &fam,
                &mlp,
                &inst.images,
                &inst.labels,
                &inst.text,
                &cfg,
                Some(&anchors),
            )?;
            let grad = out
                .fam_grads
                .concat()
                .into_iter()
                .chain(out.mlp_grads.concat())
                .collect();
            Ok((out.total, grad))
        };
        grad_check(f, &theta, 1e-5).unwrap()
    }

    #[test]
    fn total_objective_gradient_matches_fd() {
        for tau in [0.5, 0.01] {
            let cfg = ObjectiveConfig {
                tau,
                ..ObjectiveConfig::default()
            };
            for seed in 0..3 {
                let inst = instance(4, 4, 3, seed);
                let err = check_total(&inst, cfg);
                assert!(err < 1e-4, "tau {tau} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn fixed_varpi_overrides_entropy_ratio() {
        let inst = instance(4, 4, 3, 5);
        let free = ObjectiveConfig::default();
        let a = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &free,
            None,
        )
        .unwrap();
        let pinned = ObjectiveConfig {
            fixed_varpi: Some(a.varpi),
            ..free
        };
        let b = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &pinned,
            None,
        )
        .unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.fam_grads, b.fam_grads);
        let other = ObjectiveConfig {
            fixed_varpi: Some(1.0 - a.varpi),
            ..free
        };
        let c = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &other,
            None,
        )
        .unwrap();
        assert_eq!(c.varpi, 1.0 - a.varpi);
    }

    #[test]
    fn relaxed_matches_hard_at_anchor() {
        let inst = instance(4, 4, 3, 9);
        let cfg = ObjectiveConfig::default();
        let anchors = Anchors::capture(&inst.fam, &inst.mlp);
        let hard = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &cfg,
            None,
        )
        .unwrap();
        let relaxed = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &cfg,
            Some(&anchors),
        )
        .unwrap();
        assert_eq!(hard.total, relaxed.total);
        assert_eq!(hard.fam_grads, relaxed.fam_grads);
        assert_eq!(hard.mlp_grads, relaxed.mlp_grads);
    }

    #[test]
    fn lambda_zero_decouples_when_detached() {
        let inst = instance(4, 4, 2, 3);
        let cfg = ObjectiveConfig {
            lambda: 0.0,
            detach_mlp_input: true,
            ..ObjectiveConfig::default()
        };
        let a = batch_objective(
            &inst.fam,
            &inst.mlp,
            &inst.images,
            &inst.labels,
            &inst.text,
            &cfg,
            None,
        )
        .unwrap();
        let mut other = instance(4, 4, 2, 77).mlp;
        other.hidden.bias[0] += 1.0;
        let b = batch_objective(
            &inst.fam,
            &other,
            &inst.images,
            &inst.labels,
            &inst.text,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(a.fam_grads, b.fam_grads);
    }
}
