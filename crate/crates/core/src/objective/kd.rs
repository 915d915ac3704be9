use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graph nodes of one knowledge-distillation evaluation.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
}

/// `(1−λ)·CE(z_s, y) + λ·τ²·KL(softmax(z_t/τ) ‖ softmax(z_s/τ))`.
///
/// Both parts are always evaluated; the teacher logits are constants.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<KdTerms> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let ce = g.cross_entropy(student_logits, labels)?;
    let kl = g.kl_div(student_logits, teacher_logits, T::of(tau))?;
    let hard = g.scale(ce, T::of(1.0 - lambda));
    let soft = g.scale(kl, T::of(lambda * tau * tau));
    let total = g.add(hard, soft)?;
    Ok(KdTerms { total, ce, kl })
}

/// Value-level [`kd_loss`].
pub fn kd_loss_value<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let terms = kd_loss(&mut g, s, teacher_logits, labels, lambda, tau)?;
    g.value(terms.total).item()
}

/// Picks λ from a capacity (or accuracy) comparison: pure soft-label training
/// when the teacher is at least as strong as the student, an even mix otherwise.
/// An explicit override always wins.
pub fn resolve_lambda(teacher_metric: f64, student_metric: f64, explicit: Option<f64>) -> f64 {
    match explicit {
        Some(l) => l,
        None if teacher_metric >= student_metric => 1.0,
        None => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_logits_with_soft_labels_is_zero() {
        let z = t(&[2, 3], &[0.1, 2.0, -1.0, 0.5, 0.5, 3.0]);
        assert_eq!(kd_loss_value(&z, &z, &[0, 1], 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(kd_loss_value(&z, &z, &[0, 1], 1.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn hard_label_reduction() {
        let s = t(&[1, 3], &[1.0, 2.0, 0.5]);
        let teacher = t(&[1, 3], &[5.0, -1.0, 0.0]);
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let want = lse - 2.0;
        let got = kd_loss_value(&s, &teacher, &[1], 0.0, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mixed_two_class_case() {
        let s = t(&[1, 2], &[0.3, -0.7]);
        let teacher = t(&[1, 2], &[1.2, 0.4]);
        // scripted: p_s = softmax(s), p_t = softmax(teacher)
        let ps0 = 1.0 / (1.0 + (-1.0f64).exp());
        let ps = [ps0, 1.0 - ps0];
        let pt0 = 1.0 / (1.0 + (-0.8f64).exp());
        let pt = [pt0, 1.0 - pt0];
        let ce = -ps[0].ln();
        let kl = pt[0] * (pt[0] / ps[0]).ln() + pt[1] * (pt[1] / ps[1]).ln();
        let want = 0.5 * ce + 0.5 * kl;
        let got = kd_loss_value(&s, &teacher, &[0], 0.5, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let z = t(&[1, 2], &[0.0, 1.0]);
        assert!(matches!(kd_loss_value(&z, &z, &[0], 1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(kd_loss_value(&z, &z, &[0], 1.5, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_policy() {
        assert_eq!(resolve_lambda(47e6, 5e6, None), 1.0);
        assert_eq!(resolve_lambda(12e6, 22e6, None), 0.5);
        assert_eq!(resolve_lambda(12e6, 22e6, Some(0.3)), 0.3);
        assert_eq!(resolve_lambda(1.0, 1.0, None), 1.0);
    }
}
