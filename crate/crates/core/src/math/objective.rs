use super::{dot, CompoundInstance, CompoundWeight, InteractionKind, InteractionMatrix, Label, MathError};

/// `w^T phi` for the instance, which only touches the instance's own block.
pub fn margin(w: &CompoundWeight, inst: &CompoundInstance) -> f64 {
    debug_assert_eq!(w.dim(), inst.features.len());
    dot(w.block(inst.task), &inst.features)
}

pub fn predict(w: &CompoundWeight, inst: &CompoundInstance) -> Label {
    Label::from_sign(margin(w, inst))
}

/// `-y / (1 + exp(y m))`, the scalar that multiplies the instance features in
/// the logistic gradient. Lies in (-1, 1) with sign opposite to `y`.
pub fn logistic_factor(y: Label, m: f64) -> f64 {
    let y = y.value();
    let z = y * m;
    if z >= 0.0 {
        let e = (-z).exp();
        -y * e / (1.0 + e)
    } else {
        -y / (1.0 + z.exp())
    }
}

/// `log(1 + exp(-y m))` without overflow.
pub fn logistic_loss(y: Label, m: f64) -> f64 {
    let z = y.value() * m;
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Per-round loss: logistic term plus `(lambda/2) w^T (A ⊗ I) w`.
pub fn instance_loss(
    w: &CompoundWeight,
    inst: &CompoundInstance,
    forward: &InteractionMatrix,
    lambda: f64,
) -> Result<f64, MathError> {
    forward.expect_kind(InteractionKind::Forward)?;
    let reg = forward.quadratic_form(w)?;
    Ok(logistic_loss(inst.label, margin(w, inst)) + 0.5 * lambda * reg)
}

/// Gradient of the per-round loss in the task-coupled geometry, i.e. the
/// Euclidean gradient premultiplied by `A^-1 ⊗ I`.
///
/// Block `j` is `c_j * factor * x + lambda * w_j` where `c_j` is the inverse
/// diagonal scalar for the instance's own task and the off-diagonal scalar for
/// every other task. The regularizer enters as plain `lambda * w`.
pub fn compound_gradient(
    w: &CompoundWeight,
    inst: &CompoundInstance,
    inverse: &InteractionMatrix,
    lambda: f64,
) -> Result<Vec<f64>, MathError> {
    inverse.expect_kind(InteractionKind::Inverse)?;
    w.check_shape(inverse.tasks(), inst.features.len())?;
    let factor = logistic_factor(inst.label, margin(w, inst));
    let raw: Vec<f64> = inst.features.iter().map(|x| factor * x).collect();

    let d = w.dim();
    let mut out = Vec::with_capacity(w.as_slice().len());
    for (j, wj) in w.blocks().enumerate() {
        let c = if j == inst.task {
            inverse.diag()
        } else {
            inverse.offdiag()
        };
        out.extend(raw.iter().zip(wj).map(|(r, wv)| c * r + lambda * wv));
    }
    debug_assert_eq!(out.len(), inverse.tasks() * d);
    Ok(out)
}

/// `phi_s^T (A^-1 ⊗ I) phi_t`.
pub fn kernel_product(
    s: &CompoundInstance,
    t: &CompoundInstance,
    inverse: &InteractionMatrix,
) -> Result<f64, MathError> {
    inverse.expect_kind(InteractionKind::Inverse)?;
    if s.features.len() != t.features.len() {
        return Err(MathError::DimensionMismatch {
            expected: s.features.len(),
            found: t.features.len(),
        });
    }
    Ok(inverse.entry(s.task, t.task) * dot(&s.features, &t.features))
}

/// Mean logistic loss over `data` plus `(lambda/2) w^T (A ⊗ I) w`.
pub fn empirical_risk(
    w: &CompoundWeight,
    data: &[CompoundInstance],
    forward: &InteractionMatrix,
    lambda: f64,
) -> Result<f64, MathError> {
    forward.expect_kind(InteractionKind::Forward)?;
    if data.is_empty() {
        return Err(MathError::EmptyData);
    }
    let mean = data
        .iter()
        .map(|inst| logistic_loss(inst.label, margin(w, inst)))
        .sum::<f64>()
        / data.len() as f64;
    Ok(mean + 0.5 * lambda * forward.quadratic_form(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn inst(task: usize, x: Vec<f64>, y: Label) -> CompoundInstance {
        CompoundInstance::new(task, x, y)
    }

    #[test]
    fn margin_examples() {
        let zero = CompoundWeight::zeros(2, 2);
        let i = inst(1, vec![1.0, 1.0], Label::Positive);
        assert_eq!(margin(&zero, &i), 0.0);

        let w = CompoundWeight::from_blocks(&[vec![1.0, 2.0], vec![3.0, 4.0]], 0).unwrap();
        assert_eq!(margin(&w, &i), 7.0);

        let x = vec![0.6, 0.8];
        let w = CompoundWeight::from_blocks(&[vec![0.0, 0.0], x.clone()], 0).unwrap();
        assert!((margin(&w, &inst(1, x, Label::Positive)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let w = CompoundWeight::from_blocks(&[vec![1.0, 2.0], vec![3.0, 4.0]], 0).unwrap();
        assert_eq!(
            predict(&w, &inst(1, vec![1.0, 1.0], Label::Negative)),
            Label::Positive
        );
        let w = CompoundWeight::from_blocks(&[vec![-0.3]], 0).unwrap();
        assert_eq!(
            predict(&w, &inst(0, vec![1.0], Label::Positive)),
            Label::Negative
        );
        let zero = CompoundWeight::zeros(1, 1);
        assert_eq!(
            predict(&zero, &inst(0, vec![5.0], Label::Negative)),
            Label::Positive
        );
    }

    #[test]
    fn logistic_factor_examples() {
        assert_eq!(logistic_factor(Label::Positive, 0.0), -0.5);
        assert_eq!(logistic_factor(Label::Negative, 0.0), 0.5);
        let sat = logistic_factor(Label::Positive, 1000.0);
        assert!(sat.is_finite() && sat.abs() < 1e-300);
        let wrong = logistic_factor(Label::Positive, -1000.0);
        assert!((wrong + 1.0).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_is_stable() {
        assert!((logistic_loss(Label::Positive, 0.0) - LN_2).abs() < 1e-15);
        assert!((logistic_loss(Label::Positive, -1000.0) - 1000.0).abs() < 1e-9);
        assert!(logistic_loss(Label::Positive, 1000.0) >= 0.0);
        assert!(logistic_loss(Label::Negative, 1000.0).is_finite());
    }

    #[test]
    fn instance_loss_examples() {
        let f = InteractionMatrix::forward(3, 6.0).unwrap();
        let zero = CompoundWeight::zeros(3, 2);
        let l = instance_loss(&zero, &inst(2, vec![1.0, -4.0], Label::Negative), &f, 0.5).unwrap();
        assert!((l - LN_2).abs() < 1e-15);

        // lambda = 0 leaves the pure logistic term.
        let w = CompoundWeight::from_blocks(&[vec![0.5, 0.1], vec![1.0, 1.0], vec![2.0, 0.0]], 0)
            .unwrap();
        let i = inst(1, vec![0.2, -0.3], Label::Negative);
        let m = margin(&w, &i);
        let l = instance_loss(&w, &i, &f, 0.0).unwrap();
        assert!((l - (1.0 + m.exp()).ln()).abs() < 1e-15);

        // K = 1, lambda = 1, w = 2, x = 1, y = +1: log(1 + e^-2) + 2.
        let f1 = InteractionMatrix::forward(1, 3.0).unwrap();
        let w = CompoundWeight::from_blocks(&[vec![2.0]], 0).unwrap();
        let l = instance_loss(&w, &inst(0, vec![1.0], Label::Positive), &f1, 1.0).unwrap();
        assert!((l - ((1.0 + (-2.0f64).exp()).ln() + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn instance_loss_requires_forward() {
        let inv = InteractionMatrix::inverse(1, 0.0).unwrap();
        let w = CompoundWeight::zeros(1, 1);
        assert!(matches!(
            instance_loss(&w, &inst(0, vec![1.0], Label::Positive), &inv, 0.0),
            Err(MathError::WrongKind { .. })
        ));
    }

    #[test]
    fn compound_gradient_hand_example() {
        let inv = InteractionMatrix::inverse(2, 1.0).unwrap();
        let w = CompoundWeight::zeros(2, 3);
        let x = vec![8.0, -16.0, 4.0];
        let g = compound_gradient(&w, &inst(0, x, Label::Positive), &inv, 0.0).unwrap();
        // -3x/8 and -x/8
        assert_eq!(g, vec![-3.0, 6.0, -1.5, -1.0, 2.0, -0.5]);
    }

    #[test]
    fn compound_gradient_saturates() {
        let inv = InteractionMatrix::inverse(2, 1.0).unwrap();
        let w = CompoundWeight::from_blocks(&[vec![1000.0], vec![0.0]], 0).unwrap();
        let g = compound_gradient(&w, &inst(0, vec![1.0], Label::Positive), &inv, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn kernel_product_examples() {
        let inv = InteractionMatrix::inverse(2, 1.0).unwrap();
        let s = inst(0, vec![1.0, 2.0], Label::Positive);
        let t = inst(0, vec![3.0, -1.0], Label::Negative);
        let u = inst(1, vec![3.0, -1.0], Label::Negative);
        assert_eq!(kernel_product(&s, &t, &inv).unwrap(), 0.75);
        assert_eq!(kernel_product(&s, &u, &inv).unwrap(), 0.25);
        let o = inst(1, vec![-2.0, 1.0], Label::Positive);
        assert_eq!(kernel_product(&s, &o, &inv).unwrap(), 0.0);
    }

    #[test]
    fn empirical_risk_examples() {
        let f = InteractionMatrix::forward(2, 1.0).unwrap();
        let zero = CompoundWeight::zeros(2, 1);
        let data = vec![
            inst(0, vec![1.0], Label::Positive),
            inst(1, vec![-2.0], Label::Negative),
        ];
        assert!((empirical_risk(&zero, &data, &f, 0.3).unwrap() - LN_2).abs() < 1e-15);

        let w = CompoundWeight::from_blocks(&[vec![0.7], vec![-0.2]], 0).unwrap();
        let single = empirical_risk(&w, &data[..1], &f, 0.3).unwrap();
        assert!((single - instance_loss(&w, &data[0], &f, 0.3).unwrap()).abs() < 1e-15);

        let both = empirical_risk(&w, &data, &f, 0.0).unwrap();
        let l0 = (1.0 + (-0.7f64).exp()).ln();
        let l1 = (1.0 + 0.4f64.exp()).ln();
        assert!((both - 0.5 * (l0 + l1)).abs() < 1e-15);

        assert_eq!(empirical_risk(&w, &[], &f, 0.0), Err(MathError::EmptyData));
    }
}
