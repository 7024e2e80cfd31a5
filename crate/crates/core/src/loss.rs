//! Focal-loss primitives shared by the depth and classification losses.

use crate::tensor::{Result, Tensor, TensorError};

/// Probabilities are clamped here before the log so a collapsed softmax
/// stays finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Scalar focal term on the probability of the true class:
/// `-alpha (1 - p)^gamma ln p`.
pub fn focal_term(p: f64, fp: FocalParams) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0);
    -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
}

fn focal_term_grad(p: f64, fp: FocalParams) -> f64 {
    if p < PROB_FLOOR {
        return 0.0;
    }
    let q = 1.0 - p;
    // d/dp of -a q^g ln p = -a (-g q^(g-1) ln p + q^g / p); the first term
    // vanishes at p = 1 for every gamma >= 0.
    let first = if q > 0.0 { fp.gamma * q.powf(fp.gamma - 1.0) * p.ln() } else { 0.0 };
    -fp.alpha * (-first + q.powf(fp.gamma) / p)
}

/// Elementwise [`focal_term`] on a tensor of true-class probabilities.
pub fn focal_on_probs(p: &Tensor, fp: FocalParams) -> Result<Tensor> {
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(TensorError::Invalid {
            op: "focal_on_probs",
            msg: "probabilities must lie in [0, 1]".into(),
        });
    }
    let out = p.data().iter().map(|&v| focal_term(v, fp)).collect();
    let x = p.clone();
    Tensor::from_op(
        "focal_on_probs",
        out,
        p.shape().to_vec(),
        vec![p.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(g, &p)| g * focal_term_grad(p, fp))
                    .collect(),
            )]
        }),
    )
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Binary focal term of one logit against a 0/1 target. Positives use
/// `-alpha (1-p)^gamma ln p`, negatives `-(1-alpha) p^gamma ln(1-p)`,
/// with `p = sigmoid(x)` evaluated in log space.
pub fn sigmoid_focal_term(x: f64, target: bool, fp: FocalParams) -> f64 {
    let (z, a) = if target { (x, fp.alpha) } else { (-x, 1.0 - fp.alpha) };
    let q = crate::tensor::stable_sigmoid(-z); // 1 - sigmoid(z)
    -a * q.powf(fp.gamma) * log_sigmoid(z)
}

fn sigmoid_focal_grad(x: f64, target: bool, fp: FocalParams) -> f64 {
    let (z, a, sign) = if target { (x, fp.alpha, 1.0) } else { (-x, 1.0 - fp.alpha, -1.0) };
    let p = crate::tensor::stable_sigmoid(z);
    let q = crate::tensor::stable_sigmoid(-z);
    // d/dz of -a q^g ln p with dp/dz = p q, dq/dz = -p q
    let d = -a * (-fp.gamma * q.powf(fp.gamma) * p * log_sigmoid(z) + q.powf(fp.gamma + 1.0));
    sign * d
}

/// Elementwise binary focal loss on logits.
pub fn sigmoid_focal(logits: &Tensor, targets: &[bool], fp: FocalParams) -> Result<Tensor> {
    if targets.len() != logits.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "sigmoid_focal",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let out = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&x, &t)| sigmoid_focal_term(x, t, fp))
        .collect();
    let x = logits.clone();
    let t = targets.to_vec();
    Tensor::from_op(
        "sigmoid_focal",
        out,
        logits.shape().to_vec(),
        vec![logits.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .zip(&t)
                    .map(|((g, &x), &t)| g * sigmoid_focal_grad(x, t, fp))
                    .collect(),
            )]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, GradcheckOptions};

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let fp = FocalParams { gamma: 0.0, alpha: 1.0 };
        assert!((focal_term(0.5, fp) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(focal_term(1.0, FocalParams::default()), 0.0);
    }

    #[test]
    fn sigmoid_focal_matches_direct_formula() {
        let fp = FocalParams::default();
        for &x in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let p = 1.0 / (1.0 + (-x as f64).exp());
            let pos = -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln();
            let neg = -(1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).ln();
            assert!((sigmoid_focal_term(x, true, fp) - pos).abs() < 1e-14);
            assert!((sigmoid_focal_term(x, false, fp) - neg).abs() < 1e-14);
        }
        // saturated logits stay finite and near zero on the right side
        assert!(sigmoid_focal_term(60.0, true, fp).abs() < 1e-40);
        assert!(sigmoid_focal_term(-60.0, false, fp).abs() < 1e-40);
        assert!(sigmoid_focal_term(-60.0, true, fp).is_finite());
    }

    #[test]
    fn focal_gradients_check() {
        let opts = GradcheckOptions::default();
        let p = Tensor::new(vec![0.1, 0.5, 0.93, 0.999], &[4]).unwrap();
        for gamma in [0.0, 0.5, 2.0] {
            let fp = FocalParams { gamma, alpha: 0.25 };
            let r = gradcheck("focal", |a| focal_on_probs(&a[0], fp)?.sum(), &[p.clone()], &opts).unwrap();
            assert!(r.passed(), "{r:?}");
        }
        let x = Tensor::new(vec![-2.0, -0.3, 0.4, 3.0, 1.1, -5.0], &[6]).unwrap();
        let t = [true, false, true, false, false, true];
        let r = gradcheck(
            "sigmoid_focal",
            |a| sigmoid_focal(&a[0], &t, FocalParams::default())?.sum(),
            &[x],
            &opts,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
