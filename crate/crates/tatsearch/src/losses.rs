//! Training losses: smooth-L1 box regression, softmax cross-entropy over
//! instance classes, and the polarization / dispersity penalties that push
//! the latent code toward informative near-binary values, plus their
//! weighted joint combination.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar loss with its gradient w.r.t. the loss input.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        LossValue { value, gradient: Vec::new() }
    }

    fn check_finite(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() || self.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("{what} produced a non-finite value")));
        }
        Ok(self)
    }
}

/// Weights balancing the joint loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

fn smooth_l1_term(z: f64) -> f64 {
    if z.abs() < 1.0 {
        0.5 * z * z
    } else {
        z.abs() - 0.5
    }
}

/// Smooth-L1 penalty summed over the four box offsets (u, v, w, h).
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> Result<LossValue> {
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("smooth_l1 inputs must be finite".into()));
    }
    let mut value = 0.0;
    let mut gradient = vec![0.0; 4];
    for d in 0..4 {
        let z = pred[d] - target[d];
        value += smooth_l1_term(z);
        gradient[d] = if z.abs() < 1.0 { z } else { z.signum() };
    }
    Ok(LossValue { value, gradient })
}

/// Numerically stable softmax (max-subtracted log-sum-exp).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// -log p(label) under the softmax of `logits`; gradient is p - one_hot.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<LossValue> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Index(format!("label {label} out of range for {k} classes")));
    }
    let data = logits.data();
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum_exp = max + data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let value = log_sum_exp - data[label];
    let mut gradient = softmax(data);
    gradient[label] -= 1.0;
    LossValue { value, gradient }.check_finite("softmax_cross_entropy")
}

/// Reciprocal of the mean squared deviation from 0.5 (plus epsilon): large
/// while code elements sit near 0.5, small once they polarize toward {0,1}.
pub fn polarization_loss(code: &[f64], epsilon: f64) -> Result<LossValue> {
    let iota = code.len();
    if iota == 0 {
        return Err(Error::Dimension("polarization_loss on an empty code".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let inner: f64 =
        code.iter().map(|&b| (b - 0.5) * (b - 0.5)).sum::<f64>() / (2.0 * iota as f64);
    let denom = inner + epsilon;
    let value = 1.0 / denom;
    // Quotient rule: d/dB_k [1/(x+eps)] with dx/dB_k = (B_k - 0.5)/iota.
    let scale = -1.0 / (denom * denom * iota as f64);
    let gradient = code.iter().map(|&b| scale * (b - 0.5)).collect();
    LossValue { value, gradient }.check_finite("polarization_loss")
}

/// Squared deviation of the mean activation from the 50% fire-rate target.
pub fn dispersity_loss(code: &[f64]) -> Result<LossValue> {
    let iota = code.len();
    if iota == 0 {
        return Err(Error::Dimension("dispersity_loss on an empty code".into()));
    }
    let dev = dispersity_raw(code);
    let value = dev * dev;
    let g = 2.0 * dev / iota as f64;
    LossValue { value, gradient: vec![g; iota] }.check_finite("dispersity_loss")
}

/// The signed mean deviation (mean activation - 0.5), kept for diagnostics.
pub fn dispersity_raw(code: &[f64]) -> f64 {
    code.iter().sum::<f64>() / code.len() as f64 - 0.5
}

/// alpha*cls + beta*pol + gamma*dis, with the gradient combined the same
/// way. Component gradients must share a length (empty means zero).
pub fn joint_loss(
    cls: &LossValue,
    pol: &LossValue,
    dis: &LossValue,
    w: &LossWeights,
) -> Result<LossValue> {
    w.validate()?;
    let value = w.alpha * cls.value + w.beta * pol.value + w.gamma * dis.value;
    let len = cls
        .gradient
        .len()
        .max(pol.gradient.len())
        .max(dis.gradient.len());
    for (name, g) in [("cls", &cls.gradient), ("pol", &pol.gradient), ("dis", &dis.gradient)] {
        if !g.is_empty() && g.len() != len {
            return Err(Error::Dimension(format!(
                "joint_loss component '{name}' gradient length {} differs from {len}",
                g.len()
            )));
        }
    }
    let mut gradient = vec![0.0; len];
    for (weight, g) in [(w.alpha, &cls.gradient), (w.beta, &pol.gradient), (w.gamma, &dis.gradient)] {
        for (o, v) in gradient.iter_mut().zip(g.iter()) {
            *o += weight * v;
        }
    }
    LossValue { value, gradient }.check_finite("joint_loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-9;

    #[test]
    fn smooth_l1_zero_at_equality() {
        let v = smooth_l1(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.gradient, vec![0.0; 4]);
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_branches() {
        let v = smooth_l1(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((v.value - 0.125).abs() < TOL);
        let v = smooth_l1(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((v.value - 1.5).abs() < TOL);
        assert_eq!(v.gradient[0], 1.0);
    }

    #[test]
    fn smooth_l1_continuous_and_c1_at_kink() {
        let eps = 1e-10;
        let at = |z: f64| smooth_l1(&[z, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((at(1.0 - eps).value - at(1.0 + eps).value).abs() < 1e-9);
        assert!((at(1.0 - eps).gradient[0] - 1.0).abs() < 1e-9);
        assert_eq!(at(1.0 + eps).gradient[0], 1.0);
        assert!((at(-1.0 + eps).gradient[0] + 1.0).abs() < 1e-9);
        assert_eq!(at(-1.0 - eps).gradient[0], -1.0);
    }

    #[test]
    fn smooth_l1_rejects_non_finite() {
        assert!(smooth_l1(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn cross_entropy_symmetric_pair() {
        let v = softmax_cross_entropy(&Tensor::from_slice(&[0.0, 0.0]), 0).unwrap();
        assert!((v.value - 2.0f64.ln()).abs() < TOL);
    }

    #[test]
    fn cross_entropy_saturated() {
        let v = softmax_cross_entropy(&Tensor::from_slice(&[50.0, 0.0]), 0).unwrap();
        assert!(v.value < 1e-20);
    }

    #[test]
    fn cross_entropy_three_way() {
        let v = softmax_cross_entropy(&Tensor::from_slice(&[1.0, 2.0, 3.0]), 2).unwrap();
        // ln(1 + e^-1 + e^-2)
        let expected = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((v.value - expected).abs() < TOL);
        assert!((v.value - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(softmax_cross_entropy(&Tensor::from_slice(&[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn polarization_closed_forms() {
        let v = polarization_loss(&[0.5; 8], 0.01).unwrap();
        assert!((v.value - 100.0).abs() < TOL);

        let v = polarization_loss(&[0.0, 1.0, 1.0, 0.0], 0.01).unwrap();
        assert!((v.value - 1.0 / 0.135).abs() < TOL);

        let v = polarization_loss(&[0.5, 1.0], 0.01).unwrap();
        assert!((v.value - 1.0 / 0.0725).abs() < TOL);
        assert!((v.value - 13.793103).abs() < 1e-6);
    }

    #[test]
    fn polarization_bounds_hold() {
        let eps = 0.01;
        let lo = 1.0 / (0.125 + eps);
        let hi = 1.0 / eps;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let code: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let v = polarization_loss(&code, eps).unwrap().value;
            assert!(v >= lo - TOL && v <= hi + TOL);
        }
        // Minimum is attained exactly on {0,1}^iota.
        let v = polarization_loss(&[1.0, 0.0, 1.0, 1.0], eps).unwrap().value;
        assert!((v - lo).abs() < TOL);
    }

    #[test]
    fn polarization_empty_is_dimension_error() {
        assert!(polarization_loss(&[], 0.01).is_err());
    }

    #[test]
    fn dispersity_closed_forms() {
        assert_eq!(dispersity_loss(&[0.5; 6]).unwrap().value, 0.0);
        assert_eq!(dispersity_loss(&[0.0, 1.0, 0.0, 1.0]).unwrap().value, 0.0);
        let v = dispersity_loss(&[1.0; 5]).unwrap();
        assert!((v.value - 0.25).abs() < TOL);
    }

    #[test]
    fn joint_loss_weighted_sums() {
        let c = LossValue::scalar(1.0);
        let p = LossValue::scalar(2.0);
        let d = LossValue::scalar(3.0);
        let v = joint_loss(&c, &p, &d, &LossWeights::default()).unwrap();
        assert_eq!(v.value, 6.0);

        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(joint_loss(&c, &p, &d, &zero).unwrap().value, 0.0);

        let w = LossWeights { alpha: 2.0, beta: 1.0, gamma: 0.5 };
        let v = joint_loss(
            &LossValue::scalar(0.5),
            &LossValue::scalar(2.0),
            &LossValue::scalar(4.0),
            &w,
        )
        .unwrap();
        assert_eq!(v.value, 5.0);
    }

    #[test]
    fn joint_loss_rejects_negative_weights() {
        let w = LossWeights { alpha: -1.0, beta: 1.0, gamma: 1.0 };
        let s = LossValue::scalar(1.0);
        assert!(matches!(joint_loss(&s, &s, &s, &w), Err(Error::Config(_))));
    }

    #[test]
    fn joint_loss_linear_in_each_weight() {
        let c = LossValue::scalar(0.7);
        let p = LossValue::scalar(1.3);
        let d = LossValue::scalar(0.2);
        let at = |alpha: f64| {
            joint_loss(&c, &p, &d, &LossWeights { alpha, beta: 1.0, gamma: 1.0 }).unwrap().value
        };
        let (f0, f1, f2) = (at(0.0), at(1.0), at(2.0));
        assert!((f2 - f1 - (f1 - f0)).abs() < TOL);
    }

    /// Central-difference check of each loss gradient.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..100 {
            // smooth_l1, sampling away from the |z| = 1 kink.
            let mut pred = [0.0; 4];
            for p in &mut pred {
                let mut z: f64 = rng.gen_range(-3.0..3.0);
                while (z.abs() - 1.0).abs() < 1e-3 {
                    z = rng.gen_range(-3.0..3.0);
                }
                *p = z;
            }
            let target = [0.0; 4];
            let analytic = smooth_l1(&pred, &target).unwrap();
            for d in 0..4 {
                let mut plus = pred;
                plus[d] += h;
                let mut minus = pred;
                minus[d] -= h;
                let fd = (smooth_l1(&plus, &target).unwrap().value
                    - smooth_l1(&minus, &target).unwrap().value)
                    / (2.0 * h);
                assert!((analytic.gradient[d] - fd).abs() < 1e-6);
            }

            // cross-entropy
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let label = rng.gen_range(0..5);
            let analytic = softmax_cross_entropy(&Tensor::from_slice(&logits), label).unwrap();
            for d in 0..5 {
                let mut plus = logits.clone();
                plus[d] += h;
                let mut minus = logits.clone();
                minus[d] -= h;
                let fd = (softmax_cross_entropy(&Tensor::from_slice(&plus), label).unwrap().value
                    - softmax_cross_entropy(&Tensor::from_slice(&minus), label).unwrap().value)
                    / (2.0 * h);
                assert!((analytic.gradient[d] - fd).abs() < 1e-6);
            }

            // polarization + dispersity
            let code: Vec<f64> = (0..8).map(|_| rng.gen_range(0.02..0.98)).collect();
            let pol = polarization_loss(&code, 0.01).unwrap();
            let dis = dispersity_loss(&code).unwrap();
            for d in 0..8 {
                let mut plus = code.clone();
                plus[d] += h;
                let mut minus = code.clone();
                minus[d] -= h;
                let fd_pol = (polarization_loss(&plus, 0.01).unwrap().value
                    - polarization_loss(&minus, 0.01).unwrap().value)
                    / (2.0 * h);
                let fd_dis = (dispersity_loss(&plus).unwrap().value
                    - dispersity_loss(&minus).unwrap().value)
                    / (2.0 * h);
                let rel = (pol.gradient[d] - fd_pol).abs()
                    / (pol.gradient[d].abs() + fd_pol.abs()).max(1e-8);
                assert!(rel < 1e-3, "polarization grad rel err {rel}");
                assert!((dis.gradient[d] - fd_dis).abs() < 1e-6);
            }
        }
    }
}
