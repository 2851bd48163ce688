//! Layer nonlinearities.

use serde::{Deserialize, Serialize};

/// Nonlinearity applied to a dense layer's pre-activation outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `max(0, x)` elementwise.
    Relu,
    /// Normalized exponentials over the whole output vector. Only valid as
    /// the final layer of a network.
    Softmax,
    /// Pass-through (used by autoencoder reconstruction heads).
    Identity,
}

impl Activation {
    /// Apply the nonlinearity in place to one output row.
    ///
    /// Softmax subtracts the row maximum before exponentiating so large
    /// logits cannot overflow.
    pub fn apply(self, row: &mut [f32]) {
        match self {
            Activation::Relu => {
                for v in row {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Softmax => {
                let Some(max) = row.iter().copied().reduce(f32::max) else {
                    return;
                };
                let mut sum = 0.0f32;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row {
                    *v /= sum;
                }
            }
            Activation::Identity => {}
        }
    }

    /// Zero out gradient entries where the activation was inactive, given the
    /// *post*-activation values. For ReLU, `y > 0` identifies exactly the
    /// inputs with positive pre-activation, so no pre-activation cache is
    /// needed. Softmax has no elementwise derivative; its gradient is only
    /// produced fused with the loss at the network head.
    pub fn mask_gradient(self, post: &[f32], grad: &mut [f32]) {
        match self {
            Activation::Relu => {
                for (g, y) in grad.iter_mut().zip(post) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Identity => {}
            Activation::Softmax => {
                debug_assert!(false, "softmax gradient is handled at the network head");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut row = [-1.0f32, 0.0, 2.5];
        Activation::Relu.apply(&mut row);
        assert_eq!(row, [0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut row = [1.0f32, 2.0, 3.0];
        Activation::Softmax.apply(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|p| *p > 0.0));
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut row = [1000.0f32, 1001.0, 999.0];
        Activation::Softmax.apply(&mut row);
        assert!(row.iter().all(|p| p.is_finite()));
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_mask_uses_post_activation_sign() {
        let post = [0.0f32, 0.5, 2.0];
        let mut grad = [10.0f32, 10.0, 10.0];
        Activation::Relu.mask_gradient(&post, &mut grad);
        assert_eq!(grad, [0.0, 10.0, 10.0]);
    }

    #[test]
    fn serde_names_are_kebab_case() {
        let json = serde_json::to_string(&Activation::Relu).unwrap();
        assert_eq!(json, "\"relu\"");
        let back: Activation = serde_json::from_str("\"softmax\"").unwrap();
        assert_eq!(back, Activation::Softmax);
    }
}
