//! Phase-1 adaptive class-balanced adversarial loss and the phase-2 gating
//! objective.
//!
//! The phase-1 loss is `L = L_A + lambda1 * L_S + lambda2 * L_R`:
//!
//! * `L_A` — class-weighted cross-entropy on adversarial inputs, with
//!   per-class weights `(1 - gamma) / (1 - gamma^{n_c})` smoothed across
//!   epochs and normalized onto the simplex;
//! * `L_S` — KL divergence between benign and adversarial output
//!   distributions;
//! * `L_R` — squared distance between the client's adapter vector and a
//!   global/expert reference blend.
//!
//! Batch reduction is the mean, which keeps the lambda weights scale-free
//! across dataset sizes.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{blend, ClientModel, FlatVector, Gradients};
use crate::Scalar;

/// Probability floor applied before logarithms.
const PROB_FLOOR: f64 = 1e-12;

/// Per-class weights: raw imbalance weights, their smoothed trajectory, and
/// the normalized weights actually applied to the loss.
#[derive(Debug, Clone)]
pub struct ClassWeights<F> {
    pub base: Vec<F>,
    pub adaptive: Vec<F>,
    pub normalized: Vec<F>,
    pub gamma: F,
    pub eps_smooth: F,
    pub epoch: usize,
}

impl<F: Scalar> ClassWeights<F> {
    /// Starts class-agnostic: the smoothed weights are uniform `1/C`.
    pub fn new(num_classes: usize, gamma: F, eps_smooth: F) -> Result<Self> {
        check_gamma(gamma)?;
        check_unit("eps_smooth", eps_smooth)?;
        let uniform = F::one() / F::from_f64_c(num_classes as f64);
        Ok(Self {
            base: vec![F::one(); num_classes],
            adaptive: vec![uniform; num_classes],
            normalized: vec![uniform; num_classes],
            gamma,
            eps_smooth,
            epoch: 0,
        })
    }

    /// One epoch tick: recompute base weights from the class histogram,
    /// smooth, normalize.
    pub fn advance(&mut self, counts: &[usize]) -> Result<()> {
        let base: Vec<F> = counts
            .iter()
            .map(|&n| base_weight(n, self.gamma))
            .collect::<Result<_>>()?;
        self.adaptive = smooth_weights(&self.adaptive, &base, self.eps_smooth);
        self.normalized = normalize_weights(&self.adaptive)?;
        self.base = base;
        self.epoch += 1;
        Ok(())
    }
}

fn check_gamma<F: Scalar>(gamma: F) -> Result<()> {
    let g = gamma.to_f64_c();
    if !(0.5..=0.99).contains(&g) {
        return Err(Error::HyperparameterRange {
            name: "gamma",
            value: g,
            range: "[0.5, 0.99]",
        });
    }
    Ok(())
}

fn check_unit<F: Scalar>(name: &'static str, v: F) -> Result<()> {
    let x = v.to_f64_c();
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::HyperparameterRange {
            name,
            value: x,
            range: "[0, 1]",
        });
    }
    Ok(())
}

/// Class imbalance weight `(1 - gamma) / (1 - gamma^{n_c})`.
///
/// A class absent from the client (`n_c = 0`) gets weight 1: it contributes
/// no samples, so the weight is inert, and the formula's denominator would
/// vanish.
pub fn base_weight<F: Scalar>(n_c: usize, gamma: F) -> Result<F> {
    check_gamma(gamma)?;
    if n_c == 0 {
        return Ok(F::one());
    }
    let g_pow = gamma.powi(n_c as i32);
    Ok((F::one() - gamma) / (F::one() - g_pow))
}

/// `h_ada(t) = eps * h_ada(t-1) + (1 - eps) * h_base(t)`, elementwise.
pub fn smooth_weights<F: Scalar>(prev_adaptive: &[F], base_now: &[F], eps_smooth: F) -> Vec<F> {
    debug_assert_eq!(prev_adaptive.len(), base_now.len());
    prev_adaptive
        .iter()
        .zip(base_now.iter())
        .map(|(&prev, &base)| eps_smooth * prev + (F::one() - eps_smooth) * base)
        .collect()
}

/// Divides by the sum so the weights lie on the probability simplex.
pub fn normalize_weights<F: Scalar>(adaptive: &[F]) -> Result<Vec<F>> {
    let total: F = adaptive.iter().copied().sum();
    if total <= F::zero() {
        return Err(Error::DegenerateWeights);
    }
    Ok(adaptive.iter().map(|&w| w / total).collect())
}

/// Row-wise softmax with max-subtraction.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

fn floored_ln<F: Scalar>(p: F) -> F {
    p.max(F::from_f64_c(PROB_FLOOR)).ln()
}

/// Mean weighted cross-entropy and its logits gradient.
///
/// `weights = None` means every sample weighs 1 (plain cross-entropy).
pub fn weighted_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    weights: Option<&[F]>,
) -> Result<(F, Array2<F>)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(Error::Config(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let inv_batch = F::one() / F::from_f64_c(batch as f64);
    let probs = softmax(logits);
    let mut dlogits = Array2::zeros((batch, classes));
    let mut total = F::zero();
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: classes,
            });
        }
        let h = weights.map_or(F::one(), |w| w[y]);
        let sample_loss = -h * floored_ln(probs[[b, y]]);
        if !sample_loss.is_finite() {
            return Err(Error::NonFiniteLoss { index: b });
        }
        total += sample_loss;
        for j in 0..classes {
            let indicator = if j == y { F::one() } else { F::zero() };
            dlogits[[b, j]] = h * (probs[[b, j]] - indicator) * inv_batch;
        }
    }
    Ok((total * inv_batch, dlogits))
}

/// Class-weighted adversarial cross-entropy, mean over the batch.
pub fn loss_a<F: Scalar>(
    model: &ClientModel<F>,
    x_adv: &Array2<F>,
    labels: &[usize],
    weights: &ClassWeights<F>,
) -> Result<(F, Gradients<F>)> {
    let out = model.gradients(x_adv, |logits| {
        weighted_cross_entropy(logits, labels, Some(&weights.normalized))
    })?;
    Ok((out.loss, out.grads))
}

/// Mean KL divergence `KL(softmax(f(x)) || softmax(f(x_adv)))`; gradients
/// flow through both branches.
pub fn loss_s<F: Scalar>(
    model: &ClientModel<F>,
    x: &Array2<F>,
    x_adv: &Array2<F>,
) -> Result<(F, Gradients<F>)> {
    let logits_b = model.forward(x)?;
    let logits_a = model.forward(x_adv)?;
    for (idx, row) in logits_b.rows().into_iter().chain(logits_a.rows()).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                index: idx % logits_b.nrows(),
            });
        }
    }
    let (batch, classes) = logits_b.dim();
    let inv_batch = F::one() / F::from_f64_c(batch as f64);
    let p = softmax(&logits_b);
    let q = softmax(&logits_a);

    let mut value = F::zero();
    let mut d_benign = Array2::zeros((batch, classes));
    let mut d_adv = Array2::zeros((batch, classes));
    for b in 0..batch {
        let mut kl = F::zero();
        for j in 0..classes {
            kl += p[[b, j]] * (floored_ln(p[[b, j]]) - floored_ln(q[[b, j]]));
        }
        value += kl;
        for j in 0..classes {
            let log_ratio = floored_ln(p[[b, j]]) - floored_ln(q[[b, j]]);
            d_benign[[b, j]] = p[[b, j]] * (log_ratio - kl) * inv_batch;
            d_adv[[b, j]] = (q[[b, j]] - p[[b, j]]) * inv_batch;
        }
    }
    value *= inv_batch;

    let gb = model.gradients(x, move |_| Ok((F::zero(), d_benign)))?;
    let ga = model.gradients(x_adv, move |_| Ok((F::zero(), d_adv)))?;
    let mut grads = gb.grads;
    grads.add_scaled(&ga.grads, F::one());
    Ok((value, grads))
}

/// Blend of the global and expert adapter vectors: `(1-eta)*g + eta*e`.
pub fn reference_model<F: Scalar>(
    w_global: &FlatVector<F>,
    w_expert: &FlatVector<F>,
    eta: F,
) -> Result<FlatVector<F>> {
    check_unit("eta", eta)?;
    blend(w_global, w_expert, eta)
}

/// Squared distance to the reference vector, with gradient `2 (w - w_ref)`.
pub fn loss_r<F: Scalar>(
    w_local: &FlatVector<F>,
    w_ref: &FlatVector<F>,
) -> Result<(F, FlatVector<F>)> {
    let value = w_local.squared_distance(w_ref)?;
    let mut grad = w_local.clone();
    grad.add_scaled(w_ref, -F::one())?;
    grad.scale(F::from_f64_c(2.0));
    Ok((value, grad))
}

/// Scalar weights of the three phase-1 loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F> {
    pub lambda1: F,
    pub lambda2: F,
    pub eta: F,
}

impl<F: Scalar> LossWeights<F> {
    pub fn new(lambda1: F, lambda2: F, eta: F) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if v < F::zero() {
                return Err(Error::HyperparameterRange {
                    name,
                    value: v.to_f64_c(),
                    range: "[0, inf)",
                });
            }
        }
        check_unit("eta", eta)?;
        Ok(Self {
            lambda1,
            lambda2,
            eta,
        })
    }
}

/// Component values of one total-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub adversarial: F,
    pub stability: F,
    pub reference: F,
}

/// `L = L_A + lambda1 * L_S + lambda2 * L_R`, with gradients over the
/// trainable parameters. `L_R` is taken over the adapter vector only.
pub fn total_loss<F: Scalar>(
    model: &ClientModel<F>,
    x: &Array2<F>,
    x_adv: &Array2<F>,
    labels: &[usize],
    weights: &ClassWeights<F>,
    w_ref: &FlatVector<F>,
    lw: &LossWeights<F>,
) -> Result<(LossBreakdown<F>, Gradients<F>)> {
    let (l_adv, mut grads) = loss_a(model, x_adv, labels, weights)?;
    let (l_stab, g_stab) = loss_s(model, x, x_adv)?;
    grads.add_scaled(&g_stab, lw.lambda1);
    let local = model.flatten_adapters();
    let (l_ref, g_ref) = loss_r(&local, w_ref)?;
    grads.add_flat_scaled(&g_ref, lw.lambda2)?;
    let total = l_adv + lw.lambda1 * l_stab + lw.lambda2 * l_ref;
    Ok((
        LossBreakdown {
            total,
            adversarial: l_adv,
            stability: l_stab,
            reference: l_ref,
        },
        grads,
    ))
}

/// Phase-2 gate objective `J = L_acc - beta * L_rob + lambda3 * [sum(z) - B]_+`.
/// The penalty activates only when the budget is exceeded.
pub fn phase2_objective<F: Scalar>(
    acc_loss: F,
    rob_loss: F,
    gates: &[F],
    beta: F,
    lambda3: F,
    budget: usize,
) -> F {
    let gate_sum: F = gates.iter().copied().sum();
    let overshoot = (gate_sum - F::from_f64_c(budget as f64)).max(F::zero());
    acc_loss - beta * rob_loss + lambda3 * overshoot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, AdapterLayer, LayoutEntry};
    use crate::rng::{derive_rng, stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    /// Identity model: logits equal the input, so distributions are directly
    /// controllable through `x`.
    fn identity_model(classes: usize) -> ClientModel<f64> {
        let layer = AdapterLayer::new(
            ndarray::Array2::eye(classes),
            ndarray::Array2::from_shape_fn((classes, 1), |_| 0.3),
            ndarray::Array2::zeros((1, classes)),
            Activation::Identity,
        )
        .expect("layer");
        ClientModel::new(0, vec![layer], ndarray::Array2::eye(classes), classes).expect("model")
    }

    #[test]
    fn base_weight_point_checks() {
        assert_eq!(base_weight(1, 0.9).unwrap(), 1.0);
        // n -> inf limit is 1 - gamma.
        assert_abs_diff_eq!(base_weight(100_000, 0.9).unwrap(), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(base_weight(2, 0.9).unwrap(), 0.1 / 0.19, epsilon = 1e-12);
        assert_eq!(base_weight(0, 0.9).unwrap(), 1.0);
        assert!(base_weight(3, 0.3).is_err());
        assert!(base_weight(3, 1.0).is_err());
    }

    #[test]
    fn smoothing_fixed_point_and_direct_arithmetic() {
        let b = [0.25, 0.75];
        let out = smooth_weights(&b, &b, 0.9);
        assert_abs_diff_eq!(out[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.75, epsilon = 1e-15);

        let out = smooth_weights(&[1.0], &[0.0], 0.9);
        assert_abs_diff_eq!(out[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn smoothing_matches_geometric_closed_form() {
        let eps: f64 = 0.8;
        let h0 = 1.0;
        let b = 0.3;
        let mut h = vec![h0];
        for _ in 0..10 {
            h = smooth_weights(&h, &[b], eps);
        }
        let closed = eps.powi(10) * h0 + (1.0 - eps.powi(10)) * b;
        assert_abs_diff_eq!(h[0], closed, epsilon = 1e-12);
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_weights(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize_weights(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let mut rng = derive_rng(4, &[stream::INIT]);
        let v: Vec<f64> = (0..17).map(|_| rng.gen::<f64>() + 0.01).collect();
        let n = normalize_weights(&v).unwrap();
        let naive_sum: f64 = v.iter().sum();
        for (a, b) in n.iter().zip(v.iter()) {
            assert_abs_diff_eq!(*a, b / naive_sum, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(n.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            normalize_weights(&[0.0, 0.0]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn class_weights_stay_on_simplex_while_advancing() {
        let mut w = ClassWeights::<f64>::new(4, 0.9, 0.9).expect("weights");
        for epoch in 1..=25 {
            w.advance(&[50, 5, 0, 500]).expect("advance");
            assert_eq!(w.epoch, epoch);
            assert_abs_diff_eq!(w.normalized.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(w.normalized.iter().all(|&x| x >= 0.0));
            assert!(w.base.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
        // Rare classes end up upweighted relative to frequent ones.
        assert!(w.normalized[1] > w.normalized[0]);
        assert!(w.normalized[0] > w.normalized[3]);
        // Absent class keeps the inert base weight 1.
        assert_eq!(w.base[2], 1.0);
    }

    #[test]
    fn loss_a_is_zero_when_correct_class_has_all_mass() {
        let model = identity_model(2);
        let weights = ClassWeights::new(2, 0.9, 0.9).expect("weights");
        // Huge margin for the true class drives p(y) to 1.
        let x = array![[50.0, 0.0], [0.0, 50.0]];
        let (value, _) = loss_a(&model, &x, &[0, 1], &weights).expect("loss");
        assert_abs_diff_eq!(value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_a_half_weight_at_p_equals_inv_e() {
        let model = identity_model(2);
        let mut weights = ClassWeights::new(2, 0.9, 0.9).expect("weights");
        weights.normalized = vec![0.5, 0.5];
        // softmax([0, ln(e-1)])[0] = 1/e, so CE = 1 and loss = 0.5 * 1.
        let x = array![[0.0, (std::f64::consts::E - 1.0).ln()]];
        let (value, _) = loss_a(&model, &x, &[0], &weights).expect("loss");
        assert_abs_diff_eq!(value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn loss_a_scales_linearly_in_the_weights() {
        let model = identity_model(3);
        let mut rng = derive_rng(7, &[stream::INIT]);
        let x = ndarray::Array2::from_shape_fn((6, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let labels = [0, 1, 2, 0, 1, 2];
        let mut w1 = ClassWeights::new(3, 0.9, 0.9).expect("w");
        w1.normalized = vec![0.2, 0.3, 0.5];
        let mut w2 = w1.clone();
        w2.normalized = vec![0.4, 0.6, 1.0];
        let (v1, _) = loss_a(&model, &x, &labels, &w1).expect("l1");
        let (v2, _) = loss_a(&model, &x, &labels, &w2).expect("l2");
        assert_abs_diff_eq!(v2, 2.0 * v1, epsilon = 1e-12);
    }

    #[test]
    fn loss_a_rejects_out_of_range_labels() {
        let model = identity_model(2);
        let weights = ClassWeights::new(2, 0.9, 0.9).expect("weights");
        let x = array![[0.0, 0.0]];
        assert!(matches!(
            loss_a(&model, &x, &[2], &weights),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn loss_s_is_zero_for_identical_inputs() {
        let model = identity_model(3);
        let x = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let (value, grads) = loss_s(&model, &x, &x).expect("loss");
        assert_abs_diff_eq!(value, 0.0, epsilon = 1e-12);
        // Identical distributions: the two branches cancel exactly.
        assert!(grads.to_vec().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn loss_s_matches_hand_computed_kl() {
        let model = identity_model(2);
        // logits = ln(p) makes softmax reproduce p exactly.
        let p: [f64; 2] = [0.9999, 0.0001];
        let q: [f64; 2] = [0.5, 0.5];
        let x = array![[p[0].ln(), p[1].ln()]];
        let x_adv = array![[q[0].ln(), q[1].ln()]];
        let (value, _) = loss_s(&model, &x, &x_adv).expect("loss");
        let expected: f64 = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert_abs_diff_eq!(value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(value, 0.6921, epsilon = 1e-3);
    }

    #[test]
    fn kl_nonnegative_over_random_distribution_pairs() {
        let model = identity_model(4);
        let mut rng = derive_rng(12, &[stream::INIT]);
        for _ in 0..1000 {
            let x = ndarray::Array2::from_shape_fn((1, 4), |_| rng.gen::<f64>() * 6.0 - 3.0);
            let x_adv = ndarray::Array2::from_shape_fn((1, 4), |_| rng.gen::<f64>() * 6.0 - 3.0);
            let (value, _) = loss_s(&model, &x, &x_adv).expect("loss");
            assert!(value >= -1e-15, "KL must be nonnegative, got {value}");
        }
    }

    #[test]
    fn reference_model_endpoints_and_midpoint() {
        let layout = vec![LayoutEntry { layer: 0, rows: 1, cols: 1 }];
        let g = FlatVector::new(vec![0.0], layout.clone()).unwrap();
        let e = FlatVector::new(vec![2.0], layout).unwrap();
        assert_eq!(reference_model(&g, &e, 0.0).unwrap().values(), &[0.0]);
        assert_eq!(reference_model(&g, &e, 1.0).unwrap().values(), &[2.0]);
        assert_eq!(reference_model(&g, &e, 0.5).unwrap().values(), &[1.0]);
        assert!(reference_model(&g, &e, 1.5).is_err());
    }

    #[test]
    fn loss_r_cases() {
        let layout = vec![LayoutEntry { layer: 0, rows: 1, cols: 2 }];
        let a = FlatVector::new(vec![1.0, 0.0], layout.clone()).unwrap();
        let b = FlatVector::new(vec![0.0, 0.0], layout.clone()).unwrap();
        let (v, g) = loss_r(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
        let (v, g) = loss_r(&a, &b).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g.values(), &[2.0, 0.0]);

        let mut rng = derive_rng(3, &[stream::INIT]);
        let layout = vec![LayoutEntry { layer: 0, rows: 4, cols: 5 }];
        let x = FlatVector::new((0..20).map(|_| rng.gen::<f64>()).collect(), layout.clone()).unwrap();
        let y = FlatVector::new((0..20).map(|_| rng.gen::<f64>()).collect(), layout).unwrap();
        let (v, _) = loss_r(&x, &y).unwrap();
        let naive: f64 = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_abs_diff_eq!(v, naive, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_reduces_to_loss_a_without_regularizers() {
        let mut rng = derive_rng(31, &[stream::INIT]);
        let model = ClientModel::<f64>::random(0, &[3, 4], 2, 3, &mut rng).expect("model");
        let weights = ClassWeights::new(3, 0.9, 0.9).expect("weights");
        let x = ndarray::Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>());
        let x_adv = x.mapv(|v| v + 0.01);
        let labels = [0, 1, 2, 0];
        let w_ref = model.flatten_adapters().zeros_like();
        let lw = LossWeights::new(0.0, 0.0, 0.5).unwrap();
        let (breakdown, grads) =
            total_loss(&model, &x, &x_adv, &labels, &weights, &w_ref, &lw).expect("total");
        let (la, ga) = loss_a(&model, &x_adv, &labels, &weights).expect("la");
        assert_abs_diff_eq!(breakdown.total, la, epsilon = 1e-12);
        for (g, h) in grads.to_vec().iter().zip(ga.to_vec()) {
            assert_abs_diff_eq!(*g, h, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_loss_is_exactly_the_weighted_component_sum() {
        let mut rng = derive_rng(32, &[stream::INIT]);
        let mut model = ClientModel::<f64>::random(0, &[3, 5, 4], 2, 3, &mut rng).expect("model");
        for i in 0..model.num_trainable() {
            model.set_trainable(i, rng.gen::<f64>() - 0.5);
        }
        let mut weights = ClassWeights::new(3, 0.9, 0.9).expect("weights");
        weights.advance(&[7, 2, 11]).expect("advance");
        let x = ndarray::Array2::from_shape_fn((5, 3), |_| rng.gen::<f64>() * 2.0);
        let x_adv = x.mapv(|v| v + 0.05);
        let labels = [0, 1, 2, 1, 0];
        let mut w_ref = model.flatten_adapters();
        for v in w_ref.values_mut() {
            *v += 0.1;
        }
        // Production-default weighting.
        let lw = LossWeights::new(20.0, 0.001, 0.5).unwrap();
        let (breakdown, _) =
            total_loss(&model, &x, &x_adv, &labels, &weights, &w_ref, &lw).expect("total");
        let (la, _) = loss_a(&model, &x_adv, &labels, &weights).expect("la");
        let (ls, _) = loss_s(&model, &x, &x_adv).expect("ls");
        let (lr, _) = loss_r(&model.flatten_adapters(), &w_ref).expect("lr");
        assert_abs_diff_eq!(breakdown.adversarial, la, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.stability, ls, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.reference, lr, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.total, la + 20.0 * ls + 0.001 * lr, epsilon = 1e-12);
    }

    #[test]
    fn phase2_objective_hinge_behaviour() {
        // Penalty inactive at or under budget.
        let j = phase2_objective(1.0, 0.5, &[0.5, 0.5, 0.9], 5.0, 1.0, 2);
        assert_abs_diff_eq!(j, 1.0 - 5.0 * 0.5, epsilon = 1e-12);
        // Two units over budget with lambda3 = 1 adds exactly 2.
        let j = phase2_objective(1.0, 0.5, &[1.0, 1.0, 1.0, 1.0], 5.0, 1.0, 2);
        assert_abs_diff_eq!(j, 1.0 - 2.5 + 2.0, epsilon = 1e-12);
    }

    /// Central finite differences over all trainable parameters.
    fn finite_diff_check<LF>(model: &mut ClientModel<f64>, analytic: &[f64], loss_of: LF)
    where
        LF: Fn(&ClientModel<f64>) -> f64,
    {
        let h = 1e-5;
        for i in 0..model.num_trainable() {
            let orig = model.trainable(i);
            model.set_trainable(i, orig + h);
            let plus = loss_of(model);
            model.set_trainable(i, orig - h);
            let minus = loss_of(model);
            model.set_trainable(i, orig);
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                ((analytic[i] - fd) / denom).abs() <= 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn component_gradients_match_finite_differences() {
        let mut rng = derive_rng(77, &[stream::INIT]);
        let mut model = ClientModel::<f64>::random(0, &[3, 6, 4], 2, 3, &mut rng).expect("model");
        for i in 0..model.num_trainable() {
            model.set_trainable(i, rng.gen::<f64>() * 0.6 - 0.3);
        }
        let mut weights = ClassWeights::new(3, 0.9, 0.9).expect("weights");
        weights.advance(&[3, 9, 1]).expect("advance");
        let x = ndarray::Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let x_adv = x.mapv(|v| v + 0.07);
        let labels = [0, 2, 1, 1];
        let mut w_ref = model.flatten_adapters();
        for v in w_ref.values_mut() {
            *v -= 0.2;
        }
        let lw = LossWeights::new(3.0, 0.4, 0.5).unwrap();

        let (_, ga) = loss_a(&model, &x_adv, &labels, &weights).expect("la");
        finite_diff_check(&mut model, &ga.to_vec(), |m| {
            loss_a(m, &x_adv, &labels, &weights).unwrap().0
        });

        let (_, gs) = loss_s(&model, &x, &x_adv).expect("ls");
        finite_diff_check(&mut model, &gs.to_vec(), |m| {
            loss_s(m, &x, &x_adv).unwrap().0
        });

        let (_, gt) = total_loss(&model, &x, &x_adv, &labels, &weights, &w_ref, &lw).expect("lt");
        finite_diff_check(&mut model, &gt.to_vec(), |m| {
            total_loss(m, &x, &x_adv, &labels, &weights, &w_ref, &lw)
                .unwrap()
                .0
                .total
        });
    }
}
