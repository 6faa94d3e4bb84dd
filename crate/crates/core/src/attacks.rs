//! Inference-time adversarial example generation (FGSM, PGD) and
//! training-time Byzantine client behaviors (label flipping, scaled fake
//! updates dragging the aggregate toward an attacker-chosen base model).

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::weighted_cross_entropy;
use crate::model::{DifferentiableModel, FlatVector};
use crate::rng::{derive_rng, stream};
use crate::Scalar;

/// L-infinity attack parameters, in input units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvPerturbation<F> {
    /// Perturbation budget.
    pub epsilon: F,
    /// Per-iteration step size.
    pub step_size: F,
    /// Number of signed-gradient steps (0 disables the attack).
    pub iterations: usize,
    /// Start from a uniform point inside the epsilon box.
    pub random_start: bool,
    /// Valid input range `(lo, hi)`.
    pub clamp: (F, F),
}

impl<F: Scalar> AdvPerturbation<F> {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < F::zero() {
            return Err(Error::HyperparameterRange {
                name: "epsilon",
                value: self.epsilon.to_f64_c(),
                range: "[0, inf)",
            });
        }
        if self.step_size < F::zero() {
            return Err(Error::HyperparameterRange {
                name: "step_size",
                value: self.step_size.to_f64_c(),
                range: "[0, inf)",
            });
        }
        if self.clamp.0 >= self.clamp.1 {
            return Err(Error::Config("clamp lo must be < hi".into()));
        }
        // Single plain step must not escape the budget (FGSM-equivalence
        // configuration).
        if self.iterations == 1 && !self.random_start && self.step_size > self.epsilon {
            return Err(Error::Config(
                "step_size must be <= epsilon for the one-step configuration".into(),
            ));
        }
        Ok(())
    }

    /// Conventional defaults for a given input range: budget `8/255` of the
    /// range, quarter-budget steps, 10 iterations, random start.
    pub fn default_for_range(lo: F, hi: F) -> Self {
        let eps = (hi - lo) * F::from_f64_c(8.0 / 255.0);
        Self {
            epsilon: eps,
            step_size: eps / F::from_f64_c(4.0),
            iterations: 10,
            random_start: true,
            clamp: (lo, hi),
        }
    }
}

/// Training-time adversary description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByzantineSpec {
    pub mode: ByzantineMode,
    pub malicious_ids: BTreeSet<usize>,
    /// Fraction of malicious clients in [0, 1].
    pub rho: f64,
    /// Multiplier applied to the fake-update direction.
    pub mpaf_scale: f64,
    /// Label permutation applied by flipping clients; must be a derangement.
    pub flip_rule: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ByzantineMode {
    None,
    LabelFlip,
    Mpaf,
}

impl ByzantineSpec {
    pub fn none() -> Self {
        Self {
            mode: ByzantineMode::None,
            malicious_ids: BTreeSet::new(),
            rho: 0.0,
            mpaf_scale: 0.0,
            flip_rule: Vec::new(),
        }
    }

    /// Draws `round(rho * n)` malicious ids and uses the rotation
    /// `y -> (y + 1) mod C` as the flip rule.
    pub fn sample(
        mode: ByzantineMode,
        rho: f64,
        num_clients: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::HyperparameterRange {
                name: "rho",
                value: rho,
                range: "[0, 1]",
            });
        }
        let count = (rho * num_clients as f64).round() as usize;
        let mut ids: Vec<usize> = (0..num_clients).collect();
        let mut rng = derive_rng(seed, &[stream::BYZANTINE]);
        ids.shuffle(&mut rng);
        let malicious_ids: BTreeSet<usize> = ids.into_iter().take(count).collect();
        let spec = Self {
            mode,
            malicious_ids,
            rho,
            mpaf_scale: 10.0,
            flip_rule: (0..num_classes).map(|c| (c + 1) % num_classes).collect(),
        };
        spec.validate(num_clients, num_classes)?;
        Ok(spec)
    }

    pub fn validate(&self, num_clients: usize, num_classes: usize) -> Result<()> {
        if self.mode == ByzantineMode::None {
            return Ok(());
        }
        let expected = (self.rho * num_clients as f64).round() as usize;
        if self.malicious_ids.len() != expected {
            return Err(Error::Config(format!(
                "{} malicious ids but rho*N rounds to {expected}",
                self.malicious_ids.len()
            )));
        }
        if self.malicious_ids.iter().any(|&id| id >= num_clients) {
            return Err(Error::Config("malicious id out of range".into()));
        }
        if self.mode == ByzantineMode::LabelFlip {
            check_derangement(&self.flip_rule, num_classes)?;
        }
        Ok(())
    }

    pub fn is_malicious(&self, client_id: usize) -> bool {
        self.mode != ByzantineMode::None && self.malicious_ids.contains(&client_id)
    }
}

fn check_derangement(rule: &[usize], num_classes: usize) -> Result<()> {
    if rule.len() != num_classes {
        return Err(Error::Config(format!(
            "flip rule length {} != {num_classes} classes",
            rule.len()
        )));
    }
    let mut seen = vec![false; num_classes];
    for (from, &to) in rule.iter().enumerate() {
        if to >= num_classes || seen[to] {
            return Err(Error::Config("flip rule is not a permutation".into()));
        }
        seen[to] = true;
        if to == from {
            return Err(Error::NotADerangement { fixed_point: from });
        }
    }
    Ok(())
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn input_ce_gradient<F: Scalar, M: DifferentiableModel<F>>(
    model: &M,
    x: &Array2<F>,
    labels: &[usize],
) -> Result<Array2<F>> {
    let logits = model.logits(x)?;
    let (_, dlogits) = weighted_cross_entropy(&logits, labels, None)?;
    let grad = model.input_gradient(x, &dlogits)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(grad)
}

/// One signed-gradient step of size epsilon:
/// `x_adv = clamp(x + epsilon * sign(grad_x CE))`.
pub fn fgsm<F: Scalar, M: DifferentiableModel<F>>(
    model: &M,
    x: &Array2<F>,
    labels: &[usize],
    p: &AdvPerturbation<F>,
) -> Result<Array2<F>> {
    p.validate()?;
    let grad = input_ce_gradient(model, x, labels)?;
    let mut x_adv = x.clone();
    x_adv.zip_mut_with(&grad, |v, &g| {
        *v = (*v + p.epsilon * sign(g)).max(p.clamp.0).min(p.clamp.1);
    });
    Ok(x_adv)
}

/// Iterated signed-gradient steps, each projected back onto the
/// epsilon box around `x` and clamped to the input range.
pub fn pgd<F: Scalar, M: DifferentiableModel<F>, R: Rng>(
    model: &M,
    x: &Array2<F>,
    labels: &[usize],
    p: &AdvPerturbation<F>,
    rng: &mut R,
) -> Result<Array2<F>> {
    p.validate()?;
    if p.iterations == 0 {
        return Ok(x.clone());
    }
    let mut x_adv = x.clone();
    if p.random_start {
        for v in x_adv.iter_mut() {
            let u: f64 = rng.gen();
            *v += p.epsilon * F::from_f64_c(2.0 * u - 1.0);
        }
        project(&mut x_adv, x, p);
    }
    for _ in 0..p.iterations {
        let grad = input_ce_gradient(model, &x_adv, labels)?;
        x_adv.zip_mut_with(&grad, |v, &g| *v += p.step_size * sign(g));
        project(&mut x_adv, x, p);
    }
    Ok(x_adv)
}

fn project<F: Scalar>(x_adv: &mut Array2<F>, x: &Array2<F>, p: &AdvPerturbation<F>) {
    x_adv.zip_mut_with(x, |v, &orig| {
        *v = (*v)
            .max(orig - p.epsilon)
            .min(orig + p.epsilon)
            .max(p.clamp.0)
            .min(p.clamp.1);
    });
}

/// Maps labels through the flip rule; features untouched.
pub fn apply_label_flip<F: Scalar>(ds: &Dataset<F>, spec: &ByzantineSpec) -> Result<Dataset<F>> {
    if spec.mode != ByzantineMode::LabelFlip {
        return Err(Error::Config("byzantine mode is not label-flip".into()));
    }
    check_derangement(&spec.flip_rule, ds.num_classes())?;
    let labels = ds.labels().iter().map(|&y| spec.flip_rule[y]).collect();
    Dataset::new(
        ds.features().clone(),
        labels,
        format!("{}/flipped", ds.name),
        ds.num_classes(),
    )
}

/// Fake upload `g + scale * (target - g)` dragging aggregation toward an
/// attacker-chosen base model.
pub fn mpaf_update<F: Scalar>(
    current_global: &FlatVector<F>,
    attacker_target: &FlatVector<F>,
    scale: F,
) -> Result<FlatVector<F>> {
    let mut direction = attacker_target.clone();
    direction.add_scaled(current_global, -F::one())?;
    let mut out = current_global.clone();
    out.add_scaled(&direction, scale)?;
    Ok(out)
}
