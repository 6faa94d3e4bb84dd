//! Phase 2: forward-gating layer selection on the fused model.
//!
//! The client fuses its adapters into dense layers (`w_fus`), attaches a
//! sigmoid gate per selectable unit, and alternates: an inner loop trains
//! accumulated per-unit updates through `w_eff = w_fus + z * delta` on
//! benign data; an outer loop takes one gradient step on the gate logits
//! against `J = L_acc - beta * L_rob + lambda3 * [sum(z) - B]_+`. The base
//! `w_fus` is never mutated during the search, so every outer iteration
//! starts from the phase-1 parameters exactly. The top-B gates are then
//! frozen in and only those units are retrained on benign data.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AdvPerturbation};
use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::losses::{phase2_objective, weighted_cross_entropy};
use crate::model::{ClientModel, FusedGradients, FusedModel};
use crate::rng::{derive_rng, stream};
use crate::Scalar;

/// Phase-2 configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Config<F> {
    /// Outer gate-update iterations T3.
    pub outer_iters: usize,
    /// Inner model-update steps per outer iteration T4.
    pub inner_steps: usize,
    /// Robustness pressure in the gate objective.
    pub beta: F,
    /// Budget-overshoot penalty weight.
    pub lambda3: F,
    /// Number of units allowed to unfreeze (clamped to the unit count).
    pub budget: usize,
    pub learning_rate: F,
    pub gate_learning_rate: F,
    /// Whether the classifier is a selectable unit; when false it stays
    /// frozen at its phase-1 state throughout.
    pub include_classifier: bool,
    /// Benign retraining epochs after the top-B projection.
    pub final_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the shard held out for the gate objective.
    pub holdout_fraction: f64,
    /// Regenerate the adversarial pool each outer step instead of reusing
    /// the first pool.
    pub regenerate_pool: bool,
    pub pgd: AdvPerturbation<F>,
    pub seed: u64,
}

impl<F: Scalar> Default for Phase2Config<F> {
    fn default() -> Self {
        let c = |v: f64| F::from_f64_c(v);
        Self {
            outer_iters: 10,
            inner_steps: 20,
            beta: c(5.0),
            lambda3: c(1.0),
            budget: 1,
            learning_rate: c(0.01),
            gate_learning_rate: c(0.5),
            include_classifier: true,
            final_epochs: 5,
            batch_size: 32,
            holdout_fraction: 0.1,
            regenerate_pool: true,
            pgd: AdvPerturbation::default_for_range(c(-8.0), c(8.0)),
            seed: 0,
        }
    }
}

/// Per-unit gate logits plus the selection budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector<F> {
    pub logits: Vec<F>,
    pub budget: usize,
    /// Set by the final top-B projection.
    pub selected: Option<Vec<usize>>,
}

impl<F: Scalar> GateVector<F> {
    /// Gates start neutral (logit 0, gate value 0.5).
    pub fn new(units: usize, budget: usize) -> Self {
        Self {
            logits: vec![F::zero(); units],
            budget,
            selected: None,
        }
    }

    /// Sigmoid gate values in (0, 1).
    pub fn gates(&self) -> Vec<F> {
        self.logits
            .iter()
            .map(|&l| F::one() / (F::one() + (-l).exp()))
            .collect()
    }

    /// Indices of the `budget` largest gates (ties to the lower index),
    /// ascending.
    pub fn top_b(&self) -> Vec<usize> {
        let gates = self.gates();
        let mut order: Vec<usize> = (0..gates.len()).collect();
        order.sort_by(|&a, &b| {
            gates[b]
                .partial_cmp(&gates[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut selected: Vec<usize> = order.into_iter().take(self.budget).collect();
        selected.sort_unstable();
        selected
    }
}

/// One outer-iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase2OuterRecord {
    pub iter: usize,
    pub objective: f64,
    pub acc_loss: f64,
    pub rob_loss: f64,
    pub gate_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Report {
    pub outer: Vec<Phase2OuterRecord>,
    pub gates_final: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Phase2Outcome<F> {
    pub model: FusedModel<F>,
    pub selected: Vec<usize>,
    pub report: Phase2Report,
}

/// Materializes `w_eff = w_fus + z_r * delta_r` per unit. Unit `r < L` is
/// layer `r`; with the classifier included, unit `L` is the classifier.
pub fn effective_model<F: Scalar>(
    base: &FusedModel<F>,
    deltas: &[Array2<F>],
    gates: &[F],
    include_classifier: bool,
) -> FusedModel<F> {
    let mut eff = base.clone();
    let num_layers = eff.num_layers();
    for (r, layer) in eff.layers_mut().iter_mut().enumerate() {
        layer.weight.zip_mut_with(&deltas[r], |w, &d| *w += gates[r] * d);
    }
    if include_classifier {
        let z = gates[num_layers];
        eff.classifier_mut()
            .zip_mut_with(&deltas[num_layers], |w, &d| *w += z * d);
    }
    eff
}

/// Per-unit inner product of a weight gradient with the cached update.
fn unit_dot<F: Scalar>(grads: &FusedGradients<F>, deltas: &[Array2<F>]) -> Vec<F> {
    deltas
        .iter()
        .enumerate()
        .map(|(r, delta)| {
            let g = if r < grads.layers.len() {
                &grads.layers[r]
            } else {
                &grads.classifier
            };
            g.iter().zip(delta.iter()).map(|(&a, &b)| a * b).sum()
        })
        .collect()
}

/// Gate objective and its gradient with respect to the gate logits, with
/// the accumulated deltas held fixed. Exposed for oracle checks.
#[allow(clippy::too_many_arguments)]
pub fn gate_objective_and_gradient<F: Scalar>(
    base: &FusedModel<F>,
    deltas: &[Array2<F>],
    gates: &GateVector<F>,
    include_classifier: bool,
    x_acc: &Array2<F>,
    y_acc: &[usize],
    x_rob: &Array2<F>,
    y_rob: &[usize],
    beta: F,
    lambda3: F,
) -> Result<(F, Vec<F>)> {
    let z = gates.gates();
    let eff = effective_model(base, deltas, &z, include_classifier);
    let acc = eff.gradients(x_acc, |logits| weighted_cross_entropy(logits, y_acc, None))?;
    let rob = eff.gradients(x_rob, |logits| weighted_cross_entropy(logits, y_rob, None))?;
    let objective = phase2_objective(acc.loss, rob.loss, &z, beta, lambda3, gates.budget);

    let acc_dots = unit_dot(&acc.grads, deltas);
    let rob_dots = unit_dot(&rob.grads, deltas);
    let gate_sum: F = z.iter().copied().sum();
    let over_budget = gate_sum > F::from_f64_c(gates.budget as f64);
    let grad = z
        .iter()
        .zip(acc_dots.iter().zip(rob_dots.iter()))
        .map(|(&zr, (&da, &dr))| {
            let mut dj_dz = da - beta * dr;
            if over_budget {
                dj_dz += lambda3;
            }
            dj_dz * zr * (F::one() - zr)
        })
        .collect();
    Ok((objective, grad))
}

struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n, // force an initial shuffle
        }
    }

    fn next_batch<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.min(self.order.len()) {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Runs the gated layer-selection fine-tuning for one client.
pub fn run_phase2<F: Scalar>(
    model: &ClientModel<F>,
    shard_train: &Dataset<F>,
    cfg: &Phase2Config<F>,
) -> Result<Phase2Outcome<F>> {
    cfg.pgd.validate()?;
    if shard_train.is_empty() {
        return Err(Error::EmptyDataset("phase-2 training shard".into()));
    }
    let fused = model.fuse();
    let num_layers = fused.num_layers();
    let units = num_layers + usize::from(cfg.include_classifier);
    let budget = if cfg.budget > units {
        log::warn!("budget {} exceeds {units} selectable units; clamping", cfg.budget);
        units
    } else {
        cfg.budget
    };

    let (search_split, holdout) = stratified_split(
        shard_train,
        1.0 - cfg.holdout_fraction,
        cfg.seed.wrapping_add(model.client_id as u64),
    )?;
    let (search_split, holdout) = if holdout.is_empty() {
        (shard_train.clone(), shard_train.clone())
    } else {
        (search_split, holdout)
    };
    let holdout_idx: Vec<usize> = (0..holdout.len()).collect();
    let (x_hold, y_hold) = holdout.batch(&holdout_idx);

    let mut deltas: Vec<Array2<F>> = fused
        .layers()
        .iter()
        .map(|l| Array2::zeros(l.weight.dim()))
        .collect();
    if cfg.include_classifier {
        deltas.push(Array2::zeros(fused.classifier().dim()));
    }
    let mut gates = GateVector::new(units, budget);
    let mut sampler = BatchSampler::new(search_split.len());
    let mut rng = derive_rng(cfg.seed, &[stream::PHASE2, model.client_id as u64]);
    let mut adv_pool: Option<Array2<F>> = None;
    let mut outer_records = Vec::with_capacity(cfg.outer_iters);

    for outer in 0..cfg.outer_iters {
        // Inner loop: gates frozen, deltas trained on benign batches.
        let z = gates.gates();
        for _ in 0..cfg.inner_steps {
            let batch = sampler.next_batch(cfg.batch_size, &mut rng);
            let (x, y) = search_split.batch(&batch);
            let eff = effective_model(&fused, &deltas, &z, cfg.include_classifier);
            let out = eff.gradients(&x, |logits| weighted_cross_entropy(logits, &y, None))?;
            for (r, delta) in deltas.iter_mut().enumerate() {
                let g = if r < num_layers {
                    &out.grads.layers[r]
                } else {
                    &out.grads.classifier
                };
                let zr = z[r];
                delta.zip_mut_with(g, |d, &gv| *d -= cfg.learning_rate * zr * gv);
            }
        }

        // Outer step: model frozen, one gradient step on the gate logits.
        if cfg.regenerate_pool || adv_pool.is_none() {
            let eff = effective_model(&fused, &deltas, &gates.gates(), cfg.include_classifier);
            adv_pool = Some(pgd(&eff, &x_hold, &y_hold, &cfg.pgd, &mut rng)?);
        }
        let x_rob = adv_pool.as_ref().expect("pool generated");
        let (objective, grad) = gate_objective_and_gradient(
            &fused,
            &deltas,
            &gates,
            cfg.include_classifier,
            &x_hold,
            &y_hold,
            x_rob,
            &y_hold,
            cfg.beta,
            cfg.lambda3,
        )?;
        for (logit, g) in gates.logits.iter_mut().zip(grad.iter()) {
            *logit -= cfg.gate_learning_rate * *g;
        }

        let z = gates.gates();
        let eff = effective_model(&fused, &deltas, &z, cfg.include_classifier);
        let acc_loss =
            weighted_cross_entropy(&eff.forward(&x_hold)?, &y_hold, None)?.0.to_f64_c();
        let rob_loss = weighted_cross_entropy(&eff.forward(x_rob)?, &y_hold, None)?.0.to_f64_c();
        outer_records.push(Phase2OuterRecord {
            iter: outer,
            objective: objective.to_f64_c(),
            acc_loss,
            rob_loss,
            gate_sum: z.iter().map(|g| g.to_f64_c()).sum(),
        });
    }

    // Top-B projection, then benign retraining of the selected units only.
    let selected = gates.top_b();
    gates.selected = Some(selected.clone());
    let mut final_model = fused.clone();
    if !selected.is_empty() && cfg.final_epochs > 0 {
        let mut mask = vec![false; num_layers + 1];
        for &unit in &selected {
            if unit < num_layers {
                mask[unit] = true;
            } else if cfg.include_classifier {
                mask[num_layers] = true;
            }
        }
        let mut order: Vec<usize> = (0..shard_train.len()).collect();
        for _ in 0..cfg.final_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let (x, y) = shard_train.batch(chunk);
                let out =
                    final_model.gradients(&x, |logits| weighted_cross_entropy(logits, &y, None))?;
                final_model.sgd_step_masked(&out.grads, cfg.learning_rate, &mask);
            }
        }
    }

    Ok(Phase2Outcome {
        model: final_model,
        selected: selected.clone(),
        report: Phase2Report {
            outer: outer_records,
            gates_final: gates.gates().iter().map(|g| g.to_f64_c()).collect(),
            selected,
        },
    })
}
