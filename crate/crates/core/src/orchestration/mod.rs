//! Training orchestration: backbone pretraining, the federated adversarial
//! phase, the gated layer-selection phase, evaluation, and convergence
//! diagnostics.

pub mod monitor;
pub mod phase1;
pub mod phase2;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::aggregation::BandwidthPolicy;
use crate::attacks::{pgd, AdvPerturbation, ByzantineSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::weighted_cross_entropy;
use crate::model::{
    activation_for, AdapterLayer, ClientModel, DifferentiableModel, FusedModel,
};
use crate::rng::{derive_rng, stream};
use crate::Scalar;

pub use monitor::{convergence_monitor, ConvergenceSeries};
pub use phase1::{
    local_train_epoch, make_shards, run_phase1, ClientRoundRecord, LossRecord, Phase1Outcome,
    RoundReport, Shard,
};
pub use phase2::{
    effective_model, gate_objective_and_gradient, run_phase2, GateVector, Phase2Config,
    Phase2Outcome, Phase2OuterRecord, Phase2Report,
};

/// Which server aggregation rule phase 1 runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationRule {
    /// Ball-tree Gaussian weighting with Byzantine filtering and experts.
    BallTree,
    /// Plain size-weighted averaging (baseline).
    #[serde(rename = "fedavg")]
    FedAvg,
}

/// Phase-1 federated adversarial training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Config<F> {
    /// Aggregation rounds T1.
    pub rounds: usize,
    /// Local epochs per round T2.
    pub local_epochs: usize,
    pub learning_rate: F,
    pub batch_size: usize,
    pub knn_k: usize,
    pub bandwidth: BandwidthPolicy<F>,
    /// Global/expert blend for the proximal reference.
    pub eta: F,
    /// Weight of the benign/adversarial KL term.
    pub lambda1: F,
    /// Weight of the reference-distance term.
    pub lambda2: F,
    /// Class-imbalance decay.
    pub gamma: F,
    /// Class-weight smoothing factor.
    pub eps_smooth: F,
    pub tree_depth: usize,
    pub kappa: F,
    pub trim_fraction: F,
    pub leaf_size: usize,
    pub pgd: AdvPerturbation<F>,
    pub byzantine: ByzantineSpec,
    pub rule: AggregationRule,
    /// Upload the classifier too (whole-parameter baseline); the default
    /// shares adapters only and keeps classifiers private.
    pub share_classifier: bool,
    pub seed: u64,
}

impl<F: Scalar> Default for Phase1Config<F> {
    fn default() -> Self {
        let c = |v: f64| F::from_f64_c(v);
        Self {
            rounds: 15,
            local_epochs: 5,
            learning_rate: c(0.005),
            batch_size: 32,
            knn_k: 5,
            bandwidth: BandwidthPolicy::AdaptiveMedian,
            eta: c(0.5),
            lambda1: c(20.0),
            lambda2: c(0.001),
            gamma: c(0.9),
            eps_smooth: c(0.9),
            tree_depth: 1,
            kappa: c(3.0),
            trim_fraction: c(0.2),
            leaf_size: 1,
            pgd: AdvPerturbation::default_for_range(c(-8.0), c(8.0)),
            byzantine: ByzantineSpec::none(),
            rule: AggregationRule::BallTree,
            share_classifier: false,
            seed: 0,
        }
    }
}

impl<F: Scalar> Phase1Config<F> {
    pub fn validate(&self, num_clients: usize, num_classes: usize) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.pgd.validate()?;
        self.byzantine.validate(num_clients, num_classes)?;
        crate::losses::LossWeights::new(self.lambda1, self.lambda2, self.eta)?;
        crate::losses::ClassWeights::new(num_classes, self.gamma, self.eps_smooth)?;
        Ok(())
    }
}

/// Benign accuracy and adversarial robustness, both in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub benign_accuracy: f64,
    pub adversarial_robustness: f64,
}

fn accuracy<F: Scalar, M: DifferentiableModel<F>>(
    model: &M,
    x: &Array2<F>,
    labels: &[usize],
) -> Result<f64> {
    let logits = model.logits(x)?;
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels.iter()) {
        let mut best = (0usize, F::neg_infinity());
        for (j, &v) in row.iter().enumerate() {
            if v > best.1 {
                best = (j, v);
            }
        }
        if best.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Benign accuracy plus accuracy under the given attack. Without an attack
/// (or with a zero budget) robustness equals benign accuracy.
pub fn evaluate<F: Scalar, M: DifferentiableModel<F>, R: Rng>(
    model: &M,
    test: &Dataset<F>,
    attack: Option<&AdvPerturbation<F>>,
    rng: &mut R,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: empty test set", test.name)));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.batch(&indices);
    let benign_accuracy = accuracy(model, &x, &y)?;
    let adversarial_robustness = match attack {
        Some(p) => {
            let x_adv = pgd(model, &x, &y, p, rng)?;
            accuracy(model, &x_adv, &y)?
        }
        None => benign_accuracy,
    };
    Ok(Metrics {
        benign_accuracy,
        adversarial_robustness,
    })
}

/// Trains a plain dense model on pooled benign data and packages it as the
/// frozen pretrained backbone: trained weights become `w_pre`, fresh frozen
/// `a_fixed` factors are drawn, adapters start at zero.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_backbone<F: Scalar>(
    dims: &[usize],
    num_classes: usize,
    rank: usize,
    data: &Dataset<F>,
    epochs: usize,
    learning_rate: F,
    batch_size: usize,
    seed: u64,
) -> Result<ClientModel<F>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("pretraining data".into()));
    }
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let mut dense = FusedModel::<F>::random(0, dims, num_classes, &mut rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let (x, y) = data.batch(chunk);
            let out = dense.gradients(&x, |logits| weighted_cross_entropy(logits, &y, None))?;
            dense.sgd_step(&out.grads, learning_rate);
        }
    }

    let num_layers = dims.len() - 1;
    let mut layers = Vec::with_capacity(num_layers);
    for (i, trained) in dense.layers().iter().enumerate() {
        let r_in = dims[i];
        let a_fixed =
            crate::model::gaussian_matrix(r_in, rank, (1.0 / r_in as f64).sqrt(), &mut rng);
        let b_train = Array2::zeros((rank, dims[i + 1]));
        layers.push(AdapterLayer::new(
            trained.weight.clone(),
            a_fixed,
            b_train,
            activation_for(i, num_layers),
        )?);
    }
    ClientModel::new(0, layers, dense.classifier().clone(), num_classes)
}
