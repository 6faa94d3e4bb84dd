//! Phase 1: federated adversarial fine-tuning rounds.
//!
//! Per round, every client downloads the global adapter vector plus its
//! cluster's expert, trains locally against PGD-perturbed batches with the
//! three-term loss, and uploads its adapter vector (classifiers never leave
//! the client unless the whole-parameter baseline is selected). The server
//! aggregates with the configured rule. Clients run as independent parallel
//! tasks; all reductions follow client-index order, so runs are
//! bit-reproducible under a fixed seed regardless of thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    server_aggregate, AggregationConfig, AggregationReport, ClusterStats,
};
use crate::attacks::{apply_label_flip, mpaf_update, pgd, AdvPerturbation, ByzantineMode};
use crate::data::{class_counts, dirichlet_partition, stratified_split, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::losses::{reference_model, total_loss, ClassWeights, LossBreakdown, LossWeights};
use crate::model::{ClientModel, FlatVector};
use crate::orchestration::{evaluate, AggregationRule, Phase1Config};
use crate::rng::{derive_rng, stream};
use crate::Scalar;

/// Standard deviation of the fake base model a poisoning client targets.
const MPAF_TARGET_STD: f64 = 0.1;

/// One client's local data: a training shard and a held-out test split
/// drawn with the same class proportions.
#[derive(Debug, Clone)]
pub struct Shard<F> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
}

/// Partitions a dataset into per-client shards, each split 80/20 (or as
/// given) stratified by class.
pub fn make_shards<F: Scalar>(
    ds: &Dataset<F>,
    spec: &PartitionSpec,
    train_fraction: f64,
) -> Result<Vec<Shard<F>>> {
    let parts = dirichlet_partition(ds, spec)?;
    parts
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            let (train, test) =
                stratified_split(&shard, train_fraction, spec.seed.wrapping_add(i as u64))?;
            if train.is_empty() || test.is_empty() {
                return Err(Error::EmptyDataset(format!(
                    "client {i}: shard too small for a {train_fraction} train split"
                )));
            }
            Ok(Shard { train, test })
        })
        .collect()
}

/// Loss components averaged over one round of local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub adversarial: f64,
    pub stability: f64,
    pub reference: f64,
}

impl LossRecord {
    fn from_breakdown<F: Scalar>(b: &LossBreakdown<F>) -> Self {
        Self {
            total: b.total.to_f64_c(),
            adversarial: b.adversarial.to_f64_c(),
            stability: b.stability.to_f64_c(),
            reference: b.reference.to_f64_c(),
        }
    }
}

/// Per-client slice of a round report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub malicious: bool,
    /// Absent for clients that upload fake updates without training.
    pub loss: Option<LossRecord>,
    pub benign_accuracy: f64,
    pub adversarial_robustness: f64,
}

/// Append-only record of one federated round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport<F> {
    pub round: usize,
    /// Equivalent step size used by the convergence diagnostic
    /// (learning rate times local epochs).
    pub zeta: f64,
    pub clients: Vec<ClientRoundRecord>,
    /// Absent when the round was aborted (every client excluded).
    pub aggregation: Option<AggregationReport<F>>,
    /// Global vector in force after this round.
    pub global_after: FlatVector<F>,
    /// Squared norm of `(global_before - global_after) / zeta`.
    pub grad_norm_sq: f64,
}

/// Final state of a phase-1 run.
#[derive(Debug, Clone)]
pub struct Phase1Outcome<F> {
    pub models: Vec<ClientModel<F>>,
    pub global: FlatVector<F>,
    pub reports: Vec<RoundReport<F>>,
}

/// One full pass of minibatch SGD over the shard: PGD examples are
/// generated per batch and the three-term loss drives the update. Only
/// adapters and the classifier change.
#[allow(clippy::too_many_arguments)]
pub fn local_train_epoch<F: Scalar>(
    model: &mut ClientModel<F>,
    data: &Dataset<F>,
    weights: &ClassWeights<F>,
    w_ref: &FlatVector<F>,
    lw: &LossWeights<F>,
    attack: &AdvPerturbation<F>,
    learning_rate: F,
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<LossBreakdown<F>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut acc = LossBreakdown {
        total: F::zero(),
        adversarial: F::zero(),
        stability: F::zero(),
        reference: F::zero(),
    };
    let mut samples = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let x_adv = pgd(model, &x, &y, attack, rng)?;
        let (breakdown, grads) = total_loss(model, &x, &x_adv, &y, weights, w_ref, lw)?;
        model.sgd_step(&grads, learning_rate);
        let w = F::from_f64_c(chunk.len() as f64);
        acc.total += breakdown.total * w;
        acc.adversarial += breakdown.adversarial * w;
        acc.stability += breakdown.stability * w;
        acc.reference += breakdown.reference * w;
        samples += chunk.len();
    }
    let inv = F::one() / F::from_f64_c(samples.max(1) as f64);
    acc.total *= inv;
    acc.adversarial *= inv;
    acc.stability *= inv;
    acc.reference *= inv;
    Ok(acc)
}

struct ClientTask<F> {
    model: ClientModel<F>,
    weights: ClassWeights<F>,
    train: Dataset<F>,
    counts: Vec<usize>,
    mpaf_target: Option<FlatVector<F>>,
}

struct ClientUpload<F> {
    vector: FlatVector<F>,
    loss: Option<LossRecord>,
}

/// Runs T1 federated adversarial rounds. Deterministic under the config
/// seed; Byzantine clients behave per the config's spec.
pub fn run_phase1<F: Scalar>(
    cfg: &Phase1Config<F>,
    shards: &[Shard<F>],
    pretrained: &ClientModel<F>,
) -> Result<Phase1Outcome<F>> {
    let n = shards.len();
    if n == 0 {
        return Err(Error::Config("need at least one client shard".into()));
    }
    let num_classes = pretrained.num_classes();
    cfg.validate(n, num_classes)?;
    let lw = LossWeights::new(cfg.lambda1, cfg.lambda2, cfg.eta)?;
    let zeta = cfg.learning_rate.to_f64_c() * cfg.local_epochs as f64;
    let agg_cfg = AggregationConfig {
        knn_k: cfg.knn_k,
        bandwidth: cfg.bandwidth,
        tree_depth: cfg.tree_depth,
        kappa: cfg.kappa,
        trim_fraction: cfg.trim_fraction,
        leaf_size: cfg.leaf_size,
    };

    let shared_layout_of = |m: &ClientModel<F>| {
        if cfg.share_classifier {
            m.flatten_all()
        } else {
            m.flatten_adapters()
        }
    };

    let mut tasks: Vec<ClientTask<F>> = Vec::with_capacity(n);
    for (i, shard) in shards.iter().enumerate() {
        let is_malicious = cfg.byzantine.is_malicious(i);
        let train = if is_malicious && cfg.byzantine.mode == ByzantineMode::LabelFlip {
            apply_label_flip(&shard.train, &cfg.byzantine)?
        } else {
            shard.train.clone()
        };
        let counts = class_counts(&train);
        let model = pretrained.for_client(i);
        let mpaf_target = if is_malicious && cfg.byzantine.mode == ByzantineMode::Mpaf {
            let mut target = shared_layout_of(&model).zeros_like();
            let mut rng = derive_rng(cfg.seed, &[stream::BYZANTINE, i as u64]);
            for v in target.values_mut() {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                *v = F::from_f64_c(z * MPAF_TARGET_STD);
            }
            Some(target)
        } else {
            None
        };
        tasks.push(ClientTask {
            model,
            weights: ClassWeights::new(num_classes, cfg.gamma, cfg.eps_smooth)?,
            train,
            counts,
            mpaf_target,
        });
    }

    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let mut global: FlatVector<F> = shared_layout_of(&tasks[0].model);
    let mut expert_for: Vec<FlatVector<F>> = vec![global.clone(); n];
    let mut reports: Vec<RoundReport<F>> = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let global_before = global.clone();
        let uploads: Vec<ClientUpload<F>> = tasks
            .par_iter_mut()
            .enumerate()
            .map(|(i, task)| -> Result<ClientUpload<F>> {
                if let Some(target) = &task.mpaf_target {
                    let vector = mpaf_update(
                        &global_before,
                        target,
                        F::from_f64_c(cfg.byzantine.mpaf_scale),
                    )?;
                    return Ok(ClientUpload { vector, loss: None });
                }
                download(&mut task.model, &global_before, cfg.share_classifier)?;
                let global_adapters = task.model.flatten_adapters();
                let expert_adapters =
                    adapter_part(&task.model, &expert_for[i], cfg.share_classifier)?;
                let w_ref = reference_model(&global_adapters, &expert_adapters, cfg.eta)?;
                let mut rng = derive_rng(cfg.seed, &[stream::TRAIN, round as u64, i as u64]);
                let mut acc: Option<LossBreakdown<F>> = None;
                for _ in 0..cfg.local_epochs {
                    task.weights.advance(&task.counts)?;
                    let b = local_train_epoch(
                        &mut task.model,
                        &task.train,
                        &task.weights,
                        &w_ref,
                        &lw,
                        &cfg.pgd,
                        cfg.learning_rate,
                        cfg.batch_size,
                        &mut rng,
                    )?;
                    acc = Some(match acc {
                        None => b,
                        Some(prev) => LossBreakdown {
                            total: prev.total + b.total,
                            adversarial: prev.adversarial + b.adversarial,
                            stability: prev.stability + b.stability,
                            reference: prev.reference + b.reference,
                        },
                    });
                }
                let inv = F::one() / F::from_f64_c(cfg.local_epochs as f64);
                let mean = acc.map(|a| LossBreakdown {
                    total: a.total * inv,
                    adversarial: a.adversarial * inv,
                    stability: a.stability * inv,
                    reference: a.reference * inv,
                });
                Ok(ClientUpload {
                    vector: shared_layout_of(&task.model),
                    loss: mean.as_ref().map(LossRecord::from_breakdown),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let vectors: Vec<FlatVector<F>> = uploads.iter().map(|u| u.vector.clone()).collect();
        let aggregation = match cfg.rule {
            AggregationRule::BallTree => match server_aggregate(round, &vectors, &sizes, &agg_cfg)
            {
                Ok(report) => Some(report),
                Err(Error::AllClientsExcluded) => {
                    log::warn!("round {round}: every client excluded; keeping previous global");
                    None
                }
                Err(e) => return Err(e),
            },
            AggregationRule::FedAvg => Some(fedavg_report(round, &vectors, &sizes)?),
        };
        if let Some(report) = &aggregation {
            global = report.global.clone();
            for i in 0..n {
                let cluster = report
                    .cluster_of(i)
                    .ok_or_else(|| Error::Config(format!("client {i} missing from clusters")))?;
                expert_for[i] = report.experts[&cluster].clone();
            }
        }

        let diff_sq: f64 = global_before
            .values()
            .iter()
            .zip(global.values())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64_c();
                d * d
            })
            .sum();
        let grad_norm_sq = diff_sq / (zeta * zeta);

        let client_records: Vec<ClientRoundRecord> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| -> Result<ClientRoundRecord> {
                let mut rng = derive_rng(cfg.seed, &[stream::EVAL, round as u64, i as u64]);
                let metrics = evaluate(&task.model, &shards[i].test, Some(&cfg.pgd), &mut rng)?;
                Ok(ClientRoundRecord {
                    client_id: i,
                    malicious: cfg.byzantine.is_malicious(i),
                    loss: uploads[i].loss,
                    benign_accuracy: metrics.benign_accuracy,
                    adversarial_robustness: metrics.adversarial_robustness,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        reports.push(RoundReport {
            round,
            zeta,
            clients: client_records,
            aggregation,
            global_after: global.clone(),
            grad_norm_sq,
        });
    }

    // Clients keep the final shared backbone and their private classifier.
    for task in &mut tasks {
        download(&mut task.model, &global, cfg.share_classifier)?;
    }
    Ok(Phase1Outcome {
        models: tasks.into_iter().map(|t| t.model).collect(),
        global,
        reports,
    })
}

fn download<F: Scalar>(
    model: &mut ClientModel<F>,
    shared: &FlatVector<F>,
    share_classifier: bool,
) -> Result<()> {
    if share_classifier {
        model.set_all(shared)
    } else {
        model.set_adapters(shared)
    }
}

/// Adapter-layout slice of a shared vector (identity when the vector is
/// already adapter-only).
fn adapter_part<F: Scalar>(
    template: &ClientModel<F>,
    shared: &FlatVector<F>,
    share_classifier: bool,
) -> Result<FlatVector<F>> {
    if !share_classifier {
        return Ok(shared.clone());
    }
    let mut scratch = template.clone();
    scratch.set_all(shared)?;
    Ok(scratch.flatten_adapters())
}

/// Plain size-weighted aggregation packaged as a round report: one cluster,
/// no filtering, the global doubling as the single expert.
fn fedavg_report<F: Scalar>(
    round: usize,
    updates: &[FlatVector<F>],
    sizes: &[usize],
) -> Result<AggregationReport<F>> {
    let n = updates.len();
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let q: Vec<F> = sizes
        .iter()
        .map(|&s| F::from_f64_c(s as f64 / total))
        .collect();
    let global = crate::aggregation::aggregate_fedavg(updates, sizes)?;
    Ok(AggregationReport {
        round,
        q: q.clone(),
        q_filtered: q,
        clusters: BTreeMap::from([(0, (0..n).collect())]),
        excluded: Vec::new(),
        psi: vec![F::zero(); n],
        cluster_stats: BTreeMap::from([(
            0,
            ClusterStats {
                median_psi: F::zero(),
                mad: F::zero(),
                center: global.values().to_vec(),
            },
        )]),
        sigma_sq: F::zero(),
        global: global.clone(),
        experts: BTreeMap::from([(0, global)]),
    })
}
