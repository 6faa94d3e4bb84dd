//! Subcommand implementations: partition, phase1, phase2, evaluate.
//!
//! Each command reads its prerequisite artifacts from the output directory,
//! writes its own artifacts there, and refreshes `manifest.json`. All
//! emitted records are schema-validated line by line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use fatsim_core::checkpoint::{self, LoadedModel};
use fatsim_core::data::{
    class_counts, load_csv_with_classes, make_blobs, save_csv, Dataset, PartitionSpec,
};
use fatsim_core::model::{ClientModel, FusedModel};
use fatsim_core::orchestration::{
    convergence_monitor, evaluate, make_shards, pretrain_backbone, run_phase1, run_phase2,
    Metrics, Shard,
};
use fatsim_core::rng::{derive_rng, stream};
use fatsim_core::Real;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::schema;
use crate::CliError;

pub fn shards_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("shards")
}

pub fn checkpoints_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

fn train_csv(cfg: &ExperimentConfig, client: usize) -> PathBuf {
    shards_dir(cfg).join(format!("client_{client:03}_train.csv"))
}

fn test_csv(cfg: &ExperimentConfig, client: usize) -> PathBuf {
    shards_dir(cfg).join(format!("client_{client:03}_test.csv"))
}

fn phase1_ckpt(cfg: &ExperimentConfig, client: usize) -> PathBuf {
    checkpoints_dir(cfg).join(format!("phase1_client_{client:03}.ckpt"))
}

fn final_ckpt(cfg: &ExperimentConfig, client: usize) -> PathBuf {
    checkpoints_dir(cfg).join(format!("final_client_{client:03}.ckpt"))
}

fn io_err(context: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", context.display()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Hash of the experiment identity: the canonical config with the output
/// location and thread count (which do not affect results) normalized out.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut identity = cfg.clone();
    identity.out_dir = PathBuf::new();
    identity.threads = 0;
    let canonical = identity.canonical_toml()?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<(), CliError> {
    let hash = config_hash(cfg)?;
    let record = json!({
        "tool": "fatsim",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "seed": cfg.seed,
        "command": command,
        "provenance": format!("fatsim-{}+{}.seed{}", env!("CARGO_PKG_VERSION"), &hash[..12], cfg.seed),
    });
    write_json_record(&cfg.out_dir.join("manifest.json"), "manifest", record)
}

fn write_json_record(path: &Path, kind: &str, record: Value) -> Result<(), CliError> {
    let tagged = schema::tagged(kind, record)?;
    let text = serde_json::to_string_pretty(&tagged)
        .map_err(|e| CliError::Runtime(format!("serialize {kind}: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_jsonl(path: &Path, kind: &str, records: Vec<Value>) -> Result<(), CliError> {
    let mut out = Vec::new();
    for record in records {
        let tagged = schema::tagged(kind, record)?;
        let line = serde_json::to_string(&tagged)
            .map_err(|e| CliError::Runtime(format!("serialize {kind}: {e}")))?;
        out.push(line);
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for line in out {
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn to_value<T: Serialize>(what: &str, v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(format!("serialize {what}: {e}")))
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset<Real>, CliError> {
    match cfg.dataset.kind {
        DatasetKind::Blobs => make_blobs(
            cfg.dataset.num_classes,
            cfg.dataset.per_class,
            cfg.dataset.dim,
            cfg.dataset.spread,
            cfg.seed,
        )
        .map_err(CliError::from),
        DatasetKind::Csv => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("csv dataset needs a path".into()))?;
            load_csv_with_classes(path, cfg.dataset.num_classes).map_err(CliError::from)
        }
    }
}

pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    let spec = PartitionSpec::new(cfg.partition.num_clients, cfg.partition.alpha, cfg.seed)?;
    let shards = make_shards(&ds, &spec, cfg.partition.train_fraction)?;

    ensure_dir(&shards_dir(cfg))?;
    let mut clients = serde_json::Map::new();
    for (i, shard) in shards.iter().enumerate() {
        save_csv(&shard.train, train_csv(cfg, i))?;
        save_csv(&shard.test, test_csv(cfg, i))?;
        clients.insert(
            i.to_string(),
            json!({
                "train": class_counts(&shard.train),
                "test": class_counts(&shard.test),
            }),
        );
    }
    let manifest = json!({
        "num_clients": shards.len(),
        "num_classes": cfg.dataset.num_classes,
        "alpha": cfg.partition.alpha,
        "seed": cfg.seed,
        "clients": clients,
    });
    write_json_record(
        &cfg.out_dir.join("partition_manifest.json"),
        "partition-manifest",
        manifest,
    )?;
    write_manifest(cfg, "partition")
}

fn load_shards(cfg: &ExperimentConfig) -> Result<Vec<Shard<Real>>, CliError> {
    let manifest_path = cfg.out_dir.join("partition_manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("partition manifest: {e}")))?;
    let n = manifest["num_clients"]
        .as_u64()
        .ok_or_else(|| CliError::Runtime("partition manifest missing num_clients".into()))?
        as usize;
    (0..n)
        .map(|i| {
            Ok(Shard {
                train: load_csv_with_classes(train_csv(cfg, i), cfg.dataset.num_classes)?,
                test: load_csv_with_classes(test_csv(cfg, i), cfg.dataset.num_classes)?,
            })
        })
        .collect()
}

fn pooled_train(shards: &[Shard<Real>]) -> Result<Dataset<Real>, CliError> {
    let parts: Vec<&Dataset<Real>> = shards.iter().map(|s| &s.train).collect();
    fatsim_core::data::concat(&parts, "pooled").map_err(CliError::from)
}

pub fn cmd_phase1(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let shards = load_shards(cfg)?;
    let pooled = pooled_train(&shards)?;
    let pretrained = pretrain_backbone(
        &cfg.dims(),
        cfg.dataset.num_classes,
        cfg.model.rank,
        &pooled,
        cfg.model.pretrain_epochs,
        cfg.model.pretrain_learning_rate,
        cfg.model.pretrain_batch_size,
        cfg.seed,
    )?;
    checkpoint::save_model_to_path(&pretrained, cfg.out_dir.join("pretrained.ckpt"))?;

    let phase1_cfg = cfg.phase1_config()?;
    let outcome = run_phase1(&phase1_cfg, &shards, &pretrained)?;

    let mut records = Vec::with_capacity(outcome.reports.len());
    for report in &outcome.reports {
        records.push(to_value("round report", report)?);
    }
    write_jsonl(&cfg.out_dir.join("phase1_rounds.jsonl"), "round", records)?;

    ensure_dir(&checkpoints_dir(cfg))?;
    for (i, model) in outcome.models.iter().enumerate() {
        checkpoint::save_model_to_path(model, phase1_ckpt(cfg, i))?;
    }

    if outcome.reports.len() >= 2 {
        let series = convergence_monitor(&outcome.reports)?;
        write_json_record(
            &cfg.out_dir.join("convergence.json"),
            "convergence",
            to_value("convergence series", &series)?,
        )?;
    }
    write_manifest(cfg, "phase1")
}

/// Per-client phase-2 record as written to `phase2_report.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2ClientRecord {
    pub client_id: usize,
    pub selected: Vec<usize>,
    pub gates_final: Vec<f64>,
    pub outer: Vec<fatsim_core::orchestration::Phase2OuterRecord>,
    pub before: Metrics,
    pub after: Metrics,
}

fn load_phase1_model(cfg: &ExperimentConfig, client: usize) -> Result<ClientModel<Real>, CliError> {
    match checkpoint::load_from_path::<Real, _>(phase1_ckpt(cfg, client))? {
        LoadedModel::Adapter(m) => Ok(m),
        LoadedModel::Fused(_) => Err(CliError::Runtime(format!(
            "checkpoint for client {client} is fused; expected an adapter model"
        ))),
    }
}

pub fn cmd_phase2(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let shards = load_shards(cfg)?;
    let phase2_cfg = cfg.phase2_config();
    let attack = cfg.attack.to_core();

    let results: Vec<(Phase2ClientRecord, FusedModel<Real>)> = (0..shards.len())
        .into_par_iter()
        .map(|i| -> Result<(Phase2ClientRecord, FusedModel<Real>), CliError> {
            let model = load_phase1_model(cfg, i)?;
            let mut rng = derive_rng(cfg.seed, &[stream::EVAL, 7001, i as u64]);
            let before = evaluate(&model, &shards[i].test, Some(&attack), &mut rng)?;
            let outcome = run_phase2(&model, &shards[i].train, &phase2_cfg)?;
            let mut rng = derive_rng(cfg.seed, &[stream::EVAL, 7002, i as u64]);
            let after = evaluate(&outcome.model, &shards[i].test, Some(&attack), &mut rng)?;
            Ok((
                Phase2ClientRecord {
                    client_id: i,
                    selected: outcome.selected,
                    gates_final: outcome.report.gates_final,
                    outer: outcome.report.outer,
                    before,
                    after,
                },
                outcome.model,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    ensure_dir(&checkpoints_dir(cfg))?;
    let mut records = Vec::with_capacity(results.len());
    for (record, model) in &results {
        checkpoint::save_fused_to_path(model, final_ckpt(cfg, record.client_id))?;
        records.push(to_value("phase2 record", record)?);
    }
    write_jsonl(&cfg.out_dir.join("phase2_report.jsonl"), "phase2", records)?;
    write_manifest(cfg, "phase2")
}

/// Evaluation record as written to `evaluate.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub client_id: usize,
    pub phase: String,
    pub benign_accuracy: f64,
    pub adversarial_robustness: f64,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let shards = load_shards(cfg)?;
    let attack = cfg.attack.to_core();
    let mut records = Vec::with_capacity(shards.len());
    for (i, shard) in shards.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[stream::EVAL, 9000, i as u64]);
        let (phase, metrics) = if final_ckpt(cfg, i).exists() {
            match checkpoint::load_from_path::<Real, _>(final_ckpt(cfg, i))? {
                LoadedModel::Fused(m) => {
                    ("phase2", evaluate(&m, &shard.test, Some(&attack), &mut rng)?)
                }
                LoadedModel::Adapter(m) => {
                    ("phase2", evaluate(&m, &shard.test, Some(&attack), &mut rng)?)
                }
            }
        } else {
            let model = load_phase1_model(cfg, i)?;
            ("phase1", evaluate(&model, &shard.test, Some(&attack), &mut rng)?)
        };
        records.push(EvalRecord {
            client_id: i,
            phase: phase.to_string(),
            benign_accuracy: metrics.benign_accuracy,
            adversarial_robustness: metrics.adversarial_robustness,
        });
    }
    let values = records
        .iter()
        .map(|r| to_value("evaluation record", r))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&cfg.out_dir.join("evaluate.jsonl"), "evaluation", values)?;
    write_manifest(cfg, "evaluate")
}

