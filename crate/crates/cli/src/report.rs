//! Aggregate reporting: turns the run directory's record streams into
//! columnar text files and a summary record (plot data, no plotting).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::json;

use fatsim_core::orchestration::RoundReport;
use fatsim_core::Real;

use crate::commands::{EvalRecord, Phase2ClientRecord};
use crate::config::ExperimentConfig;
use crate::schema;
use crate::CliError;

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn write_tsv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut file =
        fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    writeln!(file, "{header}").map_err(|e| CliError::Io(e.to_string()))?;
    for row in rows {
        writeln!(file, "{row}").map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let rounds_path = cfg.out_dir.join("phase1_rounds.jsonl");
    let phase2_path = cfg.out_dir.join("phase2_report.jsonl");
    let eval_path = cfg.out_dir.join("evaluate.jsonl");

    let rounds: Vec<RoundReport<Real>> = if rounds_path.exists() {
        read_jsonl(&rounds_path)?
    } else {
        Vec::new()
    };
    let phase2: Vec<Phase2ClientRecord> = if phase2_path.exists() {
        read_jsonl(&phase2_path)?
    } else {
        Vec::new()
    };
    let evals: Vec<EvalRecord> = if eval_path.exists() {
        read_jsonl(&eval_path)?
    } else {
        Vec::new()
    };
    if rounds.is_empty() && phase2.is_empty() && evals.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no run artifacts to report on",
            cfg.out_dir.display()
        )));
    }

    let report_dir = cfg.out_dir.join("report");
    fs::create_dir_all(&report_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", report_dir.display())))?;

    // Loss curves and per-round metrics straight from the round records.
    if !rounds.is_empty() {
        let mut loss_rows = Vec::new();
        let mut metric_rows = Vec::new();
        let mut exclusion_rows = Vec::new();
        for r in &rounds {
            let trained: Vec<_> = r.clients.iter().filter(|c| c.loss.is_some()).collect();
            let l = |f: fn(&fatsim_core::orchestration::LossRecord) -> f64| {
                mean(trained.iter().map(|c| f(c.loss.as_ref().expect("filtered"))))
            };
            loss_rows.push(format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.round,
                l(|x| x.total),
                l(|x| x.adversarial),
                l(|x| x.stability),
                l(|x| x.reference),
                r.grad_norm_sq
            ));
            let honest: Vec<_> = r.clients.iter().filter(|c| !c.malicious).collect();
            metric_rows.push(format!(
                "{}\t{}\t{}\t{}\t{}",
                r.round,
                mean(r.clients.iter().map(|c| c.benign_accuracy)),
                mean(r.clients.iter().map(|c| c.adversarial_robustness)),
                mean(honest.iter().map(|c| c.benign_accuracy)),
                mean(honest.iter().map(|c| c.adversarial_robustness)),
            ));
            let excluded = r
                .aggregation
                .as_ref()
                .map(|a| a.excluded.clone())
                .unwrap_or_default();
            exclusion_rows.push(format!(
                "{}\t{}\t{}",
                r.round,
                excluded.len(),
                excluded
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(";")
            ));
        }
        write_tsv(
            &report_dir.join("loss_curves.tsv"),
            "round\tmean_total\tmean_adversarial\tmean_stability\tmean_reference\tgrad_norm_sq",
            &loss_rows,
        )?;
        write_tsv(
            &report_dir.join("round_metrics.tsv"),
            "round\tmean_ba\tmean_ar\tmean_ba_honest\tmean_ar_honest",
            &metric_rows,
        )?;
        write_tsv(
            &report_dir.join("exclusions.tsv"),
            "round\tnum_excluded\texcluded_clients",
            &exclusion_rows,
        )?;
    }

    if !phase2.is_empty() {
        let rows: Vec<String> = phase2
            .iter()
            .map(|p| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    p.client_id,
                    p.selected
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                    p.gates_final
                        .iter()
                        .map(|g| format!("{g:.6}"))
                        .collect::<Vec<_>>()
                        .join(","),
                    p.before.benign_accuracy,
                    p.before.adversarial_robustness,
                    p.after.benign_accuracy,
                    p.after.adversarial_robustness,
                )
            })
            .collect();
        write_tsv(
            &report_dir.join("gates.tsv"),
            "client_id\tselected\tgates\tba_before\tar_before\tba_after\tar_after",
            &rows,
        )?;
    }

    // Per-client final metrics: prefer explicit evaluation records, fall
    // back to the last round's in-run metrics.
    let (metric_source, per_client): (&str, Vec<(usize, f64, f64)>) = if !evals.is_empty() {
        (
            "evaluate",
            evals
                .iter()
                .map(|e| (e.client_id, e.benign_accuracy, e.adversarial_robustness))
                .collect(),
        )
    } else if let Some(last) = rounds.last() {
        (
            "phase1-final-round",
            last.clients
                .iter()
                .map(|c| (c.client_id, c.benign_accuracy, c.adversarial_robustness))
                .collect(),
        )
    } else {
        (
            "phase2",
            phase2
                .iter()
                .map(|p| (p.client_id, p.after.benign_accuracy, p.after.adversarial_robustness))
                .collect(),
        )
    };
    let rows: Vec<String> = per_client
        .iter()
        .map(|(id, ba, ar)| format!("{id}\t{ba}\t{ar}"))
        .collect();
    write_tsv(
        &report_dir.join("metrics_per_client.tsv"),
        "client_id\tbenign_accuracy\tadversarial_robustness",
        &rows,
    )?;

    let summary = json!({
        "num_clients": per_client.len(),
        "phase1_rounds": rounds.len(),
        "mean_benign_accuracy": mean(per_client.iter().map(|r| r.1)),
        "mean_adversarial_robustness": mean(per_client.iter().map(|r| r.2)),
        "metric_source": metric_source,
    });
    let tagged = schema::tagged("summary", summary)?;
    let text = serde_json::to_string_pretty(&tagged)
        .map_err(|e| CliError::Runtime(format!("serialize summary: {e}")))?;
    fs::write(report_dir.join("summary.json"), text + "\n")
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}
