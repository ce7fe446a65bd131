//! Round logs as CSV/JSON and client state as checkpoints.

use evifed_core::checkpoint::Checkpoint;
use evifed_core::model::{AnswerHead, PromptSet};
use evifed_core::{Error, Result};
use serde::Serialize;

use crate::client::ClientState;
use crate::config::FedConfig;
use crate::run::{RoundLog, RunOutput, Variant};

pub const ROUND_COLUMNS: [&str; 9] = [
    "round",
    "client",
    "accuracy",
    "closed_accuracy",
    "open_accuracy",
    "mean_uncertainty",
    "eval_accuracy",
    "eval_mean_uncertainty",
    "train_loss",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per (round, client); `prefix` columns are prepended to every
/// row, e.g. a variant name or an aggregation rate.
pub fn round_rows(logs: &[RoundLog], prefix: &[String]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for log in logs {
        for c in &log.clients {
            let mut row = prefix.to_vec();
            row.extend([
                log.round.to_string(),
                c.client.to_string(),
                c.test.accuracy.to_string(),
                opt(c.test.closed_accuracy),
                opt(c.test.open_accuracy),
                c.test.mean_uncertainty.to_string(),
                c.eval.accuracy.to_string(),
                c.eval.mean_uncertainty.to_string(),
                c.train_loss.to_string(),
            ]);
            rows.push(row);
        }
    }
    rows
}

/// CSV text with a header line; `prefix` names leading columns.
pub fn to_csv(prefix_names: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let header: Vec<&str> = prefix_names.iter().copied().chain(ROUND_COLUMNS).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn rounds_csv(logs: &[RoundLog]) -> String {
    to_csv(&[], &round_rows(logs, &[]))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    variant: Variant,
    config: &'a FedConfig,
    rounds: &'a [RoundLog],
    cross_eval: &'a [Vec<f64>],
    final_accuracy: f64,
    trainable_per_client: usize,
    traffic_bytes: usize,
    backbone_checksum: String,
}

/// Config echo, per-round logs with weight matrices, and the final
/// cross-evaluation matrix. Contains no timing, so identical inputs give
/// identical text.
pub fn run_json(cfg: &FedConfig, out: &RunOutput) -> Result<String> {
    let record = RunRecord {
        variant: out.variant,
        config: cfg,
        rounds: &out.logs,
        cross_eval: &out.cross_eval,
        final_accuracy: out.final_accuracy(),
        trainable_per_client: cfg.trainable_per_client(),
        traffic_bytes: out.traffic_bytes,
        backbone_checksum: format!("{:016x}", out.backbone_checksum),
    };
    Ok(serde_json::to_string_pretty(&record)? + "\n")
}

/// Prompts and heads of every client, names prefixed with `client{t}.`.
pub fn checkpoint(cfg: &FedConfig, clients: &[ClientState]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(cfg.backbone.seed);
    for c in clients {
        for (name, shape, data) in c.prompts.arrays() {
            ck.push(format!("client{}.{name}", c.id), shape.to_vec(), data)?;
        }
        for (name, shape, data) in c.head.arrays() {
            ck.push(format!("client{}.{name}", c.id), shape, data)?;
        }
    }
    Ok(ck)
}

/// Overwrites each client's prompts and head from a checkpoint written by
/// [`checkpoint`] with the same configuration.
pub fn restore(cfg: &FedConfig, ck: &Checkpoint, clients: &mut [ClientState]) -> Result<()> {
    if ck.backbone_seed != cfg.backbone.seed {
        return Err(Error::Format(format!(
            "checkpoint backbone seed {} differs from config {}",
            ck.backbone_seed, cfg.backbone.seed
        )));
    }
    for c in clients.iter_mut() {
        let fetch = |name: &str| {
            ck.get(&format!("client{}.{name}", c.id))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks client{}.{name}", c.id)))
        };
        let mut prompt_values = Vec::with_capacity(c.prompts.len());
        for (name, shape, _) in c.prompts.arrays() {
            let a = fetch(&name)?;
            if a.shape != shape {
                return Err(Error::dim("checkpoint prompt", &a.shape, &shape));
            }
            prompt_values.extend_from_slice(&a.data);
        }
        let prompts =
            PromptSet::from_flat(c.prompts.length(), c.prompts.width(), c.prompts.blocks().to_vec(), prompt_values)?;
        let mut head_values = Vec::with_capacity(c.head.len());
        for (name, shape, _) in c.head.arrays() {
            let a = fetch(name)?;
            if a.shape != shape {
                return Err(Error::dim("checkpoint head", &a.shape, &shape));
            }
            head_values.extend_from_slice(&a.data);
        }
        let head = AnswerHead::from_flat(c.head.input(), c.head.hidden(), c.head.output(), c.head.dropout(), head_values)?;
        c.prompts = prompts;
        c.head = head;
    }
    Ok(())
}
