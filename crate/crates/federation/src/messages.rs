//! Everything that crosses a client/server boundary.
//!
//! Messages carry prompt arrays, scalar summaries, weight rows and ids. They
//! are serialized to JSON and parsed back on every transfer, so the receiver
//! only ever sees what the schema admits. A [`Channel`] can keep the
//! serialized transcript for auditing.

use evifed_core::model::PromptSet;
use evifed_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Client to server after a local phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientPublish {
    pub client_id: usize,
    pub round: usize,
    pub prompts: PromptSet,
    pub mean_uncertainty: f64,
    pub eval_accuracy: f64,
}

/// Server to client at the end of a communication phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerDistribute {
    pub client_id: usize,
    pub round: usize,
    pub prompts: PromptSet,
    pub weight_row: Vec<f64>,
}

/// Server to client during weight optimization: candidate aggregated prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodRequest {
    pub client_id: usize,
    pub round: usize,
    pub iteration: usize,
    pub prompts: PromptSet,
}

/// Client reply: answer log-likelihood over its evaluation split and its
/// gradient with respect to the candidate prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodReply {
    pub client_id: usize,
    pub round: usize,
    pub iteration: usize,
    pub log_likelihood: f64,
    pub prompt_gradient: Vec<f64>,
}

/// One serialized transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub kind: String,
    pub body: String,
}

/// Serializing transport with an optional transcript.
#[derive(Debug, Default)]
pub struct Channel {
    record: bool,
    transcript: Vec<Envelope>,
    bytes: usize,
}

impl Channel {
    pub fn new(record: bool) -> Self {
        Self {
            record,
            transcript: Vec::new(),
            bytes: 0,
        }
    }

    /// Passes `msg` through its JSON form and returns what the receiver parses.
    pub fn send<M: Serialize + DeserializeOwned>(&mut self, kind: &str, msg: &M) -> Result<M> {
        let body = serde_json::to_string(msg)?;
        self.bytes += body.len();
        let received = serde_json::from_str(&body).map_err(|e| Error::Protocol(format!("{kind}: {e}")))?;
        if self.record {
            self.transcript.push(Envelope {
                kind: kind.to_string(),
                body,
            });
        }
        Ok(received)
    }

    pub fn transcript(&self) -> &[Envelope] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.transcript)
    }

    /// Total serialized bytes sent so far.
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

/// Field names any message may contain, including those of nested prompt sets.
pub const SCHEMA_FIELDS: &[&str] = &[
    "client_id",
    "round",
    "iteration",
    "prompts",
    "length",
    "width",
    "blocks",
    "values",
    "mean_uncertainty",
    "eval_accuracy",
    "weight_row",
    "log_likelihood",
    "prompt_gradient",
];

/// Every object key appearing in a serialized message, depth first.
pub fn field_names(body: &str) -> Result<Vec<String>> {
    fn walk(v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    out.push(k.clone());
                    walk(child, out);
                }
            }
            serde_json::Value::Array(items) => items.iter().for_each(|c| walk(c, out)),
            _ => {}
        }
    }
    let value: serde_json::Value = serde_json::from_str(body)?;
    let mut out = Vec::new();
    walk(&value, &mut out);
    Ok(out)
}
