//! Federated rounds over synthetic departments.
//!
//! Each round every client trains its prompts and answer head locally, then
//! publishes its prompts and mean uncertainty. The server fits aggregation
//! weights by probing the clients' answer likelihood under candidate
//! aggregated prompts and sends every client its aggregated prompts, which
//! replace the client's own.

pub mod client;
pub mod config;
pub mod dluc;
pub mod export;
pub mod messages;
pub mod optim;
pub mod run;

pub use client::{ClientState, Evaluation};
pub use config::FedConfig;
pub use run::{collect_publications, cross_evaluate, run_federation, run_with_data, ClientRound, RoundLog, RunOptions, RunOutput, Variant};
