use std::time::{Duration, Instant};

use evifed_core::model::{Backbone, PromptSet};
use evifed_core::{Error, Result};
use evifed_synthdata::{generate, ClientData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, Evaluation};
use crate::config::FedConfig;
use crate::dluc::{aggregate_prompts, DlucState};
use crate::messages::{Channel, ClientPublish, Envelope, LikelihoodReply, LikelihoodRequest, ServerDistribute};

/// Which parts of the protocol are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Local training plus learned aggregation weights.
    Dluc,
    /// Local training plus fixed weights `1/(T-1)`.
    Uniform,
    /// Local training only; every client runs alone.
    Isolated,
    /// One model trained on the union of all training partitions.
    Pooled,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dluc, Variant::Pooled, Variant::Isolated, Variant::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dluc => "dluc",
            Variant::Uniform => "uniform",
            Variant::Isolated => "isolated",
            Variant::Pooled => "pooled",
        }
    }
}

/// Per-client entry of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub train_loss: f64,
    /// Test split.
    pub test: Evaluation,
    /// Evaluation split; its uncertainty is what the client publishes.
    pub eval: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    /// Aggregation weights distributed at the end of the round.
    pub weights: Option<Vec<Vec<f64>>>,
    /// Likelihood objective at each weight-optimization iteration.
    pub objective: Option<Vec<f64>>,
    #[serde(skip)]
    pub duration: Duration,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the serialized transcript of every message.
    pub record_messages: bool,
    /// Leave `RunOutput::cross_eval` empty; it costs `T^2` test passes.
    pub skip_cross_eval: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub variant: Variant,
    pub logs: Vec<RoundLog>,
    pub clients: Vec<ClientState>,
    /// Entry `(i, j)`: test accuracy of client `i` using client `j`'s prompts.
    pub cross_eval: Vec<Vec<f64>>,
    pub transcript: Vec<Envelope>,
    pub traffic_bytes: usize,
    pub backbone_checksum: u64,
}

impl RunOutput {
    /// Mean test accuracy over clients after the last round.
    pub fn final_accuracy(&self) -> f64 {
        let last = self.logs.last().expect("at least one round");
        last.clients.iter().map(|c| c.test.accuracy).sum::<f64>() / last.clients.len() as f64
    }
}

fn client_round(c: &ClientState, backbone: &Backbone, train_loss: f64) -> Result<ClientRound> {
    Ok(ClientRound {
        client: c.id,
        train_loss,
        test: c.evaluate(backbone, &c.data.test, None)?,
        eval: c.evaluate(backbone, &c.data.eval, None)?,
    })
}

fn local_phases(clients: &mut [ClientState], backbone: &Backbone, cfg: &FedConfig) -> Result<Vec<ClientRound>> {
    let step = |c: &mut ClientState| -> Result<ClientRound> {
        let loss = c.local_phase(backbone, cfg)?;
        client_round(c, backbone, loss)
    };
    let results: Vec<Result<ClientRound>> = if cfg.parallel {
        clients.par_iter_mut().map(step).collect()
    } else {
        clients.iter_mut().map(step).collect()
    };
    results.into_iter().collect()
}

/// Generates the synthetic partitions for `cfg`.
pub fn generate_data(cfg: &FedConfig) -> Result<Vec<ClientData>> {
    generate(cfg.clients, cfg.per_client_n, cfg.seed_data, &cfg.data).map_err(|e| Error::Config(e.to_string()))
}

/// Runs `variant` end to end on freshly generated data.
pub fn run_federation(cfg: &FedConfig, variant: Variant, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    run_with_data(cfg, variant, data, opts)
}

/// Runs `variant` on the given partitions (one per client).
pub fn run_with_data(cfg: &FedConfig, variant: Variant, data: Vec<ClientData>, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    if data.len() != cfg.clients {
        return Err(Error::Config(format!("T: {} partitions for {} clients", data.len(), cfg.clients)));
    }
    let backbone = Backbone::new(&cfg.backbone)?;
    let checksum = backbone.checksum();
    let mut out = match variant {
        Variant::Dluc | Variant::Uniform => federated(cfg, variant, &backbone, data, opts)?,
        Variant::Isolated => isolated(cfg, &backbone, data)?,
        Variant::Pooled => pooled(cfg, &backbone, data)?,
    };
    if backbone.checksum() != checksum {
        return Err(Error::Protocol("backbone weights changed during the run".into()));
    }
    if !opts.skip_cross_eval {
        out.cross_eval = cross_evaluate(&backbone, &out.clients)?;
    }
    Ok(out)
}

fn federated(
    cfg: &FedConfig,
    variant: Variant,
    backbone: &Backbone,
    data: Vec<ClientData>,
    opts: RunOptions,
) -> Result<RunOutput> {
    let mut clients = data
        .into_iter()
        .enumerate()
        .map(|(t, d)| ClientState::new(t, d, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut channel = Channel::new(opts.record_messages);
    let mut server = DlucState::new(cfg.clients, cfg.mu, cfg.weight_lr, cfg.weight_lr_decay)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let entries = local_phases(&mut clients, backbone, cfg)?;

        let mut received = Vec::with_capacity(cfg.clients);
        for c in &clients {
            let msg = ClientPublish {
                client_id: c.id,
                round,
                prompts: c.prompts.clone(),
                mean_uncertainty: c.last_uncertainty.ok_or_else(|| missing(c.id))?,
                eval_accuracy: c.last_accuracy.ok_or_else(|| missing(c.id))?,
            };
            received.push(channel.send("client_publish", &msg)?);
        }
        let published = collect_publications(cfg.clients, round, received)?;
        let (weights, objective) = communicate(cfg, variant, &mut server, &published, &clients, backbone, &mut channel, round)?;

        for (t, c) in clients.iter_mut().enumerate() {
            let prompts = aggregate_prompts(t, &published.iter().map(|p| p.prompts.clone()).collect::<Vec<_>>(), &weights[t], cfg.mu)?;
            let msg = ServerDistribute {
                client_id: t,
                round,
                prompts,
                weight_row: weights[t].clone(),
            };
            let received = channel.send("server_distribute", &msg)?;
            c.receive_prompts(received.prompts)?;
        }
        logs.push(RoundLog {
            round,
            clients: entries,
            weights: Some(weights),
            objective,
            duration: start.elapsed(),
        });
    }
    Ok(RunOutput {
        variant,
        logs,
        clients,
        cross_eval: Vec::new(),
        traffic_bytes: channel.bytes(),
        transcript: channel.take_transcript(),
        backbone_checksum: backbone.checksum(),
    })
}

fn missing(t: usize) -> Error {
    Error::Protocol(format!("client {t} did not publish this round"))
}

/// Orders one round's publications by client id. Fails naming the first
/// client that is absent, duplicated, unknown or tagged with another round.
pub fn collect_publications(clients: usize, round: usize, received: Vec<ClientPublish>) -> Result<Vec<ClientPublish>> {
    let mut slots: Vec<Option<ClientPublish>> = vec![None; clients];
    for msg in received {
        let id = msg.client_id;
        if msg.round != round {
            return Err(Error::Protocol(format!("client {id} published for round {} during round {round}", msg.round)));
        }
        let slot = slots.get_mut(id).ok_or_else(|| Error::Protocol(format!("unknown client {id}")))?;
        if slot.is_some() {
            return Err(Error::Protocol(format!("client {id} published twice")));
        }
        *slot = Some(msg);
    }
    slots.into_iter().enumerate().map(|(t, p)| p.ok_or_else(|| missing(t))).collect()
}

#[allow(clippy::too_many_arguments)]
fn communicate(
    cfg: &FedConfig,
    variant: Variant,
    server: &mut DlucState,
    published: &[ClientPublish],
    clients: &[ClientState],
    backbone: &Backbone,
    channel: &mut Channel,
    round: usize,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let t = cfg.clients;
    if variant == Variant::Uniform {
        let uniform = (0..t)
            .map(|i| (0..t).map(|k| if k == i { 0.0 } else { 1.0 / (t - 1) as f64 }).collect())
            .collect();
        return Ok((uniform, None));
    }
    let u: Vec<f64> = published.iter().map(|p| p.mean_uncertainty).collect();
    let prompts: Vec<PromptSet> = published.iter().map(|p| p.prompts.clone()).collect();
    let mut calls = vec![0usize; t];
    let mut probe = |client: usize, agg: &PromptSet| -> Result<(f64, Vec<f64>)> {
        let request = LikelihoodRequest {
            client_id: client,
            round,
            iteration: calls[client],
            prompts: agg.clone(),
        };
        calls[client] += 1;
        let request = channel.send("likelihood_request", &request)?;
        let (ll, grad) = clients[request.client_id].log_likelihood(backbone, &request.prompts)?;
        let reply = LikelihoodReply {
            client_id: request.client_id,
            round,
            iteration: request.iteration,
            log_likelihood: ll,
            prompt_gradient: grad,
        };
        let reply = channel.send("likelihood_reply", &reply)?;
        Ok((reply.log_likelihood, reply.prompt_gradient))
    };
    let trace = server.optimize(&u, &prompts, cfg.step_c, &mut probe)?;
    let weights = server.last_weights.clone().expect("set by optimize");
    Ok((weights, Some(trace)))
}

fn isolated(cfg: &FedConfig, backbone: &Backbone, data: Vec<ClientData>) -> Result<RunOutput> {
    let mut clients = Vec::with_capacity(data.len());
    let mut per_client: Vec<Vec<(ClientRound, Duration)>> = Vec::with_capacity(data.len());
    for (t, d) in data.into_iter().enumerate() {
        let mut c = ClientState::new(t, d, cfg)?;
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let start = Instant::now();
            let loss = c.local_phase(backbone, cfg)?;
            rounds.push((client_round(&c, backbone, loss)?, start.elapsed()));
        }
        per_client.push(rounds);
        clients.push(c);
    }
    let logs = (0..cfg.rounds)
        .map(|r| RoundLog {
            round: r,
            clients: per_client.iter().map(|rs| rs[r].0.clone()).collect(),
            weights: None,
            objective: None,
            duration: per_client.iter().map(|rs| rs[r].1).sum(),
        })
        .collect();
    Ok(RunOutput {
        variant: Variant::Isolated,
        logs,
        clients,
        cross_eval: Vec::new(),
        transcript: Vec::new(),
        traffic_bytes: 0,
        backbone_checksum: backbone.checksum(),
    })
}

fn pooled(cfg: &FedConfig, backbone: &Backbone, data: Vec<ClientData>) -> Result<RunOutput> {
    let union = ClientData {
        spec: data[0].spec,
        train: data.iter().flat_map(|d| d.train.iter().cloned()).collect(),
        eval: data.iter().flat_map(|d| d.eval.iter().cloned()).collect(),
        test: data.iter().flat_map(|d| d.test.iter().cloned()).collect(),
    };
    let mut model = ClientState::new(0, union, cfg)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let loss = model.local_phase(backbone, cfg)?;
        let clients = data
            .iter()
            .enumerate()
            .map(|(t, d)| {
                Ok(ClientRound {
                    client: t,
                    train_loss: loss,
                    test: model.evaluate(backbone, &d.test, None)?,
                    eval: model.evaluate(backbone, &d.eval, None)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        logs.push(RoundLog {
            round,
            clients,
            weights: None,
            objective: None,
            duration: start.elapsed(),
        });
    }
    let clients = data
        .into_iter()
        .enumerate()
        .map(|(t, d)| {
            let mut c = model.clone();
            c.id = t;
            c.data = d;
            c
        })
        .collect();
    Ok(RunOutput {
        variant: Variant::Pooled,
        logs,
        clients,
        cross_eval: Vec::new(),
        transcript: Vec::new(),
        traffic_bytes: 0,
        backbone_checksum: backbone.checksum(),
    })
}

/// Test accuracy of client `i` with client `j`'s prompts and client `i`'s head.
pub fn cross_evaluate(backbone: &Backbone, clients: &[ClientState]) -> Result<Vec<Vec<f64>>> {
    clients
        .iter()
        .map(|ci| {
            clients
                .iter()
                .map(|cj| Ok(ci.evaluate(backbone, &ci.data.test, Some(&cj.prompts))?.accuracy))
                .collect()
        })
        .collect()
}
