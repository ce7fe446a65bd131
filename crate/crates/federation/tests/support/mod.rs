#![allow(dead_code)]

use evifed_core::model::Backbone;
use evifed_federation::run::generate_data;
use evifed_federation::{ClientState, FedConfig};

/// A configuration small enough for unit-speed runs.
pub fn small(clients: usize, rounds: usize) -> FedConfig {
    let mut cfg = FedConfig::new(clients);
    cfg.rounds = rounds;
    cfg.per_client_n = 40;
    cfg.step_l = 3;
    cfg.step_c = 2;
    cfg.batch_size = 8;
    cfg
}

/// Clients after `phases` local phases each, plus the frozen backbone.
pub fn trained_clients(cfg: &FedConfig, phases: usize) -> (Backbone, Vec<ClientState>) {
    let backbone = Backbone::new(&cfg.backbone).unwrap();
    let mut clients: Vec<ClientState> = generate_data(cfg)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(t, d)| ClientState::new(t, d, cfg).unwrap())
        .collect();
    for c in &mut clients {
        for _ in 0..phases {
            c.local_phase(&backbone, cfg).unwrap();
        }
    }
    (backbone, clients)
}
