mod support;

use evifed_core::model::Backbone;
use evifed_federation::run::generate_data;
use evifed_federation::{ClientState, FedConfig};
use support::small;

fn first_client(cfg: &FedConfig) -> (Backbone, ClientState) {
    let backbone = Backbone::new(&cfg.backbone).unwrap();
    let data = generate_data(cfg).unwrap().swap_remove(0);
    (backbone, ClientState::new(0, data, cfg).unwrap())
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = small(2, 1);
    cfg.prompt_lr = 0.0;
    cfg.head_lr = 0.0;
    let (backbone, mut client) = first_client(&cfg);
    let (prompts, head) = (client.prompts.clone(), client.head.clone());
    client.local_phase(&backbone, &cfg).unwrap();
    assert_eq!(client.prompts, prompts);
    assert_eq!(client.head, head);
    assert_eq!(client.phases(), 1);
}

#[test]
fn prompt_learning_rate_halves_per_phase() {
    let cfg = small(2, 1);
    let (backbone, mut client) = first_client(&cfg);
    for k in 1..=3 {
        client.local_phase(&backbone, &cfg).unwrap();
        assert_eq!(client.prompt_lr(), cfg.prompt_lr * 0.5f64.powi(k));
    }
}

#[test]
fn fixed_batch_loss_decreases_for_most_seeds() {
    let mut monotone = 0;
    for seed in 0..20 {
        let mut cfg = small(2, 1);
        cfg.seed_data = seed;
        cfg.seed_init = seed;
        cfg.seed_shuffle = seed;
        let (backbone, mut client) = first_client(&cfg);
        let batch: Vec<usize> = (0..cfg.batch_size).collect();
        let lambda = cfg.lambda;
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(client.train_step(&backbone, &batch, lambda, false).unwrap());
        }
        losses.push(client.loss_on(&backbone, &batch, lambda).unwrap());
        assert_eq!(losses[0], {
            let (b, fresh) = first_client(&cfg);
            fresh.loss_on(&b, &batch, lambda).unwrap()
        });
        monotone += usize::from(losses.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(monotone >= 18, "{monotone} of 20 seeds non-increasing");
}

#[test]
fn uniform_evidence_is_chance_on_closed_questions() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut cfg = small(2, 1);
        cfg.seed_data = seed;
        cfg.per_client_n = 200;
        let (backbone, mut client) = first_client(&cfg);
        client.head.as_mut_slice().fill(0.0);
        let eval = client.evaluate(&backbone, &client.data.test, None).unwrap();
        let closed = eval.closed_accuracy.unwrap();
        assert!((eval.mean_uncertainty - 1.0 / 2.0).abs() < 1e-12);
        total += closed;
    }
    assert!((total / 10.0 - 0.5).abs() <= 0.05);
}

#[test]
fn single_correct_instance_scores_one() {
    let cfg = small(2, 1);
    let (backbone, mut client) = first_client(&cfg);
    client.head.as_mut_slice().fill(0.0);
    let target = client.data.test.iter().find(|i| i.answer == 0).unwrap().clone();
    let eval = client.evaluate(&backbone, std::slice::from_ref(&target), None).unwrap();
    assert_eq!(eval.accuracy, 1.0);
    assert_eq!(eval.count, 1);
}

#[test]
fn empty_split_is_rejected() {
    let cfg = small(2, 1);
    let (backbone, client) = first_client(&cfg);
    assert!(client.evaluate(&backbone, &[], None).is_err());
}
