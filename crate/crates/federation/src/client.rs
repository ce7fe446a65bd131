use evifed_core::evidential::{batch_log_likelihood, batch_loss, EvidentialOutput};
use evifed_core::model::{forward_logits, AnswerHead, Backbone, ClientNodes, PromptSet};
use evifed_core::{Error, Graph, Result};
use evifed_synthdata::{ClientData, QuestionType, VqaInstance};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::FedConfig;
use crate::optim::Adam;

const EVAL_CHUNK: usize = 64;

/// Accuracy and uncertainty of one model on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` when the split holds no closed questions.
    pub closed_accuracy: Option<f64>,
    pub open_accuracy: Option<f64>,
    pub accuracy: f64,
    pub mean_uncertainty: f64,
    pub count: usize,
}

/// One client's private state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: ClientData,
    pub prompts: PromptSet,
    pub head: AnswerHead,
    prompt_opt: Adam,
    head_opt: Adam,
    prompt_lr: f64,
    head_lr: f64,
    phases: u32,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub last_uncertainty: Option<f64>,
    pub last_accuracy: Option<f64>,
}

/// Prompts and head every client starts from, drawn from `seed_init`.
pub fn initial_parameters(cfg: &FedConfig) -> Result<(PromptSet, AnswerHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_init);
    let prompts = if cfg.prompt_init_std > 0.0 {
        PromptSet::random(&cfg.prompt, &cfg.backbone, cfg.prompt_init_std, &mut rng)?
    } else {
        PromptSet::zeros(&cfg.prompt, &cfg.backbone)?
    };
    let head = AnswerHead::new(cfg.backbone.feature_dim(), cfg.backbone.answer_count, &cfg.head, &mut rng)?;
    Ok((prompts, head))
}

fn inputs<'a>(instances: &[&'a VqaInstance]) -> (Vec<&'a [f64]>, Vec<&'a [usize]>, Vec<usize>) {
    (
        instances.iter().map(|i| i.image.as_slice()).collect(),
        instances.iter().map(|i| i.question.as_slice()).collect(),
        instances.iter().map(|i| i.answer).collect(),
    )
}

impl ClientState {
    pub fn new(id: usize, data: ClientData, cfg: &FedConfig) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Config(format!("client {id} has an empty training partition")));
        }
        let (prompts, head) = initial_parameters(cfg)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed_shuffle);
        shuffle.set_stream(2 * id as u64);
        let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed_shuffle);
        dropout.set_stream(2 * id as u64 + 1);
        Ok(Self {
            id,
            prompt_opt: Adam::new(prompts.len()),
            head_opt: Adam::new(head.len()),
            prompts,
            head,
            prompt_lr: cfg.prompt_lr,
            head_lr: cfg.head_lr,
            phases: 0,
            shuffle,
            dropout,
            order: Vec::new(),
            cursor: 0,
            last_uncertainty: None,
            last_accuracy: None,
            data,
        })
    }

    pub fn phases(&self) -> u32 {
        self.phases
    }

    pub fn prompt_lr(&self) -> f64 {
        self.prompt_lr
    }

    pub fn trainable_count(&self) -> usize {
        self.prompts.len() + self.head.len()
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.data.train.len();
        let size = size.min(n);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.shuffle);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Mean training loss on `indices` of the training split, no dropout.
    pub fn loss_on(&self, backbone: &Backbone, indices: &[usize], lambda: f64) -> Result<f64> {
        let batch: Vec<&VqaInstance> = indices.iter().map(|&i| &self.data.train[i]).collect();
        let (images, questions, labels) = inputs(&batch);
        let mut g = Graph::new();
        let nodes = ClientNodes {
            prompts: g.constant(self.prompts.to_tensor()),
            head: g.constant(self.head.to_tensor()),
        };
        let logits = forward_logits(&mut g, backbone, &self.prompts, &self.head, nodes, &images, &questions, None)?;
        let loss = batch_loss(&mut g, logits, &labels, lambda)?;
        Ok(g.value(loss).data()[0])
    }

    /// One optimizer step on the given training indices; returns the loss
    /// before the update.
    pub fn train_step(&mut self, backbone: &Backbone, indices: &[usize], lambda: f64, dropout: bool) -> Result<f64> {
        let batch: Vec<&VqaInstance> = indices.iter().map(|&i| &self.data.train[i]).collect();
        let (images, questions, labels) = inputs(&batch);
        let mask = if dropout {
            self.head.dropout_mask(batch.len(), &mut self.dropout)
        } else {
            None
        };
        let mut g = Graph::new();
        let nodes = ClientNodes {
            prompts: g.param(self.prompts.to_tensor()),
            head: g.param(self.head.to_tensor()),
        };
        let logits = forward_logits(&mut g, backbone, &self.prompts, &self.head, nodes, &images, &questions, mask)?;
        let loss = batch_loss(&mut g, logits, &labels, lambda)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let pg = g.grad(nodes.prompts).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.prompts.len()]);
        let hg = g.grad(nodes.head).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.head.len()]);
        self.prompt_opt.step(self.prompts.as_mut_slice(), &pg, self.prompt_lr);
        self.head_opt.step(self.head.as_mut_slice(), &hg, self.head_lr);
        Ok(value)
    }

    /// `step_l` minibatch steps, then learning-rate decay and a refresh of the
    /// published uncertainty and accuracy on the evaluation split. Returns the
    /// mean training loss over the phase.
    pub fn local_phase(&mut self, backbone: &Backbone, cfg: &FedConfig) -> Result<f64> {
        if cfg.step_l == 0 {
            return Err(Error::Config("step_l must be at least 1".into()));
        }
        let lambda = cfg.loss().effective_lambda(self.phases);
        let dropout = !cfg.deterministic;
        let mut total = 0.0;
        for _ in 0..cfg.step_l {
            let batch = self.next_batch(cfg.batch_size);
            total += self.train_step(backbone, &batch, lambda, dropout)?;
        }
        self.phases += 1;
        self.prompt_lr *= cfg.prompt_lr_decay;
        self.head_lr *= cfg.head_lr_decay;
        let eval = self.evaluate(backbone, &self.data.eval, None)?;
        self.last_uncertainty = Some(eval.mean_uncertainty);
        self.last_accuracy = Some(eval.accuracy);
        Ok(total / cfg.step_l as f64)
    }

    /// Scores `split` with this client's head and either its own prompts or
    /// the given ones. Dropout is never applied.
    pub fn evaluate(&self, backbone: &Backbone, split: &[VqaInstance], prompts: Option<&PromptSet>) -> Result<Evaluation> {
        if split.is_empty() {
            return Err(Error::InvalidInput(format!("client {} evaluated on an empty split", self.id)));
        }
        let prompts = prompts.unwrap_or(&self.prompts);
        let (mut closed, mut closed_hits, mut open, mut open_hits) = (0usize, 0usize, 0usize, 0usize);
        let mut u_sum = 0.0;
        for chunk in split.chunks(EVAL_CHUNK) {
            let batch: Vec<&VqaInstance> = chunk.iter().collect();
            let (images, questions, labels) = inputs(&batch);
            let mut g = Graph::new();
            let nodes = ClientNodes {
                prompts: g.constant(prompts.to_tensor()),
                head: g.constant(self.head.to_tensor()),
            };
            let logits = forward_logits(&mut g, backbone, prompts, &self.head, nodes, &images, &questions, None)?;
            let j = g.value(logits).cols();
            for ((row, &label), inst) in g.value(logits).data().chunks(j).zip(&labels).zip(chunk) {
                let out = EvidentialOutput::from_logits(row)?;
                u_sum += out.uncertainty;
                let hit = usize::from(out.predicted() == label);
                match inst.question_type {
                    QuestionType::Closed => {
                        closed += 1;
                        closed_hits += hit;
                    }
                    QuestionType::Open => {
                        open += 1;
                        open_hits += hit;
                    }
                }
            }
        }
        let ratio = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
        Ok(Evaluation {
            closed_accuracy: ratio(closed_hits, closed),
            open_accuracy: ratio(open_hits, open),
            accuracy: (closed_hits + open_hits) as f64 / split.len() as f64,
            mean_uncertainty: u_sum / split.len() as f64,
            count: split.len(),
        })
    }

    /// Dirichlet-mean answer log-likelihood of the evaluation split under
    /// `prompts` (head frozen) and its gradient with respect to the prompts.
    pub fn log_likelihood(&self, backbone: &Backbone, prompts: &PromptSet) -> Result<(f64, Vec<f64>)> {
        if self.data.eval.is_empty() {
            return Err(Error::InvalidInput(format!("client {} has an empty evaluation batch", self.id)));
        }
        self.prompts.check_compatible(prompts)?;
        let batch: Vec<&VqaInstance> = self.data.eval.iter().collect();
        let (images, questions, labels) = inputs(&batch);
        let mut g = Graph::new();
        let nodes = ClientNodes {
            prompts: g.param(prompts.to_tensor()),
            head: g.constant(self.head.to_tensor()),
        };
        let logits = forward_logits(&mut g, backbone, prompts, &self.head, nodes, &images, &questions, None)?;
        let ll = batch_log_likelihood(&mut g, logits, &labels)?;
        g.backward(ll)?;
        let grad = g.grad(nodes.prompts).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; prompts.len()]);
        Ok((g.value(ll).data()[0], grad))
    }

    /// Replaces the working prompts with aggregated ones from the server.
    pub fn receive_prompts(&mut self, prompts: PromptSet) -> Result<()> {
        self.prompts.check_compatible(&prompts)?;
        if prompts.len() != self.prompts.len() {
            return Err(Error::dim("received prompts", &[prompts.len()], &[self.prompts.len()]));
        }
        self.prompts = prompts;
        Ok(())
    }
}
