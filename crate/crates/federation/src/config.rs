use evifed_core::evidential::LossConfig;
use evifed_core::model::{BackboneConfig, HeadConfig, PromptConfig};
use evifed_core::{Error, Result};
use evifed_synthdata::GenConfig;
use serde::{Deserialize, Serialize};

/// Everything that determines a federated run.
///
/// Only `T` is required when deserializing; every other field has a
/// desk-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    #[serde(rename = "T")]
    pub clients: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::step_l")]
    pub step_l: usize,
    #[serde(default = "defaults::step_c")]
    pub step_c: usize,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// Local phases over which the regularizer weight ramps up to `lambda`.
    #[serde(default)]
    pub lambda_ramp: Option<u32>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::per_client_n")]
    pub per_client_n: usize,
    #[serde(default = "defaults::prompt_lr")]
    pub prompt_lr: f64,
    #[serde(default = "defaults::prompt_lr_decay")]
    pub prompt_lr_decay: f64,
    #[serde(default = "defaults::head_lr")]
    pub head_lr: f64,
    #[serde(default = "defaults::head_lr_decay")]
    pub head_lr_decay: f64,
    #[serde(default = "defaults::weight_lr")]
    pub weight_lr: f64,
    #[serde(default = "defaults::weight_lr_decay")]
    pub weight_lr_decay: f64,
    /// Standard deviation of the shared prompt initialization.
    #[serde(default)]
    pub prompt_init_std: f64,
    #[serde(default)]
    pub seed_data: u64,
    #[serde(default)]
    pub seed_init: u64,
    #[serde(default)]
    pub seed_shuffle: u64,
    /// Disables dropout.
    #[serde(default)]
    pub deterministic: bool,
    /// Runs client local phases on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub data: GenConfig,
}

mod defaults {
    pub fn rounds() -> usize {
        10
    }
    pub fn step_l() -> usize {
        20
    }
    pub fn step_c() -> usize {
        5
    }
    pub fn mu() -> f64 {
        0.2
    }
    pub fn lambda() -> f64 {
        0.1
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn per_client_n() -> usize {
        200
    }
    pub fn prompt_lr() -> f64 {
        0.01
    }
    pub fn prompt_lr_decay() -> f64 {
        0.5
    }
    pub fn head_lr() -> f64 {
        0.003
    }
    pub fn head_lr_decay() -> f64 {
        1.0
    }
    pub fn weight_lr() -> f64 {
        0.01
    }
    pub fn weight_lr_decay() -> f64 {
        0.1
    }
}

impl FedConfig {
    /// Defaults for `clients` clients.
    pub fn new(clients: usize) -> Self {
        Self {
            clients,
            rounds: defaults::rounds(),
            step_l: defaults::step_l(),
            step_c: defaults::step_c(),
            mu: defaults::mu(),
            lambda: defaults::lambda(),
            lambda_ramp: None,
            batch_size: defaults::batch_size(),
            per_client_n: defaults::per_client_n(),
            prompt_lr: defaults::prompt_lr(),
            prompt_lr_decay: defaults::prompt_lr_decay(),
            head_lr: defaults::head_lr(),
            head_lr_decay: defaults::head_lr_decay(),
            weight_lr: defaults::weight_lr(),
            weight_lr_decay: defaults::weight_lr_decay(),
            prompt_init_std: 0.0,
            seed_data: 0,
            seed_init: 0,
            seed_shuffle: 0,
            deterministic: false,
            parallel: false,
            prompt: PromptConfig::default(),
            head: HeadConfig::default(),
            backbone: BackboneConfig::default(),
            data: GenConfig::default(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            lambda_ramp: self.lambda_ramp,
        }
    }

    /// Checks every field; the message names the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Config(format!("{name}: {msg}")));
        if self.clients < 2 {
            return field("T", format!("need at least 2 clients, got {}", self.clients));
        }
        for (name, v) in [
            ("rounds", self.rounds),
            ("step_l", self.step_l),
            ("step_c", self.step_c),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return field(name, "must be at least 1".into());
            }
        }
        let nonneg = [
            ("mu", self.mu),
            ("lambda", self.lambda),
            ("prompt_lr", self.prompt_lr),
            ("prompt_lr_decay", self.prompt_lr_decay),
            ("head_lr", self.head_lr),
            ("head_lr_decay", self.head_lr_decay),
            ("weight_lr", self.weight_lr),
            ("weight_lr_decay", self.weight_lr_decay),
            ("prompt_init_std", self.prompt_init_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return field(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.lambda_ramp == Some(0) {
            return field("lambda_ramp", "must be at least 1 when set".into());
        }
        if self.per_client_n < evifed_synthdata::MIN_PER_CLIENT {
            return field(
                "per_client_n",
                format!("must be at least {}, got {}", evifed_synthdata::MIN_PER_CLIENT, self.per_client_n),
            );
        }
        if self.clients > evifed_synthdata::MAX_CLIENTS {
            return field("T", format!("at most {} clients supported", evifed_synthdata::MAX_CLIENTS));
        }
        self.backbone.validate().map_err(|e| Error::Config(format!("backbone: {e}")))?;
        self.prompt.validate(&self.backbone).map_err(|e| Error::Config(format!("prompt: {e}")))?;
        self.head.validate().map_err(|e| Error::Config(format!("head: {e}")))?;
        self.data.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
        if self.data.side != self.backbone.image_grid {
            return field(
                "data.side",
                format!("{} differs from backbone.image_grid {}", self.data.side, self.backbone.image_grid),
            );
        }
        if self.data.question_len != self.backbone.max_question_len {
            return field(
                "data.question_len",
                format!(
                    "{} differs from backbone.max_question_len {}",
                    self.data.question_len, self.backbone.max_question_len
                ),
            );
        }
        if self.backbone.question_vocab < evifed_synthdata::token::VOCAB {
            return field(
                "backbone.question_vocab",
                format!("must cover the {} question tokens", evifed_synthdata::token::VOCAB),
            );
        }
        if self.backbone.answer_count != evifed_synthdata::ANSWERS.len() {
            return field(
                "backbone.answer_count",
                format!("synthetic answers need J = {}", evifed_synthdata::ANSWERS.len()),
            );
        }
        Ok(())
    }

    /// Trainable scalars held by one client.
    pub fn trainable_per_client(&self) -> usize {
        let prompts = 2 * self.prompt.blocks.len() * self.prompt.length * self.backbone.hidden_dim;
        let head = evifed_core::model::AnswerHead::count(
            self.backbone.feature_dim(),
            self.head.hidden,
            self.backbone.answer_count,
        );
        prompts + head
    }
}
