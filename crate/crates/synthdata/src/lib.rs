//! Synthetic visual question answering "departments".
//!
//! Each client draws greyscale images from its own pattern family and is asked
//! two question templates about them: a closed "is PATTERN present" (yes/no)
//! and an open "how many PATTERN are there" (one..six). Generation is a pure
//! function of the client count, the per-client instance count and the seed.

mod family;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use family::{Attribute, Family};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// The shared answer list; closed questions use the first two entries.
pub const ANSWERS: [&str; 8] = ["no", "yes", "one", "two", "three", "four", "five", "six"];
pub const NO: usize = 0;
pub const YES: usize = 1;

/// Question token ids. Token 0 pads questions to a fixed length.
pub mod token {
    pub const PAD: usize = 0;
    pub const IS: usize = 1;
    pub const PRESENT: usize = 2;
    pub const HOW: usize = 3;
    pub const MANY: usize = 4;
    pub const ARE: usize = 5;
    pub const THERE: usize = 6;
    pub const QUESTION_MARK: usize = 7;
    /// Pattern names start here, one per family in `Family::ALL` order.
    pub const PATTERN_BASE: usize = 8;
    /// Smallest vocabulary that covers every token.
    pub const VOCAB: usize = PATTERN_BASE + 8;
}

/// Number of noise variants per family; together with the eight families this
/// bounds the client count.
pub const VARIANTS: usize = 16;
pub const MAX_CLIENTS: usize = 8 * VARIANTS;
pub const MIN_PER_CLIENT: usize = 30;

const BASE_NOISE: f64 = 0.05;
const NOISE_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaInstance {
    /// Row-major `side x side` image with values in `[0, 1]`.
    pub image: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: usize,
    pub question_type: QuestionType,
}

/// Visual distribution of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepartmentSpec {
    pub family: Family,
    pub variant: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl DepartmentSpec {
    /// Default department of client `t`: families cycle, and each full cycle
    /// adds a little pixel noise.
    pub fn for_client(t: usize) -> Result<Self> {
        if t >= MAX_CLIENTS {
            return Err(Error::Config(format!("client {t} exceeds the {MAX_CLIENTS} family variants")));
        }
        let variant = t / Family::ALL.len();
        Ok(Self {
            family: Family::ALL[t % Family::ALL.len()],
            variant,
            noise: BASE_NOISE + NOISE_STEP * variant as f64,
        })
    }

    pub fn attributes(&self) -> &'static [Attribute] {
        self.family.attributes()
    }
}

/// Prescribed overlap between two departments' pattern families.
pub fn relatedness(a: &DepartmentSpec, b: &DepartmentSpec) -> f64 {
    a.family.relatedness(b.family)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub side: usize,
    pub question_len: usize,
    /// Probability of replacing an answer with a random one of the same type.
    pub label_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            side: 8,
            question_len: 8,
            label_noise: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || self.side % 2 != 0 {
            return Err(Error::Config(format!("image side {} must be even and at least 8", self.side)));
        }
        if self.question_len < 6 {
            return Err(Error::Config(format!("question length {} below 6", self.question_len)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 1]", self.label_noise)));
        }
        Ok(())
    }
}

/// One client's disjoint train/eval/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub spec: DepartmentSpec,
    pub train: Vec<VqaInstance>,
    pub eval: Vec<VqaInstance>,
    pub test: Vec<VqaInstance>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &VqaInstance> {
        self.train.iter().chain(&self.eval).chain(&self.test)
    }
}

/// Split sizes for `n` instances: 70% train, 15% eval, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let eval = n * 15 / 100;
    (train, eval, n - train - eval)
}

/// `T` default departments with `per_client_n` instances each.
pub fn generate(t: usize, per_client_n: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<ClientData>> {
    if t == 0 {
        return Err(Error::Config("client count must be positive".into()));
    }
    if t > MAX_CLIENTS {
        return Err(Error::Config(format!("{t} clients exceed the {MAX_CLIENTS} family variants")));
    }
    let specs = (0..t).map(DepartmentSpec::for_client).collect::<Result<Vec<_>>>()?;
    generate_for_specs(&specs, per_client_n, seed, cfg)
}

/// Like [`generate`] with explicit departments. Client `i` draws from its own
/// random stream, so its data does not depend on the other clients.
pub fn generate_for_specs(
    specs: &[DepartmentSpec],
    per_client_n: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Vec<ClientData>> {
    cfg.validate()?;
    if per_client_n < MIN_PER_CLIENT {
        return Err(Error::Config(format!("per_client_n {per_client_n} below {MIN_PER_CLIENT}")));
    }
    for s in specs {
        if !(s.noise >= 0.0 && s.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and nonnegative", s.noise)));
        }
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            client(spec, per_client_n, cfg, &mut rng)
        })
        .collect())
}

fn client(spec: &DepartmentSpec, n: usize, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> ClientData {
    // Alternate closed/open and, within closed, yes/no so the balance holds
    // exactly before shuffling.
    let mut instances: Vec<VqaInstance> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let yes = (i / 2) % 2 == 0;
                closed(spec, yes, cfg, rng)
            } else {
                open(spec, cfg, rng)
            }
        })
        .collect();
    instances.shuffle(rng);
    let (train, eval, _) = split_sizes(n);
    let test = instances.split_off(train + eval);
    let eval = instances.split_off(train);
    ClientData {
        spec: *spec,
        train: instances,
        eval,
        test,
    }
}

fn question(words: &[usize], len: usize) -> Vec<usize> {
    let mut q = words.to_vec();
    q.resize(len, token::PAD);
    q
}

fn pattern_token(f: Family) -> usize {
    token::PATTERN_BASE + f.index()
}

/// Family drawn into "no" images instead of the department's own pattern.
fn distractor(f: Family) -> Family {
    Family::ALL[(f.index() + 4) % Family::ALL.len()]
}

fn image(spec: &DepartmentSpec, family: Family, count: usize, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = cfg.side;
    let background = rng.random_range(0.0..0.15);
    let mut canvas = vec![background; side * side];
    family.draw(&mut canvas, side, count, rng);
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in &mut canvas {
            *v += normal.sample(rng);
        }
    }
    for v in &mut canvas {
        *v = v.clamp(0.0, 1.0);
    }
    canvas
}

fn noisy_label(answer: usize, choices: std::ops::Range<usize>, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
        rng.random_range(choices)
    } else {
        answer
    }
}

fn closed(spec: &DepartmentSpec, yes: bool, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> VqaInstance {
    let family = if yes { spec.family } else { distractor(spec.family) };
    let count = rng.random_range(1..=family.max_count());
    let image = image(spec, family, count, cfg, rng);
    let answer = noisy_label(if yes { YES } else { NO }, NO..YES + 1, cfg, rng);
    VqaInstance {
        image,
        question: question(
            &[token::IS, pattern_token(spec.family), token::PRESENT, token::QUESTION_MARK],
            cfg.question_len,
        ),
        answer,
        question_type: QuestionType::Closed,
    }
}

fn open(spec: &DepartmentSpec, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> VqaInstance {
    let max = spec.family.max_count();
    let count = rng.random_range(1..=max);
    let image = image(spec, spec.family, count, cfg, rng);
    let answer = noisy_label(YES + count, YES + 1..YES + 1 + max, cfg, rng);
    VqaInstance {
        image,
        question: question(
            &[
                token::HOW,
                token::MANY,
                pattern_token(spec.family),
                token::ARE,
                token::THERE,
                token::QUESTION_MARK,
            ],
            cfg.question_len,
        ),
        answer,
        question_type: QuestionType::Open,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

/// One line of the dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub client: usize,
    pub split: Split,
    pub index: usize,
    pub family: Family,
    pub variant: usize,
    pub noise: f64,
    #[serde(flatten)]
    pub instance: VqaInstance,
}

/// Writes every instance as one JSON object per line, clients in order and
/// splits in train/eval/test order.
pub fn dump<W: Write>(clients: &[ClientData], mut out: W) -> Result<()> {
    for (c, data) in clients.iter().enumerate() {
        for (split, list) in [(Split::Train, &data.train), (Split::Eval, &data.eval), (Split::Test, &data.test)] {
            for (index, instance) in list.iter().enumerate() {
                let record = Record {
                    client: c,
                    split,
                    index,
                    family: data.spec.family,
                    variant: data.spec.variant,
                    noise: data.spec.noise,
                    instance: instance.clone(),
                };
                serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Reads a dump back. Records may appear in any order; clients must be
/// numbered densely from 0.
pub fn load<R: BufRead>(input: R) -> Result<Vec<ClientData>> {
    let mut by_client: BTreeMap<usize, (DepartmentSpec, Vec<(Split, usize, VqaInstance)>)> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        let spec = DepartmentSpec {
            family: r.family,
            variant: r.variant,
            noise: r.noise,
        };
        let entry = by_client.entry(r.client).or_insert_with(|| (spec, Vec::new()));
        if entry.0 != spec {
            return Err(Error::Format {
                line: i + 1,
                message: format!("client {} changes department", r.client),
            });
        }
        entry.1.push((r.split, r.index, r.instance));
    }
    let mut clients = Vec::with_capacity(by_client.len());
    for (expected, (client, (spec, mut records))) in by_client.into_iter().enumerate() {
        if client != expected {
            return Err(Error::Format {
                line: 0,
                message: format!("client ids skip {expected}"),
            });
        }
        records.sort_by_key(|(s, idx, _)| (*s, *idx));
        let mut data = ClientData {
            spec,
            train: Vec::new(),
            eval: Vec::new(),
            test: Vec::new(),
        };
        for (split, _, instance) in records {
            match split {
                Split::Train => data.train.push(instance),
                Split::Eval => data.eval.push(instance),
                Split::Test => data.test.push(instance),
            }
        }
        clients.push(data);
    }
    Ok(clients)
}
