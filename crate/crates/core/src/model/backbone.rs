use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::BackboneConfig;
use super::prompt::PromptVars;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const POSITION_STD: f64 = 0.5;

#[derive(Debug, Clone)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone)]
struct Encoder {
    /// Patch projection (image) or token table (question), `input x m`.
    embed: Tensor,
    position: Tensor,
    blocks: Vec<Block>,
}

/// Frozen image and question encoders with concatenation fusion.
///
/// Weights never enter a graph as trainable leaves, so no training step can
/// change them. Images are split into non-overlapping patches (pixels centred
/// at 0.5); questions are fixed-length token sequences padded with token 0.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    image: Encoder,
    question: Encoder,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl Encoder {
    fn new(rng: &mut ChaCha8Rng, cfg: &BackboneConfig, input: usize, input_std: f64, len: usize) -> Self {
        let m = cfg.hidden_dim;
        let f = m * cfg.mlp_ratio;
        let embed = gaussian(rng, input, m, input_std);
        let position = gaussian(rng, len, m, POSITION_STD);
        let inv_m = 1.0 / (m as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                wq: gaussian(rng, m, m, inv_m),
                wk: gaussian(rng, m, m, inv_m),
                wv: gaussian(rng, m, m, inv_m),
                wo: gaussian(rng, m, m, inv_m),
                w1: gaussian(rng, m, f, inv_m),
                b1: Tensor::zeros(vec![1, f]),
                w2: gaussian(rng, f, m, 1.0 / (f as f64).sqrt()),
                b2: Tensor::zeros(vec![1, m]),
            })
            .collect();
        Self {
            embed,
            position,
            blocks,
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        [&self.embed, &self.position].into_iter().chain(
            self.blocks
                .iter()
                .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2]),
        )
    }

    /// Pre-norm blocks over `tokens ((batch * len) x m)`, then a final norm
    /// and mean pooling to `batch x m`.
    fn encode(
        &self,
        g: &mut Graph,
        tokens: Var,
        len: usize,
        batch: usize,
        heads: usize,
        prompts: &[(usize, Var, Var)],
    ) -> Result<Var> {
        let mut x = tokens;
        for (index, block) in self.blocks.iter().enumerate() {
            let h = g.layer_norm_rows(x, LN_EPS)?;
            let [wq, wk, wv, wo] = [&block.wq, &block.wk, &block.wv, &block.wo].map(|w| g.constant(w.clone()));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let prefix = PromptVars::for_block(prompts, index);
            let a = g.attention(q, k, v, prefix, heads, batch)?;
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;

            let h = g.layer_norm_rows(x, LN_EPS)?;
            let [w1, b1, w2, b2] = [&block.w1, &block.b1, &block.w2, &block.b2].map(|w| g.constant(w.clone()));
            let f = g.matmul(h, w1)?;
            let f = g.add_row_bias(f, b1)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_row_bias(f, b2)?;
            x = g.add(x, f)?;
        }
        let x = g.layer_norm_rows(x, LN_EPS)?;
        g.mean_segments(x, len)
    }
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let image = Encoder::new(
            &mut rng,
            cfg,
            cfg.patch_dim(),
            1.0 / (cfg.patch_dim() as f64).sqrt() * 2.0,
            cfg.image_tokens(),
        );
        let question = Encoder::new(&mut rng, cfg, cfg.question_vocab, 1.0, cfg.max_question_len);
        Ok(Self {
            cfg: cfg.clone(),
            image,
            question,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Total frozen scalar count.
    pub fn parameter_count(&self) -> usize {
        self.image.tensors().chain(self.question.tensors()).map(Tensor::numel).sum()
    }

    /// FNV-1a hash over the bit patterns of every backbone weight.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.image.tensors().chain(self.question.tensors()) {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }

    /// Splits a flattened `image_grid x image_grid` image into patch rows.
    pub fn patchify(&self, image: &[f64]) -> Result<Vec<f64>> {
        let side = self.cfg.image_grid;
        if image.len() != side * side {
            return Err(Error::dim("image", &[image.len()], &[side * side]));
        }
        let p = self.cfg.patch_size;
        let per_side = side / p;
        let mut out = Vec::with_capacity(image.len());
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..p {
                    let row = (py * p + y) * side + px * p;
                    out.extend(image[row..row + p].iter().map(|v| v - 0.5));
                }
            }
        }
        Ok(out)
    }

    fn check_question(&self, question: &[usize]) -> Result<()> {
        if question.len() != self.cfg.max_question_len {
            return Err(Error::dim("question", &[question.len()], &[self.cfg.max_question_len]));
        }
        if let Some(&t) = question.iter().find(|&&t| t >= self.cfg.question_vocab) {
            return Err(Error::Index {
                index: t,
                len: self.cfg.question_vocab,
            });
        }
        Ok(())
    }

    /// Pooled image features, `batch x m`.
    pub fn encode_images(&self, g: &mut Graph, images: &[&[f64]], prompts: &[(usize, Var, Var)]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::InvalidInput("empty image batch".into()));
        }
        let n = self.cfg.image_tokens();
        let mut patches = Vec::with_capacity(images.len() * self.cfg.image_pixels());
        for image in images {
            patches.extend(self.patchify(image)?);
        }
        let patches = Tensor::matrix(images.len() * n, self.cfg.patch_dim(), patches)?;
        let embedded = crate::autodiff::matmul_kernel(
            patches.data(),
            self.image.embed.data(),
            patches.rows(),
            patches.cols(),
            self.cfg.hidden_dim,
        );
        let tokens = self.add_positions(embedded, &self.image.position, images.len());
        let tokens = g.constant(Tensor::matrix(images.len() * n, self.cfg.hidden_dim, tokens)?);
        self.image.encode(g, tokens, n, images.len(), self.cfg.heads, prompts)
    }

    /// Pooled question features, `batch x m`. Repeated questions are encoded
    /// once and gathered.
    pub fn encode_questions(
        &self,
        g: &mut Graph,
        questions: &[&[usize]],
        prompts: &[(usize, Var, Var)],
    ) -> Result<Var> {
        if questions.is_empty() {
            return Err(Error::InvalidInput("empty question batch".into()));
        }
        let mut unique: Vec<&[usize]> = Vec::new();
        let mut index = Vec::with_capacity(questions.len());
        for &q in questions {
            self.check_question(q)?;
            match unique.iter().position(|u| *u == q) {
                Some(i) => index.push(i),
                None => {
                    index.push(unique.len());
                    unique.push(q);
                }
            }
        }
        let m = self.cfg.hidden_dim;
        let len = self.cfg.max_question_len;
        let table = self.question.embed.data();
        let embedded: Vec<f64> = unique
            .iter()
            .flat_map(|q| q.iter().flat_map(|&t| table[t * m..(t + 1) * m].iter().copied()))
            .collect();
        let tokens = self.add_positions(embedded, &self.question.position, unique.len());
        let tokens = g.constant(Tensor::matrix(unique.len() * len, m, tokens)?);
        let pooled = self.question.encode(g, tokens, len, unique.len(), self.cfg.heads, prompts)?;
        if unique.len() == questions.len() {
            Ok(pooled)
        } else {
            g.gather_rows(pooled, &index)
        }
    }

    fn add_positions(&self, mut tokens: Vec<f64>, position: &Tensor, batch: usize) -> Vec<f64> {
        let pos = position.data();
        for i in 0..batch {
            for (t, p) in tokens[i * pos.len()..(i + 1) * pos.len()].iter_mut().zip(pos) {
                *t += p;
            }
        }
        tokens
    }

    /// Fused features `[image | question]`, `batch x 2m`.
    pub fn features(
        &self,
        g: &mut Graph,
        images: &[&[f64]],
        questions: &[&[usize]],
        prompts: Option<&PromptVars>,
    ) -> Result<Var> {
        if images.len() != questions.len() {
            return Err(Error::dim("batch", &[images.len()], &[questions.len()]));
        }
        let empty = PromptVars::default();
        let prompts = prompts.unwrap_or(&empty);
        let image = self.encode_images(g, images, &prompts.image)?;
        let question = self.encode_questions(g, questions, &prompts.question)?;
        g.concat_cols(&[image, question])
    }
}
