//! Frozen two-encoder backbone, prefix prompts and the evidential answer head.

mod backbone;
mod config;
mod head;
mod prompt;

pub use backbone::Backbone;
pub use config::{BackboneConfig, HeadConfig, PromptConfig};
pub use head::AnswerHead;
pub use prompt::{Modality, PromptKind, PromptSet, PromptSlot, PromptVars};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-head attention with prefix rows prepended to keys and values.
///
/// `q` is `n x m`, `k`/`v` are `l x m`, `pk`/`pv` are `p x m` (`p` may be 0).
/// Scores are scaled by `1/sqrt(m / heads)`; the output has `n` rows.
pub fn prefix_attention(q: &Tensor, k: &Tensor, v: &Tensor, pk: &Tensor, pv: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let [q, k, v, pk, pv] = [q, k, v, pk, pv].map(|t| g.constant(t.clone()));
    let out = g.attention(q, k, v, Some((pk, pv)), heads, 1)?;
    Ok(g.value(out).clone())
}

/// Plain multi-head scaled dot-product attention, written without the graph.
pub fn vanilla_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let m = q.cols();
    if k.cols() != m || v.cols() != m {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::dim("attention", k.shape(), v.shape()));
    }
    if heads == 0 || m % heads != 0 {
        return Err(Error::InvalidInput(format!("width {m} not divisible by {heads} heads")));
    }
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.numel()];
    let mut w = vec![0.0; k.rows()];
    for h in 0..heads {
        let c = h * dh;
        for i in 0..q.rows() {
            let qi = &qd[i * m + c..i * m + c + dh];
            for (j, wj) in w.iter_mut().enumerate() {
                let kj = &kd[j * m + c..j * m + c + dh];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *wj = dot * scale;
            }
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                total += *wj;
            }
            for wj in w.iter_mut() {
                *wj /= total;
            }
            let oi = &mut out[i * m + c..i * m + c + dh];
            for (j, &wj) in w.iter().enumerate() {
                for (o, x) in oi.iter_mut().zip(&vd[j * m + c..j * m + c + dh]) {
                    *o += wj * x;
                }
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

/// Graph nodes carrying a client's trainable state.
#[derive(Debug, Clone, Copy)]
pub struct ClientNodes {
    pub prompts: Var,
    pub head: Var,
}

/// Logits `batch x J` for a batch of instances.
///
/// `nodes.prompts` must hold a `1 x prompts.len()` vector laid out like
/// `prompts`; it may be a trainable leaf, a constant or any derived node.
#[allow(clippy::too_many_arguments)]
pub fn forward_logits(
    g: &mut Graph,
    backbone: &Backbone,
    prompts: &PromptSet,
    head: &AnswerHead,
    nodes: ClientNodes,
    images: &[&[f64]],
    questions: &[&[usize]],
    dropout_mask: Option<Tensor>,
) -> Result<Var> {
    prompts.check_backbone(backbone.config())?;
    if head.input() != backbone.config().feature_dim() {
        return Err(Error::dim("answer head input", &[head.input()], &[backbone.config().feature_dim()]));
    }
    let vars = prompts.bind(g, nodes.prompts)?;
    let features = backbone.features(g, images, questions, Some(&vars))?;
    head.forward(g, features, nodes.head, dropout_mask)
}

/// Logits for one instance with no gradient tracking and no dropout.
pub fn client_forward(
    backbone: &Backbone,
    prompts: &PromptSet,
    head: &AnswerHead,
    image: &[f64],
    question: &[usize],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = ClientNodes {
        prompts: g.constant(prompts.to_tensor()),
        head: g.constant(head.to_tensor()),
    };
    let out = forward_logits(&mut g, backbone, prompts, head, nodes, &[image], &[question], None)?;
    Ok(g.value(out).data().to_vec())
}
