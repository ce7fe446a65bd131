use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::HeadConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two-layer GELU MLP from fused features to `J` logits.
///
/// Parameters live in one flat vector: `w1 (input x hidden)`, `b1 (hidden)`,
/// `w2 (hidden x J)`, `b2 (J)`, all row-major. Evidence is obtained from the
/// logits with the clamped exponential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerHead {
    input: usize,
    hidden: usize,
    output: usize,
    dropout: f64,
    params: Vec<f64>,
}

impl AnswerHead {
    pub fn new<R: Rng>(input: usize, output: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if input == 0 || output < 2 {
            return Err(Error::Config(format!("answer head {input} -> {output}")));
        }
        let mut head = Self {
            input,
            hidden: cfg.hidden,
            output,
            dropout: cfg.dropout,
            params: vec![0.0; Self::count(input, cfg.hidden, output)],
        };
        let w1 = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("finite std");
        let w2 = Normal::new(0.0, 1.0 / (cfg.hidden as f64).sqrt()).expect("finite std");
        let (a, b) = (input * cfg.hidden, cfg.hidden);
        for v in &mut head.params[..a] {
            *v = w1.sample(rng);
        }
        let start = a + b;
        for v in &mut head.params[start..start + cfg.hidden * output] {
            *v = w2.sample(rng);
        }
        Ok(head)
    }

    pub fn from_flat(input: usize, hidden: usize, output: usize, dropout: f64, params: Vec<f64>) -> Result<Self> {
        let expected = Self::count(input, hidden, output);
        if params.len() != expected {
            return Err(Error::dim("answer head", &[params.len()], &[expected]));
        }
        Ok(Self {
            input,
            hidden,
            output,
            dropout,
            params,
        })
    }

    /// Parameter count of a head with the given widths.
    pub fn count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(self.params.clone())
    }

    /// Named arrays with shapes, in layout order.
    pub fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let mut rest = &self.params[..];
        let mut out = Vec::with_capacity(4);
        for (name, shape) in [
            ("head.w1", vec![i, h]),
            ("head.b1", vec![h]),
            ("head.w2", vec![h, o]),
            ("head.b2", vec![o]),
        ] {
            let n: usize = shape.iter().product();
            let (a, b) = rest.split_at(n);
            out.push((name, shape, a));
            rest = b;
        }
        out
    }

    /// Logits `(batch x J)` for `features (batch x input)` given the flat
    /// parameter node `params (1 x len)`. `dropout_mask`, when present, holds
    /// `batch x hidden` keep factors already divided by the keep probability.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        params: Var,
        dropout_mask: Option<Tensor>,
    ) -> Result<Var> {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let w1 = g.slice_cols(params, 0, i * h)?;
        let w1 = g.reshape(w1, i, h)?;
        let b1 = g.slice_cols(params, i * h, h)?;
        let w2 = g.slice_cols(params, i * h + h, h * o)?;
        let w2 = g.reshape(w2, h, o)?;
        let b2 = g.slice_cols(params, i * h + h + h * o, o)?;

        let z = g.matmul(features, w1)?;
        let z = g.add_row_bias(z, b1)?;
        let mut a = g.gelu(z)?;
        if let Some(mask) = dropout_mask {
            let mask = g.constant(mask);
            a = g.mul(a, mask)?;
        }
        let logits = g.matmul(a, w2)?;
        g.add_row_bias(logits, b2)
    }

    /// Inverted-dropout keep factors for a batch.
    pub fn dropout_mask<R: Rng>(&self, batch: usize, rng: &mut R) -> Option<Tensor> {
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        let data = (0..batch * self.hidden)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Some(Tensor::matrix(batch, self.hidden, data).expect("mask shape"))
    }
}
