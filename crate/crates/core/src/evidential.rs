//! Dirichlet evidential head: evidence, belief masses, uncertainty and the
//! training loss.
//!
//! Logits are mapped to evidence `e = exp(min(logit, ceiling))`, Dirichlet
//! parameters `alpha = e + 1` and strength `S = sum(alpha)`. Belief in answer
//! `j` is `e_j / S` and the uncommitted mass `u = 1 - sum(b) = J / S`.
//!
//! The loss per instance is the expected cross-entropy under `Dir(alpha)`,
//! `psi(S) - psi(alpha_y)`, plus `lambda * KL[Dir(alpha_hat) || Dir(1)]` where
//! `alpha_hat` resets the true-class entry to 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, EXP_CEILING};
use crate::error::{Error, Result};
use crate::special::{digamma, lgamma};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
}

impl EvidentialOutput {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::from_logits_with_ceiling(logits, EXP_CEILING)
    }

    pub fn from_logits_with_ceiling(logits: &[f64], ceiling: f64) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidInput("no logits".into()));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
        }
        let evidence: Vec<f64> = logits.iter().map(|&l| l.min(ceiling).exp()).collect();
        Ok(Self::from_evidence(evidence))
    }

    pub(crate) fn from_evidence(evidence: Vec<f64>) -> Self {
        let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
        let strength: f64 = alpha.iter().sum();
        let belief = evidence.iter().map(|e| e / strength).collect();
        let uncertainty = alpha.len() as f64 / strength;
        Self {
            evidence,
            alpha,
            strength,
            belief,
            uncertainty,
        }
    }

    /// Index of the largest belief mass (ties go to the lowest index).
    pub fn predicted(&self) -> usize {
        argmax(&self.belief)
    }

    /// Expected class probability `alpha_j / S` under the Dirichlet.
    pub fn expected_probability(&self, j: usize) -> f64 {
        self.alpha[j] / self.strength
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    /// Ramp length in local phases; `None` applies `lambda` from the start.
    pub lambda_ramp: Option<u32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_ramp: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lambda_ramp == Some(0) {
            return Err(Error::Config("lambda_ramp must be >= 1 when set".into()));
        }
        Ok(())
    }

    /// Regularizer weight in effect during local phase `phase` (0-based).
    pub fn effective_lambda(&self, phase: u32) -> f64 {
        match self.lambda_ramp {
            Some(ramp) => self.lambda * (f64::from(phase + 1) / f64::from(ramp)).min(1.0),
            None => self.lambda,
        }
    }
}

fn one_hot_index(y: &[f64], len: usize) -> Result<usize> {
    if y.len() != len {
        return Err(Error::InvalidInput(format!("label has {} entries, expected {len}", y.len())));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != len {
        return Err(Error::InvalidInput(format!("label {y:?} is not one-hot")));
    }
    Ok(y.iter().position(|&v| v == 1.0).unwrap_or(0))
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    match alpha.iter().find(|&&a| !(a >= 1.0 && a.is_finite())) {
        Some(bad) => Err(Error::Domain(format!("Dirichlet parameter {bad} < 1"))),
        None => Ok(()),
    }
}

/// `sum_j y_j (psi(S) - psi(alpha_j))`.
pub fn unc_loss(alpha: &[f64], y: &[f64]) -> Result<f64> {
    let target = one_hot_index(y, alpha.len())?;
    check_alpha(alpha)?;
    let strength: f64 = alpha.iter().sum();
    Ok(digamma(strength)? - digamma(alpha[target])?)
}

/// `y + (1 - y) * alpha`: the true-class entry becomes 1.
pub fn alpha_hat(alpha: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let target = one_hot_index(y, alpha.len())?;
    check_alpha(alpha)?;
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(j, &a)| if j == target { 1.0 } else { a })
        .collect())
}

/// `KL[Dir(alpha_hat) || Dir(1)]`.
pub fn kl_regularizer(alpha_hat: &[f64]) -> Result<f64> {
    if alpha_hat.is_empty() {
        return Err(Error::InvalidInput("empty Dirichlet parameters".into()));
    }
    check_alpha(alpha_hat)?;
    let j = alpha_hat.len() as f64;
    let total: f64 = alpha_hat.iter().sum();
    let psi_total = digamma(total)?;
    let mut kl = lgamma(total)? - lgamma(j)?;
    for &a in alpha_hat {
        kl += (a - 1.0) * (digamma(a)? - psi_total) - lgamma(a)?;
    }
    // rounding can leave a tiny negative value near alpha_hat = 1
    Ok(kl.max(0.0))
}

/// `unc_loss + lambda_eff * kl_regularizer(alpha_hat)` for local phase `phase`.
pub fn total_loss(alpha: &[f64], y: &[f64], cfg: &LossConfig, phase: u32) -> Result<f64> {
    let lambda = cfg.effective_lambda(phase);
    let unc = unc_loss(alpha, y)?;
    if lambda == 0.0 {
        return Ok(unc);
    }
    Ok(unc + lambda * kl_regularizer(&alpha_hat(alpha, y)?)?)
}

fn label_tensors(labels: &[usize], classes: usize) -> Result<(Tensor, Tensor)> {
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Index { index: l, len: classes });
        }
        y[i * classes + l] = 1.0;
    }
    let not_y = y.iter().map(|v| 1.0 - v).collect();
    Ok((
        Tensor::matrix(labels.len(), classes, y)?,
        Tensor::matrix(labels.len(), classes, not_y)?,
    ))
}

/// Records the mean per-instance loss over a batch of `alpha` rows
/// (`B x J`, every entry >= 1).
pub fn batch_loss_from_alpha(g: &mut Graph, alpha: Var, labels: &[usize], lambda: f64) -> Result<Var> {
    let (b, classes) = (g.value(alpha).rows(), g.value(alpha).cols());
    if labels.len() != b || b == 0 {
        return Err(Error::InvalidInput(format!("{} labels for {b} rows", labels.len())));
    }
    let (y, not_y) = label_tensors(labels, classes)?;
    let y = g.constant(y);
    let not_y = g.constant(not_y);

    // psi(S) - <y, psi(alpha)>
    let strength = g.sum_rows(alpha)?;
    let psi_s = g.digamma(strength)?;
    let psi_alpha = g.digamma(alpha)?;
    let picked = g.mul(psi_alpha, y)?;
    let sum_psi_s = g.sum(psi_s)?;
    let sum_picked = g.sum(picked)?;
    let mut total = g.sub(sum_psi_s, sum_picked)?;

    if lambda != 0.0 {
        let masked = g.mul(alpha, not_y)?;
        let hat = g.add(masked, y)?;
        let hat_sum = g.sum_rows(hat)?;
        let lg_sum = g.lgamma(hat_sum)?;
        let lg_hat = g.lgamma(hat)?;
        let psi_hat = g.digamma(hat)?;
        let psi_sum = g.digamma(hat_sum)?;
        let psi_sum_b = g.broadcast_cols(psi_sum, classes)?;
        let gap = g.sub(psi_hat, psi_sum_b)?;
        let excess = g.add_scalar(hat, -1.0)?;
        let weighted = g.mul(excess, gap)?;
        let t1 = g.sum(lg_sum)?;
        let t2 = g.sum(lg_hat)?;
        let t3 = g.sum(weighted)?;
        let lg_j = crate::special::lgamma(classes as f64)?;
        let a = g.sub(t1, t2)?;
        let a = g.add(a, t3)?;
        let kl = g.add_scalar(a, -lg_j * b as f64)?;
        let kl = g.scale(kl, lambda)?;
        total = g.add(total, kl)?;
    }
    g.scale(total, 1.0 / b as f64)
}

/// Records the mean loss for a batch of logits.
pub fn batch_loss(g: &mut Graph, logits: Var, labels: &[usize], lambda: f64) -> Result<Var> {
    let evidence = g.exp_activation(logits, EXP_CEILING)?;
    let alpha = g.add_scalar(evidence, 1.0)?;
    batch_loss_from_alpha(g, alpha, labels, lambda)
}

/// Records `sum_i ln(alpha_{i,y_i} / S_i)`, the Dirichlet-mean log-likelihood.
pub fn batch_log_likelihood(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.value(logits).cols();
    if labels.len() != g.value(logits).rows() || labels.is_empty() {
        return Err(Error::InvalidInput("log-likelihood needs one label per row".into()));
    }
    let (y, _) = label_tensors(labels, classes)?;
    let y = g.constant(y);
    let evidence = g.exp_activation(logits, EXP_CEILING)?;
    let alpha = g.add_scalar(evidence, 1.0)?;
    let strength = g.sum_rows(alpha)?;
    let log_alpha = g.log(alpha)?;
    let picked = g.mul(log_alpha, y)?;
    let log_s = g.log(strength)?;
    let a = g.sum(picked)?;
    let b = g.sum(log_s)?;
    g.sub(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn symmetric_zero_logits() {
        let out = EvidentialOutput::from_logits(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.evidence, vec![1.0; 3]);
        assert_eq!(out.alpha, vec![2.0; 3]);
        assert_eq!(out.strength, 6.0);
        for b in &out.belief {
            assert!((b - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((out.uncertainty - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_class_example() {
        let out = EvidentialOutput::from_logits(&[4f64.ln(), 0.0]).unwrap();
        assert!((out.evidence[0] - 4.0).abs() < 1e-14);
        assert!((out.strength - 7.0).abs() < 1e-14);
        assert!((out.belief[0] - 4.0 / 7.0).abs() < 1e-14);
        assert!((out.belief[1] - 1.0 / 7.0).abs() < 1e-14);
        assert!((out.uncertainty - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_finite_logits() {
        assert!(EvidentialOutput::from_logits(&[0.0, f64::NAN]).is_err());
        assert!(EvidentialOutput::from_logits(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn unc_loss_examples() {
        let l = unc_loss(&[2.0, 2.0], &[1.0, 0.0]).unwrap();
        assert!((l - 5.0 / 6.0).abs() < 1e-12);
        let l = unc_loss(&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        let l = unc_loss(&[101.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((l - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn unc_loss_requires_one_hot() {
        assert!(matches!(unc_loss(&[2.0, 2.0], &[0.5, 0.5]), Err(Error::InvalidInput(_))));
        assert!(matches!(unc_loss(&[2.0, 2.0], &[1.0, 1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(unc_loss(&[2.0, 2.0], &[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn alpha_hat_examples() {
        assert_eq!(alpha_hat(&[5.0, 3.0], &[1.0, 0.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(alpha_hat(&[1.0, 1.0], &[0.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(alpha_hat(&[9.0, 2.0, 4.0], &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn kl_examples() {
        for j in 1..6 {
            assert_eq!(kl_regularizer(&vec![1.0; j]).unwrap(), 0.0);
        }
        assert!((kl_regularizer(&[2.0, 1.0]).unwrap() - (LN2 - 0.5)).abs() < 1e-12);
        assert!((kl_regularizer(&[1.0, 2.0]).unwrap() - (LN2 - 0.5)).abs() < 1e-12);
        assert!((kl_regularizer(&[3.0, 1.0]).unwrap() - (3f64.ln() - 2.0 / 3.0)).abs() < 1e-12);
        assert!(matches!(kl_regularizer(&[0.5, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig {
            lambda: 0.0,
            lambda_ramp: None,
        };
        let a = [3.0, 7.0, 1.5];
        let y = [0.0, 0.0, 1.0];
        assert_eq!(total_loss(&a, &y, &cfg, 0).unwrap(), unc_loss(&a, &y).unwrap());
        let cfg = LossConfig {
            lambda: 1.0,
            lambda_ramp: None,
        };
        let l = total_loss(&[2.0, 2.0], &[1.0, 0.0], &cfg, 0).unwrap();
        assert!((l - (5.0 / 6.0 + LN2 - 0.5)).abs() < 1e-12);
        assert!((l - 1.026480).abs() < 1e-6);
    }

    #[test]
    fn lambda_ramp() {
        let cfg = LossConfig {
            lambda: 0.4,
            lambda_ramp: Some(4),
        };
        assert!((cfg.effective_lambda(0) - 0.1).abs() < 1e-15);
        assert!((cfg.effective_lambda(3) - 0.4).abs() < 1e-15);
        assert!((cfg.effective_lambda(10) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_closed_form() {
        let logits = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let labels = [2, 0];
        let cfg = LossConfig {
            lambda: 0.7,
            lambda_ramp: None,
        };
        let mut expected = 0.0;
        for (row, &l) in logits.iter().zip(&labels) {
            let out = EvidentialOutput::from_logits(row).unwrap();
            let mut y = vec![0.0; 3];
            y[l] = 1.0;
            expected += total_loss(&out.alpha, &y, &cfg, 0).unwrap() / 2.0;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&logits.map(|r| r.to_vec())).unwrap());
        let loss = batch_loss(&mut g, x, &labels, 0.7).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_of_dirichlet_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![4f64.ln(), 0.0]));
        let ll = batch_log_likelihood(&mut g, x, &[0]).unwrap();
        let v = g.value(ll).data()[0];
        assert!((v - (5.0f64 / 7.0).ln()).abs() < 1e-12);
        assert!((v + 0.3365).abs() < 1e-4);
    }

    #[test]
    fn argmax_of_belief_evidence_alpha_agree() {
        let out = EvidentialOutput::from_logits(&[0.2, 3.1, -1.0, 3.0]).unwrap();
        assert_eq!(out.predicted(), 1);
        assert_eq!(argmax(&out.evidence), 1);
        assert_eq!(argmax(&out.alpha), 1);
    }
}
