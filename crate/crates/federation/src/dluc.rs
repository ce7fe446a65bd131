//! Uncertainty-driven aggregation weights.
//!
//! A single affine layer maps the vector of client mean uncertainties to one
//! score per client. Row `t` of the weight matrix is the softmax of those
//! scores with entry `t` masked out, so every client receives a convex
//! combination of the other clients' prompts. The layer is trained by gradient
//! ascent on the clients' answer log-likelihood under aggregated prompts.

use evifed_core::model::PromptSet;
use evifed_core::{Error, Graph, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::optim::Adam;

/// Scores `s = W u + b`; parameters flattened as `W` (row-major) then `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNet {
    clients: usize,
    params: Vec<f64>,
}

fn self_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i / t == i % t).collect()
}

impl WeightNet {
    /// Zero-initialized net: every row starts uniform over the other clients.
    pub fn zeros(clients: usize) -> Result<Self> {
        if clients < 2 {
            return Err(Error::Config(format!("weight net needs at least 2 clients, got {clients}")));
        }
        Ok(Self {
            clients,
            params: vec![0.0; clients * clients + clients],
        })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.clients {
            return Err(Error::dim("uncertainty vector", &[u.len()], &[self.clients]));
        }
        if let Some(bad) = u.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!("uncertainty {bad} outside (0, 1)")));
        }
        Ok(())
    }

    /// Full `T x T` weight matrix recorded on `g` as a function of the
    /// parameter node `params` (`1 x (T^2 + T)`).
    pub fn record(&self, g: &mut Graph, params: evifed_core::Var, u: &[f64]) -> Result<evifed_core::Var> {
        self.check_input(u)?;
        let t = self.clients;
        let w = g.slice_cols(params, 0, t * t)?;
        let w = g.reshape(w, t, t)?;
        let b = g.slice_cols(params, t * t, t)?;
        let input = g.constant(Tensor::matrix(t, 1, u.to_vec())?);
        let s = g.matmul(w, input)?;
        let s = g.transpose(s)?;
        let s = g.add(s, b)?;
        let rows = g.broadcast_rows(s, t)?;
        g.masked_softmax_rows(rows, &self_mask(t))
    }

    pub fn weight_matrix(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(self.params.clone()));
        let w = self.record(&mut g, p, u)?;
        Ok(g.value(w).data().chunks(self.clients).map(<[f64]>::to_vec).collect())
    }

    /// Row `t` of the weight matrix.
    pub fn weights_for_client(&self, u: &[f64], t: usize) -> Result<Vec<f64>> {
        if t >= self.clients {
            return Err(Error::Index {
                index: t,
                len: self.clients,
            });
        }
        Ok(self.weight_matrix(u)?.swap_remove(t))
    }
}

/// `p_t + mu * sum_{k != t} w_k p_k`, entrywise over every prompt array.
/// With `mu == 0` the result is `p_t` bit for bit.
pub fn aggregate_prompts(t: usize, prompts: &[PromptSet], w: &[f64], mu: f64) -> Result<PromptSet> {
    let own = prompts.get(t).ok_or(Error::Index {
        index: t,
        len: prompts.len(),
    })?;
    if w.len() != prompts.len() {
        return Err(Error::dim("weight row", &[w.len()], &[prompts.len()]));
    }
    for p in prompts {
        own.check_compatible(p)?;
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("aggregation rate {mu} must be finite and >= 0")));
    }
    let mut out = own.clone();
    if mu == 0.0 {
        return Ok(out);
    }
    let mut foreign = vec![0.0; own.len()];
    for (k, (p, &wk)) in prompts.iter().zip(w).enumerate() {
        if k == t {
            continue;
        }
        for (f, v) in foreign.iter_mut().zip(p.as_slice()) {
            *f += wk * v;
        }
    }
    for (o, f) in out.as_mut_slice().iter_mut().zip(&foreign) {
        *o += mu * f;
    }
    Ok(out)
}

/// Client-side answer log-likelihood under given prompts and its gradient
/// with respect to the flat prompt vector.
pub type Probe<'a> = dyn FnMut(usize, &PromptSet) -> Result<(f64, Vec<f64>)> + 'a;

/// Value and parameter gradient of `sum_t loglik_t(p_t + mu * sum_k w_tk p_k)`.
///
/// Each client is probed once with its aggregated prompts; the returned prompt
/// gradients `G_t` are pulled back through the aggregation and the weight net
/// via the surrogate `sum_t <G_t, P_t>`, which has the same parameter gradient.
pub fn objective_and_gradient(
    net: &WeightNet,
    u: &[f64],
    prompts: &[PromptSet],
    mu: f64,
    probe: &mut Probe<'_>,
) -> Result<(f64, Vec<f64>)> {
    let t = net.clients();
    if prompts.len() != t {
        return Err(Error::dim("prompt sets", &[prompts.len()], &[t]));
    }
    let width = prompts[0].len();
    for p in prompts {
        prompts[0].check_compatible(p)?;
    }
    let mut g = Graph::new();
    let params = g.param(Tensor::row(net.params().to_vec()));
    let weights = net.record(&mut g, params, u)?;
    let stacked: Vec<f64> = prompts.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    let all = g.constant(Tensor::matrix(t, width, stacked)?);
    let mixed = g.matmul(weights, all)?;
    let mixed = g.scale(mixed, mu)?;
    let aggregated = g.add(all, mixed)?;

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(t * width);
    let w_rows: Vec<Vec<f64>> = g.value(weights).data().chunks(t).map(<[f64]>::to_vec).collect();
    for (client, row) in w_rows.iter().enumerate() {
        let agg = aggregate_prompts(client, prompts, row, mu)?;
        let (ll, grad) = probe(client, &agg)?;
        if grad.len() != width {
            return Err(Error::dim("prompt gradient", &[grad.len()], &[width]));
        }
        value += ll;
        grads.extend(grad);
    }
    let upstream = g.constant(Tensor::matrix(t, width, grads)?);
    let surrogate = g.mul(aggregated, upstream)?;
    let surrogate = g.sum(surrogate)?;
    g.backward(surrogate)?;
    let grad = g.grad(params).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; net.params().len()]);
    Ok((value, grad))
}

/// Server-side state carried across communication phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlucState {
    pub net: WeightNet,
    pub mu: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub phases: u32,
    pub last_weights: Option<Vec<Vec<f64>>>,
    opt: Adam,
}

impl DlucState {
    pub fn new(clients: usize, mu: f64, lr: f64, lr_decay: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!("aggregation rate {mu} must be finite and >= 0")));
        }
        let net = WeightNet::zeros(clients)?;
        Ok(Self {
            opt: Adam::new(net.params().len()),
            net,
            mu,
            lr,
            lr_decay,
            phases: 0,
            last_weights: None,
        })
    }

    /// `steps` Adam ascent iterations on the likelihood objective. Returns the
    /// objective value at each iteration (before its update). The learning
    /// rate decays once afterwards.
    pub fn optimize(
        &mut self,
        u: &[f64],
        prompts: &[PromptSet],
        steps: usize,
        probe: &mut Probe<'_>,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::Config("step_c must be at least 1".into()));
        }
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (value, grad) = objective_and_gradient(&self.net, u, prompts, self.mu, probe)?;
            let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
            self.opt.step(self.net.params_mut(), &descent, self.lr);
            trace.push(value);
        }
        self.lr *= self.lr_decay;
        self.phases += 1;
        self.last_weights = Some(self.net.weight_matrix(u)?);
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evifed_core::model::{BackboneConfig, PromptConfig};

    fn scalar_prompts(values: &[f64]) -> Vec<PromptSet> {
        values
            .iter()
            .map(|&v| PromptSet::from_flat(2, 1, vec![0], vec![v; 4]).unwrap())
            .collect()
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = WeightNet::zeros(4).unwrap();
        let u = [0.2, 0.9, 0.5, 0.1];
        for t in 0..4 {
            let row = net.weights_for_client(&u, t).unwrap();
            for (k, w) in row.iter().enumerate() {
                assert_eq!(*w, if k == t { 0.0 } else { 1.0 / 3.0 });
            }
        }
        let permuted = [0.5, 0.1, 0.9, 0.2];
        assert_eq!(net.weight_matrix(&u).unwrap(), net.weight_matrix(&permuted).unwrap());
    }

    #[test]
    fn rows_stay_normalized() {
        let mut net = WeightNet::zeros(3).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.7).sin() * 3.0;
        }
        let row = net.weights_for_client(&[0.3, 0.6, 0.2], 0).unwrap();
        assert_eq!(row[0], 0.0);
        assert!((row[1] + row[2] - 1.0).abs() < 1e-15);
        assert!(matches!(net.weights_for_client(&[0.3, 0.6, 0.2], 3), Err(Error::Index { .. })));
        assert!(matches!(net.weight_matrix(&[0.3, 1.0, 0.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn aggregation_arithmetic() {
        let p = scalar_prompts(&[1.0, 2.0, 4.0]);
        let out = aggregate_prompts(0, &p, &[0.0, 0.5, 0.5], 0.1).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 1.3).abs() < 1e-15));
        let one_hot = aggregate_prompts(0, &p, &[0.0, 0.0, 1.0], 0.25).unwrap();
        assert!(one_hot.as_slice().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_rate_is_exact_copy() {
        let mut p = scalar_prompts(&[-0.0, 2.0, 4.0]);
        p[0].as_mut_slice()[1] = 1.0 / 3.0;
        let out = aggregate_prompts(0, &p, &[0.0, 0.5, 0.5], 0.0).unwrap();
        let bits = |s: &PromptSet| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&p[0]));
    }

    #[test]
    fn aggregation_rejects_mismatched_shapes() {
        let mut p = scalar_prompts(&[1.0, 2.0]);
        p.push(PromptSet::zeros(&PromptConfig::default(), &BackboneConfig::default()).unwrap());
        assert!(matches!(
            aggregate_prompts(0, &p, &[0.0, 0.5, 0.5], 0.1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_rate_leaves_net_untouched() {
        let p = scalar_prompts(&[1.0, 2.0, 4.0]);
        let mut state = DlucState::new(3, 0.0, 0.01, 0.1).unwrap();
        let mut probe = |_: usize, s: &PromptSet| Ok((s.as_slice().iter().sum::<f64>(), vec![1.0; 4]));
        state.optimize(&[0.5, 0.5, 0.5], &p, 5, &mut probe).unwrap();
        assert!(state.net.params().iter().all(|&v| v == 0.0));
        assert!((state.lr - 0.001).abs() < 1e-18);
    }
}
