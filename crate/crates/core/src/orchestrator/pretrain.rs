//! Policy pretraining by backpropagation through simulated rollouts.

use crate::bounds::naive_product_bound_with_grad;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Gradients, Network};
use crate::system::{sample_triangular, Dtss};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Total environment transitions to simulate.
    pub steps: usize,
    pub horizon: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Policy Lipschitz level above which a hinge penalty applies.
    pub lipschitz_target: f64,
    pub lipschitz_weight: f64,
    /// Gradients are rescaled to at most this norm.
    pub max_grad_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            horizon: 32,
            batch: 32,
            learning_rate: 1e-3,
            lipschitz_target: 10.0,
            lipschitz_weight: 1.0,
            max_grad_norm: 10.0,
        }
    }
}

/// Mean per-step loss of rollouts from the initial set (no gradient).
pub fn rollout_loss<R: Rng + ?Sized>(
    sys: &Dtss,
    policy: &Network,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut x = sys
            .initial
            .sample(rng)
            .ok_or_else(|| Error::Domain("empty initial set".into()))?;
        for _ in 0..horizon {
            let u = sys.policy_action(policy, &x)?;
            x = sys.step(&x, &u, &sample_triangular(sys.noise_dim, rng))?;
            total += sys.pretrain_loss.eval(sys, &x).0;
        }
    }
    Ok(total / (episodes * horizon.max(1)) as f64)
}

/// Trains `policy` in place on the system's pretraining loss, averaged over the states of
/// rollouts from the initial set, plus a hinge on the product Lipschitz bound. Returns the
/// mean rollout loss of every update.
pub fn pretrain_policy<R: Rng + ?Sized>(
    sys: &Dtss,
    policy: &mut Network,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.horizon == 0 || cfg.batch == 0 {
        return Err(Error::Config("pretraining horizon and batch must be positive".into()));
    }
    let d = sys.state_dim();
    let m = sys.action_dim();
    let per_update = cfg.horizon * cfg.batch;
    let updates = cfg.steps / per_update;
    let mut opt = AdamState::new(policy, AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut history = Vec::with_capacity(updates);
    let scale = 1.0 / per_update as f64;

    for _ in 0..updates {
        let mut states = Vec::with_capacity(cfg.horizon + 1);
        let mut x0 = Array2::zeros((cfg.batch, d));
        for mut row in x0.rows_mut() {
            let s = sys
                .initial
                .sample(rng)
                .ok_or_else(|| Error::Domain("empty initial set".into()))?;
            row.assign(&ndarray::ArrayView1::from(&s));
        }
        states.push(x0);
        let mut traces = Vec::with_capacity(cfg.horizon);
        let mut jacobians = Vec::with_capacity(cfg.horizon);
        let mut loss = 0.0;
        let mut loss_grads = Vec::with_capacity(cfg.horizon);
        for _ in 0..cfg.horizon {
            let xt = states.last().expect("nonempty");
            let trace = policy.forward_trace(xt.view())?;
            let mut next = Array2::zeros((cfg.batch, d));
            let mut jac = Vec::with_capacity(cfg.batch);
            let mut lg = Array2::zeros((cfg.batch, d));
            for b in 0..cfg.batch {
                let x = xt.row(b).to_vec();
                let u = trace.output.row(b).to_vec();
                let w = sample_triangular(sys.noise_dim, rng);
                let (xn, jx, ju) = sys.step_with_jacobians(&x, &u, &w)?;
                let (l, g) = sys.pretrain_loss.eval(sys, &xn);
                loss += l;
                for j in 0..d {
                    next[[b, j]] = xn[j];
                    lg[[b, j]] = g[j] * scale;
                }
                jac.push((jx, ju));
            }
            traces.push(trace);
            jacobians.push(jac);
            loss_grads.push(lg);
            states.push(next);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical("pretraining loss diverged".into()));
        }
        history.push(loss * scale);

        // Reverse pass: `lambda` holds dLoss/dx_{t+1}.
        let mut grads = Gradients::zeros_like(policy);
        let mut lambda = Array2::<f64>::zeros((cfg.batch, d));
        for t in (0..cfg.horizon).rev() {
            lambda += &loss_grads[t];
            let mut up_u = Array2::zeros((cfg.batch, m));
            let mut lam_x = Array2::zeros((cfg.batch, d));
            for b in 0..cfg.batch {
                let (jx, ju) = &jacobians[t][b];
                let l = lambda.row(b);
                up_u.row_mut(b).assign(&ju.t().dot(&l));
                lam_x.row_mut(b).assign(&jx.t().dot(&l));
            }
            let (g, dx) = policy.backward_batch(&traces[t], up_u.view())?;
            grads.add_scaled(&g, 1.0);
            lambda = lam_x + dx;
        }
        let (lip, lip_grad) = naive_product_bound_with_grad(policy);
        if lip > cfg.lipschitz_target {
            grads.add_scaled(&lip_grad, cfg.lipschitz_weight);
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Numerical("pretraining gradient is not finite".into()));
        }
        if norm > cfg.max_grad_norm {
            grads.scale(cfg.max_grad_norm / norm);
        }
        opt.step(policy, &grads)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::benchmark;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_steps_is_identity() {
        let sys = benchmark("linear-sys").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pi = Network::random(&[2, 8, 1], &mut rng);
        let before = pi.clone();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        pretrain_policy(&sys, &mut pi, &cfg, &mut rng).unwrap();
        assert_eq!(pi, before);
    }
}
