//! Gradient-based training of certificate and policy on sampled and counterexample points.

use crate::bounds::naive_product_bound_with_grad;
use crate::certificate::{CertMode, Spec};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Gradients, Network};
use crate::system::{sample_triangular, Dtss, RectSet};
use crate::verifier::Counterexamples;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub epsilon_decrease: f64,
    /// Loss mesh `tau`; shrinks by `tau_decay` after every iteration.
    pub tau: f64,
    pub tau_decay: f64,
    pub noise_samples: usize,
    pub batch_size: usize,
    pub counterexample_fraction: f64,
    pub epochs: usize,
    /// Random points drawn per set (initial, unsafe, decrease) in every epoch.
    pub random_points: usize,
    /// Slots per counterexample buffer.
    pub counterexample_capacity: usize,
    pub refresh_fraction: f64,
    pub lr_certificate: f64,
    pub lr_policy: f64,
    /// Keep the policy fixed.
    pub freeze_policy: bool,
    /// Use `L_V (L_fx + L_fu L_pi) + L_V` for `K'` instead of `L_V (L_f (L_pi + 1) + 1)`.
    pub split_lipschitz: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            epsilon: 0.1,
            epsilon_decrease: 0.01,
            tau: 0.001,
            tau_decay: 0.8,
            noise_samples: 16,
            batch_size: 4096,
            counterexample_fraction: 0.25,
            epochs: 25,
            random_points: 90_000,
            counterexample_capacity: 30_000,
            refresh_fraction: 0.5,
            lr_certificate: 5e-4,
            lr_policy: 5e-5,
            freeze_policy: false,
            split_lipschitz: false,
        }
    }
}

impl LossConfig {
    pub fn for_system(sys: &Dtss) -> Self {
        Self {
            tau: sys.defaults.loss_mesh,
            tau_decay: sys.defaults.loss_mesh_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.alpha, self.epsilon, self.epsilon_decrease, self.tau];
        if positive.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights and margins must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.counterexample_fraction)
            || !(0.0..=1.0).contains(&self.refresh_fraction)
        {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.noise_samples == 0 || self.random_points == 0 {
            return Err(Error::Config("batch size, noise samples and buffers must be positive".into()));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(Error::Config("tau decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fixed-size store of counterexamples for one condition.
#[derive(Debug, Clone, Default)]
pub struct CounterexampleBuffer {
    capacity: usize,
    points: Vec<Vec<f64>>,
}

impl CounterexampleBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            points: Vec::new(),
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fills an empty buffer from `new` (with replacement); a full buffer gets
    /// `round(fraction * capacity)` randomly chosen slots overwritten. Returns the number of
    /// slots written.
    pub fn refresh<R: Rng + ?Sized>(&mut self, new: &[Vec<f64>], fraction: f64, rng: &mut R) -> usize {
        if new.is_empty() || self.capacity == 0 {
            return 0;
        }
        if self.points.is_empty() {
            self.points = (0..self.capacity)
                .map(|_| new[rng.random_range(0..new.len())].clone())
                .collect();
            return self.capacity;
        }
        let count = (fraction * self.capacity as f64).round() as usize;
        let mut slots: Vec<usize> = (0..self.points.len()).collect();
        slots.shuffle(rng);
        for &s in slots.iter().take(count) {
            self.points[s] = new[rng.random_range(0..new.len())].clone();
        }
        count.min(self.points.len())
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        if self.points.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.points[rng.random_range(0..self.points.len())].clone())
            .collect()
    }
}

/// Random points for each condition plus the counterexample stores.
#[derive(Debug, Clone)]
pub struct SampleBuffers {
    pub p_init: Vec<Vec<f64>>,
    pub p_unsafe: Vec<Vec<f64>>,
    pub p_decrease: Vec<Vec<f64>>,
    pub c_init: CounterexampleBuffer,
    pub c_unsafe: CounterexampleBuffer,
    pub c_decrease: CounterexampleBuffer,
}

/// Uniform sample from `X` minus the target, by rejection.
pub fn sample_outside_target<R: Rng + ?Sized>(sys: &Dtss, rng: &mut R) -> Vec<f64> {
    loop {
        let x = sys.state_space.sample(rng);
        if !sys.target.contains(&x) {
            return x;
        }
    }
}

/// Closest point of `set` (in the infinity norm, over its boxes).
fn project(set: &RectSet, x: &[f64]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for b in set.boxes() {
        let mut y = x.to_vec();
        b.clamp(&mut y);
        let dist = y.iter().zip(x).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, y));
        }
    }
    best.map(|(_, y)| y).unwrap_or_else(|| x.to_vec())
}

impl SampleBuffers {
    pub fn new(cfg: &LossConfig) -> Self {
        Self {
            p_init: Vec::new(),
            p_unsafe: Vec::new(),
            p_decrease: Vec::new(),
            c_init: CounterexampleBuffer::new(cfg.counterexample_capacity),
            c_unsafe: CounterexampleBuffer::new(cfg.counterexample_capacity),
            c_decrease: CounterexampleBuffer::new(cfg.counterexample_capacity),
        }
    }

    /// Redraws the random points.
    pub fn resample<R: Rng + ?Sized>(&mut self, sys: &Dtss, n: usize, rng: &mut R) {
        let draw = |set: &RectSet, rng: &mut R| -> Vec<Vec<f64>> {
            (0..n).filter_map(|_| set.sample(rng)).collect()
        };
        self.p_init = draw(&sys.initial, rng);
        self.p_unsafe = draw(&sys.unsafe_set, rng);
        self.p_decrease = (0..n).map(|_| sample_outside_target(sys, rng)).collect();
    }

    /// Merges verifier counterexamples. Initial and unsafe points are moved onto their sets
    /// (cell centers may lie just outside); nonnegativity violations join the decrease store.
    pub fn add_counterexamples<R: Rng + ?Sized>(
        &mut self,
        sys: &Dtss,
        cex: &Counterexamples,
        fraction: f64,
        rng: &mut R,
    ) {
        let init: Vec<Vec<f64>> = cex.init.iter().map(|x| project(&sys.initial, x)).collect();
        let unsafe_pts: Vec<Vec<f64>> =
            cex.unsafe_set.iter().map(|x| project(&sys.unsafe_set, x)).collect();
        let decrease: Vec<Vec<f64>> = cex
            .decrease
            .iter()
            .chain(&cex.nonnegative)
            .cloned()
            .collect();
        self.c_init.refresh(&init, fraction, rng);
        self.c_unsafe.refresh(&unsafe_pts, fraction, rng);
        self.c_decrease.refresh(&decrease, fraction, rng);
    }
}

fn to_matrix(points: &[Vec<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), d));
    for (i, p) in points.iter().enumerate() {
        for (j, v) in p.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

/// A loss value with gradients for both networks.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad_v: Gradients,
    pub grad_pi: Gradients,
}

fn max_hinge(v: &Network, points: &[Vec<f64>], sign: f64, offset: f64, scale: f64) -> Result<LossGrad> {
    // Loss is scale * max_x max(sign * V(x) + offset, 0).
    let mut out = LossGrad {
        value: 0.0,
        grad_v: Gradients::zeros_like(v),
        grad_pi: Gradients { layers: Vec::new() },
    };
    if points.is_empty() {
        return Ok(out);
    }
    let x = to_matrix(points, v.input_dim());
    let vals = v.forward_batch(x.view())?;
    let (idx, best) = vals
        .column(0)
        .iter()
        .map(|val| sign * val + offset)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, h)| if h > acc.1 { (i, h) } else { acc });
    if best > 0.0 {
        out.value = scale * best;
        out.grad_v = v.backward(&points[idx], &[scale * sign])?;
    }
    Ok(out)
}

/// `max_x max(V(x) - init_level + eps, 0)` over points of the initial set.
pub fn loss_init(v: &Network, points: &[Vec<f64>], spec: &Spec, eps: f64) -> Result<LossGrad> {
    max_hinge(v, points, 1.0, eps - spec.init_level, 1.0)
}

/// Unsafe-set loss, normalised by the threshold (log mode) or by `1 - rho` (plain mode).
pub fn loss_unsafe(v: &Network, points: &[Vec<f64>], spec: &Spec, eps: f64) -> Result<LossGrad> {
    let scale = match spec.mode {
        CertMode::LogRasm => 1.0 / spec.threshold,
        CertMode::Rasm => 1.0 - spec.rho,
    };
    max_hinge(v, points, -1.0, spec.threshold + eps, scale)
}

/// Plain-mode only: `mean_x max(eps - V(x), 0)`, keeping the certificate nonnegative. Zero in
/// log mode, where negative values are allowed.
pub fn loss_nonnegative(v: &Network, points: &[Vec<f64>], spec: &Spec, eps: f64) -> Result<LossGrad> {
    let mut out = LossGrad {
        value: 0.0,
        grad_v: Gradients::zeros_like(v),
        grad_pi: Gradients { layers: Vec::new() },
    };
    if spec.mode == CertMode::LogRasm || points.is_empty() {
        return Ok(out);
    }
    let x = to_matrix(points, v.input_dim());
    let trace = v.forward_trace(x.view())?;
    let n = points.len() as f64;
    let mut up = Array2::zeros((points.len(), 1));
    for (i, val) in trace.output.column(0).iter().enumerate() {
        let h = eps - val;
        if h > 0.0 {
            out.value += h / n;
            up[[i, 0]] = -1.0 / n;
        }
    }
    if out.value > 0.0 {
        out.grad_v = v.backward_batch(&trace, up.view())?.0;
    }
    Ok(out)
}

/// `K'` from product bounds, with its partial derivatives in `L_V` and `L_pi`.
fn k_prime(sys: &Dtss, l_v: f64, l_pi: f64, split: bool) -> (f64, f64, f64) {
    if split {
        let inner = sys.lipschitz_x + sys.lipschitz_u * l_pi + 1.0;
        (l_v * inner, inner, l_v * sys.lipschitz_u)
    } else {
        let lf = sys.lipschitz_joint();
        let inner = lf * (l_pi + 1.0) + 1.0;
        (l_v * inner, inner, l_v * lf)
    }
}

/// Expected-decrease loss with caller-supplied noise (`noise[j][i]` is the `i`-th sample for
/// point `j`). Also returns the `K'` used.
#[allow(clippy::too_many_arguments)]
pub fn loss_decrease_with_noise(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    spec: &Spec,
    points: &[Vec<f64>],
    noise: &[Vec<Vec<f64>>],
    tau: f64,
    eps: f64,
    split: bool,
) -> Result<(LossGrad, f64)> {
    let (l_v, g_lv) = naive_product_bound_with_grad(v);
    let (l_pi, g_lpi) = naive_product_bound_with_grad(policy);
    let (kp, dk_dlv, dk_dlpi) = k_prime(sys, l_v, l_pi, split);
    let mut out = LossGrad {
        value: 0.0,
        grad_v: Gradients::zeros_like(v),
        grad_pi: Gradients::zeros_like(policy),
    };
    if points.is_empty() {
        return Ok((out, kp));
    }
    if noise.len() != points.len() || noise.iter().any(|n| n.is_empty()) {
        return Err(Error::Shape("need a nonempty noise sample list per point".into()));
    }
    let d = sys.state_dim();
    let m = sys.action_dim();
    let n_pts = points.len();
    let xs = to_matrix(points, d);
    let us = policy.forward_batch(xs.view())?;

    // Successors of every (point, noise sample) pair, with action Jacobians.
    let mut succ = Vec::new();
    let mut jus = Vec::new();
    let mut owner = Vec::new();
    for (j, x) in points.iter().enumerate() {
        let u = us.row(j).to_vec();
        for w in &noise[j] {
            let (next, _, ju) = sys.step_with_jacobians(x, &u, w)?;
            succ.push(next);
            jus.push(ju);
            owner.push(j);
        }
    }
    let succ_m = to_matrix(&succ, d);
    let trace_next = v.forward_trace(succ_m.view())?;
    let trace_here = v.forward_trace(xs.view())?;
    let next_vals = trace_next.output.column(0).to_owned();
    let here_vals = trace_here.output.column(0).to_owned();

    // Per-sample aggregation weights: softmax (log mode) or uniform (plain mode).
    let mut agg = vec![0.0; n_pts];
    let mut weights = vec![0.0; succ.len()];
    let mut start = 0;
    for (j, agg_j) in agg.iter_mut().enumerate() {
        let n = noise[j].len();
        let vals = next_vals.slice(ndarray::s![start..start + n]);
        match spec.mode {
            CertMode::LogRasm => {
                let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                *agg_j = mx + (s / n as f64).ln();
                for (i, e) in exps.iter().enumerate() {
                    weights[start + i] = e / s;
                }
            }
            CertMode::Rasm => {
                *agg_j = vals.sum() / n as f64;
                for i in 0..n {
                    weights[start + i] = 1.0 / n as f64;
                }
            }
        }
        start += n;
    }

    let margin = tau * kp + eps;
    let active: Vec<bool> = (0..n_pts)
        .map(|j| agg[j] - here_vals[j] + margin > 0.0)
        .collect();
    let n_active = active.iter().filter(|a| **a).count();
    out.value = (0..n_pts)
        .filter(|j| active[*j])
        .map(|j| agg[j] - here_vals[j] + margin)
        .sum::<f64>()
        / n_pts as f64;
    if n_active == 0 {
        return Ok((out, kp));
    }
    let inv = 1.0 / n_pts as f64;

    let mut up_next = Array2::zeros((succ.len(), 1));
    for (r, &j) in owner.iter().enumerate() {
        if active[j] {
            up_next[[r, 0]] = inv * weights[r];
        }
    }
    let mut up_here = Array2::zeros((n_pts, 1));
    for j in 0..n_pts {
        if active[j] {
            up_here[[j, 0]] = -inv;
        }
    }
    let (g_next, dx_next) = v.backward_batch(&trace_next, up_next.view())?;
    let (g_here, _) = v.backward_batch(&trace_here, up_here.view())?;
    out.grad_v.add_scaled(&g_next, 1.0);
    out.grad_v.add_scaled(&g_here, 1.0);
    let frac = n_active as f64 * inv;
    out.grad_v.add_scaled(&g_lv, frac * tau * dk_dlv);

    // Chain rule into the policy: d/du of V(f(x, u, w)) is J_u^T grad V.
    let mut up_pi = Array2::zeros((n_pts, m));
    for (r, &j) in owner.iter().enumerate() {
        if !active[j] {
            continue;
        }
        let gx = dx_next.row(r);
        let gu = jus[r].t().dot(&gx);
        for k in 0..m {
            up_pi[[j, k]] += gu[k];
        }
    }
    let trace_pi = policy.forward_trace(xs.view())?;
    // Clamped actions already have zero Jacobian columns.
    let (g_pi, _) = policy.backward_batch(&trace_pi, up_pi.view())?;
    out.grad_pi.add_scaled(&g_pi, 1.0);
    out.grad_pi.add_scaled(&g_lpi, frac * tau * dk_dlpi);
    Ok((out, kp))
}

/// Expected-decrease loss with `noise_samples` fresh triangular draws per point.
#[allow(clippy::too_many_arguments)]
pub fn loss_decrease<R: Rng + ?Sized>(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    spec: &Spec,
    points: &[Vec<f64>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossGrad, f64)> {
    let noise: Vec<Vec<Vec<f64>>> = points
        .iter()
        .map(|_| {
            (0..cfg.noise_samples)
                .map(|_| sample_triangular(sys.noise_dim, rng))
                .collect()
        })
        .collect();
    loss_decrease_with_noise(
        v,
        policy,
        sys,
        spec,
        points,
        &noise,
        cfg.tau,
        cfg.epsilon_decrease,
        cfg.split_lipschitz,
    )
}

/// Per-epoch averages of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_init: f64,
    pub l_unsafe: f64,
    pub l_decrease: f64,
    /// Plain mode only.
    pub l_nonnegative: f64,
    pub total: f64,
    pub tau: f64,
    pub k_prime: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,l_init,l_unsafe,l_decrease,l_nonnegative,total,tau,k_prime";

pub fn loss_trace_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_init, r.l_unsafe, r.l_decrease, r.l_nonnegative, r.total, r.tau, r.k_prime
        );
    }
    s
}

/// Optimizer state for both networks, kept across iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub v_opt: AdamState,
    pub pi_opt: AdamState,
}

impl Trainer {
    pub fn new(v: &Network, policy: &Network, cfg: &LossConfig) -> Self {
        Self {
            v_opt: AdamState::new(v, AdamConfig::with_learning_rate(cfg.lr_certificate)),
            pi_opt: AdamState::new(policy, AdamConfig::with_learning_rate(cfg.lr_policy)),
        }
    }
}

fn mix<R: Rng + ?Sized>(
    random: &[Vec<f64>],
    cex: &CounterexampleBuffer,
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    if random.is_empty() && cex.is_empty() {
        return Vec::new();
    }
    let n_cex = if cex.is_empty() {
        0
    } else if random.is_empty() {
        n
    } else {
        (fraction * n as f64).round() as usize
    };
    let mut out = cex.sample(n_cex, rng);
    out.extend((0..n - n_cex).map(|_| random[rng.random_range(0..random.len())].clone()));
    out
}

/// One learner iteration: `epochs` passes over freshly drawn random points, each batch mixing
/// in counterexamples, with Adam steps on `L_0 + L_U + alpha L_E`. The loss mesh is decayed at
/// the end.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration<R: Rng + ?Sized>(
    v: &mut Network,
    policy: &mut Network,
    sys: &Dtss,
    spec: &Spec,
    buffers: &mut SampleBuffers,
    cfg: &mut LossConfig,
    trainer: &mut Trainer,
    rng: &mut R,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let random_per_batch =
        ((1.0 - cfg.counterexample_fraction) * cfg.batch_size as f64).round().max(1.0) as usize;
    for epoch in 0..cfg.epochs {
        buffers.resample(sys, cfg.random_points, rng);
        buffers.p_decrease.shuffle(rng);
        let batches = buffers.p_decrease.len().div_ceil(random_per_batch).max(1);
        let mut sums = [0.0f64; 5];
        let mut k_last = 0.0;
        for b in 0..batches {
            let lo = b * random_per_batch;
            let hi = (lo + random_per_batch).min(buffers.p_decrease.len());
            let mut pe: Vec<Vec<f64>> = buffers.p_decrease[lo..hi].to_vec();
            let n_cex = if buffers.c_decrease.is_empty() {
                0
            } else {
                cfg.batch_size.saturating_sub(pe.len())
            };
            pe.extend(buffers.c_decrease.sample(n_cex, rng));
            let p0 = mix(&buffers.p_init, &buffers.c_init, cfg.batch_size, cfg.counterexample_fraction, rng);
            let pu = mix(&buffers.p_unsafe, &buffers.c_unsafe, cfg.batch_size, cfg.counterexample_fraction, rng);

            let l0 = loss_init(v, &p0, spec, cfg.epsilon)?;
            let lu = loss_unsafe(v, &pu, spec, cfg.epsilon)?;
            let (le, kp) = loss_decrease(v, policy, sys, spec, &pe, cfg, rng)?;
            let mut nn_points = pe.clone();
            nn_points.extend_from_slice(&p0);
            let ln = loss_nonnegative(v, &nn_points, spec, cfg.epsilon)?;
            let total = l0.value + lu.value + cfg.alpha * le.value + ln.value;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {total} at epoch {epoch}, batch {b} (L0 {}, LU {}, LE {}, K' {kp})",
                    l0.value, lu.value, le.value
                )));
            }
            let mut gv = l0.grad_v;
            gv.add_scaled(&lu.grad_v, 1.0);
            gv.add_scaled(&le.grad_v, cfg.alpha);
            gv.add_scaled(&ln.grad_v, 1.0);
            trainer.v_opt.step(v, &gv)?;
            if !cfg.freeze_policy {
                let mut gp = le.grad_pi;
                gp.scale(cfg.alpha);
                trainer.pi_opt.step(policy, &gp)?;
            }
            sums[0] += l0.value;
            sums[1] += lu.value;
            sums[2] += le.value;
            sums[3] += ln.value;
            sums[4] += total;
            k_last = kp;
        }
        let n = batches as f64;
        records.push(LossRecord {
            epoch,
            l_init: sums[0] / n,
            l_unsafe: sums[1] / n,
            l_decrease: sums[2] / n,
            l_nonnegative: sums[3] / n,
            total: sums[4] / n,
            tau: cfg.tau,
            k_prime: k_last,
        });
    }
    cfg.tau *= cfg.tau_decay;
    Ok(records)
}
