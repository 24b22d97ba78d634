//! Discrete-time stochastic systems `x_{t+1} = f(x_t, u_t, w_t)` with rectangular set layouts.

mod benchmarks;
mod noise;

pub use benchmarks::{
    benchmark, benchmark_names, contracting_toy, linear_system, BENCHMARK_NAMES,
};
pub use noise::{make_partition, sample_triangular, triangular_cdf, triangular_cell_prob, NoiseModel};

use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use crate::nn::Network;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Finite union of closed axis-aligned boxes. May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RectSet {
    boxes: Vec<IntervalBox>,
}

impl RectSet {
    pub fn new(boxes: Vec<IntervalBox>) -> Result<Self> {
        if let Some(first) = boxes.first() {
            if boxes.iter().any(|b| b.dim() != first.dim()) {
                return Err(Error::Shape("boxes of a set differ in dimension".into()));
            }
        }
        Ok(Self { boxes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn boxes(&self) -> &[IntervalBox] {
        &self.boxes
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    pub fn intersects(&self, cell: &IntervalBox) -> bool {
        self.boxes.iter().any(|b| b.intersects(cell))
    }

    /// True when `cell` lies inside a single member box. A cell covered only by several boxes
    /// together is reported as not contained, which errs on the side of checking more cells.
    pub fn contains_box(&self, cell: &IntervalBox) -> bool {
        self.boxes.iter().any(|b| b.contains_box(cell))
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(IntervalBox::volume).sum()
    }

    /// Uniform-ish sample: a member box is chosen with probability proportional to its volume.
    /// Overlaps are double counted.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        if self.boxes.is_empty() {
            return None;
        }
        let total = self.volume();
        if total <= 0.0 {
            let i = rng.random_range(0..self.boxes.len());
            return Some(self.boxes[i].sample(rng));
        }
        let mut pick = rng.random_range(0.0..total);
        for b in &self.boxes {
            let v = b.volume();
            if pick < v {
                return Some(b.sample(rng));
            }
            pick -= v;
        }
        Some(self.boxes[self.boxes.len() - 1].sample(rng))
    }
}

/// Transition function of a system.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64>;

    /// Enclosure of `{ f(x, u, w) : w in noise }` for a point state and action.
    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox;

    /// Jacobians `(df/dx, df/du)` with shapes `(d, d)` and `(d, m)`.
    fn jacobians(&self, x: &[f64], u: &[f64], w: &[f64]) -> (Array2<f64>, Array2<f64>);
}

/// Per-state loss used to pretrain policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainLoss {
    /// `||x||_2 - 1`.
    Norm,
    /// `||x||_2^2 - 1`.
    SquaredNorm,
    /// `x_1^2 + 0.1 x_2^2`.
    Pendulum,
    /// `10 ||(x_1 + 0.8, x_2 - 0.8)||_2 - 10 R` with `R = 1` inside the target.
    PlanarRobot,
    /// `||(x_1 - 0.4, x_3 - 0.4)||_2 - 10 R` with `R = 1` in the target and `-1` if unsafe.
    Drone,
}

impl PretrainLoss {
    /// Loss value and its gradient with respect to the state.
    pub fn eval(&self, sys: &Dtss, x: &[f64]) -> (f64, Vec<f64>) {
        let dist = |a: f64, b: f64| (a * a + b * b).sqrt();
        let mut grad = vec![0.0; x.len()];
        match self {
            PretrainLoss::Norm => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (g, v) in grad.iter_mut().zip(x) {
                        *g = v / n;
                    }
                }
                (n - 1.0, grad)
            }
            PretrainLoss::SquaredNorm => {
                for (g, v) in grad.iter_mut().zip(x) {
                    *g = 2.0 * v;
                }
                (x.iter().map(|v| v * v).sum::<f64>() - 1.0, grad)
            }
            PretrainLoss::Pendulum => {
                grad[0] = 2.0 * x[0];
                grad[1] = 0.2 * x[1];
                (x[0] * x[0] + 0.1 * x[1] * x[1], grad)
            }
            PretrainLoss::PlanarRobot => {
                let (a, b) = (x[0] + 0.8, x[1] - 0.8);
                let n = dist(a, b);
                if n > 0.0 {
                    grad[0] = 10.0 * a / n;
                    grad[1] = 10.0 * b / n;
                }
                let reward = if sys.target.contains(x) { 1.0 } else { 0.0 };
                (10.0 * n - 10.0 * reward, grad)
            }
            PretrainLoss::Drone => {
                let (a, b) = (x[0] - 0.4, x[2] - 0.4);
                let n = dist(a, b);
                if n > 0.0 {
                    grad[0] = a / n;
                    grad[2] = b / n;
                }
                let reward = if sys.target.contains(x) {
                    1.0
                } else if sys.unsafe_set.contains(x) {
                    -1.0
                } else {
                    0.0
                };
                (n - 10.0 * reward, grad)
            }
        }
    }
}

/// Per-benchmark tuning defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemDefaults {
    pub noise_cells_per_axis: usize,
    pub verify_mesh: f64,
    pub refine_factor: f64,
    pub loss_mesh: f64,
    pub loss_mesh_decay: f64,
}

impl SystemDefaults {
    /// Dimension-dependent defaults.
    pub fn for_dim(d: usize) -> Self {
        match d {
            0..=2 => Self {
                noise_cells_per_axis: 12,
                verify_mesh: 0.01,
                refine_factor: 10.0,
                loss_mesh: 0.001,
                loss_mesh_decay: 0.8,
            },
            3 => Self {
                noise_cells_per_axis: 12,
                verify_mesh: 0.04,
                refine_factor: 4.0,
                loss_mesh: 0.005,
                loss_mesh_decay: 0.9,
            },
            _ => Self {
                noise_cells_per_axis: 12,
                verify_mesh: 0.06,
                refine_factor: 2.0,
                loss_mesh: 0.01,
                loss_mesh_decay: 0.9,
            },
        }
    }
}

/// A discrete-time stochastic system with its reach-avoid layout.
#[derive(Debug, Clone)]
pub struct Dtss {
    pub name: String,
    pub state_space: IntervalBox,
    pub action_space: IntervalBox,
    pub noise_dim: usize,
    pub initial: RectSet,
    pub target: RectSet,
    pub unsafe_set: RectSet,
    /// Lipschitz constant of `f` in the state (1-norm), action and noise fixed.
    pub lipschitz_x: f64,
    /// Lipschitz constant of `f` in the action (1-norm), state and noise fixed.
    pub lipschitz_u: f64,
    pub pretrain_loss: PretrainLoss,
    pub defaults: SystemDefaults,
    dynamics: Arc<dyn Dynamics>,
}

impl Dtss {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_space: IntervalBox,
        action_space: IntervalBox,
        noise_dim: usize,
        initial: RectSet,
        target: RectSet,
        unsafe_set: RectSet,
        lipschitz: (f64, f64),
        pretrain_loss: PretrainLoss,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        let d = state_space.dim();
        for (label, set) in [("initial", &initial), ("target", &target), ("unsafe", &unsafe_set)] {
            for b in set.boxes() {
                if b.dim() != d {
                    return Err(Error::Shape(format!("{label} set has wrong dimension")));
                }
                if !state_space.contains_box(b) {
                    return Err(Error::Domain(format!("{label} set leaves the state space")));
                }
            }
        }
        if !(lipschitz.0 >= 0.0 && lipschitz.1 >= 0.0) {
            return Err(Error::Domain("Lipschitz constants must be nonnegative".into()));
        }
        Ok(Self {
            name: name.into(),
            state_space,
            action_space,
            noise_dim,
            initial,
            target,
            unsafe_set,
            lipschitz_x: lipschitz.0,
            lipschitz_u: lipschitz.1,
            pretrain_loss,
            defaults: SystemDefaults::for_dim(d),
            dynamics,
        })
    }

    pub fn with_defaults(mut self, defaults: SystemDefaults) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_space.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_space.dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    /// `L_f = max(L_fx, L_fu)`.
    pub fn lipschitz_joint(&self) -> f64 {
        self.lipschitz_x.max(self.lipschitz_u)
    }

    pub fn clamp_action(&self, u: &mut [f64]) {
        self.action_space.clamp(u);
    }

    /// Policy output clamped to the action space.
    pub fn policy_action(&self, policy: &Network, x: &[f64]) -> Result<Vec<f64>> {
        let mut u = policy.forward(x)?;
        if u.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "policy outputs {} actions, system expects {}",
                u.len(),
                self.action_dim()
            )));
        }
        self.clamp_action(&mut u);
        Ok(u)
    }

    /// One transition: the action is clamped to `U`, the successor to `X`.
    pub fn step(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        if w.len() != self.noise_dim {
            return Err(Error::Shape("noise dimension mismatch".into()));
        }
        let mut u = u.to_vec();
        self.clamp_action(&mut u);
        let mut next = self.dynamics.eval(x, &u, w);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "dynamics of {} returned a non-finite state at x = {x:?}",
                self.name
            )));
        }
        self.state_space.clamp(&mut next);
        Ok(next)
    }

    /// Enclosure of all successors of `(x, u)` over the noise box, clamped to `X`.
    pub fn step_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> Result<IntervalBox> {
        self.check_dims(x, u)?;
        if noise.dim() != self.noise_dim {
            return Err(Error::Shape("noise box dimension mismatch".into()));
        }
        let mut u = u.to_vec();
        self.clamp_action(&mut u);
        let raw = self.dynamics.eval_interval(x, &u, noise);
        let dims = raw
            .intervals()
            .iter()
            .zip(self.state_space.intervals())
            .map(|(r, s)| Interval {
                lo: r.lo.clamp(s.lo, s.hi),
                hi: r.hi.clamp(s.lo, s.hi),
            })
            .collect();
        IntervalBox::new(dims)
    }

    /// Successor together with the Jacobians of the clamped step with respect to `x` and the
    /// unclamped action `u`. Clamped components have zero derivative.
    pub fn step_with_jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        w: &[f64],
    ) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
        self.check_dims(x, u)?;
        let mut uc = u.to_vec();
        self.clamp_action(&mut uc);
        let mut next = self.dynamics.eval(x, &uc, w);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite successor state".into()));
        }
        let (mut jx, mut ju) = self.dynamics.jacobians(x, &uc, w);
        for (j, (raw, clamped)) in u.iter().zip(&uc).enumerate() {
            if raw != clamped {
                ju.column_mut(j).fill(0.0);
            }
        }
        for (i, iv) in self.state_space.intervals().iter().enumerate() {
            if next[i] < iv.lo || next[i] > iv.hi {
                jx.row_mut(i).fill(0.0);
                ju.row_mut(i).fill(0.0);
                next[i] = next[i].clamp(iv.lo, iv.hi);
            }
        }
        Ok((next, jx, ju))
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "expected state of dim {} and action of dim {}, got {} and {}",
                self.state_dim(),
                self.action_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Noise partition using this system's default resolution.
    pub fn default_noise(&self) -> Result<NoiseModel> {
        make_partition(self.noise_dim, self.defaults.noise_cells_per_axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rect_set_membership() {
        let xt = RectSet::new(vec![IntervalBox::cube(-0.2, 0.2, 2).unwrap()]).unwrap();
        assert!(xt.contains(&[0.2, -0.2]));
        let cell = IntervalBox::cube(0.19, 0.21, 2).unwrap();
        assert!(xt.intersects(&cell));
        assert!(!xt.contains_box(&cell));
        let far = IntervalBox::cube(0.5, 0.6, 2).unwrap();
        assert!(!xt.intersects(&far));
        assert!(!RectSet::empty().intersects(&cell));
    }

    #[test]
    fn rect_set_sampling_stays_inside() {
        let s = RectSet::new(vec![
            IntervalBox::from_bounds(&[-0.25, -0.1], &[-0.2, 0.1]).unwrap(),
            IntervalBox::from_bounds(&[0.2, -0.1], &[0.25, 0.1]).unwrap(),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut left = 0;
        for _ in 0..2000 {
            let x = s.sample(&mut rng).unwrap();
            assert!(s.contains(&x));
            if x[0] < 0.0 {
                left += 1;
            }
        }
        assert!((800..1200).contains(&left));
        assert!(RectSet::empty().sample(&mut rng).is_none());
    }

    #[test]
    fn step_clamps_state_and_action() {
        let sys = benchmark("linear-sys").unwrap();
        let next = sys.step(&[1.5, 1.5], &[5.0], &[0.0, 0.0]).unwrap();
        // u is clamped to 1; both successor coordinates leave X and are clamped back.
        assert_eq!(next, vec![1.5, 1.5]);
        let inner = sys.step(&[0.0, 0.0], &[-3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(inner, vec![-0.45, -0.5]);
        assert!(sys.step(&[0.0], &[0.0], &[0.0, 0.0]).is_err());
    }
}
