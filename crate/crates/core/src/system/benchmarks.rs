//! Benchmark catalogue.

use super::{Dtss, Dynamics, PretrainLoss, RectSet, SystemDefaults};
use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use ndarray::{array, Array2};
use std::f64::consts::PI;
use std::sync::Arc;

pub const BENCHMARK_NAMES: [&str; 7] = [
    "linear-sys",
    "linear-sys-hard",
    "pendulum",
    "collision-avoid",
    "triple-integrator",
    "planar-robot",
    "drone4D",
];

pub fn benchmark_names() -> &'static [&'static str] {
    &BENCHMARK_NAMES
}

/// Looks up a benchmark by name. `contracting-toy` is accepted in addition to the catalogue.
pub fn benchmark(name: &str) -> Result<Dtss> {
    match name {
        "linear-sys" => linear_system(false),
        "linear-sys-hard" => linear_system(true),
        "pendulum" => pendulum(),
        "collision-avoid" => collision_avoid(),
        "triple-integrator" => triple_integrator(),
        "planar-robot" => planar_robot(),
        "drone4D" => drone4d(),
        "contracting-toy" => contracting_toy(0.01),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Outward widening that absorbs rounding differences between point and interval evaluation.
fn widen(lo: f64, hi: f64) -> Interval {
    let pad = |v: f64| 4.0 * f64::EPSILON * (1.0 + v.abs());
    Interval {
        lo: lo - pad(lo),
        hi: hi + pad(hi),
    }
}

/// Enclosure of `g + W w` over a noise box.
fn additive_enclosure(g: &[f64], w: &Array2<f64>, noise: &IntervalBox) -> IntervalBox {
    let mid = noise.center();
    let rad: Vec<f64> = noise.intervals().iter().map(|i| 0.5 * i.width()).collect();
    let dims = g
        .iter()
        .zip(w.outer_iter())
        .map(|(gi, row)| {
            let m = gi + row.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>();
            let r = row.iter().zip(&rad).map(|(a, b)| a.abs() * b).sum::<f64>();
            widen(m - r, m + r)
        })
        .collect();
    IntervalBox::new(dims).expect("nonempty state")
}

fn mat_vec(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    m.outer_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `f(x, u, w) = A x + B u + W w`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub w: Array2<f64>,
}

impl LinearDynamics {
    fn drift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        mat_vec(&self.a, x)
            .into_iter()
            .zip(mat_vec(&self.b, u))
            .map(|(p, q)| p + q)
            .collect()
    }
}

impl Dynamics for LinearDynamics {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        self.drift(x, u)
            .into_iter()
            .zip(mat_vec(&self.w, w))
            .map(|(p, q)| p + q)
            .collect()
    }

    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox {
        additive_enclosure(&self.drift(x, u), &self.w, noise)
    }

    fn jacobians(&self, _x: &[f64], _u: &[f64], _w: &[f64]) -> (Array2<f64>, Array2<f64>) {
        (self.a.clone(), self.b.clone())
    }
}

fn boxes(spec: &[(&[f64], &[f64])]) -> Result<RectSet> {
    RectSet::new(
        spec.iter()
            .map(|(lo, hi)| IntervalBox::from_bounds(lo, hi))
            .collect::<Result<_>>()?,
    )
}

fn linear_sys_dynamics() -> LinearDynamics {
    LinearDynamics {
        a: array![[1.0, 0.045], [0.0, 0.9]],
        b: array![[0.45], [0.5]],
        w: array![[0.01, 0.0], [0.0, 0.005]],
    }
}

pub fn linear_system(hard: bool) -> Result<Dtss> {
    let (name, initial, unsafe_set) = if hard {
        (
            "linear-sys-hard",
            boxes(&[
                (&[-1.4, -0.1], &[-1.3, 0.1]),
                (&[1.3, -0.1], &[1.4, 0.1]),
            ])?,
            boxes(&[
                (&[-0.9, -0.2], &[-0.7, 0.2]),
                (&[0.7, -0.2], &[0.9, 0.2]),
            ])?,
        )
    } else {
        (
            "linear-sys",
            boxes(&[
                (&[-0.25, -0.1], &[-0.2, 0.1]),
                (&[0.2, -0.1], &[0.25, 0.1]),
            ])?,
            boxes(&[
                (&[-1.5, -1.5], &[-1.4, 0.0]),
                (&[1.4, 0.0], &[1.5, 1.5]),
            ])?,
        )
    };
    Dtss::new(
        name,
        IntervalBox::cube(-1.5, 1.5, 2)?,
        IntervalBox::cube(-1.0, 1.0, 1)?,
        2,
        initial,
        boxes(&[(&[-0.2, -0.2], &[0.2, 0.2])])?,
        unsafe_set,
        (1.0, 0.95),
        PretrainLoss::Norm,
        Arc::new(linear_sys_dynamics()),
    )
}

#[derive(Debug, Clone, Copy)]
struct Pendulum;

impl Pendulum {
    const DELTA: f64 = 0.05;
    const G: f64 = 10.0;
    const M: f64 = 0.15;
    const L: f64 = 0.5;
    const B: f64 = 0.1;

    /// Unclipped velocity update.
    fn raw_velocity(x: &[f64], u: f64, w2: f64) -> f64 {
        let torque = -1.5 * Self::G * (x[0] + PI).sin() / (2.0 * Self::L)
            + 6.0 / (Self::M * Self::L * Self::L) * u;
        (1.0 - Self::B) * x[1] + Self::DELTA * torque + 0.02 * w2
    }
}

impl Dynamics for Pendulum {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let c = Self::raw_velocity(x, u[0], w[1]).clamp(-5.0, 5.0);
        vec![x[0] + 0.01 * w[0] + Self::DELTA * c, c]
    }

    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox {
        let n = noise.intervals();
        let c_lo = Self::raw_velocity(x, u[0], n[1].lo).clamp(-5.0, 5.0);
        let c_hi = Self::raw_velocity(x, u[0], n[1].hi).clamp(-5.0, 5.0);
        let p_lo = x[0] + 0.01 * n[0].lo + Self::DELTA * c_lo;
        let p_hi = x[0] + 0.01 * n[0].hi + Self::DELTA * c_hi;
        IntervalBox::new(vec![widen(p_lo, p_hi), widen(c_lo, c_hi)]).expect("two dims")
    }

    fn jacobians(&self, x: &[f64], u: &[f64], w: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let raw = Self::raw_velocity(x, u[0], w[1]);
        let active = raw > -5.0 && raw < 5.0;
        let (dc_dx1, dc_dx2, dc_du) = if active {
            (
                -1.5 * Self::G * (x[0] + PI).cos() / (2.0 * Self::L) * Self::DELTA,
                1.0 - Self::B,
                Self::DELTA * 6.0 / (Self::M * Self::L * Self::L),
            )
        } else {
            (0.0, 0.0, 0.0)
        };
        let d = Self::DELTA;
        (
            array![[1.0 + d * dc_dx1, d * dc_dx2], [dc_dx1, dc_dx2]],
            array![[d * dc_du], [dc_du]],
        )
    }
}

pub fn pendulum() -> Result<Dtss> {
    Dtss::new(
        "pendulum",
        IntervalBox::cube(-0.7, 0.7, 2)?,
        IntervalBox::cube(-1.0, 1.0, 1)?,
        2,
        boxes(&[(&[-0.3, -0.3], &[0.3, 0.3])])?,
        boxes(&[(&[-0.2, -0.2], &[0.2, 0.2])])?,
        boxes(&[
            (&[-0.7, -0.7], &[-0.6, 0.0]),
            (&[0.6, 0.0], &[0.7, 0.7]),
        ])?,
        (1.7875, 8.4),
        PretrainLoss::Pendulum,
        Arc::new(Pendulum),
    )
}

#[derive(Debug, Clone, Copy)]
struct CollisionAvoid;

impl CollisionAvoid {
    /// `min(10/3 ||x - c||_2, 1)` and its gradient.
    fn damping(x: &[f64], cy: f64) -> (f64, [f64; 2]) {
        let (dx, dy) = (x[0], x[1] - cy);
        let n = (dx * dx + dy * dy).sqrt();
        let v = 10.0 / 3.0 * n;
        if v < 1.0 && n > 0.0 {
            (v, [10.0 / 3.0 * dx / n, 10.0 / 3.0 * dy / n])
        } else {
            (v.min(1.0), [0.0, 0.0])
        }
    }

    fn drift(x: &[f64], u: &[f64]) -> Vec<f64> {
        let (d1, _) = Self::damping(x, 1.0);
        let (d2, _) = Self::damping(x, -1.0);
        let h = [d1 * u[0], d1 * u[1] + (1.0 - d1)];
        vec![
            x[0] + 0.2 * (d2 * h[0]),
            x[1] + 0.2 * (d2 * h[1] - (1.0 - d2)),
        ]
    }
}

impl Dynamics for CollisionAvoid {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let g = Self::drift(x, u);
        vec![g[0] + 0.05 * w[0], g[1] + 0.05 * w[1]]
    }

    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox {
        additive_enclosure(&Self::drift(x, u), &array![[0.05, 0.0], [0.0, 0.05]], noise)
    }

    fn jacobians(&self, x: &[f64], u: &[f64], _w: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let (d1, g1) = Self::damping(x, 1.0);
        let (d2, g2) = Self::damping(x, -1.0);
        let h = [d1 * u[0], d1 * u[1] + (1.0 - d1)];
        // g = d2 h - (1 - d2) e2, so dg = (h + e2) dd2 + d2 (u - e2) dd1.
        let hp = [h[0], h[1] + 1.0];
        let ue = [u[0], u[1] - 1.0];
        let mut jx = Array2::eye(2);
        for i in 0..2 {
            for j in 0..2 {
                jx[[i, j]] += 0.2 * (hp[i] * g2[j] + d2 * ue[i] * g1[j]);
            }
        }
        let ju = Array2::eye(2) * (0.2 * d1 * d2);
        (jx, ju)
    }
}

pub fn collision_avoid() -> Result<Dtss> {
    let sys = Dtss::new(
        "collision-avoid",
        IntervalBox::cube(-1.0, 1.0, 2)?,
        IntervalBox::cube(-1.0, 1.0, 2)?,
        2,
        boxes(&[
            (&[-1.0, -0.6], &[-0.9, 0.6]),
            (&[0.9, -0.6], &[1.0, 0.6]),
        ])?,
        boxes(&[(&[-0.2, -0.2], &[0.2, 0.2])])?,
        boxes(&[
            (&[-0.3, -1.0], &[0.3, -0.7]),
            (&[-0.3, 0.7], &[0.3, 1.0]),
        ])?,
        (3.0, 0.2),
        PretrainLoss::Norm,
        Arc::new(CollisionAvoid),
    )?;
    let defaults = SystemDefaults {
        noise_cells_per_axis: 24,
        loss_mesh: 0.01,
        ..SystemDefaults::for_dim(2)
    };
    Ok(sys.with_defaults(defaults))
}

pub fn triple_integrator() -> Result<Dtss> {
    let dynamics = LinearDynamics {
        a: array![[1.0, 0.045, 0.0], [0.0, 1.0, 0.045], [0.0, 0.0, 0.9]],
        b: array![[0.35], [0.45], [0.5]],
        w: array![[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.005]],
    };
    let sys = Dtss::new(
        "triple-integrator",
        IntervalBox::cube(-1.0, 1.0, 3)?,
        IntervalBox::cube(-1.0, 1.0, 1)?,
        3,
        boxes(&[
            (&[-0.25, -0.25, -0.1], &[-0.2, -0.2, 0.1]),
            (&[0.2, 0.2, -0.1], &[0.25, 0.25, 0.1]),
        ])?,
        boxes(&[(&[-0.2, -0.2, -0.2], &[0.2, 0.2, 0.2])])?,
        boxes(&[
            (&[-1.0, -1.0, -1.0], &[-0.9, -0.9, 0.0]),
            (&[0.9, 0.9, 0.0], &[1.0, 1.0, 1.0]),
        ])?,
        (1.045, 1.3),
        PretrainLoss::SquaredNorm,
        Arc::new(dynamics),
    )?;
    let defaults = SystemDefaults {
        noise_cells_per_axis: 6,
        ..SystemDefaults::for_dim(3)
    };
    Ok(sys.with_defaults(defaults))
}

#[derive(Debug, Clone, Copy)]
struct PlanarRobot;

impl PlanarRobot {
    const DELTA: f64 = 0.2;

    fn drift(x: &[f64], u: &[f64]) -> Vec<f64> {
        let d = Self::DELTA;
        let speed = x[2] + 2.0 * d * u[0];
        let (s, c) = (PI * u[1]).sin_cos();
        vec![x[0] + d * speed * c, x[1] + d * speed * s, x[2] + d * 2.0 * u[0]]
    }
}

impl Dynamics for PlanarRobot {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g = Self::drift(x, u);
        g[0] += 0.01 * w[0];
        g[1] += 0.01 * w[1];
        g
    }

    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox {
        let w = array![[0.01, 0.0], [0.0, 0.01], [0.0, 0.0]];
        additive_enclosure(&Self::drift(x, u), &w, noise)
    }

    fn jacobians(&self, x: &[f64], u: &[f64], _w: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let d = Self::DELTA;
        let speed = x[2] + 2.0 * d * u[0];
        let (s, c) = (PI * u[1]).sin_cos();
        let jx = array![[1.0, 0.0, d * c], [0.0, 1.0, d * s], [0.0, 0.0, 1.0]];
        let ju = array![
            [2.0 * d * d * c, -d * speed * PI * s],
            [2.0 * d * d * s, d * speed * PI * c],
            [2.0 * d, 0.0]
        ];
        (jx, ju)
    }
}

pub fn planar_robot() -> Result<Dtss> {
    Dtss::new(
        "planar-robot",
        IntervalBox::cube(-1.0, 1.0, 3)?,
        IntervalBox::cube(-1.0, 1.0, 2)?,
        2,
        boxes(&[(&[0.4, -0.8, -0.1], &[0.6, -0.6, 0.1])])?,
        boxes(&[(&[-1.0, 0.6, -1.0], &[-0.6, 1.0, 1.0])])?,
        boxes(&[
            (&[-1.0, -1.0, -1.0], &[-0.8, 0.0, 1.0]),
            (&[-0.1, 0.8, -1.0], &[1.0, 1.0, 1.0]),
            (&[0.8, 0.0, -1.0], &[1.0, 0.8, 1.0]),
            (&[-0.4, -0.4, -1.0], &[0.0, 0.1, 1.0]),
        ])?,
        (1.4, 0.4 * PI),
        PretrainLoss::PlanarRobot,
        Arc::new(PlanarRobot),
    )
}

#[derive(Debug, Clone, Copy)]
struct Drone4d;

impl Drone4d {
    const DELTA: f64 = 0.5;

    fn drift(x: &[f64], u: &[f64]) -> Vec<f64> {
        let d = Self::DELTA;
        vec![
            x[0] + d * (x[1] + 0.5 * d * u[0]),
            x[1] + d * (-0.02 * x[1].powi(3) + u[0]),
            x[2] + d * (x[3] + 0.5 * d * u[1]),
            x[3] + d * (-0.01 * x[3].powi(3) + u[1] - 0.1 * (PI * x[0]).sin()),
        ]
    }
}

impl Dynamics for Drone4d {
    fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g = Self::drift(x, u);
        g[1] += 0.01 * w[0];
        g[3] += 0.01 * w[1];
        g
    }

    fn eval_interval(&self, x: &[f64], u: &[f64], noise: &IntervalBox) -> IntervalBox {
        let w = array![[0.0, 0.0], [0.01, 0.0], [0.0, 0.0], [0.0, 0.01]];
        additive_enclosure(&Self::drift(x, u), &w, noise)
    }

    fn jacobians(&self, x: &[f64], _u: &[f64], _w: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let d = Self::DELTA;
        let jx = array![
            [1.0, d, 0.0, 0.0],
            [0.0, 1.0 - d * 0.06 * x[1] * x[1], 0.0, 0.0],
            [0.0, 0.0, 1.0, d],
            [-d * 0.1 * PI * (PI * x[0]).cos(), 0.0, 0.0, 1.0 - d * 0.03 * x[3] * x[3]]
        ];
        let ju = array![[0.5 * d * d, 0.0], [d, 0.0], [0.0, 0.5 * d * d], [0.0, d]];
        (jx, ju)
    }
}

pub fn drone4d() -> Result<Dtss> {
    let h = 0.5;
    Dtss::new(
        "drone4D",
        IntervalBox::cube(-h, h, 4)?,
        IntervalBox::cube(-0.5, 0.5, 2)?,
        2,
        boxes(&[(&[-0.45, -0.1, -0.45, 0.25], &[-0.35, 0.1, -0.35, 0.35])])?,
        boxes(&[(&[0.3, -h, 0.3, -h], &[0.5, h, 0.5, h])])?,
        boxes(&[
            (&[0.2, -h, -h, -h], &[0.5, h, 0.3, h]),
            (&[0.0, -h, -h, -h], &[0.2, h, 0.1, h]),
            (&[-h, -h, 0.3, -h], &[0.0, h, 0.4, h]),
        ])?,
        // The action column of u_1 has 1-norm delta^2/2 + delta.
        (1.5, 0.625),
        PretrainLoss::Drone,
        Arc::new(Drone4d),
    )
}

/// One-dimensional contraction `x' = 0.5 x + noise_scale * w` on `[-1, 1]`. The action has no
/// effect. Used as a small, fully analysable test system.
pub fn contracting_toy(noise_scale: f64) -> Result<Dtss> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Domain("noise scale must be nonnegative".into()));
    }
    let dynamics = LinearDynamics {
        a: array![[0.5]],
        b: array![[0.0]],
        w: array![[noise_scale]],
    };
    Dtss::new(
        "contracting-toy",
        IntervalBox::cube(-1.0, 1.0, 1)?,
        IntervalBox::cube(-1.0, 1.0, 1)?,
        1,
        boxes(&[(&[-0.6], &[-0.4]), (&[0.4], &[0.6])])?,
        boxes(&[(&[-0.2], &[0.2])])?,
        boxes(&[(&[-1.0], &[-0.9]), (&[0.9], &[1.0])])?,
        (0.5, 0.0),
        PretrainLoss::Norm,
        Arc::new(dynamics),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_step_by_hand() {
        let sys = benchmark("linear-sys").unwrap();
        let next = sys.step(&[1.0, 1.0], &[1.0], &[0.0, 0.0]).unwrap();
        assert!((next[0] - 1.495).abs() < 1e-12 && (next[1] - 1.4).abs() < 1e-12);
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn pendulum_origin_is_fixed() {
        let sys = benchmark("pendulum").unwrap();
        let next = sys.step(&[0.0, 0.0], &[0.0], &[0.0, 0.0]).unwrap();
        assert!(next.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn linear_noise_enclosure() {
        let sys = benchmark("linear-sys").unwrap();
        let b = sys
            .step_interval(&[0.0, 0.0], &[0.0], &IntervalBox::cube(-1.0, 1.0, 2).unwrap())
            .unwrap();
        let iv = b.intervals();
        assert!((iv[0].lo + 0.01).abs() < 1e-12 && (iv[0].hi - 0.01).abs() < 1e-12);
        assert!((iv[1].lo + 0.005).abs() < 1e-12 && (iv[1].hi - 0.005).abs() < 1e-12);
    }

    #[test]
    fn catalogue() {
        for name in BENCHMARK_NAMES {
            assert_eq!(benchmark(name).unwrap().name, name);
        }
        assert!(matches!(benchmark("nope"), Err(Error::UnknownSystem(_))));
        let lin = benchmark("linear-sys").unwrap();
        assert_eq!(lin.state_space, IntervalBox::cube(-1.5, 1.5, 2).unwrap());
        assert_eq!(lin.target.boxes()[0], IntervalBox::cube(-0.2, 0.2, 2).unwrap());
        let ca = benchmark("collision-avoid").unwrap();
        assert_eq!((ca.lipschitz_x, ca.lipschitz_u), (3.0, 0.2));
        assert_eq!(ca.defaults.noise_cells_per_axis, 24);
        let drone = benchmark("drone4D").unwrap();
        assert_eq!(drone.state_dim(), 4);
        assert_eq!(benchmark("triple-integrator").unwrap().default_noise().unwrap().cells().len(), 216);
    }
}
