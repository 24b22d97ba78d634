//! Point and cell checks of the (log)RASM conditions.

use crate::bounds::{ibp_forward, IntervalNetwork};
use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use crate::nn::Network;
use crate::system::{sample_triangular, Dtss, NoiseModel};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CertMode {
    /// Logarithmic certificate: thresholds `0` and `log(1/(1-rho))`.
    #[default]
    LogRasm,
    /// Plain certificate: thresholds `1` and `1/(1-rho)`, values nonnegative.
    Rasm,
}

/// A reach-avoid probability bound together with the certificate levels it induces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spec {
    pub rho: f64,
    pub mode: CertMode,
    /// Level required on the unsafe set.
    pub threshold: f64,
    /// Level required on the initial set.
    pub init_level: f64,
}

impl Spec {
    pub fn new(rho: f64, mode: CertMode) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Domain(format!("rho = {rho} is not in (0, 1)")));
        }
        let (threshold, init_level) = match mode {
            CertMode::LogRasm => ((1.0 / (1.0 - rho)).ln(), 0.0),
            CertMode::Rasm => (1.0 / (1.0 - rho), 1.0),
        };
        if !threshold.is_finite() {
            return Err(Error::Domain("threshold overflows".into()));
        }
        Ok(Self {
            rho,
            mode,
            threshold,
            init_level,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Init,
    Unsafe,
    Decrease,
    /// Plain certificates must be nonnegative everywhere.
    NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Satisfied,
    SoftViolation,
    HardViolation,
}

/// Outcome of one condition on one cell. `margin` is the slack of the discrete condition
/// (negative when violated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellVerdict {
    pub status: Status,
    pub condition: Condition,
    pub margin: f64,
    pub lambda: Option<f64>,
}

/// All applicable verdicts for a cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellCheck {
    pub verdicts: Vec<CellVerdict>,
}

impl CellCheck {
    /// Most severe status across conditions (`Satisfied` if none apply).
    pub fn status(&self) -> Status {
        self.verdicts
            .iter()
            .map(|v| v.status)
            .max()
            .unwrap_or(Status::Satisfied)
    }

    /// The most severe verdict, ties broken by the smallest margin.
    pub fn worst(&self) -> Option<&CellVerdict> {
        self.verdicts.iter().max_by(|a, b| {
            a.status
                .cmp(&b.status)
                .then(b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal))
        })
    }

    pub fn violations(&self) -> impl Iterator<Item = &CellVerdict> {
        self.verdicts.iter().filter(|v| v.status != Status::Satisfied)
    }
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub x: Vec<f64>,
    pub tau: f64,
    pub cond: Condition,
    pub status: Status,
    pub margin: f64,
    pub lambda: Option<f64>,
}

impl VerdictRecord {
    pub fn new(x: &[f64], tau: f64, v: &CellVerdict) -> Self {
        Self {
            x: x.to_vec(),
            tau,
            cond: v.condition,
            status: v.status,
            margin: v.margin,
            lambda: v.lambda,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Allowance for floating-point error in bound computations, applied outward.
pub fn rounding_pad(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// The box `{x' : |x - x'|_inf <= tau / d}`, widened by a few ulps so that neighbouring cells
/// overlap despite rounding in their centers.
pub fn cell_box(center: &[f64], tau: f64) -> IntervalBox {
    let r = tau / center.len() as f64;
    let bounds: Vec<(f64, f64)> = center
        .iter()
        .map(|&c| {
            let slack = 4.0 * f64::EPSILON * (c.abs() + r);
            (c - r - slack, c + r + slack)
        })
        .collect();
    let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    IntervalBox::from_bounds(&lo, &hi).expect("finite center and mesh")
}

/// IBP enclosure of a scalar certificate over a box.
pub fn v_bounds(v: &Network, cell: &IntervalBox) -> Result<Interval> {
    if v.output_dim() != 1 {
        return Err(Error::Shape("certificate must have one output".into()));
    }
    Ok(ibp_forward(v, cell)?[0])
}

/// `log sum_i exp(a_i)` with the usual max shift. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Combines per-cell upper bounds `U_C` of the certificate on successor states with the cell
/// masses: `log sum P(C) exp(U_C)` in log mode and `sum P(C) U_C` otherwise.
pub fn combine_expectation(mode: CertMode, masses: &[f64], uppers: &[f64]) -> f64 {
    match mode {
        CertMode::LogRasm => {
            let terms: Vec<f64> = masses
                .iter()
                .zip(uppers)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, u)| p.ln() + u)
                .collect();
            log_sum_exp(&terms)
        }
        CertMode::Rasm => masses.iter().zip(uppers).map(|(p, u)| p * u).sum(),
    }
}

/// Upper bound on `log E[exp V(f(x, pi(x), w))]` (log mode) or `E[V(f(x, pi(x), w))]`
/// (plain mode) via the noise partition.
pub fn log_expectation_upper(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    noise: &NoiseModel,
    mode: CertMode,
    x: &[f64],
) -> Result<f64> {
    let u = sys.policy_action(policy, x)?;
    let mut uppers = Vec::with_capacity(noise.cells().len());
    let mut masses = Vec::with_capacity(noise.cells().len());
    for (cell, p) in noise.cells() {
        let succ = sys.step_interval(x, &u, cell)?;
        uppers.push(v_bounds(v, &succ)?.hi);
        masses.push(*p);
    }
    Ok(combine_expectation(mode, &masses, &uppers))
}

/// Two right-hand sides for the decrease condition on `exp(V)` at a grid point, both on the
/// exponential scale. `.0` is `exp(V_LB) - tau K'` with `K' = K / (1 - rho)`, the Lipschitz
/// constant of `exp(V)` capped at the threshold; `.1` is `exp(V_LB - tau K)`, what the log-mode
/// check amounts to. Below the threshold the second is always larger.
pub fn decrease_rhs_pair(v_lb: f64, tau: f64, k_exp: f64, rho: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho must lie in (0, 1), got {rho}")));
    }
    let k = k_exp * (1.0 - rho);
    Ok((v_lb.exp() - tau * k_exp, (v_lb - tau * k).exp()))
}

/// Refinement target from the decrease slack at a point:
/// `max(0.8 (V - E) / K, (V_LB - E) / K)`. May be nonpositive.
pub fn suggested_mesh(v: f64, v_lb: f64, e: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("suggested mesh needs K > 0, got {k}")));
    }
    Ok((0.8 * (v - e) / k).max((v_lb - e) / k))
}

/// Everything needed to check cells, prepared once per verification sweep.
#[derive(Debug)]
pub struct CellChecker<'a> {
    pub v: &'a Network,
    pub policy: &'a Network,
    pub sys: &'a Dtss,
    pub noise: &'a NoiseModel,
    pub spec: Spec,
    /// Lipschitz constant of `x -> V(f(x, pi(x), w))` in the 1-norm.
    pub k: f64,
    v_ibp: IntervalNetwork<'a>,
    masses: Vec<f64>,
    noise_lo: Array2<f64>,
    noise_hi: Array2<f64>,
}

/// Values at a cell center that do not depend on the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointData {
    pub value: f64,
    /// Padded expectation bound; `None` when the decrease condition cannot apply.
    pub expectation: Option<f64>,
}

impl<'a> CellChecker<'a> {
    pub fn new(
        v: &'a Network,
        policy: &'a Network,
        sys: &'a Dtss,
        noise: &'a NoiseModel,
        spec: Spec,
        k: f64,
    ) -> Result<Self> {
        let d = sys.state_dim();
        v.check_input(d)?;
        policy.check_input(d)?;
        if v.output_dim() != 1 {
            return Err(Error::Shape("certificate must have one output".into()));
        }
        if policy.output_dim() != sys.action_dim() {
            return Err(Error::Shape("policy output does not match the action space".into()));
        }
        if noise.dim() != sys.noise_dim {
            return Err(Error::Shape("noise model does not match the system".into()));
        }
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Domain(format!("invalid Lipschitz constant K = {k}")));
        }
        let n = noise.cells().len();
        let p = noise.dim();
        let mut noise_lo = Array2::zeros((n, p));
        let mut noise_hi = Array2::zeros((n, p));
        for (i, (cell, _)) in noise.cells().iter().enumerate() {
            for (j, iv) in cell.intervals().iter().enumerate() {
                noise_lo[[i, j]] = iv.lo;
                noise_hi[[i, j]] = iv.hi;
            }
        }
        Ok(Self {
            v,
            policy,
            sys,
            noise,
            spec,
            k,
            v_ibp: IntervalNetwork::new(v),
            masses: noise.cells().iter().map(|(_, p)| *p).collect(),
            noise_lo,
            noise_hi,
        })
    }

    /// Padded expectation bound at a state.
    pub fn expectation_upper(&self, x: &[f64]) -> Result<f64> {
        let u = self.sys.policy_action(self.policy, x)?;
        let d = self.sys.state_dim();
        let n = self.masses.len();
        let mut lo = Array2::zeros((n, d));
        let mut hi = Array2::zeros((n, d));
        for i in 0..n {
            let cell = IntervalBox::from_bounds(
                self.noise_lo.row(i).as_slice().expect("contiguous"),
                self.noise_hi.row(i).as_slice().expect("contiguous"),
            )?;
            let succ = self.sys.step_interval(x, &u, &cell)?;
            for (j, iv) in succ.intervals().iter().enumerate() {
                lo[[i, j]] = iv.lo;
                hi[[i, j]] = iv.hi;
            }
        }
        let (_, up) = self.v_ibp.bounds(lo.view(), hi.view())?;
        let uppers: Vec<f64> = up.column(0).iter().map(|u| u + rounding_pad(*u)).collect();
        let e = combine_expectation(self.spec.mode, &self.masses, &uppers);
        Ok(e + rounding_pad(e))
    }

    /// Mesh-independent data at a center: the certificate value and, when a cell around the
    /// point could need the decrease condition, the expectation bound.
    pub fn point_data(&self, x: &[f64], needs_decrease: bool) -> Result<PointData> {
        let value = self.v.eval_scalar(x)?;
        let expectation = if needs_decrease {
            Some(self.expectation_upper(x)?)
        } else {
            None
        };
        Ok(PointData { value, expectation })
    }

    /// Whether a cell around `x` with mesh `tau` can require the decrease condition at all.
    pub fn decrease_applies(&self, cell: &IntervalBox) -> bool {
        !self.sys.target.contains_box(cell)
    }

    /// Checks a cell given its center data and the certificate bounds over it.
    pub fn check_with(
        &self,
        x: &[f64],
        tau: f64,
        cell: &IntervalBox,
        bounds: Interval,
        point: &PointData,
    ) -> Result<CellCheck> {
        let sys = self.sys;
        let spec = &self.spec;
        let v_lb = bounds.lo - rounding_pad(bounds.lo);
        let v_ub = bounds.hi + rounding_pad(bounds.hi);
        let vx = point.value;
        let mut out = CellCheck::default();

        if sys.initial.intersects(cell) {
            let margin = spec.init_level - v_ub;
            let status = if margin >= 0.0 {
                Status::Satisfied
            } else if sys.initial.contains(x) && vx > spec.init_level {
                Status::HardViolation
            } else {
                Status::SoftViolation
            };
            out.verdicts.push(CellVerdict {
                status,
                condition: Condition::Init,
                margin,
                lambda: None,
            });
        }

        if sys.unsafe_set.intersects(cell) {
            let margin = v_lb - spec.threshold;
            let status = if margin >= 0.0 {
                Status::Satisfied
            } else if sys.unsafe_set.contains(x) && vx < spec.threshold {
                Status::HardViolation
            } else {
                Status::SoftViolation
            };
            out.verdicts.push(CellVerdict {
                status,
                condition: Condition::Unsafe,
                margin,
                lambda: None,
            });
        }

        if spec.mode == CertMode::Rasm {
            let margin = v_lb;
            let status = if margin >= 0.0 {
                Status::Satisfied
            } else if vx < 0.0 {
                Status::HardViolation
            } else {
                Status::SoftViolation
            };
            out.verdicts.push(CellVerdict {
                status,
                condition: Condition::NonNegative,
                margin,
                lambda: None,
            });
        }

        if self.decrease_applies(cell) && v_lb < spec.threshold {
            let e = match point.expectation {
                Some(e) => e,
                None => self.expectation_upper(x)?,
            };
            let margin = (v_lb - tau * self.k) - e;
            let verdict = if margin > 0.0 {
                CellVerdict {
                    status: Status::Satisfied,
                    condition: Condition::Decrease,
                    margin,
                    lambda: None,
                }
            } else if !sys.target.contains(x) && vx < spec.threshold && e >= vx {
                CellVerdict {
                    status: Status::HardViolation,
                    condition: Condition::Decrease,
                    margin,
                    lambda: None,
                }
            } else {
                let lambda = if self.k > 0.0 {
                    Some(suggested_mesh(vx, v_lb, e, self.k)?).filter(|l| *l > 0.0)
                } else {
                    None
                };
                CellVerdict {
                    status: Status::SoftViolation,
                    condition: Condition::Decrease,
                    margin,
                    lambda,
                }
            };
            out.verdicts.push(verdict);
        }
        Ok(out)
    }

    /// Checks the cell of mesh `tau` around `x`.
    pub fn check_cell(&self, x: &[f64], tau: f64) -> Result<CellCheck> {
        if x.len() != self.sys.state_dim() {
            return Err(Error::Shape("cell center has the wrong dimension".into()));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("invalid mesh {tau}")));
        }
        let cell = cell_box(x, tau);
        let bounds = v_bounds(self.v, &cell)?;
        let point = PointData {
            value: self.v.eval_scalar(x)?,
            expectation: None,
        };
        self.check_with(x, tau, &cell, bounds, &point)
    }

    /// Certificate bounds for many cells at once (rows of `lower`/`upper`).
    pub fn batch_bounds(&self, cells: &[IntervalBox]) -> Result<Vec<Interval>> {
        if cells.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.sys.state_dim();
        let mut lo = Array2::zeros((cells.len(), d));
        let mut hi = Array2::zeros((cells.len(), d));
        for (i, c) in cells.iter().enumerate() {
            for (j, iv) in c.intervals().iter().enumerate() {
                lo[[i, j]] = iv.lo;
                hi[[i, j]] = iv.hi;
            }
        }
        let (l, h) = self.v_ibp.bounds(lo.view(), hi.view())?;
        Ok(l.column(0)
            .iter()
            .zip(h.column(0))
            .map(|(&lo, &hi)| Interval { lo, hi: hi.max(lo) })
            .collect())
    }
}

/// Free-function form of [`CellChecker::check_cell`].
#[allow(clippy::too_many_arguments)]
pub fn check_cell(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    noise: &NoiseModel,
    spec: Spec,
    k: f64,
    x: &[f64],
    tau: f64,
) -> Result<CellCheck> {
    CellChecker::new(v, policy, sys, noise, spec, k)?.check_cell(x, tau)
}

/// Monte-Carlo estimate of the one-step (log-)expectation at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseReport {
    pub value: f64,
    /// `log E[exp V(x')]` in log mode, `E[V(x')]` otherwise.
    pub estimate: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl PointwiseReport {
    /// Estimated decrease `V(x) - estimate`.
    pub fn decrease(&self) -> f64 {
        self.value - self.estimate
    }
}

/// Statistical check of the expected decrease at a point. Test oracle only.
pub fn pointwise_rasm_check(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    mode: CertMode,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PointwiseReport> {
    if samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = sys.policy_action(policy, x)?;
    let value = v.eval_scalar(x)?;
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            let w = sample_triangular(sys.noise_dim, &mut rng);
            v.eval_scalar(&sys.step(x, &u, &w)?)
        })
        .collect::<Result<_>>()?;
    let n = samples as f64;
    let (estimate, std_err) = match mode {
        CertMode::Rasm => {
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, (var / n).sqrt())
        }
        CertMode::LogRasm => {
            let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
            let mean = shifted.iter().sum::<f64>() / n;
            let var = shifted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            // Delta method for the log of a mean.
            (m + mean.ln(), (var / n).sqrt() / mean)
        }
    };
    Ok(PointwiseReport {
        value,
        estimate,
        std_err,
        samples,
    })
}
