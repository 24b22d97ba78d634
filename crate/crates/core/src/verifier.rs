//! Grid-based verification with local refinement.

use crate::bounds::{certificate_k, LipschitzMethod};
use crate::certificate::{
    cell_box, CellCheck, CellChecker, Condition, PointData, Spec, Status, VerdictRecord,
};
use crate::error::{Error, Result};
use crate::interval::IntervalBox;
use crate::nn::Network;
use crate::system::{Dtss, NoiseModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

/// A discretization point with its own mesh. The cell is `{x' : |x - x'|_inf <= tau / d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub center: Vec<f64>,
    pub tau: f64,
    pub generation: u32,
}

impl GridCell {
    pub fn cell(&self) -> IntervalBox {
        cell_box(&self.center, self.tau)
    }
}

/// Uniform grid of cells with mesh `tau0` covering `space`. Centers sit at
/// `lo + r + 2 r i` with `r = tau0 / d`; the last center on each axis is pulled back to
/// `hi - r` so that no cell sticks out of the space.
pub fn initial_grid(space: &IntervalBox, tau0: f64, max_cells: usize) -> Result<Vec<GridCell>> {
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(Error::Domain(format!("initial mesh must be positive, got {tau0}")));
    }
    let d = space.dim();
    let r = tau0 / d as f64;
    let mut axes = Vec::with_capacity(d);
    let mut total: usize = 1;
    for iv in space.intervals() {
        let w = iv.width();
        let count = ((w / (2.0 * r)) - 1e-9).ceil().max(1.0);
        if count > max_cells as f64 {
            return Err(Error::Capacity(format!(
                "mesh {tau0} needs more than {max_cells} cells"
            )));
        }
        let count = count as usize;
        let mut centers: Vec<f64> = (0..count)
            .map(|i| {
                if w <= 2.0 * r {
                    iv.mid()
                } else {
                    (iv.lo + r + 2.0 * r * i as f64).min(iv.hi - r)
                }
            })
            .collect();
        centers.dedup();
        total = total
            .checked_mul(centers.len())
            .filter(|t| *t <= max_cells)
            .ok_or_else(|| {
                Error::Capacity(format!("mesh {tau0} needs more than {max_cells} cells"))
            })?;
        axes.push(centers);
    }
    let mut cells = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        cells.push(GridCell {
            center: idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect(),
            tau: tau0,
            generation: 0,
        });
        // Last axis varies fastest.
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    Ok(cells)
}

/// Splits a cell into `k^d` children with mesh `tau / k`, `k = ceil(tau / new_mesh)`.
pub fn refine_cell(cell: &GridCell, new_mesh: f64) -> Result<Vec<GridCell>> {
    if !(new_mesh > 0.0 && new_mesh < cell.tau) {
        return Err(Error::Domain(format!(
            "new mesh {new_mesh} must lie in (0, {})",
            cell.tau
        )));
    }
    let k = ((cell.tau / new_mesh) - 1e-9).ceil().max(2.0) as usize;
    Ok(split(cell, k))
}

fn split(cell: &GridCell, k: usize) -> Vec<GridCell> {
    let d = cell.center.len();
    let r = cell.tau / d as f64;
    let child_r = r / k as f64;
    let offsets: Vec<f64> = (0..k).map(|i| -r + child_r * (2 * i + 1) as f64).collect();
    let total = k.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut center = cell.center.clone();
        for c in center.iter_mut().rev() {
            *c += offsets[rem % k];
            rem /= k;
        }
        out.push(GridCell {
            center,
            tau: cell.tau / k as f64,
            generation: cell.generation + 1,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub initial_mesh: f64,
    /// Maximum number of subdivisions per axis in one refinement.
    pub refine_factor: f64,
    pub tau_min: f64,
    /// Upper bound on the total number of cells checked in one call.
    pub max_cells: usize,
    pub batch_size: usize,
    pub max_rounds: u32,
    /// Wall-clock budget in seconds.
    pub time_budget: Option<f64>,
    pub lipschitz: LipschitzMethod,
    /// Use `L_V (L_fx + L_fu L_pi)` instead of `L_V L_f (L_pi + 1)`.
    pub split_lipschitz: bool,
    /// Upper bound on counterexamples returned per condition.
    pub max_counterexamples: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            initial_mesh: 0.01,
            refine_factor: 10.0,
            tau_min: 1e-7,
            max_cells: 50_000_000,
            batch_size: 4096,
            max_rounds: 20,
            time_budget: None,
            lipschitz: LipschitzMethod::WeightedAveraged,
            split_lipschitz: true,
            max_counterexamples: 30_000,
        }
    }
}

impl VerifierConfig {
    pub fn for_system(sys: &Dtss) -> Self {
        Self {
            initial_mesh: sys.defaults.verify_mesh,
            refine_factor: sys.defaults.refine_factor,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.initial_mesh > 0.0) || !(self.tau_min > 0.0) {
            return Err(Error::Config("meshes must be positive".into()));
        }
        if !(self.refine_factor >= 2.0) {
            return Err(Error::Config("refine factor must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Verified,
    Counterexamples,
    Exhausted,
}

/// Violating points grouped by condition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Counterexamples {
    pub init: Vec<Vec<f64>>,
    pub unsafe_set: Vec<Vec<f64>>,
    pub decrease: Vec<Vec<f64>>,
    pub nonnegative: Vec<Vec<f64>>,
}

impl Counterexamples {
    pub fn len(&self) -> usize {
        self.init.len() + self.unsafe_set.len() + self.decrease.len() + self.nonnegative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&mut self, c: Condition) -> &mut Vec<Vec<f64>> {
        match c {
            Condition::Init => &mut self.init,
            Condition::Unsafe => &mut self.unsafe_set,
            Condition::Decrease => &mut self.decrease,
            Condition::NonNegative => &mut self.nonnegative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifierStats {
    pub cells_checked: usize,
    pub refinements: usize,
    pub rounds: u32,
    pub max_generation: u32,
    pub hard_violations: usize,
    pub soft_violations: usize,
    pub min_mesh: f64,
    pub l_v: f64,
    pub l_pi: f64,
    pub k: f64,
    pub elapsed_ms: f64,
    pub exhausted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierOutcome {
    pub verdict: Verdict,
    pub counterexamples: Counterexamples,
    pub stats: VerifierStats,
    /// Violating cells of the last round that was checked.
    pub records: Vec<VerdictRecord>,
}

impl VerifierOutcome {
    pub fn is_verified(&self) -> bool {
        self.verdict == Verdict::Verified
    }

    /// Writes one JSON object per violation.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            writeln!(f, "{}", r.to_jsonl()?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            verdict: Verdict,
            counterexamples: BTreeMap<&'static str, usize>,
            stats: &'a VerifierStats,
        }
        let mut counts = BTreeMap::new();
        counts.insert("init", self.counterexamples.init.len());
        counts.insert("unsafe", self.counterexamples.unsafe_set.len());
        counts.insert("decrease", self.counterexamples.decrease.len());
        counts.insert("nonnegative", self.counterexamples.nonnegative.len());
        Ok(serde_json::to_string_pretty(&Summary {
            verdict: self.verdict,
            counterexamples: counts,
            stats: &self.stats,
        })?)
    }
}

/// Cells checked in parallel per work unit.
const CHUNK: usize = 64;

fn check_batch(checker: &CellChecker<'_>, cells: &[GridCell]) -> Result<Vec<CellCheck>> {
    let chunks: Vec<Result<Vec<CellCheck>>> = cells
        .par_chunks(CHUNK)
        .map(|chunk| {
            let boxes: Vec<IntervalBox> = chunk.iter().map(GridCell::cell).collect();
            let bounds = checker.batch_bounds(&boxes)?;
            chunk
                .iter()
                .zip(&boxes)
                .zip(bounds)
                .map(|((c, b), bd)| {
                    let needs = checker.decrease_applies(b) && bd.lo < checker.spec.threshold;
                    let point: PointData = checker.point_data(&c.center, needs)?;
                    checker.check_with(&c.center, c.tau, b, bd, &point)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(cells.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Per-axis split count for a softly violating cell: the finest mesh asked for by any
/// violation (`tau / C`, or the suggested mesh for a decrease violation), capped at `C` and
/// at least 2.
pub fn child_factor(cell: &GridCell, check: &CellCheck, refine_factor: f64) -> usize {
    let c = refine_factor;
    let mut target = cell.tau;
    for v in check.violations() {
        let mesh = match (v.condition, v.lambda) {
            (Condition::Decrease, Some(l)) => (cell.tau / c).max(l),
            _ => cell.tau / c,
        };
        target = target.min(mesh);
    }
    let k = ((cell.tau / target) - 1e-9).ceil().min(c.floor());
    (k as usize).max(2)
}

/// Children of a softly violating cell, as the verifier would create them.
pub fn refine_violating(cell: &GridCell, check: &CellCheck, refine_factor: f64) -> Vec<GridCell> {
    split(cell, child_factor(cell, check, refine_factor))
}

/// Checks the discrete certificate conditions on a grid over the state space, refining cells
/// with soft violations until everything holds, a hard violation appears, or a limit is hit.
pub fn verify(
    v: &Network,
    policy: &Network,
    sys: &Dtss,
    noise: &NoiseModel,
    spec: Spec,
    cfg: &VerifierConfig,
) -> Result<VerifierOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let deadline = cfg.time_budget.map(|s| start + Duration::from_secs_f64(s.max(0.0)));
    let l_v = cfg.lipschitz.bound(v)?;
    let l_pi = cfg.lipschitz.bound(policy)?;
    let ks = certificate_k(l_v, l_pi, sys.lipschitz_x, sys.lipschitz_u)?;
    let k = if cfg.split_lipschitz { ks.split } else { ks.naive };
    let checker = CellChecker::new(v, policy, sys, noise, spec, k)?;

    let mut stats = VerifierStats {
        l_v,
        l_pi,
        k,
        min_mesh: cfg.initial_mesh,
        ..Default::default()
    };
    let mut current = initial_grid(&sys.state_space, cfg.initial_mesh, cfg.max_cells)?;
    let mut cex = Counterexamples::default();
    let mut records = Vec::new();
    let mut exhausted: Option<String> = None;
    let mut hard_found = false;

    loop {
        stats.rounds += 1;
        records.clear();
        let mut next: Vec<GridCell> = Vec::new();
        let mut pending = 0usize;
        for batch in current.chunks(cfg.batch_size) {
            let checks = check_batch(&checker, batch)?;
            stats.cells_checked += batch.len();
            for (cell, check) in batch.iter().zip(&checks) {
                if check.status() == Status::Satisfied {
                    continue;
                }
                for viol in check.violations() {
                    records.push(VerdictRecord::new(&cell.center, cell.tau, viol));
                    let slot = cex.slot(viol.condition);
                    if slot.len() < cfg.max_counterexamples {
                        slot.push(cell.center.clone());
                    }
                    match viol.status {
                        Status::HardViolation => stats.hard_violations += 1,
                        _ => stats.soft_violations += 1,
                    }
                }
                if check.status() == Status::HardViolation {
                    hard_found = true;
                    continue;
                }
                pending += 1;
                if hard_found || exhausted.is_some() {
                    continue;
                }
                let k = child_factor(cell, check, cfg.refine_factor);
                let child_tau = cell.tau / k as f64;
                if child_tau < cfg.tau_min {
                    exhausted = Some(format!("mesh floor {} reached", cfg.tau_min));
                    continue;
                }
                let added = k.pow(cell.center.len() as u32);
                if stats.cells_checked + next.len() + added > cfg.max_cells {
                    exhausted = Some(format!("cell cap {} reached", cfg.max_cells));
                    continue;
                }
                stats.refinements += 1;
                stats.min_mesh = stats.min_mesh.min(child_tau);
                stats.max_generation = stats.max_generation.max(cell.generation + 1);
                next.extend(split(cell, k));
            }
            if hard_found {
                break;
            }
            if let Some(dl) = deadline {
                if Instant::now() >= dl {
                    exhausted.get_or_insert_with(|| "time budget spent".into());
                    break;
                }
            }
        }
        let verdict = if hard_found {
            Some(Verdict::Counterexamples)
        } else if exhausted.is_some() {
            Some(Verdict::Exhausted)
        } else if pending == 0 {
            Some(Verdict::Verified)
        } else if stats.rounds >= cfg.max_rounds {
            exhausted = Some(format!("{} refinement rounds used", cfg.max_rounds));
            Some(Verdict::Exhausted)
        } else {
            None
        };
        if let Some(verdict) = verdict {
            stats.exhausted = exhausted;
            stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            if verdict == Verdict::Verified {
                cex = Counterexamples::default();
            }
            return Ok(VerifierOutcome {
                verdict,
                counterexamples: cex,
                stats,
                records,
            });
        }
        current = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_interval_grid() {
        let g = initial_grid(&IntervalBox::cube(0.0, 1.0, 1).unwrap(), 0.25, 100).unwrap();
        let c: Vec<f64> = g.iter().map(|c| c.center[0]).collect();
        assert_eq!(c, vec![0.25, 0.75]);
    }

    #[test]
    fn linear_sys_grid_size() {
        let g = initial_grid(&IntervalBox::cube(-1.5, 1.5, 2).unwrap(), 0.01, 1_000_000).unwrap();
        assert_eq!(g.len(), 90_000);
        assert!(initial_grid(&IntervalBox::cube(-1.5, 1.5, 2).unwrap(), 0.01, 1000).is_err());
    }

    #[test]
    fn refinement_geometry() {
        let parent = GridCell {
            center: vec![0.3],
            tau: 0.1,
            generation: 0,
        };
        let kids = refine_cell(&parent, 0.05).unwrap();
        assert_eq!(kids.len(), 2);
        assert!((kids[0].center[0] - 0.25).abs() < 1e-12);
        assert!((kids[1].center[0] - 0.35).abs() < 1e-12);
        assert!(kids.iter().all(|k| (k.tau - 0.05).abs() < 1e-15 && k.generation == 1));
        let p2 = GridCell {
            center: vec![0.0, 0.0],
            tau: 0.3,
            generation: 2,
        };
        assert_eq!(refine_cell(&p2, 0.1).unwrap().len(), 9);
        assert!(refine_cell(&p2, 0.3).is_err());
    }
}
