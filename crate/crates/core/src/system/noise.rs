//! Triangular noise on `[-1, 1]^p` and its partition into cells with exact masses.

use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use rand::Rng;
use rand_distr::{Distribution, Triangular};

/// CDF of the triangular density `1 - |x|` on `[-1, 1]`.
pub fn triangular_cdf(x: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x <= 0.0 {
        0.5 * (x + 1.0) * (x + 1.0)
    } else if x < 1.0 {
        1.0 - 0.5 * (1.0 - x) * (1.0 - x)
    } else {
        1.0
    }
}

/// Probability that a triangular variable lands in `[a, b]`.
pub fn triangular_cell_prob(a: f64, b: f64) -> Result<f64> {
    if !(-1.0 <= a && a <= b && b <= 1.0) {
        return Err(Error::Domain(format!(
            "cell [{a}, {b}] is not inside [-1, 1]"
        )));
    }
    Ok(triangular_cdf(b) - triangular_cdf(a))
}

/// I.i.d. triangular noise with a uniform grid partition of its support.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    dim: usize,
    cells_per_axis: usize,
    cells: Vec<(IntervalBox, f64)>,
}

impl NoiseModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    /// Partition cells with their probability masses.
    pub fn cells(&self) -> &[(IntervalBox, f64)] {
        &self.cells
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().map(|(_, p)| p).sum()
    }

    pub fn support(&self) -> IntervalBox {
        IntervalBox::cube(-1.0, 1.0, self.dim).expect("valid cube")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        sample_triangular(self.dim, rng)
    }
}

pub fn sample_triangular<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let tri = Triangular::new(-1.0, 1.0, 0.0).expect("valid triangular parameters");
    (0..dim).map(|_| tri.sample(rng)).collect()
}

/// Uniform axis grid on `[-1, 1]^p`; each cell's mass is the product of per-axis masses.
pub fn make_partition(dim: usize, cells_per_axis: usize) -> Result<NoiseModel> {
    if cells_per_axis == 0 {
        return Err(Error::Domain("need at least one cell per axis".into()));
    }
    if dim == 0 {
        return Err(Error::Domain("noise dimension must be positive".into()));
    }
    let total = cells_per_axis
        .checked_pow(dim as u32)
        .filter(|n| *n <= 10_000_000)
        .ok_or_else(|| Error::Capacity("noise partition too large".into()))?;
    let edges: Vec<f64> = (0..=cells_per_axis)
        .map(|i| {
            if i == cells_per_axis {
                1.0
            } else {
                -1.0 + 2.0 * i as f64 / cells_per_axis as f64
            }
        })
        .collect();
    let axis: Vec<(Interval, f64)> = edges
        .windows(2)
        .map(|e| Ok((Interval::new(e[0], e[1])?, triangular_cell_prob(e[0], e[1])?)))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut dims = Vec::with_capacity(dim);
        let mut mass = 1.0;
        for _ in 0..dim {
            let (iv, p) = axis[rem % cells_per_axis];
            rem /= cells_per_axis;
            dims.push(iv);
            mass *= p;
        }
        cells.push((IntervalBox::new(dims)?, mass));
    }
    Ok(NoiseModel {
        dim,
        cells_per_axis,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cell_probabilities() {
        assert_eq!(triangular_cell_prob(-1.0, 1.0).unwrap(), 1.0);
        assert_eq!(triangular_cell_prob(0.0, 1.0).unwrap(), 0.5);
        assert!((triangular_cell_prob(0.0, 0.5).unwrap() - 0.375).abs() < 1e-12);
        assert!(triangular_cell_prob(-1.5, 0.0).is_err());
        assert!(triangular_cell_prob(0.5, 0.0).is_err());
    }

    #[test]
    fn partitions() {
        let p = make_partition(2, 12).unwrap();
        assert_eq!(p.cells().len(), 144);
        assert!((p.total_mass() - 1.0).abs() < 1e-12);
        let single = make_partition(1, 1).unwrap();
        assert_eq!(single.cells().len(), 1);
        assert_eq!(single.cells()[0].1, 1.0);
        let four = make_partition(2, 2).unwrap();
        for (_, m) in four.cells() {
            assert_eq!(*m, 0.25);
        }
        assert!(make_partition(2, 0).is_err());
    }

    #[test]
    fn partition_cells_tile_support() {
        let p = make_partition(3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let w = p.sample(&mut rng);
            assert!(p.cells().iter().any(|(c, _)| c.contains(&w)));
        }
    }

    #[test]
    fn sampled_mean_and_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let inside = (0..n)
            .filter(|_| {
                let w = sample_triangular(1, &mut rng)[0];
                (0.0..=0.5).contains(&w)
            })
            .count();
        let freq = inside as f64 / n as f64;
        assert!((freq - 0.375).abs() < 0.005);
    }
}
