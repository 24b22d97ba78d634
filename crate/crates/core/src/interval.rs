//! Closed intervals and axis-aligned boxes.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Domain(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Product of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    dims: Vec<Interval>,
}

impl IntervalBox {
    pub fn new(dims: Vec<Interval>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Domain("a box needs at least one dimension".into()));
        }
        Ok(Self { dims })
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("lower and upper bounds differ in length".into()));
        }
        Self::new(
            lo.iter()
                .zip(hi)
                .map(|(&l, &h)| Interval::new(l, h))
                .collect::<Result<_>>()?,
        )
    }

    /// Same interval on every axis.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self> {
        Self::new(vec![Interval::new(lo, hi)?; dim])
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            dims: x.iter().map(|&v| Interval::point(v)).collect(),
        }
    }

    /// `{x' : |x - x'|_inf <= radius}`.
    pub fn around(center: &[f64], radius: f64) -> Self {
        Self {
            dims: center
                .iter()
                .map(|&c| Interval {
                    lo: c - radius,
                    hi: c + radius,
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.dims
    }

    pub fn lower(&self) -> Vec<f64> {
        self.dims.iter().map(|i| i.lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.dims.iter().map(|i| i.hi).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.dims.iter().map(Interval::mid).collect()
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().map(Interval::width).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.dims.iter().zip(x).all(|(i, &v)| i.contains(v))
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .all(|(a, b)| a.contains_interval(b))
    }

    /// Closed-set intersection test.
    pub fn intersects(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .all(|(a, b)| a.intersects(b))
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (v, i) in x.iter_mut().zip(&self.dims) {
            *v = v.clamp(i.lo, i.hi);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dims
            .iter()
            .map(|i| {
                if i.lo == i.hi {
                    i.lo
                } else {
                    rng.random_range(i.lo..=i.hi)
                }
            })
            .collect()
    }
}
