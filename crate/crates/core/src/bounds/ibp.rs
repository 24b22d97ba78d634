//! Interval bound propagation in midpoint/radius form.

use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use crate::nn::{Activation, Network};
use ndarray::{Array2, ArrayView2, Zip};

/// Sound enclosure of `net` over `input`: for every `x` in the box, every output
/// coordinate of `net.forward(x)` lies in the returned interval.
pub fn ibp_forward(net: &Network, input: &IntervalBox) -> Result<Vec<Interval>> {
    net.check_input(input.dim())?;
    let mut mid = input.center();
    let mut rad: Vec<f64> = input
        .intervals()
        .iter()
        .zip(&mid)
        .map(|(i, m)| (i.hi - m).max(m - i.lo))
        .collect();
    // A degenerate box keeps the same arithmetic as `Network::forward`.
    for (i, iv) in input.intervals().iter().enumerate() {
        if iv.lo == iv.hi {
            mid[i] = iv.lo;
            rad[i] = 0.0;
        }
    }
    let mut out = Vec::new();
    for layer in net.layers() {
        let mut lo = Vec::with_capacity(layer.output_dim());
        let mut hi = Vec::with_capacity(layer.output_dim());
        for (row, b) in layer.weights.outer_iter().zip(layer.bias.iter()) {
            let m = row.iter().zip(&mid).map(|(a, v)| a * v).sum::<f64>() + b;
            let r = row.iter().zip(&rad).map(|(a, v)| a.abs() * v).sum::<f64>();
            let (l, h) = if r == 0.0 { (m, m) } else { (m - r, m + r) };
            match layer.activation {
                Activation::Relu => {
                    lo.push(l.max(0.0));
                    hi.push(h.max(0.0));
                }
                Activation::Identity => {
                    lo.push(l);
                    hi.push(h);
                }
            }
        }
        mid = lo.iter().zip(&hi).map(|(l, h)| if l == h { *l } else { 0.5 * (l + h) }).collect();
        rad = lo
            .iter()
            .zip(&hi)
            .zip(&mid)
            .map(|((l, h), m)| if l == h { 0.0 } else { (h - m).max(m - l) })
            .collect();
        out = lo
            .into_iter()
            .zip(hi)
            .map(|(lo, hi)| Interval { lo, hi })
            .collect();
    }
    Ok(out)
}

/// A network prepared for batched interval propagation (absolute weights cached).
#[derive(Debug, Clone)]
pub struct IntervalNetwork<'a> {
    net: &'a Network,
    abs_weights: Vec<Array2<f64>>,
}

impl<'a> IntervalNetwork<'a> {
    pub fn new(net: &'a Network) -> Self {
        Self {
            net,
            abs_weights: net
                .layers()
                .iter()
                .map(|l| l.weights.mapv(f64::abs))
                .collect(),
        }
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    /// Propagates a batch of boxes given as row-wise lower and upper bounds.
    pub fn bounds(
        &self,
        lower: ArrayView2<f64>,
        upper: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.net.check_input(lower.ncols())?;
        if lower.dim() != upper.dim() {
            return Err(Error::Shape("lower/upper batch shapes differ".into()));
        }
        let mut mid = (&lower + &upper) * 0.5;
        let mut rad = &upper - &mid;
        let mut lo = lower.to_owned();
        let mut hi = upper.to_owned();
        for (layer, abs) in self.net.layers().iter().zip(&self.abs_weights) {
            let mut m = mid.dot(&layer.weights.t());
            m += &layer.bias;
            let r = rad.dot(&abs.t());
            lo = &m - &r;
            hi = &m + &r;
            if layer.activation == Activation::Relu {
                lo.mapv_inplace(|v| v.max(0.0));
                hi.mapv_inplace(|v| v.max(0.0));
            }
            mid = (&lo + &hi) * 0.5;
            rad = &hi - &mid;
            Zip::from(&mut rad).for_each(|r| *r = r.max(0.0));
        }
        Ok((lo, hi))
    }

    /// Upper bounds only, for a scalar network.
    pub fn upper_scalar(
        &self,
        lower: ArrayView2<f64>,
        upper: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        let (_, hi) = self.bounds(lower, upper)?;
        Ok(hi.column(0).to_vec())
    }
}
