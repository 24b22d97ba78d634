#![allow(dead_code)]

use lograsm::interval::IntervalBox;
use lograsm::nn::{Activation, Layer, Network};
use ndarray::{Array1, Array2};
use rand::Rng;

/// ReLU network with the given widths, random weights in `[-scale, scale]` and random biases.
pub fn random_net<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Network {
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|k| {
            let w = Array2::from_shape_fn((dims[k + 1], dims[k]), |_| rng.random_range(-scale..=scale));
            let b = Array1::from_shape_fn(dims[k + 1], |_| rng.random_range(-0.5..=0.5));
            let act = if k + 1 == n { Activation::Identity } else { Activation::Relu };
            Layer::new(w, b, act).unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

/// Widths for a net with `layers` weight layers, hidden widths in `1..=max_width`.
pub fn random_dims<R: Rng + ?Sized>(layers: usize, input: usize, output: usize, max_width: usize, rng: &mut R) -> Vec<usize> {
    let mut dims = vec![input];
    for _ in 1..layers {
        dims.push(rng.random_range(1..=max_width));
    }
    dims.push(output);
    dims
}

/// Random box inside `[-2, 2]^d`.
pub fn random_box<R: Rng + ?Sized>(d: usize, rng: &mut R) -> IntervalBox {
    let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..1.5)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..0.5)).collect();
    IntervalBox::from_bounds(&lo, &hi).unwrap()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
