//! Global Lipschitz bounds in the 1-norm.
//!
//! Three upper bounds are provided, from loosest to tightest:
//!
//! * [`naive_product_bound`]: product of the unweighted operator norms of the layer matrices.
//! * [`optimal_weights`]: product of weighted operator norms, with per-layer weights chosen by a
//!   single backward sweep so that every column of every matrix attains its layer norm.
//! * [`averaged_bound`]: exploits that ReLU is `1/2 (Id + |.|)`; the identity part lets matrix
//!   products move inside the norm. Evaluated with the optimal weights.
//!
//! [`sampled_lipschitz_lower`] gives an empirical lower bound for sanity checks.

use crate::error::{Error, Result};
use crate::interval::IntervalBox;
use crate::nn::{Gradients, Network};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Smallest weight kept in a weight system. Zero columns would otherwise produce zero weights.
pub const MIN_WEIGHT: f64 = 1e-12;

/// `max_j (1 / w_in[j]) * sum_i w_out[i] |M[i][j]|`, the operator norm of `M` from the
/// `w_in`-weighted 1-norm to the `w_out`-weighted 1-norm.
pub fn weighted_matrix_norm(m: ArrayView2<f64>, w_in: &[f64], w_out: &[f64]) -> Result<f64> {
    if m.ncols() != w_in.len() || m.nrows() != w_out.len() {
        return Err(Error::Shape(format!(
            "matrix is {}x{} but weights have lengths {} (in) and {} (out)",
            m.nrows(),
            m.ncols(),
            w_in.len(),
            w_out.len()
        )));
    }
    if w_in.iter().chain(w_out).any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Domain("weights must be positive and finite".into()));
    }
    Ok(weighted_column_sums(m, w_out)
        .iter()
        .zip(w_in)
        .map(|(s, w)| s / w)
        .fold(0.0, f64::max))
}

/// `sum_i w_out[i] |M[i][j]|` for each column `j`.
fn weighted_column_sums(m: ArrayView2<f64>, w_out: &[f64]) -> Vec<f64> {
    m.columns()
        .into_iter()
        .map(|col| col.iter().zip(w_out).map(|(a, w)| w * a.abs()).sum())
        .collect()
}

/// Unweighted operator 1-norm (max absolute column sum).
pub fn matrix_one_norm(m: ArrayView2<f64>) -> f64 {
    m.columns()
        .into_iter()
        .map(|col| col.iter().map(|a| a.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// One positive weight vector per layer `0..=n`, each normalized to maximum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSystem {
    weights: Vec<Vec<f64>>,
}

impl WeightSystem {
    /// Validates positivity, max-normalization and shape against `net`.
    pub fn new(net: &Network, weights: Vec<Vec<f64>>) -> Result<Self> {
        let dims = net.dims();
        if weights.len() != dims.len() || weights.iter().zip(&dims).any(|(w, d)| w.len() != *d) {
            return Err(Error::Shape(format!(
                "weight system shapes do not match network dims {dims:?}"
            )));
        }
        for w in &weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Domain("weights must be positive".into()));
            }
            let max = w.iter().cloned().fold(0.0, f64::max);
            if (max - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("layer weights have maximum {max}, not 1")));
            }
        }
        Ok(Self { weights })
    }

    pub fn unit(net: &Network) -> Self {
        Self {
            weights: net.dims().into_iter().map(|d| vec![1.0; d]).collect(),
        }
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn input_weights(&self) -> &[f64] {
        &self.weights[0]
    }

    pub fn output_weights(&self) -> &[f64] {
        self.weights.last().expect("non-empty weight system")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, net: &Network) -> Result<()> {
        let dims = net.dims();
        if self.weights.len() != dims.len()
            || self.weights.iter().zip(&dims).any(|(w, d)| w.len() != *d)
        {
            return Err(Error::Shape("weight system does not fit network".into()));
        }
        Ok(())
    }
}

/// Product of the layerwise weighted norms for a given weight system.
pub fn weighted_product_bound(net: &Network, ws: &WeightSystem) -> Result<f64> {
    ws.check(net)?;
    net.layers()
        .iter()
        .enumerate()
        .map(|(k, l)| weighted_matrix_norm(l.weights.view(), ws.layer(k), ws.layer(k + 1)))
        .product()
}

#[derive(Debug, Clone)]
pub struct OptimalWeights {
    /// Input weights `w^0`.
    pub input_weights: Vec<f64>,
    /// Lipschitz bound `K = prod_l K_l`.
    pub bound: f64,
    /// Per-layer constants `K_l`.
    pub layer_norms: Vec<f64>,
    pub system: WeightSystem,
}

/// Backward sweep computing the optimal weight system for the given output weights.
///
/// For `l = n..1`: `K_l = max_j sum_i w^l_i |A_l[i][j]|` and
/// `w^{l-1}_j = sum_i w^l_i |A_l[i][j]| / K_l`.
pub fn optimal_weights(net: &Network, output_weights: &[f64]) -> Result<OptimalWeights> {
    if output_weights.len() != net.output_dim() {
        return Err(Error::Shape(format!(
            "expected {} output weights, got {}",
            net.output_dim(),
            output_weights.len()
        )));
    }
    if output_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Domain("output weights must be positive".into()));
    }
    let n = net.layers().len();
    let mut weights = vec![Vec::new(); n + 1];
    weights[n] = output_weights.to_vec();
    let mut layer_norms = vec![0.0; n];
    for l in (0..n).rev() {
        let sums = weighted_column_sums(net.layers()[l].weights.view(), &weights[l + 1]);
        let k = sums.iter().cloned().fold(0.0, f64::max);
        layer_norms[l] = k;
        weights[l] = if k > 0.0 {
            sums.iter().map(|s| (s / k).max(MIN_WEIGHT)).collect()
        } else {
            vec![1.0; sums.len()]
        };
    }
    let bound = layer_norms.iter().product();
    Ok(OptimalWeights {
        input_weights: weights[0].clone(),
        bound,
        layer_norms,
        system: WeightSystem { weights },
    })
}

/// Bound for networks whose activations are 1/2-averaged:
///
/// `2^{1-n} * sum over subsets S of {1..n-1} of prod ||A_{k_l} ... A_{k_{l-1}+1}||_W`
///
/// where the split points of each subset cut the layer chain into consecutive blocks. Both
/// ReLU (`1/2 Id + 1/2 |.|`) and the identity are 1/2-averaged.
pub fn averaged_bound(net: &Network, ws: &WeightSystem) -> Result<f64> {
    ws.check(net)?;
    let n = net.layers().len();
    if n > 24 {
        return Err(Error::Capacity(format!(
            "averaged bound enumerates 2^{} subsets",
            n - 1
        )));
    }
    // norms[i][j] = || A_j ... A_{i+1} ||_W^{i,j} for 0 <= i < j <= n.
    let mut norms = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        let mut product: Array2<f64> = net.layers()[i].weights.clone();
        norms[i][i + 1] = weighted_matrix_norm(product.view(), ws.layer(i), ws.layer(i + 1))?;
        for j in i + 2..=n {
            product = net.layers()[j - 1].weights.dot(&product);
            norms[i][j] = weighted_matrix_norm(product.view(), ws.layer(i), ws.layer(j))?;
        }
    }
    let mut total = 0.0;
    for mask in 0u32..(1u32 << (n - 1)) {
        let mut term = 1.0;
        let mut start = 0;
        for k in 1..n {
            if mask & (1 << (k - 1)) != 0 {
                term *= norms[start][k];
                start = k;
            }
        }
        term *= norms[start][n];
        total += term;
    }
    Ok(total / f64::powi(2.0, n as i32 - 1))
}

/// Product of unweighted layer norms.
pub fn naive_product_bound(net: &Network) -> f64 {
    net.layers()
        .iter()
        .map(|l| matrix_one_norm(l.weights.view()))
        .product()
}

/// [`naive_product_bound`] together with a subgradient with respect to the weights.
///
/// Each layer norm is a max over column sums, so its subgradient is `sign(A[i][j*])` on the
/// maximizing column `j*` (the first one on ties).
pub fn naive_product_bound_with_grad(net: &Network) -> (f64, Gradients) {
    let layers = net.layers();
    let mut norms = Vec::with_capacity(layers.len());
    let mut argmax = Vec::with_capacity(layers.len());
    for l in layers {
        let (j, s) = l
            .weights
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|a| a.abs()).sum::<f64>())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, s)| if s > best.1 { (j, s) } else { best });
        norms.push(s.max(0.0));
        argmax.push(j);
    }
    let bound: f64 = norms.iter().product();
    let mut grads = Gradients::zeros_like(net);
    for (k, l) in layers.iter().enumerate() {
        let others: f64 = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, v)| v)
            .product();
        let j = argmax[k];
        for i in 0..l.weights.nrows() {
            let a = l.weights[[i, j]];
            grads.layers[k].weights[[i, j]] = others * sign(a);
        }
    }
    (bound, grads)
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Empirical lower bound `max ||T(x) - T(x')||_1 / ||x - x'||_1` over sampled pairs in `domain`.
///
/// Half of the pairs are independent uniform draws; the other half are short steps from a
/// uniform point, which probe local slopes.
pub fn sampled_lipschitz_lower<R: Rng + ?Sized>(
    net: &Network,
    domain: &IntervalBox,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    net.check_input(domain.dim())?;
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    if domain.intervals().iter().all(|i| i.width() == 0.0) {
        return Err(Error::Domain("domain has no extent".into()));
    }
    let widths: Vec<f64> = domain.intervals().iter().map(|i| i.width()).collect();
    let mut best: f64 = 0.0;
    for t in 0..trials {
        let x = domain.sample(rng);
        let x2 = if t % 2 == 0 {
            domain.sample(rng)
        } else {
            let mut y: Vec<f64> = x
                .iter()
                .zip(&widths)
                .map(|(v, w)| v + w * 1e-3 * rng.random_range(-1.0..=1.0))
                .collect();
            domain.clamp(&mut y);
            y
        };
        let dx: f64 = x.iter().zip(&x2).map(|(a, b)| (a - b).abs()).sum();
        if dx == 0.0 {
            continue;
        }
        let fx = net.forward(&x)?;
        let fx2 = net.forward(&x2)?;
        let dy: f64 = fx.iter().zip(&fx2).map(|(a, b)| (a - b).abs()).sum();
        best = best.max(dy / dx);
    }
    Ok(best)
}

/// Lipschitz constant of `x -> V(f(x, pi(x), w))` for fixed noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLipschitz {
    /// `L_V (L_fx + L_fu L_pi)`.
    pub split: f64,
    /// `L_V L_f (L_pi + 1)` with `L_f = max(L_fx, L_fu)`.
    pub naive: f64,
}

pub fn certificate_k(l_v: f64, l_pi: f64, l_fx: f64, l_fu: f64) -> Result<StepLipschitz> {
    if [l_v, l_pi, l_fx, l_fu].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(
            "Lipschitz constants must be finite and nonnegative".into(),
        ));
    }
    Ok(StepLipschitz {
        split: l_v * (l_fx + l_fu * l_pi),
        naive: l_v * l_fx.max(l_fu) * (l_pi + 1.0),
    })
}

/// All bounds for one network, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub naive_product: f64,
    pub weighted: f64,
    pub weighted_averaged: f64,
    pub sampled_lower: f64,
    pub input_weights: Vec<f64>,
    pub runtime_ms: f64,
}

impl LipschitzReport {
    pub const CSV_HEADER: &'static str =
        "net_id,naive,weighted,weighted_averaged,sampled_lower,runtime_ms";

    pub fn compute<R: Rng + ?Sized>(
        net: &Network,
        domain: &IntervalBox,
        trials: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let start = Instant::now();
        let naive_product = naive_product_bound(net);
        let opt = optimal_weights(net, &vec![1.0; net.output_dim()])?;
        let weighted_averaged = averaged_bound(net, &opt.system)?;
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let sampled_lower = sampled_lipschitz_lower(net, domain, trials, rng)?;
        Ok(Self {
            naive_product,
            weighted: opt.bound,
            weighted_averaged,
            sampled_lower,
            input_weights: opt.input_weights,
            runtime_ms,
        })
    }

    pub fn csv_row(&self, net_id: &str) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            net_id,
            self.naive_product,
            self.weighted,
            self.weighted_averaged,
            self.sampled_lower,
            self.runtime_ms
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_net() -> Network {
        Network::new(vec![
            Layer::new(array![[4.0, -1.0], [-1.0, 1.0]], array![0.0, 0.0], Activation::Relu)
                .unwrap(),
            Layer::new(array![[1.0, 2.0]], array![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn example_matrix_norms() {
        let a1 = array![[4.0, -1.0], [-1.0, 1.0]];
        let a2 = array![[1.0, 2.0]];
        assert_eq!(weighted_matrix_norm(a1.view(), &[1.0, 0.5], &[0.5, 1.0]).unwrap(), 3.0);
        assert_eq!(weighted_matrix_norm(a2.view(), &[0.5, 1.0], &[1.0]).unwrap(), 2.0);
        let eye = Array2::<f64>::eye(3);
        assert_eq!(weighted_matrix_norm(eye.view(), &[1.0; 3], &[1.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn nonpositive_weight_is_domain_error() {
        let a = array![[1.0]];
        assert!(matches!(
            weighted_matrix_norm(a.view(), &[0.0], &[1.0]),
            Err(Error::Domain(_))
        ));
        assert!(weighted_matrix_norm(a.view(), &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn example_optimal_weights() {
        let opt = optimal_weights(&example_net(), &[1.0]).unwrap();
        assert_eq!(opt.bound, 6.0);
        assert_eq!(opt.input_weights, vec![1.0, 0.5]);
        assert_eq!(opt.system.layer(1), &[0.5, 1.0]);
        assert_eq!(naive_product_bound(&example_net()), 10.0);
    }

    #[test]
    fn example_averaged_bounds() {
        let net = example_net();
        let opt = optimal_weights(&net, &[1.0]).unwrap();
        assert_eq!(averaged_bound(&net, &opt.system).unwrap(), 4.0);
        assert_eq!(averaged_bound(&net, &WeightSystem::unit(&net)).unwrap(), 6.0);
    }

    #[test]
    fn single_layer_cases() {
        let eye = Network::new(vec![Layer::new(
            Array2::eye(3),
            ndarray::Array1::zeros(3),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let opt = optimal_weights(&eye, &[1.0; 3]).unwrap();
        assert_eq!(opt.bound, 1.0);
        assert_eq!(opt.input_weights, vec![1.0; 3]);
        assert_eq!(naive_product_bound(&eye), 1.0);
        // With one layer the subset sum has only the empty tuple.
        assert_eq!(
            averaged_bound(&eye, &opt.system).unwrap(),
            weighted_product_bound(&eye, &opt.system).unwrap()
        );
    }

    #[test]
    fn zero_columns_keep_positive_weights() {
        let net = Network::new(vec![
            Layer::new(array![[1.0, 0.0], [2.0, 0.0]], array![0.0, 0.0], Activation::Relu)
                .unwrap(),
            Layer::new(array![[1.0, 1.0]], array![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap();
        let opt = optimal_weights(&net, &[1.0]).unwrap();
        assert_eq!(opt.input_weights, vec![1.0, MIN_WEIGHT]);
        assert!(WeightSystem::new(&net, vec![opt.input_weights.clone(), vec![1.0, 1.0], vec![1.0]]).is_ok());

        let zero = Network::new(vec![Layer::new(
            Array2::zeros((1, 2)),
            array![0.5],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(optimal_weights(&zero, &[1.0]).unwrap().bound, 0.0);
    }

    #[test]
    fn weight_system_validation() {
        let net = example_net();
        assert!(WeightSystem::new(&net, vec![vec![1.0, 0.5], vec![0.5, 1.0], vec![1.0]]).is_ok());
        assert!(WeightSystem::new(&net, vec![vec![1.0, 0.0], vec![0.5, 1.0], vec![1.0]]).is_err());
        assert!(WeightSystem::new(&net, vec![vec![0.9, 0.5], vec![0.5, 1.0], vec![1.0]]).is_err());
        assert!(WeightSystem::new(&net, vec![vec![1.0], vec![0.5, 1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn affine_sampled_lower_is_exact() {
        let net = Network::new(vec![Layer::new(array![[2.0]], array![0.3], Activation::Identity)
            .unwrap()])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dom = IntervalBox::cube(-1.0, 1.0, 1).unwrap();
        let l = sampled_lipschitz_lower(&net, &dom, 100, &mut rng).unwrap();
        assert!((l - 2.0).abs() < 1e-9);

        let constant = Network::new(vec![Layer::new(
            Array2::zeros((1, 2)),
            array![1.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let dom2 = IntervalBox::cube(-1.0, 1.0, 2).unwrap();
        assert_eq!(sampled_lipschitz_lower(&constant, &dom2, 50, &mut rng).unwrap(), 0.0);
        let flat = IntervalBox::cube(0.0, 0.0, 2).unwrap();
        assert!(sampled_lipschitz_lower(&constant, &flat, 5, &mut rng).is_err());
        assert!(sampled_lipschitz_lower(&constant, &dom2, 0, &mut rng).is_err());
    }

    #[test]
    fn certificate_k_values() {
        let k = certificate_k(2.0, 10.0, 1.0, 0.95).unwrap();
        assert!((k.split - 21.0).abs() < 1e-12);
        assert!((k.naive - 22.0).abs() < 1e-12);
        assert_eq!(certificate_k(0.0, 3.0, 1.0, 1.0).unwrap().split, 0.0);
        assert!(certificate_k(-1.0, 3.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn product_bound_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::random(&[3, 5, 4, 2], &mut rng);
        let (b, g) = naive_product_bound_with_grad(&net);
        assert_eq!(b, naive_product_bound(&net));
        let h = 1e-7;
        for k in 0..net.layers().len() {
            let (rows, cols) = net.layers()[k].weights.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut layers = net.layers().to_vec();
                    layers[k].weights[[i, j]] += h;
                    let up = naive_product_bound(&Network::new(layers.clone()).unwrap());
                    layers[k].weights[[i, j]] -= 2.0 * h;
                    let down = naive_product_bound(&Network::new(layers).unwrap());
                    let fd = (up - down) / (2.0 * h);
                    assert!((fd - g.layers[k].weights[[i, j]]).abs() < 1e-4 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn report_csv_row() {
        let net = example_net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dom = IntervalBox::cube(-1.0, 1.0, 2).unwrap();
        let r = LipschitzReport::compute(&net, &dom, 200, &mut rng).unwrap();
        assert_eq!((r.naive_product, r.weighted, r.weighted_averaged), (10.0, 6.0, 4.0));
        assert!(r.sampled_lower <= 4.0 + 1e-9);
        assert!(r.csv_row("ex").starts_with("ex,10,6,4,"));
    }
}
