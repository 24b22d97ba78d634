//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! A [`Network`] is a chain of affine layers `x_k = R_k(A_k x_{k-1} + b_k)`. The same type
//! stores both the policy and the certificate. Single-sample evaluation uses plain loops so
//! that its rounding is fixed; the batched paths go through `ndarray` matrix products.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Current version of the JSON model format.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "id")]
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative with the subgradient at 0 fixed to 0 for ReLU.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an activation. `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "layer has {} rows but bias of length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network after checking that the layer shapes chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    k + 1,
                    pair[0].output_dim(),
                    k + 2,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialization with zero biases, ReLU hidden layers and an identity
    /// output layer. `dims` lists `m_0, ..., m_n`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dimension");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                let activation = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the last layer, used to shift certificate outputs.
    pub fn output_layer_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("non-empty network")
    }

    /// `m_0, ..., m_n`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                len
            )));
        }
        Ok(())
    }

    /// Evaluates the network at a single point.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut current = x.to_vec();
        for layer in &self.layers {
            current = affine_point(layer, &current)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(current)
    }

    /// Scalar output of a single-output network.
    pub fn eval_scalar(&self, x: &[f64]) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar network, output dimension is {}",
                self.output_dim()
            )));
        }
        Ok(self.forward(x)?[0])
    }

    /// Evaluates a batch; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            current = z;
        }
        Ok(current)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(current);
            pre.push(z);
            current = out;
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: current,
        })
    }

    /// Reverse accumulation over a batch. Returns parameter gradients summed over the batch
    /// and the gradient with respect to every input row.
    pub fn backward_batch(
        &self,
        trace: &ForwardTrace,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if upstream.dim() != trace.output.dim() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match output shape {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            Zip::from(&mut delta)
                .and(&trace.pre[k])
                .for_each(|d, &z| *d *= act.derivative(z));
            let weights = delta.t().dot(&trace.inputs[k]);
            let bias = delta.sum_axis(Axis(0));
            grads.push(LayerGrad { weights, bias });
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Gradient of `upstream · T(x)` with respect to all parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        self.check_input(x.len())?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream has length {}, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row shape");
        let trace = self.forward_trace(x.view())?;
        Ok(self.backward_batch(&trace, up.view())?.0)
    }

    /// Applies `params -= step` layer by layer.
    pub(crate) fn apply_update(&mut self, step: &Gradients) {
        for (layer, g) in self.layers.iter_mut().zip(&step.layers) {
            layer.weights -= &g.weights;
            layer.bias -= &g.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn affine_point(layer: &Layer, x: &[f64]) -> Vec<f64> {
    layer
        .weights
        .outer_iter()
        .zip(layer.bias.iter())
        .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
        .collect()
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of each layer (rows are samples).
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients, shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.raw_dim() == l.weights.raw_dim() && g.bias.len() == l.bias.len()
            })
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights *= factor;
            g.bias *= factor;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()))
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    steps: u64,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        Self {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.matches(net) || !self.first.matches(net) {
            return Err(Error::Shape(
                "gradient or optimizer state does not match network".into(),
            ));
        }
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut update = grads.clone();
        for (((m, v), g), u) in self
            .first
            .layers
            .iter_mut()
            .zip(self.second.layers.iter_mut())
            .zip(&grads.layers)
            .zip(update.layers.iter_mut())
        {
            let moment = |m: &mut f64, v: &mut f64, g: f64, u: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *u = learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            };
            Zip::from(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .and(&mut u.weights)
                .for_each(|m, v, &g, u| moment(m, v, g, u));
            Zip::from(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .and(&mut u.bias)
                .for_each(|m, v, &g, u| moment(m, v, g, u));
        }
        net.apply_update(&update);
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(net, grads)
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "A")]
    weights: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default = "default_version")]
    version: u32,
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        Self {
            version: FORMAT_VERSION,
            dims: net.dims(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.outer_iter().map(|r| r.to_vec()).collect(),
                    b: l.bias.to_vec(),
                    act: l.activation,
                })
                .collect(),
        }
    }
}

impl TryFrom<NetworkFile> for Network {
    type Error = Error;

    fn try_from(file: NetworkFile) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.weights.len();
                let cols = l.weights.first().map_or(0, Vec::len);
                if l.weights.iter().any(|r| r.len() != cols) {
                    return Err(Error::Format("ragged weight matrix".into()));
                }
                let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
                let weights = Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| Error::Format(e.to_string()))?;
                Layer::new(weights, Array1::from(l.b), l.act)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers)?;
        if net.dims() != file.dims {
            return Err(Error::Format(format!(
                "declared dims {:?} do not match layers {:?}",
                file.dims,
                net.dims()
            )));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn example_net() -> Network {
        Network::new(vec![
            Layer::new(array![[4.0, -1.0], [-1.0, 1.0]], array![0.0, 0.0], Activation::Relu)
                .unwrap(),
            Layer::new(array![[1.0, 2.0]], array![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn identity_layer_forward() {
        let net = Network::new(vec![Layer::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(net.forward(&[3.0, -2.0]).unwrap(), vec![3.0, -2.0]);
    }

    #[test]
    fn example_net_forward() {
        let net = example_net();
        assert_eq!(net.forward(&[1.0, 0.0]).unwrap(), vec![4.0]);
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn shape_errors() {
        let net = example_net();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        let bad = Network::new(vec![
            Layer::new(array![[1.0, 2.0]], array![0.0], Activation::Relu).unwrap(),
            Layer::new(array![[1.0, 2.0]], array![0.0], Activation::Identity).unwrap(),
        ]);
        assert!(matches!(bad, Err(Error::Shape(_))));
        assert!(Layer::new(array![[f64::NAN]], array![0.0], Activation::Identity).is_err());
    }

    #[test]
    fn linear_layer_bias_gradient_is_upstream() {
        let net = Network::new(vec![Layer::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            array![0.1, 0.2, 0.3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let up = [0.5, -1.5, 2.0];
        let g = net.backward(&[0.3, -0.7], &up).unwrap();
        assert_eq!(g.layers[0].bias.to_vec(), up.to_vec());
        assert_eq!(g.layers[0].weights[[1, 0]], -1.5 * 0.3);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::random(&[3, 8, 8, 2], &mut rng);
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::random(&[2, 16, 16, 3], &mut rng);
        let xs = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let out = net.forward_batch(xs.view()).unwrap();
        for (row, o) in xs.outer_iter().zip(out.outer_iter()) {
            let single = net.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(o.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut net = Network::new(vec![Layer::new(
            array![[0.0]],
            array![0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let mut state = AdamState::new(&net, AdamConfig::with_learning_rate(0.1));
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[[0, 0]] = 1.0;
        state.step(&mut net, &g).unwrap();
        let moved = net.layers()[0].weights[[0, 0]];
        assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(net.layers()[0].bias[0], 0.0);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_rate_leave_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Network::random(&[2, 4, 1], &mut rng);
        let before = net.clone();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let zero = Gradients::zeros_like(&net);
        state.step(&mut net, &zero).unwrap();
        state.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);

        let mut frozen = AdamState::new(&net, AdamConfig::with_learning_rate(0.0));
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights.fill(1.0);
        frozen.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn json_rejects_bad_documents() {
        assert!(Network::from_json("{\"dims\":[2,1],\"layers\":[]}").is_err());
        let wrong_dims = r#"{"version":1,"dims":[3,1],"layers":[{"A":[[1,2]],"b":[0],"act":"id"}]}"#;
        assert!(matches!(Network::from_json(wrong_dims), Err(Error::Format(_))));
        let ok = r#"{"version":1,"dims":[2,1],"layers":[{"A":[[1,2]],"b":[0.5],"act":"id"}]}"#;
        assert_eq!(Network::from_json(ok).unwrap().forward(&[1.0, 1.0]).unwrap(), vec![3.5]);
    }
}
