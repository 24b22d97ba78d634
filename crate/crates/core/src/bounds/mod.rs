//! Interval bound propagation and Lipschitz bounds for [`Network`](crate::nn::Network)s.

mod ibp;
mod lipschitz;

pub use ibp::{ibp_forward, IntervalNetwork};
pub use lipschitz::{
    averaged_bound, certificate_k, matrix_one_norm, naive_product_bound,
    naive_product_bound_with_grad, optimal_weights, sampled_lipschitz_lower,
    weighted_matrix_norm, weighted_product_bound, LipschitzReport, OptimalWeights,
    StepLipschitz, WeightSystem, MIN_WEIGHT,
};

use crate::error::Result;
use crate::nn::Network;
use serde::{Deserialize, Serialize};

/// How the verifier bounds network Lipschitz constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMethod {
    /// Optimal weighted norms combined with averaged activations.
    #[default]
    WeightedAveraged,
    /// Optimal weighted norms, plain product.
    Weighted,
    /// Unweighted product of layer norms.
    Product,
}

impl LipschitzMethod {
    /// 1-norm Lipschitz bound of `net` (unit output weights).
    pub fn bound(self, net: &Network) -> Result<f64> {
        match self {
            LipschitzMethod::Product => Ok(naive_product_bound(net)),
            LipschitzMethod::Weighted => Ok(optimal_weights(net, &vec![1.0; net.output_dim()])?.bound),
            LipschitzMethod::WeightedAveraged => {
                let opt = optimal_weights(net, &vec![1.0; net.output_dim()])?;
                averaged_bound(net, &opt.system)
            }
        }
    }
}
