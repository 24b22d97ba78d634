//! Hand-built networks for the one-dimensional contracting toy system.
//!
//! With `V(x) = 10 |x| - 6.3` the initial set `0.4 <= |x| <= 0.6` has `V <= -0.3`, the unsafe
//! set `|x| >= 0.9` has `V >= 2.7 > log 10`, and one step of `x' = 0.5 x + 0.01 w` lowers `V`
//! by about `5 |x|`, far more than the grid slack `tau K` at mesh 0.01.

use crate::nn::{Activation, Layer, Network};
use ndarray::array;

/// `V(x) = 10 relu(x) + 10 relu(-x) - 6.3`.
pub fn toy_certificate() -> Network {
    Network::new(vec![
        Layer::new(array![[1.0], [-1.0]], array![0.0, 0.0], Activation::Relu).expect("valid"),
        Layer::new(array![[10.0, 10.0]], array![-6.3], Activation::Identity).expect("valid"),
    ])
    .expect("valid")
}

/// The action does not enter the toy dynamics; a zero policy suffices.
pub fn toy_policy() -> Network {
    Network::new(vec![
        Layer::new(array![[0.0]], array![0.0], Activation::Identity).expect("valid"),
    ])
    .expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::{CertMode, Spec};
    use crate::system::contracting_toy;
    use crate::verifier::{verify, Verdict, VerifierConfig};

    #[test]
    fn toy_certificate_verifies() {
        let sys = contracting_toy(0.01).unwrap();
        let noise = sys.default_noise().unwrap();
        let spec = Spec::new(0.9, CertMode::LogRasm).unwrap();
        let out = verify(
            &toy_certificate(),
            &toy_policy(),
            &sys,
            &noise,
            spec,
            &VerifierConfig::for_system(&sys),
        )
        .unwrap();
        assert_eq!(out.verdict, Verdict::Verified, "{:?}", out.stats);
        assert_eq!(out.stats.refinements, 0);
    }
}
