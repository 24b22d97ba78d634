mod common;

use common::{l1, random_box, random_dims, random_net};
use lograsm::bounds::{
    averaged_bound, ibp_forward, naive_product_bound, optimal_weights, sampled_lipschitz_lower,
    weighted_product_bound, IntervalNetwork, WeightSystem,
};
use lograsm::interval::IntervalBox;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_weights<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Vec<Vec<f64>> {
    let n = dims.len();
    dims.iter()
        .enumerate()
        .map(|(k, &d)| {
            if k + 1 == n {
                return vec![1.0; d];
            }
            let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
            let max = w.iter().cloned().fold(0.0, f64::max);
            w.iter_mut().for_each(|v| *v /= max);
            w
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_weights_beat_any_alternative(seed in any::<u64>(), layers in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = random_dims(layers, rng.random_range(1..=4), rng.random_range(1..=3), 6, &mut rng);
        let net = random_net(&dims, 1.0, &mut rng);
        let opt = optimal_weights(&net, &vec![1.0; net.output_dim()]).unwrap();
        prop_assert!(opt.bound <= naive_product_bound(&net) + 1e-9);
        prop_assert!((weighted_product_bound(&net, &opt.system).unwrap() - opt.bound).abs() <= 1e-9 * (1.0 + opt.bound));
        for _ in 0..20 {
            let ws = WeightSystem::new(&net, random_weights(&dims, &mut rng)).unwrap();
            prop_assert!(opt.bound <= weighted_product_bound(&net, &ws).unwrap() + 1e-9);
        }
    }

    #[test]
    fn lipschitz_bounds_are_sound(seed in any::<u64>(), layers in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = random_dims(layers, rng.random_range(1..=4), rng.random_range(1..=3), 8, &mut rng);
        let net = random_net(&dims, 1.5, &mut rng);
        let opt = optimal_weights(&net, &vec![1.0; net.output_dim()]).unwrap();
        let avg = averaged_bound(&net, &opt.system).unwrap();
        prop_assert!(avg <= opt.bound + 1e-9);
        let dom = IntervalBox::cube(-1.0, 1.0, dims[0]).unwrap();
        for _ in 0..200 {
            let x = dom.sample(&mut rng);
            let y = dom.sample(&mut rng);
            let dy = l1(&net.forward(&x).unwrap(), &net.forward(&y).unwrap());
            let dx = l1(&x, &y);
            prop_assert!(dy <= avg * dx * (1.0 + 1e-9) + 1e-12);
        }
        prop_assert!(sampled_lipschitz_lower(&net, &dom, 500, &mut rng).unwrap() <= avg * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn ibp_encloses_samples(seed in any::<u64>(), layers in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = random_dims(layers, rng.random_range(1..=4), rng.random_range(1..=3), 8, &mut rng);
        let net = random_net(&dims, 1.0, &mut rng);
        let b = random_box(dims[0], &mut rng);
        let out = ibp_forward(&net, &b).unwrap();
        for _ in 0..100 {
            let y = net.forward(&b.sample(&mut rng)).unwrap();
            for (iv, v) in out.iter().zip(&y) {
                prop_assert!(iv.lo <= *v + 1e-12 && *v <= iv.hi + 1e-12);
            }
        }
        // A sub-box never gets wider bounds.
        let c = b.center();
        let sub = IntervalBox::from_bounds(
            &b.lower().iter().zip(&c).map(|(l, m)| 0.5 * (l + m)).collect::<Vec<_>>(),
            &b.upper().iter().zip(&c).map(|(h, m)| 0.5 * (h + m)).collect::<Vec<_>>(),
        ).unwrap();
        for (outer, inner) in out.iter().zip(ibp_forward(&net, &sub).unwrap()) {
            prop_assert!(outer.lo <= inner.lo + 1e-12 && inner.hi <= outer.hi + 1e-12);
        }
    }
}

#[test]
fn batched_ibp_matches_single_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = random_net(&[3, 7, 5, 2], 1.0, &mut rng);
    let boxes: Vec<IntervalBox> = (0..9).map(|_| random_box(3, &mut rng)).collect();
    let lo = Array2::from_shape_fn((9, 3), |(i, j)| boxes[i].lower()[j]);
    let hi = Array2::from_shape_fn((9, 3), |(i, j)| boxes[i].upper()[j]);
    let (blo, bhi) = IntervalNetwork::new(&net).bounds(lo.view(), hi.view()).unwrap();
    for (i, b) in boxes.iter().enumerate() {
        let single = ibp_forward(&net, b).unwrap();
        for (k, iv) in single.iter().enumerate() {
            assert!((blo[[i, k]] - iv.lo).abs() < 1e-12);
            assert!((bhi[[i, k]] - iv.hi).abs() < 1e-12);
        }
    }
}

#[test]
fn point_boxes_are_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(&[2, 6, 1], 1.0, &mut rng);
    let x = [0.3, -0.7];
    let iv = ibp_forward(&net, &IntervalBox::point(&x)).unwrap()[0];
    let y = net.eval_scalar(&x).unwrap();
    assert!((iv.lo - y).abs() < 1e-12 && (iv.hi - y).abs() < 1e-12);
}
