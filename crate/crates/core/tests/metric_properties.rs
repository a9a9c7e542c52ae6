use bridgegen_core::ballsim::{BoxParams, Layout};
use bridgegen_core::gmm::GaussianMixture;
use bridgegen_core::metrics::{directed_hausdorff, directed_hausdorff_brute, infraction_rates, relbo, RelboStream};
use bridgegen_core::rng::{self, seeded};
use bridgegen_core::{Denoiser, Result};
use proptest::prelude::*;

fn cloud(r: &mut rng::SimRng, n: usize, spread: f64) -> Vec<[f64; 2]> {
    (0..n).map(|_| [spread * rng::normal(r), spread * rng::normal(r)]).collect()
}

#[test]
fn hausdorff_triangle_bound_on_random_triples() {
    let mut r = seeded(31);
    for _ in 0..100 {
        let (a, b, c) = (cloud(&mut r, 30, 1.0), cloud(&mut r, 40, 2.0), cloud(&mut r, 25, 0.5));
        let ac = directed_hausdorff(&a, &c).unwrap();
        let ab = directed_hausdorff(&a, &b).unwrap();
        let bc = directed_hausdorff(&b, &c).unwrap();
        assert!(ac <= ab + bc + 1e-12);
        assert_eq!(directed_hausdorff(&a, &a).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_hausdorff_equals_brute_force(seed in 0u64..10_000, ng in 1usize..60, nr in 1usize..300, spread in 0.01f64..50.0) {
        let mut r = seeded(seed);
        let g = cloud(&mut r, ng, spread);
        let refs = cloud(&mut r, nr, 1.0);
        prop_assert_eq!(directed_hausdorff(&g, &refs).unwrap(), directed_hausdorff_brute(&g, &refs).unwrap());
    }

    #[test]
    fn rates_monotone_in_tol(seed in 0u64..10_000, t1 in 1e-5f64..0.05, t2 in 1e-5f64..0.05) {
        let layout = Layout::new(3, 4);
        let bp = BoxParams { radius: 0.1, half_width: 1.0 };
        let mut r = seeded(seed);
        let samples: Vec<Vec<f64>> = (0..20).map(|_| (0..layout.dim()).map(|_| 0.6 * rng::normal(&mut r)).collect()).collect();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = infraction_rates(&samples, layout, bp, lo).unwrap();
        let b = infraction_rates(&samples, layout, bp, hi).unwrap();
        prop_assert!(a.collision_rate >= b.collision_rate);
        prop_assert!(a.boundary_rate >= b.boundary_rate);
    }
}

/// Oracle denoiser plus a constant offset on every output.
struct Shifted<'a>(&'a GaussianMixture, f64);

impl Denoiser for Shifted<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn denoise(&self, x: &[f64], s: f64) -> Result<Vec<f64>> {
        Ok(self.0.denoise(x, s)?.into_iter().map(|v| v + self.1).collect())
    }
}

#[test]
fn relbo_prefers_oracle_over_shifted_oracle() {
    let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.5]], vec![0.2, 0.2]).unwrap();
    let mut r = seeded(6);
    let data: Vec<Vec<f64>> = (0..200).map(|_| g.sample(&mut r)).collect();
    let stream = RelboStream { k: 2000, sigma_min: 3e-5, sigma_max: 80.0, seed: 1 };
    let exact = relbo(&g, &data, stream).unwrap();
    let shifted = relbo(&Shifted(&g, 0.1), &data, stream).unwrap();
    assert!(exact > shifted);
}

#[test]
fn relbo_of_single_gaussian_oracle() {
    let g = GaussianMixture::standard_normal(1);
    let mut r = seeded(7);
    let data: Vec<Vec<f64>> = (0..10_000).map(|_| g.sample(&mut r)).collect();
    let stream = RelboStream { k: 10_000, sigma_min: 1.0, sigma_max: 1.0, seed: 2 };
    let v = relbo(&g, &data, stream).unwrap();
    assert!((v / -0.5 - 1.0).abs() < 0.05, "{v}");
}
