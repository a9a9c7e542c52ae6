use bridgegen_core::constraints::{bridge_term, loss_grad, ConstraintSpec};
use bridgegen_core::gmm::GaussianMixture;
use bridgegen_core::objectives::{draw_dsm, draw_fm, regression_loss};
use bridgegen_core::rng::{self, seeded};
use bridgegen_core::samplers::{sample, Method, ModelContext, SamplerSpec};
use bridgegen_core::schedules::{sigmoid, GammaSchedule, LossWeighting, TrainTimeDist};
use bridgegen_core::{Denoiser, Result};

fn three_component() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.3, 0.3, 0.4],
        vec![vec![-1.5, 0.0], vec![1.5, 0.5], vec![0.0, -1.5]],
        vec![vec![0.1, 0.2], vec![0.15, 0.1], vec![0.3, 0.05]],
    )
    .unwrap()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn score_matches_log_density_gradient() {
    let g = three_component();
    let mut r = seeded(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x = [3.0 * (2.0 * rng::uniform(&mut r) - 1.0), 3.0 * (2.0 * rng::uniform(&mut r) - 1.0)];
        let sigma = libm::exp(libm::log(0.05) + rng::uniform(&mut r) * libm::log(100.0));
        let s = g.score(&x, sigma).unwrap();
        let h = 1e-5;
        let mut fd = [0.0; 2];
        for k in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            fd[k] = (g.log_density(&xp, sigma).unwrap() - g.log_density(&xm, sigma).unwrap()) / (2.0 * h);
        }
        let err = libm::hypot(s[0] - fd[0], s[1] - fd[1]) / libm::hypot(fd[0], fd[1]).max(1e-12);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn posterior_mean_and_score_agree() {
    let g = three_component();
    let mut r = seeded(3);
    for _ in 0..50 {
        let x = [rng::normal(&mut r), rng::normal(&mut r)];
        let sigma = 0.1 + rng::uniform(&mut r);
        let d = g.posterior_mean(&x, sigma).unwrap();
        let s = g.score(&x, sigma).unwrap();
        for k in 0..2 {
            assert!((x[k] + sigma * sigma * s[k] - d[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_substitution_gap_decays() {
    let g = three_component();
    let c = ConstraintSpec::QuadraticToPoint { target: vec![0.5, -0.5] };
    let gap = |sigma: f64| -> f64 {
        let mut r = seeded(5);
        let mut total = 0.0;
        for _ in 0..10_000 {
            let x0 = g.sample(&mut r);
            let xt: Vec<f64> = x0.iter().map(|v| v + sigma * rng::normal(&mut r)).collect();
            let d = g.posterior_mean(&xt, sigma).unwrap();
            let a = loss_grad(&c, &xt).unwrap();
            let b = loss_grad(&c, &d).unwrap();
            total += libm::hypot(a[0] - b[0], a[1] - b[1]);
        }
        total / 10_000.0
    };
    let (small, large) = (gap(0.01), gap(1.0));
    assert!(small < 0.05 * large, "{small} vs {large}");
}

#[test]
fn bridge_vectors_differ_then_converge() {
    let g = three_component();
    let c = ConstraintSpec::QuadraticToPoint { target: vec![0.5, -0.5] };
    let gamma = GammaSchedule::new(1.0, 80.0).unwrap();
    let rel = |sigma: f64, r: &mut rng::SimRng| -> f64 {
        let x0 = g.sample(r);
        let xt: Vec<f64> = x0.iter().map(|v| v + sigma * rng::normal(r)).collect();
        let at_noisy = bridge_term(&c, &gamma, sigma, &xt).unwrap();
        let at_denoised = bridge_term(&c, &gamma, sigma, &g.posterior_mean(&xt, sigma).unwrap()).unwrap();
        libm::hypot(at_noisy[0] - at_denoised[0], at_noisy[1] - at_denoised[1]) / libm::hypot(at_noisy[0], at_noisy[1])
    };
    let mut r = seeded(8);
    for _ in 0..20 {
        assert!(rel(1.0, &mut r) > 1e-3);
        assert!(rel(3e-5, &mut r) < 1e-2);
    }
}

#[test]
fn dsm_loss_of_oracle_is_posterior_variance() {
    let d = 4;
    let g = GaussianMixture::standard_normal(d);
    let sigma = 0.7;
    let dist = TrainTimeDist::LogUniformSigma { sigma_min: sigma, sigma_max: sigma };
    let mut r = seeded(21);
    let batch: Vec<Vec<f64>> = (0..10_000).map(|_| g.sample(&mut r)).collect();
    let draws = draw_dsm(&batch, &dist, LossWeighting::Unit, &mut r).unwrap();
    let loss = regression_loss(&g, &draws).unwrap();
    let expect = d as f64 * sigma * sigma / (1.0 + sigma * sigma);
    assert!((loss / expect - 1.0).abs() < 0.05, "{loss} vs {expect}");
}

/// Endpoint model that returns its input state, `X̂₁ = x_t`.
struct Stay(usize);

impl Denoiser for Stay {
    fn dim(&self) -> usize {
        self.0
    }

    fn denoise(&self, y: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(y.iter().map(|v| v / (1.0 + sigma)).collect())
    }
}

#[test]
fn fm_loss_of_zero_model_is_twice_dim() {
    let d = 3;
    let g = GaussianMixture::standard_normal(d);
    let mut r = seeded(22);
    let batch: Vec<Vec<f64>> = (0..10_000).map(|_| g.sample(&mut r)).collect();
    let dist = TrainTimeDist::LogitNormal { mu: -0.6, sd: 1.6 };
    let draws = draw_fm(&batch, &dist, 80.0, &mut r).unwrap();
    let loss = regression_loss(&Stay(d), &draws).unwrap();
    assert!((loss / (2.0 * d as f64) - 1.0).abs() < 0.05, "{loss}");
}

#[test]
fn fm_loss_of_cheating_model_is_zero() {
    struct Cheat(Vec<Vec<f64>>, std::cell::Cell<usize>);
    impl Denoiser for Cheat {
        fn dim(&self) -> usize {
            2
        }
        fn denoise(&self, _: &[f64], _: f64) -> Result<Vec<f64>> {
            let i = self.1.get();
            self.1.set(i + 1);
            Ok(self.0[i].clone())
        }
    }
    let g = three_component();
    let mut r = seeded(2);
    let batch: Vec<Vec<f64>> = (0..100).map(|_| g.sample(&mut r)).collect();
    let draws = draw_fm(&batch, &TrainTimeDist::LogitNormal { mu: -0.6, sd: 1.6 }, 80.0, &mut r).unwrap();
    let loss = regression_loss(&Cheat(batch, 0.into()), &draws).unwrap();
    assert!(loss < 1e-16, "{loss}");
}

#[test]
fn endpoint_oracle_matches_closed_form() {
    let g = GaussianMixture::standard_normal(1);
    for t in [0.1, 0.4, 0.9] {
        let x = 0.8;
        let (scale, s) = bridgegen_core::objectives::fm_to_diffusion(t, 80.0);
        let got = g.denoise(&[scale * x], s).unwrap()[0];
        let want = x * t / (t * t + (1.0 - t) * (1.0 - t));
        assert!((got - want).abs() < 1e-12);
    }
}

fn terminal_stats(method: Method, churn: f64, steps: usize) -> (f64, f64) {
    let g = GaussianMixture::standard_normal(1);
    let spec = SamplerSpec::new(method, steps, churn, 0.0, 99).unwrap();
    let ctx = ModelContext::plain(&g, 3e-5, 80.0);
    let xs: Vec<f64> = sample(&spec, &ctx, 10_000).unwrap().into_iter().map(|v| v[0]).collect();
    mean_var(&xs)
}

#[test]
fn dm_sampler_recovers_standard_normal() {
    for churn in [0.0, 10.0] {
        let (m, v) = terminal_stats(Method::DmBaseline, churn, 200);
        assert!(m.abs() < 0.03, "churn {churn}: mean {m}");
        assert!((v - 1.0).abs() < 0.05, "churn {churn}: var {v}");
    }
}

#[test]
fn fm_sampler_recovers_standard_normal() {
    let (m, v) = terminal_stats(Method::FmBaseline, 0.0, 50);
    assert!(m.abs() < 0.03, "mean {m}");
    assert!((v - 1.0).abs() < 0.05, "var {v}");
}

#[test]
fn training_level_distributions() {
    let mut r = seeded(4);
    let ln = TrainTimeDist::LogitNormal { mu: -0.6, sd: 1.6 };
    let mean = (0..100_000).map(|_| ln.sample(&mut r)).sum::<f64>() / 1e5;
    let mut r2 = seeded(5);
    let oracle = (0..10_000_000).map(|_| sigmoid(-0.6 + 1.6 * rng::normal(&mut r2))).sum::<f64>() / 1e7;
    assert!((mean - oracle).abs() < 0.01, "{mean} vs {oracle}");

    let lu = TrainTimeDist::LogUniformSigma { sigma_min: 3e-5, sigma_max: 80.0 };
    let mut v: Vec<f64> = (0..100_000).map(|_| lu.sample(&mut r)).collect();
    v.sort_by(f64::total_cmp);
    let median = v[50_000];
    let expect = (80.0f64 * 3e-5).sqrt();
    assert!((median / expect - 1.0).abs() < 0.1, "{median}");
}
