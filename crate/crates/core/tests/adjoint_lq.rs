use bridgegen_core::adjoint::{
    am_finetune, controlled_sample, em_sample, lq_oracle, AmConfig, ControlContext, ControlNet, LinearDrift, TimeGrid,
};
use bridgegen_core::constraints::ConstraintSpec;
use bridgegen_core::nnet::LevelEmbedding;
use bridgegen_core::rng::seeded;

const D: usize = 2;
const M: usize = 20;
const C: f64 = 2.0;

fn tuned() -> ControlContext<'static> {
    static DRIFT: LinearDrift = LinearDrift { dim: D, coef: 0.0 };
    let embed = LevelEmbedding { n_freq: 4, base_freq: 1.0, growth: 2.0 };
    let mut ctx = ControlContext {
        drift: &DRIFT,
        grid: TimeGrid::uniform(M, 1.0, 1.0).unwrap(),
        control: ControlNet::new(D, embed, &[32, 32], &mut seeded(1)).unwrap(),
        terminal: ConstraintSpec::QuadraticToPoint { target: vec![0.0; D] },
        terminal_weight: C,
        running: None,
        init_std: 1.0,
    };
    let cfg = AmConfig { n_outer: 400, batch: 64, lr: 3e-3, max_grad_norm: Some(10.0), seed: 7 };
    am_finetune(&mut ctx, cfg, |_, _| {}).unwrap();
    ctx
}

fn sq_norms(xs: &[f64]) -> Vec<f64> {
    xs.chunks_exact(D).map(|r| r.iter().map(|v| v * v).sum()).collect()
}

#[test]
fn lq_finetune_tracks_riccati_and_beats_baseline() {
    let ctx = tuned();
    let n = 500;
    let base = sq_norms(&em_sample(ctx.drift, &ctx.grid, 1.0, n, 99).unwrap());
    let tuned = sq_norms(&controlled_sample(ctx.drift, &ctx.grid, &ctx.control, 1.0, n, 99).unwrap());

    let (_, v_oracle) = lq_oracle(C, 1.0 / M as f64, M, 1.0);
    let v_tuned = tuned.iter().sum::<f64>() / (n * D) as f64;
    assert!((v_tuned / v_oracle - 1.0).abs() < 0.2, "tuned {v_tuned} vs oracle {v_oracle}");

    let wins = tuned.iter().zip(&base).filter(|(t, b)| t < b).count();
    // one-sided binomial tail P(W >= wins) under p = 1/2
    let mut tail = 0.0;
    let mut term = 0.5f64.powi(n as i32);
    for k in 0..=n {
        if k >= wins {
            tail += term;
        }
        term *= (n - k) as f64 / (k + 1) as f64;
    }
    assert!(tail < 0.01, "wins {wins}/{n}, p = {tail}");
}
