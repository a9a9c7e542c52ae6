use bridgegen_core::ballsim::{
    generate_dataset, kinetic_energy, momentum, random_initial, simulate_step, Ball, BoxParams, DatasetConfig, Layout,
};
use bridgegen_core::metrics::infraction_rates;
use bridgegen_core::rng::seeded;

const BP: BoxParams = BoxParams { radius: 0.08, half_width: 1.0 };

fn near_wall(balls: &[Ball]) -> bool {
    let lim = BP.half_width - BP.radius;
    balls.iter().any(|b| (0..2).any(|a| b.p[a].abs() + b.v[a].abs() >= lim - 1e-9))
}

#[test]
fn energy_and_pair_momentum_conserved_over_long_run() {
    let cfg = DatasetConfig { n_scenarios: 1, layout: Layout::new(3, 2), params: BP, max_speed: 0.05 };
    let mut balls = random_initial(&cfg, &mut seeded(17)).unwrap();
    let ke0 = kinetic_energy(&balls);
    let mut pair_steps = 0;
    for _ in 0..100_000 {
        let before = balls.clone();
        simulate_step(&mut balls, BP).unwrap();
        let ke = kinetic_energy(&balls);
        assert!((ke - ke0).abs() <= 1e-10 * ke0, "energy drift {}", (ke - ke0) / ke0);
        if !near_wall(&before) && !near_wall(&balls) {
            let (m0, m1) = (momentum(&before), momentum(&balls));
            let scale = libm::hypot(m0[0], m0[1]).max(ke0.sqrt());
            assert!(libm::hypot(m1[0] - m0[0], m1[1] - m0[1]) <= 1e-10 * scale);
            let changed = before.iter().zip(&balls).any(|(a, b)| a.v != b.v);
            pair_steps += changed as usize;
        }
    }
    assert!(pair_steps > 0, "no pair collision away from walls was exercised");
}

#[test]
fn generated_data_has_no_infractions() {
    let layout = Layout::new(3, 20);
    let cfg = DatasetConfig { n_scenarios: 500, layout, params: BP, max_speed: 0.05 };
    let data = generate_dataset(&cfg, 3).unwrap();
    let states: Vec<Vec<f64>> = data.into_iter().map(|s| s.states).collect();
    let r = infraction_rates(&states, layout, BP, 1e-3).unwrap();
    assert_eq!((r.collision_rate, r.boundary_rate), (0.0, 0.0));
}
