//! Deterministic elastic bouncing balls in the box `[-L, L]²`.
//!
//! Balls share mass and radius. Each step advances positions by the
//! per-step velocity, then resolves wall and pair contacts: wall contacts
//! reflect the normal velocity and clamp the ball back to contact, pair
//! contacts between approaching balls swap the velocity components along
//! the line of centres and push the pair apart to contact. Contacts present
//! before the move are resolved first, so touching balls that approach
//! each other bounce instead of passing through.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const FEATURES: usize = 4;
pub const MAX_CONTACT_PASSES: usize = 8;
const MAX_INIT_REJECTIONS: usize = 10_000;

/// Flattening of a `T x B` scenario into a state vector:
/// `index = ((t * B) + b) * 4 + feature`, features `(px, py, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_balls: usize,
    pub n_steps: usize,
}

impl Layout {
    pub fn new(n_balls: usize, n_steps: usize) -> Self {
        Self { n_balls, n_steps }
    }

    pub fn dim(&self) -> usize {
        FEATURES * self.n_balls * self.n_steps
    }

    pub fn index(&self, t: usize, ball: usize, feature: usize) -> usize {
        ((t * self.n_balls) + ball) * FEATURES + feature
    }

    pub fn position(&self, x: &[f64], t: usize, ball: usize) -> [f64; 2] {
        let i = self.index(t, ball, 0);
        [x[i], x[i + 1]]
    }

    /// All `(px, py)` pairs of a state, pooled over time and balls.
    pub fn positions<'a>(&self, x: &'a [f64]) -> impl Iterator<Item = [f64; 2]> + 'a {
        x.chunks_exact(FEATURES).map(|c| [c[0], c[1]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub p: [f64; 2],
    pub v: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxParams {
    pub radius: f64,
    pub half_width: f64,
}

impl BoxParams {
    /// Physical feasibility tolerance, `1e-6 L`.
    pub fn eps_phys(&self) -> f64 {
        1e-6 * self.half_width
    }
}

fn resolve_walls(balls: &mut [Ball], bp: BoxParams) -> bool {
    let lim = bp.half_width - bp.radius;
    let mut touched = false;
    for b in balls.iter_mut() {
        for a in 0..2 {
            if b.p[a] > lim {
                b.p[a] = lim;
                if b.v[a] > 0.0 {
                    b.v[a] = -b.v[a];
                }
                touched = true;
            } else if b.p[a] < -lim {
                b.p[a] = -lim;
                if b.v[a] < 0.0 {
                    b.v[a] = -b.v[a];
                }
                touched = true;
            }
        }
    }
    touched
}

/// Pairs in contact (within `touch`) that approach each other exchange
/// their normal velocity components; overlapping pairs are pushed apart.
fn resolve_pairs(balls: &mut [Ball], bp: BoxParams, touch: f64) -> bool {
    let contact = 2.0 * bp.radius;
    let mut touched = false;
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            let dx = balls[j].p[0] - balls[i].p[0];
            let dy = balls[j].p[1] - balls[i].p[1];
            let d = libm::hypot(dx, dy);
            if d >= contact + touch || d == 0.0 {
                continue;
            }
            let n = [dx / d, dy / d];
            let approach = (balls[i].v[0] - balls[j].v[0]) * n[0] + (balls[i].v[1] - balls[j].v[1]) * n[1];
            if approach > 0.0 {
                let vi = balls[i].v[0] * n[0] + balls[i].v[1] * n[1];
                let vj = balls[j].v[0] * n[0] + balls[j].v[1] * n[1];
                for a in 0..2 {
                    balls[i].v[a] += (vj - vi) * n[a];
                    balls[j].v[a] += (vi - vj) * n[a];
                }
                touched = true;
            }
            if d < contact {
                // split the separation, giving a wall-pinned ball's share to the other
                let need = contact - d;
                let lim = bp.half_width - bp.radius;
                let room_i = room(balls[i].p, [-n[0], -n[1]], lim);
                let room_j = room(balls[j].p, n, lim);
                let mut si = (0.5 * need).min(room_i);
                let sj = (need - si).min(room_j);
                si = (need - sj).min(room_i).max(si);
                for a in 0..2 {
                    balls[i].p[a] -= si * n[a];
                    balls[j].p[a] += sj * n[a];
                }
                touched = true;
            }
        }
    }
    touched
}

/// Distance a ball at `p` can travel along unit `u` before leaving `[-lim, lim]²`.
fn room(p: [f64; 2], u: [f64; 2], lim: f64) -> f64 {
    let mut r = f64::INFINITY;
    for a in 0..2 {
        if u[a] > 0.0 {
            r = r.min((lim - p[a]) / u[a]);
        } else if u[a] < 0.0 {
            r = r.min((lim + p[a]) / -u[a]);
        }
    }
    r.max(0.0)
}

fn resolve(balls: &mut [Ball], bp: BoxParams, touch: f64) -> Result<()> {
    for _ in 0..MAX_CONTACT_PASSES {
        let w = resolve_walls(balls, bp);
        let p = resolve_pairs(balls, bp, touch);
        if !w && !p {
            break;
        }
    }
    if is_feasible(balls, bp, bp.eps_phys()) {
        Ok(())
    } else {
        Err(Error::ContactResolutionFailed)
    }
}

pub fn simulate_step(balls: &mut [Ball], bp: BoxParams) -> Result<()> {
    let touch = bp.eps_phys();
    // contacts carried over from the previous step (e.g. touching and approaching)
    resolve(balls, bp, touch)?;
    for b in balls.iter_mut() {
        b.p[0] += b.v[0];
        b.p[1] += b.v[1];
    }
    resolve(balls, bp, 0.0)
}

/// No pair overlap and no wall penetration beyond `eps`.
pub fn is_feasible(balls: &[Ball], bp: BoxParams, eps: f64) -> bool {
    let lim = bp.half_width - bp.radius;
    for (i, b) in balls.iter().enumerate() {
        if libm::fabs(b.p[0]) - lim > eps || libm::fabs(b.p[1]) - lim > eps {
            return false;
        }
        for c in &balls[i + 1..] {
            let d = libm::hypot(b.p[0] - c.p[0], b.p[1] - c.p[1]);
            if 2.0 * bp.radius - d > eps {
                return false;
            }
        }
    }
    true
}

/// Feasibility of every time step of a flattened state.
pub fn state_feasible(x: &[f64], layout: Layout, bp: BoxParams, eps: f64) -> bool {
    x.chunks_exact(FEATURES * layout.n_balls).all(|frame| {
        let balls: Vec<Ball> = frame
            .chunks_exact(FEATURES)
            .map(|c| Ball { p: [c[0], c[1]], v: [c[2], c[3]] })
            .collect();
        is_feasible(&balls, bp, eps)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub layout: Layout,
    pub params: BoxParams,
    /// Flattened states, see [`Layout`].
    pub states: Vec<f64>,
}

impl Scenario {
    pub fn frame(&self, t: usize) -> Vec<Ball> {
        let w = FEATURES * self.layout.n_balls;
        self.states[t * w..(t + 1) * w]
            .chunks_exact(FEATURES)
            .map(|c| Ball { p: [c[0], c[1]], v: [c[2], c[3]] })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_scenarios: usize,
    pub layout: Layout,
    pub params: BoxParams,
    /// Initial velocity components are uniform on `[-max_speed, max_speed]`.
    pub max_speed: f64,
}

pub fn random_initial<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Result<Vec<Ball>> {
    let lim = cfg.params.half_width - cfg.params.radius;
    let contact = 2.0 * cfg.params.radius;
    let mut balls: Vec<Ball> = Vec::with_capacity(cfg.layout.n_balls);
    let mut rejections = 0;
    while balls.len() < cfg.layout.n_balls {
        let p = [lim * (2.0 * rng::uniform(rng) - 1.0), lim * (2.0 * rng::uniform(rng) - 1.0)];
        if balls.iter().any(|b| libm::hypot(b.p[0] - p[0], b.p[1] - p[1]) <= contact) {
            rejections += 1;
            if rejections >= MAX_INIT_REJECTIONS {
                return Err(Error::InitializationInfeasible(rejections));
            }
            continue;
        }
        balls.push(Ball { p, v: [0.0; 2] });
    }
    for b in balls.iter_mut() {
        for a in 0..2 {
            b.v[a] = cfg.max_speed * (2.0 * rng::uniform(rng) - 1.0);
        }
    }
    Ok(balls)
}

pub fn simulate<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Result<Scenario> {
    let mut balls = random_initial(cfg, rng)?;
    let mut states = Vec::with_capacity(cfg.layout.dim());
    for t in 0..cfg.layout.n_steps {
        if t > 0 {
            simulate_step(&mut balls, cfg.params)?;
        }
        for b in &balls {
            states.extend_from_slice(&[b.p[0], b.p[1], b.v[0], b.v[1]]);
        }
    }
    Ok(Scenario { layout: cfg.layout, params: cfg.params, states })
}

/// Scenario `k` uses the seed `derive_index(seed, k)`, so the dataset does
/// not depend on generation order.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Scenario>> {
    (0..cfg.n_scenarios)
        .map(|k| simulate(cfg, &mut rng::seeded(rng::derive_index(seed, k as u64))))
        .collect()
}

pub fn kinetic_energy(balls: &[Ball]) -> f64 {
    balls.iter().map(|b| b.v[0] * b.v[0] + b.v[1] * b.v[1]).sum()
}

pub fn momentum(balls: &[Ball]) -> [f64; 2] {
    balls.iter().fold([0.0; 2], |m, b| [m[0] + b.v[0], m[1] + b.v[1]])
}

pub fn zeros(layout: Layout) -> Vec<f64> {
    vec![0.0; layout.dim()]
}
