//! Constraint losses `ℓ(x) ≥ 0`, zero exactly on the feasible set.
//!
//! Ball constraints read positions from the scenario layout (see
//! [`crate::ballsim::Layout`]) and leave velocity coordinates untouched.
//! Collision and wall terms are squared hinges, so every loss here is C¹.

use alloc::vec;
use alloc::vec::Vec;

use crate::ballsim::Layout;
use crate::error::{Error, Result};
use crate::schedules::GammaSchedule;

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    /// `Σ_{t, i<j} max(0, r_i + r_j − d_ij(t))²`
    BallCollision { layout: Layout, radii: Vec<f64> },
    /// `Σ_{t, i, axis} max(0, |p| − (L − r_i))²`
    BallBoundary { layout: Layout, radii: Vec<f64>, half_width: f64 },
    /// `½ ‖x − c‖²`
    QuadraticToPoint { target: Vec<f64> },
    /// `½ max(0, n·x − b)²`, feasible side `n·x ≤ b`.
    HalfPlane { normal: Vec<f64>, offset: f64 },
    /// Weighted sum of members.
    Composite(Vec<(f64, ConstraintSpec)>),
}

impl ConstraintSpec {
    pub fn ball_collision(layout: Layout, radius: f64) -> Self {
        Self::BallCollision { layout, radii: vec![radius; layout.n_balls] }
    }

    pub fn ball_boundary(layout: Layout, radius: f64, half_width: f64) -> Self {
        Self::BallBoundary { layout, radii: vec![radius; layout.n_balls], half_width }
    }

    /// Collision plus wall constraints with the given weights.
    pub fn balls(layout: Layout, radius: f64, half_width: f64, weights: [f64; 2]) -> Self {
        Self::Composite(vec![
            (weights[0], Self::ball_collision(layout, radius)),
            (weights[1], Self::ball_boundary(layout, radius, half_width)),
        ])
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::BallCollision { .. } => "ball-collision",
            Self::BallBoundary { .. } => "ball-boundary",
            Self::QuadraticToPoint { .. } => "quadratic-to-point",
            Self::HalfPlane { .. } => "halfplane",
            Self::Composite(_) => "composite",
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        match self {
            Self::BallCollision { layout, radii } | Self::BallBoundary { layout, radii, .. } => {
                if x.len() != layout.dim() {
                    return Err(Error::MalformedLayout(alloc::format!(
                        "state has {} values, layout needs {}",
                        x.len(),
                        layout.dim()
                    )));
                }
                if radii.len() != layout.n_balls {
                    return Err(Error::MalformedLayout("one radius per ball required".into()));
                }
            }
            Self::QuadraticToPoint { target } => {
                if x.len() != target.len() {
                    return Err(Error::DimensionMismatch { expected: target.len(), got: x.len() });
                }
            }
            Self::HalfPlane { normal, .. } => {
                if x.len() != normal.len() {
                    return Err(Error::DimensionMismatch { expected: normal.len(), got: x.len() });
                }
            }
            Self::Composite(members) => {
                for (_, m) in members {
                    m.check(x)?;
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        loss_value(self, x)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        loss_grad(self, x)
    }
}

pub fn loss_value(c: &ConstraintSpec, x: &[f64]) -> Result<f64> {
    c.check(x)?;
    Ok(value_unchecked(c, x))
}

fn value_unchecked(c: &ConstraintSpec, x: &[f64]) -> f64 {
    match c {
        ConstraintSpec::BallCollision { layout, radii } => {
            let mut acc = 0.0;
            for t in 0..layout.n_steps {
                for i in 0..layout.n_balls {
                    let pi = layout.position(x, t, i);
                    for j in i + 1..layout.n_balls {
                        let pj = layout.position(x, t, j);
                        let d = libm::hypot(pi[0] - pj[0], pi[1] - pj[1]);
                        let o = radii[i] + radii[j] - d;
                        if o > 0.0 {
                            acc += o * o;
                        }
                    }
                }
            }
            acc
        }
        ConstraintSpec::BallBoundary { layout, radii, half_width } => {
            let mut acc = 0.0;
            for t in 0..layout.n_steps {
                for (i, r) in radii.iter().enumerate() {
                    for p in layout.position(x, t, i) {
                        let e = libm::fabs(p) - (half_width - r);
                        if e > 0.0 {
                            acc += e * e;
                        }
                    }
                }
            }
            acc
        }
        ConstraintSpec::QuadraticToPoint { target } => {
            0.5 * x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        ConstraintSpec::HalfPlane { normal, offset } => {
            let e = crate::linalg::dot(normal, x) - offset;
            if e > 0.0 {
                0.5 * e * e
            } else {
                0.0
            }
        }
        ConstraintSpec::Composite(members) => members.iter().map(|(w, m)| w * value_unchecked(m, x)).sum(),
    }
}

pub fn loss_grad(c: &ConstraintSpec, x: &[f64]) -> Result<Vec<f64>> {
    c.check(x)?;
    let mut g = vec![0.0; x.len()];
    grad_into(c, x, 1.0, &mut g);
    Ok(g)
}

/// Accumulates `scale * ∇ℓ(x)` into `out`.
fn grad_into(c: &ConstraintSpec, x: &[f64], scale: f64, out: &mut [f64]) {
    match c {
        ConstraintSpec::BallCollision { layout, radii } => {
            for t in 0..layout.n_steps {
                for i in 0..layout.n_balls {
                    let pi = layout.position(x, t, i);
                    for j in i + 1..layout.n_balls {
                        let pj = layout.position(x, t, j);
                        let (dx, dy) = (pi[0] - pj[0], pi[1] - pj[1]);
                        let d = libm::hypot(dx, dy);
                        let o = radii[i] + radii[j] - d;
                        // coincident centres have no defined direction
                        if o > 0.0 && d > 0.0 {
                            let k = -2.0 * o / d * scale;
                            let (ii, jj) = (layout.index(t, i, 0), layout.index(t, j, 0));
                            out[ii] += k * dx;
                            out[ii + 1] += k * dy;
                            out[jj] -= k * dx;
                            out[jj + 1] -= k * dy;
                        }
                    }
                }
            }
        }
        ConstraintSpec::BallBoundary { layout, radii, half_width } => {
            for t in 0..layout.n_steps {
                for (i, r) in radii.iter().enumerate() {
                    let base = layout.index(t, i, 0);
                    for a in 0..2 {
                        let p = x[base + a];
                        let e = libm::fabs(p) - (half_width - r);
                        if e > 0.0 {
                            out[base + a] += 2.0 * e * p.signum() * scale;
                        }
                    }
                }
            }
        }
        ConstraintSpec::QuadraticToPoint { target } => {
            for ((o, a), b) in out.iter_mut().zip(x).zip(target) {
                *o += scale * (a - b);
            }
        }
        ConstraintSpec::HalfPlane { normal, offset } => {
            let e = crate::linalg::dot(normal, x) - offset;
            if e > 0.0 {
                crate::linalg::axpy(scale * e, normal, out);
            }
        }
        ConstraintSpec::Composite(members) => {
            let mut member = vec![0.0; out.len()];
            for (w, m) in members {
                member.iter_mut().for_each(|v| *v = 0.0);
                grad_into(m, x, 1.0, &mut member);
                let k = scale * w;
                for (o, g) in out.iter_mut().zip(&member) {
                    *o += k * g;
                }
            }
        }
    }
}

/// `γ(σ) ∇ℓ(x_eval)`. The caller decides where the gradient is taken: the
/// noisy state, or a detached denoised estimate.
pub fn bridge_term(c: &ConstraintSpec, g: &GammaSchedule, sigma: f64, x_eval: &[f64]) -> Result<Vec<f64>> {
    let gamma = g.value(sigma)?;
    let mut out = loss_grad(c, x_eval)?;
    for v in out.iter_mut() {
        *v *= gamma;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_balls(sep: f64) -> (ConstraintSpec, Vec<f64>) {
        let layout = Layout::new(2, 1);
        let x = vec![0.0, 0.0, 0.3, -0.1, sep, 0.0, 0.0, 0.2];
        (ConstraintSpec::ball_collision(layout, 0.1), x)
    }

    #[test]
    fn collision_values() {
        let (c, x) = two_balls(0.15);
        assert!((c.value(&x).unwrap() - 0.0025).abs() < 1e-15);
        let (c, x) = two_balls(0.3);
        assert_eq!(c.value(&x).unwrap(), 0.0);
        assert!(c.grad(&x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn collision_gradient_matches_fd_and_skips_velocities() {
        let (c, x) = two_balls(0.15);
        let g = c.grad(&x).unwrap();
        for k in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (c.value(&xp).unwrap() - c.value(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "coord {k}: {fd} vs {}", g[k]);
        }
        for v in [2, 3, 6, 7] {
            assert_eq!(g[v], 0.0);
        }
    }

    #[test]
    fn boundary_value() {
        let layout = Layout::new(1, 1);
        let c = ConstraintSpec::ball_boundary(layout, 0.1, 1.0);
        let x = [0.95, 0.0, 0.0, 0.0];
        assert!((c.value(&x).unwrap() - 0.0025).abs() < 1e-15);
        let g = c.grad(&x).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-12 && g[1] == 0.0);
        assert_eq!(c.value(&[0.0, 0.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_gradient_and_bridge() {
        let c = ConstraintSpec::QuadraticToPoint { target: vec![0.0, 0.0] };
        assert_eq!(c.grad(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
        let g = GammaSchedule::new(1.0, 80.0).unwrap();
        let b = bridge_term(&c, &g, 1.0, &[1.0, 0.0]).unwrap();
        assert!((b[0] - 0.99984375).abs() < 1e-15 && b[1] == 0.0);
        assert!(bridge_term(&c, &g, 80.0, &[5.0, 2.0]).unwrap().iter().all(|&v| v == 0.0));
        assert!(bridge_term(&c, &g, 100.0, &[5.0, 2.0]).is_err());
    }

    #[test]
    fn halfplane() {
        let c = ConstraintSpec::HalfPlane { normal: vec![1.0, 0.0], offset: 0.5 };
        assert_eq!(c.value(&[0.2, 9.0]).unwrap(), 0.0);
        assert!((c.value(&[1.5, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(c.grad(&[1.5, 3.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn malformed_layout() {
        let (c, _) = two_balls(0.1);
        assert!(matches!(c.value(&[0.0; 5]), Err(Error::MalformedLayout(_))));
        assert!(matches!(c.grad(&[0.0; 9]), Err(Error::MalformedLayout(_))));
    }

    #[test]
    fn composite_is_weighted_sum() {
        let layout = Layout::new(2, 2);
        let c = ConstraintSpec::balls(layout, 0.2, 1.0, [2.0, 0.5]);
        let x: Vec<f64> = (0..16).map(|i| libm::sin(i as f64 * 1.7) * 0.95).collect();
        let ConstraintSpec::Composite(m) = &c else { unreachable!() };
        let v = m[0].1.value(&x).unwrap() * 2.0 + m[1].1.value(&x).unwrap() * 0.5;
        assert_eq!(c.value(&x).unwrap(), v);
        let g0 = m[0].1.grad(&x).unwrap();
        let g1 = m[1].1.grad(&x).unwrap();
        let g = c.grad(&x).unwrap();
        for k in 0..16 {
            assert_eq!(g[k], 2.0 * g0[k] + 0.5 * g1[k]);
        }
    }
}
