//! Evaluation metrics: infraction rates, directed Hausdorff distance to the
//! reference support, and the relative-ELBO ranking surrogate.

use alloc::vec;
use alloc::vec::Vec;

use crate::ballsim::{BoxParams, Layout, FEATURES};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub collision_rate: f64,
    pub boundary_rate: f64,
    pub hdh: f64,
    pub relbo: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfractionRates {
    pub collision_rate: f64,
    pub boundary_rate: f64,
}

/// Fractions of `(scenario, timestep)` pairs with any pair overlap, resp.
/// any wall penetration, larger than `tol`.
pub fn infraction_rates(samples: &[Vec<f64>], layout: Layout, bp: BoxParams, tol: f64) -> Result<InfractionRates> {
    let frame_len = FEATURES * layout.n_balls;
    let lim = bp.half_width - bp.radius;
    let contact = 2.0 * bp.radius;
    let (mut collisions, mut boundary, mut total) = (0usize, 0usize, 0usize);
    for s in samples {
        if s.len() != layout.dim() {
            return Err(Error::MalformedLayout(alloc::format!(
                "sample has {} values, layout needs {}",
                s.len(),
                layout.dim()
            )));
        }
        for frame in s.chunks_exact(frame_len) {
            total += 1;
            let pos: Vec<[f64; 2]> = frame.chunks_exact(FEATURES).map(|c| [c[0], c[1]]).collect();
            let wall = pos.iter().any(|p| libm::fabs(p[0]) - lim > tol || libm::fabs(p[1]) - lim > tol);
            let overlap = pos.iter().enumerate().any(|(i, p)| {
                pos[i + 1..].iter().any(|q| contact - libm::hypot(p[0] - q[0], p[1] - q[1]) > tol)
            });
            collisions += usize::from(overlap);
            boundary += usize::from(wall);
        }
    }
    if total == 0 {
        return Ok(InfractionRates { collision_rate: 0.0, boundary_rate: 0.0 });
    }
    Ok(InfractionRates {
        collision_rate: collisions as f64 / total as f64,
        boundary_rate: boundary as f64 / total as f64,
    })
}

/// Exact `max_{g} min_{r} ‖g − r‖` by exhaustive search.
pub fn directed_hausdorff_brute(generated: &[[f64; 2]], reference: &[[f64; 2]]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut worst: f64 = 0.0;
    for g in generated {
        let best = reference
            .iter()
            .map(|r| (g[0] - r[0]) * (g[0] - r[0]) + (g[1] - r[1]) * (g[1] - r[1]))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    Ok(libm::sqrt(worst))
}

/// Uniform bucket grid over a reference point set for exact nearest-neighbour
/// queries.
struct Grid<'a> {
    points: &'a [[f64; 2]],
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [[f64; 2]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let side = libm::ceil(libm::sqrt(points.len() as f64 / 2.0)).max(1.0) as usize;
        let cell = extent / side as f64;
        let nx = (libm::floor((hi[0] - lo[0]) / cell) as usize + 1).max(1);
        let ny = (libm::floor((hi[1] - lo[1]) / cell) as usize + 1).max(1);
        let mut counts = vec![0usize; nx * ny + 1];
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let cx = (((p[0] - lo[0]) / cell) as usize).min(nx - 1);
                let cy = (((p[1] - lo[1]) / cell) as usize).min(ny - 1);
                cy * nx + cx
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self { points, origin: lo, cell, nx, ny, starts: counts, order }
    }

    fn scan(&self, x: isize, y: isize, q: [f64; 2], best: &mut f64) {
        let c = y as usize * self.nx + x as usize;
        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
            let p = self.points[i];
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
            *best = best.min(d);
        }
    }

    fn nearest_sq(&self, q: [f64; 2]) -> f64 {
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let fx = (q[0] - self.origin[0]) / self.cell;
        let fy = (q[1] - self.origin[1]) / self.cell;
        let cx = libm::floor(fx).clamp(0.0, (nx - 1) as f64) as isize;
        let cy = libm::floor(fy).clamp(0.0, (ny - 1) as f64) as isize;
        // distance, in cells, from q to the grid's extent along each axis
        let gap_x = (-fx).max(fx - nx as f64).max(0.0);
        let gap_y = (-fy).max(fy - ny as f64).max(0.0);
        let mut best = f64::INFINITY;
        let mut ring = 0isize;
        loop {
            let (x0, x1) = ((cx - ring).max(0), (cx + ring).min(nx - 1));
            for y in [cy - ring, cy + ring] {
                if (0..ny).contains(&y) {
                    for x in x0..=x1 {
                        self.scan(x, y, q, &mut best);
                    }
                }
                if ring == 0 {
                    break;
                }
            }
            let (y0, y1) = ((cy - ring + 1).max(0), (cy + ring - 1).min(ny - 1));
            if ring > 0 {
                for x in [cx - ring, cx + ring] {
                    if (0..nx).contains(&x) {
                        for y in y0..=y1 {
                            self.scan(x, y, q, &mut best);
                        }
                    }
                }
            }
            // lower bound on the distance to any cell outside the visited square
            let mut reach = f64::INFINITY;
            if cx - ring > 0 {
                reach = reach.min(libm::hypot(fx - (cx - ring) as f64, gap_y));
            }
            if cx + ring + 1 < nx {
                reach = reach.min(libm::hypot((cx + ring + 1) as f64 - fx, gap_y));
            }
            if cy - ring > 0 {
                reach = reach.min(libm::hypot(fy - (cy - ring) as f64, gap_x));
            }
            if cy + ring + 1 < ny {
                reach = reach.min(libm::hypot((cy + ring + 1) as f64 - fy, gap_x));
            }
            if reach == f64::INFINITY {
                return best;
            }
            let reach = reach * self.cell;
            if best <= reach * reach {
                return best;
            }
            ring += 1;
        }
    }
}

/// Directed Hausdorff distance from `generated` to `reference`, exact,
/// accelerated by a bucket grid over the reference set.
pub fn directed_hausdorff(generated: &[[f64; 2]], reference: &[[f64; 2]]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    let grid = Grid::new(reference);
    let worst = generated.iter().map(|&g| grid.nearest_sq(g)).fold(0.0f64, f64::max);
    Ok(libm::sqrt(worst))
}

/// Position points of flattened ball states, pooled over time and balls.
pub fn position_points(states: &[Vec<f64>]) -> Vec<[f64; 2]> {
    states.iter().flat_map(|s| s.chunks_exact(FEATURES).map(|c| [c[0], c[1]])).collect()
}

/// Shared evaluation stream for [`relbo`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelboStream {
    pub k: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

/// Negative per-dimension denoising error on a fixed `(σ_k, ε_k)` stream:
/// `−(1/K) Σ_k ‖D(x₀ + σ_k ε_k, σ_k) − x₀‖² / d`, with σ_k log-uniform and
/// data points `x₀` taken round-robin from `data`. Only comparable between
/// models evaluated on the same stream.
pub fn relbo<D: Denoiser + ?Sized>(model: &D, data: &[Vec<f64>], stream: RelboStream) -> Result<f64> {
    if stream.k == 0 {
        return Err(Error::InvalidParameter("relbo needs K >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = model.dim();
    let mut r = rng::seeded(stream.seed);
    let dist = crate::schedules::TrainTimeDist::LogUniformSigma {
        sigma_min: stream.sigma_min,
        sigma_max: stream.sigma_max,
    };
    const BLOCK: usize = 256;
    let mut total = 0.0;
    let mut k0 = 0;
    while k0 < stream.k {
        let m = BLOCK.min(stream.k - k0);
        let mut xs = Vec::with_capacity(m * d);
        let mut sigmas = Vec::with_capacity(m);
        for k in k0..k0 + m {
            let x0 = &data[k % data.len()];
            if x0.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
            }
            let s = dist.sample(&mut r);
            sigmas.push(s);
            for &xi in x0 {
                xs.push(xi + s * rng::normal(&mut r));
            }
        }
        let den = model.denoise_batch(&xs, &sigmas)?;
        for (j, row) in den.chunks_exact(d).enumerate() {
            let x0 = &data[(k0 + j) % data.len()];
            total += crate::linalg::dist_sq(row, x0) / d as f64;
        }
        k0 += m;
    }
    Ok(-total / stream.k as f64)
}
