//! Coarse-to-fine sampling of candidate ("ghost") 3D points.
//!
//! Detection proceeds in three stages: stage 1 samples across the whole
//! workspace box, stages 2 and 3 sample inside balls of shrinking diameter
//! centered on the previous stage's best-scored point (or, during training,
//! on the ground truth plus jitter). Points are uniform by default; a regular
//! lattice mode exists for ablation.

use crate::geom::{Aabb, Vec3};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GhostError {
    #[error("point budget {total} is below the stage count {stages}")]
    BudgetTooSmall { total: usize, stages: usize },
    #[error("stage diameters must be strictly decreasing and positive, got {0:?}")]
    BadDiameters(Vec<f64>),
    #[error("ghost batch is empty")]
    EmptyBatch,
}

/// Sampling region of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageRegion<F> {
    /// Stage 1: the whole workspace.
    Box(Aabb<F>),
    /// Stages 2–3: a ball around the running center.
    Ball { diameter: F },
}

/// Stage layout: the workspace plus one ball diameter per refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Ball diameters in meters for stages 2 and 3.
    pub diameters: [f64; 2],
    /// Sample on a regular lattice instead of uniformly (ablation).
    pub lattice: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { diameters: [0.16, 0.04], lattice: false }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), GhostError> {
        if self.diameters[0] <= 0.0 || self.diameters[1] <= 0.0 || self.diameters[1] >= self.diameters[0]
        {
            return Err(GhostError::BadDiameters(self.diameters.to_vec()));
        }
        Ok(())
    }

    pub fn region<F: Scalar>(&self, stage: usize, workspace: &Aabb<F>) -> StageRegion<F> {
        match stage {
            1 => StageRegion::Box(*workspace),
            s => StageRegion::Ball { diameter: F::from_f64(self.diameters[s - 2]) },
        }
    }
}

pub const NUM_STAGES: usize = 3;

/// Split a total point budget equally across stages, remainder to the
/// earliest stages: 1000 → (334, 333, 333).
pub fn allocate(total: usize, n_stages: usize) -> Result<Vec<usize>, GhostError> {
    if total < n_stages || n_stages == 0 {
        return Err(GhostError::BudgetTooSmall { total, stages: n_stages });
    }
    let base = total / n_stages;
    let rem = total % n_stages;
    Ok((0..n_stages).map(|i| base + usize::from(i < rem)).collect())
}

/// One stage's sampled candidate points.
#[derive(Debug, Clone)]
pub struct GhostBatch<F> {
    pub stage: usize,
    pub center: Vec3<F>,
    pub positions: Vec<Vec3<F>>,
}

/// Sample `n` points in the stage region. Uniform by default; with
/// `lattice`, points come from the finest regular grid containing at least
/// `n` in-region points, keeping the `n` nearest the region center. For a
/// box region the batch center is the box center regardless of `center`.
pub fn sample_stage<F: Scalar>(
    stage: usize,
    region: StageRegion<F>,
    center: Vec3<F>,
    n: usize,
    lattice: bool,
    rng: &mut impl Rng,
) -> Result<GhostBatch<F>, GhostError> {
    if n == 0 {
        return Err(GhostError::EmptyBatch);
    }
    let center = match region {
        StageRegion::Box(b) => b.center(),
        StageRegion::Ball { .. } => center,
    };
    let positions = if lattice {
        lattice_points(region, center, n)
    } else {
        uniform_points(region, center, n, rng)
    };
    Ok(GhostBatch { stage, center, positions })
}

fn uniform_points<F: Scalar>(
    region: StageRegion<F>,
    center: Vec3<F>,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Vec3<F>> {
    let mut out = Vec::with_capacity(n);
    match region {
        StageRegion::Box(b) => {
            for _ in 0..n {
                out.push(Vec3::new(
                    sample_range(rng, b.min.x, b.max.x),
                    sample_range(rng, b.min.y, b.max.y),
                    sample_range(rng, b.min.z, b.max.z),
                ));
            }
        }
        StageRegion::Ball { diameter } => {
            let r = diameter / F::from_f64(2.0);
            // Rejection sampling from the bounding cube (hit rate π/6 ≈ 0.52).
            while out.len() < n {
                let p = Vec3::new(
                    sample_range(rng, -r, r),
                    sample_range(rng, -r, r),
                    sample_range(rng, -r, r),
                );
                if p.dot(p) <= r * r {
                    out.push(center + p);
                }
            }
        }
    }
    out
}

fn sample_range<F: Scalar>(rng: &mut impl Rng, lo: F, hi: F) -> F {
    let u: f64 = rng.gen_range(0.0..1.0);
    lo + (hi - lo) * F::from_f64(u)
}

/// Deterministic lattice fallback: refine an m×m×m grid of cell centers over
/// the region's bounding box until at least `n` fall inside the region, then
/// keep the `n` nearest the center (ties by lattice index).
fn lattice_points<F: Scalar>(region: StageRegion<F>, center: Vec3<F>, n: usize) -> Vec<Vec3<F>> {
    let (lo, hi) = match region {
        StageRegion::Box(b) => (b.min, b.max),
        StageRegion::Ball { diameter } => {
            let r = diameter / F::from_f64(2.0);
            (center - Vec3::splat(r), center + Vec3::splat(r))
        }
    };
    let mut m = (n as f64).cbrt().ceil() as usize;
    loop {
        let mut pts = Vec::new();
        let mf = F::from_f64(m as f64);
        for iz in 0..m {
            for iy in 0..m {
                for ix in 0..m {
                    let frac = |i: usize| F::from_f64(i as f64 + 0.5) / mf;
                    let p = Vec3::new(
                        lo.x + (hi.x - lo.x) * frac(ix),
                        lo.y + (hi.y - lo.y) * frac(iy),
                        lo.z + (hi.z - lo.z) * frac(iz),
                    );
                    let inside = match region {
                        StageRegion::Box(_) => true,
                        StageRegion::Ball { diameter } => {
                            let r = diameter / F::from_f64(2.0);
                            (p - center).dot(p - center) <= r * r
                        }
                    };
                    if inside {
                        pts.push(p);
                    }
                }
            }
        }
        if pts.len() >= n {
            let mut order: Vec<(F, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((*p - center).dot(*p - center), i))
                .collect();
            order.sort_unstable_by(|a, b| {
                a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
            });
            return order.into_iter().take(n).map(|(_, i)| pts[i]).collect();
        }
        m += 1;
    }
}

/// Index of the ghost nearest to the ground truth (Euclidean), ties broken
/// by the lowest index — the cross-entropy target of a stage.
pub fn nearest_index<F: Scalar>(positions: &[Vec3<F>], gt: Vec3<F>) -> Result<usize, GhostError> {
    if positions.is_empty() {
        return Err(GhostError::EmptyBatch);
    }
    let mut best = 0;
    let mut best_d = (positions[0] - gt).dot(positions[0] - gt);
    for (i, p) in positions.iter().enumerate().skip(1) {
        let d = (*p - gt).dot(*p - gt);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Training-time stage center: the ground truth perturbed by uniform noise
/// of magnitude up to half the stage radius (teacher forcing with jitter).
pub fn jittered_center<F: Scalar>(gt: Vec3<F>, diameter: F, rng: &mut impl Rng) -> Vec3<F> {
    let max_r = diameter / F::from_f64(4.0); // half of the stage radius
    loop {
        let p = Vec3::new(
            sample_range(rng, -max_r, max_r),
            sample_range(rng, -max_r, max_r),
            sample_range(rng, -max_r, max_r),
        );
        if p.dot(p) <= max_r * max_r {
            return gt + p;
        }
    }
}
