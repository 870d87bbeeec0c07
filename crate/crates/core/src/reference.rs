//! Reference measures `ν^u_{i,x}`: normalized Lebesgue measure on the base
//! unstable plaque, lifted to the strong-unstable plaque through `x`.

use crate::numerics::ks_2d;
use crate::partition::{Chart, MarkovPartition, PartitionError};
use crate::skew::{LeafSegment, SkewError, SkewPoint, SkewSystem};
use crate::stream_rng;
use crate::torus::TorusPoint;
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct ReferenceMeasure {
    pub leaf: LeafSegment,
}

/// Outcome of [`check_constant_jacobian`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobianCheck {
    pub from: usize,
    pub to: usize,
    pub min: f64,
    pub max: f64,
    pub weight: f64,
}

impl JacobianCheck {
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

impl ReferenceMeasure {
    /// Reference measure on the plaque of rectangle `rect` through `x`.
    pub fn new(sys: &SkewSystem, part: &MarkovPartition, rect: usize, x: &SkewPoint) -> Result<Self, SkewError> {
        Ok(ReferenceMeasure { leaf: sys.leaf_segment(part, rect, x)? })
    }

    /// Reference measure on a uniformly chosen interior plaque with a uniform
    /// marked fiber value.
    pub fn random<R: Rng>(sys: &SkewSystem, part: &MarkovPartition, rng: &mut R) -> Result<Self, SkewError> {
        loop {
            let base = TorusPoint::from_unit(rng.random(), rng.random());
            let loc = part.locate(&base);
            if loc.interior {
                let x = SkewPoint::new(base, rng.random());
                return Self::new(sys, part, loc.index, &x);
            }
        }
    }

    pub fn rect(&self) -> usize {
        self.leaf.rect()
    }

    pub fn length(&self) -> f64 {
        self.leaf.plaque.length
    }

    /// One draw: uniform base coordinate, fiber from the leaf.
    pub fn sample<R: Rng>(&self, part: &MarkovPartition, rng: &mut R) -> SkewPoint {
        let u = rng.random::<f64>() * self.length();
        self.leaf.point_at(part, u)
    }

    /// Draws as `(u, point)` pairs.
    pub fn sample_n<R: Rng>(&self, part: &MarkovPartition, rng: &mut R, count: usize) -> Vec<(f64, SkewPoint)> {
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * self.length();
                (u, self.leaf.point_at(part, u))
            })
            .collect()
    }
}

/// Mass of a cylinder under the reference measure of its first rectangle:
/// the product of sub-cylinder weights along the word.
pub fn cylinder_mass(part: &MarkovPartition, word: &[usize]) -> Result<f64, PartitionError> {
    let (&first, _) = word.split_first().ok_or(PartitionError::Empty)?;
    if first >= part.len() {
        return Err(PartitionError::BadIndex(first));
    }
    let mut mass = 1.0;
    for w in word.windows(2) {
        mass *= part.weight(w[0], w[1]).ok_or(PartitionError::Inadmissible(w[0], w[1]))?;
    }
    Ok(mass)
}

/// 2D KS distance between `ν^u_x` pushed by the center-stable holonomy onto
/// the plaque of `y` and direct samples of `ν^u_y`, in `(u, θ)` coordinates.
/// Four direct samples are drawn per pushed sample.
pub fn check_cs_invariance(
    sys: &SkewSystem,
    part: &MarkovPartition,
    i: usize,
    x: &SkewPoint,
    y: &SkewPoint,
    n_samples: usize,
    seed: u64,
) -> Result<f64, SkewError> {
    for q in [x, y] {
        let loc = part.locate(&q.base);
        if loc.index != i {
            return Err(SkewError::MismatchedRectangles(i, loc.index));
        }
    }
    let mx = ReferenceMeasure::new(sys, part, i, x)?;
    let my = ReferenceMeasure::new(sys, part, i, y)?;
    let mut rng = stream_rng(seed, 0);
    let pushed: Vec<(f64, f64)> = mx
        .sample_n(part, &mut rng, n_samples)
        .into_iter()
        .map(|(_, z)| {
            let u = part.chart(i, &z.base).u;
            (u, my.leaf.theta_at_u(u))
        })
        .collect();
    let direct: Vec<(f64, f64)> =
        my.sample_n(part, &mut rng, 4 * n_samples).into_iter().map(|(u, z)| (u, z.theta)).collect();
    Ok(ks_2d(&pushed, &direct))
}

/// Mass `ν^u_{i,x}(f^{-1} ξ^u_j(f x))` for `n_plaques` random `x` in
/// `ℛ_i ∩ A^{-1}ℛ_j`, from the exact image of the plaque endpoints.
pub fn check_constant_jacobian(
    part: &MarkovPartition,
    i: usize,
    j: usize,
    n_plaques: usize,
    seed: u64,
) -> Result<JacobianCheck, PartitionError> {
    let t = *part.transition(i, j).ok_or(PartitionError::Inadmissible(i, j))?;
    let cyl = part.cylinder(&[i, j])?;
    let ri = *part.rect(i);
    let lj = part.rect(j).l_u;
    let auto = part.auto();
    let mut rng = stream_rng(seed, 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..n_plaques {
        let s = rng.random::<f64>() * ri.l_s;
        let u = cyl.u_lo + rng.random::<f64>() * cyl.width();
        let x = part.point_at(i, Chart { u, s });
        let fx = auto.apply_auto(&x, 1)?;
        let cx = part.chart(j, &fx);
        let ends: Vec<f64> = [0.0, ri.l_u]
            .iter()
            .map(|&e| {
                let p = auto.apply_auto(&part.point_at(i, Chart { u: e, s }), 1).expect("A^1 is cached");
                cx.u + auto.relative(&fx, &p).u
            })
            .collect();
        let (a, b) = (ends[0].min(ends[1]), ends[0].max(ends[1]));
        let mass = (b.min(lj) - a.max(0.0)).max(0.0) / (b - a);
        lo = lo.min(mass);
        hi = hi.max(mass);
    }
    Ok(JacobianCheck { from: i, to: j, min: lo, max: hi, weight: t.weight })
}
