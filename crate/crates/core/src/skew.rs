//! The skew product `f(x, θ) = (Ax, g_x(θ))` on `T² × S¹` with
//! `g_x(θ) = θ + α + δ sin 2πx₁ − (κ/2π) sin 2πθ`.
//!
//! Strong-unstable leaves are graphs `θ^u` over lines parallel to `e_u`. They
//! are evaluated by pulling the marked fiber value back `N` steps along the
//! base orbit and pushing it forward along the backward orbit of the target
//! point, which on the unstable line is `A^{-k}y = A^{-k}x + (σ/λ)^k t e_u`.

use crate::partition::{Chart, MarkovPartition, PartitionError, Plaque, PlaqueKind};
use crate::reference::ReferenceMeasure;
use crate::stream_rng;
use crate::torus::{reduce, ToralAutomorphism, TorusError, TorusPoint};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::TAU;
use thiserror::Error;

/// Default truncation depth for leaf evaluation.
pub const DEFAULT_HOLONOMY_DEPTH: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkewError {
    #[error("fiber not diffeo: kappa = {0} must lie in [0, 1)")]
    FiberNotDiffeo(f64),
    #[error("not partially hyperbolic: 1 + kappa = {fiber} is not below lambda_u = {lambda}")]
    NotPartiallyHyperbolic { fiber: f64, lambda: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("increase depth: truncation bound {bound:.2e} exceeds tolerance {tol:.2e}")]
    IncreaseDepth { bound: f64, tol: f64 },
    #[error("target is {0:.2e} off the unstable line")]
    OffUnstableLine(f64),
    #[error("points lie in different rectangles ({0} and {1})")]
    MismatchedRectangles(usize, usize),
    #[error("fiber inversion did not converge")]
    RootFinder,
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Torus(#[from] TorusError),
}

/// Point of `M = T² × S¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkewPoint {
    pub base: TorusPoint,
    pub theta: f64,
}

impl SkewPoint {
    pub fn new(base: TorusPoint, theta: f64) -> Self {
        SkewPoint { base, theta: reduce(theta) }
    }

    /// Product distance with the circle metric on the fiber.
    pub fn distance(&self, other: &SkewPoint) -> f64 {
        let dt = circle_dist(self.theta, other.theta);
        self.base.distance(&other.base).hypot(dt)
    }
}

/// Distance on `R/Z`.
pub fn circle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Parameters of the one-harmonic fiber family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fiber {
    pub kappa: f64,
    pub delta: f64,
    pub alpha: f64,
}

impl Fiber {
    /// `g_x(θ)` without reduction mod 1.
    #[inline]
    pub fn lift(&self, x1: f64, theta: f64) -> f64 {
        theta + self.alpha + self.delta * (TAU * x1).sin() - self.kappa / TAU * (TAU * theta).sin()
    }
}

#[derive(Debug, Clone)]
pub struct SkewSystem {
    auto: ToralAutomorphism,
    fiber: Fiber,
    omega: f64,
    leaf_lipschitz: f64,
    holonomy_depth: usize,
}

/// Outcome of [`SkewSystem::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub lambda_u: f64,
    pub omega: f64,
    pub fiber_derivative_max: f64,
    pub leaf_lipschitz: f64,
    /// `π ∘ f = A ∘ π` checked bit-for-bit on sampled points.
    pub h1_violations: usize,
    /// Leaves sampled for the graph check.
    pub h2_samples: usize,
    /// Sampled leaf pairs violating the Lipschitz graph bound.
    pub h2_violations: usize,
}

/// Birkhoff estimate of the fiber Lyapunov exponent.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExponentEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub stable_lift: f64,
    pub orbits: usize,
    /// Negative beyond three standard errors.
    pub contracting: bool,
}

impl SkewSystem {
    pub fn new(auto: ToralAutomorphism, kappa: f64, delta: f64, alpha: f64) -> Result<Self, SkewError> {
        for (name, v) in [("kappa", kappa), ("delta", delta), ("alpha", alpha)] {
            if !v.is_finite() {
                return Err(SkewError::InvalidParameter(format!("{name} = {v} is not finite")));
            }
        }
        if !(0.0..1.0).contains(&kappa) {
            return Err(SkewError::FiberNotDiffeo(kappa));
        }
        if delta < 0.0 {
            return Err(SkewError::InvalidParameter(format!("delta = {delta} is negative")));
        }
        let lam = auto.lambda_u();
        if 1.0 + kappa >= lam {
            return Err(SkewError::NotPartiallyHyperbolic { fiber: 1.0 + kappa, lambda: lam });
        }
        let omega = (1.0 / lam).max((1.0 + kappa) / lam);
        let leaf_lipschitz = TAU * delta * auto.e_u()[0].abs() / (lam - 1.0 - kappa);
        Ok(SkewSystem {
            auto,
            fiber: Fiber { kappa, delta, alpha },
            omega,
            leaf_lipschitz,
            holonomy_depth: DEFAULT_HOLONOMY_DEPTH,
        })
    }

    pub fn with_holonomy_depth(mut self, depth: usize) -> Self {
        self.holonomy_depth = depth;
        self
    }

    pub fn auto(&self) -> &ToralAutomorphism {
        &self.auto
    }

    pub fn kappa(&self) -> f64 {
        self.fiber.kappa
    }

    pub fn delta(&self) -> f64 {
        self.fiber.delta
    }

    pub fn alpha(&self) -> f64 {
        self.fiber.alpha
    }

    pub fn fiber_params(&self) -> Fiber {
        self.fiber
    }

    /// Domination constant `max(1/λ, (1+κ)/λ)`.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Bound on `|dθ^u/du|` for strong-unstable leaves.
    pub fn leaf_lipschitz(&self) -> f64 {
        self.leaf_lipschitz
    }

    pub fn holonomy_depth(&self) -> usize {
        self.holonomy_depth
    }

    /// Per-step contraction of leaf truncation errors.
    pub fn truncation_ratio(&self) -> f64 {
        (1.0 + self.fiber.kappa) / self.auto.lambda_u()
    }

    /// `g_x(θ)` without reduction mod 1.
    #[inline]
    pub fn fiber_lift(&self, x1: f64, theta: f64) -> f64 {
        self.fiber.lift(x1, theta)
    }

    #[inline]
    pub fn fiber(&self, x1: f64, theta: f64) -> f64 {
        reduce(self.fiber_lift(x1, theta))
    }

    /// `g_x'(θ) = 1 − κ cos 2πθ`.
    #[inline]
    pub fn fiber_derivative(&self, theta: f64) -> f64 {
        1.0 - self.fiber.kappa * (TAU * theta).cos()
    }

    /// Solve `g_x(τ) = y` for the lift `τ` nearest the rotation guess.
    pub fn fiber_inverse_lift(&self, x1: f64, y: f64) -> Result<f64, SkewError> {
        let c = y - self.fiber.alpha - self.fiber.delta * (TAU * x1).sin();
        if self.fiber.kappa == 0.0 {
            return Ok(c);
        }
        let k = self.fiber.kappa / TAU;
        let h = |t: f64| t - k * (TAU * t).sin() - c;
        let (mut lo, mut hi) = (c - k, c + k);
        for _ in 0..6 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..100 {
            let v = h(t);
            if v > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let mut next = t - v / self.fiber_derivative(t);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - t).abs();
            t = next;
            if step < 1e-15 || hi - lo < 1e-15 {
                return Ok(t);
            }
        }
        Err(SkewError::RootFinder)
    }

    pub fn fiber_inverse(&self, x1: f64, y: f64) -> Result<f64, SkewError> {
        self.fiber_inverse_lift(x1, y).map(reduce)
    }

    /// `f^n(p)`. The base coordinate equals `A^n` of the base exactly.
    pub fn apply(&self, p: &SkewPoint, n: i64) -> Result<SkewPoint, SkewError> {
        let mut theta = p.theta;
        let mut x = p.base;
        if n >= 0 {
            for next in self.auto.orbit(&p.base, true).take(n as usize) {
                theta = self.fiber(x.x1(), theta);
                x = next;
            }
        } else {
            for prev in self.auto.orbit(&p.base, false).take(n.unsigned_abs() as usize) {
                theta = self.fiber_inverse(prev.x1(), theta)?;
                x = prev;
            }
        }
        Ok(SkewPoint { base: x, theta })
    }

    /// One forward step.
    #[inline]
    pub fn step(&self, p: &SkewPoint) -> SkewPoint {
        let base = self.auto.apply_auto(&p.base, 1).expect("A^1 is cached");
        SkewPoint { base, theta: self.fiber(p.base.x1(), p.theta) }
    }

    /// Leaf through `p` truncated at `depth` backward steps.
    pub fn leaf(&self, p: &SkewPoint, depth: usize) -> Result<LeafGraph, SkewError> {
        let mut xs = Vec::with_capacity(depth);
        let mut thetas = Vec::with_capacity(depth);
        let mut theta = p.theta;
        for z in self.auto.orbit(&p.base, false).take(depth) {
            theta = self.fiber_inverse_lift(z.x1(), theta)?;
            xs.push(z.x1());
            thetas.push(theta);
        }
        let ratio = self.auto.unstable_eigenvalue().recip();
        let eu1 = self.auto.e_u()[0];
        let shift = (1..=depth as i32).map(|k| ratio.powi(k) * eu1).collect();
        Ok(LeafGraph { marked: *p, fiber: self.fiber, xs, thetas, shift })
    }

    /// Leaf of `p` restricted to the unstable plaque of rectangle `rect`.
    pub fn leaf_segment(&self, part: &MarkovPartition, rect: usize, p: &SkewPoint) -> Result<LeafSegment, SkewError> {
        let c = part.chart(rect, &p.base);
        let plaque = part.plaque_in(rect, c, PlaqueKind::Unstable);
        Ok(LeafSegment { graph: self.leaf(p, self.holonomy_depth)?, plaque })
    }

    /// Leaf segment through `p` in the rectangle that contains it.
    pub fn leaf_through(&self, part: &MarkovPartition, p: &SkewPoint) -> Result<LeafSegment, SkewError> {
        let plaque = part.unstable_plaque(&p.base)?;
        Ok(LeafSegment { graph: self.leaf(p, self.holonomy_depth)?, plaque })
    }

    /// A-priori truncation error of a leaf evaluated at distance `t`.
    pub fn truncation_bound(&self, t: f64, depth: usize) -> f64 {
        self.leaf_lipschitz * t.abs() * self.truncation_ratio().powi(depth as i32)
    }

    /// Fiber value of the strong-unstable leaf of `p` over `y`, with its
    /// truncation bound.
    pub fn unstable_holonomy(
        &self,
        p: &SkewPoint,
        y: &TorusPoint,
        depth: usize,
        tol: f64,
    ) -> Result<(f64, f64), SkewError> {
        let e = self.auto.relative(&p.base, y);
        if e.s.abs() > 1e-9 {
            return Err(SkewError::OffUnstableLine(e.s));
        }
        let bound = self.truncation_bound(e.u, depth);
        if bound > tol {
            return Err(SkewError::IncreaseDepth { bound, tol });
        }
        Ok((self.leaf(p, depth)?.theta_at(e.u), bound))
    }

    /// Center-stable holonomy `ξ^u_i(x) → ξ^u_i(y)` evaluated at `z`.
    pub fn cs_holonomy(
        &self,
        part: &MarkovPartition,
        x: &SkewPoint,
        y: &SkewPoint,
        z: &SkewPoint,
    ) -> Result<SkewPoint, SkewError> {
        let ix = part.locate(&x.base).index;
        for q in [y, z] {
            let iq = part.locate(&q.base).index;
            if iq != ix {
                return Err(SkewError::MismatchedRectangles(ix, iq));
            }
        }
        let leaf = self.leaf_segment(part, ix, y)?;
        Ok(leaf.point_at(part, part.chart(ix, &z.base).u))
    }

    /// Validate domination and sample the factor conditions. With a partition,
    /// leaves through `samples` random points are checked against the graph
    /// Lipschitz bound.
    pub fn validate(&self, part: Option<&MarkovPartition>, samples: usize, seed: u64) -> ValidationReport {
        let mut rng = stream_rng(seed, 0);
        let mut h1 = 0;
        let mut h2 = 0;
        for _ in 0..samples {
            let p = SkewPoint::new(TorusPoint::from_unit(rng.random(), rng.random()), rng.random());
            let n = rng.random_range(-20i64..=20);
            match self.apply(&p, n) {
                Ok(q) if q.base == self.auto.apply_auto(&p.base, n).expect("cached") => {}
                _ => h1 += 1,
            }
            if let Some(part) = part {
                let i = rng.random_range(0..part.len());
                let r = part.rect(i);
                let c = Chart { u: rng.random::<f64>() * r.l_u, s: rng.random::<f64>() * r.l_s };
                let q = SkewPoint::new(part.point_at(i, c), rng.random());
                let Ok(leaf) = self.leaf_segment(part, i, &q) else {
                    h2 += 1;
                    continue;
                };
                let (u1, u2) = (rng.random::<f64>() * r.l_u, rng.random::<f64>() * r.l_u);
                let d = circle_dist(leaf.theta_at_u(u1), leaf.theta_at_u(u2));
                let trunc = self.truncation_bound(r.l_u, self.holonomy_depth);
                if d > self.leaf_lipschitz * (u1 - u2).abs() + 2.0 * trunc + 1e-12 {
                    h2 += 1;
                }
            }
        }
        ValidationReport {
            lambda_u: self.auto.lambda_u(),
            omega: self.omega,
            fiber_derivative_max: 1.0 + self.fiber.kappa,
            leaf_lipschitz: self.leaf_lipschitz,
            h1_violations: h1,
            h2_samples: if part.is_some() { samples } else { 0 },
            h2_violations: h2,
        }
    }

    /// Birkhoff averages of `log g'` along orbits started from reference
    /// measures on random plaques, discarding `burn_in` steps.
    pub fn center_exponent(
        &self,
        part: &MarkovPartition,
        n_orbits: usize,
        n_steps: usize,
        burn_in: usize,
        seed: u64,
    ) -> Result<ExponentEstimate, SkewError> {
        const CHUNK: usize = 32;
        let chunks = n_orbits.div_ceil(CHUNK);
        let per_orbit: Vec<f64> = (0..chunks)
            .into_par_iter()
            .map(|c| -> Result<Vec<f64>, SkewError> {
                let mut rng = stream_rng(seed, c as u64);
                let count = CHUNK.min(n_orbits - c * CHUNK);
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let m = ReferenceMeasure::random(self, part, &mut rng)?;
                    let mut p = m.sample(part, &mut rng);
                    let mut acc = 0.0;
                    for k in 0..n_steps {
                        if k >= burn_in {
                            acc += self.fiber_derivative(p.theta).ln();
                        }
                        p = self.step(&p);
                    }
                    out.push(acc / (n_steps - burn_in).max(1) as f64);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        let (mean, stderr) = crate::numerics::mean_stderr(&per_orbit);
        Ok(ExponentEstimate {
            mean,
            stderr,
            stable_lift: -self.auto.lambda_u().ln(),
            orbits: per_orbit.len(),
            contracting: mean + 3.0 * stderr < -1e-3,
        })
    }
}

/// Strong-unstable leaf through a marked point, as a graph over the unstable
/// line of its base, parametrized by the signed `e_u` displacement `t`.
///
/// Only the offset from the marked backward orbit is propagated forward, so
/// roundoff is relative to the offset rather than amplified along the orbit.
#[derive(Debug, Clone)]
pub struct LeafGraph {
    pub marked: SkewPoint,
    fiber: Fiber,
    xs: Vec<f64>,
    thetas: Vec<f64>,
    shift: Vec<f64>,
}

/// `sin 2π(a + h) − sin 2πa` without cancellation.
#[inline]
fn sin_diff(a: f64, h: f64) -> f64 {
    2.0 * (TAU * (a + 0.5 * h)).cos() * (std::f64::consts::PI * h).sin()
}

impl LeafGraph {
    pub fn depth(&self) -> usize {
        self.xs.len()
    }

    /// Fiber offset from the marked point at displacement `t`.
    pub fn offset_at(&self, t: f64) -> f64 {
        let f = &self.fiber;
        let mut d = 0.0;
        for k in (0..self.xs.len()).rev() {
            let dx = self.shift[k] * t;
            d += f.delta * sin_diff(self.xs[k], dx) - f.kappa / TAU * sin_diff(self.thetas[k], d);
        }
        d
    }

    /// Lifted fiber coordinate at displacement `t` (continuous in `t`).
    pub fn theta_lift_at(&self, t: f64) -> f64 {
        self.marked.theta + self.offset_at(t)
    }

    /// Fiber coordinate at displacement `t` along `e_u`.
    pub fn theta_at(&self, t: f64) -> f64 {
        reduce(self.theta_lift_at(t))
    }
}

/// Leaf graph restricted to one unstable plaque.
#[derive(Debug, Clone)]
pub struct LeafSegment {
    pub graph: LeafGraph,
    pub plaque: Plaque,
}

impl LeafSegment {
    pub fn rect(&self) -> usize {
        self.plaque.rect
    }

    pub fn theta_at_u(&self, u: f64) -> f64 {
        self.graph.theta_at(u - self.plaque.offset)
    }

    pub fn point_at(&self, part: &MarkovPartition, u: f64) -> SkewPoint {
        SkewPoint { base: part.plaque_point(&self.plaque, u), theta: self.theta_at_u(u) }
    }
}

/// Center-stable cross-section `ξ^{cs}_j(a)`: the stable plaque of rectangle
/// `j` at chart coordinate `u`, times the full fiber circle.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CrossSection {
    pub rect: usize,
    pub anchor: SkewPoint,
    pub u: f64,
    pub plaque: Plaque,
}

impl CrossSection {
    /// Section through an interior anchor point.
    pub fn through(part: &MarkovPartition, anchor: SkewPoint) -> Result<Self, SkewError> {
        let plaque = part.stable_plaque(&anchor.base)?;
        Ok(CrossSection { rect: plaque.rect, anchor, u: plaque.cross, plaque })
    }

    /// Section of rectangle `rect` at chart coordinate `u`.
    pub fn at(part: &MarkovPartition, rect: usize, u: f64) -> Self {
        let r = part.rect(rect);
        let c = Chart { u, s: r.l_s / 2.0 };
        let anchor = SkewPoint::new(part.point_at(rect, c), 0.0);
        CrossSection { rect, anchor, u, plaque: part.plaque_in(rect, c, PlaqueKind::Stable) }
    }

    /// Whether `p` lies on the section (base on the stable plaque).
    pub fn contains(&self, part: &MarkovPartition, p: &TorusPoint, tol: f64) -> bool {
        let c = part.chart(self.rect, p);
        (c.u - self.u).abs() <= tol && c.s >= -tol && c.s <= self.plaque.length + tol
    }
}

/// Unique intersection of a leaf segment in `ℳ_j` with the section `S ⊂ ℳ_j`.
pub fn section_hit(part: &MarkovPartition, section: &CrossSection, leaf: &LeafSegment) -> Result<SkewPoint, SkewError> {
    if leaf.rect() != section.rect {
        return Err(SkewError::MismatchedRectangles(section.rect, leaf.rect()));
    }
    Ok(SkewPoint {
        base: part.point_at(section.rect, Chart { u: section.u, s: leaf.plaque.cross }),
        theta: leaf.theta_at_u(section.u),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys(kappa: f64, delta: f64, alpha: f64) -> SkewSystem {
        SkewSystem::new(ToralAutomorphism::cat_map(), kappa, delta, alpha).unwrap()
    }

    fn random_point(rng: &mut impl Rng) -> SkewPoint {
        SkewPoint::new(TorusPoint::from_unit(rng.random(), rng.random()), rng.random())
    }

    #[test]
    fn validation_examples() {
        let s = sys(0.5, 0.05, 0.0);
        assert!((s.omega() - 1.5 / 2.618_033_988_7).abs() < 1e-9);
        assert!((s.omega() - 0.573).abs() < 1e-3);
        let p = sys(0.0, 0.0, 0.0);
        assert!((p.omega() - 1.0 / p.auto().lambda_u()).abs() < 1e-15);
        let e = SkewSystem::new(ToralAutomorphism::cat_map(), 1.8, 0.0, 0.0).unwrap_err();
        assert!(e.to_string().contains("fiber not diffeo"));
        let golden = crate::torus::eigen_data([[1, 1], [1, 0]]).unwrap();
        let e = SkewSystem::new(golden, 0.7, 0.0, 0.0).unwrap_err();
        assert!(e.to_string().contains("not partially hyperbolic"));
        let part = MarkovPartition::builtin_cat();
        let rep = s.validate(Some(&part), 300, 1);
        assert_eq!(rep.h1_violations + rep.h2_violations, 0);
    }

    #[test]
    fn fixed_point_and_inverse() {
        let s = sys(0.5, 0.0, 0.0);
        let o = SkewPoint::new(TorusPoint::from_unit(0.0, 0.0), 0.0);
        assert_eq!(s.apply(&o, 7).unwrap(), o);
        let c = sys(0.5, 0.05, 0.05);
        let mut rng = stream_rng(5, 0);
        for _ in 0..500 {
            let p = random_point(&mut rng);
            let q = c.apply(&p, 3).unwrap();
            assert_eq!(q.base, c.auto().apply_auto(&p.base, 3).unwrap());
            let back = c.apply(&q, -3).unwrap();
            assert!(back.distance(&p) < 1e-10);
        }
    }

    #[test]
    fn fiber_inverse_is_accurate() {
        let c = sys(0.9, 0.3, 0.2);
        let mut rng = stream_rng(6, 0);
        for _ in 0..2000 {
            let (x, y): (f64, f64) = (rng.random(), rng.random());
            let t = c.fiber_inverse(x, y).unwrap();
            assert!(circle_dist(c.fiber(x, t), y) < 1e-13);
        }
    }

    #[test]
    fn holonomy_examples() {
        let prod = sys(0.5, 0.0, 0.1);
        let mut rng = stream_rng(7, 0);
        let p = random_point(&mut rng);
        let eu = prod.auto().e_u();
        let y = p.base.translate([0.05 * eu[0], 0.05 * eu[1]]);
        let (th, _) = prod.unstable_holonomy(&p, &y, 40, 1e-6).unwrap();
        assert!(circle_dist(th, p.theta) < 1e-14);

        let c = sys(0.5, 0.05, 0.05);
        let (th, _) = c.unstable_holonomy(&p, &p.base, 40, 1e-6).unwrap();
        assert!(circle_dist(th, p.theta) < 1e-14);
        let (a, _) = c.unstable_holonomy(&p, &y, 20, 1.0).unwrap();
        let (b, _) = c.unstable_holonomy(&p, &y, 40, 1.0).unwrap();
        assert!(circle_dist(a, b) < (1.5f64 / 2.618_033_988_7).powi(20));
        assert!(c.unstable_holonomy(&p, &y, 2, 1e-12).unwrap_err().to_string().contains("increase depth"));
        let es = c.auto().e_s();
        let off = p.base.translate([0.01 * es[0], 0.01 * es[1]]);
        assert!(c.unstable_holonomy(&p, &off, 40, 1.0).is_err());
    }

    #[test]
    fn leaf_is_invariant() {
        let c = sys(0.5, 0.05, 0.05);
        let mut rng = stream_rng(8, 0);
        let eu = c.auto().e_u();
        for _ in 0..100 {
            let p = random_point(&mut rng);
            let t = rng.random_range(-0.1..0.1);
            let leaf = c.leaf(&p, 40).unwrap();
            let q = SkewPoint::new(p.base.translate([t * eu[0], t * eu[1]]), leaf.theta_at(t));
            let fq = c.step(&q);
            let fp = c.step(&p);
            let image_leaf = c.leaf(&fp, 40).unwrap();
            let lam = c.auto().lambda_u();
            let expect = image_leaf.theta_at(lam * t);
            let bound = 2.0 * c.truncation_bound(lam * t, 39) + 1e-12;
            assert!(circle_dist(fq.theta, expect) <= bound);
        }
    }

    #[test]
    fn cs_holonomy_examples() {
        let part = MarkovPartition::builtin_cat();
        let c = sys(0.5, 0.05, 0.05);
        let i = 12;
        let r = *part.rect(i);
        let mut rng = stream_rng(9, 0);
        let pick = |rng: &mut ChaChaLike| {
            let ch = Chart { u: rng.random::<f64>() * r.l_u, s: rng.random::<f64>() * r.l_s };
            SkewPoint::new(part.point_at(i, ch), rng.random())
        };
        let x = pick(&mut rng);
        let y = pick(&mut rng);
        let lx = c.leaf_segment(&part, i, &x).unwrap();
        let ly = c.leaf_segment(&part, i, &y).unwrap();
        for _ in 0..200 {
            let z = lx.point_at(&part, rng.random::<f64>() * r.l_u);
            assert!(c.cs_holonomy(&part, &x, &x, &z).unwrap().distance(&z) < 1e-12);
            let w = c.cs_holonomy(&part, &x, &y, &z).unwrap();
            let back = c.cs_holonomy(&part, &y, &x, &w).unwrap();
            assert!(back.distance(&z) < 1e-8);
            // Base is W^u(πy) ∩ W^s(πz).
            let b = c.auto().bracket(&z.base, &y.base, 0.25).unwrap();
            assert!(w.base.distance(&b) < 1e-10);
            assert!(circle_dist(w.theta, ly.theta_at_u(part.chart(i, &w.base).u)) < 1e-12);
        }
        let p = MarkovPartition::builtin_cat();
        let prod = sys(0.5, 0.0, 0.0);
        let z = lx.point_at(&p, 0.3 * r.l_u);
        let w = prod.cs_holonomy(&p, &x, &y, &z).unwrap();
        assert!(circle_dist(w.theta, y.theta) < 1e-14);
        let other = SkewPoint::new(p.rect(i + 1).center, 0.0);
        assert!(prod.cs_holonomy(&p, &x, &other, &z).is_err());
    }

    type ChaChaLike = rand_chacha::ChaCha8Rng;

    #[test]
    fn section_hits_lie_on_both() {
        let part = MarkovPartition::builtin_cat();
        let c = sys(0.5, 0.05, 0.05);
        let j = 20;
        let r = *part.rect(j);
        let sec = CrossSection::at(&part, j, 0.4 * r.l_u);
        let mut rng = stream_rng(10, 0);
        for _ in 0..1000 {
            let ch = Chart { u: rng.random::<f64>() * r.l_u, s: rng.random::<f64>() * r.l_s };
            let p = SkewPoint::new(part.point_at(j, ch), rng.random());
            let leaf = c.leaf_segment(&part, j, &p).unwrap();
            let q = section_hit(&part, &sec, &leaf).unwrap();
            assert!(sec.contains(&part, &q.base, 1e-8));
            let on_leaf = leaf.point_at(&part, part.chart(j, &q.base).u);
            assert!(on_leaf.distance(&q) < 1e-8);
        }
        let anchor_leaf = c.leaf_segment(&part, j, &sec.anchor).unwrap();
        let q = section_hit(&part, &sec, &anchor_leaf).unwrap();
        assert!(q.distance(&sec.anchor) < 1e-12);
        let wrong = c.leaf_segment(&part, j + 1, &SkewPoint::new(part.rect(j + 1).center, 0.0)).unwrap();
        assert!(section_hit(&part, &sec, &wrong).is_err());
    }

    #[test]
    fn center_exponent_examples() {
        let part = MarkovPartition::builtin_cat();
        let prod = sys(0.5, 0.0, 0.0);
        let e = prod.center_exponent(&part, 64, 400, 100, 1).unwrap();
        assert!((e.mean - 0.5f64.ln()).abs() < 1e-3, "{e:?}");
        assert!(e.contracting);
        assert!((e.stable_lift + 2.618_033_988_7f64.ln()).abs() < 1e-9);
        let iso = sys(0.0, 0.0, (5f64.sqrt() - 1.0) / 2.0);
        let e = iso.center_exponent(&part, 64, 200, 50, 1).unwrap();
        assert_eq!(e.mean, 0.0);
        assert!(!e.contracting);
    }
}
