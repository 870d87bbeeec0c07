//! Empirical c-Gibbs u-states and Hölder density tracking on unstable plaques.
//!
//! The default estimator follows long orbits started on a reference measure
//! and keeps every iterate after a burn-in. A Cesàro variant that pushes
//! independent samples is provided as well; both converge to the same limit.

use crate::numerics::block_bootstrap_se;
use crate::partition::MarkovPartition;
use crate::reference::ReferenceMeasure;
use crate::skew::{circle_dist, LeafSegment, SkewError, SkewPoint, SkewSystem};
use crate::stream_rng;
use crate::torus::TorusPoint;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::f64::consts::TAU;
use thiserror::Error;

/// Default burn-in, enough for `(1 − κ)^50` to reach roundoff at `κ = 0.5`.
pub const DEFAULT_BURN_IN: usize = 50;

/// Bootstrap replicates for [`integrate`].
pub const BOOTSTRAP_REPS: usize = 200;

/// Width of the ramp in the smoothed rectangle memberships.
pub const MEMBERSHIP_RAMP: f64 = 1e-2;

const ORBIT_CHUNK: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GibbsError {
    #[error("mesh refinement overflow: {components} components exceed the cap {cap}")]
    MeshOverflow { components: usize, cap: usize },
    #[error("burn-in {burn_in} is not below the iterate count {n_iterates}")]
    BadWindow { burn_in: usize, n_iterates: usize },
    #[error(transparent)]
    Skew(#[from] SkewError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Estimator {
    Orbit,
    Cesaro,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub n_iterates: usize,
    pub burn_in: usize,
    pub source_rect: usize,
    pub source_point: SkewPoint,
    pub estimator: Estimator,
}

/// Weighted particle cloud standing for an invariant measure.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalMeasure {
    pub particles: Vec<SkewPoint>,
    pub weights: Vec<f64>,
    /// Consecutive particles in blocks of this length are correlated (one orbit).
    pub block_len: usize,
    pub provenance: Provenance,
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weight of particles whose base lies in rectangle `j`.
    pub fn rect_mass(&self, part: &MarkovPartition, j: usize) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| part.locate(&p.base).index == j)
            .map(|(_, w)| w)
            .sum()
    }

    /// Masses of all rectangles in one pass.
    pub fn rect_masses(&self, part: &MarkovPartition) -> Vec<f64> {
        let mut out = vec![0.0; part.len()];
        for (p, w) in self.particles.iter().zip(&self.weights) {
            out[part.locate(&p.base).index] += w;
        }
        out
    }

    /// Particles as CSV `x1,x2,theta,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,theta,weight\n");
        for (p, w) in self.particles.iter().zip(&self.weights) {
            out.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e}\n", p.base.x1(), p.base.x2(), p.theta, w));
        }
        out
    }

    /// Weighted union; blocks are kept intact when lengths agree.
    pub fn merge(&self, other: &EmpiricalMeasure) -> EmpiricalMeasure {
        let (wa, wb) = (self.len() as f64, other.len() as f64);
        let total = wa + wb;
        let mut particles = self.particles.clone();
        particles.extend_from_slice(&other.particles);
        let weights = self
            .weights
            .iter()
            .map(|w| w * wa / total)
            .chain(other.weights.iter().map(|w| w * wb / total))
            .collect();
        let block_len = if self.block_len == other.block_len { self.block_len } else { 1 };
        EmpiricalMeasure { particles, weights, block_len, provenance: self.provenance.clone() }
    }
}

/// Orbit-section estimate of `μ`: every iterate `f^j(z)` with
/// `burn_in ≤ j ≤ n_iterates` of orbits started at `ν^u` samples on `source`.
pub fn estimate_mu(
    sys: &SkewSystem,
    part: &MarkovPartition,
    source: &ReferenceMeasure,
    n_particles: usize,
    n_iterates: usize,
    burn_in: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, GibbsError> {
    if burn_in > n_iterates {
        return Err(GibbsError::BadWindow { burn_in, n_iterates });
    }
    let per_orbit = n_iterates - burn_in + 1;
    let n_orbits = n_particles.div_ceil(per_orbit).max(1);
    let chunks = n_orbits.div_ceil(ORBIT_CHUNK);
    let particles: Vec<SkewPoint> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = ORBIT_CHUNK.min(n_orbits - c * ORBIT_CHUNK);
            let mut out = Vec::with_capacity(count * per_orbit);
            for _ in 0..count {
                let mut p = source.sample(part, &mut rng);
                for j in 0..=n_iterates {
                    if j >= burn_in {
                        out.push(p);
                    }
                    p = sys.step(&p);
                }
            }
            out
        })
        .collect();
    let n = particles.len();
    Ok(EmpiricalMeasure {
        particles,
        weights: vec![1.0 / n as f64; n],
        block_len: per_orbit,
        provenance: provenance(source, seed, n_iterates, burn_in, Estimator::Orbit),
    })
}

/// Orbit estimate that keeps only particles accepted by `keep`. Weights stay
/// `1 / (particles generated)` so kept masses are `μ`-masses.
#[allow(clippy::too_many_arguments)]
pub fn estimate_mu_restricted<K>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    source: &ReferenceMeasure,
    n_orbits: usize,
    n_iterates: usize,
    burn_in: usize,
    seed: u64,
    keep: K,
) -> Result<EmpiricalMeasure, GibbsError>
where
    K: Fn(&SkewPoint) -> bool + Sync,
{
    if burn_in > n_iterates {
        return Err(GibbsError::BadWindow { burn_in, n_iterates });
    }
    let per_orbit = n_iterates - burn_in + 1;
    let chunks = n_orbits.div_ceil(ORBIT_CHUNK);
    let particles: Vec<SkewPoint> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = ORBIT_CHUNK.min(n_orbits - c * ORBIT_CHUNK);
            let mut out = Vec::new();
            for _ in 0..count {
                let mut p = source.sample(part, &mut rng);
                for j in 0..=n_iterates {
                    if j >= burn_in && keep(&p) {
                        out.push(p);
                    }
                    p = sys.step(&p);
                }
            }
            out
        })
        .collect();
    let generated = (n_orbits * per_orbit) as f64;
    let n = particles.len();
    Ok(EmpiricalMeasure {
        particles,
        weights: vec![1.0 / generated; n],
        block_len: 1,
        provenance: provenance(source, seed, n_iterates, burn_in, Estimator::Orbit),
    })
}

/// Cesàro estimate: independent `ν^u` samples pushed by `f^j`, with `j`
/// cycling through `[burn_in, n_iterates]`.
pub fn estimate_mu_cesaro(
    sys: &SkewSystem,
    part: &MarkovPartition,
    source: &ReferenceMeasure,
    n_particles: usize,
    n_iterates: usize,
    burn_in: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, GibbsError> {
    if burn_in > n_iterates {
        return Err(GibbsError::BadWindow { burn_in, n_iterates });
    }
    let span = n_iterates - burn_in + 1;
    let chunk = 256;
    let particles: Vec<SkewPoint> = (0..n_particles.div_ceil(chunk))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let lo = c * chunk;
            let hi = (lo + chunk).min(n_particles);
            (lo..hi)
                .map(|k| {
                    let mut p = source.sample(part, &mut rng);
                    for _ in 0..burn_in + k % span {
                        p = sys.step(&p);
                    }
                    p
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let n = particles.len();
    Ok(EmpiricalMeasure {
        particles,
        weights: vec![1.0 / n as f64; n],
        block_len: 1,
        provenance: provenance(source, seed, n_iterates, burn_in, Estimator::Cesaro),
    })
}

fn provenance(source: &ReferenceMeasure, seed: u64, n_iterates: usize, burn_in: usize, estimator: Estimator) -> Provenance {
    Provenance {
        seed,
        n_iterates,
        burn_in,
        source_rect: source.rect(),
        source_point: source.leaf.graph.marked,
        estimator,
    }
}

/// Weighted mean of `phi` with a block-bootstrap standard error.
pub fn integrate<F>(m: &EmpiricalMeasure, phi: F, seed: u64) -> (f64, f64)
where
    F: Fn(&SkewPoint) -> f64 + Sync,
{
    let block = m.block_len.max(1);
    let blocks: Vec<(f64, f64)> = m
        .particles
        .par_chunks(block)
        .zip(m.weights.par_chunks(block))
        .map(|(ps, ws)| ps.iter().zip(ws).fold((0.0, 0.0), |(s, w), (p, x)| (s + x * phi(p), w + x)))
        .collect();
    let (s, w) = blocks.iter().fold((0.0, 0.0), |(s, w), b| (s + b.0, w + b.1));
    let mut rng = stream_rng(seed, u64::MAX);
    (s / w, block_bootstrap_se(&blocks, BOOTSTRAP_REPS, &mut rng))
}

/// The standard observable set used for acceptance comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StdObservable {
    CosTheta,
    SinTheta,
    CosX1,
    /// Piecewise-linear smoothing of the indicator of `ℳ_j`.
    Membership(usize),
}

impl StdObservable {
    /// The three trigonometric observables and memberships of every rectangle.
    pub fn standard_set(part: &MarkovPartition) -> Vec<StdObservable> {
        let mut v = vec![StdObservable::CosTheta, StdObservable::SinTheta, StdObservable::CosX1];
        v.extend((0..part.len()).map(StdObservable::Membership));
        v
    }

    pub fn eval(&self, part: &MarkovPartition, p: &SkewPoint) -> f64 {
        match *self {
            StdObservable::CosTheta => (TAU * p.theta).cos(),
            StdObservable::SinTheta => (TAU * p.theta).sin(),
            StdObservable::CosX1 => (TAU * p.base.x1()).cos(),
            StdObservable::Membership(j) => smoothed_membership(part, j, &p.base),
        }
    }

    pub fn name(&self) -> String {
        match self {
            StdObservable::CosTheta => "cos2pi_theta".into(),
            StdObservable::SinTheta => "sin2pi_theta".into(),
            StdObservable::CosX1 => "cos2pi_x1".into(),
            StdObservable::Membership(j) => format!("member_r{j}"),
        }
    }
}

/// Ramp from 0 to 1 as the signed boundary distance crosses
/// `[-MEMBERSHIP_RAMP/2, MEMBERSHIP_RAMP/2]`.
pub fn smoothed_membership(part: &MarkovPartition, j: usize, p: &TorusPoint) -> f64 {
    (part.margin(j, p) / MEMBERSHIP_RAMP + 0.5).clamp(0.0, 1.0)
}

/// Fraction of probe points along leaves through random particles that have
/// a particle within `eps`.
pub fn saturation_probe(
    sys: &SkewSystem,
    part: &MarkovPartition,
    m: &EmpiricalMeasure,
    n_probe: usize,
    eps: f64,
    seed: u64,
) -> Result<f64, SkewError> {
    let cell = eps;
    let cells = (1.0 / cell).ceil() as i64;
    let key = |p: &SkewPoint| {
        (
            (p.base.x1() / cell) as i64,
            (p.base.x2() / cell) as i64,
            (p.theta / cell) as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (k, p) in m.particles.iter().enumerate() {
        grid.entry(key(p)).or_default().push(k);
    }
    let near = |q: &SkewPoint| {
        let (a, b, c) = key(q);
        for da in -1..=1 {
            for db in -1..=1 {
                for dc in -1..=1 {
                    let k = ((a + da).rem_euclid(cells), (b + db).rem_euclid(cells), (c + dc).rem_euclid(cells));
                    if let Some(v) = grid.get(&k) {
                        if v.iter().any(|&i| m.particles[i].distance(q) <= eps) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    };
    let mut rng = stream_rng(seed, 0);
    let (mut hits, mut total) = (0usize, 0usize);
    let mut tries = 0;
    while total < n_probe && tries < 100 * n_probe {
        tries += 1;
        let p = m.particles[rng.random_range(0..m.len())];
        let Ok(leaf) = sys.leaf_through(part, &p) else { continue };
        let u = rng.random::<f64>() * leaf.plaque.length;
        total += 1;
        if near(&leaf.point_at(part, u)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// One piece `b·e^ρ ν^u` of a measure in `E(R)`: a leaf segment with a
/// piecewise-linear log-density on a mesh of chart coordinates.
#[derive(Debug, Clone)]
pub struct DensityComponent {
    pub leaf: LeafSegment,
    pub weight: f64,
    pub nodes: Vec<f64>,
    pub rho: Vec<f64>,
}

impl DensityComponent {
    fn length(&self) -> f64 {
        self.leaf.plaque.length
    }

    fn rho_at(&self, u: f64) -> f64 {
        let k = self.nodes.partition_point(|x| *x <= u).clamp(1, self.nodes.len() - 1);
        let (x0, x1) = (self.nodes[k - 1], self.nodes[k]);
        let t = if x1 > x0 { (u - x0) / (x1 - x0) } else { 0.0 };
        self.rho[k - 1] + t * (self.rho[k] - self.rho[k - 1])
    }

    /// `∫_{a}^{b} e^ρ du / L` over mesh pieces, exact for piecewise-linear `ρ`.
    fn mass_between(&self, a: f64, b: f64) -> f64 {
        let mut pts = vec![a];
        pts.extend(self.nodes.iter().copied().filter(|x| *x > a && *x < b));
        pts.push(b);
        let mut total = 0.0;
        for w in pts.windows(2) {
            total += exp_segment(w[1] - w[0], self.rho_at(w[0]), self.rho_at(w[1]));
        }
        total / self.length()
    }

    /// `∫ e^ρ dν^u`.
    pub fn normalization(&self) -> f64 {
        self.mass_between(0.0, self.length())
    }

    /// Largest `|ρ(u₁) − ρ(u₂)| / |u₁ − u₂|^γ` over mesh node pairs.
    pub fn measured_holder(&self, gamma: f64) -> f64 {
        let mut r = 0.0f64;
        for a in 0..self.nodes.len() {
            for b in a + 1..self.nodes.len() {
                let d = (self.nodes[b] - self.nodes[a]).abs();
                if d > 1e-14 {
                    r = r.max((self.rho[b] - self.rho[a]).abs() / d.powf(gamma));
                }
            }
        }
        r
    }
}

/// `∫_0^h exp(a + (b − a)x/h) dx` without cancellation.
fn exp_segment(h: f64, a: f64, b: f64) -> f64 {
    let d = b - a;
    if d.abs() < 1e-12 {
        h * a.exp() * (1.0 + d / 2.0)
    } else {
        h * a.exp() * d.exp_m1() / d
    }
}

/// Finite convex combination of densities on plaques with a common Hölder
/// exponent and a tracked Hölder bound `R`.
#[derive(Debug, Clone)]
pub struct HolderDensityState {
    pub components: Vec<DensityComponent>,
    pub gamma: f64,
    pub holder_bound: f64,
}

impl HolderDensityState {
    /// The reference measure itself: `ρ ≡ 0`, `R = 0`.
    pub fn reference(leaf: LeafSegment, gamma: f64) -> Self {
        let l = leaf.plaque.length;
        HolderDensityState {
            components: vec![DensityComponent { leaf, weight: 1.0, nodes: vec![0.0, l], rho: vec![0.0, 0.0] }],
            gamma,
            holder_bound: 0.0,
        }
    }

    /// Random `(R, γ)`-Hölder log-density on one plaque, built as a convex
    /// combination of `±R|u − c|^γ` bumps and normalized.
    pub fn random<R: Rng>(leaf: LeafSegment, r_bound: f64, gamma: f64, mesh: usize, rng: &mut R) -> Self {
        let l = leaf.plaque.length;
        let bumps: Vec<(f64, f64)> = (0..4).map(|_| (rng.random::<f64>() * l, rng.random_range(-1.0..1.0))).collect();
        let total: f64 = bumps.iter().map(|b| b.1.abs()).sum();
        let nodes: Vec<f64> = (0..=mesh).map(|k| l * k as f64 / mesh as f64).collect();
        let rho = nodes
            .iter()
            .map(|u| bumps.iter().map(|(c, w)| r_bound * w / total * (u - c).abs().powf(gamma)).sum())
            .collect();
        let mut comp = DensityComponent { leaf, weight: 1.0, nodes, rho };
        let z = comp.normalization().ln();
        comp.rho.iter_mut().for_each(|r| *r -= z);
        let measured = comp.measured_holder(gamma);
        HolderDensityState { components: vec![comp], gamma, holder_bound: measured.max(0.0).min(r_bound.max(measured)) }
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Largest measured Hölder quotient over components.
    pub fn measured_holder(&self) -> f64 {
        self.components.iter().map(|c| c.measured_holder(self.gamma)).fold(0.0, f64::max)
    }

    /// Largest `|∫e^ρ dν^u − 1|` over components.
    pub fn normalization_error(&self) -> f64 {
        self.components.iter().map(|c| (c.normalization() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Push a density state forward by `f` once. Each component splits along its
/// depth-1 cylinders; each piece maps affinely onto a full plaque, and the
/// constant-Jacobian normalizer is absorbed into the component weight. The
/// tracked bound becomes `R·ω^γ`.
pub fn push_density(
    sys: &SkewSystem,
    part: &MarkovPartition,
    state: &HolderDensityState,
    max_components: usize,
) -> Result<HolderDensityState, GibbsError> {
    let expected: usize = state.components.iter().map(|c| part.successors(c.leaf.rect()).len()).sum();
    if expected > max_components {
        return Err(GibbsError::MeshOverflow { components: expected, cap: max_components });
    }
    let lam = part.auto().lambda_u();
    let sigma = part.sigma();
    let mut out = Vec::with_capacity(expected);
    for comp in &state.components {
        let i = comp.leaf.rect();
        let root = part.root_cylinder(i);
        for t in part.successors(i) {
            let cyl = part.extend(&root, t.to).map_err(SkewError::from)?;
            let (lo, hi) = (cyl.u_lo, cyl.u_hi);
            let mass = comp.mass_between(lo, hi);
            if mass <= 0.0 {
                continue;
            }
            let mid = comp.leaf.point_at(part, 0.5 * (lo + hi));
            let image = sys.step(&mid);
            let leaf = sys.leaf_segment(part, t.to, &image)?;
            let lj = part.rect(t.to).l_u;
            let map = |u: f64| (sigma * lam * u + t.u_offset).clamp(0.0, lj);
            let shift = (mass / t.weight).ln();
            let mut pts: Vec<(f64, f64)> = vec![(map(lo), comp.rho_at(lo) - shift)];
            for (x, r) in comp.nodes.iter().zip(&comp.rho) {
                if *x > lo && *x < hi {
                    pts.push((map(*x), r - shift));
                }
            }
            pts.push((map(hi), comp.rho_at(hi) - shift));
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (nodes, rho) = pts.into_iter().unzip();
            out.push(DensityComponent { leaf, weight: comp.weight * mass, nodes, rho });
        }
    }
    Ok(HolderDensityState {
        components: out,
        gamma: state.gamma,
        holder_bound: state.holder_bound * sys.omega().powf(state.gamma),
    })
}

/// Largest fiber spread of particles inside a base disc; zero-width fibers
/// indicate the measure sits on a graph there.
pub fn fiber_spread(m: &EmpiricalMeasure, center: &TorusPoint, radius: f64) -> f64 {
    let near: Vec<f64> = m.particles.iter().filter(|p| p.base.distance(center) < radius).map(|p| p.theta).collect();
    let mut worst = 0.0f64;
    for a in &near {
        for b in &near {
            worst = worst.max(circle_dist(*a, *b));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ks_uniform;
    use crate::torus::ToralAutomorphism;

    fn setup(kappa: f64, delta: f64, alpha: f64) -> (SkewSystem, MarkovPartition) {
        (SkewSystem::new(ToralAutomorphism::cat_map(), kappa, delta, alpha).unwrap(), MarkovPartition::builtin_cat())
    }

    fn source(sys: &SkewSystem, part: &MarkovPartition, seed: u64) -> ReferenceMeasure {
        let mut rng = stream_rng(seed, 99);
        ReferenceMeasure::random(sys, part, &mut rng).unwrap()
    }

    #[test]
    fn product_fixture_concentrates_at_zero() {
        let (sys, part) = setup(0.5, 0.0, 0.0);
        let src = source(&sys, &part, 1);
        let m = estimate_mu(&sys, &part, &src, 20_000, 149, 50, 3).unwrap();
        let mean_abs = m.particles.iter().map(|p| circle_dist(p.theta, 0.0)).sum::<f64>() / m.len() as f64;
        assert!(mean_abs < 0.01);
        let (c, se) = integrate(&m, |p| (TAU * p.theta).cos(), 1);
        assert!((c - 1.0).abs() < 0.01, "{c} {se}");
        let (one, se1) = integrate(&m, |_| 1.0, 1);
        assert!((one - 1.0).abs() < 1e-12 && se1 < 1e-12);
        let (s, se) = integrate(&m, |p| (TAU * p.base.x1()).sin(), 1);
        assert!(s.abs() < 3.0 * se + 1e-3, "{s} {se}");
        let w: f64 = m.weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn base_marginal_is_lebesgue() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let src = source(&sys, &part, 2);
        let m = estimate_mu(&sys, &part, &src, 20_000, 149, 50, 4).unwrap();
        let xs: Vec<f64> = m.particles.iter().map(|p| p.base.x1()).collect();
        assert!(ks_uniform(&xs, 0.0, 1.0) < 0.02);
        let masses = m.rect_masses(&part);
        for (j, r) in part.rects().iter().enumerate() {
            assert!((masses[j] - r.area()).abs() < 0.01);
        }
    }

    #[test]
    fn cesaro_matches_orbit_estimator() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let src = source(&sys, &part, 3);
        let a = estimate_mu(&sys, &part, &src, 20_000, 149, 50, 5).unwrap();
        let b = estimate_mu_cesaro(&sys, &part, &src, 20_000, 149, 50, 6).unwrap();
        let (x, sx) = integrate(&a, |p| (TAU * p.theta).cos(), 1);
        let (y, sy) = integrate(&b, |p| (TAU * p.theta).cos(), 1);
        assert!((x - y).abs() < 3.0 * sx.hypot(sy) + 1e-3, "{x} {y} {sx} {sy}");
    }

    #[test]
    fn reference_density_stays_reference() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let src = source(&sys, &part, 4);
        let st = HolderDensityState::reference(src.leaf.clone(), 1.0);
        let next = push_density(&sys, &part, &st, 1000).unwrap();
        assert_eq!(next.holder_bound, 0.0);
        assert!(next.measured_holder() < 1e-12);
        assert!((next.total_weight() - 1.0).abs() < 1e-12);
        assert!(next.normalization_error() < 1e-8);
        for c in &next.components {
            let expect = part.weight(src.rect(), c.leaf.rect()).unwrap();
            assert!((c.weight - expect).abs() < 1e-12);
        }
        assert!(push_density(&sys, &part, &next, next.components.len()).is_err());
    }

    #[test]
    fn holder_bound_contracts() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let mut rng = stream_rng(5, 0);
        for gamma in [0.5, 1.0] {
            for _ in 0..20 {
                let src = ReferenceMeasure::random(&sys, &part, &mut rng).unwrap();
                let st = HolderDensityState::random(src.leaf.clone(), 2.0, gamma, 32, &mut rng);
                let before = st.measured_holder();
                let after = push_density(&sys, &part, &st, 1000).unwrap();
                assert!(after.measured_holder() <= sys.omega().powf(gamma) * before + 1e-9);
                assert!(after.normalization_error() < 1e-8);
                assert!((after.total_weight() - 1.0).abs() < 1e-10);
            }
        }
    }
}
