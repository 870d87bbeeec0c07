//! Coupling of reference measures on two unstable plaques: contraction
//! profile, anchor plaques, the stopping-time recursion and its tail.
//!
//! The center-stable norm is bounded per step by `max(g'(θ), 1/λ_u)`.
//! Maxima over cylinder images are taken on equispaced samples of the leaf
//! plus a Lipschitz inflation, with the sample count chosen so the inflation
//! stays below [`INFLATION_TOL`] (at most [`DENSE_SAMPLES`] points).

use crate::numerics::{ks_2d, linear_fit};
use crate::partition::{Affine, MarkovPartition, PartitionError, SymbolicCylinder};
use crate::reference::ReferenceMeasure;
use crate::skew::{LeafSegment, SkewError, SkewPoint, SkewSystem};
use crate::stream_rng;
use crate::torus::TorusPoint;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use thiserror::Error;

pub const DENSE_SAMPLES: usize = 33;
pub const INFLATION_TOL: f64 = 1e-3;
pub const DEFAULT_HORIZON: usize = 200;
/// Depth up to which a matched particle is certified outside every `U^m`.
pub const U_HORIZON: usize = 60;
/// Iterates recorded after matching.
pub const SHADOW_STEPS: usize = 20;
/// Plaque-averaged exponents must fall below this to count as contracting.
pub const LAMBDA0_MARGIN: f64 = -1e-2;

const CS_SAMPLES: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("not contracting enough: best plaque-averaged exponent {best:.4} is not below {margin}")]
    NotContractingEnough { best: f64, margin: f64 },
    #[error("no feasible exponential tail exponent s in the scanned grid")]
    NoFeasibleTail,
    #[error("no q1 below {target} for K up to {k_max}")]
    NoFeasibleK { target: f64, k_max: f64 },
    #[error("u-minimality budget of {0} iterates exhausted without anchor plaques")]
    AnchorBudget(usize),
    #[error("{found} records, need at least {need}")]
    TooFewRecords { found: usize, need: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Skew(#[from] SkewError),
}

/// `log max(g'(θ), 1/λ_u)`.
pub fn log_cs_norm(sys: &SkewSystem, theta: f64) -> f64 {
    sys.fiber_derivative(theta).max(sys.auto().lambda_u().recip()).ln()
}

/// Lipschitz constant of [`log_cs_norm`] in `θ`.
pub fn log_cs_norm_lipschitz(sys: &SkewSystem) -> f64 {
    let k = sys.kappa();
    TAU * k / (1.0 - k)
}

/// Upper bound for `max ψ` over chart `u ∈ [lo, hi]` on a leaf, for `ψ`
/// with Lipschitz constant `slope` in `u` along the leaf.
pub fn leaf_interval_max<F: Fn(&SkewPoint) -> f64>(
    part: &MarkovPartition,
    leaf: &LeafSegment,
    lo: f64,
    hi: f64,
    slope: f64,
    psi: F,
) -> f64 {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let width = hi - lo;
    if slope * width / 2.0 <= INFLATION_TOL {
        return psi(&leaf.point_at(part, 0.5 * (lo + hi))) + slope * width / 2.0;
    }
    let k = ((slope * width / (2.0 * INFLATION_TOL)).ceil() as usize + 1).min(DENSE_SAMPLES);
    let spacing = width / (k - 1) as f64;
    let best = (0..k).map(|j| psi(&leaf.point_at(part, lo + j as f64 * spacing))).fold(f64::NEG_INFINITY, f64::max);
    best + slope * spacing / 2.0
}

fn cs_interval_max(part: &MarkovPartition, sys: &SkewSystem, leaf: &LeafSegment, lo: f64, hi: f64) -> f64 {
    leaf_interval_max(part, leaf, lo, hi, log_cs_norm_lipschitz(sys) * sys.leaf_lipschitz(), |p| log_cs_norm(sys, p.theta))
}

/// One cylinder of a start plaque with its `ν^u` mass and
/// `Σ_t max_{f^t(cylinder)} ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CylinderSum {
    pub mass: f64,
    pub sum_max: f64,
    /// Index of the parent cylinder in the previous depth's list.
    pub parent: usize,
}

/// Cylinder sums for depths `1..=depth` (entry 0 holds the root).
pub fn cylinder_sums<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    start: &ReferenceMeasure,
    depth: usize,
    interval_max: F,
) -> Result<Vec<Vec<CylinderSum>>, CouplingError>
where
    F: Fn(&LeafSegment, f64, f64) -> f64,
{
    if depth > part.cylinder_cap() {
        return Err(PartitionError::CylinderExplosion { depth, cap: part.cylinder_cap() }.into());
    }
    let mut out = vec![Vec::new(); depth + 1];
    out[0].push(CylinderSum { mass: 1.0, sum_max: 0.0, parent: 0 });
    let mut path = vec![(part.root_cylinder(start.rect()), start.leaf.clone(), 0usize)];
    visit(sys, part, start.length(), depth, &interval_max, &mut path, &mut out)?;
    Ok(out)
}

fn visit<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    l0: f64,
    depth: usize,
    interval_max: &F,
    path: &mut Vec<(SymbolicCylinder, LeafSegment, usize)>,
    out: &mut Vec<Vec<CylinderSum>>,
) -> Result<(), CouplingError>
where
    F: Fn(&LeafSegment, f64, f64) -> f64,
{
    let d = path.len() - 1;
    if d == depth {
        return Ok(());
    }
    let (cyl, leaf, index) = path[d].clone();
    for t in part.successors(cyl.last()) {
        let child = part.extend(&cyl, t.to)?;
        if child.width() <= 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for (c, l, _) in path.iter() {
            sum += interval_max(l, c.u_map.apply(child.u_lo), c.u_map.apply(child.u_hi));
        }
        out[d + 1].push(CylinderSum { mass: child.width() / l0, sum_max: sum, parent: index });
        let mid = cyl.u_map.apply(0.5 * (child.u_lo + child.u_hi));
        let image = sys.step(&leaf.point_at(part, mid));
        let child_leaf = sys.leaf_segment(part, t.to, &image)?;
        let child_index = out[d + 1].len() - 1;
        path.push((child, child_leaf, child_index));
        visit(sys, part, l0, depth, interval_max, path, out)?;
        path.pop();
    }
    Ok(())
}

/// `max_{n} (Σ mass·e^{s·sum_max})^{1/(s n)}` over depths `1..`.
pub fn tail_theta(sums: &[Vec<CylinderSum>], s: f64) -> f64 {
    (1..sums.len())
        .map(|n| {
            let z: f64 = sums[n].iter().map(|c| c.mass * (s * c.sum_max).exp()).sum();
            z.powf(1.0 / (s * n as f64))
        })
        .fold(0.0, f64::max)
}

/// Mass of `∪_{m ≤ depth} U^m` from exact cylinder sums.
pub fn u_mass(sums: &[Vec<CylinderSum>], k: f64, lambda: f64) -> f64 {
    let mut flagged: Vec<bool> = vec![false];
    let mut mass = 0.0;
    for (n, level) in sums.iter().enumerate().skip(1) {
        let mut next = Vec::with_capacity(level.len());
        for c in level {
            let inherited = flagged[c.parent];
            let here = c.sum_max > k.ln() + lambda * n as f64;
            if here && !inherited {
                mass += c.mass;
            }
            next.push(inherited || here);
        }
        flagged = next;
    }
    mass
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileOptions {
    pub n_plaques: usize,
    pub n0_max: usize,
    pub tail_depth: usize,
    /// Quadrature nodes per plaque for the `n₀` search.
    pub nodes: usize,
    pub q1_target: f64,
    pub burn_in: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { n_plaques: 10, n0_max: 10, tail_depth: 10, nodes: 512, q1_target: 0.5, burn_in: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionProfile {
    pub n0: usize,
    pub lambda0: f64,
    pub lambda: f64,
    pub k: f64,
    pub s1: f64,
    pub theta1: f64,
    pub q1: f64,
    pub epsilon: f64,
    /// Largest exactly measured `ν^u(U)` over the profile plaques.
    pub q1_measured: f64,
    /// Chebyshev bound on `ν^u(∪_{m > tail_depth} U^m)`.
    pub q1_tail: f64,
    pub tail_depth: usize,
}

impl ContractionProfile {
    /// `ν^u(U)` bound for a plaque: exact mass to `tail_depth` plus the tail.
    pub fn u_fraction(&self, sys: &SkewSystem, part: &MarkovPartition, plaque: &ReferenceMeasure) -> Result<f64, CouplingError> {
        let sums = cylinder_sums(sys, part, plaque, self.tail_depth, |l, a, b| cs_interval_max(part, sys, l, a, b))?;
        Ok(u_mass(&sums, self.k, self.lambda) + self.q1_tail)
    }

    /// Shadowing radius `K ε e^{λ j / 2}` after `j` iterates past matching.
    pub fn envelope(&self, j: usize) -> f64 {
        self.k * self.epsilon * (self.lambda * j as f64 / 2.0).exp()
    }

    /// The same radius with the opposite exponent sign, `K ε e^{-λ j / 2}`.
    pub fn envelope_growing(&self, j: usize) -> f64 {
        self.k * self.epsilon * (-self.lambda * j as f64 / 2.0).exp()
    }
}

/// Plaques through points of the support of the Gibbs state, reached by
/// iterating random points `burn_in` times.
pub fn support_plaques(
    sys: &SkewSystem,
    part: &MarkovPartition,
    count: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<ReferenceMeasure>, CouplingError> {
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = SkewPoint::new(TorusPoint::from_unit(rng.random(), rng.random()), rng.random());
        for _ in 0..burn_in {
            p = sys.step(&p);
        }
        let loc = part.locate(&p.base);
        if loc.interior && part.margin(loc.index, &p.base) > 1e-6 {
            out.push(ReferenceMeasure::new(sys, part, loc.index, &p)?);
        }
    }
    Ok(out)
}

/// Plaque average of `(1/n) Σ_{t<n} log‖Df|E^{cs}‖` by midpoint quadrature.
pub fn plaque_exponent(sys: &SkewSystem, part: &MarkovPartition, plaque: &ReferenceMeasure, n: usize, nodes: usize) -> f64 {
    let l = plaque.length();
    let total: f64 = (0..nodes)
        .map(|k| {
            let mut p = plaque.leaf.point_at(part, (k as f64 + 0.5) * l / nodes as f64);
            let mut acc = 0.0;
            for _ in 0..n {
                acc += log_cs_norm(sys, p.theta);
                p = sys.step(&p);
            }
            acc
        })
        .sum();
    total / (nodes * n) as f64
}

const S_GRID: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Contraction data for the coupling: `n₀, λ₀` from plaque averages,
/// `(s₁, θ₁)` from exact cylinder sums, `λ`, then the smallest `K` on a
/// geometric grid with certified `q₁ ≤ q1_target`, and `ε` from the
/// Lipschitz modulus of `log‖Df|E^{cs}‖`.
pub fn estimate_profile(
    sys: &SkewSystem,
    part: &MarkovPartition,
    opts: &ProfileOptions,
    seed: u64,
) -> Result<ContractionProfile, CouplingError> {
    let plaques = support_plaques(sys, part, opts.n_plaques, opts.burn_in, seed)?;
    let mut best = f64::INFINITY;
    let mut found = None;
    for n in 1..=opts.n0_max {
        let worst = plaques
            .par_iter()
            .map(|p| plaque_exponent(sys, part, p, n, opts.nodes))
            .reduce(|| f64::NEG_INFINITY, f64::max);
        best = best.min(worst);
        if worst < LAMBDA0_MARGIN {
            found = Some((n, worst));
            break;
        }
    }
    let (n0, lambda0) = found.ok_or(CouplingError::NotContractingEnough { best, margin: LAMBDA0_MARGIN })?;
    let sums: Vec<Vec<Vec<CylinderSum>>> = plaques
        .par_iter()
        .map(|p| cylinder_sums(sys, part, p, opts.tail_depth, |l, a, b| cs_interval_max(part, sys, l, a, b)))
        .collect::<Result<_, _>>()?;
    let feasible: Vec<(f64, f64)> = S_GRID
        .iter()
        .map(|&s| (s, sums.iter().map(|x| tail_theta(x, s)).fold(0.0, f64::max)))
        .take_while(|&(_, th)| th < 1.0)
        .collect();
    if feasible.is_empty() {
        return Err(CouplingError::NoFeasibleTail);
    }
    // Strongest contraction first, then the steepest tail.
    let mut order: Vec<(f64, f64, f64)> =
        feasible.iter().map(|&(s, th)| ((lambda0 / 2.0).max(th.ln() / 2.0), s, th)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let tail_depth = opts.tail_depth;
    let k_max = 1e6;
    for (lambda, s1, theta1) in order {
        let geometric = (lambda * s1 * (tail_depth + 1) as f64).exp() / (1.0 - (lambda * s1).exp());
        let mut k: f64 = 1.1;
        while k <= k_max {
            let tail = k.powf(-s1) * geometric;
            if tail <= opts.q1_target {
                let measured = sums.iter().map(|x| u_mass(x, k, lambda)).fold(0.0, f64::max);
                if measured + tail <= opts.q1_target {
                    return Ok(ContractionProfile {
                        n0,
                        lambda0,
                        lambda,
                        k,
                        s1,
                        theta1,
                        q1: measured + tail,
                        epsilon: (-lambda / 2.0) / log_cs_norm_lipschitz(sys),
                        q1_measured: measured,
                        q1_tail: tail,
                        tail_depth,
                    });
                }
            }
            k *= 1.1;
        }
    }
    Err(CouplingError::NoFeasibleK { target: opts.q1_target, k_max })
}

/// Anchor plaques `ξ^u_k(y₁) ⊂ f^{n₀'}(P₁)`, `ξ^u_k(y₂) ⊂ f^{n₀'}(P₂)` with
/// center-stable displacement at most `ε`.
#[derive(Debug, Clone)]
pub struct AnchorPair {
    pub n0: usize,
    pub rect: usize,
    pub cyl: [SymbolicCylinder; 2],
    pub leaf: [LeafSegment; 2],
    /// `c̄_j`: `ν^u` mass of the anchor's preimage in each start plaque.
    pub cbar: [f64; 2],
    pub displacement: f64,
}

const TABLE_NODES: usize = 256;
/// Slack on the interpolated prefilter; exact leaves decide afterwards.
const TABLE_SLACK: f64 = 1e-3;

/// Lifted fiber values of a leaf on a uniform grid, for cheap approximate
/// image points.
struct LeafTable {
    h: f64,
    lifts: Vec<f64>,
}

impl LeafTable {
    fn new(leaf: &LeafSegment) -> Self {
        let h = leaf.plaque.length / TABLE_NODES as f64;
        let lifts = (0..=TABLE_NODES).map(|k| leaf.graph.theta_lift_at(k as f64 * h - leaf.plaque.offset)).collect();
        LeafTable { h, lifts }
    }

    fn point(&self, part: &MarkovPartition, leaf: &LeafSegment, u: f64) -> SkewPoint {
        let x = (u / self.h).clamp(0.0, TABLE_NODES as f64);
        let k = (x.floor() as usize).min(TABLE_NODES - 1);
        let f = x - k as f64;
        let theta = self.lifts[k] + f * (self.lifts[k + 1] - self.lifts[k]);
        SkewPoint { base: part.plaque_point(&leaf.plaque, u), theta: theta.rem_euclid(1.0) }
    }

    /// Approximate fiber values of the image at the displacement samples.
    fn image_profile(&self, sys: &SkewSystem, part: &MarkovPartition, leaf: &LeafSegment, cyl: &SymbolicCylinder) -> [f64; CS_SAMPLES] {
        let l = part.rect(cyl.last()).l_u;
        std::array::from_fn(|k| {
            let u = cyl.u_map.invert(l * k as f64 / (CS_SAMPLES - 1) as f64);
            let mut p = self.point(part, leaf, u);
            for _ in 0..cyl.depth() {
                p = sys.step(&p);
            }
            p.theta
        })
    }

    fn image_mid(&self, sys: &SkewSystem, part: &MarkovPartition, leaf: &LeafSegment, cyl: &SymbolicCylinder) -> SkewPoint {
        let mut p = self.point(part, leaf, 0.5 * (cyl.u_lo + cyl.u_hi));
        for _ in 0..cyl.depth() {
            p = sys.step(&p);
        }
        p
    }
}

fn image_mid(sys: &SkewSystem, part: &MarkovPartition, from: &LeafSegment, cyl: &SymbolicCylinder) -> SkewPoint {
    let mut p = from.point_at(part, 0.5 * (cyl.u_lo + cyl.u_hi));
    for _ in 0..cyl.depth() {
        p = sys.step(&p);
    }
    p
}

fn image_leaf(sys: &SkewSystem, part: &MarkovPartition, from: &LeafSegment, cyl: &SymbolicCylinder) -> Result<LeafSegment, SkewError> {
    sys.leaf_segment(part, cyl.last(), &image_mid(sys, part, from, cyl))
}

/// Largest `√(Δs² + Δθ²)` between two plaques of one rectangle at matching
/// chart `u`.
pub fn cs_displacement(a: &LeafSegment, b: &LeafSegment) -> f64 {
    let l = a.plaque.length;
    let ds = a.plaque.cross - b.plaque.cross;
    (0..CS_SAMPLES)
        .map(|k| {
            let u = l * k as f64 / (CS_SAMPLES - 1) as f64;
            let dt = crate::skew::circle_dist(a.theta_at_u(u), b.theta_at_u(u));
            ds.hypot(dt)
        })
        .fold(0.0, f64::max)
}

/// First `n ≤ budget` at which the images of the two plaques contain anchor
/// plaques within `ε`; among candidates the largest `min(c̄₁, c̄₂)` wins,
/// then the smallest displacement.
pub fn select_anchor_plaques(
    sys: &SkewSystem,
    part: &MarkovPartition,
    p1: &LeafSegment,
    p2: &LeafSegment,
    epsilon: f64,
    budget: usize,
) -> Result<AnchorPair, CouplingError> {
    let (l1, l2) = (part.rect(p1.rect()).l_u, part.rect(p2.rect()).l_u);
    let (t1, t2) = (LeafTable::new(p1), LeafTable::new(p2));
    for n in 1..=budget.min(part.cylinder_cap()) {
        let c1: Vec<SymbolicCylinder> = part.enumerate_cylinders(p1.rect(), n)?.filter(|c| c.width() > 0.0).collect();
        let c2: Vec<SymbolicCylinder> = part.enumerate_cylinders(p2.rect(), n)?.filter(|c| c.width() > 0.0).collect();
        let mut g1: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, c) in c1.iter().enumerate() {
            g1.entry(c.last()).or_default().push(idx);
        }
        let mut g2: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
        for (idx, c) in c2.iter().enumerate() {
            g2.entry(c.last()).or_default().push((c.s_map.apply(p2.plaque.cross), idx));
        }
        for v in g2.values_mut() {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        // c̄ depends only on the last rectangle, so groups are visited by
        // decreasing b and the first group with a valid pair decides.
        let mut groups: Vec<(f64, usize)> = g1
            .iter()
            .filter_map(|(r, v)| {
                let w = g2.get(r)?;
                Some(((c1[v[0]].width() / l1).min(c2[w[0].1].width() / l2), *r))
            })
            .collect();
        groups.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut mids1: Vec<Option<f64>> = vec![None; c1.len()];
        let mut mids2: Vec<Option<f64>> = vec![None; c2.len()];
        let mut prof1: Vec<Option<[f64; CS_SAMPLES]>> = vec![None; c1.len()];
        let mut prof2: Vec<Option<[f64; CS_SAMPLES]>> = vec![None; c2.len()];
        for (_, r) in groups {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for &i1 in &g1[&r] {
                let s = c1[i1].s_map.apply(p1.plaque.cross);
                let group = &g2[&r];
                let start = group.partition_point(|x| x.0 < s - epsilon);
                for &(s2, i2) in group[start..].iter().take_while(|x| x.0 <= s + epsilon) {
                    let ds = s2 - s;
                    // Each image spans a full plaque, so the preimage midpoint
                    // lands at chart u = l/2, one of the displacement samples.
                    let m1 = *mids1[i1].get_or_insert_with(|| t1.image_mid(sys, part, p1, &c1[i1]).theta);
                    let m2 = *mids2[i2].get_or_insert_with(|| t2.image_mid(sys, part, p2, &c2[i2]).theta);
                    if ds.hypot(crate::skew::circle_dist(m1, m2)) > epsilon + TABLE_SLACK {
                        continue;
                    }
                    let a1 = *prof1[i1].get_or_insert_with(|| t1.image_profile(sys, part, p1, &c1[i1]));
                    let a2 = *prof2[i2].get_or_insert_with(|| t2.image_profile(sys, part, p2, &c2[i2]));
                    let approx = a1.iter().zip(&a2).map(|(x, y)| ds.hypot(crate::skew::circle_dist(*x, *y))).fold(0.0, f64::max);
                    if approx <= epsilon + TABLE_SLACK {
                        cands.push((approx, i1, i2));
                    }
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut best: Option<(f64, LeafSegment, LeafSegment, usize, usize)> = None;
            for (approx, i1, i2) in cands {
                if let Some((bd, ..)) = &best {
                    if approx - TABLE_SLACK > *bd {
                        break;
                    }
                }
                let la = image_leaf(sys, part, p1, &c1[i1])?;
                let lb = image_leaf(sys, part, p2, &c2[i2])?;
                let d = cs_displacement(&la, &lb);
                if d <= epsilon && best.as_ref().is_none_or(|b| d < b.0) {
                    best = Some((d, la, lb, i1, i2));
                }
            }
            if let Some((d, la, lb, i1, i2)) = best {
                return Ok(AnchorPair {
                    n0: n,
                    rect: r,
                    cbar: [c1[i1].width() / l1, c2[i2].width() / l2],
                    leaf: [la, lb],
                    cyl: [c1[i1].clone(), c2[i2].clone()],
                    displacement: d,
                });
            }
        }
    }
    Err(CouplingError::AnchorBudget(budget))
}

/// First depth `m` at which the cylinder of the anchor plaque containing
/// chart `u` lies in `U^m`, following the true orbit of the point.
fn first_u_depth(
    sys: &SkewSystem,
    part: &MarkovPartition,
    anchor: &LeafSegment,
    u: f64,
    profile: &ContractionProfile,
    horizon: usize,
) -> Result<Option<(usize, Vec<usize>)>, CouplingError> {
    let lam = part.auto().lambda_u();
    let sigma = part.sigma();
    let mut orbit: Vec<SkewPoint> = Vec::with_capacity(horizon + 1);
    let mut word: Vec<usize> = Vec::with_capacity(horizon + 1);
    let mut leaves: Vec<Option<LeafSegment>> = Vec::with_capacity(horizon + 1);
    let mut charts: Vec<f64> = Vec::with_capacity(horizon + 1);
    let mut p = anchor.point_at(part, u);
    orbit.push(p);
    word.push(anchor.rect());
    charts.push(u);
    leaves.push(Some(anchor.clone()));
    let ln_k = profile.k.ln();
    let mut single = 0.0;
    for m in 1..=horizon {
        p = sys.step(&p);
        let prev = word[m - 1];
        let mut next = part.locate(&p.base).index;
        if !part.allowed(prev, next) {
            match part.successors(prev).iter().find(|t| part.contains(t.to, &p.base)) {
                Some(t) => next = t.to,
                None => return Ok(None),
            }
        }
        orbit.push(p);
        word.push(next);
        charts.push(part.chart(next, &p.base).u);
        leaves.push(None);
        // Image of the depth-m cylinder at step t, pulled back from [0, L_u].
        let (mut lo, mut hi) = (0.0, part.rect(next).l_u);
        let mut sum = single;
        let wide_from = m.saturating_sub(30);
        for t in (wide_from..m).rev() {
            let tr = part.transition(word[t], word[t + 1]).expect("allowed by construction");
            let a = (lo - tr.u_offset) / (sigma * lam);
            let b = (hi - tr.u_offset) / (sigma * lam);
            lo = a.min(b);
            hi = a.max(b);
            let slope = log_cs_norm_lipschitz(sys) * sys.leaf_lipschitz();
            let v = if slope * (hi - lo) / 2.0 <= INFLATION_TOL {
                log_cs_norm(sys, orbit[t].theta) + slope * (hi - lo) / 2.0
            } else {
                if leaves[t].is_none() {
                    leaves[t] = Some(sys.leaf_segment(part, word[t], &orbit[t])?);
                }
                cs_interval_max(part, sys, leaves[t].as_ref().expect("set"), lo, hi)
            };
            sum += v;
        }
        if m > 30 {
            single += log_cs_norm(sys, orbit[m - 31].theta);
        }
        if sum > ln_k + profile.lambda * m as f64 {
            return Ok(Some((m, word[..=m].to_vec())));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    First,
    Second,
}

impl Side {
    fn idx(self) -> usize {
        match self {
            Side::First => 0,
            Side::Second => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingRecord {
    pub id: usize,
    pub side: Side,
    /// Original chart `u` and height `t` of the particle.
    pub u: f64,
    pub t: f64,
    /// Stopping time; `None` when the horizon or the anchor budget ran out.
    pub r: Option<usize>,
    pub stages: usize,
    /// Partner coordinates on the other start plaque.
    pub partner_u: f64,
    pub partner_t: f64,
    /// `d(f^{R+j} x, f^{R+j} y)` for `j = 0..=SHADOW_STEPS`.
    pub shadow: Vec<f64>,
    /// Iterates after `R` where the pair sat in different rectangles while
    /// both were interior.
    pub component_violations: usize,
    /// First-stage bookkeeping: landed in the anchor set, and if so whether
    /// it was matched or sent to `P^n` for this `n`.
    pub first_in_anchor: bool,
    pub first_stop: Option<usize>,
}

impl CouplingRecord {
    pub fn matched(&self) -> bool {
        self.r.is_some()
    }

    pub fn final_distance(&self) -> f64 {
        self.shadow.last().copied().unwrap_or(f64::NAN)
    }
}

/// Everything fixed before particles move: start plaques, profile and the
/// first-stage anchors.
#[derive(Debug, Clone)]
pub struct CouplingSetup {
    pub y: [ReferenceMeasure; 2],
    pub profile: ContractionProfile,
    pub anchor: AnchorPair,
    pub anchor_budget: usize,
    pub horizon: usize,
}

impl CouplingSetup {
    pub fn new(
        sys: &SkewSystem,
        part: &MarkovPartition,
        y1: ReferenceMeasure,
        y2: ReferenceMeasure,
        profile: ContractionProfile,
        anchor_budget: usize,
        horizon: usize,
    ) -> Result<Self, CouplingError> {
        let anchor = select_anchor_plaques(sys, part, &y1.leaf, &y2.leaf, profile.epsilon, anchor_budget)?;
        Ok(CouplingSetup { y: [y1, y2], profile, anchor, anchor_budget, horizon })
    }

    /// `b = m(f^{-n₀}(Ȳ_j))`.
    pub fn b(&self) -> f64 {
        self.anchor.cbar[0].min(self.anchor.cbar[1])
    }
}

#[derive(Debug, Clone)]
struct PairState {
    leaf: [LeafSegment; 2],
    h: [f64; 2],
    w: [f64; 2],
    umap: [Affine; 2],
    toff: [f64; 2],
    elapsed: usize,
}

fn pull_back(map: &Affine, step: &Affine) -> Affine {
    // map ∘ step⁻¹
    Affine { a: map.a / step.a, b: map.b - map.a * step.b / step.a }
}

struct Piece {
    cyl: SymbolicCylinder,
    j_lo: f64,
    j_hi: f64,
    offset: f64,
    mass: f64,
}

fn pieces(part: &MarkovPartition, st: &PairState, side: usize, anchor: &AnchorPair, tbar: f64) -> Result<Vec<Piece>, CouplingError> {
    let rect = st.leaf[side].rect();
    let l = part.rect(rect).l_u;
    let mut out = Vec::new();
    let mut offset = 0.0;
    for c in part.enumerate_cylinders(rect, anchor.n0)? {
        let nu = c.width() / l;
        if nu <= 0.0 {
            continue;
        }
        let (j_lo, j_hi) = if c.word == anchor.cyl[side].word { (tbar, st.h[side]) } else { (0.0, st.h[side]) };
        let mass = st.w[side] * nu * (j_hi - j_lo);
        if mass <= 0.0 {
            continue;
        }
        out.push(Piece { cyl: c, j_lo, j_hi, offset, mass });
        offset += mass;
    }
    Ok(out)
}

fn simulate(
    sys: &SkewSystem,
    part: &MarkovPartition,
    setup: &CouplingSetup,
    id: usize,
    side: Side,
    u0: f64,
    t0: f64,
) -> Result<CouplingRecord, CouplingError> {
    let s = side.idx();
    let o = 1 - s;
    let prof = &setup.profile;
    let mut st = PairState {
        leaf: [setup.y[0].leaf.clone(), setup.y[1].leaf.clone()],
        h: [1.0, 1.0],
        w: [1.0, 1.0],
        umap: [Affine::IDENTITY, Affine::IDENTITY],
        toff: [0.0, 0.0],
        elapsed: 0,
    };
    let (mut u, mut t) = (u0, t0);
    let mut rec = CouplingRecord {
        id,
        side,
        u: u0,
        t: t0,
        r: None,
        stages: 0,
        partner_u: f64::NAN,
        partner_t: f64::NAN,
        shadow: Vec::new(),
        component_violations: 0,
        first_in_anchor: false,
        first_stop: None,
    };
    loop {
        let anchor = if rec.stages == 0 {
            setup.anchor.clone()
        } else {
            match select_anchor_plaques(sys, part, &st.leaf[0], &st.leaf[1], prof.epsilon, setup.anchor_budget) {
                Ok(a) => a,
                Err(CouplingError::AnchorBudget(_)) => return Ok(rec),
                Err(e) => return Err(e),
            }
        };
        let first = rec.stages == 0;
        rec.stages += 1;
        if st.elapsed + anchor.n0 > setup.horizon {
            return Ok(rec);
        }
        let cbar = anchor.cbar;
        let tbar = [st.h[0] * (cbar[1] / cbar[0]).min(1.0), st.h[1] * (cbar[0] / cbar[1]).min(1.0)];
        let own = &anchor.cyl[s];
        if u >= own.u_lo && u <= own.u_hi && t <= tbar[s] {
            if first {
                rec.first_in_anchor = true;
            }
            let uk = own.u_map.apply(u);
            let budget = U_HORIZON.min(setup.horizon.saturating_sub(st.elapsed + anchor.n0).max(1));
            match first_u_depth(sys, part, &anchor.leaf[0], uk, prof, budget)? {
                None => {
                    let r = st.elapsed + anchor.n0;
                    let u_other = anchor.cyl[o].u_map.invert(uk);
                    let t_other = t * (st.w[s] * cbar[s]) / (st.w[o] * cbar[o]);
                    rec.r = Some(r);
                    rec.partner_u = st.umap[o].apply(u_other);
                    rec.partner_t = st.toff[o] + t_other;
                    let mut x = anchor.leaf[s].point_at(part, uk);
                    let mut y = anchor.leaf[o].point_at(part, uk);
                    for j in 0..=SHADOW_STEPS {
                        rec.shadow.push(x.distance(&y));
                        let (lx, ly) = (part.locate(&x.base), part.locate(&y.base));
                        if lx.interior && ly.interior && lx.index != ly.index {
                            rec.component_violations += 1;
                        }
                        if j < SHADOW_STEPS {
                            x = sys.step(&x);
                            y = sys.step(&y);
                        }
                    }
                    if first {
                        rec.first_stop = None;
                    }
                    return Ok(rec);
                }
                Some((m, word)) => {
                    if first {
                        rec.first_stop = Some(anchor.n0 + m);
                    }
                    let cyl_m = part.cylinder(&word)?;
                    let lk = part.rect(anchor.rect).l_u;
                    let nu = cyl_m.width() / lk;
                    for i in 0..2 {
                        let img = image_leaf(sys, part, &anchor.leaf[i], &cyl_m)?;
                        st.umap[i] = pull_back(&pull_back(&st.umap[i], &anchor.cyl[i].u_map), &cyl_m.u_map);
                        st.w[i] *= cbar[i] * nu;
                        st.h[i] = tbar[i];
                        st.leaf[i] = img;
                    }
                    u = cyl_m.u_map.apply(uk);
                    st.elapsed += anchor.n0 + m;
                }
            }
        } else {
            if first {
                rec.first_stop = Some(anchor.n0);
            }
            let mine = pieces(part, &st, s, &anchor, tbar[s])?;
            let theirs = pieces(part, &st, o, &anchor, tbar[o])?;
            let Some(a) = mine.iter().find(|p| u >= p.cyl.u_lo && u <= p.cyl.u_hi && t >= p.j_lo && t <= p.j_hi) else {
                return Ok(rec);
            };
            let la = part.rect(st.leaf[s].rect()).l_u;
            let nu_a = a.cyl.width() / la;
            let total: f64 = theirs.iter().map(|p| p.mass).sum();
            let mcoord = (a.offset + st.w[s] * nu_a * (t - a.j_lo)).min(total * (1.0 - 1e-15));
            let bi = theirs.partition_point(|p| p.offset + p.mass <= mcoord).min(theirs.len() - 1);
            let b = &theirs[bi];
            let lo = a.offset.max(b.offset);
            let hi = (a.offset + a.mass).min(b.offset + b.mass);
            let lb = part.rect(st.leaf[o].rect()).l_u;
            let nu_b = b.cyl.width() / lb;
            let sub_a = a.j_lo + (lo - a.offset) / (st.w[s] * nu_a);
            let sub_b = b.j_lo + (lo - b.offset) / (st.w[o] * nu_b);
            let mut next = st.clone();
            for (i, piece, nu, sub) in [(s, a, nu_a, sub_a), (o, b, nu_b, sub_b)] {
                next.leaf[i] = image_leaf(sys, part, &st.leaf[i], &piece.cyl)?;
                next.umap[i] = pull_back(&st.umap[i], &piece.cyl.u_map);
                next.w[i] = st.w[i] * nu;
                next.h[i] = (hi - lo) / (st.w[i] * nu);
                next.toff[i] = st.toff[i] + sub;
            }
            u = a.cyl.u_map.apply(u);
            t -= sub_a;
            next.elapsed += anchor.n0;
            st = next;
        }
    }
}

/// Particle recursion for `n_pairs` particles of `m_side`, each with its own
/// RNG stream.
pub fn run_coupling(
    sys: &SkewSystem,
    part: &MarkovPartition,
    setup: &CouplingSetup,
    side: Side,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<CouplingRecord>, CouplingError> {
    let l = setup.y[side.idx()].length();
    (0..n_pairs)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream_rng(seed, id as u64);
            let u = rng.random::<f64>() * l;
            let t = rng.random::<f64>();
            simulate(sys, part, setup, id, side, u, t)
        })
        .collect()
}

/// First-stage summary against the profile.
#[derive(Debug, Clone, Serialize)]
pub struct FirstStage {
    pub b: f64,
    pub n0: usize,
    pub in_anchor: usize,
    pub matched: usize,
    pub fraction: f64,
    pub stderr: f64,
    /// `(n, measured m₁(P^n), bound b e^{λ s₁ (n − n₀)})` for `n > n₀`.
    pub stage_masses: Vec<(usize, f64, f64)>,
    /// `m(P^{n₀}) + b − 1`, exact from the piece masses.
    pub mass_defect: f64,
}

pub fn first_stage(setup: &CouplingSetup, records: &[CouplingRecord]) -> FirstStage {
    let n = records.len().max(1) as f64;
    let in_anchor = records.iter().filter(|r| r.first_in_anchor).count();
    let matched = records.iter().filter(|r| r.first_in_anchor && r.first_stop.is_none() && r.stages == 1 && r.matched()).count();
    let fraction = if in_anchor > 0 { matched as f64 / in_anchor as f64 } else { f64::NAN };
    let stderr = (fraction * (1.0 - fraction) / in_anchor.max(1) as f64).sqrt();
    let n0 = setup.anchor.n0;
    let b = setup.b();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        if let Some(k) = r.first_stop {
            if k > n0 {
                *counts.entry(k).or_default() += 1;
            }
        }
    }
    let p = &setup.profile;
    let stage_masses = counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / n, b * (p.lambda * p.s1 * (k - n0) as f64).exp()))
        .collect();
    let c = &setup.anchor.cbar;
    let m_pn0 = 1.0 - c[0] * (c[1] / c[0]).min(1.0);
    FirstStage { b, n0, in_anchor, matched, fraction, stderr, stage_masses, mass_defect: m_pn0 + b - 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    pub c: f64,
    pub rho: f64,
    pub r2: f64,
    pub points: usize,
}

/// Survival function `P(R > n)` (unmatched counts as `R = ∞`).
pub fn survival(records: &[CouplingRecord], n_max: usize) -> Vec<f64> {
    let total = records.len() as f64;
    let mut hist = vec![0usize; n_max + 2];
    for r in records {
        if let Some(x) = r.r {
            if x <= n_max {
                hist[x] += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(n_max + 1);
    let mut done = 0;
    for h in hist.iter().take(n_max + 1) {
        done += h;
        out.push((total - done as f64) / total);
    }
    out
}

/// Log-linear fit of `P(R > n)` over `n` from the smallest observed `R` while
/// at least 10 records survive.
pub fn tail_fit(records: &[CouplingRecord]) -> Result<TailFit, CouplingError> {
    tail_fit_values(&records.iter().map(|r| r.r).collect::<Vec<_>>())
}

pub fn tail_fit_values(rs: &[Option<usize>]) -> Result<TailFit, CouplingError> {
    if rs.len() < 1000 {
        return Err(CouplingError::TooFewRecords { found: rs.len(), need: 1000 });
    }
    let total = rs.len() as f64;
    let matched: Vec<usize> = rs.iter().flatten().copied().collect();
    let Some(&lo) = matched.iter().min() else {
        return Err(CouplingError::TooFewRecords { found: 0, need: 1000 });
    };
    let hi = matched.iter().copied().max().unwrap_or(lo);
    let mut hist = vec![0usize; hi + 1];
    for &x in &matched {
        hist[x] += 1;
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut done: usize = hist[..lo].iter().sum();
    for (n, h) in hist.iter().enumerate().skip(lo) {
        done += h;
        let surv = total - done as f64;
        if surv < 10.0 {
            break;
        }
        xs.push(n as f64);
        ys.push((surv / total).ln());
    }
    let f = linear_fit(&xs, &ys).ok_or(CouplingError::TooFewRecords { found: xs.len(), need: 2 })?;
    Ok(TailFit { c: f.intercept.exp(), rho: f.slope.exp(), r2: f.r2, points: xs.len() })
}

/// Fit of the median shadow distance against `n − R`.
pub fn shadow_fit(records: &[CouplingRecord]) -> Result<TailFit, CouplingError> {
    let matched: Vec<&CouplingRecord> = records.iter().filter(|r| r.matched()).collect();
    if matched.len() < 10 {
        return Err(CouplingError::TooFewRecords { found: matched.len(), need: 10 });
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for j in 0..=SHADOW_STEPS {
        let mut v: Vec<f64> = matched.iter().map(|r| r.shadow[j]).collect();
        v.sort_by(f64::total_cmp);
        let med = v[v.len() / 2];
        if med > 1e-14 {
            xs.push(j as f64);
            ys.push(med.ln());
        }
    }
    let f = linear_fit(&xs, &ys).ok_or(CouplingError::TooFewRecords { found: xs.len(), need: 2 })?;
    Ok(TailFit { c: f.intercept.exp(), rho: f.slope.exp(), r2: f.r2, points: xs.len() })
}

/// Fraction of matched records whose shadow distances all stay under the
/// decaying envelope `K ε e^{λ j/2}`.
pub fn envelope_fraction(profile: &ContractionProfile, records: &[CouplingRecord]) -> f64 {
    let matched: Vec<&CouplingRecord> = records.iter().filter(|r| r.matched()).collect();
    let ok = matched
        .iter()
        .filter(|r| r.shadow.iter().enumerate().all(|(j, d)| *d <= profile.envelope(j) * (1.0 + 1e-9)))
        .count();
    ok as f64 / matched.len().max(1) as f64
}

/// 2D KS between partners of first-side records and matched second-side
/// records, in normalized `(u, t)`.
pub fn tau_ks(setup: &CouplingSetup, first: &[CouplingRecord], second: &[CouplingRecord]) -> f64 {
    let l2 = setup.y[1].length();
    let pushed: Vec<(f64, f64)> = first.iter().filter(|r| r.matched()).map(|r| (r.partner_u / l2, r.partner_t)).collect();
    let direct: Vec<(f64, f64)> = second.iter().filter(|r| r.matched()).map(|r| (r.u / l2, r.t)).collect();
    ks_2d(&pushed, &direct)
}

pub fn records_csv(records: &[CouplingRecord]) -> String {
    let mut out = String::from("pair_id,side,R,matched,stages,final_distance\n");
    for r in records {
        let side = match r.side {
            Side::First => 1,
            Side::Second => 2,
        };
        let rv = r.r.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{:.17e}\n", r.id, side, rv, r.matched(), r.stages, r.final_distance()));
    }
    out
}
