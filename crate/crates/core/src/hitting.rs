//! Hitting averages of unstable plaque images on center-stable sections,
//! transverse measures and their holonomy invariance.

use crate::gibbs::EmpiricalMeasure;
use crate::numerics::{circular_cover, ks_2d, linear_fit, mean_stderr};
use crate::partition::{Chart, MarkovPartition, PartitionError};
use crate::reference::ReferenceMeasure;
use crate::skew::{section_hit, CrossSection, SkewError, SkewPoint, SkewSystem};
use crate::stream_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Particles drawn per parallel work item in Monte Carlo sweeps.
const MC_CHUNK: usize = 4096;

/// Smallest number of usable points accepted by [`rate_fit`].
pub const MIN_FIT_POINTS: usize = 5;

/// Fewest particles a center-atom slab may hold.
pub const MIN_SLAB: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HittingError {
    #[error("no landings in the target rectangle at n = {0}; n is below the first-hit depth")]
    BelowFirstHit(usize),
    #[error("already converged: every difference is below the noise floor")]
    AlreadyConverged,
    #[error("only {found} usable points above the noise floor, need {need}")]
    TooFewPoints { found: usize, need: usize },
    #[error("section rectangle {0} does not exist")]
    OutsideRectangle(usize),
    #[error("no particles of the measure lie in rectangle {0}")]
    NoParticles(usize),
    #[error("empty common holonomy domain within leaf budget {0}")]
    EmptyDomain(f64),
    #[error("only {found} particles in the slab, need {need}")]
    TooFewInSlab { found: usize, need: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Skew(#[from] SkewError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HitMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub point: SkewPoint,
    pub value: f64,
}

/// Monte Carlo estimate of one hitting average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub landed: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Slope of `log₁₀|a_n − limit|` against `n`.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub used: usize,
    pub n_first: usize,
    pub n_last: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct HittingSeries {
    pub n_values: Vec<usize>,
    pub averages: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub counts: Vec<u64>,
    pub methods: Vec<HitMethod>,
    pub limit_estimate: Option<f64>,
    pub limit_stderr: Option<f64>,
    pub rate_fit: Option<RateFit>,
}

impl HittingSeries {
    fn empty() -> Self {
        HittingSeries {
            n_values: Vec::new(),
            averages: Vec::new(),
            stderrs: Vec::new(),
            counts: Vec::new(),
            methods: Vec::new(),
            limit_estimate: None,
            limit_stderr: None,
            rate_fit: None,
        }
    }

    fn push(&mut self, n: usize, avg: f64, se: f64, count: u64, method: HitMethod) {
        self.n_values.push(n);
        self.averages.push(avg);
        self.stderrs.push(se);
        self.counts.push(count);
        self.methods.push(method);
    }

    pub fn len(&self) -> usize {
        self.n_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_values.is_empty()
    }

    /// Entries of `other` with `n` beyond the last entry of `self` are appended.
    pub fn extend_with(&mut self, other: &HittingSeries) {
        let last = self.n_values.last().copied();
        for k in 0..other.len() {
            if last.is_none_or(|l| other.n_values[k] > l) {
                self.push(other.n_values[k], other.averages[k], other.stderrs[k], other.counts[k], other.methods[k]);
            }
        }
    }

    /// Ratios `counts(n+1) / counts(n)` for consecutive exact entries.
    pub fn count_ratios(&self) -> Vec<f64> {
        (1..self.len())
            .filter(|&k| {
                self.methods[k] == HitMethod::Exact
                    && self.methods[k - 1] == HitMethod::Exact
                    && self.n_values[k] == self.n_values[k - 1] + 1
                    && self.counts[k - 1] > 0
            })
            .map(|k| self.counts[k] as f64 / self.counts[k - 1] as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,method,count,average,stderr\n");
        for k in 0..self.len() {
            let m = match self.methods[k] {
                HitMethod::Exact => "exact",
                HitMethod::MonteCarlo => "monte-carlo",
            };
            out.push_str(&format!(
                "{},{},{},{:.17e},{:.17e}\n",
                self.n_values[k], m, self.counts[k], self.averages[k], self.stderrs[k]
            ));
        }
        out
    }
}

/// Section hits of the plaques making up `f^n(start) ∩ ℳ_j`, one per
/// admissible word from the start rectangle to the section's rectangle.
pub fn hit_exact<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    start: &ReferenceMeasure,
    section: &CrossSection,
    n: usize,
    phi: F,
) -> Result<Vec<Hit>, HittingError>
where
    F: Fn(&SkewPoint) -> f64 + Sync,
{
    let j = check_section(part, section)?;
    let root = part.root_cylinder(start.rect());
    let cylinders: Vec<_> = part.enumerate_from(root, n, Some(j))?.collect();
    cylinders
        .par_iter()
        .map(|cyl| {
            let z = start.leaf.point_at(part, 0.5 * (cyl.u_lo + cyl.u_hi));
            let mut w = z;
            for _ in 0..n {
                w = sys.step(&w);
            }
            let leaf = sys.leaf_segment(part, j, &w)?;
            let point = section_hit(part, section, &leaf)?;
            Ok(Hit { point, value: phi(&point) })
        })
        .collect()
}

/// Monte Carlo hitting average: `ν^u` samples on the start plaque are pushed
/// `n` times, those landing in `ℳ_j` are projected along their plaques to the
/// section, and `φ` is averaged with equal weights.
#[allow(clippy::too_many_arguments)]
pub fn hit_mc<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    start: &ReferenceMeasure,
    section: &CrossSection,
    n: usize,
    n_samples: usize,
    seed: u64,
    phi: F,
) -> Result<HitEstimate, HittingError>
where
    F: Fn(&SkewPoint) -> f64 + Sync,
{
    let j = check_section(part, section)?;
    let values: Vec<f64> = (0..n_samples.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>, HittingError> {
            let mut rng = stream_rng(seed, c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut out = Vec::new();
            for _ in 0..count {
                let mut w = start.sample(part, &mut rng);
                for _ in 0..n {
                    w = sys.step(&w);
                }
                if part.locate(&w.base).index != j {
                    continue;
                }
                let leaf = sys.leaf_segment(part, j, &w)?;
                out.push(phi(&section_hit(part, section, &leaf)?));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    if values.is_empty() {
        return Err(HittingError::BelowFirstHit(n));
    }
    let (mean, stderr) = mean_stderr(&values);
    Ok(HitEstimate { mean, stderr, landed: values.len(), samples: n_samples })
}

fn check_section(part: &MarkovPartition, section: &CrossSection) -> Result<usize, HittingError> {
    if section.rect >= part.len() {
        return Err(HittingError::OutsideRectangle(section.rect));
    }
    Ok(section.rect)
}

/// Exact hitting averages for each `n`. Depths with no hits are skipped.
pub fn series_exact<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    start: &ReferenceMeasure,
    section: &CrossSection,
    ns: &[usize],
    phi: F,
) -> Result<HittingSeries, HittingError>
where
    F: Fn(&SkewPoint) -> f64 + Sync,
{
    let mut s = HittingSeries::empty();
    for &n in ns {
        let hits = hit_exact(sys, part, start, section, n, &phi)?;
        if hits.is_empty() {
            continue;
        }
        let v: Vec<f64> = hits.iter().map(|h| h.value).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        s.push(n, mean, 0.0, v.len() as u64, HitMethod::Exact);
    }
    Ok(s)
}

/// Monte Carlo hitting averages for each `n` from one sweep: every sample
/// orbit is followed to the largest `n` and recorded at each requested depth.
/// Depths with no landings are skipped.
#[allow(clippy::too_many_arguments)]
pub fn series_mc<F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    start: &ReferenceMeasure,
    section: &CrossSection,
    ns: &[usize],
    n_samples: usize,
    seed: u64,
    phi: F,
) -> Result<HittingSeries, HittingError>
where
    F: Fn(&SkewPoint) -> f64 + Sync,
{
    let j = check_section(part, section)?;
    let mut ns: Vec<usize> = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let Some(&n_max) = ns.last() else {
        return Ok(HittingSeries::empty());
    };
    let k = ns.len();
    // Per depth: (sum, sum of squares, count).
    let acc = (0..n_samples.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| -> Result<Vec<(f64, f64, u64)>, HittingError> {
            let mut rng = stream_rng(seed, c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut out = vec![(0.0, 0.0, 0u64); k];
            for _ in 0..count {
                let mut w = start.sample(part, &mut rng);
                let mut next = 0;
                for n in 0..=n_max {
                    if n == ns[next] {
                        if part.locate(&w.base).index == j {
                            let leaf = sys.leaf_segment(part, j, &w)?;
                            let v = phi(&section_hit(part, section, &leaf)?);
                            out[next].0 += v;
                            out[next].1 += v * v;
                            out[next].2 += 1;
                        }
                        next += 1;
                        if next == k {
                            break;
                        }
                    }
                    w = sys.step(&w);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(vec![(0.0, 0.0, 0u64); k], |mut t, v| {
            for (a, b) in t.iter_mut().zip(v) {
                a.0 += b.0;
                a.1 += b.1;
                a.2 += b.2;
            }
            t
        });
    let mut s = HittingSeries::empty();
    for (idx, &n) in ns.iter().enumerate() {
        let (sum, sq, cnt) = acc[idx];
        if cnt == 0 {
            continue;
        }
        let c = cnt as f64;
        let mean = sum / c;
        let var = if cnt > 1 { ((sq - c * mean * mean) / (c - 1.0)).max(0.0) } else { 0.0 };
        s.push(n, mean, (var / c).sqrt(), cnt, HitMethod::MonteCarlo);
    }
    Ok(s)
}

/// Smallest `n ≤ cap` with at least one admissible word from `i` to `j`.
pub fn first_hit_depth(part: &MarkovPartition, i: usize, j: usize, cap: usize) -> Option<usize> {
    let mut reach = vec![false; part.len()];
    reach[i] = true;
    for n in 0..=cap {
        if reach[j] {
            return Some(n);
        }
        let mut next = vec![false; part.len()];
        for (a, r) in reach.iter().enumerate() {
            if *r {
                for t in part.successors(a) {
                    next[t.to] = true;
                }
            }
        }
        reach = next;
    }
    None
}

/// Least squares of `log₁₀|a_n − limit|` on `n` over the leading run of
/// entries above the noise floor `3·√(se_n² + limit_se²)`.
pub fn rate_fit(series: &HittingSeries, limit: f64, limit_se: f64) -> Result<RateFit, HittingError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut any = false;
    for k in 0..series.len() {
        let diff = (series.averages[k] - limit).abs();
        let floor = (3.0 * series.stderrs[k].hypot(limit_se)).max(1e-14);
        if diff <= floor {
            if any {
                break;
            }
            continue;
        }
        any = true;
        xs.push(series.n_values[k] as f64);
        ys.push(diff.log10());
    }
    if xs.is_empty() {
        return Err(HittingError::AlreadyConverged);
    }
    if xs.len() < MIN_FIT_POINTS {
        return Err(HittingError::TooFewPoints { found: xs.len(), need: MIN_FIT_POINTS });
    }
    let f = linear_fit(&xs, &ys).expect("distinct n values");
    Ok(RateFit {
        slope: f.slope,
        intercept: f.intercept,
        r2: f.r2,
        used: xs.len(),
        n_first: xs[0] as usize,
        n_last: xs[xs.len() - 1] as usize,
    })
}

/// Projection of `μ|ℳ_i` to a section along strong-unstable plaques.
#[derive(Debug, Clone, Serialize)]
pub struct TransverseEstimate {
    pub section: CrossSection,
    pub points: Vec<SkewPoint>,
    /// Chart `s` coordinate of each point along the section.
    pub s: Vec<f64>,
    pub weights: Vec<f64>,
    /// `c_i = 1 / vol^u` of the rectangle's unstable plaques.
    pub scale: f64,
    pub total_mass: f64,
    /// Binomial standard error of `total_mass` given the source particle count.
    pub total_mass_se: f64,
}

impl TransverseEstimate {
    /// `(1/‖μ̂_S‖) ∫ φ dμ̂_S` with a standard error.
    pub fn normalized_integral<F: Fn(&SkewPoint) -> f64>(&self, phi: F) -> (f64, f64) {
        let v: Vec<f64> = self.points.iter().map(phi).collect();
        mean_stderr(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,x1,x2,theta,weight\n");
        for k in 0..self.points.len() {
            let p = &self.points[k];
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.s[k],
                p.base.x1(),
                p.base.x2(),
                p.theta,
                self.weights[k]
            ));
        }
        out
    }
}

/// Project every particle of `m` lying in the section's rectangle onto the
/// section along its strong-unstable plaque.
pub fn estimate_transverse(
    sys: &SkewSystem,
    part: &MarkovPartition,
    m: &EmpiricalMeasure,
    section: &CrossSection,
) -> Result<TransverseEstimate, HittingError> {
    let i = check_section(part, section)?;
    let projected: Vec<(SkewPoint, f64, f64)> = m
        .particles
        .par_iter()
        .zip(m.weights.par_iter())
        .filter(|(p, _)| part.locate(&p.base).index == i)
        .map(|(p, w)| {
            let leaf = sys.leaf_segment(part, i, p)?;
            let q = section_hit(part, section, &leaf)?;
            Ok((q, leaf.plaque.cross, *w))
        })
        .collect::<Result<_, SkewError>>()?;
    if projected.is_empty() {
        return Err(HittingError::NoParticles(i));
    }
    let total_mass: f64 = projected.iter().map(|x| x.2).sum();
    let generated = 1.0 / m.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let total_mass_se = (total_mass * (1.0 - total_mass).max(0.0) / generated).sqrt();
    let (points, rest): (Vec<_>, Vec<_>) = projected.into_iter().map(|(q, s, w)| (q, (s, w))).unzip();
    let (s, weights) = rest.into_iter().unzip();
    Ok(TransverseEstimate {
        section: *section,
        points,
        s,
        weights,
        scale: 1.0 / part.rect(i).l_u,
        total_mass,
        total_mass_se,
    })
}

/// Linear leaf continuation from one section to another: every leaf meeting
/// `S₁` at chart height `s₁` meets `S₂` at `s₁ − ds` after travelling `t`
/// along `e_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SectionHolonomy {
    pub t: f64,
    pub ds: f64,
    /// Domain `[lo, hi]` in `s₁`.
    pub lo: f64,
    pub hi: f64,
}

impl SectionHolonomy {
    /// The continuation with the longest common domain among those with
    /// `|t| ≤ budget`, preferring shorter travel on ties.
    pub fn find(part: &MarkovPartition, s1: &CrossSection, s2: &CrossSection, budget: f64) -> Option<Self> {
        let auto = part.auto();
        let p1 = part.point_at(s1.rect, Chart { u: s1.u, s: 0.0 });
        let p2 = part.point_at(s2.rect, Chart { u: s2.u, s: 0.0 });
        let d = p1.displacement_to(&p2);
        let (l1, l2) = (part.rect(s1.rect).l_s, part.rect(s2.rect).l_s);
        let reach = budget.ceil() as i64 + 2;
        let mut best: Option<SectionHolonomy> = None;
        for a in -reach..=reach {
            for b in -reach..=reach {
                let e = auto.eigen_coords([d[0] + a as f64, d[1] + b as f64]);
                if e.u.abs() > budget {
                    continue;
                }
                let lo = e.s.max(0.0);
                let hi = (e.s + l2).min(l1);
                if hi - lo <= 1e-9 {
                    continue;
                }
                let cand = SectionHolonomy { t: e.u, ds: e.s, lo, hi };
                let better = match &best {
                    None => true,
                    Some(bst) => {
                        let (w, bw) = (hi - lo, bst.hi - bst.lo);
                        w > bw + 1e-12 || ((w - bw).abs() <= 1e-12 && e.u.abs() < bst.t.abs())
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

/// Outcome of [`check_holonomy_invariance`].
#[derive(Debug, Clone, Serialize)]
pub struct HolonomyCheck {
    pub holonomy: SectionHolonomy,
    pub ks: f64,
    /// Pushed `c_i μ̂_{S₁}` mass over `c_j μ̂_{S₂}` mass, per bin along the image.
    pub ratios: Vec<f64>,
    pub spread: f64,
    pub mean_ratio: f64,
    pub pushed: usize,
    pub target: usize,
}

/// Mid-plaque section of another rectangle with the longest holonomy domain
/// from `section` within `budget`.
pub fn widest_partner(part: &MarkovPartition, section: &CrossSection, budget: f64) -> Option<(CrossSection, SectionHolonomy)> {
    (0..part.len())
        .filter(|&j| j != section.rect)
        .filter_map(|j| {
            let other = CrossSection::at(part, j, 0.5 * part.rect(j).l_u);
            SectionHolonomy::find(part, section, &other, budget).map(|h| (other, h))
        })
        .max_by(|a, b| (a.1.hi - a.1.lo).total_cmp(&(b.1.hi - b.1.lo)))
}

/// Push `c_i·est1` through the leaf continuation onto `S₂` and compare with
/// `c_j·est2` on the image: 2D KS in `(s, θ)` and binned density ratios.
pub fn check_holonomy_invariance(
    sys: &SkewSystem,
    part: &MarkovPartition,
    est1: &TransverseEstimate,
    est2: &TransverseEstimate,
    budget: f64,
    bins: usize,
) -> Result<HolonomyCheck, HittingError> {
    let h = SectionHolonomy::find(part, &est1.section, &est2.section, budget)
        .ok_or(HittingError::EmptyDomain(budget))?;
    let depth = sys.holonomy_depth();
    let pushed: Vec<(f64, f64, f64)> = (0..est1.points.len())
        .into_par_iter()
        .filter(|&k| est1.s[k] >= h.lo && est1.s[k] <= h.hi)
        .map(|k| {
            let leaf = sys.leaf(&est1.points[k], depth)?;
            Ok((est1.s[k] - h.ds, leaf.theta_at(h.t), est1.scale * est1.weights[k]))
        })
        .collect::<Result<_, SkewError>>()?;
    let (lo, hi) = (h.lo - h.ds, h.hi - h.ds);
    let target: Vec<(f64, f64, f64)> = (0..est2.points.len())
        .filter(|&k| est2.s[k] >= lo && est2.s[k] <= hi)
        .map(|k| (est2.s[k], est2.points[k].theta, est2.scale * est2.weights[k]))
        .collect();
    if pushed.is_empty() || target.is_empty() {
        return Err(HittingError::EmptyDomain(budget));
    }
    let bins = bins.max(1);
    let bin_of = |s: f64| (((s - lo) / (hi - lo)) * bins as f64).clamp(0.0, bins as f64 - 1.0) as usize;
    let mut a = vec![0.0; bins];
    let mut b = vec![0.0; bins];
    for p in &pushed {
        a[bin_of(p.0)] += p.2;
    }
    for p in &target {
        b[bin_of(p.0)] += p.2;
    }
    let ratios: Vec<f64> = a.iter().zip(&b).map(|(x, y)| if *y > 0.0 { x / y } else { f64::INFINITY }).collect();
    let spread = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_ratio = a.iter().sum::<f64>() / b.iter().sum::<f64>();
    let ks = ks_2d(
        &pushed.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
        &target.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
    );
    Ok(HolonomyCheck { holonomy: h, ks, ratios, spread, mean_ratio, pushed: pushed.len(), target: target.len() })
}

/// Center-circle cluster diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct CenterAtomReport {
    pub slab_particles: usize,
    /// `(center, size)` of each `ε`-arc covering the projected fiber values.
    pub clusters: Vec<(f64, usize)>,
    /// Cluster count using only the first half of the slab particles.
    pub count_half: usize,
    /// Count stable under halving and all mass in a few arcs.
    pub atomic: bool,
}

impl CenterAtomReport {
    pub fn count(&self) -> usize {
        self.clusters.len()
    }
}

/// Particles whose base lies within `radius` of the anchor are projected
/// along their strong-unstable plaques onto the anchor's center-stable
/// plaque; their fiber values are covered by arcs of length `eps`.
pub fn center_atom_probe(
    sys: &SkewSystem,
    part: &MarkovPartition,
    m: &EmpiricalMeasure,
    anchor: &SkewPoint,
    radius: f64,
    eps: f64,
) -> Result<CenterAtomReport, HittingError> {
    let section = CrossSection::through(part, *anchor)?;
    let i = section.rect;
    let thetas: Vec<f64> = m
        .particles
        .par_iter()
        .filter(|p| p.base.distance(&anchor.base) < radius && part.locate(&p.base).index == i)
        .map(|p| {
            let leaf = sys.leaf_segment(part, i, p)?;
            Ok(section_hit(part, &section, &leaf)?.theta)
        })
        .collect::<Result<_, SkewError>>()?;
    if thetas.len() < MIN_SLAB {
        return Err(HittingError::TooFewInSlab { found: thetas.len(), need: MIN_SLAB });
    }
    let clusters = circular_cover(&thetas, eps);
    let count_half = circular_cover(&thetas[..thetas.len() / 2], eps).len();
    let atomic = clusters.len() == count_half && (clusters.len() as f64) * eps < 0.1;
    Ok(CenterAtomReport { slab_particles: thetas.len(), clusters, count_half, atomic })
}

/// Uniformly distributed start plaque used by the drivers.
pub fn random_start<R: Rng>(sys: &SkewSystem, part: &MarkovPartition, rng: &mut R) -> Result<ReferenceMeasure, SkewError> {
    ReferenceMeasure::random(sys, part, rng)
}
