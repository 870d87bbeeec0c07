//! Large deviations of Birkhoff sums, the cylinder cumulant bound and decay
//! of correlations.

use crate::coupling::{cylinder_sums, leaf_interval_max, log_cs_norm, log_cs_norm_lipschitz, ContractionProfile, CouplingError};
use crate::numerics::{linear_fit, normal_cdf, wilson};
use crate::partition::MarkovPartition;
use crate::reference::ReferenceMeasure;
use crate::skew::{SkewError, SkewPoint, SkewSystem};
use crate::stream_rng;
use crate::torus::{IntMatrix, ToralAutomorphism};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Samples per RNG stream; each chunk also draws one fresh plaque.
pub const SAMPLE_CHUNK: usize = 4096;
pub const DEFAULT_BURN_IN: usize = 50;
pub const BOOTSTRAP_REPS: usize = 200;
/// Estimates count as signal only above this many standard errors.
pub const NOISE_FACTOR: f64 = 3.0;
/// Diameter of the flat three-torus.
const DIAMETER: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("alpha too large: no deviation beyond {alpha} at n = {n}")]
    AlphaTooLarge { alpha: f64, n: usize },
    #[error("mixing faster than resolution: no correlation above noise")]
    BelowNoise,
    #[error("{found} above-noise points, need at least {need}")]
    TooFewAboveNoise { found: usize, need: usize },
    #[error("unknown observable `{0}`")]
    UnknownObservable(String),
    #[error("n_values must be non-empty and increasing")]
    BadSchedule,
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Skew(#[from] SkewError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Trig {
    Cos,
    Sin,
}

/// `coeff · trig(2π (k₁x₁ + k₂x₂ + k₃θ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Term {
    pub coeff: f64,
    pub trig: Trig,
    pub freq: [i32; 3],
}

impl Term {
    fn eval(&self, p: &SkewPoint) -> f64 {
        let [a, b, c] = self.freq;
        let phase = TAU * (a as f64 * p.base.x1() + b as f64 * p.base.x2() + c as f64 * p.theta);
        self.coeff
            * match self.trig {
                Trig::Cos => phase.cos(),
                Trig::Sin => phase.sin(),
            }
    }

    fn freq_norm(&self) -> f64 {
        let [a, b, c] = self.freq.map(|k| k as f64);
        (a * a + b * b + c * c).sqrt()
    }

    /// `sup |t(p) − t(q)| / d(p, q)^γ`, attained along the frequency vector.
    fn seminorm(&self, gamma: f64) -> f64 {
        let k = self.freq_norm();
        if k == 0.0 || self.coeff == 0.0 {
            return 0.0;
        }
        let amp = self.coeff.abs();
        if gamma >= 1.0 {
            return amp * TAU * k;
        }
        // Maximiser of 2 sin(πkd)/d^γ solves x cot x = γ with x = πkd.
        let (mut lo, mut hi) = (1e-12, PI / 2.0);
        for _ in 0..200 {
            let x = 0.5 * (lo + hi);
            if x / x.tan() > gamma {
                lo = x;
            } else {
                hi = x;
            }
        }
        let d = (0.5 * (lo + hi) / (PI * k)).min(DIAMETER);
        amp * 2.0 * (PI * k * d).sin() / d.powf(gamma)
    }
}

/// Closed-form observable on `T² × S¹`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observable {
    pub name: String,
    pub constant: f64,
    pub terms: Vec<Term>,
    pub gamma: f64,
}

impl Observable {
    fn single(name: &str, trig: Trig, freq: [i32; 3]) -> Self {
        Observable { name: name.into(), constant: 0.0, terms: vec![Term { coeff: 1.0, trig, freq }], gamma: 1.0 }
    }

    pub fn cos_theta() -> Self {
        Self::single("cos2pi_theta", Trig::Cos, [0, 0, 1])
    }

    pub fn sin_theta() -> Self {
        Self::single("sin2pi_theta", Trig::Sin, [0, 0, 1])
    }

    pub fn cos_x1() -> Self {
        Self::single("cos2pi_x1", Trig::Cos, [1, 0, 0])
    }

    pub fn sin_x2() -> Self {
        Self::single("sin2pi_x2", Trig::Sin, [0, 1, 0])
    }

    pub fn cos_x1_theta() -> Self {
        Self::single("cos2pi_x1_plus_theta", Trig::Cos, [1, 0, 1])
    }

    pub fn cos_2theta() -> Self {
        Self::single("cos4pi_theta", Trig::Cos, [0, 0, 2])
    }

    pub fn constant(c: f64) -> Self {
        Observable { name: "constant".into(), constant: c, terms: Vec::new(), gamma: 1.0 }
    }

    pub fn catalog() -> Vec<Observable> {
        vec![
            Self::cos_theta(),
            Self::sin_theta(),
            Self::cos_x1(),
            Self::sin_x2(),
            Self::cos_x1_theta(),
            Self::cos_2theta(),
            Self::constant(1.0),
        ]
    }

    pub fn by_name(name: &str) -> Result<Observable, StatsError> {
        Self::catalog().into_iter().find(|o| o.name == name).ok_or_else(|| StatsError::UnknownObservable(name.into()))
    }

    /// `self − c`, keeping the name.
    pub fn shifted(&self, c: f64) -> Observable {
        Observable { constant: self.constant - c, ..self.clone() }
    }

    pub fn with_gamma(&self, gamma: f64) -> Observable {
        Observable { gamma, ..self.clone() }
    }

    pub fn eval(&self, p: &SkewPoint) -> f64 {
        self.constant + self.terms.iter().map(|t| t.eval(p)).sum::<f64>()
    }

    /// Upper bound on `sup |φ|`, exact for a single term plus a constant.
    pub fn sup_norm(&self) -> f64 {
        self.constant.abs() + self.terms.iter().map(|t| t.coeff.abs()).sum::<f64>()
    }

    pub fn holder_seminorm(&self) -> f64 {
        self.terms.iter().map(|t| t.seminorm(self.gamma)).sum()
    }

    /// `‖φ‖_γ = sup|φ| + γ-seminorm`.
    pub fn holder_norm(&self) -> f64 {
        self.sup_norm() + self.holder_seminorm()
    }

    /// Lipschitz constant along strong-unstable leaves, per unit chart `u`.
    pub fn leaf_slope(&self, sys: &SkewSystem) -> f64 {
        let eu = sys.auto().e_u();
        self.terms
            .iter()
            .map(|t| {
                let [a, b, c] = t.freq.map(|k| k as f64);
                t.coeff.abs() * TAU * ((a * eu[0] + b * eu[1]).abs() + c.abs() * sys.leaf_lipschitz())
            })
            .sum()
    }
}

/// Largest sampled `|φ(p) − φ(q)| / d(p, q)^γ` over random pairs at
/// log-uniform separations.
pub fn sampled_seminorm(obs: &Observable, n_pairs: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 0);
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let p = SkewPoint::new(crate::torus::TorusPoint::from_unit(rng.random(), rng.random()), rng.random());
        let r = (1e-4f64.ln() + rng.random::<f64>() * (DIAMETER.ln() - 1e-4f64.ln())).exp();
        let dir: [f64; 3] = loop {
            let v = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 0.5 {
                break v.map(|x| x / n);
            }
        };
        let q = SkewPoint::new(p.base.translate([r * dir[0], r * dir[1]]), (p.theta + r * dir[2]).rem_euclid(1.0));
        let d = p.distance(&q);
        if d > 0.0 {
            best = best.max((obs.eval(&p) - obs.eval(&q)).abs() / d.powf(obs.gamma));
        }
    }
    best
}

/// Draws `n` points: each chunk picks a random reference measure, samples it
/// and pushes `burn_in` steps. With `burn_in = 0` this is a measure of the
/// reference class itself; large `burn_in` approximates the Gibbs state.
pub fn for_each_chunk<T, F>(
    sys: &SkewSystem,
    part: &MarkovPartition,
    n: usize,
    burn_in: usize,
    seed: u64,
    work: F,
) -> Result<Vec<T>, StatsError>
where
    T: Send,
    F: Fn(&[SkewPoint]) -> T + Sync,
{
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let size = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
            let mut pts = Vec::with_capacity(size);
            let mut plaque = ReferenceMeasure::random(sys, part, &mut rng)?;
            for k in 0..size {
                if k % 256 == 255 {
                    plaque = ReferenceMeasure::random(sys, part, &mut rng)?;
                }
                let mut p = plaque.sample(part, &mut rng);
                for _ in 0..burn_in {
                    p = sys.step(&p);
                }
                pts.push(p);
            }
            Ok(work(&pts))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailPoint {
    pub n: usize,
    pub exceed: u64,
    pub total: u64,
    pub prob: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationFit {
    /// `c_α` in `C_α e^{-c_α n}`.
    pub rate: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub alpha: f64,
    pub centering: f64,
    pub points: Vec<TailPoint>,
    pub fit: Option<DeviationFit>,
    /// Cochran–Armitage statistic against `n`; negative means decreasing.
    pub trend_z: f64,
    /// Decreasing trend at one-sided 95%.
    pub monotone: bool,
}

impl DeviationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,exceed,total,prob,wilson_lo,wilson_hi\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{:.17e},{:.17e},{:.17e}\n", p.n, p.exceed, p.total, p.prob, p.lo, p.hi));
        }
        out
    }
}

/// Cochran–Armitage trend statistic for `(score, successes, trials)`.
pub fn trend_statistic(groups: &[(f64, u64, u64)]) -> f64 {
    let big_n: f64 = groups.iter().map(|g| g.2 as f64).sum();
    let k: f64 = groups.iter().map(|g| g.1 as f64).sum();
    let p = k / big_n;
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    let num: f64 = groups.iter().map(|&(t, x, n)| t * (x as f64 - n as f64 * p)).sum();
    let s1: f64 = groups.iter().map(|&(t, _, n)| n as f64 * t * t).sum();
    let s2: f64 = groups.iter().map(|&(t, _, n)| n as f64 * t).sum();
    num / (p * (1.0 - p) * (s1 - s2 * s2 / big_n)).sqrt()
}

/// Weighted log-linear fit of positive tail probabilities.
pub fn fit_tail(points: &[TailPoint]) -> Option<DeviationFit> {
    let pos: Vec<&TailPoint> = points.iter().filter(|p| p.exceed > 0).collect();
    if pos.len() < 2 {
        return None;
    }
    // Weights 1/var(log p̂) ≈ n p / (1 − p).
    let w: Vec<f64> = pos.iter().map(|p| p.total as f64 * p.prob / (1.0 - p.prob).max(1e-12)).collect();
    let sw: f64 = w.iter().sum();
    let mx = pos.iter().zip(&w).map(|(p, w)| w * p.n as f64).sum::<f64>() / sw;
    let my = pos.iter().zip(&w).map(|(p, w)| w * p.prob.ln()).sum::<f64>() / sw;
    let sxx: f64 = pos.iter().zip(&w).map(|(p, w)| w * (p.n as f64 - mx).powi(2)).sum();
    let sxy: f64 = pos.iter().zip(&w).map(|(p, w)| w * (p.n as f64 - mx) * (p.prob.ln() - my)).sum();
    let syy: f64 = pos.iter().zip(&w).map(|(p, w)| w * (p.prob.ln() - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(DeviationFit { rate: -slope, prefactor: (my - slope * mx).exp(), r2, used: pos.len() })
}

/// Tail probabilities `P(|S_nφ/n| > α)` for `φ − centering` over starts from
/// [`for_each_chunk`], with Wilson intervals, a log-linear fit and a trend
/// test.
#[allow(clippy::too_many_arguments)]
pub fn birkhoff_tail(
    sys: &SkewSystem,
    part: &MarkovPartition,
    phi: &Observable,
    centering: f64,
    alpha: f64,
    n_values: &[usize],
    n_samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<DeviationReport, StatsError> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) || n_values[0] == 0 {
        return Err(StatsError::BadSchedule);
    }
    let n_max = *n_values.last().expect("non-empty");
    let counts = for_each_chunk(sys, part, n_samples, burn_in, seed, |pts| {
        let mut exceed = vec![0u64; n_values.len()];
        for p in pts {
            let mut z = *p;
            let mut s = 0.0;
            let mut next = 0;
            for t in 1..=n_max {
                s += phi.eval(&z) - centering;
                z = sys.step(&z);
                if t == n_values[next] {
                    if (s / t as f64).abs() > alpha {
                        exceed[next] += 1;
                    }
                    next += 1;
                }
            }
        }
        exceed
    })?;
    let total = n_samples as u64;
    let points: Vec<TailPoint> = (0..n_values.len())
        .map(|k| {
            let e: u64 = counts.iter().map(|c| c[k]).sum();
            let (lo, hi) = wilson(e, total, 1.96);
            TailPoint { n: n_values[k], exceed: e, total, prob: e as f64 / total as f64, lo, hi }
        })
        .collect();
    if points[0].exceed == 0 {
        return Err(StatsError::AlphaTooLarge { alpha, n: n_values[0] });
    }
    let groups: Vec<(f64, u64, u64)> = points.iter().map(|p| (p.n as f64, p.exceed, p.total)).collect();
    let trend_z = trend_statistic(&groups);
    Ok(DeviationReport {
        alpha,
        centering,
        fit: fit_tail(&points),
        trend_z,
        monotone: normal_cdf(trend_z) < 0.05,
        points,
    })
}

/// Potentials for the cumulant bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Potential {
    /// `log ‖Df|E^{cs}‖` as bounded per step.
    LogCsNorm,
    /// A catalog observable minus `shift` (centering plus `α`).
    Catalog { obs: Observable, shift: f64 },
}

impl Potential {
    fn eval(&self, sys: &SkewSystem, p: &SkewPoint) -> f64 {
        match self {
            Potential::LogCsNorm => log_cs_norm(sys, p.theta),
            Potential::Catalog { obs, shift } => obs.eval(p) - shift,
        }
    }

    fn leaf_slope(&self, sys: &SkewSystem) -> f64 {
        match self {
            Potential::LogCsNorm => log_cs_norm_lipschitz(sys) * sys.leaf_lipschitz(),
            Potential::Catalog { obs, .. } => obs.leaf_slope(sys),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CumulantRow {
    pub n: usize,
    /// Largest `Σ_j c_j exp(s₁ max S_nφ)` over the plaques.
    pub lhs: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Exact cylinder sums `Σ_j c_j exp(s₁ max_{cyl_j} S_nφ)` against
/// `θ₁^{s₁ n}` for `n ≤ n_max` on each plaque.
pub fn cumulant_bound(
    sys: &SkewSystem,
    part: &MarkovPartition,
    profile: &ContractionProfile,
    potential: &Potential,
    plaques: &[ReferenceMeasure],
    n_max: usize,
) -> Result<Vec<CumulantRow>, StatsError> {
    let slope = potential.leaf_slope(sys);
    let sums = plaques
        .par_iter()
        .map(|pl| {
            cylinder_sums(sys, part, pl, n_max, |leaf, lo, hi| {
                leaf_interval_max(part, leaf, lo, hi, slope, |p| potential.eval(sys, p))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((1..=n_max)
        .map(|n| {
            let lhs = sums
                .iter()
                .map(|s| s[n].iter().map(|c| c.mass * (profile.s1 * c.sum_max).exp()).sum::<f64>())
                .fold(0.0, f64::max);
            let bound = profile.theta1.powf(profile.s1 * n as f64);
            CumulantRow { n, lhs, bound, holds: lhs <= bound }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationFit {
    pub k: f64,
    pub tau: f64,
    pub r2: f64,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationSeries {
    pub n_values: Vec<usize>,
    pub c: Vec<f64>,
    pub se: Vec<f64>,
    pub samples: usize,
}

impl CorrelationSeries {
    pub fn above_noise(&self, k: usize) -> bool {
        self.c[k].abs() > NOISE_FACTOR * self.se[k]
    }

    /// Log-linear fit of `|C_n|` over the leading run of `n` above noise.
    pub fn fit(&self) -> Result<CorrelationFit, StatsError> {
        let run = (0..self.c.len()).take_while(|&k| self.above_noise(k)).count();
        if run == 0 {
            return Err(StatsError::BelowNoise);
        }
        if run < 3 {
            return Err(StatsError::TooFewAboveNoise { found: run, need: 3 });
        }
        let xs: Vec<f64> = self.n_values[..run].iter().map(|&n| n as f64).collect();
        let ys: Vec<f64> = self.c[..run].iter().map(|c| c.abs().ln()).collect();
        let f = linear_fit(&xs, &ys).ok_or(StatsError::TooFewAboveNoise { found: run, need: 3 })?;
        Ok(CorrelationFit { k: f.intercept.exp(), tau: f.slope.exp(), r2: f.r2, used: run })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,correlation,stderr\n");
        for k in 0..self.c.len() {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", self.n_values[k], self.c[k], self.se[k]));
        }
        out
    }
}

/// Monte Carlo `C_n = ∫(φ∘fⁿ)ψ dμ − ∫φ dμ ∫ψ dμ` with chunk-bootstrap
/// standard errors.
#[allow(clippy::too_many_arguments)]
pub fn correlation_decay(
    sys: &SkewSystem,
    part: &MarkovPartition,
    phi: &Observable,
    psi: &Observable,
    n_values: &[usize],
    n_samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CorrelationSeries, StatsError> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StatsError::BadSchedule);
    }
    let n_max = *n_values.last().expect("non-empty");
    // Per chunk and n: (Σ φ_n ψ, Σ φ_n, Σ ψ, count).
    let chunks = for_each_chunk(sys, part, n_samples, burn_in, seed, |pts| {
        let mut acc = vec![[0.0f64; 4]; n_values.len()];
        for p in pts {
            let y = psi.eval(p);
            let mut z = *p;
            let mut next = 0;
            for t in 0..=n_max {
                if t == n_values[next] {
                    let x = phi.eval(&z);
                    let a = &mut acc[next];
                    a[0] += x * y;
                    a[1] += x;
                    a[2] += y;
                    a[3] += 1.0;
                    next += 1;
                    if next == n_values.len() {
                        break;
                    }
                }
                z = sys.step(&z);
            }
        }
        acc
    })?;
    let cov = |sel: &mut dyn Iterator<Item = usize>, k: usize| {
        let mut s = [0.0f64; 4];
        for i in sel {
            for (d, v) in s.iter_mut().zip(chunks[i][k]) {
                *d += v;
            }
        }
        s[0] / s[3] - (s[1] / s[3]) * (s[2] / s[3])
    };
    let nc = chunks.len();
    let c: Vec<f64> = (0..n_values.len()).map(|k| cov(&mut (0..nc), k)).collect();
    let mut rng = stream_rng(seed, u64::MAX);
    let draws: Vec<Vec<usize>> = (0..BOOTSTRAP_REPS).map(|_| (0..nc).map(|_| rng.random_range(0..nc)).collect()).collect();
    let se: Vec<f64> = (0..n_values.len())
        .map(|k| {
            if nc < 2 {
                return f64::INFINITY;
            }
            let reps: Vec<f64> = draws.iter().map(|d| cov(&mut d.iter().copied(), k)).collect();
            let m = reps.iter().sum::<f64>() / reps.len() as f64;
            (reps.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
        })
        .collect();
    Ok(CorrelationSeries { n_values: n_values.to_vec(), c, se, samples: n_samples })
}

fn transpose_power(auto: &ToralAutomorphism, n: u32) -> Option<IntMatrix> {
    let m = auto.power(n as i64).ok()?;
    Some([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
}

/// Exact `∫ cos(2π k·Aⁿx) cos(2π l·x) dx − ∫∫` on the base torus, from the
/// action of `Aᵀ` on frequencies.
pub fn cat_cos_correlation(auto: &ToralAutomorphism, k: [i64; 2], l: [i64; 2], n: u32) -> Option<f64> {
    let t = transpose_power(auto, n)?;
    let kn = [t[0][0] * k[0] + t[0][1] * k[1], t[1][0] * k[0] + t[1][1] * k[1]];
    let zero = |v: [i64; 2]| v == [0, 0];
    let mean = |v: [i64; 2]| if zero(v) { 1.0 } else { 0.0 };
    let joint = if zero(kn) && zero(l) {
        1.0
    } else if kn == l || kn == [-l[0], -l[1]] {
        0.5
    } else {
        0.0
    };
    Some(joint - mean(kn) * mean(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{estimate_profile, support_plaques, ProfileOptions};

    fn setup(kappa: f64, delta: f64, alpha: f64) -> (SkewSystem, MarkovPartition) {
        (SkewSystem::new(ToralAutomorphism::cat_map(), kappa, delta, alpha).unwrap(), MarkovPartition::builtin_cat())
    }

    #[test]
    fn holder_norms_are_attained() {
        for obs in Observable::catalog() {
            for gamma in [1.0, 0.5] {
                let o = obs.with_gamma(gamma);
                assert!(o.holder_norm() >= o.sup_norm());
                let sampled = sampled_seminorm(&o, 20_000, 3);
                assert!(sampled <= o.holder_seminorm() * (1.0 + 1e-9), "{} {sampled}", o.name);
            }
        }
        // Attained along θ at the maximiser for γ = 1/2.
        let o = Observable::cos_theta().with_gamma(0.5);
        let best = (1..2000)
            .map(|k| {
                let d = k as f64 * 2.5e-4;
                let p = SkewPoint::new(crate::torus::TorusPoint::from_unit(0.1, 0.2), 0.25 - d / 2.0);
                let q = SkewPoint::new(p.base, 0.25 + d / 2.0);
                (o.eval(&p) - o.eval(&q)).abs() / d.sqrt()
            })
            .fold(0.0, f64::max);
        assert!((best / o.holder_seminorm() - 1.0).abs() < 0.01);
        assert!(Observable::by_name("nope").is_err());
    }

    #[test]
    fn impossible_deviation_is_reported() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let e = birkhoff_tail(&sys, &part, &Observable::cos_theta(), 0.0, 2.5, &[5, 10], 2000, 10, 1).unwrap_err();
        assert!(matches!(e, StatsError::AlphaTooLarge { .. }));
    }

    #[test]
    fn product_tails_shrink_from_reference_starts() {
        let (sys, part) = setup(0.5, 0.0, 0.0);
        let r = birkhoff_tail(&sys, &part, &Observable::cos_theta(), 1.0, 0.2, &[5, 10, 20, 40], 100_000, 0, 2).unwrap();
        let f = r.fit.unwrap();
        assert!(f.rate > 0.0 && r.monotone, "{r:?}");
        // Mass escaping the repeller at 1/2 no faster than g'(1/2) = 1.5.
        assert!(f.rate < 1.5f64.ln() * 1.2, "{f:?}");
    }

    #[test]
    fn trend_statistic_signs() {
        assert!(trend_statistic(&[(1.0, 100, 1000), (2.0, 50, 1000), (3.0, 10, 1000)]) < -5.0);
        assert!(trend_statistic(&[(1.0, 10, 1000), (2.0, 50, 1000)]) > 5.0);
        assert_eq!(trend_statistic(&[(1.0, 0, 10), (2.0, 0, 10)]), 0.0);
    }

    #[test]
    fn constant_potential_is_closed_form() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let prof = ContractionProfile {
            n0: 1,
            lambda0: -0.2,
            lambda: -0.1,
            k: 2.0,
            s1: 2.0,
            theta1: 0.9,
            q1: 0.1,
            epsilon: 0.01,
            q1_measured: 0.0,
            q1_tail: 0.1,
            tail_depth: 6,
        };
        let pl = support_plaques(&sys, &part, 1, 40, 3).unwrap();
        let a = 0.05;
        let pot = Potential::Catalog { obs: Observable::constant(-a), shift: 0.0 };
        for row in cumulant_bound(&sys, &part, &prof, &pot, &pl, 5).unwrap() {
            let exact = (-prof.s1 * a * row.n as f64).exp();
            assert!((row.lhs - exact).abs() < 1e-12 * exact.max(1.0));
            assert_eq!(row.holds, (-a * prof.s1).exp() <= prof.theta1.powf(prof.s1));
        }
    }

    #[test]
    fn one_step_cumulant_dominates_brute_force() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let prof = estimate_profile(&sys, &part, &ProfileOptions { n_plaques: 2, tail_depth: 4, ..Default::default() }, 5).unwrap();
        let pl = support_plaques(&sys, &part, 1, 40, 6).unwrap();
        let rows = cumulant_bound(&sys, &part, &prof, &Potential::LogCsNorm, &pl, 1).unwrap();
        let l = pl[0].length();
        let mut brute = 0.0;
        for c in part.enumerate_cylinders(pl[0].rect(), 1).unwrap() {
            let m = (0..=2000)
                .map(|k| log_cs_norm(&sys, pl[0].leaf.theta_at_u(c.u_lo + c.width() * k as f64 / 2000.0)))
                .fold(f64::NEG_INFINITY, f64::max);
            brute += c.width() / l * (prof.s1 * m).exp();
        }
        assert!(rows[0].lhs >= brute * (1.0 - 1e-12));
        assert!(rows[0].lhs <= brute * (prof.s1 * 2.0 * crate::coupling::INFLATION_TOL).exp() * (1.0 + 1e-9));
    }

    #[test]
    fn base_correlations_match_fourier() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let auto = ToralAutomorphism::cat_map();
        let ns = [0, 1, 2, 3];
        let s = correlation_decay(&sys, &part, &Observable::cos_x1(), &Observable::cos_x1(), &ns, 40_000, 20, 7).unwrap();
        for (k, &n) in ns.iter().enumerate() {
            let exact = cat_cos_correlation(&auto, [1, 0], [1, 0], n as u32).unwrap();
            assert!((s.c[k] - exact).abs() < 4.0 * s.se[k] + 1e-3, "n={n} {} {exact} {}", s.c[k], s.se[k]);
        }
        assert_eq!(cat_cos_correlation(&auto, [1, 0], [1, 0], 0), Some(0.5));
        assert_eq!(cat_cos_correlation(&auto, [1, 0], [1, 0], 5), Some(0.0));
        assert!(matches!(s.fit(), Err(StatsError::TooFewAboveNoise { found: 1, .. })));
    }

    #[test]
    fn constant_factor_has_no_correlation() {
        let (sys, part) = setup(0.5, 0.05, 0.05);
        let s = correlation_decay(&sys, &part, &Observable::cos_theta(), &Observable::constant(1.0), &[0, 1, 4], 20_000, 20, 8)
            .unwrap();
        for c in &s.c {
            assert!(c.abs() < 1e-12);
        }
        assert!(matches!(s.fit(), Err(StatsError::BelowNoise)));
    }
}
