//! Small statistical helpers shared by the labs: least squares, KS statistics,
//! Wilson intervals and bootstrap errors.

use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares `y ≈ slope·x + intercept`. Returns `None` for fewer
/// than two points or constant `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = xs[..n].iter().sum::<f64>() / nf;
    let my = ys[..n].iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let dx = xs[k] - mx;
        let dy = ys[k] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Some(LinearFit { slope, intercept: my - slope * mx, r2, n })
}

/// One-sample KS distance of `samples` against the uniform law on `[lo, hi]`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (k, x) in v.iter().enumerate() {
        let x = x.clamp(0.0, 1.0);
        d = d.max((k as f64 + 1.0) / n - x).max(x - k as f64 / n);
    }
    d
}

/// Two-sample KS distance in one dimension.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

struct Fenwick(Vec<u32>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u32 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Two-dimensional two-sample KS distance (Peacock / Fasano–Franceschini).
///
/// Every data point of either sample serves as an origin; the statistic is
/// the largest difference of empirical quadrant fractions over origins and
/// the four quadrants. Runs in `O(n log n)` via an x-sweep with Fenwick trees.
pub fn ks_2d(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut ys: Vec<f64> = a.iter().chain(b).map(|p| p.1).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let rank = |y: f64| ys.partition_point(|v| *v < y);
    let mut ya: Vec<f64> = a.iter().map(|p| p.1).collect();
    let mut yb: Vec<f64> = b.iter().map(|p| p.1).collect();
    ya.sort_by(f64::total_cmp);
    yb.sort_by(f64::total_cmp);

    let mut all: Vec<(f64, usize, bool)> = a
        .iter()
        .map(|p| (p.0, rank(p.1), true))
        .chain(b.iter().map(|p| (p.0, rank(p.1), false)))
        .collect();
    all.sort_by(|p, q| p.0.total_cmp(&q.0));

    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut fa = Fenwick::new(ys.len());
    let mut fb = Fenwick::new(ys.len());
    let (mut xa, mut xb) = (0u32, 0u32);
    let mut d = 0.0f64;
    let mut k = 0;
    while k < all.len() {
        let x0 = all[k].0;
        let mut end = k;
        while end < all.len() && all[end].0 == x0 {
            end += 1;
        }
        for &(_, r, _) in &all[k..end] {
            let y0 = ys[r];
            let ll_a = fa.prefix(r) as f64;
            let ll_b = fb.prefix(r) as f64;
            let yl_a = ya.partition_point(|v| *v < y0) as f64;
            let yl_b = yb.partition_point(|v| *v < y0) as f64;
            let (xl_a, xl_b) = (xa as f64, xb as f64);
            let quads_a = [ll_a, yl_a - ll_a, xl_a - ll_a, na - xl_a - yl_a + ll_a];
            let quads_b = [ll_b, yl_b - ll_b, xl_b - ll_b, nb - xl_b - yl_b + ll_b];
            for q in 0..4 {
                d = d.max((quads_a[q] / na - quads_b[q] / nb).abs());
            }
        }
        for &(_, r, from_a) in &all[k..end] {
            if from_a {
                fa.add(r);
                xa += 1;
            } else {
                fb.add(r);
                xb += 1;
            }
        }
        k = end;
    }
    d
}

/// Wilson score interval for `k` successes out of `n` at normal quantile `z`.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Mean and standard error of the mean.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Bootstrap standard error of a weighted mean where each block contributes
/// `(weighted sum, weight)`. Blocks are resampled with replacement.
pub fn block_bootstrap_se<R: Rng>(blocks: &[(f64, f64)], reps: usize, rng: &mut R) -> f64 {
    let nb = blocks.len();
    if nb < 2 || reps < 2 {
        return 0.0;
    }
    let mut means = Vec::with_capacity(reps);
    for _ in 0..reps {
        let (mut s, mut w) = (0.0, 0.0);
        for _ in 0..nb {
            let (bs, bw) = blocks[rng.random_range(0..nb)];
            s += bs;
            w += bw;
        }
        if w > 0.0 {
            means.push(s / w);
        }
    }
    let (_, se) = mean_stderr(&means);
    se * (means.len() as f64).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes' Chebyshev fit, relative error below 1.2e-7.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Circular gap clustering of points on `[0,1)`: consecutive points closer
/// than `eps` share a cluster. Returns `(center, size, extent)` per cluster.
pub fn circular_clusters(points: &[f64], eps: f64) -> Vec<(f64, usize, f64)> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut v: Vec<f64> = points.iter().map(|t| t.rem_euclid(1.0)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let gap = |k: usize| {
        let next = if k + 1 < n { v[k + 1] } else { v[0] + 1.0 };
        next - v[k]
    };
    let Some(start) = (0..n).find(|&k| gap(k) >= eps) else {
        let mean = circular_mean(&v);
        return vec![(mean, n, 1.0)];
    };
    let mut out = Vec::new();
    let mut members: Vec<f64> = Vec::new();
    for step in 1..=n {
        let k = (start + step) % n;
        members.push(v[k]);
        if gap(k) >= eps {
            let first = members[0];
            let extent = (members[members.len() - 1] - first).rem_euclid(1.0);
            out.push((circular_mean(&members), members.len(), extent));
            members.clear();
        }
    }
    out
}

/// Greedy cover of points on `[0,1)` by arcs of length `eps`, starting after
/// the widest gap. Returns `(center, size)` per arc. Unlike gap clustering the
/// count keeps growing for spread-out samples.
pub fn circular_cover(points: &[f64], eps: f64) -> Vec<(f64, usize)> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut v: Vec<f64> = points.iter().map(|t| t.rem_euclid(1.0)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let widest = (0..n)
        .max_by(|&a, &b| {
            let ga = if a + 1 < n { v[a + 1] - v[a] } else { v[0] + 1.0 - v[a] };
            let gb = if b + 1 < n { v[b + 1] - v[b] } else { v[0] + 1.0 - v[b] };
            ga.total_cmp(&gb)
        })
        .expect("non-empty");
    let unrolled: Vec<f64> = (1..=n)
        .map(|k| {
            let idx = (widest + k) % n;
            if idx <= widest { v[idx] + 1.0 } else { v[idx] }
        })
        .collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        let start = unrolled[k];
        let mut end = k;
        while end + 1 < n && unrolled[end + 1] - start <= eps {
            end += 1;
        }
        out.push((circular_mean(&unrolled[k..=end]), end - k + 1));
        k = end + 1;
    }
    out
}

fn circular_mean(v: &[f64]) -> f64 {
    let tau = std::f64::consts::TAU;
    let (s, c) = v.iter().fold((0.0, 0.0), |(s, c), t| (s + (tau * t).sin(), c + (tau * t).cos()));
    (s.atan2(c) / tau).rem_euclid(1.0)
}
