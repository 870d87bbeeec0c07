//! Points of the two-torus and the hyperbolic automorphism acting on them.
//!
//! Coordinates are always reduced to the canonical square `[0,1)²`. Powers of
//! the integer matrix are cached once and applied with exact dyadic arithmetic:
//! a double `x` is `k·2^-b`, so `m·x mod 1 = (m·k mod 2^b)·2^-b` can be computed
//! in 128-bit integers and rounded once. Orbits computed this way do not pick up
//! the `λ^n` amplification of per-step rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Injectivity radius of the flat unit torus.
pub const INJECTIVITY_RADIUS: f64 = 0.5;

/// Default bound on `|n|` for cached matrix powers.
pub const DEFAULT_MAX_ITERATE: u32 = 40;

pub type IntMatrix = [[i64; 2]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TorusError {
    #[error("non-finite coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("not Anosov: {0}")]
    NotAnosov(String),
    #[error("iterate {n} exceeds the configured bound {max}")]
    IterateTooLarge { n: i64, max: u32 },
    #[error("integer overflow in matrix power {0}")]
    Overflow(u32),
    #[error("no local bracket: points are {dist:.3e} apart, scale is {scale:.3e}")]
    NoLocalBracket { dist: f64, scale: f64 },
}

/// A point of `T² = R²/Z²` in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    x1: f64,
    x2: f64,
}

impl TorusPoint {
    /// Reduce finite coordinates mod 1. Use [`wrap`] for untrusted input.
    pub fn from_unit(x1: f64, x2: f64) -> TorusPoint {
        debug_assert!(x1.is_finite() && x2.is_finite());
        TorusPoint { x1: reduce(x1), x2: reduce(x2) }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn coords(&self) -> [f64; 2] {
        [self.x1, self.x2]
    }

    /// Translate by a vector in the plane and reduce.
    pub fn translate(&self, d: [f64; 2]) -> TorusPoint {
        TorusPoint { x1: reduce(self.x1 + d[0]), x2: reduce(self.x2 + d[1]) }
    }

    /// Shortest lift of `other - self`.
    pub fn displacement_to(&self, other: &TorusPoint) -> [f64; 2] {
        [shortest(other.x1 - self.x1), shortest(other.x2 - self.x2)]
    }

    pub fn distance(&self, other: &TorusPoint) -> f64 {
        let d = self.displacement_to(other);
        d[0].hypot(d[1])
    }
}

/// Reduce a finite real to `[0,1)`.
pub(crate) fn reduce(v: f64) -> f64 {
    let r = v - v.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

fn shortest(v: f64) -> f64 {
    v - v.round()
}

/// Canonical mod-1 representative of a raw pair.
pub fn wrap(x1: f64, x2: f64) -> Result<TorusPoint, TorusError> {
    if !x1.is_finite() || !x2.is_finite() {
        return Err(TorusError::NonFinite(x1, x2));
    }
    Ok(TorusPoint { x1: reduce(x1), x2: reduce(x2) })
}

/// Coordinates along `e_u` and `e_s` of a displacement from a base point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenCoords {
    pub u: f64,
    pub s: f64,
}

/// Hyperbolic automorphism of `T²` with its eigenstructure and cached powers.
#[derive(Debug, Clone)]
pub struct ToralAutomorphism {
    matrix: IntMatrix,
    det: i64,
    lambda_u: f64,
    unstable_eig: f64,
    stable_eig: f64,
    e_u: [f64; 2],
    e_s: [f64; 2],
    dual_u: [f64; 2],
    dual_s: [f64; 2],
    powers: Vec<IntMatrix>,
    inv_powers: Vec<IntMatrix>,
    max_iterate: u32,
}

fn mat_mul(a: &IntMatrix, b: &IntMatrix) -> Option<IntMatrix> {
    let mut out = [[0i64; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let p = a[i][0].checked_mul(b[0][j])?;
            let q = a[i][1].checked_mul(b[1][j])?;
            out[i][j] = p.checked_add(q)?;
        }
    }
    Some(out)
}

const IDENTITY: IntMatrix = [[1, 0], [0, 1]];

fn eigenvector(m: &IntMatrix, eig: f64) -> [f64; 2] {
    let a = [m[0][1] as f64, eig - m[0][0] as f64];
    let b = [eig - m[1][1] as f64, m[1][0] as f64];
    let v = if a[0].hypot(a[1]) >= b[0].hypot(b[1]) { a } else { b };
    let n = v[0].hypot(v[1]);
    let mut v = [v[0] / n, v[1] / n];
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        v = [-v[0], -v[1]];
    }
    v
}

/// Eigen-decomposition of an integer matrix, failing unless it is hyperbolic
/// with `|det| = 1`.
pub fn eigen_data(matrix: IntMatrix) -> Result<ToralAutomorphism, TorusError> {
    ToralAutomorphism::with_max_iterate(matrix, DEFAULT_MAX_ITERATE)
}

impl ToralAutomorphism {
    /// The Arnold cat map `[[2,1],[1,1]]`.
    pub fn cat_map() -> Self {
        eigen_data([[2, 1], [1, 1]]).expect("cat map is hyperbolic")
    }

    pub fn with_max_iterate(matrix: IntMatrix, max_iterate: u32) -> Result<Self, TorusError> {
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if det.abs() != 1 {
            return Err(TorusError::NotAnosov(format!("determinant {det} is not ±1")));
        }
        let tr = (matrix[0][0] + matrix[1][1]) as f64;
        let disc = tr * tr - 4.0 * det as f64;
        if disc <= 0.0 {
            return Err(TorusError::NotAnosov("eigenvalues are not real and distinct".into()));
        }
        let r = disc.sqrt();
        let (l1, l2) = ((tr + r) / 2.0, (tr - r) / 2.0);
        let (unstable_eig, stable_eig) = if l1.abs() >= l2.abs() { (l1, l2) } else { (l2, l1) };
        if unstable_eig.abs() <= 1.0 + 1e-12 || stable_eig.abs() >= 1.0 - 1e-12 {
            return Err(TorusError::NotAnosov("eigenvalue on the unit circle".into()));
        }
        let e_u = eigenvector(&matrix, unstable_eig);
        let e_s = eigenvector(&matrix, stable_eig);
        let cross = e_u[0] * e_s[1] - e_u[1] * e_s[0];
        if cross.abs() < 1e-12 {
            return Err(TorusError::NotAnosov("degenerate eigenvectors".into()));
        }
        let dual_u = [e_s[1] / cross, -e_s[0] / cross];
        let dual_s = [-e_u[1] / cross, e_u[0] / cross];
        let inverse = [
            [matrix[1][1] * det, -matrix[0][1] * det],
            [-matrix[1][0] * det, matrix[0][0] * det],
        ];
        let mut powers = vec![IDENTITY];
        let mut inv_powers = vec![IDENTITY];
        let mut reached = 0u32;
        for _ in 0..max_iterate {
            let (Some(p), Some(q)) = (
                mat_mul(powers.last().unwrap(), &matrix),
                mat_mul(inv_powers.last().unwrap(), &inverse),
            ) else {
                break;
            };
            powers.push(p);
            inv_powers.push(q);
            reached += 1;
        }
        if reached == 0 && max_iterate > 0 {
            return Err(TorusError::Overflow(1));
        }
        Ok(ToralAutomorphism {
            matrix,
            det,
            lambda_u: unstable_eig.abs(),
            unstable_eig,
            stable_eig,
            e_u,
            e_s,
            dual_u,
            dual_s,
            powers,
            inv_powers,
            max_iterate: reached,
        })
    }

    pub fn matrix(&self) -> IntMatrix {
        self.matrix
    }

    pub fn det(&self) -> i64 {
        self.det
    }

    /// Spectral radius, `> 1`.
    pub fn lambda_u(&self) -> f64 {
        self.lambda_u
    }

    /// Signed unstable eigenvalue.
    pub fn unstable_eigenvalue(&self) -> f64 {
        self.unstable_eig
    }

    /// Signed stable eigenvalue, `det / unstable_eigenvalue`.
    pub fn stable_eigenvalue(&self) -> f64 {
        self.stable_eig
    }

    pub fn e_u(&self) -> [f64; 2] {
        self.e_u
    }

    pub fn e_s(&self) -> [f64; 2] {
        self.e_s
    }

    pub fn max_iterate(&self) -> u32 {
        self.max_iterate
    }

    /// Integer matrix `A^n`, if cached.
    pub fn power(&self, n: i64) -> Result<IntMatrix, TorusError> {
        let k = n.unsigned_abs();
        if k > self.max_iterate as u64 {
            return Err(TorusError::IterateTooLarge { n, max: self.max_iterate });
        }
        Ok(if n >= 0 { self.powers[k as usize] } else { self.inv_powers[k as usize] })
    }

    /// `A^n p mod 1` via the cached integer power.
    pub fn apply_auto(&self, p: &TorusPoint, n: i64) -> Result<TorusPoint, TorusError> {
        let m = self.power(n)?;
        Ok(apply_exact(&m, p))
    }

    /// `A^n p` for any `n`, applying cached powers in blocks of `max_iterate`.
    /// Agrees bit-for-bit with [`apply_auto`](Self::apply_auto) when `|n|` is
    /// within the cache.
    pub fn apply_long(&self, p: &TorusPoint, n: i64) -> TorusPoint {
        let step = self.max_iterate.max(1) as i64;
        let mut rest = n;
        let mut q = *p;
        while rest != 0 {
            let chunk = rest.clamp(-step, step);
            q = apply_exact(&self.power(chunk).expect("chunk within cache"), &q);
            rest -= chunk;
        }
        q
    }

    /// Iterator over `A^k p` for `k = 1, 2, …` (or negative powers when
    /// `forward` is false), drift-free within each cached block.
    pub fn orbit(&self, p: &TorusPoint, forward: bool) -> BaseOrbit<'_> {
        BaseOrbit { auto: self, anchor: *p, offset: 0, forward }
    }

    pub fn eigen_coords(&self, d: [f64; 2]) -> EigenCoords {
        EigenCoords {
            u: self.dual_u[0] * d[0] + self.dual_u[1] * d[1],
            s: self.dual_s[0] * d[0] + self.dual_s[1] * d[1],
        }
    }

    pub fn from_eigen(&self, c: EigenCoords) -> [f64; 2] {
        [c.u * self.e_u[0] + c.s * self.e_s[0], c.u * self.e_u[1] + c.s * self.e_s[1]]
    }

    /// Eigencoordinates of `p` relative to `base`, using the shortest lift.
    pub fn relative(&self, base: &TorusPoint, p: &TorusPoint) -> EigenCoords {
        self.eigen_coords(base.displacement_to(p))
    }

    /// Point of `T²` with eigencoordinates `c` relative to `base`.
    pub fn offset(&self, base: &TorusPoint, c: EigenCoords) -> TorusPoint {
        base.translate(self.from_eigen(c))
    }

    /// `b + proj_u(a - b)·e_u`: the point of `W^u(b) ∩ W^s(a)`.
    pub fn bracket(&self, a: &TorusPoint, b: &TorusPoint, scale: f64) -> Result<TorusPoint, TorusError> {
        let d = b.displacement_to(a);
        let dist = d[0].hypot(d[1]);
        if dist > scale || scale >= INJECTIVITY_RADIUS {
            return Err(TorusError::NoLocalBracket { dist, scale });
        }
        let u = self.dual_u[0] * d[0] + self.dual_u[1] * d[1];
        Ok(b.translate([u * self.e_u[0], u * self.e_u[1]]))
    }
}

/// Orbit of a base point under positive or negative powers.
#[derive(Debug, Clone)]
pub struct BaseOrbit<'a> {
    auto: &'a ToralAutomorphism,
    anchor: TorusPoint,
    offset: i64,
    forward: bool,
}

impl Iterator for BaseOrbit<'_> {
    type Item = TorusPoint;

    fn next(&mut self) -> Option<TorusPoint> {
        let block = self.auto.max_iterate.max(1) as i64;
        self.offset += 1;
        let n = if self.forward { self.offset } else { -self.offset };
        let q = apply_exact(&self.auto.power(n).expect("within block"), &self.anchor);
        if self.offset == block {
            self.anchor = q;
            self.offset = 0;
        }
        Some(q)
    }
}

/// Fractional part of `m·x` for `x ∈ [0,1)`, exact up to one final rounding.
fn frac_mul(m: i64, x: f64) -> f64 {
    if m == 0 || x == 0.0 {
        return 0.0;
    }
    let bits = x.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    let frac_bits = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if raw_exp == 0 {
        (frac_bits, -1074)
    } else {
        (frac_bits | (1u64 << 52), raw_exp - 1075)
    };
    let tz = mant.trailing_zeros();
    let mant = mant >> tz;
    let exp = exp + tz as i32;
    if exp >= 0 {
        return 0.0;
    }
    let b = (-exp) as u32;
    if b <= 125 {
        let modulus = 1i128 << b;
        let r = ((m as i128) * (mant as i128)).rem_euclid(modulus);
        reduce((r as f64) * 2f64.powi(-(b as i32)))
    } else {
        reduce(m as f64 * x)
    }
}

fn apply_exact(m: &IntMatrix, p: &TorusPoint) -> TorusPoint {
    let y1 = frac_mul(m[0][0], p.x1) + frac_mul(m[0][1], p.x2);
    let y2 = frac_mul(m[1][0], p.x1) + frac_mul(m[1][1], p.x2);
    TorusPoint { x1: reduce(y1), x2: reduce(y2) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wrap_examples() {
        let p = wrap(1.25, -0.5).unwrap();
        assert_eq!(p.coords(), [0.25, 0.5]);
        assert_eq!(wrap(0.0, 0.0).unwrap().coords(), [0.0, 0.0]);
        let p = wrap(0.999999999, 2.0).unwrap();
        assert_eq!(p.coords(), [0.999999999, 0.0]);
        assert!(wrap(f64::NAN, 0.0).is_err());
        assert!(wrap(0.0, f64::INFINITY).is_err());
        assert!(wrap(-1e-18, 0.0).unwrap().x1() < 1.0);
    }

    #[test]
    fn cat_map_eigenvalue() {
        let a = ToralAutomorphism::cat_map();
        assert!((a.lambda_u() - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
        let au = [
            2.0 * a.e_u()[0] + a.e_u()[1],
            a.e_u()[0] + a.e_u()[1],
        ];
        assert!((au[0] - a.lambda_u() * a.e_u()[0]).abs() < 1e-12);
        assert!((au[1] - a.lambda_u() * a.e_u()[1]).abs() < 1e-12);
        assert!((a.lambda_u() * a.stable_eigenvalue().abs() - a.det().abs() as f64).abs() < 1e-12);
    }

    #[test]
    fn golden_matrix_is_valid() {
        let a = eigen_data([[1, 1], [1, 0]]).unwrap();
        assert!((a.lambda_u() - 1.618_033_988_7).abs() < 1e-9);
        assert_eq!(a.det(), -1);
    }

    #[test]
    fn parabolic_is_rejected() {
        let e = eigen_data([[1, 1], [0, 1]]).unwrap_err();
        assert!(e.to_string().contains("not Anosov"));
        assert!(eigen_data([[2, 0], [0, 1]]).is_err());
        assert!(eigen_data([[0, 1], [1, 0]]).is_err());
    }

    #[test]
    fn apply_examples() {
        let a = ToralAutomorphism::cat_map();
        let o = wrap(0.0, 0.0).unwrap();
        assert_eq!(a.apply_auto(&o, 5).unwrap(), o);
        let p = wrap(0.5, 0.5).unwrap();
        assert_eq!(a.apply_auto(&p, 1).unwrap().coords(), [0.5, 0.0]);
        assert!(a.apply_auto(&p, 41).is_err());
        assert!(a.apply_auto(&p, -40).is_ok());
    }

    #[test]
    fn no_overflow_before_forty() {
        let a = ToralAutomorphism::with_max_iterate([[2, 1], [1, 1]], 200).unwrap();
        assert!(a.max_iterate() >= 40);
        assert!(a.max_iterate() < 200);
    }

    #[test]
    fn inverse_round_trip() {
        let a = ToralAutomorphism::cat_map();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let p = wrap(rng.random(), rng.random()).unwrap();
            let q = a.apply_auto(&a.apply_auto(&p, -1).unwrap(), 1).unwrap();
            worst = worst.max(p.distance(&q));
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn long_powers_match_true_orbit() {
        // Dyadic rationals with few bits have exactly computable orbits.
        let a = ToralAutomorphism::cat_map();
        let p = wrap(3.0 / 1024.0, 5.0 / 1024.0).unwrap();
        let (mut x, mut y) = (3i64, 5i64);
        for _ in 0..40 {
            let nx = (2 * x + y).rem_euclid(1024);
            y = (x + y).rem_euclid(1024);
            x = nx;
        }
        let q = a.apply_auto(&p, 40).unwrap();
        assert_eq!(q.coords(), [x as f64 / 1024.0, y as f64 / 1024.0]);
        assert_eq!(a.apply_long(&p, 40), q);
        let via_orbit = a.orbit(&p, true).nth(39).unwrap();
        assert_eq!(via_orbit, q);
    }

    #[test]
    fn orbit_crosses_block_boundary() {
        let a = ToralAutomorphism::cat_map();
        let p = wrap(0.123, 0.456).unwrap();
        let q = a.orbit(&p, true).nth(59).unwrap();
        assert_eq!(q, a.apply_long(&p, 60));
        // Exactly representable start: the round trip is exact as well.
        let d = wrap(17.0 / 4096.0, 1001.0 / 4096.0).unwrap();
        let far = a.orbit(&d, true).nth(59).unwrap();
        assert_eq!(a.orbit(&far, false).nth(59).unwrap(), d);
    }

    #[test]
    fn bracket_examples() {
        let a = ToralAutomorphism::cat_map();
        let p = wrap(0.3, 0.7).unwrap();
        assert!(a.bracket(&p, &p, 0.1).unwrap().distance(&p) < 1e-15);
        let eu = a.e_u();
        let es = a.e_s();
        let b = p.translate([0.02 * eu[0], 0.02 * eu[1]]);
        assert!(a.bracket(&p, &b, 0.1).unwrap().distance(&p) < 1e-12);
        let c = p.translate([0.02 * es[0], 0.02 * es[1]]);
        assert!(a.bracket(&p, &c, 0.1).unwrap().distance(&c) < 1e-12);
        let far = wrap(0.8, 0.2).unwrap();
        let e = a.bracket(&p, &far, 0.1).unwrap_err();
        assert!(e.to_string().contains("no local bracket"));
    }
}
