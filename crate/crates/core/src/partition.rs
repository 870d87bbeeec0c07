//! Markov partitions of a hyperbolic toral automorphism.
//!
//! Each rectangle is a parallelogram spanned by `e_u` and `e_s`, described by a
//! corner (`anchor`) and its two side lengths. Membership and plaque queries go
//! through a per-rectangle chart: the shortest lift of `p - center` expressed in
//! eigencoordinates and shifted so the rectangle is `[0, L_u] × [0, L_s]`.
//! Since every rectangle has diameter below a quarter, that lift is unambiguous.
//!
//! The linear map sends charts to charts affinely, `u_j = σλu_i + o_ij` and
//! `s_j = λ_s s_i + p_ij`, so cylinders are tracked exactly as composed
//! affine maps rather than by iterating points.

use crate::torus::{EigenCoords, ToralAutomorphism, TorusError, TorusPoint, INJECTIVITY_RADIUS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Distance to the boundary below which a point is not considered interior.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Default depth cap for cylinder enumeration on the built-in partition.
pub const DEFAULT_CYLINDER_CAP: usize = 16;

const GRID: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("rectangle {0} has non-positive area")]
    EmptyRectangle(usize),
    #[error("rectangle {index} has diameter {diam:.4}, above the bound {bound}")]
    TooLarge { index: usize, diam: f64, bound: f64 },
    #[error("partition has no rectangles")]
    Empty,
    #[error("ambiguous plaque: point is within {0:.1e} of a rectangle boundary")]
    AmbiguousPlaque(f64),
    #[error("cylinder explosion: depth {depth} exceeds cap {cap}")]
    CylinderExplosion { depth: usize, cap: usize },
    #[error("inadmissible word: transition {0} -> {1} not allowed")]
    Inadmissible(usize, usize),
    #[error("rectangle index {0} out of range")]
    BadIndex(usize),
    #[error(transparent)]
    Torus(#[from] TorusError),
}

/// Input description of a rectangle: corner point and side lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RectSpec {
    pub anchor: TorusPoint,
    pub l_u: f64,
    pub l_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rectangle {
    /// Zero-based position in the partition.
    pub index: usize,
    pub anchor: TorusPoint,
    pub l_u: f64,
    pub l_s: f64,
    pub center: TorusPoint,
}

impl Rectangle {
    pub fn area(&self) -> f64 {
        self.l_u * self.l_s
    }

    pub fn diameter(&self) -> f64 {
        self.l_u.hypot(self.l_s)
    }
}

/// Chart coordinates inside a rectangle; `[0, L_u] × [0, L_s]` is the rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chart {
    pub u: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Location {
    pub index: usize,
    pub interior: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlaqueKind {
    Unstable,
    Stable,
}

/// Full unstable or stable segment of a rectangle through a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Plaque {
    pub rect: usize,
    pub kind: PlaqueKind,
    /// Endpoint with along-coordinate 0.
    pub start: TorusPoint,
    pub length: f64,
    /// Transverse chart coordinate (`s` for unstable plaques, `u` for stable).
    pub cross: f64,
    /// Along-coordinate of the point the plaque was requested for.
    pub offset: f64,
}

/// Chart-to-chart data of an allowed transition `i -> j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    /// `vol^u(A^{-1} W^u_j ∩ W^u_i) / vol^u(W^u_i)`.
    pub weight: f64,
    pub u_offset: f64,
    pub s_offset: f64,
}

/// Affine map `x ↦ a·x + b` between chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.b) / self.a
    }

    /// `step ∘ self`.
    pub fn then(&self, a: f64, b: f64) -> Affine {
        Affine { a: a * self.a, b: a * self.b + b }
    }
}

/// Admissible word together with its piece of the starting unstable plaque.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolicCylinder {
    pub word: Vec<usize>,
    /// Sub-interval of `[0, L_u(i_0)]` on the starting plaque.
    pub u_lo: f64,
    pub u_hi: f64,
    /// Start-chart `u` to chart `u` of the last rectangle.
    pub u_map: Affine,
    /// Start-chart `s` to chart `s` of the last rectangle.
    pub s_map: Affine,
}

impl SymbolicCylinder {
    pub fn depth(&self) -> usize {
        self.word.len() - 1
    }

    pub fn first(&self) -> usize {
        self.word[0]
    }

    pub fn last(&self) -> usize {
        *self.word.last().expect("words are non-empty")
    }

    pub fn width(&self) -> f64 {
        self.u_hi - self.u_lo
    }
}

#[derive(Debug, Clone)]
pub struct MarkovPartition {
    auto: ToralAutomorphism,
    rects: Vec<Rectangle>,
    transitions: Vec<Vec<Transition>>,
    lookup: Vec<Vec<Option<u32>>>,
    grid: Vec<Vec<u16>>,
    cylinder_cap: usize,
}

/// Counts of sampled violations of the Markov properties.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MarkovReport {
    pub samples: usize,
    pub covering: usize,
    pub overlap: usize,
    pub product_structure: usize,
    pub unstable_inclusion: usize,
    pub stable_inclusion: usize,
    pub transition: usize,
    pub diameter: usize,
}

impl MarkovReport {
    pub fn total(&self) -> usize {
        self.covering
            + self.overlap
            + self.product_structure
            + self.unstable_inclusion
            + self.stable_inclusion
            + self.transition
            + self.diameter
    }
}

fn margin_of(r: &Rectangle, c: Chart) -> f64 {
    c.u.min(r.l_u - c.u).min(c.s).min(r.l_s - c.s)
}

impl MarkovPartition {
    pub fn new(auto: ToralAutomorphism, specs: &[RectSpec]) -> Result<Self, PartitionError> {
        if specs.is_empty() {
            return Err(PartitionError::Empty);
        }
        let bound = INJECTIVITY_RADIUS / 2.0;
        let mut rects = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            if !(spec.l_u > 0.0 && spec.l_s > 0.0) {
                return Err(PartitionError::EmptyRectangle(index));
            }
            let diam = spec.l_u.hypot(spec.l_s);
            if diam >= bound {
                return Err(PartitionError::TooLarge { index, diam, bound });
            }
            let center = auto.offset(&spec.anchor, EigenCoords { u: spec.l_u / 2.0, s: spec.l_s / 2.0 });
            rects.push(Rectangle { index, anchor: spec.anchor, l_u: spec.l_u, l_s: spec.l_s, center });
        }
        let k = rects.len();
        let mut part = MarkovPartition {
            auto,
            rects,
            transitions: vec![Vec::new(); k],
            lookup: vec![vec![None; k]; k],
            grid: vec![Vec::new(); GRID * GRID],
            cylinder_cap: DEFAULT_CYLINDER_CAP,
        };
        part.build_grid();
        part.build_transitions();
        Ok(part)
    }

    /// The refined Adler–Weiss partition of the cat map: the two classical
    /// squares joined with their images under `A^{±1}` and `A^{±2}`, giving
    /// 89 rectangles of diameter below 0.18.
    pub fn builtin_cat() -> Self {
        let auto = ToralAutomorphism::cat_map();
        let specs = cat_partition_specs(&auto);
        MarkovPartition::new(auto, &specs).expect("built-in partition is valid")
    }

    pub fn with_cylinder_cap(mut self, cap: usize) -> Self {
        self.cylinder_cap = cap;
        self
    }

    pub fn cylinder_cap(&self) -> usize {
        self.cylinder_cap
    }

    pub fn auto(&self) -> &ToralAutomorphism {
        &self.auto
    }

    pub fn rects(&self) -> &[Rectangle] {
        &self.rects
    }

    pub fn rect(&self, i: usize) -> &Rectangle {
        &self.rects[i]
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Orientation of `A` along `e_u`: `+1` or `-1`.
    pub fn sigma(&self) -> f64 {
        self.auto.unstable_eigenvalue().signum()
    }

    fn build_grid(&mut self) {
        let eu = self.auto.e_u();
        let es = self.auto.e_s();
        for r in &self.rects {
            let hu = r.l_u / 2.0;
            let hs = r.l_s / 2.0;
            let wx = hu * eu[0].abs() + hs * es[0].abs() + 1e-6;
            let wy = hu * eu[1].abs() + hs * es[1].abs() + 1e-6;
            let c = r.center.coords();
            let cell = |v: f64| (v * GRID as f64).floor() as i64;
            for cx in cell(c[0] - wx)..=cell(c[0] + wx) {
                for cy in cell(c[1] - wy)..=cell(c[1] + wy) {
                    let gx = cx.rem_euclid(GRID as i64) as usize;
                    let gy = cy.rem_euclid(GRID as i64) as usize;
                    let slot = &mut self.grid[gx * GRID + gy];
                    if slot.last() != Some(&(r.index as u16)) {
                        slot.push(r.index as u16);
                    }
                }
            }
        }
        for slot in &mut self.grid {
            slot.sort_unstable();
            slot.dedup();
        }
    }

    fn build_transitions(&mut self) {
        let lam = self.auto.lambda_u();
        let lam_s = self.auto.stable_eigenvalue();
        let sigma = self.sigma();
        let m = self.auto.matrix();
        for ri in &self.rects {
            let c = ri.center.coords();
            let img = [
                m[0][0] as f64 * c[0] + m[0][1] as f64 * c[1],
                m[1][0] as f64 * c[0] + m[1][1] as f64 * c[1],
            ];
            let half_u = lam * ri.l_u / 2.0;
            let half_s = lam_s.abs() * ri.l_s / 2.0;
            for rj in &self.rects {
                let cj = rj.center.coords();
                let d0 = [img[0] - cj[0], img[1] - cj[1]];
                let base = [-d0[0].round() as i64, -d0[1].round() as i64];
                for vx in base[0] - 2..=base[0] + 2 {
                    for vy in base[1] - 2..=base[1] + 2 {
                        let d = [d0[0] + vx as f64, d0[1] + vy as f64];
                        let e = self.auto.eigen_coords(d);
                        let ov_u = (e.u + half_u).min(rj.l_u / 2.0) - (e.u - half_u).max(-rj.l_u / 2.0);
                        let ov_s = (e.s + half_s).min(rj.l_s / 2.0) - (e.s - half_s).max(-rj.l_s / 2.0);
                        if ov_u > BOUNDARY_TOL && ov_s > BOUNDARY_TOL {
                            if self.lookup[ri.index][rj.index].is_some() {
                                continue;
                            }
                            let t = Transition {
                                from: ri.index,
                                to: rj.index,
                                weight: ov_u / (lam * ri.l_u),
                                u_offset: rj.l_u / 2.0 + e.u - sigma * lam * ri.l_u / 2.0,
                                s_offset: rj.l_s / 2.0 + e.s - lam_s * ri.l_s / 2.0,
                            };
                            let row = &mut self.transitions[ri.index];
                            self.lookup[ri.index][rj.index] = Some(row.len() as u32);
                            row.push(t);
                        }
                    }
                }
            }
        }
    }

    pub fn chart(&self, i: usize, p: &TorusPoint) -> Chart {
        let r = &self.rects[i];
        let e = self.auto.relative(&r.center, p);
        Chart { u: r.l_u / 2.0 + e.u, s: r.l_s / 2.0 + e.s }
    }

    pub fn point_at(&self, i: usize, c: Chart) -> TorusPoint {
        let r = &self.rects[i];
        self.auto.offset(&r.center, EigenCoords { u: c.u - r.l_u / 2.0, s: c.s - r.l_s / 2.0 })
    }

    /// Signed distance (in chart units) from `p` to the boundary of rectangle
    /// `i`; negative outside.
    pub fn margin(&self, i: usize, p: &TorusPoint) -> f64 {
        margin_of(&self.rects[i], self.chart(i, p))
    }

    pub fn contains(&self, i: usize, p: &TorusPoint) -> bool {
        self.margin(i, p) >= -BOUNDARY_TOL
    }

    fn candidates(&self, p: &TorusPoint) -> &[u16] {
        let gx = ((p.x1() * GRID as f64) as usize).min(GRID - 1);
        let gy = ((p.x2() * GRID as f64) as usize).min(GRID - 1);
        &self.grid[gx * GRID + gy]
    }

    /// Rectangle containing `p`, lowest index on shared boundaries. Points that
    /// numerically miss every rectangle are snapped to the closest one.
    pub fn locate(&self, p: &TorusPoint) -> Location {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for &i in self.candidates(p) {
            let i = i as usize;
            let m = self.margin(i, p);
            if m >= -BOUNDARY_TOL {
                return Location { index: i, interior: m > BOUNDARY_TOL };
            }
            if m > best.0 {
                best = (m, i);
            }
        }
        if best.0 == f64::NEG_INFINITY {
            for i in 0..self.rects.len() {
                let m = self.margin(i, p);
                if m > best.0 {
                    best = (m, i);
                }
            }
        }
        Location { index: best.1, interior: false }
    }

    /// Locate a point with its chart coordinates in one pass.
    pub fn locate_chart(&self, p: &TorusPoint) -> (Location, Chart) {
        let loc = self.locate(p);
        (loc, self.chart(loc.index, p))
    }

    pub fn unstable_plaque(&self, p: &TorusPoint) -> Result<Plaque, PartitionError> {
        self.plaque(p, PlaqueKind::Unstable)
    }

    pub fn stable_plaque(&self, p: &TorusPoint) -> Result<Plaque, PartitionError> {
        self.plaque(p, PlaqueKind::Stable)
    }

    fn plaque(&self, p: &TorusPoint, kind: PlaqueKind) -> Result<Plaque, PartitionError> {
        let (loc, c) = self.locate_chart(p);
        if !loc.interior {
            return Err(PartitionError::AmbiguousPlaque(BOUNDARY_TOL));
        }
        Ok(self.plaque_in(loc.index, c, kind))
    }

    /// Plaque of rectangle `i` through chart point `c`, no interiority check.
    pub fn plaque_in(&self, i: usize, c: Chart, kind: PlaqueKind) -> Plaque {
        let r = &self.rects[i];
        match kind {
            PlaqueKind::Unstable => Plaque {
                rect: i,
                kind,
                start: self.point_at(i, Chart { u: 0.0, s: c.s }),
                length: r.l_u,
                cross: c.s,
                offset: c.u,
            },
            PlaqueKind::Stable => Plaque {
                rect: i,
                kind,
                start: self.point_at(i, Chart { u: c.u, s: 0.0 }),
                length: r.l_s,
                cross: c.u,
                offset: c.s,
            },
        }
    }

    /// Point at along-coordinate `t` of a plaque.
    pub fn plaque_point(&self, pl: &Plaque, t: f64) -> TorusPoint {
        match pl.kind {
            PlaqueKind::Unstable => self.point_at(pl.rect, Chart { u: t, s: pl.cross }),
            PlaqueKind::Stable => self.point_at(pl.rect, Chart { u: pl.cross, s: t }),
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.lookup[i][j].is_some()
    }

    pub fn transition(&self, i: usize, j: usize) -> Option<&Transition> {
        self.lookup[i][j].map(|k| &self.transitions[i][k as usize])
    }

    pub fn successors(&self, i: usize) -> &[Transition] {
        &self.transitions[i]
    }

    /// 0/1 transition matrix.
    pub fn transition_matrix(&self) -> Vec<Vec<u8>> {
        self.lookup.iter().map(|row| row.iter().map(|t| t.is_some() as u8).collect()).collect()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.transition(i, j).map(|t| t.weight)
    }

    /// Chart image of `c` under `A` for the allowed transition `i -> j`.
    pub fn map_chart(&self, t: &Transition, c: Chart) -> Chart {
        let lam = self.auto.lambda_u();
        Chart {
            u: self.sigma() * lam * c.u + t.u_offset,
            s: self.auto.stable_eigenvalue() * c.s + t.s_offset,
        }
    }

    /// Leading eigenvalue of the transition matrix by power iteration.
    pub fn perron_eigenvalue(&self) -> f64 {
        let k = self.rects.len();
        let mut v = vec![1.0 / k as f64; k];
        let mut est = 0.0;
        for _ in 0..10_000 {
            let mut w = vec![0.0; k];
            for (i, row) in self.transitions.iter().enumerate() {
                for t in row {
                    w[i] += v[t.to];
                }
            }
            let norm: f64 = w.iter().sum();
            let next = norm / v.iter().sum::<f64>();
            for x in &mut w {
                *x /= norm;
            }
            let done = (next - est).abs() < 1e-15 * next;
            est = next;
            v = w;
            if done {
                break;
            }
        }
        est
    }

    /// Transition matrix as CSV with a header row.
    pub fn transition_csv(&self) -> String {
        let k = self.rects.len();
        let mut out = String::from("from");
        for j in 0..k {
            out.push_str(&format!(",r{j}"));
        }
        out.push('\n');
        for (i, row) in self.transition_matrix().iter().enumerate() {
            out.push_str(&format!("r{i}"));
            for x in row {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }

    /// Depth-0 cylinder covering the whole unstable plaque of rectangle `i`.
    pub fn root_cylinder(&self, i: usize) -> SymbolicCylinder {
        SymbolicCylinder {
            word: vec![i],
            u_lo: 0.0,
            u_hi: self.rects[i].l_u,
            u_map: Affine::IDENTITY,
            s_map: Affine::IDENTITY,
        }
    }

    /// Extend a cylinder by one admissible step.
    pub fn extend(&self, cyl: &SymbolicCylinder, j: usize) -> Result<SymbolicCylinder, PartitionError> {
        let i = cyl.last();
        let t = self.transition(i, j).ok_or(PartitionError::Inadmissible(i, j))?;
        Ok(self.extend_with(cyl, t))
    }

    fn extend_with(&self, cyl: &SymbolicCylinder, t: &Transition) -> SymbolicCylinder {
        let lam = self.auto.lambda_u();
        let u_map = cyl.u_map.then(self.sigma() * lam, t.u_offset);
        let s_map = cyl.s_map.then(self.auto.stable_eigenvalue(), t.s_offset);
        let (a, b) = (u_map.invert(0.0), u_map.invert(self.rects[t.to].l_u));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut word = Vec::with_capacity(cyl.word.len() + 1);
        word.extend_from_slice(&cyl.word);
        word.push(t.to);
        SymbolicCylinder { word, u_lo: lo.max(cyl.u_lo), u_hi: hi.min(cyl.u_hi), u_map, s_map }
    }

    /// Cylinder for a full word, validating admissibility.
    pub fn cylinder(&self, word: &[usize]) -> Result<SymbolicCylinder, PartitionError> {
        let (&first, rest) = word.split_first().ok_or(PartitionError::Empty)?;
        if first >= self.len() {
            return Err(PartitionError::BadIndex(first));
        }
        let mut c = self.root_cylinder(first);
        for &j in rest {
            if j >= self.len() {
                return Err(PartitionError::BadIndex(j));
            }
            c = self.extend(&c, j)?;
        }
        Ok(c)
    }

    /// All admissible words of length `n + 1` starting at `i`, in
    /// lexicographic order.
    pub fn enumerate_cylinders(&self, i: usize, n: usize) -> Result<CylinderIter<'_>, PartitionError> {
        self.enumerate_from(self.root_cylinder(i), n, None)
    }

    /// Depth-`n` extensions of `root` whose last symbol is `target` (if set).
    pub fn enumerate_from(
        &self,
        root: SymbolicCylinder,
        n: usize,
        target: Option<usize>,
    ) -> Result<CylinderIter<'_>, PartitionError> {
        if n > self.cylinder_cap {
            return Err(PartitionError::CylinderExplosion { depth: n, cap: self.cylinder_cap });
        }
        let depth0 = root.depth();
        let reach = target.map(|j| self.reachability(j, n - depth0.min(n)));
        Ok(CylinderIter { part: self, stack: vec![(root, 0)], depth: n, reach })
    }

    /// `reach[m][k]`: a path of exactly `m` steps leads from `k` to `j`.
    fn reachability(&self, j: usize, steps: usize) -> Vec<Vec<bool>> {
        let k = self.len();
        let mut reach = vec![vec![false; k]; steps + 1];
        reach[0][j] = true;
        for m in 1..=steps {
            for i in 0..k {
                reach[m][i] = self.transitions[i].iter().any(|t| reach[m - 1][t.to]);
            }
        }
        reach
    }

    /// Number of admissible words of length `n + 1` from `i` (row sum of `T^n`).
    pub fn count_words(&self, i: usize, n: usize) -> u64 {
        let k = self.len();
        let mut v = vec![0u64; k];
        v[i] = 1;
        for _ in 0..n {
            let mut w = vec![0u64; k];
            for (a, row) in self.transitions.iter().enumerate() {
                if v[a] > 0 {
                    for t in row {
                        w[t.to] += v[a];
                    }
                }
            }
            v = w;
        }
        v.iter().sum()
    }

    /// Sample-based check of covering, disjointness, product structure, both
    /// Markov inclusions, transition consistency and rectangle size.
    pub fn verify_markov(&self, n_samples: usize, seed: u64) -> MarkovReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rep = MarkovReport { samples: n_samples, ..Default::default() };
        let bound = INJECTIVITY_RADIUS / 2.0;
        rep.diameter = self.rects.iter().filter(|r| r.diameter() >= bound).count();
        let tol = 1e-9;
        let lam = self.auto.lambda_u();
        for _ in 0..n_samples {
            let p = TorusPoint::from_unit(rng.random(), rng.random());

            let mut inside = 0;
            let mut interior = 0;
            for i in 0..self.len() {
                let m = self.margin(i, &p);
                if m >= -tol {
                    inside += 1;
                }
                if m > tol {
                    interior += 1;
                }
            }
            if inside == 0 {
                rep.covering += 1;
                continue;
            }
            if interior > 1 {
                rep.overlap += 1;
            }

            // Product structure inside a random rectangle.
            let i = rng.random_range(0..self.len());
            let r = self.rects[i];
            let ca = Chart { u: rng.random::<f64>() * r.l_u, s: rng.random::<f64>() * r.l_s };
            let cb = Chart { u: rng.random::<f64>() * r.l_u, s: rng.random::<f64>() * r.l_s };
            let (a, b) = (self.point_at(i, ca), self.point_at(i, cb));
            match self.auto.bracket(&a, &b, bound) {
                Ok(z) => {
                    let cz = self.chart(i, &z);
                    if (cz.u - ca.u).abs() > tol || (cz.s - cb.s).abs() > tol {
                        rep.product_structure += 1;
                    }
                }
                Err(_) => rep.product_structure += 1,
            }

            let (loc, c) = self.locate_chart(&p);
            let q = self.auto.apply_auto(&p, 1).expect("n = 1 is cached");
            let (qloc, cq) = self.locate_chart(&q);
            if !loc.interior || !qloc.interior {
                continue;
            }
            let (i, j) = (loc.index, qloc.index);
            let Some(t) = self.transition(i, j) else {
                rep.transition += 1;
                continue;
            };
            let pred = self.map_chart(t, c);
            if (pred.u - cq.u).abs() > 1e-8 * lam || (pred.s - cq.s).abs() > 1e-8 {
                rep.transition += 1;
            }

            let rj = self.rects[j];
            let ri = self.rects[i];
            for end in [0.0, rj.l_u] {
                let e = self.point_at(j, Chart { u: end, s: cq.s });
                let back = self.chart(i, &self.auto.apply_auto(&e, -1).expect("cached"));
                if back.u < -tol || back.u > ri.l_u + tol || (back.s - c.s).abs() > tol {
                    rep.unstable_inclusion += 1;
                    break;
                }
            }
            for end in [0.0, ri.l_s] {
                let e = self.point_at(i, Chart { u: c.u, s: end });
                let fwd = self.chart(j, &self.auto.apply_auto(&e, 1).expect("cached"));
                if fwd.s < -tol || fwd.s > rj.l_s + tol || (fwd.u - cq.u).abs() > 1e-8 * lam {
                    rep.stable_inclusion += 1;
                    break;
                }
            }
        }
        rep
    }
}

/// Depth-first, lexicographic stream of cylinders.
pub struct CylinderIter<'a> {
    part: &'a MarkovPartition,
    stack: Vec<(SymbolicCylinder, usize)>,
    depth: usize,
    reach: Option<Vec<Vec<bool>>>,
}

impl Iterator for CylinderIter<'_> {
    type Item = SymbolicCylinder;

    fn next(&mut self) -> Option<SymbolicCylinder> {
        loop {
            let (cyl, next_child) = self.stack.pop()?;
            let d = cyl.depth();
            if d >= self.depth {
                return Some(cyl);
            }
            let row = self.part.successors(cyl.last());
            let remaining = self.depth - d - 1;
            let mut k = next_child;
            while k < row.len() {
                let t = &row[k];
                let ok = match &self.reach {
                    Some(reach) => reach[remaining][t.to],
                    None => true,
                };
                if ok {
                    break;
                }
                k += 1;
            }
            if k >= row.len() {
                continue;
            }
            let child = self.part.extend_with(&cyl, &row[k]);
            self.stack.push((cyl, k + 1));
            self.stack.push((child, 0));
        }
    }
}

/// Rectangles of the refined two-square partition, in a deterministic order.
pub fn cat_partition_specs(auto: &ToralAutomorphism) -> Vec<RectSpec> {
    type Box2 = (f64, f64, f64, f64);
    let b1 = auto.eigen_coords([1.0, 0.0]);
    let b2 = auto.eigen_coords([0.0, 1.0]);
    let (p, q) = (b1.u, b1.s);
    let (r, s) = (b2.u, -b2.s);
    let base: Vec<Box2> = vec![(0.0, 0.0, p, s), (p, 0.0, r, q)];
    let lam_u = auto.unstable_eigenvalue();
    let lam_s = auto.stable_eigenvalue();
    let lattice: Vec<(f64, f64)> = (-12..=12)
        .flat_map(|i| (-12..=12).map(move |j| (i as f64, j as f64)))
        .map(|(i, j)| (i * b1.u + j * b2.u, i * b1.s + j * b2.s))
        .collect();
    let image = |bx: &Box2, k: i32| -> Box2 {
        let (a, b) = (lam_u.powi(k), lam_s.powi(k));
        let (u0, u1) = (bx.0 * a, (bx.0 + bx.2) * a);
        let (s0, s1) = (bx.1 * b, (bx.1 + bx.3) * b);
        (u0.min(u1), s0.min(s1), (u1 - u0).abs(), (s1 - s0).abs())
    };
    let inter = |a: &Box2, b: &Box2| -> Option<Box2> {
        let u0 = a.0.max(b.0);
        let u1 = (a.0 + a.2).min(b.0 + b.2);
        let s0 = a.1.max(b.1);
        let s1 = (a.1 + a.3).min(b.1 + b.3);
        (u1 - u0 > 1e-9 && s1 - s0 > 1e-9).then_some((u0, s0, u1 - u0, s1 - s0))
    };
    let refine = |boxes: &[Box2], k: i32| -> Vec<Box2> {
        let mut out = Vec::new();
        for rb in boxes {
            for sb in &base {
                let im = image(sb, k);
                for v in &lattice {
                    let shifted = (im.0 + v.0, im.1 + v.1, im.2, im.3);
                    if let Some(x) = inter(rb, &shifted) {
                        out.push(x);
                    }
                }
            }
        }
        out
    };
    let mut boxes = base.clone();
    for k in 1..=2 {
        boxes = refine(&boxes, k);
        boxes = refine(&boxes, -k);
    }
    let mut specs: Vec<RectSpec> = boxes
        .iter()
        .map(|b| {
            let d = auto.from_eigen(EigenCoords { u: b.0, s: b.1 });
            RectSpec { anchor: TorusPoint::from_unit(d[0], d[1]), l_u: b.2, l_s: b.3 }
        })
        .collect();
    let key = |r: &RectSpec| {
        let c = auto.offset(&r.anchor, EigenCoords { u: r.l_u / 2.0, s: r.l_s / 2.0 });
        ((c.x1() * 1e9).round() as i64, (c.x2() * 1e9).round() as i64)
    };
    specs.sort_by_key(key);
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part() -> MarkovPartition {
        MarkovPartition::builtin_cat()
    }

    #[test]
    fn builtin_has_unit_area() {
        let p = part();
        assert_eq!(p.len(), 89);
        let area: f64 = p.rects().iter().map(Rectangle::area).sum();
        assert!((area - 1.0).abs() < 1e-12, "{area}");
        assert!(p.rects().iter().all(|r| r.diameter() < 0.18));
    }

    #[test]
    fn builtin_passes_verification() {
        let rep = part().verify_markov(20_000, 11);
        assert_eq!(rep.total(), 0, "{rep:?}");
    }

    #[test]
    fn weights_match_geometry() {
        let p = part();
        let lam = p.auto().lambda_u();
        for i in 0..p.len() {
            let row = p.successors(i);
            let total: f64 = row.iter().map(|t| t.weight).sum();
            assert!((total - 1.0).abs() < 1e-10, "row {i}: {total}");
            for t in row {
                let expect = p.rect(t.to).l_u / (lam * p.rect(i).l_u);
                assert!((t.weight - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn perron_matches_lambda() {
        let p = part();
        assert!((p.perron_eigenvalue() - p.auto().lambda_u()).abs() < 1e-9);
    }

    #[test]
    fn locate_center_and_perturbations() {
        let p = part();
        let c = p.rect(0).center;
        assert_eq!(p.locate(&c), Location { index: 0, interior: true });
        for k in 0..1000 {
            let a = k as f64 * 0.1;
            let q = c.translate([1e-12 * a.cos(), 1e-12 * a.sin()]);
            assert_eq!(p.locate(&q).index, 0);
        }
    }

    #[test]
    fn shared_stable_boundary_is_not_interior() {
        let p = part();
        let r = p.rect(3);
        let q = p.point_at(3, Chart { u: r.l_u, s: r.l_s / 2.0 });
        assert!(!p.locate(&q).interior);
        assert!(p.unstable_plaque(&q).is_err());
    }

    #[test]
    fn whole_torus_rejected() {
        let auto = ToralAutomorphism::cat_map();
        let b1 = auto.eigen_coords([1.0, 0.0]);
        let spec = RectSpec { anchor: TorusPoint::from_unit(0.0, 0.0), l_u: 1.0, l_s: 1.0 };
        assert!(b1.u > 0.0);
        let e = MarkovPartition::new(auto, &[spec]).unwrap_err();
        assert!(matches!(e, PartitionError::TooLarge { .. }));
    }

    #[test]
    fn shrunk_rectangle_breaks_covering() {
        let auto = ToralAutomorphism::cat_map();
        let mut specs = cat_partition_specs(&auto);
        specs[7].l_u *= 0.99;
        specs[7].l_s *= 0.99;
        let p = MarkovPartition::new(auto, &specs).unwrap();
        assert!(p.verify_markov(20_000, 5).covering > 0);
    }

    #[test]
    fn cylinder_counts_and_widths() {
        let p = part();
        let lam = p.auto().lambda_u();
        assert_eq!(p.enumerate_cylinders(4, 0).unwrap().count(), 1);
        assert_eq!(p.enumerate_cylinders(4, 1).unwrap().count(), p.successors(4).len());
        let words: Vec<_> = p.enumerate_cylinders(4, 5).unwrap().collect();
        assert_eq!(words.len() as u64, p.count_words(4, 5));
        for w in &words {
            let expect = p.rect(w.last()).l_u * lam.powi(-5);
            assert!((w.width() - expect).abs() < 1e-10);
        }
        for pair in words.windows(2) {
            assert!(pair[0].word < pair[1].word);
        }
        let ratio = p.count_words(4, 14) as f64 / p.count_words(4, 13) as f64;
        assert!((ratio / lam - 1.0).abs() < 0.05);
        assert!(p.enumerate_cylinders(0, 17).is_err());
    }

    #[test]
    fn targeted_enumeration_matches_filter() {
        let p = part();
        let all: Vec<_> = p.enumerate_cylinders(2, 6).unwrap().filter(|c| c.last() == 9).collect();
        let direct: Vec<_> = p.enumerate_from(p.root_cylinder(2), 6, Some(9)).unwrap().collect();
        assert_eq!(all, direct);
    }

    #[test]
    fn plaque_lengths() {
        let p = part();
        for r in p.rects().iter().take(10) {
            let pl = p.unstable_plaque(&r.center).unwrap();
            assert!((pl.length - r.l_u).abs() < 1e-15);
            let pl = p.stable_plaque(&r.center).unwrap();
            assert!((pl.length - r.l_s).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_csv_shape() {
        let p = part();
        let csv = p.transition_csv();
        assert_eq!(csv.lines().count(), 90);
        assert!(csv.starts_with("from,r0,r1"));
    }
}
