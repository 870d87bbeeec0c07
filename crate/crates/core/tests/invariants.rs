//! Property tests for the structural invariants of each module.

use proptest::prelude::*;
use skewlab::coupling::{log_cs_norm, log_cs_norm_lipschitz};
use skewlab::partition::{Chart, MarkovPartition};
use skewlab::reference::cylinder_mass;
use skewlab::runner::Fixture;
use skewlab::skew::{circle_dist, SkewPoint, SkewSystem};
use skewlab::stats::{cat_cos_correlation, sampled_seminorm, Observable};
use skewlab::torus::{EigenCoords, ToralAutomorphism, TorusPoint};
use std::sync::OnceLock;

fn part() -> &'static MarkovPartition {
    static P: OnceLock<MarkovPartition> = OnceLock::new();
    P.get_or_init(MarkovPartition::builtin_cat)
}

fn coupled() -> SkewSystem {
    Fixture::Coupled.system().unwrap()
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..1.0f64
}

/// An admissible word of length `len + 1` picked by `choices`.
fn word(start: usize, choices: &[usize]) -> Vec<usize> {
    let p = part();
    let mut w = vec![start % p.len()];
    for &c in choices {
        let succ = p.successors(*w.last().unwrap());
        w.push(succ[c % succ.len()].to);
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn torus_coords_stay_canonical(x in unit(), y in unit(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let p = TorusPoint::from_unit(x, y).translate([dx, dy]);
        for c in p.coords() {
            prop_assert!((0.0..1.0).contains(&c));
        }
    }

    #[test]
    fn eigen_round_trip(x in unit(), y in unit(), u in -0.2..0.2f64, s in -0.2..0.2f64) {
        let a = ToralAutomorphism::cat_map();
        let base = TorusPoint::from_unit(x, y);
        let q = a.offset(&base, EigenCoords { u, s });
        let back = a.relative(&base, &q);
        prop_assert!((back.u - u).abs() < 1e-12 && (back.s - s).abs() < 1e-12);
    }

    #[test]
    fn bracket_sits_on_both_lines(x in unit(), y in unit(), u in -0.05..0.05f64, s in -0.05..0.05f64) {
        let a = ToralAutomorphism::cat_map();
        let b = TorusPoint::from_unit(x, y);
        let p = a.offset(&b, EigenCoords { u, s });
        let z = a.bracket(&p, &b, 0.2).unwrap();
        let from_b = a.relative(&b, &z);
        let from_p = a.relative(&p, &z);
        prop_assert!(from_b.s.abs() < 1e-10);
        prop_assert!(from_p.u.abs() < 1e-10);
    }

    #[test]
    fn auto_powers_invert(x in unit(), y in unit(), n in 1i64..12) {
        let a = ToralAutomorphism::cat_map();
        let p = TorusPoint::from_unit(x, y);
        let q = a.apply_auto(&a.apply_auto(&p, n).unwrap(), -n).unwrap();
        prop_assert!(p.distance(&q) < 1e-9);
    }

    #[test]
    fn charts_locate_back(i in 0usize..89, fu in 0.01..0.99f64, fs in 0.01..0.99f64) {
        let p = part();
        let r = p.rect(i);
        let c = Chart { u: fu * r.l_u, s: fs * r.l_s };
        let q = p.point_at(i, c);
        let (loc, back) = p.locate_chart(&q);
        prop_assert_eq!(loc.index, i);
        prop_assert!((back.u - c.u).abs() < 1e-10 && (back.s - c.s).abs() < 1e-10);
    }

    #[test]
    fn cylinder_width_and_mass_follow_the_word(start in 0usize..89, choices in prop::collection::vec(0usize..8, 0..8)) {
        let p = part();
        let w = word(start, &choices);
        let cyl = p.cylinder(&w).unwrap();
        let lam = p.auto().lambda_u();
        let n = w.len() - 1;
        let width = p.rect(*w.last().unwrap()).l_u * lam.powi(-(n as i32));
        prop_assert!((cyl.width() - width).abs() < 1e-10);
        let product: f64 = w.windows(2).map(|e| p.weight(e[0], e[1]).unwrap()).product();
        prop_assert!((cylinder_mass(p, &w).unwrap() - product).abs() < 1e-10);
        prop_assert!((cyl.width() / p.rect(w[0]).l_u - product).abs() < 1e-10);
    }

    #[test]
    fn skew_base_is_the_automorphism(x in unit(), y in unit(), th in unit(), n in 1i64..10) {
        let sys = coupled();
        let p = SkewPoint::new(TorusPoint::from_unit(x, y), th);
        let q = sys.apply(&p, n).unwrap();
        prop_assert_eq!(q.base, sys.auto().apply_auto(&p.base, n).unwrap());
        let back = sys.apply(&q, -n).unwrap();
        prop_assert!(p.distance(&back) < 1e-8);
    }

    #[test]
    fn fiber_inverse_round_trip(x1 in unit(), th in unit(), kappa in 0.0..0.95f64, delta in 0.0..0.2f64) {
        let sys = SkewSystem::new(ToralAutomorphism::cat_map(), kappa, delta, 0.1).unwrap();
        let y = sys.fiber(x1, th);
        prop_assert!(circle_dist(sys.fiber_inverse(x1, y).unwrap(), th) < 1e-10);
    }

    #[test]
    fn non_diffeo_fibers_are_rejected(kappa in 1.0..10.0f64) {
        prop_assert!(SkewSystem::new(ToralAutomorphism::cat_map(), kappa, 0.0, 0.0).is_err());
    }

    #[test]
    fn leaf_graph_respects_lipschitz_bound(i in 0usize..89, fu in unit(), fs in unit(), th in unit(), a in unit(), b in unit()) {
        let sys = coupled();
        let p = part();
        let r = p.rect(i);
        let x = SkewPoint::new(p.point_at(i, Chart { u: fu * r.l_u, s: fs * r.l_s }), th);
        let leaf = sys.leaf_segment(p, i, &x).unwrap();
        let (ua, ub) = (a * r.l_u, b * r.l_u);
        let gap = circle_dist(leaf.theta_at_u(ua), leaf.theta_at_u(ub));
        let trunc = sys.truncation_bound(r.l_u, sys.holonomy_depth());
        prop_assert!(gap <= sys.leaf_lipschitz() * (ua - ub).abs() + 2.0 * trunc + 1e-12);
    }

    #[test]
    fn log_cs_norm_is_lipschitz(a in unit(), b in unit()) {
        let sys = coupled();
        let gap = (log_cs_norm(&sys, a) - log_cs_norm(&sys, b)).abs();
        prop_assert!(gap <= log_cs_norm_lipschitz(&sys) * circle_dist(a, b) + 1e-12);
    }

    #[test]
    fn sampled_seminorm_never_exceeds_the_bound(idx in 0usize..6, seed in 0u64..1000) {
        let obs = Observable::catalog().swap_remove(idx % Observable::catalog().len());
        prop_assert!(sampled_seminorm(&obs, 200, seed) <= obs.holder_seminorm() * (1.0 + 1e-12));
    }

    #[test]
    fn cat_correlations_are_exact(k1 in -3i64..=3, k2 in -3i64..=3, l1 in -3i64..=3, l2 in -3i64..=3, n in 0u32..6) {
        prop_assume!((k1, k2) != (0, 0) && (l1, l2) != (0, 0));
        let a = ToralAutomorphism::cat_map();
        let c = cat_cos_correlation(&a, [k1, k2], [l1, l2], n).unwrap();
        // (A^T)^n k = ±l gives 1/2, anything else 0.
        let t = a.power(n as i64).unwrap();
        let kn = [t[0][0] * k1 + t[1][0] * k2, t[0][1] * k1 + t[1][1] * k2];
        let hit = kn == [l1, l2] || kn == [-l1, -l2];
        prop_assert_eq!(c, if hit { 0.5 } else { 0.0 });
    }
}

#[test]
fn subcylinder_weights_sum_to_one() {
    let p = part();
    let lam = p.auto().lambda_u();
    for i in 0..p.len() {
        let mut total = 0.0;
        for t in p.successors(i) {
            let w = p.weight(i, t.to).unwrap();
            assert!((w - p.rect(t.to).l_u / (lam * p.rect(i).l_u)).abs() < 1e-10);
            total += w;
        }
        assert!((total - 1.0).abs() < 1e-10, "rect {i}: {total}");
    }
}
