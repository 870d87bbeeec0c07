//! Desk-scale acceptance run. Prints one `criterion k: PASS|FAIL` line per
//! criterion on stderr (uncaptured), then asserts that everything passed
//! except criteria listed in `KNOWN_UNATTAINABLE`.

use skewlab::coupling::{
    envelope_fraction, estimate_profile, first_stage, run_coupling, support_plaques, tail_fit, tau_ks, CouplingError,
    CouplingSetup, ProfileOptions, Side, DEFAULT_HORIZON,
};
use skewlab::gibbs::{estimate_mu, estimate_mu_restricted, integrate, StdObservable};
use skewlab::hitting::{
    check_holonomy_invariance, estimate_transverse, first_hit_depth, rate_fit, series_exact, series_mc, widest_partner,
};
use skewlab::numerics::{ks_uniform, normal_cdf};
use skewlab::partition::{Chart, MarkovPartition};
use skewlab::reference::{check_constant_jacobian, check_cs_invariance, ReferenceMeasure};
use skewlab::runner::{self, Experiment, ExperimentConfig, Fixture};
use skewlab::skew::{CrossSection, SkewPoint, SkewSystem};
use skewlab::stats::{
    birkhoff_tail, cat_cos_correlation, correlation_decay, cumulant_bound, for_each_chunk, Observable, Potential,
};
use std::io::Write;
use std::time::Instant;

/// The base correlation of `cos 2πx₁` under the cat map vanishes identically
/// for `n ≥ 1`, so no exponential fit exists.
const KNOWN_UNATTAINABLE: [usize; 1] = [9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(k: usize, o: &Outcome, secs: f64) {
    let mark = if o.pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {k}: {mark} ({secs:.1}s) {}\n", o.detail);
    let mut err = std::io::stderr();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
}

fn coupled() -> SkewSystem {
    Fixture::Coupled.system().unwrap()
}

fn point(part: &MarkovPartition, rect: usize, fu: f64, fs: f64, theta: f64) -> SkewPoint {
    let r = part.rect(rect);
    SkewPoint::new(part.point_at(rect, Chart { u: fu * r.l_u, s: fs * r.l_s }), theta)
}

fn c1(part: &MarkovPartition) -> Outcome {
    let r = part.verify_markov(100_000, 1);
    let perron = part.perron_eigenvalue();
    let lam = (3.0 + 5f64.sqrt()) / 2.0;
    Outcome {
        pass: r.total() == 0 && (perron - lam).abs() < 1e-9,
        detail: format!("violations {} over 1e5, |perron - lambda_u| = {:.2e}", r.total(), (perron - lam).abs()),
    }
}

fn c2(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let mut spread: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..part.len() {
        for t in part.successors(i) {
            spread = spread.max(check_constant_jacobian(part, i, t.to, 20, 2).unwrap().spread());
            pairs += 1;
        }
    }
    let x = point(part, 8, 0.3, 0.2, 0.1);
    let y = point(part, 8, 0.7, 0.9, 0.4);
    let ks = check_cs_invariance(sys, part, 8, &x, &y, 10_000, 2).unwrap();
    Outcome {
        pass: spread < 1e-10 && ks < 0.03,
        detail: format!("jacobian spread {spread:.2e} over {pairs} transitions, cs-invariance KS {ks:.4}"),
    }
}

fn c3(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let src = ReferenceMeasure::new(sys, part, 0, &point(part, 0, 0.5, 0.5, 0.0)).unwrap();
    let a = estimate_mu(sys, part, &src, 100_000, 100, 50, 3).unwrap();
    let b = estimate_mu(sys, part, &src, 100_000, 100, 50, 4).unwrap();
    let x1: Vec<f64> = a.particles.iter().map(|q| q.base.x1()).collect();
    let x2: Vec<f64> = a.particles.iter().map(|q| q.base.x2()).collect();
    let ks = ks_uniform(&x1, 0.0, 1.0).max(ks_uniform(&x2, 0.0, 1.0));
    let dev = a.rect_masses(part).iter().zip(part.rects()).map(|(m, r)| (m - r.area()).abs()).fold(0.0, f64::max);
    let set = StdObservable::standard_set(part);
    let mut worst: f64 = 0.0;
    let mut over3 = 0;
    for o in &set {
        let (ma, sa) = integrate(&a, |p| o.eval(part, p), 5);
        let (mb, sb) = integrate(&b, |p| o.eval(part, p), 6);
        let z = (ma - mb).abs() / (sa * sa + sb * sb).sqrt().max(1e-15);
        worst = worst.max(z);
        over3 += usize::from(z > 3.0);
    }
    // 3 sigma for the set as a whole: the two-sided level 2(1 - Phi(3)) split
    // over every observable.
    let level = 2.0 * (1.0 - normal_cdf(3.0)) / set.len() as f64;
    let (mut lo, mut hi) = (3.0, 10.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if 2.0 * (1.0 - normal_cdf(mid)) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Outcome {
        pass: ks < 0.02 && dev < 0.01 && worst < hi,
        detail: format!(
            "base KS {ks:.4}, max |mu(M_j) - vol| {dev:.4}, worst seed gap {worst:.2} sigma over {} observables \
             (set-wise 3 sigma threshold {hi:.2}; {over3} above 3 sigma individually)",
            set.len()
        ),
    }
}

fn c4(part: &MarkovPartition) -> Outcome {
    let phi = |q: &SkewPoint| Observable::cos_theta().eval(q);
    let section = CrossSection::at(part, 30, 0.5 * part.rect(30).l_u);
    let n0 = first_hit_depth(part, 4, 30, part.cylinder_cap()).unwrap();
    let exact_ns: Vec<usize> = (n0..=14).collect();

    let prod = Fixture::Product.system().unwrap();
    let ps = ReferenceMeasure::new(&prod, part, 4, &point(part, 4, 0.5, 1.0 / 3.0, 0.6)).unwrap();
    let pser = series_exact(&prod, part, &ps, &section, &[14], phi).unwrap();
    let prod_gap = (pser.averages[0] - 1.0).abs();

    let sys = coupled();
    let start = ReferenceMeasure::new(&sys, part, 4, &point(part, 4, 0.5, 1.0 / 3.0, 0.6)).unwrap();
    let mut series = series_exact(&sys, part, &start, &section, &exact_ns, phi).unwrap();
    let mc_ns: Vec<usize> = (10..=25).collect();
    let mc = series_mc(&sys, part, &start, &section, &mc_ns, 1_000_000, 7, phi).unwrap();
    let mut max_z: f64 = 0.0;
    for n in 10..=14 {
        let e = series.n_values.iter().position(|&m| m == n).unwrap();
        let k = mc.n_values.iter().position(|&m| m == n).unwrap();
        max_z = max_z.max((mc.averages[k] - series.averages[e]).abs() / mc.stderrs[k].max(1e-15));
    }
    series.extend_with(&mc);
    let m = estimate_mu_restricted(&sys, part, &start, 100_000, 149, 50, 8, |q| part.locate(&q.base).index == 30).unwrap();
    let (limit, limit_se) = estimate_transverse(&sys, part, &m, &section).unwrap().normalized_integral(phi);
    let fit = rate_fit(&series, limit, limit_se).unwrap();
    Outcome {
        pass: prod_gap < 0.01 && fit.slope < -0.05 && fit.r2 > 0.9 && max_z < 3.0,
        detail: format!(
            "product |avg - 1| {prod_gap:.2e}; coupled limit {limit:.4}±{limit_se:.1e}, slope {:.3}, r2 {:.3} on n {}..{}, exact/MC gap {max_z:.2} sigma",
            fit.slope, fit.r2, fit.n_first, fit.n_last
        ),
    }
}

fn c5(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let s1 = CrossSection::at(part, 30, 0.5 * part.rect(30).l_u);
    let (s2, _) = widest_partner(part, &s1, 1.0).unwrap();
    let (a, b) = (s1.rect, s2.rect);
    let src = ReferenceMeasure::new(sys, part, a, &point(part, a, 0.5, 0.5, 0.0)).unwrap();
    let m = estimate_mu_restricted(sys, part, &src, 100_000, 149, 50, 9, |q| {
        let i = part.locate(&q.base).index;
        i == a || i == b
    })
    .unwrap();
    let e1 = estimate_transverse(sys, part, &m, &s1).unwrap();
    let e2 = estimate_transverse(sys, part, &m, &s2).unwrap();
    let chk = check_holonomy_invariance(sys, part, &e1, &e2, 1.0, 10).unwrap();
    let mut wrong = e1.clone();
    wrong.scale *= 2.0;
    let fault = check_holonomy_invariance(sys, part, &wrong, &e2, 1.0, 10).unwrap();
    let detected = (fault.mean_ratio - 1.0).abs() > 0.5;
    Outcome {
        pass: chk.spread < 0.1 && detected,
        detail: format!(
            "rects {a}->{b}: ratio spread {:.3}, mean ratio {:.3}, KS {:.4}; wrong c_i gives mean ratio {:.3}",
            chk.spread, chk.mean_ratio, chk.ks, fault.mean_ratio
        ),
    }
}

fn c6(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let prof = estimate_profile(sys, part, &ProfileOptions::default(), 11).unwrap();
    let ys = support_plaques(sys, part, 2, 60, 12).unwrap();
    let setup = CouplingSetup::new(sys, part, ys[0].clone(), ys[1].clone(), prof, 12, DEFAULT_HORIZON).unwrap();
    let first = run_coupling(sys, part, &setup, Side::First, 10_000, 1).unwrap();
    let second = run_coupling(sys, part, &setup, Side::Second, 10_000, 2).unwrap();
    let fs = first_stage(&setup, &first);
    let tail = tail_fit(&first).unwrap();
    let env = envelope_fraction(&prof, &first);
    let ks = tau_ks(&setup, &first, &second);
    let stage_ok = fs.in_anchor > 0 && fs.fraction + 3.0 * fs.stderr >= 1.0 - prof.q1;
    Outcome {
        pass: stage_ok && tail.rho < 1.0 && tail.r2 > 0.9 && env >= 0.99 && ks < 0.03,
        detail: format!(
            "q1 {:.3}, first stage {}/{} matched ({:.3}±{:.3}), rho2 {:.3}, r2 {:.3}, envelope {:.4}, tau KS {:.4}",
            prof.q1, fs.matched, fs.in_anchor, fs.fraction, fs.stderr, tail.rho, tail.r2, env, ks
        ),
    }
}

fn c7(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let prof = estimate_profile(sys, part, &ProfileOptions::default(), 11).unwrap();
    let held_out = support_plaques(sys, part, 3, 60, 99).unwrap();
    let rows = cumulant_bound(sys, part, &prof, &Potential::LogCsNorm, &held_out, 12).unwrap();
    let worst = rows.iter().map(|r| r.lhs / r.bound).fold(0.0, f64::max);
    let last = rows.iter().filter(|r| r.n == 12).map(|r| r.lhs / r.bound).fold(0.0, f64::max);
    Outcome {
        pass: rows.iter().all(|r| r.holds) && rows.iter().any(|r| r.n == 12),
        detail: format!(
            "s1 {}, theta1 {:.3}, {} rows over 3 held-out plaques, worst lhs/bound {worst:.3}, at n=12 {last:.3}",
            prof.s1, prof.theta1, rows.len()
        ),
    }
}

fn c8(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let obs = Observable::cos_theta();
    let sums = for_each_chunk(sys, part, 200_000, 50, 4, |p| p.iter().map(|q| obs.eval(q)).sum::<f64>()).unwrap();
    let mean = sums.iter().sum::<f64>() / 200_000.0;
    let r = birkhoff_tail(sys, part, &obs, mean, 0.2, &[10, 20, 40, 80], 1_000_000, 50, 5).unwrap();
    let probs: Vec<String> = r.points.iter().map(|p| format!("{:.2e}", p.prob)).collect();
    let rate = r.fit.map(|f| f.rate).unwrap_or(f64::NAN);
    Outcome {
        pass: rate > 0.0 && r.trend_z < -1.645,
        detail: format!("tails [{}], c_alpha {rate:.4}, trend z {:.1}", probs.join(", "), r.trend_z),
    }
}

fn c9(sys: &SkewSystem, part: &MarkovPartition) -> Outcome {
    let ns: Vec<usize> = (0..=20).collect();
    let th = correlation_decay(sys, part, &Observable::cos_theta(), &Observable::cos_theta(), &ns, 1_000_000, 50, 3)
        .unwrap()
        .fit();
    let x1 = correlation_decay(sys, part, &Observable::cos_x1(), &Observable::cos_x1(), &ns, 1_000_000, 50, 3)
        .unwrap()
        .fit();
    let exact = cat_cos_correlation(sys.auto(), [1, 0], [1, 0], 1).unwrap();

    let prod = Fixture::Product.system().unwrap();
    let kappa = prod.kappa();
    let s0 = correlation_decay(&prod, part, &Observable::cos_theta(), &Observable::cos_theta(), &ns, 200_000, 50, 3).unwrap();
    let envelope_ok = (0..ns.len()).all(|k| s0.c[k].abs() <= 2.0 * (1.0 - kappa).powi(ns[k] as i32) + 3.0 * s0.se[k]);

    let th_ok = matches!(&th, Ok(f) if f.tau < 1.0 && f.r2 > 0.9);
    let x1_ok = matches!(&x1, Ok(f) if f.tau < 1.0 && f.r2 > 0.9);
    let show = |r: &Result<skewlab::stats::CorrelationFit, _>| match r {
        Ok(f) => format!("tau {:.3} r2 {:.3}", f.tau, f.r2),
        Err(e) => format!("no fit ({e})"),
    };
    Outcome {
        pass: th_ok && x1_ok && envelope_ok,
        detail: format!(
            "cos theta: {}; cos x1: {} [exact C_1 = {exact}]; delta=0 envelope {}",
            show(&th),
            show(&x1),
            if envelope_ok { "holds" } else { "violated" }
        ),
    }
}

fn c10(part: &MarkovPartition) -> Outcome {
    let iso = Fixture::IsometricControl.system().unwrap();
    let prof = estimate_profile(&iso, part, &ProfileOptions::default(), 11);
    let rejected = matches!(prof, Err(CouplingError::NotContractingEnough { .. }));
    let dir = std::env::temp_dir().join(format!("skewlab-acceptance-{}", std::process::id()));
    let cfg = ExperimentConfig::for_fixture(Fixture::IsometricControl);
    let run = runner::run(&cfg, Experiment::Coupling, 1, &dir);
    let no_output = run.is_err() && !dir.join("summary.json").exists();
    std::fs::remove_dir_all(&dir).ok();
    Outcome {
        pass: rejected && no_output,
        detail: format!(
            "estimate_profile: {}; coupling run: {}",
            match &prof {
                Ok(_) => "accepted".to_string(),
                Err(e) => e.to_string(),
            },
            if no_output { "refused, no fit written" } else { "produced output" }
        ),
    }
}

#[test]
fn acceptance() {
    let part = MarkovPartition::builtin_cat();
    let sys = coupled();
    let mut failed = vec![];
    for k in 1..=10 {
        let t = Instant::now();
        let o = match k {
            1 => c1(&part),
            2 => c2(&sys, &part),
            3 => c3(&sys, &part),
            4 => c4(&part),
            5 => c5(&sys, &part),
            6 => c6(&sys, &part),
            7 => c7(&sys, &part),
            8 => c8(&sys, &part),
            9 => c9(&sys, &part),
            _ => c10(&part),
        };
        report(k, &o, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(k);
        }
    }
    let unexpected: Vec<usize> = failed.iter().copied().filter(|k| !KNOWN_UNATTAINABLE.contains(k)).collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
