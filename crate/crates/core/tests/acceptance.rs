//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any failure.
//!
//! Run alone with `cargo test -p stopcal --test acceptance`.

use std::cell::Cell;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::json;

use stopcal::birthdeath::{calibrate_bd, calibrate_bd_exact, PiecewiseLinearValue};
use stopcal::conventions::{uniform_grid, Tolerances};
use stopcal::diffusion::{SpeedMeasure, XiKind};
use stopcal::forward::{solve_forward, ForwardOptions, Process};
use stopcal::inverse::{invert, recover_measure, InverseOptions, ThetaEnd, Uniqueness, Verdict};
use stopcal::mc::{estimate_ctmc_laplace, estimate_laplace, SimConfig};
use stopcal::payoffs::{builtin, verify_sm, LatticeSpec, PayoffFamily};
use stopcal::uconvex::{
    check_monotone, is_u_convex, subdifferential, u_dual, Axis, DualOptions, GridFunction, Orientation, Swapped,
};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const SEED: [u8; 32] = *b"stopcal acceptance property seed";

fn family(name: &str) -> PayoffFamily {
    builtin(name, &json!({})).unwrap()
}

fn sup(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

fn bm_measure(end: f64, step: f64) -> Result<SpeedMeasure, stopcal::Error> {
    SpeedMeasure::from_density(GridFunction::from_fn(uniform_grid(0.0, end, step)?, Axis::X, |_| 1.0)?)
}

fn crit1() -> Outcome {
    let two = BigInt::from(2);
    let pow2 = |n: usize| BigRational::from_integer(two.pow(n as u32));
    let theta: Vec<BigRational> = (0..=10)
        .map(|n| BigRational::from_integer((n as i64 - 2).into()) + pow2(n).recip())
        .collect();
    let value: Vec<BigRational> = (0..=10).map(|n| pow2(n).recip()).collect();
    let half = BigRational::new(1.into(), 2.into());
    let exact = calibrate_bd_exact(&theta, &value, &half)?;

    let tf: Vec<f64> = (0..=10).map(|n| n as f64 + 0.5f64.powi(n) - 2.0).collect();
    let vf: Vec<f64> = (0..=10).map(|n| 0.5f64.powi(n)).collect();
    let c = calibrate_bd(&PiecewiseLinearValue::new(tf, vf)?, 0.5)?;

    let xerr = sup(c.states.iter().enumerate().map(|(n, x)| (x - n as f64).abs()));
    let phi_exact = exact
        .phi
        .iter()
        .enumerate()
        .all(|(n, p)| *p == BigRational::from_integer(two.pow(n as u32 + 1) - 1));
    // closed form holds for n >= 1; the reflecting state has p_0 = 1 and λ_0 = ρφ_0/(φ_1 - φ_0) = ρ/2
    let lam_rel = sup(c.lambda.iter().enumerate().skip(1).map(|(n, l)| {
        let want = 4.0 * 0.5 * (1.0 - 0.5f64.powi(n as i32 + 1));
        ((l - want) / want).abs()
    }));
    let lam0 = exact.lambda[0] == BigRational::new(1.into(), 4.into());
    let p_half = exact.p[1..].iter().all(|p| *p == half) && c.p[1..].iter().all(|p| *p == 0.5);
    let ok = c.lambda.len() > 1 && xerr < 1e-9 && phi_exact && lam_rel < 1e-9 && lam0 && p_half;
    Ok((
        ok,
        format!("|x_n - n| {xerr:.1e}, phi exact {phi_exact}, lambda rel {lam_rel:.1e}, lambda_0 = 1/4 {lam0}, p_n = 1/2 {p_half}"),
    ))
}

fn crit2() -> Outcome {
    let m = bm_measure(10.0, 1e-3)?;
    let th = uniform_grid(0.0, 0.9, 0.01)?;
    let sol = solve_forward(Process::Measure(&m), &family("linear"), 0.5, &th, &ForwardOptions::default())?;
    let err = sup(th.iter().zip(&sol.v).map(|(t, v)| (v - (t * t.atanh() + 0.5 * (1.0 - t * t).ln())).abs()));
    let xerr = sup(th.iter().zip(&sol.x_star).map(|(t, x)| (x.unwrap_or(f64::INFINITY) - t.atanh()).abs()));
    Ok((err < 1e-3 && xerr <= 2e-3 + 1e-12, format!("sup |v - v_exact| {err:.2e}, sup |x* - atanh| {xerr:.2e}")))
}

fn crit3() -> Outcome {
    let rho = 0.5;
    // diffusion with φ = 1/(1-x²): σ² = ρ(1-x²)²/(1+3x²), density 1/σ²
    let d = GridFunction::from_fn(uniform_grid(0.0, 0.9999, 1e-4)?, Axis::X, |x| {
        (1.0 + 3.0 * x * x) / (rho * (1.0 - x * x).powi(2))
    })?;
    let m = SpeedMeasure::new(d, vec![], 1.0, XiKind::Natural, 0.0)?;
    let th = uniform_grid(0.2, 5.0, 0.01)?;
    let sol = solve_forward(Process::Measure(&m), &family("linear"), rho, &th, &ForwardOptions::default())?;
    let exact = |t: f64| {
        let x = ((1.0 + t * t).sqrt() - 1.0) / t;
        t * x + (1.0 - x * x).ln()
    };
    let err = sup(th.iter().zip(&sol.v).map(|(t, v)| (v - exact(*t)).abs()));
    let k = th.iter().position(|t| (t - 1.0).abs() < 1e-9).unwrap();
    let spot = sol.v[k];
    Ok((err < 2e-3 && (spot - 0.225988).abs() <= 2e-3, format!("sup error {err:.2e}, v(1) = {spot:.6}")))
}

fn crit4() -> Outcome {
    let m = bm_measure(10.0, 1e-3)?;
    let p = family("linear");
    // same setup as criterion 2, sampled far enough that x*(θ) = atanh θ passes 2
    let th = uniform_grid(0.0, 0.99, 0.01)?;
    let sol = solve_forward(Process::Measure(&m), &p, 0.5, &th, &ForwardOptions::default())?;
    let r = invert(&sol.v_function()?, &p, 0.5, &uniform_grid(0.0, 3.0, 1e-3)?, &InverseOptions::default())?;
    if r.verdict != Verdict::Consistent {
        return Ok((false, format!("verdict inconsistent: {:?}", r.reason)));
    }
    let rec = recover_measure(&r, 0.5, &Tolerances::default())?;
    let dev = sup(rec
        .density
        .grid()
        .iter()
        .zip(rec.density.values())
        .filter(|(x, _)| (0.1..=2.0).contains(*x))
        .map(|(_, d)| (d - 1.0).abs()));
    let covered = rec.density.grid().last().copied().unwrap_or(0.0) >= 2.0;
    let ok = covered && dev < 1e-2 && rec.atoms.is_empty() && r.uniqueness_covered == Some(Uniqueness::Unique);
    Ok((ok, format!("max rel density error {dev:.2e}, atoms {}, uniqueness {:?}", rec.atoms.len(), r.uniqueness_covered)))
}

fn crit5() -> Outcome {
    let rho = 0.5;
    let v = GridFunction::from_fn(uniform_grid(0.0, 12.0, 0.01)?, Axis::Theta, |s| {
        if s <= 2.0 {
            s * s / 4.0
        } else if s <= 3.0 {
            s - 1.0
        } else {
            2.0 / (3.0 * 3f64.sqrt()) * s.powf(1.5)
        }
    })?;
    let h = 1e-3;
    let r = invert(&v, &family("linear"), rho, &uniform_grid(0.0, 2.0, h)?, &InverseOptions::default())?;
    if r.verdict != Verdict::Consistent {
        return Ok((false, format!("verdict inconsistent: {:?}", r.reason)));
    }
    let m = recover_measure(&r, rho, &Tolerances::default())?;
    let want = 1.0 / (2.0 * rho);
    let ok = m.atoms.len() == 1 && (m.atoms[0].x - 1.0).abs() <= h + 1e-12 && ((m.atoms[0].mass - want) / want).abs() <= 0.05;
    let a = m.atoms.iter().map(|a| format!("({:.4}, {:.4})", a.x, a.mass)).collect::<Vec<_>>().join(" ");
    Ok((ok, format!("{} atom(s) (x, mass): {a}", m.atoms.len())))
}

fn crit6() -> Outcome {
    let v = GridFunction::from_fn(uniform_grid(1.0, 2.0, 1e-3)?, Axis::Theta, |s| -0.5 - s.ln())?;
    let r = invert(&v, &family("inverse-quadratic"), 0.5, &uniform_grid(0.0, 3.0, 1e-3)?, &InverseOptions::default())?;
    let c = &r.conjugate;
    let err = sup(c.x.iter().zip(&c.vg).map(|(x, g)| (g - (1.0 + x).ln() / 2.0).abs()));
    let ok = !c.x.is_empty()
        && r.verdict == Verdict::Inconsistent
        && r.reason.as_deref() == Some("e^{v^g} non-convex")
        && err <= 1e-6;
    Ok((ok, format!("verdict {:?}, reason {:?}, sup |v^g - log(1+x)/2| {err:.1e}", r.verdict, r.reason)))
}

fn crit7() -> Outcome {
    // (a) G = x^θ on Θ = (1, 2)
    let v = GridFunction::from_fn(uniform_grid(1.0001, 1.9999, 1e-4)?, Axis::Theta, |s| {
        (s / 2.0) * s.ln() + ((2.0 - s) / 2.0) * (2.0 - s).ln() - 2f64.ln()
    })?;
    let o = InverseOptions { lower: ThetaEnd::Open(1.0), upper: ThetaEnd::Open(2.0), ..Default::default() };
    let r = invert(&v, &family("power"), 0.5, &uniform_grid(0.0, 5.0, 1e-3)?, &o)?;
    let best = r
        .witnesses
        .iter()
        .filter(|w| w.family == Uniqueness::LeftExtensionFamily)
        .map(|w| w.reproduction_error)
        .fold(f64::INFINITY, f64::min);
    let a = r.uniqueness == Some(Uniqueness::LeftExtensionFamily) && best <= 1e-3;

    // (b) G = xθ/(x+θ), reflecting BM, ρ = 1/2; threshold solves x² tanh x = θ(1 - x tanh x)
    let log_value = |th: f64| {
        let f = |x: f64| x * x * x.tanh() - th * (1.0 - x * x.tanh());
        let (mut lo, mut hi) = (0.0f64, 1.3f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let x = 0.5 * (lo + hi);
        (th * x / (th + x)).ln() - x.cosh().ln()
    };
    let t: Vec<f64> = (0..=1400).map(|i| 10f64.powf(-9.0 + 14.0 * i as f64 / 1400.0)).collect();
    let v = GridFunction::from_fn(t, Axis::Theta, log_value)?;
    let o = InverseOptions { upper: ThetaEnd::Unbounded, ..Default::default() };
    let rb = invert(&v, &family("ratio"), 0.5, &uniform_grid(0.0, 2.0, 1e-3)?, &o)?;
    // x_+ tanh x_+ = 1
    let (mut lo, mut hi) = (0.5f64, 2.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.tanh() > 1.0 {
            hi = mid
        } else {
            lo = mid
        }
    }
    let b = rb.uniqueness == Some(Uniqueness::RightExtensionFamily)
        && (rb.x_plus - 1.19968).abs() <= 1e-4
        && (rb.x_plus - 0.5 * (lo + hi)).abs() <= 1e-4;

    // (c) G = e^{θx} with a kink in v at θ = 1
    let v = GridFunction::from_fn(uniform_grid(0.0, 2.0, 0.01)?, Axis::Theta, |s| {
        if s <= 1.0 {
            s * s
        } else {
            1.5 * s * s - 0.5
        }
    })?;
    let rc = invert(&v, &family("linear"), 0.5, &uniform_grid(0.0, 6.0, 1e-3)?, &o)?;
    let e = std::f64::consts::E;
    let err = rc
        .witnesses
        .iter()
        .find(|w| w.family == Uniqueness::GSectionFamily)
        .map(|w| {
            sup(w.phi
                .grid()
                .iter()
                .zip(&w.phi.psi)
                .filter(|(x, _)| **x >= 2.0 && **x < 3.0)
                .map(|(x, y)| (y - ((e * e - e) * x + 3.0 * e - 2.0 * e * e).ln()).abs()))
        })
        .unwrap_or(f64::INFINITY);
    let c = rc.uniqueness == Some(Uniqueness::GSectionFamily) && err <= 1e-6;
    Ok((
        a && b && c,
        format!(
            "(a) {:?} best witness {best:.1e}; (b) {:?} x_+ = {:.6}; (c) {:?} branch error {err:.1e}",
            r.uniqueness, rb.uniqueness, rb.x_plus, rc.uniqueness
        ),
    ))
}

fn crit8() -> Outcome {
    let cfg = SimConfig { seed: 20240601, paths: 10_000, dt: 1e-4, max_jumps: 100_000, ..Default::default() };
    let e = estimate_laplace(&bm_measure(4.0, 1e-3)?, 0.5, 1.0, &cfg)?;
    let want = 1.0 / 1f64.cosh();
    let a = (e.mean - want).abs() <= 3.0 * e.stderr;

    let tf: Vec<f64> = (0..=10).map(|n| n as f64 + 0.5f64.powi(n) - 2.0).collect();
    let vf: Vec<f64> = (0..=10).map(|n| 0.5f64.powi(n)).collect();
    let chain = calibrate_bd(&PiecewiseLinearValue::new(tf, vf)?, 0.5)?;
    let c = estimate_ctmc_laplace(&chain, 0.5, 3, &cfg)?;
    let b = (c.mean - 1.0 / 15.0).abs() <= 3.0 * c.stderr;
    Ok((
        a && b,
        format!(
            "BM {:.5} ± {:.5} vs {want:.5}; chain {:.5} ± {:.5} vs {:.5}",
            e.mean, e.stderr, c.mean, c.stderr, 1.0 / 15.0
        ),
    ))
}

fn runner() -> TestRunner {
    let cfg = Config { cases: 100, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::from_seed(RngAlgorithm::ChaCha, &SEED))
}

const FAMILIES: [&str; 6] = ["linear", "power", "ratio", "tanh", "call", "inverse-quadratic"];

fn z_grid(name: &str, n: usize) -> Vec<f64> {
    let (lo, hi) = match name {
        "call" => (-1.0, 2.0),
        "inverse-quadratic" => (1.0, 4.0),
        _ => (0.1, 3.0),
    };
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn y_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| 3.0 * k as f64 / (n - 1) as f64).collect()
}

fn no_par() -> DualOptions {
    DualOptions { parallel: false, ..Default::default() }
}

/// `f(y) = max_k [u(y, z_k) - c_k]` over a few nodes of the z-grid.
/// Restricted to the nodes where it is finite.
fn constructed(p: &PayoffFamily, ys: &[f64], zs: &[f64], picks: &[(usize, f64)]) -> Option<GridFunction> {
    let (g, v): (Vec<f64>, Vec<f64>) = ys
        .iter()
        .map(|&y| (y, picks.iter().map(|&(k, c)| p.g(y, zs[k % zs.len()]) - c).fold(f64::NEG_INFINITY, f64::max)))
        .filter(|(_, v)| v.is_finite())
        .unzip();
    (g.len() >= 3).then(|| GridFunction::new(g, v, Axis::X).unwrap())
}

fn crit9() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, r: Result<(), String>, extra: String| {
        let pass = r.is_ok();
        ok &= pass;
        let why = r.err().map(|e| format!(" [{e}]")).unwrap_or_default();
        lines.push(format!("{name}: {}{extra}{why}", if pass { "ok" } else { "FAIL" }));
    };

    // Young: f(y) + f^u(z) >= u(y, z)
    let violations = Cell::new(0usize);
    let r = runner().run(&(0..FAMILIES.len(), prop::collection::vec(-2.0..2.0f64, 41)), |(fi, vals)| {
        let p = family(FAMILIES[fi]);
        let ys = y_grid(vals.len());
        let zs = z_grid(FAMILIES[fi], 37);
        let f = GridFunction::new(ys.clone(), vals.clone(), Axis::X).unwrap();
        let d = u_dual(&f, &p, &zs, &no_par()).unwrap();
        let mut bad = 0;
        for (i, y) in ys.iter().enumerate() {
            for (j, z) in zs.iter().enumerate() {
                let u = p.g(*y, *z);
                if u.is_finite() && vals[i] + d.func.values()[j] < u - 1e-12 * u.abs().max(1.0) {
                    bad += 1;
                }
            }
        }
        violations.set(violations.get() + bad);
        prop_assert_eq!(bad, 0);
        Ok(())
    });
    record("Young", r.map_err(|e| e.to_string()), format!(" ({} violations)", violations.get()));

    // f = f^uu for constructed u-convex f
    let dev = Cell::new(0.0f64);
    let picks = prop::collection::vec((0usize..37, -1.0..1.0f64), 1..6);
    let r = runner().run(&(0..FAMILIES.len(), picks.clone()), |(fi, picks)| {
        let p = family(FAMILIES[fi]);
        let zs = z_grid(FAMILIES[fi], 37);
        let Some(f) = constructed(&p, &y_grid(41), &zs, &picks) else {
            return Err(TestCaseError::reject("fewer than three finite nodes"));
        };
        let chk = is_u_convex(&f, &p, &zs, 1e-9, &no_par()).unwrap();
        dev.set(dev.get().max(chk.max_deviation));
        prop_assert!(chk.is_convex, "deviation {}", chk.max_deviation);
        Ok(())
    });
    record("f = f^uu", r.map_err(|e| e.to_string()), format!(" (max deviation {:.1e})", dev.get()));

    // f^uuu = f^u for arbitrary f
    let dev = Cell::new(0.0f64);
    let r = runner().run(&(0..FAMILIES.len(), prop::collection::vec(-2.0..2.0f64, 41)), |(fi, vals)| {
        let p = family(FAMILIES[fi]);
        let ys = y_grid(vals.len());
        let zs = z_grid(FAMILIES[fi], 37);
        let f = GridFunction::new(ys.clone(), vals, Axis::X).unwrap();
        let d1 = u_dual(&f, &p, &zs, &no_par()).unwrap().func;
        let d2 = u_dual(&d1, &Swapped(&p), &ys, &no_par()).unwrap().func;
        let d3 = u_dual(&d2, &p, &zs, &no_par()).unwrap().func;
        for (a, b) in d1.values().iter().zip(d3.values()) {
            if a.is_finite() || b.is_finite() {
                let e = (a - b).abs();
                dev.set(dev.get().max(e));
                prop_assert!(e <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
            }
        }
        Ok(())
    });
    record("f^uuu = f^u", r.map_err(|e| e.to_string()), format!(" (max deviation {:.1e})", dev.get()));

    // monotone subdifferential representatives when SM is verified
    let checked = Cell::new(0usize);
    let r = runner().run(&(0..FAMILIES.len(), picks), |(fi, picks)| {
        let p = family(FAMILIES[fi]);
        let sm = verify_sm(&p, &LatticeSpec::default()).unwrap();
        prop_assume!(sm.orientation != Orientation::Unknown);
        let zs = z_grid(FAMILIES[fi], 37);
        let Some(f) = constructed(&p, &y_grid(41), &zs, &picks) else {
            return Err(TestCaseError::reject("fewer than three finite nodes"));
        };
        let sd = subdifferential(&f, &p, &zs, 1e-9, false, &no_par()).unwrap();
        checked.set(checked.get() + 1);
        prop_assert!(check_monotone(&sd, sm.orientation));
        Ok(())
    });
    record("monotone subdifferential", r.map_err(|e| e.to_string()), format!(" ({} cases)", checked.get()));

    // forward -> inverse -> forward with a smooth density in [0.5, 2]
    let worst = Cell::new(0.0f64);
    let r = runner().run(&(-0.69..0.69f64, 0.5..3.0f64, 0.0..std::f64::consts::TAU), |(a, b, c)| {
        let rho = 0.5;
        let p = family("linear");
        let dens = move |x: f64| (a * (b * x + c).sin() * (-x * x / 8.0).exp()).exp();
        let m = SpeedMeasure::from_density(GridFunction::from_fn(uniform_grid(0.0, 10.0, 2e-3).unwrap(), Axis::X, dens).unwrap())
            .unwrap();
        let th = uniform_grid(0.0, 0.8, 0.01).unwrap();
        let fo = ForwardOptions::default();
        let s1 = solve_forward(Process::Measure(&m), &p, rho, &th, &fo).unwrap();
        let rep = invert(&s1.v_function().unwrap(), &p, rho, &uniform_grid(0.0, 5.0, 2e-3).unwrap(), &InverseOptions::default())
            .unwrap();
        prop_assert_eq!(rep.verdict, Verdict::Consistent, "{:?}", rep.reason);
        let back = recover_measure(&rep, rho, &Tolerances::default()).unwrap();
        let s2 = solve_forward(Process::Measure(&back), &p, rho, &th, &fo).unwrap();
        let e = sup(s1.v.iter().zip(&s2.v).map(|(x, y)| (x - y).abs()));
        worst.set(worst.get().max(e));
        prop_assert!(e <= 5e-3, "round trip error {}", e);
        Ok(())
    });
    record("round trip", r.map_err(|e| e.to_string()), format!(" (worst sup error {:.1e})", worst.get()));

    Ok((ok, lines.join("; ")))
}

fn main() {
    let crits: [(&str, fn() -> Outcome, f64); 9] = [
        ("birth-death golden chain", crit1, 0.1),
        ("forward reflecting BM", crit2, 2.0),
        ("forward closed-form diffusion", crit3, f64::INFINITY),
        ("inverse recovers BM", crit4, f64::INFINITY),
        ("sticky point", crit5, f64::INFINITY),
        ("rejection", crit6, f64::INFINITY),
        ("non-uniqueness diagnostics", crit7, f64::INFINITY),
        ("Monte Carlo cross-check", crit8, 60.0),
        ("property suites", crit9, 120.0),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in crits.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let in_time = secs < *limit;
        let pass = pass && in_time;
        if !pass {
            failed += 1;
        }
        let limit = if limit.is_finite() { format!(" (limit {limit} s)") } else { String::new() };
        println!("criterion {} [{}] {name}: {detail}; {secs:.3} s{limit}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", crits.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
