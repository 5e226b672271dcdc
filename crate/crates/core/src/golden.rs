//! Worked examples with known answers, rerun by `stopcal examples`.

use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::birthdeath::{bd_residual_exact, calibrate_bd, calibrate_bd_exact, golden_example, golden_example_exact};
use crate::conventions::{uniform_grid, Tolerances};
use crate::diffusion::{SpeedMeasure, XiKind};
use crate::error::Result;
use crate::forward::{solve_forward, ForwardOptions, Process};
use crate::inverse::{invert, recover_measure, InverseOptions, ThetaEnd, Uniqueness, Verdict};
use crate::mc::{estimate_ctmc_laplace, estimate_laplace, SimConfig};
use crate::payoffs::{builtin, PayoffFamily};
use crate::uconvex::{Axis, GridFunction};

#[derive(Debug, Clone, Serialize)]
pub struct ExampleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ExamplesOptions {
    pub seed: u64,
    /// Fewer Monte Carlo paths and a coarser step.
    pub quick: bool,
}

impl Default for ExamplesOptions {
    fn default() -> Self {
        ExamplesOptions { seed: 42, quick: false }
    }
}

type Outcome = Result<(bool, String)>;

fn family(name: &str) -> Result<PayoffFamily> {
    builtin(name, &json!({}))
}

fn bm_measure(end: f64, step: f64) -> Result<SpeedMeasure> {
    SpeedMeasure::from_density(GridFunction::from_fn(uniform_grid(0.0, end, step)?, Axis::X, |_| 1.0)?)
}

fn bm_v(t: f64) -> f64 {
    t * t.atanh() + 0.5 * (1.0 - t * t).ln()
}

fn birth_death() -> Outcome {
    let (t, v) = golden_example_exact(11);
    let half = num_rational::BigRational::new(1.into(), 2.into());
    let c = calibrate_bd_exact(&t, &v, &half)?;
    let f = calibrate_bd(&golden_example(11), 0.5)?;
    let states = f.states.iter().enumerate().all(|(n, x)| (x - n as f64).abs() < 1e-9);
    let phi = c.phi.iter().enumerate().all(|(n, p)| *p == num_rational::BigRational::from_integer(((1i64 << (n + 1)) - 1).into()));
    let lam = (1..f.lambda.len()).all(|n| {
        let want = 2.0 * (1.0 - 0.5f64.powi(n as i32 + 1));
        ((f.lambda[n] - want) / want).abs() < 1e-9
    });
    let p = f.p[1..].iter().all(|p| *p == 0.5);
    let res = num_traits::Zero::is_zero(&bd_residual_exact(&c));
    Ok((states && phi && lam && p && res, format!("states {states}, phi exact {phi}, lambda {lam}, p {p}, residual zero {res}")))
}

fn forward_bm() -> Outcome {
    let m = bm_measure(10.0, 1e-3)?;
    let th = uniform_grid(0.0, 0.9, 0.005)?;
    let sol = solve_forward(Process::Measure(&m), &family("linear")?, 0.5, &th, &ForwardOptions::default())?;
    let err = th.iter().zip(&sol.v).map(|(t, v)| (v - bm_v(*t)).abs()).fold(0.0, f64::max);
    let xerr = th.iter().zip(&sol.x_star).map(|(t, x)| (x.unwrap_or(f64::INFINITY) - t.atanh()).abs()).fold(0.0, f64::max);
    Ok((err < 1e-3 && xerr <= 2e-3 + 1e-12, format!("sup |v - v_exact| = {err:.2e}, sup |x* - atanh| = {xerr:.2e}")))
}

fn full_calc_v(t: f64) -> f64 {
    let x = ((1.0 + t * t).sqrt() - 1.0) / t;
    t * x + (1.0 - x * x).ln()
}

fn forward_full_calc() -> Outcome {
    let rho = 0.5;
    let d = GridFunction::from_fn(uniform_grid(0.0, 0.9999, 1e-4)?, Axis::X, |x| {
        (1.0 + 3.0 * x * x) / (rho * (1.0 - x * x).powi(2))
    })?;
    let m = SpeedMeasure::new(d, vec![], 1.0, XiKind::Natural, 0.0)?;
    let th = uniform_grid(0.2, 5.0, 0.01)?;
    let sol = solve_forward(Process::Measure(&m), &family("linear")?, rho, &th, &ForwardOptions::default())?;
    let err = th.iter().zip(&sol.v).map(|(t, v)| (v - full_calc_v(*t)).abs()).fold(0.0, f64::max);
    let k = th.iter().position(|t| (t - 1.0).abs() < 1e-9).unwrap_or(0);
    let spot = sol.v[k];
    Ok((err < 2e-3 && (spot - 0.225988).abs() < 2e-3, format!("sup error {err:.2e}, v(1) = {spot:.6}")))
}

fn inverse_bm() -> Outcome {
    let m = bm_measure(10.0, 1e-3)?;
    let p = family("linear")?;
    let th = uniform_grid(0.0, 0.99, 0.01)?;
    let sol = solve_forward(Process::Measure(&m), &p, 0.5, &th, &ForwardOptions::default())?;
    let r = invert(&sol.v_function()?, &p, 0.5, &uniform_grid(0.0, 3.0, 1e-3)?, &InverseOptions::default())?;
    if r.verdict != Verdict::Consistent {
        return Ok((false, format!("inconsistent: {:?}", r.reason)));
    }
    let rec = recover_measure(&r, 0.5, &Tolerances::default())?;
    let dev = rec
        .density
        .grid()
        .iter()
        .zip(rec.density.values())
        .filter(|(x, _)| (0.1..=2.0).contains(*x))
        .map(|(_, d)| (d - 1.0).abs())
        .fold(0.0, f64::max);
    let ok = dev < 1e-2 && rec.atoms.is_empty() && r.uniqueness_covered == Some(Uniqueness::Unique);
    Ok((ok, format!("density dev {dev:.2e}, atoms {}, covered {:?}", rec.atoms.len(), r.uniqueness_covered)))
}

fn sticky() -> Outcome {
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
    let x = uniform_grid(0.0, 2.0, 1e-3)?;
    let r = invert(&v, &family("linear")?, rho, &x, &InverseOptions::default())?;
    if r.verdict != Verdict::Consistent {
        return Ok((false, format!("inconsistent: {:?}", r.reason)));
    }
    let m = recover_measure(&r, rho, &Tolerances::default())?;
    let ok = m.atoms.len() == 1 && (m.atoms[0].x - 1.0).abs() <= 1e-3 + 1e-12 && (m.atoms[0].mass - 1.0).abs() < 0.05;
    let a = m.atoms.first().map(|a| format!("atom at {:.4} mass {:.4}", a.x, a.mass)).unwrap_or_default();
    Ok((ok, format!("{} atoms; {a}", m.atoms.len())))
}

fn rejection() -> Outcome {
    let v = GridFunction::from_fn(uniform_grid(1.0, 2.0, 1e-3)?, Axis::Theta, |s| -0.5 - s.ln())?;
    let r = invert(&v, &family("inverse-quadratic")?, 0.5, &uniform_grid(0.0, 3.0, 1e-3)?, &InverseOptions::default())?;
    let c = &r.conjugate;
    let err = c.x.iter().zip(&c.vg).map(|(x, g)| (g - (1.0 + x).ln() / 2.0).abs()).fold(0.0, f64::max);
    let ok = r.verdict == Verdict::Inconsistent && r.reason.as_deref() == Some("e^{v^g} non-convex") && err < 1e-6;
    Ok((ok, format!("reason {:?}, sup |v^g - log(1+x)/2| = {err:.1e}", r.reason)))
}

fn left_extension() -> Outcome {
    let v = GridFunction::from_fn(uniform_grid(1.0001, 1.9999, 1e-4)?, Axis::Theta, |s| {
        (s / 2.0) * s.ln() + ((2.0 - s) / 2.0) * (2.0 - s).ln() - 2f64.ln()
    })?;
    let o = InverseOptions { lower: ThetaEnd::Open(1.0), upper: ThetaEnd::Open(2.0), ..Default::default() };
    let r = invert(&v, &family("power")?, 0.5, &uniform_grid(0.0, 5.0, 1e-3)?, &o)?;
    let best = r.witnesses.iter().map(|w| w.reproduction_error).fold(f64::INFINITY, f64::min);
    let ok = r.uniqueness == Some(Uniqueness::LeftExtensionFamily) && best <= 1e-3;
    Ok((ok, format!("uniqueness {:?}, best witness reproduction {best:.1e}", r.uniqueness)))
}

/// `log V` for `G = xθ/(x+θ)` under reflecting BM with ρ = 1/2.
pub fn ratio_log_value(th: f64) -> f64 {
    // threshold solves x² tanh x = θ(1 - x tanh x)
    let f = |x: f64| x * x * x.tanh() - th * (1.0 - x * x.tanh());
    let (mut lo, mut hi) = (0.0f64, 1.2f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let xs = 0.5 * (lo + hi);
    (th * xs / (th + xs)).ln() - xs.cosh().ln()
}

fn right_extension() -> Outcome {
    let t: Vec<f64> = (0..=1400).map(|i| 10f64.powf(-9.0 + 14.0 * i as f64 / 1400.0)).collect();
    let v = GridFunction::from_fn(t, Axis::Theta, ratio_log_value)?;
    let o = InverseOptions { upper: ThetaEnd::Unbounded, ..Default::default() };
    let r = invert(&v, &family("ratio")?, 0.5, &uniform_grid(0.0, 2.0, 1e-3)?, &o)?;
    let ok = r.uniqueness == Some(Uniqueness::RightExtensionFamily) && (r.x_plus - 1.19968).abs() <= 1e-4;
    Ok((ok, format!("uniqueness {:?}, x_+ = {:.6}", r.uniqueness, r.x_plus)))
}

fn g_section() -> Outcome {
    let v = GridFunction::from_fn(uniform_grid(0.0, 2.0, 0.01)?, Axis::Theta, |s| {
        if s <= 1.0 {
            s * s
        } else {
            1.5 * s * s - 0.5
        }
    })?;
    let o = InverseOptions { upper: ThetaEnd::Unbounded, ..Default::default() };
    let r = invert(&v, &family("linear")?, 0.5, &uniform_grid(0.0, 6.0, 1e-3)?, &o)?;
    let e = std::f64::consts::E;
    let err = r
        .witnesses
        .iter()
        .find(|w| w.family == Uniqueness::GSectionFamily)
        .map(|w| {
            w.phi
                .grid()
                .iter()
                .zip(&w.phi.psi)
                .filter(|(x, _)| **x > 2.0 && **x < 3.0)
                .map(|(x, y)| (y - ((e * e - e) * x + 3.0 * e - 2.0 * e * e).ln()).abs())
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);
    let ok = r.uniqueness == Some(Uniqueness::GSectionFamily) && err < 1e-6;
    Ok((ok, format!("uniqueness {:?}, branch error {err:.1e}", r.uniqueness)))
}

fn mc_bm(o: &ExamplesOptions) -> Outcome {
    let m = bm_measure(3.0, 0.01)?;
    let cfg = sim(o);
    let e = estimate_laplace(&m, 0.5, 1.0, &cfg)?;
    let want = 1.0 / 1f64.cosh();
    Ok((e.within(want, 3.0), format!("{:.5} ± {:.5} vs {want:.6}", e.mean, e.stderr)))
}

fn mc_chain(o: &ExamplesOptions) -> Outcome {
    let c = calibrate_bd(&golden_example(11), 0.5)?;
    let e = estimate_ctmc_laplace(&c, 0.5, 3, &sim(o))?;
    Ok((e.within(1.0 / 15.0, 3.0), format!("{:.5} ± {:.5} vs {:.6}", e.mean, e.stderr, 1.0 / 15.0)))
}

fn sim(o: &ExamplesOptions) -> SimConfig {
    if o.quick {
        SimConfig { seed: o.seed, paths: 2000, dt: 4e-4, ..Default::default() }
    } else {
        SimConfig { seed: o.seed, ..Default::default() }
    }
}

/// Runs every example in a fixed order.
pub fn run_examples(o: &ExamplesOptions) -> Vec<ExampleCheck> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("birth-death chain", Box::new(birth_death)),
        ("forward reflecting BM", Box::new(forward_bm)),
        ("forward full calculation", Box::new(forward_full_calc)),
        ("inverse BM recovery", Box::new(inverse_bm)),
        ("sticky point", Box::new(sticky)),
        ("rejection", Box::new(rejection)),
        ("left extension (powers)", Box::new(left_extension)),
        ("right extension (ratio)", Box::new(right_extension)),
        ("g-section", Box::new(g_section)),
        ("Monte Carlo BM", Box::new(move || mc_bm(o))),
        ("Monte Carlo chain", Box::new(move || mc_chain(o))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            ExampleCheck { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}
