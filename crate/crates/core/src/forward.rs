//! Forward problem: diffusion and payoff family to the value curve
//! `V(θ) = exp(ψ^g(θ))`, thresholds `x*(θ)` and the tail beyond `θ_R`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conventions::{ext_f64, golden_max, Tolerances};
use crate::diffusion::{eigen_from_string, Eigenfunction, SpeedMeasure, XiKind};
use crate::error::{Error, Result};
use crate::payoffs::{verify_sm, LatticeSpec, PayoffFamily};
use crate::uconvex::{fmt_ext, u_dual, Axis, DualOptions, GridFunction, Orientation};

/// Process given either by its speed measure or directly by its eigenfunction.
#[derive(Debug, Clone, Copy)]
pub enum Process<'a> {
    Measure(&'a SpeedMeasure),
    Eigen(&'a Eigenfunction),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub tol: Tolerances,
    pub dual: DualOptions,
    /// Refine each attained maximizer by golden section on local quadratics of ψ.
    pub refine: bool,
    /// Fraction of the x-grid used for the tail limsup.
    pub tail_fraction: f64,
    /// Locate θ_R by bisection between the bracketing θ-nodes.
    pub bisect_theta_r: bool,
    /// Skip the lattice check of the cross partial.
    pub skip_sm_check: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            tol: Tolerances::default(),
            dual: DualOptions::default(),
            refine: false,
            tail_fraction: 0.1,
            bisect_theta_r: false,
            skip_sm_check: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSolution {
    pub theta: Vec<f64>,
    /// `v = log V`; `+inf` where the tail diverges.
    #[serde(with = "ext_f64::vec")]
    pub v: Vec<f64>,
    /// Smallest maximizer (the stopping threshold) where attained.
    pub x_star: Vec<Option<f64>>,
    /// Largest maximizer where attained.
    pub x_star_hi: Vec<Option<f64>>,
    pub attained: Vec<bool>,
    /// `θ_R` (or `θ_L` under reverse orientation); `None` means no empty node on the grid.
    pub theta_r: Option<f64>,
    /// `Σ(θ, ξ)` at the nodes with empty subdifferential.
    pub tail: Vec<Option<f64>>,
    /// Empty nodes form a suffix (prefix under reverse orientation).
    pub empty_contiguous: bool,
    pub orientation: Orientation,
    #[serde(with = "ext_f64")]
    pub xi: f64,
    /// Last x-node used.
    pub x_max: f64,
}

impl ForwardSolution {
    pub fn value(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.exp()).collect()
    }

    /// `v` on Θ as a grid function (values may turn `+inf` past θ_R).
    pub fn v_function(&self) -> Result<GridFunction> {
        GridFunction::new(self.theta.clone(), self.v.clone(), Axis::Theta)
    }

    /// CSV `theta,V,x_star,attained` (`x_star` is `inf` when not attained).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["theta", "V", "x_star", "attained"])?;
        for i in 0..self.theta.len() {
            wr.write_record([
                fmt_ext(self.theta[i]),
                fmt_ext(self.v[i].exp()),
                fmt_ext(self.x_star[i].unwrap_or(f64::INFINITY)),
                (self.attained[i] as u8).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn eigen_for(x: Process<'_>, rho: f64) -> Result<std::borrow::Cow<'_, Eigenfunction>> {
    Ok(match x {
        Process::Measure(m) => std::borrow::Cow::Owned(eigen_from_string(m, rho)?),
        Process::Eigen(e) => std::borrow::Cow::Borrowed(e),
    })
}

/// Maximize `g(·, θ) - ψ` over the two cells next to node `i`, with ψ
/// replaced on each cell by the quadratic through one of the two
/// three-node stencils covering it (the flatter one, so a kink is not spanned).
fn refine_at(x: &[f64], psi: &[f64], p: &PayoffFamily, theta: f64, i: usize) -> (f64, f64) {
    let n = x.len();
    let mut best = (x[i], p.g(x[i], theta) - psi[i]);
    let quad = |idx: [usize; 3]| {
        let [a, b, c] = idx;
        move |t: f64| {
            let la = (t - x[b]) * (t - x[c]) / ((x[a] - x[b]) * (x[a] - x[c]));
            let lb = (t - x[a]) * (t - x[c]) / ((x[b] - x[a]) * (x[b] - x[c]));
            let lc = (t - x[a]) * (t - x[b]) / ((x[c] - x[a]) * (x[c] - x[b]));
            psi[a] * la + psi[b] * lb + psi[c] * lc
        }
    };
    let curv = |a: usize| crate::conventions::second_diff_raw(x, psi, a + 1).abs();
    // stencil start for cell [j, j+1]: j-1 or j
    let pick = |j: usize| -> Option<usize> {
        let lo = (j >= 1).then(|| j - 1);
        let hi = (j + 2 < n).then_some(j);
        match (lo, hi) {
            (Some(a), Some(b)) => Some(if curv(a) <= curv(b) { a } else { b }),
            (a, b) => a.or(b),
        }
    };
    for j in [i.wrapping_sub(1), i] {
        if j + 1 >= n || j == usize::MAX {
            continue;
        }
        if let Some(a) = pick(j) {
            let q = quad([a, a + 1, a + 2]);
            let (t, f) = golden_max(x[j], x[j + 1], |t| p.g(t, theta) - q(t));
            if f > best.1 {
                best = (t, f);
            }
        }
    }
    best
}

/// Solve `v(θ) = sup_x [g(x, θ) - ψ(x)]` on `theta_grid`.
pub fn solve_forward(
    process: Process<'_>,
    p: &PayoffFamily,
    rho: f64,
    theta_grid: &[f64],
    opts: &ForwardOptions,
) -> Result<ForwardSolution> {
    opts.tol.validate()?;
    if theta_grid.is_empty() || theta_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("theta grid must be nonempty and increasing".into()));
    }
    crate::error::check_finite_or_inf(theta_grid, "theta grid")?;
    if let Some(t) = theta_grid.iter().find(|t| !p.theta_domain.contains(**t)) {
        return Err(Error::InvalidGrid(format!("theta = {t} outside the family's domain")));
    }
    let orientation = if opts.skip_sm_check {
        p.sm_orientation
    } else {
        verify_sm(p, &LatticeSpec::default())?.orientation
    };
    let eig = eigen_for(process, rho)?;
    let psi_f = eig.psi_function();
    let xs = psi_f.grid();
    let psi = psi_f.values();
    // φ may overflow to +inf before the grid ends
    let last = psi_f.finite_range().ok_or(Error::EmptyEffectiveDomain)?.1;
    if last == 0 {
        return Err(Error::InvalidGrid("eigenfunction finite at a single node".into()));
    }
    let closed_end =
        eig.xi_kind == XiKind::Absorbing && eig.xi.is_finite() && (xs[last] - eig.xi).abs() <= 1e-12 * eig.xi.max(1.0);

    let d = u_dual(&psi_f, p, theta_grid, &opts.dual)?;
    let m = theta_grid.len();
    let mut v = d.func.values().to_vec();
    let mut x_star = vec![None; m];
    let mut x_star_hi = vec![None; m];
    let mut attained = vec![false; m];
    let mut tail = vec![None; m];
    let tail_start = {
        let cut = xs[0] + (1.0 - opts.tail_fraction) * (xs[last] - xs[0]);
        xs.partition_point(|x| *x < cut).min(last.saturating_sub(1))
    };
    for k in 0..m {
        let th = theta_grid[k];
        let Some(s) = d.argmax[k] else {
            // G(·, θ) vanishes on the whole grid
            v[k] = f64::NEG_INFINITY;
            continue;
        };
        let diff = |i: usize| p.g(xs[i], th) - psi[i];
        let band = opts.dual.tie_tol * v[k].abs().max(1.0);
        let rising_at_end = diff(last) >= diff(last - 1) - band;
        let empty = s.hi == last && rising_at_end && !closed_end;
        if !empty {
            attained[k] = true;
            let (xlo, vlo) = if opts.refine && s.lo > 0 && s.lo < last {
                refine_at(xs, psi, p, th, s.lo)
            } else {
                (xs[s.lo], v[k])
            };
            x_star[k] = Some(xlo);
            x_star_hi[k] = Some(if s.hi == s.lo { xlo } else { xs[s.hi] });
            v[k] = v[k].max(vlo);
            continue;
        }
        // limsup of g - ψ over the tail window
        let sigma = (tail_start..=last).map(diff).fold(f64::NEG_INFINITY, f64::max);
        let slope = (diff(last) - diff(last - 1)) / (xs[last] - xs[last - 1]);
        let sigma = if slope > 1e-6 { f64::INFINITY } else { sigma };
        tail[k] = Some(sigma);
        v[k] = sigma;
    }
    let empty: Vec<bool> = attained.iter().map(|a| !a).collect();
    let (theta_r, empty_contiguous) = match orientation {
        Orientation::Decreasing => {
            let k = empty.iter().rposition(|e| *e);
            let ok = k.map_or(true, |k| empty[..=k].iter().all(|e| *e));
            (k.map(|k| theta_grid[k]), ok)
        }
        _ => {
            let k = empty.iter().position(|e| *e);
            let ok = k.map_or(true, |k| empty[k..].iter().all(|e| *e));
            (k.map(|k| theta_grid[k]), ok)
        }
    };
    let mut sol = ForwardSolution {
        theta: theta_grid.to_vec(),
        v,
        x_star,
        x_star_hi,
        attained,
        theta_r,
        tail,
        empty_contiguous,
        orientation,
        xi: eig.xi,
        x_max: xs[last],
    };
    if opts.bisect_theta_r && orientation == Orientation::Increasing {
        if let Some(kr) = sol.attained.iter().position(|a| !a) {
            if kr > 0 {
                sol.theta_r = Some(bisect_theta_r(&xs[..=last], &psi[..=last], p, theta_grid[kr - 1], theta_grid[kr], closed_end));
            }
        }
    }
    Ok(sol)
}

fn attained_at(xs: &[f64], psi: &[f64], p: &PayoffFamily, th: f64, closed_end: bool) -> bool {
    let last = xs.len() - 1;
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, (x, ps)) in xs.iter().zip(psi).enumerate() {
        let c = p.g(*x, th) - ps;
        if c > best {
            best = c;
            arg = i;
        }
    }
    closed_end || arg < last || p.g(xs[last], th) - psi[last] < p.g(xs[last - 1], th) - psi[last - 1]
}

fn bisect_theta_r(xs: &[f64], psi: &[f64], p: &PayoffFamily, mut a: f64, mut b: f64, closed: bool) -> f64 {
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if attained_at(xs, psi, p, m, closed) {
            a = m;
        } else {
            b = m;
        }
    }
    b
}

/// Largest difference quotient of `v` on one θ-window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzInterval {
    pub lo: f64,
    pub hi: f64,
    pub max_quotient: f64,
    /// Quotient jumps by more than 10x against the previous window.
    pub blowup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub intervals: Vec<LipschitzInterval>,
    /// The last window (next to θ_R) shows a blow-up.
    pub endpoint_flag: bool,
}

/// Max difference quotient of `v` on a compact `[lo, hi]` of attained nodes.
pub fn lipschitz_on(sol: &ForwardSolution, lo: f64, hi: f64) -> f64 {
    let idx: Vec<usize> = (0..sol.theta.len())
        .filter(|&k| sol.attained[k] && sol.theta[k] >= lo && sol.theta[k] <= hi)
        .collect();
    idx.windows(2)
        .filter(|w| w[1] == w[0] + 1)
        .map(|w| ((sol.v[w[1]] - sol.v[w[0]]) / (sol.theta[w[1]] - sol.theta[w[0]])).abs())
        .fold(0.0, f64::max)
}

/// Local Lipschitz estimates of `v` over `windows` equal pieces of the
/// attained θ-range.
pub fn lipschitz_report(sol: &ForwardSolution, windows: usize) -> LipschitzReport {
    let att: Vec<f64> = (0..sol.theta.len()).filter(|&k| sol.attained[k]).map(|k| sol.theta[k]).collect();
    let mut intervals = Vec::new();
    if att.len() >= 2 && windows > 0 {
        let (a, b) = (att[0], att[att.len() - 1]);
        let w = (b - a) / windows as f64;
        let mut prev: Option<f64> = None;
        for j in 0..windows {
            let lo = a + j as f64 * w;
            let hi = if j + 1 == windows { b } else { lo + w };
            let q = lipschitz_on(sol, lo, hi);
            let blowup = prev.is_some_and(|p| q > 10.0 * p.max(1e-12));
            intervals.push(LipschitzInterval { lo, hi, max_quotient: q, blowup });
            prev = Some(q);
        }
    }
    let endpoint_flag = intervals.last().is_some_and(|i| i.blowup);
    LipschitzReport { intervals, endpoint_flag }
}

/// Largest violation of `V(θ) φ(x) >= G(x, θ)` over the grids (0 when dominated).
pub fn dominance_violation(sol: &ForwardSolution, eig: &Eigenfunction, p: &PayoffFamily) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, th) in sol.theta.iter().enumerate() {
        for (x, ps) in eig.grid().iter().zip(&eig.psi) {
            let g = p.g(*x, *th);
            if g.is_finite() {
                // compare in logs: v + ψ >= g
                worst = worst.max(g - sol.v[k] - ps);
            }
        }
    }
    worst
}

#[cfg(test)]
/// `ψ'` by three-point differences, used for local slope diagnostics.
pub(crate) fn log_slope(e: &Eigenfunction, i: usize) -> f64 {
    let x = e.grid();
    let n = x.len();
    match i {
        0 => crate::conventions::quad_derivative(x, &e.psi, [0, 1, 2], 0),
        _ if i + 1 == n => crate::conventions::quad_derivative(x, &e.psi, [n - 3, n - 2, n - 1], n - 1),
        _ => crate::conventions::quad_derivative(x, &e.psi, [i - 1, i, i + 1], i),
    }
}
