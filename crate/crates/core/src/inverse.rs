//! Inverse problem: value curve `v = log V` on a θ grid to the conjugate
//! `v^g`, a candidate eigenfunction, an existence verdict and a uniqueness
//! diagnosis with explicit witnesses.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conventions::{bisect, ext_f64, golden_max, left_derivative, lower_hull, median, Tolerances};
use crate::diffusion::{speed_from_eigen, Eigenfunction, SpeedMeasure, XiKind};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardOptions, Process};
use crate::payoffs::{verify_sm, LatticeSpec, PayoffFamily};
use crate::uconvex::{read_columns, Axis, GridFunction, Orientation};

const INF: f64 = f64::INFINITY;
const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    /// Clamped cubic spline of v between detected kinks.
    #[default]
    Spline,
    /// V linear between nodes.
    LinearInV,
    /// Sampled nodes only.
    Nodes,
}

impl FromStr for InterpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spline" => Ok(InterpMode::Spline),
            "linear-in-v" => Ok(InterpMode::LinearInV),
            "nodes" => Ok(InterpMode::Nodes),
            _ => Err(Error::Parse(format!("unknown interpolation mode `{s}`"))),
        }
    }
}

/// How Θ continues past a sampled end.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaEnd {
    /// Θ stops at the last sample.
    #[default]
    Sampled,
    /// Θ is open at this finite endpoint; limits there are extrapolated.
    Open(f64),
    /// Θ runs to +inf (upper end only).
    Unbounded,
}

impl FromStr for ThetaEnd {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(ThetaEnd::Sampled),
            "unbounded" => Ok(ThetaEnd::Unbounded),
            _ => match s.strip_prefix("open:") {
                Some(b) => b
                    .parse::<f64>()
                    .map(ThetaEnd::Open)
                    .map_err(|_| Error::Parse(format!("bad open endpoint `{b}`"))),
                None => Err(Error::Parse(format!("unknown theta end `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InverseOptions {
    pub tol: Tolerances,
    pub interp: InterpMode,
    pub lower: ThetaEnd,
    pub upper: ThetaEnd,
    /// Allowed forward-reproduction error, relative to `max(1, |v|)`.
    pub reproduce_tol: f64,
    /// Allowed `|v^g(0)|`.
    pub origin_tol: f64,
    pub skip_sm_check: bool,
}

impl Default for InverseOptions {
    fn default() -> Self {
        InverseOptions {
            tol: Tolerances::default(),
            interp: InterpMode::Spline,
            lower: ThetaEnd::Sampled,
            upper: ThetaEnd::Sampled,
            reproduce_tol: 1e-4,
            origin_tol: 1e-6,
            skip_sm_check: false,
        }
    }
}

/// Read a value curve (columns `theta`, `V`; others ignored) as `v = log V`.
pub fn read_values_csv<R: Read>(r: R) -> Result<GridFunction> {
    let (names, rows) = read_columns(r)?;
    let col = |want: &str| {
        names
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| Error::Parse(format!("missing column `{want}`")))
    };
    let (it, iv) = (col("theta")?, col("V")?);
    if let Some(bad) = rows.iter().map(|r| r[iv]).find(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("V must be positive and finite, got {bad}")));
    }
    GridFunction::new(rows.iter().map(|r| r[it]).collect(), rows.iter().map(|r| r[iv].ln()).collect(), Axis::Theta)
}

pub fn load_values(path: &Path) -> Result<GridFunction> {
    read_values_csv(std::fs::File::open(path)?)
}

fn lagrange_deriv(ts: &[f64], vs: &[f64], at: f64) -> f64 {
    let n = ts.len();
    let mut out = 0.0;
    for j in 0..n {
        let mut dj = 0.0;
        for k in (0..n).filter(|&k| k != j) {
            let mut term = 1.0 / (ts[j] - ts[k]);
            for m in (0..n).filter(|&m| m != j && m != k) {
                term *= (at - ts[m]) / (ts[j] - ts[m]);
            }
            dj += term;
        }
        out += vs[j] * dj;
    }
    out
}

fn hermite(v0: f64, v1: f64, m0: f64, m1: f64, h: f64, s: f64) -> (f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let val = (2.0 * s3 - 3.0 * s2 + 1.0) * v0
        + (s3 - 2.0 * s2 + s) * h * m0
        + (-2.0 * s3 + 3.0 * s2) * v1
        + (s3 - s2) * h * m1;
    let der = (6.0 * s2 - 6.0 * s) / h * v0
        + (3.0 * s2 - 4.0 * s + 1.0) * m0
        + (-6.0 * s2 + 6.0 * s) / h * v1
        + (3.0 * s2 - 2.0 * s) * m1;
    (val, der)
}

/// Interpolant of v with one-sided node derivatives.
#[derive(Debug, Clone)]
struct VInterp {
    t: Vec<f64>,
    v: Vec<f64>,
    dl: Vec<f64>,
    dr: Vec<f64>,
    kink: Vec<bool>,
    mode: InterpMode,
}

impl VInterp {
    fn new(t: &[f64], v: &[f64], mode: InterpMode, kink_factor: f64) -> VInterp {
        let n = t.len();
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (v[i + 1] - v[i]) / h[i]).collect();
        let mut dl = vec![0.0; n];
        let mut dr = vec![0.0; n];
        let mut kink = vec![false; n];
        match mode {
            InterpMode::Nodes | InterpMode::LinearInV => {
                for i in 0..n {
                    let (l, r) = if mode == InterpMode::Nodes {
                        (d[i.max(1) - 1], d[i.min(n - 2)])
                    } else {
                        // d log V from the left and right chords of V
                        let l = if i > 0 { -(v[i - 1] - v[i]).exp_m1() / h[i - 1] } else { 0.0 };
                        let r = if i + 1 < n { (v[i + 1] - v[i]).exp_m1() / h[i] } else { 0.0 };
                        (if i > 0 { l } else { r }, if i + 1 < n { r } else { l })
                    };
                    dl[i] = l;
                    dr[i] = r;
                    kink[i] = i > 0 && i + 1 < n;
                }
            }
            InterpMode::Spline => {
                let c: Vec<f64> = (0..n)
                    .map(|i| {
                        if i == 0 || i + 1 == n {
                            0.0
                        } else {
                            (d[i] - d[i - 1]).abs() / (0.5 * (h[i - 1] + h[i]))
                        }
                    })
                    .collect();
                for i in 1..n.saturating_sub(1) {
                    let jump = (d[i] - d[i - 1]).abs();
                    if jump <= 1e-9 * d[i].abs().max(d[i - 1].abs()).max(1.0) {
                        continue;
                    }
                    let lo = i.saturating_sub(5).max(1);
                    let hi = (i + 5).min(n - 2);
                    let nb: Vec<f64> = (lo..=hi).filter(|&j| j != i).map(|j| c[j]).collect();
                    if jump > kink_factor * median(&nb) * 0.5 * (h[i - 1] + h[i]) {
                        kink[i] = true;
                    }
                }
                let mut breaks = vec![0];
                breaks.extend((1..n - 1).filter(|&i| kink[i]));
                breaks.push(n - 1);
                for w in breaks.windows(2) {
                    fill_run(t, v, &h, &d, w[0], w[1], &mut dl, &mut dr);
                }
                dl[0] = dr[0];
                dr[n - 1] = dl[n - 1];
            }
        }
        VInterp { t: t.to_vec(), v: v.to_vec(), dl, dr, kink, mode }
    }

    fn seg(&self, th: f64) -> usize {
        let n = self.t.len();
        match self.t.partition_point(|&x| x <= th) {
            0 => 0,
            k => (k - 1).min(n - 2),
        }
    }

    /// Value and derivative; extrapolates the end segments polynomially.
    fn eval2(&self, th: f64) -> (f64, f64) {
        let j = self.seg(th);
        let (t0, t1, v0, v1) = (self.t[j], self.t[j + 1], self.v[j], self.v[j + 1]);
        let h = t1 - t0;
        let s = (th - t0) / h;
        match self.mode {
            InterpMode::Spline => hermite(v0, v1, self.dr[j], self.dl[j + 1], h, s),
            InterpMode::LinearInV => {
                let q = (v1 - v0).exp_m1();
                let r = 1.0 + q * s;
                if r > 0.0 {
                    (v0 + r.ln(), q / h / r)
                } else {
                    (INF, 0.0)
                }
            }
            InterpMode::Nodes => (v0 + (v1 - v0) * s, (v1 - v0) / h),
        }
    }

    fn eval(&self, th: f64) -> f64 {
        self.eval2(th).0
    }
}

/// One-sided derivative at an end of a smooth run: the 4 to 6 point stencil
/// that changes least from the stencil one point shorter.
fn end_derivative(t: &[f64], v: &[f64], at_end: bool) -> f64 {
    let m = t.len();
    let est = |w: usize| {
        if at_end {
            lagrange_deriv(&t[m - w..], &v[m - w..], t[m - 1])
        } else {
            lagrange_deriv(&t[..w], &v[..w], t[0])
        }
    };
    let mut best = (INF, est(4.min(m)));
    let mut prev = est(3.min(m));
    for w in 4..=m.min(6) {
        let d = est(w);
        if (d - prev).abs() < best.0 {
            best = ((d - prev).abs(), d);
        }
        prev = d;
    }
    best.1
}

#[allow(clippy::too_many_arguments)]
fn fill_run(t: &[f64], v: &[f64], h: &[f64], d: &[f64], a: usize, b: usize, dl: &mut [f64], dr: &mut [f64]) {
    let m = b - a + 1;
    if m == 2 {
        dr[a] = d[a];
        dl[b] = d[a];
        return;
    }
    if m == 3 {
        for i in a..=b {
            let der = lagrange_deriv(&t[a..=b], &v[a..=b], t[i]);
            dl[i] = der;
            dr[i] = der;
        }
        return;
    }
    let ea = end_derivative(&t[a..=b], &v[a..=b], false);
    let eb = end_derivative(&t[a..=b], &v[a..=b], true);
    // C² conditions at interior nodes, Thomas algorithm
    let k = m - 2;
    let mut sub = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for r in 0..k {
        let i = a + 1 + r;
        sub[r] = h[i];
        diag[r] = 2.0 * (h[i - 1] + h[i]);
        sup[r] = h[i - 1];
        rhs[r] = 3.0 * (h[i] * d[i - 1] + h[i - 1] * d[i]);
    }
    rhs[0] -= sub[0] * ea;
    rhs[k - 1] -= sup[k - 1] * eb;
    for r in 1..k {
        let w = sub[r] / diag[r - 1];
        diag[r] -= w * sup[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    let mut sol = vec![0.0; k];
    sol[k - 1] = rhs[k - 1] / diag[k - 1];
    for r in (0..k - 1).rev() {
        sol[r] = (rhs[r] - sup[r] * sol[r + 1]) / diag[r];
    }
    dr[a] = ea;
    dl[b] = eb;
    for r in 0..k {
        dl[a + 1 + r] = sol[r];
        dr[a + 1 + r] = sol[r];
    }
}

/// Everything needed to evaluate `v^g` anywhere.
#[derive(Debug, Clone)]
struct Setup {
    p: PayoffFamily,
    vi: VInterp,
    lower: Option<f64>,
    upper: Option<f64>,
    /// `(u_n, v_n, dv/du)` for a convergent unbounded upper end, `u = 1/θ`.
    tail: Option<(f64, f64, f64)>,
    orient: Orientation,
}

impl Setup {
    /// `(v^g(x), θ*)`; θ* is NaN when no θ gives a finite value.
    fn vg_at(&self, x: f64) -> (f64, f64) {
        let (t, v) = (&self.vi.t, &self.vi.v);
        let n = t.len();
        let mut best = (NEG_INF, f64::NAN);
        let mut j = 0;
        for k in 0..n {
            let val = self.p.g(x, t[k]) - v[k];
            if val > best.0 {
                best = (val, t[k]);
                j = k;
            }
        }
        if self.vi.mode == InterpMode::Nodes {
            return best;
        }
        let f = |th: f64| self.p.g(x, th) - self.vi.eval(th);
        let mut consider = |a: f64, b: f64, f: &dyn Fn(f64) -> f64, map: &dyn Fn(f64) -> f64| {
            if b > a {
                let (arg, val) = golden_max(a, b, f);
                if val > best.0 {
                    best = (val, map(arg));
                }
            }
        };
        let id = |th: f64| th;
        if j > 0 {
            consider(t[j - 1], t[j], &f, &id);
        }
        if j + 1 < n {
            consider(t[j], t[j + 1], &f, &id);
        }
        if j == 0 {
            if let Some(b) = self.lower {
                consider(b + 1e-12 * b.abs().max(1.0), t[0], &f, &id);
            }
        }
        if j == n - 1 {
            if let Some(b) = self.upper {
                consider(t[n - 1], b - 1e-12 * b.abs().max(1.0), &f, &id);
            }
            if let Some((un, vn, dvdu)) = self.tail {
                let fu = |u: f64| self.p.g(x, 1.0 / u) - (vn + (u - un) * dvdu);
                consider(un * 1e-9, un, &fu, &|u: f64| 1.0 / u);
            }
        }
        best
    }

    /// Smallest x with `g_θ(x, θ) = d` under the measured orientation; `+inf` if none.
    fn foc(&self, th: f64, d: f64, x_scale: f64) -> f64 {
        let sgn = if self.orient == Orientation::Decreasing { -1.0 } else { 1.0 };
        let p = &self.p;
        let h = |x: f64| -> f64 {
            let r = if p.g(x, th) > NEG_INF {
                p.g_theta(x, th)
            } else if p.g(2.0 * x + 1.0, th) > NEG_INF || p.g(1e6, th) > NEG_INF {
                -INF * sgn
            } else {
                INF * sgn
            };
            sgn * (r - d)
        };
        let lo = p.x_domain.lo.max(0.0);
        if h(lo) >= 0.0 {
            return lo;
        }
        let mut hi = x_scale.max(1.0);
        while !(h(hi) >= 0.0) {
            hi *= 2.0;
            if hi > 1e9 {
                return INF;
            }
        }
        bisect(lo, hi, h)
    }
}

fn end_limit(t: &[f64], xs: &[f64], end: ThetaEnd, upper: bool) -> f64 {
    let n = t.len();
    let (i0, i1) = if upper { (n - 1, n - 2) } else { (0, 1) };
    let (x0, x1) = (xs[i0], xs[i1]);
    match end {
        ThetaEnd::Sampled => x0,
        ThetaEnd::Open(b) => {
            let (r0, r1) = ((t[i0] - b).abs(), (t[i1] - b).abs());
            if !x0.is_finite() {
                return INF;
            }
            if x0 <= 0.0 || r0 == 0.0 {
                return x0;
            }
            if x1.is_finite() && x1 > 0.0 {
                let q = (x1 / x0).ln() / (r1 / r0).ln();
                if q < -0.05 {
                    return INF;
                }
                if q > 0.05 {
                    return 0.0;
                }
                return (x0 - (x1 - x0) * r0 / (r1 - r0)).max(0.0);
            }
            x0
        }
        ThetaEnd::Unbounded => {
            if !x0.is_finite() {
                return INF;
            }
            let k = t.iter().rposition(|&s| s <= t[n - 1] / 10.0).unwrap_or(0);
            let xk = xs[k];
            if xk > 0.0 && x0 > 0.0 && k < n - 1 {
                let q = (x0 / xk).ln() / (t[n - 1] / t[k]).ln();
                if q > 0.05 {
                    return INF;
                }
            }
            // Aitken Δ² on nodes near θ_n, θ_n/√10, θ_n/10
            let near = |target: f64| {
                (0..n - 1)
                    .min_by(|&a, &b| (t[a].ln() - target.ln()).abs().partial_cmp(&(t[b].ln() - target.ln()).abs()).unwrap())
                    .unwrap()
            };
            let (j1, j2) = if t[0] < t[n - 1] / 10.0 {
                (near(t[n - 1] / 10f64.sqrt()), near(t[n - 1] / 10.0))
            } else {
                (n - 2, n.saturating_sub(3))
            };
            if j2 >= j1 || !xs[j1].is_finite() || !xs[j2].is_finite() {
                return x0;
            }
            let (d1, d2) = (x0 - xs[j1], xs[j1] - xs[j2]);
            if d1 <= 0.0 || d2 <= d1 {
                return x0;
            }
            x0 + d1 * d1 / (d2 - d1)
        }
    }
}

/// The conjugate `v^g` on the x-grid together with the subdifferential data.
#[derive(Debug, Clone)]
pub struct Conjugate {
    pub x: Vec<f64>,
    /// `v^g`; `-inf` where every θ gives `G = 0`.
    pub vg: Vec<f64>,
    /// Maximizing θ per x (NaN if none, `+inf` in the limit θ → ∞).
    pub theta_star: Vec<f64>,
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    /// Ends of `∂^g v(θ)` per θ node from the one-sided derivatives.
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub kink: Vec<bool>,
    pub x_minus: f64,
    pub x_plus: f64,
    pub x_r: f64,
    /// `(v^g)'(x_+ +)` stays finite as θ approaches the upper end.
    pub right_slope_finite: bool,
    pub orientation: Orientation,
    setup: Setup,
}

impl Conjugate {
    pub fn vg_at(&self, x: f64) -> f64 {
        self.setup.vg_at(x).0
    }

    pub fn vg_function(&self) -> Result<GridFunction> {
        if self.vg.iter().any(|v| *v == NEG_INF) {
            return Err(Error::InvalidParameter("v^g is -inf somewhere on the grid".into()));
        }
        GridFunction::new(self.x.clone(), self.vg.clone(), Axis::X)
    }
}

fn check_x_grid(x: &[f64]) -> Result<()> {
    if x.len() < 3 || x.windows(2).any(|w| !(w[1] > w[0])) || !(x[0] >= 0.0) || !x[x.len() - 1].is_finite() {
        return Err(Error::InvalidGrid("x grid must be finite, increasing, start at >= 0, have >= 3 nodes".into()));
    }
    Ok(())
}

/// Compute `v^g` on `x_grid` and the subdifferential endpoints.
pub fn candidate_psi(v: &GridFunction, p: &PayoffFamily, x_grid: &[f64], opts: &InverseOptions) -> Result<Conjugate> {
    opts.tol.validate()?;
    check_x_grid(x_grid)?;
    let t = v.grid();
    let vals = v.values();
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("value curve must be finite".into()));
    }
    if let Some(bad) = t.iter().find(|s| !p.theta_domain.contains(**s)) {
        return Err(Error::InvalidGrid(format!("theta = {bad} outside the family's domain")));
    }
    let n = t.len();
    let orient = if opts.skip_sm_check {
        p.sm_orientation
    } else {
        verify_sm(p, &LatticeSpec::default())?.orientation
    };
    let vi = VInterp::new(t, vals, opts.interp, opts.tol.kink_factor);
    let lower = match opts.lower {
        ThetaEnd::Sampled => None,
        ThetaEnd::Open(b) if b <= t[0] => Some(b),
        ThetaEnd::Open(b) => return Err(Error::InvalidParameter(format!("open lower end {b} above the data"))),
        ThetaEnd::Unbounded => return Err(Error::InvalidParameter("lower end cannot be unbounded".into())),
    };
    let mut upper = None;
    let mut tail = None;
    match opts.upper {
        ThetaEnd::Sampled => {}
        ThetaEnd::Open(b) if b >= t[n - 1] => upper = Some(b),
        ThetaEnd::Open(b) => return Err(Error::InvalidParameter(format!("open upper end {b} below the data"))),
        ThetaEnd::Unbounded => {
            if !(t[n - 1] > 0.0) {
                return Err(Error::InvalidParameter("unbounded upper end needs positive theta".into()));
            }
            // θ v' must decay over the last decade for v to converge
            let k = t.iter().rposition(|&s| s <= t[n - 1] / 10.0);
            if let Some(k) = k.filter(|&k| t[k] > 0.0) {
                let now = (t[n - 1] * vi.dl[n - 1]).abs();
                let before = (t[k] * vi.dr[k].max(vi.dl[k])).abs();
                if now <= 0.5 * before || now < 1e-12 {
                    tail = Some((1.0 / t[n - 1], vals[n - 1], -t[n - 1] * t[n - 1] * vi.dl[n - 1]));
                }
            }
        }
    }
    let setup = Setup { p: p.clone(), vi, lower, upper, tail, orient };
    let pairs: Vec<(f64, f64)> = x_grid.par_iter().map(|&x| setup.vg_at(x)).collect();
    let (vg, theta_star): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    if vg.iter().any(|v| *v == INF) {
        return Err(Error::InvalidParameter("v^g is +inf on the x grid".into()));
    }
    let x_scale = x_grid[x_grid.len() - 1];
    let x_cap = x_scale + 1e-6 * x_scale.max(1.0);
    let ends: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let a = setup.foc(t[k], setup.vi.dl[k], x_scale);
            let b = if setup.vi.dl[k] == setup.vi.dr[k] { a } else { setup.foc(t[k], setup.vi.dr[k], x_scale) };
            let cap = |x: f64| if x > x_cap { INF } else { x };
            (cap(a.min(b)), cap(a.max(b)))
        })
        .collect();
    let (x_lo, x_hi): (Vec<f64>, Vec<f64>) = ends.into_iter().unzip();
    let lo_lim = end_limit(t, &x_lo, opts.lower, false);
    let hi_lim = end_limit(t, &x_hi, opts.upper, true);
    let mut x_minus = lo_lim.min(hi_lim);
    let x_plus = lo_lim.max(hi_lim);
    if x_minus <= 2.0 * (x_grid[1] - x_grid[0]) {
        x_minus = 0.0;
    }
    // an empty tail of nodes (toward the end where x* grows) ends the range at θ_R
    let grows_up = orient != Orientation::Decreasing;
    let order: Vec<usize> = if grows_up { (0..n).rev().collect() } else { (0..n).collect() };
    let empty_tail = order.iter().take_while(|&&k| !x_hi[k].is_finite()).count();
    let x_r = if empty_tail == 0 || empty_tail == n {
        x_plus
    } else {
        x_hi[order[empty_tail]]
    };
    let right_slope_finite = x_plus.is_finite()
        && match opts.upper {
            ThetaEnd::Sampled => p.g_x(x_plus, t[n - 1]).is_finite(),
            ThetaEnd::Open(b) => p.g_x(x_plus, b - 1e-12 * b.abs().max(1.0)).is_finite(),
            ThetaEnd::Unbounded => {
                let a = p.g_x(x_plus, t[n - 1]).abs();
                let b = p.g_x(x_plus, 100.0 * t[n - 1]).abs();
                a > 0.0 && b.is_finite() && (b / a).ln() / 100f64.ln() <= 0.25
            }
        };
    Ok(Conjugate {
        x: x_grid.to_vec(),
        vg,
        theta_star,
        theta: t.to_vec(),
        v: vals.to_vec(),
        kink: setup.vi.kink.clone(),
        x_lo,
        x_hi,
        x_minus,
        x_plus,
        x_r,
        right_slope_finite,
        orientation: orient,
        setup,
    })
}

/// Largest `v(θ_k) - v^{gg}(θ_k)` over nodes whose subdifferential lies on the x-grid.
/// The sup over x uses the grid nodes and the first-order points `x_lo`, `x_hi`.
pub fn g_convexity_deviation(c: &Conjugate) -> f64 {
    let (x0, x1) = (c.x[0], c.x[c.x.len() - 1]);
    let p = &c.setup.p;
    (0..c.theta.len())
        .into_par_iter()
        .filter(|&k| c.x_lo[k] >= x0 && c.x_hi[k] <= x1 * (1.0 + 1e-12))
        .map(|k| {
            let th = c.theta[k];
            let grid = c
                .x
                .iter()
                .zip(&c.vg)
                .filter(|(_, vg)| vg.is_finite())
                .map(|(&x, vg)| p.g(x, th) - vg)
                .fold(NEG_INF, f64::max);
            let at = |x: f64| {
                let vg = c.vg_at(x);
                if vg.is_finite() {
                    p.g(x, th) - vg
                } else {
                    NEG_INF
                }
            };
            c.v[k] - grid.max(at(c.x_lo[k])).max(at(c.x_hi[k]))
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uniqueness {
    Unique,
    LeftExtensionFamily,
    GSectionFamily,
    RightExtensionFamily,
    Mixed,
}

/// Interval where `x*` jumps at a single θ node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub theta: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub strictly_convex: bool,
}

/// An alternative consistent eigenfunction.
#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub family: Uniqueness,
    pub label: String,
    pub phi: Eigenfunction,
    /// Largest relative error of the forward value against v.
    pub reproduction_error: f64,
    /// Sup distance to the candidate on common nodes (`inf` where only one is finite).
    #[serde(with = "ext_f64")]
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InverseReport {
    pub verdict: Verdict,
    pub reason: Option<String>,
    /// 1: x_- = 0, 2: 0 < x_- < ∞, 3: x_- = ∞.
    pub case: u8,
    pub construction: String,
    #[serde(with = "ext_f64")]
    pub x_minus: f64,
    #[serde(with = "ext_f64")]
    pub x_plus: f64,
    #[serde(rename = "x_R", with = "ext_f64")]
    pub x_r: f64,
    pub uniqueness: Option<Uniqueness>,
    /// Classification ignoring right extensions (truncated Θ).
    pub uniqueness_covered: Option<Uniqueness>,
    pub kappa: Option<f64>,
    pub checks: BTreeMap<String, bool>,
    pub reproduction_error: Option<f64>,
    pub candidate: Option<Eigenfunction>,
    pub sections: Vec<Section>,
    pub witnesses: Vec<Witness>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub conjugate: Conjugate,
}

impl InverseReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn record(checks: &mut BTreeMap<String, bool>, reason: &mut Option<String>, name: &str, ok: bool, why: &str) {
    checks.insert(name.to_string(), ok);
    if !ok && reason.is_none() {
        *reason = Some(why.to_string());
    }
}

fn convex_defect(x: &[f64], y: &[f64], tol: f64) -> Option<f64> {
    let hull = lower_hull(x, y);
    (0..x.len())
        .filter(|&i| y[i] - hull[i] > tol * y[i].abs().max(1.0))
        .max_by(|&a, &b| (y[a] - hull[a]).partial_cmp(&(y[b] - hull[b])).unwrap())
        .map(|i| x[i])
}

fn increasing(y: &[f64], tol: f64) -> bool {
    y.windows(2).all(|w| w[1] >= w[0] - tol * w[0].abs().max(1.0))
}

fn log_sum_exp(a: f64, wa: f64, b: f64, wb: f64) -> f64 {
    let m = a.max(b);
    m + (wa * (a - m).exp() + wb * (b - m).exp()).ln()
}

fn fwd_opts(tol: &Tolerances) -> ForwardOptions {
    ForwardOptions { tol: *tol, refine: true, skip_sm_check: true, ..ForwardOptions::default() }
}

/// Largest relative error of the forward value of `e` against v on the nodes it can reach.
fn reproduction_error(c: &Conjugate, e: &Eigenfunction, rho: f64, tol: &Tolerances, all_nodes: bool) -> Result<f64> {
    let grid = e.grid();
    let end = grid[grid.len() - 1];
    let dx = grid[grid.len() - 1] - grid[grid.len() - 2];
    let idx: Vec<usize> = (0..c.theta.len())
        .filter(|&k| {
            all_nodes
                || if e.xi_kind == XiKind::Absorbing {
                    c.x_hi[k] <= end + dx
                } else {
                    c.x_hi[k] < end - 0.5 * dx
                }
        })
        .collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    let th: Vec<f64> = idx.iter().map(|&k| c.theta[k]).collect();
    let sol = solve_forward(Process::Eigen(e), &c.setup.p, rho, &th, &fwd_opts(tol))?;
    Ok(idx
        .iter()
        .zip(&sol.v)
        .map(|(&k, w)| (w - c.v[k]).abs() / c.v[k].abs().max(1.0))
        .fold(0.0, f64::max))
}

struct Built {
    x: Vec<f64>,
    psi: Vec<f64>,
    xi: f64,
    xi_kind: XiKind,
}

fn make_eigen(b: &Built) -> Result<Eigenfunction> {
    let truncated = b.xi_kind == XiKind::Natural;
    Eigenfunction::from_psi(b.x.clone(), b.psi.clone(), b.xi, b.xi_kind, truncated)
}

/// Grid nodes of the candidate: x-grid up to `x_+`, with `x_+` itself as the absorbing end.
fn base_nodes(c: &Conjugate) -> (Vec<f64>, Vec<f64>, f64, XiKind) {
    let last = c.x[c.x.len() - 1];
    let dx = c.x[1] - c.x[0];
    if c.x_plus.is_finite() && c.x_plus < last - 1e-9 * last.max(1.0) {
        let mut x: Vec<f64> = Vec::new();
        let mut vg = Vec::new();
        for (a, b) in c.x.iter().zip(&c.vg) {
            if *a < c.x_plus - 1e-3 * dx {
                x.push(*a);
                vg.push(*b);
            }
        }
        x.push(c.x_plus);
        vg.push(c.vg_at(c.x_plus));
        (x, vg, c.x_plus, XiKind::Absorbing)
    } else {
        (c.x.clone(), c.vg.clone(), INF, XiKind::Natural)
    }
}

/// Existence check and candidate construction; run [`diagnose_uniqueness`] afterwards.
pub fn check_existence(
    v: &GridFunction,
    p: &PayoffFamily,
    rho: f64,
    x_grid: &[f64],
    opts: &InverseOptions,
) -> Result<InverseReport> {
    let c = candidate_psi(v, p, x_grid, opts)?;
    let dxmax = c.x.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let gtol = opts.tol.dual_tol.unwrap_or((50.0 * dxmax * dxmax).max(1e-9));
    let dev = g_convexity_deviation(&c);
    if dev > gtol {
        return Err(Error::NotUConvex { deviation: dev });
    }
    let ctol = opts.tol.convexity_tol;
    let mut checks = BTreeMap::new();
    let mut reason: Option<String> = None;
    let (mut x, mut vg, xi, xi_kind) = base_nodes(&c);
    let dx0 = x[1] - x[0];
    let case: u8;
    let construction: String;
    let mut psi: Vec<f64>;
    if c.x_minus == INF {
        case = 3;
        construction = "lower convex hull of (0,1) and e^{v^g}".into();
        if x[0] > 0.0 {
            x.insert(0, 0.0);
            vg.insert(0, NEG_INF);
        }
        let mut hy: Vec<f64> = vg.iter().map(|g| g.exp()).collect();
        hy[0] = 1.0;
        let f: Vec<f64> = lower_hull(&x, &hy).iter().map(|h| h.max(1.0)).collect();
        let dom = (0..x.len()).all(|i| f[i] >= vg[i].exp() - ctol * f[i].max(1.0));
        record(&mut checks, &mut reason, "hull_dominates", dom, "convex hull does not dominate e^{v^g}");
        let n = x.len();
        let gap = f[n - 1].ln() - vg[n - 1];
        record(&mut checks, &mut reason, "gap_vanishes", gap <= opts.origin_tol.max(ctol), "gap log F - v^g does not vanish");
        psi = f.iter().map(|v| v.ln()).collect();
    } else {
        // v^g(0): the right limit where G(0, ·) vanishes
        let v0 = if vg[0] == NEG_INF && vg.len() > 2 && vg[1].is_finite() && vg[2].is_finite() {
            vg[1] - (vg[2] - vg[1]) * (x[1] - x[0]) / (x[2] - x[1])
        } else {
            vg[0]
        };
        if c.x_minus == 0.0 {
            case = 1;
            construction = "e^{v^g}".into();
            let tol0 = opts.origin_tol.max(5.0 * dx0 * dx0);
            record(&mut checks, &mut reason, "vg_zero_at_origin", v0.abs() <= tol0, "v^g(0) != 0");
            psi = vg.clone();
            psi[0] = 0.0;
        } else {
            case = 2;
            construction = "chord F on [0, x_-), e^{v^g} beyond".into();
            let xm = c.x_minus;
            let vgm = c.vg_at(xm);
            record(&mut checks, &mut reason, "vg_positive_at_x_minus", vgm > 0.0, "v^g(x_-) <= 0");
            let a = vgm.exp_m1() / xm;
            let below = x.iter().zip(&vg).filter(|(xx, _)| **xx < xm).all(|(xx, g)| *g <= (a * xx).ln_1p() + ctol.max(1e-9));
            record(&mut checks, &mut reason, "chord_dominates", below, "v^g exceeds log F on [0, x_-)");
            let pos = x.partition_point(|&s| s < xm);
            if pos < x.len() && (x[pos] - xm).abs() <= 1e-9 * xm.max(1.0) {
                vg[pos] = vgm;
            } else {
                x.insert(pos, xm);
                vg.insert(pos, vgm);
            }
            psi = (0..x.len()).map(|i| if x[i] < xm { (a * x[i]).ln_1p() } else { vg[i] }).collect();
        }
        let finite = psi.iter().all(|s| s.is_finite());
        let phi: Vec<f64> = psi.iter().map(|s| s.exp()).collect();
        let convex = finite && convex_defect(&x, &phi, ctol).is_none();
        record(&mut checks, &mut reason, "exp_vg_convex", convex, "e^{v^g} non-convex");
        record(&mut checks, &mut reason, "exp_vg_increasing", finite && increasing(&phi, ctol), "e^{v^g} not increasing");
    }
    if case == 3 {
        let phi: Vec<f64> = psi.iter().map(|s| s.exp()).collect();
        record(&mut checks, &mut reason, "exp_vg_increasing", increasing(&phi, ctol), "e^{v^g} not increasing");
    }
    let mut report = InverseReport {
        verdict: Verdict::Inconsistent,
        reason: None,
        case,
        construction,
        x_minus: c.x_minus,
        x_plus: c.x_plus,
        x_r: c.x_r,
        uniqueness: None,
        uniqueness_covered: None,
        kappa: None,
        checks: BTreeMap::new(),
        reproduction_error: None,
        candidate: None,
        sections: Vec::new(),
        witnesses: Vec::new(),
        notes: Vec::new(),
        conjugate: c,
    };
    if reason.is_none() {
        let built = Built { x, psi, xi, xi_kind };
        let eig = make_eigen(&built)?;
        let err = reproduction_error(&report.conjugate, &eig, rho, &opts.tol, case == 3)?;
        report.reproduction_error = Some(err);
        record(&mut checks, &mut reason, "forward_reproduces", err <= opts.reproduce_tol, "candidate does not reproduce v");
        report.candidate = Some(eig);
    }
    report.verdict = if reason.is_none() { Verdict::Consistent } else { Verdict::Inconsistent };
    report.reason = reason;
    report.checks = checks;
    Ok(report)
}

/// Quadratic Bézier from `(0, 1)` to `(xm, ym)` with control point `(px, py)`, at `x`.
fn bezier_at(px: f64, py: f64, xm: f64, ym: f64, x: f64) -> f64 {
    let a = xm - 2.0 * px;
    let u = if a.abs() < 1e-14 * xm {
        x / (2.0 * px)
    } else {
        (-2.0 * px + (4.0 * px * px + 4.0 * a * x).sqrt()) / (2.0 * a)
    };
    let w = 1.0 - u;
    w * w + 2.0 * w * u * py + u * u * ym
}

fn with_phi(e: &Eigenfunction, x: Vec<f64>, phi: Vec<f64>, xi: f64, xi_kind: XiKind) -> Result<Eigenfunction> {
    let psi = phi.iter().map(|p| p.ln()).collect();
    let _ = e;
    Eigenfunction::from_psi(x, psi, xi, xi_kind, xi_kind == XiKind::Natural)
}

fn sup_distance(a: &Eigenfunction, b: &Eigenfunction) -> f64 {
    let (xa, ya) = (a.grid(), a.phi.values());
    let (xb, yb) = (b.grid(), b.phi.values());
    let mut d: f64 = 0.0;
    for (i, x) in xa.iter().enumerate() {
        match xb.binary_search_by(|p| p.partial_cmp(x).unwrap()) {
            Ok(j) => d = d.max((ya[i] - yb[j]).abs()),
            Err(_) => {
                if *x > xb[xb.len() - 1] {
                    return INF;
                }
            }
        }
    }
    if xb[xb.len() - 1] > xa[xa.len() - 1] {
        return INF;
    }
    d
}

/// Classify uniqueness of a consistent report and attach witnesses.
pub fn diagnose_uniqueness(report: &mut InverseReport, rho: f64, opts: &InverseOptions) -> Result<()> {
    let Some(cand) = report.candidate.clone() else {
        return Ok(());
    };
    let c = &report.conjugate;
    let ctol = opts.tol.convexity_tol;
    let xs = cand.grid().to_vec();
    let phi = cand.phi.values().to_vec();
    let dxmax = c.x.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let mut flags: Vec<Uniqueness> = Vec::new();
    let mut mixed_note: Option<String> = None;
    let mut witnesses: Vec<(Uniqueness, String, Eigenfunction)> = Vec::new();
    let mut notes = Vec::new();

    // left end
    match report.case {
        2 => {
            let xm = c.x_minus;
            let i = xs.partition_point(|&s| s < xm);
            let ym = phi[i];
            let a = (ym - 1.0) / xm;
            let h = (c.x[1] - c.x[0]).min(1e-3 * xm.max(1.0));
            let (f0, f1, f2) = (c.vg_at(xm), c.vg_at(xm + h), c.vg_at(xm + 2.0 * h));
            let dvg = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h);
            let dlogf = a / ym;
            let slopes_equal = (dvg - dlogf).abs() <= 1e-3 * dvg.abs().max(dlogf.abs()).max(1e-12);
            let touch = xs
                .iter()
                .zip(&phi)
                .enumerate()
                .filter(|(_, (x, _))| **x <= 0.95 * xm)
                .any(|(k, (x, f))| {
                    let g = c.vg_at(*x);
                    let _ = k;
                    f.ln() - g <= opts.origin_tol
                });
            if !slopes_equal && !touch {
                flags.push(Uniqueness::LeftExtensionFamily);
                let s = ym * dvg;
                let tx = xm - (ym - 1.0) / s;
                let (mx, my) = (0.5 * xm, 0.5 * (1.0 + ym));
                let mut t = 1.0;
                let mut found = None;
                for _ in 0..30 {
                    let (px, py) = ((1.0 - t) * mx + t * tx, (1.0 - t) * my + t * 1.0);
                    let w: Vec<f64> = xs
                        .iter()
                        .zip(&phi)
                        .map(|(x, f)| if *x < xm { bezier_at(px, py, xm, ym, *x) } else { *f })
                        .collect();
                    let ok = xs.iter().zip(&w).all(|(x, y)| {
                        *x >= xm || *y >= c.vg_at(*x).exp() - ctol * y.max(1.0)
                    });
                    let dist = w.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    if ok && dist > 10.0 * opts.reproduce_tol {
                        found = Some(w);
                        break;
                    }
                    t *= 0.5;
                }
                match found {
                    Some(w) => witnesses.push((
                        Uniqueness::LeftExtensionFamily,
                        "convex curve between e^{v^g} and the chord on [0, x_-)".into(),
                        with_phi(&cand, xs.clone(), w, cand.xi, cand.xi_kind)?,
                    )),
                    None => notes.push("no left witness found below the chord".into()),
                }
            }
        }
        3 => {
            let n = c.x.len();
            let xmax = c.x[n - 1];
            let logr = |x: f64| {
                let g = crate::conventions::interp_linear(&c.x, &c.vg, x);
                g - x.ln()
            };
            let (l0, l1, l2) = (logr(xmax), logr(0.5 * xmax), logr(0.25 * xmax));
            let (s1, s2) = ((l0 - l1) / 2f64.ln(), (l1 - l2) / 2f64.ln());
            if s1 > 0.25 && s1 >= 0.9 * s2 {
                report.kappa = Some(INF);
                flags.push(Uniqueness::LeftExtensionFamily);
                let w: Vec<f64> = xs.iter().zip(&phi).map(|(x, f)| f + 0.1 * x).collect();
                witnesses.push((
                    Uniqueness::LeftExtensionFamily,
                    "F + 0.1 x".into(),
                    with_phi(&cand, xs.clone(), w, cand.xi, cand.xi_kind)?,
                ));
            } else {
                let (r0, r1, r2) = (l0.exp(), l1.exp(), l2.exp());
                let k1 = 2.0 * r0 - r1;
                let k2 = 2.0 * r1 - r2;
                if (k1 - k2).abs() <= 1e-2 * k1.abs().max(1e-12) {
                    report.kappa = Some(k1);
                    let touch = c.x.iter().zip(&c.vg).any(|(x, g)| {
                        *x > 0.0 && (g.exp() - (1.0 + k1 * x)).abs() <= ctol.max(1e-9) * (1.0 + k1 * x)
                    });
                    let end_gap = (1.0 + k1 * xmax - c.vg[n - 1].exp()) <= 1e-6 * (1.0 + k1 * xmax);
                    if !touch && !end_gap {
                        flags.push(Uniqueness::LeftExtensionFamily);
                        let w: Vec<f64> = xs.iter().zip(&phi).map(|(x, f)| 0.5 * (f + 1.0 + k1 * x)).collect();
                        witnesses.push((
                            Uniqueness::LeftExtensionFamily,
                            "average of F and 1 + κx".into(),
                            with_phi(&cand, xs.clone(), w, cand.xi, cand.xi_kind)?,
                        ));
                    }
                } else {
                    mixed_note = Some("κ = lim e^{v^g}/x could not be resolved on the grid".into());
                }
            }
        }
        _ => {}
    }

    // g-sections
    let p = &c.setup.p;
    let mut sections = Vec::new();
    for k in 0..c.theta.len() {
        let (a, b) = (c.x_lo[k], c.x_hi[k]);
        if !(a.is_finite() && b.is_finite() && b - a > 2.0 * dxmax) {
            continue;
        }
        let th = c.theta[k];
        let m = 21;
        let ga = p.g(a, th);
        let gs: Vec<f64> = (0..m).map(|i| (p.g(a + (b - a) * i as f64 / (m - 1) as f64, th) - ga).exp()).collect();
        let scale = gs.iter().cloned().fold(0.0, f64::max).max(1.0);
        let strictly = (1..m - 1).all(|i| gs[i + 1] - 2.0 * gs[i] + gs[i - 1] > 1e-12 * scale);
        sections.push(Section { theta: th, x_lo: a, x_hi: b, strictly_convex: strictly });
        if strictly && b <= xs[xs.len() - 1] + 1e-12 {
            if !flags.contains(&Uniqueness::GSectionFamily) {
                flags.push(Uniqueness::GSectionFamily);
            }
            let gb = p.g(b, th);
            let vk = c.v[k];
            let w: Vec<f64> = xs
                .iter()
                .zip(&phi)
                .map(|(x, f)| {
                    if *x > a && *x < b {
                        (log_sum_exp(ga, (b - x) / (b - a), gb, (x - a) / (b - a)) - vk).exp()
                    } else {
                        *f
                    }
                })
                .collect();
            witnesses.push((
                Uniqueness::GSectionFamily,
                format!("chord of G(·, {th})/V({th}) on [{a}, {b}]"),
                with_phi(&cand, xs.clone(), w, cand.xi, cand.xi_kind)?,
            ));
        }
    }

    // right end
    let mut right = false;
    if c.x_plus.is_finite() && c.right_slope_finite && report.case != 3 {
        right = true;
        let n = xs.len();
        let xp = xs[n - 1];
        let yp = phi[n - 1];
        let s = left_derivative(&xs, &phi, n - 1).max(0.0);
        let mut ext: Vec<f64> = c.x.iter().cloned().filter(|x| *x > xp + 1e-9 * xp.max(1.0)).collect();
        if ext.len() < 10 {
            let span = xp.max(1.0);
            ext = (1..=100).map(|i| xp + span * i as f64 / 100.0).collect();
        }
        let ev: Vec<f64> = ext.par_iter().map(|&x| c.vg_at(x).exp()).collect();
        let a0 = ext
            .iter()
            .zip(&ev)
            .map(|(x, e)| (e - yp - s * (x - xp)) / ((x - xp) * (x - xp)))
            .fold(0.0, f64::max);
        if a0.is_finite() {
            let step = 0.1 * yp.max(1.0) / xp.max(1.0).powi(2);
            let mut x_all = xs.clone();
            x_all.extend(&ext);
            for j in 1..=2 {
                let a = a0 * 1.01 + step * j as f64;
                let mut w = phi.clone();
                w.extend(ext.iter().map(|x| yp + s * (x - xp) + a * (x - xp) * (x - xp)));
                witnesses.push((
                    Uniqueness::RightExtensionFamily,
                    format!("quadratic continuation past x_+ with curvature {a:.4e}"),
                    with_phi(&cand, x_all.clone(), w, INF, XiKind::Natural)?,
                ));
            }
        } else {
            notes.push("right continuation could not dominate e^{v^g}".into());
        }
    }

    let classify = |fl: &[Uniqueness], mixed: bool| {
        if mixed || fl.len() > 1 {
            Uniqueness::Mixed
        } else {
            fl.first().copied().unwrap_or(Uniqueness::Unique)
        }
    };
    let covered = classify(&flags, mixed_note.is_some());
    if right {
        flags.push(Uniqueness::RightExtensionFamily);
    }
    let full = classify(&flags, mixed_note.is_some());
    if let Some(m) = mixed_note {
        notes.push(m);
    }
    let mut out = Vec::new();
    for (family, label, e) in witnesses {
        let err = reproduction_error(c, &e, rho, &opts.tol, report.case == 3)?;
        let distance = sup_distance(&e, &cand);
        out.push(Witness { family, label, phi: e, reproduction_error: err, distance });
    }
    report.uniqueness = Some(full);
    report.uniqueness_covered = Some(covered);
    report.sections = sections;
    report.witnesses = out;
    report.notes.extend(notes);
    Ok(())
}

/// [`check_existence`] followed by [`diagnose_uniqueness`] when consistent.
pub fn invert(
    v: &GridFunction,
    p: &PayoffFamily,
    rho: f64,
    x_grid: &[f64],
    opts: &InverseOptions,
) -> Result<InverseReport> {
    let mut r = check_existence(v, p, rho, x_grid, opts)?;
    if r.verdict == Verdict::Consistent {
        diagnose_uniqueness(&mut r, rho, opts)?;
    }
    Ok(r)
}

/// Speed measure of the candidate eigenfunction.
pub fn recover_measure(report: &InverseReport, rho: f64, tol: &Tolerances) -> Result<SpeedMeasure> {
    let cand = report
        .candidate
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("report has no candidate (inconsistent)".into()))?;
    speed_from_eigen(cand, rho, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conventions::uniform_grid;
    use crate::payoffs::builtin;
    use serde_json::json;

    fn fam(name: &str) -> PayoffFamily {
        builtin(name, &json!({})).unwrap()
    }

    fn curve(t: Vec<f64>, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::from_fn(t, Axis::Theta, f).unwrap()
    }

    fn opts() -> InverseOptions {
        InverseOptions::default()
    }

    #[test]
    fn spline_reproduces_smooth_curve() {
        let t = uniform_grid(0.0, 2.0, 0.05).unwrap();
        let v: Vec<f64> = t.iter().map(|s: &f64| s.sin()).collect();
        let vi = VInterp::new(&t, &v, InterpMode::Spline, 10.0);
        assert!(vi.kink.iter().all(|k| !k));
        for s in [0.013, 0.777, 1.49, 1.999] {
            let (a, d) = vi.eval2(s);
            assert!((a - s.sin()).abs() < 1e-6, "{s}");
            assert!((d - s.cos()).abs() < 1e-4, "{s}");
        }
    }

    #[test]
    fn spline_keeps_kinks() {
        let t = uniform_grid(0.0, 2.0, 0.01).unwrap();
        let f = |s: f64| if s <= 1.0 { s * s } else { 1.5 * s * s - 0.5 };
        let v: Vec<f64> = t.iter().map(|s| f(*s)).collect();
        let vi = VInterp::new(&t, &v, InterpMode::Spline, 10.0);
        let k: Vec<usize> = (0..t.len()).filter(|&i| vi.kink[i]).collect();
        assert_eq!(k, vec![100]);
        assert!((vi.dl[100] - 2.0).abs() < 1e-9);
        assert!((vi.dr[100] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn theta_end_parse() {
        assert_eq!("open:2".parse::<ThetaEnd>().unwrap(), ThetaEnd::Open(2.0));
        assert_eq!("unbounded".parse::<ThetaEnd>().unwrap(), ThetaEnd::Unbounded);
        assert!("open:x".parse::<ThetaEnd>().is_err());
    }

    #[test]
    fn brownian_motion_round_trip() {
        let t = uniform_grid(0.0, 0.99, 0.01).unwrap();
        let v = curve(t, |s| s * s.atanh() + 0.5 * (1.0 - s * s).ln());
        let x = uniform_grid(0.0, 3.0, 1e-3).unwrap();
        let r = invert(&v, &fam("linear"), 0.5, &x, &opts()).unwrap();
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        assert_eq!(r.case, 1);
        let c = &r.conjugate;
        for (x, g) in c.x.iter().zip(&c.vg).filter(|(x, _)| **x <= 2.0) {
            assert!((g - x.cosh().ln()).abs() < 1e-5, "{x}: {g}");
        }
        // spacing 0.01 next to the singularity of v' at θ = 1
        assert!((r.x_plus - 0.99f64.atanh()).abs() < 2e-2);
        assert_eq!(r.uniqueness_covered, Some(Uniqueness::Unique));
        assert_eq!(r.uniqueness, Some(Uniqueness::RightExtensionFamily));
        assert_eq!(r.witnesses.len(), 2);
        for w in &r.witnesses {
            assert!(w.reproduction_error < 1e-4, "{}", w.reproduction_error);
        }
        let m = recover_measure(&r, 0.5, &Tolerances::default()).unwrap();
        for (x, d) in m.density.grid().iter().zip(m.density.values()) {
            if (0.1..=2.0).contains(x) {
                assert!((d - 1.0).abs() < 1e-2, "{x}: {d}");
            }
        }
    }

    #[test]
    fn concave_conjugate_is_inconsistent() {
        let t = uniform_grid(1.0, 2.0, 1e-3).unwrap();
        let v = curve(t, |s| -0.5 - s.ln());
        let x = uniform_grid(0.0, 3.0, 1e-3).unwrap();
        let r = invert(&v, &fam("inverse-quadratic"), 0.5, &x, &opts()).unwrap();
        for (x, g) in r.conjugate.x.iter().zip(&r.conjugate.vg) {
            assert!((g - (1.0 + x).ln() / 2.0).abs() < 1e-6, "{x}");
        }
        assert_eq!(r.verdict, Verdict::Inconsistent);
        assert_eq!(r.reason.as_deref(), Some("e^{v^g} non-convex"));
        assert!(r.candidate.is_none());
    }

    #[test]
    fn tanh_has_empty_subdifferentials() {
        let t = uniform_grid(0.0, 1.0, 0.01).unwrap();
        let v = curve(t, |s| s);
        let x = uniform_grid(0.0, 8.0, 1e-2).unwrap();
        let r = invert(&v, &fam("tanh"), 0.5, &x, &opts()).unwrap();
        assert_eq!(r.x_minus, INF);
        assert_eq!(r.case, 3);
        for (x, g) in r.conjugate.x.iter().zip(&r.conjugate.vg) {
            assert!((g - x * x).abs() < 1e-9, "{x}");
        }
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        assert_eq!(r.kappa, Some(INF));
        assert_eq!(r.uniqueness, Some(Uniqueness::LeftExtensionFamily));
    }

    #[test]
    fn sticky_point_recovers_atom() {
        let t = uniform_grid(0.0, 12.0, 0.01).unwrap();
        let v = curve(t, |s| {
            if s <= 2.0 {
                s * s / 4.0
            } else if s <= 3.0 {
                s - 1.0
            } else {
                2.0 / (3.0 * 3f64.sqrt()) * s.powf(1.5)
            }
        });
        let x = uniform_grid(0.0, 2.0, 1e-3).unwrap();
        let rho = 0.5;
        let r = invert(&v, &fam("linear"), rho, &x, &opts()).unwrap();
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        let m = recover_measure(&r, rho, &Tolerances::default()).unwrap();
        assert_eq!(m.atoms.len(), 1, "{:?}", m.atoms);
        assert!((m.atoms[0].x - 1.0).abs() < 2e-3);
        assert!((m.atoms[0].mass - 1.0 / (2.0 * rho)).abs() < 0.05);
    }

    #[test]
    fn absorbing_boundary_is_unique() {
        let t: Vec<f64> = (0..=600).map(|i| 0.05 * i as f64).collect();
        let v = curve(t, |s| s.cosh().ln());
        let x = uniform_grid(0.0, 1.5, 1e-3).unwrap();
        let o = InverseOptions { upper: ThetaEnd::Unbounded, ..opts() };
        let r = invert(&v, &fam("linear"), 0.5, &x, &o).unwrap();
        assert!((r.x_plus - 1.0).abs() < 1e-6, "{}", r.x_plus);
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        let cand = r.candidate.as_ref().unwrap();
        assert_eq!(cand.xi_kind, XiKind::Absorbing);
        assert_eq!(r.uniqueness, Some(Uniqueness::Unique));
        assert!(r.witnesses.is_empty());
        let g = r.conjugate.vg_at(0.5);
        assert!((g - (0.5 * 0.5f64.atanh() + 0.5 * 0.75f64.ln())).abs() < 1e-8);
    }

    #[test]
    fn powers_give_left_extension() {
        let t = uniform_grid(1.0001, 1.9999, 1e-4).unwrap();
        let v = curve(t, |s| (s / 2.0) * s.ln() + ((2.0 - s) / 2.0) * (2.0 - s).ln() - 2f64.ln());
        let x = uniform_grid(0.0, 5.0, 1e-3).unwrap();
        let o = InverseOptions { lower: ThetaEnd::Open(1.0), upper: ThetaEnd::Open(2.0), ..opts() };
        let r = invert(&v, &fam("power"), 0.5, &x, &o).unwrap();
        assert!((r.x_minus - 1.0).abs() < 1e-3, "{}", r.x_minus);
        assert_eq!(r.x_plus, INF);
        assert_eq!(r.case, 2);
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        assert_eq!(r.uniqueness, Some(Uniqueness::LeftExtensionFamily));
        let w = &r.witnesses[0];
        assert!(w.reproduction_error < 1e-3);
        for (x, y) in w.phi.grid().iter().zip(w.phi.phi.values()).filter(|(x, _)| **x <= 1.0) {
            assert!((y - (1.0 + x * x)).abs() < 2e-3, "{x}: {y}");
        }
    }

    fn ratio_v(th: f64) -> f64 {
        let xs = bisect(0.0, 1.2, |x: f64| x * x * x.tanh() - th * (1.0 - x * x.tanh()));
        (th * xs / (th + xs)).ln() - xs.cosh().ln()
    }

    #[test]
    fn ratio_family_has_right_extension() {
        let t: Vec<f64> = (0..=1400).map(|i| 10f64.powf(-9.0 + 14.0 * i as f64 / 1400.0)).collect();
        let v = curve(t, ratio_v);
        let x = uniform_grid(0.0, 2.0, 1e-3).unwrap();
        let o = InverseOptions { upper: ThetaEnd::Unbounded, ..opts() };
        let r = invert(&v, &fam("ratio"), 0.5, &x, &o).unwrap();
        assert!((r.x_plus - 1.19968).abs() < 1e-4, "{}", r.x_plus);
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        assert_eq!(r.uniqueness, Some(Uniqueness::RightExtensionFamily));
        let xp = 1.199678640257734f64;
        let g = r.conjugate.vg_at(1.8);
        assert!((g - (1.8 * xp.cosh() / xp).ln()).abs() < 1e-4, "{g}");
    }

    #[test]
    fn g_section_witness_is_the_chord() {
        let t = uniform_grid(0.0, 2.0, 0.01).unwrap();
        let v = curve(t, |s| if s <= 1.0 { s * s } else { 1.5 * s * s - 0.5 });
        let x = uniform_grid(0.0, 6.0, 1e-3).unwrap();
        let o = InverseOptions { upper: ThetaEnd::Unbounded, ..opts() };
        let r = invert(&v, &fam("linear"), 0.5, &x, &o).unwrap();
        assert_eq!(r.verdict, Verdict::Consistent, "{:?}", r.reason);
        assert_eq!(r.uniqueness, Some(Uniqueness::GSectionFamily));
        let e = std::f64::consts::E;
        let w = &r.witnesses[0];
        for (x, y) in w.phi.grid().iter().zip(&w.phi.psi) {
            if *x > 2.0 && *x < 3.0 {
                assert!((y - ((e * e - e) * x + 3.0 * e - 2.0 * e * e).ln()).abs() < 1e-6, "{x}");
            }
        }
    }

    #[test]
    fn non_g_convex_input_is_rejected() {
        let t = uniform_grid(0.0, 1.0, 0.01).unwrap();
        let v = curve(t, |s| s * s * 0.25 - 0.3 * (s * 10.0).sin().powi(2));
        let x = uniform_grid(0.0, 3.0, 1e-3).unwrap();
        let e = check_existence(&v, &fam("linear"), 0.5, &x, &opts()).unwrap_err();
        assert!(matches!(e, Error::NotUConvex { .. }));
    }

    #[test]
    fn values_csv_reads_log() {
        let s = "theta,V,x_star\n0,1,0\n0.5,2,1\n";
        let g = read_values_csv(s.as_bytes()).unwrap();
        assert!((g.values()[1] - 2f64.ln()).abs() < 1e-15);
    }
}
