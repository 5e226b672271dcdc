//! Payoff families `G(x, θ)` with `g = log G`, analytic partials and a
//! single-crossing check on a lattice.

use std::io::Read;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::uconvex::{read_columns, Coupling, Interval, Orientation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monotone {
    Nondecreasing,
    Nonincreasing,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    /// g = θx
    Linear,
    /// g = θ log x
    Power,
    Call,
    Put,
    /// G = θx/(θ+x)
    Ratio,
    /// g = x² + θ tanh x
    Tanh,
    /// g = -θ²/(2(1+x))
    InverseQuadratic,
    /// g = c x² + (1 - b e^{-x}) θ^p
    Separable { c: f64, b: f64, p: f64 },
    Tabulated(Table),
}

/// Lattice of log-payoff values, bilinear in between.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    xs: Vec<f64>,
    ts: Vec<f64>,
    /// `lg[i][j] = log G(xs[i], ts[j])`, `-inf` where `G <= 0`.
    lg: Vec<Vec<f64>>,
}

impl Table {
    fn cell(v: &[f64], t: f64) -> (usize, f64) {
        let n = v.len();
        let j = match v.binary_search_by(|p| p.partial_cmp(&t).unwrap()) {
            Ok(j) => j.min(n - 2),
            Err(0) => 0,
            Err(j) => (j - 1).min(n - 2),
        };
        (j, ((t - v[j]) / (v[j + 1] - v[j])).clamp(0.0, 1.0))
    }

    fn corners(&self, x: f64, t: f64) -> (usize, usize, f64, f64, [f64; 4]) {
        let (i, a) = Table::cell(&self.xs, x);
        let (j, b) = Table::cell(&self.ts, t);
        let c = [self.lg[i][j], self.lg[i + 1][j], self.lg[i][j + 1], self.lg[i + 1][j + 1]];
        (i, j, a, b, c)
    }

    fn g(&self, x: f64, t: f64) -> f64 {
        let (_, _, a, b, c) = self.corners(x, t);
        if c.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        (1.0 - a) * (1.0 - b) * c[0] + a * (1.0 - b) * c[1] + (1.0 - a) * b * c[2] + a * b * c[3]
    }

    fn gx(&self, x: f64, t: f64) -> f64 {
        let (i, _, _, b, c) = self.corners(x, t);
        let h = self.xs[i + 1] - self.xs[i];
        ((1.0 - b) * (c[1] - c[0]) + b * (c[3] - c[2])) / h
    }

    fn gt(&self, x: f64, t: f64) -> f64 {
        let (_, j, a, _, c) = self.corners(x, t);
        let h = self.ts[j + 1] - self.ts[j];
        ((1.0 - a) * (c[2] - c[0]) + a * (c[3] - c[1])) / h
    }

    fn gxt(&self, x: f64, t: f64) -> f64 {
        let (i, j, _, _, c) = self.corners(x, t);
        let hx = self.xs[i + 1] - self.xs[i];
        let ht = self.ts[j + 1] - self.ts[j];
        (c[3] - c[2] - c[1] + c[0]) / (hx * ht)
    }
}

/// A payoff family ready for use as a coupling with `y = x`, `z = θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffFamily {
    name: String,
    kind: Kind,
    pub x_domain: Interval,
    pub theta_domain: Interval,
    pub monotone_in_x: Monotone,
    pub sm_orientation: Orientation,
    /// Partials come from finite differences of tabulated data.
    pub numeric: bool,
    params: Value,
}

const INF: f64 = f64::INFINITY;

fn param(params: &Value, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::InvalidParameter(format!("parameter `{key}` must be a number"))),
    }
}

/// Names accepted by [`builtin`].
pub const CATALOG: &[&str] = &[
    "linear",
    "exp",
    "power",
    "call",
    "put",
    "ratio",
    "tanh",
    "inverse-quadratic",
    "separable",
];

/// Look up a builtin family by name.
pub fn builtin(name: &str, params: &Value) -> Result<PayoffFamily> {
    let half = Interval::new(0.0, INF, true, false);
    let pos = Interval::new(0.0, INF, false, false);
    let (kind, x_domain, theta_domain, mono) = match name {
        "linear" | "exp" => (Kind::Linear, half, half, Monotone::Nondecreasing),
        "power" => (Kind::Power, half, half, Monotone::Nondecreasing),
        "call" => (
            Kind::Call,
            half,
            Interval::new(-INF, INF, false, false),
            Monotone::Nondecreasing,
        ),
        "put" => (Kind::Put, half, half, Monotone::Nonincreasing),
        "ratio" => (Kind::Ratio, half, pos, Monotone::Nondecreasing),
        "tanh" => (Kind::Tanh, half, half, Monotone::Nondecreasing),
        "inverse-quadratic" => (
            Kind::InverseQuadratic,
            half,
            Interval::new(1.0, INF, true, false),
            Monotone::Nondecreasing,
        ),
        "separable" => {
            let c = param(params, "h_scale", 0.5)?;
            let b = param(params, "f_b", 0.5)?;
            let p = param(params, "w_power", 1.0)?;
            if !(c >= 0.0 && b > 0.0 && b < 1.0 && p > 0.0) {
                return Err(Error::InvalidParameter(
                    "separable needs h_scale >= 0, 0 < f_b < 1, w_power > 0".into(),
                ));
            }
            (Kind::Separable { c, b, p }, half, half, Monotone::Nondecreasing)
        }
        other => return Err(Error::UnknownFamily(other.to_string())),
    };
    Ok(PayoffFamily {
        name: name.to_string(),
        kind,
        x_domain,
        theta_domain,
        monotone_in_x: mono,
        sm_orientation: Orientation::Increasing,
        numeric: false,
        params: params.clone(),
    })
}

/// JSON family descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub name: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub domains: Option<Domains>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domains {
    pub x: Interval,
    pub theta: Interval,
}

impl FamilyDescriptor {
    pub fn build(&self) -> Result<PayoffFamily> {
        let mut p = builtin(&self.name, &self.params)?;
        if let Some(d) = self.domains {
            p.x_domain = d.x;
            p.theta_domain = d.theta;
        }
        Ok(p)
    }
}

impl PayoffFamily {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &Value {
        &self.params
    }

    pub fn with_theta_domain(mut self, d: Interval) -> Self {
        self.theta_domain = d;
        self
    }

    pub fn descriptor(&self) -> FamilyDescriptor {
        FamilyDescriptor {
            name: self.name.clone(),
            params: self.params.clone(),
            domains: Some(Domains { x: self.x_domain, theta: self.theta_domain }),
        }
    }

    /// Family given as a tabulated `x,theta,G` lattice.
    pub fn tabulated<R: Read>(name: &str, r: R) -> Result<PayoffFamily> {
        let (cols, rows) = read_columns(r)?;
        if cols.len() != 3 || cols[0] != "x" || cols[1] != "theta" || cols[2] != "G" {
            return Err(Error::Parse("expected header `x,theta,G`".into()));
        }
        let mut xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let mut ts: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        for v in [&mut xs, &mut ts] {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
        }
        if xs.len() < 2 || ts.len() < 2 || xs.len() * ts.len() != rows.len() {
            return Err(Error::Parse("tabulated family must be a full lattice".into()));
        }
        let mut lg = vec![vec![f64::NAN; ts.len()]; xs.len()];
        for r in &rows {
            let i = xs.binary_search_by(|p| p.partial_cmp(&r[0]).unwrap()).unwrap();
            let j = ts.binary_search_by(|p| p.partial_cmp(&r[1]).unwrap()).unwrap();
            if r[2] < 0.0 {
                return Err(Error::InvalidParameter("G must be nonnegative".into()));
            }
            lg[i][j] = if r[2] > 0.0 { r[2].ln() } else { f64::NEG_INFINITY };
        }
        if lg.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Parse("duplicate lattice point".into()));
        }
        let x_domain = Interval::closed(xs[0], *xs.last().unwrap());
        let theta_domain = Interval::closed(ts[0], *ts.last().unwrap());
        let mut fam = PayoffFamily {
            name: name.to_string(),
            kind: Kind::Tabulated(Table { xs, ts, lg }),
            x_domain,
            theta_domain,
            monotone_in_x: Monotone::Nondecreasing,
            sm_orientation: Orientation::Unknown,
            numeric: true,
            params: Value::Null,
        };
        let rep = verify_sm(&fam, &LatticeSpec::default())?;
        fam.sm_orientation = rep.orientation;
        fam.monotone_in_x = rep.monotone_in_x;
        Ok(fam)
    }

    /// `G(x, θ) >= 0`.
    pub fn big_g(&self, x: f64, t: f64) -> f64 {
        let g = self.g(x, t);
        if g == f64::NEG_INFINITY {
            0.0
        } else {
            g.exp()
        }
    }

    /// `g = log G`; `-inf` where `G = 0`.
    pub fn g(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            Kind::Linear => t * x,
            Kind::Power => {
                if x > 0.0 {
                    t * x.ln()
                } else if t == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Kind::Call => log_pos(x - t),
            Kind::Put => log_pos(t - x),
            Kind::Ratio => {
                if x > 0.0 && t > 0.0 {
                    t.ln() + x.ln() - (t + x).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Kind::Tanh => x * x + t * x.tanh(),
            Kind::InverseQuadratic => -t * t / (2.0 * (1.0 + x)),
            Kind::Separable { c, b, p } => c * x * x + (1.0 - b * (-x).exp()) * t.powf(*p),
            Kind::Tabulated(tb) => tb.g(x, t),
        }
    }

    pub fn g_x(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            Kind::Linear => t,
            Kind::Power => t / x,
            Kind::Call => 1.0 / (x - t),
            Kind::Put => -1.0 / (t - x),
            Kind::Ratio => t / (x * (t + x)),
            Kind::Tanh => 2.0 * x + t / x.cosh().powi(2),
            Kind::InverseQuadratic => t * t / (2.0 * (1.0 + x).powi(2)),
            Kind::Separable { c, b, p } => 2.0 * c * x + b * (-x).exp() * t.powf(*p),
            Kind::Tabulated(tb) => tb.gx(x, t),
        }
    }

    pub fn g_theta(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            Kind::Linear => x,
            Kind::Power => x.ln(),
            Kind::Call => -1.0 / (x - t),
            Kind::Put => 1.0 / (t - x),
            Kind::Ratio => x / (t * (t + x)),
            Kind::Tanh => x.tanh(),
            Kind::InverseQuadratic => -t / (1.0 + x),
            Kind::Separable { b, p, .. } => {
                (1.0 - b * (-x).exp()) * p * t.powf(p - 1.0)
            }
            Kind::Tabulated(tb) => tb.gt(x, t),
        }
    }

    pub fn g_xtheta(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            Kind::Linear => 1.0,
            Kind::Power => 1.0 / x,
            Kind::Call => 1.0 / (x - t).powi(2),
            Kind::Put => 1.0 / (t - x).powi(2),
            Kind::Ratio => 1.0 / (t + x).powi(2),
            Kind::Tanh => 1.0 / x.cosh().powi(2),
            Kind::InverseQuadratic => t / (1.0 + x).powi(2),
            Kind::Separable { b, p, .. } => b * (-x).exp() * p * t.powf(p - 1.0),
            Kind::Tabulated(tb) => tb.gxt(x, t),
        }
    }
}

fn log_pos(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl Coupling for PayoffFamily {
    fn eval(&self, y: f64, z: f64) -> f64 {
        self.g(y, z)
    }
    fn d_y(&self, y: f64, z: f64) -> f64 {
        self.g_x(y, z)
    }
    fn d_z(&self, y: f64, z: f64) -> f64 {
        self.g_theta(y, z)
    }
    fn d_yz(&self, y: f64, z: f64) -> f64 {
        self.g_xtheta(y, z)
    }
    fn y_domain(&self) -> Interval {
        self.x_domain
    }
    fn z_domain(&self) -> Interval {
        self.theta_domain
    }
    fn orientation(&self) -> Orientation {
        self.sm_orientation
    }
}

/// Verification lattice: `nx x ntheta` interior points of the domains,
/// unbounded ends truncated at the caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub nx: usize,
    pub ntheta: usize,
    pub x_cap: f64,
    pub theta_cap: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec { nx: 64, ntheta: 64, x_cap: 50.0, theta_cap: 50.0 }
    }
}

fn lattice_axis(d: &Interval, n: usize, cap: f64) -> Vec<f64> {
    let lo = d.lo.max(-cap);
    let hi = d.hi.min(cap);
    if hi <= lo {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * (k as f64 + 0.5) / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmReport {
    pub min_g_xtheta: f64,
    pub max_g_xtheta: f64,
    pub orientation: Orientation,
    /// `G G_xθ > G_x G_θ` holds at every lattice point with `G > 0`.
    pub multiplicative_ok: bool,
    /// Sign of `g_x` observed on the lattice.
    pub monotone_in_x: Monotone,
    /// Monotonicity in x agrees with orientation (nondecreasing with
    /// increasing, nonincreasing with decreasing).
    pub monotone_consistent: bool,
    /// Θ collapsed to a single lattice point.
    pub degenerate_theta: bool,
    pub numeric: bool,
}

/// Sample `g_xθ` on the lattice and classify the single-crossing orientation.
pub fn verify_sm(p: &PayoffFamily, lat: &LatticeSpec) -> Result<SmReport> {
    let xs = lattice_axis(&p.x_domain, lat.nx.max(1), lat.x_cap);
    let ts = lattice_axis(&p.theta_domain, lat.ntheta.max(1), lat.theta_cap);
    let (mut lo, mut hi) = (INF, -INF);
    let mut mult = true;
    let (mut gx_min, mut gx_max) = (INF, -INF);
    for &x in &xs {
        for &t in &ts {
            let g = p.g(x, t);
            if !g.is_finite() {
                continue;
            }
            let c = p.g_xtheta(x, t);
            lo = lo.min(c);
            hi = hi.max(c);
            let gx = p.g_x(x, t);
            gx_min = gx_min.min(gx);
            gx_max = gx_max.max(gx);
            // G G_xθ - G_x G_θ = G² g_xθ
            if !(c > 0.0) {
                mult = false;
            }
        }
    }
    if lo > hi {
        return Err(Error::InvalidParameter("payoff vanishes on the whole lattice".into()));
    }
    let orientation = if lo > 0.0 {
        Orientation::Increasing
    } else if hi < 0.0 {
        Orientation::Decreasing
    } else {
        return Err(Error::MixedSign { min: lo, max: hi });
    };
    let monotone_in_x = if gx_min >= 0.0 {
        Monotone::Nondecreasing
    } else if gx_max <= 0.0 {
        Monotone::Nonincreasing
    } else {
        p.monotone_in_x
    };
    let monotone_consistent = matches!(
        (monotone_in_x, orientation),
        (Monotone::Nondecreasing, Orientation::Increasing)
            | (Monotone::Nonincreasing, Orientation::Decreasing)
    );
    Ok(SmReport {
        min_g_xtheta: lo,
        max_g_xtheta: hi,
        orientation,
        multiplicative_ok: mult,
        monotone_in_x,
        monotone_consistent,
        degenerate_theta: ts.len() == 1,
        numeric: p.numeric,
    })
}
