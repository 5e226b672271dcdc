//! Generalized diffusions on `[0, ξ)` reflected at 0: speed measures,
//! eigenfunctions and the maps between them.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conventions::{
    ext_f64, interp_linear, left_derivative, lower_hull, median, right_derivative,
    second_diff_raw, Tolerances,
};
use crate::error::{Error, Result};
use crate::uconvex::{fmt_ext, read_columns, Axis, GridFunction};

/// `φ` above this is treated as `+∞` and the grid is cut.
pub const PHI_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiKind {
    Absorbing,
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub mass: f64,
}

/// Speed measure `m(dx) = density(x) dx + Σ mass δ_x` on `[0, ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMeasure {
    pub density: GridFunction,
    pub atoms: Vec<Atom>,
    pub xi: f64,
    pub xi_kind: XiKind,
    pub mass_at_zero: f64,
}

#[derive(Serialize, Deserialize)]
struct SpeedMeasureJson {
    grid: Vec<f64>,
    #[serde(with = "ext_f64::vec")]
    density: Vec<f64>,
    #[serde(default)]
    atoms: Vec<Atom>,
    #[serde(with = "ext_f64")]
    xi: f64,
    xi_kind: XiKind,
    #[serde(default)]
    mass_at_zero: f64,
}

impl Serialize for SpeedMeasure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SpeedMeasureJson {
            grid: self.density.grid().to_vec(),
            density: self.density.values().to_vec(),
            atoms: self.atoms.clone(),
            xi: self.xi,
            xi_kind: self.xi_kind,
            mass_at_zero: self.mass_at_zero,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpeedMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = SpeedMeasureJson::deserialize(d)?;
        let density =
            GridFunction::new(j.grid, j.density, Axis::X).map_err(serde::de::Error::custom)?;
        SpeedMeasure::new(density, j.atoms, j.xi, j.xi_kind, j.mass_at_zero)
            .map_err(serde::de::Error::custom)
    }
}

impl SpeedMeasure {
    /// Validated constructor. An atom at 0 is folded into `mass_at_zero`.
    pub fn new(
        density: GridFunction,
        atoms: Vec<Atom>,
        xi: f64,
        xi_kind: XiKind,
        mass_at_zero: f64,
    ) -> Result<Self> {
        let g = density.grid();
        if g[0] != 0.0 {
            return Err(Error::InvalidMeasure("density grid must start at 0".into()));
        }
        if xi.is_nan() || xi <= 0.0 {
            return Err(Error::InvalidMeasure("xi must be positive (xi = 0 is not supported)".into()));
        }
        if *g.last().unwrap() > xi {
            return Err(Error::InvalidMeasure("density grid extends past xi".into()));
        }
        if density.values().iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidMeasure("density must be nonnegative".into()));
        }
        if mass_at_zero.is_nan() || mass_at_zero < 0.0 {
            return Err(Error::InvalidMeasure("mass at 0 must be nonnegative".into()));
        }
        let mut m0 = mass_at_zero;
        let mut kept = Vec::with_capacity(atoms.len());
        for a in atoms {
            if !(a.mass > 0.0) {
                return Err(Error::InvalidMeasure(format!("atom at {} has mass {}", a.x, a.mass)));
            }
            if a.x == 0.0 {
                m0 += a.mass;
            } else if a.x < 0.0 || a.x >= xi || a.x > *g.last().unwrap() {
                return Err(Error::InvalidMeasure(format!("atom at {} outside the grid", a.x)));
            } else {
                kept.push(a);
            }
        }
        kept.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        Ok(SpeedMeasure { density, atoms: kept, xi, xi_kind, mass_at_zero: m0 })
    }

    /// Absolutely continuous measure, natural at `ξ = +∞` (or at the grid end).
    pub fn from_density(density: GridFunction) -> Result<Self> {
        SpeedMeasure::new(density, Vec::new(), f64::INFINITY, XiKind::Natural, 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SpeedMeasure::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `φ(x) = 1 / E_0[e^{-ρ H_x}]` sampled on a grid, with `ψ = log φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenfunction {
    pub phi: GridFunction,
    pub psi: Vec<f64>,
    /// Right end of the state space; equals the last node when the solve was cut.
    pub xi: f64,
    pub xi_kind: XiKind,
    /// The solve stopped because `φ` exceeded [`PHI_CAP`].
    pub truncated: bool,
}

impl Serialize for Eigenfunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            x: &'a [f64],
            #[serde(with = "ext_f64::vec")]
            phi: Vec<f64>,
            #[serde(with = "ext_f64")]
            xi: f64,
            xi_kind: XiKind,
            truncated: bool,
        }
        Out {
            x: self.phi.grid(),
            phi: self.phi.values().to_vec(),
            xi: self.xi,
            xi_kind: self.xi_kind,
            truncated: self.truncated,
        }
        .serialize(s)
    }
}

impl Eigenfunction {
    /// Wrap sampled values; `psi` is computed from `phi`.
    pub fn from_phi(phi: GridFunction, xi: f64, xi_kind: XiKind) -> Eigenfunction {
        let psi = phi.values().iter().map(|v| v.ln()).collect();
        Eigenfunction { phi, psi, xi, xi_kind, truncated: false }
    }

    pub(crate) fn from_psi(grid: Vec<f64>, psi: Vec<f64>, xi: f64, xi_kind: XiKind, truncated: bool) -> Result<Self> {
        let phi = GridFunction::new(grid, psi.iter().map(|p| p.exp()).collect(), Axis::X)?;
        Ok(Eigenfunction { phi, psi, xi, xi_kind, truncated })
    }

    pub fn grid(&self) -> &[f64] {
        self.phi.grid()
    }

    pub fn psi_function(&self) -> GridFunction {
        GridFunction::new(self.phi.grid().to_vec(), self.psi.clone(), Axis::X)
            .expect("psi shares the phi grid")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "phi"])?;
        for (x, p) in self.phi.grid().iter().zip(self.phi.values()) {
            wr.write_record([fmt_ext(*x), fmt_ext(*p)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Eigenfunction> {
        let (cols, rows) = read_columns(r)?;
        if cols != ["x", "phi"] {
            return Err(Error::Parse("expected header `x,phi`".into()));
        }
        let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let p: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let xi = *x.last().unwrap_or(&0.0);
        Ok(Eigenfunction::from_phi(GridFunction::new(x, p, Axis::X)?, xi, XiKind::Natural))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Eigenfunction> {
        Eigenfunction::read_csv(std::fs::File::open(path)?)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

fn log_cosh(a: f64) -> f64 {
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// One cell of `φ'' = k² φ` in log form: `(ψ, w = φ'/φ)` across width `h`.
fn cell_step(psi: f64, w: f64, k2: f64, h: f64) -> (f64, f64) {
    let k = k2.sqrt();
    let a = k * h;
    // tanh(a)/k, with the k -> 0 limit h
    let t = if a < 1e-8 { h } else { a.tanh() / k };
    let psi_new = psi + log_cosh(a) + (w * t).ln_1p();
    let w_new = (k2 * t + w) / (1.0 + w * t);
    (psi_new, w_new)
}

/// Solve `f'(y-) - f'(x-) = ∫_{[x,y)} 2ρ f dm` with `f(0) = 1`, `f'(0-) = 0`.
///
/// Density is piecewise constant per cell (mean of the two end values), so
/// each cell is propagated exactly.
pub fn eigen_from_string(m: &SpeedMeasure, rho: f64) -> Result<Eigenfunction> {
    check_rho(rho)?;
    let dens = m.density.values();
    if m.mass_at_zero.is_infinite() || dens[0].is_infinite() {
        return Err(Error::DegenerateString);
    }
    if dens.iter().any(|d| d.is_infinite()) {
        return Err(Error::InvalidMeasure("infinite density inside the grid; set xi instead".into()));
    }
    let g = m.density.grid();
    // nodes: density grid plus off-grid atom locations
    let mut nodes: Vec<(f64, f64, f64)> = g.iter().zip(dens).map(|(x, d)| (*x, *d, 0.0)).collect();
    for a in &m.atoms {
        match nodes.binary_search_by(|n| n.0.partial_cmp(&a.x).unwrap()) {
            Ok(j) => nodes[j].2 += a.mass,
            Err(j) => {
                let d = interp_linear(g, dens, a.x);
                nodes.insert(j, (a.x, d, a.mass));
            }
        }
    }
    let cap = PHI_CAP.ln();
    let mut xs = vec![0.0];
    let mut psi = vec![0.0];
    let mut w = 2.0 * rho * m.mass_at_zero;
    let mut truncated = false;
    for i in 1..nodes.len() {
        let h = nodes[i].0 - nodes[i - 1].0;
        let k2 = rho * (nodes[i - 1].1 + nodes[i].1);
        let (p, wn) = cell_step(*psi.last().unwrap(), w, k2, h);
        if p > cap || !p.is_finite() {
            truncated = true;
            break;
        }
        xs.push(nodes[i].0);
        psi.push(p);
        w = wn + 2.0 * rho * nodes[i].2;
    }
    let xi = if truncated { *xs.last().unwrap() } else { m.xi };
    if xs.len() < 2 {
        return Err(Error::InvalidMeasure("eigenfunction exceeds the cap on the first cell".into()));
    }
    Eigenfunction::from_psi(xs, psi, xi, m.xi_kind, truncated)
}

/// Absolutely continuous case of [`eigen_from_string`]: `½σ² f'' = ρ f`, `m(dx) = σ⁻² dx`.
pub fn eigen_from_density(m: &SpeedMeasure, rho: f64) -> Result<Eigenfunction> {
    if !m.atoms.is_empty() || m.mass_at_zero > 0.0 {
        return Err(Error::InvalidMeasure("density solver does not accept atoms".into()));
    }
    eigen_from_string(m, rho)
}

/// Recover the speed measure from a convex increasing eigenfunction.
///
/// Smooth parts give `density = φ''/(2ρφ)`; derivative jumps above the kink
/// threshold become atoms of mass `[φ'(x+) - φ'(x-)]/(2ρφ(x))`.
pub fn speed_from_eigen(phi: &Eigenfunction, rho: f64, tol: &Tolerances) -> Result<SpeedMeasure> {
    check_rho(rho)?;
    tol.validate()?;
    let x = phi.phi.grid();
    let y = phi.phi.values();
    let n = x.len();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMeasure("eigenfunction must be finite on its grid".into()));
    }
    if (y[0] - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { phi0: y[0] });
    }
    if n < 3 {
        return Err(Error::InvalidGrid("need at least three nodes".into()));
    }
    let hull = lower_hull(x, y);
    let slopes: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
    for i in 0..n {
        if y[i] - hull[i] > tol.convexity_tol * y[i].abs().max(1.0) {
            let worst = (1..n - 1)
                .min_by(|&a, &b| second_diff_raw(x, y, a).partial_cmp(&second_diff_raw(x, y, b)).unwrap())
                .unwrap_or(i);
            return Err(Error::NotConvex { x: x[worst] });
        }
    }
    if slopes[0] < -tol.convexity_tol / (x[1] - x[0]) {
        return Err(Error::NotConvex { x: 0.0 });
    }
    // curvature estimate per interior node
    let hbar: Vec<f64> = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.0 } else { 0.5 * (x[i + 1] - x[i - 1]) })
        .collect();
    let jump: Vec<f64> = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.0 } else { slopes[i] - slopes[i - 1] })
        .collect();
    let curv: Vec<f64> = (0..n).map(|i| if hbar[i] > 0.0 { jump[i] / hbar[i] } else { 0.0 }).collect();
    let flagged: Vec<bool> = (0..n)
        .map(|i| {
            if i < 2 || i + 2 >= n {
                return false;
            }
            let lo = i.saturating_sub(5).max(1);
            let hi = (i + 5).min(n - 2);
            let nb: Vec<f64> = (lo..=hi).filter(|&j| j != i).map(|j| curv[j].max(0.0)).collect();
            let floor = tol.convexity_tol * y[i].max(1.0);
            jump[i] > tol.kink_factor * median(&nb) * hbar[i] && jump[i] > floor
        })
        .collect();
    // group consecutive flagged nodes
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if flagged[i] {
            let a = i;
            while i + 1 < n && flagged[i + 1] {
                i += 1;
            }
            groups.push((a, i));
        }
        i += 1;
    }
    let mut density: Vec<f64> =
        (0..n).map(|i| (curv[i] / (2.0 * rho * y[i])).max(0.0)).collect();
    let mut atoms = Vec::with_capacity(groups.len());
    for &(a, b) in &groups {
        let dl = left_derivative(x, y, a);
        let dr = right_derivative(x, y, b);
        // location: jump-weighted mean of the flagged nodes
        let wsum: f64 = (a..=b).map(|k| jump[k]).sum();
        let loc = (a..=b).map(|k| jump[k] * x[k]).sum::<f64>() / wsum;
        let f_at = interp_linear(x, y, loc);
        atoms.push(Atom { x: loc, mass: ((dr - dl) / (2.0 * rho * f_at)).max(0.0) });
        let (l, r) = (a - 1, b + 1);
        for k in a..=b {
            let t = (x[k] - x[l]) / (x[r] - x[l]);
            density[k] = density[l] + t * (density[r] - density[l]);
        }
    }
    // ends: one-sided extrapolation from the interior
    density[0] = (2.0 * density[1] - density[2]).max(0.0);
    density[n - 1] = (2.0 * density[n - 2] - density[n - 3]).max(0.0);
    let d0 = right_derivative(x, y, 0);
    let m0_floor = tol.kink_factor * curv[1].abs() * (x[1] - x[0]) + tol.convexity_tol;
    let mass_at_zero = if d0 > m0_floor { d0 / (2.0 * rho) } else { 0.0 };
    let dens = GridFunction::new(x.to_vec(), density, Axis::X)?;
    let xi = if phi.xi.is_finite() { phi.xi.max(x[n - 1]) } else { phi.xi };
    SpeedMeasure::new(dens, atoms, xi, phi.xi_kind, mass_at_zero)
}

/// Coefficients beyond natural scale.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleSpec {
    /// `½σ² f'' + μ f' = ρ f` with `σ⁻²` the measure density.
    Drift { mu: GridFunction },
    /// `½ d/dm (df/ds) = ρ f` with `s' > 0` given.
    ScaleDerivative { s_prime: GridFunction },
}

/// Increasing (not necessarily convex) solution with `f(0) = 1` and
/// `f'(0) = initial_slope`, by RK4 on the measure grid.
pub fn eigen_with_scale(
    m: &SpeedMeasure,
    s: &ScaleSpec,
    rho: f64,
    initial_slope: f64,
) -> Result<Eigenfunction> {
    check_rho(rho)?;
    if !m.atoms.is_empty() || m.mass_at_zero > 0.0 {
        return Err(Error::InvalidMeasure("scale solver needs an absolutely continuous measure".into()));
    }
    let g = m.density.grid();
    let nu = |t: f64| interp_linear(g, m.density.values(), t);
    let rhs: Box<dyn Fn(f64, [f64; 2]) -> [f64; 2]> = match s {
        ScaleSpec::Drift { mu } => {
            let mu = mu.clone();
            Box::new(move |t, [f, fp]| {
                let mu_t = interp_linear(mu.grid(), mu.values(), t);
                [fp, 2.0 * nu(t) * (rho * f - mu_t * fp)]
            })
        }
        ScaleSpec::ScaleDerivative { s_prime } => {
            if s_prime.values().iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidParameter("s' must be positive".into()));
            }
            let sp = s_prime.clone();
            // state (f, f'/s')
            Box::new(move |t, [f, q]| {
                [interp_linear(sp.grid(), sp.values(), t) * q, 2.0 * rho * nu(t) * f]
            })
        }
    };
    let mut state = match s {
        ScaleSpec::Drift { .. } => [1.0, initial_slope],
        ScaleSpec::ScaleDerivative { s_prime } => [1.0, initial_slope / s_prime.values()[0]],
    };
    let mut xs = vec![0.0];
    let mut phi = vec![1.0];
    let mut truncated = false;
    for i in 1..g.len() {
        let (t, h) = (g[i - 1], g[i] - g[i - 1]);
        let k1 = rhs(t, state);
        let k2 = rhs(t + h / 2.0, [state[0] + h / 2.0 * k1[0], state[1] + h / 2.0 * k1[1]]);
        let k3 = rhs(t + h / 2.0, [state[0] + h / 2.0 * k2[0], state[1] + h / 2.0 * k2[1]]);
        let k4 = rhs(t + h, [state[0] + h * k3[0], state[1] + h * k3[1]]);
        for j in 0..2 {
            state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !(state[0].abs() <= PHI_CAP) {
            truncated = true;
            break;
        }
        xs.push(g[i]);
        phi.push(state[0]);
    }
    let xi = if truncated { *xs.last().unwrap() } else { m.xi };
    let f = GridFunction::new(xs, phi, Axis::X)?;
    let mut e = Eigenfunction::from_phi(f, xi, m.xi_kind);
    e.truncated = truncated;
    Ok(e)
}

/// Positive root pair of `½η²β(β-1) + (ρ-δ)β - ρ = 0`.
pub fn stock_exponents(eta: f64, rho: f64, delta: f64) -> (f64, f64) {
    let a = 0.5 * eta * eta;
    let b = rho - delta - a;
    let disc = (b * b + 4.0 * a * rho).sqrt();
    ((-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a))
}

/// Decreasing convex solution of `½η²x²f'' + (ρ-δ)x f' - ρ f = 0` on the
/// grid of `eta` (all nodes > 0), normalized to `f = 1` at the first node.
///
/// Integrated backward in `log x` from the last node, starting on the
/// local power law `x^{β-}`.
pub fn eigen_stock(eta: &GridFunction, rho: f64, delta: f64) -> Result<GridFunction> {
    check_rho(rho)?;
    let x = eta.grid();
    if x[0] <= 0.0 || eta.values().iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidParameter("need x > 0 and finite η > 0".into()));
    }
    let ys: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ev = eta.values();
    let eta_at = |y: f64| interp_linear(&ys, ev, y);
    // ψ = log f in u = log x: ψ'' = ψ' - ψ'² + 2(ρ - (ρ-δ)ψ')/η²
    let rhs = |y: f64, w: f64| {
        let e = eta_at(y);
        w - w * w + 2.0 * (rho - (rho - delta) * w) / (e * e)
    };
    let n = x.len();
    let mut w = stock_exponents(ev[n - 1], rho, delta).0;
    let mut psi = vec![0.0; n];
    for i in (0..n - 1).rev() {
        let h = ys[i] - ys[i + 1];
        let y0 = ys[i + 1];
        // RK4 on (ψ, w)
        let k1 = (w, rhs(y0, w));
        let k2 = (w + h / 2.0 * k1.1, rhs(y0 + h / 2.0, w + h / 2.0 * k1.1));
        let k3 = (w + h / 2.0 * k2.1, rhs(y0 + h / 2.0, w + h / 2.0 * k2.1));
        let k4 = (w + h * k3.1, rhs(y0 + h, w + h * k3.1));
        psi[i] = psi[i + 1] + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        w += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    let p0 = psi[0];
    GridFunction::new(x.to_vec(), psi.iter().map(|p| (p - p0).exp()).collect(), Axis::X)
}

/// `η(x)` with `None` where the curvature vanishes or `η² <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolCurve {
    pub x: Vec<f64>,
    pub eta: Vec<Option<f64>>,
}

/// `η² = 2[ρφ - (ρ-δ)xφ']/(x²φ'')` at one point.
pub fn stock_vol_at(x: f64, phi: f64, dphi: f64, d2phi: f64, rho: f64, delta: f64) -> Option<f64> {
    if !(x > 0.0) || !(d2phi > 0.0) {
        return None;
    }
    let e2 = 2.0 * (rho * phi - (rho - delta) * x * dphi) / (x * x * d2phi);
    if e2 > 0.0 && e2.is_finite() {
        Some(e2.sqrt())
    } else {
        None
    }
}

/// Volatility curve from a sampled decreasing convex `φ`, using
/// three-point derivatives at interior nodes.
pub fn stock_vol_from_eigen(phi: &GridFunction, rho: f64, delta: f64) -> Result<VolCurve> {
    check_rho(rho)?;
    let x = phi.grid();
    let y = phi.values();
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidGrid("need at least three nodes".into()));
    }
    let curv_scale = y.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut eta = vec![None; n];
    for i in 1..n - 1 {
        let d1 = crate::conventions::quad_derivative(x, y, [i - 1, i, i + 1], i);
        let d2 = second_diff_raw(x, y, i);
        if d2 <= 1e-14 * curv_scale {
            continue;
        }
        eta[i] = stock_vol_at(x[i], y[i], d1, d2, rho, delta);
    }
    Ok(VolCurve { x: x.to_vec(), eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conventions::uniform_grid;

    fn rel_err_sup(e: &Eigenfunction, upto: f64, f: impl Fn(f64) -> f64) -> f64 {
        e.grid()
            .iter()
            .zip(e.phi.values())
            .filter(|(x, _)| **x <= upto)
            .map(|(x, p)| (p / f(*x) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn density(stop: f64, h: f64, f: impl Fn(f64) -> f64) -> SpeedMeasure {
        SpeedMeasure::from_density(GridFunction::from_fn(uniform_grid(0.0, stop, h).unwrap(), Axis::X, f).unwrap())
            .unwrap()
    }

    fn sticky_measure(rho: f64, h: f64) -> SpeedMeasure {
        let d = GridFunction::from_fn(uniform_grid(0.0, 3.5, h).unwrap(), Axis::X, |x| {
            if x < 1.0 {
                (2.0 + 4.0 * x * x) / (2.0 * rho)
            } else {
                (6.0 * x + 9.0 * x.powi(4)) / (2.0 * rho)
            }
        })
        .unwrap();
        SpeedMeasure::new(d, vec![Atom { x: 1.0, mass: 1.0 / (2.0 * rho) }], f64::INFINITY, XiKind::Natural, 0.0)
            .unwrap()
    }

    #[test]
    fn unit_density_gives_cosh() {
        let e = eigen_from_density(&density(5.0, 1e-3, |_| 1.0), 0.5).unwrap();
        assert!(rel_err_sup(&e, 5.0, f64::cosh) < 1e-12);
    }

    #[test]
    fn quadratic_density_gives_gaussian_growth() {
        let rho = 0.5;
        let e = eigen_from_density(&density(3.0, 1e-3, |x| (x * x + 1.0) / (2.0 * rho)), rho).unwrap();
        assert!(rel_err_sup(&e, 3.0, |x| (x * x / 2.0).exp()) < 1e-4);
    }

    #[test]
    fn natural_boundary_at_one() {
        let rho = 0.7;
        // σ² = ρ(1-x²)²/(1+3x²)
        let e = eigen_from_density(
            &density(0.999, 1e-4, |x| (1.0 + 3.0 * x * x) / (rho * (1.0 - x * x).powi(2))),
            rho,
        )
        .unwrap();
        assert!(rel_err_sup(&e, 0.95, |x| 1.0 / (1.0 - x * x)) < 1e-3);
    }

    #[test]
    fn sticky_string() {
        let rho = 0.5;
        let e = eigen_from_string(&sticky_measure(rho, 1e-3), rho).unwrap();
        let f = |x: f64| if x <= 1.0 { (x * x).exp() } else { x.powi(3).exp() };
        assert!(rel_err_sup(&e, 2.5, f) < 1e-3);
        assert!(e.truncated);
    }

    #[test]
    fn single_atom_is_piecewise_linear() {
        let d = GridFunction::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4], Axis::X).unwrap();
        let m = SpeedMeasure::new(d, vec![Atom { x: 1.5, mass: 2.0 }], 3.0, XiKind::Absorbing, 0.0).unwrap();
        let e = eigen_from_string(&m, 0.25).unwrap();
        // flat up to 1.5, then slope 2ρ·mass = 1
        let want = [1.0, 1.0, 1.0, 1.5, 2.5];
        for (p, w) in e.phi.values().iter().zip(want) {
            assert!((p - w).abs() < 1e-12, "{p} vs {w}");
        }
        assert_eq!(e.xi, 3.0);
    }

    #[test]
    fn birth_death_string_doubles() {
        let rho = 0.5;
        // slope doubles at each state: 2ρ φ(n) m_n = 2^n
        let d = GridFunction::new(uniform_grid(0.0, 10.0, 1.0).unwrap(), vec![0.0; 11], Axis::X).unwrap();
        let atoms: Vec<Atom> = (1..10)
            .map(|n| {
                let phi = 2f64.powi(n + 1) - 1.0;
                Atom { x: n as f64, mass: 2f64.powi(n) / (2.0 * rho * phi) }
            })
            .collect();
        let m = SpeedMeasure::new(d, atoms, f64::INFINITY, XiKind::Natural, 2.0 / (2.0 * rho)).unwrap();
        let e = eigen_from_string(&m, rho).unwrap();
        for (n, p) in e.phi.values().iter().enumerate() {
            assert!((p - (2f64.powi(n as i32 + 1) - 1.0)).abs() < 1e-9, "n {n}: {p}");
        }
    }

    #[test]
    fn degenerate_and_invalid() {
        let d = GridFunction::new(vec![0.0, 1.0], vec![f64::INFINITY, 1.0], Axis::X).unwrap();
        let m = SpeedMeasure::from_density(d).unwrap();
        assert!(matches!(eigen_from_string(&m, 1.0), Err(Error::DegenerateString)));
        let d = GridFunction::new(vec![0.0, 1.0], vec![1.0, 1.0], Axis::X).unwrap();
        assert!(SpeedMeasure::new(d.clone(), vec![], 0.0, XiKind::Absorbing, 0.0).is_err());
        assert!(SpeedMeasure::new(d, vec![], 1.0, XiKind::Absorbing, -1.0).is_err());
    }

    #[test]
    fn cosh_gives_unit_density() {
        let rho = 0.5;
        let g = GridFunction::from_fn(uniform_grid(0.0, 4.0, 1e-3).unwrap(), Axis::X, f64::cosh).unwrap();
        let m = speed_from_eigen(&Eigenfunction::from_phi(g, f64::INFINITY, XiKind::Natural), rho, &Tolerances::default())
            .unwrap();
        assert!(m.atoms.is_empty());
        assert_eq!(m.mass_at_zero, 0.0);
        assert!(m.density.values().iter().all(|d| (d - 1.0).abs() < 1e-4));
    }

    #[test]
    fn sticky_eigen_gives_atom() {
        let rho = 0.5;
        let g = GridFunction::from_fn(uniform_grid(0.0, 2.0, 1e-3).unwrap(), Axis::X, |x| {
            if x <= 1.0 {
                (x * x).exp()
            } else {
                x.powi(3).exp()
            }
        })
        .unwrap();
        let m = speed_from_eigen(&Eigenfunction::from_phi(g, 2.0, XiKind::Natural), rho, &Tolerances::default()).unwrap();
        assert_eq!(m.atoms.len(), 1);
        assert!((m.atoms[0].x - 1.0).abs() <= 1e-3);
        assert!((m.atoms[0].mass - 1.0).abs() < 0.05);
    }

    #[test]
    fn linear_eigen_has_no_density() {
        let rho = 0.5;
        let kappa = 0.3;
        let g = GridFunction::from_fn(uniform_grid(0.0, 2.0, 1e-2).unwrap(), Axis::X, |x| 1.0 + kappa * x).unwrap();
        let m = speed_from_eigen(&Eigenfunction::from_phi(g, 2.0, XiKind::Absorbing), rho, &Tolerances::default()).unwrap();
        assert!(m.density.values().iter().all(|d| d.abs() < 1e-10));
        assert!(m.atoms.is_empty());
        assert!((m.mass_at_zero - kappa / (2.0 * rho)).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonconvex_and_unnormalized() {
        let t = Tolerances::default();
        let g = GridFunction::from_fn(uniform_grid(0.0, 2.0, 1e-2).unwrap(), Axis::X, |x| 1.0 + x.sin()).unwrap();
        let r = speed_from_eigen(&Eigenfunction::from_phi(g, 2.0, XiKind::Natural), 0.5, &t);
        assert!(matches!(r, Err(Error::NotConvex { .. })));
        let g = GridFunction::from_fn(uniform_grid(0.0, 2.0, 1e-2).unwrap(), Axis::X, |x| 2.0 * x.cosh()).unwrap();
        let r = speed_from_eigen(&Eigenfunction::from_phi(g, 2.0, XiKind::Natural), 0.5, &t);
        assert!(matches!(r, Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn string_round_trip() {
        let rho = 0.5;
        let g = GridFunction::from_fn(uniform_grid(0.0, 2.0, 1e-3).unwrap(), Axis::X, |x| {
            if x <= 1.0 {
                (x * x).exp()
            } else {
                x.powi(3).exp()
            }
        })
        .unwrap();
        let e = Eigenfunction::from_phi(g.clone(), 2.0, XiKind::Natural);
        let m = speed_from_eigen(&e, rho, &Tolerances::default()).unwrap();
        let back = eigen_from_string(&m, rho).unwrap();
        let err = back
            .phi
            .grid()
            .iter()
            .zip(back.phi.values())
            .map(|(x, p)| (p - g.eval_linear(*x)).abs() / g.eval_linear(*x))
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_drift_matches_density_solver() {
        let m = density(3.0, 1e-3, |x| 1.0 + x);
        let mu = GridFunction::from_fn(m.density.grid().to_vec(), Axis::X, |_| 0.0).unwrap();
        let a = eigen_with_scale(&m, &ScaleSpec::Drift { mu }, 0.5, 0.0).unwrap();
        let b = eigen_from_density(&m, 0.5).unwrap();
        for (p, q) in a.phi.values().iter().zip(b.phi.values()) {
            assert!((p / q - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn drift_example_residual() {
        let rho = 0.5;
        let m = density(3.0, 1e-3, |_| 1.0);
        let mu = GridFunction::from_fn(m.density.grid().to_vec(), Axis::X, |x| {
            (0.25 + 2.0 * rho * (1.0 + x).powi(2)) / (1.0 + x)
        })
        .unwrap();
        let e = eigen_with_scale(&m, &ScaleSpec::Drift { mu }, rho, 0.5).unwrap();
        assert!(rel_err_sup(&e, 3.0, |x| (1.0 + x).sqrt()) < 1e-6);
    }

    #[test]
    fn constant_coefficients_give_exponentials() {
        // ½σ²β² + μβ - ρ = 0 with σ = 1, μ = 1, ρ = 1.5: β = 1, -3
        let m = density(2.0, 1e-3, |_| 1.0);
        let mu = GridFunction::from_fn(m.density.grid().to_vec(), Axis::X, |_| 1.0).unwrap();
        let e = eigen_with_scale(&m, &ScaleSpec::Drift { mu }, 1.5, 0.0).unwrap();
        // f(0)=1, f'(0)=0: f = (3e^x + e^{-3x})/4
        assert!(rel_err_sup(&e, 2.0, |x| (3.0 * x.exp() + (-3.0 * x).exp()) / 4.0) < 1e-9);
    }

    #[test]
    fn power_law_vol_round_trip() {
        let (rho, delta, eta0) = (0.05, 0.02, 0.3);
        let (bm, _) = stock_exponents(eta0, rho, delta);
        let g = GridFunction::from_fn(uniform_grid(0.5, 2.0, 2e-4).unwrap(), Axis::X, |x| x.powf(bm)).unwrap();
        let v = stock_vol_from_eigen(&g, rho, delta).unwrap();
        for e in v.eta.iter().flatten() {
            assert!((e / eta0 - 1.0).abs() < 1e-6, "{e}");
        }
        let x = 1.3f64;
        let e = stock_vol_at(x, x.powf(bm), bm * x.powf(bm - 1.0), bm * (bm - 1.0) * x.powf(bm - 2.0), rho, delta);
        assert!((e.unwrap() - eta0).abs() < 1e-12);
    }

    #[test]
    fn local_vol_round_trip() {
        let (rho, delta) = (0.05, 0.01);
        let eta = GridFunction::from_fn(uniform_grid(0.2, 20.0, 1e-3).unwrap(), Axis::X, |x| 0.2 + 0.1 / (1.0 + x))
            .unwrap();
        let phi = eigen_stock(&eta, rho, delta).unwrap();
        let v = stock_vol_from_eigen(&phi, rho, delta).unwrap();
        for (x, e) in v.x.iter().zip(&v.eta) {
            if *x > 0.3 && *x < 5.0 {
                let want = 0.2 + 0.1 / (1.0 + x);
                assert!((e.unwrap() - want).abs() < 1e-3, "x {x}");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = sticky_measure(0.5, 0.5);
        let s = m.to_json().unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(SpeedMeasure::from_json(&s).unwrap(), m);
    }
}
