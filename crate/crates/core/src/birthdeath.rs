//! Birth-death chains calibrated from piecewise-linear call values.
//!
//! For the call `G(x, θ) = (x - θ)⁺` a piecewise-linear convex value curve
//! pins the stopping threshold to a single state on each linear piece. The
//! states, the eigenfunction at the states and the jump rates follow from the
//! slopes alone.

use std::io::Read;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Atom, Eigenfunction, SpeedMeasure, XiKind};
use crate::error::{Error, Result};
use crate::uconvex::{read_columns, Axis, GridFunction};

/// Breakpoints `θ_n` and values `V(θ_n)`; linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearValue {
    theta: Vec<f64>,
    value: Vec<f64>,
}

impl PiecewiseLinearValue {
    pub fn new(theta: Vec<f64>, value: Vec<f64>) -> Result<Self> {
        if theta.len() != value.len() {
            return Err(Error::InvalidGrid("theta and V differ in length".into()));
        }
        if theta.len() < 3 {
            return Err(Error::InvalidGrid("need at least three breakpoints".into()));
        }
        if theta.iter().chain(&value).any(|v| !v.is_finite()) {
            return Err(Error::NaN("piecewise-linear value".into()));
        }
        if theta.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("breakpoints must be strictly increasing".into()));
        }
        if value.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter("V must be positive".into()));
        }
        Ok(PiecewiseLinearValue { theta, value })
    }

    /// Reads a `theta,V` CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (names, rows) = read_columns(r)?;
        let col = |want: &str| {
            names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| Error::Parse(format!("missing column `{want}`")))
        };
        let (it, iv) = (col("theta")?, col("V")?);
        Self::new(rows.iter().map(|r| r[it]).collect(), rows.iter().map(|r| r[iv]).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    /// Slope `s_n` on `[θ_n, θ_{n+1}]`.
    pub fn slopes(&self) -> Vec<f64> {
        slopes(&self.theta, &self.value)
    }

    /// Evaluates the curve, extending the end pieces linearly.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.theta.len();
        let i = self.theta.partition_point(|x| *x <= t).clamp(1, n - 1) - 1;
        let s = (self.value[i + 1] - self.value[i]) / (self.theta[i + 1] - self.theta[i]);
        self.value[i] + (t - self.theta[i]) * s
    }
}

/// Calibrated chain. The last state closes the chain with infinite mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathChain {
    pub rho: f64,
    pub states: Vec<f64>,
    /// Up-probabilities for every state but the last; `p[0] = 1`.
    pub p: Vec<f64>,
    /// Jump rates for every state but the last.
    pub lambda: Vec<f64>,
    /// Chain masses `m(x_n)` for every state but the last.
    pub masses: Vec<f64>,
    /// `φ` at the states.
    pub phi: Vec<f64>,
    /// Always true: the data are finite, so the last state carries infinite mass.
    pub closed_last: bool,
}

impl BirthDeathChain {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Eigenfunction, piecewise linear between states.
    pub fn eigenfunction(&self) -> Result<Eigenfunction> {
        let phi = GridFunction::new(self.states.clone(), self.phi.clone(), Axis::X)?;
        Ok(Eigenfunction::from_phi(phi, *self.states.last().unwrap(), XiKind::Absorbing))
    }

    /// String measure: atoms `m(x_n)/2`, zero density, absorbing at the last state.
    pub fn to_speed_measure(&self) -> Result<SpeedMeasure> {
        let density = GridFunction::new(self.states.clone(), vec![0.0; self.states.len()], Axis::X)?;
        let atoms = (1..self.masses.len())
            .map(|n| Atom { x: self.states[n], mass: 0.5 * self.masses[n] })
            .collect();
        SpeedMeasure::new(density, atoms, *self.states.last().unwrap(), XiKind::Absorbing, 0.5 * self.masses[0])
    }
}

/// Chain computed in exact rational arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactChain {
    pub rho: BigRational,
    pub states: Vec<BigRational>,
    pub p: Vec<BigRational>,
    pub lambda: Vec<BigRational>,
    pub masses: Vec<BigRational>,
    pub phi: Vec<BigRational>,
}

impl ExactChain {
    pub fn to_f64(&self) -> BirthDeathChain {
        let f = |v: &[BigRational]| v.iter().map(to_f64).collect::<Vec<_>>();
        BirthDeathChain {
            rho: to_f64(&self.rho),
            states: f(&self.states),
            p: f(&self.p),
            lambda: f(&self.lambda),
            masses: f(&self.masses),
            phi: f(&self.phi),
            closed_last: true,
        }
    }
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Exact conversion of a finite float.
pub fn rational(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::NaN("rational conversion".into()))
}

trait Scalar: Num + Signed + Clone + PartialOrd + ToPrimitive {
    fn same(a: &Self, b: &Self) -> bool;
}

impl Scalar for f64 {
    fn same(a: &f64, b: &f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }
}

impl Scalar for BigRational {
    fn same(a: &Self, b: &Self) -> bool {
        a == b
    }
}

struct Raw<T> {
    states: Vec<T>,
    p: Vec<T>,
    lambda: Vec<T>,
    masses: Vec<T>,
    phi: Vec<T>,
}

fn slopes<T: Num + Clone>(theta: &[T], value: &[T]) -> Vec<T> {
    (0..theta.len() - 1)
        .map(|i| (value[i + 1].clone() - value[i].clone()) / (theta[i + 1].clone() - theta[i].clone()))
        .collect()
}

fn calibrate_raw<T: Scalar>(theta: &[T], value: &[T], rho: &T) -> Result<Raw<T>> {
    let f = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    if !rho.is_positive() {
        return Err(Error::InvalidParameter("rho must be positive".into()));
    }
    let s = slopes(theta, value);
    if let Some(i) = s.iter().position(|v| !v.is_negative()) {
        return Err(Error::InvalidParameter(format!("V must be decreasing (slope {} on piece {i})", f(&s[i]))));
    }
    for i in 1..s.len() {
        if s[i] < s[i - 1] {
            return Err(Error::NonConvexInput { index: i });
        }
    }
    let s0 = theta[0].clone() / value[0].clone();
    if !T::same(&s[0], &s0) {
        return Err(Error::InvalidParameter(format!(
            "first slope {} must equal theta_0 / V(theta_0) = {}",
            f(&s[0]),
            f(&s0)
        )));
    }
    // x_0 = 0 with φ(0) = 1 means V(θ) = -θ on the first piece
    if !T::same(&s[0], &-T::one()) {
        return Err(Error::InvalidParameter(format!(
            "first slope {} must be -1 (V(theta) = -theta on the first piece puts x_0 at 0)",
            f(&s[0])
        )));
    }
    let k = s.len();
    let mut states: Vec<T> = (0..k).map(|n| theta[n].clone() - value[n].clone() / s[n].clone()).collect();
    // both anchor conditions together make x_0 vanish; drop the rounding residue
    states[0] = T::zero();
    for n in 0..k - 1 {
        if states[n + 1] <= states[n] {
            return Err(Error::CollidingStates { index: n, left: f(&states[n]), right: f(&states[n + 1]) });
        }
    }
    let phi: Vec<T> = s.iter().map(|v| -(T::one() / v.clone())).collect();
    let mut p = vec![T::one()];
    let mut lambda = Vec::with_capacity(k - 1);
    let mut masses = Vec::with_capacity(k - 1);
    for n in 0..k - 1 {
        let a = states[n + 1].clone() - states[n].clone();
        let (pn, denom) = if n == 0 {
            (T::one(), phi[1].clone() - phi[0].clone())
        } else {
            let b = states[n].clone() - states[n - 1].clone();
            let pn = b / (states[n + 1].clone() - states[n - 1].clone());
            let q = T::one() - pn.clone();
            let d = pn.clone() * phi[n + 1].clone() + q * phi[n - 1].clone() - phi[n].clone();
            (pn, d)
        };
        if !denom.is_positive() {
            return Err(Error::NotConvex { x: f(&states[n]) });
        }
        let lam = rho.clone() * phi[n].clone() / denom;
        // p_n a_n = q_n b_n, so both one-sided forms of the mass agree
        let m = T::one() / (lam.clone() * pn.clone() * a);
        if n > 0 {
            p.push(pn);
        }
        lambda.push(lam);
        masses.push(m);
    }
    Ok(Raw { states, p, lambda, masses, phi })
}

/// Calibrates the chain from a piecewise-linear call value curve.
pub fn calibrate_bd(v: &PiecewiseLinearValue, rho: f64) -> Result<BirthDeathChain> {
    if !rho.is_finite() {
        return Err(Error::InvalidParameter("rho must be finite".into()));
    }
    let r = calibrate_raw(&v.theta, &v.value, &rho)?;
    Ok(BirthDeathChain {
        rho,
        states: r.states,
        p: r.p,
        lambda: r.lambda,
        masses: r.masses,
        phi: r.phi,
        closed_last: true,
    })
}

/// Exact-arithmetic calibration.
pub fn calibrate_bd_exact(theta: &[BigRational], value: &[BigRational], rho: &BigRational) -> Result<ExactChain> {
    if theta.len() != value.len() || theta.len() < 3 {
        return Err(Error::InvalidGrid("need at least three breakpoints of equal length".into()));
    }
    if theta.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("breakpoints must be strictly increasing".into()));
    }
    if value.iter().any(|v| !v.is_positive()) {
        return Err(Error::InvalidParameter("V must be positive".into()));
    }
    let r = calibrate_raw(theta, value, rho)?;
    Ok(ExactChain { rho: rho.clone(), states: r.states, p: r.p, lambda: r.lambda, masses: r.masses, phi: r.phi })
}

/// Exact calibration of float data (every finite float is a dyadic rational).
pub fn calibrate_bd_exact_from(v: &PiecewiseLinearValue, rho: f64) -> Result<ExactChain> {
    let conv = |xs: &[f64]| xs.iter().map(|x| rational(*x)).collect::<Result<Vec<_>>>();
    calibrate_bd_exact(&conv(&v.theta)?, &conv(&v.value)?, &rational(rho)?)
}

fn residual_terms<T: Scalar>(states: &[T], masses: &[T], phi: &[T], rho: &T) -> Vec<T> {
    (0..masses.len())
        .map(|n| {
            let up = (phi[n + 1].clone() - phi[n].clone()) / (states[n + 1].clone() - states[n].clone());
            let down = if n == 0 {
                T::zero()
            } else {
                (phi[n].clone() - phi[n - 1].clone()) / (states[n].clone() - states[n - 1].clone())
            };
            ((up - down) / masses[n].clone() - rho.clone() * phi[n].clone()).abs()
        })
        .collect()
}

/// Max over non-terminal states of `|(1/m)[Δ⁺φ - Δ⁻φ] - ρφ|`, reflecting at 0.
pub fn bd_residual(chain: &BirthDeathChain, phi: &[f64], rho: f64) -> f64 {
    if phi.len() != chain.states.len() {
        return f64::INFINITY;
    }
    residual_terms(&chain.states, &chain.masses, phi, &rho).into_iter().fold(0.0, f64::max)
}

/// Exact residual; zero for calibrated chains.
pub fn bd_residual_exact(chain: &ExactChain) -> BigRational {
    residual_terms(&chain.states, &chain.masses, &chain.phi, &chain.rho)
        .into_iter()
        .fold(BigRational::zero(), |a, b| if b > a { b } else { a })
}

/// The golden example: `θ_n = n + 2⁻ⁿ - 2`, `V(θ_n) = 2⁻ⁿ`, `n = 0..count`.
pub fn golden_example_exact(count: usize) -> (Vec<BigRational>, Vec<BigRational>) {
    let two = BigInt::from(2);
    let mut theta = Vec::with_capacity(count);
    let mut value = Vec::with_capacity(count);
    for n in 0..count {
        let inv = BigRational::new(BigInt::one(), num_traits::pow(two.clone(), n));
        theta.push(BigRational::from_integer(BigInt::from(n as i64 - 2)) + inv.clone());
        value.push(inv);
    }
    (theta, value)
}

pub fn golden_example(count: usize) -> PiecewiseLinearValue {
    let theta = (0..count).map(|n| n as f64 + 0.5f64.powi(n as i32) - 2.0).collect();
    let value = (0..count).map(|n| 0.5f64.powi(n as i32)).collect();
    PiecewiseLinearValue::new(theta, value).expect("golden example is valid")
}
