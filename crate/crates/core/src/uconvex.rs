//! Generalized convexity on grids.
//!
//! For a coupling `u(y, z)` the u-dual of `f` is `f^u(z) = max_y [u(y,z) - f(y)]`,
//! taken over the finite-valued nodes of `f`. The double dual is the greatest
//! u-convex minorant, the subdifferential collects the maximizers.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conventions::Tolerances;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Theta,
}

impl Axis {
    pub fn opposite(self) -> Axis {
        match self {
            Axis::X => Axis::Theta,
            Axis::Theta => Axis::X,
        }
    }
}

/// Extended-real function sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Vec<f64>,
    values: Vec<f64>,
    axis: Axis,
}

impl GridFunction {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, axis: Axis) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidGrid("need at least two nodes".into()));
        }
        GridFunction::build(grid, values, axis)
    }

    /// Like [`GridFunction::new`] but a single node is allowed (dual outputs).
    pub(crate) fn build(grid: Vec<f64>, values: Vec<f64>, axis: Axis) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if grid.len() != values.len() {
            return Err(Error::InvalidGrid(format!(
                "{} nodes but {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidGrid("grid nodes must be finite".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("grid must be strictly increasing".into()));
        }
        crate::error::check_finite_or_inf(&values, "grid function values")?;
        if values.iter().any(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidGrid("values may not be -inf".into()));
        }
        let finite: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
        if let (Some(&a), Some(&b)) = (finite.first(), finite.last()) {
            if b - a + 1 != finite.len() {
                return Err(Error::InvalidGrid("finite values must be contiguous".into()));
            }
        }
        Ok(GridFunction { grid, values, axis })
    }

    pub fn from_fn(grid: Vec<f64>, axis: Axis, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.iter().map(|&x| f(x)).collect();
        GridFunction::new(grid, values, axis)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn axis(&self) -> Axis {
        self.axis
    }
    pub fn len(&self) -> usize {
        self.grid.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Inclusive index range of finite values.
    pub fn finite_range(&self) -> Option<(usize, usize)> {
        let a = self.values.iter().position(|v| v.is_finite())?;
        let b = self.values.iter().rposition(|v| v.is_finite())?;
        Some((a, b))
    }

    pub fn max_spacing(&self) -> f64 {
        self.grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Restrict to nodes `lo..=hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<GridFunction> {
        GridFunction::new(
            self.grid[lo..=hi].to_vec(),
            self.values[lo..=hi].to_vec(),
            self.axis,
        )
    }

    /// Linear interpolation, clamped to the end values.
    pub fn eval_linear(&self, t: f64) -> f64 {
        crate::conventions::interp_linear(&self.grid, &self.values, t)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["coord", "value"])?;
        for (g, v) in self.grid.iter().zip(&self.values) {
            wtr.write_record([fmt_ext(*g), fmt_ext(*v)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, axis: Axis) -> Result<GridFunction> {
        let (cols, rows) = read_columns(r)?;
        if cols.len() < 2 || cols[0] != "coord" || cols[1] != "value" {
            return Err(Error::Parse("expected header `coord,value`".into()));
        }
        GridFunction::new(
            rows.iter().map(|r| r[0]).collect(),
            rows.iter().map(|r| r[1]).collect(),
            axis,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path, axis: Axis) -> Result<GridFunction> {
        GridFunction::read_csv(std::fs::File::open(path)?, axis)
    }
}

/// Shortest round-tripping text for an extended real.
pub fn fmt_ext(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn parse_ext(s: &str) -> Result<f64> {
    let t = s.trim();
    match t {
        "inf" | "+inf" | "Inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-Inf" => Ok(f64::NEG_INFINITY),
        _ => {
            let v: f64 = t.parse().map_err(|_| Error::Parse(format!("not a number: `{t}`")))?;
            if v.is_nan() {
                return Err(Error::NaN("csv input".into()));
            }
            Ok(v)
        }
    }
}

/// Header plus numeric rows of a CSV document.
pub(crate) fn read_columns<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let cols: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.iter().map(parse_ext).collect::<Result<Vec<f64>>>()?;
        if row.len() != cols.len() {
            return Err(Error::Parse("ragged csv row".into()));
        }
        rows.push(row);
    }
    Ok((cols, rows))
}

/// Real interval with open/closed flags; endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "crate::conventions::ext_f64")]
    pub lo: f64,
    #[serde(with = "crate::conventions::ext_f64")]
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Self {
        Interval { lo, hi, lo_closed, hi_closed }
    }
    pub fn closed(lo: f64, hi: f64) -> Self {
        Interval::new(lo, hi, true, true)
    }
    pub fn contains(&self, t: f64) -> bool {
        let above = if self.lo_closed { t >= self.lo } else { t > self.lo };
        let below = if self.hi_closed { t <= self.hi } else { t < self.hi };
        above && below
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Increasing,
    Decreasing,
    Unknown,
}

/// Coupling `u(y, z)`; `eval` may return `-inf` where the coupling is undefined.
pub trait Coupling: Sync {
    fn eval(&self, y: f64, z: f64) -> f64;
    fn d_y(&self, y: f64, z: f64) -> f64;
    fn d_z(&self, y: f64, z: f64) -> f64;
    fn d_yz(&self, y: f64, z: f64) -> f64;
    fn y_domain(&self) -> Interval;
    fn z_domain(&self) -> Interval;
    fn orientation(&self) -> Orientation;
}

/// The same coupling with its arguments exchanged: `(z, y) -> u(y, z)`.
pub struct Swapped<'a, C: ?Sized>(pub &'a C);

impl<C: Coupling + ?Sized> Coupling for Swapped<'_, C> {
    fn eval(&self, y: f64, z: f64) -> f64 {
        self.0.eval(z, y)
    }
    fn d_y(&self, y: f64, z: f64) -> f64 {
        self.0.d_z(z, y)
    }
    fn d_z(&self, y: f64, z: f64) -> f64 {
        self.0.d_y(z, y)
    }
    fn d_yz(&self, y: f64, z: f64) -> f64 {
        self.0.d_yz(z, y)
    }
    fn y_domain(&self) -> Interval {
        self.0.z_domain()
    }
    fn z_domain(&self) -> Interval {
        self.0.y_domain()
    }
    fn orientation(&self) -> Orientation {
        self.0.orientation()
    }
}

/// Indices attaining a maximum within tie tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgmaxSet {
    /// Smallest attaining index.
    pub lo: usize,
    /// Largest attaining index.
    pub hi: usize,
    /// Number of attaining indices (may be below `hi - lo + 1`).
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualMethod {
    #[default]
    BruteForce,
    /// Monotone-argmax divide and conquer; needs a known orientation.
    DivideAndConquer,
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    pub tie_tol: f64,
    pub method: DualMethod,
    pub parallel: bool,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            tie_tol: Tolerances::default().tie_tol,
            method: DualMethod::BruteForce,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dual {
    pub func: GridFunction,
    /// Maximizing input nodes per output node; `None` when every candidate was excluded.
    pub argmax: Vec<Option<ArgmaxSet>>,
    /// The argmax touches the last input node (the sup may be a limsup).
    pub boundary: Vec<bool>,
}

fn tie_band(m: f64, tol: f64) -> f64 {
    tol * m.abs().max(1.0)
}

fn dual_at<C: Coupling + ?Sized>(
    ys: &[f64],
    fv: &[f64],
    idx: std::ops::RangeInclusive<usize>,
    u: &C,
    z: f64,
    tol: f64,
) -> (f64, Option<ArgmaxSet>) {
    let mut best = f64::NEG_INFINITY;
    let mut vals = Vec::with_capacity(idx.clone().count());
    for i in idx.clone() {
        let c = u.eval(ys[i], z) - fv[i];
        let c = if c.is_nan() { f64::NEG_INFINITY } else { c };
        vals.push(c);
        if c > best {
            best = c;
        }
    }
    if best == f64::NEG_INFINITY {
        return (f64::INFINITY, None);
    }
    let band = tie_band(best, tol);
    let start = *idx.start();
    let mut set: Option<ArgmaxSet> = None;
    for (k, c) in vals.iter().enumerate() {
        if *c >= best - band {
            let i = start + k;
            set = Some(match set {
                None => ArgmaxSet { lo: i, hi: i, count: 1 },
                Some(s) => ArgmaxSet { lo: s.lo, hi: i, count: s.count + 1 },
            });
        }
    }
    (best, set)
}

/// `f^u(z) = max_y [u(y, z) - f(y)]` on `out_grid`, with argmax sets.
pub fn u_dual<C: Coupling + ?Sized>(
    f: &GridFunction,
    u: &C,
    out_grid: &[f64],
    opts: &DualOptions,
) -> Result<Dual> {
    let (lo, hi) = f.finite_range().ok_or(Error::EmptyEffectiveDomain)?;
    crate::error::check_finite_or_inf(out_grid, "dual output grid")?;
    let ys = f.grid();
    let fv = f.values();
    let last = f.len() - 1;
    let results: Vec<(f64, Option<ArgmaxSet>)> = match (opts.method, u.orientation()) {
        (DualMethod::DivideAndConquer, o) if o != Orientation::Unknown => {
            dual_dnc(ys, fv, lo, hi, u, out_grid, opts.tie_tol, o)
        }
        _ => {
            let one = |z: &f64| dual_at(ys, fv, lo..=hi, u, *z, opts.tie_tol);
            if opts.parallel {
                out_grid.par_iter().map(one).collect()
            } else {
                out_grid.iter().map(one).collect()
            }
        }
    };
    let values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let argmax: Vec<Option<ArgmaxSet>> = results.iter().map(|r| r.1).collect();
    let boundary = argmax.iter().map(|a| a.map_or(false, |s| s.hi == last)).collect();
    let func = GridFunction::build(out_grid.to_vec(), values, f.axis().opposite())?;
    Ok(Dual { func, argmax, boundary })
}

#[allow(clippy::too_many_arguments)]
fn dual_dnc<C: Coupling + ?Sized>(
    ys: &[f64],
    fv: &[f64],
    lo: usize,
    hi: usize,
    u: &C,
    zs: &[f64],
    tol: f64,
    o: Orientation,
) -> Vec<(f64, Option<ArgmaxSet>)> {
    let m = zs.len();
    let mut out = vec![(f64::INFINITY, None); m];
    // work in an index order where the smallest argmax is nondecreasing
    let order: Vec<usize> = match o {
        Orientation::Increasing => (0..m).collect(),
        _ => (0..m).rev().collect(),
    };
    let mut stack = vec![(0usize, m, lo, hi)];
    while let Some((a, b, ylo, yhi)) = stack.pop() {
        if a >= b {
            continue;
        }
        let mid = (a + b) / 2;
        let z = zs[order[mid]];
        let (best, set) = dual_at(ys, fv, ylo..=yhi, u, z, tol);
        let pivot = match set {
            Some(s) => {
                // widen the tie set past the search window so it matches brute force
                let band = tie_band(best, tol);
                let mut s2 = s;
                let mut i = s.lo;
                while i > lo {
                    let c = u.eval(ys[i - 1], z) - fv[i - 1];
                    if c >= best - band {
                        s2.lo = i - 1;
                        s2.count += 1;
                        i -= 1;
                    } else {
                        break;
                    }
                }
                let mut i = s.hi;
                while i < hi {
                    let c = u.eval(ys[i + 1], z) - fv[i + 1];
                    if c >= best - band {
                        s2.hi = i + 1;
                        s2.count += 1;
                        i += 1;
                    } else {
                        break;
                    }
                }
                out[order[mid]] = (best, Some(s2));
                s.lo
            }
            None => {
                out[order[mid]] = (best, None);
                ylo
            }
        };
        stack.push((a, mid, ylo, pivot.max(ylo)));
        stack.push((mid + 1, b, pivot.min(yhi), yhi));
    }
    out
}

/// `(f^u)^u` back on `f`'s grid, via `z_grid`.
pub fn u_double_dual<C: Coupling + ?Sized>(
    f: &GridFunction,
    u: &C,
    z_grid: &[f64],
    opts: &DualOptions,
) -> Result<GridFunction> {
    let d = u_dual(f, u, z_grid, opts)?;
    let dd = u_dual(&d.func, &Swapped(u), f.grid(), opts)?;
    Ok(dd.func)
}

/// Result of the double-dual test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityCheck {
    pub is_convex: bool,
    pub max_deviation: f64,
}

/// True when `|f - f^uu| <= tol` on every finite node of `f`.
pub fn is_u_convex<C: Coupling + ?Sized>(
    f: &GridFunction,
    u: &C,
    z_grid: &[f64],
    tol: f64,
    opts: &DualOptions,
) -> Result<ConvexityCheck> {
    let dd = u_double_dual(f, u, z_grid, opts)?;
    let mut dev: f64 = 0.0;
    for (a, b) in f.values().iter().zip(dd.values()) {
        if a.is_finite() {
            let d = if b.is_finite() { (a - b).abs() } else { f64::INFINITY };
            dev = dev.max(d);
        }
    }
    Ok(ConvexityCheck { is_convex: dev <= tol, max_deviation: dev })
}

/// Per-node subdifferential with a representative selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdiffMap {
    /// Argmax hull per node; `None` means empty.
    pub sets: Vec<Option<ArgmaxSet>>,
    /// Smallest attaining index per node.
    pub z_star: Vec<Option<usize>>,
}

impl SubdiffMap {
    pub fn from_sets(sets: Vec<Option<ArgmaxSet>>) -> Self {
        let z_star = sets.iter().map(|s| s.map(|s| s.lo)).collect();
        SubdiffMap { sets, z_star }
    }

    /// Argmax sets of a dual; with `open_end`, a maximizer on the last input
    /// node counts as not attained.
    pub fn from_dual(d: &Dual, n_inputs: usize, open_end: bool) -> Self {
        let sets = d
            .argmax
            .iter()
            .map(|s| match s {
                Some(s) if open_end && s.lo == n_inputs - 1 => None,
                other => *other,
            })
            .collect();
        SubdiffMap::from_sets(sets)
    }
}

/// `∂^u f(y) = {z : f(y) + f^u(z) = u(y, z)}` on `z_grid`, for every node of `f`.
pub fn subdifferential<C: Coupling + ?Sized>(
    f: &GridFunction,
    u: &C,
    z_grid: &[f64],
    tol: f64,
    open_end: bool,
    opts: &DualOptions,
) -> Result<SubdiffMap> {
    let chk = is_u_convex(f, u, z_grid, tol, opts)?;
    if !chk.is_convex {
        return Err(Error::NotUConvex { deviation: chk.max_deviation });
    }
    let d = u_dual(f, u, z_grid, opts)?;
    let back = u_dual(&d.func, &Swapped(u), f.grid(), opts)?;
    let mut sets = back.argmax;
    for (i, s) in sets.iter_mut().enumerate() {
        if !f.values()[i].is_finite() {
            *s = None;
        } else if let Some(set) = s {
            if open_end && set.lo == z_grid.len() - 1 {
                *s = None;
            }
        }
    }
    Ok(SubdiffMap::from_sets(sets))
}

/// Representatives are monotone in the direction the orientation requires.
pub fn check_monotone(sd: &SubdiffMap, orientation: Orientation) -> bool {
    let reps: Vec<usize> = sd.z_star.iter().flatten().copied().collect();
    if reps.is_empty() {
        return false;
    }
    match orientation {
        Orientation::Increasing => reps.windows(2).all(|w| w[0] <= w[1]),
        Orientation::Decreasing => reps.windows(2).all(|w| w[0] >= w[1]),
        Orientation::Unknown => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conventions::uniform_grid;

    struct Lin;
    impl Coupling for Lin {
        fn eval(&self, y: f64, z: f64) -> f64 {
            y * z
        }
        fn d_y(&self, _: f64, z: f64) -> f64 {
            z
        }
        fn d_z(&self, y: f64, _: f64) -> f64 {
            y
        }
        fn d_yz(&self, _: f64, _: f64) -> f64 {
            1.0
        }
        fn y_domain(&self) -> Interval {
            Interval::closed(f64::NEG_INFINITY, f64::INFINITY)
        }
        fn z_domain(&self) -> Interval {
            Interval::closed(f64::NEG_INFINITY, f64::INFINITY)
        }
        fn orientation(&self) -> Orientation {
            Orientation::Increasing
        }
    }

    struct LogCoupling;
    impl Coupling for LogCoupling {
        fn eval(&self, y: f64, z: f64) -> f64 {
            if y > 0.0 {
                z * y.ln()
            } else if z == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn d_y(&self, y: f64, z: f64) -> f64 {
            z / y
        }
        fn d_z(&self, y: f64, _: f64) -> f64 {
            y.ln()
        }
        fn d_yz(&self, y: f64, _: f64) -> f64 {
            1.0 / y
        }
        fn y_domain(&self) -> Interval {
            Interval::new(0.0, f64::INFINITY, false, false)
        }
        fn z_domain(&self) -> Interval {
            Interval::closed(0.0, f64::INFINITY)
        }
        fn orientation(&self) -> Orientation {
            Orientation::Increasing
        }
    }

    fn logcosh_grid() -> GridFunction {
        GridFunction::from_fn(uniform_grid(0.0, 8.0, 1e-3).unwrap(), Axis::X, |x| x.cosh().ln())
            .unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridFunction::new(vec![0.0], vec![1.0], Axis::X).is_err());
        assert!(GridFunction::new(vec![0.0, 0.0], vec![1.0, 1.0], Axis::X).is_err());
        assert!(GridFunction::new(vec![0.0, 1.0], vec![f64::NAN, 1.0], Axis::X).is_err());
        assert!(GridFunction::new(vec![0.0, 1.0], vec![f64::NEG_INFINITY, 1.0], Axis::X).is_err());
        let gap = vec![1.0, f64::INFINITY, 2.0];
        assert!(GridFunction::new(vec![0.0, 1.0, 2.0], gap, Axis::X).is_err());
    }

    #[test]
    fn dual_of_affine_section() {
        let z0 = 0.7;
        let a = 0.25;
        let f = GridFunction::from_fn(uniform_grid(0.0, 3.0, 0.01).unwrap(), Axis::X, |y| {
            Lin.eval(y, z0) + a
        })
        .unwrap();
        let d = u_dual(&f, &Lin, &[z0], &DualOptions::default()).unwrap();
        assert!((d.func.values()[0] + a).abs() < 1e-12);
    }

    #[test]
    fn logcosh_dual_value() {
        let d = u_dual(&logcosh_grid(), &Lin, &[0.5], &DualOptions::default()).unwrap();
        assert!((d.func.values()[0] - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn power_coupling_dual_value() {
        let f = GridFunction::from_fn(uniform_grid(0.0, 20.0, 1e-3).unwrap(), Axis::X, |x| {
            (1.0 + x * x).ln()
        })
        .unwrap();
        let d = u_dual(&f, &LogCoupling, &[1.0], &DualOptions::default()).unwrap();
        assert!((d.func.values()[0] + 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn all_excluded_gives_inf() {
        let f = GridFunction::new(vec![0.0, 1.0], vec![1.0, f64::INFINITY], Axis::X).unwrap();
        let d = u_dual(&f, &LogCoupling, &[1.0], &DualOptions::default()).unwrap();
        assert_eq!(d.func.values()[0], f64::INFINITY);
        assert!(d.argmax[0].is_none());
        let all_inf = GridFunction::new(vec![0.0, 1.0], vec![f64::INFINITY; 2], Axis::X).unwrap();
        assert!(matches!(
            u_dual(&all_inf, &Lin, &[1.0], &DualOptions::default()),
            Err(Error::EmptyEffectiveDomain)
        ));
    }

    #[test]
    fn boundary_flag_when_argmax_at_end() {
        let d = u_dual(&logcosh_grid(), &Lin, &[1.5], &DualOptions::default()).unwrap();
        assert!(d.boundary[0]);
    }

    #[test]
    fn max_of_affines_is_convex() {
        let ys = uniform_grid(-2.0, 2.0, 0.01).unwrap();
        let zs = uniform_grid(-3.0, 3.0, 0.01).unwrap();
        let f = GridFunction::from_fn(ys, Axis::X, |y| {
            [(-1.0, 0.2), (0.5, -0.1), (2.0, 0.4)]
                .iter()
                .map(|(z, a)| Lin.eval(y, *z) + a)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .unwrap();
        let c = is_u_convex(&f, &Lin, &zs, 1e-9, &DualOptions::default()).unwrap();
        assert!(c.is_convex, "dev {}", c.max_deviation);
    }

    #[test]
    fn upward_bump_breaks_convexity() {
        let ys = uniform_grid(-2.0, 2.0, 0.01).unwrap();
        let zs = uniform_grid(-5.0, 5.0, 0.01).unwrap();
        let mut vals: Vec<f64> = ys.iter().map(|y| y * y).collect();
        vals[200] += 1e-3;
        let f = GridFunction::new(ys, vals, Axis::X).unwrap();
        let c = is_u_convex(&f, &Lin, &zs, 1e-6, &DualOptions::default()).unwrap();
        assert!(!c.is_convex);
    }

    #[test]
    fn subdifferential_matches_atanh() {
        let f = logcosh_grid();
        let zs = uniform_grid(0.0, 0.99, 0.01).unwrap();
        let d = u_dual(&f, &Lin, &zs, &DualOptions::default()).unwrap();
        let sd = SubdiffMap::from_dual(&d, f.len(), true);
        for (k, z) in zs.iter().enumerate() {
            let i = sd.z_star[k].unwrap();
            assert!((f.grid()[i] - z.atanh()).abs() <= 1.5e-3);
        }
        assert!(check_monotone(&sd, Orientation::Increasing));
    }

    #[test]
    fn section_gives_interval_valued_set() {
        // psi with a linear stretch of slope 1 on [2, 3]
        let ys = uniform_grid(0.0, 6.0, 0.01).unwrap();
        let f = GridFunction::from_fn(ys.clone(), Axis::X, |x| {
            if x < 2.0 {
                x * x / 4.0
            } else if x < 3.0 {
                x - 1.0
            } else {
                x * x / 6.0 + 0.5
            }
        })
        .unwrap();
        let d = u_dual(&f, &Lin, &[1.0], &DualOptions::default()).unwrap();
        let s = d.argmax[0].unwrap();
        assert!((ys[s.lo] - 2.0).abs() < 1e-9 && (ys[s.hi] - 3.0).abs() < 1e-9);
        assert!(s.count > 90);
    }

    #[test]
    fn beyond_theta_r_is_empty() {
        let f = GridFunction::from_fn(uniform_grid(0.0, 50.0, 0.01).unwrap(), Axis::X, |x| {
            (1.0 + x * x).ln()
        })
        .unwrap();
        let d = u_dual(&f, &LogCoupling, &[1.0, 2.5], &DualOptions::default()).unwrap();
        let sd = SubdiffMap::from_dual(&d, f.len(), true);
        assert!(sd.z_star[0].is_some());
        assert!(sd.z_star[1].is_none());
    }

    #[test]
    fn shuffled_map_is_not_monotone() {
        let sd = SubdiffMap::from_sets(vec![
            Some(ArgmaxSet { lo: 3, hi: 3, count: 1 }),
            Some(ArgmaxSet { lo: 1, hi: 1, count: 1 }),
            Some(ArgmaxSet { lo: 5, hi: 5, count: 1 }),
        ]);
        assert!(!check_monotone(&sd, Orientation::Increasing));
        assert!(!check_monotone(&sd, Orientation::Decreasing));
    }

    #[test]
    fn divide_and_conquer_agrees() {
        let f = logcosh_grid();
        let zs = uniform_grid(-0.5, 1.2, 0.003).unwrap();
        let bf = u_dual(&f, &Lin, &zs, &DualOptions::default()).unwrap();
        let opts = DualOptions { method: DualMethod::DivideAndConquer, ..Default::default() };
        let dc = u_dual(&f, &Lin, &zs, &opts).unwrap();
        assert_eq!(bf.func.values(), dc.func.values());
        assert_eq!(bf.argmax, dc.argmax);
    }

    #[test]
    fn csv_round_trip() {
        let f = GridFunction::new(vec![0.0, 0.5, 1.0], vec![0.1, 1.0 / 3.0, f64::INFINITY], Axis::X)
            .unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("inf"));
        let g = GridFunction::read_csv(buf.as_slice(), Axis::X).unwrap();
        assert_eq!(f, g);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig { cases: 64, failure_persistence: None, ..Default::default() })]

        #[test]
        fn young_inequality_holds(vals in proptest::collection::vec(-3.0..3.0f64, 5..40)) {
            let ys: Vec<f64> = (0..vals.len()).map(|i| i as f64 * 0.1).collect();
            let zs = uniform_grid(-2.0, 2.0, 0.05).unwrap();
            let f = GridFunction::new(ys.clone(), vals.clone(), Axis::X).unwrap();
            let d = u_dual(&f, &Lin, &zs, &DualOptions::default()).unwrap();
            for (y, fy) in ys.iter().zip(&vals) {
                for (z, g) in zs.iter().zip(d.func.values()) {
                    proptest::prop_assert!(fy + g >= y * z - 1e-12);
                }
            }
        }

        #[test]
        fn divide_and_conquer_matches_brute_force(vals in proptest::collection::vec(-3.0..3.0f64, 5..40)) {
            let ys: Vec<f64> = (0..vals.len()).map(|i| i as f64 * 0.1).collect();
            let zs = uniform_grid(-2.0, 2.0, 0.05).unwrap();
            // the divide-and-conquer path relies on monotone argmax, so take a u-convex input
            let f = GridFunction::new(ys, vals, Axis::X).unwrap();
            let g = u_dual(&f, &Lin, &zs, &DualOptions::default()).unwrap().func;
            let bf = u_dual(&g, &Swapped(&Lin), f.grid(), &DualOptions::default()).unwrap();
            let opts = DualOptions { method: DualMethod::DivideAndConquer, ..Default::default() };
            let dc = u_dual(&g, &Swapped(&Lin), f.grid(), &opts).unwrap();
            for (a, b) in bf.func.values().iter().zip(dc.func.values()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
