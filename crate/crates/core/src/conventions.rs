//! Numeric conventions shared across the crate: tolerances, finite-difference
//! estimators on nonuniform grids, and a few small helpers.
//!
//! Extended reals are plain `f64`: `+inf` marks "outside the effective
//! domain", `-inf` never appears in stored values, and NaN is rejected
//! wherever data enters a public operation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uconvex::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative slack allowed in convexity tests.
    pub convexity_tol: f64,
    /// Relative slack used to decide argmax ties.
    pub tie_tol: f64,
    /// Absolute slack for duality identities; `None` derives it from the grid.
    pub dual_tol: Option<f64>,
    /// A derivative jump this many times the local curvature scale is an atom.
    pub kink_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            convexity_tol: 1e-8,
            tie_tol: 1e-9,
            dual_tol: None,
            kink_factor: 10.0,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.convexity_tol) || !ok(self.tie_tol) || !ok(self.kink_factor) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if let Some(d) = self.dual_tol {
            if !ok(d) {
                return Err(Error::InvalidParameter("dual_tol must be positive".into()));
            }
        }
        Ok(())
    }

    /// Duality slack: explicit value, or 5 x max spacing x Lipschitz estimate.
    pub fn dual_tol_for(&self, max_spacing: f64, lipschitz: f64) -> f64 {
        self.dual_tol
            .unwrap_or_else(|| (5.0 * max_spacing * lipschitz.abs().max(1.0)).max(1e-9))
    }

    /// True when `a` and `b` are equal up to the relative tie tolerance.
    pub fn ties(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.tie_tol * a.abs().max(b.abs()).max(1.0)
    }
}

fn interior(f: &GridFunction, i: usize) -> Result<()> {
    let n = f.len();
    if i == 0 || i + 1 >= n {
        return Err(Error::BoundaryIndex { index: i, len: n });
    }
    Ok(())
}

/// Second derivative estimate at an interior node. Exact for quadratics.
pub fn second_difference(f: &GridFunction, i: usize) -> Result<f64> {
    interior(f, i)?;
    let (x, y) = (f.grid(), f.values());
    Ok(second_diff_raw(x, y, i))
}

pub(crate) fn second_diff_raw(x: &[f64], y: &[f64], i: usize) -> f64 {
    let hl = x[i] - x[i - 1];
    let hr = x[i + 1] - x[i];
    2.0 * ((y[i + 1] - y[i]) / hr - (y[i] - y[i - 1]) / hl) / (hl + hr)
}

/// Left and right difference quotients at an interior node. Exact for linears.
pub fn one_sided_slopes(f: &GridFunction, i: usize) -> Result<(f64, f64)> {
    interior(f, i)?;
    let (x, y) = (f.grid(), f.values());
    Ok((
        (y[i] - y[i - 1]) / (x[i] - x[i - 1]),
        (y[i + 1] - y[i]) / (x[i + 1] - x[i]),
    ))
}

/// Derivative at `x[i]` of the quadratic through three nodes `idx`.
pub(crate) fn quad_derivative(x: &[f64], y: &[f64], idx: [usize; 3], at: usize) -> f64 {
    let [a, b, c] = idx;
    let t = x[at];
    let (xa, xb, xc) = (x[a], x[b], x[c]);
    y[a] * ((t - xb) + (t - xc)) / ((xa - xb) * (xa - xc))
        + y[b] * ((t - xa) + (t - xc)) / ((xb - xa) * (xb - xc))
        + y[c] * ((t - xa) + (t - xb)) / ((xc - xa) * (xc - xb))
}

/// Second-order one-sided derivative from the left (`x[i-2..=i]`).
pub(crate) fn left_derivative(x: &[f64], y: &[f64], i: usize) -> f64 {
    if i >= 2 {
        quad_derivative(x, y, [i - 2, i - 1, i], i)
    } else {
        (y[i] - y[i - 1]) / (x[i] - x[i - 1])
    }
}

/// Second-order one-sided derivative from the right (`x[i..=i+2]`).
pub(crate) fn right_derivative(x: &[f64], y: &[f64], i: usize) -> f64 {
    if i + 2 < x.len() {
        quad_derivative(x, y, [i, i + 1, i + 2], i)
    } else {
        (y[i + 1] - y[i]) / (x[i + 1] - x[i])
    }
}

/// Median of a slice (copies; NaN-free input assumed).
pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut w = v.to_vec();
    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = w.len();
    if n % 2 == 1 {
        w[n / 2]
    } else {
        0.5 * (w[n / 2 - 1] + w[n / 2])
    }
}

/// Greatest convex minorant of the points `(x[i], y[i])`, evaluated at each `x[i]`.
pub(crate) fn lower_hull(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut hull: Vec<usize> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b if it lies on or above the segment a -> i
            let cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = vec![0.0; x.len()];
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (k, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
            let t = (x[k] - x[a]) / (x[b] - x[a]);
            *o = y[a] + t * (y[b] - y[a]);
        }
    }
    if hull.len() == 1 {
        out[hull[0]] = y[hull[0]];
    }
    out
}

/// Linear interpolation on a sorted grid, clamped at the ends.
pub(crate) fn interp_linear(x: &[f64], y: &[f64], t: f64) -> f64 {
    let n = x.len();
    if t <= x[0] {
        return y[0];
    }
    if t >= x[n - 1] {
        return y[n - 1];
    }
    let j = match x.binary_search_by(|p| p.partial_cmp(&t).unwrap()) {
        Ok(j) => return y[j],
        Err(j) => j,
    };
    let w = (t - x[j - 1]) / (x[j] - x[j - 1]);
    y[j - 1] + w * (y[j] - y[j - 1])
}

/// Uniform grid `start, start+step, ...` up to `stop` (inclusive within step/1000).
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop > start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::InvalidGrid(format!("bad range {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step + 1e-3).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

/// Root of a continuous function on `[a, b]` by bisection; `f(a)` and `f(b)` must differ in sign.
pub(crate) fn bisect(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
pub(crate) fn golden_max(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_9;
    let mut c = b - R * (b - a);
    let mut d = a + R * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - R * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + R * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Serde adapter for extended reals: finite numbers as JSON numbers,
/// infinities as the strings `"inf"` and `"-inf"`.
pub mod ext_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => crate::uconvex::parse_ext(&t).map_err(de::Error::custom),
        }
    }

    pub mod vec {
        use super::Repr;
        use serde::{de, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                if x.is_finite() {
                    seq.serialize_element(x)?;
                } else if *x > 0.0 {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element("-inf")?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw = Vec::<Repr>::deserialize(d)?;
            raw.into_iter()
                .map(|r| match r {
                    Repr::Num(v) => Ok(v),
                    Repr::Text(t) => crate::uconvex::parse_ext(&t).map_err(de::Error::custom),
                })
                .collect()
        }
    }
}
