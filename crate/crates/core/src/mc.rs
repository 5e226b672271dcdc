//! Monte Carlo checks of hitting-time Laplace transforms and stopped values.
//!
//! Paths are split into shards. Shard `k` draws from ChaCha8 seeded with
//! `seed` on stream `k`, and shard statistics are merged in shard order, so
//! results depend only on `(seed, shards)` and not on the thread count.
//! `STOPCAL_THREADS` sizes the worker pool.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::birthdeath::BirthDeathChain;
use crate::diffusion::SpeedMeasure;
use crate::error::{Error, Result};
use crate::payoffs::PayoffFamily;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub paths: usize,
    /// Euler step (time units).
    pub dt: f64,
    /// Horizon cap; paths still running are truncated.
    pub t_max: f64,
    pub shards: usize,
    /// Per-path jump cap for chain simulation.
    pub max_jumps: u64,
    /// Brownian-bridge crossing correction for the Euler scheme.
    pub bridge: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            paths: 10_000,
            dt: 1e-4,
            t_max: 40.0,
            shards: 16,
            max_jumps: 100_000,
            bridge: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 100 {
            return Err(Error::InvalidParameter("paths must be at least 100".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        if !(self.t_max > self.dt) || !self.t_max.is_finite() {
            return Err(Error::InvalidParameter("t_max must be finite and exceed dt".into()));
        }
        if self.shards == 0 || self.shards > self.paths {
            return Err(Error::InvalidParameter("shards must be in 1..=paths".into()));
        }
        if self.max_jumps == 0 {
            return Err(Error::InvalidParameter("max_jumps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Truncated paths contribute `e^{-ρ t_max}` (an upper value for them).
    pub mean: f64,
    pub stderr: f64,
    pub paths_used: usize,
    pub truncated_fraction: f64,
    /// Mean with truncated paths contributing 0.
    pub lower_bound: f64,
}

impl Estimate {
    fn exact(v: f64, paths: usize) -> Estimate {
        Estimate { mean: v, stderr: 0.0, paths_used: paths, truncated_fraction: 0.0, lower_bound: v }
    }

    fn scaled(self, c: f64) -> Estimate {
        Estimate { mean: self.mean * c, stderr: self.stderr * c.abs(), lower_bound: self.lower_bound * c, ..self }
    }

    /// `|mean - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Welford) -> Welford {
        if o.n == 0 {
            return self;
        }
        if self.n == 0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Welford {
            n,
            mean: self.mean + d * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    w: Welford,
    lower: f64,
    truncated: u64,
}

struct Sample {
    value: f64,
    truncated: bool,
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("STOPCAL_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn run_sharded<F>(cfg: &SimConfig, path: F) -> Result<Estimate>
where
    F: Fn(&mut ChaCha8Rng) -> Sample + Sync,
{
    let (base, extra) = (cfg.paths / cfg.shards, cfg.paths % cfg.shards);
    let shards: Vec<Accum> = pool()?.install(|| {
        (0..cfg.shards)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(k as u64);
                let mut acc = Accum::default();
                for _ in 0..base + usize::from(k < extra) {
                    let s = path(&mut rng);
                    acc.w.push(s.value);
                    if s.truncated {
                        acc.truncated += 1;
                    } else {
                        acc.lower += s.value;
                    }
                }
                acc
            })
            .collect()
    });
    let acc = shards.into_iter().fold(Accum::default(), |a, b| Accum {
        w: a.w.merge(b.w),
        lower: a.lower + b.lower,
        truncated: a.truncated + b.truncated,
    });
    let n = acc.w.n as f64;
    Ok(Estimate {
        mean: acc.w.mean,
        stderr: (acc.w.m2 / (n - 1.0)).sqrt() / n.sqrt(),
        paths_used: acc.w.n as usize,
        truncated_fraction: acc.truncated as f64 / n,
        lower_bound: acc.lower / n,
    })
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter("rho must be positive and finite".into()));
    }
    Ok(())
}

/// `σ = density^{-1/2}` with the density interpolated linearly.
struct SigmaTable {
    x: Vec<f64>,
    d: Vec<f64>,
}

impl SigmaTable {
    fn new(m: &SpeedMeasure, x_target: f64) -> Result<SigmaTable> {
        let g = m.density.grid();
        let end = g.partition_point(|x| *x < x_target).min(g.len() - 1);
        let x = g[..=end].to_vec();
        let d = m.density.values()[..=end].to_vec();
        if let Some(i) = d.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidMeasure(format!("density must be positive and finite, got {} at x = {}", d[i], x[i])));
        }
        Ok(SigmaTable { x, d })
    }

    fn max_sigma(&self) -> f64 {
        self.d.iter().fold(0.0, |a, d| a.max(d.powf(-0.5)))
    }

    /// `idx` is a cursor that follows the path.
    fn at(&self, x: f64, idx: &mut usize) -> f64 {
        let n = self.x.len();
        if n == 1 || x >= self.x[n - 1] {
            return self.d[n - 1].powf(-0.5);
        }
        while *idx > 0 && self.x[*idx] > x {
            *idx -= 1;
        }
        while *idx + 2 < n && self.x[*idx + 1] <= x {
            *idx += 1;
        }
        let i = *idx;
        let w = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
        (self.d[i] + w * (self.d[i + 1] - self.d[i])).powf(-0.5)
    }
}

/// `E_0[e^{-ρ H_x}]` for `dX = σ(X) dW` reflected at 0.
pub fn estimate_laplace(m: &SpeedMeasure, rho: f64, x_target: f64, cfg: &SimConfig) -> Result<Estimate> {
    check_rho(rho)?;
    cfg.validate()?;
    if !(x_target >= 0.0) || !x_target.is_finite() {
        return Err(Error::InvalidParameter("target must be finite and nonnegative".into()));
    }
    if x_target == 0.0 {
        return Ok(Estimate::exact(1.0, cfg.paths));
    }
    if x_target >= m.xi || x_target > *m.density.grid().last().unwrap() {
        return Err(Error::InvalidParameter(format!("target {x_target} lies beyond the state space")));
    }
    if !m.atoms.is_empty() || m.mass_at_zero > 0.0 {
        return Err(Error::InvalidMeasure("atoms are not simulated pathwise".into()));
    }
    let sig = SigmaTable::new(m, x_target)?;
    let step = sig.max_sigma() * cfg.dt.sqrt();
    if step > 0.1 * x_target {
        return Err(Error::StepTooCoarse { step, target: x_target });
    }
    let (dt, sq, b) = (cfg.dt, cfg.dt.sqrt(), x_target);
    let cap = (-rho * cfg.t_max).exp();
    run_sharded(cfg, |rng| {
        let (mut x, mut t, mut idx) = (0.0f64, 0.0f64, 0usize);
        loop {
            if t >= cfg.t_max {
                return Sample { value: cap, truncated: true };
            }
            let s = sig.at(x, &mut idx);
            let z: f64 = rng.sample(StandardNormal);
            let x1 = (x + s * sq * z).abs();
            t += dt;
            let mut hit = x1 >= b;
            if !hit && cfg.bridge {
                let p = (-2.0 * (b - x) * (b - x1) / (s * s * dt)).exp();
                hit = rng.gen::<f64>() < p;
            }
            if hit {
                return Sample { value: (-rho * t).exp(), truncated: false };
            }
            x = x1;
        }
    })
}

/// Exact-event simulation of the chain from state 0 to `n_target`.
/// Paths exceeding the jump cap count as not hitting and contribute 0.
pub fn estimate_ctmc_laplace(chain: &BirthDeathChain, rho: f64, n_target: usize, cfg: &SimConfig) -> Result<Estimate> {
    check_rho(rho)?;
    cfg.validate()?;
    if n_target >= chain.states.len() {
        return Err(Error::InvalidParameter(format!("target state {n_target} outside the chain")));
    }
    if n_target == 0 {
        return Ok(Estimate::exact(1.0, cfg.paths));
    }
    let holds = chain.lambda[..n_target]
        .iter()
        .map(|l| Exp::new(*l).map_err(|_| Error::InvalidParameter(format!("rate {l} is not positive"))))
        .collect::<Result<Vec<_>>>()?;
    let p = &chain.p[..n_target];
    let cap = (-rho * cfg.t_max).exp();
    run_sharded(cfg, |rng| {
        let (mut n, mut t, mut jumps) = (0usize, 0.0f64, 0u64);
        while n != n_target {
            if jumps >= cfg.max_jumps {
                return Sample { value: 0.0, truncated: true };
            }
            if t > cfg.t_max {
                return Sample { value: cap, truncated: true };
            }
            t += rng.sample(holds[n]);
            n = if rng.gen::<f64>() < p[n] { n + 1 } else { n - 1 };
            jumps += 1;
        }
        Sample { value: (-rho * t).exp(), truncated: false }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedValue {
    pub x_stop: f64,
    pub estimate: Estimate,
    /// Same seed at `x_stop` scaled by 0.8, 0.9, 1.1 and 1.2.
    pub sweep: Vec<SweepPoint>,
    /// No sweep point beats `x_stop` by more than 3 standard errors.
    pub maximizer_confirmed: bool,
}

/// `E[e^{-ρH} G(X_H, θ)]` for the rule "stop at `x_stop`".
pub fn estimate_stopped_value(
    m: &SpeedMeasure,
    p: &PayoffFamily,
    theta: f64,
    x_stop: f64,
    rho: f64,
    cfg: &SimConfig,
) -> Result<StoppedValue> {
    let one = |x: f64| -> Result<Estimate> {
        let g = p.big_g(x, theta);
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!("G({x}, {theta}) is not finite")));
        }
        Ok(estimate_laplace(m, rho, x, cfg)?.scaled(g))
    };
    let estimate = one(x_stop)?;
    let mut sweep = Vec::new();
    for f in [0.8, 0.9, 1.1, 1.2] {
        let x = x_stop * f;
        match one(x) {
            Ok(e) => sweep.push(SweepPoint { x, estimate: e }),
            Err(Error::InvalidParameter(_)) | Err(Error::StepTooCoarse { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let se = sweep.iter().map(|s| s.estimate.stderr).fold(estimate.stderr, f64::max);
    let maximizer_confirmed = sweep.iter().all(|s| s.estimate.mean <= estimate.mean + 3.0 * se);
    Ok(StoppedValue { x_stop, estimate, sweep, maximizer_confirmed })
}
