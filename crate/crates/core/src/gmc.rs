//! Log-correlated Gaussian field on a 1-d grid and its critical measures.
//!
//! X_t(x) has covariance ∫₀ᵗ k(eᵘ(x−y)) du. The time axis is cut into slices
//! of width Δt whose increments are independent stationary Gaussian vectors,
//! sampled by circulant embedding, or by a dense Cholesky factor when the
//! embedding is not non-negative on a small grid.

use std::f64::consts::{FRAC_2_PI, SQRT_2};
use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fragmentation::SenetaHeydePoint;
use crate::levy::BoundFit;
use crate::quad;
use crate::rng::{normal, par_replicas, replica_rng, sub_seed};
use crate::stats::Estimate;

pub const DEFAULT_DT: f64 = 0.05;
pub const DENSE_LIMIT: usize = 512;
const JITTER: f64 = 1e-12;
const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// (1−|x|)³(1+3|x|), positive definite.
    Wendland,
    /// (1−|x|)²(1+2|x|). Its Fourier transform changes sign.
    Smoothstep,
}

impl Kernel {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "wendland" => Ok(Kernel::Wendland),
            "smoothstep" => Ok(Kernel::Smoothstep),
            other => Err(Error::InvalidModel(format!("unknown kernel `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Wendland => "wendland",
            Kernel::Smoothstep => "smoothstep",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        let a = x.abs();
        if a >= 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Wendland => (1.0 - a).powi(3) * (1.0 + 3.0 * a),
            Kernel::Smoothstep => (1.0 - a).powi(2) * (1.0 + 2.0 * a),
        }
    }

    /// ∫ k(x) cos(ωx) dx.
    pub fn fourier(self, omega: f64) -> f64 {
        2.0 * quad::integrate(|x| self.eval(x) * (omega * x).cos(), 0.0, 1.0, QUAD_TOL)
    }
}

/// ∫_{t1}^{t2} k(eᵘ r) du.
pub fn covariance_slice(kernel: Kernel, t1: f64, t2: f64, r: f64) -> f64 {
    assert!(0.0 <= t1 && t1 < t2, "need 0 ≤ t1 < t2");
    let r = r.abs();
    if r == 0.0 {
        return t2 - t1;
    }
    // the integrand vanishes once eᵘr ≥ 1
    let upper = t2.min(-r.ln());
    if upper <= t1 {
        return 0.0;
    }
    quad::integrate(|u| kernel.eval(u.exp() * r), t1, upper, QUAD_TOL)
}

/// n cell-centred points (i + ½)Δx.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub dx: f64,
}

impl Grid {
    pub fn new(n: usize, dx: f64) -> Result<Self> {
        if n == 0 || !(dx > 0.0) {
            return Err(Error::Config("grid needs n ≥ 1 and Δx > 0".into()));
        }
        Ok(Self { n, dx })
    }

    pub fn unit(n: usize) -> Result<Self> {
        Self::new(n, 1.0 / n as f64)
    }

    pub fn point(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    /// Largest horizon whose correlation length e^{−t} is resolved.
    pub fn max_horizon(&self) -> f64 {
        -self.dx.ln()
    }

    /// Cells whose centres lie in [lo, hi).
    pub fn cells(&self, lo: f64, hi: f64) -> Range<usize> {
        let start = ((lo / self.dx - 0.5).ceil().max(0.0) as usize).min(self.n);
        let end = ((hi / self.dx - 0.5).ceil().max(0.0) as usize).clamp(start, self.n);
        start..end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Circulant,
    Dense,
}

enum Factor {
    Circulant { scale: Vec<f64>, fft: Arc<dyn Fft<f64>> },
    Dense(DMatrix<f64>),
}

struct Slice {
    t1: f64,
    t2: f64,
    factor: Factor,
}

impl Slice {
    fn build(kernel: Kernel, grid: Grid, t1: f64, t2: f64, planner: &mut FftPlanner<f64>) -> Result<Self> {
        let n = grid.n;
        // lags beyond the support are exactly zero
        let reach = ((-t1).exp() / grid.dx).ceil() as usize;
        let cov: Vec<f64> = (0..=n)
            .map(|m| if m <= reach { covariance_slice(kernel, t1, t2, m as f64 * grid.dx) } else { 0.0 })
            .collect();
        if n >= 2 {
            let size = 2 * n;
            let mut row: Vec<Complex<f64>> =
                (0..size).map(|j| Complex::new(cov[j.min(size - j)], 0.0)).collect();
            let fft = planner.plan_fft_forward(size);
            fft.process(&mut row);
            let top = row.iter().map(|z| z.re).fold(0.0, f64::max);
            let low = row.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
            if low >= -1e-10 * top {
                let scale = row.iter().map(|z| (z.re.max(0.0) / size as f64).sqrt()).collect();
                return Ok(Self { t1, t2, factor: Factor::Circulant { scale, fft } });
            }
            if n > DENSE_LIMIT {
                return Err(Error::Factorization {
                    t1,
                    t2,
                    msg: format!("circulant embedding has eigenvalue {low:e} and the grid is too large for a dense factor"),
                });
            }
        }
        let c = DMatrix::from_fn(n, n, |i, j| cov[i.abs_diff(j)]);
        let chol = c.clone().cholesky().or_else(|| {
            let mut jittered = c;
            for i in 0..n {
                jittered[(i, i)] += JITTER;
            }
            jittered.cholesky()
        });
        match chol {
            Some(ch) => Ok(Self { t1, t2, factor: Factor::Dense(ch.l()) }),
            None => Err(Error::Factorization { t1, t2, msg: "slice covariance is not positive definite after jitter".into() }),
        }
    }

    fn method(&self) -> Method {
        match self.factor {
            Factor::Circulant { .. } => Method::Circulant,
            Factor::Dense(_) => Method::Dense,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.factor {
            Factor::Circulant { scale, fft } => {
                let mut buf: Vec<Complex<f64>> =
                    scale.iter().map(|s| Complex::new(s * normal(rng), s * normal(rng))).collect();
                fft.process(&mut buf);
                for (o, z) in out.iter_mut().zip(&buf) {
                    *o = z.re;
                }
            }
            Factor::Dense(l) => {
                let z = DVector::from_fn(l.nrows(), |_, _| normal(rng));
                let x = l * z;
                out.copy_from_slice(x.as_slice());
            }
        }
    }
}

/// Slice factorizations for one (kernel, grid, Δt, horizon), shared read-only
/// across replicas.
#[derive(Clone)]
pub struct FieldSampler {
    kernel: Kernel,
    grid: Grid,
    dt: f64,
    slices: Arc<Vec<Slice>>,
}

impl std::fmt::Debug for FieldSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldSampler")
            .field("kernel", &self.kernel)
            .field("grid", &self.grid)
            .field("dt", &self.dt)
            .field("slices", &self.slices.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub t: f64,
    pub slice: usize,
    pub x: Vec<f64>,
    /// max over slice times s ≤ t of Y_s = X_s − √2·s.
    pub runmax_y: Vec<f64>,
}

impl FieldState {
    pub fn y(&self, i: usize) -> f64 {
        self.x[i] - SQRT_2 * self.t
    }
}

impl FieldSampler {
    /// Requires Δx ≤ e^{−horizon}.
    pub fn new(kernel: Kernel, grid: Grid, horizon: f64, dt: f64) -> Result<Self> {
        if horizon > grid.max_horizon() + 1e-12 {
            return Err(Error::Config(format!(
                "horizon {horizon} exceeds ln(1/Δx) = {:.4}; refine the grid",
                grid.max_horizon()
            )));
        }
        Self::coarse(kernel, grid, horizon, dt)
    }

    /// Same as [`FieldSampler::new`] without the resolution precondition,
    /// for few-point diagnostics.
    pub fn coarse(kernel: Kernel, grid: Grid, horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon >= 0.0) {
            return Err(Error::Config("need Δt > 0 and horizon ≥ 0".into()));
        }
        let count = slice_index(horizon, dt)?;
        let mut planner = FftPlanner::new();
        let slices = (0..count)
            .map(|k| Slice::build(kernel, grid, k as f64 * dt, (k + 1) as f64 * dt, &mut planner))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernel, grid, dt, slices: Arc::new(slices) })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.slices.len() as f64 * self.dt
    }

    /// Number of slices using each method, (circulant, dense).
    pub fn decisions(&self) -> (usize, usize) {
        let dense = self.slices.iter().filter(|s| s.method() == Method::Dense).count();
        (self.slices.len() - dense, dense)
    }

    pub fn initial_state(&self) -> FieldState {
        FieldState { t: 0.0, slice: 0, x: vec![0.0; self.grid.n], runmax_y: vec![0.0; self.grid.n] }
    }

    pub fn advance<R: Rng + ?Sized>(&self, state: &mut FieldState, until: f64, rng: &mut R) -> Result<()> {
        let target = slice_index(until, self.dt)?;
        if target > self.slices.len() {
            return Err(Error::Domain(format!("time {until} beyond sampler horizon {}", self.horizon())));
        }
        let mut inc = vec![0.0; self.grid.n];
        while state.slice < target {
            let s = &self.slices[state.slice];
            s.sample(rng, &mut inc);
            state.slice += 1;
            state.t = s.t2;
            let drift = SQRT_2 * state.t;
            for ((x, m), d) in state.x.iter_mut().zip(&mut state.runmax_y).zip(&inc) {
                *x += d;
                *m = m.max(*x - drift);
            }
        }
        Ok(())
    }

    /// States at each checkpoint.
    pub fn simulate<R: Rng + ?Sized>(&self, checkpoints: &[f64], rng: &mut R) -> Result<Vec<FieldState>> {
        if checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("checkpoints must be increasing".into()));
        }
        let mut state = self.initial_state();
        let mut out = Vec::with_capacity(checkpoints.len());
        for &t in checkpoints {
            self.advance(&mut state, t, rng)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    #[doc(hidden)]
    pub fn slice_bounds(&self, k: usize) -> (f64, f64) {
        (self.slices[k].t1, self.slices[k].t2)
    }
}

fn slice_index(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if (k * dt - t).abs() > 1e-9 * t.max(1.0) || k < 0.0 {
        return Err(Error::Config(format!("time {t} is not a multiple of the slice width {dt}")));
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub t: f64,
    /// M_t^{√2}(A) = ∫_A e^{√2 X_t − t} dx
    pub additive: f64,
    /// M′_t(A) = ∫_A (√2 t − X_t) e^{√2 X_t − t} dx
    pub derivative: f64,
    /// Additive measure over points with runmax Y ≤ a.
    pub additive_a: f64,
    /// Derivative measure over the same points with weight (a − Y_t);
    /// equal to `derivative` when a = ∞.
    pub derivative_a: f64,
}

pub fn critical_measures(state: &FieldState, grid: Grid, cells: Range<usize>, a: f64) -> Measures {
    let mut m = Measures { t: state.t, additive: 0.0, derivative: 0.0, additive_a: 0.0, derivative_a: 0.0 };
    for i in cells {
        let y = state.y(i);
        let e = (SQRT_2 * y + state.t).exp() * grid.dx;
        m.additive += e;
        m.derivative -= y * e;
        if state.runmax_y[i] <= a {
            m.additive_a += e;
            m.derivative_a += if a.is_finite() { (a - y) * e } else { -y * e };
        }
    }
    m
}

/// √t·M_t^{√2}(A) against √(2/π)·M′_t(A).
pub fn seneta_heyde_gmc(measures: &[Measures]) -> Vec<SenetaHeydePoint> {
    let c = FRAC_2_PI.sqrt();
    measures
        .iter()
        .map(|m| {
            let scaled_w = m.t.sqrt() * m.additive;
            let scaled_m = c * m.derivative;
            let ratio = if m.derivative > 0.0 { scaled_w / scaled_m } else { f64::NAN };
            SenetaHeydePoint { t: m.t, scaled_w, scaled_m, ratio }
        })
        .collect()
}

/// Flat little-endian dump: magic, n (u64), Δx, slice count (u64), then per
/// state t followed by the n values of X_t.
pub fn dump_trajectory<W: Write>(out: &mut W, grid: Grid, states: &[FieldState]) -> Result<()> {
    out.write_all(b"CSCFIELD")?;
    out.write_all(&(grid.n as u64).to_le_bytes())?;
    out.write_all(&grid.dx.to_le_bytes())?;
    out.write_all(&(states.len() as u64).to_le_bytes())?;
    for s in states {
        out.write_all(&s.t.to_le_bytes())?;
        for x in &s.x {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariancePoint {
    pub lag: usize,
    pub r: f64,
    pub sample: Estimate,
    pub exact: f64,
}

/// Sample covariance of X_t at several lags (averaged over pairs within each
/// replica, SE across replicas) against the quadrature value.
pub fn covariance_check(sampler: &FieldSampler, t: f64, lags: &[usize], replicas: usize, seed: u64) -> Result<Vec<CovariancePoint>> {
    let grid = sampler.grid();
    if lags.iter().any(|&m| m >= grid.n) {
        return Err(Error::Domain("lag exceeds the grid".into()));
    }
    let per = par_replicas(seed, replicas, |rng, _| -> Result<Vec<f64>> {
        let s = sampler.simulate(&[t], rng)?.pop().unwrap();
        Ok(lags
            .iter()
            .map(|&m| {
                let pairs = grid.n - m;
                (0..pairs).map(|i| s.x[i] * s.x[i + m]).sum::<f64>() / pairs as f64
            })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(lags
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let r = m as f64 * grid.dx;
            let xs: Vec<f64> = per.iter().map(|p| p[k]).collect();
            let exact = if t > 0.0 { covariance_slice(sampler.kernel(), 0.0, t, r) } else { 0.0 };
            CovariancePoint { lag: m, r, sample: Estimate::from_samples(&xs), exact }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub l: f64,
    pub t: f64,
    pub a: f64,
    /// Mean over continuations of √t·M^{√2,(a)}_{l+t}(A).
    pub restart: Estimate,
    /// Σ_A Δx e^{√2Y_l + l}·√t·P(max_k W_{kΔt} ≤ a − Y_l), with the walk
    /// maximum estimated from independent Gaussian walks.
    pub oracle: Estimate,
    /// √(2/π)·M′^{(a)}_l(A), the t → ∞ value.
    pub limit: f64,
}

/// Restart a state at time l and compare the continuation average of the
/// truncated additive measure with its conditional expectation.
pub fn restart_identity_check(
    sampler: &FieldSampler,
    state: &FieldState,
    cells: Range<usize>,
    a: f64,
    t: f64,
    continuations: usize,
    walks: usize,
    seed: u64,
) -> Result<RestartReport> {
    let grid = sampler.grid();
    let l = state.t;
    let until = l + t;
    let root_t = t.sqrt();
    let runs = par_replicas(seed, continuations, |rng, _| -> Result<f64> {
        let mut s = state.clone();
        sampler.advance(&mut s, until, rng)?;
        Ok(root_t * critical_measures(&s, grid, cells.clone(), a).additive_a)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // under the exponential tilt each Y point becomes a driftless walk
    let steps = slice_index(t, sampler.dt())?;
    let sd = sampler.dt().sqrt();
    let weights: Vec<(f64, f64)> = cells
        .clone()
        .filter(|&i| state.runmax_y[i] <= a)
        .map(|i| {
            let y = state.y(i);
            ((SQRT_2 * y + l).exp() * grid.dx, a - y)
        })
        .collect();
    let oracle = par_replicas(sub_seed(seed, 1), walks, |rng, _| {
        let (mut w, mut max) = (0.0f64, f64::NEG_INFINITY);
        for _ in 0..steps {
            w += sd * normal(rng);
            max = max.max(w);
        }
        root_t * weights.iter().filter(|p| max <= p.1).map(|p| p.0).sum::<f64>()
    });
    let limit = FRAC_2_PI.sqrt() * critical_measures(state, grid, cells, a).derivative_a;
    Ok(RestartReport {
        l,
        t,
        a,
        restart: Estimate::from_samples(&runs),
        oracle: Estimate::from_samples(&oracle),
        limit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferZoneReport {
    pub l: f64,
    pub blocks: usize,
    /// Sample correlation of log block measures of the post-l field
    /// increment, for adjacent block pairs.
    pub correlations: Vec<f64>,
    pub threshold: f64,
    pub independent: bool,
}

/// Blocks of `r` cells of length e^{−l}, separated by one buffer cell, so
/// their count is (e^l + 1)/(r + 1) rounded.
pub fn buffer_zone_check(sampler: &FieldSampler, l: f64, t: f64, r: usize, replicas: usize, seed: u64) -> Result<BufferZoneReport> {
    let grid = sampler.grid();
    let gap = (-l).exp();
    let blocks = (((l.exp() + 1.0) / (r as f64 + 1.0)).round() as usize).max(2);
    let ranges: Vec<Range<usize>> = (0..blocks)
        .map(|j| {
            let lo = j as f64 * (r as f64 + 1.0) * gap;
            grid.cells(lo, lo + r as f64 * gap)
        })
        .filter(|c| !c.is_empty())
        .collect();
    if ranges.len() < 2 {
        return Err(Error::Domain("fewer than two non-empty blocks".into()));
    }
    let logs = par_replicas(seed, replicas, |rng, _| -> Result<Vec<f64>> {
        let mut s = sampler.initial_state();
        sampler.advance(&mut s, l, rng)?;
        let before = s.x.clone();
        sampler.advance(&mut s, l + t, rng)?;
        Ok(ranges
            .iter()
            .map(|c| {
                c.clone()
                    .map(|i| (SQRT_2 * (s.x[i] - before[i]) - t).exp() * grid.dx)
                    .sum::<f64>()
                    .ln()
            })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let correlations: Vec<f64> = (0..ranges.len() - 1)
        .map(|j| {
            let u: Vec<f64> = logs.iter().map(|v| v[j]).collect();
            let w: Vec<f64> = logs.iter().map(|v| v[j + 1]).collect();
            correlation(&u, &w)
        })
        .collect();
    let threshold = 3.0 / (replicas as f64).sqrt();
    let independent = correlations.iter().all(|c| c.abs() <= threshold);
    Ok(BufferZoneReport { l, blocks: ranges.len(), correlations, threshold, independent })
}

pub fn correlation(u: &[f64], w: &[f64]) -> f64 {
    let n = u.len() as f64;
    let (mu, mw) = (u.iter().sum::<f64>() / n, w.iter().sum::<f64>() / n);
    let (mut suw, mut suu, mut sww) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(w) {
        suw += (a - mu) * (b - mw);
        suu += (a - mu).powi(2);
        sww += (b - mw).powi(2);
    }
    suw / (suu * sww).sqrt()
}

/// E[(√t·M^{√2,(a)}_t(A))²] per checkpoint, fitted as a bound with no
/// growth allowed beyond the shared allowance.
pub fn second_moment_check(
    sampler: &FieldSampler,
    checkpoints: &[f64],
    cells: Range<usize>,
    a: f64,
    replicas: usize,
    seed: u64,
) -> Result<(Vec<Estimate>, BoundFit)> {
    let grid = sampler.grid();
    let per = par_replicas(seed, replicas, |rng, _| -> Result<Vec<f64>> {
        Ok(sampler
            .simulate(checkpoints, rng)?
            .iter()
            .map(|s| (s.t.sqrt() * critical_measures(s, grid, cells.clone(), a).additive_a).powi(2))
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let est: Vec<Estimate> = (0..checkpoints.len())
        .map(|k| Estimate::from_samples(&per.iter().map(|p| p[k]).collect::<Vec<_>>()))
        .collect();
    let ratios: Vec<(f64, f64)> = checkpoints.iter().zip(&est).map(|(&t, e)| (t, e.value)).collect();
    Ok((est, BoundFit::from_ratios("second_moment", &ratios)))
}

/// One replica's measure readouts at each checkpoint, for runners.
pub fn measure_run(sampler: &FieldSampler, checkpoints: &[f64], a: f64, seed: u64, replica: u64) -> Result<Vec<Measures>> {
    let grid = sampler.grid();
    let mut rng = replica_rng(seed, replica);
    Ok(sampler
        .simulate(checkpoints, &mut rng)?
        .iter()
        .map(|s| critical_measures(s, grid, 0..grid.n, a))
        .collect())
}
