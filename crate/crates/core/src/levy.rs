//! The tagged fragment under the change of measure: a compound Poisson
//! subordinator ξ, centered into Z_s = ξ_s − sΦ′(p). Paths are simulated
//! exactly. Between jumps Z decreases linearly, so infima sit at pre-jump
//! endpoints and barrier crossings are solved in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::DislocationSpec;
use crate::rng::{exponential, par_replicas};
use crate::stats::{weighted_ks, Estimate, KsResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub size: f64,
    pub rate: f64,
}

/// Compound Poisson subordinator with Laplace exponent Φ(p+q) − Φ(p) and the
/// centering drift Φ′(p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedSubordinatorSpec {
    p: f64,
    jumps: Vec<Jump>,
    total_rate: f64,
    drift: f64,
}

/// Esscher-tilt the tagged-fragment law at `p`. Each mass sᵢ of an atom with
/// rate r becomes a jump of size −ln sᵢ at rate r·sᵢ^{1+p}; equal sizes merge.
pub fn tilt(spec: &DislocationSpec, p: f64) -> Result<TiltedSubordinatorSpec> {
    let mut jumps: Vec<Jump> = Vec::new();
    for atom in spec.atoms() {
        for &s in atom.masses.iter().filter(|&&s| s > 0.0) {
            let size = -s.ln();
            let rate = atom.rate * s.powf(1.0 + p);
            match jumps.iter_mut().find(|j| (j.size - size).abs() <= 1e-14 * size.max(1.0)) {
                Some(j) => j.rate += rate,
                None => jumps.push(Jump { size, rate }),
            }
        }
    }
    // a mass of exactly 1 is a null jump
    jumps.retain(|j| j.size > 0.0);
    if jumps.is_empty() {
        return Err(Error::InvalidModel("tilted law has no jumps".into()));
    }
    jumps.sort_by(|a, b| a.size.total_cmp(&b.size));
    let total_rate = jumps.iter().map(|j| j.rate).sum();
    let drift = spec.phi_derivatives(p)?.0;
    Ok(TiltedSubordinatorSpec { p, jumps, total_rate, drift })
}

/// Outcome of one path observed at a list of times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// Z at each requested time; NaN once the path has been killed.
    pub z: Vec<f64>,
    /// First time Z < floor, or +∞ if that does not happen by the last time.
    pub passage: f64,
}

impl TiltedSubordinatorSpec {
    pub fn tilt_parameter(&self) -> f64 {
        self.p
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    /// Centering speed Φ′(p).
    pub fn drift(&self) -> f64 {
        self.drift
    }

    /// Killing rate of the tilted law, always 0.
    pub fn killing_rate(&self) -> f64 {
        0.0
    }

    pub fn laplace_exponent(&self, q: f64) -> f64 {
        self.jumps.iter().map(|j| j.rate * (1.0 - (-q * j.size).exp())).sum()
    }

    /// Mean of ξ₁; equals the drift, so Z is centered.
    pub fn mean_rate(&self) -> f64 {
        self.jumps.iter().map(|j| j.rate * j.size).sum()
    }

    /// Var ξ₁ = σ² at the critical tilt.
    pub fn variance_rate(&self) -> f64 {
        self.jumps.iter().map(|j| j.rate * j.size * j.size).sum()
    }

    /// log E e^{εξ₁}; finite for every ε since there are finitely many jumps.
    pub fn log_exponential_moment(&self, eps: f64) -> f64 {
        self.jumps.iter().map(|j| j.rate * ((eps * j.size).exp() - 1.0)).sum()
    }

    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut u = rng.random::<f64>() * self.total_rate;
        for j in &self.jumps {
            if u < j.rate {
                return j.size;
            }
            u -= j.rate;
        }
        self.jumps[self.jumps.len() - 1].size
    }

    pub fn sample_xi<R: Rng + ?Sized>(&self, rng: &mut R, t: f64) -> f64 {
        let mut s = exponential(rng, self.total_rate);
        let mut xi = 0.0;
        while s <= t {
            xi += self.sample_jump(rng);
            s += exponential(rng, self.total_rate);
        }
        xi
    }

    /// Walk the path segment by segment up to `horizon`. On [s0, s1) the
    /// process is z0 − drift·(s − s0). The visitor returns false to stop.
    fn segments<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        horizon: f64,
        mut visit: impl FnMut(f64, f64, f64) -> bool,
    ) {
        let (mut s, mut z) = (0.0, 0.0);
        loop {
            let next = s + exponential(rng, self.total_rate);
            if !visit(s, next.min(horizon), z) || next >= horizon {
                return;
            }
            z += self.sample_jump(rng) - self.drift * (next - s);
            s = next;
        }
    }

    /// Sample Z from 0 at increasing `times`, killed on first passage below
    /// `floor` (use −∞ for no barrier).
    pub fn path<R: Rng + ?Sized>(&self, rng: &mut R, times: &[f64], floor: f64) -> PathRecord {
        let horizon = times.last().copied().unwrap_or(0.0);
        let mut z_at = vec![f64::NAN; times.len()];
        let mut passage = f64::INFINITY;
        let mut k = 0;
        let c = self.drift;
        self.segments(rng, horizon, |s0, s1, z0| {
            let end = z0 - c * (s1 - s0);
            let killed_at = if end < floor && c > 0.0 { Some(s0 + (z0 - floor) / c) } else { None };
            let stop = killed_at.unwrap_or(f64::INFINITY);
            while k < times.len() && times[k] < stop && (times[k] < s1 || s1 >= horizon) {
                z_at[k] = z0 - c * (times[k] - s0);
                k += 1;
            }
            if let Some(hit) = killed_at {
                passage = hit;
                return false;
            }
            k < times.len()
        });
        PathRecord { z: z_at, passage }
    }

    /// Z at `times` for many independent replicas, `[replica][time]`.
    pub fn sample_marginals(&self, times: &[f64], replicas: usize, seed: u64) -> Vec<Vec<f64>> {
        par_replicas(seed, replicas, |rng, _| self.path(rng, times, f64::NEG_INFINITY).z)
    }
}

/// P(ζᵃ > t) for each t in `times`, with ζᵃ the first passage of Z below −a.
pub fn survival_curve(
    tilted: &TiltedSubordinatorSpec,
    a: f64,
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Vec<Estimate> {
    let passages = par_replicas(seed, replicas, |rng, _| tilted.path(rng, times, -a).passage);
    times
        .iter()
        .map(|&t| Estimate::proportion(passages.iter().filter(|&&p| p > t).count(), replicas))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstPassagePoint {
    pub t: f64,
    pub survival: Estimate,
    /// √t·P(ζᵃ > t)
    pub scaled: Estimate,
    /// a·√(2/(πσ²))
    pub target: f64,
}

impl FirstPassagePoint {
    pub fn relative_error(&self) -> f64 {
        (self.scaled.value - self.target).abs() / self.target
    }
}

pub fn first_passage_survival(
    tilted: &TiltedSubordinatorSpec,
    a: f64,
    times: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<FirstPassagePoint>> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("barrier must be positive, got {a}")));
    }
    let target = a * (2.0 / (std::f64::consts::PI * tilted.variance_rate())).sqrt();
    Ok(survival_curve(tilted, a, times, replicas, seed)
        .into_iter()
        .zip(times)
        .map(|(survival, &t)| FirstPassagePoint {
            t,
            survival,
            scaled: survival.scaled(t.sqrt()),
            target,
        })
        .collect())
}

pub const MIN_SURVIVORS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedEndpoints {
    pub a: f64,
    pub t: f64,
    pub replicas: usize,
    /// (a + Z_t)/√t for the paths with inf Z ≥ −a on [0, t].
    pub survivors: Vec<f64>,
    /// KS distance to σ times a Rayleigh variable.
    pub ks: KsResult,
    /// Fewer than [`MIN_SURVIVORS`] survivors.
    pub flagged: bool,
}

/// Endpoint law of the process started at a and conditioned to stay
/// non-negative, compared with the scaled meander marginal.
pub fn conditioned_endpoint_stats(
    tilted: &TiltedSubordinatorSpec,
    a: f64,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<ConditionedEndpoints> {
    if !(a > 0.0 && t > 0.0) {
        return Err(Error::Domain("need a > 0 and t > 0".into()));
    }
    let records = par_replicas(seed, replicas, |rng, _| tilted.path(rng, &[t], -a));
    let survivors: Vec<f64> = records
        .iter()
        .filter(|r| r.passage.is_infinite())
        .map(|r| (a + r.z[0]) / t.sqrt())
        .collect();
    if survivors.is_empty() {
        return Err(Error::Insufficient("no surviving paths".into()));
    }
    let sigma = tilted.variance_rate().sqrt();
    let pairs: Vec<(f64, f64)> = survivors.iter().map(|&x| (x, 1.0)).collect();
    let ks = weighted_ks(&pairs, |x| reference::rayleigh_cdf(x, sigma))?;
    Ok(ConditionedEndpoints {
        a,
        t,
        replicas,
        flagged: survivors.len() < MIN_SURVIVORS,
        survivors,
        ks,
    })
}

/// Grid on which the ballot-type upper bounds are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallotGrid {
    pub starts: Vec<f64>,
    pub times: Vec<f64>,
    /// Endpoint windows [u, v] with u ≤ v.
    pub windows: Vec<(f64, f64)>,
}

impl Default for BallotGrid {
    fn default() -> Self {
        Self {
            starts: vec![0.5, 1.0, 2.0],
            times: vec![25.0, 100.0, 400.0],
            windows: vec![(0.0, 1.0), (1.0, 2.0), (0.0, 3.0)],
        }
    }
}

/// Fitted constant of an upper bound `lhs ≤ c·shape`, with the largest ratio
/// lhs/shape seen at each time of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFit {
    pub name: String,
    pub constant: f64,
    pub per_time: Vec<(f64, f64)>,
    /// The ratio at the largest time stays within [`GROWTH_ALLOWANCE`] of its
    /// maximum over the earlier times.
    pub bounded: bool,
}

pub const GROWTH_ALLOWANCE: f64 = 1.25;

impl BoundFit {
    pub fn from_ratios(name: &str, ratios: &[(f64, f64)]) -> Self {
        let mut times: Vec<f64> = ratios.iter().map(|r| r.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let per_time: Vec<(f64, f64)> = times
            .iter()
            .map(|&t| {
                let m = ratios
                    .iter()
                    .filter(|r| r.0 == t)
                    .map(|r| r.1)
                    .fold(0.0, f64::max);
                (t, m)
            })
            .collect();
        let constant = per_time.iter().map(|p| p.1).fold(0.0, f64::max);
        let bounded = match per_time.split_last() {
            Some((last, earlier)) if !earlier.is_empty() => {
                let before = earlier.iter().map(|p| p.1).fold(0.0, f64::max);
                last.1.is_finite() && last.1 <= GROWTH_ALLOWANCE * before
            }
            _ => constant.is_finite(),
        };
        Self { name: name.to_string(), constant, per_time, bounded }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallotReport {
    /// √t·P_a(inf Z ≥ 0)/(1+a)
    pub survival: BoundFit,
    /// t^{3/2}·P_a(Z_t ∈ [u,v], inf Z ≥ 0)/((1+a)(1+v−u)(1+v))
    pub window: BoundFit,
    /// E_a[Z_t; inf Z ≥ 0]/a
    pub first_moment: BoundFit,
}

impl BallotReport {
    pub fn all_bounded(&self) -> bool {
        self.survival.bounded && self.window.bounded && self.first_moment.bounded
    }
}

pub fn ballot_bounds_check(
    tilted: &TiltedSubordinatorSpec,
    grid: &BallotGrid,
    replicas: usize,
    seed: u64,
) -> Result<BallotReport> {
    if grid.times.is_empty() || grid.starts.is_empty() {
        return Err(Error::Insufficient("empty ballot grid".into()));
    }
    if grid.windows.iter().any(|w| w.0 > w.1 || w.0 < 0.0) {
        return Err(Error::Domain("windows need 0 ≤ u ≤ v".into()));
    }
    let mut times = grid.times.clone();
    times.sort_by(f64::total_cmp);
    let (mut surv, mut win, mut mom) = (Vec::new(), Vec::new(), Vec::new());
    for (ai, &a) in grid.starts.iter().enumerate() {
        let records = par_replicas(seed.wrapping_add(ai as u64), replicas, |rng, _| {
            tilted.path(rng, &times, -a)
        });
        let n = replicas as f64;
        for (k, &t) in times.iter().enumerate() {
            // a + Z_t on survival, None once killed
            let ends: Vec<f64> = records
                .iter()
                .filter(|r| r.passage > t)
                .map(|r| a + r.z[k])
                .collect();
            let p = ends.len() as f64 / n;
            surv.push((t, t.sqrt() * p / (1.0 + a)));
            for &(u, v) in &grid.windows {
                let hits = ends.iter().filter(|&&x| x >= u && x <= v).count() as f64 / n;
                win.push((t, t.powf(1.5) * hits / ((1.0 + a) * (1.0 + v - u) * (1.0 + v))));
            }
            if a > 0.0 {
                mom.push((t, ends.iter().sum::<f64>() / n / a));
            }
        }
    }
    Ok(BallotReport {
        survival: BoundFit::from_ratios("survival", &surv),
        window: BoundFit::from_ratios("window", &win),
        first_moment: BoundFit::from_ratios("first_moment", &mom),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationReport {
    pub a: f64,
    pub theta: f64,
    /// (T, estimate of ∫₀^T E_a[e^{−θZ_s}; inf_{r≤s} Z_r ≥ 0] ds)
    pub values: Vec<(f64, Estimate)>,
    pub monotone: bool,
    /// Relative change between the last two horizons.
    pub last_relative_change: f64,
    /// I∞ from fitting I(T) = I∞ − K/√T through the last two horizons.
    pub extrapolated_limit: f64,
}

pub const SATURATION_TOLERANCE: f64 = 0.05;

impl OccupationReport {
    pub fn saturated(&self) -> bool {
        self.last_relative_change < SATURATION_TOLERANCE
    }
}

/// Occupation integral of the killed process started at a, integrated
/// exactly along each path.
pub fn occupation_integral_check(
    tilted: &TiltedSubordinatorSpec,
    a: f64,
    theta: f64,
    horizons: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<OccupationReport> {
    if !(theta > 0.0) || a < 0.0 {
        return Err(Error::Domain("need θ > 0 and a ≥ 0".into()));
    }
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("horizons must be non-empty and increasing".into()));
    }
    let c = tilted.drift;
    let t_max = horizons[horizons.len() - 1];
    // ∫ e^{−θ(x0 − c·r)} dr over r ∈ [0, len]
    let seg = |x0: f64, len: f64| {
        if c == 0.0 {
            (-theta * x0).exp() * len
        } else {
            (-theta * x0).exp() * ((theta * c * len).exp_m1()) / (theta * c)
        }
    };
    let per_path = par_replicas(seed, replicas, |rng, _| {
        let mut acc = vec![0.0; horizons.len()];
        tilted.segments(rng, t_max, |s0, s1, z0| {
            let x0 = a + z0;
            let end = if c > 0.0 { s1.min(s0 + x0 / c) } else { s1 };
            for (h, &big_t) in horizons.iter().enumerate() {
                let hi = end.min(big_t);
                if hi > s0 {
                    acc[h] += seg(x0, hi - s0);
                }
            }
            end >= s1
        });
        acc
    });
    let values: Vec<(f64, Estimate)> = horizons
        .iter()
        .enumerate()
        .map(|(h, &big_t)| {
            let col: Vec<f64> = per_path.iter().map(|v| v[h]).collect();
            (big_t, Estimate::from_samples(&col))
        })
        .collect();
    let monotone = values.windows(2).all(|w| w[1].1.value >= w[0].1.value);
    let last_relative_change = match values.len() {
        0 | 1 => 0.0,
        n => (values[n - 1].1.value - values[n - 2].1.value).abs() / values[n - 2].1.value,
    };
    let extrapolated_limit = match values.len() {
        0 | 1 => f64::NAN,
        n => {
            let ((t1, i1), (t2, i2)) = (values[n - 2], values[n - 1]);
            let k = (i2.value - i1.value) / (t1.powf(-0.5) - t2.powf(-0.5));
            i2.value + k / t2.sqrt()
        }
    };
    Ok(OccupationReport { a, theta, values, monotone, last_relative_change, extrapolated_limit })
}

/// Monte Carlo −ln E e^{−qξ₁} with a delta-method standard error.
pub fn laplace_exponent_mc(
    tilted: &TiltedSubordinatorSpec,
    q: f64,
    replicas: usize,
    seed: u64,
) -> Estimate {
    let xs = par_replicas(seed, replicas, |rng, _| (-q * tilted.sample_xi(rng, 1.0)).exp());
    let m = Estimate::from_samples(&xs);
    Estimate { value: -m.value.ln(), se: m.se / m.value }
}

/// Limit laws for the conditioned and unconditioned walks.
pub mod reference {
    use libm::{erf, erfc};
    use std::f64::consts::{PI, SQRT_2};

    pub fn normal_cdf(x: f64, sigma: f64) -> f64 {
        0.5 * erfc(-x / (sigma * SQRT_2))
    }

    /// Meander endpoint at time 1: density x e^{−x²/2}.
    pub fn rayleigh_pdf(x: f64, scale: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let y = x / scale;
        y * (-y * y / 2.0).exp() / scale
    }

    pub fn rayleigh_cdf(x: f64, scale: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let y = x / scale;
        -(-y * y / 2.0).exp_m1()
    }

    /// Three-dimensional Bessel process at time 1: density √(2/π) x² e^{−x²/2}.
    pub fn bessel3_pdf(x: f64, scale: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let y = x / scale;
        (2.0 / PI).sqrt() * y * y * (-y * y / 2.0).exp() / scale
    }

    pub fn bessel3_cdf(x: f64, scale: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let y = x / scale;
        erf(y / SQRT_2) - (2.0 / PI).sqrt() * y * (-y * y / 2.0).exp()
    }

    /// Largest gap between the Bessel-3 CDF and the integral of the
    /// x-tilted meander density, over `points` (unit scale).
    pub fn tilt_identity_residual(points: &[f64]) -> f64 {
        points
            .iter()
            .map(|&x| {
                let tilted = crate::quad::integrate(
                    |y| (2.0 / PI).sqrt() * y * rayleigh_pdf(y, 1.0),
                    0.0,
                    x,
                    1e-15,
                );
                (tilted - bessel3_cdf(x, 1.0)).abs()
            })
            .fold(0.0, f64::max)
    }
}
