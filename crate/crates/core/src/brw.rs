//! Boundary-case branching random walk.
//!
//! The law of one generation is either Gaussian (k children, k fixed or
//! random, with i.i.d. N(μ, v) displacements) or a finite list of outcomes.
//! The associated random walk S has step law E f(S₁) = E Σ f(V) e^{−V}.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;
use crate::levy::BoundFit;
use crate::rng::{normal, par_replicas};
use crate::stats::Estimate;

pub const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChildCount {
    Fixed(usize),
    /// (k, probability) pairs.
    Random(Vec<(usize, f64)>),
}

impl ChildCount {
    pub fn mean(&self) -> f64 {
        match self {
            ChildCount::Fixed(k) => *k as f64,
            ChildCount::Random(d) => d.iter().map(|(k, p)| *k as f64 * p).sum(),
        }
    }

    fn extinction_possible(&self) -> bool {
        match self {
            ChildCount::Fixed(k) => *k == 0,
            ChildCount::Random(d) => d.iter().any(|(k, p)| *k == 0 && *p > 0.0),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            ChildCount::Fixed(k) => *k,
            ChildCount::Random(d) => pick(d.iter().map(|e| e.1), rng).map_or(0, |i| d[i].0),
        }
    }

    /// Size-biased count: P̂(k) ∝ k·P(k).
    fn sample_size_biased<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            ChildCount::Fixed(k) => *k,
            ChildCount::Random(d) => pick(d.iter().map(|e| e.0 as f64 * e.1), rng).map_or(0, |i| d[i].0),
        }
    }
}

/// Index drawn with probability proportional to `weights`.
fn pick<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> Option<usize> {
    let total: f64 = weights.clone().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(i);
            }
            u -= w;
            last = Some(i);
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OffspringLaw {
    Gaussian { children: ChildCount, mean: f64, variance: f64 },
    /// (probability, displacements of the children).
    Generic { outcomes: Vec<(f64, Vec<f64>)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// E Σ e^{−V} − 1
    pub residual_mean: f64,
    /// E Σ V e^{−V}
    pub residual_derivative: f64,
    /// E Σ V² e^{−V}
    pub sigma2: f64,
    /// E[W₁ (Σ V₊e^{−V})^γ] at γ = 1.5, exact for finite laws and Monte
    /// Carlo otherwise.
    pub moment_gamma: Estimate,
    pub closed_form: bool,
}

impl OffspringLaw {
    /// Two children, i.i.d. N(2 ln 2, 2 ln 2) displacements.
    pub fn canonical() -> Self {
        let m = 2.0 * std::f64::consts::LN_2;
        OffspringLaw::Gaussian { children: ChildCount::Fixed(2), mean: m, variance: m }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut family = None;
        let (mut children, mut dist, mut mean, mut variance) = (None, Vec::new(), None, None);
        let mut outcomes = Vec::new();
        for e in kv::parse(text) {
            match e.key.as_str() {
                "family" => family = Some(e.single()?.to_string()),
                "name" => {}
                "children" => children = Some(e.integer()? as usize),
                "children_dist" => {
                    let v = e.floats()?;
                    if v.len() != 2 || v[0] < 0.0 || v[0].fract() != 0.0 {
                        return Err(Error::Parse { line: e.line, msg: "expected `children_dist <k> <p>`".into() });
                    }
                    dist.push((v[0] as usize, v[1]));
                }
                "mean" => mean = Some(e.float()?),
                "variance" => variance = Some(e.float()?),
                "outcome" => {
                    let v = e.floats()?;
                    if v.is_empty() {
                        return Err(Error::Parse { line: e.line, msg: "outcome needs a probability".into() });
                    }
                    outcomes.push((v[0], v[1..].to_vec()));
                }
                other => return Err(Error::Parse { line: e.line, msg: format!("unknown key `{other}`") }),
            }
        }
        let law = match family.as_deref() {
            Some("gaussian") => {
                let children = match (children, dist.is_empty()) {
                    (Some(k), true) => ChildCount::Fixed(k),
                    (None, false) => ChildCount::Random(dist),
                    _ => return Err(Error::InvalidModel("give exactly one of `children` or `children_dist`".into())),
                };
                let mean = mean.ok_or_else(|| Error::InvalidModel("missing `mean`".into()))?;
                let variance = variance.ok_or_else(|| Error::InvalidModel("missing `variance`".into()))?;
                OffspringLaw::Gaussian { children, mean, variance }
            }
            Some("generic") => OffspringLaw::Generic { outcomes },
            Some(f) => return Err(Error::InvalidModel(format!("unknown family `{f}`"))),
            None => return Err(Error::InvalidModel("missing `family`".into())),
        };
        law.check_parameters()?;
        Ok(law)
    }

    pub fn to_text(&self) -> String {
        match self {
            OffspringLaw::Gaussian { children, mean, variance } => {
                let mut s = String::from("family gaussian\n");
                match children {
                    ChildCount::Fixed(k) => s += &format!("children {k}\n"),
                    ChildCount::Random(d) => {
                        for (k, p) in d {
                            s += &format!("children_dist {k} {p:?}\n");
                        }
                    }
                }
                s + &format!("mean {mean:?}\nvariance {variance:?}\n")
            }
            OffspringLaw::Generic { outcomes } => {
                let mut s = String::from("family generic\n");
                for (p, d) in outcomes {
                    s += &format!("outcome {p:?}");
                    for x in d {
                        s += &format!(" {x:?}");
                    }
                    s.push('\n');
                }
                s
            }
        }
    }

    fn check_parameters(&self) -> Result<()> {
        let probs_ok = |ps: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = ps.collect();
            v.iter().all(|p| p.is_finite() && *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        match self {
            OffspringLaw::Gaussian { children, mean, variance } => {
                if !(mean.is_finite() && variance.is_finite() && *variance >= 0.0) {
                    return Err(Error::InvalidModel("Gaussian parameters must be finite, variance ≥ 0".into()));
                }
                if let ChildCount::Random(d) = children {
                    if !probs_ok(&mut d.iter().map(|e| e.1)) {
                        return Err(Error::InvalidModel("child-count probabilities must sum to 1".into()));
                    }
                }
            }
            OffspringLaw::Generic { outcomes } => {
                if outcomes.is_empty() || !probs_ok(&mut outcomes.iter().map(|o| o.0)) {
                    return Err(Error::InvalidModel("outcome probabilities must sum to 1".into()));
                }
                if outcomes.iter().flat_map(|o| &o.1).any(|x| !x.is_finite()) {
                    return Err(Error::InvalidModel("displacements must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn mean_children(&self) -> f64 {
        match self {
            OffspringLaw::Gaussian { children, .. } => children.mean(),
            OffspringLaw::Generic { outcomes } => outcomes.iter().map(|(p, d)| p * d.len() as f64).sum(),
        }
    }

    pub fn extinction_possible(&self) -> bool {
        match self {
            OffspringLaw::Gaussian { children, .. } => children.extinction_possible(),
            OffspringLaw::Generic { outcomes } => outcomes.iter().any(|(p, d)| *p > 0.0 && d.is_empty()),
        }
    }

    /// (E Σ e^{−V}, E Σ V e^{−V}, E Σ V² e^{−V}).
    pub fn tilted_moments(&self) -> (f64, f64, f64) {
        match self {
            OffspringLaw::Gaussian { children, mean, variance } => {
                let base = children.mean() * (-mean + variance / 2.0).exp();
                let shifted = mean - variance;
                (base, base * shifted, base * (variance + shifted * shifted))
            }
            OffspringLaw::Generic { outcomes } => outcomes.iter().fold((0.0, 0.0, 0.0), |acc, (p, d)| {
                d.iter().fold(acc, |(a, b, c), &x| {
                    let w = p * (-x).exp();
                    (a + w, b + w * x, c + w * x * x)
                })
            }),
        }
    }

    /// Displacements of one family.
    pub fn sample_children<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        match self {
            OffspringLaw::Gaussian { children, mean, variance } => {
                let sd = variance.sqrt();
                for _ in 0..children.sample(rng) {
                    out.push(mean + sd * normal(rng));
                }
            }
            OffspringLaw::Generic { outcomes } => {
                if let Some(i) = pick(outcomes.iter().map(|o| o.0), rng) {
                    out.extend_from_slice(&outcomes[i].1);
                }
            }
        }
    }

    /// One step of the associated random walk S.
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            OffspringLaw::Gaussian { mean, variance, .. } => mean - variance + variance.sqrt() * normal(rng),
            OffspringLaw::Generic { outcomes } => {
                let pairs = outcomes.iter().flat_map(|(p, d)| d.iter().map(move |&x| (p * (-x).exp(), x)));
                let i = pick(pairs.clone().map(|e| e.0), rng).expect("boundary law has positive mass");
                pairs.clone().nth(i).map(|e| e.1).unwrap_or(0.0)
            }
        }
    }

    /// A family under the size-biased law Θ̂ (density Σ e^{−V} against Θ).
    pub fn sample_size_biased<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        match self {
            OffspringLaw::Gaussian { children, mean, variance } => {
                // draw the pair (family, marked child) with density ∝ e^{−V_marked}:
                // size-biased count, uniform mark, tilted mark displacement
                let sd = variance.sqrt();
                let k = children.sample_size_biased(rng);
                let mark = rng.random_range(0..k.max(1));
                for j in 0..k {
                    let m = if j == mark { mean - variance } else { *mean };
                    out.push(m + sd * normal(rng));
                }
            }
            OffspringLaw::Generic { outcomes } => {
                let w = outcomes.iter().map(|(p, d)| p * d.iter().map(|x| (-x).exp()).sum::<f64>());
                if let Some(i) = pick(w, rng) {
                    out.extend_from_slice(&outcomes[i].1);
                }
            }
        }
    }

    fn moment_gamma(&self, gamma: f64, samples: usize, seed: u64) -> (Estimate, bool) {
        let f = |d: &[f64]| {
            let w: f64 = d.iter().map(|x| (-x).exp()).sum();
            let m: f64 = d.iter().map(|x| x.max(0.0) * (-x).exp()).sum();
            w * m.powf(gamma)
        };
        match self {
            OffspringLaw::Generic { outcomes } => {
                let v = outcomes.iter().map(|(p, d)| p * f(d)).sum();
                (Estimate { value: v, se: 0.0 }, true)
            }
            OffspringLaw::Gaussian { .. } => {
                let xs = par_replicas(seed, samples, |rng, _| {
                    let mut d = Vec::new();
                    self.sample_children(rng, &mut d);
                    f(&d)
                });
                (Estimate::from_samples(&xs), false)
            }
        }
    }
}

/// Certify the boundary conditions E Σ e^{−V} = 1 and E Σ V e^{−V} = 0.
pub fn validate_boundary(law: &OffspringLaw) -> Result<BoundaryReport> {
    law.check_parameters()?;
    let (m0, m1, m2) = law.tilted_moments();
    let (residual_mean, residual_derivative) = (m0 - 1.0, m1);
    if residual_mean.abs() > BOUNDARY_TOL || residual_derivative.abs() > BOUNDARY_TOL {
        return Err(Error::InvalidModel(format!(
            "not in the boundary case: E Σ e^(-V) - 1 = {residual_mean:e}, E Σ V e^(-V) = {residual_derivative:e}"
        )));
    }
    let (moment_gamma, closed_form) = law.moment_gamma(1.5, 100_000, 0x6a6d);
    Ok(BoundaryReport { residual_mean, residual_derivative, sigma2: m2, moment_gamma, closed_form })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrwConfig {
    /// Readout generations, increasing.
    pub generations: Vec<usize>,
    /// Barrier a for the truncated sums; `f64::INFINITY` for none.
    pub barrier: f64,
    /// Drop particles with e^{−V} < factor·E[k]^{−n}, keeping a ledger.
    pub prune_factor: Option<f64>,
    pub max_particles: usize,
    /// Give up conditioning on survival after this many restarts.
    pub max_resamples: usize,
}

impl BrwConfig {
    pub fn new(generations: Vec<usize>) -> Self {
        Self {
            generations,
            barrier: f64::INFINITY,
            prune_factor: None,
            max_particles: 20_000_000,
            max_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrwReadout {
    pub n: usize,
    pub w: f64,
    pub m: f64,
    pub w_a: f64,
    /// Σ h₀(a+V) e^{−V} over particles whose ancestors stayed above −a.
    /// NaN when no renewal function was supplied.
    pub m_a: f64,
    /// Σ (a+V) e^{−V} over the same particles.
    pub m_a_shifted: f64,
    pub particles: usize,
    /// e^{−V} of pruned particles at the time they were pruned.
    pub pruned_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrwRun {
    pub readouts: Vec<BrwReadout>,
    /// Extinct attempts discarded before this surviving run.
    pub resamples: usize,
}

/// Simulate one replica, conditioned on surviving to the last readout.
pub fn simulate<R: Rng + ?Sized>(
    law: &OffspringLaw,
    cfg: &BrwConfig,
    h0: Option<&RenewalFunction>,
    rng: &mut R,
) -> Result<BrwRun> {
    if cfg.generations.windows(2).any(|w| w[1] <= w[0]) || cfg.generations.is_empty() {
        return Err(Error::Config("generations must be non-empty and increasing".into()));
    }
    if !(cfg.barrier >= 0.0) {
        return Err(Error::Config("barrier must be ≥ 0".into()));
    }
    let mut resamples = 0;
    loop {
        if let Some(readouts) = attempt(law, cfg, h0, rng)? {
            return Ok(BrwRun { readouts, resamples });
        }
        resamples += 1;
        if resamples > cfg.max_resamples {
            return Err(Error::Insufficient(format!("population died out {resamples} times in a row")));
        }
    }
}

fn attempt<R: Rng + ?Sized>(
    law: &OffspringLaw,
    cfg: &BrwConfig,
    h0: Option<&RenewalFunction>,
    rng: &mut R,
) -> Result<Option<Vec<BrwReadout>>> {
    let a = cfg.barrier;
    let mean_k = law.mean_children();
    let (mut v, mut vmin) = (vec![0.0f64], vec![0.0f64]);
    let (mut nv, mut nmin) = (Vec::new(), Vec::new());
    let mut family = Vec::new();
    let mut pruned = 0.0;
    let mut readouts = Vec::with_capacity(cfg.generations.len());
    let last = *cfg.generations.last().unwrap();
    let mut next = 0;
    for n in 0..=last {
        if n == cfg.generations[next] {
            let mut r = BrwReadout {
                n,
                w: 0.0,
                m: 0.0,
                w_a: 0.0,
                m_a: if h0.is_some() { 0.0 } else { f64::NAN },
                m_a_shifted: 0.0,
                particles: v.len(),
                pruned_weight: pruned,
            };
            for (&x, &lo) in v.iter().zip(&vmin) {
                let e = (-x).exp();
                r.w += e;
                r.m += x * e;
                if lo >= -a {
                    r.w_a += e;
                    r.m_a_shifted += (a + x) * e;
                    if let Some(h) = h0 {
                        r.m_a += h.eval(a + x) * e;
                    }
                }
            }
            readouts.push(r);
            next += 1;
        }
        if n == last {
            break;
        }
        nv.clear();
        nmin.clear();
        let threshold = cfg.prune_factor.map(|f| f * mean_k.powi(-(n as i32 + 1)));
        for (&x, &lo) in v.iter().zip(&vmin) {
            law.sample_children(rng, &mut family);
            for &d in &family {
                let y = x + d;
                if let Some(th) = threshold {
                    if (-y).exp() < th {
                        pruned += (-y).exp();
                        continue;
                    }
                }
                nv.push(y);
                nmin.push(lo.min(y));
            }
        }
        if nv.len() > cfg.max_particles {
            return Err(Error::MemoryBudget {
                budget: cfg.max_particles,
                at: (n + 1) as f64,
                last_checkpoint: readouts.len().checked_sub(1),
            });
        }
        if nv.is_empty() && law.extinction_possible() {
            return Ok(None);
        }
        std::mem::swap(&mut v, &mut nv);
        std::mem::swap(&mut vmin, &mut nmin);
    }
    Ok(Some(readouts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrwRatio {
    pub n: usize,
    pub scaled_w: f64,
    pub m: f64,
    /// √n·Wₙ/Mₙ, NaN when Mₙ ≤ 0.
    pub ratio: f64,
}

pub fn seneta_heyde_ratio_brw(readouts: &[BrwReadout]) -> Vec<BrwRatio> {
    readouts
        .iter()
        .map(|r| {
            let scaled_w = (r.n as f64).sqrt() * r.w;
            let ratio = if r.m > 0.0 { scaled_w / r.m } else { f64::NAN };
            BrwRatio { n: r.n, scaled_w, m: r.m, ratio }
        })
        .collect()
}

/// √(2/(πσ²)), the limit of √n·Wₙ/Mₙ.
pub fn seneta_heyde_target(sigma2: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * sigma2)).sqrt()
}

/// Monte Carlo renewal function of the strict descending ladder heights of S.
///
/// Each path runs until it drops below −u_max or reaches n_max steps. Ladder
/// depths (−S at new strict minima) are kept per path, so h₀ and its
/// standard error are available at every u ≤ u_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalFunction {
    pub u_max: f64,
    pub n_max: usize,
    /// Ascending ladder depths of each path, up to u_max.
    pub depths: Vec<Vec<f64>>,
    /// −min S of the paths stopped by n_max.
    pub truncated_depths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H0Estimate {
    pub u: f64,
    pub value: f64,
    pub se: f64,
    /// P(S̲_{n_max} ≥ −u)·h₀(u), bounding the ladder epochs beyond n_max.
    pub tail_bound: f64,
    pub flagged: bool,
}

impl RenewalFunction {
    pub fn build(law: &OffspringLaw, u_max: f64, n_max: usize, replicas: usize, seed: u64) -> Self {
        let runs = par_replicas(seed, replicas, |rng, _| {
            let (mut s, mut min) = (0.0f64, 0.0f64);
            let mut depths = Vec::new();
            for _ in 0..n_max {
                s += law.sample_step(rng);
                if s < min {
                    min = s;
                    if -s > u_max {
                        return (depths, None);
                    }
                    depths.push(-s);
                }
            }
            (depths, Some(-min))
        });
        let mut depths = Vec::with_capacity(replicas);
        let mut truncated_depths = Vec::new();
        for (d, t) in runs {
            depths.push(d);
            truncated_depths.extend(t);
        }
        Self { u_max, n_max, depths, truncated_depths }
    }

    fn count(depths: &[f64], u: f64) -> f64 {
        depths.partition_point(|&d| d <= u) as f64
    }

    /// Point estimate of h₀(u); NaN beyond u_max.
    pub fn eval(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        if u > self.u_max {
            return f64::NAN;
        }
        1.0 + self.depths.iter().map(|d| Self::count(d, u)).sum::<f64>() / self.depths.len() as f64
    }

    pub fn estimate(&self, u: f64, tail_tol: f64) -> H0Estimate {
        let counts: Vec<f64> = self.depths.iter().map(|d| 1.0 + Self::count(d, u)).collect();
        let e = Estimate::from_samples(&counts);
        let stuck = self.truncated_depths.iter().filter(|&&d| d <= u).count() as f64;
        let tail_bound = stuck / self.depths.len() as f64 * e.value;
        H0Estimate {
            u,
            value: if u > self.u_max { f64::NAN } else { e.value },
            se: e.se,
            tail_bound,
            flagged: tail_bound > tail_tol || u > self.u_max,
        }
    }

    /// Paired estimate of h₀(u) − E[h₀(S₁+u); S₁ ≥ −u]. Each path is compared
    /// with its own counts at `k` fresh steps, so the terms are i.i.d.
    pub fn harmonicity_residual(&self, law: &OffspringLaw, u: f64, k: usize, seed: u64) -> Result<Estimate> {
        if u < 0.0 || u > self.u_max {
            return Err(Error::Domain(format!("u = {u} outside [0, {}]", self.u_max)));
        }
        let mut overflow = false;
        let d: Vec<f64> = self
            .depths
            .iter()
            .enumerate()
            .map(|(r, depths)| {
                let mut rng = crate::rng::replica_rng(seed, r as u64);
                let lhs = 1.0 + Self::count(depths, u);
                let rhs = (0..k)
                    .map(|_| {
                        let x = law.sample_step(&mut rng) + u;
                        if x < 0.0 {
                            0.0
                        } else {
                            if x > self.u_max {
                                overflow = true;
                            }
                            1.0 + Self::count(depths, x)
                        }
                    })
                    .sum::<f64>()
                    / k as f64;
                lhs - rhs
            })
            .collect();
        if overflow {
            return Err(Error::Domain("S₁ + u left the resolved range; raise u_max".into()));
        }
        Ok(Estimate::from_samples(&d))
    }
}

pub fn renewal_h0(law: &OffspringLaw, u: f64, n_max: usize, replicas: usize, seed: u64) -> H0Estimate {
    RenewalFunction::build(law, u, n_max, replicas, seed).estimate(u, 0.05)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C0Estimate {
    pub slope: Estimate,
    pub intercept: f64,
    /// Slope fitted on the lower half of the u-range, for a convergence check.
    pub lower_slope: f64,
    pub converged: bool,
}

/// c₀ = lim h₀(u)/u as the least-squares slope of h₀ on `us`. The slope is
/// linear in the per-path counts, so its SE comes from the per-path slopes.
pub fn c0_estimate(rf: &RenewalFunction, us: &[f64]) -> Result<C0Estimate> {
    if us.len() < 4 || us.iter().any(|&u| u > rf.u_max || u < 0.0) {
        return Err(Error::Domain("need ≥ 4 abscissae inside [0, u_max]".into()));
    }
    let fit = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slopes: Vec<f64> = rf
            .depths
            .iter()
            .map(|d| {
                let ys: Vec<f64> = xs.iter().map(|&u| RenewalFunction::count(d, u)).collect();
                let my = ys.iter().sum::<f64>() / n;
                xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx
            })
            .collect();
        let slope = Estimate::from_samples(&slopes);
        let mean_h: f64 = xs.iter().map(|&u| rf.eval(u)).sum::<f64>() / n;
        (slope, mean_h - slope.value * mx)
    };
    let (slope, intercept) = fit(us);
    let (lower, _) = fit(&us[..us.len() / 2]);
    let converged = (lower.value - slope.value).abs() <= 0.1 * slope.value + 3.0 * (lower.se + slope.se);
    Ok(C0Estimate { slope, intercept, lower_slope: lower.value, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstPassageCheck {
    pub u: f64,
    /// √n·P(S̲_n ≥ −u)
    pub lhs: Estimate,
    /// (1/c₀)√(2/(πσ²))·h₀(u)
    pub rhs: f64,
    pub relative_error: f64,
}

pub fn first_passage_check(
    law: &OffspringLaw,
    sigma2: f64,
    c0: f64,
    rf: &RenewalFunction,
    us: &[f64],
    n: usize,
    replicas: usize,
    seed: u64,
) -> Vec<FirstPassageCheck> {
    let u_top = us.iter().copied().fold(0.0, f64::max);
    let mins = par_replicas(seed, replicas, |rng, _| {
        let (mut s, mut min) = (0.0f64, 0.0f64);
        for _ in 0..n {
            s += law.sample_step(rng);
            min = min.min(s);
            if min < -u_top {
                break;
            }
        }
        min
    });
    us.iter()
        .map(|&u| {
            let p = Estimate::proportion(mins.iter().filter(|&&m| m >= -u).count(), replicas);
            let lhs = p.scaled((n as f64).sqrt());
            let rhs = seneta_heyde_target(sigma2) / c0 * rf.eval(u);
            FirstPassageCheck { u, lhs, rhs, relative_error: (lhs.value - rhs).abs() / rhs }
        })
        .collect()
}

/// Spine positions V(w₀), …, V(wₙ) under the size-biased measure: each
/// generation draws a family from Θ̂ and picks the spine child with
/// probability e^{−V}/Σ e^{−V}.
pub fn sample_spine<R: Rng + ?Sized>(law: &OffspringLaw, n: usize, rng: &mut R) -> Vec<f64> {
    let mut pos = Vec::with_capacity(n + 1);
    pos.push(0.0);
    let mut family = Vec::new();
    for _ in 0..n {
        law.sample_size_biased(rng, &mut family);
        let j = choose_spine_child(&family, rng).expect("size-biased family is non-empty");
        pos.push(pos[pos.len() - 1] + family[j]);
    }
    pos
}

/// Index of a child drawn with probability e^{−V}/Σ e^{−V}.
pub fn choose_spine_child<R: Rng + ?Sized>(positions: &[f64], rng: &mut R) -> Option<usize> {
    pick(positions.iter().map(|x| (-x).exp()), rng)
}

pub type PathFunction<'a> = (&'a str, &'a (dyn Fn(&[f64]) -> f64 + Sync));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManyToOneEntry {
    pub name: String,
    /// E Σ_{|x|=n} g(V(x₁), …, V(xₙ))
    pub population: Estimate,
    /// E[e^{Sₙ} g(S₁, …, Sₙ)]
    pub walk: Estimate,
    pub z: f64,
    /// Relative SE of the walk side above 0.1.
    pub heavy_tail_warning: bool,
}

pub const MANY_TO_ONE_MAX_N: usize = 8;

/// Compare both sides of the many-to-one identity for each test function.
pub fn many_to_one_check(
    law: &OffspringLaw,
    n: usize,
    functions: &[PathFunction<'_>],
    replicas: usize,
    seed: u64,
) -> Result<Vec<ManyToOneEntry>> {
    if n == 0 || n > MANY_TO_ONE_MAX_N {
        return Err(Error::Domain(format!("many-to-one check supports 1 ≤ n ≤ {MANY_TO_ONE_MAX_N}")));
    }
    let population = par_replicas(seed, replicas, |rng, _| {
        let mut paths: Vec<Vec<f64>> = vec![Vec::new()];
        let mut family = Vec::new();
        for _ in 0..n {
            let mut next = Vec::with_capacity(paths.len() * 2);
            for p in &paths {
                law.sample_children(rng, &mut family);
                let x = p.last().copied().unwrap_or(0.0);
                for &d in &family {
                    let mut q = p.clone();
                    q.push(x + d);
                    next.push(q);
                }
            }
            paths = next;
        }
        functions.iter().map(|(_, g)| paths.iter().map(|p| g(p)).sum::<f64>()).collect::<Vec<f64>>()
    });
    let walk = par_replicas(crate::rng::sub_seed(seed, 1), replicas, |rng, _| {
        let mut s = Vec::with_capacity(n);
        let mut x = 0.0;
        for _ in 0..n {
            x += law.sample_step(rng);
            s.push(x);
        }
        functions.iter().map(|(_, g)| x.exp() * g(&s)).collect::<Vec<f64>>()
    });
    Ok(functions
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let lhs = Estimate::from_samples(&population.iter().map(|r| r[i]).collect::<Vec<_>>());
            let rhs = Estimate::from_samples(&walk.iter().map(|r| r[i]).collect::<Vec<_>>());
            let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
            let z = if se > 0.0 { (lhs.value - rhs.value) / se } else if lhs.value == rhs.value { 0.0 } else { f64::INFINITY };
            ManyToOneEntry {
                name: (*name).to_string(),
                population: lhs,
                walk: rhs,
                z,
                heavy_tail_warning: rhs.se > 0.1 * rhs.value.abs(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkBallotGrid {
    pub starts: Vec<f64>,
    pub offsets: Vec<f64>,
    pub widths: Vec<f64>,
    pub steps: Vec<usize>,
}

impl Default for WalkBallotGrid {
    fn default() -> Self {
        Self {
            starts: vec![0.5, 1.0, 2.0],
            offsets: vec![0.0, 1.0, 3.0],
            widths: vec![1.0, 2.0],
            steps: vec![25, 100, 400],
        }
    }
}

/// n^{3/2}·P(S̲ₙ ≥ −a, b−a ≤ Sₙ ≤ b−a+u)/((u+1)(a+1)(b+u+1)) over the grid.
pub fn walk_ballot_check(law: &OffspringLaw, grid: &WalkBallotGrid, replicas: usize, seed: u64) -> Result<BoundFit> {
    let mut steps = grid.steps.clone();
    steps.sort_unstable();
    let n_max = *steps.last().ok_or_else(|| Error::Insufficient("empty step grid".into()))?;
    let mut ratios = Vec::new();
    for (ai, &a) in grid.starts.iter().enumerate() {
        let ends = par_replicas(crate::rng::sub_seed(seed, ai as u64), replicas, |rng, _| {
            let mut s = 0.0;
            let mut out = vec![f64::NAN; steps.len()];
            let mut k = 0;
            for i in 1..=n_max {
                s += law.sample_step(rng);
                if s < -a {
                    break;
                }
                if i == steps[k] {
                    out[k] = s;
                    k += 1;
                }
            }
            out
        });
        for (k, &n) in steps.iter().enumerate() {
            for &b in &grid.offsets {
                for &u in &grid.widths {
                    let hits = ends
                        .iter()
                        .filter(|e| e[k] >= b - a && e[k] <= b - a + u)
                        .count() as f64
                        / replicas as f64;
                    let shape = (u + 1.0) * (a + 1.0) * (b + u + 1.0);
                    ratios.push((n as f64, (n as f64).powf(1.5) * hits / shape));
                }
            }
        }
    }
    Ok(BoundFit::from_ratios("walk_ballot", &ratios))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;
    use crate::stats::two_sample_ks;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn canonical_law_is_boundary_case() {
        let r = validate_boundary(&OffspringLaw::canonical()).unwrap();
        assert!(r.residual_mean.abs() < 1e-12 && r.residual_derivative.abs() < 1e-12);
        assert!((r.sigma2 - 2.0 * LN2).abs() < 1e-12);
        assert!(r.moment_gamma.value.is_finite());
        assert!((seneta_heyde_target(r.sigma2) - 0.677_660_751_603_105).abs() < 1e-12);
    }

    #[test]
    fn deterministic_ln2_fails_derivative_condition() {
        let law = OffspringLaw::Generic { outcomes: vec![(1.0, vec![LN2, LN2])] };
        match validate_boundary(&law) {
            Err(Error::InvalidModel(msg)) => assert!(msg.contains("6.93147"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let (m0, m1, _) = law.tilted_moments();
        assert!((m0 - 1.0).abs() < 1e-15 && (m1 - LN2).abs() < 1e-15);
    }

    #[test]
    fn step_law_is_centered() {
        for law in [OffspringLaw::canonical(), generic_boundary_law()] {
            let mut rng = replica_rng(1, 0);
            let xs: Vec<f64> = (0..50_000).map(|_| law.sample_step(&mut rng)).collect();
            assert!(Estimate::from_samples(&xs).within(0.0, 3.0));
        }
    }

    /// One child at −1 with probability p, otherwise two children at y.
    /// p is fixed by the derivative condition and y by bisection on the mean.
    fn generic_boundary_law() -> OffspringLaw {
        let e = std::f64::consts::E;
        let solve = |y: f64| {
            let p = 2.0 * y * (-y).exp() / (2.0 * y * (-y).exp() + e);
            (p, p * e + (1.0 - p) * 2.0 * (-y).exp() - 1.0)
        };
        let (mut lo, mut hi) = (0.5, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if solve(mid).1 > 0.0 { lo = mid } else { hi = mid }
        }
        let y = 0.5 * (lo + hi);
        let p = solve(y).0;
        OffspringLaw::Generic { outcomes: vec![(p, vec![-1.0]), (1.0 - p, vec![y, y])] }
    }

    #[test]
    fn generic_law_round_trips_and_validates() {
        let law = generic_boundary_law();
        validate_boundary(&law).unwrap();
        let back = OffspringLaw::from_text(&law.to_text()).unwrap();
        assert_eq!(back, law);
        let canon = OffspringLaw::from_text(&OffspringLaw::canonical().to_text()).unwrap();
        assert_eq!(canon, OffspringLaw::canonical());
        assert!(OffspringLaw::from_text("family gaussian\nchildren 2\nmean 1").is_err());
        assert!(OffspringLaw::from_text("family weird").is_err());
    }

    #[test]
    fn generation_zero_and_means() {
        let law = OffspringLaw::canonical();
        let cfg = BrwConfig::new(vec![0, 1, 5]);
        let runs = par_replicas(2, 20_000, |rng, _| simulate(&law, &cfg, None, rng).unwrap());
        assert_eq!((runs[0].readouts[0].w, runs[0].readouts[0].m), (1.0, 0.0));
        for k in 1..3 {
            let w: Vec<f64> = runs.iter().map(|r| r.readouts[k].w).collect();
            let m: Vec<f64> = runs.iter().map(|r| r.readouts[k].m).collect();
            assert!(Estimate::from_samples(&w).within(1.0, 3.0));
            assert!(Estimate::from_samples(&m).within(0.0, 3.0));
        }
    }

    #[test]
    fn random_child_count_with_extinction_is_resampled() {
        // k ∈ {0, 4} with probability 1/2 each: E k = 2, same Gaussian tilt.
        let m = 2.0 * LN2;
        let law = OffspringLaw::Gaussian {
            children: ChildCount::Random(vec![(0, 0.5), (4, 0.5)]),
            mean: m,
            variance: m,
        };
        validate_boundary(&law).unwrap();
        let cfg = BrwConfig::new(vec![6]);
        let runs = par_replicas(3, 200, |rng, _| simulate(&law, &cfg, None, rng).unwrap());
        assert!(runs.iter().all(|r| r.readouts[0].particles > 0));
        assert!(runs.iter().map(|r| r.resamples).sum::<usize>() > 0);
    }

    #[test]
    fn pruning_stays_within_ledger() {
        let law = OffspringLaw::canonical();
        let exact = BrwConfig::new(vec![12]);
        let mut pruned = exact.clone();
        pruned.prune_factor = Some(1e-3);
        let count = |cfg: &BrwConfig| {
            let c: Vec<f64> = par_replicas(4, 200, |rng, _| {
                simulate(&law, cfg, None, rng).unwrap().readouts[0].particles as f64
            });
            Estimate::from_samples(&c).value
        };
        assert_eq!(count(&exact), 4096.0);
        assert!(count(&pruned) < 4096.0);
        // in expectation the gap equals the ledger
        let gaps = par_replicas(5, 3000, |rng, _| {
            let b = simulate(&law, &pruned, None, rng).unwrap().readouts[0].clone();
            b.w + b.pruned_weight
        });
        assert!(Estimate::from_samples(&gaps).within(1.0, 3.0));
    }

    #[test]
    fn truncated_sums_and_barrier_sentinel() {
        let law = OffspringLaw::canonical();
        let mut cfg = BrwConfig::new(vec![6]);
        let mut rng = replica_rng(6, 0);
        let r = simulate(&law, &cfg, None, &mut rng).unwrap().readouts[0].clone();
        assert_eq!(r.w_a, r.w);
        assert!(r.m_a.is_nan());
        cfg.barrier = 0.5;
        let rf = RenewalFunction::build(&law, 30.0, 10_000, 200, 1);
        let mut rng = replica_rng(6, 0);
        let t = simulate(&law, &cfg, Some(&rf), &mut rng).unwrap().readouts[0].clone();
        assert!(t.w_a <= t.w);
        assert!(t.m_a >= 0.0 && t.m_a_shifted >= 0.0);
    }

    #[test]
    fn renewal_function_basics() {
        let law = OffspringLaw::canonical();
        let rf = RenewalFunction::build(&law, 8.0, 100_000, 2000, 7);
        assert_eq!(rf.eval(0.0), 1.0);
        let grid: Vec<f64> = (0..=16).map(|k| k as f64 * 0.5).collect();
        assert!(grid.windows(2).all(|w| rf.eval(w[0]) <= rf.eval(w[1])));
        assert!(rf.eval(8.5).is_nan());
        for u in [0.5, 1.0, 2.0] {
            let d = rf.harmonicity_residual(&law, u, 16, 8).unwrap();
            assert!(d.within(0.0, 3.0), "u={u}: {d:?}");
        }
    }

    #[test]
    fn spine_steps_follow_the_walk() {
        let law = OffspringLaw::canonical();
        let mut rng = replica_rng(9, 0);
        let spine: Vec<f64> = (0..4000)
            .map(|_| {
                let p = sample_spine(&law, 1, &mut rng);
                p[1] - p[0]
            })
            .collect();
        let walk: Vec<f64> = (0..4000).map(|_| law.sample_step(&mut rng)).collect();
        assert!(two_sample_ks(&spine, &walk).unwrap().p_value > 0.01);
        assert_eq!(sample_spine(&law, 0, &mut rng), vec![0.0]);
    }

    #[test]
    fn spine_choice_is_proportional_to_weight() {
        let family = [0.3f64, 1.2, -0.4];
        let total: f64 = family.iter().map(|x| (-x).exp()).sum();
        let mut rng = replica_rng(10, 0);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[choose_spine_child(&family, &mut rng).unwrap()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(Estimate::proportion(c, 30_000).within((-family[i]).exp() / total, 3.0));
        }
    }

    #[test]
    fn many_to_one_small() {
        let law = OffspringLaw::canonical();
        let one = |_: &[f64]| 1.0;
        let decay = |s: &[f64]| (-s[s.len() - 1]).exp();
        let r = many_to_one_check(&law, 1, &[("one", &one), ("exp", &decay)], 20_000, 11).unwrap();
        assert_eq!(r[0].population.value, 2.0);
        assert!(r[0].z.abs() <= 3.0);
        assert!((r[1].walk.value - 1.0).abs() < 1e-12 && r[1].z.abs() <= 3.0);
        assert!(many_to_one_check(&law, 9, &[("one", &one)], 10, 1).is_err());
    }
}
