//! Event-driven homogeneous mass fragmentation and its critical martingales.
//!
//! Blocks are stored by their centered log-mass. With Z = −log X − tΦ′(p̄)
//! and Φ(p̄) = (1+p̄)Φ′(p̄), a block contributes e^{−(1+p̄)Z} to W(t, p̄).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{CriticalData, DislocationSpec};
use crate::levy::reference::bessel3_cdf;
use crate::rng::exponential;
use crate::stats::{weighted_ks, KsResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// −log of the block mass.
    pub log_mass: f64,
    pub birth_time: f64,
    /// Infimum of Z along the ancestral line up to the last split.
    /// Use [`FragmentationState::lineage_min`] for the infimum up to now.
    pub lineage_min_z: f64,
    /// Z of the ancestor alive at each configured path time reached so far.
    pub path_samples: Vec<f64>,
}

/// Live population at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationState {
    pub t: f64,
    pub blocks: Vec<Block>,
    pub critical: CriticalData,
    /// W-contribution of blocks dropped below the mass floor, valued at the
    /// time they were dropped. Bounds the bias of W in expectation.
    pub dropped_weight: f64,
}

impl FragmentationState {
    pub fn unit(critical: CriticalData) -> Self {
        Self::from_block(
            Block { log_mass: 0.0, birth_time: 0.0, lineage_min_z: 0.0, path_samples: Vec::new() },
            0.0,
            critical,
        )
    }

    /// A population holding one block at time `t`, used to restart the
    /// subtree of that block.
    pub fn from_block(block: Block, t: f64, critical: CriticalData) -> Self {
        Self { t, blocks: vec![block], critical, dropped_weight: 0.0 }
    }

    #[inline]
    pub fn z(&self, b: &Block) -> f64 {
        b.log_mass - self.t * self.critical.speed
    }

    #[inline]
    fn weight_of_z(&self, z: f64) -> f64 {
        (-(1.0 + self.critical.p_bar) * z).exp()
    }

    /// inf over s ≤ t of Z along the block's line of descent.
    #[inline]
    pub fn lineage_min(&self, b: &Block) -> f64 {
        b.lineage_min_z.min(self.z(b))
    }

    pub fn total_mass(&self) -> f64 {
        self.blocks.iter().map(|b| (-b.log_mass).exp()).sum()
    }
}

/// e^{Φ(p)t} Σ Xᵢ(t)^{1+p}.
pub fn additive_martingale(spec: &DislocationSpec, state: &FragmentationState, p: f64) -> Result<f64> {
    let growth = spec.phi(p)? * state.t;
    Ok(state
        .blocks
        .iter()
        .map(|b| (growth - (1.0 + p) * b.log_mass).exp())
        .sum())
}

/// Σ Zᵢ(t) e^{−(1+p̄)Zᵢ(t)}.
pub fn derivative_martingale(state: &FragmentationState) -> f64 {
    state
        .blocks
        .iter()
        .map(|b| {
            let z = state.z(b);
            z * state.weight_of_z(z)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncated {
    pub w_a: f64,
    /// Σ Zᵢ e^{−(1+p̄)Zᵢ} over lines that stayed above −a.
    pub mprime_a: f64,
    /// Σ (a+Zᵢ) e^{−(1+p̄)Zᵢ} over the same lines. Non-negative.
    pub mprime_a_shifted: f64,
}

/// Sums restricted to blocks whose line of descent never went below −a.
/// `a = f64::INFINITY` disables the barrier; the shifted sum is then NaN.
pub fn truncated_martingales(state: &FragmentationState, a: f64) -> Truncated {
    let mut out = Truncated { w_a: 0.0, mprime_a: 0.0, mprime_a_shifted: 0.0 };
    for b in &state.blocks {
        if state.lineage_min(b) >= -a {
            let z = state.z(b);
            let w = state.weight_of_z(z);
            out.w_a += w;
            out.mprime_a += z * w;
            out.mprime_a_shifted += (a + z) * w;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReadout {
    pub t: f64,
    pub w: f64,
    pub mprime: f64,
    pub w_a: f64,
    pub mprime_a: f64,
    pub mprime_a_shifted: f64,
    pub bias_bound: f64,
    pub bias_warning: bool,
    pub blocks: usize,
    pub total_mass: f64,
    /// Smallest lineage infimum of Z over live blocks.
    pub min_lineage_z: f64,
    /// W(t, p) for each configured extra exponent, as (p, W).
    pub w_extra: Vec<(f64, f64)>,
    /// (Zᵢ/√t, Zᵢ e^{−(1+p̄)Zᵢ}) when endpoint recording is on.
    pub weighted_endpoints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Readout times, increasing. The last one is the horizon.
    pub checkpoints: Vec<f64>,
    /// Children lighter than this mass are dropped into the bias ledger.
    pub floor: f64,
    /// Truncation barrier a; `f64::INFINITY` for none.
    pub barrier: f64,
    pub max_blocks: usize,
    pub extra_exponents: Vec<f64>,
    /// Times at which every live block records its Z.
    pub path_times: Vec<f64>,
    pub record_endpoints: bool,
    /// Set the bias warning once the ledger exceeds this fraction of W.
    pub bias_fraction: f64,
}

impl SimConfig {
    pub fn new(checkpoints: Vec<f64>) -> Self {
        Self {
            checkpoints,
            floor: 0.0,
            barrier: f64::INFINITY,
            max_blocks: 20_000_000,
            extra_exponents: Vec::new(),
            path_times: Vec::new(),
            record_endpoints: false,
            bias_fraction: 1e-3,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0) && v.windows(2).all(|w| w[1] > w[0]);
        if self.checkpoints.is_empty() || !ok(&self.checkpoints) {
            return Err(Error::Config("checkpoints must be non-empty, finite and increasing".into()));
        }
        if !ok(&self.path_times) {
            return Err(Error::Config("path times must be finite and increasing".into()));
        }
        if !(self.floor >= 0.0 && self.floor < 1.0) {
            return Err(Error::Config(format!("mass floor must lie in [0, 1), got {}", self.floor)));
        }
        if !(self.barrier >= 0.0) {
            return Err(Error::Config("barrier must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Sampler tables for one dislocation measure.
#[derive(Debug, Clone)]
pub struct Fragmentation {
    spec: DislocationSpec,
    critical: CriticalData,
    /// (cumulative rate, −ln sᵢ of the positive masses)
    atoms: Vec<(f64, Vec<f64>)>,
}

impl Fragmentation {
    pub fn new(spec: DislocationSpec, critical: CriticalData) -> Self {
        let mut cum = 0.0;
        let atoms = spec
            .atoms()
            .iter()
            .map(|a| {
                cum += a.rate;
                (cum, a.masses.iter().filter(|&&s| s > 0.0).map(|s| -s.ln()).collect())
            })
            .collect();
        Self { spec, critical, atoms }
    }

    pub fn spec(&self) -> &DislocationSpec {
        &self.spec
    }

    pub fn critical(&self) -> CriticalData {
        self.critical
    }

    pub fn initial_state(&self) -> FragmentationState {
        FragmentationState::unit(self.critical)
    }

    fn pick_atom<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64] {
        if self.atoms.len() == 1 {
            return &self.atoms[0].1;
        }
        let u = rng.random::<f64>() * self.spec.total_rate();
        let i = self.atoms.partition_point(|a| a.0 <= u).min(self.atoms.len() - 1);
        &self.atoms[i].1
    }

    /// Run the population forward to time `until`. Returns the memory-budget
    /// error (without a checkpoint index) if the block count overflows.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        state: &mut FragmentationState,
        until: f64,
        cfg: &SimConfig,
        rng: &mut R,
    ) -> Result<()> {
        let rate = self.spec.total_rate();
        let speed = self.critical.speed;
        let log_floor = if cfg.floor > 0.0 { -cfg.floor.ln() } else { f64::INFINITY };
        let kappa = 1.0 + self.critical.p_bar;
        loop {
            let n = state.blocks.len();
            if n == 0 {
                state.t = until;
                return Ok(());
            }
            let t = state.t + exponential(rng, n as f64 * rate);
            if t > until {
                state.t = until;
                return Ok(());
            }
            state.t = t;
            let i = rng.random_range(0..n);
            let children = self.pick_atom(rng);
            let parent = &mut state.blocks[i];
            parent.lineage_min_z = parent.lineage_min_z.min(parent.log_mass - t * speed);
            let (base, lm) = (parent.log_mass, parent.lineage_min_z);
            let mut replaced = false;
            for &d in children {
                let log_mass = base + d;
                if log_mass > log_floor {
                    state.dropped_weight += (-kappa * (log_mass - t * speed)).exp();
                    continue;
                }
                if !replaced {
                    let b = &mut state.blocks[i];
                    b.log_mass = log_mass;
                    b.birth_time = t;
                    replaced = true;
                } else {
                    let path_samples = state.blocks[i].path_samples.clone();
                    state.blocks.push(Block { log_mass, birth_time: t, lineage_min_z: lm, path_samples });
                }
            }
            if !replaced {
                state.blocks.swap_remove(i);
            }
            if state.blocks.len() > cfg.max_blocks {
                return Err(Error::MemoryBudget { budget: cfg.max_blocks, at: t, last_checkpoint: None });
            }
        }
    }

    pub fn readout(&self, state: &FragmentationState, cfg: &SimConfig) -> Result<MartingaleReadout> {
        let mut w = 0.0;
        let mut mprime = 0.0;
        let mut min_lineage_z = f64::INFINITY;
        let mut weighted_endpoints = Vec::new();
        let root_t = state.t.sqrt();
        for b in &state.blocks {
            let z = state.z(b);
            let wt = state.weight_of_z(z);
            w += wt;
            mprime += z * wt;
            min_lineage_z = min_lineage_z.min(state.lineage_min(b));
            if cfg.record_endpoints {
                weighted_endpoints.push((z / root_t, z * wt));
            }
        }
        let tr = truncated_martingales(state, cfg.barrier);
        let w_extra = cfg
            .extra_exponents
            .iter()
            .map(|&p| Ok((p, additive_martingale(&self.spec, state, p)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MartingaleReadout {
            t: state.t,
            w,
            mprime,
            w_a: tr.w_a,
            mprime_a: tr.mprime_a,
            mprime_a_shifted: tr.mprime_a_shifted,
            bias_bound: state.dropped_weight,
            bias_warning: state.dropped_weight > cfg.bias_fraction * w,
            blocks: state.blocks.len(),
            total_mass: state.total_mass(),
            min_lineage_z,
            w_extra,
            weighted_endpoints,
        })
    }

    /// Simulate one replica from the unit block.
    pub fn simulate<R: Rng + ?Sized>(&self, cfg: &SimConfig, rng: &mut R) -> Result<Vec<MartingaleReadout>> {
        Ok(self.simulate_state(cfg, rng)?.0)
    }

    /// As [`simulate`](Self::simulate), also returning the final population.
    pub fn simulate_state<R: Rng + ?Sized>(
        &self,
        cfg: &SimConfig,
        rng: &mut R,
    ) -> Result<(Vec<MartingaleReadout>, FragmentationState)> {
        let mut state = self.initial_state();
        let readouts = self.continue_from(&mut state, cfg, rng)?;
        Ok((readouts, state))
    }

    /// Advance an existing population through the checkpoints after its time.
    pub fn continue_from<R: Rng + ?Sized>(
        &self,
        state: &mut FragmentationState,
        cfg: &SimConfig,
        rng: &mut R,
    ) -> Result<Vec<MartingaleReadout>> {
        cfg.validate()?;
        // merged stopping times: (time, is checkpoint, is path time)
        let mut stops: Vec<(f64, bool, bool)> = cfg
            .checkpoints
            .iter()
            .filter(|&&t| t >= state.t)
            .map(|&t| (t, true, false))
            .collect();
        for &t in cfg.path_times.iter().filter(|&&t| t >= state.t) {
            match stops.iter_mut().find(|s| s.0 == t) {
                Some(s) => s.2 = true,
                None => stops.push((t, false, true)),
            }
        }
        stops.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut readouts = Vec::with_capacity(cfg.checkpoints.len());
        for (t, is_checkpoint, is_path) in stops {
            if let Err(e) = self.advance(state, t, cfg, rng) {
                return Err(match e {
                    Error::MemoryBudget { budget, at, .. } => Error::MemoryBudget {
                        budget,
                        at,
                        last_checkpoint: readouts.len().checked_sub(1),
                    },
                    e => e,
                });
            }
            if is_path {
                let speed = self.critical.speed;
                for b in &mut state.blocks {
                    b.path_samples.push(b.log_mass - t * speed);
                }
            }
            if is_checkpoint {
                readouts.push(self.readout(state, cfg)?);
            }
        }
        Ok(readouts)
    }
}

/// A block chosen with probability proportional to its W-contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedFragment {
    pub index: usize,
    /// Recorded path samples followed by Z at the current time.
    pub path: Vec<f64>,
}

pub fn tagged_fragment<R: Rng + ?Sized>(state: &FragmentationState, rng: &mut R) -> Result<TaggedFragment> {
    let weights: Vec<f64> = state.blocks.iter().map(|b| state.weight_of_z(state.z(b))).collect();
    let total: f64 = weights.iter().sum();
    if state.blocks.is_empty() || !(total > 0.0) {
        return Err(Error::EmptyPopulation);
    }
    let mut u = rng.random::<f64>() * total;
    let mut index = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            index = i;
            break;
        }
        u -= w;
    }
    let b = &state.blocks[index];
    let mut path = b.path_samples.clone();
    path.push(state.z(b));
    Ok(TaggedFragment { index, path })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SenetaHeydePoint {
    pub t: f64,
    /// √t·W(t, p̄)
    pub scaled_w: f64,
    /// √(2/(πσ²))·M′(t)
    pub scaled_m: f64,
    /// scaled_w / scaled_m, NaN when M′ ≤ 0.
    pub ratio: f64,
}

pub fn seneta_heyde_ratio(readouts: &[MartingaleReadout], critical: &CriticalData) -> Vec<SenetaHeydePoint> {
    let c = critical.seneta_heyde_constant();
    readouts
        .iter()
        .map(|r| {
            let scaled_w = r.t.sqrt() * r.w;
            let scaled_m = c * r.mprime;
            let ratio = if r.mprime > 0.0 { scaled_w / scaled_m } else { f64::NAN };
            SenetaHeydePoint { t: r.t, scaled_w, scaled_m, ratio }
        })
        .collect()
}

/// Weighted KS distance between the endpoint law Zᵢ(t)/√t (weights
/// Zᵢe^{−(1+p̄)Zᵢ}) and σ times the time-1 Bessel-3 marginal.
pub fn bessel_functional_stat(readout: &MartingaleReadout, critical: &CriticalData) -> Result<KsResult> {
    if readout.weighted_endpoints.is_empty() {
        return Err(Error::Insufficient("readout carries no endpoints".into()));
    }
    let sigma = critical.sigma();
    weighted_ks(&readout.weighted_endpoints, |x| bessel3_cdf(x, sigma))
}
