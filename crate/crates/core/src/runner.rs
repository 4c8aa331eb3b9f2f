//! Configuration-driven experiments.
//!
//! A config is key-value text (same syntax as model files). Each experiment
//! produces per-replica CSV rows and a [`RunSummary`]; with an output
//! directory set, both are written together with long-format plot data.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::brw::{self, BrwConfig, OffspringLaw};
use crate::error::{Error, Result};
use crate::exponents::DislocationSpec;
use crate::fragmentation::{self, Fragmentation, SimConfig};
use crate::gmc::{self, FieldSampler, Grid, Kernel};
use crate::kv;
use crate::levy;
use crate::report::{csv, emit_plot_data, fmt_f64, write_text, CheckLine, RunSummary};
use crate::rng::{par_replicas, sub_seed};
use crate::stats::{convergence_in_probability, replica_summary, Estimate, Verdict, MIN_TREND_REPLICAS};

pub const CRITICAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    FragSh,
    FragBessel,
    BrwSh,
    GmcSh,
    LevyFp,
    IdentityChecks,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::FragSh,
        Experiment::FragBessel,
        Experiment::BrwSh,
        Experiment::GmcSh,
        Experiment::LevyFp,
        Experiment::IdentityChecks,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Experiment::FragSh => "frag-sh",
            Experiment::FragBessel => "frag-bessel",
            Experiment::BrwSh => "brw-sh",
            Experiment::GmcSh => "gmc-sh",
            Experiment::LevyFp => "levy-fp",
            Experiment::IdentityChecks => "identity-checks",
        }
    }

    fn default_checkpoints(self) -> Vec<f64> {
        match self {
            Experiment::FragSh | Experiment::FragBessel => vec![4.0, 8.0, 12.0],
            Experiment::BrwSh => vec![8.0, 12.0, 16.0, 20.0],
            Experiment::GmcSh => vec![3.0, 5.0, 7.0],
            Experiment::LevyFp => vec![25.0, 100.0, 400.0],
            Experiment::IdentityChecks => vec![],
        }
    }

    fn default_replicas(self) -> usize {
        match self {
            Experiment::FragSh | Experiment::FragBessel | Experiment::GmcSh => 1000,
            Experiment::BrwSh => 300,
            Experiment::LevyFp => 100_000,
            Experiment::IdentityChecks => 10_000,
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Built-in model name; see [`list_models`].
    pub model: Option<String>,
    pub model_file: Option<PathBuf>,
    /// Readout times (or generations for the branching random walk).
    pub checkpoints: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// ε ladder for trend tests; the first entry is the tolerance of
    /// single-threshold checks.
    pub tolerances: Vec<f64>,
    /// Truncation barrier a; the start level for `levy-fp`.
    pub barrier: f64,
    /// Grid size for the field (default: smallest resolving the horizon).
    pub grid: Option<usize>,
    pub dt: f64,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            model: None,
            model_file: None,
            checkpoints: experiment.default_checkpoints(),
            replicas: experiment.default_replicas(),
            seed: 1,
            threads: None,
            out: None,
            tolerances: if experiment == Experiment::LevyFp { vec![0.1] } else { vec![0.1, 0.25, 0.5] },
            barrier: if experiment == Experiment::LevyFp { 1.0 } else { f64::INFINITY },
            grid: None,
            dt: gmc::DEFAULT_DT,
        }
    }

    /// Parse config text. `experiment` may be omitted when `forced` is given;
    /// relative paths resolve against `base`.
    pub fn from_text(text: &str, forced: Option<Experiment>, base: Option<&Path>) -> Result<Self> {
        let entries = kv::parse(text);
        let named = entries
            .iter()
            .find(|e| e.key == "experiment")
            .map(|e| e.single().and_then(Experiment::from_str))
            .transpose()?;
        let experiment = match (forced, named) {
            (Some(f), Some(n)) if f != n => {
                return Err(Error::Config(format!("config is for `{n}` but `{f}` was requested")));
            }
            (Some(e), _) | (None, Some(e)) => e,
            (None, None) => return Err(Error::Config("missing `experiment`".into())),
        };
        let mut cfg = Self::new(experiment);
        let resolve = |p: &str| match base {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        };
        let mut horizon = None;
        for e in &entries {
            match e.key.as_str() {
                "experiment" => {}
                "model" => cfg.model = Some(e.single()?.to_string()),
                "model_file" => cfg.model_file = Some(resolve(e.single()?)),
                "checkpoints" => cfg.checkpoints = e.floats()?,
                "horizon" => horizon = Some(e.float()?),
                "replicas" => cfg.replicas = e.integer()? as usize,
                "seed" => cfg.seed = e.integer()?,
                "threads" => cfg.threads = Some(e.integer()? as usize),
                "out" => cfg.out = Some(resolve(e.single()?)),
                "tolerances" => cfg.tolerances = e.floats()?,
                "barrier" => cfg.barrier = e.float()?,
                "grid" => cfg.grid = Some(e.integer()? as usize),
                "dt" => cfg.dt = e.float()?,
                other => return Err(Error::Parse { line: e.line, msg: format!("unknown key `{other}`") }),
            }
        }
        if let Some(h) = horizon {
            if cfg.checkpoints.last().is_some_and(|&t| t > h) {
                return Err(Error::Config(format!("checkpoint beyond horizon {h}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, forced: Option<Experiment>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, forced, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be ≥ 1".into()));
        }
        let cp = &self.checkpoints;
        if self.experiment != Experiment::IdentityChecks
            && (cp.is_empty() || cp.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || cp.windows(2).any(|w| w[1] <= w[0]))
        {
            return Err(Error::Config("checkpoints must be non-empty, finite and increasing".into()));
        }
        if self.experiment == Experiment::BrwSh && cp.iter().any(|t| t.fract() != 0.0) {
            return Err(Error::Config("branching random walk checkpoints are whole generations".into()));
        }
        if self.tolerances.is_empty() || self.tolerances.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.barrier >= 0.0) {
            return Err(Error::Config("barrier must be ≥ 0".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Result of one run: summary plus the per-replica CSV text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub csv: String,
}

impl RunOutput {
    /// Exit status for the CLI: 0 pass (or no verdict), 1 verdict failure.
    pub fn exit_code(&self) -> i32 {
        match self.summary.verdict {
            Some(Verdict::Fail) => 1,
            _ => 0,
        }
    }
}

/// Exit status for an error: 2 usage/config, 3 resource, 4 model or I/O.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Domain(_) | Error::Factorization { .. } => 2,
        Error::MemoryBudget { .. } => 3,
        Error::InvalidModel(_)
        | Error::NoCriticalParameter { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::EmptyPopulation
        | Error::Insufficient(_) => 4,
    }
}

/// Run the experiment and, if `out` is set, write `<tag>.csv`,
/// `<tag>.summary.json` and `<tag>.plot.csv` there.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let output = execute(cfg)?;
    if let Some(dir) = &cfg.out {
        let tag = cfg.experiment.tag();
        write_text(&dir.join(format!("{tag}.csv")), &output.csv)?;
        write_text(&dir.join(format!("{tag}.summary.json")), &output.summary.to_json()?)?;
        write_text(&dir.join(format!("{tag}.plot.csv")), &emit_plot_data(&output.summary))?;
    }
    Ok(output)
}

/// Run without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

fn dispatch(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.experiment {
        Experiment::FragSh => frag_sh(cfg),
        Experiment::FragBessel => frag_bessel(cfg),
        Experiment::BrwSh => brw_sh(cfg),
        Experiment::GmcSh => gmc_sh(cfg),
        Experiment::LevyFp => levy_fp(cfg),
        Experiment::IdentityChecks => identity_checks(cfg),
    }
}

fn load_spec(cfg: &ExperimentConfig) -> Result<(String, DislocationSpec)> {
    match (&cfg.model_file, cfg.model.as_deref()) {
        (Some(p), _) => Ok((p.display().to_string(), DislocationSpec::from_text(&std::fs::read_to_string(p)?)?)),
        (None, None | Some("binary")) => Ok(("binary".into(), DislocationSpec::binary())),
        (None, Some(m)) => Err(Error::InvalidModel(format!("unknown fragmentation model `{m}`"))),
    }
}

fn load_law(cfg: &ExperimentConfig) -> Result<(String, OffspringLaw)> {
    match (&cfg.model_file, cfg.model.as_deref()) {
        (Some(p), _) => Ok((p.display().to_string(), OffspringLaw::from_text(&std::fs::read_to_string(p)?)?)),
        (None, None | Some("gaussian-brw")) => Ok(("gaussian-brw".into(), OffspringLaw::canonical())),
        (None, Some(m)) => Err(Error::InvalidModel(format!("unknown branching law `{m}`"))),
    }
}

fn load_kernel(cfg: &ExperimentConfig) -> Result<Kernel> {
    if cfg.model_file.is_some() {
        return Err(Error::InvalidModel("the field takes a kernel name (`model wendland`), not a file".into()));
    }
    Kernel::from_name(cfg.model.as_deref().unwrap_or("wendland"))
}

fn base_summary(cfg: &ExperimentConfig, model: String, primary: &str) -> RunSummary {
    RunSummary {
        experiment: cfg.experiment.tag().into(),
        model,
        seed: cfg.seed,
        replicas: cfg.replicas,
        checkpoints: cfg.checkpoints.clone(),
        constants: BTreeMap::new(),
        primary_series: primary.into(),
        target: None,
        summary: None,
        trend: None,
        checks: Vec::new(),
        verdict: None,
        notes: Vec::new(),
    }
}

/// Trend verdict on `values[replica][checkpoint]`, or a note when the run is
/// too small for one.
fn attach_trend(s: &mut RunSummary, values: &[Vec<f64>], target: f64, epsilons: &[f64]) -> Result<()> {
    s.target = Some(target);
    if values.len() < MIN_TREND_REPLICAS || s.checkpoints.len() < 3 {
        s.notes.push(format!(
            "no trend verdict: needs ≥ {MIN_TREND_REPLICAS} replicas and ≥ 3 checkpoints"
        ));
        return Ok(());
    }
    let report = convergence_in_probability(&s.checkpoints, values, target, epsilons)?;
    s.verdict = Some(report.verdict);
    s.trend = Some(report);
    Ok(())
}

const RATIO_HEADER: [&str; 8] = ["replica", "t", "W", "Mprime", "W_a", "Mprime_a", "bias_bound", "ratio"];

fn row(replica: usize, cols: &[f64]) -> Vec<String> {
    std::iter::once(replica.to_string()).chain(cols.iter().map(|&x| fmt_f64(x))).collect()
}

fn transpose(series: &[Vec<Vec<f64>>], k: usize) -> Vec<Vec<f64>> {
    series.iter().map(|r| r[k].clone()).collect()
}

fn frag_sh(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (name, spec) = load_spec(cfg)?;
    let critical = spec.critical_p(CRITICAL_TOL)?;
    let model = Fragmentation::new(spec, critical);
    let mut sim = SimConfig::new(cfg.checkpoints.clone());
    sim.barrier = cfg.barrier;
    let runs = par_replicas(cfg.seed, cfg.replicas, |rng, _| model.simulate(&sim, rng))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    // [replica][series][checkpoint]
    let mut per: Vec<Vec<Vec<f64>>> = Vec::with_capacity(runs.len());
    for (r, readouts) in runs.iter().enumerate() {
        let sh = fragmentation::seneta_heyde_ratio(readouts, &critical);
        let mut cols = vec![Vec::new(); 4];
        for (x, p) in readouts.iter().zip(&sh) {
            let mprime_a = if cfg.barrier.is_finite() { x.mprime_a_shifted } else { x.mprime_a };
            rows.push(row(r, &[x.t, x.w, x.mprime, x.w_a, mprime_a, x.bias_bound, p.ratio]));
            cols[0].push(x.w);
            cols[1].push(x.mprime);
            cols[2].push(p.scaled_w);
            cols[3].push(p.ratio);
        }
        per.push(cols);
    }
    let names = ["W", "Mprime", "sqrt_t_W", "ratio"];
    let by_series: Vec<Vec<Vec<f64>>> = (0..names.len()).map(|k| transpose(&per, k)).collect();
    let mut s = base_summary(cfg, name, "ratio");
    s.constants = critical_constants(&critical);
    s.summary = Some(replica_summary(&names, &cfg.checkpoints, &by_series)?);
    attach_trend(&mut s, &by_series[3], 1.0, &cfg.tolerances)?;
    Ok(RunOutput { summary: s, csv: csv(&RATIO_HEADER, &rows) })
}

fn critical_constants(c: &crate::exponents::CriticalData) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("p_bar".to_string(), c.p_bar),
        ("phi_at_p_bar".to_string(), c.phi_at_pbar),
        ("speed".to_string(), c.speed),
        ("sigma2".to_string(), c.sigma2),
        ("seneta_heyde_constant".to_string(), c.seneta_heyde_constant()),
    ])
}

fn frag_bessel(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (name, spec) = load_spec(cfg)?;
    let critical = spec.critical_p(CRITICAL_TOL)?;
    let model = Fragmentation::new(spec, critical);
    let mut sim = SimConfig::new(cfg.checkpoints.clone());
    sim.record_endpoints = true;
    let stats = par_replicas(cfg.seed, cfg.replicas, |rng, _| -> Result<Vec<(f64, f64)>> {
        Ok(model
            .simulate(&sim, rng)?
            .iter()
            .map(|x| match fragmentation::bessel_functional_stat(x, &critical) {
                Ok(k) => (k.statistic, k.p_value),
                Err(_) => (f64::NAN, f64::NAN),
            })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (r, per) in stats.iter().enumerate() {
        for (t, (d, p)) in cfg.checkpoints.iter().zip(per) {
            rows.push(row(r, &[*t, *d, *p]));
        }
    }
    let ks: Vec<Vec<f64>> = stats.iter().map(|v| v.iter().map(|x| x.0).collect()).collect();
    let pv: Vec<Vec<f64>> = stats.iter().map(|v| v.iter().map(|x| x.1).collect()).collect();
    let mut s = base_summary(cfg, name, "ks_statistic");
    s.constants = critical_constants(&critical);
    let summary = replica_summary(&["ks_statistic", "p_value"], &cfg.checkpoints, &[ks, pv])?;
    let medians: Vec<f64> = summary.series[0].points.iter().map(|p| p.median).collect();
    if medians.len() >= 2 {
        let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
        s.verdict = Some(if decreasing { Verdict::Pass } else { Verdict::Fail });
        s.notes.push(format!("median weighted KS distance per checkpoint: {medians:?}"));
    }
    s.summary = Some(summary);
    Ok(RunOutput { summary: s, csv: csv(&["replica", "t", "ks_statistic", "p_value"], &rows) })
}

fn brw_sh(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (name, law) = load_law(cfg)?;
    let boundary = brw::validate_boundary(&law)?;
    let target = brw::seneta_heyde_target(boundary.sigma2);
    let mut sim = BrwConfig::new(cfg.checkpoints.iter().map(|&t| t as usize).collect());
    sim.barrier = cfg.barrier;
    let runs = par_replicas(cfg.seed, cfg.replicas, |rng, _| brw::simulate(&law, &sim, None, rng))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut per = Vec::with_capacity(runs.len());
    let mut resamples = 0;
    for (r, run) in runs.iter().enumerate() {
        resamples += run.resamples;
        let sh = brw::seneta_heyde_ratio_brw(&run.readouts);
        let mut cols = vec![Vec::new(); 4];
        for (x, p) in run.readouts.iter().zip(&sh) {
            let m_a = if cfg.barrier.is_finite() { x.m_a_shifted } else { x.m };
            rows.push(row(r, &[x.n as f64, x.w, x.m, x.w_a, m_a, x.pruned_weight, p.ratio]));
            cols[0].push(x.w);
            cols[1].push(x.m);
            cols[2].push(p.scaled_w);
            cols[3].push(p.ratio);
        }
        per.push(cols);
    }
    let names = ["W", "M", "sqrt_n_W", "ratio"];
    let by_series: Vec<Vec<Vec<f64>>> = (0..names.len()).map(|k| transpose(&per, k)).collect();
    let mut s = base_summary(cfg, name, "ratio");
    s.constants = BTreeMap::from([
        ("sigma2".to_string(), boundary.sigma2),
        ("seneta_heyde_target".to_string(), target),
        ("moment_gamma_1_5".to_string(), boundary.moment_gamma.value),
    ]);
    s.summary = Some(replica_summary(&names, &cfg.checkpoints, &by_series)?);
    if resamples > 0 {
        s.notes.push(format!("{resamples} extinct attempts resampled"));
    }
    attach_trend(&mut s, &by_series[3], target, &cfg.tolerances)?;
    Ok(RunOutput { summary: s, csv: csv(&RATIO_HEADER, &rows) })
}

/// Smallest cell-centred unit grid with ln(1/Δx) ≥ horizon.
pub fn resolving_grid(horizon: f64) -> usize {
    (horizon.exp() - 1e-9).ceil().max(1.0) as usize
}

fn gmc_sh(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let kernel = load_kernel(cfg)?;
    let horizon = *cfg.checkpoints.last().unwrap();
    let grid = Grid::unit(cfg.grid.unwrap_or_else(|| resolving_grid(horizon)))?;
    let sampler = FieldSampler::new(kernel, grid, horizon, cfg.dt)?;
    let per_replica = par_replicas(cfg.seed, cfg.replicas, |rng, _| -> Result<Vec<gmc::Measures>> {
        Ok(sampler
            .simulate(&cfg.checkpoints, rng)?
            .iter()
            .map(|st| gmc::critical_measures(st, grid, 0..grid.n, cfg.barrier))
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut per = Vec::with_capacity(per_replica.len());
    for (r, ms) in per_replica.iter().enumerate() {
        let sh = gmc::seneta_heyde_gmc(ms);
        let mut cols = vec![Vec::new(); 4];
        for (m, p) in ms.iter().zip(&sh) {
            rows.push(row(r, &[m.t, m.additive, m.derivative, m.additive_a, m.derivative_a, 0.0, p.ratio]));
            cols[0].push(m.additive);
            cols[1].push(m.derivative);
            cols[2].push(p.scaled_w);
            cols[3].push(p.ratio);
        }
        per.push(cols);
    }
    let names = ["M", "Mprime", "sqrt_t_M", "ratio"];
    let by_series: Vec<Vec<Vec<f64>>> = (0..names.len()).map(|k| transpose(&per, k)).collect();
    let mut s = base_summary(cfg, kernel.name().into(), "ratio");
    let (circulant, dense) = sampler.decisions();
    s.constants = BTreeMap::from([
        ("sqrt_2_over_pi".to_string(), std::f64::consts::FRAC_2_PI.sqrt()),
        ("grid_points".to_string(), grid.n as f64),
        ("dt".to_string(), cfg.dt),
    ]);
    s.notes.push(format!("slice factorizations: {circulant} circulant, {dense} dense"));
    s.summary = Some(replica_summary(&names, &cfg.checkpoints, &by_series)?);
    attach_trend(&mut s, &by_series[3], 1.0, &cfg.tolerances)?;
    Ok(RunOutput { summary: s, csv: csv(&RATIO_HEADER, &rows) })
}

fn levy_fp(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (name, spec) = load_spec(cfg)?;
    let critical = spec.critical_p(CRITICAL_TOL)?;
    let tilted = levy::tilt(&spec, critical.p_bar)?;
    let a = cfg.barrier;
    let points = levy::first_passage_survival(&tilted, a, &cfg.checkpoints, cfg.replicas, cfg.seed)?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            [p.t, p.survival.value, p.survival.se, p.scaled.value, p.scaled.se, p.target]
                .iter()
                .map(|&x| fmt_f64(x))
                .collect()
        })
        .collect();
    let mut s = base_summary(cfg, name, "scaled_survival");
    s.constants = critical_constants(&critical);
    s.constants.insert("start".into(), a);
    let target = points[0].target;
    s.target = Some(target);
    let tol = cfg.tolerances[0];
    for p in &points {
        s.checks.push(CheckLine {
            name: format!("sqrt_t_survival_t{}", p.t),
            estimate: p.scaled.value,
            se: p.scaled.se,
            target,
            z: p.scaled.z_score(target),
            pass: p.relative_error() <= tol,
        });
    }
    let errors: Vec<f64> = points.iter().map(|p| p.relative_error()).collect();
    let improving = errors.first().zip(errors.last()).is_some_and(|(f, l)| l <= f);
    let last_ok = s.checks.last().is_some_and(|c| c.pass);
    s.verdict = Some(if last_ok && improving { Verdict::Pass } else { Verdict::Fail });
    s.notes.push(format!("relative errors per checkpoint: {errors:?}; pass needs the last ≤ {tol} and no net growth"));
    Ok(RunOutput {
        summary: s,
        csv: csv(&["t", "survival", "survival_se", "scaled", "scaled_se", "target"], &rows),
    })
}

fn identity_checks(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let n = cfg.replicas;
    let seed = cfg.seed;
    let mut checks = Vec::new();

    // fragmentation: W(t, p) has mean 1 at t = 5
    let spec = DislocationSpec::binary();
    let critical = spec.critical_p(CRITICAL_TOL)?;
    let model = Fragmentation::new(spec.clone(), critical);
    let mut sim = SimConfig::new(vec![5.0]);
    sim.extra_exponents = vec![0.5];
    let frag = par_replicas(sub_seed(seed, 1), n, |rng, _| model.simulate(&sim, rng).map(|r| r[0].clone()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let w_bar: Vec<f64> = frag.iter().map(|r| r.w).collect();
    let w_half: Vec<f64> = frag.iter().map(|r| r.w_extra[0].1).collect();
    for (label, xs) in [("frag_W_p_bar_t5", &w_bar), ("frag_W_p0.5_t5", &w_half)] {
        let e = Estimate::from_samples(xs);
        checks.push(CheckLine::z_test(label, e.value, e.se, 1.0, 3.0));
    }

    // branching random walk: W_n, M_n means at n = 6
    let law = OffspringLaw::canonical();
    let bcfg = BrwConfig::new(vec![6]);
    let brw_runs = par_replicas(sub_seed(seed, 2), n, |rng, _| brw::simulate(&law, &bcfg, None, rng))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let w: Vec<f64> = brw_runs.iter().map(|r| r.readouts[0].w).collect();
    let m: Vec<f64> = brw_runs.iter().map(|r| r.readouts[0].m).collect();
    let (we, me) = (Estimate::from_samples(&w), Estimate::from_samples(&m));
    checks.push(CheckLine::z_test("brw_W_n6", we.value, we.se, 1.0, 3.0));
    checks.push(CheckLine::z_test("brw_M_n6", me.value, me.se, 0.0, 3.0));

    // many-to-one at n = 4
    let one = |_: &[f64]| 1.0;
    let nonneg = |s: &[f64]| if s[s.len() - 1] >= 0.0 { 1.0 } else { 0.0 };
    let decay = |s: &[f64]| (-s[0]).exp();
    let entries = brw::many_to_one_check(
        &law,
        4,
        &[("one", &one), ("last_nonnegative", &nonneg), ("first_decay", &decay)],
        n,
        sub_seed(seed, 3),
    )?;
    for e in entries {
        let se = (e.population.se.powi(2) + e.walk.se.powi(2)).sqrt();
        checks.push(CheckLine {
            name: format!("many_to_one_{}", e.name),
            estimate: e.population.value,
            se,
            target: e.walk.value,
            z: e.z,
            pass: e.z.abs() <= 3.0,
        });
    }

    // tilted subordinator Laplace exponent
    let tilted = levy::tilt(&spec, critical.p_bar)?;
    for (i, q) in [0.1, 0.5, 1.0, 2.0].into_iter().enumerate() {
        let e = levy::laplace_exponent_mc(&tilted, q, n, sub_seed(seed, 10 + i as u64));
        let exact = spec.phi(critical.p_bar + q)? - spec.phi(critical.p_bar)?;
        checks.push(CheckLine::z_test(format!("laplace_exponent_q{q}"), e.value, e.se, exact, 3.0));
    }

    // field: E M_t(A) = λ(A)
    let grid = Grid::unit(200)?;
    let sampler = FieldSampler::new(Kernel::Wendland, grid, 2.0, gmc::DEFAULT_DT)?;
    let cells = grid.cells(0.0, 0.5);
    let field = par_replicas(sub_seed(seed, 20), n.min(4000), |rng, _| -> Result<f64> {
        let st = sampler.simulate(&[2.0], rng)?.pop().unwrap();
        Ok(gmc::critical_measures(&st, grid, cells.clone(), f64::INFINITY).additive)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let fe = Estimate::from_samples(&field);
    checks.push(CheckLine::z_test("gmc_mean_half_interval_t2", fe.value, fe.se, 0.5, 3.0));

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                fmt_f64(c.estimate),
                fmt_f64(c.se),
                fmt_f64(c.target),
                fmt_f64(c.z),
                c.pass.to_string(),
            ]
        })
        .collect();
    let mut s = base_summary(cfg, "shipped".into(), "");
    s.constants = critical_constants(&critical);
    let all = checks.iter().all(|c| c.pass);
    s.verdict = Some(if all { Verdict::Pass } else { Verdict::Fail });
    s.checks = checks;
    Ok(RunOutput { summary: s, csv: csv(&["check", "estimate", "se", "target", "z", "pass"], &rows) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub kind: String,
    pub description: String,
    pub constants: BTreeMap<String, f64>,
}

/// Built-in models with their derived constants.
pub fn list_models() -> Result<Vec<ModelInfo>> {
    let spec = DislocationSpec::binary();
    let c = spec.critical_p(CRITICAL_TOL)?;
    let law = OffspringLaw::canonical();
    let b = brw::validate_boundary(&law)?;
    Ok(vec![
        ModelInfo {
            name: "binary".into(),
            kind: "fragmentation".into(),
            description: "rate-1 splits into two halves".into(),
            constants: critical_constants(&c),
        },
        ModelInfo {
            name: "gaussian-brw".into(),
            kind: "branching random walk".into(),
            description: "two children, i.i.d. N(2 ln 2, 2 ln 2) displacements".into(),
            constants: BTreeMap::from([
                ("sigma2".to_string(), b.sigma2),
                ("seneta_heyde_target".to_string(), brw::seneta_heyde_target(b.sigma2)),
            ]),
        },
        ModelInfo {
            name: "wendland".into(),
            kind: "log-correlated field".into(),
            description: "kernel (1-|x|)^3 (1+3|x|) on [-1, 1], d = 1".into(),
            constants: BTreeMap::from([("sqrt_2_over_pi".to_string(), std::f64::consts::FRAC_2_PI.sqrt())]),
        },
        ModelInfo {
            name: "smoothstep".into(),
            kind: "log-correlated field".into(),
            description: "kernel (1-|x|)^2 (1+2|x|); slice covariances are indefinite, sampling fails".into(),
            constants: BTreeMap::new(),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_defaults() {
        let cfg = ExperimentConfig::from_text("experiment frag-sh\nreplicas 4\ncheckpoints 1 2\nseed 9", None, None).unwrap();
        assert_eq!((cfg.replicas, cfg.seed, cfg.checkpoints.clone()), (4, 9, vec![1.0, 2.0]));
        assert_eq!(cfg.barrier, f64::INFINITY);
        let forced = ExperimentConfig::from_text("replicas 3", Some(Experiment::LevyFp), None).unwrap();
        assert_eq!((forced.barrier, forced.checkpoints.len()), (1.0, 3));
        assert!(ExperimentConfig::from_text("experiment brw-sh", Some(Experiment::GmcSh), None).is_err());
        assert!(matches!(ExperimentConfig::from_text("replicas 3", None, None), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_text("experiment frag-sh\nbogus 1", None, None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(ExperimentConfig::from_text("experiment frag-sh\ncheckpoints 2 1", None, None).is_err());
        assert!(ExperimentConfig::from_text("experiment brw-sh\ncheckpoints 1.5 3", None, None).is_err());
        assert!(ExperimentConfig::from_text("experiment frag-sh\ncheckpoints 1 5\nhorizon 4", None, None).is_err());
        let rel = ExperimentConfig::from_text("experiment brw-sh\nmodel_file law.txt", None, Some(Path::new("/m"))).unwrap();
        assert_eq!(rel.model_file.unwrap(), PathBuf::from("/m/law.txt"));
    }

    #[test]
    fn frag_sh_row_accounting() {
        let cfg = ExperimentConfig::from_text("experiment frag-sh\nreplicas 4\ncheckpoints 1 2", None, None).unwrap();
        let out = execute(&cfg).unwrap();
        assert_eq!(out.csv.lines().count(), 1 + 8);
        assert!(out.csv.starts_with("replica,t,W,Mprime,W_a,Mprime_a,bias_bound,ratio\n"));
        assert_eq!(out.summary.verdict, None);
        assert_eq!(out.exit_code(), 0);
        assert_eq!(emit_plot_data(&out.summary).lines().count(), 1 + 2 * 7);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        for tag in ["frag-sh", "brw-sh", "gmc-sh", "frag-bessel"] {
            let text = format!("experiment {tag}\nreplicas 6\ncheckpoints 1 2 3\nthreads 1");
            let one = execute(&ExperimentConfig::from_text(&text, None, None).unwrap()).unwrap();
            let text = text.replace("threads 1", "threads 8");
            let eight = execute(&ExperimentConfig::from_text(&text, None, None).unwrap()).unwrap();
            assert_eq!(one.csv, eight.csv, "{tag}");
            assert_eq!(one.summary.to_json().unwrap(), eight.summary.to_json().unwrap());
        }
    }

    #[test]
    fn model_errors_map_to_exit_codes() {
        let cfg = ExperimentConfig::from_text("experiment frag-sh\nmodel nope\nreplicas 2", None, None).unwrap();
        let e = execute(&cfg).unwrap_err();
        assert_eq!(error_exit_code(&e), 4);
        let cfg = ExperimentConfig::from_text("experiment gmc-sh\ncheckpoints 1 2\ngrid 3\nreplicas 2", None, None).unwrap();
        assert_eq!(error_exit_code(&execute(&cfg).unwrap_err()), 2);
        let e = Error::MemoryBudget { budget: 1, at: 0.0, last_checkpoint: None };
        assert_eq!(error_exit_code(&e), 3);
    }

    #[test]
    fn catalog_matches_derived_constants() {
        let models = list_models().unwrap();
        assert!(!models.is_empty());
        let binary = &models[0].constants;
        assert!((binary["p_bar"] - 1.421_342_879_387_954_9).abs() < 1e-9);
        assert!((binary["sigma2"] - 0.179_384_155_865_186_37).abs() < 1e-9);
        let direct = DislocationSpec::binary().critical_p(CRITICAL_TOL).unwrap();
        assert_eq!(binary["p_bar"], direct.p_bar);
        assert!((models[1].constants["sigma2"] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((models[1].constants["seneta_heyde_target"] - 0.677_660_751_603_105).abs() < 1e-12);
    }

    #[test]
    fn resolving_grid_sizes() {
        assert_eq!(resolving_grid(7.0), 1097);
        assert!(Grid::unit(resolving_grid(7.0)).unwrap().max_horizon() >= 7.0);
        assert_eq!(resolving_grid(0.0), 1);
    }

    #[test]
    fn writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_text("experiment levy-fp\nreplicas 2000\ncheckpoints 1 4", None, None).unwrap();
        cfg.out = Some(dir.path().to_path_buf());
        let out = run(&cfg).unwrap();
        for f in ["levy-fp.csv", "levy-fp.summary.json", "levy-fp.plot.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = RunSummary::from_json(&std::fs::read_to_string(dir.path().join("levy-fp.summary.json")).unwrap()).unwrap();
        assert_eq!(back.checks.len(), out.summary.checks.len());
    }
}
