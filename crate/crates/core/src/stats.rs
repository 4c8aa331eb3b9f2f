//! Estimators, Kolmogorov–Smirnov tests and the trend diagnostic used to
//! operationalize "convergence in probability" at finite horizons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JSON has no NaN: serde_json writes non-finite floats as `null`. Fields
/// tagged with this read `null` back as NaN.
pub(crate) fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(deserialize_with = "nan_from_null")]
    pub value: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { value: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { value: mean, se: f64::NAN };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { value: mean, se: (var / n).sqrt() }
    }

    /// Bernoulli proportion of `hits` among `n`.
    pub fn proportion(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self { value: p, se: (p * (1.0 - p) / n as f64).sqrt() }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self { value: self.value * k, se: self.se * k.abs() }
    }

    /// |value − target| / se.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target) / self.se
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.se
    }
}

fn sort_finite(xs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    quantile_sorted(&sort_finite(xs), 0.5)
}

/// Survival function of the Kolmogorov distribution, P(K > λ).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // small-λ series: P(K ≤ λ) = √(2π)/λ Σ exp(−(2k−1)²π²/(8λ²))
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| ((2 * k - 1) as f64).powi(2))
            .map(|m| (c * m).exp())
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Asymptotic p-value with the Stephens small-sample correction.
fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let rn = n_eff.sqrt();
    kolmogorov_sf((rn + 0.12 + 0.11 / rn) * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Plug-in p-value from the Kolmogorov limit law. Approximate for
    /// weighted or lattice-valued samples.
    pub p_value: f64,
    pub n_eff: f64,
}

/// Collapse `(value, weight)` pairs to sorted distinct values with summed,
/// normalized weights. Returns the effective sample size (Σw)²/Σw².
fn normalized_steps(sample: &[(f64, f64)]) -> Result<(Vec<(f64, f64)>, f64)> {
    let total: f64 = sample.iter().map(|p| p.1).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Insufficient(format!(
            "weighted sample needs positive total weight, got {total}"
        )));
    }
    let sq: f64 = sample.iter().map(|p| p.1 * p.1).sum();
    let mut v: Vec<(f64, f64)> = sample
        .iter()
        .filter(|p| p.0.is_finite())
        .map(|&(x, w)| (x, w / total))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (x, w) in v {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => merged.push((x, w)),
        }
    }
    Ok((merged, total * total / sq))
}

/// Sup-distance between a weight-normalized empirical CDF and a continuous
/// reference CDF. Weights may be signed; they are normalized by their sum.
pub fn weighted_ks<F: Fn(f64) -> f64>(sample: &[(f64, f64)], cdf: F) -> Result<KsResult> {
    let (steps, n_eff) = normalized_steps(sample)?;
    let mut acc = 0.0;
    let mut d: f64 = 0.0;
    for (x, w) in steps {
        let f = cdf(x);
        d = d.max((acc - f).abs());
        acc += w;
        d = d.max((acc - f).abs());
    }
    Ok(KsResult { statistic: d, p_value: ks_p_value(d, n_eff), n_eff })
}

pub fn ks_one_sample<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult> {
    let pairs: Vec<(f64, f64)> = sample.iter().map(|&x| (x, 1.0)).collect();
    weighted_ks(&pairs, cdf)
}

/// Two-sample KS between weighted samples. Ties are handled exactly, so
/// lattice-valued data is fine (the p-value is then conservative). Ties are
/// exact equality: snap lattice values from different samplers to a common
/// index first, or rounding noise splits atoms.
pub fn two_sample_ks_weighted(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<KsResult> {
    let (sa, na) = normalized_steps(a)?;
    let (sb, nb) = normalized_steps(b)?;
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut d: f64 = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < sa.len() && sa[i].0 == x {
            fa += sa[i].1;
            i += 1;
        }
        while j < sb.len() && sb[j].0 == x {
            fb += sb[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    let n_eff = na * nb / (na + nb);
    Ok(KsResult { statistic: d, p_value: ks_p_value(d, n_eff), n_eff })
}

pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let wa: Vec<(f64, f64)> = a.iter().map(|&x| (x, 1.0)).collect();
    let wb: Vec<(f64, f64)> = b.iter().map(|&x| (x, 1.0)).collect();
    two_sample_ks_weighted(&wa, &wb)
}

/// Summary of one series across replicas. Non-finite entries are flagged
/// and excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub flagged: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub se: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub sd: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub median: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q05: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q25: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q75: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q95: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let sorted = sort_finite(xs);
        let n = sorted.len();
        let est = Estimate::from_samples(&sorted);
        let sd = if n >= 2 { est.se * (n as f64).sqrt() } else { f64::NAN };
        Self {
            n,
            flagged: xs.len() - n,
            mean: est.value,
            se: est.se,
            sd,
            median: quantile_sorted(&sorted, 0.5),
            q05: quantile_sorted(&sorted, 0.05),
            q25: quantile_sorted(&sorted, 0.25),
            q75: quantile_sorted(&sorted, 0.75),
            q95: quantile_sorted(&sorted, 0.95),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Per-series, per-checkpoint summaries of a replicated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub replicas: usize,
    pub checkpoints: Vec<f64>,
    pub series: Vec<SeriesSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    /// One entry per checkpoint.
    pub points: Vec<Summary>,
}

/// Build a summary from `values[series][replica][checkpoint]`.
pub fn replica_summary(
    names: &[&str],
    checkpoints: &[f64],
    values: &[Vec<Vec<f64>>],
) -> Result<ReplicaSummary> {
    if names.len() != values.len() {
        return Err(Error::Insufficient("series names and values differ in length".into()));
    }
    let replicas = values.first().map_or(0, Vec::len);
    let series = names
        .iter()
        .zip(values)
        .map(|(name, per_replica)| {
            let points = (0..checkpoints.len())
                .map(|k| {
                    let column: Vec<f64> = per_replica.iter().map(|r| r[k]).collect();
                    Summary::of(&column)
                })
                .collect();
            SeriesSummary { name: (*name).to_string(), points }
        })
        .collect();
    Ok(ReplicaSummary { replicas, checkpoints: checkpoints.to_vec(), series })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub epsilon: f64,
    /// Fraction of replicas with |value − target| > ε (undefined values count
    /// as deviating).
    #[serde(deserialize_with = "nan_from_null")]
    pub fraction: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheckpoint {
    pub param: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub median: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub iqr: f64,
    pub undefined: usize,
    pub deviations: Vec<Deviation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    #[serde(deserialize_with = "nan_from_null")]
    pub target: f64,
    pub replicas: usize,
    pub checkpoints: Vec<TrendCheckpoint>,
    pub verdict: Verdict,
    pub reason: String,
}

pub const MIN_TREND_REPLICAS: usize = 200;

/// Monotone-deviation trend test.
///
/// `values[replica][checkpoint]`, with non-finite entries meaning "undefined".
/// For each ε the deviation fraction must be non-increasing across
/// checkpoints, allowing one inversion no larger than 2 SE. At least one ε
/// must also show a net first-to-last decrease beyond 2 SE, unless every
/// fraction is already zero.
pub fn convergence_in_probability(
    params: &[f64],
    values: &[Vec<f64>],
    target: f64,
    epsilons: &[f64],
) -> Result<TrendReport> {
    if params.len() < 3 {
        return Err(Error::Insufficient(format!(
            "trend test needs at least 3 checkpoints, got {}",
            params.len()
        )));
    }
    if values.len() < MIN_TREND_REPLICAS {
        return Err(Error::Insufficient(format!(
            "trend test needs at least {MIN_TREND_REPLICAS} replicas, got {}",
            values.len()
        )));
    }
    if epsilons.is_empty() {
        return Err(Error::Insufficient("empty ε ladder".into()));
    }
    if params.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Insufficient("checkpoints must be increasing".into()));
    }
    let n = values.len();
    let checkpoints: Vec<TrendCheckpoint> = params
        .iter()
        .enumerate()
        .map(|(k, &param)| {
            let column: Vec<f64> = values.iter().map(|r| r[k]).collect();
            let s = Summary::of(&column);
            let deviations = epsilons
                .iter()
                .map(|&eps| {
                    let hits = column
                        .iter()
                        .filter(|v| !v.is_finite() || (*v - target).abs() > eps)
                        .count();
                    let e = Estimate::proportion(hits, n);
                    Deviation { epsilon: eps, fraction: e.value, se: e.se }
                })
                .collect();
            TrendCheckpoint {
                param,
                median: s.median,
                iqr: s.iqr(),
                undefined: s.flagged,
                deviations,
            }
        })
        .collect();

    let mut reasons = Vec::new();
    let mut any_decrease = false;
    let mut all_zero = true;
    for (e, &eps) in epsilons.iter().enumerate() {
        let f: Vec<&Deviation> = checkpoints.iter().map(|c| &c.deviations[e]).collect();
        let diff_se = |a: &Deviation, b: &Deviation| (a.se * a.se + b.se * b.se).sqrt();
        let mut inversions = 0;
        for w in f.windows(2) {
            if w[1].fraction > w[0].fraction {
                inversions += 1;
                if w[1].fraction - w[0].fraction > 2.0 * diff_se(w[0], w[1]) {
                    reasons.push(format!("ε={eps}: significant increase"));
                }
            }
        }
        if inversions > 1 {
            reasons.push(format!("ε={eps}: {inversions} inversions"));
        }
        let (first, last) = (f[0], f[f.len() - 1]);
        if first.fraction - last.fraction > 2.0 * diff_se(first, last) {
            any_decrease = true;
        }
        if f.iter().any(|d| d.fraction > 0.0) {
            all_zero = false;
        }
    }
    if !any_decrease && !all_zero {
        reasons.push("no ε shows a significant net decrease".into());
    }
    let verdict = if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail };
    Ok(TrendReport {
        target,
        replicas: n,
        checkpoints,
        verdict,
        reason: if reasons.is_empty() { "monotone decrease".into() } else { reasons.join("; ") },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, replica_rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn std_normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn kolmogorov_series_agree_at_switch() {
        let a = kolmogorov_sf(1.0 - 1e-9);
        let b = kolmogorov_sf(1.0 + 1e-9);
        assert!((a - b).abs() < 1e-7);
        // tabulated: P(K > 1.36) ≈ 0.0494
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 5e-4);
    }

    #[test]
    fn point_mass_at_median_gives_half() {
        let r = weighted_ks(&[(0.0, 1.0)], std_normal_cdf).unwrap();
        assert!((r.statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_are_rejected() {
        assert!(weighted_ks(&[(0.0, 0.0), (1.0, 0.0)], std_normal_cdf).is_err());
    }

    #[test]
    fn ks_calibration() {
        // 100 trials of n = 10⁴ standard normals; p > 0.01 in at least 98.
        let mut ok = 0;
        for trial in 0..100 {
            let mut rng = replica_rng(11, trial);
            let xs: Vec<f64> = (0..10_000).map(|_| normal(&mut rng)).collect();
            if ks_one_sample(&xs, std_normal_cdf).unwrap().p_value > 0.01 {
                ok += 1;
            }
        }
        assert!(ok >= 98, "{ok}/100");
    }

    #[test]
    fn rayleigh_tilted_matches_bessel3() {
        // Rayleigh samples weighted by √(2/π)·x follow the Bessel-3 time-1 law.
        let mut rng = replica_rng(5, 0);
        let sample: Vec<(f64, f64)> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.random();
                let x = (-2.0 * (1.0 - u).ln()).sqrt();
                (x, (2.0 / std::f64::consts::PI).sqrt() * x)
            })
            .collect();
        let bessel_cdf = |x: f64| {
            libm::erf(x / std::f64::consts::SQRT_2)
                - (2.0 / std::f64::consts::PI).sqrt() * x * (-x * x / 2.0).exp()
        };
        let r = weighted_ks(&sample, bessel_cdf).unwrap();
        assert!(r.p_value > 0.01, "{r:?}");
    }

    #[test]
    fn two_sample_detects_shift_and_accepts_same_law() {
        let mut rng = replica_rng(9, 0);
        let a: Vec<f64> = (0..3000).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..3000).map(|_| normal(&mut rng)).collect();
        let c: Vec<f64> = (0..3000).map(|_| normal(&mut rng) + 0.2).collect();
        assert!(two_sample_ks(&a, &b).unwrap().p_value > 0.01);
        assert!(two_sample_ks(&a, &c).unwrap().p_value < 1e-4);
    }

    #[test]
    fn two_sample_ties() {
        let a = [1.0, 1.0, 2.0, 2.0];
        let b = [1.0, 2.0, 2.0, 2.0];
        let r = two_sample_ks(&a, &b).unwrap();
        assert!((r.statistic - 0.25).abs() < 1e-15);
    }

    #[test]
    fn trend_constant_at_target_passes() {
        let values = vec![vec![1.0; 3]; 250];
        let r = convergence_in_probability(&[4.0, 8.0, 12.0], &values, 1.0, &[0.1, 0.25]).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.checkpoints.iter().all(|c| c.deviations.iter().all(|d| d.fraction == 0.0)));
    }

    #[test]
    fn trend_flat_noise_fails() {
        let mut rng = replica_rng(3, 0);
        let values: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..3).map(|_| 1.0 + normal(&mut rng)).collect())
            .collect();
        let r = convergence_in_probability(&[4.0, 8.0, 12.0], &values, 1.0, &[0.25, 0.5]).unwrap();
        assert_eq!(r.verdict, Verdict::Fail, "{}", r.reason);
    }

    #[test]
    fn trend_shrinking_noise_passes_and_undefined_counts_as_deviation() {
        let mut rng = replica_rng(4, 0);
        let values: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                [1.0, 0.5, 0.25]
                    .iter()
                    .map(|s| 1.0 + s * normal(&mut rng))
                    .collect()
            })
            .collect();
        let r = convergence_in_probability(&[1.0, 2.0, 3.0], &values, 1.0, &[0.25]).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{}", r.reason);
        let mut with_nan = values.clone();
        for row in with_nan.iter_mut().take(300) {
            row[2] = f64::NAN;
        }
        let r = convergence_in_probability(&[1.0, 2.0, 3.0], &with_nan, 1.0, &[0.25]).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.checkpoints[2].undefined, 300);
    }

    #[test]
    fn trend_refuses_small_inputs() {
        let values = vec![vec![1.0; 3]; 10];
        assert!(convergence_in_probability(&[1.0, 2.0, 3.0], &values, 1.0, &[0.1]).is_err());
        let values = vec![vec![1.0; 2]; 300];
        assert!(convergence_in_probability(&[1.0, 2.0], &values, 1.0, &[0.1]).is_err());
    }

    #[test]
    fn summary_single_and_symmetric() {
        let s = Summary::of(&[3.5]);
        assert_eq!((s.mean, s.median, s.n), (3.5, 3.5, 1));
        let s = Summary::of(&[-2.0, 2.0, f64::NAN]);
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.flagged, 1);
    }

    #[test]
    fn standard_error_matches_bootstrap() {
        let mut rng = replica_rng(21, 0);
        let xs: Vec<f64> = (0..2000).map(|_| normal(&mut rng).exp()).collect();
        let se = Estimate::from_samples(&xs).se;
        let boots: Vec<f64> = (0..400)
            .map(|_| {
                (0..xs.len())
                    .map(|_| xs[rng.random_range(0..xs.len())])
                    .sum::<f64>()
                    / xs.len() as f64
            })
            .collect();
        let boot_se = Summary::of(&boots).sd;
        assert!((se - boot_se).abs() / se < 0.15, "{se} vs {boot_se}");
    }

    proptest! {
        #[test]
        fn summary_is_permutation_invariant(mut xs in prop::collection::vec(-1e3f64..1e3, 2..60), seed in 0u64..1000) {
            let a = Summary::of(&xs);
            let mut rng = replica_rng(seed, 0);
            for i in (1..xs.len()).rev() {
                let j = rng.random_range(0..=i);
                xs.swap(i, j);
            }
            let b = Summary::of(&xs);
            prop_assert_eq!(a.median, b.median);
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * (1.0 + a.mean.abs()));
            prop_assert_eq!(a.q95, b.q95);
        }
    }
}
