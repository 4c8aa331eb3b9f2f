//! Finite-activity dislocation measures and their Laplace exponent.
//!
//! A dislocation measure is a finite set of atoms, each a rate together with
//! a non-increasing mass sequence. For `q > -1`
//!
//! ```text
//! Φ(q)  = Σ rate · (1 − Σᵢ sᵢ^{q+1})
//! Φ′(q) = Σ rate · Σᵢ (−ln sᵢ) sᵢ^{q+1}
//! Φ″(q) = −Σ rate · Σᵢ (ln sᵢ)² sᵢ^{q+1}
//! ```
//!
//! The critical parameter p̄ is the root of `g(q) = Φ(q) − (q+1)Φ′(q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

const MASS_SUM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub rate: f64,
    pub masses: Vec<f64>,
}

impl Atom {
    fn positive_masses(&self) -> impl Iterator<Item = f64> + '_ {
        self.masses.iter().copied().filter(|&s| s > 0.0)
    }

    fn has_zero_mass(&self) -> bool {
        self.masses.contains(&0.0)
    }
}

/// A validated finite dislocation measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DislocationSpec {
    atoms: Vec<Atom>,
    total_rate: f64,
}

/// Where the Laplace exponent stops being finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LowerAbscissa {
    /// Every mass entry is positive, so Σ sᵢ^{q+1} is finite for every real q.
    UnboundedBelow,
    /// Some atom carries a zero entry; the exponent is defined for q > −1 only.
    At(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalData {
    pub p_bar: f64,
    pub phi_at_pbar: f64,
    /// Φ′(p̄), which equals Φ(p̄)/(1+p̄) at the root.
    pub speed: f64,
    /// −Φ″(p̄), the variance rate of the tilted tagged fragment.
    pub sigma2: f64,
}

impl CriticalData {
    /// √(2/(πσ²)), the Seneta–Heyde constant multiplying M′.
    pub fn seneta_heyde_constant(&self) -> f64 {
        (2.0 / (std::f64::consts::PI * self.sigma2)).sqrt()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

impl DislocationSpec {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidModel("dislocation measure has no atoms".into()));
        }
        for (k, atom) in atoms.iter().enumerate() {
            if !(atom.rate.is_finite() && atom.rate > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "atom {k}: rate must be positive and finite, got {}",
                    atom.rate
                )));
            }
            if atom.masses.is_empty() {
                return Err(Error::InvalidModel(format!("atom {k}: empty mass sequence")));
            }
            if let Some(&s) = atom
                .masses
                .iter()
                .find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s)))
            {
                return Err(Error::InvalidModel(format!(
                    "atom {k}: mass {s} outside [0, 1]"
                )));
            }
            if atom.masses.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::InvalidModel(format!(
                    "atom {k}: masses must be non-increasing"
                )));
            }
            if atom.masses[0] <= 0.0 {
                return Err(Error::InvalidModel(format!(
                    "atom {k}: leading mass must be positive"
                )));
            }
            let sum: f64 = atom.masses.iter().sum();
            if sum > 1.0 + MASS_SUM_SLACK {
                return Err(Error::InvalidModel(format!(
                    "atom {k}: masses sum to {sum} > 1"
                )));
            }
        }
        if !atoms.iter().any(|a| a.positive_masses().count() >= 2) {
            return Err(Error::InvalidModel(
                "no atom splits a block into two or more positive masses".into(),
            ));
        }
        let total_rate = atoms.iter().map(|a| a.rate).sum();
        Ok(Self { atoms, total_rate })
    }

    /// Binary splitting at rate 1 into two halves: Φ(q) = 1 − 2^{−q}.
    pub fn binary() -> Self {
        Self::new(vec![Atom {
            rate: 1.0,
            masses: vec![0.5, 0.5],
        }])
        .expect("binary spec is valid")
    }

    /// Parse `atom <rate> <m1> <m2> ...` lines.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for entry in kv::parse(text) {
            match entry.key.as_str() {
                "atom" => {
                    let v = entry.floats()?;
                    if v.len() < 2 {
                        return Err(Error::Parse {
                            line: entry.line,
                            msg: "atom needs a rate and at least one mass".into(),
                        });
                    }
                    atoms.push(Atom {
                        rate: v[0],
                        masses: v[1..].to_vec(),
                    });
                }
                "name" => {}
                other => {
                    return Err(Error::Parse {
                        line: entry.line,
                        msg: format!("unknown key `{other}` in dislocation spec"),
                    })
                }
            }
        }
        Self::new(atoms)
    }

    pub fn to_text(&self) -> String {
        self.atoms
            .iter()
            .map(|a| {
                let masses: Vec<String> = a.masses.iter().map(|m| format!("{m}")).collect();
                format!("atom {} {}\n", a.rate, masses.join(" "))
            })
            .collect()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    /// Rate at which mass is lost (κ); zero for conservative measures.
    pub fn killing_rate(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.rate * (1.0 - a.masses.iter().sum::<f64>()).max(0.0))
            .sum()
    }

    pub fn is_conservative(&self) -> bool {
        self.killing_rate() <= MASS_SUM_SLACK
    }

    pub fn lower_abscissa(&self) -> LowerAbscissa {
        if self.atoms.iter().any(Atom::has_zero_mass) {
            LowerAbscissa::At(-1.0)
        } else {
            LowerAbscissa::UnboundedBelow
        }
    }

    fn check_domain(&self, q: f64) -> Result<()> {
        if q.is_nan() {
            return Err(Error::Domain("q is NaN".into()));
        }
        if q <= -1.0 && self.atoms.iter().any(Atom::has_zero_mass) {
            return Err(Error::Domain(format!(
                "Φ({q}) is infinite: an atom has a zero mass entry and q ≤ −1"
            )));
        }
        Ok(())
    }

    /// Φ(q).
    pub fn phi(&self, q: f64) -> Result<f64> {
        self.check_domain(q)?;
        let v: f64 = self
            .atoms
            .iter()
            .map(|a| a.rate * (1.0 - a.positive_masses().map(|s| s.powf(q + 1.0)).sum::<f64>()))
            .sum();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain(format!("Φ({q}) is not finite")))
        }
    }

    /// (Φ′(q), Φ″(q)).
    pub fn phi_derivatives(&self, q: f64) -> Result<(f64, f64)> {
        self.check_domain(q)?;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for a in &self.atoms {
            for s in a.positive_masses() {
                let l = s.ln();
                let w = a.rate * s.powf(q + 1.0);
                d1 -= l * w;
                d2 -= l * l * w;
            }
        }
        if d1.is_finite() && d2.is_finite() {
            Ok((d1, d2))
        } else {
            Err(Error::Domain(format!("derivatives at {q} are not finite")))
        }
    }

    /// g(q) = Φ(q) − (q+1)Φ′(q); negative below p̄, positive above.
    pub fn critical_gap(&self, q: f64) -> Result<f64> {
        Ok(self.phi(q)? - (q + 1.0) * self.phi_derivatives(q)?.0)
    }

    /// ∫ Σ_{i≥2} sᵢ^{1+q} ν(ds); zero entries contribute nothing.
    pub fn integrability_index(&self, q: f64) -> Result<f64> {
        if !(q > -1.0) {
            return Err(Error::Domain(format!("integrability index needs q > −1, got {q}")));
        }
        Ok(self
            .atoms
            .iter()
            .map(|a| a.rate * a.positive_masses().skip(1).map(|s| s.powf(1.0 + q)).sum::<f64>())
            .sum())
    }

    pub fn critical_p(&self, tol: f64) -> Result<CriticalData> {
        const LO: f64 = -0.9;
        const HI: f64 = 64.0;
        // geometric scan: −0.9, −0.8, −0.7, −0.5, −0.1, 0.7, ...
        let mut prev = LO;
        let mut g_prev = self.critical_gap(prev)?;
        if g_prev >= 0.0 {
            return Err(Error::NoCriticalParameter { lo: LO, hi: HI });
        }
        let mut step = 0.1;
        let (mut lo, mut hi) = loop {
            let q = (prev + step).min(HI);
            let g = self.critical_gap(q)?;
            if g >= 0.0 {
                break (prev, q);
            }
            if q >= HI {
                return Err(Error::NoCriticalParameter { lo: LO, hi: HI });
            }
            prev = q;
            g_prev = g;
            step *= 2.0;
        };
        debug_assert!(g_prev < 0.0);
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let g = self.critical_gap(mid)?;
            if g.abs() <= tol && hi - lo < 1e-6 {
                break;
            }
            if g < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
                break;
            }
        }
        let p_bar = mid;
        let phi_at_pbar = self.phi(p_bar)?;
        let (d1, d2) = self.phi_derivatives(p_bar)?;
        Ok(CriticalData {
            p_bar,
            phi_at_pbar,
            speed: d1,
            sigma2: -d2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn binary_phi_closed_form() {
        let s = DislocationSpec::binary();
        assert_eq!(s.phi(0.0).unwrap(), 0.0);
        assert!(close(s.phi(1.0).unwrap(), 0.5, 1e-15));
        for q in [-0.5, 0.3, 2.0, 5.0] {
            assert!(close(s.phi(q).unwrap(), 1.0 - 2f64.powf(-q), 1e-14));
        }
        // q = 1 lies below p̄, where Φ(q) < (q+1)Φ′(q)
        let (d1, _) = s.phi_derivatives(1.0).unwrap();
        assert!(s.phi(1.0).unwrap() < 2.0 * d1);
    }

    #[test]
    fn binary_derivatives_closed_form() {
        let s = DislocationSpec::binary();
        let (d1, d2) = s.phi_derivatives(0.0).unwrap();
        assert!(close(d1, LN_2, 1e-12));
        assert!(close(d2, -0.480_453, 1e-6));
        for q in [0.5, 1.7, 3.0] {
            let (d1, d2) = s.phi_derivatives(q).unwrap();
            assert!(close(d1, LN_2 * 2f64.powf(-q), 1e-14));
            assert!(close(d2, -LN_2 * LN_2 * 2f64.powf(-q), 1e-14));
        }
    }

    #[test]
    fn binary_critical_data() {
        // frozen from an mpmath bisection on 2^q = 1 + (q+1) ln 2
        let c = DislocationSpec::binary().critical_p(1e-10).unwrap();
        assert!(close(c.p_bar, 1.421_342_879_387_955, 1e-9));
        assert!(close(c.sigma2, 0.179_384_155_865_186_4, 1e-9));
        assert!(close(c.speed, 0.258_796_632_080_757_2, 1e-9));
        assert!(close(c.phi_at_pbar, (1.0 + c.p_bar) * c.speed, 1e-10));
        assert!(close(c.seneta_heyde_constant(), 1.883_857_380_025_439, 1e-8));
    }

    #[test]
    fn integrability_index_values() {
        let s = DislocationSpec::binary();
        let c = s.critical_p(1e-12).unwrap();
        assert!(close(s.integrability_index(c.p_bar).unwrap(), 0.186_682_308_850_837, 1e-9));
        assert!(close(s.integrability_index(0.0).unwrap(), 0.5, 1e-15));
        let padded = DislocationSpec::new(vec![Atom {
            rate: 1.0,
            masses: vec![0.5, 0.5, 0.0, 0.0],
        }])
        .unwrap();
        for q in [-0.5, 0.0, 1.3] {
            assert_eq!(
                padded.integrability_index(q).unwrap(),
                s.integrability_index(q).unwrap()
            );
        }
    }

    #[test]
    fn zero_entry_makes_q_below_minus_one_a_domain_error() {
        let padded = DislocationSpec::new(vec![Atom {
            rate: 1.0,
            masses: vec![0.5, 0.5, 0.0],
        }])
        .unwrap();
        assert!(matches!(padded.phi(-1.5), Err(Error::Domain(_))));
        assert_eq!(padded.lower_abscissa(), LowerAbscissa::At(-1.0));
        assert!(DislocationSpec::binary().phi(-1.5).is_ok());
        assert_eq!(
            DislocationSpec::binary().lower_abscissa(),
            LowerAbscissa::UnboundedBelow
        );
    }

    #[test]
    fn validation_rejects_bad_atoms() {
        let bad = |masses: Vec<f64>| DislocationSpec::new(vec![Atom { rate: 1.0, masses }]);
        assert!(bad(vec![0.3, 0.6]).is_err()); // increasing
        assert!(bad(vec![0.7, 0.6]).is_err()); // sum > 1
        assert!(bad(vec![0.9]).is_err()); // never splits
        assert!(bad(vec![1.2, 0.1]).is_err());
        assert!(DislocationSpec::new(vec![Atom {
            rate: 0.0,
            masses: vec![0.5, 0.5]
        }])
        .is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "# ternary-ish\natom 1.5 0.5 0.3 0.2\natom 0.5 0.6 0.2\n";
        let s = DislocationSpec::from_text(text).unwrap();
        assert_eq!(s.atoms().len(), 2);
        assert!(close(s.total_rate(), 2.0, 1e-15));
        assert!(close(s.killing_rate(), 0.1, 1e-12));
        assert_eq!(DislocationSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(matches!(
            DislocationSpec::from_text("atom 1 0.5 0.5\nsplit 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn no_root_when_gap_never_changes_sign() {
        // Nearly all mass is lost at each event, so the root sits below the scan window.
        let s = DislocationSpec::new(vec![Atom {
            rate: 1.0,
            masses: vec![1e-20, 1e-20],
        }])
        .unwrap();
        assert!(matches!(
            s.critical_p(1e-10),
            Err(Error::NoCriticalParameter { .. })
        ));
    }

    #[test]
    fn ratio_increases_then_decreases_around_pbar() {
        let s = DislocationSpec::from_text("atom 1 0.6 0.3\natom 2 0.4 0.4 0.2\n").unwrap();
        let c = s.critical_p(1e-12).unwrap();
        let ratio = |q: f64| s.phi(q).unwrap() / (q + 1.0);
        let below: Vec<f64> = (0..40).map(|k| -0.9 + (c.p_bar + 0.9) * k as f64 / 40.0).collect();
        assert!(below.windows(2).all(|w| ratio(w[0]) < ratio(w[1])));
        let above: Vec<f64> = (0..40).map(|k| c.p_bar + 0.05 + 0.3 * k as f64).collect();
        assert!(above.windows(2).all(|w| ratio(w[0]) > ratio(w[1])));
        assert!(s.critical_gap(c.p_bar - 1e-3).unwrap() < 0.0);
        assert!(s.critical_gap(c.p_bar + 1e-3).unwrap() > 0.0);
    }

    fn arb_spec() -> impl Strategy<Value = DislocationSpec> {
        let atom = (0.1f64..3.0, prop::collection::vec(0.01f64..1.0, 2..5), 0.5f64..1.0)
            .prop_map(|(rate, mut raw, total)| {
                raw.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let sum: f64 = raw.iter().sum();
                let masses = raw.iter().map(|m| m / sum * total).collect();
                Atom { rate, masses }
            });
        prop::collection::vec(atom, 1..4).prop_map(|atoms| DislocationSpec::new(atoms).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn phi_increasing_and_concave(spec in arb_spec(), q1 in -0.9f64..3.0, d1 in 0.05f64..2.0, d2 in 0.05f64..2.0) {
            let (q2, q3) = (q1 + d1, q1 + d1 + d2);
            let (f1, f2, f3) = (spec.phi(q1).unwrap(), spec.phi(q2).unwrap(), spec.phi(q3).unwrap());
            prop_assert!(f1 < f2 && f2 < f3);
            prop_assert!((f2 - f1) / d1 > (f3 - f2) / d2);
        }

        #[test]
        fn derivatives_match_finite_differences(spec in arb_spec(), q in -0.8f64..6.0) {
            let h = 1e-4;
            let fd1 = (spec.phi(q + h).unwrap() - spec.phi(q - h).unwrap()) / (2.0 * h);
            let (d1, d2) = spec.phi_derivatives(q).unwrap();
            prop_assert!(d1 > 0.0 && d2 < 0.0);
            prop_assert!((fd1 - d1).abs() <= 1e-6 * d1.abs());
            let e1 = spec.phi_derivatives(q + h).unwrap().0;
            let e0 = spec.phi_derivatives(q - h).unwrap().0;
            prop_assert!(((e1 - e0) / (2.0 * h) - d2).abs() <= 1e-6 * d2.abs());
        }

        #[test]
        fn root_residual_and_sign_change(spec in arb_spec()) {
            if let Ok(c) = spec.critical_p(1e-10) {
                prop_assert!(spec.critical_gap(c.p_bar).unwrap().abs() <= 1e-10);
                prop_assert!(c.sigma2 > 0.0 && c.speed > 0.0);
                prop_assert!((c.phi_at_pbar - (1.0 + c.p_bar) * c.speed).abs() <= 1e-9);
            }
        }
    }
}
