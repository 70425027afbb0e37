//! RRAM programming conditions and resistance-state statistics.
//!
//! Resistances are modeled as log-normal: the natural log of the resistance
//! of a cell programmed in LRS (bit 0) or HRS (bit 1) is Gaussian. The
//! absolute resistance scale is not known, so the fitted distributions live
//! in σ-normalized units (LRS centered at log-resistance 0 with unit spread).
//! Only the separation between the states matters for the bit error rate.

use alloc::format;
use alloc::vec::Vec;

use crate::rng;
use crate::{Error, Result};

/// Whether a tabulated value is exact or only a bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Exact,
    /// The true value is below the stored one ("<").
    Below,
    /// The true value is above the stored one (">").
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounded<T> {
    pub value: T,
    pub bound: Bound,
}

impl<T> Bounded<T> {
    const fn exact(value: T) -> Self {
        Self {
            value,
            bound: Bound::Exact,
        }
    }

    const fn below(value: T) -> Self {
        Self {
            value,
            bound: Bound::Below,
        }
    }

    const fn above(value: T) -> Self {
        Self {
            value,
            bound: Bound::Above,
        }
    }
}

impl<T: core::fmt::Display> core::fmt::Display for Bounded<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.bound {
            Bound::Exact => write!(f, "{}", self.value),
            Bound::Below => write!(f, "<{}", self.value),
            Bound::Above => write!(f, ">{}", self.value),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionName {
    VeryStrong,
    Strong,
    Weak,
}

impl ConditionName {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionName::VeryStrong => "very_strong",
            ConditionName::Strong => "strong",
            ConditionName::Weak => "weak",
        }
    }
}

impl core::str::FromStr for ConditionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "very_strong" => Ok(ConditionName::VeryStrong),
            "strong" => Ok(ConditionName::Strong),
            "weak" => Ok(ConditionName::Weak),
            other => Err(Error::InvalidConfig(format!(
                "unknown programming condition {other:?}"
            ))),
        }
    }
}

/// A measured RRAM programming recipe and its consequences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgrammingCondition {
    pub name: ConditionName,
    /// SET compliance current, µA.
    pub set_compliance_current_ua: f64,
    /// RESET voltage, V.
    pub reset_voltage_v: f64,
    /// Programming pulse duration, ns.
    pub programming_time_ns: f64,
    pub ber: Bounded<f64>,
    /// Energy of one SET operation, pJ.
    pub set_energy_pj: f64,
    /// Energy of one RESET operation, pJ.
    pub reset_energy_pj: f64,
    /// Program cycles before permanent failure.
    pub cyclability: Bounded<u64>,
}

const CATALOGUE: [ProgrammingCondition; 3] = [
    ProgrammingCondition {
        name: ConditionName::VeryStrong,
        set_compliance_current_ua: 600.0,
        reset_voltage_v: 2.5,
        programming_time_ns: 100.0,
        ber: Bounded::below(1e-6),
        set_energy_pj: 120.0,
        reset_energy_pj: 150.0,
        cyclability: Bounded::exact(100),
    },
    ProgrammingCondition {
        name: ConditionName::Strong,
        set_compliance_current_ua: 55.0,
        reset_voltage_v: 2.5,
        programming_time_ns: 100.0,
        ber: Bounded::exact(9.7e-5),
        set_energy_pj: 11.0,
        reset_energy_pj: 14.0,
        cyclability: Bounded::above(10_000),
    },
    ProgrammingCondition {
        name: ConditionName::Weak,
        set_compliance_current_ua: 20.0,
        reset_voltage_v: 1.5,
        programming_time_ns: 100.0,
        ber: Bounded::exact(3.3e-2),
        set_energy_pj: 4.0,
        reset_energy_pj: 5.0,
        cyclability: Bounded::above(1_000_000),
    },
];

/// The three measured programming conditions, strongest first.
pub fn condition_catalogue() -> Vec<ProgrammingCondition> {
    CATALOGUE.to_vec()
}

pub fn lookup(name: &str) -> Option<ProgrammingCondition> {
    let name: ConditionName = name.parse().ok()?;
    CATALOGUE.iter().copied().find(|c| c.name == name)
}

/// Log-normal resistance distribution of one programmed state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResistanceDistribution {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl ResistanceDistribution {
    pub fn new(mu_log: f64, sigma_log: f64) -> Result<Self> {
        let d = Self { mu_log, sigma_log };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if !self.mu_log.is_finite() || !(self.sigma_log > 0.0) || !self.sigma_log.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "mu_log {} sigma_log {}",
                self.mu_log, self.sigma_log
            )));
        }
        Ok(())
    }

    /// Median resistance, `exp(mu_log)`.
    pub fn median(&self) -> f64 {
        libm::exp(self.mu_log)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

fn check_pair(
    lrs: &ResistanceDistribution,
    hrs: &ResistanceDistribution,
    threshold: f64,
) -> Result<()> {
    lrs.validate()?;
    hrs.validate()?;
    if hrs.mu_log < lrs.mu_log {
        return Err(Error::InvalidDistribution(format!(
            "HRS log-mean {} below LRS log-mean {}",
            hrs.mu_log, lrs.mu_log
        )));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidDistribution(format!(
            "read threshold {threshold} must be > 0"
        )));
    }
    Ok(())
}

/// Read-out error probability with equiprobable stored states: half the
/// probability that an LRS cell reads above `read_threshold` plus half the
/// probability that an HRS cell reads below it.
pub fn analytic_ber(
    lrs: &ResistanceDistribution,
    hrs: &ResistanceDistribution,
    read_threshold: f64,
) -> Result<f64> {
    check_pair(lrs, hrs, read_threshold)?;
    let t = libm::log(read_threshold);
    let lrs_high = normal_cdf((lrs.mu_log - t) / lrs.sigma_log);
    let hrs_low = normal_cdf((t - hrs.mu_log) / hrs.sigma_log);
    Ok(0.5 * lrs_high + 0.5 * hrs_low)
}

/// Resistance where the two state densities cross, the error-minimizing
/// read threshold.
pub fn equal_density_threshold(
    lrs: &ResistanceDistribution,
    hrs: &ResistanceDistribution,
) -> Result<f64> {
    lrs.validate()?;
    hrs.validate()?;
    let (m1, s1, m2, s2) = (lrs.mu_log, lrs.sigma_log, hrs.mu_log, hrs.sigma_log);
    let a = 1.0 / (2.0 * s2 * s2) - 1.0 / (2.0 * s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = m2 * m2 / (2.0 * s2 * s2) - m1 * m1 / (2.0 * s1 * s1) + libm::log(s2 / s1);
    let t = if a.abs() < 1e-12 * (b.abs() + 1.0) {
        if b == 0.0 {
            return Err(Error::InvalidDistribution(
                "identical distributions have no crossing".into(),
            ));
        }
        -c / b
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Err(Error::InvalidDistribution("densities never cross".into()));
        }
        let r1 = (-b + libm::sqrt(disc)) / (2.0 * a);
        let r2 = (-b - libm::sqrt(disc)) / (2.0 * a);
        let mid = 0.5 * (m1 + m2);
        if (r1 - mid).abs() <= (r2 - mid).abs() {
            r1
        } else {
            r2
        }
    };
    Ok(libm::exp(t))
}

/// Distributions and read threshold reproducing a target bit error rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FittedCondition {
    pub lrs: ResistanceDistribution,
    pub hrs: ResistanceDistribution,
    pub threshold: f64,
    /// HRS-LRS log-mean separation in units of the common σ.
    pub separation: f64,
}

const FIT_MAX_ITER: usize = 200;

/// Finds unit-σ LRS/HRS distributions, read at the midpoint, whose
/// [`analytic_ber`] equals `target_ber`. The LRS log-mean is 0; the HRS
/// log-mean is the separation `d` solving `Φ(-d/2) = target_ber`, found by
/// bisection.
pub fn fit_condition_distributions(target_ber: f64) -> Result<FittedCondition> {
    if !(target_ber > 0.0 && target_ber < 0.5) {
        return Err(Error::InvalidDistribution(format!(
            "target bit error rate {target_ber} outside (0, 0.5)"
        )));
    }
    let ber_at = |d: f64| normal_cdf(-d / 2.0);
    let (mut lo, mut hi) = (0.0f64, 80.0f64);
    for _ in 0..FIT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if ber_at(mid) > target_ber {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let d = 0.5 * (lo + hi);
    let fitted = FittedCondition {
        lrs: ResistanceDistribution::new(0.0, 1.0)?,
        hrs: ResistanceDistribution::new(d, 1.0)?,
        threshold: libm::exp(d / 2.0),
        separation: d,
    };
    let achieved = analytic_ber(&fitted.lrs, &fitted.hrs, fitted.threshold)?;
    if (achieved - target_ber).abs() > 0.01 * target_ber {
        return Err(Error::FitFailure { target: target_ber });
    }
    Ok(fitted)
}

/// Canonical σ-normalized distributions for a catalogue condition, fitted to
/// its tabulated bit error rate (the bound value for "<" entries).
pub fn canonical_distributions(condition: &ProgrammingCondition) -> Result<FittedCondition> {
    fit_condition_distributions(condition.ber.value)
}

const MC_SHARD: usize = 1 << 16;

/// Fraction of misread cells in a simulated array of `n_samples` cells, half
/// programmed LRS and half HRS. Cells are simulated in fixed-size shards with
/// their own sub-streams, so the estimate does not depend on evaluation order.
pub fn monte_carlo_ber(
    lrs: &ResistanceDistribution,
    hrs: &ResistanceDistribution,
    read_threshold: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(lrs, hrs, read_threshold)?;
    if n_samples < 1000 {
        return Err(Error::InvalidConfig(format!(
            "n_samples {n_samples} < 1000"
        )));
    }
    let t = libm::log(read_threshold);
    let n_lrs = n_samples / 2;
    let mut errors: u64 = 0;
    let mut start = 0;
    let mut shard = 0;
    while start < n_samples {
        let end = (start + MC_SHARD).min(n_samples);
        let mut r = rng::stream(seed, &format!("rram-mc/shard-{shard}"));
        for i in start..end {
            let z = rng::standard_normal(&mut r);
            let misread = if i < n_lrs {
                lrs.mu_log + lrs.sigma_log * z > t
            } else {
                hrs.mu_log + hrs.sigma_log * z < t
            };
            errors += u64::from(misread);
        }
        start = end;
        shard += 1;
    }
    Ok(errors as f64 / n_samples as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgrammingCost {
    pub energy_pj: f64,
    pub max_reprogram_cycles: Bounded<u64>,
}

/// Energy to program `n_bits` cells of which `set_fraction` are SET (LRS) and
/// the rest RESET, plus the endurance of the condition.
pub fn programming_cost(
    n_bits: u64,
    set_fraction: f64,
    condition: &ProgrammingCondition,
) -> Result<ProgrammingCost> {
    if !(0.0..=1.0).contains(&set_fraction) {
        return Err(Error::InvalidFraction(set_fraction));
    }
    let per_bit =
        set_fraction * condition.set_energy_pj + (1.0 - set_fraction) * condition.reset_energy_pj;
    Ok(ProgrammingCost {
        energy_pj: n_bits as f64 * per_bit,
        max_reprogram_cycles: condition.cyclability,
    })
}

/// Ratio of SET energies between two conditions.
pub fn set_energy_ratio(expensive: &ProgrammingCondition, cheap: &ProgrammingCondition) -> f64 {
    expensive.set_energy_pj / cheap.set_energy_pj
}
