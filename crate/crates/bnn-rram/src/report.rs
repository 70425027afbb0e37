//! Maps a sweep onto the RRAM programming conditions: which condition is the
//! cheapest one whose bit error rate a model still tolerates.

use std::fmt;

use bnn_rram_core::rram::{
    condition_catalogue, programming_cost, set_energy_ratio, Bounded, ConditionName,
    ProgrammingCondition,
};

use crate::harness::SweepResult;
use crate::{HarnessError, Result};

/// Share of SET operations assumed when pricing a bit.
pub const SET_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionAssessment {
    pub condition: ProgrammingCondition,
    /// Rate used for the lookup; for bounded table entries, the bound.
    pub ber: f64,
    pub accuracy: f64,
    pub meets_floor: bool,
    pub energy_per_bit_pj: f64,
    pub cyclability: Bounded<u64>,
}

/// Minimum accuracy a programming condition must preserve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccuracyFloor {
    /// Fixed accuracy in `[0, 1]`, shared by all models.
    Absolute(f64),
    /// Each model's own `p_test = 0` accuracy minus this amount.
    BelowClean(f64),
}

impl fmt::Display for AccuracyFloor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Absolute(a) => write!(f, "{:.2}%", 100.0 * a),
            Self::BelowClean(d) => write!(f, "clean accuracy - {:.2} points", 100.0 * d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Condition(ConditionName),
    NoConditionMeetsFloor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingAssessment {
    pub p_train: f64,
    /// Floor applied to this model, as an accuracy.
    pub floor: f64,
    pub conditions: Vec<ConditionAssessment>,
    pub selected: Selection,
}

impl TrainingAssessment {
    pub fn assessment(&self, name: ConditionName) -> &ConditionAssessment {
        self.conditions
            .iter()
            .find(|c| c.condition.name == name)
            .expect("every catalogue condition is assessed")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RramReport {
    pub accuracy_floor: AccuracyFloor,
    pub trainings: Vec<TrainingAssessment>,
    /// SET energy of the strongest condition over that of the weakest.
    pub set_energy_ratio: f64,
}

impl RramReport {
    pub fn for_p_train(&self, p_train: f64) -> Option<&TrainingAssessment> {
        self.trainings.iter().find(|t| t.p_train == p_train)
    }
}

/// Accuracy at `ber` from an ascending `(p_test, accuracy)` curve: linear
/// in `log(p_test)` between positive rates, linear in `p_test` between 0 and
/// the smallest positive rate. `None` outside the curve's range.
pub fn interpolate_accuracy(curve: &[(f64, f64)], ber: f64) -> Option<f64> {
    let (first, last) = (curve.first()?, curve.last()?);
    if !(first.0..=last.0).contains(&ber) {
        return None;
    }
    if let Some(&(_, a)) = curve.iter().find(|(p, _)| *p == ber) {
        return Some(a);
    }
    let hi = curve.iter().position(|(p, _)| *p > ber)?;
    let ((p0, a0), (p1, a1)) = (curve[hi - 1], curve[hi]);
    let t = if p0 == 0.0 {
        ber / p1
    } else {
        (ber.ln() - p0.ln()) / (p1.ln() - p0.ln())
    };
    Some(a0 + t * (a1 - a0))
}

/// Assesses every programming condition for every training rate in `sweep`
/// against `accuracy_floor`.
pub fn rram_report(sweep: &SweepResult, accuracy_floor: AccuracyFloor) -> Result<RramReport> {
    let catalogue = condition_catalogue();
    let p_trains = sweep.p_trains();
    if p_trains.is_empty() {
        return Err(HarnessError::Config("sweep has no rows".into()));
    }
    let mut trainings = Vec::new();
    for p_train in p_trains {
        let curve = sweep.curve(p_train);
        let floor = match accuracy_floor {
            AccuracyFloor::Absolute(a) => a,
            AccuracyFloor::BelowClean(d) => {
                let clean = curve.iter().find(|(p, _)| *p == 0.0).ok_or_else(|| {
                    HarnessError::Config(format!(
                        "p_train={p_train}: a floor below clean accuracy needs p_test = 0 rows"
                    ))
                })?;
                clean.1 - d
            }
        };
        let mut conditions = Vec::new();
        for c in &catalogue {
            let ber = c.ber.value;
            let accuracy = interpolate_accuracy(&curve, ber).ok_or_else(|| {
                HarnessError::ExtrapolationRefused {
                    condition: c.name.as_str().to_string(),
                    ber,
                    min: curve[0].0,
                    max: curve[curve.len() - 1].0,
                }
            })?;
            conditions.push(ConditionAssessment {
                condition: *c,
                ber,
                accuracy,
                meets_floor: accuracy >= floor,
                energy_per_bit_pj: programming_cost(1, SET_FRACTION, c)?.energy_pj,
                cyclability: c.cyclability,
            });
        }
        let selected = conditions
            .iter()
            .filter(|a| a.meets_floor)
            .min_by(|a, b| a.energy_per_bit_pj.total_cmp(&b.energy_per_bit_pj))
            .map_or(Selection::NoConditionMeetsFloor, |a| {
                Selection::Condition(a.condition.name)
            });
        trainings.push(TrainingAssessment {
            p_train,
            floor,
            conditions,
            selected,
        });
    }
    let strongest = catalogue
        .iter()
        .max_by(|a, b| a.set_energy_pj.total_cmp(&b.set_energy_pj));
    let weakest = catalogue
        .iter()
        .min_by(|a, b| a.set_energy_pj.total_cmp(&b.set_energy_pj));
    Ok(RramReport {
        accuracy_floor,
        trainings,
        set_energy_ratio: set_energy_ratio(
            strongest.expect("catalogue"),
            weakest.expect("catalogue"),
        ),
    })
}

impl fmt::Display for RramReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy floor: {}", self.accuracy_floor)?;
        for t in &self.trainings {
            writeln!(
                f,
                "\np_train = {} (floor {:.2}%)",
                t.p_train,
                100.0 * t.floor
            )?;
            writeln!(
                f,
                "  {:<12} {:>10} {:>9} {:>6} {:>11} {:>12}",
                "condition", "ber", "accuracy", "ok", "pJ/bit", "cycles"
            )?;
            for a in &t.conditions {
                writeln!(
                    f,
                    "  {:<12} {:>10} {:>8.2}% {:>6} {:>11.1} {:>12}",
                    a.condition.name.as_str(),
                    a.condition.ber.to_string(),
                    100.0 * a.accuracy,
                    if a.meets_floor { "yes" } else { "no" },
                    a.energy_per_bit_pj,
                    a.cyclability.to_string()
                )?;
            }
            match t.selected {
                Selection::Condition(name) => {
                    let a = t.assessment(name);
                    writeln!(
                        f,
                        "  selected: {} ({} pJ SET / {} pJ RESET, {:.1} pJ/bit at {:.0}% SET, {} cycles)",
                        name.as_str(),
                        a.condition.set_energy_pj,
                        a.condition.reset_energy_pj,
                        a.energy_per_bit_pj,
                        100.0 * SET_FRACTION,
                        a.cyclability
                    )?;
                }
                Selection::NoConditionMeetsFloor => {
                    writeln!(f, "  selected: no condition meets the floor")?
                }
            }
        }
        write!(
            f,
            "\nSET energy ratio very_strong / weak: {:.1}x",
            self.set_energy_ratio
        )
    }
}
