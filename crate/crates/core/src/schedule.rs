//! Tolerance and barrier schedules of the three algorithm variants.

use serde::{Deserialize, Serialize};

use crate::coordinator::FinalTolerances;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Exact-ish agent minimization, no barrier schedule.
    Ell,
    /// Approximate agent solves with decreasing barrier.
    Ella,
    /// Approximate agent solves plus Anderson acceleration.
    Ellada,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ell => "ell",
            Variant::Ella => "ella",
            Variant::Ellada => "ellada",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ell" => Ok(Variant::Ell),
            "ella" => Ok(Variant::Ella),
            "ellada" => Ok(Variant::Ellada),
            other => Err(format!(
                "unknown algorithm '{other}' (expected ell, ella or ellada)"
            )),
        }
    }
}

/// How the agent stationarity tolerance follows the inner iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum InnerNlpRule {
    /// Always the outer-round value.
    Fixed,
    /// `max(eps4^k, coef * eps1^2)` from the last inner step.
    Quadratic { coef: f64 },
    /// `max(eps4^k, coef * eps1)` from the last inner step.
    Proportional { coef: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSchedule {
    /// `(eps1, ..., eps5)` at the first outer round.
    pub initial: [f64; 5],
    /// Which of the five shrink across rounds.
    pub decaying: [bool; 5],
    /// Per-round divisor of the decaying entries.
    pub ratio: f64,
    pub finals: FinalTolerances,
    /// `pi(t) = link * t` relates equality to stationarity tolerance.
    pub link: f64,
    pub inner_rule: InnerNlpRule,
    /// `eps4^{k,0} = initial_inner_factor * eps4^k`.
    pub initial_inner_factor: f64,
}

impl ToleranceSchedule {
    /// `(eps1^k, ..., eps5^k)` for `k >= 1`.
    pub fn outer(&self, k: usize) -> [f64; 5] {
        assert!(k >= 1, "outer rounds count from 1");
        let div = self.ratio.powi(k as i32 - 1);
        let mut out = self.initial;
        for (i, v) in out.iter_mut().enumerate() {
            if self.decaying[i] {
                *v /= div;
            }
        }
        out
    }

    /// Fairness switch: the ELL stationarity and dual finals (`1e-4`) for
    /// every variant, with agent finals at the same level. The default
    /// ELLA/ELLADA finals (`1.0`) are far looser than ELL's.
    pub fn equalize_finals(&mut self) {
        let f = &mut self.finals;
        f.stationarity = f.stationarity.min(1e-4);
        f.dual = f.dual.min(1e-4);
        f.nlp_stationarity = f.nlp_stationarity.min(1e-4);
        f.nlp_equality = f.nlp_equality.min(self.link * f.nlp_stationarity);
    }

    pub fn pi(&self, eps4: f64) -> f64 {
        self.link * eps4
    }

    pub fn inner_start(&self, k: usize) -> f64 {
        self.outer(k)[3] * self.initial_inner_factor
    }

    /// Agent tolerance for the next inner step.
    pub fn inner_next(&self, k: usize, eps1: f64) -> f64 {
        let floor = self.outer(k)[3];
        match self.inner_rule {
            InnerNlpRule::Fixed => floor,
            InnerNlpRule::Quadratic { coef } => floor.max(coef * eps1 * eps1),
            InnerNlpRule::Proportional { coef } => floor.max(coef * eps1),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.initial.iter().any(|v| !(*v > 0.0)) {
            return Err("initial tolerances must be positive".into());
        }
        if !(self.ratio >= 1.0) {
            return Err("tolerance ratio must be at least 1".into());
        }
        if !(self.link > 0.0) {
            return Err("tolerance link must be positive".into());
        }
        if !(self.initial_inner_factor > 0.0) {
            return Err("initial_inner_factor must be positive".into());
        }
        let f = &self.finals;
        for v in [
            f.stationarity,
            f.dual,
            f.primal,
            f.nlp_stationarity,
            f.nlp_equality,
            f.barrier,
        ] {
            if !(v > 0.0) {
                return Err("final tolerances must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BarrierSchedule {
    Fixed {
        value: f64,
    },
    /// `b^1 = max`, then `b^{k+1} = clamp(coef * (eps3^k)^2, min, max)`.
    Quadratic {
        coef: f64,
        min: f64,
        max: f64,
    },
}

impl BarrierSchedule {
    pub fn first(&self) -> f64 {
        match *self {
            BarrierSchedule::Fixed { value } => value,
            BarrierSchedule::Quadratic { max, .. } => max,
        }
    }

    pub fn next(&self, eps3: f64) -> f64 {
        match *self {
            BarrierSchedule::Fixed { value } => value,
            BarrierSchedule::Quadratic { coef, min, max } => max.min(min.max(coef * eps3 * eps3)),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            BarrierSchedule::Fixed { value } if value > 0.0 => Ok(()),
            BarrierSchedule::Quadratic { coef, min, max }
                if coef > 0.0 && min > 0.0 && max >= min =>
            {
                Ok(())
            }
            _ => Err("barrier schedule must stay positive".into()),
        }
    }
}

pub fn default_schedules(variant: Variant) -> (ToleranceSchedule, BarrierSchedule) {
    match variant {
        Variant::Ell => (
            ToleranceSchedule {
                initial: [1e-2, 1e-2, 1e-1, 1e-8, 1e-8],
                decaying: [true, true, true, false, false],
                ratio: 2.0,
                finals: FinalTolerances {
                    stationarity: 1e-4,
                    dual: 1e-4,
                    primal: 1e-3,
                    // agent residuals aggregated over agents as a 2-norm
                    nlp_stationarity: 1e-6,
                    nlp_equality: 1e-6,
                    barrier: 1e-8,
                },
                link: 1.0,
                inner_rule: InnerNlpRule::Fixed,
                initial_inner_factor: 1.0,
            },
            BarrierSchedule::Fixed { value: 1e-8 },
        ),
        Variant::Ella | Variant::Ellada => (
            ToleranceSchedule {
                initial: [100.0, 100.0, 0.1, 100.0, 0.1],
                decaying: [true; 5],
                ratio: 2.0,
                finals: FinalTolerances {
                    stationarity: 1.0,
                    dual: 1.0,
                    primal: 1e-3,
                    nlp_stationarity: 1.0,
                    nlp_equality: 1e-3,
                    barrier: 1e-4,
                },
                link: 1e-3,
                inner_rule: InnerNlpRule::Quadratic { coef: 40.0 },
                initial_inner_factor: 1.0,
            },
            BarrierSchedule::Quadratic {
                coef: 25.0,
                min: 1e-4,
                max: 1e-1,
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_ell_round() {
        let (s, b) = default_schedules(Variant::Ell);
        let t = s.outer(1);
        assert_eq!(&t[..3], &[1e-2, 1e-2, 1e-1]);
        assert_eq!(b.first(), 1e-8);
    }

    #[test]
    fn third_ella_round() {
        let (s, _) = default_schedules(Variant::Ella);
        assert_eq!(s.outer(3)[3], 25.0);
        assert_eq!(s.pi(1000.0), 1.0);
    }

    #[test]
    fn barrier_clamps() {
        let (_, b) = default_schedules(Variant::Ella);
        assert_eq!(b.first(), 0.1);
        assert_eq!(b.next(0.1), 0.1);
        assert_eq!(b.next(1e-3), 1e-4);
        assert!((b.next(0.01) - 25e-4).abs() < 1e-18);
    }

    #[test]
    fn equalized_finals() {
        let (mut ell, _) = default_schedules(Variant::Ell);
        let before = ell.finals;
        ell.equalize_finals();
        assert_eq!(ell.finals, before);
        let (mut ella, _) = default_schedules(Variant::Ella);
        ella.equalize_finals();
        let f = &ella.finals;
        assert_eq!(
            (f.stationarity, f.dual, f.primal, f.nlp_stationarity),
            (1e-4, 1e-4, 1e-3, 1e-4)
        );
        assert!((f.nlp_equality - 1e-7).abs() < 1e-20);
    }
}
