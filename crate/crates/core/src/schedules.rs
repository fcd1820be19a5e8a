//! Epoch-indexed loss-weight schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("unknown schedule preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Zero,
    Constant,
    /// `λ₀ (1 − α)^round(t / T)`
    Annealing,
    /// `λ₀ sigmoid(α (t − T_a))`
    ColdStartSigmoid,
    /// `λ₀ (1 + α)^min(0, T_a − t)`
    QuickDrop,
    /// `λ₀ [1 − (1 + α)^min(0, T_a − t)]`
    QuickStart,
    /// `λ₀ [1 − sigmoid(α (t − T_a))]`
    InverseSigmoid,
}

/// A loss-weight schedule. Fields unused by a kind are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default)]
    pub alpha: f64,
    /// Annealing block length `T`.
    #[serde(default = "default_period")]
    pub period: u32,
    /// Activation offset `T_a`.
    #[serde(default)]
    pub offset: f64,
}

fn default_period() -> u32 {
    1
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ScheduleSpec {
    pub fn zero() -> Self {
        Self {
            kind: ScheduleKind::Zero,
            lambda0: 0.0,
            alpha: 0.0,
            period: 1,
            offset: 0.0,
        }
    }

    pub fn constant(lambda0: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            lambda0,
            ..Self::zero()
        }
    }

    pub fn annealing(lambda0: f64, alpha: f64, period: u32) -> Self {
        Self {
            kind: ScheduleKind::Annealing,
            lambda0,
            alpha,
            period,
            offset: 0.0,
        }
    }

    fn ramp(kind: ScheduleKind, lambda0: f64, alpha: f64, offset: f64) -> Self {
        Self {
            kind,
            lambda0,
            alpha,
            period: 1,
            offset,
        }
    }

    pub fn cold_start(lambda0: f64, alpha: f64, offset: f64) -> Self {
        Self::ramp(ScheduleKind::ColdStartSigmoid, lambda0, alpha, offset)
    }

    pub fn quick_drop(lambda0: f64, alpha: f64, offset: f64) -> Self {
        Self::ramp(ScheduleKind::QuickDrop, lambda0, alpha, offset)
    }

    pub fn quick_start(lambda0: f64, alpha: f64, offset: f64) -> Self {
        Self::ramp(ScheduleKind::QuickStart, lambda0, alpha, offset)
    }

    pub fn inverse_sigmoid(lambda0: f64, alpha: f64, offset: f64) -> Self {
        Self::ramp(ScheduleKind::InverseSigmoid, lambda0, alpha, offset)
    }

    /// Named presets. The `quick-drop`, `quick-start` and `inverse-sigmoid`
    /// values come from a hyperparameter search over those modes.
    pub fn preset(name: &str) -> Result<Self, ScheduleError> {
        Ok(match name {
            "zero" => Self::zero(),
            "annealing" | "lambda-s" => Self::annealing(2.3, 0.14, 50),
            "cold-start" | "sigmoid" | "lambda-c" => Self::cold_start(0.85, 0.17, 51.0),
            "quick-drop" => Self::quick_drop(0.836881, 0.062851, 14.0),
            "quick-start" => Self::quick_start(0.936669, 0.073074, 61.2),
            "inverse-sigmoid" => Self::inverse_sigmoid(0.939779, 0.171778, 59.2),
            "constant-c" => Self::constant(0.85),
            "constant-s" => Self::constant(2.3),
            other => return Err(ScheduleError::UnknownPreset(other.to_string())),
        })
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |msg: &str| Err(ScheduleError::Invalid(format!("{:?}: {msg}", self.kind)));
        if !(self.lambda0.is_finite() && self.alpha.is_finite() && self.offset.is_finite()) {
            return bad("parameters must be finite");
        }
        if self.lambda0 < 0.0 {
            return bad("lambda0 must be non-negative");
        }
        match self.kind {
            ScheduleKind::Annealing if self.period < 1 => return bad("period must be at least 1"),
            ScheduleKind::Annealing | ScheduleKind::QuickDrop | ScheduleKind::QuickStart
                if !(0.0..1.0).contains(&self.alpha) =>
            {
                return bad("alpha must lie in [0, 1)")
            }
            _ => {}
        }
        Ok(())
    }

    /// Weight at epoch `t`. `round` is half-away-from-zero.
    pub fn weight_at(&self, t: u32) -> f64 {
        let t = f64::from(t);
        let l0 = self.lambda0;
        match self.kind {
            ScheduleKind::Zero => 0.0,
            ScheduleKind::Constant => l0,
            ScheduleKind::Annealing => {
                let blocks = (t / f64::from(self.period)).round();
                l0 * (1.0 - self.alpha).powf(blocks)
            }
            ScheduleKind::ColdStartSigmoid => l0 * sigmoid(self.alpha * (t - self.offset)),
            ScheduleKind::QuickDrop => l0 * (1.0 + self.alpha).powf((self.offset - t).min(0.0)),
            ScheduleKind::QuickStart => {
                l0 * (1.0 - (1.0 + self.alpha).powf((self.offset - t).min(0.0)))
            }
            ScheduleKind::InverseSigmoid => {
                l0 * (1.0 - sigmoid(self.alpha * (t - self.offset)))
            }
        }
    }
}

/// `(t, weight_at(t))` for `t = 0..epochs`.
pub fn schedule_table(spec: &ScheduleSpec, epochs: u32) -> Vec<(u32, f64)> {
    (0..epochs).map(|t| (t, spec.weight_at(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn appendix_values() {
        let ls = ScheduleSpec::annealing(2.3, 0.14, 50);
        assert_eq!(ls.weight_at(0), 2.3);
        assert!((ls.weight_at(50) - 1.978).abs() < 1e-12);
        // round(24/50) = 0, round(25/50) = 1
        assert_eq!(ls.weight_at(24), 2.3);
        assert_eq!(ls.weight_at(25), ls.weight_at(50));
        let lc = ScheduleSpec::cold_start(0.85, 0.17, 51.0);
        assert!((lc.weight_at(51) - 0.425).abs() < 1e-15);
        let expected = 0.85 / (1.0 + 8.67_f64.exp());
        assert!((lc.weight_at(0) - expected).abs() < 1e-18);
        assert!((lc.weight_at(0) - 1.45e-4).abs() < 1e-6);
    }

    #[test]
    fn table_examples() {
        assert!(schedule_table(&ScheduleSpec::zero(), 10).iter().all(|&(_, w)| w == 0.0));
        let c = schedule_table(&ScheduleSpec::constant(0.7), 12);
        assert_eq!(c.len(), 12);
        assert!(c.iter().all(|&(_, w)| w == 0.7));
        assert_eq!(c.last().unwrap().0, 11);
    }

    #[test]
    fn presets_resolve() {
        for name in [
            "zero",
            "annealing",
            "cold-start",
            "quick-drop",
            "quick-start",
            "inverse-sigmoid",
        ] {
            ScheduleSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(ScheduleSpec::preset("bogus").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(ScheduleSpec::annealing(1.0, 1.0, 50).validate().is_err());
        assert!(ScheduleSpec::annealing(1.0, 0.1, 0).validate().is_err());
        assert!(ScheduleSpec::quick_drop(1.0, -0.1, 3.0).validate().is_err());
        assert!(ScheduleSpec::constant(-1.0).validate().is_err());
        assert!(ScheduleSpec::cold_start(1.0, f64::NAN, 3.0).validate().is_err());
    }

    #[test]
    fn cold_start_limit() {
        let lc = ScheduleSpec::cold_start(0.85, 0.17, 51.0);
        let far = lc.weight_at(510);
        // Saturates to λ₀ in floating point this far out.
        assert!(far <= 0.85 && (0.85 - far) <= 1e-6 * 0.85);
    }

    fn kinds(l0: f64, a: f64, ta: f64) -> [(ScheduleSpec, i8); 5] {
        [
            (ScheduleSpec::annealing(l0, a, 50), -1),
            (ScheduleSpec::quick_drop(l0, a, ta), -1),
            (ScheduleSpec::inverse_sigmoid(l0, a, ta), -1),
            (ScheduleSpec::cold_start(l0, a, ta), 1),
            (ScheduleSpec::quick_start(l0, a, ta), 1),
        ]
    }

    proptest! {
        #[test]
        fn monotone(l0 in 0.0f64..5.0, a in 0.0f64..0.99, ta in 0.0f64..200.0, t in 0u32..600) {
            for (spec, dir) in kinds(l0, a, ta) {
                let (w0, w1) = (spec.weight_at(t), spec.weight_at(t + 1));
                if dir < 0 {
                    prop_assert!(w1 <= w0, "{:?} increased at {t}", spec.kind);
                } else {
                    prop_assert!(w1 >= w0, "{:?} decreased at {t}", spec.kind);
                }
            }
        }

        #[test]
        fn cold_start_stays_inside_open_interval(l0 in 0.01f64..5.0, a in 0.01f64..0.5, ta in 0.0f64..100.0, t in 0u32..100) {
            // Away from floating-point saturation of the sigmoid.
            prop_assume!((a * (f64::from(t) - ta)).abs() < 30.0);
            let w = ScheduleSpec::cold_start(l0, a, ta).weight_at(t);
            prop_assert!(w > 0.0 && w < l0);
        }

        #[test]
        fn complements(l0 in 0.0f64..5.0, a in 0.0f64..0.99, ta in 0.0f64..200.0, t in 0u32..600) {
            let qd = ScheduleSpec::quick_drop(l0, a, ta).weight_at(t);
            let qs = ScheduleSpec::quick_start(l0, a, ta).weight_at(t);
            prop_assert!((qd + qs - l0).abs() <= 1e-12 * l0.max(1.0));
            let cs = ScheduleSpec::cold_start(l0, a, ta).weight_at(t);
            let is = ScheduleSpec::inverse_sigmoid(l0, a, ta).weight_at(t);
            prop_assert!((cs + is - l0).abs() <= 1e-12 * l0.max(1.0));
        }

        #[test]
        fn scale_equivariant(l0 in 0.0f64..5.0, c in 0.0f64..10.0, a in 0.0f64..0.99, ta in 0.0f64..200.0, t in 0u32..600) {
            for ((spec, _), (scaled, _)) in kinds(l0, a, ta).into_iter().zip(kinds(c * l0, a, ta)) {
                let lhs = scaled.weight_at(t);
                let rhs = c * spec.weight_at(t);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
            prop_assert_eq!(ScheduleSpec::constant(c * l0).weight_at(t), c * l0);
        }
    }
}
