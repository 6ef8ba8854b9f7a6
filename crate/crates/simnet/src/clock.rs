//! Clock models for Bob's stations.
//!
//! Times are nanoseconds relative to the moment the clocks were last
//! synchronised (the scheduled start of round 1). A clock maps the reference
//! time `t` to its own reading `t + err(t)`. Without discipline the error grows as
//! `offset + rate_error * t`; a PPS-disciplined clock is pulled back to the
//! reference at every whole second, so only `offset + rate_error * (t mod 1 s)`
//! remains.

use serde::{Deserialize, Serialize};

const SECOND_NS: f64 = 1e9;

/// Tolerance of a PPS-disciplined clock: one 125 MHz cycle.
pub const PPS_TOLERANCE_NS: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Discipline {
    None,
    Pps { tolerance_ns: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset_s: f64,
    /// Fractional frequency error.
    pub rate_error: f64,
    pub discipline: Discipline,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::exact()
    }
}

impl ClockModel {
    pub fn exact() -> Self {
        ClockModel { offset_s: 0.0, rate_error: 0.0, discipline: Discipline::None }
    }

    pub fn drifting(rate_error: f64) -> Self {
        ClockModel { rate_error, ..ClockModel::exact() }
    }

    pub fn pps(offset_s: f64, rate_error: f64) -> Self {
        ClockModel { offset_s, rate_error, discipline: Discipline::Pps { tolerance_ns: PPS_TOLERANCE_NS } }
    }

    /// Clock error at global time `t_ns`, in ns.
    pub fn error_ns(&self, t_ns: f64) -> f64 {
        let offset = self.offset_s * 1e9;
        match self.discipline {
            Discipline::None => offset + self.rate_error * t_ns,
            Discipline::Pps { .. } => offset + self.rate_error * t_ns.rem_euclid(SECOND_NS),
        }
    }

    /// Largest error a disciplined clock reaches just before a tick, or
    /// `None` when undisciplined.
    pub fn worst_tick_error_ns(&self) -> Option<f64> {
        match self.discipline {
            Discipline::None => None,
            Discipline::Pps { .. } => Some(self.offset_s.abs() * 1e9 + self.rate_error.abs() * SECOND_NS),
        }
    }

    /// Whether a disciplined clock stays within its tolerance.
    pub fn discipline_violation(&self) -> Option<String> {
        match self.discipline {
            Discipline::Pps { tolerance_ns } => {
                let worst = self.worst_tick_error_ns().unwrap_or(0.0);
                (worst > tolerance_ns).then(|| {
                    format!("error reaches {worst:.1} ns between ticks, tolerance {tolerance_ns} ns")
                })
            }
            Discipline::None => None,
        }
    }

    pub fn to_local(&self, t_ns: i64) -> i64 {
        let t = t_ns as f64;
        (t + self.error_ns(t)).round() as i64
    }

    /// Global time at which the clock reads `local_ns`.
    pub fn to_reference(&self, local_ns: i64) -> i64 {
        let target = local_ns as f64;
        let t = match self.discipline {
            Discipline::None => (target - self.offset_s * 1e9) / (1.0 + self.rate_error),
            Discipline::Pps { .. } => {
                // The error is tiny against a second, so a few fixed-point
                // steps settle it.
                let mut t = target;
                for _ in 0..4 {
                    t = target - self.error_ns(t);
                }
                t
            }
        };
        t.round() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_clock_is_identity() {
        let c = ClockModel::exact();
        for t in [-5, 0, 1, 999_999_999, 86_400_000_000_000] {
            assert_eq!(c.to_local(t), t);
            assert_eq!(c.to_reference(t), t);
        }
    }

    #[test]
    fn drifting_clock_accumulates() {
        let c = ClockModel::drifting(1e-6);
        assert_eq!(c.to_local(1_000_000_000), 1_000_001_000);
        assert_eq!(c.to_reference(1_000_001_000), 1_000_000_000);
    }

    #[test]
    fn pps_resets_every_second() {
        let c = ClockModel::pps(0.0, 5e-9);
        assert_eq!(c.to_local(999_999_999), 1_000_000_004);
        assert_eq!(c.to_local(1_000_000_000), 1_000_000_000);
        assert!(c.discipline_violation().is_none());
        assert!(ClockModel::pps(0.0, 1e-8).discipline_violation().is_some());
        assert!(ClockModel::pps(9e-9, 0.0).discipline_violation().is_some());
    }

    #[test]
    fn round_trip_within_a_nanosecond() {
        for c in [ClockModel::drifting(-3e-7), ClockModel::pps(2e-9, 4e-9)] {
            for t in [5i64, 123_456_789, 2_500_000_000, 7_000_000_001] {
                let back = c.to_reference(c.to_local(t));
                assert!(back.abs_diff(t) <= 1, "{t} -> {back}");
            }
        }
    }
}
