//! Closed-form planning: round timing, round count, security bounds,
//! data volume, minimum station separation and clock-drift budget.
//!
//! Geometry follows a single axis: Bob's stations sit a distance `L` apart,
//! Alice's agent `i` may sit up to `l_i` from Bob's agent `i` and must answer
//! within `tau_i` of the round start, and consecutive rounds (alternating
//! stations) start `t_L - (tau_i + t_M)` apart, where `t_L = L / c` and `t_M`
//! is the safety margin. Each station therefore runs a round every
//!
//! ```text
//! t_Q = 2 (L - l_1 - l_2) / c - 2 t_M
//! ```
//!
//! and a commitment held for `T` seconds needs `m + 1 = 2T / t_Q` rounds
//! including the reveal. The two expressions agree when `tau_i = 2 l_i / c`;
//! otherwise the round schedule follows the start rule and its period is
//! `2 t_L - tau_1 - tau_2 - 2 t_M`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{FieldError, FieldSpec};
use crate::protocol::{Station, TimingPolicy};

/// Vacuum speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot parse duration {0:?}")]
    BadDuration(String),
    #[error("commitment duration {0} s is too short for two rounds")]
    TooShort(f64),
    #[error("round count {0} must be even and at least 2")]
    BadRoundCount(u64),
    #[error("configuration file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("plan file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometry and timing policy of one commitment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeConfig {
    /// Distance between Bob's stations, metres.
    pub separation_m: f64,
    /// Furthest Alice's agents may sit from Bob's, metres.
    pub alice_offset_m: [f64; 2],
    /// Answer deadlines measured from the round start, seconds.
    pub answer_deadline_s: [f64; 2],
    pub margin_s: f64,
    pub light_speed_m_per_s: f64,
    /// Commitment duration, seconds.
    pub duration_s: f64,
    /// Bits per exchanged string.
    pub bits: u32,
}

impl SpacetimeConfig {
    /// All lengths and times positive (the margin may be zero), finite, and
    /// `l_1 + l_2 < L`.
    pub fn validate(&self) -> Result<(), PlanError> {
        let positive = [
            ("separation_m", self.separation_m),
            ("alice_offset_m[0]", self.alice_offset_m[0]),
            ("alice_offset_m[1]", self.alice_offset_m[1]),
            ("answer_deadline_s[0]", self.answer_deadline_s[0]),
            ("answer_deadline_s[1]", self.answer_deadline_s[1]),
            ("light_speed_m_per_s", self.light_speed_m_per_s),
            ("duration_s", self.duration_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlanError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.margin_s.is_finite() && self.margin_s >= 0.0) {
            return Err(PlanError::InvalidConfig(format!(
                "margin_s must be non-negative, got {}",
                self.margin_s
            )));
        }
        if self.bits < 4 {
            return Err(PlanError::InvalidConfig(format!("bits must be at least 4, got {}", self.bits)));
        }
        let reach = self.alice_offset_m[0] + self.alice_offset_m[1];
        if reach >= self.separation_m {
            return Err(PlanError::InfeasibleGeometry(format!(
                "l1 + l2 < L violated: {reach} m >= {} m",
                self.separation_m
            )));
        }
        Ok(())
    }

    /// `t_L`, light travel time between Bob's stations.
    pub fn light_time_s(&self) -> f64 {
        self.separation_m / self.light_speed_m_per_s
    }
}

/// Interval between consecutive rounds at the same station.
pub fn compute_tq(cfg: &SpacetimeConfig) -> Result<f64, PlanError> {
    cfg.validate()?;
    let reach = cfg.alice_offset_m[0] + cfg.alice_offset_m[1];
    let tq = 2.0 / cfg.light_speed_m_per_s * (cfg.separation_m - reach) - 2.0 * cfg.margin_s;
    if tq <= 0.0 {
        return Err(PlanError::InfeasibleGeometry(format!(
            "t_Q = {tq:e} s is not positive (margin too large for the separation)"
        )));
    }
    Ok(tq)
}

/// `floor(2T / t_Q) - 1`: the number of rounds before the reveal that fit in
/// the duration, before any parity adjustment. Zero when not even one
/// sustain round fits.
pub fn round_count_raw(cfg: &SpacetimeConfig) -> Result<u64, PlanError> {
    let tq = compute_tq(cfg)?;
    // The nudge keeps exact ratios (T = t_Q) from flooring one short.
    let rounds_with_reveal = (2.0 * cfg.duration_s / tq * (1.0 + 1e-12)).floor();
    Ok((rounds_with_reveal as u64).saturating_sub(1))
}

/// Round count used by plans: [`round_count_raw`] rounded down to even so
/// the reveal (round m + 1) lands at station 1 with the commit.
pub fn compute_round_count(cfg: &SpacetimeConfig) -> Result<u64, PlanError> {
    let raw = round_count_raw(cfg)?;
    Ok(raw - raw % 2)
}

/// log2 of the linear bound `m * 2^((3 - n) / 2)`.
pub fn epsilon_linear_log2(m: u64, n: u32) -> f64 {
    (m as f64).log2() + (3.0 - n as f64) / 2.0
}

/// Cheating probability bound linear in the round count, capped at 1.
pub fn epsilon_linear(m: u64, n: u32) -> f64 {
    epsilon_linear_log2(m, n).exp2().min(1.0)
}

/// log2 of the exponential bound `2^(-n / 2^(m-1))`.
pub fn epsilon_exponential_log2(m: u64, n: u32) -> f64 {
    // 2^-(m-1) underflows to zero for large m, making the bound exactly 1.
    -(n as f64) * (-(m.saturating_sub(1) as f64)).exp2()
}

/// Earlier bound whose required string length doubles with every round.
pub fn epsilon_exponential(m: u64, n: u32) -> f64 {
    epsilon_exponential_log2(m, n).exp2()
}

/// Smallest station separation for which each station's answer windows fit
/// inside its round period, i.e. `t_Q >= tau_1 + tau_2`. The configured
/// separation is ignored.
pub fn min_separation(cfg: &SpacetimeConfig) -> f64 {
    let tau_sum = cfg.answer_deadline_s[0] + cfg.answer_deadline_s[1];
    cfg.alice_offset_m[0] + cfg.alice_offset_m[1] + cfg.light_speed_m_per_s * (cfg.margin_s + tau_sum / 2.0)
}

/// Largest fractional frequency error that keeps the accumulated clock
/// offset over the whole commitment within the margin.
pub fn drift_budget(margin_s: f64, duration_s: f64) -> f64 {
    margin_s / duration_s
}

/// Derived schedule and figures for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub name: String,
    pub config: SpacetimeConfig,
    /// Reduction polynomial tail as a big-endian hex integer.
    pub reduction_tail: String,
    pub light_time_s: f64,
    /// `t_Q`.
    pub station_period_s: f64,
    /// Gap between the previous round's start and the start of a round at
    /// station 1 (index 0) or station 2 (index 1).
    pub round_gap_s: [f64; 2],
    /// `m`, rounds before the reveal.
    pub rounds: u64,
    /// Time from the first round to the reveal, `(m + 1) t_Q / 2`.
    pub covered_duration_s: f64,
    pub epsilon_linear: f64,
    pub epsilon_linear_log2: f64,
    pub epsilon_exponential: f64,
    pub epsilon_exponential_log2: f64,
    /// Challenges plus answers over all m + 1 rounds.
    pub bytes_total: u64,
    pub bytes_per_station: u64,
    /// Challenge stream each of Bob's agents sends, bytes/second.
    pub rate_per_station: f64,
    pub drift_budget: f64,
    pub min_separation_m: f64,
}

/// Builds the plan for a configuration, with the round count taken from the
/// duration.
pub fn resource_plan(cfg: &SpacetimeConfig) -> Result<ProtocolPlan, PlanError> {
    let rounds = compute_round_count(cfg)?;
    if rounds < 2 {
        return Err(PlanError::TooShort(cfg.duration_s));
    }
    build_plan("plan", cfg, rounds, None)
}

fn build_plan(
    name: &str,
    cfg: &SpacetimeConfig,
    rounds: u64,
    tail: Option<&str>,
) -> Result<ProtocolPlan, PlanError> {
    if rounds < 2 || !rounds.is_multiple_of(2) {
        return Err(PlanError::BadRoundCount(rounds));
    }
    let tq = compute_tq(cfg)?;
    let spec = match tail {
        Some(hex) => FieldSpec::new(cfg.bits, &parse_tail_hex(hex)?)?,
        None => FieldSpec::standard(cfg.bits)?,
    };
    let t_l = cfg.light_time_s();
    let element_bytes = spec.byte_len() as u64;
    let rounds_with_reveal = rounds + 1;
    let bytes_total = rounds_with_reveal * 2 * element_bytes;
    Ok(ProtocolPlan {
        name: name.to_string(),
        config: *cfg,
        reduction_tail: tail_hex(spec.tail()),
        light_time_s: t_l,
        station_period_s: tq,
        round_gap_s: [
            t_l - (cfg.answer_deadline_s[0] + cfg.margin_s),
            t_l - (cfg.answer_deadline_s[1] + cfg.margin_s),
        ],
        rounds,
        covered_duration_s: rounds_with_reveal as f64 * tq / 2.0,
        epsilon_linear: epsilon_linear(rounds, cfg.bits),
        epsilon_linear_log2: epsilon_linear_log2(rounds, cfg.bits),
        epsilon_exponential: epsilon_exponential(rounds, cfg.bits),
        epsilon_exponential_log2: epsilon_exponential_log2(rounds, cfg.bits),
        bytes_total,
        bytes_per_station: bytes_total / 2,
        rate_per_station: rounds_with_reveal as f64 / 2.0 * element_bytes as f64 / cfg.duration_s,
        drift_budget: drift_budget(cfg.margin_s, cfg.duration_s),
        min_separation_m: min_separation(cfg),
    })
}

impl ProtocolPlan {
    /// Same geometry with an explicit (even) round count; the duration
    /// becomes the time those rounds cover.
    pub fn with_rounds(&self, rounds: u64) -> Result<ProtocolPlan, PlanError> {
        let mut cfg = self.config;
        cfg.duration_s = (rounds + 1) as f64 * self.station_period_s / 2.0;
        build_plan(&self.name, &cfg, rounds, Some(&self.reduction_tail))
    }

    /// Same plan over a different field width (standard polynomial).
    pub fn with_bits(&self, bits: u32) -> Result<ProtocolPlan, PlanError> {
        let mut cfg = self.config;
        cfg.bits = bits;
        build_plan(&self.name, &cfg, self.rounds, None)
    }

    pub fn field_spec(&self) -> Result<Arc<FieldSpec>, PlanError> {
        Ok(FieldSpec::new(self.config.bits, &parse_tail_hex(&self.reduction_tail)?)?)
    }

    /// SHA-256 of the canonical JSON form; identifies the plan on the wire
    /// and in transcripts.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<ProtocolPlan, PlanError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlanError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProtocolPlan, PlanError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Round schedule in integer nanoseconds.
    pub fn schedule(&self) -> RoundSchedule {
        RoundSchedule::from_plan(self)
    }

    /// Checks the plan can actually be run: both inter-round gaps are
    /// positive and each answer window closes before the same station's
    /// next round.
    pub fn check_runnable(&self) -> Result<(), PlanError> {
        let s = self.schedule();
        for station in [Station::One, Station::Two] {
            if s.gap_ns[station.index()] == 0 {
                return Err(PlanError::InfeasibleGeometry(format!(
                    "rounds at station {station} would start no later than the previous round"
                )));
            }
            if s.deadline_ns[station.index()] >= s.period_ns() {
                return Err(PlanError::InfeasibleGeometry(format!(
                    "answer deadline at station {station} does not fit in the round period"
                )));
            }
        }
        Ok(())
    }

    pub fn table_row(&self, label: &str) -> TableRow {
        TableRow {
            name: self.name.clone(),
            separation_km: self.config.separation_m / 1e3,
            duration: label.to_string(),
            duration_s: self.config.duration_s,
            rounds_with_reveal: self.rounds + 1,
            epsilon: self.epsilon_linear,
            rate_bytes_per_s: self.rate_per_station,
            data_gb: self.bytes_total as f64 / 1e9,
        }
    }
}

/// Integer-nanosecond form of the round schedule. All derived values are
/// built from the rounded light time, deadlines and margin so that the
/// spacelike slack of consecutive rounds is exactly the margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub light_ns: u64,
    pub deadline_ns: [u64; 2],
    pub margin_ns: u64,
    /// Gap from the previous round's start to a round at station 1 / 2.
    pub gap_ns: [u64; 2],
}

impl RoundSchedule {
    pub fn from_plan(plan: &ProtocolPlan) -> Self {
        let ns = |s: f64| (s * 1e9).round() as u64;
        let light_ns = ns(plan.light_time_s);
        let deadline_ns = plan.config.answer_deadline_s.map(ns);
        let margin_ns = ns(plan.config.margin_s);
        let gap = |i: usize| light_ns.saturating_sub(deadline_ns[i] + margin_ns);
        RoundSchedule { light_ns, deadline_ns, margin_ns, gap_ns: [gap(0), gap(1)] }
    }

    /// Every duration multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        RoundSchedule {
            light_ns: self.light_ns * factor,
            deadline_ns: self.deadline_ns.map(|d| d * factor),
            margin_ns: self.margin_ns * factor,
            gap_ns: self.gap_ns.map(|g| g * factor),
        }
    }

    /// `t_Q` in nanoseconds.
    pub fn period_ns(&self) -> u64 {
        self.gap_ns[0] + self.gap_ns[1]
    }

    /// Start of round `k` (1-based) relative to round 1.
    pub fn start_ns(&self, k: u64) -> u64 {
        assert!(k >= 1, "rounds are numbered from 1");
        let into_station2 = k / 2;
        let into_station1 = (k - 1) - into_station2;
        into_station1 * self.gap_ns[0] + into_station2 * self.gap_ns[1]
    }

    pub fn deadline(&self, station: Station) -> u64 {
        self.deadline_ns[station.index()]
    }

    pub fn timing_policy(&self, scale_factor: u64) -> TimingPolicy {
        TimingPolicy { deadline_ns: self.deadline_ns, scale_factor }
    }
}

/// One line of the resource table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub separation_km: f64,
    pub duration: String,
    pub duration_s: f64,
    pub rounds_with_reveal: u64,
    pub epsilon: f64,
    pub rate_bytes_per_s: f64,
    pub data_gb: f64,
}

/// Renders rows with columns L, T, epsilon, r, Data.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>10} {:>6} {:>14} {:>10} {:>12} {:>14}",
        "case", "L [km]", "T", "epsilon", "r [Bps]", "Data [GB]", "rounds (m+1)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>10.1} {:>6} {:>14.2e} {:>10.3e} {:>12.4} {:>14.4e}",
            r.name,
            r.separation_km,
            r.duration,
            r.epsilon,
            r.rate_bytes_per_s,
            r.data_gb,
            r.rounds_with_reveal as f64
        );
    }
    out
}

/// A value given once for both stations or per station.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStation<T> {
    Both(T),
    Each([T; 2]),
}

impl<T: Clone> PerStation<T> {
    pub fn pair(&self) -> [T; 2] {
        match self {
            PerStation::Both(v) => [v.clone(), v.clone()],
            PerStation::Each(v) => v.clone(),
        }
    }
}

/// Planner input file (TOML). Times carry units: `ns`, `us`, `ms`, `s`,
/// `min`, `h`, `d`, `y`.
///
/// ```toml
/// name = "case1"
/// separation_m = 7000.0
/// alice_offset_m = 450.0
/// answer_deadline = "3us"
/// margin = "3.3us"
/// durations = ["24h", "1y"]
/// bits = 128
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub name: String,
    pub separation_m: f64,
    pub alice_offset_m: PerStation<f64>,
    pub answer_deadline: PerStation<String>,
    pub margin: String,
    pub durations: Vec<String>,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default)]
    pub reduction_tail: Option<String>,
    #[serde(default = "default_light_speed")]
    pub light_speed_m_per_s: f64,
    /// Days per year when a duration is given in `y`.
    #[serde(default = "default_year_days")]
    pub year_days: f64,
    /// Fixed round count instead of deriving it from the duration.
    #[serde(default)]
    pub rounds: Option<u64>,
}

fn default_bits() -> u32 {
    128
}

fn default_light_speed() -> f64 {
    SPEED_OF_LIGHT
}

fn default_year_days() -> f64 {
    365.0
}

impl PlannerConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PlanError> {
        let cfg: PlannerConfig = toml::from_str(s)?;
        if cfg.durations.is_empty() {
            return Err(PlanError::InvalidConfig("durations must list at least one entry".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Geometry for the `index`-th listed duration.
    pub fn spacetime(&self, index: usize) -> Result<SpacetimeConfig, PlanError> {
        let label = self
            .durations
            .get(index)
            .ok_or_else(|| PlanError::InvalidConfig(format!("no duration at index {index}")))?;
        let deadlines = self.answer_deadline.pair();
        let cfg = SpacetimeConfig {
            separation_m: self.separation_m,
            alice_offset_m: self.alice_offset_m.pair(),
            answer_deadline_s: [
                parse_duration(&deadlines[0], self.year_days)?,
                parse_duration(&deadlines[1], self.year_days)?,
            ],
            margin_s: parse_duration(&self.margin, self.year_days)?,
            light_speed_m_per_s: self.light_speed_m_per_s,
            duration_s: parse_duration(label, self.year_days)?,
            bits: self.bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plan for the `index`-th duration.
    pub fn plan(&self, index: usize) -> Result<ProtocolPlan, PlanError> {
        let cfg = self.spacetime(index)?;
        let plan = match self.rounds {
            Some(m) => {
                let base = build_plan(&self.name, &cfg, 2, self.reduction_tail.as_deref())?;
                base.with_rounds(m)?
            }
            None => {
                let m = compute_round_count(&cfg)?;
                if m < 2 {
                    return Err(PlanError::TooShort(cfg.duration_s));
                }
                build_plan(&self.name, &cfg, m, self.reduction_tail.as_deref())?
            }
        };
        Ok(plan)
    }

    /// One table row per listed duration.
    pub fn table(&self) -> Result<Vec<TableRow>, PlanError> {
        (0..self.durations.len()).map(|i| Ok(self.plan(i)?.table_row(&self.durations[i]))).collect()
    }
}

/// Parses `"<number><unit>"` into seconds; `y` uses `year_days`.
pub fn parse_duration(s: &str, year_days: f64) -> Result<f64, PlanError> {
    let t = s.trim();
    let split = t
        .find(|c: char| c.is_alphabetic() || c == 'µ')
        .ok_or_else(|| PlanError::BadDuration(s.to_string()))?;
    let (num, unit) = t.split_at(split);
    let value: f64 = num.trim().parse().map_err(|_| PlanError::BadDuration(s.to_string()))?;
    let scale = match unit.trim() {
        "ns" => 1e-9,
        "us" | "µs" => 1e-6,
        "ms" => 1e-3,
        "s" => 1.0,
        "min" => 60.0,
        "h" => 3_600.0,
        "d" => SECONDS_PER_DAY,
        "y" => year_days * SECONDS_PER_DAY,
        _ => return Err(PlanError::BadDuration(s.to_string())),
    };
    Ok(value * scale)
}

fn tail_hex(tail: &[u64]) -> String {
    let mut s = String::from("0x");
    let mut started = false;
    for &w in tail.iter().rev() {
        if started {
            let _ = write!(s, "{w:016x}");
        } else if w != 0 {
            let _ = write!(s, "{w:x}");
            started = true;
        }
    }
    if !started {
        s.push('0');
    }
    s
}

fn parse_tail_hex(s: &str) -> Result<Vec<u64>, PlanError> {
    let digits = s.trim().trim_start_matches("0x");
    let bad = || PlanError::InvalidConfig(format!("bad reduction polynomial tail {s:?}"));
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let bytes = digits.as_bytes();
    let mut limbs = Vec::new();
    let mut end = bytes.len();
    while end > 0 {
        let start = end.saturating_sub(16);
        let chunk = std::str::from_utf8(&bytes[start..end]).map_err(|_| bad())?;
        limbs.push(u64::from_str_radix(chunk, 16).map_err(|_| bad())?);
        end = start;
    }
    Ok(limbs)
}
