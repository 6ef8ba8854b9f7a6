//! Post-hoc check that no answer could have been influenced by the other
//! station's previous challenge.
//!
//! For consecutive rounds k (station s) and k + 1 (the other station), the
//! latest moment the answer to k + 1 can be produced is its deadline or its
//! recorded arrival, whichever is later. A signal carrying x_k leaves B_s at
//! `issued(k)` and reaches B_{s'} no earlier than `issued(k) + t_L`, and it
//! gains nothing by passing through Alice's agents on the way, however far
//! from their stations they sit. The pair is safe when
//!
//! ```text
//! slack(k) = issued(k) + t_L - max(issued(k+1) + tau_{s'}, received(k+1)) >= 0
//! ```
//!
//! An honest schedule gives `slack = t_M` for every pair. Both stations'
//! timestamps are taken to be on a common time base, and all plan times are
//! multiplied by the transcript's scale factor.

use relbc_core::planner::ProtocolPlan;
use relbc_core::protocol::{Station, Transcript};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Placements;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("audit incomplete: {0}")]
    Incomplete(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuditViolation {
    /// The answer arrived after its deadline.
    LateAnswer { round: u64, excess_ns: u64 },
    /// Round `round`'s answer may depend on round `round - 1`'s challenge.
    NotSpacelike { round: u64, slack_ns: i64 },
}

impl AuditViolation {
    pub fn round(&self) -> u64 {
        match self {
            AuditViolation::LateAnswer { round, .. } | AuditViolation::NotSpacelike { round, .. } => *round,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pairs_checked: u64,
    /// Smallest slack over all pairs and the later round of that pair.
    pub worst_slack_ns: Option<i64>,
    pub worst_round: Option<u64>,
    pub margin_ns: u64,
    pub violations: Vec<AuditViolation>,
    /// Alice's agents beyond their distance allowance. Informational: the
    /// timing checks above do not rely on placement.
    pub outside_allowance: Vec<u8>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn no_signaling_audit(
    transcript: &Transcript,
    plan: &ProtocolPlan,
    placements: &Placements,
) -> Result<AuditReport, AuditError> {
    if transcript.rounds.is_empty() {
        return Err(AuditError::Incomplete("no rounds recorded".into()));
    }
    if transcript.rounds.iter().any(|r| r.challenge_issued_at == 0 && r.answer_received_at == 0) {
        return Err(AuditError::Incomplete("transcript carries no timestamps".into()));
    }
    let scale = transcript.timing.scale_factor.max(1);
    let schedule = plan.schedule().scaled(scale);
    let light = schedule.light_ns as i64;
    let deadline = |s: Station| transcript.timing.deadline(s) as i64;

    let mut violations = Vec::new();
    for r in &transcript.rounds {
        let response = r.answer_received_at as i64 - r.challenge_issued_at as i64;
        if response > deadline(r.station) {
            violations.push(AuditViolation::LateAnswer {
                round: r.index,
                excess_ns: (response - deadline(r.station)) as u64,
            });
        }
    }
    let mut worst: Option<(i64, u64)> = None;
    for pair in transcript.rounds.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let latest_answer =
            (next.challenge_issued_at as i64 + deadline(next.station)).max(next.answer_received_at as i64);
        let slack = prev.challenge_issued_at as i64 + light - latest_answer;
        if slack < 0 {
            violations.push(AuditViolation::NotSpacelike { round: next.index, slack_ns: slack });
        }
        if worst.is_none_or(|(w, _)| slack < w) {
            worst = Some((slack, next.index));
        }
    }
    violations.sort_by_key(|v| v.round());
    let outside_allowance = placements
        .within_allowance(plan)
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i as u8 + 1)
        .collect();
    Ok(AuditReport {
        pairs_checked: transcript.rounds.len().saturating_sub(1) as u64,
        worst_slack_ns: worst.map(|w| w.0),
        worst_round: worst.map(|w| w.1),
        margin_ns: schedule.margin_ns,
        violations,
        outside_allowance,
    })
}
