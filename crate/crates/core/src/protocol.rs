//! Agent state machines and the pure protocol logic.
//!
//! Rounds are numbered from 1. Odd rounds run between B1 and A1 (station 1),
//! even rounds between B2 and A2 (station 2). Round 1 commits the bit, rounds
//! 2..=m sustain it, and the reveal is round m + 1 with no challenge.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{batch_invert, random_element, FieldElement, FieldError, FieldSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommitBit {
    Zero,
    One,
}

impl CommitBit {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(CommitBit::Zero),
            1 => Some(CommitBit::One),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn flipped(self) -> Self {
        match self {
            CommitBit::Zero => CommitBit::One,
            CommitBit::One => CommitBit::Zero,
        }
    }
}

impl fmt::Display for CommitBit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// One of the two sites, each hosting one agent of Bob and one of Alice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Station {
    One,
    Two,
}

impl Station {
    /// Station that runs round `k` (odd rounds at station 1).
    pub fn for_round(k: u64) -> Station {
        if k % 2 == 1 {
            Station::One
        } else {
            Station::Two
        }
    }

    pub fn from_number(n: u8) -> Option<Station> {
        match n {
            1 => Some(Station::One),
            2 => Some(Station::Two),
            _ => None,
        }
    }

    /// 1 or 2.
    pub fn number(self) -> u8 {
        match self {
            Station::One => 1,
            Station::Two => 2,
        }
    }

    /// 0 or 1, for indexing per-station arrays.
    pub fn index(self) -> usize {
        self.number() as usize - 1
    }

    pub fn other(self) -> Station {
        match self {
            Station::One => Station::Two,
            Station::Two => Station::One,
        }
    }

    pub fn first_round(self) -> u64 {
        self.number() as u64
    }
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TapeRole {
    /// Alice's secrets a_1..a_m, shared by both of her agents.
    AliceSecrets,
    /// Bob's challenges x_1..x_m, shared by both of his agents.
    BobChallenges,
}

impl TapeRole {
    pub fn code(self) -> u8 {
        match self {
            TapeRole::AliceSecrets => 1,
            TapeRole::BobChallenges => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(TapeRole::AliceSecrets),
            2 => Some(TapeRole::BobChallenges),
            _ => None,
        }
    }
}

/// Why a run stopped before completing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbortReason {
    /// An answer missed its deadline.
    Timing,
    /// A message arrived out of order or for the wrong station.
    Sequencing,
    /// A peer disconnected or never connected.
    Connection,
    /// The agents disagree on the plan.
    Config,
    /// A tape ran out or is malformed.
    Tape,
}

impl AbortReason {
    pub fn code(self) -> u8 {
        match self {
            AbortReason::Timing => 1,
            AbortReason::Sequencing => 2,
            AbortReason::Connection => 3,
            AbortReason::Config => 4,
            AbortReason::Tape => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => AbortReason::Timing,
            2 => AbortReason::Sequencing,
            3 => AbortReason::Connection,
            4 => AbortReason::Config,
            5 => AbortReason::Tape,
            _ => return None,
        })
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AbortReason::Timing => "timing",
            AbortReason::Sequencing => "sequencing",
            AbortReason::Connection => "connection",
            AbortReason::Config => "config",
            AbortReason::Tape => "tape",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("round {got} is out of sequence at station {station} (expected {expected})")]
    Sequencing { station: Station, expected: u64, got: u64 },
    #[error("agent at station {0} has aborted")]
    AgentAborted(Station),
    #[error("reveal attempted before the agent's final round")]
    RevealTooEarly,
    #[error("commitment already revealed")]
    AlreadyRevealed,
    #[error("station {0} does not hold the reveal")]
    WrongRevealStation(Station),
    #[error("expected a {expected:?} tape, got {got:?}")]
    WrongTapeRole { expected: TapeRole, got: TapeRole },
    #[error("{role:?} tape has {got} elements, plan needs {expected}")]
    TapeLength { role: TapeRole, expected: u64, got: u64 },
    #[error("challenge tape element {0} is zero")]
    ZeroChallengeOnTape(u64),
    #[error("tape exhausted at element {0}")]
    TapeExhausted(u64),
    #[error("transcript aborted at round {round}: {reason}")]
    TranscriptAborted { reason: AbortReason, round: u64 },
    #[error("transcript incomplete: {0}")]
    Incomplete(String),
    #[error("challenge x_{0} is zero, the chain cannot be recovered past it")]
    ZeroChallenge(u64),
}

/// A pre-shared sequence of field elements, indexed from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tape {
    role: TapeRole,
    spec: Arc<FieldSpec>,
    elements: Vec<FieldElement>,
}

impl Tape {
    /// Challenge tapes must not contain zero.
    pub fn new(
        role: TapeRole,
        spec: Arc<FieldSpec>,
        elements: Vec<FieldElement>,
    ) -> Result<Self, ProtocolError> {
        for (i, e) in elements.iter().enumerate() {
            if **e.spec() != *spec {
                return Err(FieldError::FieldMismatch.into());
            }
            if role == TapeRole::BobChallenges && e.is_zero() {
                return Err(ProtocolError::ZeroChallengeOnTape(i as u64 + 1));
            }
        }
        Ok(Tape { role, spec, elements })
    }

    /// Fresh random tape; challenge tapes draw from the nonzero elements.
    pub fn random<R: RngCore + ?Sized>(role: TapeRole, spec: &Arc<FieldSpec>, len: u64, rng: &mut R) -> Self {
        let nonzero = role == TapeRole::BobChallenges;
        let elements = (0..len).map(|_| random_element(rng, spec, nonzero)).collect();
        Tape { role, spec: Arc::clone(spec), elements }
    }

    pub fn role(&self) -> TapeRole {
        self.role
    }

    pub fn spec(&self) -> &Arc<FieldSpec> {
        &self.spec
    }

    pub fn len(&self) -> u64 {
        self.elements.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[FieldElement] {
        &self.elements
    }

    /// Element `index`, counting from 1.
    pub fn get(&self, index: u64) -> Option<&FieldElement> {
        index.checked_sub(1).and_then(|i| self.elements.get(i as usize))
    }

    fn require(&self, index: u64) -> Result<&FieldElement, ProtocolError> {
        self.get(index).ok_or(ProtocolError::TapeExhausted(index))
    }

    fn expect_role(&self, role: TapeRole) -> Result<(), ProtocolError> {
        if self.role == role {
            Ok(())
        } else {
            Err(ProtocolError::WrongTapeRole { expected: role, got: self.role })
        }
    }

    /// Checks the tape covers `rounds` rounds.
    pub fn check_length(&self, rounds: u64) -> Result<(), ProtocolError> {
        if self.len() == rounds {
            Ok(())
        } else {
            Err(ProtocolError::TapeLength { role: self.role, expected: rounds, got: self.len() })
        }
    }
}

/// One challenge/answer exchange as recorded by Bob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundRecord {
    pub index: u64,
    pub station: Station,
    pub challenge: FieldElement,
    pub answer: FieldElement,
    /// Station-local clock, nanoseconds.
    pub challenge_issued_at: u64,
    pub answer_received_at: u64,
}

impl RoundRecord {
    pub fn response_time(&self) -> u64 {
        self.answer_received_at.saturating_sub(self.challenge_issued_at)
    }
}

/// What Alice's revealing agent sends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevealMessage {
    pub bit: CommitBit,
    pub final_secret: FieldElement,
}

/// The reveal as recorded by Bob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reveal {
    pub bit: CommitBit,
    pub final_secret: FieldElement,
    pub received_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranscriptStatus {
    Complete,
    Aborted { reason: AbortReason, round: u64 },
}

/// Answer deadlines as measured on Bob's clocks, plus the factor by which
/// the run stretched the plan's timescale (1 in simulation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPolicy {
    pub deadline_ns: [u64; 2],
    pub scale_factor: u64,
}

impl TimingPolicy {
    pub fn deadline(&self, station: Station) -> u64 {
        self.deadline_ns[station.index()]
    }
}

/// Full record of a run: every round plus the reveal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub plan_id: [u8; 32],
    pub spec: Arc<FieldSpec>,
    pub rounds_planned: u64,
    pub timing: TimingPolicy,
    pub rounds: Vec<RoundRecord>,
    pub reveal: Option<Reveal>,
    pub status: TranscriptStatus,
}

impl Transcript {
    pub fn new(plan_id: [u8; 32], spec: Arc<FieldSpec>, rounds_planned: u64, timing: TimingPolicy) -> Self {
        Transcript {
            plan_id,
            spec,
            rounds_planned,
            timing,
            rounds: Vec::new(),
            reveal: None,
            status: TranscriptStatus::Complete,
        }
    }

    /// Appends the next round; rejects gaps, repeats, and wrong stations.
    pub fn push_round(&mut self, record: RoundRecord) -> Result<(), ProtocolError> {
        let expected = self.rounds.len() as u64 + 1;
        if record.index != expected || record.station != Station::for_round(record.index) {
            return Err(ProtocolError::Sequencing { station: record.station, expected, got: record.index });
        }
        self.rounds.push(record);
        Ok(())
    }

    pub fn abort(&mut self, reason: AbortReason, round: u64) {
        if self.status == TranscriptStatus::Complete {
            self.status = TranscriptStatus::Aborted { reason, round };
        }
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self.status, TranscriptStatus::Aborted { .. })
    }

    /// Copy with all timestamps and the scale factor cleared, for comparing
    /// runs that differ only in timing.
    pub fn without_timing(&self) -> Transcript {
        let mut t = self.clone();
        t.timing = TimingPolicy { deadline_ns: [0; 2], scale_factor: 1 };
        for r in &mut t.rounds {
            r.challenge_issued_at = 0;
            r.answer_received_at = 0;
        }
        if let Some(reveal) = &mut t.reveal {
            reveal.received_at = 0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// The recovered a_1 does not open y_1 to the claimed bit.
    BitMismatch,
    /// An answer arrived after its station's deadline.
    Timing { round: u64 },
    /// A zero challenge makes the chain unrecoverable.
    ZeroChallenge { round: u64 },
    /// The run itself was aborted.
    Aborted { reason: AbortReason, round: u64 },
    /// Missing rounds or reveal.
    Incomplete(String),
    /// Records that violate the transcript structure.
    Malformed(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::BitMismatch => write!(f, "bit-mismatch"),
            RejectReason::Timing { round } => write!(f, "timing (round {round})"),
            RejectReason::ZeroChallenge { round } => write!(f, "zero-challenge (round {round})"),
            RejectReason::Aborted { reason, round } => {
                write!(f, "aborted: {reason} (round {round})")
            }
            RejectReason::Incomplete(s) => write!(f, "incomplete: {s}"),
            RejectReason::Malformed(s) => write!(f, "malformed: {s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept(CommitBit),
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept(bit) => write!(f, "accept({bit})"),
            Verdict::Reject(reason) => write!(f, "reject({reason})"),
        }
    }
}

/// y_1 = a_1 to commit 0, or x_1 + a_1 to commit 1.
pub fn alice_commit_answer(
    x1: &FieldElement,
    a1: &FieldElement,
    bit: CommitBit,
) -> Result<FieldElement, ProtocolError> {
    match bit {
        CommitBit::Zero => {
            if **x1.spec() != **a1.spec() {
                return Err(FieldError::FieldMismatch.into());
            }
            Ok(a1.clone())
        }
        CommitBit::One => Ok(x1.add(a1)?),
    }
}

/// y_k = x_k * a_{k-1} + a_k.
pub fn alice_sustain_answer(
    xk: &FieldElement,
    a_prev: &FieldElement,
    ak: &FieldElement,
) -> Result<FieldElement, ProtocolError> {
    Ok(xk.mul(a_prev)?.add(ak)?)
}

pub fn alice_reveal(bit: CommitBit, a_m: &FieldElement) -> RevealMessage {
    RevealMessage { bit, final_secret: a_m.clone() }
}

/// State of one of Alice's agents.
#[derive(Clone, Debug)]
pub struct AliceAgent {
    station: Station,
    rounds: u64,
    next_round: u64,
    aborted: bool,
    revealed: bool,
}

impl AliceAgent {
    pub fn new(station: Station, rounds: u64) -> Self {
        AliceAgent { station, rounds, next_round: station.first_round(), aborted: false, revealed: false }
    }

    pub fn station(&self) -> Station {
        self.station
    }

    /// Next round this agent expects to answer.
    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    /// Whether this agent sends the reveal (it hosts round m + 1).
    pub fn holds_reveal(&self) -> bool {
        Station::for_round(self.rounds + 1) == self.station
    }

    pub fn abort(&mut self) {
        self.aborted = true;
    }

    /// Answers challenge `k`. An out-of-order `k` aborts the agent.
    pub fn handle_challenge(
        &mut self,
        secrets: &Tape,
        bit: CommitBit,
        k: u64,
        challenge: &FieldElement,
    ) -> Result<FieldElement, ProtocolError> {
        if self.aborted {
            return Err(ProtocolError::AgentAborted(self.station));
        }
        secrets.expect_role(TapeRole::AliceSecrets)?;
        if k != self.next_round || k > self.rounds {
            self.aborted = true;
            return Err(ProtocolError::Sequencing {
                station: self.station,
                expected: self.next_round,
                got: k,
            });
        }
        let ak = secrets.require(k)?;
        let answer = if k == 1 {
            alice_commit_answer(challenge, ak, bit)?
        } else {
            alice_sustain_answer(challenge, secrets.require(k - 1)?, ak)?
        };
        self.next_round += 2;
        Ok(answer)
    }

    /// Opens the commitment. Only the agent hosting round m + 1 may reveal,
    /// once, after its own final round.
    pub fn reveal(&mut self, secrets: &Tape, bit: CommitBit) -> Result<RevealMessage, ProtocolError> {
        if self.aborted {
            return Err(ProtocolError::AgentAborted(self.station));
        }
        if !self.holds_reveal() {
            return Err(ProtocolError::WrongRevealStation(self.station));
        }
        if self.revealed {
            return Err(ProtocolError::AlreadyRevealed);
        }
        if self.next_round != self.rounds + 1 {
            return Err(ProtocolError::RevealTooEarly);
        }
        secrets.expect_role(TapeRole::AliceSecrets)?;
        let a_m = secrets.require(self.rounds)?;
        self.revealed = true;
        Ok(alice_reveal(bit, a_m))
    }
}

/// State of one of Bob's agents.
#[derive(Clone, Debug)]
pub struct BobAgent {
    station: Station,
    rounds: u64,
    next_round: u64,
    aborted: bool,
}

impl BobAgent {
    pub fn new(station: Station, rounds: u64) -> Self {
        BobAgent { station, rounds, next_round: station.first_round(), aborted: false }
    }

    pub fn station(&self) -> Station {
        self.station
    }

    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    /// Whether every round of this station has been issued.
    pub fn is_done(&self) -> bool {
        self.next_round > self.rounds
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    pub fn abort(&mut self) {
        self.aborted = true;
    }

    /// Issues challenge `k` from the tape. An out-of-order `k` aborts the agent.
    pub fn issue_challenge(&mut self, challenges: &Tape, k: u64) -> Result<FieldElement, ProtocolError> {
        if self.aborted {
            return Err(ProtocolError::AgentAborted(self.station));
        }
        challenges.expect_role(TapeRole::BobChallenges)?;
        if k != self.next_round || k > self.rounds {
            self.aborted = true;
            return Err(ProtocolError::Sequencing {
                station: self.station,
                expected: self.next_round,
                got: k,
            });
        }
        let x = challenges.require(k)?.clone();
        self.next_round += 2;
        Ok(x)
    }
}

fn check_complete(transcript: &Transcript) -> Result<&Reveal, ProtocolError> {
    if let TranscriptStatus::Aborted { reason, round } = transcript.status {
        return Err(ProtocolError::TranscriptAborted { reason, round });
    }
    let reveal = transcript.reveal.as_ref().ok_or_else(|| ProtocolError::Incomplete("no reveal".into()))?;
    if transcript.rounds_planned == 0 || transcript.rounds.len() as u64 != transcript.rounds_planned {
        return Err(ProtocolError::Incomplete(format!(
            "{} of {} rounds recorded",
            transcript.rounds.len(),
            transcript.rounds_planned
        )));
    }
    Ok(reveal)
}

/// One backward step: a_{k-1} = (y_k + a_k) * x_k^{-1}.
pub(crate) fn step_back(
    a_k: &FieldElement,
    record: &RoundRecord,
    challenge_inverse: &FieldElement,
) -> Result<FieldElement, FieldError> {
    record.answer.add(a_k)?.mul(challenge_inverse)
}

/// Recomputes a_1..a_m from the revealed a_m by walking the rounds backward.
pub fn recover_chain(transcript: &Transcript) -> Result<Vec<FieldElement>, ProtocolError> {
    let reveal = check_complete(transcript)?;
    let rounds = &transcript.rounds;
    if let Some(r) = rounds.iter().skip(1).find(|r| r.challenge.is_zero()) {
        return Err(ProtocolError::ZeroChallenge(r.index));
    }
    let challenges: Vec<FieldElement> = rounds.iter().skip(1).map(|r| r.challenge.clone()).collect();
    let inverses = batch_invert(&challenges)?;
    let mut chain = vec![reveal.final_secret.clone(); rounds.len()];
    for k in (2..=rounds.len()).rev() {
        chain[k - 2] = step_back(&chain[k - 1], &rounds[k - 1], &inverses[k - 2])?;
    }
    Ok(chain)
}

/// Structural and timing checks on one record.
pub(crate) fn check_record(
    record: &RoundRecord,
    expected_index: u64,
    spec: &FieldSpec,
    timing: &TimingPolicy,
) -> Result<(), RejectReason> {
    if record.index != expected_index {
        return Err(RejectReason::Malformed(format!(
            "round {} recorded where {expected_index} was expected",
            record.index
        )));
    }
    if record.station != Station::for_round(record.index) {
        return Err(RejectReason::Malformed(format!(
            "round {} recorded at station {}",
            record.index, record.station
        )));
    }
    if **record.challenge.spec() != *spec || **record.answer.spec() != *spec {
        return Err(RejectReason::Malformed(format!("round {} uses a different field", record.index)));
    }
    if record.answer_received_at < record.challenge_issued_at
        || record.response_time() > timing.deadline(record.station)
    {
        return Err(RejectReason::Timing { round: record.index });
    }
    Ok(())
}

/// Final check: does the recovered a_1 open y_1 to the claimed bit?
pub(crate) fn opens_to(first: &RoundRecord, a1: &FieldElement, bit: CommitBit) -> bool {
    matches!(alice_commit_answer(&first.challenge, a1, bit), Ok(y) if y == first.answer)
}

/// Bob's full verification of a finished run.
pub fn bob_verify(transcript: &Transcript) -> Verdict {
    let reveal = match check_complete(transcript) {
        Ok(reveal) => reveal,
        Err(ProtocolError::TranscriptAborted { reason, round }) => {
            return Verdict::Reject(RejectReason::Aborted { reason, round })
        }
        Err(e) => return Verdict::Reject(RejectReason::Incomplete(e.to_string())),
    };
    if **reveal.final_secret.spec() != *transcript.spec {
        return Verdict::Reject(RejectReason::Malformed("reveal uses a different field".into()));
    }
    for (i, record) in transcript.rounds.iter().enumerate() {
        if let Err(reason) = check_record(record, i as u64 + 1, &transcript.spec, &transcript.timing) {
            return Verdict::Reject(reason);
        }
    }
    let chain = match recover_chain(transcript) {
        Ok(chain) => chain,
        Err(ProtocolError::ZeroChallenge(round)) => {
            return Verdict::Reject(RejectReason::ZeroChallenge { round })
        }
        Err(e) => return Verdict::Reject(RejectReason::Malformed(e.to_string())),
    };
    if opens_to(&transcript.rounds[0], &chain[0], reveal.bit) {
        Verdict::Accept(reveal.bit)
    } else {
        Verdict::Reject(RejectReason::BitMismatch)
    }
}

/// Runs every round honestly through the four agent state machines with
/// synthetic timestamps (each answer 1 ns after its challenge). Useful for
/// harnesses that exercise the logic without a clock.
pub fn drive_honest(
    plan_id: [u8; 32],
    secrets: &Tape,
    challenges: &Tape,
    bit: CommitBit,
    timing: TimingPolicy,
) -> Result<Transcript, ProtocolError> {
    let rounds = challenges.len();
    secrets.check_length(rounds)?;
    let mut alice = [AliceAgent::new(Station::One, rounds), AliceAgent::new(Station::Two, rounds)];
    let mut bob = [BobAgent::new(Station::One, rounds), BobAgent::new(Station::Two, rounds)];
    let mut transcript = Transcript::new(plan_id, Arc::clone(challenges.spec()), rounds, timing);
    for k in 1..=rounds {
        let s = Station::for_round(k).index();
        let x = bob[s].issue_challenge(challenges, k)?;
        let y = alice[s].handle_challenge(secrets, bit, k, &x)?;
        transcript.push_round(RoundRecord {
            index: k,
            station: Station::for_round(k),
            challenge: x,
            answer: y,
            challenge_issued_at: 1_000 * k,
            answer_received_at: 1_000 * k + 1,
        })?;
    }
    let revealer = Station::for_round(rounds + 1).index();
    let msg = alice[revealer].reveal(secrets, bit)?;
    transcript.reveal =
        Some(Reveal { bit: msg.bit, final_secret: msg.final_secret, received_at: 1_000 * (rounds + 1) });
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const LOOSE: TimingPolicy = TimingPolicy { deadline_ns: [10, 10], scale_factor: 1 };

    fn tapes(spec: &Arc<FieldSpec>, m: u64, seed: u64) -> (Tape, Tape) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = Tape::random(TapeRole::AliceSecrets, spec, m, &mut rng);
        let x = Tape::random(TapeRole::BobChallenges, spec, m, &mut rng);
        (a, x)
    }

    fn honest(spec: &Arc<FieldSpec>, m: u64, seed: u64, bit: CommitBit) -> (Tape, Transcript) {
        let (a, x) = tapes(spec, m, seed);
        let t = drive_honest([0; 32], &a, &x, bit, LOOSE).unwrap();
        (a, t)
    }

    /// Independent forward model of the answers using plain integers at n = 8.
    fn gf256_mul(a: u8, b: u8) -> u8 {
        let (mut a, mut b, mut acc) = (a as u16, b, 0u16);
        while b != 0 {
            if b & 1 == 1 {
                acc ^= a;
            }
            a <<= 1;
            if a & 0x100 != 0 {
                a ^= 0x11b;
            }
            b >>= 1;
        }
        acc as u8
    }

    #[test]
    fn commit_answer_examples() {
        let f = FieldSpec::gf2_8();
        let (x, a) = (f.element(0x3c).unwrap(), f.element(0xa5).unwrap());
        assert_eq!(alice_commit_answer(&x, &a, CommitBit::Zero).unwrap(), a);
        assert_eq!(alice_commit_answer(&f.zero(), &a, CommitBit::One).unwrap(), a);
        assert!(alice_commit_answer(&a, &a, CommitBit::One).unwrap().is_zero());
        let other = FieldSpec::gf2_128().one();
        assert!(alice_commit_answer(&other, &a, CommitBit::Zero).is_err());
    }

    #[test]
    fn sustain_answer_examples() {
        let f = FieldSpec::gf2_8();
        let (x, a_prev, a) = (f.element(0x57).unwrap(), f.element(0x83).unwrap(), f.element(0x10).unwrap());
        assert_eq!(alice_sustain_answer(&x, &f.zero(), &a).unwrap(), a);
        assert_eq!(alice_sustain_answer(&f.one(), &a_prev, &a).unwrap(), a_prev.add(&a).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut b = [0u8; 3];
            rng.fill_bytes(&mut b);
            let [xv, pv, av] = b.map(|v| f.element(v as u128).unwrap());
            let y = alice_sustain_answer(&xv, &pv, &av).unwrap();
            assert_eq!(y.to_u128(), Some((gf256_mul(b[0], b[1]) ^ b[2]) as u128));
        }
    }

    #[test]
    fn recover_single_round() {
        let (a, t) = honest(&FieldSpec::gf2_8(), 1, 3, CommitBit::One);
        assert_eq!(recover_chain(&t).unwrap(), a.elements());
        assert_eq!(bob_verify(&t), Verdict::Accept(CommitBit::One));
    }

    #[test]
    fn recover_five_rounds_matches_tape() {
        let (a, t) = honest(&FieldSpec::gf2_8(), 5, 4, CommitBit::Zero);
        assert_eq!(recover_chain(&t).unwrap(), a.elements());
    }

    #[test]
    fn flipped_answer_bit_changes_recovered_a1() {
        let spec = FieldSpec::gf2_8();
        let (a, mut t) = honest(&spec, 5, 4, CommitBit::Zero);
        t.rounds[3].answer = t.rounds[3].answer.with_bit_flipped(2);
        assert_ne!(recover_chain(&t).unwrap()[0], a.elements()[0]);
    }

    #[test]
    fn honest_round_trips_accept() {
        for spec in [FieldSpec::gf2_8(), FieldSpec::gf2_128()] {
            for m in [1, 2, 9, 1000] {
                for seed in 0..3 {
                    for bit in [CommitBit::Zero, CommitBit::One] {
                        let (a, t) = honest(&spec, m, seed, bit);
                        assert_eq!(bob_verify(&t), Verdict::Accept(bit), "m={m} seed={seed}");
                        assert_eq!(recover_chain(&t).unwrap(), a.elements());
                        assert!(t.rounds.iter().all(|r| (r.station == Station::One) == (r.index % 2 == 1)));
                    }
                }
            }
        }
    }

    #[test]
    fn n8_m9_commit_one_and_tampered_reveal() {
        let (_, mut t) = honest(&FieldSpec::gf2_8(), 9, 17, CommitBit::One);
        assert_eq!(bob_verify(&t), Verdict::Accept(CommitBit::One));
        t.reveal.as_mut().unwrap().bit = CommitBit::Zero;
        assert_eq!(bob_verify(&t), Verdict::Reject(RejectReason::BitMismatch));
    }

    #[test]
    fn tampering_is_rejected() {
        // At n = 8 a tamper slips through with probability 2^-8; these seeds
        // are fixed and known to reject.
        let spec = FieldSpec::gf2_8();
        for seed in 0..20 {
            let (_, honest_t) = honest(&spec, 9, seed, CommitBit::One);
            let mut variants = Vec::new();
            let mut t = honest_t.clone();
            t.reveal.as_mut().unwrap().bit = CommitBit::Zero;
            variants.push(("bit", t));
            for k in 0..9 {
                let mut t = honest_t.clone();
                t.rounds[k].answer = t.rounds[k].answer.with_bit_flipped((seed % 8) as u32);
                variants.push(("answer", t));
            }
            for k in 1..9 {
                let mut t = honest_t.clone();
                let flipped = t.rounds[k].challenge.with_bit_flipped(((seed + 3) % 8) as u32);
                if flipped.is_zero() {
                    continue;
                }
                t.rounds[k].challenge = flipped;
                variants.push(("challenge", t));
            }
            let mut t = honest_t.clone();
            let r = t.reveal.as_mut().unwrap();
            r.final_secret = r.final_secret.with_bit_flipped(0);
            variants.push(("final secret", t));
            for (what, t) in variants {
                assert!(!bob_verify(&t).is_accept(), "seed {seed}: {what} tamper accepted");
            }
        }
    }

    #[test]
    fn late_answer_rejected_for_timing() {
        let (_, mut t) = honest(&FieldSpec::gf2_8(), 4, 2, CommitBit::Zero);
        t.rounds[2].answer_received_at = t.rounds[2].challenge_issued_at + 11;
        assert_eq!(bob_verify(&t), Verdict::Reject(RejectReason::Timing { round: 3 }));
    }

    #[test]
    fn zero_challenge_rejected_distinctly() {
        let spec = FieldSpec::gf2_8();
        let (_, mut t) = honest(&spec, 4, 2, CommitBit::Zero);
        t.rounds[2].challenge = spec.zero();
        assert_eq!(bob_verify(&t), Verdict::Reject(RejectReason::ZeroChallenge { round: 3 }));
        assert_eq!(recover_chain(&t).unwrap_err(), ProtocolError::ZeroChallenge(3));
    }

    #[test]
    fn aborted_and_incomplete_transcripts_rejected() {
        let (_, mut t) = honest(&FieldSpec::gf2_8(), 4, 2, CommitBit::Zero);
        let mut missing = t.clone();
        missing.rounds.pop();
        assert!(matches!(bob_verify(&missing), Verdict::Reject(RejectReason::Incomplete(_))));
        t.abort(AbortReason::Timing, 3);
        assert_eq!(
            bob_verify(&t),
            Verdict::Reject(RejectReason::Aborted { reason: AbortReason::Timing, round: 3 })
        );
        assert!(matches!(recover_chain(&t), Err(ProtocolError::TranscriptAborted { .. })));
    }

    #[test]
    fn y1_is_a_bijection_of_a1() {
        let f = FieldSpec::gf2_8();
        for x1 in [0x01u128, 0x53, 0xff] {
            let x1 = f.element(x1).unwrap();
            for bit in [CommitBit::Zero, CommitBit::One] {
                let mut seen = [false; 256];
                for a1 in 0..256u128 {
                    let y = alice_commit_answer(&x1, &f.element(a1).unwrap(), bit).unwrap();
                    let idx = y.to_u128().unwrap() as usize;
                    assert!(!seen[idx]);
                    seen[idx] = true;
                }
            }
        }
    }

    #[test]
    fn agent_sequencing_guards() {
        let spec = FieldSpec::gf2_8();
        let (a, x) = tapes(&spec, 4, 9);
        let mut bob1 = BobAgent::new(Station::One, 4);
        assert_eq!(bob1.issue_challenge(&x, 1).unwrap(), x.elements()[0]);
        let mut bob1b = BobAgent::new(Station::One, 4);
        assert!(matches!(bob1b.issue_challenge(&x, 2), Err(ProtocolError::Sequencing { .. })));
        assert!(bob1b.is_aborted());
        assert_eq!(bob1b.issue_challenge(&x, 1).unwrap_err(), ProtocolError::AgentAborted(Station::One));

        let mut alice1 = AliceAgent::new(Station::One, 4);
        let x1 = x.get(1).unwrap().clone();
        assert!(matches!(
            alice1.handle_challenge(&a, CommitBit::One, 2, &x1),
            Err(ProtocolError::Sequencing { expected: 1, got: 2, .. })
        ));
        assert!(alice1.is_aborted());

        // Same round twice is refused.
        let mut alice1 = AliceAgent::new(Station::One, 4);
        alice1.handle_challenge(&a, CommitBit::One, 1, &x1).unwrap();
        assert!(alice1.handle_challenge(&a, CommitBit::One, 1, &x1).is_err());

        // Wrong tape role.
        let mut alice2 = AliceAgent::new(Station::Two, 4);
        assert!(matches!(
            alice2.handle_challenge(&x, CommitBit::One, 2, &x1),
            Err(ProtocolError::WrongTapeRole { .. })
        ));
    }

    #[test]
    fn reveal_guards() {
        let spec = FieldSpec::gf2_8();
        let (a, x) = tapes(&spec, 4, 10);
        let mut alice1 = AliceAgent::new(Station::One, 4);
        assert_eq!(alice1.reveal(&a, CommitBit::Zero).unwrap_err(), ProtocolError::RevealTooEarly);
        alice1.handle_challenge(&a, CommitBit::Zero, 1, x.get(1).unwrap()).unwrap();
        alice1.handle_challenge(&a, CommitBit::Zero, 3, x.get(3).unwrap()).unwrap();
        let msg = alice1.reveal(&a, CommitBit::Zero).unwrap();
        assert_eq!(msg, alice_reveal(CommitBit::Zero, a.get(4).unwrap()));
        assert_eq!(alice1.reveal(&a, CommitBit::Zero).unwrap_err(), ProtocolError::AlreadyRevealed);
        let mut alice2 = AliceAgent::new(Station::Two, 4);
        assert_eq!(
            alice2.reveal(&a, CommitBit::Zero).unwrap_err(),
            ProtocolError::WrongRevealStation(Station::Two)
        );
    }

    #[test]
    fn tape_validation() {
        let spec = FieldSpec::gf2_8();
        let elems = vec![spec.one(), spec.zero()];
        assert_eq!(
            Tape::new(TapeRole::BobChallenges, Arc::clone(&spec), elems.clone()).unwrap_err(),
            ProtocolError::ZeroChallengeOnTape(2)
        );
        let tape = Tape::new(TapeRole::AliceSecrets, Arc::clone(&spec), elems).unwrap();
        assert!(tape.check_length(3).is_err());
        assert_eq!(tape.get(0), None);
        assert_eq!(tape.get(2), Some(&spec.zero()));
    }

    #[test]
    fn push_round_enforces_order() {
        let spec = FieldSpec::gf2_8();
        let mut t = Transcript::new([0; 32], Arc::clone(&spec), 3, LOOSE);
        let rec = |index| RoundRecord {
            index,
            station: Station::for_round(index),
            challenge: spec.one(),
            answer: spec.one(),
            challenge_issued_at: 0,
            answer_received_at: 0,
        };
        assert!(t.push_round(rec(2)).is_err());
        t.push_round(rec(1)).unwrap();
        let mut wrong_station = rec(2);
        wrong_station.station = Station::One;
        assert!(t.push_round(wrong_station).is_err());
        t.push_round(rec(2)).unwrap();
    }
}
