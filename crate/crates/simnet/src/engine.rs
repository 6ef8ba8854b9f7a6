//! The event loop.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use relbc_core::field::FieldElement;
use relbc_core::planner::{PlanError, ProtocolPlan, RoundSchedule};
use relbc_core::protocol::{
    AbortReason, CommitBit, ProtocolError, Reveal, RevealMessage, RoundRecord, Station, Tape, TapeRole,
    TimingPolicy, Transcript, TranscriptStatus,
};
use relbc_core::store::{TapeElements, TapeSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Action, Adversary, AliceSide, Context, CovertMessage, Strategy};
use crate::clock::ClockModel;

/// Global time of the scheduled start of round 1, when the clocks were
/// synchronised. Leaves room for clocks that run ahead.
pub const EPOCH_NS: u64 = 1_000_000_000;

/// Margin-violation examples kept in a report.
const MAX_EXAMPLES: usize = 32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(#[from] PlanError),
    #[error("malformed placement: {0}")]
    MalformedPlacement(String),
    #[error("clock offset {0} s is outside +-0.5 s")]
    ClockOffset(f64),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Positions along the B1-B2 axis, metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placements {
    pub bob_m: [f64; 2],
    pub alice_m: [f64; 2],
}

impl Placements {
    /// Alice's agents at distances `d` from their Bob, on the inner side.
    pub fn at_distances(plan: &ProtocolPlan, d: [f64; 2]) -> Self {
        let l = plan.config.separation_m;
        Placements { bob_m: [0.0, l], alice_m: [d[0], l - d[1]] }
    }

    /// Honest placement: each agent well inside both its distance allowance
    /// and its answer deadline (a quarter of the deadline's light range).
    pub fn honest(plan: &ProtocolPlan) -> Self {
        let c = plan.config.light_speed_m_per_s;
        let d = [0, 1].map(|i| plan.config.alice_offset_m[i].min(c * plan.config.answer_deadline_s[i] / 4.0));
        Self::at_distances(plan, d)
    }

    pub fn alice_distance(&self, station: Station) -> f64 {
        let i = station.index();
        (self.alice_m[i] - self.bob_m[i]).abs()
    }

    pub fn within_allowance(&self, plan: &ProtocolPlan) -> [bool; 2] {
        [Station::One, Station::Two].map(|s| self.alice_distance(s) <= plan.config.alice_offset_m[s.index()])
    }

    pub fn validate(&self, plan: &ProtocolPlan) -> Result<(), SimError> {
        if self.bob_m.iter().chain(&self.alice_m).any(|p| !p.is_finite()) {
            return Err(SimError::MalformedPlacement("non-finite position".into()));
        }
        let l = plan.config.separation_m;
        if (self.bob_m[1] - self.bob_m[0] - l).abs() > 1e-6 * l {
            return Err(SimError::MalformedPlacement(format!(
                "Bob's stations are {} m apart, plan says {l} m",
                self.bob_m[1] - self.bob_m[0]
            )));
        }
        Ok(())
    }
}

/// One-way light delay in whole nanoseconds, rounded up.
pub fn light_delay_ns(a_m: f64, b_m: f64, c: f64) -> u64 {
    let ns = (a_m - b_m).abs() / c * 1e9;
    // The small allowance keeps exact products like 3000.0000000001 at 3000.
    (ns - 1e-6).ceil().max(0.0) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub round: u64,
    pub station: u8,
    pub issued_global_ns: u64,
    pub issued_local_ns: u64,
    /// Actual minus scheduled start in global time.
    pub start_error_ns: i64,
    pub answer_local_ns: Option<u64>,
    pub response_ns: Option<u64>,
    pub deadline_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateArrival {
    pub round: u64,
    /// How far past the deadline the answer arrived.
    pub excess_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginViolation {
    pub round: u64,
    pub station: u8,
    pub start_error_ns: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub plan_hash: String,
    pub strategy: String,
    pub seed: u64,
    pub bit: u8,
    pub rounds_planned: u64,
    pub rounds_recorded: u64,
    pub status: TranscriptStatus,
    pub placements: Placements,
    pub clocks: [ClockModel; 2],
    pub margin_ns: u64,
    pub rounds: Vec<RoundTiming>,
    pub late_arrivals: Vec<LateArrival>,
    pub margin_violation_count: u64,
    pub margin_violations: Vec<MarginViolation>,
    pub discipline_violations: Vec<String>,
    pub events_processed: u64,
    pub end_time_ns: u64,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn aborted_round(&self) -> Option<u64> {
        match self.status {
            TranscriptStatus::Aborted { round, .. } => Some(round),
            TranscriptStatus::Complete => None,
        }
    }
}

pub struct SimOutcome {
    pub transcript: Transcript,
    pub report: SimReport,
}

#[derive(Debug)]
enum Event {
    RoundStart { k: u64 },
    DeliverChallenge { k: u64, x: FieldElement },
    DeliverAnswer { k: u64, y: FieldElement },
    DeadlineExpiry { k: u64 },
    DeliverCovert { to: Station, msg: CovertMessage },
    SendReveal,
    DeliverReveal { msg: RevealMessage },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Scheduled>,
    now: u64,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: u64, event: Event) {
        assert!(time >= self.now, "event scheduled at {time} ns, before now ({} ns)", self.now);
        self.seq += 1;
        self.heap.push(Scheduled { time, seq: self.seq, event });
    }

    fn pop(&mut self) -> Option<(u64, Event)> {
        let s = self.heap.pop()?;
        assert!(s.time >= self.now, "event queue went backwards");
        self.now = s.time;
        Some((s.time, s.event))
    }
}

/// Generates the seeded tapes and runs `strategy`.
pub fn run_simulation(
    plan: &ProtocolPlan,
    placements: &Placements,
    clocks: [ClockModel; 2],
    strategy: &Strategy,
    seed: u64,
    bit: CommitBit,
) -> Result<SimOutcome, SimError> {
    let spec = plan.field_spec()?;
    let tape = |role| {
        let mut elements = TapeElements::new(role, &spec, TapeSource::Seeded(seed));
        let v = (0..plan.rounds).map(|_| elements.next_element()).collect();
        Tape::new(role, spec.clone(), v)
    };
    let secrets = tape(TapeRole::AliceSecrets)?;
    let challenges = tape(TapeRole::BobChallenges)?;
    let mut placements = *placements;
    if let Strategy::PlacementCheat { station, distance_m } = strategy {
        let s = Station::from_number(*station)
            .ok_or_else(|| SimError::MalformedPlacement(format!("no station {station}")))?;
        let i = s.index();
        let inward = if i == 0 { 1.0 } else { -1.0 };
        placements.alice_m[i] = placements.bob_m[i] + inward * distance_m;
    }
    let mut adversary = strategy.adversary();
    let mut outcome =
        run_with_adversary(plan, &placements, clocks, adversary.as_mut(), secrets, &challenges, bit)?;
    outcome.report.strategy = strategy.to_string();
    outcome.report.seed = seed;
    Ok(outcome)
}

/// Runs the schedule with explicit tapes and any [`Adversary`].
pub fn run_with_adversary(
    plan: &ProtocolPlan,
    placements: &Placements,
    clocks: [ClockModel; 2],
    adversary: &mut dyn Adversary,
    secrets: Tape,
    challenges: &Tape,
    bit: CommitBit,
) -> Result<SimOutcome, SimError> {
    plan.check_runnable()?;
    placements.validate(plan)?;
    for c in &clocks {
        if c.offset_s.abs() >= 0.5 {
            return Err(SimError::ClockOffset(c.offset_s));
        }
    }
    let m = plan.rounds;
    secrets.check_length(m)?;
    challenges.check_length(m)?;
    let spec = plan.field_spec()?;
    let schedule = plan.schedule();
    let c = plan.config.light_speed_m_per_s;
    let bob_delay = [0, 1].map(|i| light_delay_ns(placements.alice_m[i], placements.bob_m[i], c));
    let covert_delay = light_delay_ns(placements.alice_m[0], placements.alice_m[1], c);

    let mut sim = Sim {
        schedule,
        clocks,
        bob_delay,
        covert_delay,
        queue: Queue { heap: BinaryHeap::new(), now: 0, seq: 0 },
        alice: AliceSide::new(secrets, bit),
        challenges,
        issued_local: vec![None; m as usize + 1],
        answers: vec![None; m as usize + 1],
        timings: Vec::with_capacity(m as usize),
        late: Vec::new(),
        margin_count: 0,
        margin_examples: Vec::new(),
        abort: None,
        reveal: None,
        events: 0,
    };
    // Each station schedules its own next round, so clock differences
    // between stations never reorder the queue.
    for k in [1, 2] {
        let t = sim.start_global(k);
        sim.queue.push(t, Event::RoundStart { k });
    }
    let reveal_at = sim.nominal_global(m + 1);
    sim.queue.push(reveal_at, Event::SendReveal);

    while let Some((now, event)) = sim.queue.pop() {
        sim.events += 1;
        sim.handle(now, event, adversary)?;
    }

    let mut transcript = Transcript::new(
        plan.hash(),
        spec,
        m,
        TimingPolicy { deadline_ns: schedule.deadline_ns, scale_factor: 1 },
    );
    let limit = sim.abort.map_or(m, |(_, round)| round - 1);
    for k in 1..=limit {
        let (y, received) = sim.answers[k as usize].clone().expect("answered before the limit");
        transcript.push_round(RoundRecord {
            index: k,
            station: Station::for_round(k),
            challenge: sim.challenges.get(k).expect("tape covers plan").clone(),
            answer: y,
            challenge_issued_at: sim.issued_local[k as usize].expect("issued"),
            answer_received_at: received,
        })?;
    }
    match sim.abort {
        Some((reason, round)) => transcript.abort(reason, round),
        None => transcript.reveal = sim.reveal.take(),
    }
    let mut discipline_violations = Vec::new();
    for (i, c) in clocks.iter().enumerate() {
        if let Some(v) = c.discipline_violation() {
            discipline_violations.push(format!("station {}: {v}", i + 1));
        }
    }
    let report = SimReport {
        plan_hash: plan.hash_hex(),
        strategy: String::from("custom"),
        seed: 0,
        bit: bit.as_u8(),
        rounds_planned: m,
        rounds_recorded: transcript.rounds.len() as u64,
        status: transcript.status,
        placements: *placements,
        clocks,
        margin_ns: schedule.margin_ns,
        rounds: sim.timings,
        late_arrivals: sim.late,
        margin_violation_count: sim.margin_count,
        margin_violations: sim.margin_examples,
        discipline_violations,
        events_processed: sim.events,
        end_time_ns: sim.queue.now,
    };
    Ok(SimOutcome { transcript, report })
}

struct Sim<'a> {
    schedule: RoundSchedule,
    clocks: [ClockModel; 2],
    bob_delay: [u64; 2],
    covert_delay: u64,
    queue: Queue,
    alice: AliceSide,
    challenges: &'a Tape,
    issued_local: Vec<Option<u64>>,
    answers: Vec<Option<(FieldElement, u64)>>,
    timings: Vec<RoundTiming>,
    late: Vec<LateArrival>,
    margin_count: u64,
    margin_examples: Vec<MarginViolation>,
    abort: Option<(AbortReason, u64)>,
    reveal: Option<Reveal>,
    events: u64,
}

impl Sim<'_> {
    /// Scheduled start of round `k` on an ideal clock.
    fn nominal_global(&self, k: u64) -> u64 {
        EPOCH_NS + self.schedule.start_ns(k)
    }

    /// Global time at which the station's clock reaches round `k`'s start.
    fn start_global(&self, k: u64) -> u64 {
        let s = Station::for_round(k).index();
        self.global_at(s, self.nominal_global(k))
    }

    /// Station clock reading at global time `t`.
    fn local(&self, s: usize, t: u64) -> u64 {
        let rel = self.clocks[s].to_local(t as i64 - EPOCH_NS as i64);
        (EPOCH_NS as i64 + rel).max(0) as u64
    }

    /// Global time at which the station clock reads `local`.
    fn global_at(&self, s: usize, local: u64) -> u64 {
        let rel = self.clocks[s].to_reference(local as i64 - EPOCH_NS as i64);
        (EPOCH_NS as i64 + rel).max(0) as u64
    }

    fn context(&self, now: u64, station: Station) -> Context {
        Context {
            now_ns: now,
            station,
            deadline_ns: self.schedule.deadline(station),
            bob_delay_ns: self.bob_delay[station.index()],
            covert_delay_ns: self.covert_delay,
        }
    }

    fn record_abort(&mut self, reason: AbortReason, round: u64) {
        match self.abort {
            Some((_, r)) if r <= round => {}
            _ => self.abort = Some((reason, round)),
        }
    }

    fn handle(&mut self, now: u64, event: Event, adversary: &mut dyn Adversary) -> Result<(), SimError> {
        match event {
            Event::RoundStart { k } => {
                if self.abort.is_some() {
                    return Ok(());
                }
                let station = Station::for_round(k);
                let s = station.index();
                let local = self.local(s, now);
                let x = self.challenges.get(k).ok_or(ProtocolError::TapeExhausted(k))?.clone();
                self.issued_local[k as usize] = Some(local);
                let start_error = now as i64 - self.nominal_global(k) as i64;
                if start_error.unsigned_abs() > self.schedule.margin_ns {
                    self.margin_count += 1;
                    if self.margin_examples.len() < MAX_EXAMPLES {
                        self.margin_examples.push(MarginViolation {
                            round: k,
                            station: station.number(),
                            start_error_ns: start_error,
                        });
                    }
                }
                self.timings.push(RoundTiming {
                    round: k,
                    station: station.number(),
                    issued_global_ns: now,
                    issued_local_ns: local,
                    start_error_ns: start_error,
                    answer_local_ns: None,
                    response_ns: None,
                    deadline_ns: self.schedule.deadline(station),
                });
                self.queue.push(now + self.bob_delay[s], Event::DeliverChallenge { k, x });
                let expiry_local = local + self.schedule.deadline(station) + 1;
                let expiry = self.global_at(s, expiry_local).max(now);
                self.queue.push(expiry, Event::DeadlineExpiry { k });
                if k + 2 <= self.challenges.len() {
                    let next = self.start_global(k + 2).max(now);
                    self.queue.push(next, Event::RoundStart { k: k + 2 });
                }
            }
            Event::DeliverChallenge { k, x } => {
                let station = Station::for_round(k);
                let ctx = self.context(now, station);
                let actions = adversary.on_challenge(&mut self.alice, &ctx, k, &x);
                self.apply(now, station, actions);
            }
            Event::DeliverCovert { to, msg } => {
                let ctx = self.context(now, to);
                let actions = adversary.on_covert(&mut self.alice, &ctx, &msg);
                self.apply(now, to, actions);
            }
            Event::DeliverAnswer { k, y } => {
                let Some(issued) = self.issued_local[k as usize] else {
                    return Ok(());
                };
                if self.answers[k as usize].is_some() {
                    return Ok(());
                }
                let station = Station::for_round(k);
                let local = self.local(station.index(), now);
                let response = local.saturating_sub(issued);
                let deadline = self.schedule.deadline(station);
                if response > deadline {
                    self.late.push(LateArrival { round: k, excess_ns: response - deadline });
                    self.record_abort(AbortReason::Timing, k);
                }
                self.answers[k as usize] = Some((y, local));
                if let Some(t) = self.timings.iter_mut().rev().find(|t| t.round == k) {
                    t.answer_local_ns = Some(local);
                    t.response_ns = Some(response);
                }
            }
            Event::DeadlineExpiry { k } => {
                if self.answers[k as usize].is_none() {
                    self.record_abort(AbortReason::Timing, k);
                }
            }
            Event::SendReveal => {
                let station = Station::for_round(self.challenges.len() + 1);
                if let Some(msg) = adversary.reveal(&mut self.alice) {
                    let at = now + self.bob_delay[station.index()];
                    self.queue.push(at, Event::DeliverReveal { msg });
                }
            }
            Event::DeliverReveal { msg } => {
                let station = Station::for_round(self.challenges.len() + 1);
                self.reveal = Some(Reveal {
                    bit: msg.bit,
                    final_secret: msg.final_secret,
                    received_at: self.local(station.index(), now),
                });
            }
        }
        Ok(())
    }

    fn apply(&mut self, now: u64, from: Station, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Answer { round, answer, after_ns } => {
                    // Answers go to the Bob colocated with the answering agent.
                    if Station::for_round(round) != from || round as usize >= self.answers.len() {
                        continue;
                    }
                    let at = now + after_ns + self.bob_delay[from.index()];
                    self.queue.push(at, Event::DeliverAnswer { k: round, y: answer });
                }
                Action::Covert { round, payload, after_ns } => {
                    let at = now + after_ns + self.covert_delay;
                    let msg = CovertMessage { from, round, payload };
                    self.queue.push(at, Event::DeliverCovert { to: from.other(), msg });
                }
            }
        }
    }
}
