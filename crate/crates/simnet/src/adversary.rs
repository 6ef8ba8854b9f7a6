//! Alice's side of the simulation: honest behaviour and cheating strategies.
//!
//! Strategies see only what Alice legitimately receives (challenges and her
//! own covert messages) and act by scheduling messages. They hold Alice's
//! tape but never Bob's.

use std::collections::HashMap;
use std::fmt;

use relbc_core::field::FieldElement;
use relbc_core::protocol::{AliceAgent, CommitBit, ProtocolError, RevealMessage, Station, Tape};
use serde::{Deserialize, Serialize};

/// Alice's secrets and agent state machines.
pub struct AliceSide {
    pub secrets: Tape,
    pub bit: CommitBit,
    agents: [AliceAgent; 2],
}

impl AliceSide {
    pub fn new(secrets: Tape, bit: CommitBit) -> Self {
        let rounds = secrets.len();
        AliceSide {
            secrets,
            bit,
            agents: [AliceAgent::new(Station::One, rounds), AliceAgent::new(Station::Two, rounds)],
        }
    }

    pub fn honest_answer(&mut self, k: u64, x: &FieldElement) -> Result<FieldElement, ProtocolError> {
        let agent = &mut self.agents[Station::for_round(k).index()];
        agent.handle_challenge(&self.secrets, self.bit, k, x)
    }

    pub fn honest_reveal(&mut self) -> Result<RevealMessage, ProtocolError> {
        let revealer = Station::for_round(self.secrets.len() + 1);
        self.agents[revealer.index()].reveal(&self.secrets, self.bit)
    }
}

/// What an Alice agent knows when something reaches it.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub now_ns: u64,
    pub station: Station,
    /// Bob's answer deadline at this station.
    pub deadline_ns: u64,
    /// One-way light delay between this agent and its Bob.
    pub bob_delay_ns: u64,
    /// One-way light delay between Alice's two agents.
    pub covert_delay_ns: u64,
}

/// Message between Alice's agents. Travels at exactly c.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovertMessage {
    pub from: Station,
    pub round: u64,
    pub payload: FieldElement,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Send the answer to round `round` after `after_ns`.
    Answer { round: u64, answer: FieldElement, after_ns: u64 },
    /// Send a covert message to the other agent after `after_ns`.
    Covert { round: u64, payload: FieldElement, after_ns: u64 },
}

/// Event hooks of an Alice strategy. Returning no action means waiting.
pub trait Adversary {
    fn on_challenge(
        &mut self,
        alice: &mut AliceSide,
        ctx: &Context,
        round: u64,
        challenge: &FieldElement,
    ) -> Vec<Action>;

    fn on_covert(&mut self, _alice: &mut AliceSide, _ctx: &Context, _msg: &CovertMessage) -> Vec<Action> {
        Vec::new()
    }

    fn reveal(&mut self, alice: &mut AliceSide) -> Option<RevealMessage> {
        alice.honest_reveal().ok()
    }
}

/// Built-in strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    Honest,
    /// Honest answers, but the answer to `round` is held back so it reaches
    /// Bob `offset_ns` after the deadline (negative: before).
    LateDecision {
        round: u64,
        offset_ns: i64,
    },
    /// Each agent forwards its challenges to the other agent and waits for
    /// the other station's previous challenge before answering.
    Relay,
    /// Honest rounds, then the opposite bit is revealed.
    WrongBitReveal,
    /// Honest answers from an agent placed `distance_m` from its Bob.
    PlacementCheat {
        station: u8,
        distance_m: f64,
    },
}

impl Strategy {
    pub fn adversary(&self) -> Box<dyn Adversary> {
        match self {
            Strategy::Honest | Strategy::PlacementCheat { .. } => Box::new(Honest),
            Strategy::LateDecision { round, offset_ns } => {
                Box::new(LateDecision { round: *round, offset_ns: *offset_ns })
            }
            Strategy::Relay => Box::new(Relay::default()),
            Strategy::WrongBitReveal => Box::new(WrongBitReveal),
        }
    }

    /// Parses `honest`, `relay`, `wrong-bit-reveal`,
    /// `late-decision[:round[:offset_ns]]` or
    /// `placement-cheat[:station[:distance_m]]`.
    pub fn parse(s: &str) -> Option<Strategy> {
        let mut parts = s.split(':');
        let name = parts.next()?;
        let mut arg = |default: &str| parts.next().unwrap_or(default).to_string();
        Some(match name {
            "honest" => Strategy::Honest,
            "relay" => Strategy::Relay,
            "wrong-bit-reveal" => Strategy::WrongBitReveal,
            "late-decision" => {
                Strategy::LateDecision { round: arg("1").parse().ok()?, offset_ns: arg("1").parse().ok()? }
            }
            "placement-cheat" => Strategy::PlacementCheat {
                station: arg("1").parse().ok().filter(|s| *s == 1 || *s == 2)?,
                distance_m: arg("1000").parse().ok()?,
            },
            _ => return None,
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Honest => write!(f, "honest"),
            Strategy::Relay => write!(f, "relay"),
            Strategy::WrongBitReveal => write!(f, "wrong-bit-reveal"),
            Strategy::LateDecision { round, offset_ns } => {
                write!(f, "late-decision:{round}:{offset_ns}")
            }
            Strategy::PlacementCheat { station, distance_m } => {
                write!(f, "placement-cheat:{station}:{distance_m}")
            }
        }
    }
}

fn answer_now(alice: &mut AliceSide, round: u64, challenge: &FieldElement) -> Vec<Action> {
    match alice.honest_answer(round, challenge) {
        Ok(answer) => vec![Action::Answer { round, answer, after_ns: 0 }],
        Err(_) => Vec::new(),
    }
}

pub struct Honest;

impl Adversary for Honest {
    fn on_challenge(
        &mut self,
        alice: &mut AliceSide,
        _ctx: &Context,
        round: u64,
        challenge: &FieldElement,
    ) -> Vec<Action> {
        answer_now(alice, round, challenge)
    }
}

pub struct LateDecision {
    pub round: u64,
    pub offset_ns: i64,
}

impl Adversary for LateDecision {
    fn on_challenge(
        &mut self,
        alice: &mut AliceSide,
        ctx: &Context,
        round: u64,
        challenge: &FieldElement,
    ) -> Vec<Action> {
        let mut actions = answer_now(alice, round, challenge);
        if round == self.round {
            // The challenge took bob_delay_ns to arrive and the answer needs
            // the same to return.
            let target = ctx.deadline_ns as i64 + self.offset_ns - 2 * ctx.bob_delay_ns as i64;
            if let Some(Action::Answer { after_ns, .. }) = actions.first_mut() {
                *after_ns = target.max(0) as u64;
            }
        }
        actions
    }
}

#[derive(Default)]
pub struct Relay {
    /// Challenges received but not yet answered, by round.
    waiting: HashMap<u64, FieldElement>,
}

impl Adversary for Relay {
    fn on_challenge(
        &mut self,
        alice: &mut AliceSide,
        _ctx: &Context,
        round: u64,
        challenge: &FieldElement,
    ) -> Vec<Action> {
        let mut actions = vec![Action::Covert { round, payload: challenge.clone(), after_ns: 0 }];
        if round == 1 {
            actions.extend(answer_now(alice, round, challenge));
        } else {
            self.waiting.insert(round, challenge.clone());
        }
        actions
    }

    fn on_covert(&mut self, alice: &mut AliceSide, _ctx: &Context, msg: &CovertMessage) -> Vec<Action> {
        let next = msg.round + 1;
        match self.waiting.remove(&next) {
            Some(challenge) => answer_now(alice, next, &challenge),
            None => Vec::new(),
        }
    }
}

pub struct WrongBitReveal;

impl Adversary for WrongBitReveal {
    fn on_challenge(
        &mut self,
        alice: &mut AliceSide,
        _ctx: &Context,
        round: u64,
        challenge: &FieldElement,
    ) -> Vec<Action> {
        answer_now(alice, round, challenge)
    }

    fn reveal(&mut self, alice: &mut AliceSide) -> Option<RevealMessage> {
        let mut msg = alice.honest_reveal().ok()?;
        msg.bit = msg.bit.flipped();
        Some(msg)
    }
}
