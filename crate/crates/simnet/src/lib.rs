//! Deterministic discrete-event simulation of the commitment: Bob's two
//! stations and Alice's two agents on one axis, messages at light speed,
//! drifting or disciplined clocks, cheating strategies, and an audit of the
//! spacelike separation of consecutive rounds.

pub mod adversary;
pub mod audit;
pub mod clock;
pub mod engine;

pub use adversary::{Action, Adversary, AliceSide, Context, CovertMessage, Strategy};
pub use audit::{no_signaling_audit, AuditError, AuditReport, AuditViolation};
pub use clock::{ClockModel, Discipline};
pub use engine::{
    light_delay_ns, run_simulation, run_with_adversary, Placements, SimError, SimOutcome, SimReport,
};
