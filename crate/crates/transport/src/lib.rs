//! TCP transport for live four-agent runs: framing plus the agent loops.

pub mod frame;
pub mod session;

pub use frame::{read_frame, write_frame, FrameError, FrameType, WireFrame};
pub use session::{
    run_agent, run_agent_on, AbortReport, AgentOutcome, Fault, Loopback, Role, SessionConfig, TransportError,
    DEFAULT_SCALE,
};
