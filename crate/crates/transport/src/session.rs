//! Live agents.
//!
//! Topology: B1 listens for A1 and B2; B2 listens for A2 and connects to
//! B1. Every connection opens with HELLO (role byte + plan hash); a
//! mismatch is answered with ABORT(config) before any round. B1 then sends
//! SCHEDULE (start delay ns, scale factor) to B2 and both Bobs start their
//! round clocks after the delay.
//!
//! All timing uses `Instant`. Transcript timestamps are nanoseconds since a
//! point one second before the station's round clock started, matching the
//! simulator's convention. A challenge is stamped immediately before its
//! frame is written; an answer immediately after its frame is fully read.
//!
//! After the last round (or an abort) the Bobs swap their halves of the
//! transcript (TRANSCRIPT frame, round 0), merge them, swap the merged
//! encodings (round 1) and check they are byte-identical.

use std::fmt;
use std::io::{self, ErrorKind};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use relbc_core::field::{FieldError, FieldSpec};
use relbc_core::planner::{PlanError, ProtocolPlan, RoundSchedule};
use relbc_core::protocol::{
    bob_verify, AbortReason, AliceAgent, BobAgent, CommitBit, Reveal, RoundRecord, Station, Tape, TapeRole,
    TimingPolicy, Transcript, TranscriptStatus, Verdict,
};
use relbc_core::store::{read_tape, transcript_from_bytes, transcript_to_bytes, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{read_frame, write_frame, FrameError, FrameType, WireFrame};

/// Plan times are multiplied by this in live runs unless configured.
pub const DEFAULT_SCALE: u64 = 1_000;

/// Timestamp of the round clock's zero.
const TIMESTAMP_ORIGIN_NS: u64 = 1_000_000_000;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
const EXCHANGE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    A1,
    A2,
    B1,
    B2,
}

impl Role {
    pub fn station(self) -> Station {
        match self {
            Role::A1 | Role::B1 => Station::One,
            Role::A2 | Role::B2 => Station::Two,
        }
    }

    pub fn is_bob(self) -> bool {
        matches!(self, Role::B1 | Role::B2)
    }

    pub fn code(self) -> u8 {
        match self {
            Role::A1 => 1,
            Role::A2 => 2,
            Role::B1 => 3,
            Role::B2 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Some(match code {
            1 => Role::A1,
            2 => Role::A2,
            3 => Role::B1,
            4 => Role::B2,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s.to_ascii_uppercase().as_str() {
            "A1" => Role::A1,
            "A2" => Role::A2,
            "B1" => Role::B1,
            "B2" => Role::B2,
            _ => return None,
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Artificial delay before Alice answers one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub round: u64,
    pub delay: Duration,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub role: Role,
    pub plan: ProtocolPlan,
    /// Secrets tape for Alice, challenge tape for Bob.
    pub tape: PathBuf,
    /// Committed bit (Alice only).
    pub bit: CommitBit,
    pub scale: u64,
    /// Address to listen on (B1, B2).
    pub listen: Option<String>,
    /// Address to connect to (A1 and B2 to B1, A2 to B2).
    pub peer: Option<String>,
    /// Gap between the handshake and round 1 (B1).
    pub start_delay: Duration,
    pub fault: Option<Fault>,
    pub connect_timeout: Duration,
}

impl SessionConfig {
    pub fn new(role: Role, plan: ProtocolPlan, tape: PathBuf) -> Self {
        SessionConfig {
            role,
            plan,
            tape,
            bit: CommitBit::Zero,
            scale: DEFAULT_SCALE,
            listen: None,
            peer: None,
            start_delay: Duration::from_millis(50),
            fault: None,
            connect_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("agent thread panicked")]
    Panicked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortReport {
    pub reason: AbortReason,
    pub round: u64,
    pub detail: String,
}

impl fmt::Display for AbortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "abort ({}) at round {}: {}", self.reason, self.round, self.detail)
    }
}

/// What an agent ended with.
#[derive(Clone, Debug)]
pub struct AgentOutcome {
    pub role: Role,
    pub abort: Option<AbortReport>,
    /// Full merged transcript (Bob).
    pub transcript: Option<Transcript>,
    pub verdict: Option<Verdict>,
    /// Whether the other Bob's merged transcript was byte-identical.
    pub peer_agreed: Option<bool>,
    pub rounds_handled: u64,
}

impl AgentOutcome {
    fn aborted(role: Role, reason: AbortReason, round: u64, detail: impl Into<String>) -> Self {
        AgentOutcome {
            role,
            abort: Some(AbortReport { reason, round, detail: detail.into() }),
            transcript: None,
            verdict: None,
            peer_agreed: None,
            rounds_handled: 0,
        }
    }

    /// 0 accepted (or Alice finished), 2 aborted, 3 rejected.
    pub fn exit_code(&self) -> i32 {
        if self.abort.is_some() {
            return 2;
        }
        match (&self.verdict, self.peer_agreed) {
            (Some(Verdict::Accept(_)), Some(true)) => 0,
            (Some(_), _) => 3,
            (None, _) => 0,
        }
    }
}

fn abort_frame(reason: AbortReason, round: u64) -> WireFrame {
    WireFrame::new(FrameType::Abort, round, vec![reason.code()])
}

fn abort_of(frame: &WireFrame) -> AbortReason {
    frame.payload.first().and_then(|c| AbortReason::from_code(*c)).unwrap_or(AbortReason::Connection)
}

fn hello(role: Role, plan_hash: &[u8; 32]) -> WireFrame {
    let mut payload = vec![role.code()];
    payload.extend_from_slice(plan_hash);
    WireFrame::new(FrameType::Hello, 0, payload)
}

/// Checks a peer's HELLO; returns its role.
fn check_hello(frame: &WireFrame, plan_hash: &[u8; 32]) -> Result<Role, String> {
    match frame.kind {
        FrameType::Hello => {
            let role = Role::from_code(frame.payload[0])
                .ok_or_else(|| format!("unknown role code {}", frame.payload[0]))?;
            if frame.payload[1..] != plan_hash[..] {
                return Err(format!("{role} runs a different plan"));
            }
            Ok(role)
        }
        FrameType::Abort => Err(format!("peer aborted during handshake ({})", abort_of(frame))),
        other => Err(format!("expected HELLO, got {other:?}")),
    }
}

fn connect_with_retry(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let give_up = Instant::now() + timeout;
    loop {
        let attempt = addr
            .to_socket_addrs()
            .and_then(|mut a| a.next().ok_or_else(|| io::Error::new(ErrorKind::InvalidInput, "no address")))
            .and_then(TcpStream::connect);
        match attempt {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= give_up => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept(listener: &TcpListener) -> io::Result<TcpStream> {
    let (s, _) = listener.accept()?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn is_timeout(e: &FrameError) -> bool {
    matches!(e, FrameError::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Reads one frame, giving up at `deadline`.
fn read_until(
    stream: &mut TcpStream,
    element_len: usize,
    deadline: Instant,
) -> Result<WireFrame, FrameError> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    if remaining.is_zero() {
        return Err(FrameError::Io(io::Error::new(ErrorKind::TimedOut, "deadline passed")));
    }
    stream.set_read_timeout(Some(remaining))?;
    read_frame(stream, element_len)
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

/// Runs one agent, binding `cfg.listen` if it is a Bob.
pub fn run_agent(cfg: &SessionConfig) -> Result<AgentOutcome, TransportError> {
    if cfg.role.is_bob() {
        let addr = cfg
            .listen
            .as_deref()
            .ok_or_else(|| TransportError::Config(format!("{} needs a listen address", cfg.role)))?;
        let listener = TcpListener::bind(addr)?;
        run_agent_on(cfg, Some(listener))
    } else {
        run_agent_on(cfg, None)
    }
}

/// Runs one agent with an already bound listener (Bob roles).
pub fn run_agent_on(
    cfg: &SessionConfig,
    listener: Option<TcpListener>,
) -> Result<AgentOutcome, TransportError> {
    if cfg.scale == 0 {
        return Err(TransportError::Config("scale factor must be positive".into()));
    }
    cfg.plan.check_runnable()?;
    match cfg.role {
        Role::A1 | Role::A2 => run_alice(cfg),
        Role::B1 | Role::B2 => {
            let listener =
                listener.ok_or_else(|| TransportError::Config(format!("{} needs a listener", cfg.role)))?;
            run_bob(cfg, listener)
        }
    }
}

fn run_alice(cfg: &SessionConfig) -> Result<AgentOutcome, TransportError> {
    let role = cfg.role;
    let station = role.station();
    let spec = cfg.plan.field_spec()?;
    let element_len = spec.byte_len();
    let secrets = read_tape(&cfg.tape)?;
    if secrets.role() != TapeRole::AliceSecrets {
        return Err(TransportError::Config("Alice needs a secrets tape".into()));
    }
    let plan_hash = cfg.plan.hash();
    let peer =
        cfg.peer.as_deref().ok_or_else(|| TransportError::Config(format!("{role} needs a peer address")))?;
    let mut stream = connect_with_retry(peer, cfg.connect_timeout)?;
    write_frame(&mut stream, &hello(role, &plan_hash))?;
    let reply = match read_until(&mut stream, element_len, Instant::now() + HANDSHAKE_TIMEOUT) {
        Ok(f) => f,
        Err(e) => return Ok(AgentOutcome::aborted(role, AbortReason::Connection, 0, e.to_string())),
    };
    if let Err(detail) = check_hello(&reply, &plan_hash) {
        let _ = write_frame(&mut stream, &abort_frame(AbortReason::Config, 0));
        return Ok(AgentOutcome::aborted(role, AbortReason::Config, 0, detail));
    }

    let m = cfg.plan.rounds;
    let schedule = cfg.plan.schedule().scaled(cfg.scale);
    let last_round = if station == Station::One { m - 1 } else { m };
    // Generous bound so a vanished Bob cannot hang the agent.
    let idle_limit = Duration::from_nanos(schedule.start_ns(m + 1)) + Duration::from_secs(30);
    let mut agent = AliceAgent::new(station, m);
    let mut handled = 0;
    let mut reveal_at = None;
    loop {
        let frame = match read_until(&mut stream, element_len, Instant::now() + idle_limit) {
            Ok(f) => f,
            Err(e) => {
                let mut out =
                    AgentOutcome::aborted(role, AbortReason::Connection, agent.next_round(), e.to_string());
                out.rounds_handled = handled;
                return Ok(out);
            }
        };
        let received = Instant::now();
        match frame.kind {
            FrameType::Challenge => {
                let k = frame.round;
                if let Some(f) = cfg.fault.filter(|f| f.round == k) {
                    thread::sleep(f.delay);
                }
                let answer = spec
                    .element_from_bytes(&frame.payload)
                    .map_err(|e| e.into())
                    .and_then(|x| agent.handle_challenge(&secrets, cfg.bit, k, &x));
                let y = match answer {
                    Ok(y) => y,
                    Err(e) => {
                        let reason = match e {
                            relbc_core::protocol::ProtocolError::TapeExhausted(_) => AbortReason::Tape,
                            _ => AbortReason::Sequencing,
                        };
                        let _ = write_frame(&mut stream, &abort_frame(reason, k));
                        let mut out = AgentOutcome::aborted(role, reason, k, e.to_string());
                        out.rounds_handled = handled;
                        return Ok(out);
                    }
                };
                write_frame(&mut stream, &WireFrame::new(FrameType::Answer, k, y.to_bytes()))?;
                handled += 1;
                if k == last_round {
                    if station == Station::One {
                        // Round m + 1 falls one station period after round m - 1.
                        reveal_at = Some(received + Duration::from_nanos(schedule.period_ns()));
                    }
                    break;
                }
            }
            FrameType::Abort => {
                let mut out = AgentOutcome::aborted(role, abort_of(&frame), frame.round, "Bob aborted");
                out.rounds_handled = handled;
                return Ok(out);
            }
            other => {
                let _ = write_frame(&mut stream, &abort_frame(AbortReason::Sequencing, frame.round));
                let mut out = AgentOutcome::aborted(
                    role,
                    AbortReason::Sequencing,
                    frame.round,
                    format!("unexpected {other:?} frame"),
                );
                out.rounds_handled = handled;
                return Ok(out);
            }
        }
    }

    if let Some(at) = reveal_at {
        // Listen for an abort while waiting to reveal.
        match read_until(&mut stream, element_len, at) {
            Ok(f) if f.kind == FrameType::Abort => {
                let mut out = AgentOutcome::aborted(role, abort_of(&f), f.round, "Bob aborted");
                out.rounds_handled = handled;
                return Ok(out);
            }
            Err(e) if !is_timeout(&e) => {
                let mut out = AgentOutcome::aborted(role, AbortReason::Connection, m + 1, e.to_string());
                out.rounds_handled = handled;
                return Ok(out);
            }
            _ => {}
        }
        sleep_until(at);
        let msg = agent.reveal(&secrets, cfg.bit).map_err(|e| TransportError::Config(e.to_string()))?;
        let mut payload = vec![msg.bit.as_u8()];
        payload.extend(msg.final_secret.to_bytes());
        write_frame(&mut stream, &WireFrame::new(FrameType::Reveal, m + 1, payload))?;
    }
    Ok(AgentOutcome {
        role,
        abort: None,
        transcript: None,
        verdict: None,
        peer_agreed: None,
        rounds_handled: handled,
    })
}

enum PeerEvent {
    Frame(WireFrame),
    Closed(String),
}

/// Forwards frames from the other Bob to a channel so the round loop can
/// poll it between rounds.
fn spawn_peer_reader(mut stream: TcpStream, element_len: usize) -> Receiver<PeerEvent> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = stream.set_read_timeout(None);
        loop {
            match read_frame(&mut stream, element_len) {
                Ok(f) => {
                    if tx.send(PeerEvent::Frame(f)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send(PeerEvent::Closed(e.to_string()));
                    return;
                }
            }
        }
    });
    rx
}

struct BobRun {
    station: Station,
    spec: Arc<FieldSpec>,
    element_len: usize,
    schedule: RoundSchedule,
    epoch: Instant,
    records: Vec<RoundRecord>,
    reveal: Option<Reveal>,
    abort: Option<(AbortReason, u64, String)>,
}

impl BobRun {
    fn timestamp(&self, t: Instant) -> u64 {
        TIMESTAMP_ORIGIN_NS + t.saturating_duration_since(self.epoch).as_nanos() as u64
    }

    fn note_abort(&mut self, reason: AbortReason, round: u64, detail: impl Into<String>) {
        if self.abort.as_ref().is_none_or(|(_, r, _)| round < *r) {
            self.abort = Some((reason, round, detail.into()));
        }
    }
}

fn run_bob(cfg: &SessionConfig, listener: TcpListener) -> Result<AgentOutcome, TransportError> {
    let role = cfg.role;
    let station = role.station();
    let spec = cfg.plan.field_spec()?;
    let element_len = spec.byte_len();
    let challenges = read_tape(&cfg.tape)?;
    if challenges.role() != TapeRole::BobChallenges {
        return Err(TransportError::Config("Bob needs a challenge tape".into()));
    }
    let plan_hash = cfg.plan.hash();
    let handshake_deadline = Instant::now() + HANDSHAKE_TIMEOUT;

    // Handshake. Connections whose first frame is wrong are remembered so
    // everyone can be told before giving up.
    let mut problem: Option<String> = None;
    let (mut alice, peer) = match station {
        Station::One => {
            let mut alice = None;
            let mut peer = None;
            while alice.is_none() || peer.is_none() {
                let mut s = accept(&listener)?;
                let first = read_until(&mut s, element_len, handshake_deadline);
                let who = match &first {
                    Ok(f) => check_hello(f, &plan_hash),
                    Err(e) => Err(e.to_string()),
                };
                // Only B2 opens with ABORT, after its own handshake with A2 failed.
                let claimed = match &first {
                    Ok(f) if f.kind == FrameType::Hello => Role::from_code(f.payload[0]),
                    Ok(f) if f.kind == FrameType::Abort => Some(Role::B2),
                    _ => None,
                };
                match who {
                    Ok(_) => write_frame(&mut s, &hello(role, &plan_hash))?,
                    Err(e) => {
                        problem.get_or_insert(e);
                    }
                }
                match claimed {
                    Some(Role::A1) if alice.is_none() => alice = Some(s),
                    Some(Role::B2) if peer.is_none() => peer = Some(s),
                    _ => {
                        problem.get_or_insert_with(|| "unexpected peer".into());
                        let _ = write_frame(&mut s, &abort_frame(AbortReason::Config, 0));
                        // Keep the slot filled so the handshake cannot wait forever.
                        if alice.is_none() {
                            alice = Some(s);
                        } else if peer.is_none() {
                            peer = Some(s);
                        }
                    }
                }
            }
            (alice.expect("accepted"), peer.expect("accepted"))
        }
        Station::Two => {
            let mut alice = accept(&listener)?;
            let first = read_until(&mut alice, element_len, handshake_deadline);
            match first.as_ref().map_err(|e| e.to_string()).and_then(|f| check_hello(f, &plan_hash)) {
                Ok(Role::A2) => write_frame(&mut alice, &hello(role, &plan_hash))?,
                Ok(other) => {
                    problem = Some(format!("{other} connected where A2 was expected"));
                }
                Err(e) => problem = Some(e),
            }
            let peer_addr =
                cfg.peer.as_deref().ok_or_else(|| TransportError::Config("B2 needs B1's address".into()))?;
            let mut peer = connect_with_retry(peer_addr, cfg.connect_timeout)?;
            if problem.is_some() {
                write_frame(&mut peer, &abort_frame(AbortReason::Config, 0))?;
            } else {
                write_frame(&mut peer, &hello(role, &plan_hash))?;
                let reply = read_until(&mut peer, element_len, handshake_deadline);
                if let Err(e) = reply.map_err(|e| e.to_string()).and_then(|f| check_hello(&f, &plan_hash)) {
                    problem = Some(e);
                }
            }
            (alice, peer)
        }
    };
    let mut peer_tx = peer.try_clone()?;
    if let Some(detail) = problem {
        let _ = write_frame(&mut alice, &abort_frame(AbortReason::Config, 0));
        let _ = write_frame(&mut peer_tx, &abort_frame(AbortReason::Config, 0));
        return Ok(AgentOutcome::aborted(role, AbortReason::Config, 0, detail));
    }
    let peer_rx = spawn_peer_reader(peer, element_len);

    // Schedule.
    let epoch = match station {
        Station::One => {
            let mut payload = (cfg.start_delay.as_nanos() as u64).to_be_bytes().to_vec();
            payload.extend_from_slice(&cfg.scale.to_be_bytes());
            let epoch = Instant::now() + cfg.start_delay;
            write_frame(&mut peer_tx, &WireFrame::new(FrameType::Schedule, 0, payload))?;
            epoch
        }
        Station::Two => match peer_rx.recv_timeout(HANDSHAKE_TIMEOUT) {
            Ok(PeerEvent::Frame(f)) if f.kind == FrameType::Schedule => {
                let arrived = Instant::now();
                let delay = u64::from_be_bytes(f.payload[..8].try_into().expect("8 bytes"));
                let scale = u64::from_be_bytes(f.payload[8..].try_into().expect("8 bytes"));
                if scale != cfg.scale {
                    let _ = write_frame(&mut alice, &abort_frame(AbortReason::Config, 0));
                    let _ = write_frame(&mut peer_tx, &abort_frame(AbortReason::Config, 0));
                    return Ok(AgentOutcome::aborted(
                        role,
                        AbortReason::Config,
                        0,
                        format!("B1 runs at scale {scale}, this agent at {}", cfg.scale),
                    ));
                }
                arrived + Duration::from_nanos(delay)
            }
            Ok(PeerEvent::Frame(f)) if f.kind == FrameType::Abort => {
                let _ = write_frame(&mut alice, &abort_frame(abort_of(&f), 0));
                return Ok(AgentOutcome::aborted(role, abort_of(&f), 0, "B1 aborted before round 1"));
            }
            _ => {
                let _ = write_frame(&mut alice, &abort_frame(AbortReason::Connection, 0));
                return Ok(AgentOutcome::aborted(role, AbortReason::Connection, 0, "no schedule from B1"));
            }
        },
    };

    let schedule = cfg.plan.schedule().scaled(cfg.scale);
    let m = cfg.plan.rounds;
    let mut run = BobRun {
        station,
        spec: Arc::clone(&spec),
        element_len,
        schedule,
        epoch,
        records: Vec::new(),
        reveal: None,
        abort: None,
    };
    run_rounds(&mut run, &mut alice, &mut peer_tx, &peer_rx, &challenges, m);

    if station == Station::One && run.abort.is_none() {
        let reveal_deadline = epoch
            + Duration::from_nanos(schedule.start_ns(m + 1) + schedule.period_ns())
            + Duration::from_secs(5);
        if let Ok(f) = read_until(&mut alice, element_len, reveal_deadline) {
            let at = run.timestamp(Instant::now());
            if f.kind == FrameType::Reveal && f.round == m + 1 {
                if let (Some(bit), Ok(a_m)) =
                    (CommitBit::from_u8(f.payload[0]), spec.element_from_bytes(&f.payload[1..]))
                {
                    run.reveal = Some(Reveal { bit, final_secret: a_m, received_at: at });
                }
            }
        }
    }

    let timing = TimingPolicy { deadline_ns: schedule.deadline_ns, scale_factor: cfg.scale };
    exchange_and_verify(cfg, run, &mut peer_tx, &peer_rx, timing, plan_hash)
}

fn run_rounds(
    run: &mut BobRun,
    alice: &mut TcpStream,
    peer_tx: &mut TcpStream,
    peer_rx: &Receiver<PeerEvent>,
    challenges: &Tape,
    m: u64,
) {
    let mut bob = BobAgent::new(run.station, m);
    let mut k = run.station.first_round();
    while k <= m {
        match peer_rx.try_recv() {
            Ok(PeerEvent::Frame(f)) if f.kind == FrameType::Abort => {
                run.note_abort(abort_of(&f), f.round, "other station aborted");
            }
            Ok(PeerEvent::Closed(e)) => run.note_abort(AbortReason::Connection, k, e),
            Err(TryRecvError::Disconnected) => run.note_abort(AbortReason::Connection, k, "peer gone"),
            _ => {}
        }
        if let Some((reason, _, _)) = &run.abort {
            let _ = write_frame(alice, &abort_frame(*reason, k));
            return;
        }
        sleep_until(run.epoch + Duration::from_nanos(run.schedule.start_ns(k)));
        let x = match bob.issue_challenge(challenges, k) {
            Ok(x) => x,
            Err(e) => {
                fail_round(run, alice, peer_tx, AbortReason::Tape, k, e.to_string());
                return;
            }
        };
        let frame = WireFrame::new(FrameType::Challenge, k, x.to_bytes());
        let issued_at = Instant::now();
        let issued = run.timestamp(issued_at);
        if let Err(e) = write_frame(alice, &frame) {
            fail_round(run, alice, peer_tx, AbortReason::Connection, k, e.to_string());
            return;
        }
        let tau = run.schedule.deadline(run.station);
        // One extra nanosecond so an answer landing exactly on the deadline
        // is read and judged by its timestamp.
        let deadline = issued_at + Duration::from_nanos(tau + 1);
        let reply = read_until(alice, run.element_len, deadline);
        let received = run.timestamp(Instant::now());
        match reply {
            Ok(f) if f.kind == FrameType::Answer && f.round == k => {
                if received - issued > tau {
                    fail_round(
                        run,
                        alice,
                        peer_tx,
                        AbortReason::Timing,
                        k,
                        format!("answer after {} ns, deadline {tau} ns", received - issued),
                    );
                    return;
                }
                let y = run.spec.element_from_bytes(&f.payload).expect("frame length checked");
                run.records.push(RoundRecord {
                    index: k,
                    station: run.station,
                    challenge: x,
                    answer: y,
                    challenge_issued_at: issued,
                    answer_received_at: received,
                });
            }
            Ok(f) if f.kind == FrameType::Abort => {
                fail_round(run, alice, peer_tx, abort_of(&f), k, "Alice aborted".into());
                return;
            }
            Ok(f) => {
                fail_round(
                    run,
                    alice,
                    peer_tx,
                    AbortReason::Sequencing,
                    k,
                    format!("expected ANSWER {k}, got {:?} {}", f.kind, f.round),
                );
                return;
            }
            Err(e) if is_timeout(&e) => {
                fail_round(run, alice, peer_tx, AbortReason::Timing, k, format!("no answer within {tau} ns"));
                return;
            }
            Err(e) => {
                fail_round(run, alice, peer_tx, AbortReason::Connection, k, e.to_string());
                return;
            }
        }
        k += 2;
    }
}

fn fail_round(
    run: &mut BobRun,
    alice: &mut TcpStream,
    peer_tx: &mut TcpStream,
    reason: AbortReason,
    k: u64,
    detail: String,
) {
    run.note_abort(reason, k, detail);
    let frame = abort_frame(reason, k);
    let _ = write_frame(alice, &frame);
    let _ = write_frame(peer_tx, &frame);
}

/// Merges this station's records with the other station's half.
fn merge(
    cfg: &SessionConfig,
    mine: Transcript,
    theirs: Transcript,
    abort: Option<(AbortReason, u64)>,
) -> Transcript {
    let mut rounds: Vec<RoundRecord> = mine.rounds.into_iter().chain(theirs.rounds).collect();
    rounds.sort_by_key(|r| r.index);
    let mut status_abort = abort;
    for half in [mine.status, theirs.status] {
        if let TranscriptStatus::Aborted { reason, round } = half {
            if status_abort.is_none_or(|(_, r)| round < r) {
                status_abort = Some((reason, round));
            }
        }
    }
    // A missing round without a recorded abort is a sequencing failure.
    if let Some(gap) =
        (1..=cfg.plan.rounds).find(|k| rounds.get(*k as usize - 1).is_none_or(|r| r.index != *k))
    {
        if status_abort.is_none_or(|(_, r)| gap < r) {
            status_abort = Some((AbortReason::Sequencing, gap));
        }
    }
    let mut full = Transcript::new(mine.plan_id, mine.spec, mine.rounds_planned, mine.timing);
    let limit = status_abort.map_or(cfg.plan.rounds, |(_, r)| r - 1);
    for r in rounds.into_iter().take_while(|r| r.index <= limit) {
        // Order and parity were checked above; push cannot fail.
        let _ = full.push_round(r);
    }
    match status_abort {
        Some((reason, round)) => full.abort(reason, round),
        None => full.reveal = mine.reveal.or(theirs.reveal),
    }
    full
}

fn exchange_and_verify(
    cfg: &SessionConfig,
    run: BobRun,
    peer_tx: &mut TcpStream,
    peer_rx: &Receiver<PeerEvent>,
    timing: TimingPolicy,
    plan_hash: [u8; 32],
) -> Result<AgentOutcome, TransportError> {
    let role = cfg.role;
    let handled = run.records.len() as u64;
    let mut half = Transcript::new(plan_hash, Arc::clone(&run.spec), cfg.plan.rounds, timing);
    half.rounds = run.records;
    half.reveal = run.reveal;
    let mut abort = run.abort.as_ref().map(|(r, k, _)| (*r, *k));
    if let Some((reason, round)) = abort {
        half.status = TranscriptStatus::Aborted { reason, round };
    }
    let detail = run.abort.map(|(_, _, d)| d);

    let send = |tx: &mut TcpStream, round: u64, bytes: Vec<u8>| {
        write_frame(tx, &WireFrame::new(FrameType::Transcript, round, bytes))
    };
    let give_up = Instant::now() + EXCHANGE_TIMEOUT;
    let receive = |want_round: u64, abort: &mut Option<(AbortReason, u64)>| -> Result<Vec<u8>, String> {
        loop {
            let left = give_up.saturating_duration_since(Instant::now());
            match peer_rx.recv_timeout(left) {
                Ok(PeerEvent::Frame(f)) if f.kind == FrameType::Transcript && f.round == want_round => {
                    return Ok(f.payload)
                }
                Ok(PeerEvent::Frame(f)) if f.kind == FrameType::Abort => {
                    let (reason, round) = (abort_of(&f), f.round);
                    if abort.is_none_or(|(_, r)| round < r) {
                        *abort = Some((reason, round));
                    }
                }
                Ok(PeerEvent::Frame(f)) => return Err(format!("unexpected {:?} frame", f.kind)),
                Ok(PeerEvent::Closed(e)) => return Err(e),
                Err(RecvTimeoutError::Timeout) => return Err("transcript exchange timed out".into()),
                Err(RecvTimeoutError::Disconnected) => return Err("peer gone".into()),
            }
        }
    };

    let lost = |detail: String| {
        Ok(AgentOutcome {
            rounds_handled: handled,
            ..AgentOutcome::aborted(role, AbortReason::Connection, cfg.plan.rounds + 1, detail)
        })
    };
    if let Err(e) = send(peer_tx, 0, transcript_to_bytes(&half)) {
        return lost(e.to_string());
    }
    let theirs = match receive(0, &mut abort).map(|b| transcript_from_bytes(&b)) {
        Ok(Ok(t)) => t,
        Ok(Err(e)) => return lost(e.to_string()),
        Err(e) => return lost(e),
    };
    let full = merge(cfg, half, theirs, abort);
    let bytes = transcript_to_bytes(&full);
    if let Err(e) = send(peer_tx, 1, bytes.clone()) {
        return lost(e.to_string());
    }
    let agreed = match receive(1, &mut abort) {
        Ok(other) => other == bytes,
        Err(e) => return lost(e),
    };
    let verdict = bob_verify(&full);
    let abort_report = match full.status {
        TranscriptStatus::Aborted { reason, round } => Some(AbortReport {
            reason,
            round,
            detail: detail.unwrap_or_else(|| "reported by the other station".into()),
        }),
        TranscriptStatus::Complete => None,
    };
    Ok(AgentOutcome {
        role,
        abort: abort_report,
        transcript: Some(full),
        verdict: Some(verdict),
        peer_agreed: Some(agreed),
        rounds_handled: handled,
    })
}

/// Four agents on 127.0.0.1 with ephemeral ports, configured but not yet
/// started. Configs are ordered A1, A2, B1, B2 and may be edited first.
pub struct Loopback {
    pub configs: [SessionConfig; 4],
    listeners: [TcpListener; 2],
}

impl Loopback {
    pub fn new(
        plan: &ProtocolPlan,
        secrets: PathBuf,
        challenges: PathBuf,
        bit: CommitBit,
        scale: u64,
    ) -> io::Result<Loopback> {
        let b1 = TcpListener::bind("127.0.0.1:0")?;
        let b2 = TcpListener::bind("127.0.0.1:0")?;
        let b1_addr = b1.local_addr()?.to_string();
        let b2_addr = b2.local_addr()?.to_string();
        let make = |role: Role, tape: &PathBuf, listen: Option<&String>, peer: Option<&String>| {
            let mut c = SessionConfig::new(role, plan.clone(), tape.clone());
            c.bit = bit;
            c.scale = scale;
            c.listen = listen.cloned();
            c.peer = peer.cloned();
            c
        };
        Ok(Loopback {
            configs: [
                make(Role::A1, &secrets, None, Some(&b1_addr)),
                make(Role::A2, &secrets, None, Some(&b2_addr)),
                make(Role::B1, &challenges, Some(&b1_addr), None),
                make(Role::B2, &challenges, Some(&b2_addr), Some(&b1_addr)),
            ],
            listeners: [b1, b2],
        })
    }

    /// Runs all four agents on their own threads and collects the outcomes.
    pub fn run(self) -> Result<[AgentOutcome; 4], TransportError> {
        let [a1, a2, b1, b2] = self.configs;
        let [l1, l2] = self.listeners;
        let handles = [
            thread::spawn(move || run_agent_on(&b1, Some(l1))),
            thread::spawn(move || run_agent_on(&b2, Some(l2))),
            thread::spawn(move || run_agent_on(&a1, None)),
            thread::spawn(move || run_agent_on(&a2, None)),
        ];
        let mut results = Vec::with_capacity(4);
        for h in handles {
            results.push(h.join().map_err(|_| TransportError::Panicked)??);
        }
        let [b1, b2, a1, a2]: [AgentOutcome; 4] = results.try_into().expect("four agents");
        Ok([a1, a2, b1, b2])
    }
}
