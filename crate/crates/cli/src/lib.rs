//! `relbc` subcommands. Every command prints a human summary (or JSON with
//! `--json`) and returns one of the exit codes below.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use relbc_core::field::FieldSpec;
use relbc_core::planner::{format_table, PlanError, PlannerConfig, ProtocolPlan};
use relbc_core::protocol::{CommitBit, RejectReason, TapeRole, TranscriptStatus, Verdict};
use relbc_core::store::{
    generate_tape, tape_len, tape_sizing, verify_file, write_honest_transcript, write_transcript, StoreError,
    TapeElements, TapeSource,
};
use relbc_simnet::{no_signaling_audit, run_simulation, ClockModel, Placements, SimError, Strategy};
use relbc_transport::{run_agent, Fault, Role, SessionConfig, TransportError, DEFAULT_SCALE};
use serde_json::json;
use thiserror::Error;

pub mod manifest;

use manifest::{file_sha256, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ABORT: i32 = 2;
pub const EXIT_REJECT: i32 = 3;

/// Used when no plan or config is given.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/case1.cfg");

/// Plans above this many rounds need `--rounds` to be simulated.
const MAX_SIMULATED_ROUNDS: u64 = 10_000_000;

#[derive(Parser, Debug)]
#[command(name = "relbc", version, about = "Multi-round relativistic bit commitment toolkit")]
struct Cli {
    /// Print machine-readable JSON instead of the summary.
    #[arg(long, global = true)]
    json: bool,
    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive plans and the resource table from a config file.
    Plan(PlanArgs),
    /// Run the discrete-event simulation against a strategy.
    Simulate(SimulateArgs),
    /// Verify a transcript file.
    Verify(VerifyArgs),
    /// Run one live agent over TCP.
    Run(RunArgs),
    /// Generate a tape file, or print tape sizes.
    Tape(TapeArgs),
    /// Measure field and verification throughput.
    Bench(BenchArgs),
    /// Re-run a manifest and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    config: PathBuf,
    /// Write one plan file per duration here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct PlanSource {
    /// Plan file written by `plan`.
    #[arg(long, conflicts_with = "config")]
    plan: Option<PathBuf>,
    /// Planner config (TOML); defaults to the built-in case1 geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which of the config's durations to plan for.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Override the round count (even, at least 2).
    #[arg(long)]
    rounds: Option<u64>,
    /// Override the field size in bits.
    #[arg(long = "n")]
    bits: Option<u32>,
}

impl PlanSource {
    fn resolve(&self) -> Result<ProtocolPlan, CliError> {
        let mut plan = match (&self.plan, &self.config) {
            (Some(p), _) => ProtocolPlan::load(p)?,
            (None, Some(c)) => PlannerConfig::load(c)?.plan(self.index)?,
            (None, None) => PlannerConfig::from_toml_str(DEFAULT_CONFIG)?.plan(self.index)?,
        };
        if let Some(bits) = self.bits {
            plan = plan.with_bits(bits)?;
        }
        if let Some(m) = self.rounds {
            plan = plan.with_rounds(m)?;
        }
        Ok(plan)
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        format!(
            "unknown strategy `{s}` (honest, relay, wrong-bit-reveal, late-decision:ROUND:OFFSET_NS, placement-cheat:STATION:METRES)"
        )
    })
}

fn parse_bit(s: &str) -> Result<CommitBit, String> {
    s.parse::<u8>().ok().and_then(CommitBit::from_u8).ok_or_else(|| format!("bit must be 0 or 1, got `{s}`"))
}

fn parse_role(s: &str) -> Result<Role, String> {
    Role::parse(s).ok_or_else(|| format!("role must be A1, A2, B1 or B2, got `{s}`"))
}

fn parse_tape_role(s: &str) -> Result<TapeRole, String> {
    match s {
        "secrets" | "alice" => Ok(TapeRole::AliceSecrets),
        "challenges" | "bob" => Ok(TapeRole::BobChallenges),
        _ => Err(format!("tape role must be `secrets` or `challenges`, got `{s}`")),
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: PlanSource,
    #[arg(long, default_value = "honest", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0", value_parser = parse_bit)]
    bit: CommitBit,
    /// Fractional rate error of both station clocks.
    #[arg(long)]
    drift: Option<f64>,
    /// Model the clocks as PPS-disciplined.
    #[arg(long)]
    pps: bool,
    /// Transcript file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulation and audit report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    transcript: PathBuf,
    /// Require the transcript to belong to this plan.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_parser = parse_role)]
    role: Role,
    #[command(flatten)]
    source: PlanSource,
    /// Secrets tape (Alice) or challenge tape (Bob).
    #[arg(long)]
    tape: PathBuf,
    #[arg(long, default_value = "0", value_parser = parse_bit)]
    bit: CommitBit,
    /// Factor stretching every plan time.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: u64,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    peer: Option<String>,
    #[arg(long, default_value_t = 50)]
    start_delay_ms: u64,
    /// Delay Alice's answer to this round (testing).
    #[arg(long, requires = "fault_delay_ms")]
    fault_round: Option<u64>,
    #[arg(long)]
    fault_delay_ms: Option<u64>,
    #[arg(long, default_value_t = 10)]
    connect_timeout_s: u64,
    /// Where Bob writes the merged transcript.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TapeArgs {
    #[command(flatten)]
    source: PlanSource,
    /// `secrets` (Alice) or `challenges` (Bob).
    #[arg(long, value_parser = parse_tape_role, required_unless_present = "sizing")]
    role: Option<TapeRole>,
    #[arg(long, required_unless_present = "sizing")]
    out: Option<PathBuf>,
    /// Seeded, reproducible tape; system entropy when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Only print sizes.
    #[arg(long)]
    sizing: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,64,128,256,1024")]
    bits: Vec<u32>,
    /// Multiplications per field size.
    #[arg(long, default_value_t = 200_000)]
    mults: u64,
    /// Rounds in the verification benchmark transcript.
    #[arg(long, default_value_t = 200_000)]
    rounds: u64,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a command produced.
struct Report {
    code: i32,
    human: String,
    machine: serde_json::Value,
    manifest: RunManifest,
}

impl Report {
    fn new(manifest: RunManifest) -> Self {
        Report { code: EXIT_OK, human: String::new(), machine: json!({}), manifest }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.human.push_str(s.as_ref());
        self.human.push('\n');
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Output goes to `out`, errors to stderr.
pub fn execute<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a, &argv),
        Command::Simulate(a) => cmd_simulate(a, &argv),
        Command::Verify(a) => cmd_verify(a, &argv),
        Command::Run(a) => cmd_run(a, &argv),
        Command::Tape(a) => cmd_tape(a, &argv),
        Command::Bench(a) => cmd_bench(a, &argv),
        Command::Replay(a) => cmd_replay(a, &argv),
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let manifest_path =
        cli.manifest.clone().or_else(|| report.manifest.outputs.first().map(|o| sidecar(&o.path)));
    if let Some(p) = &manifest_path {
        if let Err(e) = report.manifest.save(p) {
            eprintln!("error: writing manifest {}: {e}", p.display());
            return EXIT_USAGE;
        }
    }
    let written = if cli.json {
        let mut machine = report.machine;
        machine["exit_code"] = json!(report.code);
        machine["manifest"] = serde_json::to_value(&report.manifest).expect("manifest serializes");
        writeln!(out, "{}", serde_json::to_string_pretty(&machine).expect("report serializes"))
    } else {
        write!(out, "{}", report.human)
    };
    if written.is_err() {
        return EXIT_USAGE;
    }
    report.code
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn plan_json(plan: &ProtocolPlan) -> serde_json::Value {
    serde_json::to_value(plan).expect("plan serializes")
}

fn cmd_plan(a: &PlanArgs, argv: &[String]) -> Result<Report, CliError> {
    let cfg = PlannerConfig::load(&a.config)?;
    let mut report = Report::new(RunManifest::new("plan", argv));
    report.manifest.config = serde_json::to_value(&cfg).expect("config serializes");
    let mut rows = Vec::new();
    let mut plans = Vec::new();
    for (i, label) in cfg.durations.iter().enumerate() {
        let plan = cfg.plan(i)?;
        rows.push(plan.table_row(label));
        let mut entry = json!({
            "duration": label,
            "hash": plan.hash_hex(),
            "rounds": plan.rounds,
            "station_period_s": plan.station_period_s,
            "min_separation_m": plan.min_separation_m,
            "drift_budget": plan.drift_budget,
        });
        if let Some(dir) = &a.out_dir {
            std::fs::create_dir_all(dir)?;
            let safe: String =
                label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let path = dir.join(format!("{}-{safe}.plan.json", cfg.name));
            plan.save(&path)?;
            report.manifest.add_output("plan", &path)?;
            entry["path"] = json!(path);
        }
        plans.push(entry);
    }
    report.human = format_table(&rows);
    for p in &plans {
        report.line(format!(
            "{}: plan {} t_Q {:.6e} s, min separation {:.1} m, drift budget {:.3e}",
            p["duration"].as_str().unwrap_or_default(),
            &p["hash"].as_str().unwrap_or_default()[..16],
            p["station_period_s"].as_f64().unwrap_or_default(),
            p["min_separation_m"].as_f64().unwrap_or_default(),
            p["drift_budget"].as_f64().unwrap_or_default(),
        ));
    }
    report.machine = json!({ "rows": rows, "plans": plans });
    Ok(report)
}

fn verdict_code(status: &TranscriptStatus, verdict: &Verdict) -> i32 {
    match (status, verdict) {
        (TranscriptStatus::Aborted { .. }, _) => EXIT_ABORT,
        (_, Verdict::Accept(_)) => EXIT_OK,
        (_, Verdict::Reject(RejectReason::Aborted { .. })) => EXIT_ABORT,
        (_, Verdict::Reject(_)) => EXIT_REJECT,
    }
}

fn status_text(status: &TranscriptStatus) -> String {
    match status {
        TranscriptStatus::Complete => "complete".into(),
        TranscriptStatus::Aborted { reason, round } => format!("aborted ({reason}) at round {round}"),
    }
}

fn cmd_simulate(a: &SimulateArgs, argv: &[String]) -> Result<Report, CliError> {
    let plan = a.source.resolve()?;
    if plan.rounds > MAX_SIMULATED_ROUNDS {
        return Err(CliError::Usage(format!(
            "plan has {} rounds; pass --rounds to simulate a shorter run",
            plan.rounds
        )));
    }
    let clock = match (a.drift, a.pps) {
        (Some(r), true) => ClockModel::pps(0.0, r),
        (Some(r), false) => ClockModel::drifting(r),
        (None, true) => ClockModel::pps(0.0, 0.0),
        (None, false) => ClockModel::exact(),
    };
    let placements = Placements::honest(&plan);
    let outcome = run_simulation(&plan, &placements, [clock; 2], &a.strategy, a.seed, a.bit)?;
    let verdict = relbc_core::protocol::bob_verify(&outcome.transcript);
    let audit = no_signaling_audit(&outcome.transcript, &plan, &outcome.report.placements);

    let mut report = Report::new(RunManifest::new("simulate", argv));
    report.manifest.config = plan_json(&plan);
    report.manifest.plan_hash = Some(plan.hash_hex());
    report.manifest.seeds = vec![a.seed];
    if let Some(path) = &a.out {
        write_transcript(path, &outcome.transcript)?;
        report.manifest.add_output("transcript", path)?;
    }
    let audit_json = match &audit {
        Ok(r) => serde_json::to_value(r).expect("audit serializes"),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let machine = json!({
        "plan_hash": plan.hash_hex(),
        "verdict": verdict,
        "status": outcome.transcript.status,
        "audit": audit_json,
        "simulation": outcome.report,
    });
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&machine).expect("report serializes"))?;
        report.manifest.add_output("report", path)?;
    }
    report.code = verdict_code(&outcome.transcript.status, &verdict);
    report.line(format!("plan      {} m={} n={}", &plan.hash_hex()[..16], plan.rounds, plan.config.bits));
    report.line(format!("strategy  {} seed {} bit {}", a.strategy, a.seed, a.bit));
    report.line(format!("status    {}", status_text(&outcome.transcript.status)));
    for late in &outcome.report.late_arrivals {
        report.line(format!("late      round {} by {} ns", late.round, late.excess_ns));
    }
    if outcome.report.margin_violation_count > 0 {
        report.line(format!(
            "clock     {} rounds started outside the margin",
            outcome.report.margin_violation_count
        ));
    }
    for v in &outcome.report.discipline_violations {
        report.line(format!("clock     {v}"));
    }
    match &audit {
        Ok(r) => report.line(format!(
            "audit     {}, {} pairs, worst slack {} (margin {} ns)",
            if r.passed() { "passed" } else { "FAILED" },
            r.pairs_checked,
            r.worst_slack_ns.map_or("n/a".to_string(), |s| format!("{s} ns")),
            r.margin_ns
        )),
        Err(e) => report.line(format!("audit     {e}")),
    }
    report.line(format!("verdict   {verdict}"));
    report.machine = machine;
    Ok(report)
}

fn cmd_verify(a: &VerifyArgs, argv: &[String]) -> Result<Report, CliError> {
    let expected = match &a.plan {
        Some(p) => Some(ProtocolPlan::load(p)?.hash()),
        None => None,
    };
    let mut report = Report::new(RunManifest::new("verify", argv));
    report.manifest.plan_hash = expected.map(hex::encode);
    match verify_file(&a.transcript, expected.as_ref()) {
        Ok(v) => {
            report.code = match &v.verdict {
                Verdict::Accept(_) => EXIT_OK,
                Verdict::Reject(RejectReason::Aborted { .. }) => EXIT_ABORT,
                Verdict::Reject(_) => EXIT_REJECT,
            };
            report.line(format!("verdict   {}", v.verdict));
            report.line(format!(
                "rounds    {} in {:.3} s ({:.0} rounds/s)",
                v.rounds,
                v.elapsed.as_secs_f64(),
                v.rounds_per_second()
            ));
            report.machine = json!({
                "verdict": v.verdict,
                "rounds": v.rounds,
                "seconds": v.elapsed.as_secs_f64(),
                "rounds_per_second": v.rounds_per_second(),
            });
        }
        Err(StoreError::Io(e)) => return Err(CliError::Io(e)),
        Err(e) => {
            // Unreadable or foreign files are rejections, not usage errors.
            report.code = EXIT_REJECT;
            report.line(format!("verdict   reject ({e})"));
            report.machine = json!({ "verdict": "reject", "error": e.to_string() });
        }
    }
    Ok(report)
}

fn cmd_run(a: &RunArgs, argv: &[String]) -> Result<Report, CliError> {
    let plan = a.source.resolve()?;
    let mut cfg = SessionConfig::new(a.role, plan.clone(), a.tape.clone());
    cfg.bit = a.bit;
    cfg.scale = a.scale;
    cfg.listen = a.listen.clone();
    cfg.peer = a.peer.clone();
    cfg.start_delay = Duration::from_millis(a.start_delay_ms);
    cfg.connect_timeout = Duration::from_secs(a.connect_timeout_s);
    cfg.fault = match (a.fault_round, a.fault_delay_ms) {
        (Some(round), Some(ms)) => Some(Fault { round, delay: Duration::from_millis(ms) }),
        _ => None,
    };
    let outcome = run_agent(&cfg)?;

    let mut report = Report::new(RunManifest::new("run", argv));
    report.manifest.config = plan_json(&plan);
    report.manifest.plan_hash = Some(plan.hash_hex());
    if let (Some(path), Some(t)) = (&a.out, &outcome.transcript) {
        write_transcript(path, t)?;
        report.manifest.add_output("transcript", path)?;
    }
    report.code = outcome.exit_code();
    report.line(format!("role      {} ({} rounds handled)", a.role, outcome.rounds_handled));
    if let Some(abort) = &outcome.abort {
        report.line(format!("status    {abort}"));
    }
    if let Some(v) = &outcome.verdict {
        report.line(format!("verdict   {v}"));
    }
    if let Some(agreed) = outcome.peer_agreed {
        report.line(format!("peer      transcripts {}", if agreed { "agree" } else { "DIFFER" }));
    }
    report.machine = json!({
        "role": a.role,
        "abort": outcome.abort,
        "verdict": outcome.verdict,
        "peer_agreed": outcome.peer_agreed,
        "rounds_handled": outcome.rounds_handled,
    });
    Ok(report)
}

fn cmd_tape(a: &TapeArgs, argv: &[String]) -> Result<Report, CliError> {
    let plan = a.source.resolve()?;
    let sizing = tape_sizing(&plan);
    let mut report = Report::new(RunManifest::new("tape", argv));
    report.manifest.config = plan_json(&plan);
    report.manifest.plan_hash = Some(plan.hash_hex());
    report.line(format!("plan      {} m={} n={}", &plan.hash_hex()[..16], plan.rounds, plan.config.bits));
    report.line(format!("secrets   {} bytes", sizing.secrets_bytes));
    report.line(format!("challenges {} bytes", sizing.challenges_bytes));
    report.line(format!("exchanged {} bytes", sizing.protocol_bytes));
    let mut machine = json!({
        "rounds": plan.rounds,
        "element_bytes": sizing.element_bytes,
        "secrets_bytes": sizing.secrets_bytes,
        "challenges_bytes": sizing.challenges_bytes,
        "tapes_total_bytes": sizing.tapes_total(),
        "protocol_bytes": sizing.protocol_bytes,
    });
    if !a.sizing {
        let (Some(role), Some(out)) = (a.role, &a.out) else {
            return Err(CliError::Usage("--role and --out are required".into()));
        };
        let source = match a.seed {
            Some(s) => {
                report.manifest.seeds.push(s);
                TapeSource::Seeded(s)
            }
            None => TapeSource::Entropy,
        };
        generate_tape(&plan, role, source, out)?;
        report.manifest.add_output("tape", out)?;
        report.line(format!("wrote     {} ({} elements)", out.display(), tape_len(&plan, role)));
        machine["path"] = json!(out);
        machine["elements"] = json!(tape_len(&plan, role));
        machine["sha256"] = json!(file_sha256(out)?);
    }
    report.machine = machine;
    Ok(report)
}

fn bench_mul(bits: u32, count: u64) -> Result<f64, CliError> {
    let spec = FieldSpec::standard(bits).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut source = TapeElements::new(TapeRole::BobChallenges, &spec, TapeSource::Seeded(1));
    let xs: Vec<_> = (0..256).map(|_| source.next_element()).collect();
    let mut acc = spec.one();
    let start = Instant::now();
    for i in 0..count as usize {
        acc = acc.mul(&xs[i & 255]).expect("same field");
    }
    let elapsed = start.elapsed();
    std::hint::black_box(acc);
    Ok(count as f64 / elapsed.as_secs_f64().max(1e-9))
}

fn cmd_bench(a: &BenchArgs, argv: &[String]) -> Result<Report, CliError> {
    let mut report = Report::new(RunManifest::new("bench", argv));
    let mut mul_rows = Vec::new();
    report.line(format!("{:>6} {:>16}", "n", "mul/s"));
    for &bits in &a.bits {
        let rate = bench_mul(bits, a.mults)?;
        report.line(format!("{bits:>6} {rate:>16.4e}"));
        mul_rows.push(json!({ "bits": bits, "mults_per_second": rate }));
    }

    let case1 = PlannerConfig::from_toml_str(DEFAULT_CONFIG)?.plan(0)?;
    let plan = case1.with_rounds(a.rounds.max(2) & !1)?;
    let spec = plan.field_spec()?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("bench.rbcx");
    let timing = plan.schedule().timing_policy(1);
    write_honest_transcript(&path, plan.hash(), &spec, plan.rounds, 1, CommitBit::Zero, timing)?;
    let verified = verify_file(&path, None)?;
    if !verified.verdict.is_accept() {
        return Err(CliError::Usage(format!("benchmark transcript failed to verify: {}", verified.verdict)));
    }
    let rate = verified.rounds_per_second();
    let projected_s = case1.rounds as f64 / rate;
    report.line(format!(
        "verify    {} rounds (n=128) in {:.3} s: {:.4e} rounds/s",
        verified.rounds,
        verified.elapsed.as_secs_f64(),
        rate
    ));
    report.line(format!(
        "projected case1 24h ({} rounds): {:.1} s = {:.2} h on this machine",
        case1.rounds,
        projected_s,
        projected_s / 3600.0
    ));
    report.machine = json!({
        "field_mul": mul_rows,
        "verify": {
            "bits": 128,
            "rounds": verified.rounds,
            "seconds": verified.elapsed.as_secs_f64(),
            "rounds_per_second": rate,
        },
        "projection": {
            "plan": "case1 24h",
            "rounds": case1.rounds,
            "seconds": projected_s,
            "hours": projected_s / 3600.0,
        },
    });
    Ok(report)
}

fn cmd_replay(a: &ReplayArgs, argv: &[String]) -> Result<Report, CliError> {
    let original = RunManifest::load(&a.manifest)?;
    if matches!(original.subcommand.as_str(), "run" | "replay" | "bench") {
        return Err(CliError::Usage(format!("`{}` runs are not reproducible", original.subcommand)));
    }
    std::env::set_current_dir(&original.cwd)?;
    let scratch = tempfile::tempdir()?;

    // Redirect every output file, and every directory holding one, into
    // the scratch directory.
    let mut dirs: HashMap<PathBuf, PathBuf> = HashMap::new();
    let mut files: HashMap<PathBuf, PathBuf> = HashMap::new();
    for o in &original.outputs {
        let parent = o.path.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf);
        let n = dirs.len();
        let target_dir = match &parent {
            Some(p) => dirs.entry(p.clone()).or_insert_with(|| scratch.path().join(n.to_string())).clone(),
            None => scratch.path().to_path_buf(),
        };
        std::fs::create_dir_all(&target_dir)?;
        let name = o.path.file_name().ok_or_else(|| CliError::Usage("output without a file name".into()))?;
        files.insert(o.path.clone(), target_dir.join(name));
    }
    let mut args = vec!["relbc".to_string()];
    let mut after_manifest_flag = false;
    for arg in &original.argv {
        let p = PathBuf::from(arg);
        let mapped = if after_manifest_flag {
            scratch.path().join("manifest.json").display().to_string()
        } else if let Some(f) = files.get(&p) {
            f.display().to_string()
        } else if let Some(d) = dirs.get(&p) {
            d.display().to_string()
        } else if arg.starts_with("--manifest=") {
            format!("--manifest={}", scratch.path().join("manifest.json").display())
        } else {
            arg.clone()
        };
        after_manifest_flag = arg == "--manifest";
        args.push(mapped);
    }
    let code = execute(&args, &mut std::io::sink());

    let mut report = Report::new(RunManifest::new("replay", argv));
    report.manifest.config = original.config.clone();
    report.manifest.plan_hash = original.plan_hash.clone();
    report.manifest.seeds = original.seeds.clone();
    let mut checks = Vec::new();
    let mut all_match = true;
    for o in &original.outputs {
        let replayed = &files[&o.path];
        let hash = file_sha256(replayed).unwrap_or_default();
        let same = hash == o.sha256;
        all_match &= same;
        report.line(format!("{} {} {}", if same { "same  " } else { "DIFFER" }, o.kind, o.path.display()));
        checks.push(
            json!({ "kind": o.kind, "path": o.path, "expected": o.sha256, "replayed": hash, "match": same }),
        );
    }
    report.line(format!("exit      {code}"));
    report.code = if all_match { EXIT_OK } else { EXIT_REJECT };
    report.machine = json!({ "replayed_exit_code": code, "outputs": checks, "all_match": all_match });
    Ok(report)
}
