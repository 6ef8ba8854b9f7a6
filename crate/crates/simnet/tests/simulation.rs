use proptest::prelude::*;
use relbc_core::planner::{resource_plan, ProtocolPlan, SpacetimeConfig, SPEED_OF_LIGHT};
use relbc_core::protocol::{bob_verify, AbortReason, CommitBit, RejectReason, TranscriptStatus, Verdict};
use relbc_simnet::{
    no_signaling_audit, run_simulation, AuditError, AuditViolation, ClockModel, Placements, SimOutcome,
    Strategy,
};

const EXACT: [ClockModel; 2] = [
    ClockModel { offset_s: 0.0, rate_error: 0.0, discipline: relbc_simnet::Discipline::None },
    ClockModel { offset_s: 0.0, rate_error: 0.0, discipline: relbc_simnet::Discipline::None },
];

fn plan(separation_m: f64, offset_m: f64, tau_s: f64, margin_s: f64, bits: u32, m: u64) -> ProtocolPlan {
    let cfg = SpacetimeConfig {
        separation_m,
        alice_offset_m: [offset_m; 2],
        answer_deadline_s: [tau_s; 2],
        margin_s,
        light_speed_m_per_s: SPEED_OF_LIGHT,
        duration_s: 1.0,
        bits,
    };
    resource_plan(&cfg).unwrap().with_rounds(m).unwrap()
}

fn case1(bits: u32, m: u64) -> ProtocolPlan {
    plan(7_000.0, 450.0, 3e-6, 3.3e-6, bits, m)
}

fn run(plan: &ProtocolPlan, strategy: Strategy, seed: u64, bit: CommitBit) -> SimOutcome {
    run_simulation(plan, &Placements::honest(plan), EXACT, &strategy, seed, bit).unwrap()
}

#[test]
fn honest_run_is_accepted() {
    let p = case1(8, 1000);
    for bit in [CommitBit::Zero, CommitBit::One] {
        let out = run(&p, Strategy::Honest, 1, bit);
        assert_eq!(out.transcript.status, TranscriptStatus::Complete);
        assert_eq!(out.transcript.rounds.len(), 1000);
        assert_eq!(bob_verify(&out.transcript), Verdict::Accept(bit));
        assert!(out.report.late_arrivals.is_empty());
        assert_eq!(out.report.margin_violation_count, 0);
    }
}

#[test]
fn runs_are_deterministic() {
    let p = case1(128, 200);
    let a = run(&p, Strategy::Relay, 9, CommitBit::One);
    let b = run(&p, Strategy::Relay, 9, CommitBit::One);
    assert_eq!(a.transcript, b.transcript);
    assert_eq!(a.report.to_json(), b.report.to_json());
    let c = run(&p, Strategy::Honest, 10, CommitBit::One);
    assert_ne!(a.transcript.rounds[0].challenge, c.transcript.rounds[0].challenge);
}

#[test]
fn measured_round_spacing_matches_schedule() {
    let p = case1(8, 100);
    let out = run(&p, Strategy::Honest, 2, CommitBit::Zero);
    let s = p.schedule();
    let starts: Vec<u64> = out.report.rounds.iter().map(|r| r.issued_global_ns).collect();
    for k in 0..starts.len() - 2 {
        assert_eq!(starts[k + 2] - starts[k], s.period_ns());
        let expected_gap = s.light_ns - s.deadline_ns[0] - s.margin_ns;
        assert_eq!(starts[k + 1] - starts[k], expected_gap);
    }
}

#[test]
fn relay_misses_the_deadline_by_the_margin() {
    let p = case1(128, 50);
    let out = run(&p, Strategy::Relay, 3, CommitBit::Zero);
    assert_eq!(out.transcript.status, TranscriptStatus::Aborted { reason: AbortReason::Timing, round: 2 });
    let late = &out.report.late_arrivals[0];
    assert_eq!(late.round, 2);
    let margin = p.schedule().margin_ns;
    // Light delays are rounded up on each of the three legs.
    assert!(late.excess_ns >= margin && late.excess_ns <= margin + 3, "{}", late.excess_ns);
    assert!(matches!(bob_verify(&out.transcript), Verdict::Reject(RejectReason::Aborted { round: 2, .. })));
}

#[test]
fn late_decision_boundary() {
    let p = case1(128, 20);
    for round in [1, 2, 7] {
        let early = run(&p, Strategy::LateDecision { round, offset_ns: -1 }, 4, CommitBit::One);
        assert_eq!(bob_verify(&early.transcript), Verdict::Accept(CommitBit::One));
        let exact = run(&p, Strategy::LateDecision { round, offset_ns: 0 }, 4, CommitBit::One);
        assert_eq!(bob_verify(&exact.transcript), Verdict::Accept(CommitBit::One));
        let late = run(&p, Strategy::LateDecision { round, offset_ns: 1 }, 4, CommitBit::One);
        assert_eq!(late.report.aborted_round(), Some(round));
        assert_eq!(late.report.late_arrivals[0].excess_ns, 1);
    }
}

#[test]
fn wrong_bit_reveal_is_rejected_not_aborted() {
    let p = case1(128, 30);
    let out = run(&p, Strategy::WrongBitReveal, 5, CommitBit::Zero);
    assert_eq!(out.transcript.status, TranscriptStatus::Complete);
    assert_eq!(bob_verify(&out.transcript), Verdict::Reject(RejectReason::BitMismatch));
}

#[test]
fn placement_cheat_is_caught_by_timing() {
    let p = case1(128, 30);
    // 450 m is inside the allowance but its round trip exceeds 3 us.
    for (station, round) in [(1u8, 1u64), (2, 2)] {
        let out = run(&p, Strategy::PlacementCheat { station, distance_m: 2_000.0 }, 6, CommitBit::Zero);
        assert_eq!(out.report.aborted_round(), Some(round));
        let audit = no_signaling_audit(&out.transcript, &p, &out.report.placements);
        if round > 1 {
            assert_eq!(audit.unwrap().outside_allowance, vec![station]);
        }
    }
}

#[test]
fn drift_beyond_budget_is_flagged() {
    let p = case1(128, 1000);
    let budget = p.drift_budget;
    let over = run_simulation(
        &p,
        &Placements::honest(&p),
        [ClockModel::drifting(3.0 * budget); 2],
        &Strategy::Honest,
        7,
        CommitBit::Zero,
    )
    .unwrap();
    assert!(over.report.margin_violation_count > 0);
    let under = run_simulation(
        &p,
        &Placements::honest(&p),
        [ClockModel::drifting(0.5 * budget); 2],
        &Strategy::Honest,
        7,
        CommitBit::Zero,
    )
    .unwrap();
    assert_eq!(under.report.margin_violation_count, 0);
    assert_eq!(bob_verify(&under.transcript), Verdict::Accept(CommitBit::Zero));
}

#[test]
fn pps_discipline_violations_are_reported() {
    let p = case1(8, 10);
    let good = run_simulation(
        &p,
        &Placements::honest(&p),
        [ClockModel::pps(0.0, 5e-9); 2],
        &Strategy::Honest,
        1,
        CommitBit::Zero,
    )
    .unwrap();
    assert!(good.report.discipline_violations.is_empty());
    let bad = run_simulation(
        &p,
        &Placements::honest(&p),
        [ClockModel::exact(), ClockModel::pps(0.0, 2e-8)],
        &Strategy::Honest,
        1,
        CommitBit::Zero,
    )
    .unwrap();
    assert_eq!(bad.report.discipline_violations.len(), 1);
    assert!(bad.report.discipline_violations[0].starts_with("station 2"));
}

#[test]
fn audit_on_honest_runs_shows_the_margin() {
    let p = case1(128, 500);
    let out = run(&p, Strategy::Honest, 8, CommitBit::One);
    let audit = no_signaling_audit(&out.transcript, &p, &out.report.placements).unwrap();
    assert!(audit.passed());
    assert_eq!(audit.pairs_checked, 499);
    let margin = p.schedule().margin_ns as i64;
    assert!(audit.worst_slack_ns.unwrap() >= margin - 1);
}

#[test]
fn audit_at_zero_margin_passes_with_zero_slack() {
    let p = plan(7_000.0, 450.0, 3e-6, 0.0, 8, 40);
    let out = run(&p, Strategy::Honest, 1, CommitBit::Zero);
    let audit = no_signaling_audit(&out.transcript, &p, &out.report.placements).unwrap();
    assert!(audit.passed());
    assert_eq!(audit.worst_slack_ns, Some(0));
}

#[test]
fn audit_flags_an_injected_late_answer() {
    let p = case1(128, 60);
    let out = run(&p, Strategy::Honest, 1, CommitBit::Zero);
    let mut t = out.transcript.clone();
    let tau = t.timing.deadline_ns[1];
    t.rounds[23].answer_received_at = t.rounds[23].challenge_issued_at + tau + 5_000;
    let audit = no_signaling_audit(&t, &p, &out.report.placements).unwrap();
    assert!(!audit.passed());
    assert!(audit.violations.iter().all(|v| v.round() == 24));
    assert!(audit.violations.contains(&AuditViolation::LateAnswer { round: 24, excess_ns: 5_000 }));
    assert!(matches!(
        no_signaling_audit(&t.without_timing(), &p, &out.report.placements),
        Err(AuditError::Incomplete(_))
    ));
}

#[test]
fn overlapping_rounds_complete() {
    // Deadlines longer than the inter-round gap: rounds at the two
    // stations overlap in time.
    let p = plan(10_000e3, 3_000e3, 20e-3, 1e-3, 128, 40);
    let gap = p.schedule().gap_ns[0];
    assert!(gap < p.schedule().deadline_ns[0]);
    let out = run(&p, Strategy::Honest, 2, CommitBit::One);
    assert_eq!(bob_verify(&out.transcript), Verdict::Accept(CommitBit::One));
    let relay = run(&p, Strategy::Relay, 2, CommitBit::One);
    assert_eq!(relay.report.aborted_round(), Some(2));
}

fn feasible(sep_km: f64, l_frac: f64, tau_frac: f64, tm_frac: f64) -> Option<ProtocolPlan> {
    let sep = sep_km * 1e3;
    let light = sep / SPEED_OF_LIGHT;
    let l = l_frac * sep / 2.0;
    let tau = tau_frac * light;
    let tm = (tm_frac * light).max(1e-9);
    let cfg = SpacetimeConfig {
        separation_m: sep,
        alice_offset_m: [l; 2],
        answer_deadline_s: [tau; 2],
        margin_s: tm,
        light_speed_m_per_s: SPEED_OF_LIGHT,
        duration_s: 1.0,
        bits: 16,
    };
    let p = resource_plan(&cfg).ok()?.with_rounds(12).ok()?;
    p.check_runnable().ok()?;
    Some(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn honest_completeness_and_relay_soundness(
        sep_km in 1.0f64..20_000.0,
        l_frac in 0.01f64..0.45,
        tau_frac in 0.05f64..0.45,
        tm_frac in 0.001f64..0.3,
        seed: u64,
    ) {
        let Some(p) = feasible(sep_km, l_frac, tau_frac, tm_frac) else {
            return Ok(());
        };
        let honest = run(&p, Strategy::Honest, seed, CommitBit::One);
        prop_assert_eq!(bob_verify(&honest.transcript), Verdict::Accept(CommitBit::One));
        let audit = no_signaling_audit(&honest.transcript, &p, &honest.report.placements).unwrap();
        prop_assert!(audit.worst_slack_ns.unwrap() >= p.schedule().margin_ns as i64 - 1);
        let relay = run(&p, Strategy::Relay, seed, CommitBit::One);
        prop_assert!(relay.transcript.is_aborted());
        prop_assert!(!bob_verify(&relay.transcript).is_accept());
    }
}
