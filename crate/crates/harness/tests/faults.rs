mod common;

use std::sync::OnceLock;

use common::{operational, owned_pair, srk};
use mtm_core::crypto::SuiteId;
use mtm_core::protocols::{MessageType, ProtocolError};
use mtm_sim::{
    run_migration, srk_holders, FaultKind, FaultPlan, MigrationOutcome, MigrationRun, SimDevice,
    TransportKind,
};
use proptest::prelude::*;

fn fixture() -> (SimDevice, SimDevice) {
    static PAIR: OnceLock<(SimDevice, SimDevice)> = OnceLock::new();
    let (s, d) = PAIR.get_or_init(|| {
        let (s, d, _) = owned_pair(SuiteId::Toy, 1);
        (s, d)
    });
    (s.clone(), d.clone())
}

fn migrate(plan: FaultPlan, transport: TransportKind) -> (MigrationOutcome, SimDevice, SimDevice) {
    let (mut s, mut d) = fixture();
    let mut run = MigrationRun {
        plan,
        transport,
        ..MigrationRun::default()
    };
    run.config.timeout_ticks = 6;
    let outcome = run_migration(&mut s, &mut d, common::RO, &run);
    (outcome, s, d)
}

/// Either the subsystem moved and works on the destination, or it still
/// works on the source and nothing holds it elsewhere.
fn assert_clean(
    outcome: &MigrationOutcome,
    s: &mut SimDevice,
    d: &mut SimDevice,
    plan: &FaultPlan,
) {
    assert!(!outcome.livelock, "{plan}: no termination");
    assert!(
        outcome.uniqueness_held(),
        "{plan}: {} holders",
        outcome.max_holders
    );
    assert!(outcome.is_clean(), "{plan}: {outcome:?}");
    match outcome.result {
        Ok(()) => assert!(operational(d), "{plan}: destination not operational"),
        Err(_) => assert!(operational(s), "{plan}: source not operational"),
    }
}

#[test]
fn every_kind_on_every_message_terminates_cleanly() {
    let types = [
        MessageType::MigrationInit,
        MessageType::MigrationOffer,
        MessageType::MigrationPackage,
        MessageType::MigrationStatus,
        MessageType::MigrationDecision,
    ];
    for kind in FaultKind::ALL {
        for t in types {
            let plan: FaultPlan = format!("{}:{}", kind.name(), t.name()).parse().unwrap();
            let (outcome, mut s, mut d) = migrate(plan.clone(), TransportKind::InProcess);
            assert_clean(&outcome, &mut s, &mut d, &plan);
        }
    }
}

#[test]
fn lost_decision_is_recovered() {
    let plan: FaultPlan = "drop:decision".parse().unwrap();
    let (outcome, s, d) = migrate(plan, TransportKind::InProcess);
    assert_eq!(outcome.result, Ok(()));
    assert!(outcome.dest_holds && !outcome.source_holds);
    assert!(outcome.channel.sent > 5, "status was retransmitted");
    let _ = (s, d);
}

#[test]
fn flipped_frames_are_rejected_by_the_channel() {
    let plan: FaultPlan = "flip:offer/77".parse().unwrap();
    let (outcome, mut s, mut d) = migrate(plan.clone(), TransportKind::InProcess);
    assert_eq!(outcome.channel.rejected, 1);
    assert_eq!(outcome.result, Err(ProtocolError::TimedOut));
    assert_clean(&outcome, &mut s, &mut d, &plan);
}

#[test]
fn closed_channel_fails_before_anything_moves() {
    let (mut s, mut d) = fixture();
    let run = MigrationRun {
        close_channel: true,
        ..MigrationRun::default()
    };
    let outcome = run_migration(&mut s, &mut d, common::RO, &run);
    assert_eq!(outcome.result, Err(ProtocolError::ChannelFailed));
    assert!(outcome.source_holds);
    assert!(operational(&mut s));
}

#[test]
fn delete_before_send_loses_the_subsystem_with_the_package() {
    let (mut s, mut d) = fixture();
    let key = srk(&s).unwrap();
    let mut run = MigrationRun {
        plan: "drop:package".parse().unwrap(),
        ..MigrationRun::default()
    };
    run.config.delete_before_send = true;
    run.config.timeout_ticks = 6;
    let outcome = run_migration(&mut s, &mut d, common::RO, &run);
    assert_eq!(outcome.result, Err(ProtocolError::TimedOut));
    assert!(outcome.uniqueness_held());
    assert_eq!(srk_holders(&[s.platform(), d.platform()], &key), 0);
}

#[test]
fn loopback_and_in_process_agree() {
    for plan in [
        "",
        "drop:package",
        "dup:offer,reorder:#2",
        "tamper:package",
        "flip:status/3",
        "drop:decision,dup:status@2",
    ] {
        let plan: FaultPlan = plan.parse().unwrap();
        let (a, sa, da) = migrate(plan.clone(), TransportKind::InProcess);
        let (b, sb, db) = migrate(plan.clone(), TransportKind::Loopback);
        assert_eq!(a.result, b.result, "{plan}");
        assert_eq!(
            (a.steps, a.ticks, a.max_holders),
            (b.steps, b.ticks, b.max_holders),
            "{plan}"
        );
        assert_eq!(a.channel, b.channel, "{plan}");
        assert_eq!(sa.log().head(), sb.log().head(), "{plan}");
        assert_eq!(da.log().head(), db.log().head(), "{plan}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_fault_plans_terminate_cleanly(plan in common::fault_plan(4)) {
        let (outcome, mut s, mut d) = migrate(plan.clone(), TransportKind::InProcess);
        assert_clean(&outcome, &mut s, &mut d, &plan);
    }

    #[test]
    fn fault_plans_round_trip_through_text(plan in common::fault_plan(6)) {
        let text = plan.to_string();
        prop_assert_eq!(text.parse::<FaultPlan>().unwrap(), plan);
    }
}
