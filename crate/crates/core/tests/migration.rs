mod common;

use common::{
    migrate, owned_ro_instances, pump, ro_lifecycle, ro_srk, source_operational, srk_holders,
    World, RO,
};
use mtm_core::crypto::{hash, KeyUsage, SuiteId};
use mtm_core::mtm::{Lifecycle, MtmCommand, MtmError, PCR_ENGINE};
use mtm_core::platform::Platform;
use mtm_core::protocols::{
    DestMigration, DestState, MessageBody, MigrationConfig, ProtocolError, SourceMigration,
    SourceState,
};

fn pair(suite: SuiteId) -> (World, Platform, Platform) {
    let mut w = World::new(suite);
    let s = w.owned_device(100);
    let d = w.owned_device(200);
    (w, s, d)
}

fn assert_source_authoritative(
    source: &mut Platform,
    dest: &Platform,
    srk: &mtm_core::crypto::Digest,
) {
    assert_eq!(ro_lifecycle(source), Some(Lifecycle::Owned));
    assert_eq!(ro_srk(source), Some(*srk));
    assert_eq!(srk_holders(&[source, dest], srk), 1);
    assert!(source_operational(source));
}

#[test]
fn happy_path_moves_the_hierarchy() {
    let (_w, mut s, mut d) = pair(SuiteId::Standard);
    let src_handle = s.subsystem(RO).unwrap().vmtm;
    let srk = ro_srk(&s).unwrap();
    let key = s
        .mtm_mut()
        .route_command(
            src_handle,
            MtmCommand::CreateWrapKey {
                parent: srk,
                usage: KeyUsage::Signing,
                pcr_binding: None,
            },
        )
        .unwrap()
        .public_key()
        .unwrap();

    let (src, dst, result) = migrate(&mut s, &mut d);
    result.unwrap();
    assert_eq!(src.state(), SourceState::Committed);
    assert_eq!(dst.unwrap().state(), DestState::Committed);

    assert_eq!(
        s.mtm().instance(src_handle).unwrap_err(),
        MtmError::UnknownHandle
    );
    assert_eq!(
        s.mtm_mut()
            .route_command(src_handle, MtmCommand::ReadLifecycle)
            .unwrap_err(),
        MtmError::UnknownHandle
    );
    assert!(s.subsystem(RO).is_none());
    assert_eq!(ro_srk(&d), Some(srk));
    assert_eq!(srk_holders(&[&s, &d], &srk), 1);

    let dest_handle = d.subsystem(RO).unwrap().vmtm;
    let mtm = d.mtm_mut();
    mtm.route_command(
        dest_handle,
        MtmCommand::LoadKey {
            key_id: key.key_id(),
        },
    )
    .unwrap();
    let sig = mtm
        .route_command(
            dest_handle,
            MtmCommand::Sign {
                key_id: key.key_id(),
                data: b"after".to_vec(),
            },
        )
        .unwrap()
        .signature()
        .unwrap();
    assert!(key.verify(b"after", &sig));

    let again = SourceMigration::init(&mut s, RO, d.device_id(), MigrationConfig::default());
    assert_eq!(again.unwrap_err(), ProtocolError::NoSubsystem);
}

#[test]
fn revoked_source_is_refused() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let cert_id = s
        .subsystem(RO)
        .unwrap()
        .certificate
        .as_ref()
        .unwrap()
        .cert_id();
    d.rim_store_mut().revoke_subject(cert_id, 0);
    let (src, dst, result) = migrate(&mut s, &mut d);
    assert_eq!(result.unwrap_err(), ProtocolError::SourceRevoked);
    assert!(dst.is_none());
    assert_eq!(src.state(), SourceState::Aborted);
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn owners_must_consent() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    d.owner_approves_migration = false;
    assert_eq!(
        migrate(&mut s, &mut d).2.unwrap_err(),
        ProtocolError::OwnerDeclined
    );
    s.owner_approves_migration = false;
    let init = SourceMigration::init(&mut s, RO, d.device_id(), MigrationConfig::default());
    assert_eq!(init.unwrap_err(), ProtocolError::OwnerDeclined);
}

#[test]
fn source_without_subsystem_cannot_start() {
    let w = World::new(SuiteId::Toy);
    let mut s = w.booted(1);
    let init = SourceMigration::init(&mut s, RO, hash(b"elsewhere"), MigrationConfig::default());
    assert_eq!(init.unwrap_err(), ProtocolError::NoSubsystem);
}

#[test]
fn foreign_stakeholder_is_refused() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let (_, mut init) =
        SourceMigration::init(&mut s, RO, d.device_id(), MigrationConfig::default()).unwrap();
    if let MessageBody::MigrationInit(i) = &mut init.body {
        i.ro = "someone-else".into();
    }
    let (err, refusal) =
        DestMigration::accept_init(&mut d, &init, MigrationConfig::default()).unwrap_err();
    assert_eq!(err, ProtocolError::StakeholderMismatch);
    assert!(matches!(refusal.body, MessageBody::MigrationRefusal(_)));
}

#[test]
fn untrusted_target_state_aborts() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let dh = d.subsystem(RO).unwrap().vmtm;
    d.mtm_mut()
        .route_command(
            dh,
            MtmCommand::Extend {
                index: PCR_ENGINE,
                digest: hash(b"malware"),
            },
        )
        .unwrap();
    let (src, dst, result) = migrate(&mut s, &mut d);
    assert_eq!(result.unwrap_err(), ProtocolError::TargetUntrusted);
    assert_eq!(src.state(), SourceState::Aborted);
    assert_eq!(dst.unwrap().state(), DestState::Aborted);
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn replayed_offer_is_stale() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (_dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    assert!(src.deliver(&mut s, &offer).is_empty());
    assert_eq!(src.package(&mut s).len(), 1);
    for _ in 0..config.timeout_ticks {
        src.tick(&mut s);
    }
    assert_eq!(src.error(), Some(&ProtocolError::TimedOut));

    let (mut again, _) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    again.deliver(&mut s, &offer);
    assert_eq!(again.error(), Some(&ProtocolError::StaleOffer));
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn state_change_after_lock_blocks_export() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (_dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    assert_eq!(src.state(), SourceState::Locked);
    let sh = s.subsystem(RO).unwrap().vmtm;
    s.mtm_mut()
        .route_command(
            sh,
            MtmCommand::Extend {
                index: 3,
                digest: hash(b"late"),
            },
        )
        .unwrap();
    let out = src.package(&mut s);
    assert!(matches!(out[0].body, MessageBody::MigrationDecision(ref d) if !d.commit));
    assert_eq!(src.error(), Some(&ProtocolError::StateChangedSinceLock));
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn tampered_package_is_detected() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let mut package = src.package(&mut s).remove(0);
    if let MessageBody::MigrationPackage(p) = &mut package.body {
        let n = p.instance_image.len();
        p.instance_image[n / 2] ^= 0x40;
    }
    pump(&mut s, &mut d, &mut src, &mut dst, vec![package]);
    assert_eq!(dst.state(), DestState::Aborted);
    assert_eq!(dst.error(), Some(&ProtocolError::IntegrityFailure));
    assert_eq!(src.state(), SourceState::Aborted);
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn wrong_nonce_in_proof_is_rejected() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let mut package = src.package(&mut s).remove(0);
    if let MessageBody::MigrationPackage(p) = &mut package.body {
        p.source_state_proof.nonce.0[0] ^= 1;
    }
    dst.deliver(&mut d, &package);
    assert_eq!(dst.error(), Some(&ProtocolError::NonceMismatch));
}

#[test]
fn lost_notice_times_out_and_source_stays_owner() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let package = src.package(&mut s).remove(0);
    let status = dst.deliver(&mut d, &package);
    assert_eq!(status.len(), 1);
    assert_eq!(dst.state(), DestState::Staged);
    assert_eq!(srk_holders(&[&s, &d], &srk), 1);

    let mut decision = Vec::new();
    for _ in 0..config.timeout_ticks {
        decision.extend(src.tick(&mut s));
        // Status retransmissions are lost too.
        dst.tick(&mut d);
    }
    assert_eq!(src.state(), SourceState::Aborted);
    assert_source_authoritative(&mut s, &d, &srk);
    dst.deliver(&mut d, &decision[0]);
    assert_eq!(dst.state(), DestState::Aborted);
    assert!(d.mtm().staged_imports().next().is_none());
    assert_eq!(srk_holders(&[&s, &d], &srk), 1);
}

#[test]
fn lost_commit_is_recovered_by_retransmission() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let package = src.package(&mut s).remove(0);
    let status = dst.deliver(&mut d, &package).remove(0);
    let commit = src.deliver(&mut s, &status);
    assert_eq!(src.state(), SourceState::Committed);
    drop(commit);
    // Nobody holds a usable copy until the destination hears the decision.
    assert_eq!(srk_holders(&[&s, &d], &srk), 0);

    let mut resent = Vec::new();
    for _ in 0..config.retransmit_ticks {
        resent.extend(dst.tick(&mut d));
    }
    assert_eq!(resent.len(), 1);
    let again = src.deliver(&mut s, &resent[0]);
    assert!(matches!(again[0].body, MessageBody::MigrationDecision(ref d) if d.commit));
    dst.deliver(&mut d, &again[0]);
    assert_eq!(dst.state(), DestState::Committed);
    assert_eq!(ro_srk(&d), Some(srk));
    assert_eq!(srk_holders(&[&s, &d], &srk), 1);
    // Duplicate notice after commit changes nothing.
    src.deliver(&mut s, &resent[0]);
    assert_eq!(src.state(), SourceState::Committed);
    assert_eq!(owned_ro_instances(&s), 0);
}

#[test]
fn failure_notice_returns_source_to_owned() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let mut package = src.package(&mut s).remove(0);
    let MessageBody::MigrationPackage(ref mut p) = package.body else {
        panic!("expected a package")
    };
    p.source_state_proof.nonce.0[0] ^= 1;
    let notice = dst.deliver(&mut d, &package);
    assert_eq!(dst.state(), DestState::Aborted);
    src.deliver(&mut s, &notice[0]);
    assert_eq!(src.state(), SourceState::Aborted);
    assert_eq!(src.error(), Some(&ProtocolError::NonceMismatch));
    assert_source_authoritative(&mut s, &d, &srk);
}

#[test]
fn altered_status_or_decision_is_ignored() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (mut dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let package = src.package(&mut s);
    let status = dst.deliver(&mut d, &package[0]).remove(0);

    let mut failure = status.clone();
    let MessageBody::MigrationStatus(ref mut st) = failure.body else {
        panic!("expected a status")
    };
    st.code = ProtocolError::ConfigMismatch.code();
    assert!(src.deliver(&mut s, &failure).is_empty());
    assert_eq!(src.state(), SourceState::AwaitingStatus);

    let mut decision = src.deliver(&mut s, &status).remove(0);
    assert_eq!(src.state(), SourceState::Committed);
    let MessageBody::MigrationDecision(ref mut dec) = decision.body else {
        panic!("expected a decision")
    };
    dec.commit = false;
    dst.deliver(&mut d, &decision);
    assert_eq!(dst.state(), DestState::Staged);

    let again = src.deliver(&mut s, &status);
    dst.deliver(&mut d, &again[0]);
    assert_eq!(dst.state(), DestState::Committed);
    assert_eq!(srk_holders(&[&s, &d], &srk), 1);
}

#[test]
fn delete_before_send_loses_the_subsystem_on_loss() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let srk = ro_srk(&s).unwrap();
    let config = MigrationConfig {
        delete_before_send: true,
        ..MigrationConfig::default()
    };
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (_dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    src.package(&mut s);
    assert!(s.subsystem(RO).is_none());
    for _ in 0..config.timeout_ticks {
        src.tick(&mut s);
    }
    assert_eq!(src.state(), SourceState::Aborted);
    assert_eq!(srk_holders(&[&s, &d], &srk), 0);
}

#[test]
fn secrets_never_travel_in_clear() {
    let (_w, mut s, mut d) = pair(SuiteId::Toy);
    let sh = s.subsystem(RO).unwrap().vmtm;
    let srk_node = s
        .mtm()
        .instance(sh)
        .unwrap()
        .hierarchy()
        .get(&ro_srk(&s).unwrap())
        .unwrap()
        .clone();
    let wrapped = srk_node.wrapped_private().to_vec();
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(&mut s, RO, d.device_id(), config).unwrap();
    let (_dst, offer) = DestMigration::accept_init(&mut d, &init, config).unwrap();
    src.deliver(&mut s, &offer);
    let package = src.package(&mut s).remove(0).encode();
    // The hierarchy is only present re-encrypted under the migration key.
    assert!(!package
        .windows(wrapped.len())
        .any(|w| w == wrapped.as_slice()));
}
