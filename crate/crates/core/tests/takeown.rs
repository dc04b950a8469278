mod common;

use common::{owned_ro_instances, World, RO};
use mtm_core::crypto::SuiteId;
use mtm_core::engine::EngineState;
use mtm_core::mtm::{Lifecycle, MtmCommand, PCR_ENGINE};
use mtm_core::protocols::{
    DeviceTakeOwnership, MessageBody, ProtocolError, ProtocolMessage, TakeOwnershipState,
};
use proptest::prelude::*;

#[test]
fn happy_path_reaches_running_owned_subsystem() {
    let mut w = World::new(SuiteId::Standard);
    let mut p = w.booted(1);
    w.take_ownership(&mut p, "telephony").unwrap();

    let tss = p.subsystem(RO).unwrap();
    assert_eq!(tss.engine.lifecycle, EngineState::Running);
    let (handle, aik, cert) = (tss.vmtm, tss.aik.unwrap(), tss.certificate.clone().unwrap());
    assert_eq!(
        p.mtm().instance(handle).unwrap().lifecycle(),
        Lifecycle::Owned
    );
    assert_eq!(owned_ro_instances(&p), 1);

    let nonce = p.rng().nonce();
    let quote = p
        .mtm_mut()
        .route_command(
            handle,
            MtmCommand::Quote {
                aik,
                nonce,
                selection: vec![PCR_ENGINE],
            },
        )
        .unwrap()
        .quote()
        .unwrap();
    w.agent.verify_attestation(&cert, &quote, &nonce).unwrap();
    assert_eq!(quote.pcrs, *w.agent.expected_state());
}

#[test]
fn prepare_needs_boot_and_a_free_slot() {
    let w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut p = w.dm.provision(3, SuiteId::Toy);
    assert_eq!(
        DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap_err(),
        ProtocolError::DeviceNotBooted
    );
    p.boot().unwrap();
    let s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
    assert_eq!(s.state(), TakeOwnershipState::Prepared);
    assert_eq!(
        DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap_err(),
        ProtocolError::DuplicateSubsystem
    );
}

#[test]
fn tampered_pristine_image_never_leaves_the_device() {
    let w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut p = w.booted(4);
    let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
    p.subsystem_mut(RO).unwrap().engine.image[0] ^= 1;
    assert_eq!(
        s.build_request(&mut p, w.agent.transport_public())
            .unwrap_err(),
        ProtocolError::AttestationFailed
    );
    assert_eq!(s.state(), TakeOwnershipState::Aborted);
    assert!(p.subsystem(RO).is_none());
    assert_eq!(owned_ro_instances(&p), 0);
}

#[test]
fn temporary_keys_are_fresh_per_session() {
    let w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut ids = Vec::new();
    for seed in [5, 6] {
        let mut p = w.booted(seed);
        let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
        s.build_request(&mut p, w.agent.transport_public()).unwrap();
        ids.push(s.temp_key_id().unwrap());
    }
    assert_ne!(ids[0], ids[1]);
}

#[test]
fn disallowed_purpose_is_rejected() {
    let mut w = World::new(SuiteId::Toy);
    let mut p = w.booted(7);
    assert_eq!(
        w.take_ownership(&mut p, "payments").unwrap_err(),
        ProtocolError::PurposeRejected
    );
    assert!(p.subsystem(RO).is_none());
    assert_eq!(owned_ro_instances(&p), 0);
}

#[test]
fn replayed_request_is_refused() {
    let mut w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut p = w.booted(8);
    let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
    let request = s
        .build_request(&mut p, w.agent.transport_public())
        .unwrap()
        .encode();
    assert!(w.agent.respond(&request).1.is_none());
    assert_eq!(
        w.agent.respond(&request).1,
        Some(ProtocolError::SessionMismatch)
    );
}

#[test]
fn grant_for_another_ek_fails_to_decrypt() {
    let mut w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut a = w.booted(9);
    let mut b = w.booted(10);
    let mut sa = DeviceTakeOwnership::prepare(&mut a, &ro, "telephony").unwrap();
    let mut sb = DeviceTakeOwnership::prepare(&mut b, &ro, "telephony").unwrap();
    let ra = sa
        .build_request(&mut a, w.agent.transport_public())
        .unwrap();
    sb.build_request(&mut b, w.agent.transport_public())
        .unwrap();
    let (grant_a, err) = w.agent.respond(&ra.encode());
    assert!(err.is_none());
    let misdirected = ProtocolMessage::new(sb.session(), grant_a.body);
    assert_eq!(
        sb.complete(&mut b, &misdirected).unwrap_err(),
        ProtocolError::DecryptFailed
    );
    assert!(b.subsystem(RO).is_none());
}

#[test]
fn swapped_component_fails_boot() {
    let mut w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut p = w.booted(11);
    let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
    let request = s.build_request(&mut p, w.agent.transport_public()).unwrap();
    let (grant, _) = w.agent.respond(&request.encode());
    let tss = p.subsystem_mut(RO).unwrap();
    let service = tss
        .services_own
        .iter_mut()
        .find(|s| s.id == "ts-generic-comm")
        .unwrap();
    service.image = b"rogue comm stack".to_vec();
    assert_eq!(
        s.complete(&mut p, &grant).unwrap_err(),
        ProtocolError::BootFailed
    );
    assert!(p.subsystem(RO).is_none());
    assert_eq!(owned_ro_instances(&p), 0);
}

#[test]
fn rejection_reaches_the_device_and_aborts() {
    let mut w = World::new(SuiteId::Toy);
    let ro = w.agent.stakeholder().clone();
    let mut p = w.booted(12);
    let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "payments").unwrap();
    let request = s.build_request(&mut p, w.agent.transport_public()).unwrap();
    let (reply, _) = w.agent.respond(&request.encode());
    assert!(matches!(reply.body, MessageBody::TakeOwnershipRejection(_)));
    assert_eq!(
        s.complete(&mut p, &reply).unwrap_err(),
        ProtocolError::PurposeRejected
    );
    assert_eq!(s.state(), TakeOwnershipState::Aborted);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_bit_flip_in_request_fails_decryption(seed in 0u64..1_000, bit in any::<prop::sample::Index>()) {
        let mut w = World::new(SuiteId::Toy);
        let ro = w.agent.stakeholder().clone();
        let mut p = w.booted(seed);
        let mut s = DeviceTakeOwnership::prepare(&mut p, &ro, "telephony").unwrap();
        let mut bytes = s.build_request(&mut p, w.agent.transport_public()).unwrap().encode();
        let bit = bit.index(bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        let (reply, err) = w.agent.respond(&bytes);
        prop_assert_eq!(err, Some(ProtocolError::DecryptFailed));
        prop_assert!(s.complete(&mut p, &reply).is_err());
        prop_assert_eq!(owned_ro_instances(&p), 0);
    }
}
