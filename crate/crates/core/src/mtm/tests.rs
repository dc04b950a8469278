use super::*;
use crate::crypto::{hash, Nonce};

fn owned(dev: &mut MtmDevice, who: &str) -> InstanceHandle {
    let h = dev.create_instance(who, Profile::Mrtm).unwrap();
    dev.route_command(
        h,
        MtmCommand::InstallEk {
            certificate: vec![],
        },
    )
    .unwrap();
    dev.route_command(
        h,
        MtmCommand::TakeOwnership {
            owner_auth: [7; 32],
        },
    )
    .unwrap();
    h
}

#[test]
fn error_codes_round_trip() {
    for code in 1..=23 {
        let e = MtmError::from_code(code, 3).unwrap();
        assert_eq!(e.code(), code);
        assert_eq!(MtmError::from_code(e.code(), e.detail()), Some(e));
    }
    assert_eq!(MtmError::from_code(0, 0), None);
    assert_eq!(MtmError::from_code(24, 0), None);
}

#[test]
fn handles_are_never_reused() {
    let mut dev = MtmDevice::new(1, SuiteId::Standard);
    let a = dev.create_instance("A", Profile::Mltm).unwrap();
    dev.destroy_instance(a).unwrap();
    let b = dev.create_instance("A", Profile::Mltm).unwrap();
    assert_ne!(a, b);
    assert_eq!(
        dev.route_command(a, MtmCommand::ReadLifecycle),
        Err(MtmError::UnknownHandle)
    );
}

#[test]
fn duplicate_stakeholder_and_resource_limit() {
    let config = MtmConfig {
        max_instances: 2,
        max_depth: 8,
    };
    let mut dev = MtmDevice::with_config(1, SuiteId::Toy, config);
    dev.create_instance("A", Profile::Mltm).unwrap();
    assert_eq!(
        dev.create_instance("A", Profile::Mrtm),
        Err(MtmError::DuplicateStakeholder)
    );
    dev.create_instance("B", Profile::Mltm).unwrap();
    assert_eq!(
        dev.create_instance("C", Profile::Mltm),
        Err(MtmError::ResourceLimit)
    );
}

#[test]
fn mltm_cannot_verify_rims() {
    let mut dev = MtmDevice::new(2, SuiteId::Toy);
    let h = dev.create_instance("U", Profile::Mltm).unwrap();
    assert_eq!(
        dev.route_command(h, MtmCommand::IncrementCounter),
        Err(MtmError::ProfileViolation)
    );
    assert!(dev.route_command(h, MtmCommand::ReadCounter).is_ok());
}

#[test]
fn ownership_and_keys() {
    let mut dev = MtmDevice::new(3, SuiteId::Standard);
    let h = owned(&mut dev, "RO");
    assert_eq!(
        dev.route_command(
            h,
            MtmCommand::TakeOwnership {
                owner_auth: [0; 32]
            }
        ),
        Err(MtmError::AlreadyOwned)
    );
    let srk = dev.instance(h).unwrap().srk_id().unwrap();
    let signer = dev
        .route_command(
            h,
            MtmCommand::CreateWrapKey {
                parent: srk,
                usage: KeyUsage::Signing,
                pcr_binding: None,
            },
        )
        .unwrap()
        .public_key()
        .unwrap();
    let sig = dev
        .route_command(
            h,
            MtmCommand::Sign {
                key_id: signer.key_id(),
                data: b"msg".to_vec(),
            },
        )
        .unwrap()
        .signature()
        .unwrap();
    assert!(signer.verify(b"msg", &sig));
}

#[test]
fn bound_key_refuses_after_pcr_change() {
    let mut dev = MtmDevice::new(4, SuiteId::Standard);
    let h = owned(&mut dev, "RO");
    let srk = dev.instance(h).unwrap().srk_id().unwrap();
    let binding = dev.instance(h).unwrap().pcrs().select(&[2]).unwrap();
    let key = dev
        .route_command(
            h,
            MtmCommand::CreateWrapKey {
                parent: srk,
                usage: KeyUsage::Signing,
                pcr_binding: Some(binding),
            },
        )
        .unwrap()
        .public_key()
        .unwrap();
    assert!(dev
        .route_command(
            h,
            MtmCommand::LoadKey {
                key_id: key.key_id()
            }
        )
        .is_ok());
    dev.route_command(
        h,
        MtmCommand::Extend {
            index: 2,
            digest: hash(b"x"),
        },
    )
    .unwrap();
    assert_eq!(
        dev.route_command(
            h,
            MtmCommand::LoadKey {
                key_id: key.key_id()
            }
        ),
        Err(MtmError::ConfigMismatch)
    );
}

#[test]
fn frames_round_trip_through_device() {
    let mut dev = MtmDevice::new(5, SuiteId::Toy);
    let h = dev.create_instance("A", Profile::Mrtm).unwrap();
    let frame = CommandFrame {
        handle: h,
        command: MtmCommand::Extend {
            index: 0,
            digest: hash(b"m"),
        },
    }
    .encode();
    let out = MtmResponse::decode(&dev.process_frame(&frame)).unwrap();
    let expected = hash_parts(&[Digest::ZERO.as_bytes(), hash(b"m").as_bytes()]);
    assert_eq!(out, MtmResponse::Pcr(expected));
    let bad = MtmResponse::decode(&dev.process_frame(&[9, 9, 9])).unwrap();
    assert_eq!(bad, MtmResponse::Error(MtmError::IntegrityFailure));
}

#[test]
fn migration_stage_and_commit_transplants_hierarchy() {
    let mut src = MtmDevice::new(10, SuiteId::Standard);
    let mut dst = MtmDevice::new(11, SuiteId::Standard);
    let s = owned(&mut src, "RO");
    let d = owned(&mut dst, "RO");
    let srk_s = src.instance(s).unwrap().srk_id().unwrap();
    let dst_ek = dst.instance(d).unwrap().ek_public().unwrap().clone();
    let dst_pcrs = dst.instance(d).unwrap().pcrs().select(&[0, 1]).unwrap();

    assert_eq!(
        src.export_for_migration(s, &dst_ek, dst_pcrs.clone())
            .unwrap_err(),
        MtmError::LifecycleViolation
    );
    src.route_command(
        s,
        MtmCommand::LockForMigration {
            nonce: Nonce([1; 16]),
        },
    )
    .unwrap();
    let (blob, image) = src.export_for_migration(s, &dst_ek, dst_pcrs).unwrap();

    let session = hash(b"session");
    dst.stage_migrated_instance(session, d, &blob, &image)
        .unwrap();
    assert_ne!(dst.instance(d).unwrap().srk_id(), Some(srk_s));
    assert_eq!(dst.commit_staged(&session).unwrap(), d);
    assert_eq!(dst.instance(d).unwrap().srk_id(), Some(srk_s));
    assert_eq!(dst.commit_staged(&session), Err(MtmError::UnknownImport));
    assert!(dst
        .route_command(d, MtmCommand::LoadKey { key_id: srk_s })
        .is_ok());
}

#[test]
fn export_refused_after_post_lock_pcr_change() {
    let mut src = MtmDevice::new(12, SuiteId::Toy);
    let s = owned(&mut src, "RO");
    let ek = src.instance(s).unwrap().ek_public().unwrap().clone();
    src.route_command(
        s,
        MtmCommand::LockForMigration {
            nonce: Nonce([2; 16]),
        },
    )
    .unwrap();
    src.route_command(
        s,
        MtmCommand::Extend {
            index: 3,
            digest: hash(b"late"),
        },
    )
    .unwrap();
    assert_eq!(
        src.export_for_migration(s, &ek, PcrBinding::default())
            .unwrap_err(),
        MtmError::StateChangedSinceLock
    );
}

#[test]
fn stage_rejects_wrong_config_and_wrong_stakeholder() {
    let mut src = MtmDevice::new(13, SuiteId::Standard);
    let mut dst = MtmDevice::new(14, SuiteId::Standard);
    let s = owned(&mut src, "RO");
    let d = owned(&mut dst, "RO2");
    let ek = dst.instance(d).unwrap().ek_public().unwrap().clone();
    src.route_command(
        s,
        MtmCommand::LockForMigration {
            nonce: Nonce([3; 16]),
        },
    )
    .unwrap();
    let wrong = PcrBinding::new(vec![(0, hash(b"other"))]);
    let (blob, image) = src.export_for_migration(s, &ek, wrong).unwrap();
    assert_eq!(
        dst.stage_migrated_instance(Digest::ZERO, d, &blob, &image),
        Err(MtmError::ConfigMismatch)
    );
    let (blob, image) = src
        .export_for_migration(s, &ek, PcrBinding::default())
        .unwrap();
    assert_eq!(
        dst.stage_migrated_instance(Digest::ZERO, d, &blob, &image),
        Err(MtmError::StakeholderMismatch)
    );
}

#[test]
fn device_state_round_trips() {
    let mut dev = MtmDevice::new(15, SuiteId::Standard);
    let h = owned(&mut dev, "RO");
    dev.create_instance("U", Profile::Mltm).unwrap();
    dev.destroy_instance(h).unwrap();
    let bytes = dev.to_canonical();
    let back = MtmDevice::from_canonical(&bytes).unwrap();
    assert_eq!(back, dev);
    assert_eq!(back.to_canonical(), bytes);
}
