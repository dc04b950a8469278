use mtm_core::codec::Canonical;
use mtm_core::crypto::{Digest, Nonce, SuiteId};
use mtm_core::mtm::{Lifecycle, MtmCommand, MtmDevice, MtmError, Profile, PCR_COUNT};
use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

/// Extend chain computed straight from SHA-256, outside the MTM code.
fn replay(measurements: &[[u8; 32]]) -> [u8; 32] {
    measurements.iter().fold([0u8; 32], |acc, m| {
        let mut h = Sha256::new();
        h.update(acc);
        h.update(m);
        h.finalize().into()
    })
}

fn digest_of(bytes: [u8; 32]) -> Digest {
    Digest::from_bytes(bytes)
}

#[derive(Debug, Clone)]
enum Op {
    InstallEk,
    TakeOwnership,
    Lock,
    Unlock,
    Destroy,
    Extend(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::InstallEk),
        Just(Op::TakeOwnership),
        Just(Op::Lock),
        Just(Op::Unlock),
        Just(Op::Destroy),
        (0u8..PCR_COUNT as u8).prop_map(Op::Extend),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pcr_matches_independent_replay(
        pcr in 0u8..PCR_COUNT as u8,
        measurements in prop::collection::vec(any::<[u8; 32]>(), 0..16),
    ) {
        let mut mtm = MtmDevice::new(1, SuiteId::Toy);
        let h = mtm.create_instance("A", Profile::Mrtm).unwrap();
        for m in &measurements {
            mtm.route_command(h, MtmCommand::Extend { index: pcr, digest: digest_of(*m) }).unwrap();
        }
        let value = mtm.route_command(h, MtmCommand::PcrRead { index: pcr }).unwrap().pcr().unwrap();
        prop_assert_eq!(value.as_bytes(), &replay(&measurements));
    }

    #[test]
    fn lifecycle_only_moves_along_allowed_edges(ops in prop::collection::vec(op(), 1..24)) {
        let mut mtm = MtmDevice::new(2, SuiteId::Toy);
        let h = mtm.create_instance("A", Profile::Mrtm).unwrap();
        let mut last = Lifecycle::Clean;
        for op in ops {
            let result = match op {
                Op::InstallEk => mtm.route_command(h, MtmCommand::InstallEk { certificate: vec![] }).map(|_| ()),
                Op::TakeOwnership => mtm.route_command(h, MtmCommand::TakeOwnership { owner_auth: [1; 32] }).map(|_| ()),
                Op::Lock => mtm.route_command(h, MtmCommand::LockForMigration { nonce: Nonce([3; 16]) }).map(|_| ()),
                Op::Unlock => mtm.route_command(h, MtmCommand::UnlockMigration).map(|_| ()),
                Op::Destroy => mtm.destroy_instance(h),
                Op::Extend(i) => mtm.route_command(h, MtmCommand::Extend { index: i, digest: digest_of([i; 32]) }).map(|_| ()),
            };
            let now = match mtm.instance(h) {
                Ok(inst) => inst.lifecycle(),
                Err(e) => {
                    prop_assert_eq!(e, MtmError::UnknownHandle);
                    Lifecycle::Destroyed
                }
            };
            if last == Lifecycle::Destroyed {
                prop_assert_eq!(result, Err(MtmError::UnknownHandle));
            }
            prop_assert!(now == last || last.can_transition_to(now), "{:?} -> {:?}", last, now);
            last = now;
        }
    }

    #[test]
    fn device_encoding_round_trips(ops in prop::collection::vec(op(), 0..16), seed in any::<u64>()) {
        let mut mtm = MtmDevice::new(seed, SuiteId::Toy);
        let h = mtm.create_instance("A", Profile::Mrtm).unwrap();
        mtm.create_instance("B", Profile::Mltm).unwrap();
        for op in ops {
            let _ = match op {
                Op::InstallEk => mtm.route_command(h, MtmCommand::InstallEk { certificate: vec![7] }),
                Op::TakeOwnership => mtm.route_command(h, MtmCommand::TakeOwnership { owner_auth: [1; 32] }),
                Op::Lock => mtm.route_command(h, MtmCommand::LockForMigration { nonce: Nonce([3; 16]) }),
                Op::Unlock => mtm.route_command(h, MtmCommand::UnlockMigration),
                Op::Destroy => mtm.destroy_instance(h).map(|_| mtm_core::mtm::MtmResponse::Ok),
                Op::Extend(i) => mtm.route_command(h, MtmCommand::Extend { index: i, digest: digest_of([i; 32]) }),
            };
        }
        let bytes = mtm.to_canonical();
        let back = MtmDevice::from_canonical(&bytes).unwrap();
        prop_assert_eq!(back.to_canonical(), bytes);
    }

    #[test]
    fn frames_never_panic_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut mtm = MtmDevice::new(3, SuiteId::Toy);
        mtm.create_instance("A", Profile::Mrtm).unwrap();
        let reply = mtm.process_frame(&bytes);
        prop_assert!(mtm_core::mtm::MtmResponse::decode(&reply).is_ok());
    }
}
