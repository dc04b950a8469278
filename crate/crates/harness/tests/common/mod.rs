#![allow(dead_code)]

use mtm_core::crypto::{hash, KeyUsage, Nonce, PcrBinding, SuiteId};
use mtm_core::mtm::{CommandFrame, InstanceHandle, MtmCommand, MtmResponse, PCR_ENGINE};
use mtm_core::protocols::{MessageType, RemoteOwnerAgent};
use mtm_sim::owner::ServiceSpec;
use mtm_sim::{
    manufacturer, run_take_ownership, Fault, FaultKind, FaultPlan, FaultTarget, OwnerSpec,
    SimDevice, DEFAULT_MANUFACTURER,
};
use proptest::prelude::*;

pub const RO: &str = "operator";

pub fn owner_spec() -> OwnerSpec {
    let mut spec = OwnerSpec::new(RO, 7, &["telephony"]);
    spec.services.push(ServiceSpec {
        id: "ts-sim".into(),
        image: "sim-service-v1".into(),
        exports: Vec::new(),
    });
    spec
}

pub fn booted(name: &str, seed: u64, suite: SuiteId) -> SimDevice {
    let mut d = SimDevice::create(name, seed, &manufacturer(DEFAULT_MANUFACTURER, suite));
    d.boot().expect("boot");
    d
}

pub fn owned(name: &str, seed: u64, agent: &mut RemoteOwnerAgent) -> SimDevice {
    let mut d = booted(name, seed, agent_suite(agent));
    run_take_ownership(&mut d, agent, "telephony")
        .result
        .expect("take ownership");
    d
}

fn agent_suite(agent: &RemoteOwnerAgent) -> SuiteId {
    agent.signing_key().public.suite
}

/// Source and destination both running the operator's subsystem.
pub fn owned_pair(suite: SuiteId, seed: u64) -> (SimDevice, SimDevice, RemoteOwnerAgent) {
    let mut agent = owner_spec().agent(suite);
    let s = owned("source", seed, &mut agent);
    let d = owned("dest", seed.wrapping_add(1), &mut agent);
    (s, d, agent)
}

pub fn srk(device: &SimDevice) -> Option<mtm_core::crypto::Digest> {
    let p = device.platform();
    p.mtm().instance(p.subsystem(RO)?.vmtm).ok()?.srk_id()
}

/// Creates a signing key under the SRK and uses it: the subsystem works.
pub fn operational(device: &mut SimDevice) -> bool {
    let Some(handle) = device.platform().subsystem(RO).map(|t| t.vmtm) else {
        return false;
    };
    let Some(srk) = srk(device) else { return false };
    let mtm = device.platform_mut().mtm_mut();
    let key = mtm
        .route_command(
            handle,
            MtmCommand::CreateWrapKey {
                parent: srk,
                usage: KeyUsage::Signing,
                pcr_binding: None,
            },
        )
        .and_then(|r| r.public_key());
    match key {
        Ok(k) => mtm
            .route_command(
                handle,
                MtmCommand::Sign {
                    key_id: k.key_id(),
                    data: b"still here".to_vec(),
                },
            )
            .is_ok(),
        Err(_) => false,
    }
}

const MIGRATION_TYPES: [MessageType; 6] = [
    MessageType::MigrationInit,
    MessageType::MigrationOffer,
    MessageType::MigrationRefusal,
    MessageType::MigrationPackage,
    MessageType::MigrationStatus,
    MessageType::MigrationDecision,
];

pub fn fault() -> impl Strategy<Value = Fault> {
    let kind = prop::sample::select(FaultKind::ALL.to_vec());
    let target = prop_oneof![
        (0u64..10).prop_map(FaultTarget::Index),
        (prop::sample::select(MIGRATION_TYPES.to_vec()), 1u32..4)
            .prop_map(|(t, n)| FaultTarget::Type(t, n)),
    ];
    (kind, target, any::<u32>()).prop_map(|(kind, target, bit)| Fault { kind, target, bit })
}

pub fn fault_plan(max: usize) -> impl Strategy<Value = FaultPlan> {
    prop::collection::vec(fault(), 1..=max).prop_map(|faults| FaultPlan { faults })
}

/// Fifty raw command frames touching both the DM's and the owner's vMTM.
pub fn probe_frames(device: &SimDevice) -> Vec<Vec<u8>> {
    let p = device.platform();
    let ro = p.subsystem(RO).expect("owner subsystem").vmtm;
    let dm = p.subsystem(&p.dm().id).expect("dm subsystem").vmtm;
    let srk = srk(device).expect("owned");
    let aik = p.subsystem(RO).and_then(|t| t.aik).expect("aik");
    let mut cmds: Vec<(InstanceHandle, MtmCommand)> = Vec::new();
    for i in 0..13u8 {
        cmds.push((
            if i % 2 == 0 { ro } else { dm },
            MtmCommand::PcrRead { index: i % 8 },
        ));
    }
    for i in 0..8u8 {
        cmds.push((
            ro,
            MtmCommand::Extend {
                index: 4 + i % 3,
                digest: hash(&[i]),
            },
        ));
    }
    for i in 0..6u8 {
        cmds.push((
            ro,
            MtmCommand::Quote {
                aik,
                nonce: Nonce([i; 16]),
                selection: vec![PCR_ENGINE, 4],
            },
        ));
    }
    for usage in [KeyUsage::Signing, KeyUsage::Decryption, KeyUsage::Binding] {
        cmds.push((
            ro,
            MtmCommand::CreateWrapKey {
                parent: srk,
                usage,
                pcr_binding: None,
            },
        ));
    }
    let binding = PcrBinding::new(vec![(PCR_ENGINE, hash(b"wrong"))]);
    cmds.push((
        ro,
        MtmCommand::CreateWrapKey {
            parent: srk,
            usage: KeyUsage::Signing,
            pcr_binding: Some(binding),
        },
    ));
    for h in [ro, dm, InstanceHandle(99)] {
        cmds.push((h, MtmCommand::ReadEk));
        cmds.push((h, MtmCommand::ReadCounter));
        cmds.push((h, MtmCommand::ReadLifecycle));
    }
    cmds.push((ro, MtmCommand::IncrementCounter));
    cmds.push((ro, MtmCommand::ReadCounter));
    cmds.push((ro, MtmCommand::CreateAik));
    cmds.push((
        ro,
        MtmCommand::Sign {
            key_id: srk,
            data: b"srk cannot sign".to_vec(),
        },
    ));
    cmds.push((ro, MtmCommand::LoadKey { key_id: srk }));
    cmds.push((
        ro,
        MtmCommand::Decrypt {
            key_id: hash(b"missing"),
            ciphertext: vec![1, 2, 3],
        },
    ));
    cmds.push((ro, MtmCommand::UnlockMigration));
    cmds.push((ro, MtmCommand::PcrRead { index: 40 }));
    cmds.push((
        dm,
        MtmCommand::Extend {
            index: 5,
            digest: hash(b"dm"),
        },
    ));
    cmds.push((
        ro,
        MtmCommand::TakeOwnership {
            owner_auth: [0; 32],
        },
    ));
    assert_eq!(cmds.len(), 50);
    cmds.into_iter()
        .map(|(handle, command)| CommandFrame { handle, command }.encode())
        .collect()
}

pub fn probe(device: &mut SimDevice, frames: &[Vec<u8>]) -> Vec<Vec<u8>> {
    frames
        .iter()
        .map(|f| device.platform_mut().mtm_mut().process_frame(f))
        .collect()
}

pub fn decodes(reply: &[u8]) -> bool {
    MtmResponse::decode(reply).is_ok()
}
