#![allow(dead_code)]

use mtm_core::crypto::SuiteId;
use mtm_core::engine::TrustedService;
use mtm_core::mtm::{Lifecycle, MtmCommand};
use mtm_core::platform::{Manufacturer, Platform};
use mtm_core::protocols::{
    AgentConfig, DestMigration, DeviceTakeOwnership, MigrationConfig, ProtocolError,
    ProtocolMessage, RemoteOwnerAgent, SourceMigration,
};

pub const RO: &str = "operator";

pub struct World {
    pub dm: Manufacturer,
    pub agent: RemoteOwnerAgent,
}

impl World {
    pub fn new(suite: SuiteId) -> Self {
        let dm = Manufacturer::new("acme", 11, suite);
        let mut config = AgentConfig::new(RO, 22, &["telephony"]);
        config.services.push(TrustedService::new(
            "ts-sim",
            mtm_core::engine::ServiceKind::Trusted,
            b"sim service v1",
            &["sim.v1"],
        ));
        let agent = RemoteOwnerAgent::new(config, dm.reference(), suite);
        Self { dm, agent }
    }

    pub fn booted(&self, seed: u64) -> Platform {
        let mut p = self.dm.provision(seed, self.suite());
        p.boot().unwrap();
        p
    }

    pub fn suite(&self) -> SuiteId {
        self.dm.signing_key().public.suite
    }

    /// Runs take-ownership end to end for `purpose`.
    pub fn take_ownership(&mut self, p: &mut Platform, purpose: &str) -> Result<(), ProtocolError> {
        let ro = self.agent.stakeholder().clone();
        let mut session = DeviceTakeOwnership::prepare(p, &ro, purpose)?;
        let request = session.build_request(p, self.agent.transport_public())?;
        let (reply, _) = self.agent.respond(&request.encode());
        session.complete(p, &reply)
    }

    pub fn owned_device(&mut self, seed: u64) -> Platform {
        let mut p = self.booted(seed);
        self.take_ownership(&mut p, "telephony").unwrap();
        p
    }
}

pub fn owned_ro_instances(p: &Platform) -> usize {
    p.mtm()
        .live_instances()
        .filter(|(_, i)| i.stakeholder() == RO && i.lifecycle() == Lifecycle::Owned)
        .count()
}

/// Instances on any of `platforms` that hold `srk` and can still use it.
pub fn srk_holders(platforms: &[&Platform], srk: &mtm_core::crypto::Digest) -> usize {
    platforms
        .iter()
        .flat_map(|p| p.mtm().live_instances())
        .filter(|(_, i)| {
            i.srk_id().as_ref() == Some(srk)
                && matches!(i.lifecycle(), Lifecycle::Owned | Lifecycle::MigrationLocked)
        })
        .count()
}

pub fn ro_lifecycle(p: &Platform) -> Option<Lifecycle> {
    let tss = p.subsystem(RO)?;
    p.mtm().instance(tss.vmtm).ok().map(|i| i.lifecycle())
}

pub fn ro_srk(p: &Platform) -> Option<mtm_core::crypto::Digest> {
    let tss = p.subsystem(RO)?;
    p.mtm().instance(tss.vmtm).ok().and_then(|i| i.srk_id())
}

/// Source still owns a working subsystem: it can create and use a key.
pub fn source_operational(p: &mut Platform) -> bool {
    let Some(tss) = p.subsystem(RO) else {
        return false;
    };
    let handle = tss.vmtm;
    let mtm = p.mtm_mut();
    let Ok(srk) = mtm.instance(handle).map(|i| i.srk_id()) else {
        return false;
    };
    let Some(srk) = srk else { return false };
    let key = mtm.route_command(
        handle,
        MtmCommand::CreateWrapKey {
            parent: srk,
            usage: mtm_core::crypto::KeyUsage::Signing,
            pcr_binding: None,
        },
    );
    let Ok(key) = key.and_then(|r| r.public_key()) else {
        return false;
    };
    mtm.route_command(
        handle,
        MtmCommand::Sign {
            key_id: key.key_id(),
            data: b"probe".to_vec(),
        },
    )
    .is_ok()
}

/// Drives a migration with a perfect channel. Returns the final machines.
pub fn migrate(
    source: &mut Platform,
    dest: &mut Platform,
) -> (
    SourceMigration,
    Option<DestMigration>,
    Result<(), ProtocolError>,
) {
    let config = MigrationConfig::default();
    let (mut src, init) = SourceMigration::init(source, RO, dest.device_id(), config).unwrap();
    let (mut dst, offer) = match DestMigration::accept_init(dest, &init, config) {
        Ok(pair) => pair,
        Err((e, refusal)) => {
            src.deliver(source, &refusal);
            return (src, None, Err(e));
        }
    };
    let mut to_dest: Vec<ProtocolMessage> = src.deliver(source, &offer);
    to_dest.extend(src.package(source));
    pump(source, dest, &mut src, &mut dst, to_dest);
    let result = match (src.error(), dst.error()) {
        (Some(e), _) | (None, Some(e)) => Err(e.clone()),
        _ => Ok(()),
    };
    (src, Some(dst), result)
}

pub fn pump(
    source: &mut Platform,
    dest: &mut Platform,
    src: &mut SourceMigration,
    dst: &mut DestMigration,
    mut to_dest: Vec<ProtocolMessage>,
) {
    for _ in 0..16 {
        if to_dest.is_empty() {
            break;
        }
        let mut to_src = Vec::new();
        for m in to_dest.drain(..) {
            to_src.extend(dst.deliver(dest, &m));
        }
        for m in to_src {
            to_dest.extend(src.deliver(source, &m));
        }
    }
}
