//! A simulated handset: one platform, its event log and a logical clock.

use mtm_core::codec::{Canonical, CodecResult, Reader, Writer};
use mtm_core::crypto::{hash_parts, Digest, SuiteId};
use mtm_core::engine::{EngineError, EngineState};
use mtm_core::mtm::{Lifecycle, PCR_BOOT, PCR_ENGINE};
use mtm_core::platform::{Manufacturer, Platform};
use serde::Serialize;

use crate::log::EventLog;

pub const DEFAULT_MANUFACTURER: &str = "acme";

/// Manufacturer keys are derived from the manufacturer's name, so every tool
/// invocation agrees on who built a device.
pub fn manufacturer(id: &str, suite: SuiteId) -> Manufacturer {
    let d = hash_parts(&[b"mtm-sim-manufacturer", id.as_bytes()]);
    let seed = u64::from_be_bytes(d.as_bytes()[..8].try_into().expect("8 bytes"));
    Manufacturer::new(id, seed, suite)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDevice {
    name: String,
    seed: u64,
    manufacturer: String,
    platform: Platform,
    log: EventLog,
    clock: u64,
}

impl SimDevice {
    pub fn create(name: &str, seed: u64, dm: &Manufacturer) -> Self {
        let suite = dm.signing_key().public.suite;
        let platform = dm.provision(seed, suite);
        let mut device = Self {
            name: name.to_owned(),
            seed,
            manufacturer: dm.id.clone(),
            platform,
            log: EventLog::new(),
            clock: 0,
        };
        let id = device.device_id();
        device.record("create", id.as_bytes());
        device
    }

    pub fn boot(&mut self) -> Result<EngineState, EngineError> {
        let result = self.platform.boot();
        let outcome = match &result {
            Ok(state) => format!("{state:?}"),
            Err(e) => e.to_string(),
        };
        self.record("boot", outcome.as_bytes());
        result
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn manufacturer_id(&self) -> &str {
        &self.manufacturer
    }

    pub fn device_id(&self) -> Digest {
        self.platform.device_id()
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn advance(&mut self, ticks: u64) {
        self.clock += ticks;
    }

    pub fn record(&mut self, action: &str, payload: &[u8]) -> Digest {
        let stamped = format!("{}@{}", action, self.clock);
        let name = self.name.clone();
        self.log.append(&name, &stamped, payload)
    }

    pub fn summary(&self) -> DeviceSummary {
        let mtm = self.platform.mtm();
        let pcr0 = self
            .platform
            .subsystem(&self.platform.dm().id)
            .and_then(|t| mtm.instance(t.vmtm).ok())
            .and_then(|i| i.pcrs().get(PCR_BOOT).ok())
            .unwrap_or(Digest::ZERO);
        let subsystems = self
            .platform
            .subsystems()
            .map(|t| {
                let inst = mtm.instance(t.vmtm).ok();
                SubsystemSummary {
                    stakeholder: t.owner().to_owned(),
                    engine: format!("{:?}", t.engine.lifecycle),
                    purpose: t.engine.purpose.clone(),
                    handle: t.vmtm.0,
                    lifecycle: inst
                        .map(|i| format!("{:?}", i.lifecycle()))
                        .unwrap_or_else(|| "Destroyed".into()),
                    srk: inst.and_then(|i| i.srk_id()).map(|d| d.to_hex()),
                    pcr_engine: inst
                        .and_then(|i| i.pcrs().get(PCR_ENGINE).ok())
                        .map(|d| d.to_hex()),
                    services: t.services_own.iter().map(|s| s.id.clone()).collect(),
                }
            })
            .collect();
        DeviceSummary {
            name: self.name.clone(),
            device_id: self.device_id().to_hex(),
            manufacturer: self.manufacturer.clone(),
            booted: self.platform.is_booted(),
            pcr0: pcr0.to_hex(),
            counter: mtm.monotonic_counter(),
            live_instances: mtm.live_instances().count(),
            subsystems,
            clock: self.clock,
            log_entries: self.log.len(),
            log_head: self.log.head().to_hex(),
        }
    }

    /// Whether `stakeholder` has a running subsystem with an owned vMTM.
    pub fn is_running(&self, stakeholder: &str) -> bool {
        self.platform
            .subsystem(stakeholder)
            .filter(|t| t.is_running())
            .and_then(|t| self.platform.mtm().instance(t.vmtm).ok())
            .is_some_and(|i| i.lifecycle() == Lifecycle::Owned)
    }
}

impl Canonical for SimDevice {
    fn write(&self, w: &mut Writer) {
        w.str(&self.name)
            .u64(self.seed)
            .str(&self.manufacturer)
            .u64(self.clock);
        w.nested(&self.platform).nested(&self.log);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            name: r.string()?,
            seed: r.u64()?,
            manufacturer: r.string()?,
            clock: r.u64()?,
            platform: r.nested()?,
            log: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsystemSummary {
    pub stakeholder: String,
    pub engine: String,
    pub purpose: String,
    pub handle: u32,
    pub lifecycle: String,
    pub srk: Option<String>,
    pub pcr_engine: Option<String>,
    pub services: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceSummary {
    pub name: String,
    pub device_id: String,
    pub manufacturer: String,
    pub booted: bool,
    pub pcr0: String,
    pub counter: u64,
    pub live_instances: usize,
    pub subsystems: Vec<SubsystemSummary>,
    pub clock: u64,
    pub log_entries: usize,
    pub log_head: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_device() {
        let dm = manufacturer(DEFAULT_MANUFACTURER, SuiteId::Toy);
        let mut a = SimDevice::create("a", 5, &dm);
        let mut b = SimDevice::create("a", 5, &dm);
        a.boot().unwrap();
        b.boot().unwrap();
        assert_eq!(a.to_canonical(), b.to_canonical());
        assert_ne!(SimDevice::create("a", 6, &dm).device_id(), a.device_id());
    }
}
