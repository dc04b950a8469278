//! Line-oriented scenario files.
//!
//! ```text
//! mtm-scenario 1
//! suite toy
//! owner operator seed=7 purposes=telephony service=ts-sim:sim-v1
//! device phone-a seed=1
//! device phone-b seed=2
//! boot phone-a
//! boot phone-b
//! takeown phone-a operator
//! takeown phone-b operator
//! fault drop:package
//! migrate phone-a phone-b operator expect=timed-out
//! assert running phone-a operator
//! ```
//!
//! Steps: `suite`, `owner`, `device`, `boot`, `takeown`, `tamper-pristine`,
//! `revoke`, `decline`, `extend`, `fault`, `migrate`, `tick`, `assert`.
//!
//! `takeown` takes `purpose=`, `expect=` and `flip=<bit>`, which flips one
//! bit of the request in flight. `migrate` takes `expect=`,
//! `transport=memory|loopback`, `timeout=`, `change-after-lock=<pcr>` and the
//! `delete-before-send` and `replay-offer` flags.
//!
//! `expect=` takes `ok`, `reject` or an error name. A protocol rejection
//! without a matching `expect=` stops the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use mtm_core::crypto::{hash, hash_parts, Digest, SuiteId};
use mtm_core::mtm::{MtmCommand, PCR_BOOT};
use mtm_core::protocols::{
    MessageType, MigrationConfig, ProtocolError, ProtocolMessage, RemoteOwnerAgent,
};
use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::channel::{FaultPlan, TransportKind};
use crate::device::{manufacturer, SimDevice, DEFAULT_MANUFACTURER};
use crate::log::EventLog;
use crate::owner::{OwnerSpec, ServiceSpec};
use crate::runner::{run_migration, run_take_ownership_with, srk_holders, MigrationRun};

pub const HEADER: &str = "mtm-scenario 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Ok,
    AnyRejection,
    Rejection(ProtocolError),
}

impl Expect {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(Expect::Ok),
            "reject" => Some(Expect::AnyRejection),
            name => ProtocolError::from_name(name).map(Expect::Rejection),
        }
    }

    fn admits(&self, result: &Result<(), ProtocolError>) -> bool {
        match (self, result) {
            (Expect::Ok, Ok(())) => true,
            (Expect::AnyRejection, Err(e)) => e.is_rejection(),
            (Expect::Rejection(want), Err(e)) => want == e,
            _ => false,
        }
    }
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::AnyRejection => f.write_str("reject"),
            Expect::Rejection(e) => f.write_str(e.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assertion {
    /// Subsystem running with an owned vMTM.
    Running {
        device: String,
        owner: String,
    },
    /// No subsystem for the owner on the device.
    Absent {
        device: String,
        owner: String,
    },
    /// The device holds the SRK the owner's subsystem had on `origin` when
    /// the run started its last migration, and nobody else does.
    SoleHolder {
        device: String,
        owner: String,
    },
    LogValid {
        device: String,
    },
    /// PCR 0 equals a replay of the manufacturer's boot chain.
    BootChain {
        device: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Suite(SuiteId),
    Owner(OwnerSpec),
    Device {
        name: String,
        seed: Option<u64>,
        manufacturer: String,
        empty_boot: bool,
    },
    Boot(String),
    TakeOwn {
        device: String,
        owner: String,
        purpose: Option<String>,
        expect: Option<Expect>,
        /// Bit of the request flipped in flight, modulo its length.
        flip: Option<u64>,
    },
    TamperPristine(String),
    Revoke {
        at: String,
        source: String,
        owner: String,
    },
    Decline(String),
    Extend {
        device: String,
        owner: String,
        pcr: u8,
    },
    Fault(FaultPlan),
    Migrate {
        source: String,
        dest: String,
        owner: String,
        expect: Option<Expect>,
        transport: TransportKind,
        delete_before_send: bool,
        timeout: Option<u64>,
        /// PCR extended on the source after it locks.
        change_after_lock: Option<u8>,
        /// Replace the fresh offer with the last one recorded for this pair.
        replay_offer: bool,
    },
    Tick(u64),
    Assert(Assertion),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub steps: Vec<(usize, Step)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("step {step} (line {line}): assertion failed: {msg}")]
    AssertionFailed {
        step: usize,
        line: usize,
        msg: String,
    },
    #[error("step {step} (line {line}): {error}")]
    Rejected {
        step: usize,
        line: usize,
        error: ProtocolError,
    },
    #[error("step {step} (line {line}): {msg}")]
    Step {
        step: usize,
        line: usize,
        msg: String,
    },
}

impl ScenarioError {
    /// 2 for a protocol rejection, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Rejected { error, .. } if error.is_rejection() => 2,
            _ => 1,
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()));
        match lines.find(|(_, l)| !l.is_empty()) {
            Some((_, l)) if l == HEADER => {}
            other => {
                let line = other.map_or(1, |(n, _)| n);
                return Err(ScenarioError::Parse {
                    line,
                    msg: format!("expected `{HEADER}` header"),
                });
            }
        }
        let mut steps = Vec::new();
        for (line, text) in lines.filter(|(_, l)| !l.is_empty()) {
            let step = parse_step(text).map_err(|msg| ScenarioError::Parse { line, msg })?;
            steps.push((line, step));
        }
        Ok(Scenario { steps })
    }
}

fn parse_step(text: &str) -> Result<Step, String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let (verb, rest) = words.split_first().ok_or("empty step")?;
    let mut positional = Vec::new();
    let mut named: BTreeMap<&str, &str> = BTreeMap::new();
    let mut services = Vec::new();
    let mut flags = Vec::new();
    for w in rest {
        match w.split_once('=') {
            Some(("service", v)) => services.push(v),
            Some((k, v)) => {
                named.insert(k, v);
            }
            None if *verb == "fault" || *verb == "assert" || !is_flag(w) => positional.push(*w),
            None => flags.push(*w),
        }
    }
    let pos = |i: usize, what: &str| {
        positional
            .get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| format!("missing {what}"))
    };
    let num = |key: &str| -> Result<Option<u64>, String> {
        named
            .get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| format!("bad number for {key}"))
            })
            .transpose()
    };
    let expect = || -> Result<Option<Expect>, String> {
        named
            .get("expect")
            .map(|v| Expect::parse(v).ok_or_else(|| format!("unknown outcome `{v}`")))
            .transpose()
    };
    let step = match *verb {
        "suite" => match pos(0, "suite")?.as_str() {
            "standard" => Step::Suite(SuiteId::Standard),
            "toy" => Step::Suite(SuiteId::Toy),
            other => return Err(format!("unknown suite `{other}`")),
        },
        "owner" => {
            let id = pos(0, "owner id")?;
            let seed = num("seed")?.ok_or("owner needs seed=")?;
            let purposes: Vec<&str> = named
                .get("purposes")
                .map(|p| p.split(',').collect())
                .unwrap_or_default();
            let mut spec = OwnerSpec::new(&id, seed, &purposes);
            if let Some(m) = named.get("manufacturer") {
                spec.manufacturer = m.to_string();
            }
            for s in services {
                let (sid, image) = s.split_once(':').ok_or("service=<id>:<image>")?;
                spec.services.push(ServiceSpec {
                    id: sid.into(),
                    image: image.into(),
                    exports: Vec::new(),
                });
            }
            if let Some(v) = num("policy_version")? {
                spec.policy_version = v as u32;
            }
            if let Some(v) = num("min_policy_version")? {
                spec.min_policy_version = v as u32;
            }
            Step::Owner(spec)
        }
        "device" => Step::Device {
            name: pos(0, "device name")?,
            seed: num("seed")?,
            manufacturer: named
                .get("manufacturer")
                .unwrap_or(&DEFAULT_MANUFACTURER)
                .to_string(),
            empty_boot: flags.contains(&"empty-boot"),
        },
        "boot" => Step::Boot(pos(0, "device")?),
        "takeown" => Step::TakeOwn {
            device: pos(0, "device")?,
            owner: pos(1, "owner")?,
            purpose: named.get("purpose").map(|s| s.to_string()),
            expect: expect()?,
            flip: num("flip")?,
        },
        "tamper-pristine" => Step::TamperPristine(pos(0, "device")?),
        "revoke" => Step::Revoke {
            at: pos(0, "revoking device")?,
            source: pos(1, "source device")?,
            owner: pos(2, "owner")?,
        },
        "decline" => Step::Decline(pos(0, "device")?),
        "extend" => Step::Extend {
            device: pos(0, "device")?,
            owner: pos(1, "owner")?,
            pcr: num("pcr")?
                .unwrap_or(1)
                .try_into()
                .map_err(|_| "pcr out of range")?,
        },
        "fault" => Step::Fault(
            positional
                .join(",")
                .parse()
                .map_err(|e: crate::channel::FaultPlanError| e.to_string())?,
        ),
        "migrate" => Step::Migrate {
            source: pos(0, "source")?,
            dest: pos(1, "destination")?,
            owner: pos(2, "owner")?,
            expect: expect()?,
            transport: match named.get("transport").copied() {
                None | Some("memory") => TransportKind::InProcess,
                Some("loopback") => TransportKind::Loopback,
                Some(other) => return Err(format!("unknown transport `{other}`")),
            },
            delete_before_send: flags.contains(&"delete-before-send"),
            timeout: num("timeout")?,
            replay_offer: flags.contains(&"replay-offer"),
            change_after_lock: num("change-after-lock")?
                .map(|p| p.try_into().map_err(|_| "pcr out of range"))
                .transpose()?,
        },
        "tick" => Step::Tick(pos(0, "ticks")?.parse().map_err(|_| "bad tick count")?),
        "assert" => {
            let what = pos(0, "assertion")?;
            let device = pos(1, "device");
            let owner = || pos(2, "owner");
            Step::Assert(match what.as_str() {
                "running" => Assertion::Running {
                    device: device?,
                    owner: owner()?,
                },
                "absent" => Assertion::Absent {
                    device: device?,
                    owner: owner()?,
                },
                "sole-holder" => Assertion::SoleHolder {
                    device: device?,
                    owner: owner()?,
                },
                "log-valid" => Assertion::LogValid { device: device? },
                "boot-chain" => Assertion::BootChain { device: device? },
                other => return Err(format!("unknown assertion `{other}`")),
            })
        }
        other => return Err(format!("unknown step `{other}`")),
    };
    Ok(step)
}

fn is_flag(w: &str) -> bool {
    matches!(w, "empty-boot" | "delete-before-send" | "replay-offer")
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub line: usize,
    pub outcome: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub steps: Vec<StepReport>,
    #[serde(serialize_with = "crate::hex_digest")]
    pub log_head: Digest,
    pub device_heads: BTreeMap<String, String>,
    pub rejections: usize,
}

/// Live state of a scenario run, kept for inspection after the fact.
pub struct ScenarioRun {
    pub seed: u64,
    pub suite: SuiteId,
    pub devices: BTreeMap<String, SimDevice>,
    pub owners: BTreeMap<String, RemoteOwnerAgent>,
    pub log: EventLog,
    pending_fault: FaultPlan,
    migrated_srk: BTreeMap<String, Digest>,
    offers: BTreeMap<(String, String), ProtocolMessage>,
    empty_boot: BTreeSet<String>,
    reports: Vec<StepReport>,
    rejections: usize,
}

impl ScenarioRun {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            suite: SuiteId::Standard,
            devices: BTreeMap::new(),
            owners: BTreeMap::new(),
            log: EventLog::new(),
            pending_fault: FaultPlan::default(),
            migrated_srk: BTreeMap::new(),
            offers: BTreeMap::new(),
            empty_boot: BTreeSet::new(),
            reports: Vec::new(),
            rejections: 0,
        }
    }

    fn derive_seed(&self, label: &str) -> u64 {
        let d = hash_parts(&[
            b"mtm-sim-scenario-seed",
            &self.seed.to_be_bytes(),
            label.as_bytes(),
        ]);
        u64::from_be_bytes(d.as_bytes()[..8].try_into().expect("8 bytes"))
    }

    pub fn run(&mut self, scenario: &Scenario) -> Result<ScenarioReport, ScenarioError> {
        for (i, (line, step)) in scenario.steps.iter().enumerate() {
            let outcome = self.step(i + 1, *line, step)?;
            self.log
                .append("scenario", &format!("step {}", i + 1), outcome.as_bytes());
            self.reports.push(StepReport {
                step: i + 1,
                line: *line,
                outcome,
            });
        }
        Ok(self.report())
    }

    pub fn report(&self) -> ScenarioReport {
        let device_heads: BTreeMap<String, String> = self
            .devices
            .iter()
            .map(|(n, d)| (n.clone(), d.log().head().to_hex()))
            .collect();
        let mut parts: Vec<Vec<u8>> = vec![self.log.head().as_bytes().to_vec()];
        parts.extend(
            self.devices
                .values()
                .map(|d| d.log().head().as_bytes().to_vec()),
        );
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        ScenarioReport {
            steps: self.reports.clone(),
            log_head: hash_parts(&refs),
            device_heads,
            rejections: self.rejections,
        }
    }

    fn device(&mut self, name: &str) -> Result<&mut SimDevice, String> {
        self.devices
            .get_mut(name)
            .ok_or_else(|| format!("unknown device `{name}`"))
    }

    fn pair(&mut self, a: &str, b: &str) -> Result<(SimDevice, SimDevice), String> {
        if a == b {
            return Err("source and destination must differ".into());
        }
        let x = self
            .devices
            .remove(a)
            .ok_or_else(|| format!("unknown device `{a}`"))?;
        match self.devices.remove(b) {
            Some(y) => Ok((x, y)),
            None => {
                self.devices.insert(a.to_owned(), x);
                Err(format!("unknown device `{b}`"))
            }
        }
    }

    fn settle(
        &mut self,
        step: usize,
        line: usize,
        expect: &Option<Expect>,
        result: Result<(), ProtocolError>,
    ) -> Result<String, ScenarioError> {
        let shown = match &result {
            Ok(()) => "ok".to_owned(),
            Err(e) => e.name().to_owned(),
        };
        if result.is_err() {
            self.rejections += 1;
        }
        match (expect, result) {
            (Some(x), r) if x.admits(&r) => Ok(shown),
            (Some(x), _) => Err(ScenarioError::AssertionFailed {
                step,
                line,
                msg: format!("expected {x}, got {shown}"),
            }),
            (None, Ok(())) => Ok(shown),
            (None, Err(error)) => Err(ScenarioError::Rejected { step, line, error }),
        }
    }

    fn step(&mut self, step: usize, line: usize, s: &Step) -> Result<String, ScenarioError> {
        let fail = |msg: String| ScenarioError::Step { step, line, msg };
        match s {
            Step::Suite(suite) => {
                self.suite = *suite;
                Ok(format!("{suite:?}"))
            }
            Step::Owner(spec) => {
                let agent = spec.agent(self.suite);
                self.owners.insert(spec.id.clone(), agent);
                Ok(spec.id.clone())
            }
            Step::Device {
                name,
                seed,
                manufacturer: m,
                empty_boot,
            } => {
                let mut dm = manufacturer(m, self.suite);
                if *empty_boot {
                    dm = dm.with_boot_components(Vec::new());
                    self.empty_boot.insert(name.clone());
                }
                let seed = seed.unwrap_or_else(|| self.derive_seed(name));
                let device = SimDevice::create(name, seed, &dm);
                let id = device.device_id().to_hex();
                self.devices.insert(name.clone(), device);
                Ok(id)
            }
            Step::Boot(name) => {
                let state = self
                    .device(name)
                    .map_err(fail)?
                    .boot()
                    .map_err(|e| fail(e.to_string()))?;
                Ok(format!("{state:?}"))
            }
            Step::TakeOwn {
                device,
                owner,
                purpose,
                expect,
                flip,
            } => {
                let mut agent = self
                    .owners
                    .remove(owner)
                    .ok_or_else(|| fail(format!("unknown owner `{owner}`")))?;
                let purpose = purpose.clone().unwrap_or_else(|| {
                    agent
                        .policy_template()
                        .allowed_purposes
                        .first()
                        .cloned()
                        .unwrap_or_default()
                });
                let result = match self.device(device) {
                    Ok(d) => Ok(run_take_ownership_with(d, &mut agent, &purpose, |req| {
                        if let Some(bit) = flip {
                            let bit = (*bit % (req.len() as u64 * 8)) as usize;
                            req[bit / 8] ^= 1 << (bit % 8);
                        }
                    })
                    .result),
                    Err(e) => Err(e),
                };
                self.owners.insert(owner.clone(), agent);
                let result = result.map_err(fail)?;
                self.settle(step, line, expect, result)
            }
            Step::TamperPristine(name) => {
                let d = self.device(name).map_err(fail)?;
                let image = &mut d.platform_mut().pristine_engine;
                if let Some(b) = image.first_mut() {
                    *b ^= 0x01;
                }
                d.record("tamper-pristine", &[]);
                Ok("tampered".into())
            }
            Step::Revoke { at, source, owner } => {
                let cert = self
                    .devices
                    .get(source)
                    .and_then(|d| d.platform().subsystem(owner))
                    .and_then(|t| t.certificate.as_ref())
                    .map(|c| c.cert_id())
                    .ok_or_else(|| fail(format!("`{source}` has no certificate for `{owner}`")))?;
                let d = self.device(at).map_err(fail)?;
                let counter = d.platform().mtm().monotonic_counter();
                d.platform_mut()
                    .rim_store_mut()
                    .revoke_subject(cert, counter);
                d.record("revoke", cert.as_bytes());
                Ok(cert.short())
            }
            Step::Decline(name) => {
                let d = self.device(name).map_err(fail)?;
                d.platform_mut().owner_approves_migration = false;
                d.record("decline", &[]);
                Ok("declined".into())
            }
            Step::Extend { device, owner, pcr } => {
                let d = self.device(device).map_err(fail)?;
                let handle = d
                    .platform()
                    .subsystem(owner)
                    .map(|t| t.vmtm)
                    .ok_or_else(|| fail(format!("no subsystem for `{owner}`")))?;
                let digest = hash(format!("scenario extend {line}").as_bytes());
                let value = d
                    .platform_mut()
                    .mtm_mut()
                    .route_command(
                        handle,
                        MtmCommand::Extend {
                            index: *pcr,
                            digest,
                        },
                    )
                    .and_then(|r| r.pcr())
                    .map_err(|e| fail(e.to_string()))?;
                d.record("extend", value.as_bytes());
                Ok(value.short())
            }
            Step::Fault(plan) => {
                self.pending_fault
                    .faults
                    .extend(plan.faults.iter().copied());
                Ok(plan.to_string())
            }
            Step::Migrate {
                source,
                dest,
                owner,
                expect,
                transport,
                delete_before_send,
                timeout,
                change_after_lock,
                replay_offer,
            } => {
                let (mut s, mut d) = self.pair(source, dest).map_err(fail)?;
                let srk = s
                    .platform()
                    .subsystem(owner)
                    .and_then(|t| s.platform().mtm().instance(t.vmtm).ok())
                    .and_then(|i| i.srk_id());
                let mut config = MigrationConfig {
                    delete_before_send: *delete_before_send,
                    ..MigrationConfig::default()
                };
                if let Some(t) = timeout {
                    config.timeout_ticks = *t;
                }
                let run = MigrationRun {
                    config,
                    plan: std::mem::take(&mut self.pending_fault),
                    transport: *transport,
                    channel_seed: self.seed,
                    pcr_change_after_lock: *change_after_lock,
                    replay: if *replay_offer {
                        Some(
                            self.offers
                                .get(&(source.clone(), dest.clone()))
                                .cloned()
                                .ok_or_else(|| fail("no offer recorded for this pair".into()))?,
                        )
                    } else {
                        None
                    },
                    ..MigrationRun::default()
                };
                let outcome = run_migration(&mut s, &mut d, owner, &run);
                if let Some(offer) = outcome
                    .trace
                    .iter()
                    .find(|t| t.kind == MessageType::MigrationOffer)
                {
                    let offer =
                        ProtocolMessage::decode(&offer.bytes).map_err(|e| fail(e.to_string()))?;
                    self.offers.insert((source.clone(), dest.clone()), offer);
                }
                self.devices.insert(source.clone(), s);
                self.devices.insert(dest.clone(), d);
                if let Some(k) = srk {
                    self.migrated_srk.insert(owner.clone(), k);
                }
                if !outcome.uniqueness_held() {
                    return Err(ScenarioError::AssertionFailed {
                        step,
                        line,
                        msg: "more than one holder of the migrating SRK".into(),
                    });
                }
                if outcome.livelock {
                    return Err(fail("migration did not terminate".into()));
                }
                self.settle(step, line, expect, outcome.result)
            }
            Step::Tick(n) => {
                for d in self.devices.values_mut() {
                    d.advance(*n);
                }
                Ok(n.to_string())
            }
            Step::Assert(a) => {
                self.check(a)
                    .map_err(|msg| ScenarioError::AssertionFailed { step, line, msg })
            }
        }
    }

    fn check(&self, a: &Assertion) -> Result<String, String> {
        let device = |name: &str| {
            self.devices
                .get(name)
                .ok_or_else(|| format!("unknown device `{name}`"))
        };
        match a {
            Assertion::Running {
                device: name,
                owner,
            } => {
                if device(name)?.is_running(owner) {
                    Ok("holds".into())
                } else {
                    Err(format!("`{owner}` is not running on `{name}`"))
                }
            }
            Assertion::Absent {
                device: name,
                owner,
            } => match device(name)?.platform().subsystem(owner) {
                None => Ok("holds".into()),
                Some(_) => Err(format!("`{owner}` still present on `{name}`")),
            },
            Assertion::SoleHolder {
                device: name,
                owner,
            } => {
                let srk = self
                    .migrated_srk
                    .get(owner)
                    .ok_or_else(|| format!("no migration recorded for `{owner}`"))?;
                let here = srk_holders(&[device(name)?.platform()], srk);
                let all: Vec<_> = self.devices.values().map(SimDevice::platform).collect();
                let total = srk_holders(&all, srk);
                if here == 1 && total == 1 {
                    Ok("holds".into())
                } else {
                    Err(format!("`{name}` holds {here}, all devices hold {total}"))
                }
            }
            Assertion::LogValid { device: name } => device(name)?
                .log()
                .verify()
                .map(|_| "holds".into())
                .map_err(|i| format!("log chain broken at entry {i}")),
            Assertion::BootChain { device: name } => {
                let d = device(name)?;
                let mut dm = manufacturer(d.manufacturer_id(), self.suite);
                if self.empty_boot.contains(name) {
                    dm = dm.with_boot_components(Vec::new());
                }
                let replay = dm
                    .boot_components
                    .iter()
                    .fold([0u8; 32], |acc, (_, image)| {
                        let m: [u8; 32] = Sha256::digest(image).into();
                        let mut h = Sha256::new();
                        h.update(acc);
                        h.update(m);
                        h.finalize().into()
                    });
                let p = d.platform();
                let pcr0 = p
                    .subsystem(&p.dm().id)
                    .and_then(|t| p.mtm().instance(t.vmtm).ok())
                    .and_then(|i| i.pcrs().get(PCR_BOOT).ok())
                    .ok_or("no DM instance")?;
                if pcr0.as_bytes() == &replay {
                    Ok("holds".into())
                } else {
                    Err(format!(
                        "PCR0 {} differs from replay {}",
                        pcr0.to_hex(),
                        Digest::from_bytes(replay).to_hex()
                    ))
                }
            }
        }
    }
}

/// Parses and runs `text` with `seed`.
pub fn run_scenario(text: &str, seed: u64) -> Result<(ScenarioReport, ScenarioRun), ScenarioError> {
    let scenario = Scenario::parse(text)?;
    let mut run = ScenarioRun::new(seed);
    let report = run.run(&scenario)?;
    Ok((report, run))
}
