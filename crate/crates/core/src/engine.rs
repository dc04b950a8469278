//! Trusted subsystems, engines and services, plus the local
//! measure→verify→extend pipeline and the RTE boot loader.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer};
use crate::crypto::{hash, CryptoError, Digest, KeyPair, PcrBinding, PublicKey, Signature};
use crate::mtm::{AttestationQuote, InstanceHandle, MtmCommand, MtmDevice, MtmError, Profile};
use crate::rim::{RimCertificate, RimStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("mtm: {0}")]
    Mtm(#[from] MtmError),
    #[error("engine has failed and accepts no further operations")]
    FailedEngine,
    #[error("engine is in state {0:?}, which does not permit this operation")]
    InvalidState(EngineState),
    #[error("no RIM certificate for component {0:?}")]
    MissingRim(String),
    #[error("no image for component {0:?}")]
    MissingComponent(String),
    #[error("subsystem has no configuration")]
    MissingConfig,
    #[error("interface {0:?} is not exported by the provider")]
    NotExported(String),
    #[error("provider engine is not running")]
    ProviderNotRunning,
    #[error("requestor may not remove this engine")]
    Forbidden,
    #[error("a subsystem for {0:?} already exists")]
    DuplicateSubsystem(String),
    #[error("no subsystem for {0:?}")]
    NoSubsystem(String),
    #[error("device has not completed its boot")]
    DeviceNotBooted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Dm,
    Do,
    User,
    Ro,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Dm => 1,
            Role::Do => 2,
            Role::User => 3,
            Role::Ro => 4,
        }
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        Ok(match code {
            1 => Role::Dm,
            2 => Role::Do,
            3 => Role::User,
            4 => Role::Ro,
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "role",
                    value,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stakeholder {
    pub id: String,
    pub role: Role,
    pub root_public_key: PublicKey,
}

impl Canonical for Stakeholder {
    fn write(&self, w: &mut Writer) {
        w.str(&self.id)
            .u8(self.role.code())
            .nested(&self.root_public_key);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            id: r.string()?,
            role: Role::from_code(r.u8()?)?,
            root_public_key: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Mandatory,
    Discretionary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineState {
    Pristine,
    Certified,
    Running,
    Failed,
}

impl EngineState {
    fn code(self) -> u8 {
        match self {
            EngineState::Pristine => 1,
            EngineState::Certified => 2,
            EngineState::Running => 3,
            EngineState::Failed => 4,
        }
    }

    fn from_code(code: u8) -> CodecResult<Self> {
        Ok(match code {
            1 => EngineState::Pristine,
            2 => EngineState::Certified,
            3 => EngineState::Running,
            4 => EngineState::Failed,
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "engine state",
                    value,
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceKind {
    Trusted,
    Normal,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedService {
    pub id: String,
    pub kind: ServiceKind,
    pub image: Vec<u8>,
    pub exports: Vec<String>,
}

impl TrustedService {
    pub fn new(id: &str, kind: ServiceKind, image: &[u8], exports: &[&str]) -> Self {
        Self {
            id: id.to_owned(),
            kind,
            image: image.to_vec(),
            exports: exports.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Canonical for TrustedService {
    fn write(&self, w: &mut Writer) {
        let kind = match self.kind {
            ServiceKind::Trusted => 1,
            ServiceKind::Normal => 2,
            ServiceKind::Measured => 3,
        };
        w.str(&self.id)
            .u8(kind)
            .bytes(&self.image)
            .str_list(&self.exports);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let id = r.string()?;
        let kind = match r.u8()? {
            1 => ServiceKind::Trusted,
            2 => ServiceKind::Normal,
            3 => ServiceKind::Measured,
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "service kind",
                    value,
                })
            }
        };
        Ok(Self {
            id,
            kind,
            image: r.vec()?,
            exports: r.str_list()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Verified,
    Mismatched,
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementRecord {
    pub component_id: String,
    pub digest: Digest,
    pub verdict: Verdict,
    pub pcr_index: u8,
    pub counter_at_measure: u64,
}

impl Canonical for MeasurementRecord {
    fn write(&self, w: &mut Writer) {
        let verdict = match self.verdict {
            Verdict::Verified => 1,
            Verdict::Mismatched => 2,
            Verdict::Unverified => 3,
        };
        w.str(&self.component_id)
            .nested(&self.digest)
            .u8(verdict)
            .u8(self.pcr_index)
            .u64(self.counter_at_measure);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let component_id = r.string()?;
        let digest = r.nested()?;
        let verdict = match r.u8()? {
            1 => Verdict::Verified,
            2 => Verdict::Mismatched,
            3 => Verdict::Unverified,
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "verdict",
                    value,
                })
            }
        };
        Ok(Self {
            component_id,
            digest,
            verdict,
            pcr_index: r.u8()?,
            counter_at_measure: r.u64()?,
        })
    }
}

/// Replays the extends recorded as verified for `pcr` from an all-zero start.
pub fn replay_log(log: &[MeasurementRecord], pcr: u8) -> Digest {
    log.iter()
        .filter(|m| m.verdict == Verdict::Verified && m.pcr_index == pcr)
        .fold(Digest::ZERO, |acc, m| {
            crate::crypto::hash_parts(&[acc.as_bytes(), m.digest.as_bytes()])
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedEngine {
    pub stakeholder: String,
    pub component_id: String,
    pub domain: Domain,
    pub lifecycle: EngineState,
    pub image: Vec<u8>,
    pub measurement_log: Vec<MeasurementRecord>,
    pub purpose: String,
}

impl Canonical for TrustedEngine {
    fn write(&self, w: &mut Writer) {
        let domain = match self.domain {
            Domain::Mandatory => 1,
            Domain::Discretionary => 2,
        };
        w.str(&self.stakeholder)
            .str(&self.component_id)
            .u8(domain)
            .u8(self.lifecycle.code());
        w.bytes(&self.image)
            .list(&self.measurement_log)
            .str(&self.purpose);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let stakeholder = r.string()?;
        let component_id = r.string()?;
        let domain = match r.u8()? {
            1 => Domain::Mandatory,
            2 => Domain::Discretionary,
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "domain",
                    value,
                })
            }
        };
        Ok(Self {
            stakeholder,
            component_id,
            domain,
            lifecycle: EngineState::from_code(r.u8()?)?,
            image: r.vec()?,
            measurement_log: r.list()?,
            purpose: r.string()?,
        })
    }
}

/// Owner-signed policy: reference measurements, assertions and the target
/// states a subsystem may be migrated into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityPolicy {
    pub owner: String,
    pub version: u32,
    pub rim_references: Vec<Digest>,
    pub quality_assertions: Vec<String>,
    pub allowed_purposes: Vec<String>,
    pub acceptable_target_states: Vec<PcrBinding>,
    pub min_policy_version: u32,
    pub signature: Option<Signature>,
}

impl SecurityPolicy {
    pub fn signed_body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("mtm-policy-v1")
            .str(&self.owner)
            .u32(self.version)
            .list(&self.rim_references);
        w.str_list(&self.quality_assertions)
            .str_list(&self.allowed_purposes);
        w.list(&self.acceptable_target_states)
            .u32(self.min_policy_version);
        w.finish()
    }

    pub fn sign(&mut self, key: &KeyPair) -> Result<(), CryptoError> {
        self.signature = Some(key.sign(&self.signed_body())?);
        Ok(())
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        self.signature
            .as_ref()
            .is_some_and(|s| key.verify(&self.signed_body(), s))
    }

    /// The first acceptable state whose every entry appears in `quote`.
    pub fn accepts(&self, quote: &AttestationQuote) -> Option<&PcrBinding> {
        self.acceptable_target_states.iter().find(|state| {
            !state.is_empty()
                && state
                    .entries()
                    .iter()
                    .all(|(i, d)| quote.pcr(*i) == Some(*d))
        })
    }
}

impl Canonical for SecurityPolicy {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.signed_body()).option(self.signature.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let body = r.bytes()?;
        let mut b = Reader::new(body);
        let label = b.string()?;
        if label != "mtm-policy-v1" {
            return Err(CodecError::Malformed {
                tag: 1,
                reason: "policy label",
            });
        }
        let policy = Self {
            owner: b.string()?,
            version: b.u32()?,
            rim_references: b.list()?,
            quality_assertions: b.str_list()?,
            allowed_purposes: b.str_list()?,
            acceptable_target_states: b.list()?,
            min_policy_version: b.u32()?,
            signature: r.option()?,
        };
        b.finish()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadEntry {
    pub component_id: String,
    pub expected: Digest,
    pub pcr: u8,
}

impl Canonical for LoadEntry {
    fn write(&self, w: &mut Writer) {
        w.str(&self.component_id)
            .nested(&self.expected)
            .u8(self.pcr);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            component_id: r.string()?,
            expected: r.nested()?,
            pcr: r.u8()?,
        })
    }
}

/// Owner-signed setup configuration: the boot order and individualization
/// parameters of a subsystem.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubsystemConfiguration {
    pub owner: String,
    pub load_order: Vec<LoadEntry>,
    pub individualization: BTreeMap<String, String>,
    pub signature: Option<Signature>,
}

impl SubsystemConfiguration {
    pub fn signed_body(&self) -> Vec<u8> {
        let params: Vec<_> = self.individualization.iter().collect();
        let mut w = Writer::new();
        w.str("mtm-config-v1")
            .str(&self.owner)
            .list(&self.load_order);
        w.list_with(&params, |w, (k, v)| {
            w.str(k).str(v);
        });
        w.finish()
    }

    pub fn sign(&mut self, key: &KeyPair) -> Result<(), CryptoError> {
        self.signature = Some(key.sign(&self.signed_body())?);
        Ok(())
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        self.signature
            .as_ref()
            .is_some_and(|s| key.verify(&self.signed_body(), s))
    }
}

impl Canonical for SubsystemConfiguration {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.signed_body()).option(self.signature.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let body = r.bytes()?;
        let mut b = Reader::new(body);
        if b.string()? != "mtm-config-v1" {
            return Err(CodecError::Malformed {
                tag: 1,
                reason: "config label",
            });
        }
        let owner = b.string()?;
        let load_order = b.list()?;
        let individualization = b
            .list_with(|r| Ok((r.string()?, r.string()?)))?
            .into_iter()
            .collect();
        b.finish()?;
        Ok(Self {
            owner,
            load_order,
            individualization,
            signature: r.option()?,
        })
    }
}

/// Certificate naming a subsystem instance: its owner, device, endorsement
/// key and attestation key. Self-generated until the owner signs it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TssCertificate {
    pub subject: String,
    pub device_id: Digest,
    pub ek_public: PublicKey,
    pub aik_public: PublicKey,
    pub purpose: String,
    pub issuer_signature: Option<Signature>,
}

impl TssCertificate {
    pub fn signed_body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("mtm-tss-cert-v1")
            .str(&self.subject)
            .nested(&self.device_id);
        w.nested(&self.ek_public)
            .nested(&self.aik_public)
            .str(&self.purpose);
        w.finish()
    }

    pub fn cert_id(&self) -> Digest {
        hash(&self.signed_body())
    }

    pub fn sign(&mut self, key: &KeyPair) -> Result<(), CryptoError> {
        self.issuer_signature = Some(key.sign(&self.signed_body())?);
        Ok(())
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        self.issuer_signature
            .as_ref()
            .is_some_and(|s| key.verify(&self.signed_body(), s))
    }
}

impl Canonical for TssCertificate {
    fn write(&self, w: &mut Writer) {
        w.str(&self.subject)
            .nested(&self.device_id)
            .nested(&self.ek_public)
            .nested(&self.aik_public);
        w.str(&self.purpose).option(self.issuer_signature.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            subject: r.string()?,
            device_id: r.nested()?,
            ek_public: r.nested()?,
            aik_public: r.nested()?,
            purpose: r.string()?,
            issuer_signature: r.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalServiceRef {
    pub provider: String,
    pub interface: String,
}

impl Canonical for ExternalServiceRef {
    fn write(&self, w: &mut Writer) {
        w.str(&self.provider).str(&self.interface);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            provider: r.string()?,
            interface: r.string()?,
        })
    }
}

/// The `{TE, TS_σ, TS_ε, TR, SP, SC}` tuple of one stakeholder, plus the
/// handle of its vMTM and its certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedSubsystem {
    pub engine: TrustedEngine,
    pub vmtm: InstanceHandle,
    pub services_own: Vec<TrustedService>,
    pub services_external: Vec<ExternalServiceRef>,
    pub resources: Vec<String>,
    pub policy: Option<SecurityPolicy>,
    pub config: Option<SubsystemConfiguration>,
    pub certificate: Option<TssCertificate>,
    pub aik: Option<Digest>,
}

impl TrustedSubsystem {
    pub fn new(engine: TrustedEngine, vmtm: InstanceHandle) -> Self {
        Self {
            engine,
            vmtm,
            services_own: Vec::new(),
            services_external: Vec::new(),
            resources: Vec::new(),
            policy: None,
            config: None,
            certificate: None,
            aik: None,
        }
    }

    pub fn owner(&self) -> &str {
        &self.engine.stakeholder
    }

    pub fn is_running(&self) -> bool {
        self.engine.lifecycle == EngineState::Running
    }

    /// Image for a load-order entry: the engine itself or one of its services.
    pub fn component_image(&self, component_id: &str) -> Option<&[u8]> {
        if component_id == self.engine.component_id {
            return Some(&self.engine.image);
        }
        self.services_own
            .iter()
            .find(|s| s.id == component_id)
            .map(|s| s.image.as_slice())
    }

    pub fn exports(&self, interface: &str) -> bool {
        self.services_own
            .iter()
            .any(|s| s.exports.iter().any(|e| e == interface))
    }
}

impl Canonical for TrustedSubsystem {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.engine)
            .u32(self.vmtm.0)
            .list(&self.services_own)
            .list(&self.services_external);
        w.str_list(&self.resources)
            .option(self.policy.as_ref())
            .option(self.config.as_ref());
        w.option(self.certificate.as_ref())
            .option(self.aik.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            engine: r.nested()?,
            vmtm: InstanceHandle(r.u32()?),
            services_own: r.list()?,
            services_external: r.list()?,
            resources: r.str_list()?,
            policy: r.option()?,
            config: r.option()?,
            certificate: r.option()?,
            aik: r.option()?,
        })
    }
}

/// RTM: the measurement of a component image.
pub fn measure(image: &[u8]) -> Digest {
    hash(image)
}

/// Measures `image`, verifies it against `cert` inside the subsystem's vMTM
/// and extends on success. A mismatch is recorded and fails the engine; it is
/// returned as a record, not an error. Any other refusal also fails the
/// engine and is returned as an error.
pub fn measure_verify_extend(
    mtm: &mut MtmDevice,
    subsystem: &mut TrustedSubsystem,
    component_id: &str,
    image: &[u8],
    cert: &RimCertificate,
) -> Result<MeasurementRecord, EngineError> {
    let engine = &mut subsystem.engine;
    if engine.lifecycle == EngineState::Failed {
        return Err(EngineError::FailedEngine);
    }
    if mtm.instance(subsystem.vmtm)?.profile() != Profile::Mrtm {
        return Err(MtmError::ProfileViolation.into());
    }
    let digest = measure(image);
    let counter_at_measure = mtm.monotonic_counter();
    let outcome = mtm.route_command(
        subsystem.vmtm,
        MtmCommand::VerifyRimCertAndExtend {
            cert: cert.clone(),
            measurement: digest,
        },
    );
    let verdict = match &outcome {
        Ok(_) => Verdict::Verified,
        Err(MtmError::MeasurementMismatch) => Verdict::Mismatched,
        Err(_) => Verdict::Unverified,
    };
    let record = MeasurementRecord {
        component_id: component_id.to_owned(),
        digest,
        verdict,
        pcr_index: cert.target_pcr,
        counter_at_measure,
    };
    engine.measurement_log.push(record.clone());
    match outcome {
        Ok(_) => Ok(record),
        Err(MtmError::MeasurementMismatch) => {
            engine.lifecycle = EngineState::Failed;
            Ok(record)
        }
        Err(e) => {
            engine.lifecycle = EngineState::Failed;
            Err(e.into())
        }
    }
}

/// RTE: boots the subsystem through its configured load order, halting at
/// the first component that does not verify.
pub fn rte_boot(
    mtm: &mut MtmDevice,
    rims: &RimStore,
    subsystem: &mut TrustedSubsystem,
) -> Result<EngineState, EngineError> {
    match subsystem.engine.lifecycle {
        EngineState::Pristine | EngineState::Certified => {}
        EngineState::Failed => return Err(EngineError::FailedEngine),
        other => return Err(EngineError::InvalidState(other)),
    }
    let config = subsystem.config.clone().ok_or(EngineError::MissingConfig)?;
    for entry in &config.load_order {
        let cert = rims
            .lookup(&entry.component_id, &config.owner)
            .filter(|c| c.expected_digest == entry.expected && c.target_pcr == entry.pcr)
            .cloned();
        let Some(cert) = cert else {
            subsystem.engine.lifecycle = EngineState::Failed;
            return Err(EngineError::MissingRim(entry.component_id.clone()));
        };
        let Some(image) = subsystem
            .component_image(&entry.component_id)
            .map(<[u8]>::to_vec)
        else {
            subsystem.engine.lifecycle = EngineState::Failed;
            return Err(EngineError::MissingComponent(entry.component_id.clone()));
        };
        let record = measure_verify_extend(mtm, subsystem, &entry.component_id, &image, &cert)?;
        if record.verdict != Verdict::Verified {
            return Ok(EngineState::Failed);
        }
    }
    subsystem.engine.lifecycle = EngineState::Running;
    Ok(EngineState::Running)
}

pub fn bind_external_service(
    subsystem: &mut TrustedSubsystem,
    provider: &TrustedSubsystem,
    interface: &str,
) -> Result<ExternalServiceRef, EngineError> {
    if !provider.is_running() {
        return Err(EngineError::ProviderNotRunning);
    }
    if !provider.exports(interface) {
        return Err(EngineError::NotExported(interface.to_owned()));
    }
    let reference = ExternalServiceRef {
        provider: provider.owner().to_owned(),
        interface: interface.to_owned(),
    };
    subsystem.services_external.push(reference.clone());
    Ok(reference)
}

/// A device owner may remove discretionary engines; mandatory engines only
/// go away at the request of their own stakeholder.
pub fn check_removal(requestor: &Stakeholder, engine: &TrustedEngine) -> Result<(), EngineError> {
    if requestor.id == engine.stakeholder {
        return Ok(());
    }
    match (requestor.role, engine.domain) {
        (Role::Do, Domain::Discretionary) => Ok(()),
        _ => Err(EngineError::Forbidden),
    }
}
