//! Remote owner's side of take-ownership, and its verification of a
//! completed subsystem's attestation.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::Canonical;
use crate::crypto::{
    hash_parts, DeterministicRng, Digest, KeyPair, KeyUsage, Nonce, PcrBinding, PublicKey, SuiteId,
    SymmetricKey,
};
use crate::engine::{
    replay_log, LoadEntry, Role, SecurityPolicy, Stakeholder, SubsystemConfiguration,
    TrustedService, TssCertificate, Verdict,
};
use crate::mtm::{AttestationQuote, PCR_ENGINE};
use crate::platform::PRISTINE_ENGINE_ID;
use crate::rim::{issue_rim_cert, RimCertificate};

use super::message::{MessageBody, ProtocolMessage, Rejection, TakeOwnershipGrant};
use super::takeown::{takeown_session_id, GrantBundle, RequestBundle};
use super::ProtocolError;

/// What the owner knows about a device model before talking to any device:
/// the pristine engine's digest and the manufacturer's generic services.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceReference {
    pub pristine_engine: Digest,
    pub generic_services: Vec<(String, Digest)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub id: String,
    pub seed: u64,
    pub allowed_purposes: Vec<String>,
    pub quality_assertions: Vec<String>,
    /// Services the owner delivers with the grant.
    pub services: Vec<TrustedService>,
    pub individualization: BTreeMap<String, String>,
    pub policy_version: u32,
    pub min_policy_version: u32,
}

impl AgentConfig {
    pub fn new(id: &str, seed: u64, purposes: &[&str]) -> Self {
        Self {
            id: id.to_owned(),
            seed,
            allowed_purposes: purposes.iter().map(|p| p.to_string()).collect(),
            quality_assertions: Vec::new(),
            services: Vec::new(),
            individualization: BTreeMap::new(),
            policy_version: 1,
            min_policy_version: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOwnerAgent {
    stakeholder: Stakeholder,
    root_key: KeyPair,
    transport: KeyPair,
    reference: DeviceReference,
    services: Vec<TrustedService>,
    allowed_purposes: Vec<String>,
    policy: SecurityPolicy,
    config: SubsystemConfiguration,
    rims: Vec<RimCertificate>,
    sessions: BTreeSet<Digest>,
    rng: DeterministicRng,
}

impl RemoteOwnerAgent {
    pub fn new(config: AgentConfig, reference: DeviceReference, suite: SuiteId) -> Self {
        let mut rng = DeterministicRng::from_seed(config.seed);
        let root_key = rng.keypair(KeyUsage::Signing, suite);
        let transport = rng.keypair(KeyUsage::Decryption, suite);
        let stakeholder = Stakeholder {
            id: config.id.clone(),
            role: Role::Ro,
            root_public_key: root_key.public.clone(),
        };

        let mut load_order: Vec<LoadEntry> = reference
            .generic_services
            .iter()
            .map(|(id, digest)| LoadEntry {
                component_id: id.clone(),
                expected: *digest,
                pcr: PCR_ENGINE,
            })
            .collect();
        load_order.extend(config.services.iter().map(|s| LoadEntry {
            component_id: s.id.clone(),
            expected: crate::engine::measure(&s.image),
            pcr: PCR_ENGINE,
        }));
        let rims: Vec<RimCertificate> = load_order
            .iter()
            .map(|e| {
                issue_rim_cert(
                    &config.id,
                    &root_key,
                    &e.component_id,
                    e.expected,
                    e.pcr,
                    0,
                    None,
                )
                .expect("signing key")
            })
            .collect();
        let expected = std::iter::once(reference.pristine_engine)
            .chain(load_order.iter().map(|e| e.expected))
            .fold(Digest::ZERO, |acc, d| {
                hash_parts(&[acc.as_bytes(), d.as_bytes()])
            });

        let mut subsystem_config = SubsystemConfiguration {
            owner: config.id.clone(),
            load_order,
            individualization: config.individualization.clone(),
            signature: None,
        };
        subsystem_config.sign(&root_key).expect("signing key");
        let mut policy = SecurityPolicy {
            owner: config.id.clone(),
            version: config.policy_version,
            rim_references: rims.iter().map(|c| c.cert_id).collect(),
            quality_assertions: config.quality_assertions.clone(),
            allowed_purposes: config.allowed_purposes.clone(),
            acceptable_target_states: vec![PcrBinding::new(vec![(PCR_ENGINE, expected)])],
            min_policy_version: config.min_policy_version,
            signature: None,
        };
        policy.sign(&root_key).expect("signing key");

        Self {
            stakeholder,
            root_key,
            transport,
            reference,
            services: config.services,
            allowed_purposes: config.allowed_purposes,
            policy,
            config: subsystem_config,
            rims,
            sessions: BTreeSet::new(),
            rng,
        }
    }

    pub fn stakeholder(&self) -> &Stakeholder {
        &self.stakeholder
    }

    pub fn id(&self) -> &str {
        &self.stakeholder.id
    }

    /// K_RO,PK: the key devices wrap their temporary key under.
    pub fn transport_public(&self) -> &PublicKey {
        &self.transport.public
    }

    /// Root signing key, which also issues this owner's RIM certificates.
    pub fn signing_key(&self) -> &KeyPair {
        &self.root_key
    }

    pub fn policy_template(&self) -> &SecurityPolicy {
        &self.policy
    }

    pub fn config_template(&self) -> &SubsystemConfiguration {
        &self.config
    }

    pub fn rim_certificates(&self) -> &[RimCertificate] {
        &self.rims
    }

    /// Expected engine PCR of a correctly booted subsystem.
    pub fn expected_state(&self) -> &PcrBinding {
        &self.policy.acceptable_target_states[0]
    }

    /// Answers a raw request with a grant or a rejection.
    pub fn respond(&mut self, request: &[u8]) -> (ProtocolMessage, Option<ProtocolError>) {
        let session = ProtocolMessage::decode(request)
            .map(|m| m.session)
            .unwrap_or(Digest::ZERO);
        match self.process_request(request) {
            Ok(grant) => (grant, None),
            Err(e) => {
                let body = MessageBody::TakeOwnershipRejection(Rejection::from_error(&e));
                (ProtocolMessage::new(session, body), Some(e))
            }
        }
    }

    /// Opens a request and, if the device attests a pristine engine for an
    /// allowed purpose, returns the grant encrypted to the instance's EK.
    pub fn process_request(&mut self, request: &[u8]) -> Result<ProtocolMessage, ProtocolError> {
        let message = ProtocolMessage::decode(request).map_err(|_| ProtocolError::DecryptFailed)?;
        let MessageBody::TakeOwnershipRequest(req) = &message.body else {
            return Err(ProtocolError::DecryptFailed);
        };
        let session = message.session;
        let temp = self
            .transport
            .decrypt(&req.wrapped_temp_key, session.as_bytes())
            .map_err(|_| ProtocolError::DecryptFailed)?;
        let temp: [u8; 32] = temp.try_into().map_err(|_| ProtocolError::DecryptFailed)?;
        let plain = SymmetricKey::new(temp, "takeown-temp")
            .decrypt(&req.payload, session.as_bytes())
            .map_err(|_| ProtocolError::DecryptFailed)?;
        let bundle =
            RequestBundle::from_canonical(&plain).map_err(|_| ProtocolError::DecryptFailed)?;
        if !self.sessions.insert(session) {
            return Err(ProtocolError::SessionMismatch);
        }
        self.check_request(&session, &bundle)?;
        if !self.allowed_purposes.contains(&bundle.purpose) {
            return Err(ProtocolError::PurposeRejected);
        }

        let mut certificate = bundle.certificate;
        certificate
            .sign(&self.root_key)
            .map_err(|e| ProtocolError::Internal(e.to_string()))?;
        let grant = GrantBundle {
            nonce: bundle.nonce,
            certificate,
            rims: self.rims.clone(),
            policy: self.policy.clone(),
            config: self.config.clone(),
            services: self.services.clone(),
            owner_auth: self.rng.array32(),
        };
        let body = bundle
            .ek_public
            .encrypt(&grant.to_canonical(), session.as_bytes(), &mut self.rng)
            .map_err(|_| ProtocolError::AttestationRejected)?;
        Ok(ProtocolMessage::new(
            session,
            MessageBody::TakeOwnershipGrant(TakeOwnershipGrant { body }),
        ))
    }

    fn check_request(&self, session: &Digest, b: &RequestBundle) -> Result<(), ProtocolError> {
        let reject = ProtocolError::AttestationRejected;
        if takeown_session_id(&b.device_id, self.id(), &b.nonce) != *session {
            return Err(reject);
        }
        let cert = &b.certificate;
        let cert_ok = cert.subject == self.id()
            && cert.device_id == b.device_id
            && cert.ek_public == b.ek_public
            && cert.purpose == b.purpose
            && b.ek_public.usage == KeyUsage::Decryption
            && cert.aik_public.usage == KeyUsage::Signing;
        if !cert_ok {
            return Err(reject);
        }
        let quote = &b.quote;
        if quote.nonce != b.nonce
            || quote.aik_public != cert.aik_public
            || !quote.verify(&cert.aik_public)
        {
            return Err(reject);
        }
        let [record] = b.measurement_log.as_slice() else {
            return Err(reject);
        };
        let pristine = record.component_id == PRISTINE_ENGINE_ID
            && record.verdict == Verdict::Verified
            && record.pcr_index == PCR_ENGINE
            && record.digest == self.reference.pristine_engine;
        if !pristine || quote.pcr(PCR_ENGINE) != Some(replay_log(&b.measurement_log, PCR_ENGINE)) {
            return Err(reject);
        }
        Ok(())
    }

    /// Verifies a completed subsystem: certificate issued by this owner, a
    /// fresh quote under its AIK, and an engine state matching the policy.
    pub fn verify_attestation(
        &self,
        cert: &TssCertificate,
        quote: &AttestationQuote,
        nonce: &Nonce,
    ) -> Result<(), ProtocolError> {
        if cert.subject != self.id() || !cert.verify(&self.stakeholder.root_public_key) {
            return Err(ProtocolError::CertificateInvalid);
        }
        if quote.nonce != *nonce || !quote.verify(&cert.aik_public) {
            return Err(ProtocolError::AttestationRejected);
        }
        self.policy
            .accepts(quote)
            .map(|_| ())
            .ok_or(ProtocolError::AttestationRejected)
    }
}
