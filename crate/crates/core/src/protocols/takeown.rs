//! Remote take-ownership, device side.
//!
//! `prepare` installs a blank engine with a clean vMTM and lets the MTM
//! generate the endorsement and attestation keys. `build_request` has the
//! manufacturer's verifier check the pristine engine, quotes the result and
//! sends it to the remote owner under a fresh temporary key. `complete`
//! opens the grant inside the vMTM, installs what it carries, boots the
//! engine and only then takes ownership. Any failure discards the blank
//! subsystem.

use crate::codec::{Canonical, CodecResult, Reader, Writer};
use crate::crypto::{hash, hash_parts, Digest, Nonce, PublicKey, SymmetricKey};
use crate::engine::{
    measure_verify_extend, rte_boot, EngineState, MeasurementRecord, SecurityPolicy, Stakeholder,
    SubsystemConfiguration, TrustedService, TssCertificate, Verdict,
};
use crate::mtm::{AttestationQuote, MtmCommand, PCR_ENGINE};
use crate::platform::{Platform, PRISTINE_ENGINE_ID};
use crate::rim::RimCertificate;

use super::message::{MessageBody, ProtocolMessage, TakeOwnershipRequest};
use super::ProtocolError;

pub fn takeown_session_id(device_id: &Digest, ro: &str, nonce: &Nonce) -> Digest {
    hash_parts(&[
        b"mtm-takeown-session",
        device_id.as_bytes(),
        ro.as_bytes(),
        &nonce.0,
    ])
}

/// Plaintext of the request payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestBundle {
    pub device_id: Digest,
    pub nonce: Nonce,
    pub ek_public: PublicKey,
    pub certificate: TssCertificate,
    pub quote: AttestationQuote,
    pub measurement_log: Vec<MeasurementRecord>,
    pub purpose: String,
}

impl Canonical for RequestBundle {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.device_id)
            .nested(&self.nonce)
            .nested(&self.ek_public)
            .nested(&self.certificate);
        w.nested(&self.quote)
            .list(&self.measurement_log)
            .str(&self.purpose);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            device_id: r.nested()?,
            nonce: r.nested()?,
            ek_public: r.nested()?,
            certificate: r.nested()?,
            quote: r.nested()?,
            measurement_log: r.list()?,
            purpose: r.string()?,
        })
    }
}

/// Plaintext of the grant body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantBundle {
    pub nonce: Nonce,
    pub certificate: TssCertificate,
    pub rims: Vec<RimCertificate>,
    pub policy: SecurityPolicy,
    pub config: SubsystemConfiguration,
    pub services: Vec<TrustedService>,
    pub owner_auth: [u8; 32],
}

impl Canonical for GrantBundle {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.nonce)
            .nested(&self.certificate)
            .list(&self.rims)
            .nested(&self.policy);
        w.nested(&self.config)
            .list(&self.services)
            .bytes(&self.owner_auth);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            nonce: r.nested()?,
            certificate: r.nested()?,
            rims: r.list()?,
            policy: r.nested()?,
            config: r.nested()?,
            services: r.list()?,
            owner_auth: r.array32()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TakeOwnershipState {
    Prepared,
    RequestSent,
    Completed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct DeviceTakeOwnership {
    ro: Stakeholder,
    session: Digest,
    nonce: Nonce,
    state: TakeOwnershipState,
    temp_key_id: Option<Digest>,
    error: Option<ProtocolError>,
}

impl DeviceTakeOwnership {
    pub fn prepare(
        platform: &mut Platform,
        ro: &Stakeholder,
        purpose: &str,
    ) -> Result<Self, ProtocolError> {
        let handle = platform.install_blank_engine(ro, purpose)?;
        let keys = (|| {
            let mtm = platform.mtm_mut();
            let ek = mtm
                .route_command(
                    handle,
                    MtmCommand::InstallEk {
                        certificate: Vec::new(),
                    },
                )?
                .public_key()?;
            let aik = mtm
                .route_command(handle, MtmCommand::CreateAik)?
                .public_key()?;
            Ok::<_, ProtocolError>((ek, aik))
        })();
        let (ek, aik) = match keys {
            Ok(keys) => keys,
            Err(e) => {
                platform.discard_subsystem(&ro.id);
                return Err(e);
            }
        };
        let nonce = platform.rng().nonce();
        let device_id = platform.device_id();
        let session = takeown_session_id(&device_id, &ro.id, &nonce);
        let tss = platform.subsystem_mut(&ro.id).expect("just installed");
        tss.aik = Some(aik.key_id());
        tss.certificate = Some(TssCertificate {
            subject: ro.id.clone(),
            device_id,
            ek_public: ek,
            aik_public: aik,
            purpose: purpose.to_owned(),
            issuer_signature: None,
        });
        Ok(Self {
            ro: ro.clone(),
            session,
            nonce,
            state: TakeOwnershipState::Prepared,
            temp_key_id: None,
            error: None,
        })
    }

    pub fn session(&self) -> Digest {
        self.session
    }

    pub fn nonce(&self) -> Nonce {
        self.nonce
    }

    pub fn state(&self) -> TakeOwnershipState {
        self.state
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    /// Digest of this session's temporary key, for freshness checks.
    pub fn temp_key_id(&self) -> Option<Digest> {
        self.temp_key_id
    }

    pub fn build_request(
        &mut self,
        platform: &mut Platform,
        transport: &PublicKey,
    ) -> Result<ProtocolMessage, ProtocolError> {
        if self.state != TakeOwnershipState::Prepared {
            return Err(ProtocolError::UnexpectedMessage);
        }
        let result = self.try_build_request(platform, transport);
        self.settle(platform, result)
    }

    fn try_build_request(
        &mut self,
        platform: &mut Platform,
        transport: &PublicKey,
    ) -> Result<ProtocolMessage, ProtocolError> {
        let dm = platform.dm().id.clone();
        let device_id = platform.device_id();
        let (mtm, rims, tss) = platform.parts_mut(&self.ro.id)?;
        let pristine_rim = rims
            .lookup(PRISTINE_ENGINE_ID, &dm)
            .cloned()
            .ok_or(ProtocolError::AttestationFailed)?;
        let image = tss.engine.image.clone();
        let record = measure_verify_extend(mtm, tss, PRISTINE_ENGINE_ID, &image, &pristine_rim)
            .map_err(|_| ProtocolError::AttestationFailed)?;
        if record.verdict != Verdict::Verified {
            return Err(ProtocolError::AttestationFailed);
        }
        let certificate = tss.certificate.clone().ok_or(ProtocolError::NoSubsystem)?;
        let aik = tss.aik.ok_or(ProtocolError::NoSubsystem)?;
        let quote = mtm
            .route_command(
                tss.vmtm,
                MtmCommand::Quote {
                    aik,
                    nonce: self.nonce,
                    selection: vec![PCR_ENGINE],
                },
            )?
            .quote()?;
        let bundle = RequestBundle {
            device_id,
            nonce: self.nonce,
            ek_public: certificate.ek_public.clone(),
            certificate,
            quote,
            measurement_log: tss.engine.measurement_log.clone(),
            purpose: tss.engine.purpose.clone(),
        };
        let rng = mtm.rng();
        let temp = SymmetricKey::generate(rng, "takeown-temp");
        let wrapped_temp_key = transport
            .encrypt(temp.expose(), self.session.as_bytes(), rng)
            .map_err(|e| ProtocolError::Internal(e.to_string()))?;
        let payload = temp.encrypt(&bundle.to_canonical(), self.session.as_bytes(), rng);
        self.temp_key_id = Some(hash(temp.expose()));
        self.state = TakeOwnershipState::RequestSent;
        Ok(ProtocolMessage::new(
            self.session,
            MessageBody::TakeOwnershipRequest(TakeOwnershipRequest {
                wrapped_temp_key,
                payload,
            }),
        ))
    }

    pub fn complete(
        &mut self,
        platform: &mut Platform,
        reply: &ProtocolMessage,
    ) -> Result<(), ProtocolError> {
        if self.state != TakeOwnershipState::RequestSent {
            return Err(ProtocolError::UnexpectedMessage);
        }
        let result = self.try_complete(platform, reply);
        self.settle(platform, result)
    }

    fn try_complete(
        &mut self,
        platform: &mut Platform,
        reply: &ProtocolMessage,
    ) -> Result<(), ProtocolError> {
        let grant = match &reply.body {
            MessageBody::TakeOwnershipGrant(g) => g,
            MessageBody::TakeOwnershipRejection(r) => return Err(r.error()),
            _ => return Err(ProtocolError::UnexpectedMessage),
        };
        if reply.session != self.session {
            return Err(ProtocolError::SessionMismatch);
        }
        let ro_key = self.ro.root_public_key.clone();
        let (mtm, rims, tss) = platform.parts_mut(&self.ro.id)?;
        let plain = mtm
            .route_command(
                tss.vmtm,
                MtmCommand::EkDecrypt {
                    ciphertext: grant.body.clone(),
                    aad: self.session.as_bytes().to_vec(),
                },
            )
            .and_then(|r| r.data())
            .map_err(|_| ProtocolError::DecryptFailed)?;
        let bundle =
            GrantBundle::from_canonical(&plain).map_err(|_| ProtocolError::DecryptFailed)?;
        if bundle.nonce != self.nonce {
            return Err(ProtocolError::NonceMismatch);
        }
        let own_cert = tss.certificate.as_ref().ok_or(ProtocolError::NoSubsystem)?;
        let cert = &bundle.certificate;
        if !cert.verify(&ro_key) || cert.signed_body() != own_cert.signed_body() {
            return Err(ProtocolError::CertificateInvalid);
        }
        let owner_ok = bundle.policy.owner == self.ro.id && bundle.config.owner == self.ro.id;
        if !owner_ok || !bundle.policy.verify(&ro_key) || !bundle.config.verify(&ro_key) {
            return Err(ProtocolError::PolicyVerifyFailed);
        }
        for rim in &bundle.rims {
            if rim.issuer != self.ro.id {
                return Err(ProtocolError::PolicyVerifyFailed);
            }
            rims.insert(rim.clone())
                .map_err(|_| ProtocolError::PolicyVerifyFailed)?;
        }
        tss.certificate = Some(bundle.certificate);
        tss.policy = Some(bundle.policy);
        tss.config = Some(bundle.config);
        for service in bundle.services {
            match tss.services_own.iter_mut().find(|s| s.id == service.id) {
                Some(slot) => *slot = service,
                None => tss.services_own.push(service),
            }
        }
        tss.engine.lifecycle = EngineState::Certified;
        match rte_boot(mtm, rims, tss) {
            Ok(EngineState::Running) => {}
            _ => return Err(ProtocolError::BootFailed),
        }
        mtm.route_command(
            tss.vmtm,
            MtmCommand::TakeOwnership {
                owner_auth: bundle.owner_auth,
            },
        )?;
        self.state = TakeOwnershipState::Completed;
        Ok(())
    }

    fn settle<T>(
        &mut self,
        platform: &mut Platform,
        result: Result<T, ProtocolError>,
    ) -> Result<T, ProtocolError> {
        if let Err(e) = &result {
            self.error = Some(e.clone());
            self.abort(platform);
        }
        result
    }

    /// Removes the blank subsystem. No effect once completed.
    pub fn abort(&mut self, platform: &mut Platform) {
        if matches!(
            self.state,
            TakeOwnershipState::Completed | TakeOwnershipState::Aborted
        ) {
            return;
        }
        platform.discard_subsystem(&self.ro.id);
        self.state = TakeOwnershipState::Aborted;
    }
}
