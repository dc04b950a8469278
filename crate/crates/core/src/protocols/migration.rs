//! Subsystem migration between two platforms of the same remote owner.
//!
//! The source coordinates a two-phase commit. The destination stages the
//! unsealed instance without owning it and reports success; the source then
//! destroys its own instance and answers with a commit decision, on which the
//! destination transplants the staged hierarchy into its own vMTM. If the
//! source hears nothing within its timeout it unlocks and decides abort. The
//! destination retransmits its status until it gets a decision, and the
//! source repeats a decision it has already taken. So at most one owned
//! instance holds the migrated SRK at any moment, whatever the channel drops.
//!
//! Status and decision each carry a quote under the sender's AIK whose nonce
//! binds the session and the value, so neither can be altered in transit;
//! one that fails to verify is ignored and the retransmission is awaited.
//!
//! With `delete_before_send` the source destroys its instance as soon as the
//! package is built, as in the sequence where deletion precedes
//! transmission; a lost package then loses the subsystem.

use crate::crypto::{hash_parts, Digest, Nonce, PcrBinding, PublicKey, NONCE_LEN};
use crate::engine::{SecurityPolicy, SubsystemConfiguration, TssCertificate};
use crate::mtm::{AttestationQuote, InstanceHandle, Lifecycle, MtmCommand, MtmError, PCR_ENGINE};
use crate::platform::Platform;

use super::message::{
    MessageBody, MigrationDecision, MigrationInit, MigrationOffer, MigrationPackage,
    MigrationStatus, ProtocolMessage, Rejection,
};
use super::ProtocolError;

pub const DEFAULT_TIMEOUT_TICKS: u64 = 30;
pub const DEFAULT_RETRANSMIT_TICKS: u64 = 3;

/// `hash(S || D || N)`
pub fn migration_session_id(source: &Digest, dest: &Digest, nonce: &Nonce) -> Digest {
    hash_parts(&[source.as_bytes(), dest.as_bytes(), &nonce.0])
}

/// Quote nonce binding a status code or decision to a session.
pub fn binding_nonce(session: &Digest, label: &str, value: u8) -> Nonce {
    let d = hash_parts(&[
        b"mtm-migration-binding",
        session.as_bytes(),
        label.as_bytes(),
        &[value],
    ]);
    let mut n = [0u8; NONCE_LEN];
    n.copy_from_slice(&d.as_bytes()[..NONCE_LEN]);
    Nonce(n)
}

fn quote_binding(
    platform: &mut Platform,
    handle: InstanceHandle,
    aik: Digest,
    nonce: Nonce,
) -> Result<AttestationQuote, ProtocolError> {
    Ok(platform
        .mtm_mut()
        .route_command(
            handle,
            MtmCommand::Quote {
                aik,
                nonce,
                selection: vec![PCR_ENGINE],
            },
        )?
        .quote()?)
}

fn binding_holds(proof: &AttestationQuote, signer: Option<&PublicKey>, nonce: Nonce) -> bool {
    signer.is_some_and(|k| proof.aik_public == *k && proof.nonce == nonce && proof.verify(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationConfig {
    pub timeout_ticks: u64,
    pub retransmit_ticks: u64,
    pub delete_before_send: bool,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            timeout_ticks: DEFAULT_TIMEOUT_TICKS,
            retransmit_ticks: DEFAULT_RETRANSMIT_TICKS,
            delete_before_send: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceState {
    AwaitingOffer,
    Locked,
    AwaitingStatus,
    Committed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct SourceMigration {
    ro: String,
    source_device: Digest,
    dest_device: Digest,
    init_session: Digest,
    session: Option<Digest>,
    nonce: Option<Nonce>,
    handle: InstanceHandle,
    aik: Digest,
    target_binding: Option<PcrBinding>,
    target_ek: Option<PublicKey>,
    target_aik: Option<PublicKey>,
    /// Abort and commit decisions, quoted once and then repeated.
    decisions: [Option<ProtocolMessage>; 2],
    state: SourceState,
    elapsed: u64,
    config: MigrationConfig,
    error: Option<ProtocolError>,
}

impl SourceMigration {
    /// Starts a migration on the device owner's instruction.
    pub fn init(
        platform: &mut Platform,
        ro: &str,
        dest_device: Digest,
        config: MigrationConfig,
    ) -> Result<(Self, ProtocolMessage), ProtocolError> {
        if !platform.owner_approves_migration {
            return Err(ProtocolError::OwnerDeclined);
        }
        let tss = platform
            .subsystem(ro)
            .filter(|t| t.is_running())
            .ok_or(ProtocolError::NoSubsystem)?;
        let (handle, aik) = (tss.vmtm, tss.aik.ok_or(ProtocolError::NoSubsystem)?);
        let cert = tss
            .certificate
            .clone()
            .filter(|c| c.issuer_signature.is_some())
            .ok_or(ProtocolError::NoSubsystem)?;
        let owned = platform
            .mtm()
            .instance(handle)
            .map(|i| i.lifecycle() == Lifecycle::Owned)
            .unwrap_or(false);
        if !owned {
            return Err(ProtocolError::NoSubsystem);
        }
        let source_device = platform.device_id();
        let init_nonce = platform.rng().nonce();
        let init_session = migration_session_id(&source_device, &dest_device, &init_nonce);
        let init = MigrationInit {
            ro: ro.to_owned(),
            source_device,
            dest_device,
            source_cert: cert,
            init_nonce,
        };
        let machine = Self {
            ro: ro.to_owned(),
            source_device,
            dest_device,
            init_session,
            session: None,
            nonce: None,
            handle,
            aik,
            target_binding: None,
            target_ek: None,
            target_aik: None,
            decisions: [None, None],
            state: SourceState::AwaitingOffer,
            elapsed: 0,
            config,
            error: None,
        };
        Ok((
            machine,
            ProtocolMessage::new(init_session, MessageBody::MigrationInit(init)),
        ))
    }

    pub fn state(&self) -> SourceState {
        self.state
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    pub fn session(&self) -> Option<Digest> {
        self.session
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, SourceState::Committed | SourceState::Aborted)
    }

    fn current_session(&self) -> Digest {
        self.session.unwrap_or(self.init_session)
    }

    fn decision(&mut self, platform: &mut Platform, commit: bool) -> Vec<ProtocolMessage> {
        let slot = usize::from(commit);
        if self.decisions[slot].is_none() {
            let session = self.current_session();
            let nonce = binding_nonce(&session, "decision", u8::from(commit));
            self.decisions[slot] = quote_binding(platform, self.handle, self.aik, nonce)
                .ok()
                .map(|proof| {
                    ProtocolMessage::new(
                        session,
                        MessageBody::MigrationDecision(MigrationDecision { commit, proof }),
                    )
                });
        }
        self.decisions[slot].clone().into_iter().collect()
    }

    /// Aborts and, unless the instance is already gone, returns it to owned.
    fn abort(&mut self, platform: &mut Platform, e: ProtocolError) -> Vec<ProtocolMessage> {
        let locked = platform
            .mtm()
            .instance(self.handle)
            .map(|i| i.lifecycle() == Lifecycle::MigrationLocked);
        if locked == Ok(true) {
            let _ = platform
                .mtm_mut()
                .route_command(self.handle, MtmCommand::UnlockMigration);
        }
        self.error.get_or_insert(e);
        self.state = SourceState::Aborted;
        self.decision(platform, false)
    }

    pub fn deliver(
        &mut self,
        platform: &mut Platform,
        msg: &ProtocolMessage,
    ) -> Vec<ProtocolMessage> {
        match (&msg.body, self.state) {
            (MessageBody::MigrationOffer(offer), SourceState::AwaitingOffer) => {
                match self.evaluate_offer(platform, msg, offer) {
                    Ok(()) => Vec::new(),
                    Err(e) => self.abort(platform, e),
                }
            }
            (MessageBody::MigrationRefusal(r), SourceState::AwaitingOffer)
                if msg.session == self.init_session =>
            {
                self.error = Some(r.error());
                self.state = SourceState::Aborted;
                Vec::new()
            }
            (MessageBody::MigrationStatus(status), _) if Some(msg.session) == self.session => {
                let nonce = binding_nonce(&msg.session, "status", status.code);
                if !binding_holds(&status.proof, self.target_aik.as_ref(), nonce) {
                    return Vec::new();
                }
                match self.state {
                    SourceState::AwaitingStatus if status.is_success() => {
                        let decision = self.decision(platform, true);
                        if !self.config.delete_before_send {
                            platform.discard_subsystem(&self.ro);
                        }
                        self.state = SourceState::Committed;
                        decision
                    }
                    SourceState::AwaitingStatus => {
                        self.abort(platform, ProtocolError::from_code(status.code))
                    }
                    SourceState::Committed => self.decision(platform, true),
                    SourceState::Aborted => self.decision(platform, false),
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        }
    }

    fn evaluate_offer(
        &mut self,
        platform: &mut Platform,
        msg: &ProtocolMessage,
        offer: &MigrationOffer,
    ) -> Result<(), ProtocolError> {
        let session = migration_session_id(&self.source_device, &self.dest_device, &offer.nonce);
        if msg.session != session {
            return Err(ProtocolError::SessionMismatch);
        }
        // From here on an abort decision must reach the offering session.
        self.session = Some(session);
        if !platform.note_offer_nonce(offer.nonce) {
            return Err(ProtocolError::StaleOffer);
        }
        let ro_key = platform
            .root_key(&self.ro)
            .cloned()
            .ok_or(ProtocolError::NoSubsystem)?;
        let cert = &offer.target_cert;
        if cert.subject != self.ro || cert.device_id != self.dest_device || !cert.verify(&ro_key) {
            return Err(ProtocolError::CertificateInvalid);
        }
        let quote = &offer.target_state;
        if quote.nonce != offer.nonce
            || quote.aik_public != cert.aik_public
            || !quote.verify(&cert.aik_public)
        {
            return Err(ProtocolError::TargetUntrusted);
        }
        let own_policy = platform
            .subsystem(&self.ro)
            .and_then(|t| t.policy.clone())
            .ok_or(ProtocolError::NoSubsystem)?;
        let target_policy = &offer.target_policy;
        if target_policy.owner != self.ro
            || !target_policy.verify(&ro_key)
            || target_policy.version < own_policy.min_policy_version
        {
            return Err(ProtocolError::PolicyUnacceptable);
        }
        let binding = own_policy
            .accepts(quote)
            .cloned()
            .ok_or(ProtocolError::TargetUntrusted)?;
        platform
            .mtm_mut()
            .route_command(
                self.handle,
                MtmCommand::LockForMigration { nonce: offer.nonce },
            )
            .map_err(|e| ProtocolError::Internal(e.to_string()))?;
        self.nonce = Some(offer.nonce);
        self.target_binding = Some(binding);
        self.target_ek = Some(cert.ek_public.clone());
        self.target_aik = Some(cert.aik_public.clone());
        self.state = SourceState::Locked;
        Ok(())
    }

    /// Builds the package once locked. Refuses if the source state moved
    /// after the lock.
    pub fn package(&mut self, platform: &mut Platform) -> Vec<ProtocolMessage> {
        if self.state != SourceState::Locked {
            return Vec::new();
        }
        match self.try_package(platform) {
            Ok(package) => {
                // Both outcomes are quoted while the instance still exists.
                self.session = Some(self.current_session());
                let _ = self.decision(platform, true);
                let _ = self.decision(platform, false);
                if self.config.delete_before_send {
                    platform.discard_subsystem(&self.ro);
                }
                self.state = SourceState::AwaitingStatus;
                self.elapsed = 0;
                vec![package]
            }
            Err(e) => self.abort(platform, e),
        }
    }

    fn try_package(&mut self, platform: &mut Platform) -> Result<ProtocolMessage, ProtocolError> {
        let (ek, binding, nonce) = match (&self.target_ek, &self.target_binding, self.nonce) {
            (Some(ek), Some(b), Some(n)) => (ek.clone(), b.clone(), n),
            _ => return Err(ProtocolError::UnexpectedMessage),
        };
        let tss = platform
            .subsystem(&self.ro)
            .ok_or(ProtocolError::NoSubsystem)?;
        let aik = tss.aik.ok_or(ProtocolError::NoSubsystem)?;
        let source_policy = tss.policy.clone().ok_or(ProtocolError::NoSubsystem)?;
        let source_config = tss.config.clone().ok_or(ProtocolError::NoSubsystem)?;
        let mtm = platform.mtm_mut();
        let (key_blob, instance_image) = mtm
            .export_for_migration(self.handle, &ek, binding)
            .map_err(|e| match e {
                MtmError::StateChangedSinceLock => ProtocolError::StateChangedSinceLock,
                other => ProtocolError::Internal(other.to_string()),
            })?;
        let proof = mtm
            .route_command(
                self.handle,
                MtmCommand::Quote {
                    aik,
                    nonce,
                    selection: vec![PCR_ENGINE],
                },
            )?
            .quote()?;
        let package = MigrationPackage {
            key_blob,
            instance_image,
            source_state_proof: proof,
            source_policy,
            source_config,
        };
        Ok(ProtocolMessage::new(
            self.current_session(),
            MessageBody::MigrationPackage(Box::new(package)),
        ))
    }

    /// One unit of logical time.
    pub fn tick(&mut self, platform: &mut Platform) -> Vec<ProtocolMessage> {
        self.elapsed += 1;
        let expired = self.elapsed >= self.config.timeout_ticks;
        match self.state {
            SourceState::AwaitingOffer if expired => {
                self.error = Some(ProtocolError::TimedOut);
                self.state = SourceState::Aborted;
                Vec::new()
            }
            SourceState::AwaitingStatus if expired => self.abort(platform, ProtocolError::TimedOut),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DestState {
    AwaitingPackage,
    Staged,
    Committed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct DestMigration {
    ro: String,
    session: Digest,
    nonce: Nonce,
    handle: InstanceHandle,
    aik: Digest,
    source_cert: TssCertificate,
    pending: Option<(SecurityPolicy, SubsystemConfiguration)>,
    state: DestState,
    elapsed: u64,
    since_status: u64,
    status: Option<ProtocolMessage>,
    config: MigrationConfig,
    error: Option<ProtocolError>,
}

impl DestMigration {
    /// Screens the source and, with the local owner's consent, answers with
    /// an offer. A refusal is returned alongside the error otherwise.
    pub fn accept_init(
        platform: &mut Platform,
        msg: &ProtocolMessage,
        config: MigrationConfig,
    ) -> Result<(Self, ProtocolMessage), (ProtocolError, ProtocolMessage)> {
        Self::screen(platform, msg, config).map_err(|e| {
            let refusal = MessageBody::MigrationRefusal(Rejection::from_error(&e));
            (e, ProtocolMessage::new(msg.session, refusal))
        })
    }

    fn screen(
        platform: &mut Platform,
        msg: &ProtocolMessage,
        config: MigrationConfig,
    ) -> Result<(Self, ProtocolMessage), ProtocolError> {
        let MessageBody::MigrationInit(init) = &msg.body else {
            return Err(ProtocolError::UnexpectedMessage);
        };
        let dest_device = platform.device_id();
        if init.dest_device != dest_device
            || msg.session
                != migration_session_id(&init.source_device, &dest_device, &init.init_nonce)
        {
            return Err(ProtocolError::SessionMismatch);
        }
        let cert = &init.source_cert;
        if cert.subject != init.ro {
            return Err(ProtocolError::StakeholderMismatch);
        }
        let tss = platform
            .subsystem(&init.ro)
            .filter(|t| t.is_running())
            .ok_or(ProtocolError::NoSubsystem)?;
        let owned = platform
            .mtm()
            .instance(tss.vmtm)
            .map(|i| i.lifecycle() == Lifecycle::Owned)
            .unwrap_or(false);
        let own_cert = tss.certificate.clone().ok_or(ProtocolError::NoSubsystem)?;
        let own_policy = tss.policy.clone().ok_or(ProtocolError::NoSubsystem)?;
        let (handle, aik) = (tss.vmtm, tss.aik.ok_or(ProtocolError::NoSubsystem)?);
        if !owned {
            return Err(ProtocolError::NoSubsystem);
        }
        let ro_key = platform
            .root_key(&init.ro)
            .ok_or(ProtocolError::NoSubsystem)?;
        if !cert.verify(ro_key) || cert.device_id != init.source_device {
            return Err(ProtocolError::CertificateInvalid);
        }
        let counter = platform.mtm().monotonic_counter();
        if platform
            .rim_store()
            .is_subject_revoked(&cert.cert_id(), counter)
        {
            return Err(ProtocolError::SourceRevoked);
        }
        if !platform.owner_approves_migration {
            return Err(ProtocolError::OwnerDeclined);
        }
        let nonce = platform.rng().nonce();
        let session = migration_session_id(&init.source_device, &dest_device, &nonce);
        let quote = platform
            .mtm_mut()
            .route_command(
                handle,
                MtmCommand::Quote {
                    aik,
                    nonce,
                    selection: vec![PCR_ENGINE],
                },
            )?
            .quote()?;
        let offer = MigrationOffer {
            target_state: quote,
            target_cert: own_cert,
            target_policy: own_policy,
            nonce,
        };
        let machine = Self {
            ro: init.ro.clone(),
            session,
            nonce,
            handle,
            aik,
            source_cert: cert.clone(),
            pending: None,
            state: DestState::AwaitingPackage,
            elapsed: 0,
            since_status: 0,
            status: None,
            config,
            error: None,
        };
        Ok((
            machine,
            ProtocolMessage::new(session, MessageBody::MigrationOffer(offer)),
        ))
    }

    pub fn state(&self) -> DestState {
        self.state
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    pub fn session(&self) -> Digest {
        self.session
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, DestState::Committed | DestState::Aborted)
    }

    fn status_message(&self) -> Vec<ProtocolMessage> {
        self.status.clone().into_iter().collect()
    }

    fn set_status(&mut self, platform: &mut Platform, code: u8) {
        let nonce = binding_nonce(&self.session, "status", code);
        self.status = quote_binding(platform, self.handle, self.aik, nonce)
            .ok()
            .map(|proof| {
                ProtocolMessage::new(
                    self.session,
                    MessageBody::MigrationStatus(MigrationStatus { code, proof }),
                )
            });
    }

    fn decision_holds(&self, d: &MigrationDecision) -> bool {
        let nonce = binding_nonce(&self.session, "decision", u8::from(d.commit));
        binding_holds(&d.proof, Some(&self.source_cert.aik_public), nonce)
    }

    pub fn deliver(
        &mut self,
        platform: &mut Platform,
        msg: &ProtocolMessage,
    ) -> Vec<ProtocolMessage> {
        if msg.session != self.session {
            return Vec::new();
        }
        match (&msg.body, self.state) {
            (MessageBody::MigrationPackage(package), DestState::AwaitingPackage) => {
                match self.import(platform, package) {
                    Ok(()) => {
                        self.state = DestState::Staged;
                        self.set_status(platform, 0);
                    }
                    Err(e) => {
                        self.set_status(platform, e.code());
                        self.error = Some(e);
                        self.state = DestState::Aborted;
                    }
                }
                self.since_status = 0;
                self.status_message()
            }
            (MessageBody::MigrationPackage(_), DestState::Staged | DestState::Aborted) => {
                self.status_message()
            }
            (MessageBody::MigrationDecision(d), DestState::Staged)
                if d.commit && self.decision_holds(d) =>
            {
                if let Err(e) = self.commit(platform) {
                    self.error = Some(e);
                    self.state = DestState::Aborted;
                } else {
                    self.state = DestState::Committed;
                }
                Vec::new()
            }
            (MessageBody::MigrationDecision(d), DestState::Staged | DestState::AwaitingPackage)
                if !d.commit && self.decision_holds(d) =>
            {
                platform.mtm_mut().discard_staged(&self.session);
                self.error.get_or_insert(ProtocolError::TimedOut);
                self.state = DestState::Aborted;
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn import(
        &mut self,
        platform: &mut Platform,
        package: &MigrationPackage,
    ) -> Result<(), ProtocolError> {
        let proof = &package.source_state_proof;
        if proof.nonce != self.nonce {
            return Err(ProtocolError::NonceMismatch);
        }
        if proof.aik_public != self.source_cert.aik_public
            || !proof.verify(&self.source_cert.aik_public)
        {
            return Err(ProtocolError::IntegrityFailure);
        }
        let ro_key = platform
            .root_key(&self.ro)
            .cloned()
            .ok_or(ProtocolError::NoSubsystem)?;
        let (policy, config) = (&package.source_policy, &package.source_config);
        if policy.owner != self.ro
            || config.owner != self.ro
            || !policy.verify(&ro_key)
            || !config.verify(&ro_key)
        {
            return Err(ProtocolError::PolicyVerifyFailed);
        }
        platform.mtm_mut().stage_migrated_instance(
            self.session,
            self.handle,
            &package.key_blob,
            &package.instance_image,
        )?;
        self.pending = Some((policy.clone(), config.clone()));
        Ok(())
    }

    fn commit(&mut self, platform: &mut Platform) -> Result<(), ProtocolError> {
        platform.mtm_mut().commit_staged(&self.session)?;
        let (policy, config) = self
            .pending
            .take()
            .ok_or(ProtocolError::UnexpectedMessage)?;
        let tss = platform
            .subsystem_mut(&self.ro)
            .ok_or(ProtocolError::NoSubsystem)?;
        tss.policy = Some(policy);
        tss.config = Some(config);
        Ok(())
    }

    /// One unit of logical time: gives up waiting for a package, or repeats
    /// the success status until the source decides.
    pub fn tick(&mut self, _platform: &mut Platform) -> Vec<ProtocolMessage> {
        self.elapsed += 1;
        match self.state {
            DestState::AwaitingPackage if self.elapsed >= self.config.timeout_ticks => {
                self.error = Some(ProtocolError::TimedOut);
                self.state = DestState::Aborted;
                Vec::new()
            }
            DestState::Staged => {
                self.since_status += 1;
                if self.since_status >= self.config.retransmit_ticks {
                    self.since_status = 0;
                    self.status_message()
                } else {
                    Vec::new()
                }
            }
            _ => Vec::new(),
        }
    }
}
