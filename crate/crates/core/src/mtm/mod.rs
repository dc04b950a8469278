//! The generic MTM: a vMTM instance manager hosting isolated per-stakeholder
//! instances inside one device boundary.
//!
//! Engines never hold a [`VmtmInstance`]; they hold an [`InstanceHandle`]
//! and go through [`MtmDevice::route_command`], which resolves the handle,
//! applies the profile gate and executes against that instance only.

mod command;
mod hierarchy;
mod instance;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer};
use crate::crypto::{
    self, hash_parts, CryptoError, DeterministicRng, Digest, KeyPair, KeyUsage, PcrBinding,
    PublicKey, SealedBlob, SecretBytes, SuiteId, SymmetricKey,
};
use crate::rim::{check_cert, CertVerdict, RimCertificate};

pub use command::{CommandFrame, MtmCommand, MtmCommandKind, MtmResponse};
pub use hierarchy::{HierarchyError, KeyHierarchy, KeyNode, DEFAULT_MAX_DEPTH};
pub use instance::{
    AttestationQuote, InstanceHandle, InstanceImage, Lifecycle, MigrationLock, PcrBank, Profile,
    VmtmInstance, PCR_BOOT, PCR_COUNT, PCR_ENGINE,
};

pub const DEFAULT_MAX_INSTANCES: usize = 8;

const IMAGE_AAD: &[u8] = b"mtm-instance-image-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MtmError {
    #[error("unknown instance handle")]
    UnknownHandle,
    #[error("command not available for this instance profile")]
    ProfileViolation,
    #[error("command not permitted in the current lifecycle state")]
    LifecycleViolation,
    #[error("stakeholder already has a live instance")]
    DuplicateStakeholder,
    #[error("instance limit reached")]
    ResourceLimit,
    #[error("PCR index {0} out of range")]
    PcrIndexOutOfRange(u8),
    #[error("unknown attestation identity key")]
    UnknownAik,
    #[error("unknown parent key")]
    UnknownParent,
    #[error("unknown key")]
    UnknownKey,
    #[error("key hierarchy depth limit reached")]
    HierarchyDepthLimit,
    #[error("instance already owned")]
    AlreadyOwned,
    #[error("no endorsement key installed")]
    MissingEk,
    #[error("certificate signature invalid")]
    BadSignature,
    #[error("certificate revoked")]
    Revoked,
    #[error("certificate not yet valid")]
    NotYetValid,
    #[error("measurement does not match reference")]
    MeasurementMismatch,
    #[error("PCR configuration mismatch")]
    ConfigMismatch,
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("key usage does not permit this operation")]
    WrongUsage,
    #[error("data addressed to a different key")]
    WrongKey,
    #[error("PCR state changed since migration lock")]
    StateChangedSinceLock,
    #[error("image belongs to a different stakeholder")]
    StakeholderMismatch,
    #[error("no staged import for this session")]
    UnknownImport,
}

impl MtmError {
    pub fn code(self) -> u8 {
        use MtmError::*;
        match self {
            UnknownHandle => 1,
            ProfileViolation => 2,
            LifecycleViolation => 3,
            DuplicateStakeholder => 4,
            ResourceLimit => 5,
            PcrIndexOutOfRange(_) => 6,
            UnknownAik => 7,
            UnknownParent => 8,
            UnknownKey => 9,
            HierarchyDepthLimit => 10,
            AlreadyOwned => 11,
            MissingEk => 12,
            BadSignature => 13,
            Revoked => 14,
            NotYetValid => 15,
            MeasurementMismatch => 16,
            ConfigMismatch => 17,
            IntegrityFailure => 18,
            WrongUsage => 19,
            WrongKey => 20,
            StateChangedSinceLock => 21,
            StakeholderMismatch => 22,
            UnknownImport => 23,
        }
    }

    pub fn detail(self) -> u8 {
        match self {
            MtmError::PcrIndexOutOfRange(i) => i,
            _ => 0,
        }
    }

    pub fn from_code(code: u8, detail: u8) -> Option<Self> {
        use MtmError::*;
        Some(match code {
            1 => UnknownHandle,
            2 => ProfileViolation,
            3 => LifecycleViolation,
            4 => DuplicateStakeholder,
            5 => ResourceLimit,
            6 => PcrIndexOutOfRange(detail),
            7 => UnknownAik,
            8 => UnknownParent,
            9 => UnknownKey,
            10 => HierarchyDepthLimit,
            11 => AlreadyOwned,
            12 => MissingEk,
            13 => BadSignature,
            14 => Revoked,
            15 => NotYetValid,
            16 => MeasurementMismatch,
            17 => ConfigMismatch,
            18 => IntegrityFailure,
            19 => WrongUsage,
            20 => WrongKey,
            21 => StateChangedSinceLock,
            22 => StakeholderMismatch,
            23 => UnknownImport,
            _ => return None,
        })
    }
}

impl From<CryptoError> for MtmError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::WrongUsage { .. } => MtmError::WrongUsage,
            CryptoError::WrongKey => MtmError::WrongKey,
            CryptoError::ConfigMismatch => MtmError::ConfigMismatch,
            CryptoError::IntegrityFailure | CryptoError::SuiteMismatch(_) => {
                MtmError::IntegrityFailure
            }
        }
    }
}

impl From<HierarchyError> for MtmError {
    fn from(e: HierarchyError) -> Self {
        match e {
            HierarchyError::NoRoot => MtmError::LifecycleViolation,
            HierarchyError::UnknownParent(_) => MtmError::UnknownParent,
            HierarchyError::UnknownKey(_) => MtmError::UnknownKey,
            HierarchyError::ParentNotStorage(_) => MtmError::WrongUsage,
            HierarchyError::DepthLimit(_) => MtmError::HierarchyDepthLimit,
            HierarchyError::Integrity => MtmError::IntegrityFailure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MtmConfig {
    pub max_instances: usize,
    pub max_depth: u8,
}

impl Default for MtmConfig {
    fn default() -> Self {
        Self {
            max_instances: DEFAULT_MAX_INSTANCES,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

/// A decrypted migration image awaiting the source's commit decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedImport {
    pub target: InstanceHandle,
    pub image: InstanceImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtmDevice {
    device_id: Digest,
    suite: SuiteId,
    config: MtmConfig,
    storage_key: SecretBytes,
    instances: BTreeMap<InstanceHandle, VmtmInstance>,
    staged: BTreeMap<Digest, StagedImport>,
    next_handle: u32,
    monotonic_counter: u64,
    root_verification_keys: BTreeMap<String, PublicKey>,
    rng: DeterministicRng,
}

impl MtmDevice {
    pub fn new(seed: u64, suite: SuiteId) -> Self {
        Self::with_config(seed, suite, MtmConfig::default())
    }

    pub fn with_config(seed: u64, suite: SuiteId, config: MtmConfig) -> Self {
        let mut rng = DeterministicRng::from_seed(seed);
        let device_id = hash_parts(&[b"mtm-device-id", &rng.array32()]);
        let storage_key = SecretBytes::new(rng.array32());
        Self {
            device_id,
            suite,
            config,
            storage_key,
            instances: BTreeMap::new(),
            staged: BTreeMap::new(),
            next_handle: 1,
            monotonic_counter: 0,
            root_verification_keys: BTreeMap::new(),
            rng,
        }
    }

    pub fn device_id(&self) -> Digest {
        self.device_id
    }

    pub fn suite(&self) -> SuiteId {
        self.suite
    }

    pub fn config(&self) -> MtmConfig {
        self.config
    }

    pub fn monotonic_counter(&self) -> u64 {
        self.monotonic_counter
    }

    /// The device RNG, also used by engines for nonces and session keys.
    pub fn rng(&mut self) -> &mut DeterministicRng {
        &mut self.rng
    }

    pub fn add_root_verification_key(&mut self, stakeholder: &str, key: PublicKey) {
        self.root_verification_keys
            .insert(stakeholder.to_owned(), key);
    }

    pub fn root_verification_keys(&self) -> &BTreeMap<String, PublicKey> {
        &self.root_verification_keys
    }

    /// Read-only view for inspection. Destroyed handles are reported unknown.
    pub fn instance(&self, handle: InstanceHandle) -> Result<&VmtmInstance, MtmError> {
        self.instances
            .get(&handle)
            .filter(|i| i.lifecycle != Lifecycle::Destroyed)
            .ok_or(MtmError::UnknownHandle)
    }

    /// Every instance ever created, including destroyed tombstones.
    pub fn all_instances(&self) -> impl Iterator<Item = (InstanceHandle, &VmtmInstance)> {
        self.instances.iter().map(|(h, i)| (*h, i))
    }

    pub fn live_instances(&self) -> impl Iterator<Item = (InstanceHandle, &VmtmInstance)> {
        self.all_instances()
            .filter(|(_, i)| i.lifecycle != Lifecycle::Destroyed)
    }

    pub fn find_instance(&self, stakeholder: &str) -> Option<InstanceHandle> {
        self.live_instances()
            .find(|(_, i)| i.stakeholder == stakeholder)
            .map(|(h, _)| h)
    }

    pub fn staged_imports(&self) -> impl Iterator<Item = (&Digest, &StagedImport)> {
        self.staged.iter()
    }

    fn allocate(&mut self, instance: VmtmInstance) -> Result<InstanceHandle, MtmError> {
        if self.find_instance(&instance.stakeholder).is_some() {
            return Err(MtmError::DuplicateStakeholder);
        }
        if self.live_instances().count() >= self.config.max_instances {
            return Err(MtmError::ResourceLimit);
        }
        let handle = InstanceHandle(self.next_handle);
        self.next_handle += 1;
        self.instances.insert(handle, instance);
        Ok(handle)
    }

    pub fn create_instance(
        &mut self,
        stakeholder: &str,
        profile: Profile,
    ) -> Result<InstanceHandle, MtmError> {
        self.allocate(VmtmInstance::new(
            stakeholder,
            profile,
            self.monotonic_counter,
        ))
    }

    pub fn destroy_instance(&mut self, handle: InstanceHandle) -> Result<(), MtmError> {
        self.instance(handle)?;
        let inst = self.instances.get_mut(&handle).expect("checked above");
        inst.wipe();
        self.staged.retain(|_, s| s.target != handle);
        Ok(())
    }

    /// Wire-level entry point: decode, execute, encode.
    pub fn process_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let response = match CommandFrame::decode(frame) {
            Ok(frame) => self.route_command(frame.handle, frame.command).into(),
            Err(_) => MtmResponse::Error(MtmError::IntegrityFailure),
        };
        response.encode()
    }

    pub fn route_command(
        &mut self,
        handle: InstanceHandle,
        command: MtmCommand,
    ) -> Result<MtmResponse, MtmError> {
        let Self {
            instances,
            rng,
            storage_key,
            monotonic_counter,
            root_verification_keys,
            config,
            suite,
            ..
        } = self;
        let inst = instances
            .get_mut(&handle)
            .filter(|i| i.lifecycle != Lifecycle::Destroyed)
            .ok_or(MtmError::UnknownHandle)?;
        if command.kind().is_mrtm_only() && inst.profile != Profile::Mrtm {
            return Err(MtmError::ProfileViolation);
        }
        let mut ctx = ExecContext {
            rng,
            storage_key: storage_key.expose(),
            counter: monotonic_counter,
            roots: root_verification_keys,
            max_depth: config.max_depth,
            suite: *suite,
        };
        execute(inst, command, &mut ctx)
    }

    /// Encrypts the full instance under `migration_key`. The instance must be
    /// migration-locked.
    pub fn serialize_instance(
        &mut self,
        handle: InstanceHandle,
        migration_key: &SymmetricKey,
    ) -> Result<Vec<u8>, MtmError> {
        let image = self.snapshot(handle)?;
        Ok(migration_key.encrypt(&image.to_canonical(), IMAGE_AAD, &mut self.rng))
    }

    fn snapshot(&self, handle: InstanceHandle) -> Result<InstanceImage, MtmError> {
        let inst = self.instance(handle)?;
        if inst.lifecycle != Lifecycle::MigrationLocked {
            return Err(MtmError::LifecycleViolation);
        }
        let srk = match inst.hierarchy.root() {
            Some(_) => Some(inst.hierarchy.root_secret(self.storage_key.expose())?),
            None => None,
        };
        Ok(InstanceImage {
            stakeholder: inst.stakeholder.clone(),
            profile: inst.profile,
            pcrs: inst.pcrs.clone(),
            ek: inst.ek.clone(),
            ek_certificate: inst.ek_certificate.clone(),
            hierarchy: inst.hierarchy.clone(),
            srk,
            aiks: inst.aiks.clone(),
            owner_auth: inst.owner_auth.clone(),
            lifecycle: inst.lifecycle,
            verified_counter: inst.verified_counter,
        })
    }

    pub fn import_instance(
        &mut self,
        image: &[u8],
        migration_key: &SymmetricKey,
    ) -> Result<InstanceHandle, MtmError> {
        let image = decrypt_image(image, migration_key)?;
        if self.find_instance(&image.stakeholder).is_some() {
            return Err(MtmError::DuplicateStakeholder);
        }
        let mut hierarchy = image.hierarchy.clone();
        if let Some(srk) = &image.srk {
            hierarchy.rewrap_root(srk, self.storage_key.expose(), &mut self.rng);
        }
        let instance = VmtmInstance {
            stakeholder: image.stakeholder,
            profile: image.profile,
            pcrs: image.pcrs,
            ek: image.ek,
            ek_certificate: image.ek_certificate,
            hierarchy,
            aiks: image.aiks,
            owner_auth: image.owner_auth,
            lifecycle: Lifecycle::Owned,
            verified_counter: self.monotonic_counter,
            lock: None,
        };
        self.allocate(instance)
    }

    /// Generates a migration key inside the device, seals it to `target_ek`
    /// under `required_config` and returns `(key_blob, encrypted image)`.
    /// The key never leaves the device in the clear.
    pub fn export_for_migration(
        &mut self,
        handle: InstanceHandle,
        target_ek: &PublicKey,
        required_config: PcrBinding,
    ) -> Result<(SealedBlob, Vec<u8>), MtmError> {
        let inst = self.instance(handle)?;
        let lock = inst.lock.as_ref().ok_or(MtmError::LifecycleViolation)?;
        if lock.pcr_composite != inst.pcrs.composite() {
            return Err(MtmError::StateChangedSinceLock);
        }
        let key = SymmetricKey::generate(&mut self.rng, "migration");
        let image = self.serialize_instance(handle, &key)?;
        let blob = crypto::seal(target_ek, key.expose(), required_config, &mut self.rng)?;
        Ok((blob, image))
    }

    /// Unseals the migration key with `receiver`'s EK and live PCRs,
    /// decrypts the image and holds it until [`Self::commit_staged`].
    pub fn stage_migrated_instance(
        &mut self,
        session: Digest,
        receiver: InstanceHandle,
        key_blob: &SealedBlob,
        image: &[u8],
    ) -> Result<(), MtmError> {
        let inst = self.instance(receiver)?;
        if inst.lifecycle != Lifecycle::Owned {
            return Err(MtmError::LifecycleViolation);
        }
        let ek = inst.ek.as_ref().ok_or(MtmError::MissingEk)?;
        let key = crypto::unseal(ek, key_blob, inst.pcrs.values())?;
        let key: [u8; 32] = key.try_into().map_err(|_| MtmError::IntegrityFailure)?;
        let image = decrypt_image(image, &SymmetricKey::new(key, "migration"))?;
        if image.stakeholder != inst.stakeholder {
            return Err(MtmError::StakeholderMismatch);
        }
        if image.srk.is_none() {
            return Err(MtmError::IntegrityFailure);
        }
        self.staged.insert(
            session,
            StagedImport {
                target: receiver,
                image,
            },
        );
        Ok(())
    }

    /// Transplants the staged hierarchy into its target instance, which keeps
    /// its own endorsement key, AIKs and PCRs.
    pub fn commit_staged(&mut self, session: &Digest) -> Result<InstanceHandle, MtmError> {
        let staged = self.staged.remove(session).ok_or(MtmError::UnknownImport)?;
        let Self {
            instances,
            rng,
            storage_key,
            monotonic_counter,
            ..
        } = self;
        let inst = instances
            .get_mut(&staged.target)
            .filter(|i| i.lifecycle == Lifecycle::Owned)
            .ok_or(MtmError::UnknownHandle)?;
        let mut hierarchy = staged.image.hierarchy;
        let srk = staged.image.srk.expect("checked when staged");
        hierarchy.rewrap_root(&srk, storage_key.expose(), rng);
        inst.hierarchy = hierarchy;
        inst.owner_auth = staged.image.owner_auth;
        inst.verified_counter = *monotonic_counter;
        Ok(staged.target)
    }

    pub fn discard_staged(&mut self, session: &Digest) -> bool {
        self.staged.remove(session).is_some()
    }
}

pub fn decrypt_image(
    image: &[u8],
    migration_key: &SymmetricKey,
) -> Result<InstanceImage, MtmError> {
    let plain = migration_key
        .decrypt(image, IMAGE_AAD)
        .map_err(|_| MtmError::IntegrityFailure)?;
    InstanceImage::from_canonical(&plain).map_err(|_| MtmError::IntegrityFailure)
}

struct ExecContext<'a> {
    rng: &'a mut DeterministicRng,
    storage_key: &'a [u8; 32],
    counter: &'a mut u64,
    roots: &'a BTreeMap<String, PublicKey>,
    max_depth: u8,
    suite: SuiteId,
}

fn require(cond: bool, err: MtmError) -> Result<(), MtmError> {
    if cond {
        Ok(())
    } else {
        Err(err)
    }
}

fn require_keys(inst: &VmtmInstance) -> Result<(), MtmError> {
    require(
        matches!(
            inst.lifecycle,
            Lifecycle::Owned | Lifecycle::MigrationLocked
        ),
        MtmError::LifecycleViolation,
    )
}

fn usable_key(
    inst: &VmtmInstance,
    key_id: &Digest,
    storage_key: &[u8; 32],
) -> Result<KeyPair, MtmError> {
    require_keys(inst)?;
    let node = inst.hierarchy.get(key_id).ok_or(MtmError::UnknownKey)?;
    if let Some(binding) = &node.pcr_binding {
        require(
            binding.matches(inst.pcrs.values()),
            MtmError::ConfigMismatch,
        )?;
    }
    Ok(inst.hierarchy.unwrap_key(key_id, storage_key)?)
}

fn check_rim(cert: &RimCertificate, ctx: &ExecContext<'_>) -> Result<(), MtmError> {
    match check_cert(cert, ctx.roots, *ctx.counter) {
        CertVerdict::Valid => Ok(()),
        CertVerdict::BadSignature => Err(MtmError::BadSignature),
        CertVerdict::Revoked => Err(MtmError::Revoked),
        CertVerdict::NotYetValid => Err(MtmError::NotYetValid),
    }
}

fn execute(
    inst: &mut VmtmInstance,
    command: MtmCommand,
    ctx: &mut ExecContext<'_>,
) -> Result<MtmResponse, MtmError> {
    use MtmCommand as C;
    match command {
        C::PcrRead { index } => Ok(MtmResponse::Pcr(inst.pcrs.get(index)?)),
        C::Extend { index, digest } => Ok(MtmResponse::Pcr(inst.pcrs.extend(index, &digest)?)),
        C::InstallEk { certificate } => {
            require(
                inst.ek.is_none() && inst.lifecycle == Lifecycle::Clean,
                MtmError::AlreadyOwned,
            )?;
            let ek = ctx.rng.keypair(KeyUsage::Decryption, ctx.suite);
            let public = ek.public.clone();
            inst.install_ek(ek, certificate)?;
            Ok(MtmResponse::PublicKey(public))
        }
        C::ReadEk => inst
            .ek_public()
            .cloned()
            .map(MtmResponse::PublicKey)
            .ok_or(MtmError::MissingEk),
        C::TakeOwnership { owner_auth } => {
            require(inst.lifecycle == Lifecycle::Clean, MtmError::AlreadyOwned)?;
            require(inst.ek.is_some(), MtmError::MissingEk)?;
            let srk = ctx.rng.keypair(KeyUsage::Binding, ctx.suite);
            inst.hierarchy = KeyHierarchy::with_root(&srk, ctx.storage_key, ctx.rng);
            inst.owner_auth = Some(SecretBytes::new(owner_auth));
            inst.set_lifecycle(Lifecycle::Owned);
            Ok(MtmResponse::PublicKey(srk.public))
        }
        C::CreateAik => {
            require(inst.ek.is_some(), MtmError::MissingEk)?;
            let aik = ctx.rng.keypair(KeyUsage::Signing, ctx.suite);
            let public = aik.public.clone();
            inst.aiks.push(aik);
            Ok(MtmResponse::PublicKey(public))
        }
        C::Quote {
            aik,
            nonce,
            selection,
        } => {
            let key = inst
                .aiks
                .iter()
                .find(|k| k.key_id() == aik)
                .ok_or(MtmError::UnknownAik)?;
            let pcrs = inst.pcrs.select(&selection)?;
            let signature = key.sign(&AttestationQuote::signed_message(&nonce, &pcrs))?;
            Ok(MtmResponse::Quote(AttestationQuote {
                aik_public: key.public.clone(),
                nonce,
                pcrs,
                signature,
            }))
        }
        C::CreateWrapKey {
            parent,
            usage,
            pcr_binding,
        } => {
            require(
                inst.lifecycle == Lifecycle::Owned,
                MtmError::LifecycleViolation,
            )?;
            if let Some(b) = &pcr_binding {
                require(
                    b.entries().iter().all(|(i, _)| (*i as usize) < PCR_COUNT),
                    MtmError::PcrIndexOutOfRange(PCR_COUNT as u8),
                )?;
            }
            let key = ctx.rng.keypair(usage, ctx.suite);
            inst.hierarchy
                .insert_child(parent, &key, pcr_binding, ctx.max_depth, ctx.rng)?;
            Ok(MtmResponse::PublicKey(key.public))
        }
        C::LoadKey { key_id } => Ok(MtmResponse::PublicKey(
            usable_key(inst, &key_id, ctx.storage_key)?.public,
        )),
        C::Sign { key_id, data } => Ok(MtmResponse::Signature(
            usable_key(inst, &key_id, ctx.storage_key)?.sign(&data)?,
        )),
        C::Decrypt { key_id, ciphertext } => {
            let key = usable_key(inst, &key_id, ctx.storage_key)?;
            Ok(MtmResponse::Data(
                key.decrypt(&ciphertext, key_id.as_bytes())?,
            ))
        }
        C::Seal {
            key_id,
            payload,
            pcr_binding,
        } => {
            require_keys(inst)?;
            let node = inst.hierarchy.get(&key_id).ok_or(MtmError::UnknownKey)?;
            require(node.public.usage == KeyUsage::Binding, MtmError::WrongUsage)?;
            Ok(MtmResponse::Blob(crypto::seal(
                &node.public,
                &payload,
                pcr_binding,
                ctx.rng,
            )?))
        }
        C::Unseal { key_id, blob } => {
            let key = usable_key(inst, &key_id, ctx.storage_key)?;
            Ok(MtmResponse::Data(crypto::unseal(
                &key,
                &blob,
                inst.pcrs.values(),
            )?))
        }
        C::EkDecrypt { ciphertext, aad } => {
            let ek = inst.ek.as_ref().ok_or(MtmError::MissingEk)?;
            Ok(MtmResponse::Data(ek.decrypt(&ciphertext, &aad)?))
        }
        C::ReadCounter => Ok(MtmResponse::Counter(*ctx.counter)),
        C::IncrementCounter => {
            *ctx.counter += 1;
            Ok(MtmResponse::Counter(*ctx.counter))
        }
        C::VerifyRimCert { cert } => {
            check_rim(&cert, ctx)?;
            Ok(MtmResponse::Ok)
        }
        C::VerifyRimCertAndExtend { cert, measurement } => {
            check_rim(&cert, ctx)?;
            require(
                measurement == cert.expected_digest,
                MtmError::MeasurementMismatch,
            )?;
            Ok(MtmResponse::Pcr(
                inst.pcrs.extend(cert.target_pcr, &measurement)?,
            ))
        }
        C::LockForMigration { nonce } => {
            require(
                inst.lifecycle == Lifecycle::Owned,
                MtmError::LifecycleViolation,
            )?;
            inst.lock = Some(MigrationLock {
                nonce,
                pcr_composite: inst.pcrs.composite(),
            });
            inst.set_lifecycle(Lifecycle::MigrationLocked);
            Ok(MtmResponse::Ok)
        }
        C::UnlockMigration => {
            require(
                inst.lifecycle == Lifecycle::MigrationLocked,
                MtmError::LifecycleViolation,
            )?;
            inst.lock = None;
            inst.set_lifecycle(Lifecycle::Owned);
            Ok(MtmResponse::Ok)
        }
        C::ReadLifecycle => Ok(MtmResponse::Lifecycle(inst.lifecycle)),
    }
}

/// Helpers for unpacking typed responses.
impl MtmResponse {
    pub fn pcr(self) -> Result<Digest, MtmError> {
        match self {
            MtmResponse::Pcr(d) => Ok(d),
            MtmResponse::Error(e) => Err(e),
            _ => Err(MtmError::IntegrityFailure),
        }
    }

    pub fn public_key(self) -> Result<PublicKey, MtmError> {
        match self {
            MtmResponse::PublicKey(k) => Ok(k),
            MtmResponse::Error(e) => Err(e),
            _ => Err(MtmError::IntegrityFailure),
        }
    }

    pub fn quote(self) -> Result<AttestationQuote, MtmError> {
        match self {
            MtmResponse::Quote(q) => Ok(q),
            MtmResponse::Error(e) => Err(e),
            _ => Err(MtmError::IntegrityFailure),
        }
    }

    pub fn data(self) -> Result<Vec<u8>, MtmError> {
        match self {
            MtmResponse::Data(d) => Ok(d),
            MtmResponse::Error(e) => Err(e),
            _ => Err(MtmError::IntegrityFailure),
        }
    }

    pub fn signature(self) -> Result<crypto::Signature, MtmError> {
        match self {
            MtmResponse::Signature(s) => Ok(s),
            MtmResponse::Error(e) => Err(e),
            _ => Err(MtmError::IntegrityFailure),
        }
    }
}

impl Canonical for StagedImport {
    fn write(&self, w: &mut Writer) {
        w.u32(self.target.0).nested(&self.image);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            target: InstanceHandle(r.u32()?),
            image: r.nested()?,
        })
    }
}

/// Full device state including secrets; persisted only inside an encrypted
/// state file.
impl Canonical for MtmDevice {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.device_id)
            .u8(self.suite.code())
            .u64(self.config.max_instances as u64)
            .u8(self.config.max_depth);
        w.bytes(self.storage_key.expose());
        let instances: Vec<_> = self.instances.iter().collect();
        w.list_with(&instances, |w, (h, inst)| {
            w.u32(h.0).nested(*inst);
        });
        let staged: Vec<_> = self.staged.iter().collect();
        w.list_with(&staged, |w, (session, import)| {
            w.nested(*session).nested(*import);
        });
        w.u32(self.next_handle).u64(self.monotonic_counter);
        let roots: Vec<_> = self.root_verification_keys.iter().collect();
        w.list_with(&roots, |w, (id, key)| {
            w.str(id).nested(*key);
        });
        w.nested(&self.rng);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let device_id = r.nested()?;
        let suite = SuiteId::from_code(r.u8()?)?;
        let config = MtmConfig {
            max_instances: r.u64()? as usize,
            max_depth: r.u8()?,
        };
        let storage_key = SecretBytes::new(r.array32()?);
        let instances = r
            .list_with(|r| Ok((InstanceHandle(r.u32()?), r.nested::<VmtmInstance>()?)))?
            .into_iter()
            .collect::<BTreeMap<_, _>>();
        let staged = r
            .list_with(|r| Ok((r.nested::<Digest>()?, r.nested::<StagedImport>()?)))?
            .into_iter()
            .collect();
        let next_handle = r.u32()?;
        if instances.keys().any(|h| h.0 >= next_handle) {
            return Err(CodecError::Malformed {
                tag: 8,
                reason: "handle counter behind allocated handles",
            });
        }
        Ok(Self {
            device_id,
            suite,
            config,
            storage_key,
            instances,
            staged,
            next_handle,
            monotonic_counter: r.u64()?,
            root_verification_keys: r
                .list_with(|r| Ok((r.string()?, r.nested::<PublicKey>()?)))?
                .into_iter()
                .collect(),
            rng: r.nested()?,
        })
    }
}

#[cfg(test)]
mod tests;
