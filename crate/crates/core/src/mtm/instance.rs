use std::fmt;

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer};
use crate::crypto::{
    hash, hash_parts, Digest, KeyPair, KeyUsage, Nonce, PcrBinding, PublicKey, SecretBytes,
    Signature, SuiteId,
};

use super::hierarchy::KeyHierarchy;
use super::MtmError;

pub const PCR_COUNT: usize = 16;
/// Device-manufacturer boot chain.
pub const PCR_BOOT: u8 = 0;
/// Engine and service images.
pub const PCR_ENGINE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceHandle(pub u32);

impl fmt::Display for InstanceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vmtm#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    /// Remote-owner profile; adds the local-verification commands.
    Mrtm,
    Mltm,
}

impl Profile {
    pub fn code(self) -> u8 {
        match self {
            Profile::Mrtm => 1,
            Profile::Mltm => 2,
        }
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        match code {
            1 => Ok(Profile::Mrtm),
            2 => Ok(Profile::Mltm),
            value => Err(CodecError::UnknownVariant {
                what: "profile",
                value,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lifecycle {
    Clean,
    Owned,
    MigrationLocked,
    Destroyed,
}

impl Lifecycle {
    pub fn code(self) -> u8 {
        match self {
            Lifecycle::Clean => 1,
            Lifecycle::Owned => 2,
            Lifecycle::MigrationLocked => 3,
            Lifecycle::Destroyed => 4,
        }
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        match code {
            1 => Ok(Lifecycle::Clean),
            2 => Ok(Lifecycle::Owned),
            3 => Ok(Lifecycle::MigrationLocked),
            4 => Ok(Lifecycle::Destroyed),
            value => Err(CodecError::UnknownVariant {
                what: "lifecycle",
                value,
            }),
        }
    }

    /// The declared transition relation.
    pub fn can_transition_to(self, next: Lifecycle) -> bool {
        use Lifecycle::*;
        matches!(
            (self, next),
            (Clean, Owned)
                | (Owned, MigrationLocked)
                | (MigrationLocked, Owned)
                | (Clean | Owned | MigrationLocked, Destroyed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrBank([Digest; PCR_COUNT]);

impl Default for PcrBank {
    fn default() -> Self {
        Self([Digest::ZERO; PCR_COUNT])
    }
}

impl PcrBank {
    pub fn get(&self, index: u8) -> Result<Digest, MtmError> {
        self.0
            .get(index as usize)
            .copied()
            .ok_or(MtmError::PcrIndexOutOfRange(index))
    }

    pub fn values(&self) -> &[Digest] {
        &self.0
    }

    /// `pcr[i] := H(pcr[i] || measurement)`
    pub fn extend(&mut self, index: u8, measurement: &Digest) -> Result<Digest, MtmError> {
        let slot = self
            .0
            .get_mut(index as usize)
            .ok_or(MtmError::PcrIndexOutOfRange(index))?;
        *slot = hash_parts(&[slot.as_bytes(), measurement.as_bytes()]);
        Ok(*slot)
    }

    pub fn select(&self, indices: &[u8]) -> Result<PcrBinding, MtmError> {
        let entries = indices
            .iter()
            .map(|&i| Ok((i, self.get(i)?)))
            .collect::<Result<Vec<_>, MtmError>>()?;
        Ok(PcrBinding::new(entries))
    }

    /// Digest over the whole bank.
    pub fn composite(&self) -> Digest {
        let parts: Vec<&[u8]> = self.0.iter().map(|d| d.as_bytes().as_slice()).collect();
        hash_parts(&parts)
    }
}

impl Canonical for PcrBank {
    fn write(&self, w: &mut Writer) {
        w.list(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let values: Vec<Digest> = r.list()?;
        let values: [Digest; PCR_COUNT] = values.try_into().map_err(|_| CodecError::Malformed {
            tag: 1,
            reason: "PCR bank must hold 16 values",
        })?;
        Ok(Self(values))
    }
}

/// Selected PCR values and a challenger nonce, signed by an AIK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationQuote {
    pub aik_public: PublicKey,
    pub nonce: Nonce,
    pub pcrs: PcrBinding,
    pub signature: Signature,
}

impl AttestationQuote {
    pub fn signed_message(nonce: &Nonce, pcrs: &PcrBinding) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("mtm-quote-v1").nested(nonce).nested(pcrs);
        w.finish()
    }

    pub fn verify(&self, aik: &PublicKey) -> bool {
        self.aik_public == *aik
            && aik.verify(
                &Self::signed_message(&self.nonce, &self.pcrs),
                &self.signature,
            )
    }

    pub fn pcr(&self, index: u8) -> Option<Digest> {
        self.pcrs
            .entries()
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, d)| *d)
    }
}

impl Canonical for AttestationQuote {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.aik_public)
            .nested(&self.nonce)
            .nested(&self.pcrs)
            .nested(&self.signature);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            aik_public: r.nested()?,
            nonce: r.nested()?,
            pcrs: r.nested()?,
            signature: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationLock {
    pub nonce: Nonce,
    pub pcr_composite: Digest,
}

/// One stakeholder's compartment inside the MTM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmtmInstance {
    pub(crate) stakeholder: String,
    pub(crate) profile: Profile,
    pub(crate) pcrs: PcrBank,
    pub(crate) ek: Option<KeyPair>,
    pub(crate) ek_certificate: Vec<u8>,
    pub(crate) hierarchy: KeyHierarchy,
    pub(crate) aiks: Vec<KeyPair>,
    pub(crate) owner_auth: Option<SecretBytes>,
    pub(crate) lifecycle: Lifecycle,
    pub(crate) verified_counter: u64,
    pub(crate) lock: Option<MigrationLock>,
}

impl VmtmInstance {
    pub(crate) fn new(stakeholder: &str, profile: Profile, counter: u64) -> Self {
        Self {
            stakeholder: stakeholder.to_owned(),
            profile,
            pcrs: PcrBank::default(),
            ek: None,
            ek_certificate: Vec::new(),
            hierarchy: KeyHierarchy::empty(),
            aiks: Vec::new(),
            owner_auth: None,
            lifecycle: Lifecycle::Clean,
            verified_counter: counter,
            lock: None,
        }
    }

    pub fn stakeholder(&self) -> &str {
        &self.stakeholder
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn pcrs(&self) -> &PcrBank {
        &self.pcrs
    }

    pub fn hierarchy(&self) -> &KeyHierarchy {
        &self.hierarchy
    }

    pub fn srk_id(&self) -> Option<Digest> {
        self.hierarchy.root()
    }

    pub fn ek_public(&self) -> Option<&PublicKey> {
        self.ek.as_ref().map(|k| &k.public)
    }

    pub fn ek_certificate(&self) -> &[u8] {
        &self.ek_certificate
    }

    pub fn aik_publics(&self) -> impl Iterator<Item = &PublicKey> {
        self.aiks.iter().map(|k| &k.public)
    }

    pub fn verified_counter(&self) -> u64 {
        self.verified_counter
    }

    pub fn migration_lock(&self) -> Option<&MigrationLock> {
        self.lock.as_ref()
    }

    pub fn has_owner_auth(&self) -> bool {
        self.owner_auth.is_some()
    }

    /// Stores the endorsement key and its certificate; only while clean.
    pub fn install_ek(&mut self, keypair: KeyPair, certificate: Vec<u8>) -> Result<(), MtmError> {
        if self.lifecycle != Lifecycle::Clean || self.ek.is_some() {
            return Err(MtmError::AlreadyOwned);
        }
        if !keypair.usage().can_encrypt() {
            return Err(MtmError::WrongUsage);
        }
        self.ek = Some(keypair);
        self.ek_certificate = certificate;
        Ok(())
    }

    pub(crate) fn set_lifecycle(&mut self, next: Lifecycle) {
        debug_assert!(
            self.lifecycle.can_transition_to(next),
            "{:?} -> {:?}",
            self.lifecycle,
            next
        );
        self.lifecycle = next;
    }

    pub(crate) fn wipe(&mut self) {
        self.ek = None;
        self.ek_certificate.clear();
        self.hierarchy.wipe();
        self.aiks.clear();
        self.owner_auth = None;
        self.lock = None;
        self.pcrs = PcrBank::default();
        self.lifecycle = Lifecycle::Destroyed;
    }
}

pub(crate) fn write_secret(w: &mut Writer, secret: Option<&SecretBytes>) {
    match secret {
        Some(s) => w.bytes(s.expose()),
        None => w.bytes(&[]),
    };
}

pub(crate) fn read_secret(r: &mut Reader<'_>) -> CodecResult<Option<SecretBytes>> {
    match r.bytes()? {
        [] => Ok(None),
        bytes => {
            let arr: [u8; 32] = bytes.try_into().map_err(|_| CodecError::Malformed {
                tag: 0,
                reason: "secret must be 32 bytes",
            })?;
            Ok(Some(SecretBytes::new(arr)))
        }
    }
}

fn write_keypair(w: &mut Writer, kp: &KeyPair) {
    let mut inner = Writer::new();
    inner
        .u8(kp.public.suite.code())
        .u8(kp.usage().code())
        .bytes(kp.secret().expose());
    w.bytes(&inner.finish());
}

fn read_keypair(r: &mut Reader<'_>) -> CodecResult<KeyPair> {
    let mut inner = Reader::new(r.bytes()?);
    let suite = SuiteId::from_code(inner.u8()?)?;
    let usage = KeyUsage::from_code(inner.u8()?)?;
    let secret = inner.array32()?;
    inner.finish()?;
    Ok(KeyPair::from_secret(suite, usage, secret))
}

struct KeyPairItem(KeyPair);

impl Canonical for KeyPairItem {
    fn write(&self, w: &mut Writer) {
        write_keypair(w, &self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        read_keypair(r).map(KeyPairItem)
    }
}

impl Canonical for MigrationLock {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.nonce).bytes(self.pcr_composite.as_bytes());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            nonce: r.nested()?,
            pcr_composite: Digest::from_bytes(r.array32()?),
        })
    }
}

/// Persistence form. Holds secrets in the clear; only ever written inside
/// an encrypted state file.
impl Canonical for VmtmInstance {
    fn write(&self, w: &mut Writer) {
        w.str(&self.stakeholder)
            .u8(self.profile.code())
            .nested(&self.pcrs);
        w.option(self.ek.clone().map(KeyPairItem).as_ref())
            .bytes(&self.ek_certificate)
            .nested(&self.hierarchy);
        let aiks: Vec<_> = self.aiks.iter().cloned().map(KeyPairItem).collect();
        w.list(&aiks);
        write_secret(w, self.owner_auth.as_ref());
        w.u8(self.lifecycle.code())
            .u64(self.verified_counter)
            .option(self.lock.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            stakeholder: r.string()?,
            profile: Profile::from_code(r.u8()?)?,
            pcrs: r.nested()?,
            ek: r.option::<KeyPairItem>()?.map(|k| k.0),
            ek_certificate: r.vec()?,
            hierarchy: r.nested()?,
            aiks: r.list::<KeyPairItem>()?.into_iter().map(|k| k.0).collect(),
            owner_auth: read_secret(r)?,
            lifecycle: Lifecycle::from_code(r.u8()?)?,
            verified_counter: r.u64()?,
            lock: r.option()?,
        })
    }
}

/// Decrypted contents of a migration image.
///
/// Non-root hierarchy nodes stay wrapped under their parents; only the SRK
/// private part is carried explicitly, and only inside the encrypted image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceImage {
    pub stakeholder: String,
    pub profile: Profile,
    pub pcrs: PcrBank,
    pub(crate) ek: Option<KeyPair>,
    pub ek_certificate: Vec<u8>,
    pub hierarchy: KeyHierarchy,
    pub(crate) srk: Option<KeyPair>,
    pub(crate) aiks: Vec<KeyPair>,
    pub(crate) owner_auth: Option<SecretBytes>,
    pub lifecycle: Lifecycle,
    pub verified_counter: u64,
}

impl InstanceImage {
    pub fn srk_id(&self) -> Option<Digest> {
        self.srk.as_ref().map(KeyPair::key_id)
    }

    /// Canonical form with `verified_counter` zeroed, for comparing images
    /// taken on different devices.
    pub fn counter_neutral_digest(&self) -> Digest {
        let mut copy = self.clone();
        copy.verified_counter = 0;
        hash(&copy.to_canonical())
    }
}

impl Canonical for InstanceImage {
    fn write(&self, w: &mut Writer) {
        w.str("mtm-instance-image-v1")
            .str(&self.stakeholder)
            .u8(self.profile.code())
            .nested(&self.pcrs);
        w.option(self.ek.clone().map(KeyPairItem).as_ref())
            .bytes(&self.ek_certificate)
            .nested(&self.hierarchy);
        w.option(self.srk.clone().map(KeyPairItem).as_ref());
        let aiks: Vec<_> = self.aiks.iter().cloned().map(KeyPairItem).collect();
        w.list(&aiks);
        write_secret(w, self.owner_auth.as_ref());
        w.u8(self.lifecycle.code()).u64(self.verified_counter);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        if r.bytes()? != b"mtm-instance-image-v1" {
            return Err(CodecError::Malformed {
                tag: 1,
                reason: "not an instance image",
            });
        }
        let image = Self {
            stakeholder: r.string()?,
            profile: Profile::from_code(r.u8()?)?,
            pcrs: r.nested()?,
            ek: r.option::<KeyPairItem>()?.map(|k| k.0),
            ek_certificate: r.vec()?,
            hierarchy: r.nested()?,
            srk: r.option::<KeyPairItem>()?.map(|k| k.0),
            aiks: r.list::<KeyPairItem>()?.into_iter().map(|k| k.0).collect(),
            owner_auth: read_secret(r)?,
            lifecycle: Lifecycle::from_code(r.u8()?)?,
            verified_counter: r.u64()?,
        };
        if image.srk.as_ref().map(KeyPair::key_id) != image.hierarchy.root() {
            return Err(CodecError::Malformed {
                tag: 8,
                reason: "SRK does not match hierarchy root",
            });
        }
        Ok(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extend_unrolled_once() {
        let mut bank = PcrBank::default();
        let d = hash(b"component");
        let expected = hash(&[[0u8; 32].as_slice(), d.as_bytes()].concat());
        assert_eq!(bank.extend(3, &d).unwrap(), expected);
        assert_eq!(bank.get(3).unwrap(), expected);
        assert_eq!(bank.get(2).unwrap(), Digest::ZERO);
    }

    #[test]
    fn extend_order_matters() {
        let (d1, d2) = (hash(b"1"), hash(b"2"));
        let mut a = PcrBank::default();
        let mut b = PcrBank::default();
        a.extend(0, &d1).unwrap();
        a.extend(0, &d2).unwrap();
        b.extend(0, &d2).unwrap();
        b.extend(0, &d1).unwrap();
        assert_ne!(a.get(0).unwrap(), b.get(0).unwrap());
    }

    #[test]
    fn index_range() {
        let mut bank = PcrBank::default();
        assert_eq!(
            bank.extend(16, &Digest::ZERO),
            Err(MtmError::PcrIndexOutOfRange(16))
        );
        assert!(bank.extend(15, &Digest::ZERO).is_ok());
    }

    #[test]
    fn lifecycle_transitions() {
        use Lifecycle::*;
        let all = [Clean, Owned, MigrationLocked, Destroyed];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Clean, Owned),
                (Clean, Destroyed),
                (Owned, MigrationLocked),
                (Owned, Destroyed),
                (MigrationLocked, Owned),
                (MigrationLocked, Destroyed)
            ]
        );
    }
}
