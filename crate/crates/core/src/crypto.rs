//! Cryptographic primitives shared by every layer of the simulator.
//!
//! Hashing is SHA-256 and symmetric encryption is ChaCha20-Poly1305 for all
//! suites. Asymmetric operations go through [`CryptoSuite`]: the standard
//! suite uses Ed25519 for signing keys and an X25519 hybrid scheme for
//! decryption and binding keys, while [`ToySuite`] is an insecure stand-in
//! for fast tests. Keys carry their suite tag, so mixing suites in one
//! simulation is detected rather than silently misbehaving.
//!
//! All randomness comes from a [`DeterministicRng`]; two runs from the same
//! seed produce the same keys, nonces and ciphertexts.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer};

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
const AEAD_NONCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key usage {actual:?} does not permit this operation")]
    WrongUsage { actual: KeyUsage },
    #[error("blob is addressed to a different key")]
    WrongKey,
    #[error("live PCR values do not match the required configuration")]
    ConfigMismatch,
    #[error("authentication failed")]
    IntegrityFailure,
    #[error("key belongs to suite {0:?}, expected a different suite")]
    SuiteMismatch(SuiteId),
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight hex digits, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyUsage {
    Signing,
    Decryption,
    /// Storage and sealing keys; the only usage allowed as a hierarchy parent.
    Binding,
}

impl KeyUsage {
    pub fn code(self) -> u8 {
        match self {
            KeyUsage::Signing => 1,
            KeyUsage::Decryption => 2,
            KeyUsage::Binding => 3,
        }
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        match code {
            1 => Ok(KeyUsage::Signing),
            2 => Ok(KeyUsage::Decryption),
            3 => Ok(KeyUsage::Binding),
            value => Err(CodecError::UnknownVariant {
                what: "key usage",
                value,
            }),
        }
    }

    pub fn can_encrypt(self) -> bool {
        matches!(self, KeyUsage::Decryption | KeyUsage::Binding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SuiteId {
    Standard,
    Toy,
}

impl SuiteId {
    pub fn code(self) -> u8 {
        match self {
            SuiteId::Standard => 1,
            SuiteId::Toy => 2,
        }
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        match code {
            1 => Ok(SuiteId::Standard),
            2 => Ok(SuiteId::Toy),
            value => Err(CodecError::UnknownVariant {
                what: "crypto suite",
                value,
            }),
        }
    }

    pub fn suite(self) -> &'static dyn CryptoSuite {
        match self {
            SuiteId::Standard => &StandardSuite,
            SuiteId::Toy => &ToySuite,
        }
    }
}

/// Asymmetric operations over raw 32-byte secrets and public keys.
pub trait CryptoSuite: Send + Sync {
    fn id(&self) -> SuiteId;
    fn derive_public(&self, usage: KeyUsage, secret: &[u8; 32]) -> [u8; 32];
    fn sign(&self, secret: &[u8; 32], message: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8; 32], message: &[u8], signature: &[u8]) -> bool;
    /// Hybrid encryption of `plaintext` to `public`, authenticating `aad`.
    fn encrypt(
        &self,
        public: &[u8; 32],
        plaintext: &[u8],
        aad: &[u8],
        rng: &mut DeterministicRng,
    ) -> Vec<u8>;
    fn decrypt(
        &self,
        secret: &[u8; 32],
        ciphertext: &[u8],
        aad: &[u8],
    ) -> Result<Vec<u8>, CryptoError>;
}

/// Ed25519 signatures, X25519 + ChaCha20-Poly1305 hybrid encryption.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardSuite;

impl StandardSuite {
    fn hybrid_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
        hash_parts(&[b"mtm-hybrid-v1", shared, ephemeral, recipient]).0
    }
}

impl CryptoSuite for StandardSuite {
    fn id(&self) -> SuiteId {
        SuiteId::Standard
    }

    fn derive_public(&self, usage: KeyUsage, secret: &[u8; 32]) -> [u8; 32] {
        match usage {
            KeyUsage::Signing => SigningKey::from_bytes(secret).verifying_key().to_bytes(),
            KeyUsage::Decryption | KeyUsage::Binding => {
                let s = x25519_dalek::StaticSecret::from(*secret);
                x25519_dalek::PublicKey::from(&s).to_bytes()
            }
        }
    }

    fn sign(&self, secret: &[u8; 32], message: &[u8]) -> Vec<u8> {
        SigningKey::from_bytes(secret)
            .sign(message)
            .to_bytes()
            .to_vec()
    }

    fn verify(&self, public: &[u8; 32], message: &[u8], signature: &[u8]) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(public) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
            return false;
        };
        key.verify_strict(message, &sig).is_ok()
    }

    fn encrypt(
        &self,
        public: &[u8; 32],
        plaintext: &[u8],
        aad: &[u8],
        rng: &mut DeterministicRng,
    ) -> Vec<u8> {
        let eph_secret = x25519_dalek::StaticSecret::from(rng.array32());
        let eph_public = x25519_dalek::PublicKey::from(&eph_secret).to_bytes();
        let shared = eph_secret.diffie_hellman(&x25519_dalek::PublicKey::from(*public));
        let key = Zeroizing::new(Self::hybrid_key(shared.as_bytes(), &eph_public, public));
        // The content key is single-use, so a fixed nonce is safe.
        let body = aead_seal_with_nonce(&key, [0; AEAD_NONCE_LEN], aad, plaintext);
        let mut out = eph_public.to_vec();
        out.extend_from_slice(&body);
        out
    }

    fn decrypt(
        &self,
        secret: &[u8; 32],
        ciphertext: &[u8],
        aad: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < 32 + AEAD_NONCE_LEN {
            return Err(CryptoError::IntegrityFailure);
        }
        let (eph, rest) = ciphertext.split_at(32);
        let eph: [u8; 32] = eph.try_into().unwrap();
        let s = x25519_dalek::StaticSecret::from(*secret);
        let own_public = x25519_dalek::PublicKey::from(&s).to_bytes();
        let shared = s.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
        let key = Zeroizing::new(Self::hybrid_key(shared.as_bytes(), &eph, &own_public));
        aead_open_raw(&key, aad, rest)
    }
}

/// Insecure suite for fast tests: the public part equals the secret.
///
/// Round-trip and key-separation properties hold, secrecy does not.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySuite;

impl CryptoSuite for ToySuite {
    fn id(&self) -> SuiteId {
        SuiteId::Toy
    }

    fn derive_public(&self, _usage: KeyUsage, secret: &[u8; 32]) -> [u8; 32] {
        *secret
    }

    fn sign(&self, secret: &[u8; 32], message: &[u8]) -> Vec<u8> {
        hash_parts(&[b"toy-sig", secret, message]).0.to_vec()
    }

    fn verify(&self, public: &[u8; 32], message: &[u8], signature: &[u8]) -> bool {
        hash_parts(&[b"toy-sig", public, message]).0.as_slice() == signature
    }

    fn encrypt(
        &self,
        public: &[u8; 32],
        plaintext: &[u8],
        aad: &[u8],
        rng: &mut DeterministicRng,
    ) -> Vec<u8> {
        let key = hash_parts(&[b"toy-enc", public]).0;
        aead_seal_raw(&key, aad, plaintext, rng)
    }

    fn decrypt(
        &self,
        secret: &[u8; 32],
        ciphertext: &[u8],
        aad: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        let key = hash_parts(&[b"toy-enc", secret]).0;
        aead_open_raw(&key, aad, ciphertext)
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PublicKey {
    pub suite: SuiteId,
    pub usage: KeyUsage,
    pub bytes: [u8; 32],
}

impl PublicKey {
    pub fn key_id(&self) -> Digest {
        hash(&self.to_canonical())
    }

    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        self.usage == KeyUsage::Signing
            && self
                .suite
                .suite()
                .verify(&self.bytes, message, &signature.0)
    }

    pub fn encrypt(
        &self,
        plaintext: &[u8],
        aad: &[u8],
        rng: &mut DeterministicRng,
    ) -> Result<Vec<u8>, CryptoError> {
        if !self.usage.can_encrypt() {
            return Err(CryptoError::WrongUsage { actual: self.usage });
        }
        Ok(self.suite.suite().encrypt(&self.bytes, plaintext, aad, rng))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PublicKey({:?}, {:?}, {})",
            self.suite,
            self.usage,
            hex::encode(&self.bytes[..8])
        )
    }
}

impl Canonical for PublicKey {
    fn write(&self, w: &mut Writer) {
        w.u8(self.suite.code())
            .u8(self.usage.code())
            .bytes(&self.bytes);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            suite: SuiteId::from_code(r.u8()?)?,
            usage: KeyUsage::from_code(r.u8()?)?,
            bytes: r.array32()?,
        })
    }
}

/// 32 bytes of secret key material. Zeroed on drop; `Debug` is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretBytes(Zeroizing<[u8; 32]>);

impl SecretBytes {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self(Zeroizing::new(bytes))
    }

    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SecretBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretBytes(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    secret: SecretBytes,
}

impl KeyPair {
    pub fn from_secret(suite: SuiteId, usage: KeyUsage, secret: [u8; 32]) -> Self {
        let public = PublicKey {
            suite,
            usage,
            bytes: suite.suite().derive_public(usage, &secret),
        };
        Self {
            public,
            secret: SecretBytes::new(secret),
        }
    }

    pub fn key_id(&self) -> Digest {
        self.public.key_id()
    }

    pub fn usage(&self) -> KeyUsage {
        self.public.usage
    }

    pub fn secret(&self) -> &SecretBytes {
        &self.secret
    }

    pub fn sign(&self, message: &[u8]) -> Result<Signature, CryptoError> {
        if self.public.usage != KeyUsage::Signing {
            return Err(CryptoError::WrongUsage {
                actual: self.public.usage,
            });
        }
        Ok(Signature(
            self.public
                .suite
                .suite()
                .sign(self.secret.expose(), message),
        ))
    }

    pub fn decrypt(&self, ciphertext: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if !self.public.usage.can_encrypt() {
            return Err(CryptoError::WrongUsage {
                actual: self.public.usage,
            });
        }
        self.public
            .suite
            .suite()
            .decrypt(self.secret.expose(), ciphertext, aad)
    }
}

pub fn generate_keypair(rng: &mut DeterministicRng, usage: KeyUsage, suite: SuiteId) -> KeyPair {
    KeyPair::from_secret(suite, usage, rng.array32())
}

#[derive(Clone, PartialEq, Eq)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Signature({})",
            hex::encode(&self.0[..self.0.len().min(8)])
        )
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    bytes: SecretBytes,
    pub label: String,
}

impl SymmetricKey {
    pub fn new(bytes: [u8; 32], label: impl Into<String>) -> Self {
        Self {
            bytes: SecretBytes::new(bytes),
            label: label.into(),
        }
    }

    pub fn generate(rng: &mut DeterministicRng, label: impl Into<String>) -> Self {
        Self::new(rng.array32(), label)
    }

    pub fn expose(&self) -> &[u8; 32] {
        self.bytes.expose()
    }

    pub fn encrypt(&self, plaintext: &[u8], aad: &[u8], rng: &mut DeterministicRng) -> Vec<u8> {
        aead_seal_raw(self.expose(), aad, plaintext, rng)
    }

    pub fn decrypt(&self, ciphertext: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        aead_open_raw(self.expose(), aad, ciphertext)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, <redacted>)", self.label)
    }
}

/// Output is `nonce || ciphertext || tag`.
pub fn aead_seal_raw(
    key: &[u8; 32],
    aad: &[u8],
    plaintext: &[u8],
    rng: &mut DeterministicRng,
) -> Vec<u8> {
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill(&mut nonce);
    aead_seal_with_nonce(key, nonce, aad, plaintext)
}

pub fn aead_seal_with_nonce(
    key: &[u8; 32],
    nonce: [u8; AEAD_NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(key.into());
    let body = cipher
        .encrypt(
            (&nonce).into(),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&body);
    out
}

pub fn aead_open_raw(key: &[u8; 32], aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < AEAD_NONCE_LEN {
        return Err(CryptoError::IntegrityFailure);
    }
    let (nonce, body) = sealed.split_at(AEAD_NONCE_LEN);
    let nonce: [u8; AEAD_NONCE_LEN] = nonce.try_into().unwrap();
    ChaCha20Poly1305::new(key.into())
        .decrypt((&nonce).into(), Payload { msg: body, aad })
        .map_err(|_| CryptoError::IntegrityFailure)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

/// Required PCR values, sorted by index with no duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PcrBinding(Vec<(u8, Digest)>);

impl PcrBinding {
    pub fn new(mut entries: Vec<(u8, Digest)>) -> Self {
        entries.sort_by_key(|(i, _)| *i);
        entries.dedup_by_key(|(i, _)| *i);
        Self(entries)
    }

    pub fn entries(&self) -> &[(u8, Digest)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Exact match against a live PCR bank; out-of-range indices never match.
    pub fn matches(&self, live: &[Digest]) -> bool {
        self.0.iter().all(|(i, d)| live.get(*i as usize) == Some(d))
    }
}

impl Canonical for PcrBinding {
    fn write(&self, w: &mut Writer) {
        w.list_with(&self.0, |w, (i, d)| {
            w.u8(*i).bytes(d.as_bytes());
        });
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let entries = r.list_with(|r| Ok((r.u8()?, Digest(r.array32()?))))?;
        let binding = Self::new(entries.clone());
        if binding.0 != entries {
            return Err(CodecError::Malformed {
                tag: 1,
                reason: "PCR binding not sorted and unique",
            });
        }
        Ok(binding)
    }
}

/// A payload encrypted under a fresh content key that is wrapped to a
/// recipient and bound to an exact PCR configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub recipient: Digest,
    pub wrapped_key: Vec<u8>,
    pub required_config: PcrBinding,
    pub body: Vec<u8>,
    pub aad_digest: Digest,
}

impl Canonical for SealedBlob {
    fn write(&self, w: &mut Writer) {
        w.bytes(self.recipient.as_bytes())
            .bytes(&self.wrapped_key)
            .nested(&self.required_config);
        w.bytes(&self.body).bytes(self.aad_digest.as_bytes());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            recipient: Digest(r.array32()?),
            wrapped_key: r.vec()?,
            required_config: r.nested()?,
            body: r.vec()?,
            aad_digest: Digest(r.array32()?),
        })
    }
}

const SEAL_WRAP_LABEL: &[u8] = b"mtm-seal-wrap";

pub fn seal(
    target: &PublicKey,
    payload: &[u8],
    required_config: PcrBinding,
    rng: &mut DeterministicRng,
) -> Result<SealedBlob, CryptoError> {
    let aad = required_config.to_canonical();
    let content_key = SymmetricKey::generate(rng, "seal");
    let wrapped_key =
        target.encrypt(content_key.expose(), &[SEAL_WRAP_LABEL, &aad].concat(), rng)?;
    let body = content_key.encrypt(payload, &aad, rng);
    Ok(SealedBlob {
        recipient: target.key_id(),
        wrapped_key,
        aad_digest: hash(&aad),
        required_config,
        body,
    })
}

pub fn unseal(
    holder: &KeyPair,
    blob: &SealedBlob,
    live_pcrs: &[Digest],
) -> Result<Vec<u8>, CryptoError> {
    if blob.recipient != holder.key_id() {
        return Err(CryptoError::WrongKey);
    }
    let aad = blob.required_config.to_canonical();
    if hash(&aad) != blob.aad_digest {
        return Err(CryptoError::IntegrityFailure);
    }
    if !blob.required_config.matches(live_pcrs) {
        return Err(CryptoError::ConfigMismatch);
    }
    let key_bytes = holder.decrypt(&blob.wrapped_key, &[SEAL_WRAP_LABEL, &aad].concat())?;
    let key_bytes: [u8; 32] = key_bytes
        .try_into()
        .map_err(|_| CryptoError::IntegrityFailure)?;
    SymmetricKey::new(key_bytes, "seal").decrypt(&blob.body, &aad)
}

/// Seedable ChaCha20 generator; one per simulated device or agent.
#[derive(Debug, Clone)]
pub struct DeterministicRng(ChaCha20Rng);

impl DeterministicRng {
    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        self.0.fill_bytes(out);
    }

    pub fn array32(&mut self) -> [u8; 32] {
        let mut out = [0; 32];
        self.fill(&mut out);
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn nonce(&mut self) -> Nonce {
        let mut out = [0; NONCE_LEN];
        self.fill(&mut out);
        Nonce(out)
    }

    pub fn keypair(&mut self, usage: KeyUsage, suite: SuiteId) -> KeyPair {
        generate_keypair(self, usage, suite)
    }
}

impl PartialEq for DeterministicRng {
    fn eq(&self, other: &Self) -> bool {
        self.0.get_seed() == other.0.get_seed()
            && self.0.get_stream() == other.0.get_stream()
            && self.0.get_word_pos() == other.0.get_word_pos()
    }
}

impl Canonical for DeterministicRng {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.0.get_seed())
            .u64(self.0.get_stream())
            .bytes(&self.0.get_word_pos().to_be_bytes());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let mut rng = ChaCha20Rng::from_seed(r.array32()?);
        rng.set_stream(r.u64()?);
        let pos: [u8; 16] = r.bytes()?.try_into().map_err(|_| CodecError::Malformed {
            tag: 3,
            reason: "word position must be 16 bytes",
        })?;
        rng.set_word_pos(u128::from_be_bytes(pos));
        Ok(Self(rng))
    }
}

impl Canonical for Digest {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Digest(r.array32()?))
    }
}

impl Canonical for Nonce {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let tag = 1;
        let bytes = r.bytes()?;
        Ok(Nonce(bytes.try_into().map_err(|_| {
            CodecError::Malformed {
                tag,
                reason: "nonce must be 16 bytes",
            }
        })?))
    }
}

impl Canonical for Signature {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Signature(r.vec()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> DeterministicRng {
        DeterministicRng::from_seed(42)
    }

    #[test]
    fn hash_of_empty_string_matches_reference() {
        // Reference value from `printf '' | sha256sum`.
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_ne!(hash(b"a"), hash(b"b"));
    }

    #[test]
    fn keypair_generation_is_reproducible() {
        let a = DeterministicRng::from_seed(7).keypair(KeyUsage::Signing, SuiteId::Standard);
        let b = DeterministicRng::from_seed(7).keypair(KeyUsage::Signing, SuiteId::Standard);
        assert_eq!(a.key_id(), b.key_id());
        assert_eq!(a.key_id(), hash(&a.public.to_canonical()));
    }

    #[test]
    fn sign_verify_and_key_separation() {
        for suite in [SuiteId::Standard, SuiteId::Toy] {
            let mut r = rng();
            let k1 = r.keypair(KeyUsage::Signing, suite);
            let k2 = r.keypair(KeyUsage::Signing, suite);
            let sig = k1.sign(b"measure").unwrap();
            assert!(k1.public.verify(b"measure", &sig));
            assert!(!k2.public.verify(b"measure", &sig));
            assert!(!k1.public.verify(b"measurE", &sig));
        }
    }

    #[test]
    fn usage_is_enforced() {
        let mut r = rng();
        let enc = r.keypair(KeyUsage::Decryption, SuiteId::Standard);
        assert_eq!(
            enc.sign(b"x"),
            Err(CryptoError::WrongUsage {
                actual: KeyUsage::Decryption
            })
        );
        let sig = r.keypair(KeyUsage::Signing, SuiteId::Standard);
        assert!(sig.public.encrypt(b"x", b"", &mut r).is_err());
    }

    #[test]
    fn hybrid_encryption_round_trip() {
        for suite in [SuiteId::Standard, SuiteId::Toy] {
            let mut r = rng();
            let kp = r.keypair(KeyUsage::Binding, suite);
            let ct = kp.public.encrypt(b"secret", b"aad", &mut r).unwrap();
            assert_eq!(kp.decrypt(&ct, b"aad").unwrap(), b"secret");
            assert_eq!(
                kp.decrypt(&ct, b"other"),
                Err(CryptoError::IntegrityFailure)
            );
            let other = r.keypair(KeyUsage::Binding, suite);
            assert!(other.decrypt(&ct, b"aad").is_err());
        }
    }

    fn bank() -> Vec<Digest> {
        (0..16u8).map(|i| hash(&[i])).collect()
    }

    #[test]
    fn seal_unseal_matching_config() {
        let mut r = rng();
        let kp = r.keypair(KeyUsage::Binding, SuiteId::Standard);
        let pcrs = bank();
        let blob = seal(
            &kp.public,
            b"payload",
            PcrBinding::new(vec![(1, pcrs[1]), (4, pcrs[4])]),
            &mut r,
        )
        .unwrap();
        assert_eq!(unseal(&kp, &blob, &pcrs).unwrap(), b"payload");
    }

    #[test]
    fn unseal_rejects_changed_pcr() {
        let mut r = rng();
        let kp = r.keypair(KeyUsage::Binding, SuiteId::Standard);
        let mut pcrs = bank();
        let blob = seal(
            &kp.public,
            b"payload",
            PcrBinding::new(vec![(1, pcrs[1])]),
            &mut r,
        )
        .unwrap();
        pcrs[1] = hash(b"changed");
        assert_eq!(unseal(&kp, &blob, &pcrs), Err(CryptoError::ConfigMismatch));
    }

    #[test]
    fn unseal_rejects_wrong_key() {
        let mut r = rng();
        let kp = r.keypair(KeyUsage::Binding, SuiteId::Standard);
        let other = r.keypair(KeyUsage::Binding, SuiteId::Standard);
        let blob = seal(&kp.public, b"payload", PcrBinding::default(), &mut r).unwrap();
        assert_eq!(unseal(&other, &blob, &bank()), Err(CryptoError::WrongKey));
    }

    #[test]
    fn unseal_rejects_every_single_bit_flip() {
        let mut r = rng();
        let kp = r.keypair(KeyUsage::Binding, SuiteId::Standard);
        let pcrs = bank();
        let blob = seal(
            &kp.public,
            b"payload",
            PcrBinding::new(vec![(2, pcrs[2])]),
            &mut r,
        )
        .unwrap();
        for byte in 0..blob.body.len() {
            let mut t = blob.clone();
            t.body[byte] ^= 1;
            assert_eq!(unseal(&kp, &t, &pcrs), Err(CryptoError::IntegrityFailure));
        }
        for byte in 0..blob.wrapped_key.len() {
            let mut t = blob.clone();
            t.wrapped_key[byte] ^= 0x80;
            assert_eq!(unseal(&kp, &t, &pcrs), Err(CryptoError::IntegrityFailure));
        }
    }

    #[test]
    fn rng_state_round_trips() {
        let mut a = rng();
        a.array32();
        let mut b = DeterministicRng::from_canonical(&a.to_canonical()).unwrap();
        assert_eq!(a.array32(), b.array32());
    }
}
