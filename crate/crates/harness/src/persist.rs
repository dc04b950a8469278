//! Device state files.
//!
//! ```text
//! "MTMSIM01" | version (1) | salt (16) | nonce (12) | len (4, BE) | sealed body | SHA-256 of all preceding bytes
//! ```
//!
//! The body is the canonical device encoding, sealed with ChaCha20-Poly1305
//! under a key stretched from the operator's passphrase. Salt and nonce are
//! derived from the content so the same device always yields the same file.

use std::path::Path;

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, KeyInit, Nonce};
use mtm_core::codec::Canonical;
use mtm_core::crypto::{hash, hash_parts};
use sha2::Sha256;

use crate::device::SimDevice;

pub const MAGIC: &[u8; 8] = b"MTMSIM01";
pub const VERSION: u8 = 1;
pub const PBKDF2_ROUNDS: u32 = 20_000;

const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const HEADER_LEN: usize = MAGIC.len() + 1 + SALT_LEN + NONCE_LEN + 4;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("bad-magic: not a device state file")]
    BadMagic,
    #[error("version-mismatch: file version {0}, expected {VERSION}")]
    VersionMismatch(u8),
    #[error("decrypt-failed: wrong passphrase or damaged file")]
    DecryptFailed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn file_key(passphrase: &str, salt: &[u8]) -> Key {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, PBKDF2_ROUNDS, &mut key);
    Key::from(key)
}

fn aad() -> Vec<u8> {
    let mut aad = MAGIC.to_vec();
    aad.push(VERSION);
    aad
}

pub fn encode_device(device: &SimDevice, passphrase: &str) -> Vec<u8> {
    let body = device.to_canonical();
    let salt = hash_parts(&[b"mtm-sim-file-salt", device.device_id().as_bytes()]);
    let salt = &salt.as_bytes()[..SALT_LEN];
    let nonce = hash_parts(&[b"mtm-sim-file-nonce", salt, &body]);
    let nonce = &nonce.as_bytes()[..NONCE_LEN];
    let cipher = ChaCha20Poly1305::new(&file_key(passphrase, salt));
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: &body,
                aad: &aad(),
            },
        )
        .expect("in-memory encryption");

    let mut out = Vec::with_capacity(HEADER_LEN + sealed.len() + 32);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(salt);
    out.extend_from_slice(nonce);
    out.extend_from_slice(&(sealed.len() as u32).to_be_bytes());
    out.extend_from_slice(&sealed);
    let digest = hash(&out);
    out.extend_from_slice(digest.as_bytes());
    out
}

pub fn decode_device(bytes: &[u8], passphrase: &str) -> Result<SimDevice, PersistError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let version = *bytes.get(MAGIC.len()).ok_or(PersistError::DecryptFailed)?;
    if version != VERSION {
        return Err(PersistError::VersionMismatch(version));
    }
    if bytes.len() < HEADER_LEN + 32 {
        return Err(PersistError::DecryptFailed);
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    if hash(content).as_bytes() != digest {
        return Err(PersistError::DecryptFailed);
    }
    let salt = &content[MAGIC.len() + 1..MAGIC.len() + 1 + SALT_LEN];
    let nonce = &content[MAGIC.len() + 1 + SALT_LEN..HEADER_LEN - 4];
    let len = u32::from_be_bytes(
        content[HEADER_LEN - 4..HEADER_LEN]
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    let sealed = &content[HEADER_LEN..];
    if sealed.len() != len {
        return Err(PersistError::DecryptFailed);
    }
    let cipher = ChaCha20Poly1305::new(&file_key(passphrase, salt));
    let body = cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: sealed,
                aad: &aad(),
            },
        )
        .map_err(|_| PersistError::DecryptFailed)?;
    SimDevice::from_canonical(&body).map_err(|_| PersistError::DecryptFailed)
}

pub fn save(device: &SimDevice, path: &Path, passphrase: &str) -> Result<(), PersistError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_device(device, passphrase))?;
    Ok(())
}

pub fn load(path: &Path, passphrase: &str) -> Result<SimDevice, PersistError> {
    decode_device(&std::fs::read(path)?, passphrase)
}
