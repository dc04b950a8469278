//! MTM command set and its wire form.
//!
//! A command frame is `version (1 byte) || canonical(handle, command)`; a
//! response frame is `version || canonical(response)`.

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer, FORMAT_VERSION};
use crate::crypto::{Digest, KeyUsage, Nonce, PcrBinding, PublicKey, SealedBlob, Signature};
use crate::rim::RimCertificate;

use super::instance::{AttestationQuote, InstanceHandle, Lifecycle};
use super::MtmError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MtmCommand {
    PcrRead {
        index: u8,
    },
    Extend {
        index: u8,
        digest: Digest,
    },
    /// Generates the endorsement key inside the instance.
    InstallEk {
        certificate: Vec<u8>,
    },
    ReadEk,
    TakeOwnership {
        owner_auth: [u8; 32],
    },
    CreateAik,
    Quote {
        aik: Digest,
        nonce: Nonce,
        selection: Vec<u8>,
    },
    CreateWrapKey {
        parent: Digest,
        usage: KeyUsage,
        pcr_binding: Option<PcrBinding>,
    },
    LoadKey {
        key_id: Digest,
    },
    Sign {
        key_id: Digest,
        data: Vec<u8>,
    },
    Decrypt {
        key_id: Digest,
        ciphertext: Vec<u8>,
    },
    Seal {
        key_id: Digest,
        payload: Vec<u8>,
        pcr_binding: PcrBinding,
    },
    Unseal {
        key_id: Digest,
        blob: SealedBlob,
    },
    EkDecrypt {
        ciphertext: Vec<u8>,
        aad: Vec<u8>,
    },
    ReadCounter,
    IncrementCounter,
    VerifyRimCert {
        cert: RimCertificate,
    },
    VerifyRimCertAndExtend {
        cert: RimCertificate,
        measurement: Digest,
    },
    LockForMigration {
        nonce: Nonce,
    },
    UnlockMigration,
    ReadLifecycle,
}

/// Payload-free discriminant of [`MtmCommand`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MtmCommandKind {
    PcrRead = 1,
    Extend,
    InstallEk,
    ReadEk,
    TakeOwnership,
    CreateAik,
    Quote,
    CreateWrapKey,
    LoadKey,
    Sign,
    Decrypt,
    Seal,
    Unseal,
    EkDecrypt,
    ReadCounter,
    IncrementCounter,
    VerifyRimCert,
    VerifyRimCertAndExtend,
    LockForMigration,
    UnlockMigration,
    ReadLifecycle,
}

impl MtmCommandKind {
    pub const ALL: [MtmCommandKind; 21] = [
        Self::PcrRead,
        Self::Extend,
        Self::InstallEk,
        Self::ReadEk,
        Self::TakeOwnership,
        Self::CreateAik,
        Self::Quote,
        Self::CreateWrapKey,
        Self::LoadKey,
        Self::Sign,
        Self::Decrypt,
        Self::Seal,
        Self::Unseal,
        Self::EkDecrypt,
        Self::ReadCounter,
        Self::IncrementCounter,
        Self::VerifyRimCert,
        Self::VerifyRimCertAndExtend,
        Self::LockForMigration,
        Self::UnlockMigration,
        Self::ReadLifecycle,
    ];

    /// The local-verification set, only available on MRTM instances.
    pub fn is_mrtm_only(self) -> bool {
        matches!(
            self,
            Self::VerifyRimCert | Self::VerifyRimCertAndExtend | Self::IncrementCounter
        )
    }

    fn from_code(code: u8) -> CodecResult<Self> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == code)
            .ok_or(CodecError::UnknownVariant {
                what: "MTM command",
                value: code,
            })
    }
}

impl MtmCommand {
    pub fn kind(&self) -> MtmCommandKind {
        use MtmCommand as C;
        use MtmCommandKind as K;
        match self {
            C::PcrRead { .. } => K::PcrRead,
            C::Extend { .. } => K::Extend,
            C::InstallEk { .. } => K::InstallEk,
            C::ReadEk => K::ReadEk,
            C::TakeOwnership { .. } => K::TakeOwnership,
            C::CreateAik => K::CreateAik,
            C::Quote { .. } => K::Quote,
            C::CreateWrapKey { .. } => K::CreateWrapKey,
            C::LoadKey { .. } => K::LoadKey,
            C::Sign { .. } => K::Sign,
            C::Decrypt { .. } => K::Decrypt,
            C::Seal { .. } => K::Seal,
            C::Unseal { .. } => K::Unseal,
            C::EkDecrypt { .. } => K::EkDecrypt,
            C::ReadCounter => K::ReadCounter,
            C::IncrementCounter => K::IncrementCounter,
            C::VerifyRimCert { .. } => K::VerifyRimCert,
            C::VerifyRimCertAndExtend { .. } => K::VerifyRimCertAndExtend,
            C::LockForMigration { .. } => K::LockForMigration,
            C::UnlockMigration => K::UnlockMigration,
            C::ReadLifecycle => K::ReadLifecycle,
        }
    }

    fn write_body(&self, w: &mut Writer) {
        use MtmCommand as C;
        match self {
            C::PcrRead { index } => {
                w.u8(*index);
            }
            C::Extend { index, digest } => {
                w.u8(*index).nested(digest);
            }
            C::InstallEk { certificate } => {
                w.bytes(certificate);
            }
            C::TakeOwnership { owner_auth } => {
                w.bytes(owner_auth);
            }
            C::Quote {
                aik,
                nonce,
                selection,
            } => {
                w.nested(aik).nested(nonce).bytes(selection);
            }
            C::CreateWrapKey {
                parent,
                usage,
                pcr_binding,
            } => {
                w.nested(parent)
                    .u8(usage.code())
                    .option(pcr_binding.as_ref());
            }
            C::LoadKey { key_id } => {
                w.nested(key_id);
            }
            C::Sign { key_id, data } => {
                w.nested(key_id).bytes(data);
            }
            C::Decrypt { key_id, ciphertext } => {
                w.nested(key_id).bytes(ciphertext);
            }
            C::Seal {
                key_id,
                payload,
                pcr_binding,
            } => {
                w.nested(key_id).bytes(payload).nested(pcr_binding);
            }
            C::Unseal { key_id, blob } => {
                w.nested(key_id).nested(blob);
            }
            C::EkDecrypt { ciphertext, aad } => {
                w.bytes(ciphertext).bytes(aad);
            }
            C::VerifyRimCert { cert } => {
                w.nested(cert);
            }
            C::VerifyRimCertAndExtend { cert, measurement } => {
                w.nested(cert).nested(measurement);
            }
            C::LockForMigration { nonce } => {
                w.nested(nonce);
            }
            C::ReadEk
            | C::CreateAik
            | C::ReadCounter
            | C::IncrementCounter
            | C::UnlockMigration
            | C::ReadLifecycle => {}
        }
    }

    fn read_body(kind: MtmCommandKind, r: &mut Reader<'_>) -> CodecResult<Self> {
        use MtmCommand as C;
        use MtmCommandKind as K;
        Ok(match kind {
            K::PcrRead => C::PcrRead { index: r.u8()? },
            K::Extend => C::Extend {
                index: r.u8()?,
                digest: r.nested()?,
            },
            K::InstallEk => C::InstallEk {
                certificate: r.vec()?,
            },
            K::ReadEk => C::ReadEk,
            K::TakeOwnership => C::TakeOwnership {
                owner_auth: r.array32()?,
            },
            K::CreateAik => C::CreateAik,
            K::Quote => C::Quote {
                aik: r.nested()?,
                nonce: r.nested()?,
                selection: r.vec()?,
            },
            K::CreateWrapKey => C::CreateWrapKey {
                parent: r.nested()?,
                usage: KeyUsage::from_code(r.u8()?)?,
                pcr_binding: r.option()?,
            },
            K::LoadKey => C::LoadKey {
                key_id: r.nested()?,
            },
            K::Sign => C::Sign {
                key_id: r.nested()?,
                data: r.vec()?,
            },
            K::Decrypt => C::Decrypt {
                key_id: r.nested()?,
                ciphertext: r.vec()?,
            },
            K::Seal => C::Seal {
                key_id: r.nested()?,
                payload: r.vec()?,
                pcr_binding: r.nested()?,
            },
            K::Unseal => C::Unseal {
                key_id: r.nested()?,
                blob: r.nested()?,
            },
            K::EkDecrypt => C::EkDecrypt {
                ciphertext: r.vec()?,
                aad: r.vec()?,
            },
            K::ReadCounter => C::ReadCounter,
            K::IncrementCounter => C::IncrementCounter,
            K::VerifyRimCert => C::VerifyRimCert { cert: r.nested()? },
            K::VerifyRimCertAndExtend => C::VerifyRimCertAndExtend {
                cert: r.nested()?,
                measurement: r.nested()?,
            },
            K::LockForMigration => C::LockForMigration { nonce: r.nested()? },
            K::UnlockMigration => C::UnlockMigration,
            K::ReadLifecycle => C::ReadLifecycle,
        })
    }
}

impl Canonical for MtmCommand {
    fn write(&self, w: &mut Writer) {
        let mut body = Writer::new();
        self.write_body(&mut body);
        w.u8(self.kind() as u8).bytes(&body.finish());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let kind = MtmCommandKind::from_code(r.u8()?)?;
        let mut body = Reader::new(r.bytes()?);
        let cmd = Self::read_body(kind, &mut body)?;
        body.finish()?;
        Ok(cmd)
    }
}

/// A command addressed to one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandFrame {
    pub handle: InstanceHandle,
    pub command: MtmCommand,
}

impl CommandFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.handle.0).nested(&self.command);
        let mut out = vec![FORMAT_VERSION];
        out.extend_from_slice(&w.finish());
        out
    }

    pub fn decode(bytes: &[u8]) -> CodecResult<Self> {
        let (&version, rest) = bytes.split_first().ok_or(CodecError::Truncated)?;
        if version != FORMAT_VERSION {
            return Err(CodecError::Version(version));
        }
        let mut r = Reader::new(rest);
        let frame = Self {
            handle: InstanceHandle(r.u32()?),
            command: r.nested()?,
        };
        r.finish()?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MtmResponse {
    Ok,
    Pcr(Digest),
    PublicKey(PublicKey),
    Quote(AttestationQuote),
    Signature(Signature),
    Data(Vec<u8>),
    Blob(SealedBlob),
    Counter(u64),
    Lifecycle(Lifecycle),
    Error(MtmError),
}

impl MtmResponse {
    pub fn into_result(self) -> Result<MtmResponse, MtmError> {
        match self {
            MtmResponse::Error(e) => Err(e),
            other => Ok(other),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![FORMAT_VERSION];
        out.extend_from_slice(&self.to_canonical());
        out
    }

    pub fn decode(bytes: &[u8]) -> CodecResult<Self> {
        let (&version, rest) = bytes.split_first().ok_or(CodecError::Truncated)?;
        if version != FORMAT_VERSION {
            return Err(CodecError::Version(version));
        }
        Self::from_canonical(rest)
    }
}

impl From<Result<MtmResponse, MtmError>> for MtmResponse {
    fn from(result: Result<MtmResponse, MtmError>) -> Self {
        result.unwrap_or_else(MtmResponse::Error)
    }
}

impl Canonical for MtmResponse {
    fn write(&self, w: &mut Writer) {
        let mut body = Writer::new();
        let tag = match self {
            MtmResponse::Ok => 1,
            MtmResponse::Pcr(d) => {
                body.nested(d);
                2
            }
            MtmResponse::PublicKey(k) => {
                body.nested(k);
                3
            }
            MtmResponse::Quote(q) => {
                body.nested(q);
                4
            }
            MtmResponse::Signature(s) => {
                body.nested(s);
                5
            }
            MtmResponse::Data(d) => {
                body.bytes(d);
                6
            }
            MtmResponse::Blob(b) => {
                body.nested(b);
                7
            }
            MtmResponse::Counter(c) => {
                body.u64(*c);
                8
            }
            MtmResponse::Lifecycle(l) => {
                body.u8(l.code());
                9
            }
            MtmResponse::Error(e) => {
                body.u8(e.code()).u8(e.detail());
                10
            }
        };
        w.u8(tag).bytes(&body.finish());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let tag = r.u8()?;
        let mut b = Reader::new(r.bytes()?);
        let resp = match tag {
            1 => MtmResponse::Ok,
            2 => MtmResponse::Pcr(b.nested()?),
            3 => MtmResponse::PublicKey(b.nested()?),
            4 => MtmResponse::Quote(b.nested()?),
            5 => MtmResponse::Signature(b.nested()?),
            6 => MtmResponse::Data(b.vec()?),
            7 => MtmResponse::Blob(b.nested()?),
            8 => MtmResponse::Counter(b.u64()?),
            9 => MtmResponse::Lifecycle(Lifecycle::from_code(b.u8()?)?),
            10 => {
                let code = b.u8()?;
                let detail = b.u8()?;
                MtmResponse::Error(MtmError::from_code(code, detail).ok_or(
                    CodecError::UnknownVariant {
                        what: "MTM error",
                        value: code,
                    },
                )?)
            }
            value => {
                return Err(CodecError::UnknownVariant {
                    what: "MTM response",
                    value,
                })
            }
        };
        b.finish()?;
        Ok(resp)
    }
}
