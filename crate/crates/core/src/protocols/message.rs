//! Protocol envelope.
//!
//! ```text
//! version (1) | type (1) | session id (32) | payload length (4, BE) | payload
//! ```
//!
//! The payload is the canonical TLV encoding of the message body.

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer, FORMAT_VERSION};
use crate::crypto::{Digest, Nonce, SealedBlob};
use crate::engine::{SecurityPolicy, SubsystemConfiguration, TssCertificate};
use crate::mtm::AttestationQuote;

use super::ProtocolError;

const HEADER_LEN: usize = 1 + 1 + 32 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageType {
    TakeOwnershipRequest = 0x01,
    TakeOwnershipGrant = 0x02,
    TakeOwnershipRejection = 0x03,
    MigrationInit = 0x10,
    MigrationOffer = 0x11,
    MigrationRefusal = 0x12,
    MigrationPackage = 0x13,
    MigrationStatus = 0x14,
    MigrationDecision = 0x15,
}

impl MessageType {
    pub const ALL: [MessageType; 9] = [
        Self::TakeOwnershipRequest,
        Self::TakeOwnershipGrant,
        Self::TakeOwnershipRejection,
        Self::MigrationInit,
        Self::MigrationOffer,
        Self::MigrationRefusal,
        Self::MigrationPackage,
        Self::MigrationStatus,
        Self::MigrationDecision,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> CodecResult<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or(CodecError::UnknownVariant {
                what: "message type",
                value: code,
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TakeOwnershipRequest => "takeown-request",
            Self::TakeOwnershipGrant => "takeown-grant",
            Self::TakeOwnershipRejection => "takeown-rejection",
            Self::MigrationInit => "migration-init",
            Self::MigrationOffer => "migration-offer",
            Self::MigrationRefusal => "migration-refusal",
            Self::MigrationPackage => "migration-package",
            Self::MigrationStatus => "migration-status",
            Self::MigrationDecision => "migration-decision",
        }
    }
}

/// `wrapped_temp_key` is K_temp under the owner's transport key; `payload`
/// is the attestation bundle under K_temp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TakeOwnershipRequest {
    pub wrapped_temp_key: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Canonical for TakeOwnershipRequest {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.wrapped_temp_key).bytes(&self.payload);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            wrapped_temp_key: r.vec()?,
            payload: r.vec()?,
        })
    }
}

/// Hybrid ciphertext under the instance's endorsement key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TakeOwnershipGrant {
    pub body: Vec<u8>,
}

impl Canonical for TakeOwnershipGrant {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.body);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self { body: r.vec()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: u8,
    pub detail: String,
}

impl Rejection {
    pub fn from_error(e: &ProtocolError) -> Self {
        Self {
            code: e.code(),
            detail: e.to_string(),
        }
    }

    pub fn error(&self) -> ProtocolError {
        ProtocolError::from_code(self.code)
    }
}

impl Canonical for Rejection {
    fn write(&self, w: &mut Writer) {
        w.u8(self.code).str(&self.detail);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            code: r.u8()?,
            detail: r.string()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationInit {
    pub ro: String,
    pub source_device: Digest,
    pub dest_device: Digest,
    pub source_cert: TssCertificate,
    pub init_nonce: Nonce,
}

impl Canonical for MigrationInit {
    fn write(&self, w: &mut Writer) {
        w.str(&self.ro)
            .nested(&self.source_device)
            .nested(&self.dest_device);
        w.nested(&self.source_cert).nested(&self.init_nonce);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            ro: r.string()?,
            source_device: r.nested()?,
            dest_device: r.nested()?,
            source_cert: r.nested()?,
            init_nonce: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationOffer {
    pub target_state: AttestationQuote,
    pub target_cert: TssCertificate,
    pub target_policy: SecurityPolicy,
    pub nonce: Nonce,
}

impl Canonical for MigrationOffer {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.target_state)
            .nested(&self.target_cert)
            .nested(&self.target_policy)
            .nested(&self.nonce);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            target_state: r.nested()?,
            target_cert: r.nested()?,
            target_policy: r.nested()?,
            nonce: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationPackage {
    pub key_blob: SealedBlob,
    pub instance_image: Vec<u8>,
    pub source_state_proof: AttestationQuote,
    pub source_policy: SecurityPolicy,
    pub source_config: SubsystemConfiguration,
}

impl Canonical for MigrationPackage {
    fn write(&self, w: &mut Writer) {
        w.nested(&self.key_blob)
            .bytes(&self.instance_image)
            .nested(&self.source_state_proof);
        w.nested(&self.source_policy).nested(&self.source_config);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            key_blob: r.nested()?,
            instance_image: r.vec()?,
            source_state_proof: r.nested()?,
            source_policy: r.nested()?,
            source_config: r.nested()?,
        })
    }
}

/// Destination's import result. `code` 0 is success; otherwise a
/// [`ProtocolError`] code. `proof` is a quote under the destination's AIK
/// whose nonce binds the session and the code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationStatus {
    pub code: u8,
    pub proof: AttestationQuote,
}

impl MigrationStatus {
    pub fn is_success(&self) -> bool {
        self.code == 0
    }
}

impl Canonical for MigrationStatus {
    fn write(&self, w: &mut Writer) {
        w.u8(self.code).nested(&self.proof);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            code: r.u8()?,
            proof: r.nested()?,
        })
    }
}

/// The source's final word: commit after it has destroyed its instance,
/// abort after it has reverted to owned. Bound like [`MigrationStatus`], under
/// the source's AIK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationDecision {
    pub commit: bool,
    pub proof: AttestationQuote,
}

impl Canonical for MigrationDecision {
    fn write(&self, w: &mut Writer) {
        w.bool(self.commit).nested(&self.proof);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            commit: r.bool()?,
            proof: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageBody {
    TakeOwnershipRequest(TakeOwnershipRequest),
    TakeOwnershipGrant(TakeOwnershipGrant),
    TakeOwnershipRejection(Rejection),
    MigrationInit(MigrationInit),
    MigrationOffer(MigrationOffer),
    MigrationRefusal(Rejection),
    MigrationPackage(Box<MigrationPackage>),
    MigrationStatus(MigrationStatus),
    MigrationDecision(MigrationDecision),
}

impl MessageBody {
    pub fn message_type(&self) -> MessageType {
        match self {
            Self::TakeOwnershipRequest(_) => MessageType::TakeOwnershipRequest,
            Self::TakeOwnershipGrant(_) => MessageType::TakeOwnershipGrant,
            Self::TakeOwnershipRejection(_) => MessageType::TakeOwnershipRejection,
            Self::MigrationInit(_) => MessageType::MigrationInit,
            Self::MigrationOffer(_) => MessageType::MigrationOffer,
            Self::MigrationRefusal(_) => MessageType::MigrationRefusal,
            Self::MigrationPackage(_) => MessageType::MigrationPackage,
            Self::MigrationStatus(_) => MessageType::MigrationStatus,
            Self::MigrationDecision(_) => MessageType::MigrationDecision,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Self::TakeOwnershipRequest(m) => m.to_canonical(),
            Self::TakeOwnershipGrant(m) => m.to_canonical(),
            Self::TakeOwnershipRejection(m) | Self::MigrationRefusal(m) => m.to_canonical(),
            Self::MigrationInit(m) => m.to_canonical(),
            Self::MigrationOffer(m) => m.to_canonical(),
            Self::MigrationPackage(m) => m.to_canonical(),
            Self::MigrationStatus(m) => m.to_canonical(),
            Self::MigrationDecision(m) => m.to_canonical(),
        }
    }

    fn parse(kind: MessageType, payload: &[u8]) -> CodecResult<Self> {
        Ok(match kind {
            MessageType::TakeOwnershipRequest => {
                Self::TakeOwnershipRequest(Canonical::from_canonical(payload)?)
            }
            MessageType::TakeOwnershipGrant => {
                Self::TakeOwnershipGrant(Canonical::from_canonical(payload)?)
            }
            MessageType::TakeOwnershipRejection => {
                Self::TakeOwnershipRejection(Canonical::from_canonical(payload)?)
            }
            MessageType::MigrationInit => Self::MigrationInit(Canonical::from_canonical(payload)?),
            MessageType::MigrationOffer => {
                Self::MigrationOffer(Canonical::from_canonical(payload)?)
            }
            MessageType::MigrationRefusal => {
                Self::MigrationRefusal(Canonical::from_canonical(payload)?)
            }
            MessageType::MigrationPackage => {
                Self::MigrationPackage(Box::new(Canonical::from_canonical(payload)?))
            }
            MessageType::MigrationStatus => {
                Self::MigrationStatus(Canonical::from_canonical(payload)?)
            }
            MessageType::MigrationDecision => {
                Self::MigrationDecision(Canonical::from_canonical(payload)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub session: Digest,
    pub body: MessageBody,
}

impl ProtocolMessage {
    pub fn new(session: Digest, body: MessageBody) -> Self {
        Self { session, body }
    }

    pub fn message_type(&self) -> MessageType {
        self.body.message_type()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.body.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.push(FORMAT_VERSION);
        out.push(self.message_type().code());
        out.extend_from_slice(self.session.as_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> CodecResult<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated);
        }
        if bytes[0] != FORMAT_VERSION {
            return Err(CodecError::Version(bytes[0]));
        }
        let kind = MessageType::from_code(bytes[1])?;
        let session = Digest::from_bytes(bytes[2..34].try_into().expect("32 bytes"));
        let len = u32::from_be_bytes(bytes[34..38].try_into().expect("4 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < len {
            return Err(CodecError::Truncated);
        }
        if payload.len() > len {
            return Err(CodecError::Trailing(payload.len() - len));
        }
        Ok(Self {
            session,
            body: MessageBody::parse(kind, payload)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    #[test]
    fn header_layout() {
        let msg = ProtocolMessage::new(
            hash(b"s"),
            MessageBody::TakeOwnershipGrant(TakeOwnershipGrant { body: vec![9] }),
        );
        let bytes = msg.encode();
        assert_eq!(bytes[0], 1);
        assert_eq!(bytes[1], 0x02);
        assert_eq!(&bytes[2..34], hash(b"s").as_bytes());
        assert_eq!(&bytes[34..38], &6u32.to_be_bytes());
        assert_eq!(&bytes[38..], &[1, 0, 0, 0, 1, 9]);
        assert_eq!(ProtocolMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn rejects_bad_headers() {
        let msg = ProtocolMessage::new(
            Digest::ZERO,
            MessageBody::TakeOwnershipGrant(TakeOwnershipGrant { body: Vec::new() }),
        );
        let mut bytes = msg.encode();
        assert_eq!(
            ProtocolMessage::decode(&bytes[..10]),
            Err(CodecError::Truncated)
        );
        bytes[0] = 2;
        assert_eq!(ProtocolMessage::decode(&bytes), Err(CodecError::Version(2)));
        bytes[0] = 1;
        bytes[1] = 0x99;
        assert!(ProtocolMessage::decode(&bytes).is_err());
        bytes[1] = 0x02;
        bytes.push(0);
        assert_eq!(
            ProtocolMessage::decode(&bytes),
            Err(CodecError::Trailing(1))
        );
    }
}
