//! Remote take-ownership and subsystem migration, as explicit state machines
//! exchanging canonical [`ProtocolMessage`]s.
//!
//! Every role is advanced only by the caller: `deliver` for an incoming
//! message and `tick` for one unit of logical time. Nothing runs in the
//! background, so the caller fully controls interleaving.

pub mod agent;
pub mod message;
pub mod migration;
pub mod takeown;

use thiserror::Error;

use crate::engine::EngineError;
use crate::mtm::MtmError;

pub use agent::{AgentConfig, DeviceReference, RemoteOwnerAgent};
pub use message::{
    MessageBody, MessageType, MigrationDecision, MigrationInit, MigrationOffer, MigrationPackage,
    MigrationStatus, ProtocolMessage, Rejection, TakeOwnershipGrant, TakeOwnershipRequest,
};
pub use migration::{DestMigration, DestState, MigrationConfig, SourceMigration, SourceState};
pub use takeown::{DeviceTakeOwnership, TakeOwnershipState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("device has not booted")]
    DeviceNotBooted,
    #[error("subsystem already exists")]
    DuplicateSubsystem,
    #[error("no subsystem for this stakeholder")]
    NoSubsystem,
    #[error("local attestation of the pristine engine failed")]
    AttestationFailed,
    #[error("decryption failed")]
    DecryptFailed,
    #[error("attestation data rejected")]
    AttestationRejected,
    #[error("purpose not allowed")]
    PurposeRejected,
    #[error("boot of the completed subsystem failed")]
    BootFailed,
    #[error("channel failed")]
    ChannelFailed,
    #[error("source subsystem certificate is revoked")]
    SourceRevoked,
    #[error("device owner declined")]
    OwnerDeclined,
    #[error("stakeholder mismatch")]
    StakeholderMismatch,
    #[error("target state is not acceptable")]
    TargetUntrusted,
    #[error("target policy is not acceptable")]
    PolicyUnacceptable,
    #[error("offer nonce already seen")]
    StaleOffer,
    #[error("source state changed since lock")]
    StateChangedSinceLock,
    #[error("platform configuration does not match the key binding")]
    ConfigMismatch,
    #[error("nonce does not match this session")]
    NonceMismatch,
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("policy or configuration signature invalid")]
    PolicyVerifyFailed,
    #[error("certificate invalid")]
    CertificateInvalid,
    #[error("message does not belong to this session")]
    SessionMismatch,
    #[error("unexpected message in this state")]
    UnexpectedMessage,
    #[error("timed out")]
    TimedOut,
    #[error("internal error: {0}")]
    Internal(String),
}

const CODED: [ProtocolError; 24] = [
    ProtocolError::DeviceNotBooted,
    ProtocolError::DuplicateSubsystem,
    ProtocolError::NoSubsystem,
    ProtocolError::AttestationFailed,
    ProtocolError::DecryptFailed,
    ProtocolError::AttestationRejected,
    ProtocolError::PurposeRejected,
    ProtocolError::BootFailed,
    ProtocolError::ChannelFailed,
    ProtocolError::SourceRevoked,
    ProtocolError::OwnerDeclined,
    ProtocolError::StakeholderMismatch,
    ProtocolError::TargetUntrusted,
    ProtocolError::PolicyUnacceptable,
    ProtocolError::StaleOffer,
    ProtocolError::StateChangedSinceLock,
    ProtocolError::ConfigMismatch,
    ProtocolError::NonceMismatch,
    ProtocolError::IntegrityFailure,
    ProtocolError::PolicyVerifyFailed,
    ProtocolError::CertificateInvalid,
    ProtocolError::SessionMismatch,
    ProtocolError::UnexpectedMessage,
    ProtocolError::TimedOut,
];

const NAMES: [&str; 24] = [
    "device-not-booted",
    "duplicate-subsystem",
    "no-subsystem",
    "attestation-failed",
    "decrypt-failed",
    "attestation-rejected",
    "purpose-rejected",
    "boot-failed",
    "channel-failed",
    "source-revoked",
    "owner-declined",
    "stakeholder-mismatch",
    "target-untrusted",
    "policy-unacceptable",
    "stale-offer",
    "state-changed-since-lock",
    "config-mismatch",
    "nonce-mismatch",
    "integrity-failure",
    "policy-verify-failed",
    "certificate-invalid",
    "session-mismatch",
    "unexpected-message",
    "timed-out",
];

impl ProtocolError {
    /// Wire code carried in rejections; `0xff` for internal errors.
    pub fn code(&self) -> u8 {
        CODED
            .iter()
            .position(|e| e == self)
            .map_or(0xff, |i| i as u8 + 1)
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1..=24 => CODED[code as usize - 1].clone(),
            other => ProtocolError::Internal(format!("remote error code {other}")),
        }
    }

    /// Kebab-case name, as used in scenario files and CLI output.
    pub fn name(&self) -> &'static str {
        match self.code() {
            0xff => "internal",
            c => NAMES[c as usize - 1],
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| CODED[i].clone())
    }

    /// True for expected negative outcomes, false for internal faults.
    pub fn is_rejection(&self) -> bool {
        !matches!(self, ProtocolError::Internal(_))
    }
}

impl From<MtmError> for ProtocolError {
    fn from(e: MtmError) -> Self {
        match e {
            MtmError::ConfigMismatch => ProtocolError::ConfigMismatch,
            MtmError::IntegrityFailure | MtmError::WrongKey => ProtocolError::IntegrityFailure,
            MtmError::StateChangedSinceLock => ProtocolError::StateChangedSinceLock,
            MtmError::StakeholderMismatch => ProtocolError::StakeholderMismatch,
            MtmError::UnknownHandle => ProtocolError::NoSubsystem,
            other => ProtocolError::Internal(other.to_string()),
        }
    }
}

impl From<EngineError> for ProtocolError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::DeviceNotBooted => ProtocolError::DeviceNotBooted,
            EngineError::DuplicateSubsystem(_) => ProtocolError::DuplicateSubsystem,
            EngineError::NoSubsystem(_) => ProtocolError::NoSubsystem,
            EngineError::Mtm(m) => m.into(),
            other => ProtocolError::Internal(other.to_string()),
        }
    }
}
