//! Role state machines for link handshakes and mediated end-to-end key
//! establishment.
//!
//! Three layers of keys:
//!
//! * **link keys** between overlay neighbours, agreed by a three-message
//!   challenge-response under the registration master key (or a node's
//!   binding key);
//! * **end-to-end keys**, built from both endpoints' seeds which travel
//!   hop by hop inside RELAY messages, opened and re-sealed by every
//!   mediator;
//! * the end-to-end key then protects one direct E2E_CONFIRM and all
//!   application DATA on the communication plane.
//!
//! Everything is sans-IO: an [`EntityRuntime`] consumes bytes and returns
//! [`Outgoing`] messages; the simulator decides when they arrive.

mod runtime;
mod session;

use thiserror::Error;

use crate::crypto::{CryptoError, Nonce, NONCE_LEN};
use crate::hierarchy::{EntityId, HierarchyError};
use crate::wire::{EncodeError, ParseError};

pub use runtime::{
    EntityMetrics, EntityRuntime, ExchangeRole, ExchangeState, ExchangeStatus, HandshakeStatus, Outgoing,
    ReceivedError, ReplayCache, REPLAY_CAPACITY,
};
pub use session::{derive_e2e_key, derive_head_link_key, derive_link_key, LinkSession, PeerSession};

/// Wire error codes carried in ERROR messages.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
#[repr(u16)]
pub enum ErrorCode {
    AuthFailure = 0x0001,
    RevokedEntity = 0x0002,
    ReplayDetected = 0x0003,
    PathViolation = 0x0004,
    UnknownEntity = 0x0005,
}

impl ErrorCode {
    pub fn from_u16(code: u16) -> Option<Self> {
        Some(match code {
            0x0001 => ErrorCode::AuthFailure,
            0x0002 => ErrorCode::RevokedEntity,
            0x0003 => ErrorCode::ReplayDetected,
            0x0004 => ErrorCode::PathViolation,
            0x0005 => ErrorCode::UnknownEntity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::AuthFailure => "AuthFailure",
            ErrorCode::RevokedEntity => "RevokedEntity",
            ErrorCode::ReplayDetected => "ReplayDetected",
            ErrorCode::PathViolation => "PathViolation",
            ErrorCode::UnknownEntity => "UnknownEntity",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("authentication failed")]
    Auth,
    #[error("stale sequence number {got} (high-water {high_water})")]
    StaleSequence { got: u64, high_water: u64 },
    #[error("replayed exchange")]
    ReplayDetected,
    #[error("entity {0} is revoked")]
    RevokedEntity(EntityId),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("path violation: {0}")]
    PathViolation(String),
    #[error("echoed nonce does not match")]
    NonceMismatch,
    #[error("no link session with {0}")]
    LinkUnavailable(EntityId),
    #[error("no completed session with {0}")]
    NoSession(EntityId),
    #[error("no credential for {0}")]
    NoCredential(EntityId),
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("timed out")]
    Timeout,
    #[error("remote error 0x{code:04x}: {detail}")]
    Remote { code: u16, detail: String },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("parse: {0}")]
    Parse(#[from] ParseError),
    #[error("encode: {0}")]
    Encode(#[from] EncodeError),
    #[error("crypto: {0}")]
    Crypto(CryptoError),
}

impl From<CryptoError> for ProtocolError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::Auth => ProtocolError::Auth,
            other => ProtocolError::Crypto(other),
        }
    }
}

impl ProtocolError {
    /// Wire code this error is reported with, if it has one.
    pub fn code(&self) -> Option<ErrorCode> {
        Some(match self {
            ProtocolError::Auth | ProtocolError::NonceMismatch => ErrorCode::AuthFailure,
            ProtocolError::RevokedEntity(_) | ProtocolError::Hierarchy(HierarchyError::RevokedEntity(_)) => {
                ErrorCode::RevokedEntity
            }
            ProtocolError::StaleSequence { .. } | ProtocolError::ReplayDetected => ErrorCode::ReplayDetected,
            ProtocolError::PathViolation(_)
            | ProtocolError::LinkUnavailable(_)
            | ProtocolError::Parse(_)
            | ProtocolError::Hierarchy(HierarchyError::NoCommonMediator(..))
            | ProtocolError::Hierarchy(HierarchyError::SelfPath)
            | ProtocolError::Hierarchy(HierarchyError::NotAdjacent(..)) => ErrorCode::PathViolation,
            ProtocolError::UnknownEntity(_) | ProtocolError::Hierarchy(HierarchyError::UnknownEntity(_)) => {
                ErrorCode::UnknownEntity
            }
            ProtocolError::Remote { code, .. } => return ErrorCode::from_u16(*code),
            _ => return None,
        })
    }

    pub fn name(&self) -> String {
        match self {
            ProtocolError::Hierarchy(h) => hierarchy_error_name(h).to_owned(),
            ProtocolError::Remote { code, .. } => {
                ErrorCode::from_u16(*code).map_or_else(|| format!("0x{code:04x}"), |c| c.name().to_owned())
            }
            other => {
                let dbg = format!("{other:?}");
                dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_owned()
            }
        }
    }
}

pub fn hierarchy_error_name(e: &HierarchyError) -> &'static str {
    match e {
        HierarchyError::InvalidId(_) => "InvalidId",
        HierarchyError::UnknownEntity(_) => "UnknownEntity",
        HierarchyError::RevokedEntity(_) => "RevokedEntity",
        HierarchyError::DuplicateRegistration(_) => "DuplicateRegistration",
        HierarchyError::InstallationSealed(_) => "InstallationSealed",
        HierarchyError::RoleViolation { .. } => "RoleViolation",
        HierarchyError::RegistrarRevoked(_) => "RegistrarRevoked",
        HierarchyError::NotRegistrar { .. } => "NotRegistrar",
        HierarchyError::AlreadyRevoked(_) => "AlreadyRevoked",
        HierarchyError::CrossHeadAssociation { .. } => "CrossHeadAssociation",
        HierarchyError::NoCommonMediator(..) => "NoCommonMediator",
        HierarchyError::SelfPath => "SelfPath",
        HierarchyError::NotAdjacent(..) => "NotAdjacent",
        HierarchyError::NotFound(..) => "NotFound",
        HierarchyError::UnknownSuite(_) => "UnknownSuite",
        HierarchyError::Crypto(_) => "Crypto",
    }
}

/// Direction word of the nonce schedule. Child-to-parent and
/// initiator-to-responder traffic share word 0.
pub const DIR_UP: u32 = 0;
pub const DIR_DOWN: u32 = 1;

/// `direction u32-BE | seq u64-BE`.
pub fn link_nonce(direction: u32, seq: u64) -> Nonce {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&direction.to_be_bytes());
    n[4..].copy_from_slice(&seq.to_be_bytes());
    Nonce(n)
}

/// AEAD nonce for a handshake message: the peer's fresh random nonce
/// XOR `link_nonce(direction, 0)`. Fresh per handshake, so the long-term
/// master key never sees a repeated nonce.
pub fn handshake_nonce(fresh: &Nonce, direction: u32) -> Nonce {
    let mask = link_nonce(direction, 0);
    let mut n = fresh.0;
    for (b, m) in n.iter_mut().zip(mask.0) {
        *b ^= m;
    }
    Nonce(n)
}
