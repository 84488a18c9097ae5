//! Canonical byte encoding of every protocol message.
//!
//! ```text
//! header = "HKAF" | version u8 | msg_type u8 | sender | receiver | seq u64
//! id     = u16 len | UTF-8 (1..=64 bytes)
//! ct     = u16 len | bytes (16..=1024)
//!
//! 0x01 HELLO          nonce_c[12]
//! 0x02 LINK_CHALLENGE ct   (nonce_c | nonce_p | seed_p)
//! 0x03 LINK_FINISH    ct   (nonce_p | seed_c)
//! 0x10 RELAY          ct   (E2ePayload)
//! 0x12 E2E_CONFIRM    ct   (exchange_id | nonce_r)
//! 0x20 DATA           ct   (application bytes)
//! 0x7F ERROR          code u16 | detail (u16 len | UTF-8)
//! ```
//!
//! All integers are big-endian. Parsing is strict: trailing bytes are an
//! error, so the header bytes used as AEAD associated data are unambiguous.

use thiserror::Error;

use crate::crypto::{Nonce, Seed, NONCE_LEN, SEED_LEN, TAG_LEN};
use crate::hierarchy::{EntityId, MAX_ID_LEN};

pub const MAGIC: &[u8; 4] = b"HKAF";
pub const VERSION: u8 = 1;
pub const MAX_CIPHERTEXT: usize = 1024;
pub const MAX_DETAIL: usize = 1024;
pub const MAX_MESSAGE: usize = 2048;
pub const EXCHANGE_ID_LEN: usize = 16;

pub type ExchangeId = [u8; EXCHANGE_ID_LEN];

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic")]
    BadMagic,
    #[error("bad version")]
    BadVersion,
    #[error("unknown message type")]
    UnknownType,
    #[error("truncated")]
    Truncated,
    #[error("trailing bytes")]
    TrailingBytes,
    #[error("length out of range")]
    LengthOverflow,
    #[error("invalid field")]
    InvalidField,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{field} is {len} bytes, above the limit")]
    FieldTooLong { field: &'static str, len: usize },
    #[error("{field} is {len} bytes, below the minimum")]
    FieldTooShort { field: &'static str, len: usize },
    #[error("header type does not match body")]
    TypeMismatch,
    #[error("{0:?} must carry sequence number 0")]
    NonZeroSeq(MsgType),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum MsgType {
    Hello,
    LinkChallenge,
    LinkFinish,
    Relay,
    E2eConfirm,
    Data,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::Hello,
        MsgType::LinkChallenge,
        MsgType::LinkFinish,
        MsgType::Relay,
        MsgType::E2eConfirm,
        MsgType::Data,
        MsgType::Error,
    ];

    pub fn code(self) -> u8 {
        match self {
            MsgType::Hello => 0x01,
            MsgType::LinkChallenge => 0x02,
            MsgType::LinkFinish => 0x03,
            MsgType::Relay => 0x10,
            MsgType::E2eConfirm => 0x12,
            MsgType::Data => 0x20,
            MsgType::Error => 0x7F,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MsgType::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "hello",
            MsgType::LinkChallenge => "challenge",
            MsgType::LinkFinish => "finish",
            MsgType::Relay => "relay",
            MsgType::E2eConfirm => "confirm",
            MsgType::Data => "data",
            MsgType::Error => "error",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        MsgType::ALL.into_iter().find(|t| t.name() == name)
    }

    fn requires_zero_seq(self) -> bool {
        matches!(self, MsgType::Hello | MsgType::E2eConfirm)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WireHeader {
    pub msg_type: MsgType,
    pub sender: EntityId,
    pub receiver: EntityId,
    pub seq: u64,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Body {
    Hello { nonce_c: Nonce },
    LinkChallenge { ciphertext: Vec<u8> },
    LinkFinish { ciphertext: Vec<u8> },
    Relay { ciphertext: Vec<u8> },
    E2eConfirm { ciphertext: Vec<u8> },
    Data { ciphertext: Vec<u8> },
    Error { code: u16, detail: String },
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Hello { .. } => MsgType::Hello,
            Body::LinkChallenge { .. } => MsgType::LinkChallenge,
            Body::LinkFinish { .. } => MsgType::LinkFinish,
            Body::Relay { .. } => MsgType::Relay,
            Body::E2eConfirm { .. } => MsgType::E2eConfirm,
            Body::Data { .. } => MsgType::Data,
            Body::Error { .. } => MsgType::Error,
        }
    }

    pub fn ciphertext(&self) -> Option<&[u8]> {
        match self {
            Body::LinkChallenge { ciphertext }
            | Body::LinkFinish { ciphertext }
            | Body::Relay { ciphertext }
            | Body::E2eConfirm { ciphertext }
            | Body::Data { ciphertext } => Some(ciphertext),
            Body::Hello { .. } | Body::Error { .. } => None,
        }
    }

    /// Builds the ciphertext-carrying body for `t`. `None` for HELLO/ERROR.
    pub fn with_ciphertext(t: MsgType, ciphertext: Vec<u8>) -> Option<Body> {
        Some(match t {
            MsgType::LinkChallenge => Body::LinkChallenge { ciphertext },
            MsgType::LinkFinish => Body::LinkFinish { ciphertext },
            MsgType::Relay => Body::Relay { ciphertext },
            MsgType::E2eConfirm => Body::E2eConfirm { ciphertext },
            MsgType::Data => Body::Data { ciphertext },
            MsgType::Hello | MsgType::Error => return None,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WireMessage {
    pub header: WireHeader,
    pub body: Body,
}

impl WireMessage {
    pub fn new(sender: EntityId, receiver: EntityId, seq: u64, body: Body) -> Self {
        Self { header: WireHeader { msg_type: body.msg_type(), sender, receiver, seq }, body }
    }
}

fn put_id(out: &mut Vec<u8>, id: &EntityId) {
    out.extend_from_slice(&(id.as_bytes().len() as u16).to_be_bytes());
    out.extend_from_slice(id.as_bytes());
}

/// The encoded header; this is the AEAD associated data of its message.
pub fn aad_of(h: &WireHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 1 + 1 + 4 + 2 * MAX_ID_LEN + 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(h.msg_type.code());
    put_id(&mut out, &h.sender);
    put_id(&mut out, &h.receiver);
    out.extend_from_slice(&h.seq.to_be_bytes());
    out
}

fn put_ciphertext(out: &mut Vec<u8>, ct: &[u8]) -> Result<(), EncodeError> {
    if ct.len() > MAX_CIPHERTEXT {
        return Err(EncodeError::FieldTooLong { field: "ciphertext", len: ct.len() });
    }
    if ct.len() < TAG_LEN {
        return Err(EncodeError::FieldTooShort { field: "ciphertext", len: ct.len() });
    }
    out.extend_from_slice(&(ct.len() as u16).to_be_bytes());
    out.extend_from_slice(ct);
    Ok(())
}

pub fn encode(m: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    if m.header.msg_type != m.body.msg_type() {
        return Err(EncodeError::TypeMismatch);
    }
    if m.header.msg_type.requires_zero_seq() && m.header.seq != 0 {
        return Err(EncodeError::NonZeroSeq(m.header.msg_type));
    }
    let mut out = aad_of(&m.header);
    match &m.body {
        Body::Hello { nonce_c } => out.extend_from_slice(&nonce_c.0),
        Body::Error { code, detail } => {
            if detail.len() > MAX_DETAIL {
                return Err(EncodeError::FieldTooLong { field: "detail", len: detail.len() });
            }
            out.extend_from_slice(&code.to_be_bytes());
            out.extend_from_slice(&(detail.len() as u16).to_be_bytes());
            out.extend_from_slice(detail.as_bytes());
        }
        body => put_ciphertext(&mut out, body.ciphertext().expect("ciphertext body"))?,
    }
    debug_assert!(out.len() <= MAX_MESSAGE);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        if self.buf.len() - self.pos < n {
            return Err(ParseError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ParseError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ParseError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn id(&mut self) -> Result<EntityId, ParseError> {
        let n = self.u16()? as usize;
        if n == 0 || n > MAX_ID_LEN {
            return Err(ParseError::LengthOverflow);
        }
        let raw = self.take(n)?;
        let s = std::str::from_utf8(raw).map_err(|_| ParseError::InvalidField)?;
        EntityId::new(s).map_err(|_| ParseError::InvalidField)
    }

    fn ciphertext(&mut self) -> Result<Vec<u8>, ParseError> {
        let n = self.u16()? as usize;
        if !(TAG_LEN..=MAX_CIPHERTEXT).contains(&n) {
            return Err(ParseError::LengthOverflow);
        }
        Ok(self.take(n)?.to_vec())
    }

    fn finish(&self) -> Result<(), ParseError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(ParseError::TrailingBytes)
        }
    }
}

fn decode_header(c: &mut Cursor<'_>) -> Result<WireHeader, ParseError> {
    if c.buf.len() < 4 {
        return Err(ParseError::Truncated);
    }
    if c.take(4)? != MAGIC {
        return Err(ParseError::BadMagic);
    }
    if c.u8()? != VERSION {
        return Err(ParseError::BadVersion);
    }
    let msg_type = MsgType::from_code(c.u8()?).ok_or(ParseError::UnknownType)?;
    let sender = c.id()?;
    let receiver = c.id()?;
    let seq = c.u64()?;
    if msg_type.requires_zero_seq() && seq != 0 {
        return Err(ParseError::InvalidField);
    }
    Ok(WireHeader { msg_type, sender, receiver, seq })
}

pub fn decode(b: &[u8]) -> Result<WireMessage, ParseError> {
    if b.len() > MAX_MESSAGE {
        return Err(ParseError::LengthOverflow);
    }
    let mut c = Cursor::new(b);
    let header = decode_header(&mut c)?;
    let body = match header.msg_type {
        MsgType::Hello => Body::Hello { nonce_c: Nonce(c.array()?) },
        MsgType::Error => {
            let code = c.u16()?;
            let n = c.u16()? as usize;
            if n > MAX_DETAIL {
                return Err(ParseError::LengthOverflow);
            }
            let detail = std::str::from_utf8(c.take(n)?).map_err(|_| ParseError::InvalidField)?;
            Body::Error { code, detail: detail.to_owned() }
        }
        t => Body::with_ciphertext(t, c.ciphertext()?).expect("ciphertext type"),
    };
    c.finish()?;
    Ok(WireMessage { header, body })
}

/// Decodes only the header. Used for routing and adversary matching.
pub fn peek_header(b: &[u8]) -> Result<WireHeader, ParseError> {
    decode_header(&mut Cursor::new(b))
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum PayloadKind {
    Request,
    Response,
}

/// End-to-end establishment payload. Travels only inside RELAY ciphertext.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct E2ePayload {
    pub kind: PayloadKind,
    pub exchange_id: ExchangeId,
    pub initiator: EntityId,
    pub responder: EntityId,
    pub nonce_i: Nonce,
    /// Present iff `kind == Response`.
    pub nonce_r: Option<Nonce>,
    /// `seed_i` in a Request, `seed_r` in a Response.
    pub seed: Seed,
}

pub fn encode_payload(p: &E2ePayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 16 + 2 * (2 + MAX_ID_LEN) + 12 + 12 + 16);
    out.push(match p.kind {
        PayloadKind::Request => 0,
        PayloadKind::Response => 1,
    });
    out.extend_from_slice(&p.exchange_id);
    put_id(&mut out, &p.initiator);
    put_id(&mut out, &p.responder);
    out.extend_from_slice(&p.nonce_i.0);
    if p.kind == PayloadKind::Response {
        let nr = p.nonce_r.expect("responses carry nonce_r");
        out.extend_from_slice(&nr.0);
    }
    out.extend_from_slice(&p.seed.0);
    out
}

pub fn decode_payload(b: &[u8]) -> Result<E2ePayload, ParseError> {
    let mut c = Cursor::new(b);
    let kind = match c.u8()? {
        0 => PayloadKind::Request,
        1 => PayloadKind::Response,
        _ => return Err(ParseError::UnknownType),
    };
    let exchange_id = c.array()?;
    let initiator = c.id()?;
    let responder = c.id()?;
    let nonce_i = Nonce(c.array()?);
    let nonce_r = match kind {
        PayloadKind::Response => Some(Nonce(c.array()?)),
        PayloadKind::Request => None,
    };
    let seed = Seed(c.array()?);
    c.finish()?;
    Ok(E2ePayload { kind, exchange_id, initiator, responder, nonce_i, nonce_r, seed })
}

/// Plaintext of LINK_CHALLENGE.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ChallengePlain {
    pub nonce_c: Nonce,
    pub nonce_p: Nonce,
    pub seed_p: Seed,
}

impl ChallengePlain {
    pub const LEN: usize = 2 * NONCE_LEN + SEED_LEN;

    pub fn encode(&self) -> Vec<u8> {
        [&self.nonce_c.0[..], &self.nonce_p.0, &self.seed_p.0].concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ParseError> {
        let mut c = Cursor::new(b);
        let v = Self { nonce_c: Nonce(c.array()?), nonce_p: Nonce(c.array()?), seed_p: Seed(c.array()?) };
        c.finish()?;
        Ok(v)
    }
}

/// Plaintext of LINK_FINISH.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct FinishPlain {
    pub nonce_p: Nonce,
    pub seed_c: Seed,
}

impl FinishPlain {
    pub fn encode(&self) -> Vec<u8> {
        [&self.nonce_p.0[..], &self.seed_c.0].concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ParseError> {
        let mut c = Cursor::new(b);
        let v = Self { nonce_p: Nonce(c.array()?), seed_c: Seed(c.array()?) };
        c.finish()?;
        Ok(v)
    }
}

/// Plaintext of E2E_CONFIRM.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConfirmPlain {
    pub exchange_id: ExchangeId,
    pub nonce_r: Nonce,
}

impl ConfirmPlain {
    pub fn encode(&self) -> Vec<u8> {
        [&self.exchange_id[..], &self.nonce_r.0].concat()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ParseError> {
        let mut c = Cursor::new(b);
        let v = Self { exchange_id: c.array()?, nonce_r: Nonce(c.array()?) };
        c.finish()?;
        Ok(v)
    }
}
