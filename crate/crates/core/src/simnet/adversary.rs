use crate::hierarchy::EntityId;
use crate::wire::{self, MsgType};

use super::SimTime;

/// Selects messages on the wire by header fields. `skip` matching
/// messages pass untouched first; `count` bounds how many are affected
/// (`None` for all later ones).
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Matcher {
    pub from: Option<EntityId>,
    pub to: Option<EntityId>,
    pub msg_type: Option<MsgType>,
    pub skip: u32,
    pub count: Option<u32>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn from(mut self, id: EntityId) -> Self {
        self.from = Some(id);
        self
    }

    pub fn to(mut self, id: EntityId) -> Self {
        self.to = Some(id);
        self
    }

    pub fn msg_type(mut self, t: MsgType) -> Self {
        self.msg_type = Some(t);
        self
    }

    pub fn skip(mut self, n: u32) -> Self {
        self.skip = n;
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.count = Some(n);
        self
    }

    pub fn once(self) -> Self {
        self.times(1)
    }

    /// Header-level match; never looks inside ciphertext.
    pub fn matches(&self, from: &EntityId, to: &EntityId, bytes: &[u8]) -> bool {
        if self.from.as_ref().is_some_and(|f| f != from) || self.to.as_ref().is_some_and(|t| t != to) {
            return false;
        }
        match self.msg_type {
            None => true,
            Some(t) => wire::peek_header(bytes).is_ok_and(|h| h.msg_type == t),
        }
    }
}

/// A Dolev-Yao network attacker's script entry.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AdversaryAction {
    Drop(Matcher),
    /// Re-delivers transcript record `index` at time `at`.
    Replay {
        index: usize,
        at: SimTime,
    },
    Inject {
        from_claim: EntityId,
        to: EntityId,
        bytes: Vec<u8>,
        at: SimTime,
    },
    /// Flips bit `bit` (modulo the message length) of matching messages.
    Tamper {
        matcher: Matcher,
        bit: usize,
    },
    Eavesdrop(Matcher),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(super) enum FilterKind {
    Drop,
    Tamper(usize),
    Eavesdrop,
}

/// An armed on-path action with its own match counter.
#[derive(Clone, Debug)]
pub(super) struct Filter {
    pub matcher: Matcher,
    pub kind: FilterKind,
    pub seen: u32,
}

impl Filter {
    pub fn new(matcher: Matcher, kind: FilterKind) -> Self {
        Self { matcher, kind, seen: 0 }
    }

    /// Whether this filter fires on the message, advancing its counter.
    pub fn fire(&mut self, from: &EntityId, to: &EntityId, bytes: &[u8]) -> bool {
        if !self.matcher.matches(from, to, bytes) {
            return false;
        }
        self.seen += 1;
        if self.seen <= self.matcher.skip {
            return false;
        }
        match self.matcher.count {
            Some(n) => self.seen - self.matcher.skip <= n,
            None => true,
        }
    }
}

pub(super) fn flip_bit(bytes: &mut [u8], bit: usize) {
    if bytes.is_empty() {
        return;
    }
    let bit = bit % (bytes.len() * 8);
    bytes[bit / 8] ^= 0x80 >> (bit % 8);
}
