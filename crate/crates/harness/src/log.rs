//! Append-only event log. Each entry carries the hash of its predecessor, so
//! two runs agree exactly when their head hashes agree.

use mtm_core::codec::{Canonical, CodecResult, Reader, Writer};
use mtm_core::crypto::{hash, Digest};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub seq: u64,
    pub actor: String,
    pub action: String,
    #[serde(serialize_with = "crate::hex_digest")]
    pub payload_digest: Digest,
    #[serde(serialize_with = "crate::hex_digest")]
    pub prev: Digest,
}

impl LogEntry {
    pub fn digest(&self) -> Digest {
        hash(&self.to_canonical())
    }
}

impl Canonical for LogEntry {
    fn write(&self, w: &mut Writer) {
        w.u64(self.seq)
            .str(&self.actor)
            .str(&self.action)
            .nested(&self.payload_digest)
            .nested(&self.prev);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            seq: r.u64()?,
            actor: r.string()?,
            action: r.string()?,
            payload_digest: r.nested()?,
            prev: r.nested()?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, actor: &str, action: &str, payload: &[u8]) -> Digest {
        let entry = LogEntry {
            seq: self.entries.len() as u64,
            actor: actor.to_owned(),
            action: action.to_owned(),
            payload_digest: hash(payload),
            prev: self.head(),
        };
        let digest = entry.digest();
        self.entries.push(entry);
        digest
    }

    /// Digest of the last entry, or zero for an empty log.
    pub fn head(&self) -> Digest {
        self.entries
            .last()
            .map(LogEntry::digest)
            .unwrap_or(Digest::ZERO)
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the first entry that breaks the chain, if any.
    pub fn verify(&self) -> Result<(), usize> {
        let mut prev = Digest::ZERO;
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq != i as u64 || e.prev != prev {
                return Err(i);
            }
            prev = e.digest();
        }
        Ok(())
    }
}

impl Canonical for EventLog {
    fn write(&self, w: &mut Writer) {
        w.list(&self.entries);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self { entries: r.list()? })
    }
}
