//! Authenticated duplex pipe between two devices, with scripted faults.
//!
//! Every frame carries an HMAC-SHA256 tag over the encoded message. Faults
//! from the plan fire once each, on the first matching message: `drop`,
//! `dup`, `reorder` (hold back until the next frame in the same direction
//! or until the pipe goes idle), `flip` (flip one bit after tagging, which
//! the receiver detects and discards) and `tamper` (alter the message before
//! tagging, standing in for a compromised sender).

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::str::FromStr;

use hmac::{Hmac, Mac};
use mtm_core::crypto::{hash_parts, Digest};
use mtm_core::protocols::{MessageBody, MessageType, ProtocolMessage};
use sha2::Sha256;

const TAG_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Source,
    Dest,
}

impl Side {
    pub fn peer(self) -> Side {
        match self {
            Side::Source => Side::Dest,
            Side::Dest => Side::Source,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Drop,
    Duplicate,
    Reorder,
    BitFlip,
    Tamper,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        Self::Drop,
        Self::Duplicate,
        Self::Reorder,
        Self::BitFlip,
        Self::Tamper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Drop => "drop",
            Self::Duplicate => "dup",
            Self::Reorder => "reorder",
            Self::BitFlip => "flip",
            Self::Tamper => "tamper",
        }
    }
}

/// Which message a fault applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    /// The `n`th frame sent on the channel, counting from zero.
    Index(u64),
    /// The `n`th message of a type, counting from one.
    Type(MessageType, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub target: FaultTarget,
    /// Selects the flipped bit; taken modulo the frame length.
    pub bit: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub faults: Vec<Fault>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad fault plan entry `{0}`")]
pub struct FaultPlanError(pub String);

fn message_type_named(name: &str) -> Option<MessageType> {
    MessageType::ALL
        .into_iter()
        .find(|t| t.name() == name || t.name().rsplit('-').next() == Some(name))
}

impl FromStr for Fault {
    type Err = FaultPlanError;

    /// `kind:target[@n][/bit]`, target being a message type (`package`,
    /// `migration-status`) or `#index`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FaultPlanError(s.to_owned());
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let kind = FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(bad)?;
        let (rest, bit) = match rest.split_once('/') {
            Some((r, b)) => (r, b.parse().map_err(|_| bad())?),
            None => (rest, 0),
        };
        let target = if let Some(index) = rest.strip_prefix('#') {
            FaultTarget::Index(index.parse().map_err(|_| bad())?)
        } else {
            let (name, nth) = match rest.split_once('@') {
                Some((n, k)) => (n, k.parse().map_err(|_| bad())?),
                None => (rest, 1),
            };
            if nth == 0 {
                return Err(bad());
            }
            FaultTarget::Type(message_type_named(name).ok_or_else(bad)?, nth)
        };
        Ok(Fault { kind, target, bit })
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.kind.name())?;
        match self.target {
            FaultTarget::Index(i) => write!(f, "#{i}")?,
            FaultTarget::Type(t, 1) => write!(f, "{}", t.name())?,
            FaultTarget::Type(t, n) => write!(f, "{}@{n}", t.name())?,
        }
        if self.bit != 0 {
            write!(f, "/{}", self.bit)?;
        }
        Ok(())
    }
}

impl FromStr for FaultPlan {
    type Err = FaultPlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let faults = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(FaultPlan { faults })
    }
}

impl fmt::Display for FaultPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.faults.iter().map(Fault::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub reordered: u64,
    pub flipped: u64,
    pub tampered: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Loopback,
}

#[derive(Debug)]
enum Transport {
    InProcess,
    /// Frames are written to one end of a local TCP connection and read back
    /// from the other before queueing.
    Loopback {
        tx: TcpStream,
        rx: TcpStream,
    },
}

impl Transport {
    fn open(kind: TransportKind) -> std::io::Result<Self> {
        match kind {
            TransportKind::InProcess => Ok(Transport::InProcess),
            TransportKind::Loopback => {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let tx = TcpStream::connect(listener.local_addr()?)?;
                let (rx, _) = listener.accept()?;
                tx.set_nodelay(true)?;
                Ok(Transport::Loopback { tx, rx })
            }
        }
    }

    fn carry(&mut self, frame: Vec<u8>) -> std::io::Result<Vec<u8>> {
        match self {
            Transport::InProcess => Ok(frame),
            Transport::Loopback { tx, rx } => {
                tx.write_all(&(frame.len() as u32).to_be_bytes())?;
                tx.write_all(&frame)?;
                let mut len = [0u8; 4];
                rx.read_exact(&mut len)?;
                let mut out = vec![0u8; u32::from_be_bytes(len) as usize];
                rx.read_exact(&mut out)?;
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("channel closed")]
    Closed,
    #[error("transport: {0}")]
    Transport(String),
}

/// What a receiver gets out of the pipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Message(ProtocolMessage),
    /// A frame failed authentication or decoding and was discarded.
    Rejected {
        reason: &'static str,
    },
}

#[derive(Debug)]
pub struct Channel {
    key: [u8; 32],
    queues: [VecDeque<Vec<u8>>; 2],
    held: [Option<Vec<u8>>; 2],
    plan: FaultPlan,
    fired: Vec<bool>,
    type_counts: Vec<(MessageType, u32)>,
    transport: Transport,
    closed: bool,
    stats: ChannelStats,
}

impl Channel {
    pub fn open(
        source: &Digest,
        dest: &Digest,
        seed: u64,
        plan: FaultPlan,
        kind: TransportKind,
    ) -> Result<Self, ChannelError> {
        let key = *hash_parts(&[
            b"mtm-sim-channel",
            source.as_bytes(),
            dest.as_bytes(),
            &seed.to_be_bytes(),
        ])
        .as_bytes();
        let transport =
            Transport::open(kind).map_err(|e| ChannelError::Transport(e.to_string()))?;
        let fired = vec![false; plan.faults.len()];
        Ok(Self {
            key,
            queues: Default::default(),
            held: Default::default(),
            plan,
            fired,
            type_counts: Vec::new(),
            transport,
            closed: false,
            stats: ChannelStats::default(),
        })
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn tag(&self, body: &[u8]) -> [u8; TAG_LEN] {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("any key length");
        mac.update(body);
        mac.finalize().into_bytes().into()
    }

    fn seal(&self, body: Vec<u8>) -> Vec<u8> {
        let tag = self.tag(&body);
        let mut frame = body;
        frame.extend_from_slice(&tag);
        frame
    }

    fn next_fault(&mut self, index: u64, kind: MessageType, nth: u32) -> Option<Fault> {
        let hit = self.plan.faults.iter().enumerate().find(|(i, f)| {
            !self.fired[*i]
                && match f.target {
                    FaultTarget::Index(n) => n == index,
                    FaultTarget::Type(t, k) => t == kind && k == nth,
                }
        });
        let (i, fault) = hit?;
        let fault = *fault;
        self.fired[i] = true;
        Some(fault)
    }

    pub fn send(&mut self, from: Side, msg: &ProtocolMessage) -> Result<(), ChannelError> {
        if self.closed {
            return Err(ChannelError::Closed);
        }
        let index = self.stats.sent;
        self.stats.sent += 1;
        let kind = msg.message_type();
        let nth = match self.type_counts.iter_mut().find(|(t, _)| *t == kind) {
            Some((_, n)) => {
                *n += 1;
                *n
            }
            None => {
                self.type_counts.push((kind, 1));
                1
            }
        };
        let fault = self.next_fault(index, kind, nth);
        let to = from.peer().index();
        let mut body = msg.encode();
        if let Some(Fault {
            kind: FaultKind::Tamper,
            bit,
            ..
        }) = fault
        {
            self.stats.tampered += 1;
            body = tamper(msg, bit);
        }
        let mut frame = self.seal(body);
        match fault.map(|f| (f.kind, f.bit)) {
            Some((FaultKind::Drop, _)) => {
                self.stats.dropped += 1;
                return Ok(());
            }
            Some((FaultKind::BitFlip, bit)) => {
                self.stats.flipped += 1;
                let bit = bit as usize % (frame.len() * 8);
                frame[bit / 8] ^= 1 << (bit % 8);
            }
            _ => {}
        }
        let frame = self
            .transport
            .carry(frame)
            .map_err(|e| ChannelError::Transport(e.to_string()))?;
        match fault.map(|f| f.kind) {
            Some(FaultKind::Reorder) if self.held[to].is_none() => {
                self.stats.reordered += 1;
                self.held[to] = Some(frame);
                return Ok(());
            }
            Some(FaultKind::Duplicate) => {
                self.stats.duplicated += 1;
                self.queues[to].push_back(frame.clone());
            }
            _ => {}
        }
        self.queues[to].push_back(frame);
        if let Some(held) = self.held[to].take() {
            self.queues[to].push_back(held);
        }
        Ok(())
    }

    /// Releases frames held back for reordering. Called when nothing else is
    /// in flight.
    pub fn flush_held(&mut self) -> bool {
        let mut any = false;
        for (queue, held) in self.queues.iter_mut().zip(self.held.iter_mut()) {
            if let Some(frame) = held.take() {
                queue.push_back(frame);
                any = true;
            }
        }
        any
    }

    pub fn pending(&self, to: Side) -> usize {
        self.queues[to.index()].len()
    }

    pub fn is_idle(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty) && self.held.iter().all(Option::is_none)
    }

    pub fn recv(&mut self, to: Side) -> Option<Delivery> {
        let frame = self.queues[to.index()].pop_front()?;
        Some(self.open_frame(&frame))
    }

    fn open_frame(&mut self, frame: &[u8]) -> Delivery {
        if frame.len() < TAG_LEN {
            self.stats.rejected += 1;
            return Delivery::Rejected {
                reason: "short frame",
            };
        }
        let (body, tag) = frame.split_at(frame.len() - TAG_LEN);
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("any key length");
        mac.update(body);
        if mac.verify_slice(tag).is_err() {
            self.stats.rejected += 1;
            return Delivery::Rejected { reason: "bad tag" };
        }
        match ProtocolMessage::decode(body) {
            Ok(msg) => {
                self.stats.delivered += 1;
                Delivery::Message(msg)
            }
            Err(_) => {
                self.stats.rejected += 1;
                Delivery::Rejected {
                    reason: "malformed",
                }
            }
        }
    }
}

/// Alters a message the way a subverted sender would. Packages get a byte of
/// the serialized instance changed; other messages get a payload bit flipped.
fn tamper(msg: &ProtocolMessage, bit: u32) -> Vec<u8> {
    if let MessageBody::MigrationPackage(package) = &msg.body {
        let mut package = package.clone();
        if !package.instance_image.is_empty() {
            let i = bit as usize % package.instance_image.len();
            package.instance_image[i] ^= 0x01;
        }
        return ProtocolMessage::new(msg.session, MessageBody::MigrationPackage(package)).encode();
    }
    let mut bytes = msg.encode();
    const HEADER: usize = 38;
    if bytes.len() > HEADER {
        let span = (bytes.len() - HEADER) * 8;
        let b = bit as usize % span;
        bytes[HEADER + b / 8] ^= 1 << (b % 8);
    }
    bytes
}
