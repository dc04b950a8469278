//! Drives the protocol state machines between simulated devices.

use mtm_core::crypto::Digest;
use mtm_core::mtm::{Lifecycle, MtmCommand};
use mtm_core::platform::Platform;
use mtm_core::protocols::{
    DestMigration, DestState, DeviceTakeOwnership, MessageType, MigrationConfig, ProtocolError,
    ProtocolMessage, RemoteOwnerAgent, SourceMigration, SourceState,
};

use crate::channel::{Channel, ChannelStats, Delivery, FaultPlan, Side, TransportKind};
use crate::device::SimDevice;

/// One protocol message as it left its sender, before any fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub from: String,
    pub kind: MessageType,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TakeOwnershipOutcome {
    pub result: Result<(), ProtocolError>,
    pub trace: Vec<TraceEntry>,
}

/// Runs take-ownership between `device` and `agent`. `tamper` may alter the
/// request bytes in flight.
pub fn run_take_ownership_with(
    device: &mut SimDevice,
    agent: &mut RemoteOwnerAgent,
    purpose: &str,
    tamper: impl FnOnce(&mut Vec<u8>),
) -> TakeOwnershipOutcome {
    let mut trace = Vec::new();
    let ro = agent.stakeholder().clone();
    let result = (|| {
        let mut session = DeviceTakeOwnership::prepare(device.platform_mut(), &ro, purpose)?;
        device.record("takeown.prepare", session.session().as_bytes());
        let request = session.build_request(device.platform_mut(), agent.transport_public());
        let request = match request {
            Ok(r) => r,
            Err(e) => {
                device.record("takeown.attestation-failed", &[e.code()]);
                return Err(e);
            }
        };
        let mut bytes = request.encode();
        trace.push(TraceEntry {
            from: device.name().to_owned(),
            kind: request.message_type(),
            bytes: bytes.clone(),
        });
        device.record("takeown.request", &bytes);
        tamper(&mut bytes);
        let (reply, _) = agent.respond(&bytes);
        let reply_bytes = reply.encode();
        trace.push(TraceEntry {
            from: ro.id.clone(),
            kind: reply.message_type(),
            bytes: reply_bytes.clone(),
        });
        device.record("takeown.reply", &reply_bytes);
        session.complete(device.platform_mut(), &reply)
    })();
    match &result {
        Ok(()) => device.record("takeown.complete", ro.id.as_bytes()),
        Err(e) => device.record("takeown.aborted", &[e.code()]),
    };
    TakeOwnershipOutcome { result, trace }
}

pub fn run_take_ownership(
    device: &mut SimDevice,
    agent: &mut RemoteOwnerAgent,
    purpose: &str,
) -> TakeOwnershipOutcome {
    run_take_ownership_with(device, agent, purpose, |_| {})
}

/// Instances on `platforms` holding `srk` in a usable state.
pub fn srk_holders(platforms: &[&Platform], srk: &Digest) -> usize {
    platforms
        .iter()
        .flat_map(|p| p.mtm().live_instances())
        .filter(|(_, i)| {
            i.srk_id().as_ref() == Some(srk)
                && matches!(i.lifecycle(), Lifecycle::Owned | Lifecycle::MigrationLocked)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationRun {
    pub config: MigrationConfig,
    pub plan: FaultPlan,
    pub transport: TransportKind,
    pub channel_seed: u64,
    pub close_channel: bool,
    /// Extends this source PCR once the subsystem is locked, before packaging.
    pub pcr_change_after_lock: Option<u8>,
    /// Recorded message sent in place of the destination's first message of
    /// the same type, as an adversary replaying an old session would.
    pub replay: Option<ProtocolMessage>,
    /// Step budget; exceeding it is reported as a livelock.
    pub max_steps: usize,
}

impl Default for MigrationRun {
    fn default() -> Self {
        Self {
            config: MigrationConfig::default(),
            plan: FaultPlan::default(),
            transport: TransportKind::InProcess,
            channel_seed: 0,
            close_channel: false,
            pcr_change_after_lock: None,
            replay: None,
            max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationOutcome {
    pub result: Result<(), ProtocolError>,
    pub source_state: Option<SourceState>,
    pub dest_state: Option<DestState>,
    pub steps: usize,
    pub ticks: u64,
    /// Largest number of simultaneous holders of the migrating SRK.
    pub max_holders: usize,
    pub source_holds: bool,
    pub dest_holds: bool,
    pub livelock: bool,
    pub channel: ChannelStats,
    pub trace: Vec<TraceEntry>,
}

impl MigrationOutcome {
    pub fn uniqueness_held(&self) -> bool {
        self.max_holders <= 1
    }

    /// Success moved the subsystem; failure left it with the source.
    pub fn is_clean(&self) -> bool {
        if !self.uniqueness_held() || self.livelock {
            return false;
        }
        match self.result {
            Ok(()) => self.dest_holds && !self.source_holds,
            Err(_) => self.source_holds && !self.dest_holds,
        }
    }
}

struct Loop<'a> {
    source: &'a mut SimDevice,
    dest: &'a mut SimDevice,
    channel: Channel,
    trace: Vec<TraceEntry>,
    srk: Option<Digest>,
    max_holders: usize,
}

impl Loop<'_> {
    fn send(&mut self, from: Side, messages: Vec<ProtocolMessage>) {
        for m in messages {
            let bytes = m.encode();
            let device = match from {
                Side::Source => &mut *self.source,
                Side::Dest => &mut *self.dest,
            };
            device.record(&format!("send.{}", m.message_type().name()), &bytes);
            self.trace.push(TraceEntry {
                from: device.name().to_owned(),
                kind: m.message_type(),
                bytes,
            });
            // A closed pipe just swallows the message; timeouts take over.
            let _ = self.channel.send(from, &m);
        }
    }

    fn check(&mut self) {
        if let Some(srk) = &self.srk {
            let n = srk_holders(&[self.source.platform(), self.dest.platform()], srk);
            self.max_holders = self.max_holders.max(n);
        }
    }
}

fn owned_srk(device: &SimDevice, ro: &str) -> Option<Digest> {
    let p = device.platform();
    let tss = p.subsystem(ro)?;
    p.mtm().instance(tss.vmtm).ok()?.srk_id()
}

fn extend_source(source: &mut SimDevice, ro: &str, index: u8) {
    let Some(handle) = source.platform().subsystem(ro).map(|t| t.vmtm) else {
        return;
    };
    let digest = mtm_core::crypto::hash(b"post-lock change");
    let _ = source
        .platform_mut()
        .mtm_mut()
        .route_command(handle, MtmCommand::Extend { index, digest });
    source.record("extend.after-lock", digest.as_bytes());
}

/// Migrates `ro`'s subsystem from `source` to `dest` under the run's faults,
/// checking the single-holder invariant after every step.
pub fn run_migration(
    source: &mut SimDevice,
    dest: &mut SimDevice,
    ro: &str,
    run: &MigrationRun,
) -> MigrationOutcome {
    let srk = owned_srk(source, ro);
    let (source_id, dest_id) = (source.device_id(), dest.device_id());
    let fail = |source: &mut SimDevice, e: ProtocolError| {
        source.record("migrate.refused", &[e.code()]);
        let holds = srk.is_some_and(|k| srk_holders(&[source.platform()], &k) == 1);
        MigrationOutcome {
            result: Err(e),
            source_state: None,
            dest_state: None,
            steps: 0,
            ticks: 0,
            max_holders: usize::from(holds),
            source_holds: holds,
            dest_holds: false,
            livelock: false,
            channel: ChannelStats::default(),
            trace: Vec::new(),
        }
    };
    let mut channel = match Channel::open(
        &source_id,
        &dest_id,
        run.channel_seed,
        run.plan.clone(),
        run.transport,
    ) {
        Ok(c) => c,
        Err(_) => return fail(source, ProtocolError::ChannelFailed),
    };
    if run.close_channel {
        channel.close();
    }
    if channel.is_closed() {
        return fail(source, ProtocolError::ChannelFailed);
    }
    let (mut src, init) =
        match SourceMigration::init(source.platform_mut(), ro, dest_id, run.config) {
            Ok(pair) => pair,
            Err(e) => return fail(source, e),
        };
    source.record(
        "migrate.init",
        src.session().unwrap_or(init.session).as_bytes(),
    );

    let mut lp = Loop {
        source,
        dest,
        channel,
        trace: Vec::new(),
        srk,
        max_holders: 0,
    };
    let mut dst: Option<DestMigration> = None;
    lp.check();
    lp.send(Side::Source, vec![init]);

    let (mut steps, mut ticks, mut livelock) = (0usize, 0u64, false);
    let mut replay = run.replay.clone();
    let tick_budget = run.config.timeout_ticks * 10 + 100;
    loop {
        let dest_done = dst.as_ref().is_none_or(DestMigration::is_terminal);
        if src.is_terminal() && dest_done && lp.channel.is_idle() {
            break;
        }
        if steps >= run.max_steps || ticks >= tick_budget {
            livelock = true;
            break;
        }
        steps += 1;

        if src.state() == SourceState::Locked {
            if let Some(index) = run.pcr_change_after_lock {
                extend_source(lp.source, ro, index);
            }
            let out = src.package(lp.source.platform_mut());
            lp.send(Side::Source, out);
            lp.check();
            continue;
        }
        if let Some(delivery) = lp.channel.recv(Side::Dest) {
            let out = match delivery {
                Delivery::Message(m) => {
                    lp.dest
                        .record(&format!("recv.{}", m.message_type().name()), &m.encode());
                    match dst.as_mut() {
                        Some(d) => d.deliver(lp.dest.platform_mut(), &m),
                        None if m.message_type() == MessageType::MigrationInit => {
                            match DestMigration::accept_init(lp.dest.platform_mut(), &m, run.config)
                            {
                                Ok((d, offer)) => {
                                    dst = Some(d);
                                    vec![offer]
                                }
                                Err((e, refusal)) => {
                                    lp.dest.record("migrate.refuse", &[e.code()]);
                                    vec![refusal]
                                }
                            }
                        }
                        None => Vec::new(),
                    }
                }
                Delivery::Rejected { reason } => {
                    lp.dest.record("recv.rejected", reason.as_bytes());
                    Vec::new()
                }
            };
            let out = match replay.take() {
                Some(old) if out.iter().any(|m| m.message_type() == old.message_type()) => {
                    lp.dest.record("replayed", &old.encode());
                    out.into_iter()
                        .map(|m| {
                            if m.message_type() == old.message_type() {
                                old.clone()
                            } else {
                                m
                            }
                        })
                        .collect()
                }
                other => {
                    replay = other;
                    out
                }
            };
            lp.send(Side::Dest, out);
            lp.check();
            continue;
        }
        if let Some(delivery) = lp.channel.recv(Side::Source) {
            let out = match delivery {
                Delivery::Message(m) => {
                    lp.source
                        .record(&format!("recv.{}", m.message_type().name()), &m.encode());
                    src.deliver(lp.source.platform_mut(), &m)
                }
                Delivery::Rejected { reason } => {
                    lp.source.record("recv.rejected", reason.as_bytes());
                    Vec::new()
                }
            };
            lp.send(Side::Source, out);
            lp.check();
            continue;
        }
        if lp.channel.flush_held() {
            continue;
        }
        ticks += 1;
        lp.source.advance(1);
        lp.dest.advance(1);
        let out = src.tick(lp.source.platform_mut());
        lp.send(Side::Source, out);
        if let Some(d) = dst.as_mut() {
            let out = d.tick(lp.dest.platform_mut());
            lp.send(Side::Dest, out);
        }
        lp.check();
    }

    let result = match (src.state(), src.error(), dst.as_ref()) {
        (SourceState::Committed, _, Some(d)) if d.state() == DestState::Committed => Ok(()),
        (_, Some(e), _) => Err(e.clone()),
        (_, None, Some(d)) => Err(d.error().cloned().unwrap_or(ProtocolError::TimedOut)),
        (_, None, None) => Err(ProtocolError::TimedOut),
    };
    let (source_holds, dest_holds) = match &srk {
        Some(k) => (
            srk_holders(&[lp.source.platform()], k) == 1,
            srk_holders(&[lp.dest.platform()], k) == 1,
        ),
        None => (false, false),
    };
    let summary = match &result {
        Ok(()) => "migrate.committed".to_owned(),
        Err(e) => format!("migrate.aborted.{}", e.code()),
    };
    lp.source
        .record(&summary, src.session().unwrap_or(Digest::ZERO).as_bytes());
    lp.dest.record(
        &summary,
        dst.as_ref()
            .map(|d| d.session())
            .unwrap_or(Digest::ZERO)
            .as_bytes(),
    );
    MigrationOutcome {
        result,
        source_state: Some(src.state()),
        dest_state: dst.as_ref().map(DestMigration::state),
        steps,
        ticks,
        max_holders: lp.max_holders,
        source_holds,
        dest_holds,
        livelock,
        channel: lp.channel.stats(),
        trace: lp.trace,
    }
}
