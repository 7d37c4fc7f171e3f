//! Discrete-event simulation of saturated uplink contention.
//!
//! Time is kept in integer microseconds. Every station always has a frame
//! queued for its AP; APs only answer with ACKs. After the medium has been
//! idle for DIFS a station counts its backoff down in slots of `slot_us` and
//! transmits when the counter reaches zero. A successful data frame is
//! acknowledged SIFS after it ends; the sender learns the outcome SIFS plus
//! one ACK duration after its frame ended.
//!
//! Carrier sense is re-evaluated once all events of an instant have been
//! processed, so two stations whose counters expire at the same instant
//! both transmit and collide.
//!
//! A busy period that interrupts the countdown is handled according to
//! [`CountdownRule`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    reception_outcome, ChannelModel, LinkTable, ReceptionOutcome, SenseState, SenseThresholds,
};
use crate::mac::{
    after_failure, after_success, fair_share_count, on_busy_freeze, on_busy_slot, on_idle_slots,
    BackoffState, FailureOutcome, MacParams, ProtocolKind,
};
use crate::metrics::PerNodeStats;
use crate::scenarios::{Role, Topology};
use crate::{Error, NodeId, Result};

/// What a busy period does to a node that was counting down.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum CountdownRule {
    /// The busy period is one (busy) slot: it is recorded and consumes one
    /// unit of backoff. Deterministic schedules then repeat every `Bd + 1`
    /// slots whatever the other nodes do.
    #[default]
    VirtualSlot,
    /// The counter is frozen for the whole busy period.
    Freeze,
}

impl CountdownRule {
    pub fn name(&self) -> &'static str {
        match self {
            CountdownRule::VirtualSlot => "virtual_slot",
            CountdownRule::Freeze => "freeze",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "virtual_slot" => Some(CountdownRule::VirtualSlot),
            "freeze" => Some(CountdownRule::Freeze),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub duration_s: f64,
    pub seed: u64,
    pub payload_bytes: u32,
    pub phy_rate_mbps: f64,
    pub ack_rate_mbps: f64,
    pub preamble_us: u64,
    pub ack_preamble_us: u64,
    pub mac_header_bytes: u32,
    pub ack_bytes: u32,
    pub protocol: ProtocolKind,
    pub mac: MacParams,
    pub channel: ChannelModel,
    pub thresholds: SenseThresholds,
    /// Hysteresis nodes at stage `k` send `2^k` aggregated payloads per
    /// attempt.
    pub fair_share: bool,
    /// Subject ACKs to the same reception test as data frames.
    pub strict_ack: bool,
    pub countdown: CountdownRule,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration_s: 25.0,
            seed: 0,
            payload_bytes: 1470,
            phy_rate_mbps: 72.2,
            ack_rate_mbps: 24.0,
            preamble_us: 44,
            ack_preamble_us: 20,
            mac_header_bytes: 36,
            ack_bytes: 14,
            protocol: ProtocolKind::Dcf,
            mac: MacParams::default(),
            channel: ChannelModel::log_distance(),
            thresholds: SenseThresholds::default(),
            fair_share: false,
            strict_ack: false,
            countdown: CountdownRule::VirtualSlot,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::config("duration must be positive"));
        }
        if self.payload_bytes == 0 {
            return Err(Error::config("payload must be at least one byte"));
        }
        if !(self.phy_rate_mbps > 0.0) || !(self.ack_rate_mbps > 0.0) {
            return Err(Error::config("rates must be positive"));
        }
        self.mac.validate()?;
        self.protocol.validate(&self.mac)?;
        self.channel.validate()?;
        self.thresholds.validate()?;
        Ok(())
    }

    pub fn ack_duration_us(&self) -> u64 {
        ack_duration(self)
    }

    fn end_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }
}

/// Airtime of a data frame carrying `n_aggregated` payloads.
///
/// ```
/// use ecasim::engine::{frame_duration, SimConfig};
/// assert_eq!(frame_duration(1470, 1, &SimConfig::default()), 211);
/// ```
pub fn frame_duration(payload_bytes: u32, n_aggregated: u32, config: &SimConfig) -> u64 {
    assert!(n_aggregated >= 1, "a frame carries at least one payload");
    let bytes = config.mac_header_bytes as u64 + n_aggregated as u64 * payload_bytes as u64;
    config.preamble_us + airtime_us(8 * bytes, config.phy_rate_mbps)
}

pub fn ack_duration(config: &SimConfig) -> u64 {
    config.ack_preamble_us + airtime_us(8 * config.ack_bytes as u64, config.ack_rate_mbps)
}

fn airtime_us(bits: u64, rate_mbps: f64) -> u64 {
    (bits as f64 / rate_mbps).ceil() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTransmission {
    pub tx_node: NodeId,
    pub rx_node: NodeId,
    pub start_us: u64,
    pub duration_us: u64,
    pub channel: u16,
    pub power_dbm: f64,
    pub n_aggregated: u32,
    pub is_ack: bool,
}

impl FrameTransmission {
    pub fn end_us(&self) -> u64 {
        self.start_us + self.duration_us
    }

    fn on_air_at(&self, t: u64) -> bool {
        self.start_us <= t && t < self.end_us()
    }
}

/// Carrier sense of `node` over the slot `[slot_start, slot_start + slot_us)`:
/// busy if the medium is busy at the start of the slot or becomes busy at
/// any frame start inside it.
pub fn classify_slot(
    node: NodeId,
    slot_start: u64,
    slot_us: u64,
    channel: u16,
    frames: &[FrameTransmission],
    links: &LinkTable,
) -> SenseState {
    let relevant = || {
        frames
            .iter()
            .filter(move |f| f.channel == channel && f.tx_node != node)
    };
    let sense_at = |t: u64| {
        links.sense(
            relevant().filter(|f| f.on_air_at(t)).map(|f| f.tx_node),
            node,
        )
    };
    let slot_end = slot_start + slot_us;
    std::iter::once(slot_start)
        .chain(
            relevant()
                .map(|f| f.start_us)
                .filter(|&s| s > slot_start && s < slot_end),
        )
        .map(sense_at)
        .find(|s| *s == SenseState::Busy)
        .unwrap_or(SenseState::Idle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeResult {
    pub id: NodeId,
    pub role: Role,
    pub wlan: usize,
    pub floor: Option<u32>,
    pub channel: u16,
    pub stats: PerNodeStats,
    /// A transmission was still awaiting its outcome when the run ended.
    pub in_flight: bool,
    pub final_stage: u32,
    pub first_success_us: Option<u64>,
    pub last_failure_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounters {
    pub events: u64,
    pub data_frames: u64,
    pub ack_frames: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub nodes: Vec<NodeResult>,
    pub sim_seconds: f64,
    pub counters: EventCounters,
}

impl RunResult {
    pub fn stations(&self) -> impl Iterator<Item = &NodeResult> {
        self.nodes.iter().filter(|n| n.role == Role::Station)
    }

    pub fn total_successes(&self) -> u64 {
        self.nodes.iter().map(|n| n.stats.successes).sum()
    }

    pub fn total_failures(&self) -> u64 {
        self.nodes.iter().map(|n| n.stats.failures).sum()
    }

    /// The instant by which every station had at least one success.
    pub fn all_succeeded_at(&self) -> Option<u64> {
        self.stations()
            .map(|n| n.first_success_us)
            .try_fold(0, |acc, t| t.map(|t| acc.max(t)))
    }

    /// True when every station succeeded at least once and no failure
    /// happened after the last of those first successes.
    pub fn collision_free_after_first_successes(&self) -> bool {
        match self.all_succeeded_at() {
            None => false,
            Some(t) => self
                .stations()
                .all(|n| n.last_failure_us.is_none_or(|f| f < t)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Passive,
    Wait,
    Countdown { start: u64 },
    Exchange,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    ack_ok: bool,
    n_aggregated: u32,
}

struct Node {
    role: Role,
    ap: NodeId,
    chan: usize,
    backoff: BackoffState,
    rng: ChaCha8Rng,
    mode: Mode,
    epoch: u64,
    busy: bool,
    nav_until: u64,
    transmitting: bool,
    pending: Option<Pending>,
    stats: PerNodeStats,
    first_success_us: Option<u64>,
    last_failure_us: Option<u64>,
}

#[derive(Default)]
struct ChannelState {
    number: u16,
    stations: Vec<NodeId>,
    active: Vec<usize>,
    dirty: bool,
}

struct OnAir {
    frame: FrameTransmission,
    /// Transmitters of every frame that overlapped this one.
    overlaps: Vec<NodeId>,
    /// The receiver transmitted during the frame.
    receiver_transmitted: bool,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    FrameEnd(usize),
    TxStart { node: NodeId, epoch: u64 },
    AckStart { ap: NodeId, to: NodeId },
    ExchangeDone { node: NodeId },
    Resume { node: NodeId, epoch: u64 },
}

impl Ev {
    fn priority(&self) -> u8 {
        match self {
            Ev::FrameEnd(_) => 0,
            Ev::TxStart { .. } | Ev::AckStart { .. } => 1,
            Ev::ExchangeDone { .. } | Ev::Resume { .. } => 2,
        }
    }
}

struct Queued {
    time: u64,
    prio: u8,
    seq: u64,
    ev: Ev,
}

impl Queued {
    fn key(&self) -> (u64, u8, u64) {
        (self.time, self.prio, self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

const PLACEHOLDER: BackoffState = BackoffState {
    stage: 0,
    counter: 0,
    retries: 0,
    stickiness_left: 0,
    deterministic: false,
    sr: None,
};

fn update(b: &mut BackoffState, f: impl FnOnce(BackoffState) -> BackoffState) {
    let s = std::mem::replace(b, PLACEHOLDER);
    *b = f(s);
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    links: LinkTable,
    nodes: Vec<Node>,
    channels: Vec<ChannelState>,
    frames: Vec<Option<OnAir>>,
    free_frames: Vec<usize>,
    queue: BinaryHeap<Queued>,
    seq: u64,
    now: u64,
    ack_us: u64,
    counters: EventCounters,
}

/// Runs one simulation. Invalid topologies or configurations are rejected
/// before any event is processed.
pub fn run(topology: &Topology, config: &SimConfig) -> Result<RunResult> {
    topology.validate()?;
    config.validate()?;
    let links = LinkTable::build(
        &topology.positions(),
        topology.building.as_ref(),
        &config.channel,
        &config.thresholds,
    )?;
    let mut sim = Sim::new(topology, config, links);
    sim.execute();
    Ok(sim.finish(topology))
}

impl<'a> Sim<'a> {
    fn new(topology: &Topology, cfg: &'a SimConfig, links: LinkTable) -> Self {
        let params = cfg.protocol.effective_params(&cfg.mac);
        let mut chan_index: BTreeMap<u16, usize> = BTreeMap::new();
        let mut channels: Vec<ChannelState> = Vec::new();
        let mut nodes = Vec::with_capacity(topology.nodes.len());
        for (id, spec) in topology.nodes.iter().enumerate() {
            let number = topology.channel_of(id);
            let chan = *chan_index.entry(number).or_insert_with(|| {
                channels.push(ChannelState {
                    number,
                    ..Default::default()
                });
                channels.len() - 1
            });
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64 + 1);
            let backoff = BackoffState::initial(&params, &mut rng);
            let mode = match spec.role {
                Role::Ap => Mode::Passive,
                Role::Station => {
                    channels[chan].stations.push(id);
                    Mode::Wait
                }
            };
            nodes.push(Node {
                role: spec.role,
                ap: spec.ap,
                chan,
                backoff,
                rng,
                mode,
                epoch: 0,
                busy: false,
                nav_until: 0,
                transmitting: false,
                pending: None,
                stats: PerNodeStats::default(),
                first_success_us: None,
                last_failure_us: None,
            });
        }
        Sim {
            cfg,
            links,
            nodes,
            channels,
            frames: Vec::new(),
            free_frames: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            ack_us: ack_duration(cfg),
            counters: EventCounters::default(),
        }
    }

    fn push(&mut self, time: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued {
            time,
            prio: ev.priority(),
            seq: self.seq,
            ev,
        });
    }

    fn execute(&mut self) {
        let end = self.cfg.end_us();
        for id in 0..self.nodes.len() {
            if self.nodes[id].role == Role::Station {
                self.push(self.cfg.mac.difs_us, Ev::Resume { node: id, epoch: 0 });
            }
        }
        while let Some(q) = self.queue.pop() {
            if q.time > end {
                break;
            }
            debug_assert!(q.time >= self.now, "event out of order");
            self.now = q.time;
            self.counters.events += 1;
            self.handle(q.ev);
            if self.queue.peek().is_none_or(|n| n.time > self.now) {
                self.flush();
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::FrameEnd(slot) => self.frame_end(slot),
            Ev::TxStart { node, epoch } => {
                let n = &mut self.nodes[node];
                if n.epoch != epoch {
                    return;
                }
                if let Mode::Countdown { .. } = n.mode {
                    let left = n.backoff.counter;
                    update(&mut n.backoff, |b| on_idle_slots(b, left));
                    self.transmit(node);
                }
            }
            Ev::AckStart { ap, to } => {
                if self.nodes[ap].transmitting {
                    return;
                }
                let frame = FrameTransmission {
                    tx_node: ap,
                    rx_node: to,
                    start_us: self.now,
                    duration_us: self.ack_us,
                    channel: self.channels[self.nodes[ap].chan].number,
                    power_dbm: self.cfg.thresholds.tx_power_dbm,
                    n_aggregated: 1,
                    is_ack: true,
                };
                self.counters.ack_frames += 1;
                self.start_frame(frame);
            }
            Ev::ExchangeDone { node } => self.exchange_done(node),
            Ev::Resume { node, epoch } => {
                let slot = self.cfg.mac.slot_us;
                let now = self.now;
                let n = &mut self.nodes[node];
                if n.epoch != epoch || n.mode != Mode::Wait || n.busy {
                    return;
                }
                if n.backoff.counter == 0 {
                    self.transmit(node);
                } else {
                    n.mode = Mode::Countdown { start: now };
                    n.epoch += 1;
                    let (at, epoch) = (now + n.backoff.counter as u64 * slot, n.epoch);
                    self.push(at, Ev::TxStart { node, epoch });
                }
            }
        }
    }

    fn transmit(&mut self, node: NodeId) {
        let cfg = self.cfg;
        let n = &mut self.nodes[node];
        debug_assert!(!n.busy, "transmitting while sensing busy");
        let n_aggregated = if cfg.fair_share && cfg.protocol.has_hysteresis() {
            fair_share_count(n.backoff.stage)
        } else {
            1
        };
        n.stats.attempts += 1;
        n.mode = Mode::Exchange;
        n.epoch += 1;
        n.pending = Some(Pending {
            ack_ok: false,
            n_aggregated,
        });
        let frame = FrameTransmission {
            tx_node: node,
            rx_node: n.ap,
            start_us: self.now,
            duration_us: frame_duration(cfg.payload_bytes, n_aggregated, cfg),
            channel: self.channels[n.chan].number,
            power_dbm: cfg.thresholds.tx_power_dbm,
            n_aggregated,
            is_ack: false,
        };
        self.counters.data_frames += 1;
        self.start_frame(frame);
    }

    fn start_frame(&mut self, frame: FrameTransmission) {
        let chan = self.nodes[frame.tx_node].chan;
        let mut on_air = OnAir {
            overlaps: Vec::new(),
            receiver_transmitted: self.nodes[frame.rx_node].transmitting,
            frame,
        };
        for &other in &self.channels[chan].active {
            let o = self.frames[other].as_mut().expect("active frame slot");
            o.overlaps.push(on_air.frame.tx_node);
            on_air.overlaps.push(o.frame.tx_node);
            if o.frame.rx_node == on_air.frame.tx_node {
                o.receiver_transmitted = true;
            }
        }
        let end = on_air.frame.end_us();
        self.nodes[on_air.frame.tx_node].transmitting = true;
        let slot = match self.free_frames.pop() {
            Some(s) => {
                self.frames[s] = Some(on_air);
                s
            }
            None => {
                self.frames.push(Some(on_air));
                self.frames.len() - 1
            }
        };
        let c = &mut self.channels[chan];
        c.active.push(slot);
        c.dirty = true;
        self.push(end, Ev::FrameEnd(slot));
    }

    fn frame_end(&mut self, slot: usize) {
        let air = self.frames[slot].take().expect("frame ends once");
        self.free_frames.push(slot);
        let f = &air.frame;
        let chan = self.nodes[f.tx_node].chan;
        let c = &mut self.channels[chan];
        c.active.retain(|&s| s != slot);
        c.dirty = true;
        self.nodes[f.tx_node].transmitting = false;

        let outcome = if air.receiver_transmitted {
            ReceptionOutcome::Corrupted
        } else {
            reception_outcome(
                self.links.arrival(f.tx_node, f.rx_node),
                air.overlaps
                    .iter()
                    .map(|&o| self.links.arrival(o, f.rx_node)),
                &self.cfg.channel,
                &self.cfg.thresholds,
            )
        };

        if f.is_ack {
            let ok = !self.cfg.strict_ack || outcome == ReceptionOutcome::Decoded;
            if let Some(p) = self.nodes[f.rx_node].pending.as_mut() {
                p.ack_ok = ok;
            }
            return;
        }

        let sifs = self.cfg.mac.sifs_us;
        let nav = self.now + sifs + self.ack_us;
        for &m in &self.channels[chan].stations {
            if m != f.tx_node && self.links.link(f.tx_node, m).detectable {
                let n = &mut self.nodes[m];
                n.nav_until = n.nav_until.max(nav);
            }
        }
        if outcome == ReceptionOutcome::Decoded && self.nodes[f.rx_node].role == Role::Ap {
            self.push(
                self.now + sifs,
                Ev::AckStart {
                    ap: f.rx_node,
                    to: f.tx_node,
                },
            );
        }
        self.push(nav, Ev::ExchangeDone { node: f.tx_node });
    }

    fn exchange_done(&mut self, node: NodeId) {
        let cfg = self.cfg;
        let now = self.now;
        let n = &mut self.nodes[node];
        let Some(p) = n.pending.take() else {
            return;
        };
        if p.ack_ok {
            n.stats.successes += 1;
            n.stats.delivered_bytes += p.n_aggregated as u64 * cfg.payload_bytes as u64;
            n.first_success_us.get_or_insert(now);
            let rng = &mut n.rng;
            update(&mut n.backoff, |b| {
                after_success(b, cfg.protocol, &cfg.mac, rng)
            });
        } else {
            n.stats.failures += 1;
            n.last_failure_us = Some(now);
            let rng = &mut n.rng;
            let mut dropped = false;
            update(&mut n.backoff, |b| {
                let out = after_failure(b, cfg.protocol, &cfg.mac, rng);
                dropped = matches!(out, FailureOutcome::Dropped(_));
                out.into_state()
            });
            if dropped {
                n.stats.drops += 1;
            }
        }
        n.mode = Mode::Wait;
        n.epoch += 1;
        if !n.busy {
            let (at, epoch) = (now.max(n.nav_until) + cfg.mac.difs_us, n.epoch);
            self.push(at, Ev::Resume { node, epoch });
        }
    }

    /// Re-evaluates carrier sense on every channel whose set of frames on
    /// air changed during the current instant.
    fn flush(&mut self) {
        let now = self.now;
        let slot_us = self.cfg.mac.slot_us;
        let difs = self.cfg.mac.difs_us;
        let rule = self.cfg.countdown;
        let mut txs: Vec<NodeId> = Vec::new();
        let mut resumes: Vec<(u64, NodeId, u64)> = Vec::new();
        for c in self.channels.iter_mut().filter(|c| c.dirty) {
            c.dirty = false;
            txs.clear();
            txs.extend(
                c.active
                    .iter()
                    .map(|&s| self.frames[s].as_ref().expect("active frame").frame.tx_node),
            );
            for &m in &c.stations {
                let busy = self.links.sense(txs.iter().copied().filter(|&t| t != m), m)
                    == SenseState::Busy;
                let n = &mut self.nodes[m];
                if busy == n.busy {
                    continue;
                }
                n.busy = busy;
                match n.mode {
                    Mode::Countdown { start } => {
                        debug_assert!(busy, "countdown only runs on an idle medium");
                        let idle = ((now - start) / slot_us) as u32;
                        update(&mut n.backoff, |b| {
                            let b = on_idle_slots(b, idle);
                            match rule {
                                CountdownRule::VirtualSlot => on_busy_slot(b),
                                CountdownRule::Freeze => on_busy_freeze(b),
                            }
                        });
                        n.mode = Mode::Wait;
                        n.epoch += 1;
                    }
                    Mode::Wait => {
                        n.epoch += 1;
                        if !busy {
                            resumes.push((now.max(n.nav_until) + difs, m, n.epoch));
                        }
                    }
                    Mode::Exchange | Mode::Passive => {}
                }
            }
        }
        for (at, node, epoch) in resumes {
            self.push(at, Ev::Resume { node, epoch });
        }
    }

    fn finish(self, topology: &Topology) -> RunResult {
        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, n)| NodeResult {
                id,
                role: n.role,
                wlan: topology.nodes[id].wlan,
                floor: topology.nodes[id].floor,
                channel: topology.channel_of(id),
                stats: n.stats,
                in_flight: n.pending.is_some(),
                final_stage: n.backoff.stage,
                first_success_us: n.first_success_us,
                last_failure_us: n.last_failure_us,
            })
            .collect();
        RunResult {
            nodes,
            sim_seconds: self.cfg.duration_s,
            counters: self.counters,
        }
    }
}
