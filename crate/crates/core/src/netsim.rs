//! Deterministic discrete-event network connecting one switch and n workers.
//!
//! Every run is a pure function of its configuration, seed, and fault
//! script: events are processed in (timestamp, insertion sequence) order and
//! all randomness — loss, duplication, latency jitter — comes from one
//! seeded generator. The full run is recorded as a [`SimTrace`] that can be
//! exported as JSON lines and compared byte-for-byte across replays.
//!
//! Scripted fault injection ([`FaultScript`]) drops the m-th packet matching
//! a predicate, which pins down loss-recovery schedules exactly — timeouts,
//! duplicate suppression, shadow-copy unicast replies — independent of the
//! random channel.

pub mod udp;

use crate::bench::RunMetrics;
use crate::quant::{self, QuantConfig, QuantError};
use crate::switch::{SwitchAction, SwitchConfig, SwitchError, SwitchState};
use crate::wire::AggregationPacket;
use crate::worker::{WorkerConfig, WorkerError, WorkerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

/// Window width for the sent-packet timeline, in nanoseconds (10 ms).
pub const TIMELINE_BIN_NS: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("stalled: {0}")]
    Stalled(String),
    #[error("phase lag exceeded on slot {idx}: offsets {min}..{max} span more than one window")]
    PhaseLag { idx: u16, min: u64, max: u64 },
    #[error("replay diverged at event {at}")]
    ReplayDivergence { at: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
}

/// Per-link channel behavior. Loss and duplication are applied independently
/// to every transmission in both directions; latency is `latency_ns` plus a
/// uniform jitter in `[-jitter_ns, +jitter_ns]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub latency_ns: u64,
    pub jitter_ns: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            dup_prob: 0.0,
            latency_ns: 5_000,
            jitter_ns: 1_000,
        }
    }
}

impl ChannelConfig {
    pub fn lossless(latency_ns: u64) -> Self {
        Self {
            loss_prob: 0.0,
            dup_prob: 0.0,
            latency_ns,
            jitter_ns: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [("loss_prob", self.loss_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::ConfigMismatch(format!(
                    "{name} {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Dup,
    Timeout,
    Multicast,
    Unicast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Dropped on the link (random loss or fault directive).
    Lost,
    /// Contribution absorbed into a slot that is still aggregating.
    Absorbed,
    /// Retransmission ignored: contribution already recorded, slot not done.
    Duplicate,
    /// Result for an offset the worker already filled.
    Stale,
}

/// The acting endpoint of a trace event. Link events (send/deliver/drop/dup)
/// name the worker end of the link, with `dir` giving the direction;
/// switch-local decisions name the switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Switch,
    Worker(u16),
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            Endpoint::Switch => ser.serialize_str("switch"),
            Endpoint::Worker(w) => ser.serialize_str(&format!("w{w}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PacketSummary {
    pub wid: u16,
    pub ver: u8,
    pub idx: u16,
    pub off: u32,
}

impl From<&AggregationPacket> for PacketSummary {
    fn from(p: &AggregationPacket) -> Self {
        Self {
            wid: p.wid,
            ver: p.ver,
            idx: p.idx,
            off: p.off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub time_ns: u64,
    pub kind: EventKind,
    pub endpoint: Endpoint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<DropReason>,
    pub packet: PacketSummary,
}

/// Ordered event log of one simulated run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }

    /// Index of the first event where the traces differ.
    pub fn first_divergence(&self, other: &SimTrace) -> Option<usize> {
        let shorter = self.events.len().min(other.events.len());
        for i in 0..shorter {
            if self.events[i] != other.events[i] {
                return Some(i);
            }
        }
        if self.events.len() != other.events.len() {
            Some(shorter)
        } else {
            None
        }
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn count_drops(&self, reason: DropReason) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Drop && e.reason == Some(reason))
            .count()
    }
}

/// Drop the `nth_match`-th packet matching the predicate. `wid` names the
/// worker end of the link: the sender for upstream packets, the destination
/// for downstream ones. `None` fields match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultDirective {
    pub direction: Direction,
    pub wid: Option<u16>,
    pub idx: Option<u16>,
    pub off: Option<u32>,
    /// 1-based match ordinal.
    pub nth_match: u32,
}

impl FaultDirective {
    pub fn upstream(wid: u16) -> Self {
        Self {
            direction: Direction::Up,
            wid: Some(wid),
            idx: None,
            off: None,
            nth_match: 1,
        }
    }

    pub fn downstream(wid: u16) -> Self {
        Self {
            direction: Direction::Down,
            wid: Some(wid),
            idx: None,
            off: None,
            nth_match: 1,
        }
    }

    pub fn with_off(mut self, off: u32) -> Self {
        self.off = Some(off);
        self
    }

    pub fn with_idx(mut self, idx: u16) -> Self {
        self.idx = Some(idx);
        self
    }

    pub fn nth(mut self, n: u32) -> Self {
        self.nth_match = n;
        self
    }

    fn matches(&self, dir: Direction, worker: u16, p: &AggregationPacket) -> bool {
        self.direction == dir
            && self.wid.map_or(true, |w| w == worker)
            && self.idx.map_or(true, |i| i == p.idx)
            && self.off.map_or(true, |o| o == p.off)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    pub directives: Vec<FaultDirective>,
}

impl FaultScript {
    pub fn new(directives: Vec<FaultDirective>) -> Self {
        Self { directives }
    }
}

struct FaultRuntime {
    directive: FaultDirective,
    seen_matches: u32,
    applied: bool,
}

impl FaultRuntime {
    /// True when this transmission must be dropped.
    fn intercept(&mut self, dir: Direction, worker: u16, p: &AggregationPacket) -> bool {
        if self.applied || !self.directive.matches(dir, worker, p) {
            return false;
        }
        self.seen_matches += 1;
        if self.seen_matches == self.directive.nth_match {
            self.applied = true;
            true
        } else {
            false
        }
    }
}

/// Full configuration of one simulated run.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub switch: SwitchConfig,
    pub channel: ChannelConfig,
    /// Retransmission timeout applied to every worker.
    pub timeout_ns: u64,
    /// Per-worker timeout override (index = wid).
    pub worker_timeouts: Option<Vec<u64>>,
    pub max_retries: Option<u32>,
    pub seed: u64,
    /// Hard event budget; exceeding it reports a stall instead of looping
    /// forever on pathological channels.
    pub max_events: u64,
}

impl SimConfig {
    pub fn new(switch: SwitchConfig, channel: ChannelConfig, seed: u64) -> Self {
        Self {
            switch,
            channel,
            timeout_ns: crate::worker::DEFAULT_TIMEOUT_NS,
            worker_timeouts: None,
            max_retries: None,
            seed,
            max_events: 200_000_000,
        }
    }

    fn timeout_for(&self, wid: usize) -> u64 {
        self.worker_timeouts
            .as_ref()
            .and_then(|v| v.get(wid).copied())
            .unwrap_or(self.timeout_ns)
    }
}

/// One protocol engine inside a worker process: its config, the wire slot
/// indices it owns, and the quantized element stream it contributes.
#[derive(Debug, Clone)]
pub struct EngineSetup {
    pub cfg: WorkerConfig,
    pub wire_idx: Vec<u16>,
    pub stream: Vec<i32>,
}

/// Everything a finished run yields.
#[derive(Debug)]
pub struct SimOutcome {
    /// Per-worker dequantized results (identical across workers on success).
    pub results: Vec<Vec<f64>>,
    pub trace: SimTrace,
    pub metrics: RunMetrics,
}

/// Raw integer-level outcome used by the collective layer.
pub(crate) struct RawOutcome {
    pub nodes: Vec<Vec<WorkerState>>,
    pub trace: SimTrace,
    pub metrics: RunMetrics,
}

enum Payload {
    SwitchRecv(AggregationPacket),
    WorkerRecv {
        wid: u16,
        pkt: AggregationPacket,
    },
    Timer {
        wid: u16,
        shard: usize,
        wire_idx: u16,
        gen: u64,
    },
}

struct Event {
    time: u64,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct Node {
    engines: Vec<WorkerState>,
    /// wire idx -> engine index.
    route: Vec<usize>,
    done_at: Option<u64>,
}

impl Node {
    fn done(&self) -> bool {
        self.engines.iter().all(|e| e.done())
    }
}

/// Tracks, per slot index, the window of offsets in flight across all
/// workers; the protocol guarantees it never spans more than one reuse
/// stride (no worker lags more than one phase behind any other).
struct PhaseLagObserver {
    /// [wid][idx] -> off in flight.
    inflight: Vec<Vec<Option<u64>>>,
    /// [idx] -> k * s of the owning engine.
    stride: Vec<u64>,
}

impl PhaseLagObserver {
    fn check(&self, idx: u16) -> Result<(), SimError> {
        let mut min = u64::MAX;
        let mut max = 0;
        let mut any = false;
        for w in &self.inflight {
            if let Some(off) = w[idx as usize] {
                any = true;
                min = min.min(off);
                max = max.max(off);
            }
        }
        if any && max - min > self.stride[idx as usize] {
            return Err(SimError::PhaseLag { idx, min, max });
        }
        Ok(())
    }

    fn update(&mut self, wid: u16, idx: u16, off: Option<u64>) -> Result<(), SimError> {
        self.inflight[wid as usize][idx as usize] = off;
        self.check(idx)
    }
}

struct Simulator {
    cfg: SimConfig,
    switch: SwitchState,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    trace: SimTrace,
    faults: Vec<FaultRuntime>,
    observer: PhaseLagObserver,
    sends: u64,
    sends_per_bin: Vec<u64>,
    retransmissions: u64,
    link_drops: u64,
    events_processed: u64,
}

impl Simulator {
    fn new(
        cfg: SimConfig,
        engines: Vec<Vec<EngineSetup>>,
        faults: Option<FaultScript>,
    ) -> Result<Self, SimError> {
        cfg.channel.validate()?;
        let switch = SwitchState::new(cfg.switch)?;
        let n = cfg.switch.n;
        if engines.len() != n {
            return Err(SimError::ConfigMismatch(format!(
                "{} worker setups for {n} workers",
                engines.len()
            )));
        }
        let s = cfg.switch.s;
        let mut stride = vec![0u64; s];
        let mut prepared = Vec::with_capacity(n);
        for (wid, engine_setups) in engines.into_iter().enumerate() {
            let mut route = vec![usize::MAX; s];
            let mut states = Vec::with_capacity(engine_setups.len());
            for (e, setup) in engine_setups.into_iter().enumerate() {
                if setup.cfg.wid as usize != wid || setup.cfg.n != n {
                    return Err(SimError::ConfigMismatch(format!(
                        "engine config wid {} / n {} under worker {wid} of {n}",
                        setup.cfg.wid, setup.cfg.n
                    )));
                }
                let engine_stride = (setup.cfg.k * setup.cfg.s) as u64;
                for &w in &setup.wire_idx {
                    if w as usize >= s {
                        return Err(SimError::ConfigMismatch(format!(
                            "wire slot {w} outside pool of {s}"
                        )));
                    }
                    if route[w as usize] != usize::MAX {
                        return Err(SimError::ConfigMismatch(format!(
                            "wire slot {w} owned by two engines"
                        )));
                    }
                    route[w as usize] = e;
                    if stride[w as usize] == 0 {
                        stride[w as usize] = engine_stride;
                    } else if stride[w as usize] != engine_stride {
                        return Err(SimError::ConfigMismatch(format!(
                            "inconsistent window stride on slot {w}"
                        )));
                    }
                }
                let state = WorkerState::with_slot_map(setup.cfg, setup.wire_idx)?;
                states.push((state, setup.stream));
            }
            prepared.push((states, route));
        }

        let observer = PhaseLagObserver {
            inflight: vec![vec![None; s]; n],
            stride,
        };
        let faults = faults
            .unwrap_or_default()
            .directives
            .into_iter()
            .map(|directive| FaultRuntime {
                directive,
                seen_matches: 0,
                applied: false,
            })
            .collect();

        let mut sim = Self {
            cfg,
            switch,
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            trace: SimTrace::default(),
            faults,
            observer,
            sends: 0,
            sends_per_bin: Vec::new(),
            retransmissions: 0,
            link_drops: 0,
            events_processed: 0,
        };
        sim.rng = ChaCha8Rng::seed_from_u64(sim.cfg.seed);

        // Load streams and emit every worker's initial window at t = 0, in
        // worker order.
        let mut built = Vec::with_capacity(n);
        for (wid, (states, route)) in prepared.into_iter().enumerate() {
            let mut node = Node {
                engines: Vec::with_capacity(states.len()),
                route,
                done_at: None,
            };
            let mut initial = Vec::new();
            for (shard, (mut state, stream)) in states.into_iter().enumerate() {
                let packets = state.append(&stream, 0)?;
                state.close();
                for p in packets {
                    sim.observer.update(wid as u16, p.idx, Some(p.off as u64))?;
                    if let Some((deadline, gen)) = state.timer_for(p.idx) {
                        sim.schedule(
                            deadline,
                            Payload::Timer {
                                wid: wid as u16,
                                shard,
                                wire_idx: p.idx,
                                gen,
                            },
                        );
                    }
                    initial.push(p);
                }
                node.engines.push(state);
            }
            if node.done() {
                node.done_at = Some(0);
            }
            for p in initial {
                sim.send_up(wid as u16, p);
            }
            built.push(node);
        }
        sim.nodes = built;
        Ok(sim)
    }

    fn record(
        &mut self,
        kind: EventKind,
        endpoint: Endpoint,
        dir: Option<Direction>,
        reason: Option<DropReason>,
        packet: PacketSummary,
    ) {
        self.trace.events.push(TraceEvent {
            time_ns: self.now,
            kind,
            endpoint,
            dir,
            reason,
            packet,
        });
    }

    fn schedule(&mut self, at: u64, payload: Payload) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time: at,
            seq: self.seq,
            payload,
        }));
    }

    fn delay(&mut self) -> u64 {
        let base = self.cfg.channel.latency_ns as i64;
        let j = self.cfg.channel.jitter_ns as i64;
        let jitter = if j > 0 { self.rng.gen_range(-j..=j) } else { 0 };
        (base + jitter).max(1) as u64
    }

    fn arm_timer(&mut self, wid: u16, shard: usize, wire_idx: u16) {
        if let Some((deadline, gen)) = self.nodes[wid as usize].engines[shard].timer_for(wire_idx) {
            self.schedule(
                deadline,
                Payload::Timer {
                    wid,
                    shard,
                    wire_idx,
                    gen,
                },
            );
        }
    }

    /// Put one worker->switch transmission on the link.
    fn send_up(&mut self, wid: u16, pkt: AggregationPacket) {
        let summary = PacketSummary::from(&pkt);
        self.record(
            EventKind::Send,
            Endpoint::Worker(wid),
            Some(Direction::Up),
            None,
            summary,
        );
        self.sends += 1;
        let bin = (self.now / TIMELINE_BIN_NS) as usize;
        if self.sends_per_bin.len() <= bin {
            self.sends_per_bin.resize(bin + 1, 0);
        }
        self.sends_per_bin[bin] += 1;
        self.transmit(Direction::Up, wid, pkt);
    }

    /// Put one switch->worker transmission on the link.
    fn send_down(&mut self, wid: u16, pkt: AggregationPacket) {
        let summary = PacketSummary::from(&pkt);
        self.record(
            EventKind::Send,
            Endpoint::Worker(wid),
            Some(Direction::Down),
            None,
            summary,
        );
        self.transmit(Direction::Down, wid, pkt);
    }

    fn transmit(&mut self, dir: Direction, wid: u16, pkt: AggregationPacket) {
        let summary = PacketSummary::from(&pkt);
        let scripted = self.faults.iter_mut().any(|f| f.intercept(dir, wid, &pkt));
        if scripted
            || (self.cfg.channel.loss_prob > 0.0
                && self.rng.gen::<f64>() < self.cfg.channel.loss_prob)
        {
            self.link_drops += 1;
            self.record(
                EventKind::Drop,
                Endpoint::Worker(wid),
                Some(dir),
                Some(DropReason::Lost),
                summary,
            );
            return;
        }
        let delay = self.delay();
        let copies = if self.cfg.channel.dup_prob > 0.0
            && self.rng.gen::<f64>() < self.cfg.channel.dup_prob
        {
            self.record(EventKind::Dup, Endpoint::Worker(wid), Some(dir), None, summary);
            2
        } else {
            1
        };
        for c in 0..copies {
            let d = if c == 0 { delay } else { self.delay() };
            let payload = match dir {
                Direction::Up => Payload::SwitchRecv(pkt.clone()),
                Direction::Down => Payload::WorkerRecv {
                    wid,
                    pkt: pkt.clone(),
                },
            };
            self.schedule(self.now + d, payload);
        }
    }

    fn on_switch_recv(&mut self, pkt: AggregationPacket) -> Result<(), SimError> {
        let summary = PacketSummary::from(&pkt);
        self.record(
            EventKind::Deliver,
            Endpoint::Worker(pkt.wid),
            Some(Direction::Up),
            None,
            summary,
        );
        let was_seen = self.switch.has_seen(pkt.ver, pkt.idx, pkt.wid);
        match self.switch.handle_packet(&pkt)? {
            SwitchAction::Multicast(result) => {
                self.record(
                    EventKind::Multicast,
                    Endpoint::Switch,
                    None,
                    None,
                    PacketSummary::from(&result),
                );
                for w in 0..self.cfg.switch.n as u16 {
                    self.send_down(w, result.clone());
                }
            }
            SwitchAction::Unicast(result, wid) => {
                self.record(
                    EventKind::Unicast,
                    Endpoint::Switch,
                    None,
                    None,
                    PacketSummary::from(&result),
                );
                self.send_down(wid, result);
            }
            SwitchAction::Drop => {
                let reason = if was_seen {
                    DropReason::Duplicate
                } else {
                    DropReason::Absorbed
                };
                self.record(EventKind::Drop, Endpoint::Switch, None, Some(reason), summary);
            }
        }
        Ok(())
    }

    fn on_worker_recv(&mut self, wid: u16, pkt: AggregationPacket) -> Result<(), SimError> {
        let summary = PacketSummary::from(&pkt);
        self.record(
            EventKind::Deliver,
            Endpoint::Worker(wid),
            Some(Direction::Down),
            None,
            summary,
        );
        let node = &mut self.nodes[wid as usize];
        let shard = node
            .route
            .get(pkt.idx as usize)
            .copied()
            .unwrap_or(usize::MAX);
        if shard == usize::MAX {
            self.record(
                EventKind::Drop,
                Endpoint::Worker(wid),
                None,
                Some(DropReason::Stale),
                summary,
            );
            return Ok(());
        }
        let before = node.engines[shard].inflight_off_for(pkt.idx);
        let out = node.engines[shard].on_result(&pkt, self.now);
        let after = node.engines[shard].inflight_off_for(pkt.idx);
        if before == after && out.is_empty() {
            self.record(
                EventKind::Drop,
                Endpoint::Worker(wid),
                None,
                Some(DropReason::Stale),
                summary,
            );
            return Ok(());
        }
        self.observer.update(wid, pkt.idx, after)?;
        for p in &out {
            self.arm_timer(wid, shard, p.idx);
        }
        for p in out {
            self.send_up(wid, p);
        }
        let node = &mut self.nodes[wid as usize];
        if node.done_at.is_none() && node.done() {
            node.done_at = Some(self.now);
        }
        Ok(())
    }

    fn on_timer(&mut self, wid: u16, shard: usize, wire_idx: u16, gen: u64) -> Result<(), SimError> {
        let engine = &mut self.nodes[wid as usize].engines[shard];
        match engine.timer_for(wire_idx) {
            Some((deadline, g)) if g == gen && deadline <= self.now => {}
            _ => return Ok(()), // superseded or cancelled
        }
        let out = engine.on_timeout(self.now).map_err(|e| match e {
            WorkerError::RetriesExhausted { idx, retries } => SimError::Stalled(format!(
                "worker {wid} exhausted {retries} retries on slot {idx}"
            )),
            other => SimError::Worker(other),
        })?;
        for p in &out {
            self.record(
                EventKind::Timeout,
                Endpoint::Worker(wid),
                None,
                None,
                PacketSummary::from(p),
            );
            self.arm_timer(wid, shard, p.idx);
        }
        for p in out {
            self.retransmissions += 1;
            self.send_up(wid, p);
        }
        Ok(())
    }

    fn all_done(&self) -> bool {
        self.nodes.iter().all(|n| n.done())
    }

    fn run(mut self, elements: u64) -> Result<RawOutcome, SimError> {
        while !self.all_done() {
            let Some(Reverse(ev)) = self.queue.pop() else {
                return Err(SimError::Stalled(
                    "event queue drained before completion".into(),
                ));
            };
            self.events_processed += 1;
            if self.events_processed > self.cfg.max_events {
                return Err(SimError::Stalled(format!(
                    "event budget {} exhausted",
                    self.cfg.max_events
                )));
            }
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            match ev.payload {
                Payload::SwitchRecv(pkt) => self.on_switch_recv(pkt)?,
                Payload::WorkerRecv { wid, pkt } => self.on_worker_recv(wid, pkt)?,
                Payload::Timer {
                    wid,
                    shard,
                    wire_idx,
                    gen,
                } => self.on_timer(wid, shard, wire_idx, gen)?,
            }
        }

        let per_worker_tat_ns: Vec<u64> = self
            .nodes
            .iter()
            .map(|n| n.done_at.unwrap_or(self.now))
            .collect();
        let tat_ns = per_worker_tat_ns.iter().copied().max().unwrap_or(0);
        let metrics = RunMetrics::from_run(
            tat_ns,
            per_worker_tat_ns,
            elements,
            self.sends,
            self.sends_per_bin.clone(),
            self.retransmissions,
            self.link_drops,
        );
        Ok(RawOutcome {
            nodes: self.nodes.into_iter().map(|n| n.engines).collect(),
            trace: self.trace,
            metrics,
        })
    }
}

/// Run the full engine set (one or more shards per worker) to completion.
pub(crate) fn run_engines(
    cfg: &SimConfig,
    engines: Vec<Vec<EngineSetup>>,
    faults: Option<FaultScript>,
    elements: u64,
) -> Result<RawOutcome, SimError> {
    Simulator::new(cfg.clone(), engines, faults)?.run(elements)
}

/// Aggregate one float update per worker through the simulated network.
///
/// Updates are quantized with `quant_cfg.f`, streamed through the pool, and
/// on success every worker's dequantized result equals the integer sum of
/// all quantized updates divided by `f`.
pub fn run_simulation(
    cfg: &SimConfig,
    updates: &[Vec<f64>],
    quant_cfg: &QuantConfig,
    faults: Option<FaultScript>,
) -> Result<SimOutcome, SimError> {
    let n = cfg.switch.n;
    if updates.len() != n {
        return Err(SimError::ConfigMismatch(format!(
            "{} updates for {n} workers",
            updates.len()
        )));
    }
    let len = updates.first().map(|u| u.len()).unwrap_or(0);
    if len == 0 {
        return Err(SimError::ConfigMismatch("empty update".into()));
    }
    if updates.iter().any(|u| u.len() != len) {
        return Err(SimError::ConfigMismatch(
            "updates must have equal length on every worker".into(),
        ));
    }
    quant_cfg.validate()?;

    let mut engines = Vec::with_capacity(n);
    for (wid, update) in updates.iter().enumerate() {
        let stream = quant::quantize(update, quant_cfg.f)?;
        let mut wcfg = WorkerConfig::new(wid as u16, n, cfg.switch.s, cfg.switch.k);
        wcfg.timeout_ns = cfg.timeout_for(wid);
        wcfg.max_retries = cfg.max_retries;
        engines.push(vec![EngineSetup {
            cfg: wcfg,
            wire_idx: (0..cfg.switch.s as u16).collect(),
            stream,
        }]);
    }

    let raw = run_engines(cfg, engines, faults, len as u64)?;
    let results = raw
        .nodes
        .iter()
        .map(|engines| engines[0].finalize(quant_cfg.f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimOutcome {
        results,
        trace: raw.trace,
        metrics: raw.metrics,
    })
}

/// Re-run a recorded configuration and verify the trace is reproduced
/// exactly; returns the fresh trace.
pub fn replay(
    cfg: &SimConfig,
    updates: &[Vec<f64>],
    quant_cfg: &QuantConfig,
    faults: Option<FaultScript>,
    recorded: &SimTrace,
) -> Result<SimTrace, SimError> {
    let outcome = run_simulation(cfg, updates, quant_cfg, faults)?;
    if let Some(at) = recorded.first_divergence(&outcome.trace) {
        return Err(SimError::ReplayDivergence { at });
    }
    Ok(outcome.trace)
}
