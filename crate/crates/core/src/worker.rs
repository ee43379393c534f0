//! Worker-side protocol engine.
//!
//! A worker streams its flat update vector through the switch pool: it opens
//! with one packet per slot (the initial window of `s`), then sends a new
//! packet for a slot only when that slot's result arrives — self-clocking
//! keeps at most `s` packets in flight. Slot `i` carries offsets
//! `k*i, k*i + k*s, k*i + 2*k*s, ...` with the pool-version bit alternating
//! on each reuse. A per-slot timer retransmits the identical packet when the
//! result does not arrive in time.
//!
//! The update stream is growable: [`WorkerState::append`] adds more elements
//! (padded to a whole number of `k`-element chunks) and idle slots pick the
//! new chunks up at their predetermined offsets. [`WorkerState::start_round`]
//! is the one-shot form: append a single update and close the stream.
//!
//! Time is a logical nanosecond clock supplied by the caller: simulated time
//! under the simulator, a monotonic clock on the datagram transport.

use crate::wire::AggregationPacket;
use thiserror::Error;

/// Default retransmission timeout: 1 ms.
pub const DEFAULT_TIMEOUT_NS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty update")]
    EmptyUpdate,
    #[error("retries exhausted on slot {idx} after {retries} retransmissions")]
    RetriesExhausted { idx: u16, retries: u32 },
    #[error("aggregate incomplete")]
    NotComplete,
    #[error("stream exceeds the 32-bit offset space")]
    StreamTooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerConfig {
    pub wid: u16,
    /// Worker count.
    pub n: usize,
    /// Slots this engine drives (the whole pool unless sharded).
    pub s: usize,
    /// Elements per packet.
    pub k: usize,
    /// Retransmission timeout in logical nanoseconds.
    pub timeout_ns: u64,
    /// Give up after this many retransmissions of one packet; `None` retries
    /// forever.
    pub max_retries: Option<u32>,
}

impl WorkerConfig {
    pub fn new(wid: u16, n: usize, s: usize, k: usize) -> Self {
        Self {
            wid,
            n,
            s,
            k,
            timeout_ns: DEFAULT_TIMEOUT_NS,
            max_retries: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkerError> {
        if self.n == 0 || (self.wid as usize) >= self.n {
            return Err(WorkerError::InvalidConfig(format!(
                "worker id {} out of range for {} workers",
                self.wid, self.n
            )));
        }
        if self.s == 0 {
            return Err(WorkerError::InvalidConfig("no slots".into()));
        }
        if self.k == 0 {
            return Err(WorkerError::InvalidConfig("k is zero".into()));
        }
        if self.timeout_ns == 0 {
            return Err(WorkerError::InvalidConfig("zero timeout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    off: u64,
    ver: u8,
    deadline: u64,
    retries: u32,
    /// Bumped whenever the timer is (re)armed or cancelled, so stale timer
    /// events can be recognized and ignored.
    gen: u64,
}

#[derive(Debug, Clone)]
struct Slot {
    /// Offset this slot sends next (or is currently carrying, when in flight).
    next_off: u64,
    /// Version bit for that send; flips on each reuse.
    next_ver: u8,
    inflight: Option<InFlight>,
}

/// Counters for results that did not advance the protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResultStats {
    /// Results for offsets already filled (duplicate deliveries).
    pub stale: u64,
    /// Results for slots or offsets this worker never had in flight.
    pub unknown: u64,
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    cfg: WorkerConfig,
    /// Wire slot index for each local slot (identity unless sharded).
    wire_idx: Vec<u16>,
    /// Quantized update stream, padded per append to whole chunks.
    u: Vec<i32>,
    /// Assembled aggregate, same length as `u`.
    a: Vec<i32>,
    chunk_filled: Vec<bool>,
    filled_count: usize,
    /// Logical (unpadded) length of the last appended round, used by
    /// `finalize`.
    raw_len: usize,
    closed: bool,
    stats: ResultStats,
    slots: Vec<Slot>,
    timer_gen: u64,
}

impl WorkerState {
    /// Open an empty stream driving the full pool `0..s`.
    pub fn new(cfg: WorkerConfig) -> Result<Self, WorkerError> {
        let wire_idx = (0..cfg.s as u16).collect();
        Self::with_slot_map(cfg, wire_idx)
    }

    /// Open an empty stream driving the given wire slot indices; `cfg.s`
    /// must equal the number of owned slots.
    pub fn with_slot_map(cfg: WorkerConfig, wire_idx: Vec<u16>) -> Result<Self, WorkerError> {
        cfg.validate()?;
        if wire_idx.len() != cfg.s {
            return Err(WorkerError::InvalidConfig(format!(
                "slot map has {} entries for {} slots",
                wire_idx.len(),
                cfg.s
            )));
        }
        let slots = (0..cfg.s)
            .map(|l| Slot {
                next_off: (cfg.k * l) as u64,
                next_ver: 0,
                inflight: None,
            })
            .collect();
        Ok(Self {
            cfg,
            wire_idx,
            u: Vec::new(),
            a: Vec::new(),
            chunk_filled: Vec::new(),
            filled_count: 0,
            raw_len: 0,
            closed: false,
            stats: ResultStats::default(),
            slots,
            timer_gen: 0,
        })
    }

    /// One-shot round: stream a single update and close. Emits the initial
    /// window of `min(s, ceil(|update| / k))` packets.
    pub fn start_round(
        cfg: WorkerConfig,
        update: &[i32],
        now: u64,
    ) -> Result<(Self, Vec<AggregationPacket>), WorkerError> {
        if update.is_empty() {
            return Err(WorkerError::EmptyUpdate);
        }
        let mut st = Self::new(cfg)?;
        let packets = st.append(update, now)?;
        st.close();
        Ok((st, packets))
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.cfg
    }

    /// Extend the stream; zero-pads to a chunk boundary and starts any idle
    /// slot whose next offset now has data.
    pub fn append(&mut self, elems: &[i32], now: u64) -> Result<Vec<AggregationPacket>, WorkerError> {
        let k = self.cfg.k;
        self.raw_len = self.u.len() + elems.len();
        self.u.extend_from_slice(elems);
        let rem = self.u.len() % k;
        if rem != 0 {
            self.u.resize(self.u.len() + (k - rem), 0);
        }
        if self.u.len() > u32::MAX as usize {
            return Err(WorkerError::StreamTooLong);
        }
        self.a.resize(self.u.len(), 0);
        self.chunk_filled.resize(self.u.len() / k, false);
        let mut out = Vec::new();
        for l in 0..self.slots.len() {
            if self.slots[l].inflight.is_none() {
                if let Some(p) = self.launch(l, now) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    /// Mark the stream complete; `done` can only become true afterwards.
    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Build and arm the next packet for local slot `l`, if its offset is
    /// within the stream.
    fn launch(&mut self, l: usize, now: u64) -> Option<AggregationPacket> {
        let slot = &self.slots[l];
        let off = slot.next_off;
        if off as usize >= self.u.len() {
            return None;
        }
        let ver = slot.next_ver;
        self.timer_gen += 1;
        self.slots[l].inflight = Some(InFlight {
            off,
            ver,
            deadline: now + self.cfg.timeout_ns,
            retries: 0,
            gen: self.timer_gen,
        });
        Some(self.build_packet(l, off, ver))
    }

    fn build_packet(&self, l: usize, off: u64, ver: u8) -> AggregationPacket {
        let k = self.cfg.k;
        AggregationPacket {
            wid: self.cfg.wid,
            ver,
            idx: self.wire_idx[l],
            off: off as u32,
            vector: self.u[off as usize..off as usize + k].to_vec(),
        }
    }

    fn local_slot(&self, wire: u16) -> Option<usize> {
        // Identity map in the common case; linear scan otherwise (s is small).
        if (wire as usize) < self.wire_idx.len() && self.wire_idx[wire as usize] == wire {
            return Some(wire as usize);
        }
        self.wire_idx.iter().position(|&w| w == wire)
    }

    /// Consume a result from the switch (multicast or unicast). Fills the
    /// aggregate at the packet's offset, cancels the slot timer, and sends
    /// the slot's next chunk (offset advanced by `k*s`, version flipped)
    /// when one exists. Results for unknown slots or already-filled offsets
    /// are counted and ignored.
    pub fn on_result(&mut self, p: &AggregationPacket, now: u64) -> Vec<AggregationPacket> {
        let k = self.cfg.k;
        let Some(l) = self.local_slot(p.idx) else {
            self.stats.unknown += 1;
            return Vec::new();
        };
        let Some(rec) = self.slots[l].inflight else {
            self.stats.stale += 1;
            return Vec::new();
        };
        if rec.off != p.off as u64 || rec.ver != p.ver || p.vector.len() != k {
            self.stats.stale += 1;
            return Vec::new();
        }
        let off = rec.off as usize;
        self.a[off..off + k].copy_from_slice(&p.vector);
        let chunk = off / k;
        if !self.chunk_filled[chunk] {
            self.chunk_filled[chunk] = true;
            self.filled_count += 1;
        }
        self.timer_gen += 1; // cancel the armed timer
        self.slots[l].inflight = None;
        self.slots[l].next_off = rec.off + (k * self.cfg.s) as u64;
        self.slots[l].next_ver = rec.ver ^ 1;
        match self.launch(l, now) {
            Some(next) => vec![next],
            None => Vec::new(),
        }
    }

    /// Retransmit every overdue in-flight packet, byte-identical to the
    /// original, and re-arm its timer.
    pub fn on_timeout(&mut self, now: u64) -> Result<Vec<AggregationPacket>, WorkerError> {
        let mut out = Vec::new();
        for l in 0..self.slots.len() {
            let Some(rec) = self.slots[l].inflight else {
                continue;
            };
            if rec.deadline > now {
                continue;
            }
            let retries = rec.retries + 1;
            if let Some(max) = self.cfg.max_retries {
                if retries > max {
                    return Err(WorkerError::RetriesExhausted {
                        idx: self.wire_idx[l],
                        retries: rec.retries,
                    });
                }
            }
            self.timer_gen += 1;
            let slot = self.slots[l].inflight.as_mut().unwrap();
            slot.retries = retries;
            slot.deadline = now + self.cfg.timeout_ns;
            slot.gen = self.timer_gen;
            out.push(self.build_packet(l, rec.off, rec.ver));
        }
        Ok(out)
    }

    /// Aggregate divided by the scaling factor, truncated to the logical
    /// (unpadded) update length.
    pub fn finalize(&self, f: f64) -> Result<Vec<f64>, WorkerError> {
        if !self.done() {
            return Err(WorkerError::NotComplete);
        }
        Ok(self.a[..self.raw_len].iter().map(|&v| v as f64 / f).collect())
    }

    pub fn done(&self) -> bool {
        self.closed && self.filled_count == self.chunk_filled.len()
    }

    /// Chunks of the aggregate filled so far, in elements.
    pub fn filled_elements(&self) -> usize {
        self.filled_count * self.cfg.k
    }

    /// Raw assembled aggregate (padded length).
    pub fn aggregate(&self) -> &[i32] {
        &self.a
    }

    pub fn stream_len(&self) -> usize {
        self.u.len()
    }

    pub fn in_flight(&self) -> usize {
        self.slots.iter().filter(|s| s.inflight.is_some()).count()
    }

    /// Offset currently in flight on local slot `l`, if any.
    pub fn slot_inflight_off(&self, l: usize) -> Option<u64> {
        self.slots.get(l).and_then(|s| s.inflight.map(|r| r.off))
    }

    /// Armed timer for local slot `l`: (deadline, generation).
    pub fn slot_timer(&self, l: usize) -> Option<(u64, u64)> {
        self.slots
            .get(l)
            .and_then(|s| s.inflight.map(|r| (r.deadline, r.gen)))
    }

    /// Offset in flight on the slot carrying wire index `wire`, if any.
    pub fn inflight_off_for(&self, wire: u16) -> Option<u64> {
        self.local_slot(wire).and_then(|l| self.slot_inflight_off(l))
    }

    /// Armed timer (deadline, generation) for wire index `wire`, if any.
    pub fn timer_for(&self, wire: u16) -> Option<(u64, u64)> {
        self.local_slot(wire).and_then(|l| self.slot_timer(l))
    }

    pub fn result_stats(&self) -> ResultStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode_packet;

    fn cfg(wid: u16, n: usize, s: usize, k: usize) -> WorkerConfig {
        WorkerConfig::new(wid, n, s, k)
    }

    fn result_for(p: &AggregationPacket, vector: Vec<i32>) -> AggregationPacket {
        AggregationPacket {
            vector,
            ..p.clone()
        }
    }

    #[test]
    fn initial_window_fills_all_slots() {
        let update: Vec<i32> = (0..1024).collect();
        let (st, packets) = WorkerState::start_round(cfg(0, 2, 4, 32), &update, 0).unwrap();
        assert_eq!(packets.len(), 4);
        for (i, p) in packets.iter().enumerate() {
            assert_eq!(p.idx, i as u16);
            assert_eq!(p.ver, 0);
            assert_eq!(p.off as usize, 32 * i);
            assert_eq!(p.vector, update[32 * i..32 * (i + 1)].to_vec());
        }
        assert_eq!(st.in_flight(), 4);
    }

    #[test]
    fn initial_window_smaller_than_pool() {
        let update = vec![1; 64];
        let (st, packets) = WorkerState::start_round(cfg(0, 2, 4, 32), &update, 0).unwrap();
        assert_eq!(packets.len(), 2);
        assert_eq!(packets[0].idx, 0);
        assert_eq!(packets[1].idx, 1);
        assert_eq!(st.in_flight(), 2);
    }

    #[test]
    fn empty_update_rejected() {
        assert_eq!(
            WorkerState::start_round(cfg(0, 2, 4, 32), &[], 0).err(),
            Some(WorkerError::EmptyUpdate)
        );
    }

    #[test]
    fn result_advances_slot_by_window_stride() {
        let update: Vec<i32> = (0..128).collect();
        let (mut st, packets) = WorkerState::start_round(cfg(0, 2, 2, 32), &update, 0).unwrap();
        let next = st.on_result(&result_for(&packets[0], vec![7; 32]), 10);
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].idx, 0);
        assert_eq!(next[0].off, 64);
        assert_eq!(next[0].ver, 1);
        assert_eq!(next[0].vector, update[64..96].to_vec());
    }

    #[test]
    fn final_chunk_emits_nothing() {
        let update = vec![3; 64];
        let (mut st, packets) = WorkerState::start_round(cfg(0, 2, 2, 32), &update, 0).unwrap();
        assert!(st.on_result(&result_for(&packets[0], vec![6; 32]), 5).is_empty());
        assert!(st.on_result(&result_for(&packets[1], vec![6; 32]), 6).is_empty());
        assert!(st.done());
    }

    #[test]
    fn duplicate_result_ignored() {
        let update = vec![3; 128];
        let (mut st, packets) = WorkerState::start_round(cfg(0, 2, 2, 32), &update, 0).unwrap();
        let res = result_for(&packets[0], vec![6; 32]);
        let first = st.on_result(&res, 5);
        assert_eq!(first.len(), 1);
        let snapshot = st.aggregate().to_vec();
        let again = st.on_result(&res, 6);
        assert!(again.is_empty());
        assert_eq!(st.aggregate(), snapshot.as_slice());
        assert_eq!(st.result_stats().stale, 1);
    }

    #[test]
    fn unknown_slot_counted() {
        let update = vec![1; 64];
        let (mut st, _) = WorkerState::start_round(cfg(0, 2, 2, 32), &update, 0).unwrap();
        let bogus = AggregationPacket {
            wid: 0,
            ver: 0,
            idx: 9,
            off: 0,
            vector: vec![0; 32],
        };
        assert!(st.on_result(&bogus, 1).is_empty());
        assert_eq!(st.result_stats().unknown, 1);
    }

    #[test]
    fn timeout_reemits_identical_bytes() {
        let update: Vec<i32> = (0..64).map(|i| i * 31).collect();
        let (mut st, packets) = WorkerState::start_round(cfg(1, 2, 2, 32), &update, 0).unwrap();
        assert!(st.on_timeout(DEFAULT_TIMEOUT_NS - 1).unwrap().is_empty());
        let re = st.on_timeout(DEFAULT_TIMEOUT_NS).unwrap();
        assert_eq!(re.len(), 2);
        for (orig, rex) in packets.iter().zip(&re) {
            assert_eq!(orig, rex);
            assert_eq!(
                encode_packet(orig, 32).unwrap(),
                encode_packet(rex, 32).unwrap()
            );
        }
    }

    #[test]
    fn single_overdue_slot_retransmits_alone() {
        let update = vec![5; 128];
        let (mut st, packets) = WorkerState::start_round(cfg(0, 2, 2, 32), &update, 0).unwrap();
        // Slot 0 gets its result just before the deadline and re-arms; slot 1
        // stays armed from t=0.
        let t = DEFAULT_TIMEOUT_NS - 1;
        st.on_result(&result_for(&packets[0], vec![10; 32]), t);
        let re = st.on_timeout(DEFAULT_TIMEOUT_NS).unwrap();
        assert_eq!(re.len(), 1);
        assert_eq!(re[0], packets[1]);
    }

    #[test]
    fn retries_exhausted_surfaces() {
        let update = vec![5; 64];
        let mut c = cfg(0, 2, 2, 32);
        c.max_retries = Some(2);
        let (mut st, _) = WorkerState::start_round(c, &update, 0).unwrap();
        assert_eq!(st.on_timeout(DEFAULT_TIMEOUT_NS).unwrap().len(), 2);
        assert_eq!(st.on_timeout(2 * DEFAULT_TIMEOUT_NS).unwrap().len(), 2);
        assert!(matches!(
            st.on_timeout(3 * DEFAULT_TIMEOUT_NS),
            Err(WorkerError::RetriesExhausted { .. })
        ));
    }

    #[test]
    fn window_never_exceeds_pool_size() {
        let update: Vec<i32> = (0..512).collect();
        let (mut st, mut pending) = WorkerState::start_round(cfg(0, 2, 4, 32), &update, 0).unwrap();
        let mut t = 0;
        while let Some(p) = pending.pop() {
            assert!(st.in_flight() <= 4);
            t += 1;
            let out = st.on_result(&result_for(&p, vec![0; 32]), t);
            pending.extend(out);
            assert!(st.in_flight() <= 4);
        }
        assert!(st.done());
    }

    #[test]
    fn finalize_divides_and_trims_padding() {
        let (mut st, packets) = WorkerState::start_round(cfg(0, 1, 1, 1), &[579], 0).unwrap();
        st.on_result(&result_for(&packets[0], vec![579]), 1);
        assert_eq!(st.finalize(100.0).unwrap(), vec![5.79]);

        let (mut st, packets) = WorkerState::start_round(cfg(0, 1, 1, 1), &[58], 0).unwrap();
        st.on_result(&result_for(&packets[0], vec![58]), 1);
        assert_eq!(st.finalize(10.0).unwrap(), vec![5.8]);

        // 3 real elements, chunk padding to 4: result keeps logical length.
        let (mut st, packets) = WorkerState::start_round(cfg(0, 1, 1, 4), &[0, 0, 0], 0).unwrap();
        assert_eq!(packets[0].vector, vec![0, 0, 0, 0]);
        st.on_result(&result_for(&packets[0], vec![0; 4]), 1);
        assert_eq!(st.finalize(3.0).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finalize_requires_completion() {
        let (st, _) = WorkerState::start_round(cfg(0, 2, 2, 32), &[1; 64], 0).unwrap();
        assert_eq!(st.finalize(1.0).err(), Some(WorkerError::NotComplete));
    }

    #[test]
    fn appended_stream_continues_slot_phases() {
        // Two tensors of 96 and 160 elements through s=4, k=32: exactly
        // (96+160)/32 = 8 packets, slots never reset between tensors.
        let mut st = WorkerState::new(cfg(0, 1, 4, 32)).unwrap();
        let t1 = vec![1; 96];
        let t2 = vec![2; 160];
        let mut sent = Vec::new();
        let mut pending: Vec<AggregationPacket> = st.append(&t1, 0).unwrap();
        sent.extend(pending.iter().cloned());
        pending.extend(st.append(&t2, 0).unwrap());
        sent.extend(pending[sent.len()..].iter().cloned());
        st.close();
        let mut t = 0;
        while let Some(p) = pending.pop() {
            t += 1;
            let out = st.on_result(&result_for(&p, p.vector.clone()), t);
            sent.extend(out.iter().cloned());
            pending.extend(out);
        }
        assert!(st.done());
        assert_eq!(sent.len(), 8);
        // Slot 0 carried offsets 0 then 128 (k*s stride across the tensor
        // boundary), with the version flipped.
        let slot0: Vec<_> = sent.iter().filter(|p| p.idx == 0).collect();
        assert_eq!(slot0.len(), 2);
        assert_eq!((slot0[0].off, slot0[0].ver), (0, 0));
        assert_eq!((slot0[1].off, slot0[1].ver), (128, 1));
    }

    #[test]
    fn sharded_slot_map_translates_indices() {
        let c = cfg(0, 1, 2, 4);
        let mut st = WorkerState::with_slot_map(c, vec![1, 3]).unwrap();
        let packets = st.append(&[9; 16], 0).unwrap();
        st.close();
        assert_eq!(packets.len(), 2);
        assert_eq!(packets[0].idx, 1);
        assert_eq!(packets[0].off, 0);
        assert_eq!(packets[1].idx, 3);
        assert_eq!(packets[1].off, 4);
        // Result for wire slot 3 maps back to local slot 1.
        let mut st2 = st.clone();
        let out = st2.on_result(&result_for(&packets[1], vec![9; 4]), 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].idx, 3);
        assert_eq!(out[0].off, 12);
    }
}
