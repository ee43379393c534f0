//! Switch-side slot-pool state machine.
//!
//! The dataplane memory is `pool[2][s]` integer vector slots, `count[2][s]`
//! contribution counters, and `seen[2][s][n]` per-worker bitmaps. Version 0
//! and version 1 of a slot alternate between "being aggregated" and "shadow
//! copy of the previous result": a completed slot is left intact so a worker
//! whose result packet was lost can fetch it again, and it is only
//! overwritten once every worker has moved on to the other version.
//!
//! [`SwitchState::handle_packet`] is the loss-tolerant per-packet step;
//! [`SwitchState::handle_packet_lossless`] is the plain counter variant that
//! assumes a loss- and duplicate-free network, kept for differential testing.

use crate::wire::AggregationPacket;
use thiserror::Error;

/// Worker-count ceiling (one pipeline's port budget; also keeps `seen`
/// bitmaps in a single 64-bit word per slot version).
pub const MAX_WORKERS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("slot index {idx} out of range (pool size {s})")]
    SlotOutOfRange { idx: u16, s: usize },
    #[error("worker id {wid} out of range (worker count {n})")]
    WorkerIdOutOfRange { wid: u16, n: usize },
    #[error("vector length {got} does not match configured k {k}")]
    VectorLengthMismatch { got: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchConfig {
    /// Worker count.
    pub n: usize,
    /// Pool size (slots per version).
    pub s: usize,
    /// Elements per packet.
    pub k: usize,
}

impl SwitchConfig {
    pub fn new(n: usize, s: usize, k: usize) -> Self {
        Self { n, s, k }
    }

    pub fn validate(&self) -> Result<(), SwitchError> {
        if self.n == 0 {
            return Err(SwitchError::InvalidConfig("worker count is zero".into()));
        }
        if self.n > MAX_WORKERS {
            return Err(SwitchError::InvalidConfig(format!(
                "worker count {} exceeds {MAX_WORKERS}",
                self.n
            )));
        }
        if self.s == 0 {
            return Err(SwitchError::InvalidConfig("pool size is zero".into()));
        }
        if self.s > u16::MAX as usize + 1 {
            return Err(SwitchError::InvalidConfig(format!(
                "pool size {} not addressable by a 16-bit slot index",
                self.s
            )));
        }
        if self.k == 0 {
            return Err(SwitchError::InvalidConfig("k is zero".into()));
        }
        Ok(())
    }
}

/// What the switch does with an incoming packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SwitchAction {
    /// Slot completed: send the aggregate to every worker.
    Multicast(AggregationPacket),
    /// Retransmission of an already-completed slot: re-send the retained
    /// aggregate to the asking worker only.
    Unicast(AggregationPacket, u16),
    /// Packet consumed (aggregated or ignored as duplicate); no output.
    Drop,
}

/// Read-only copy of one (version, slot) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotView {
    pub count: u16,
    /// Bit `w` set means worker `w` contributed in the slot's current phase.
    pub seen: u64,
    pub vector: Vec<i32>,
}

#[derive(Debug, Clone)]
pub struct SwitchState {
    cfg: SwitchConfig,
    /// `[2][s][k]` flattened.
    pool: Vec<i32>,
    /// `[2][s]` flattened; stored modulo n.
    count: Vec<u16>,
    /// `[2][s]` flattened worker bitmaps.
    seen: Vec<u64>,
    /// Wrapping additions that actually overflowed; stays zero whenever
    /// inputs respect the quantization overflow bound.
    wrap_events: u64,
}

impl SwitchState {
    pub fn new(cfg: SwitchConfig) -> Result<Self, SwitchError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            pool: vec![0; 2 * cfg.s * cfg.k],
            count: vec![0; 2 * cfg.s],
            seen: vec![0; 2 * cfg.s],
            wrap_events: 0,
        })
    }

    pub fn config(&self) -> &SwitchConfig {
        &self.cfg
    }

    pub fn wrap_events(&self) -> u64 {
        self.wrap_events
    }

    fn cell(&self, ver: u8, idx: u16) -> usize {
        (ver as usize) * self.cfg.s + idx as usize
    }

    fn check_packet(&self, p: &AggregationPacket) -> Result<(), SwitchError> {
        if p.idx as usize >= self.cfg.s {
            return Err(SwitchError::SlotOutOfRange {
                idx: p.idx,
                s: self.cfg.s,
            });
        }
        if p.wid as usize >= self.cfg.n {
            return Err(SwitchError::WorkerIdOutOfRange {
                wid: p.wid,
                n: self.cfg.n,
            });
        }
        if p.vector.len() != self.cfg.k {
            return Err(SwitchError::VectorLengthMismatch {
                got: p.vector.len(),
                k: self.cfg.k,
            });
        }
        Ok(())
    }

    fn add_into(&mut self, cell: usize, vector: &[i32]) {
        let k = self.cfg.k;
        let slot = &mut self.pool[cell * k..(cell + 1) * k];
        for (acc, &v) in slot.iter_mut().zip(vector) {
            let (sum, wrapped) = acc.overflowing_add(v);
            *acc = sum;
            if wrapped {
                self.wrap_events += 1;
            }
        }
    }

    fn slot_vector(&self, cell: usize) -> Vec<i32> {
        let k = self.cfg.k;
        self.pool[cell * k..(cell + 1) * k].to_vec()
    }

    /// True when `wid`'s contribution is already recorded for `(ver, idx)`
    /// in the current phase.
    pub fn has_seen(&self, ver: u8, idx: u16, wid: u16) -> bool {
        let cell = self.cell(ver & 1, idx);
        self.seen[cell] & (1 << wid) != 0
    }

    /// Loss-free aggregation step: accumulate, and multicast + reset once
    /// all n workers contributed. Uses a single pool; the packet's version
    /// bit is ignored. Only valid when the caller guarantees no loss and no
    /// duplication.
    pub fn handle_packet_lossless(
        &mut self,
        p: &AggregationPacket,
    ) -> Result<SwitchAction, SwitchError> {
        self.check_packet(p)?;
        let cell = self.cell(0, p.idx);
        self.add_into(cell, &p.vector);
        self.count[cell] += 1;
        if self.count[cell] as usize == self.cfg.n {
            let mut out = p.clone();
            out.vector = self.slot_vector(cell);
            let k = self.cfg.k;
            self.pool[cell * k..(cell + 1) * k].fill(0);
            self.count[cell] = 0;
            Ok(SwitchAction::Multicast(out))
        } else {
            Ok(SwitchAction::Drop)
        }
    }

    /// Loss-tolerant aggregation step.
    ///
    /// First contribution of a phase overwrites the slot (which is what
    /// retires the shadow copy), later ones accumulate. A packet whose seen
    /// bit is already set is a retransmission: it is answered with the
    /// retained aggregate if the slot already completed (count wrapped to 0),
    /// and ignored otherwise. Setting the seen bit also clears the worker's
    /// bit in the other version, closing out its previous phase.
    pub fn handle_packet(&mut self, p: &AggregationPacket) -> Result<SwitchAction, SwitchError> {
        self.check_packet(p)?;
        let ver = p.ver & 1;
        let cell = self.cell(ver, p.idx);
        let other = self.cell(ver ^ 1, p.idx);
        let bit = 1u64 << p.wid;

        if self.seen[cell] & bit == 0 {
            self.seen[cell] |= bit;
            self.seen[other] &= !bit;
            let first = self.count[cell] == 0;
            self.count[cell] = (self.count[cell] + 1) % self.cfg.n as u16;
            if first {
                let k = self.cfg.k;
                self.pool[cell * k..(cell + 1) * k].copy_from_slice(&p.vector);
            } else {
                self.add_into(cell, &p.vector);
            }
            if self.count[cell] == 0 {
                let mut out = p.clone();
                out.vector = self.slot_vector(cell);
                Ok(SwitchAction::Multicast(out))
            } else {
                Ok(SwitchAction::Drop)
            }
        } else if self.count[cell] == 0 {
            let mut out = p.clone();
            out.vector = self.slot_vector(cell);
            Ok(SwitchAction::Unicast(out, p.wid))
        } else {
            Ok(SwitchAction::Drop)
        }
    }

    /// Test/monitoring introspection into one (version, slot) cell.
    pub fn slot_view(&self, ver: u8, idx: u16) -> Result<SlotView, SwitchError> {
        if ver > 1 {
            return Err(SwitchError::InvalidConfig(format!(
                "version {ver} is not a single bit"
            )));
        }
        if idx as usize >= self.cfg.s {
            return Err(SwitchError::SlotOutOfRange {
                idx,
                s: self.cfg.s,
            });
        }
        let cell = self.cell(ver, idx);
        Ok(SlotView {
            count: self.count[cell],
            seen: self.seen[cell],
            vector: self.slot_vector(cell),
        })
    }
}
