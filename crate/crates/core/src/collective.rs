//! Synchronous all-reduce over a stream of tensors.
//!
//! Tensors submitted in the same order on every worker are treated as one
//! continuous element stream: slot state is never reset between tensors, so
//! back-to-back reductions keep the pipeline full. A tensor may be split
//! across `c` shards — contiguous element regions paired with disjoint slot
//! sets (`idx mod c == shard`) — each driven by an independent protocol
//! engine.
//!
//! Before data flows, workers agree on the run parameters with a one-round
//! join handshake; the join carries a digest of the ordered tensor ids and
//! lengths, so a worker submitting tensors in a different order is rejected
//! instead of silently corrupting sums ([`CollectiveError::OrderMismatch`]).

use crate::bench::RunMetrics;
use crate::netsim::{self, ChannelConfig, EngineSetup, SimConfig, SimError, SimTrace};
use crate::quant::{self, QuantError};
use crate::switch::SwitchConfig;
use crate::wire::{self, WireError};
use crate::worker::{WorkerConfig, WorkerError};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("tensor order mismatch on worker {worker} at position {position}")]
    OrderMismatch { worker: usize, position: usize },
    #[error("workers disagree on the aggregate (protocol bug)")]
    ResultMismatch,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
}

/// One tensor in a job; `id` must be stable and identical across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub id: u64,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(id: u64, data: Vec<f64>) -> Self {
        Self { id, data }
    }
}

/// Ordered tensors one worker wants reduced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorJob {
    pub tensors: Vec<Tensor>,
}

impl TensorJob {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn single(data: Vec<f64>) -> Self {
        Self {
            tensors: vec![Tensor::new(0, data)],
        }
    }

    /// Order-sensitive digest of (id, len) pairs, used by the join handshake
    /// to detect submission-order mismatches.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a
        for t in &self.tensors {
            for b in t
                .id
                .to_be_bytes()
                .into_iter()
                .chain((t.data.len() as u64).to_be_bytes())
            {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    /// Sum divided by the worker count on the host side.
    Average,
}

/// Contiguous element regions assigned to each shard of a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub shard_count: usize,
    pub k: usize,
    pub regions: Vec<Range<usize>>,
}

impl ShardPlan {
    /// Wire slot indices owned by `shard` out of a pool of `s`.
    pub fn slot_indices(shard: usize, c: usize, s: usize) -> Vec<u16> {
        (0..s as u16).filter(|i| (*i as usize) % c == shard).collect()
    }
}

/// Split `len` elements into `c` contiguous regions on chunk boundaries,
/// sizes within one chunk of each other; trailing shards may be empty when
/// there are fewer chunks than shards.
pub fn shard_tensor(len: usize, c: usize, k: usize, s: usize) -> Result<ShardPlan, CollectiveError> {
    if c == 0 {
        return Err(CollectiveError::InvalidConfig("zero shards".into()));
    }
    if k == 0 {
        return Err(CollectiveError::InvalidConfig("zero chunk size".into()));
    }
    if c > s {
        return Err(CollectiveError::InvalidConfig(format!(
            "{c} shards cannot share {s} slots"
        )));
    }
    let chunks = len.div_ceil(k);
    let base = chunks / c;
    let rem = chunks % c;
    let mut regions = Vec::with_capacity(c);
    let mut chunk_cursor = 0usize;
    for j in 0..c {
        let take = base + usize::from(j < rem);
        let start = (chunk_cursor * k).min(len);
        let end = ((chunk_cursor + take) * k).min(len);
        regions.push(start..end);
        chunk_cursor += take;
    }
    Ok(ShardPlan {
        shard_count: c,
        k,
        regions,
    })
}

/// Smallest power-of-two pool size whose aggregate frame volume covers the
/// bandwidth-delay product: `next_pow2(ceil(bdp / frame))`.
pub fn tune_pool_size(bdp_bytes: u64, frame_bytes: u64) -> Result<usize, CollectiveError> {
    if bdp_bytes == 0 || frame_bytes == 0 {
        return Err(CollectiveError::InvalidConfig(
            "bdp and frame size must be positive".into(),
        ));
    }
    let needed = bdp_bytes.div_ceil(frame_bytes).max(1) as usize;
    Ok(needed.next_power_of_two())
}

/// In-process engine: all workers run over the deterministic simulator.
#[derive(Debug, Clone)]
pub struct SimEngine {
    pub switch: SwitchConfig,
    pub channel: ChannelConfig,
    pub timeout_ns: u64,
    pub seed: u64,
    /// Parallel shards per worker.
    pub shards: usize,
}

impl SimEngine {
    pub fn new(switch: SwitchConfig, seed: u64) -> Self {
        Self {
            switch,
            channel: ChannelConfig::default(),
            timeout_ns: crate::worker::DEFAULT_TIMEOUT_NS,
            seed,
            shards: 1,
        }
    }

    pub fn with_shards(mut self, c: usize) -> Self {
        self.shards = c;
        self
    }
}

/// Result of an all-reduce: the reduced tensors plus run telemetry.
#[derive(Debug, Clone)]
pub struct AllReduceOutcome {
    pub tensors: Vec<Tensor>,
    pub metrics: RunMetrics,
    pub trace: SimTrace,
}

/// Reduce every tensor of the job across all workers. `jobs[w]` is worker
/// `w`'s submission; ids, lengths, and order must agree everywhere.
pub fn all_reduce(
    jobs: &[TensorJob],
    f: f64,
    engine: &SimEngine,
    mode: ReduceMode,
) -> Result<AllReduceOutcome, CollectiveError> {
    let n = engine.switch.n;
    let s = engine.switch.s;
    let k = engine.switch.k;
    let c = engine.shards;
    if jobs.len() != n {
        return Err(CollectiveError::InvalidConfig(format!(
            "{} jobs for {n} workers",
            jobs.len()
        )));
    }
    if jobs[0].tensors.is_empty() {
        return Err(CollectiveError::InvalidConfig("empty job".into()));
    }
    if !(f > 0.0 && f.is_finite()) {
        return Err(CollectiveError::Quant(QuantError::InvalidScale(f)));
    }
    // Submission-order agreement: same ids and lengths at every position.
    let reference = &jobs[0];
    for (w, job) in jobs.iter().enumerate().skip(1) {
        if job.tensors.len() != reference.tensors.len() {
            return Err(CollectiveError::OrderMismatch {
                worker: w,
                position: job.tensors.len().min(reference.tensors.len()),
            });
        }
        for (pos, (a, b)) in reference.tensors.iter().zip(&job.tensors).enumerate() {
            if a.id != b.id || a.data.len() != b.data.len() {
                return Err(CollectiveError::OrderMismatch {
                    worker: w,
                    position: pos,
                });
            }
        }
    }

    // Shard plans per tensor, plus each (tensor, shard) region's offset
    // within the shard's element stream (identical on every worker).
    let plans: Vec<ShardPlan> = reference
        .tensors
        .iter()
        .map(|t| shard_tensor(t.data.len(), c, k, s))
        .collect::<Result<_, _>>()?;
    let mut substream_start = vec![vec![0usize; reference.tensors.len()]; c];
    let mut stream_cursor = vec![0usize; c];
    for (t, plan) in plans.iter().enumerate() {
        for j in 0..c {
            substream_start[j][t] = stream_cursor[j];
            let padded = plan.regions[j].len().div_ceil(k) * k;
            stream_cursor[j] += padded;
        }
    }

    let mut engines = Vec::with_capacity(n);
    for (wid, job) in jobs.iter().enumerate() {
        let mut per_worker = Vec::with_capacity(c);
        for j in 0..c {
            let slots = ShardPlan::slot_indices(j, c, s);
            let mut stream = Vec::with_capacity(stream_cursor[j]);
            for (t, tensor) in job.tensors.iter().enumerate() {
                let region = plans[t].regions[j].clone();
                let q = quant::quantize(&tensor.data[region], f)?;
                stream.extend_from_slice(&q);
                let pad = stream.len().next_multiple_of(k) - stream.len();
                stream.extend(std::iter::repeat(0).take(pad));
            }
            let mut cfg = WorkerConfig::new(wid as u16, n, slots.len().max(1), k);
            cfg.timeout_ns = engine.timeout_ns;
            let wire_idx = if slots.is_empty() {
                return Err(CollectiveError::InvalidConfig(format!(
                    "shard {j} owns no slots"
                )));
            } else {
                slots
            };
            cfg.s = wire_idx.len();
            per_worker.push(EngineSetup {
                cfg,
                wire_idx,
                stream,
            });
        }
        engines.push(per_worker);
    }

    let total_elements: u64 = reference.total_elements() as u64;
    let sim_cfg = {
        let mut cfg = SimConfig::new(engine.switch, engine.channel, engine.seed);
        cfg.timeout_ns = engine.timeout_ns;
        cfg
    };
    let raw = netsim::run_engines(&sim_cfg, engines, None, total_elements)?;

    // Assemble per-tensor results from shard aggregates and check every
    // worker decoded the same sums.
    let divisor = match mode {
        ReduceMode::Sum => f,
        ReduceMode::Average => f * n as f64,
    };
    let mut tensors = Vec::with_capacity(reference.tensors.len());
    for (t, tensor) in reference.tensors.iter().enumerate() {
        let mut out = vec![0.0f64; tensor.data.len()];
        for j in 0..c {
            let region = plans[t].regions[j].clone();
            if region.is_empty() {
                continue;
            }
            let start = substream_start[j][t];
            let agg0 = &raw.nodes[0][j].aggregate()[start..start + region.len()];
            for w in 1..n {
                let agg_w = &raw.nodes[w][j].aggregate()[start..start + region.len()];
                if agg_w != agg0 {
                    return Err(CollectiveError::ResultMismatch);
                }
            }
            for (o, &v) in out[region].iter_mut().zip(agg0) {
                *o = v as f64 / divisor;
            }
        }
        tensors.push(Tensor::new(tensor.id, out));
    }
    Ok(AllReduceOutcome {
        tensors,
        metrics: raw.metrics,
        trace: raw.trace,
    })
}

// ---------------------------------------------------------------------------
// Control plane frames
//
// Datagram deployments agree on run parameters before data flows. Control
// frames share the data-frame conventions (big-endian fields, trailing
// CRC-32 over everything before it) under a distinct magic:
//
//   Join       5A 43 | 01 | wid:2 | n:2 | s:2 | k:2 | f:8 | digest:8 | crc:4
//   JoinAck    5A 43 | 02 | ok:1 | crc:4
//   TensorBegin 5A 43 | 03 | wid:2 | seq:4 | id:8 | len:8 | crc:4
//   TensorAck  5A 43 | 04 | seq:4 | ok:1 | crc:4
// ---------------------------------------------------------------------------

/// First two bytes of every control frame.
pub const CONTROL_MAGIC: [u8; 2] = [0x5A, 0x43];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMsg {
    /// Worker announces itself and the run parameters it expects.
    Join {
        wid: u16,
        n: u16,
        s: u16,
        k: u16,
        f: f64,
        digest: u64,
    },
    /// Switch reply once the quorum is present (`ok`) or on config
    /// disagreement (`!ok`).
    JoinAck { ok: bool },
    /// Worker announces the tensor it will stream next.
    TensorBegin { wid: u16, seq: u32, id: u64, len: u64 },
    /// Switch confirms (or rejects) a tensor announcement.
    TensorAck { seq: u32, ok: bool },
}

impl ControlMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(31);
        buf.extend_from_slice(&CONTROL_MAGIC);
        match *self {
            ControlMsg::Join {
                wid,
                n,
                s,
                k,
                f,
                digest,
            } => {
                buf.push(1);
                buf.extend_from_slice(&wid.to_be_bytes());
                buf.extend_from_slice(&n.to_be_bytes());
                buf.extend_from_slice(&s.to_be_bytes());
                buf.extend_from_slice(&k.to_be_bytes());
                buf.extend_from_slice(&f.to_bits().to_be_bytes());
                buf.extend_from_slice(&digest.to_be_bytes());
            }
            ControlMsg::JoinAck { ok } => {
                buf.push(2);
                buf.push(ok as u8);
            }
            ControlMsg::TensorBegin { wid, seq, id, len } => {
                buf.push(3);
                buf.extend_from_slice(&wid.to_be_bytes());
                buf.extend_from_slice(&seq.to_be_bytes());
                buf.extend_from_slice(&id.to_be_bytes());
                buf.extend_from_slice(&len.to_be_bytes());
            }
            ControlMsg::TensorAck { seq, ok } => {
                buf.push(4);
                buf.extend_from_slice(&seq.to_be_bytes());
                buf.push(ok as u8);
            }
        }
        let crc = wire::compute_checksum(&buf);
        buf.extend_from_slice(&crc.to_be_bytes());
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < 8 {
            return Err(WireError::BadLength {
                got: buf.len(),
                expected: 8,
            });
        }
        if buf[0..2] != CONTROL_MAGIC {
            return Err(WireError::BadMagic);
        }
        let body = &buf[..buf.len() - 4];
        let crc = u32::from_be_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if wire::compute_checksum(body) != crc {
            return Err(WireError::BadChecksum);
        }
        let expect_len = |want: usize| -> Result<(), WireError> {
            if buf.len() != want {
                Err(WireError::BadLength {
                    got: buf.len(),
                    expected: want,
                })
            } else {
                Ok(())
            }
        };
        match buf[2] {
            1 => {
                expect_len(31)?;
                Ok(ControlMsg::Join {
                    wid: u16::from_be_bytes(buf[3..5].try_into().unwrap()),
                    n: u16::from_be_bytes(buf[5..7].try_into().unwrap()),
                    s: u16::from_be_bytes(buf[7..9].try_into().unwrap()),
                    k: u16::from_be_bytes(buf[9..11].try_into().unwrap()),
                    f: f64::from_bits(u64::from_be_bytes(buf[11..19].try_into().unwrap())),
                    digest: u64::from_be_bytes(buf[19..27].try_into().unwrap()),
                })
            }
            2 => {
                expect_len(8)?;
                Ok(ControlMsg::JoinAck { ok: buf[3] != 0 })
            }
            3 => {
                expect_len(29)?;
                Ok(ControlMsg::TensorBegin {
                    wid: u16::from_be_bytes(buf[3..5].try_into().unwrap()),
                    seq: u32::from_be_bytes(buf[5..9].try_into().unwrap()),
                    id: u64::from_be_bytes(buf[9..17].try_into().unwrap()),
                    len: u64::from_be_bytes(buf[17..25].try_into().unwrap()),
                })
            }
            4 => {
                expect_len(12)?;
                Ok(ControlMsg::TensorAck {
                    seq: u32::from_be_bytes(buf[3..7].try_into().unwrap()),
                    ok: buf[7] != 0,
                })
            }
            other => Err(WireError::InvalidPacket {
                got: other as usize,
                expected: 4,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{choose_scaling_factor, quantize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn engine(n: usize, s: usize, k: usize, seed: u64) -> SimEngine {
        let mut e = SimEngine::new(SwitchConfig::new(n, s, k), seed);
        e.channel = ChannelConfig::lossless(5_000);
        e
    }

    fn oracle_sum(jobs: &[TensorJob], t: usize, f: f64) -> Vec<i64> {
        let len = jobs[0].tensors[t].data.len();
        let mut acc = vec![0i64; len];
        for job in jobs {
            let q = quantize(&job.tensors[t].data, f).unwrap();
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v as i64;
            }
        }
        acc
    }

    #[test]
    fn shard_plan_even_split() {
        let plan = shard_tensor(1024, 2, 32, 8).unwrap();
        assert_eq!(plan.regions, vec![0..512, 512..1024]);
    }

    #[test]
    fn shard_plan_with_empty_tail() {
        let plan = shard_tensor(96, 4, 32, 8).unwrap();
        assert_eq!(plan.regions, vec![0..32, 32..64, 64..96, 96..96]);
        assert!(plan.regions[3].is_empty());
    }

    #[test]
    fn shard_plan_regions_partition_any_length() {
        for len in [1usize, 31, 32, 33, 95, 96, 97, 1000, 4096] {
            for c in [1usize, 2, 3, 4] {
                let plan = shard_tensor(len, c, 32, 8).unwrap();
                let mut cursor = 0;
                for r in &plan.regions {
                    assert_eq!(r.start, cursor, "len={len} c={c}");
                    assert!(r.start % 32 == 0 || r.is_empty());
                    cursor = r.end;
                }
                assert_eq!(cursor, len, "regions must cover len={len} c={c}");
                // Sizes within one chunk of each other.
                let sizes: Vec<usize> = plan.regions.iter().map(|r| r.len()).collect();
                let max = sizes.iter().max().unwrap();
                let min_nonzero = sizes.iter().filter(|&&z| z > 0).min().unwrap_or(max);
                assert!(max - min_nonzero <= 32);
            }
        }
    }

    #[test]
    fn slot_classes_are_disjoint() {
        let s = 16;
        let c = 4;
        let mut all: Vec<u16> = Vec::new();
        for j in 0..c {
            all.extend(ShardPlan::slot_indices(j, c, s));
        }
        all.sort_unstable();
        assert_eq!(all, (0..s as u16).collect::<Vec<_>>());
    }

    #[test]
    fn pool_size_formula() {
        assert_eq!(tune_pool_size(12_000, 180).unwrap(), 128);
        assert_eq!(tune_pool_size(100, 180).unwrap(), 1);
        assert_eq!(tune_pool_size(180, 180).unwrap(), 1);
        assert_eq!(tune_pool_size(181, 180).unwrap(), 2);
        assert!(tune_pool_size(0, 180).is_err());
        for bdp in [1u64, 179, 180, 12_000, 65_536, 1_000_000] {
            let s = tune_pool_size(bdp, 180).unwrap();
            assert!(s.is_power_of_two());
            assert!(s as u64 * 180 >= bdp, "s*b must cover the bdp");
        }
    }

    #[test]
    fn identical_inputs_double_in_sum_mode() {
        let jobs: Vec<TensorJob> = (0..2)
            .map(|_| TensorJob::single(vec![1.0; 64]))
            .collect();
        let out = all_reduce(&jobs, 100.0, &engine(2, 4, 32, 1), ReduceMode::Sum).unwrap();
        assert_eq!(out.tensors.len(), 1);
        assert_eq!(out.tensors[0].data, vec![2.0; 64]);
    }

    #[test]
    fn average_mode_tracks_float_mean() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jobs: Vec<TensorJob> = (0..n)
            .map(|_| {
                TensorJob::single((0..100).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        let f = choose_scaling_factor(n, 1.0).unwrap();
        let out = all_reduce(&jobs, f, &engine(n, 4, 32, 2), ReduceMode::Average).unwrap();
        let bound = quant::aggregation_error_bound(n, f) / n as f64;
        for j in 0..100 {
            let mean: f64 = jobs.iter().map(|job| job.tensors[0].data[j]).sum::<f64>() / n as f64;
            assert!((out.tensors[0].data[j] - mean).abs() <= bound);
        }
    }

    #[test]
    fn back_to_back_tensors_stream_without_slot_reset() {
        let n = 2;
        let jobs: Vec<TensorJob> = (0..n)
            .map(|w| {
                TensorJob::new(vec![
                    Tensor::new(10, vec![w as f64 + 1.0; 96]),
                    Tensor::new(11, vec![0.5; 160]),
                ])
            })
            .collect();
        let out = all_reduce(&jobs, 10.0, &engine(n, 4, 32, 3), ReduceMode::Sum).unwrap();
        // (96 + 160) / 32 = 8 data packets per worker, none extra.
        assert_eq!(out.metrics.sends, (n * 8) as u64);
        assert_eq!(out.tensors[0].data, vec![3.0; 96]);
        assert_eq!(out.tensors[1].data, vec![1.0; 160]);
    }

    #[test]
    fn streaming_matches_concatenation() {
        let n = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t1: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let t2: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..160).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let f = 1000.0;

        let streamed_jobs: Vec<TensorJob> = (0..n)
            .map(|w| {
                TensorJob::new(vec![
                    Tensor::new(0, t1[w].clone()),
                    Tensor::new(1, t2[w].clone()),
                ])
            })
            .collect();
        let streamed =
            all_reduce(&streamed_jobs, f, &engine(n, 4, 32, 4), ReduceMode::Sum).unwrap();

        let concat_jobs: Vec<TensorJob> = (0..n)
            .map(|w| {
                let mut data = t1[w].clone();
                data.extend_from_slice(&t2[w]);
                TensorJob::single(data)
            })
            .collect();
        let concat = all_reduce(&concat_jobs, f, &engine(n, 4, 32, 4), ReduceMode::Sum).unwrap();

        let mut streamed_flat = streamed.tensors[0].data.clone();
        streamed_flat.extend_from_slice(&streamed.tensors[1].data);
        assert_eq!(streamed_flat, concat.tensors[0].data);
    }

    #[test]
    fn shard_counts_do_not_change_results() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let jobs: Vec<TensorJob> = (0..n)
            .map(|_| {
                TensorJob::new(vec![
                    Tensor::new(0, (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect()),
                    Tensor::new(1, (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect()),
                ])
            })
            .collect();
        let f = 10_000.0;
        let baseline = all_reduce(&jobs, f, &engine(n, 8, 32, 7), ReduceMode::Sum).unwrap();
        // Cross-check element sums against a direct integer oracle.
        for t in 0..2 {
            let oracle = oracle_sum(&jobs, t, f);
            let got: Vec<i64> = baseline.tensors[t]
                .data
                .iter()
                .map(|v| (v * f).round() as i64)
                .collect();
            assert_eq!(got, oracle);
        }
        for c in [2usize, 4] {
            let sharded = all_reduce(
                &jobs,
                f,
                &engine(n, 8, 32, 7).with_shards(c),
                ReduceMode::Sum,
            )
            .unwrap();
            for t in 0..2 {
                assert_eq!(sharded.tensors[t].data, baseline.tensors[t].data, "c={c}");
            }
        }
    }

    #[test]
    fn order_mismatch_detected() {
        let a = TensorJob::new(vec![
            Tensor::new(1, vec![1.0; 32]),
            Tensor::new(2, vec![1.0; 32]),
        ]);
        let b = TensorJob::new(vec![
            Tensor::new(2, vec![1.0; 32]),
            Tensor::new(1, vec![1.0; 32]),
        ]);
        let err = all_reduce(&[a.clone(), b], 10.0, &engine(2, 4, 32, 1), ReduceMode::Sum)
            .unwrap_err();
        match err {
            CollectiveError::OrderMismatch { worker: 1, position: 0 } => {}
            other => panic!("expected order mismatch, got {other:?}"),
        }
        // Digests differ, which is what the join handshake compares.
        let b2 = TensorJob::new(vec![
            Tensor::new(2, vec![1.0; 32]),
            Tensor::new(1, vec![1.0; 32]),
        ]);
        assert_ne!(a.digest(), b2.digest());
    }

    #[test]
    fn control_frames_round_trip() {
        let msgs = [
            ControlMsg::Join {
                wid: 3,
                n: 8,
                s: 128,
                k: 32,
                f: 123456.789,
                digest: 0xDEADBEEF12345678,
            },
            ControlMsg::JoinAck { ok: true },
            ControlMsg::JoinAck { ok: false },
            ControlMsg::TensorBegin {
                wid: 1,
                seq: 42,
                id: 7,
                len: 1 << 20,
            },
            ControlMsg::TensorAck { seq: 42, ok: true },
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(ControlMsg::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn corrupt_control_frame_rejected() {
        let mut bytes = ControlMsg::JoinAck { ok: true }.encode();
        bytes[3] ^= 1;
        assert!(ControlMsg::decode(&bytes).is_err());
        assert!(ControlMsg::decode(&bytes[..4]).is_err());
        let mut wrong_magic = ControlMsg::JoinAck { ok: true }.encode();
        wrong_magic[0] = 0;
        assert_eq!(
            ControlMsg::decode(&wrong_magic).unwrap_err(),
            WireError::BadMagic
        );
    }
}
