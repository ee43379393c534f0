//! Benchmark harness: aggregation metrics, communication-cost calculator,
//! loss-inflation and packet-timeline experiments, and a miniature
//! distributed-SGD demo that pushes every gradient exchange through the
//! simulated protocol.

use crate::netsim::{self, ChannelConfig, SimConfig, SimError};
use crate::quant::{self, QuantConfig, QuantError};
use crate::switch::SwitchConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("training diverged at epoch {epoch}: loss rose 5 epochs straight")]
    Divergence { epoch: usize, losses: Vec<f64> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Measurements of one aggregation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    /// Tensor aggregation time: from workers ready (t=0) until the last
    /// worker holds the full aggregate.
    pub tat_ns: u64,
    pub per_worker_tat_ns: Vec<u64>,
    /// Logical tensor elements aggregated.
    pub elements: u64,
    /// Aggregated tensor elements per second: `elements / tat`.
    pub ate_per_sec: f64,
    /// Upstream data packets sent (including retransmissions).
    pub sends: u64,
    /// Upstream sends binned into 10 ms windows of simulated time.
    pub sends_per_10ms: Vec<u64>,
    /// Timeout-driven retransmissions.
    pub retransmissions: u64,
    /// Packets lost on the link (random loss plus scripted faults).
    pub drops: u64,
}

impl RunMetrics {
    pub(crate) fn from_run(
        tat_ns: u64,
        per_worker_tat_ns: Vec<u64>,
        elements: u64,
        sends: u64,
        sends_per_10ms: Vec<u64>,
        retransmissions: u64,
        drops: u64,
    ) -> Self {
        let ate_per_sec = if tat_ns > 0 {
            elements as f64 / (tat_ns as f64 / 1e9)
        } else {
            0.0
        };
        Self {
            tat_ns,
            per_worker_tat_ns,
            elements,
            ate_per_sec,
            sends,
            sends_per_10ms,
            retransmissions,
            drops,
        }
    }
}

/// Configuration shared by the microbenchmark and timeline experiments.
#[derive(Debug, Clone)]
pub struct MicrobenchConfig {
    pub n: usize,
    pub s: usize,
    pub k: usize,
    /// Tensor size in payload bytes (4 bytes per element).
    pub tensor_bytes: u64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub seed: u64,
    pub repeats: usize,
    pub timeout_ns: u64,
    pub latency_ns: u64,
    pub jitter_ns: u64,
}

impl Default for MicrobenchConfig {
    fn default() -> Self {
        Self {
            n: 4,
            s: 8,
            k: 32,
            tensor_bytes: 262_144,
            loss_prob: 0.0,
            dup_prob: 0.0,
            seed: 1,
            repeats: 11,
            timeout_ns: 100_000,
            latency_ns: 5_000,
            jitter_ns: 1_000,
        }
    }
}

impl MicrobenchConfig {
    pub fn elements(&self) -> usize {
        (self.tensor_bytes / 4) as usize
    }

    fn sim_config(&self, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::new(
            SwitchConfig::new(self.n, self.s, self.k),
            ChannelConfig {
                loss_prob: self.loss_prob,
                dup_prob: self.dup_prob,
                latency_ns: self.latency_ns,
                jitter_ns: self.jitter_ns,
            },
            seed,
        );
        cfg.timeout_ns = self.timeout_ns;
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MicrobenchReport {
    pub runs: Vec<RunMetrics>,
    pub median_tat_ns: u64,
    pub median_ate_per_sec: f64,
}

/// Repeatedly aggregate an all-ones tensor, verifying each result is exactly
/// `n` per element, and report per-run metrics plus medians.
pub fn run_microbenchmark(cfg: &MicrobenchConfig) -> Result<MicrobenchReport, BenchError> {
    if cfg.repeats == 0 {
        return Err(BenchError::InvalidConfig("zero repeats".into()));
    }
    let elements = cfg.elements();
    if elements == 0 {
        return Err(BenchError::InvalidConfig("empty tensor".into()));
    }
    // Power-of-two factor so all-ones tensors quantize and divide exactly.
    let quant_cfg = QuantConfig::new(1024.0, cfg.n);
    let updates: Vec<Vec<f64>> = (0..cfg.n).map(|_| vec![1.0; elements]).collect();
    let mut runs = Vec::with_capacity(cfg.repeats);
    for rep in 0..cfg.repeats {
        let sim_cfg = cfg.sim_config(cfg.seed.wrapping_add(rep as u64));
        let out = netsim::run_simulation(&sim_cfg, &updates, &quant_cfg, None)?;
        for (w, r) in out.results.iter().enumerate() {
            if r.iter().any(|&v| v != cfg.n as f64) {
                return Err(BenchError::VerificationFailed(format!(
                    "run {rep}: worker {w} aggregate is not all {}",
                    cfg.n
                )));
            }
        }
        runs.push(out.metrics);
    }
    let mut tats: Vec<u64> = runs.iter().map(|r| r.tat_ns).collect();
    tats.sort_unstable();
    let mut ates: Vec<f64> = runs.iter().map(|r| r.ate_per_sec).collect();
    ates.sort_by(|a, b| a.total_cmp(b));
    Ok(MicrobenchReport {
        median_tat_ns: tats[tats.len() / 2],
        median_ate_per_sec: ates[ates.len() / 2],
        runs,
    })
}

/// Sent-packet counts per 10 ms window for one aggregation.
#[derive(Debug, Clone, Serialize)]
pub struct Timeline {
    pub bins: Vec<u64>,
    pub total_sends: u64,
    pub metrics: RunMetrics,
}

/// Run one aggregation and bin every upstream send into 10 ms windows of
/// simulated time.
pub fn loss_timeline(cfg: &MicrobenchConfig) -> Result<Timeline, BenchError> {
    let elements = cfg.elements();
    if elements == 0 {
        return Err(BenchError::InvalidConfig("empty tensor".into()));
    }
    let quant_cfg = QuantConfig::new(1024.0, cfg.n);
    let updates: Vec<Vec<f64>> = (0..cfg.n).map(|_| vec![1.0; elements]).collect();
    let out = netsim::run_simulation(&cfg.sim_config(cfg.seed), &updates, &quant_cfg, None)?;
    Ok(Timeline {
        bins: out.metrics.sends_per_10ms.clone(),
        total_sends: out.metrics.sends,
        metrics: out.metrics,
    })
}

/// Aggregation strategies compared by the communication-cost calculator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RingAllreduce,
    InNetwork,
    DedicatedPs,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::RingAllreduce,
        Strategy::InNetwork,
        Strategy::DedicatedPs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RingAllreduce => "ring_allreduce",
            Strategy::InNetwork => "in_network",
            Strategy::DedicatedPs => "dedicated_ps",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CommCost {
    /// Bytes sent plus received per worker.
    pub bytes_per_worker: f64,
    /// Machines needed relative to the worker count (dedicated parameter
    /// servers double it).
    pub machine_factor: u32,
}

/// Closed-form data volume each worker sends and receives to aggregate
/// `update_bytes`: `4(n-1)/n * |U|` for a bandwidth-optimal ring, `2|U|`
/// for in-network aggregation and for dedicated parameter servers (which
/// need twice the machines).
pub fn comm_cost(strategy: Strategy, n: usize, update_bytes: u64) -> Result<CommCost, BenchError> {
    if n < 2 {
        return Err(BenchError::InvalidConfig(format!(
            "communication cost needs n >= 2, got {n}"
        )));
    }
    let u = update_bytes as f64;
    let cost = match strategy {
        Strategy::RingAllreduce => CommCost {
            bytes_per_worker: 4.0 * (n as f64 - 1.0) * u / n as f64,
            machine_factor: 1,
        },
        Strategy::InNetwork => CommCost {
            bytes_per_worker: 2.0 * u,
            machine_factor: 1,
        },
        Strategy::DedicatedPs => CommCost {
            bytes_per_worker: 2.0 * u,
            machine_factor: 2,
        },
    };
    Ok(cost)
}

/// How the mini trainer aggregates gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationMode {
    /// Quantize and run the simulated protocol; scaling factor profiled from
    /// the first epoch's updates with the given headroom margin.
    Quantized { margin: f64 },
    /// Quantized protocol with a caller-pinned scaling factor.
    QuantizedFixed { f: f64 },
    /// Exact float sum, no protocol (the oracle baseline).
    ExactFloat,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: AggregationMode,
    pub samples: usize,
    pub features: usize,
    pub lr: f64,
    pub s: usize,
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 4,
            epochs: 20,
            seed: 7,
            mode: AggregationMode::Quantized { margin: 4.0 },
            samples: 256,
            features: 8,
            lr: 0.5,
            s: 4,
            k: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Mean logistic loss over the full dataset after each epoch's update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Scaling factor used on the quantized path.
    pub scaling_factor: Option<f64>,
}

/// Synthetic linearly separable 2-class dataset: rows are standard-normal
/// feature vectors with a trailing constant 1 (bias term), labels are the
/// sign of a hidden weight vector's response.
pub fn synthetic_dataset(seed: u64, samples: usize, features: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut x: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = x.iter().zip(&hidden).map(|(a, b)| a * b).sum();
        x.push(1.0);
        xs.push(x);
        ys.push(if z >= 0.0 { 1.0 } else { -1.0 });
    }
    (xs, ys)
}

/// Mean logistic loss `ln(1 + exp(-y * w.x))` over the dataset.
pub fn logistic_loss(w: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let m = -y * z;
        // ln(1 + e^m), stable for large m.
        total += if m > 30.0 { m } else { (1.0 + m.exp()).ln() };
    }
    total / xs.len() as f64
}

/// Mean gradient of the logistic loss over `rows`.
pub fn logistic_grad(
    w: &[f64],
    xs: &[Vec<f64>],
    ys: &[f64],
    rows: std::ops::Range<usize>,
) -> Vec<f64> {
    let dim = w.len();
    let mut g = vec![0.0; dim];
    let count = rows.len().max(1);
    for i in rows {
        let x = &xs[i];
        let y = ys[i];
        let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let sig = 1.0 / (1.0 + (y * z).exp()); // sigmoid(-y z)
        for j in 0..dim {
            g[j] += -y * x[j] * sig;
        }
    }
    for v in &mut g {
        *v /= count as f64;
    }
    g
}

fn shard_range(samples: usize, n: usize, w: usize) -> std::ops::Range<usize> {
    let base = samples / n;
    let rem = samples % n;
    let start = w * base + w.min(rem);
    let len = base + usize::from(w < rem);
    start..start + len
}

/// Synchronous distributed SGD on logistic regression where each epoch's
/// gradient aggregation runs through the full simulated protocol (or through
/// an exact float sum in `ExactFloat` mode). Signals `Divergence` when the
/// loss rises five epochs in a row.
pub fn mini_train(cfg: &TrainConfig) -> Result<TrainReport, BenchError> {
    if cfg.n == 0 || cfg.epochs == 0 || cfg.samples < cfg.n || cfg.features == 0 {
        return Err(BenchError::InvalidConfig(format!(
            "n={} epochs={} samples={} features={}",
            cfg.n, cfg.epochs, cfg.samples, cfg.features
        )));
    }
    let (xs, ys) = synthetic_dataset(cfg.seed, cfg.samples, cfg.features);
    let dim = cfg.features + 1;
    let mut w = vec![0.0; dim];

    let worker_updates = |w: &[f64]| -> Vec<Vec<f64>> {
        (0..cfg.n)
            .map(|i| {
                let g = logistic_grad(w, &xs, &ys, shard_range(cfg.samples, cfg.n, i));
                g.iter().map(|v| -cfg.lr / cfg.n as f64 * v).collect()
            })
            .collect()
    };

    // Pin the scaling factor from the first epoch's updates.
    let quant_cfg = match cfg.mode {
        AggregationMode::Quantized { margin } => {
            let first = worker_updates(&w);
            let profile = quant::profile_bound(&first, margin)?;
            if profile.degenerate {
                return Err(BenchError::Quant(QuantError::DegenerateBound));
            }
            Some(QuantConfig::for_bound(cfg.n, profile.bound)?)
        }
        AggregationMode::QuantizedFixed { f } => Some(QuantConfig::new(f, cfg.n)),
        AggregationMode::ExactFloat => None,
    };

    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut rising = 0usize;
    for epoch in 0..cfg.epochs {
        let updates = worker_updates(&w);
        let delta: Vec<f64> = match &quant_cfg {
            Some(qc) => {
                let mut sim_cfg = SimConfig::new(
                    SwitchConfig::new(cfg.n, cfg.s, cfg.k),
                    ChannelConfig::lossless(5_000),
                    cfg.seed.wrapping_add(epoch as u64),
                );
                sim_cfg.timeout_ns = 1_000_000;
                let out = netsim::run_simulation(&sim_cfg, &updates, qc, None)?;
                out.results.into_iter().next().unwrap()
            }
            None => {
                let mut sum = vec![0.0; dim];
                for u in &updates {
                    for (a, v) in sum.iter_mut().zip(u) {
                        *a += v;
                    }
                }
                sum
            }
        };
        for (wj, dj) in w.iter_mut().zip(&delta) {
            *wj += dj;
        }
        let loss = logistic_loss(&w, &xs, &ys);
        if losses.last().is_some_and(|&prev| loss > prev) {
            rising += 1;
            if rising >= 5 {
                losses.push(loss);
                return Err(BenchError::Divergence { epoch, losses });
            }
        } else {
            rising = 0;
        }
        losses.push(loss);
    }
    Ok(TrainReport {
        final_loss: *losses.last().unwrap(),
        losses,
        scaling_factor: quant_cfg.map(|q| q.f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_ate_consistent_with_tat() {
        let m = RunMetrics::from_run(2_000_000_000, vec![2_000_000_000], 1000, 0, vec![], 0, 0);
        assert_eq!(m.ate_per_sec, 500.0);
        let elements = (m.ate_per_sec * m.tat_ns as f64 / 1e9).round() as u64;
        assert_eq!(elements, m.elements);
    }

    #[test]
    fn lossless_microbenchmark_has_no_retransmissions() {
        let cfg = MicrobenchConfig {
            tensor_bytes: 8192,
            repeats: 3,
            ..Default::default()
        };
        let report = run_microbenchmark(&cfg).unwrap();
        for run in &report.runs {
            assert_eq!(run.retransmissions, 0);
            assert_eq!(run.drops, 0);
        }
        assert!(report.median_tat_ns > 0);
    }

    #[test]
    fn ring_cost_formula() {
        let c = comm_cost(Strategy::RingAllreduce, 4, 100).unwrap();
        assert_eq!(c.bytes_per_worker, 300.0);
        let c = comm_cost(Strategy::InNetwork, 4, 100).unwrap();
        assert_eq!(c.bytes_per_worker, 200.0);
        // Crossover at n=2.
        let ring2 = comm_cost(Strategy::RingAllreduce, 2, 100).unwrap();
        let net2 = comm_cost(Strategy::InNetwork, 2, 100).unwrap();
        assert_eq!(ring2.bytes_per_worker, net2.bytes_per_worker);
        // Large-n asymptote: ring tends to 4|U|, in-network stays 2|U|.
        let ring_big = comm_cost(Strategy::RingAllreduce, 1_000_000, 100).unwrap();
        assert!((ring_big.bytes_per_worker - 400.0).abs() < 0.01);
        let net_big = comm_cost(Strategy::InNetwork, 1_000_000, 100).unwrap();
        assert_eq!(net_big.bytes_per_worker, 200.0);
        // Dedicated PS matches in-network volume at twice the machines.
        let ps = comm_cost(Strategy::DedicatedPs, 8, 100).unwrap();
        assert_eq!(ps.bytes_per_worker, 200.0);
        assert_eq!(ps.machine_factor, 2);
        assert!(comm_cost(Strategy::InNetwork, 1, 100).is_err());
    }

    #[test]
    fn timeline_rows_sum_to_total_sends() {
        let cfg = MicrobenchConfig {
            tensor_bytes: 65_536,
            loss_prob: 0.01,
            timeout_ns: 1_000_000,
            seed: 5,
            ..Default::default()
        };
        let tl = loss_timeline(&cfg).unwrap();
        assert_eq!(tl.bins.iter().sum::<u64>(), tl.total_sends);
        assert!(tl.total_sends >= (cfg.elements() / cfg.k * cfg.n) as u64);
    }

    #[test]
    fn zero_loss_timeline_is_compact() {
        let cfg = MicrobenchConfig {
            tensor_bytes: 32_768,
            ..Default::default()
        };
        let tl = loss_timeline(&cfg).unwrap();
        assert_eq!(tl.metrics.retransmissions, 0);
        assert_eq!(tl.bins.iter().sum::<u64>(), tl.total_sends);
    }

    #[test]
    fn dataset_is_separable_and_deterministic() {
        let (xs, ys) = synthetic_dataset(3, 64, 4);
        let (xs2, ys2) = synthetic_dataset(3, 64, 4);
        assert_eq!(xs, xs2);
        assert_eq!(ys, ys2);
        assert!(ys.iter().any(|&y| y > 0.0) && ys.iter().any(|&y| y < 0.0));
        assert!(xs.iter().all(|x| x.len() == 5 && x[4] == 1.0));
    }

    #[test]
    fn single_worker_training_equals_centralized_sgd() {
        let cfg = TrainConfig {
            n: 1,
            epochs: 10,
            mode: AggregationMode::ExactFloat,
            ..Default::default()
        };
        let report = mini_train(&cfg).unwrap();

        // Centralized loop: identical dataset, lr, and epoch count.
        let (xs, ys) = synthetic_dataset(cfg.seed, cfg.samples, cfg.features);
        let mut w = vec![0.0; cfg.features + 1];
        let mut losses = Vec::new();
        for _ in 0..cfg.epochs {
            let g = logistic_grad(&w, &xs, &ys, 0..cfg.samples);
            for (wj, gj) in w.iter_mut().zip(&g) {
                *wj -= cfg.lr * gj;
            }
            losses.push(logistic_loss(&w, &xs, &ys));
        }
        assert_eq!(report.losses, losses);
    }

    #[test]
    fn quantized_training_tracks_exact_baseline() {
        let quantized = mini_train(&TrainConfig::default()).unwrap();
        let exact = mini_train(&TrainConfig {
            mode: AggregationMode::ExactFloat,
            ..TrainConfig::default()
        })
        .unwrap();
        assert!(quantized.final_loss.is_finite());
        assert!((quantized.final_loss - exact.final_loss).abs() < 1e-3);
        // Training actually learns something.
        assert!(exact.final_loss < exact.losses[0]);
    }

    #[test]
    fn absurdly_small_factor_stalls_learning() {
        let auto = mini_train(&TrainConfig::default()).unwrap();
        let f = auto.scaling_factor.unwrap() * 1e-6;
        let stalled = mini_train(&TrainConfig {
            mode: AggregationMode::QuantizedFixed { f },
            ..TrainConfig::default()
        })
        .unwrap();
        // Gradients quantize to zero: the model never moves.
        let first = stalled.losses[0];
        assert!(stalled.losses.iter().all(|&l| l == first));
        assert!(stalled.final_loss > auto.final_loss);
    }
}
