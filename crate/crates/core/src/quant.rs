//! Float/fixed-point conversion for switch-side integer aggregation.
//!
//! Workers scale each update entry by a factor `f`, round to the nearest
//! 32-bit integer (ties away from zero), and ship integers; receivers divide
//! the integer aggregate by `f`. With `n` workers whose update entries are
//! bounded by `B` in magnitude, any `0 < f <= (2^31 - n) / (n * B)` keeps
//! every per-worker value and every partial sum inside the signed 32-bit
//! range, and the aggregate differs from the exact float sum by at most
//! `n / f` per element. [`choose_scaling_factor`] returns the largest such
//! `f`; [`profile_bound`] estimates `B` from sample updates.

use thiserror::Error;

/// Largest magnitude a quantized element may take.
const Q_MAX: f64 = i32::MAX as f64; // 2^31 - 1

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate update bound (B <= 0)")]
    DegenerateBound,
    #[error("quantization overflow at element {index}: |{scaled}| exceeds 2^31 - 1")]
    Overflow { index: usize, scaled: f64 },
    #[error("invalid scaling factor {0}; must be positive and finite")]
    InvalidScale(f64),
    #[error("invalid worker count {0}")]
    InvalidWorkerCount(usize),
}

/// Scaling parameters shared by all workers of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    /// Scaling factor applied before rounding.
    pub f: f64,
    /// Worker count the overflow bound is computed against.
    pub n: usize,
    /// Per-element update magnitude bound, when known.
    pub bound: Option<f64>,
}

impl QuantConfig {
    pub fn new(f: f64, n: usize) -> Self {
        Self { f, n, bound: None }
    }

    /// Derive the largest overflow-safe config for `n` workers with updates
    /// bounded by `bound`.
    pub fn for_bound(n: usize, bound: f64) -> Result<Self, QuantError> {
        let f = choose_scaling_factor(n, bound)?;
        Ok(Self {
            f,
            n,
            bound: Some(bound),
        })
    }

    /// Check `f` is positive and, when a bound is present, within the
    /// overflow-safe range.
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(QuantError::InvalidScale(self.f));
        }
        if self.n == 0 {
            return Err(QuantError::InvalidWorkerCount(self.n));
        }
        if let Some(b) = self.bound {
            if b <= 0.0 {
                return Err(QuantError::DegenerateBound);
            }
            let max_f = (2f64.powi(31) - self.n as f64) / (self.n as f64 * b);
            if self.f > max_f {
                return Err(QuantError::InvalidScale(self.f));
            }
        }
        Ok(())
    }
}

/// Result of profiling sample updates for a magnitude bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfiledBound {
    pub bound: f64,
    /// Set when every sampled entry was zero; such a bound cannot seed a
    /// scaling factor.
    pub degenerate: bool,
}

/// Scan sample update vectors and return the largest entry magnitude times
/// `margin` (1.0 = no headroom).
pub fn profile_bound<V: AsRef<[f64]>>(
    samples: &[V],
    margin: f64,
) -> Result<ProfiledBound, QuantError> {
    if samples.is_empty() || samples.iter().all(|v| v.as_ref().is_empty()) {
        return Err(QuantError::EmptyInput);
    }
    let mut max_abs = 0f64;
    for v in samples {
        for &x in v.as_ref() {
            max_abs = max_abs.max(x.abs());
        }
    }
    let bound = max_abs * margin;
    Ok(ProfiledBound {
        bound,
        degenerate: bound == 0.0,
    })
}

/// Largest scaling factor that rules out 32-bit overflow for `n` workers
/// with per-element update magnitudes at most `bound`: `(2^31 - n) / (n * bound)`.
pub fn choose_scaling_factor(n: usize, bound: f64) -> Result<f64, QuantError> {
    if n == 0 {
        return Err(QuantError::InvalidWorkerCount(n));
    }
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(QuantError::DegenerateBound);
    }
    Ok((2f64.powi(31) - n as f64) / (n as f64 * bound))
}

/// Elementwise aggregate error ceiling for `n` workers at scaling factor `f`:
/// `n / f`.
pub fn aggregation_error_bound(n: usize, f: f64) -> f64 {
    n as f64 / f
}

/// Round `f * x` to the nearest integer, ties away from zero, per element.
pub fn quantize(x: &[f64], f: f64) -> Result<Vec<i32>, QuantError> {
    if !(f > 0.0 && f.is_finite()) {
        return Err(QuantError::InvalidScale(f));
    }
    let mut out = Vec::with_capacity(x.len());
    for (index, &v) in x.iter().enumerate() {
        let scaled = (f * v).round();
        if !(scaled.abs() <= Q_MAX) {
            return Err(QuantError::Overflow { index, scaled });
        }
        out.push(scaled as i32);
    }
    Ok(out)
}

/// Elementwise `q / f`.
pub fn dequantize(q: &[i32], f: f64) -> Vec<f64> {
    q.iter().map(|&v| v as f64 / f).collect()
}

/// Outcome of a round trip through IEEE-754 binary16.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfRoundTrip {
    pub values: Vec<f32>,
    /// Entries whose magnitude exceeded the binary16 range and came back
    /// as +/-inf.
    pub overflowed: usize,
}

/// Round-trip each entry through binary16 (round-to-nearest-even), emulating
/// a half-precision payload path on the host. Values outside the binary16
/// range propagate as +/-inf and are counted in `overflowed`.
pub fn quantize_half(x: &[f32]) -> HalfRoundTrip {
    let mut overflowed = 0;
    let values = x
        .iter()
        .map(|&v| {
            let h = half::f16::from_f32(v);
            let back = h.to_f32();
            if back.is_infinite() && v.is_finite() {
                overflowed += 1;
            }
            back
        })
        .collect();
    HalfRoundTrip { values, overflowed }
}
