use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};

/// Simulated time, stored as integer nanoseconds so that virtual-time runs are
/// exactly reproducible. Costs are specified in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    /// Rounds to the nearest nanosecond. Negative and NaN inputs map to zero.
    pub fn from_micros(us: f64) -> Self {
        if us.is_nan() || us <= 0.0 {
            SimTime(0)
        } else {
            SimTime((us * 1000.0).round().min(u64::MAX as f64) as u64)
        }
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        self.saturating_sub(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_micros())
    }
}

/// Per-work-unit slowdown distribution. A sample `s >= 0` stretches a unit of
/// nominal cost `c` to `c * (1 + s)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseSpec {
    #[default]
    None,
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
    /// Normal with the given mean and standard deviation `cv * mean`,
    /// truncated at zero.
    Normal { mean: f64, cv: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::None => true,
            NoiseSpec::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo,
            NoiseSpec::Exponential { mean } => mean.is_finite() && mean >= 0.0,
            NoiseSpec::Normal { mean, cv } => mean.is_finite() && cv.is_finite() && mean >= 0.0 && cv >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad noise setting {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
            NoiseSpec::Exponential { mean } => {
                if mean > 0.0 {
                    Exp::new(1.0 / mean).map(|d| d.sample(rng)).unwrap_or(0.0)
                } else {
                    0.0
                }
            }
            NoiseSpec::Normal { mean, cv } => Normal::new(mean, cv * mean)
                .map(|d| d.sample(rng))
                .unwrap_or(mean),
        };
        s.max(0.0)
    }

    /// Parses `none`, `uniform:LO:HI`, `exponential:MEAN` or `normal:MEAN:CV`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([':', ',']).map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::invalid(format!("noise setting `{s}` is missing a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("noise setting `{s}`: {e}")))
        };
        let noise = match parts[0].to_ascii_lowercase().as_str() {
            "" | "none" => NoiseSpec::None,
            "uniform" => NoiseSpec::Uniform { lo: num(1)?, hi: num(2)? },
            "exponential" | "exp" => NoiseSpec::Exponential { mean: num(1)? },
            "normal" => NoiseSpec::Normal { mean: num(1)?, cv: num(2)? },
            other => return Err(Error::invalid(format!("unknown noise distribution `{other}`"))),
        };
        noise.validate()?;
        Ok(noise)
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseSpec::None => write!(f, "none"),
            NoiseSpec::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
            NoiseSpec::Exponential { mean } => write!(f, "exponential:{mean}"),
            NoiseSpec::Normal { mean, cv } => write!(f, "normal:{mean}:{cv}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeSource {
    /// Logical per-rank clocks advanced by declared costs; deterministic.
    #[default]
    Virtual,
    /// Real elapsed time; compute costs are slept.
    WallClock,
}

/// Execution substrate settings. All durations are microseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub total_ranks: usize,
    pub noise: NoiseSpec,
    pub rng_seed: u64,
    /// Maximum unconsumed elements per (producer, stream).
    pub inflight_window: usize,
    pub time_source: TimeSource,
    /// Constant per-message link latency.
    pub latency_us: f64,
    /// Transfer time per payload byte.
    pub byte_cost_us: f64,
    /// Sender-side cost of injecting one message.
    pub send_overhead_us: f64,
    /// Receiver-side cost of accepting one message.
    pub recv_overhead_us: f64,
    pub deadline_us: Option<f64>,
    pub trace: bool,
}

pub const DEFAULT_INFLIGHT_WINDOW: usize = 64;

impl SimConfig {
    pub fn new(total_ranks: usize) -> Self {
        SimConfig {
            total_ranks,
            noise: NoiseSpec::None,
            rng_seed: 0,
            inflight_window: DEFAULT_INFLIGHT_WINDOW,
            time_source: TimeSource::Virtual,
            latency_us: 0.0,
            byte_cost_us: 0.0,
            send_overhead_us: 0.0,
            recv_overhead_us: 0.0,
            deadline_us: None,
            trace: true,
        }
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.inflight_window = window;
        self
    }

    pub fn with_time_source(mut self, source: TimeSource) -> Self {
        self.time_source = source;
        self
    }

    pub fn with_latency(mut self, latency_us: f64) -> Self {
        self.latency_us = latency_us;
        self
    }

    pub fn with_byte_cost(mut self, byte_cost_us: f64) -> Self {
        self.byte_cost_us = byte_cost_us;
        self
    }

    pub fn with_send_overhead(mut self, overhead_us: f64) -> Self {
        self.send_overhead_us = overhead_us;
        self
    }

    pub fn with_recv_overhead(mut self, overhead_us: f64) -> Self {
        self.recv_overhead_us = overhead_us;
        self
    }

    pub fn with_deadline(mut self, deadline_us: f64) -> Self {
        self.deadline_us = Some(deadline_us);
        self
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_ranks < 2 {
            return Err(Error::invalid("a simulation needs at least two ranks"));
        }
        if self.inflight_window == 0 {
            return Err(Error::invalid("in-flight window must be positive"));
        }
        for (name, v) in [
            ("latency", self.latency_us),
            ("byte cost", self.byte_cost_us),
            ("send overhead", self.send_overhead_us),
            ("recv overhead", self.recv_overhead_us),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(d) = self.deadline_us {
            if d.is_nan() || d <= 0.0 {
                return Err(Error::invalid("deadline must be positive"));
            }
        }
        self.noise.validate()
    }
}
