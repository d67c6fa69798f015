//! Analytical model of conventional versus decoupled execution time.
//!
//! Two operations `Op0` and `Op1` run on `P` ranks. Conventionally each rank
//! does both, so the time is `T_w0 + T_σ + T_w1`. Decoupled, `Op1` runs on
//! `αP` ranks fed by streams from the other `(1-α)P`. The decoupled time is
//!
//! ```text
//! T_d = β(S)·[T_w0/(1-α) + T_σ + (D/S)·o] + T'_w1/α
//! ```
//!
//! where `β` is the share of `Op0` that does not overlap `Op1`, `D` the
//! total bytes moved between the groups, `S` the stream element size and `o`
//! the cost of one element.

mod beta;
mod suitability;

pub use beta::estimate_beta;
pub use suitability::{suitability_report, OpProfile, SuitabilityCategory, Verdict, HIGH_VARIANCE_CV};

use crate::error::{Error, Result};

/// Every input of the model. Times are per rank and share one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfParams {
    pub t_w0: f64,
    pub t_w1: f64,
    /// Time of `Op1` when it runs on the decoupled group, before the `1/α`
    /// scaling.
    pub t_w1_prime: f64,
    pub t_sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Total bytes streamed from the producer group to the consumer group.
    pub data_volume_d: f64,
    pub granularity_s: f64,
    /// Cost of one stream element.
    pub overhead_o: f64,
    pub total_ranks: usize,
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams {
            t_w0: 0.0,
            t_w1: 0.0,
            t_w1_prime: 0.0,
            t_sigma: 0.0,
            alpha: 0.5,
            beta: 1.0,
            data_volume_d: 0.0,
            granularity_s: 1.0,
            overhead_o: 0.0,
            total_ranks: 2,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

impl PerfParams {
    pub fn validate(&self) -> Result<()> {
        non_negative("t_w0", self.t_w0)?;
        non_negative("t_w1", self.t_w1)?;
        non_negative("t_w1_prime", self.t_w1_prime)?;
        non_negative("t_sigma", self.t_sigma)?;
        non_negative("data_volume_d", self.data_volume_d)?;
        non_negative("overhead_o", self.overhead_o)?;
        check_alpha(self.alpha)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.granularity_s.is_finite() && self.granularity_s > 0.0) {
            return Err(Error::invalid(format!(
                "granularity_s must be positive, got {}",
                self.granularity_s
            )));
        }
        if self.data_volume_d > 0.0 && self.granularity_s > self.data_volume_d {
            return Err(Error::invalid(format!(
                "granularity_s {} exceeds data_volume_d {}",
                self.granularity_s, self.data_volume_d
            )));
        }
        if self.total_ranks < 2 {
            return Err(Error::invalid("total_ranks must be at least 2"));
        }
        Ok(())
    }

    /// `T_w0/(1-α) + T_σ`: the producer group's share.
    pub fn producer_term(&self) -> f64 {
        self.t_w0 / (1.0 - self.alpha) + self.t_sigma
    }

    /// `(D/S)·o`: total per-element cost of streaming `D` bytes.
    pub fn overhead_term(&self) -> f64 {
        if self.data_volume_d == 0.0 {
            0.0
        } else {
            self.data_volume_d / self.granularity_s * self.overhead_o
        }
    }

    /// `T'_w1/α`: the consumer group's share.
    pub fn consumer_term(&self) -> f64 {
        self.t_w1_prime / self.alpha
    }
}

/// How `β` depends on the element size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaModel {
    Constant(f64),
    /// `β(S) = min(1, β₀ + k·S/D)`; `β₀` when `D = 0`.
    Affine { beta0: f64, k: f64 },
}

impl BetaModel {
    pub fn validate(&self) -> Result<()> {
        let b0 = match *self {
            BetaModel::Constant(b) => b,
            BetaModel::Affine { beta0, k } => {
                non_negative("k", k)?;
                beta0
            }
        };
        if (0.0..=1.0).contains(&b0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("beta must lie in [0, 1], got {b0}")))
        }
    }

    pub fn eval(&self, s: f64, d: f64) -> f64 {
        match *self {
            BetaModel::Constant(b) => b,
            BetaModel::Affine { beta0, .. } if d == 0.0 => beta0,
            BetaModel::Affine { beta0, k } => (beta0 + k * s / d).min(1.0),
        }
    }
}

/// Where the streaming overhead sits relative to `β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverheadPlacement {
    /// `β·[producer + overhead] + consumer`.
    #[default]
    InsideBeta,
    /// `β·producer + overhead + consumer`; not the canonical form.
    OutsideBeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub beta: f64,
    pub producer_term: f64,
    pub overhead_term: f64,
    pub consumer_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfPrediction {
    pub t_conventional: f64,
    pub t_decoupled: f64,
    /// `t_conventional / t_decoupled`.
    pub speedup: f64,
    pub breakdown: Breakdown,
}

/// `T_w0 + T_σ + T_w1`.
pub fn predict_conventional(params: &PerfParams) -> Result<f64> {
    params.validate()?;
    Ok(params.t_w0 + params.t_sigma + params.t_w1)
}

/// `max(T_w0/(1-α) + T_σ, T'_w1/α)`: both groups fully overlapped.
pub fn predict_decoupled_max(params: &PerfParams) -> Result<f64> {
    params.validate()?;
    Ok(params.producer_term().max(params.consumer_term()))
}

/// `β·[T_w0/(1-α) + T_σ] + T'_w1/α` with `β = params.beta` and no
/// streaming overhead.
pub fn predict_pipelined(params: &PerfParams) -> Result<f64> {
    params.validate()?;
    Ok(params.beta * params.producer_term() + params.consumer_term())
}

pub fn predict_decoupled(params: &PerfParams, beta: &BetaModel) -> Result<PerfPrediction> {
    predict_decoupled_with(params, beta, OverheadPlacement::InsideBeta)
}

pub fn predict_decoupled_with(
    params: &PerfParams,
    beta_model: &BetaModel,
    placement: OverheadPlacement,
) -> Result<PerfPrediction> {
    params.validate()?;
    beta_model.validate()?;
    let beta = beta_model.eval(params.granularity_s, params.data_volume_d);
    let producer_term = params.producer_term();
    let overhead_term = params.overhead_term();
    let consumer_term = params.consumer_term();
    let t_decoupled = match placement {
        OverheadPlacement::InsideBeta => beta * (producer_term + overhead_term) + consumer_term,
        OverheadPlacement::OutsideBeta => beta * producer_term + overhead_term + consumer_term,
    };
    let t_conventional = params.t_w0 + params.t_sigma + params.t_w1;
    let speedup = if t_decoupled > 0.0 {
        t_conventional / t_decoupled
    } else if t_conventional == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(PerfPrediction {
        t_conventional,
        t_decoupled,
        speedup,
        breakdown: Breakdown {
            beta,
            producer_term,
            overhead_term,
            consumer_term,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub granularity_s: f64,
    pub prediction: PerfPrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub best: SweepRow,
    pub table: Vec<SweepRow>,
}

fn pick_best(table: Vec<SweepRow>, key: impl Fn(&SweepRow) -> f64) -> Result<Sweep> {
    let mut best: Option<SweepRow> = None;
    for row in &table {
        let better = match &best {
            None => true,
            Some(b) => {
                let (t, tb) = (row.prediction.t_decoupled, b.prediction.t_decoupled);
                t < tb || (t == tb && key(row) < key(b))
            }
        };
        if better {
            best = Some(*row);
        }
    }
    let best = best.ok_or_else(|| Error::usage("sweep grid is empty"))?;
    Ok(Sweep { best, table })
}

/// Evaluates the model for every `α` in `grid`. `t_w1_prime`, when given,
/// supplies `T'_w1` for each `α`. Ties go to the smaller `α`.
pub fn sweep_alpha(
    params: &PerfParams,
    beta: &BetaModel,
    grid: &[f64],
    t_w1_prime: Option<&dyn Fn(f64) -> f64>,
) -> Result<Sweep> {
    let table = grid
        .iter()
        .map(|&alpha| {
            check_alpha(alpha)?;
            let mut p = PerfParams { alpha, ..*params };
            if let Some(f) = t_w1_prime {
                p.t_w1_prime = f(alpha);
            }
            Ok(SweepRow {
                alpha,
                granularity_s: p.granularity_s,
                prediction: predict_decoupled(&p, beta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pick_best(table, |r| r.alpha)
}

/// Evaluates the model for every element size in `grid`. Ties go to the
/// smaller `S`.
pub fn sweep_granularity(params: &PerfParams, beta: &BetaModel, grid: &[f64]) -> Result<Sweep> {
    let table = grid
        .iter()
        .map(|&s| {
            let p = PerfParams {
                granularity_s: s,
                ..*params
            };
            Ok(SweepRow {
                alpha: p.alpha,
                granularity_s: s,
                prediction: predict_decoupled(&p, beta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pick_best(table, |r| r.granularity_s)
}

#[cfg(test)]
mod tests;
