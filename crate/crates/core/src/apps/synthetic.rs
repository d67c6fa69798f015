//! A two-operation program with planted costs, used to hold the analytical
//! model against measured makespans.
//!
//! `op0` is a fixed amount of work with a linear imbalance across ranks and
//! `op1` consumes the data `op0` produces. Conventionally every rank runs
//! both, separated by a barrier. Decoupled, `(1-α)P` producers interleave
//! `op0` with stream sends and `αP` consumers charge `op1` per element.

use crate::error::{Error, Result};
use crate::layout::{decoupled_rank_count, GroupLayout};
use crate::model::{estimate_beta, BetaModel, PerfParams};
use crate::runtime::{run, EventTrace, SimConfig, SimTime, TransportStats};
use crate::stream::{operator, NoOperator, StreamChannel, StreamElementType};

/// Planted costs, all in microseconds except the byte counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoOpConfig {
    pub total_ranks: usize,
    pub alpha: f64,
    /// `op0` time per rank when all ranks share it.
    pub t_w0: f64,
    /// `op1` time per rank when all ranks share it.
    pub t_w1: f64,
    /// `op1` time per rank of `P` in the decoupled layout, before `1/α`.
    pub t_w1_prime: f64,
    /// Extra `op0` time of the slowest rank.
    pub t_sigma: f64,
    pub data_volume_d: usize,
    pub granularity_s: usize,
    /// Producer-side cost of one element.
    pub overhead_o: f64,
}

impl Default for TwoOpConfig {
    fn default() -> Self {
        TwoOpConfig {
            total_ranks: 32,
            alpha: 1.0 / 16.0,
            t_w0: 1000.0,
            t_w1: 400.0,
            t_w1_prime: 400.0,
            t_sigma: 100.0,
            data_volume_d: 4 << 20,
            granularity_s: 1024,
            overhead_o: 0.05,
        }
    }
}

#[derive(Debug)]
pub struct TwoOpRun {
    pub layout: GroupLayout,
    pub makespan: SimTime,
    pub trace: EventTrace,
    pub stats: TransportStats,
}

impl TwoOpRun {
    /// Share of `op0` done before the consumers start, from the trace.
    pub fn measured_beta(&self) -> Result<f64> {
        let consumers = self.layout.members("consumer")?;
        estimate_beta(&self.trace, "op0", consumers)
    }
}

impl TwoOpConfig {
    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if self.granularity_s == 0 {
            return Err(Error::invalid("granularity must be positive"));
        }
        Ok(())
    }

    pub fn consumers(&self) -> Result<usize> {
        decoupled_rank_count(self.total_ranks, self.alpha)
    }

    pub fn producers(&self) -> Result<usize> {
        Ok(self.total_ranks - self.consumers()?)
    }

    /// Model inputs matching this program.
    pub fn params(&self) -> PerfParams {
        PerfParams {
            t_w0: self.t_w0,
            t_w1: self.t_w1,
            t_w1_prime: self.t_w1_prime,
            t_sigma: self.t_sigma,
            alpha: self.alpha,
            beta: 1.0,
            data_volume_d: self.data_volume_d as f64,
            granularity_s: self.granularity_s as f64,
            overhead_o: self.overhead_o,
            total_ranks: self.total_ranks,
        }
    }

    /// Consumers start once every producer has finished its first element,
    /// so the skipped share is one element's worth: `β = n_p·S/D`.
    pub fn beta_model(&self) -> Result<BetaModel> {
        Ok(BetaModel::Affine {
            beta0: 0.0,
            k: self.producers()? as f64,
        })
    }

    fn elements_total(&self) -> usize {
        self.data_volume_d.div_ceil(self.granularity_s)
    }

    /// Elements sent by producer `i` of `n`; at least one.
    fn elements_of(&self, i: usize, n: usize) -> usize {
        let total = self.elements_total();
        (total / n + usize::from(i < total % n)).max(1)
    }

    fn imbalance(&self, i: usize, n: usize) -> f64 {
        if n == 1 {
            self.t_sigma
        } else {
            self.t_sigma * i as f64 / (n - 1) as f64
        }
    }
}

pub fn run_two_op_conventional(config: &TwoOpConfig, sim: &SimConfig) -> Result<TwoOpRun> {
    config.validate()?;
    let p = sim.total_ranks;
    let layout = GroupLayout::single(p, "all")?.with_op("op0", "all")?.with_op("op1", "all")?;
    let out = run(&layout, sim, |rank| {
        let members = rank.layout().members("all")?;
        rank.compute("op0", config.t_w0 + config.imbalance(rank.id(), p))?;
        rank.barrier(members)?;
        rank.compute("op1", config.t_w1)?;
        Ok(())
    })?;
    Ok(TwoOpRun {
        makespan: out.makespan(),
        layout,
        trace: out.trace,
        stats: out.stats,
    })
}

pub fn run_two_op_decoupled(config: &TwoOpConfig, sim: &SimConfig) -> Result<TwoOpRun> {
    config.validate()?;
    if sim.total_ranks != config.total_ranks {
        return Err(Error::invalid(format!(
            "program is planted for {} ranks, simulation has {}",
            config.total_ranks, sim.total_ranks
        )));
    }
    let n_c = config.consumers()?;
    let n_p = config.total_ranks - n_c;
    let layout = GroupLayout::contiguous(&[("producer", n_p), ("consumer", n_c)])?
        .with_op("op0", "producer")?
        .with_op("op1", "consumer")?;
    let s = config.granularity_s;
    let producer_work = config.t_w0 / (1.0 - config.alpha);
    let consumer_work = config.t_w1_prime / config.alpha;
    let out = run(&layout, sim, |rank| {
        let ty = StreamElementType::new(format!("synthetic-{s}"), s)?;
        ty.register(rank)?;
        let mut ch = StreamChannel::create(rank, "producer", "consumer")?;
        let me = rank.layout().index_in_group(rank.id()).expect("member");
        if rank.is_member("producer") {
            let n = config.elements_of(me, n_p);
            let per = (producer_work + config.imbalance(me, n_p)) / n as f64;
            let payload = vec![0u8; s];
            let mut st = ch.attach(rank, &ty, NoOperator)?;
            for _ in 0..n {
                rank.compute("op0", per)?;
                rank.compute("emit", config.overhead_o)?;
                st.isend(rank, &payload)?;
            }
            st.terminate(rank)?;
        } else {
            // default routing sends producer j to consumer j mod n_c
            let incoming: usize = (0..n_p).filter(|j| j % n_c == me).map(|j| config.elements_of(j, n_p)).sum();
            let per = if incoming == 0 { 0.0 } else { consumer_work / incoming as f64 };
            let mut st = ch.attach(rank, &ty, operator(move |rank, _, _| rank.compute("op1", per).map(|_| ())))?;
            st.operate(rank)?;
        }
        ch.free(rank)
    })?;
    Ok(TwoOpRun {
        makespan: out.makespan(),
        layout,
        trace: out.trace,
        stats: out.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_conventional, predict_decoupled};

    #[test]
    fn conventional_matches_the_sum_exactly() {
        let c = TwoOpConfig::default();
        let r = run_two_op_conventional(&c, &SimConfig::new(32)).unwrap();
        let want = predict_conventional(&c.params()).unwrap();
        assert!((r.makespan.as_micros() - want).abs() < 1e-3);
    }

    #[test]
    fn decoupled_is_close_to_the_model() {
        for alpha in [1.0 / 16.0, 0.25] {
            let c = TwoOpConfig { alpha, ..TwoOpConfig::default() };
            let r = run_two_op_decoupled(&c, &SimConfig::new(32)).unwrap();
            let want = predict_decoupled(&c.params(), &c.beta_model().unwrap()).unwrap().t_decoupled;
            let rel = (r.makespan.as_micros() - want).abs() / want;
            assert!(rel < 0.3, "alpha {alpha}: {} vs {want}", r.makespan.as_micros());
        }
    }

    #[test]
    fn measured_beta_is_one_element() {
        let c = TwoOpConfig::default();
        let r = run_two_op_decoupled(&c, &SimConfig::new(32)).unwrap();
        let planted = c.beta_model().unwrap().eval(c.granularity_s as f64, c.data_volume_d as f64);
        let b = r.measured_beta().unwrap();
        assert!(b > 0.0 && b < 2.0 * planted, "{b} vs {planted}");
    }

    #[test]
    fn element_split_covers_the_volume() {
        let c = TwoOpConfig { data_volume_d: 1000, granularity_s: 7, ..TwoOpConfig::default() };
        let n = c.producers().unwrap();
        let sum: usize = (0..n).map(|i| c.elements_of(i, n)).sum();
        assert_eq!(sum, 1000usize.div_ceil(7));
        assert_eq!(c.imbalance(n - 1, n), c.t_sigma);
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        assert!(run_two_op_decoupled(&TwoOpConfig::default(), &SimConfig::new(8)).is_err());
    }
}
