//! Closed-form service time, throughput and latency model.
//!
//! All times are seconds, sizes bytes, bandwidth bytes per second. The
//! three formulas are implemented as stated, including the throughput
//! denominator `3 t_cpu + 2 t_q + t_l`, which is not what substituting the
//! service time's own decomposition would give.

use mph_core::net::sim::DelayModel;
use mph_core::types::MILLIS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub t_cpu: f64,
    /// Block size in bytes.
    pub m: f64,
    /// Bandwidth in bytes per second.
    pub b: f64,
    /// Round-trip network latency.
    pub t_l: f64,
    /// Quorum wait.
    pub t_q: f64,
    pub n: usize,
    pub tx_per_block: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{0} must be positive")]
    NonPositiveParam(&'static str),
    #[error("{0} must not be negative")]
    NegativeParam(&'static str),
    #[error("delay model has no sampling distribution")]
    UnsupportedDelay,
}

impl ModelParams {
    fn check(&self, need_m: bool) -> Result<(), ModelError> {
        for (name, v) in [
            ("t_cpu", self.t_cpu),
            ("m", self.m),
            ("t_l", self.t_l),
            ("t_q", self.t_q),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ModelError::NegativeParam(name));
            }
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(ModelError::NonPositiveParam("b"));
        }
        if self.n == 0 {
            return Err(ModelError::NonPositiveParam("n"));
        }
        if need_m && self.m <= 0.0 {
            return Err(ModelError::NonPositiveParam("m"));
        }
        Ok(())
    }

    pub fn t_nic(&self) -> f64 {
        2.0 * self.m / self.b
    }
}

/// `t_s = 3 t_cpu + 2 t_nic + t_l + t_q` with `t_nic = 2m/b`.
pub fn eval_service_time(p: &ModelParams) -> Result<f64, ModelError> {
    p.check(false)?;
    Ok(3.0 * p.t_cpu + 2.0 * p.t_nic() + p.t_l + p.t_q)
}

/// Blocks per second: `1 / ((3 t_cpu + 2 t_q + t_l)/m + 4/b)`.
pub fn eval_bps(p: &ModelParams) -> Result<f64, ModelError> {
    p.check(true)?;
    Ok(1.0 / ((3.0 * p.t_cpu + 2.0 * p.t_q + p.t_l) / p.m + 4.0 / p.b))
}

/// `3 t_s + 6 t_l`.
pub fn eval_latency(p: &ModelParams) -> Result<f64, ModelError> {
    Ok(3.0 * eval_service_time(p)? + 6.0 * p.t_l)
}

/// Monte Carlo quorum wait: the `2f`-th smallest of `n - 1` one-way delays
/// drawn from `delay`, averaged over `samples` draws. Seconds.
pub fn estimate_t_q(
    delay: &DelayModel,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    if n < 4 || samples == 0 {
        return Err(ModelError::NonPositiveParam("n"));
    }
    let f = (n - 1) / 3;
    let k = 2 * f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw: Box<dyn Fn(&mut ChaCha8Rng) -> f64> = match *delay {
        DelayModel::Uniform { lo, hi } => {
            let d = Uniform::new_inclusive(lo as f64, hi as f64);
            Box::new(move |r| d.sample(r))
        }
        DelayModel::Normal { mean, stddev } => {
            let d = Normal::new(mean as f64, stddev as f64)
                .map_err(|_| ModelError::UnsupportedDelay)?;
            Box::new(move |r| d.sample(r).max(0.0))
        }
        DelayModel::Adversarial => return Err(ModelError::UnsupportedDelay),
    };
    let mut buf = vec![0.0; n - 1];
    let mut total = 0.0;
    for _ in 0..samples {
        for x in buf.iter_mut() {
            *x = draw(&mut rng);
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        total += buf[k - 1];
    }
    Ok(total / samples as f64 / (1000.0 * MILLIS as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelParams {
        ModelParams {
            t_cpu: 1e-3,
            m: 512_000.0,
            b: 1e9,
            t_l: 10e-3,
            t_q: 5e-3,
            n: 4,
            tx_per_block: 500,
        }
    }

    #[test]
    fn service_time_example() {
        let p = base();
        assert!((p.t_nic() - 1.024e-3).abs() < 1e-15);
        assert!((eval_service_time(&p).unwrap() - 20.048e-3).abs() < 1e-12);
    }

    #[test]
    fn zero_payload_drops_nic_term() {
        let p = ModelParams { m: 0.0, ..base() };
        assert!((eval_service_time(&p).unwrap() - (3e-3 + 10e-3 + 5e-3)).abs() < 1e-15);
        assert_eq!(eval_bps(&p), Err(ModelError::NonPositiveParam("m")));
    }

    #[test]
    fn doubling_bandwidth_halves_nic_only() {
        let p = base();
        let q = ModelParams { b: 2e9, ..p };
        let diff = eval_service_time(&p).unwrap() - eval_service_time(&q).unwrap();
        assert!((diff - p.t_nic()).abs() < 1e-15);
    }

    #[test]
    fn latency_example() {
        // t_s = 20ms needs t_nic = 1ms: m = 500 KB at 1 GB/s
        let p = ModelParams {
            m: 500_000.0,
            ..base()
        };
        assert!((eval_service_time(&p).unwrap() - 20e-3).abs() < 1e-15);
        assert!((eval_latency(&p).unwrap() - 120e-3).abs() < 1e-12);
        let z = ModelParams { t_l: 0.0, ..p };
        assert!((eval_latency(&z).unwrap() - 3.0 * eval_service_time(&z).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bps_halves_with_bandwidth_at_large_blocks() {
        let p = ModelParams { m: 1e12, ..base() };
        let q = ModelParams { b: p.b / 2.0, ..p };
        let r = eval_bps(&p).unwrap() / eval_bps(&q).unwrap();
        assert!((r - 2.0).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(
            eval_service_time(&ModelParams { b: 0.0, ..base() }),
            Err(ModelError::NonPositiveParam("b"))
        );
        assert_eq!(
            eval_latency(&ModelParams {
                t_q: -1.0,
                ..base()
            }),
            Err(ModelError::NegativeParam("t_q"))
        );
        assert!(eval_bps(&ModelParams {
            t_cpu: f64::NAN,
            ..base()
        })
        .is_err());
    }

    #[test]
    fn quorum_wait_order_statistic() {
        // n = 4: the 2nd smallest of 3 uniforms on [0, 1] has mean 1/2
        let d = DelayModel::Uniform {
            lo: 0,
            hi: 1000 * MILLIS,
        };
        let t = estimate_t_q(&d, 4, 100_000, 1).unwrap();
        assert!((t - 0.5).abs() < 0.01, "{t}");
        // n = 7: 4th of 6 has mean 4/7
        let t = estimate_t_q(&d, 7, 100_000, 1).unwrap();
        assert!((t - 4.0 / 7.0).abs() < 0.01, "{t}");
        assert_eq!(
            estimate_t_q(&DelayModel::Adversarial, 4, 10, 1),
            Err(ModelError::UnsupportedDelay)
        );
    }
}
