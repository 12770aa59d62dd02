//! Blockchain-assisted FL latency: proof-of-work races, forks and the
//! malfunctioning-miner experiment.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{invalid, ConfigErrors, Result};
use crate::experiment::BlockFlOutcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Malfunction {
    pub prob: f64,
    pub noise_mean: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFlConfig {
    pub n_miners: usize,
    /// Per-miner block generation rate (1/s).
    pub lambda_bgr: f64,
    pub t_bp_s: f64,
    #[serde(default)]
    pub t_wait_s: f64,
    #[serde(default)]
    pub rollback_s: f64,
    #[serde(default)]
    pub malfunction: Option<Malfunction>,
}

impl Default for BlockFlConfig {
    fn default() -> Self {
        BlockFlConfig { n_miners: 10, lambda_bgr: 0.27, t_bp_s: 1.0, t_wait_s: 0.0, rollback_s: 2.0, malfunction: None }
    }
}

impl BlockFlConfig {
    pub fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.n_miners == 0 {
            errs.push(p("n_miners"), "must be at least 1");
        }
        if !(self.lambda_bgr > 0.0 && self.lambda_bgr.is_finite()) {
            errs.push(p("lambda_bgr"), format!("must be positive, got {}", self.lambda_bgr));
        }
        for (name, v) in [("t_bp_s", self.t_bp_s), ("t_wait_s", self.t_wait_s), ("rollback_s", self.rollback_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(p(name), format!("must be nonnegative, got {v}"));
            }
        }
        if let Some(m) = &self.malfunction {
            if !(0.0..=1.0).contains(&m.prob) {
                errs.push(p("malfunction.prob"), format!("must lie in [0, 1], got {}", m.prob));
            }
            if !m.noise_mean.is_finite() {
                errs.push(p("malfunction.noise_mean"), "must be finite");
            }
            if !(m.noise_var >= 0.0 && m.noise_var.is_finite()) {
                errs.push(p("malfunction.noise_var"), "must be nonnegative");
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = ConfigErrors::default();
        self.validate_into("blockfl", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::Config(errs))
        }
    }
}

/// `2 / (t_bp (1 + sqrt(1 + 4 n (1 + t_wait / t_bp))))`.
pub fn optimal_lambda(n_miners: usize, t_bp_s: f64, t_wait_s: f64) -> Result<f64> {
    if n_miners == 0 {
        return Err(invalid("need at least one miner"));
    }
    if !(t_bp_s > 0.0 && t_bp_s.is_finite()) {
        return Err(invalid(format!("propagation delay must be positive, got {t_bp_s}")));
    }
    if !(t_wait_s >= 0.0 && t_wait_s.is_finite()) {
        return Err(invalid(format!("waiting time must be nonnegative, got {t_wait_s}")));
    }
    let n = n_miners as f64;
    Ok(2.0 / (t_bp_s * (1.0 + (1.0 + 4.0 * n * (1.0 + t_wait_s / t_bp_s)).sqrt())))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockRoundOutcome {
    pub mining_s: f64,
    pub forked: bool,
    pub extra_s: f64,
    pub total_s: f64,
}

/// Every miner draws an exponential PoW time; the earliest wins and the
/// round forks if another finishes within `t_bp_s` of it.
pub fn simulate_block_round<R: Rng + ?Sized>(cfg: &BlockFlConfig, rng: &mut R) -> BlockRoundOutcome {
    let exp = Exp::new(cfg.lambda_bgr).expect("validated rate");
    let mut first = f64::INFINITY;
    let mut second = f64::INFINITY;
    for _ in 0..cfg.n_miners {
        let t: f64 = exp.sample(rng);
        if t < first {
            second = first;
            first = t;
        } else if t < second {
            second = t;
        }
    }
    let forked = second - first <= cfg.t_bp_s && cfg.t_bp_s > 0.0;
    let extra_s = if forked { cfg.rollback_s } else { 0.0 };
    BlockRoundOutcome { mining_s: first, forked, extra_s, total_s: cfg.t_wait_s + first + cfg.t_bp_s + extra_s }
}

/// Mean round latency and fork rate over `trials` rounds.
pub fn mean_block_latency<R: Rng + ?Sized>(cfg: &BlockFlConfig, trials: usize, rng: &mut R) -> (f64, f64) {
    let mut total = 0.0;
    let mut forks = 0usize;
    for _ in 0..trials {
        let o = simulate_block_round(cfg, rng);
        total += o.total_s;
        forks += usize::from(o.forked);
    }
    (total / trials as f64, forks as f64 / trials as f64)
}

/// Miner `j`'s copy of the global aggregate. A faulty miner adds one
/// Gaussian draw per element. Returns the copies and which miners failed.
pub fn apply_malfunction<R: Rng + ?Sized>(
    global: &[f64],
    n_miners: usize,
    malfunction: Option<&Malfunction>,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let Some(m) = malfunction else {
        return (vec![global.to_vec(); n_miners], vec![false; n_miners]);
    };
    let noise = Normal::new(m.noise_mean, m.noise_var.sqrt()).expect("validated variance");
    let mut faulty = Vec::with_capacity(n_miners);
    let copies = (0..n_miners)
        .map(|_| {
            let bad = m.prob > 0.0 && rng.random::<f64>() < m.prob;
            faulty.push(bad);
            if bad {
                global.iter().map(|v| v + noise.sample(rng)).collect()
            } else {
                global.to_vec()
            }
        })
        .collect();
    (copies, faulty)
}

/// FL through miners with block latency added to every checkpoint round.
/// The run is seeded from `fl.seed`; its protocol section supplies the
/// learning rate and checkpoint interval.
pub fn blockfl_e2e(cfg: &BlockFlConfig, fl: &ExperimentConfig) -> Result<BlockFlOutcome> {
    crate::experiment::run_blockfl(cfg, fl)
}

/// Device `i` is served by miner `i mod n_miners`.
pub fn miner_of(device: usize, n_miners: usize) -> usize {
    device % n_miners
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn optimal_rate_values() {
        let l = optimal_lambda(10, 1.0, 0.0).unwrap();
        assert!((l - 2.0 / (1.0 + 41f64.sqrt())).abs() < 1e-15);
        assert!((l - 0.2702).abs() < 1e-4);
        for n in 1..30 {
            assert!(optimal_lambda(n + 1, 1.0, 0.5).unwrap() < optimal_lambda(n, 1.0, 0.5).unwrap());
        }
        for k in 1..30 {
            let t = k as f64 * 0.1;
            assert!(optimal_lambda(5, t + 0.1, 0.0).unwrap() < optimal_lambda(5, t, 0.0).unwrap());
        }
        assert!(optimal_lambda(5, 0.0, 0.0).is_err());
    }

    #[test]
    fn accounting_identity_and_zero_window() {
        let cfg = BlockFlConfig { t_bp_s: 0.0, t_wait_s: 0.3, ..BlockFlConfig::default() };
        let mut rng = stream(1, "block");
        for _ in 0..10_000 {
            let o = simulate_block_round(&cfg, &mut rng);
            assert!(!o.forked);
            assert_eq!(o.total_s, cfg.t_wait_s + o.mining_s + cfg.t_bp_s + if o.forked { o.extra_s } else { 0.0 });
        }
    }

    #[test]
    fn mining_time_is_minimum_of_exponentials() {
        let cfg = BlockFlConfig { lambda_bgr: 0.01, n_miners: 4, ..BlockFlConfig::default() };
        let mut rng = stream(2, "block");
        let mean = (0..10_000).map(|_| simulate_block_round(&cfg, &mut rng).mining_s).sum::<f64>() / 10_000.0;
        assert!((mean * 0.04 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn two_miner_fork_probability() {
        let cfg = BlockFlConfig { n_miners: 2, lambda_bgr: 0.5, t_bp_s: 1.0, ..BlockFlConfig::default() };
        let (_, rate) = mean_block_latency(&cfg, 10_000, &mut stream(3, "block"));
        let want = 1.0 - (-0.5f64).exp();
        assert!((rate - want).abs() / want < 0.03, "{rate} vs {want}");
    }

    #[test]
    fn malfunction_cases() {
        let g = vec![1.0, -2.0, 0.5];
        let mut rng = stream(4, "m");
        let (c, f) = apply_malfunction(&g, 3, Some(&Malfunction { prob: 0.0, noise_mean: -0.1, noise_var: 0.01 }), &mut rng);
        assert!(c.iter().all(|x| *x == g) && f.iter().all(|b| !b));
        let (c, _) = apply_malfunction(&g, 2, Some(&Malfunction { prob: 1.0, noise_mean: -0.1, noise_var: 0.0 }), &mut rng);
        for copy in &c {
            for (a, b) in copy.iter().zip(&g) {
                assert_eq!(*a, b - 0.1);
            }
        }
        let (c, f) = apply_malfunction(&g, 50, Some(&Malfunction { prob: 0.5, noise_mean: -0.1, noise_var: 0.01 }), &mut rng);
        assert!(f.iter().any(|b| *b) && f.iter().any(|b| !b));
        for (copy, bad) in c.iter().zip(&f) {
            assert_eq!(copy == &g, !bad);
        }
    }
}
