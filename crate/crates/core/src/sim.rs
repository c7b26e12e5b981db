//! Majority-vote error under the i.i.d. sign-interference model.
//!
//! Each of `K` task updates points in the true direction with probability
//! `p > 0.5`. Consensus filtering commits to a direction only when a strict
//! majority agrees, so it errs when the number of correct votes `X` satisfies
//! `X <= floor(K/2)`. Plain averaging errs when the sign of the mean update is
//! wrong, which also depends on the update magnitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{classify, Branch};

fn check_p(p: f64) -> Result<()> {
    if p > 0.5 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "p must exceed 0.5 and be at most 1, got {p}"
        )))
    }
}

fn check_m(m: u64) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig(
            "consensus set size must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Hoeffding upper bound `exp(-2 m (p - 1/2)^2)` on `P(X <= m/2)`.
pub fn hoeffding_bound(m: u64, p: f64) -> Result<f64> {
    check_m(m)?;
    check_p(p)?;
    Ok((-2.0 * m as f64 * (p - 0.5).powi(2)).exp())
}

/// Exact `P(X <= floor(m/2))` for `X ~ Binomial(m, p)`.
pub fn exact_majority_error(m: u64, p: f64) -> Result<f64> {
    check_m(m)?;
    check_p(p)?;
    if p == 1.0 {
        return Ok(0.0);
    }
    let (ln_p, ln_q) = (p.ln(), (1.0 - p).ln());
    let mut ln_choose = 0.0f64;
    let mut total = 0.0;
    for x in 0..=m / 2 {
        if x > 0 {
            ln_choose += ((m - x + 1) as f64).ln() - (x as f64).ln();
        }
        total += (ln_choose + x as f64 * ln_p + (m - x) as f64 * ln_q).exp();
    }
    Ok(total.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MagnitudeDist {
    Unit,
    LogNormal { mu: f64, sigma: f64 },
}

impl Default for MagnitudeDist {
    fn default() -> Self {
        MagnitudeDist::LogNormal { mu: 0.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: f64,
    pub k: u32,
    /// Majority threshold; `None` means `K / 2`.
    pub delta: Option<f64>,
    pub trials: u64,
    pub seed: u64,
    pub magnitudes: MagnitudeDist,
    /// Trial blocks. Each block draws from its own ChaCha8 stream, so results
    /// depend on `(seed, workers)` but not on scheduling.
    pub workers: u32,
}

impl SimConfig {
    pub fn new(p: f64, k: u32, trials: u64, seed: u64) -> Self {
        SimConfig {
            p,
            k,
            delta: None,
            trials,
            seed,
            magnitudes: MagnitudeDist::default(),
            workers: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if self.k == 0 || self.k > 64 {
            return Err(Error::InvalidConfig(format!(
                "K must be in 1..=64, got {}",
                self.k
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        let delta = self.delta();
        if !(0.0..=self.k as f64).contains(&delta) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in [0, {}], got {delta}",
                self.k
            )));
        }
        if let MagnitudeDist::LogNormal { mu, sigma } = self.magnitudes {
            if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "invalid lognormal parameters mu={mu}, sigma={sigma}"
                )));
            }
        }
        Ok(())
    }

    fn delta(&self) -> f64 {
        self.delta.unwrap_or(self.k as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub p: f64,
    pub k: u32,
    pub trials: u64,
    pub filtered_error: f64,
    pub averaging_error: f64,
    pub exact_error: f64,
    pub hoeffding: f64,
    /// 95% normal-approximation half-width of `filtered_error`.
    pub filtered_half_width: f64,
    /// 95% normal-approximation half-width of `averaging_error`.
    pub averaging_half_width: f64,
}

pub const CSV_HEADER: &str = "p,K,trials,filtered_err,avg_err,exact_err,hoeffding,half_width";

impl SimResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.p,
            self.k,
            self.trials,
            self.filtered_error,
            self.averaging_error,
            self.exact_error,
            self.hoeffding,
            self.filtered_half_width
        )
    }
}

/// `1.96 * sqrt(r (1 - r) / n)`.
pub fn half_width(rate: f64, trials: u64) -> f64 {
    1.96 * (rate * (1.0 - rate) / trials as f64).sqrt()
}

#[derive(Default, Clone, Copy)]
struct Counts {
    filtered: u64,
    averaging: u64,
}

fn run_block(cfg: &SimConfig, block: u32, trials: u64) -> Counts {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(block as u64);
    let lognormal = match cfg.magnitudes {
        MagnitudeDist::LogNormal { mu, sigma } => Some(LogNormal::new(mu, sigma).unwrap()),
        MagnitudeDist::Unit => None,
    };
    let delta = cfg.delta();
    let mut counts = Counts::default();
    for _ in 0..trials {
        // true direction is +
        let mut correct = 0u32;
        let mut sum = 0.0f64;
        for _ in 0..cfg.k {
            let agrees = rng.random_bool(cfg.p);
            let mag = lognormal.as_ref().map_or(1.0, |d| d.sample(&mut rng));
            if agrees {
                correct += 1;
                sum += mag;
            } else {
                sum -= mag;
            }
        }
        if classify(correct, cfg.k - correct, delta) != Branch::PositiveMajority {
            counts.filtered += 1;
        }
        if sum <= 0.0 {
            counts.averaging += 1;
        }
    }
    counts
}

/// Monte Carlo comparison of the filtered majority against plain averaging.
pub fn simulate(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let workers = cfg.workers as u64;
    let base = cfg.trials / workers;
    let extra = cfg.trials % workers;
    let blocks: Vec<Counts> = (0..cfg.workers)
        .into_par_iter()
        .map(|w| {
            let n = base + u64::from((w as u64) < extra);
            run_block(cfg, w, n)
        })
        .collect();
    let total = blocks.iter().fold(Counts::default(), |a, b| Counts {
        filtered: a.filtered + b.filtered,
        averaging: a.averaging + b.averaging,
    });
    let filtered = total.filtered as f64 / cfg.trials as f64;
    let averaging = total.averaging as f64 / cfg.trials as f64;
    Ok(SimResult {
        p: cfg.p,
        k: cfg.k,
        trials: cfg.trials,
        filtered_error: filtered,
        averaging_error: averaging,
        exact_error: exact_majority_error(cfg.k as u64, cfg.p)?,
        hoeffding: hoeffding_bound(cfg.k as u64, cfg.p)?,
        filtered_half_width: half_width(filtered, cfg.trials),
        averaging_half_width: half_width(averaging, cfg.trials),
    })
}

/// Runs [`simulate`] once per `K` in `ks`, keeping every other setting.
pub fn sweep(cfg: &SimConfig, ks: &[u32]) -> Result<Vec<SimResult>> {
    ks.iter()
        .map(|&k| simulate(&SimConfig { k, ..cfg.clone() }))
        .collect()
}

pub fn to_csv(results: &[SimResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a sweep spec such as `"k=1,3,5,9,15"` (the `k=` prefix is optional).
pub fn parse_sweep(spec: &str) -> Result<Vec<u32>> {
    let list = spec
        .trim()
        .strip_prefix("k=")
        .or_else(|| spec.trim().strip_prefix("K="))
        .unwrap_or(spec.trim());
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidConfig(format!("bad sweep entry {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hoeffding_examples() {
        // exp(-2 * 5 * 0.04) = exp(-0.4)
        assert!((hoeffding_bound(5, 0.7).unwrap() - 0.670_320_046_035_639).abs() < 1e-12);
        for m in [1, 2, 7, 40] {
            let b = hoeffding_bound(m, 1.0).unwrap();
            assert!((b - (-(m as f64) / 2.0).exp()).abs() < 1e-15);
        }
        assert!(hoeffding_bound(0, 0.7).is_err());
        assert!(hoeffding_bound(3, 0.5).is_err());
        assert!(hoeffding_bound(3, 1.1).is_err());
    }

    #[test]
    fn exact_examples() {
        // 0.3^5 + 5*0.7*0.3^4 + 10*0.49*0.027
        let want = 0.00243 + 0.02835 + 0.1323;
        assert!((exact_majority_error(5, 0.7).unwrap() - want).abs() < 1e-12);
        assert!((exact_majority_error(1, 0.7).unwrap() - 0.3).abs() < 1e-12);
        // ties charged as errors: m=2 -> P(X <= 1) = 1 - p^2
        assert!((exact_majority_error(2, 0.7).unwrap() - 0.51).abs() < 1e-12);
        assert_eq!(exact_majority_error(9, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn exact_handles_large_m() {
        let e = exact_majority_error(2001, 0.51).unwrap();
        assert!(e > 0.0 && e < 0.5);
        assert!(e <= hoeffding_bound(2001, 0.51).unwrap());
    }

    #[test]
    fn noiseless_simulation_has_no_errors() {
        for k in [1, 2, 5] {
            let r = simulate(&SimConfig::new(1.0, k, 2_000, 3)).unwrap();
            assert_eq!(r.filtered_error, 0.0);
            assert_eq!(r.averaging_error, 0.0);
            assert_eq!(r.filtered_half_width, 0.0);
        }
    }

    #[test]
    fn same_seed_same_result() {
        let cfg = SimConfig::new(0.7, 5, 10_000, 42);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = SimConfig { seed: 43, ..cfg.clone() };
        assert_ne!(simulate(&cfg).unwrap(), simulate(&other).unwrap());
        let split = SimConfig { workers: 4, ..cfg };
        assert_eq!(simulate(&split).unwrap(), simulate(&split).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(simulate(&SimConfig::new(0.4, 5, 10, 0)).is_err());
        assert!(simulate(&SimConfig::new(0.7, 0, 10, 0)).is_err());
        assert!(simulate(&SimConfig::new(0.7, 5, 0, 0)).is_err());
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("k=1,3,5,9,15").unwrap(), vec![1, 3, 5, 9, 15]);
        assert_eq!(parse_sweep("2, 4").unwrap(), vec![2, 4]);
        assert!(parse_sweep("k=1,x").is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = simulate(&SimConfig::new(0.9, 3, 100, 0)).unwrap();
        let csv = to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 8);
    }
}
