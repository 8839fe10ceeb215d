//! Offline CAPTCHA-gated site and the crawler that solves its challenges.
//!
//! The server hands out page resources and, after a scheduled number of
//! page requests, invalidates the session and demands a captcha. The
//! crawler fetches pages in order, solving each challenge with a
//! [`forge_core::pipeline::SolverBundle`].

pub mod crawler;
pub mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crawler::{crawl_gate, CrawlConfig, Solver};
pub use server::{serve_gate, GateHandle};

use forge_core::synth::{NoiseSpec, StyleSpec};

/// Header carrying the session token in both directions.
pub const SESSION_HEADER: &str = "x-session";

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("could not start gate: {0}")]
    Startup(String),
    #[error("request to {url} failed: {detail}")]
    Network { url: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] forge_core::Error),
}

pub type Result<T> = std::result::Result<T, GateError>;

/// How many pages a session may fetch before the next challenge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every session cycle is exactly `challenge_period` requests long.
    Strict,
    /// Cycle lengths are drawn from a seeded geometric distribution with
    /// mean `challenge_period`.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub pages: usize,
    pub challenge_period: usize,
    pub schedule: Schedule,
    pub style: StyleSpec,
    pub noise: NoiseSpec,
    pub session_ttl_s: u64,
    pub max_attempts_per_challenge: u32,
    pub seed: u64,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            pages: 100,
            challenge_period: 15,
            schedule: Schedule::Geometric,
            style: StyleSpec::default(),
            noise: NoiseSpec::none(),
            session_ttl_s: 600,
            max_attempts_per_challenge: 3,
            seed: 0,
            host: "127.0.0.1".into(),
            port: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pages < 1 || self.challenge_period < 1 {
            return Err(GateError::Config("pages and challenge_period must be >= 1".into()));
        }
        if self.max_attempts_per_challenge < 1 {
            return Err(GateError::Config("max_attempts_per_challenge must be >= 1".into()));
        }
        self.style.validate()?;
        self.noise.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrawlStats {
    pub pages_fetched: usize,
    pub challenges_issued: usize,
    pub challenges_passed: usize,
    /// Attempt number on which each challenge was passed; key 0 counts
    /// challenges the crawler gave up on.
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub wall_time_s: f64,
    pub solve_time_s: f64,
}

impl CrawlStats {
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.challenges_passed > self.challenges_issued {
            return Err(format!(
                "{} challenges passed but only {} issued",
                self.challenges_passed, self.challenges_issued
            ));
        }
        let total: usize = self.attempts_histogram.values().sum();
        if total != self.challenges_issued {
            return Err(format!("histogram totals {total}, {} challenges issued", self.challenges_issued));
        }
        let failed = self.attempts_histogram.get(&0).copied().unwrap_or(0);
        if self.challenges_issued - failed != self.challenges_passed {
            return Err("passed count disagrees with the histogram".into());
        }
        Ok(())
    }

    /// Challenges passed within the first `k` attempts.
    pub fn passed_within(&self, k: u32) -> usize {
        self.attempts_histogram.range(1..=k).map(|(_, v)| v).sum()
    }

    /// Equal apart from wall-clock measurements.
    pub fn same_outcome(&self, other: &CrawlStats) -> bool {
        self.pages_fetched == other.pages_fetched
            && self.challenges_issued == other.challenges_issued
            && self.challenges_passed == other.challenges_passed
            && self.attempts_histogram == other.attempts_histogram
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_catch_inconsistent_stats() {
        let mut s = CrawlStats {
            challenges_issued: 3,
            challenges_passed: 2,
            attempts_histogram: BTreeMap::from([(1, 1), (3, 1), (0, 1)]),
            ..Default::default()
        };
        assert!(s.check_invariants().is_ok());
        assert_eq!(s.passed_within(1), 1);
        assert_eq!(s.passed_within(3), 2);
        s.challenges_passed = 3;
        assert!(s.check_invariants().is_err());
        s.challenges_passed = 2;
        s.attempts_histogram.insert(2, 1);
        assert!(s.check_invariants().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig { challenge_period: 0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { pages: 0, ..Default::default() }.validate().is_err());
    }
}
