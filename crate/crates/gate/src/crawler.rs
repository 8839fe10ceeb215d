//! Crawler that walks the gate's pages and solves challenges on the way.

use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use forge_core::pipeline::{solve, SolverBundle};
use forge_core::synth::Charset;
use forge_core::CaptchaImage;

use crate::server::AnswerReply;
use crate::{CrawlStats, GateError, Result, SESSION_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrawlConfig {
    pub pages: usize,
    /// Charset the gate is known to use; the solver must match it.
    pub charset: Option<Charset>,
    /// Fresh challenges tried per page before the page is skipped.
    pub max_challenge_rounds: usize,
    pub network_retries: usize,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        Self {
            pages: 100,
            charset: None,
            max_challenge_rounds: 3,
            network_retries: 3,
            backoff_ms: 50,
            timeout_s: 30,
        }
    }
}

/// Produces ranked answer candidates for a challenge image.
pub trait Solver {
    fn candidates(&mut self, img: &CaptchaImage) -> forge_core::Result<Vec<String>>;

    /// Charset the solver answers in, when it is fixed.
    fn charset(&self) -> Option<&Charset> {
        None
    }
}

impl Solver for &SolverBundle {
    fn candidates(&mut self, img: &CaptchaImage) -> forge_core::Result<Vec<String>> {
        Ok(solve(img, self)?.attempts)
    }

    fn charset(&self) -> Option<&Charset> {
        Some(SolverBundle::charset(self))
    }
}

#[derive(Deserialize)]
struct ChallengeBody {
    challenge_id: String,
}

struct Crawler<'a, S> {
    client: Client,
    base: String,
    cfg: &'a CrawlConfig,
    solver: &'a mut S,
    token: Option<String>,
    stats: CrawlStats,
}

impl<S: Solver> Crawler<'_, S> {
    /// Sends a request, retrying connection failures and 5xx replies with
    /// exponential backoff.
    fn send(&self, url: &str, make: impl Fn() -> reqwest::blocking::RequestBuilder) -> Result<Response> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.cfg.network_retries {
            if attempt > 0 {
                log::warn!("retrying {url} after: {last}");
                thread::sleep(delay);
                delay *= 2;
            }
            let mut req = make();
            if let Some(t) = &self.token {
                req = req.header(SESSION_HEADER, t);
            }
            match req.send() {
                Ok(r) if r.status().is_server_error() => last = format!("status {}", r.status()),
                Ok(r) => return Ok(r),
                Err(e) => last = e.to_string(),
            }
        }
        Err(GateError::Network { url: url.to_string(), detail: last })
    }

    fn adopt_token(&mut self, resp: &Response) {
        if let Some(t) = resp.headers().get(SESSION_HEADER).and_then(|v| v.to_str().ok()) {
            self.token = Some(t.to_string());
        }
    }

    fn fetch_captcha(&self, id: &str) -> Result<CaptchaImage> {
        let url = format!("{}/captcha/{id}", self.base);
        let resp = self.send(&url, || self.client.get(&url))?;
        if resp.status() != StatusCode::OK {
            return Err(GateError::Protocol(format!("captcha {id}: status {}", resp.status())));
        }
        let bytes = resp.bytes().map_err(|e| GateError::Network { url, detail: e.to_string() })?;
        Ok(CaptchaImage::from_png_bytes(&bytes)?)
    }

    fn submit(&mut self, id: &str, text: &str) -> Result<AnswerReply> {
        let url = format!("{}/answer", self.base);
        let form = [("challenge_id", id), ("text", text)];
        let resp = self.send(&url, || self.client.post(&url).form(&form))?;
        if resp.status() != StatusCode::OK {
            return Err(GateError::Protocol(format!("answer {id}: status {}", resp.status())));
        }
        self.adopt_token(&resp);
        resp.json().map_err(|e| GateError::Protocol(format!("answer reply: {e}")))
    }

    /// Works through a challenge, following rotations. Returns the
    /// cumulative attempt number of the passing answer, or `None` if every
    /// round was exhausted.
    fn run_challenge(&mut self, mut id: String) -> Result<Option<u32>> {
        let mut attempt_no = 0u32;
        for _ in 0..self.cfg.max_challenge_rounds {
            let img = self.fetch_captcha(&id)?;
            let t = Instant::now();
            let candidates = self.solver.candidates(&img)?;
            self.stats.solve_time_s += t.elapsed().as_secs_f64();
            let mut candidates = candidates.into_iter();
            loop {
                let guess = candidates.next().unwrap_or_default();
                attempt_no += 1;
                let reply = self.submit(&id, &guess)?;
                if reply.pass {
                    return Ok(Some(attempt_no));
                }
                if let Some(next) = reply.next_challenge_id {
                    id = next;
                    break;
                }
                if reply.attempts_left == 0 {
                    return Err(GateError::Protocol("challenge exhausted without a replacement".into()));
                }
            }
        }
        Ok(None)
    }

    fn run(&mut self) -> Result<()> {
        for n in 1..=self.cfg.pages {
            let url = format!("{}/page/{n}", self.base);
            loop {
                let resp = self.send(&url, || self.client.get(&url))?;
                self.adopt_token(&resp);
                match resp.status() {
                    StatusCode::OK => {
                        self.stats.pages_fetched += 1;
                        break;
                    }
                    StatusCode::UNAUTHORIZED => {
                        let body: ChallengeBody =
                            resp.json().map_err(|e| GateError::Protocol(format!("challenge body: {e}")))?;
                        self.stats.challenges_issued += 1;
                        let outcome = self.run_challenge(body.challenge_id)?;
                        *self.stats.attempts_histogram.entry(outcome.unwrap_or(0)).or_default() += 1;
                        match outcome {
                            Some(_) => self.stats.challenges_passed += 1,
                            None => {
                                log::warn!("giving up on page {n}");
                                break;
                            }
                        }
                    }
                    other => return Err(GateError::Protocol(format!("page {n}: status {other}"))),
                }
            }
        }
        Ok(())
    }
}

/// Crawls pages `1..=cfg.pages` of the gate at `base_url`.
pub fn crawl_gate<S: Solver>(base_url: &str, solver: &mut S, cfg: &CrawlConfig) -> Result<CrawlStats> {
    if let (Some(expected), Some(actual)) = (&cfg.charset, solver.charset()) {
        if expected != actual {
            return Err(GateError::Config(format!(
                "solver charset {:?} does not match the gate's {:?}",
                actual.as_string(),
                expected.as_string()
            )));
        }
    }
    if cfg.max_challenge_rounds < 1 {
        return Err(GateError::Config("max_challenge_rounds must be >= 1".into()));
    }
    let client = Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_s))
        .build()
        .map_err(|e| GateError::Config(e.to_string()))?;
    let start = Instant::now();
    let mut crawler = Crawler {
        client,
        base: base_url.trim_end_matches('/').to_string(),
        cfg,
        solver,
        token: None,
        stats: CrawlStats::default(),
    };
    crawler.run()?;
    crawler.stats.wall_time_s = start.elapsed().as_secs_f64();
    debug_assert!(crawler.stats.check_invariants().is_ok());
    Ok(crawler.stats)
}
