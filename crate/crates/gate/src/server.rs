//! The mock gated site.
//!
//! `GET /page/{n}` serves a page while the session has budget left. A
//! request without a known token opens a fresh session. Once the budget is
//! spent (or the session expired) the reply is `401 {"challenge_id": ...}`.
//! `GET /captcha/{id}` returns the challenge PNG and `POST /answer` checks a
//! form-encoded `{challenge_id, text}`. After the allowed number of wrong
//! answers the challenge is replaced by a fresh one.
//!
//! Identifiers and tokens use lowercase letters only, so no response can
//! spell out a label from a digit charset by accident.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use forge_core::synth::{derive_seed, synthesize_pair};

use crate::{GateConfig, GateError, Result, Schedule, SESSION_HEADER};

const ID_LEN: usize = 16;

struct Session {
    budget: usize,
    expires: Instant,
    challenge: Option<String>,
}

struct Challenge {
    label: String,
    png: Vec<u8>,
    attempts_left: u32,
    token: String,
}

struct Inner {
    cfg: GateConfig,
    sessions: HashMap<String, Session>,
    challenges: HashMap<String, Challenge>,
    ids: ChaCha8Rng,
    schedule: ChaCha8Rng,
    challenges_created: u64,
    pages_served: u64,
}

impl Inner {
    fn new_id(&mut self) -> String {
        (0..ID_LEN).map(|_| (b'a' + self.ids.random_range(0..26u8)) as char).collect()
    }

    /// Pages a session may fetch before its next challenge. A cycle is the
    /// served pages plus the request that gets challenged.
    fn next_budget(&mut self) -> usize {
        let period = self.cfg.challenge_period;
        let cycle = match self.cfg.schedule {
            Schedule::Strict => period,
            Schedule::Geometric => {
                let p = 1.0 / period as f64;
                let mut n = 1;
                while !self.schedule.random_bool(p) {
                    n += 1;
                }
                n
            }
        };
        cycle.saturating_sub(1).max(1)
    }

    fn ttl(&self) -> Duration {
        Duration::from_secs(self.cfg.session_ttl_s)
    }

    fn open_session(&mut self) -> String {
        let token = self.new_id();
        let session = Session {
            budget: self.next_budget(),
            expires: Instant::now() + self.ttl(),
            challenge: None,
        };
        self.sessions.insert(token.clone(), session);
        token
    }

    fn new_challenge(&mut self, token: &str) -> std::result::Result<String, forge_core::Error> {
        let seed = derive_seed(self.cfg.seed, 10_000 + self.challenges_created);
        self.challenges_created += 1;
        let sample = synthesize_pair(&self.cfg.style, &self.cfg.noise, seed)?;
        let id = self.new_id();
        self.challenges.insert(
            id.clone(),
            Challenge {
                label: self.cfg.style.charset.normalize_answer(&sample.label),
                png: sample.noisy.to_png_bytes()?,
                attempts_left: self.cfg.max_attempts_per_challenge,
                token: token.to_string(),
            },
        );
        if let Some(s) = self.sessions.get_mut(token) {
            s.challenge = Some(id.clone());
        }
        Ok(id)
    }
}

type Shared = Arc<Mutex<Inner>>;

fn lock(shared: &Shared) -> MutexGuard<'_, Inner> {
    shared.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Serialize)]
struct ChallengeBody {
    challenge_id: String,
}

#[derive(Debug, Deserialize)]
pub struct AnswerForm {
    pub challenge_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerReply {
    pub pass: bool,
    pub attempts_left: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_challenge_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

fn with_token(mut resp: Response, token: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(token) {
        resp.headers_mut().insert(SESSION_HEADER, v);
    }
    resp
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(serde_json::json!({ "error": msg }))).into_response()
}

async fn page(State(shared): State<Shared>, Path(n): Path<usize>, headers: HeaderMap) -> Response {
    let mut inner = lock(&shared);
    let token = headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|t| inner.sessions.contains_key(*t))
        .map(str::to_string);
    let token = match token {
        Some(t) => t,
        None => inner.open_session(),
    };
    let now = Instant::now();
    let session = inner.sessions.get_mut(&token).expect("session exists");
    if session.budget > 0 && session.expires > now {
        session.budget -= 1;
        inner.pages_served += 1;
        let body = format!("<html><body><h1>listing</h1><p>page {}</p></body></html>", spell(n));
        return with_token(([(header::CONTENT_TYPE, "text/html")], body).into_response(), &token);
    }
    let pending = session.challenge.clone().filter(|id| inner.challenges.contains_key(id));
    let id = match pending {
        Some(id) => id,
        None => match inner.new_challenge(&token) {
            Ok(id) => id,
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
        },
    };
    with_token((StatusCode::UNAUTHORIZED, Json(ChallengeBody { challenge_id: id })).into_response(), &token)
}

/// Page numbers spelled with letters, keeping digits out of page bodies.
fn spell(mut n: usize) -> String {
    const NAMES: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
    let mut parts = Vec::new();
    loop {
        parts.push(NAMES[n % 10]);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    parts.reverse();
    parts.join("-")
}

async fn captcha(State(shared): State<Shared>, Path(id): Path<String>) -> Response {
    let inner = lock(&shared);
    match inner.challenges.get(&id) {
        Some(c) => ([(header::CONTENT_TYPE, "image/png")], c.png.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown challenge"),
    }
}

async fn answer(State(shared): State<Shared>, Form(form): Form<AnswerForm>) -> Response {
    let mut inner = lock(&shared);
    let charset = inner.cfg.style.charset.clone();
    let Some(ch) = inner.challenges.get_mut(&form.challenge_id) else {
        return error(StatusCode::NOT_FOUND, "unknown challenge");
    };
    if charset.normalize_answer(form.text.trim()) == ch.label {
        let token = ch.token.clone();
        let attempts_left = ch.attempts_left - 1;
        inner.challenges.remove(&form.challenge_id);
        let budget = inner.next_budget();
        let expires = Instant::now() + inner.ttl();
        if let Some(s) = inner.sessions.get_mut(&token) {
            s.budget = budget;
            s.expires = expires;
            s.challenge = None;
        }
        let reply = AnswerReply {
            pass: true,
            attempts_left,
            next_challenge_id: None,
            session: Some(token.clone()),
        };
        return with_token(Json(reply).into_response(), &token);
    }
    ch.attempts_left -= 1;
    let mut reply = AnswerReply {
        pass: false,
        attempts_left: ch.attempts_left,
        next_challenge_id: None,
        session: None,
    };
    if ch.attempts_left == 0 {
        let token = ch.token.clone();
        inner.challenges.remove(&form.challenge_id);
        match inner.new_challenge(&token) {
            Ok(id) => reply.next_challenge_id = Some(id),
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
        }
    }
    Json(reply).into_response()
}

fn router(shared: Shared) -> Router {
    Router::new()
        .route("/page/{n}", get(page))
        .route("/captcha/{id}", get(captcha))
        .route("/answer", post(answer))
        .with_state(shared)
}

/// A running gate. Dropping it stops the server.
pub struct GateHandle {
    addr: SocketAddr,
    shared: Shared,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl GateHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn challenges_created(&self) -> u64 {
        lock(&self.shared).challenges_created
    }

    pub fn pages_served(&self) -> u64 {
        lock(&self.shared).pages_served
    }

    /// Ground truth of a live challenge. For tests only; never reachable
    /// over HTTP.
    pub fn peek_label(&self, challenge_id: &str) -> Option<String> {
        lock(&self.shared).challenges.get(challenge_id).map(|c| c.label.clone())
    }

    /// Labels of every live challenge.
    pub fn live_labels(&self) -> Vec<String> {
        lock(&self.shared).challenges.values().map(|c| c.label.clone()).collect()
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GateHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Starts the gate on a background thread.
pub fn serve_gate(cfg: GateConfig) -> Result<GateHandle> {
    cfg.validate()?;
    let listener = std::net::TcpListener::bind((cfg.host.as_str(), cfg.port))
        .map_err(|e| GateError::Startup(format!("{}:{}: {e}", cfg.host, cfg.port)))?;
    listener.set_nonblocking(true).map_err(|e| GateError::Startup(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| GateError::Startup(e.to_string()))?;
    let shared: Shared = Arc::new(Mutex::new(Inner {
        ids: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1)),
        schedule: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2)),
        cfg,
        sessions: HashMap::new(),
        challenges: HashMap::new(),
        challenges_created: 0,
        pages_served: 0,
    }));
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| GateError::Startup(e.to_string()))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(shared.clone());
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("gate listener: {e}");
                    return;
                }
            };
            let served = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = served.await {
                log::error!("gate server: {e}");
            }
        });
    });
    log::info!("gate listening on http://{addr}");
    Ok(GateHandle {
        addr,
        shared,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spelled_page_numbers_have_no_digits() {
        assert_eq!(spell(0), "zero");
        assert_eq!(spell(105), "one-zero-five");
        assert!(!spell(98765).chars().any(|c| c.is_ascii_digit()));
    }

    #[test]
    fn strict_budget_and_geometric_mean() {
        let mk = |schedule, period| Inner {
            cfg: GateConfig { schedule, challenge_period: period, ..GateConfig::default() },
            sessions: HashMap::new(),
            challenges: HashMap::new(),
            ids: ChaCha8Rng::seed_from_u64(1),
            schedule: ChaCha8Rng::seed_from_u64(2),
            challenges_created: 0,
            pages_served: 0,
        };
        let mut strict = mk(Schedule::Strict, 15);
        assert_eq!(strict.next_budget(), 14);
        assert_eq!(mk(Schedule::Strict, 1).next_budget(), 1);
        let mut geo = mk(Schedule::Geometric, 15);
        let n = 20_000;
        let mean = (0..n).map(|_| geo.next_budget() + 1).sum::<usize>() as f64 / n as f64;
        assert!((mean - 15.0).abs() < 0.6, "mean cycle {mean}");
        let id = strict.new_id();
        assert_eq!(id.len(), ID_LEN);
        assert!(id.chars().all(|c| c.is_ascii_lowercase()));
    }

    #[test]
    fn port_in_use_is_a_startup_error() {
        let first = serve_gate(GateConfig::default()).unwrap();
        let clash = serve_gate(GateConfig { port: first.addr().port(), ..GateConfig::default() });
        assert!(matches!(clash, Err(GateError::Startup(_))));
    }
}
