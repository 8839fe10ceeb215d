use forge_core::synth::{Charset, NoiseCategory, NoiseSpec, StyleSpec};
use forge_core::CaptchaImage;
use forge_gate::server::AnswerReply;
use forge_gate::{crawl_gate, serve_gate, CrawlConfig, GateConfig, GateError, GateHandle, Schedule, Solver, SESSION_HEADER};
use reqwest::blocking::Client;
use reqwest::StatusCode;

fn gate_config(pages: usize, period: usize, schedule: Schedule, seed: u64) -> GateConfig {
    GateConfig {
        pages,
        challenge_period: period,
        schedule,
        style: StyleSpec { charset: Charset::digits(), length_range: (4, 4), ..StyleSpec::default() },
        noise: NoiseSpec::category(NoiseCategory::Dots),
        seed,
        ..GateConfig::default()
    }
}

/// Answers with ground truth taken from the server, after a number of
/// deliberately wrong candidates taken in turn from `wrong_plan`.
struct Oracle<'a> {
    gate: &'a GateHandle,
    wrong_plan: Vec<usize>,
    calls: usize,
    charset: Option<Charset>,
}

impl<'a> Oracle<'a> {
    fn new(gate: &'a GateHandle, wrong_plan: Vec<usize>) -> Self {
        Self { gate, wrong_plan, calls: 0, charset: None }
    }
}

impl Solver for Oracle<'_> {
    fn candidates(&mut self, _img: &CaptchaImage) -> forge_core::Result<Vec<String>> {
        let live = self.gate.live_labels();
        assert_eq!(live.len(), 1, "a single crawler sees one live challenge");
        let wrong = self.wrong_plan[self.calls % self.wrong_plan.len()];
        self.calls += 1;
        let mut out = vec!["wrong".to_string(); wrong];
        out.push(live[0].clone());
        Ok(out)
    }

    fn charset(&self) -> Option<&Charset> {
        self.charset.as_ref()
    }
}

fn crawl(gate: &GateHandle, pages: usize, wrong_plan: Vec<usize>, rounds: usize) -> forge_gate::CrawlStats {
    let mut solver = Oracle::new(gate, wrong_plan);
    let cfg = CrawlConfig { pages, max_challenge_rounds: rounds, ..CrawlConfig::default() };
    crawl_gate(&gate.url(), &mut solver, &cfg).unwrap()
}

#[test]
fn strict_period_of_fifteen_over_thirty_pages_issues_two_challenges() {
    let gate = serve_gate(gate_config(30, 15, Schedule::Strict, 1)).unwrap();
    let stats = crawl(&gate, 30, vec![0], 3);
    assert_eq!(stats.pages_fetched, 30);
    assert_eq!(stats.challenges_issued, 2);
    assert_eq!(stats.challenges_passed, 2);
    assert_eq!(stats.attempts_histogram.get(&1), Some(&2));
    assert_eq!(gate.challenges_created(), 2);
    assert_eq!(gate.pages_served(), 30);
    stats.check_invariants().unwrap();
}

#[test]
fn single_page_needs_no_challenge() {
    let gate = serve_gate(gate_config(1, 15, Schedule::Strict, 2)).unwrap();
    let stats = crawl(&gate, 1, vec![0], 3);
    assert_eq!(stats.pages_fetched, 1);
    assert_eq!(stats.challenges_issued, 0);
    assert!(stats.attempts_histogram.is_empty());
}

#[test]
fn histogram_records_the_passing_attempt_across_rotations() {
    let gate = serve_gate(gate_config(10, 5, Schedule::Strict, 3)).unwrap();
    let stats = crawl(&gate, 10, vec![1], 3);
    assert_eq!(stats.challenges_issued, 2);
    assert_eq!(stats.attempts_histogram.get(&2), Some(&2));

    // Three wrong answers rotate the challenge; the fourth attempt is the
    // first one on the replacement.
    let gate = serve_gate(gate_config(10, 5, Schedule::Strict, 4)).unwrap();
    let stats = crawl(&gate, 10, vec![3, 0], 3);
    assert_eq!(stats.attempts_histogram.get(&4), Some(&2));
    assert_eq!(gate.challenges_created(), 4);
    stats.check_invariants().unwrap();
}

#[test]
fn crawler_gives_up_after_bounded_rounds_and_skips_the_page() {
    let gate = serve_gate(gate_config(6, 3, Schedule::Strict, 5)).unwrap();
    let stats = crawl(&gate, 6, vec![10], 2);
    stats.check_invariants().unwrap();
    assert_eq!(stats.challenges_passed, 0);
    assert_eq!(stats.challenges_issued, stats.attempts_histogram[&0]);
    assert!(stats.pages_fetched < 6);
}

#[test]
fn charset_mismatch_is_rejected_before_crawling() {
    let gate = serve_gate(gate_config(3, 15, Schedule::Strict, 6)).unwrap();
    let mut solver = Oracle { charset: Some(Charset::alnum()), ..Oracle::new(&gate, vec![0]) };
    let cfg = CrawlConfig { pages: 3, charset: Some(Charset::digits()), ..CrawlConfig::default() };
    assert!(matches!(crawl_gate(&gate.url(), &mut solver, &cfg), Err(GateError::Config(_))));
    assert_eq!(gate.pages_served(), 0);
}

#[test]
fn raw_protocol_round_trip() {
    let gate = serve_gate(gate_config(5, 1, Schedule::Strict, 7)).unwrap();
    let client = Client::new();
    let base = gate.url();

    let first = client.get(format!("{base}/page/1")).send().unwrap();
    assert_eq!(first.status(), StatusCode::OK);
    let token = first.headers()[SESSION_HEADER].to_str().unwrap().to_string();

    let second = client.get(format!("{base}/page/2")).header(SESSION_HEADER, &token).send().unwrap();
    assert_eq!(second.status(), StatusCode::UNAUTHORIZED);
    let body: serde_json::Value = second.json().unwrap();
    let id = body["challenge_id"].as_str().unwrap().to_string();

    // Asking again without answering returns the same pending challenge.
    let again: serde_json::Value =
        client.get(format!("{base}/page/2")).header(SESSION_HEADER, &token).send().unwrap().json().unwrap();
    assert_eq!(again["challenge_id"], id.as_str());

    let png = client.get(format!("{base}/captcha/{id}")).send().unwrap();
    assert_eq!(png.headers()["content-type"], "image/png");
    let img = CaptchaImage::from_png_bytes(&png.bytes().unwrap()).unwrap();
    assert_eq!(img.dims(), StyleSpec::default().canvas);

    let answer = |cid: &str, text: &str| -> AnswerReply {
        client
            .post(format!("{base}/answer"))
            .form(&[("challenge_id", cid), ("text", text)])
            .send()
            .unwrap()
            .json()
            .unwrap()
    };
    let r1 = answer(&id, "x");
    assert!(!r1.pass);
    assert_eq!(r1.attempts_left, 2);
    assert!(r1.next_challenge_id.is_none());
    answer(&id, "y");
    let r3 = answer(&id, "z");
    assert_eq!(r3.attempts_left, 0);
    let next = r3.next_challenge_id.expect("rotated challenge");
    assert_ne!(next, id);
    let gone = client.get(format!("{base}/captcha/{id}")).send().unwrap();
    assert_eq!(gone.status(), StatusCode::NOT_FOUND);

    let label = gate.peek_label(&next).unwrap();
    let ok = answer(&next, &format!(" {label} "));
    assert!(ok.pass);
    assert_eq!(ok.session.as_deref(), Some(token.as_str()));
    assert!(gate.peek_label(&next).is_none());

    let after = client.get(format!("{base}/page/2")).header(SESSION_HEADER, &token).send().unwrap();
    assert_eq!(after.status(), StatusCode::OK);

    let unknown = client.post(format!("{base}/answer")).form(&[("challenge_id", "nope"), ("text", "1")]).send().unwrap();
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
}

#[test]
fn responses_never_leak_labels() {
    let gate = serve_gate(gate_config(40, 2, Schedule::Strict, 8)).unwrap();
    let client = Client::new();
    let base = gate.url();
    let mut token: Option<String> = None;
    let mut transcript = String::new();
    let mut labels = Vec::new();
    for n in 1..=40 {
        let mut req = client.get(format!("{base}/page/{n}"));
        if let Some(t) = &token {
            req = req.header(SESSION_HEADER, t);
        }
        let resp = req.send().unwrap();
        // Transport headers carry clock and size digits that can collide
        // with a digit label by chance.
        for (k, v) in resp.headers().iter().filter(|(k, _)| *k != "date" && *k != "content-length") {
            transcript.push_str(&format!("{k}: {}\n", v.to_str().unwrap_or("")));
        }
        token = resp.headers().get(SESSION_HEADER).map(|v| v.to_str().unwrap().to_string());
        let status = resp.status();
        let body = resp.text().unwrap();
        transcript.push_str(&body);
        if status == StatusCode::UNAUTHORIZED {
            let id = serde_json::from_str::<serde_json::Value>(&body).unwrap()["challenge_id"].as_str().unwrap().to_string();
            let label = gate.peek_label(&id).unwrap();
            let wrong = client.post(format!("{base}/answer")).form(&[("challenge_id", id.as_str()), ("text", "0")]).send().unwrap();
            transcript.push_str(&wrong.text().unwrap());
            let right = client.post(format!("{base}/answer")).form(&[("challenge_id", id.as_str()), ("text", label.as_str())]).send().unwrap();
            transcript.push_str(&right.text().unwrap());
            labels.push(label);
        }
    }
    assert!(labels.len() >= 10);
    for label in &labels {
        assert!(!transcript.contains(label.as_str()), "label {label} leaked");
    }
}

#[test]
fn same_seed_gives_same_challenges_and_outcomes() {
    let run = |seed| {
        let gate = serve_gate(gate_config(40, 6, Schedule::Geometric, seed)).unwrap();
        let mut labels = Vec::new();
        struct Recorder<'a> {
            inner: Oracle<'a>,
            seen: &'a mut Vec<(String, Vec<u8>)>,
        }
        impl Solver for Recorder<'_> {
            fn candidates(&mut self, img: &CaptchaImage) -> forge_core::Result<Vec<String>> {
                let out = self.inner.candidates(img)?;
                self.seen.push((out.last().unwrap().clone(), img.to_png_bytes()?));
                Ok(out)
            }
        }
        let mut solver = Recorder { inner: Oracle::new(&gate, vec![1]), seen: &mut labels };
        let stats = crawl_gate(&gate.url(), &mut solver, &CrawlConfig { pages: 40, ..CrawlConfig::default() }).unwrap();
        (stats, labels)
    };
    let (a, la) = run(11);
    let (b, lb) = run(11);
    assert!(a.same_outcome(&b));
    assert_eq!(la, lb);
    assert!(a.challenges_issued >= 2);
    let (_, lc) = run(12);
    assert_ne!(la, lc);
}
