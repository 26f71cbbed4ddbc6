use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cardiolink::alerting::{
    default_rules, evaluate, AlertKind, AlertLogRecord, AlertRule, Condition, DeadLetterRecord,
    Delivery, Dispatcher, HttpWebhook, Metric, RetryPolicy, WebhookTransport,
};
use cardiolink::analysis::{Rhythm, VitalsSnapshot};
use cardiolink::jsonl::{parse_lines, JsonlWriter};
use cardiolink::wire::DeviceId;
use proptest::prelude::*;

fn snap(t: f64, bpm: Option<f64>, temp: f64, rhythm: Rhythm) -> VitalsSnapshot {
    VitalsSnapshot {
        device_id: DeviceId::default(),
        t,
        bpm,
        rr_mean: bpm.map(|b| 60.0 / b),
        rr_sdnn: bpm.map(|_| 0.01),
        rr_rmssd: bpm.map(|_| 0.01),
        rhythm,
        temperature_c: Some(temp),
        alcohol_level: Some(0.0),
        lead_ok: true,
    }
}

fn temp_rule(sustain: f64, hyst: f64) -> AlertRule {
    AlertRule {
        rule_id: "fever".into(),
        metric: Metric::TemperatureC,
        condition: Condition::AtLeast(38.0),
        sustain_s: sustain,
        hysteresis: hyst,
    }
}

fn trace() -> impl Strategy<Value = Vec<VitalsSnapshot>> {
    prop::collection::vec(
        (
            36.0f64..40.0,
            prop::option::weighted(0.9, 40.0f64..160.0),
            prop::sample::select(Rhythm::ALL.to_vec()),
            1u32..3,
        ),
        1..300,
    )
    .prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(temp, bpm, r, dt)| {
                t += f64::from(dt);
                snap(t, bpm, temp, r)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn events_alternate(tr in trace()) {
        for rule in default_rules().iter().chain([temp_rule(0.0, 0.0)].iter()) {
            let events = evaluate(rule, &tr);
            for (i, e) in events.iter().enumerate() {
                let expected = if i % 2 == 0 { AlertKind::Raise } else { AlertKind::Clear };
                prop_assert_eq!(e.kind, expected);
            }
        }
    }

    #[test]
    fn longer_sustain_never_raises_more(tr in trace(), a in 0.0f64..20.0, b in 0.0f64..20.0, h in 0.0f64..1.0) {
        let (short, long) = (a.min(b), a.max(b));
        let raises = |s: f64| evaluate(&temp_rule(s, h), &tr).iter().filter(|e| e.kind == AlertKind::Raise).count();
        prop_assert!(raises(long) <= raises(short));
    }

    #[test]
    fn replay_is_deterministic(tr in trace()) {
        for rule in default_rules() {
            prop_assert_eq!(evaluate(&rule, &tr), evaluate(&rule, &tr));
        }
    }

    #[test]
    fn every_event_is_delivered_or_parked(tr in trace(), healthy_every in 1u32..4) {
        struct Flaky { n: AtomicU32, every: u32 }
        impl WebhookTransport for Flaky {
            fn post(&self, _: &str) -> Result<(), String> {
                let k = self.n.fetch_add(1, Ordering::SeqCst);
                if k % (self.every * 7) < 6 { Err("503".into()) } else { Ok(()) }
            }
        }
        let (log, log_buf) = JsonlWriter::memory();
        let (dl, dl_buf) = JsonlWriter::memory();
        let d = Dispatcher::new(
            Some(Box::new(Flaky { n: AtomicU32::new(0), every: healthy_every })),
            RetryPolicy::default(),
            log,
            dl,
        )
        .with_sleep(|_| {});
        let mut raised = 0;
        for rule in default_rules() {
            for e in evaluate(&rule, &tr) {
                raised += 1;
                d.dispatch(&e);
            }
        }
        let c = d.counts();
        prop_assert_eq!(c.submitted, raised);
        prop_assert_eq!(c.delivered + c.dead_lettered, raised);
        let logged: Vec<AlertLogRecord> = parse_lines(&log_buf.lock().unwrap());
        let parked: Vec<DeadLetterRecord> = parse_lines(&dl_buf.lock().unwrap());
        prop_assert_eq!(logged.len() as u64, raised);
        prop_assert_eq!(parked.len() as u64, c.dead_lettered);
    }
}

/// Minimal HTTP responder answering each request with the next status code.
fn http_stub(statuses: Vec<u16>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/alerts", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    thread::spawn(move || {
        for status in statuses {
            let Ok((mut s, _)) = listener.accept() else { return };
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if r.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            r.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(String::from_utf8(body).unwrap());
            let _ = write!(s, "HTTP/1.1 {status} X\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
        }
    });
    (url, bodies)
}

#[test]
fn http_webhook_retries_then_delivers() {
    let (url, bodies) = http_stub(vec![500, 503, 200]);
    let (log, log_buf) = JsonlWriter::memory();
    let d = Dispatcher::new(
        Some(Box::new(HttpWebhook::new(url, Duration::from_secs(2)))),
        RetryPolicy::default(),
        log,
        JsonlWriter::discard(),
    )
    .with_sleep(|_| {});
    let tr: Vec<_> = (0..20).map(|i| snap(f64::from(i), Some(72.0), 39.0, Rhythm::NormalSinus)).collect();
    let e = evaluate(&temp_rule(5.0, 0.5), &tr).remove(0);
    let receipt = d.dispatch(&e);
    assert_eq!(receipt.delivery, Delivery::Delivered);
    assert_eq!(receipt.attempts, 3);
    let bodies = bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let v: serde_json::Value = serde_json::from_str(&bodies[2]).unwrap();
    assert_eq!(v["rule_id"], "fever");
    assert_eq!(v["kind"], "raise");
    let logged: Vec<AlertLogRecord> = parse_lines(&log_buf.lock().unwrap());
    assert_eq!(logged[0].delivery, Delivery::Delivered);
}

#[test]
fn unreachable_webhook_dead_letters() {
    // Bind and drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let dl_path = dir.path().join("dead.jsonl");
    let d = Dispatcher::new(
        Some(Box::new(HttpWebhook::new(format!("http://127.0.0.1:{port}/x"), Duration::from_millis(300)))),
        RetryPolicy::default(),
        JsonlWriter::discard(),
        JsonlWriter::open(&dl_path).unwrap(),
    )
    .with_sleep(|_| {});
    let tr: Vec<_> = (0..20).map(|i| snap(f64::from(i), Some(72.0), 39.0, Rhythm::NormalSinus)).collect();
    let e = evaluate(&temp_rule(5.0, 0.5), &tr).remove(0);
    assert_eq!(d.dispatch(&e).delivery, Delivery::DeadLetter);
    let parked: Vec<DeadLetterRecord> = cardiolink::jsonl::read_records(&dl_path).unwrap();
    assert_eq!(parked.len(), 1);
    assert_eq!(parked[0].attempts, 5);
}
