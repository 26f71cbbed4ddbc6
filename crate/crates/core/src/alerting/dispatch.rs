//! Alert delivery: webhook with bounded retries, local alert log, and a
//! dead-letter file for events that could not be delivered.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::evaluate::{AlertEvent, AlertKind};
use crate::analysis::Rhythm;
use crate::jsonl::JsonlWriter;

/// Body POSTed to the webhook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertPayload {
    pub rule_id: String,
    pub device_id: String,
    pub kind: AlertKind,
    pub t: f64,
    pub bpm: Option<f64>,
    pub temperature_c: Option<f64>,
    pub alcohol_level: Option<f64>,
    pub rhythm: Rhythm,
    pub lead_ok: bool,
}

impl From<&AlertEvent> for AlertPayload {
    fn from(e: &AlertEvent) -> Self {
        AlertPayload {
            rule_id: e.rule_id.clone(),
            device_id: e.device_id.to_hex(),
            kind: e.kind,
            t: e.t,
            bpm: e.snapshot.bpm,
            temperature_c: e.snapshot.temperature_c,
            alcohol_level: e.snapshot.alcohol_level,
            rhythm: e.snapshot.rhythm,
            lead_ok: e.snapshot.lead_ok,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Delivered,
    DeadLetter,
    LogOnly,
}

/// One line of the alert log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertLogRecord {
    #[serde(flatten)]
    pub payload: AlertPayload,
    pub delivery: Delivery,
    pub attempts: u32,
}

/// One line of the dead-letter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetterRecord {
    #[serde(flatten)]
    pub payload: AlertPayload,
    pub attempts: u32,
    pub last_error: String,
}

/// Where webhook bodies go.
pub trait WebhookTransport: Send + Sync {
    fn post(&self, body: &str) -> Result<(), String>;
}

pub struct HttpWebhook {
    url: String,
    agent: ureq::Agent,
}

impl HttpWebhook {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl WebhookTransport for HttpWebhook {
    fn post(&self, body: &str) -> Result<(), String> {
        self.agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, doubling each time.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    pub delivery: Delivery,
    pub attempts: u32,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DispatchCounts {
    pub submitted: u64,
    pub delivered: u64,
    pub dead_lettered: u64,
}

/// Shared alert dispatcher. Submissions are serialized so each sink sees
/// events in submission order.
pub struct Dispatcher {
    webhook: Option<Box<dyn WebhookTransport>>,
    retry: RetryPolicy,
    alert_log: JsonlWriter,
    dead_letter: JsonlWriter,
    sleep: fn(Duration),
    order: Mutex<()>,
    submitted: AtomicU64,
    delivered: AtomicU64,
    dead_lettered: AtomicU64,
}

impl Dispatcher {
    pub fn new(
        webhook: Option<Box<dyn WebhookTransport>>,
        retry: RetryPolicy,
        alert_log: JsonlWriter,
        dead_letter: JsonlWriter,
    ) -> Self {
        Self {
            webhook,
            retry,
            alert_log,
            dead_letter,
            sleep: std::thread::sleep,
            order: Mutex::new(()),
            submitted: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            dead_lettered: AtomicU64::new(0),
        }
    }

    /// Replaces the backoff sleep, e.g. with a no-op in tests.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn counts(&self) -> DispatchCounts {
        DispatchCounts {
            submitted: self.submitted.load(Ordering::SeqCst),
            delivered: self.delivered.load(Ordering::SeqCst),
            dead_lettered: self.dead_lettered.load(Ordering::SeqCst),
        }
    }

    pub fn dispatch(&self, event: &AlertEvent) -> Receipt {
        let _ordered = self.order.lock().expect("dispatch lock");
        self.submitted.fetch_add(1, Ordering::SeqCst);
        let payload = AlertPayload::from(event);
        let receipt = match &self.webhook {
            None => Receipt {
                delivery: Delivery::LogOnly,
                attempts: 0,
                last_error: None,
            },
            Some(hook) => self.deliver(hook.as_ref(), &payload),
        };
        if receipt.delivery == Delivery::DeadLetter {
            let record = DeadLetterRecord {
                payload: payload.clone(),
                attempts: receipt.attempts,
                last_error: receipt.last_error.clone().unwrap_or_default(),
            };
            if let Err(e) = self.dead_letter.append(&record).and_then(|_| self.dead_letter.sync()) {
                log::error!("dead-letter write failed for rule {}: {e}", payload.rule_id);
            }
            log::warn!(
                "alert {} for {} parked after {} attempts",
                payload.rule_id,
                payload.device_id,
                receipt.attempts
            );
        }
        let record = AlertLogRecord {
            payload,
            delivery: receipt.delivery,
            attempts: receipt.attempts,
        };
        if let Err(e) = self.alert_log.append(&record) {
            log::error!("alert log write failed: {e}");
        }
        receipt
    }

    fn deliver(&self, hook: &dyn WebhookTransport, payload: &AlertPayload) -> Receipt {
        let body = serde_json::to_string(payload).expect("payload serializes");
        let mut last_error = None;
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match hook.post(&body) {
                Ok(()) => {
                    self.delivered.fetch_add(1, Ordering::SeqCst);
                    return Receipt {
                        delivery: Delivery::Delivered,
                        attempts: attempt,
                        last_error,
                    };
                }
                Err(e) => {
                    last_error = Some(e);
                    if attempt < self.retry.max_attempts {
                        (self.sleep)(self.retry.delay_after(attempt));
                    }
                }
            }
        }
        self.dead_lettered.fetch_add(1, Ordering::SeqCst);
        Receipt {
            delivery: Delivery::DeadLetter,
            attempts: self.retry.max_attempts.max(1),
            last_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::VitalsSnapshot;
    use crate::jsonl::parse_lines;
    use crate::wire::DeviceId;
    use std::sync::Arc;

    /// Fails the first `failures` posts, then succeeds; records every body.
    struct ScriptedSink {
        failures: u32,
        calls: Mutex<Vec<String>>,
    }

    impl WebhookTransport for Arc<ScriptedSink> {
        fn post(&self, body: &str) -> Result<(), String> {
            let mut calls = self.calls.lock().unwrap();
            calls.push(body.to_string());
            if calls.len() as u32 <= self.failures {
                Err(format!("HTTP 503 on attempt {}", calls.len()))
            } else {
                Ok(())
            }
        }
    }

    fn event() -> AlertEvent {
        AlertEvent {
            rule_id: "fever".into(),
            device_id: DeviceId(*b"abcdefgh"),
            kind: AlertKind::Raise,
            t: 105.0,
            snapshot: VitalsSnapshot {
                device_id: DeviceId(*b"abcdefgh"),
                t: 105.0,
                bpm: Some(80.0),
                rr_mean: Some(0.75),
                rr_sdnn: Some(0.01),
                rr_rmssd: Some(0.01),
                rhythm: Rhythm::NormalSinus,
                temperature_c: Some(38.5),
                alcohol_level: Some(0.0),
                lead_ok: true,
            },
        }
    }

    fn no_sleep(_: Duration) {}

    fn dispatcher(
        failures: u32,
    ) -> (Dispatcher, Arc<ScriptedSink>, Arc<Mutex<Vec<u8>>>, Arc<Mutex<Vec<u8>>>) {
        let sink = Arc::new(ScriptedSink {
            failures,
            calls: Mutex::new(Vec::new()),
        });
        let (log, log_buf) = JsonlWriter::memory();
        let (dl, dl_buf) = JsonlWriter::memory();
        let d = Dispatcher::new(Some(Box::new(sink.clone())), RetryPolicy::default(), log, dl)
            .with_sleep(no_sleep);
        (d, sink, log_buf, dl_buf)
    }

    #[test]
    fn healthy_sink() {
        let (d, sink, log, dl) = dispatcher(0);
        let r = d.dispatch(&event());
        assert_eq!(r.delivery, Delivery::Delivered);
        assert_eq!(r.attempts, 1);
        assert_eq!(sink.calls.lock().unwrap().len(), 1);
        let lines: Vec<AlertLogRecord> = parse_lines(&log.lock().unwrap());
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].payload.rule_id, "fever");
        assert_eq!(lines[0].payload.temperature_c, Some(38.5));
        assert!(dl.lock().unwrap().is_empty());
        let body: AlertPayload =
            serde_json::from_str(&sink.calls.lock().unwrap()[0]).unwrap();
        assert_eq!(body.device_id, "6162636465666768");
    }

    #[test]
    fn two_failures_then_success() {
        let (d, sink, _, dl) = dispatcher(2);
        let r = d.dispatch(&event());
        assert_eq!(r.attempts, 3);
        assert_eq!(r.delivery, Delivery::Delivered);
        let calls = sink.calls.lock().unwrap();
        assert_eq!(calls.len(), 3);
        assert!(calls.iter().all(|c| c == &calls[0]));
        assert!(dl.lock().unwrap().is_empty());
        assert_eq!(
            d.counts(),
            DispatchCounts {
                submitted: 1,
                delivered: 1,
                dead_lettered: 0
            }
        );
    }

    #[test]
    fn dead_sink_parks_the_event() {
        let (d, sink, log, dl) = dispatcher(u32::MAX);
        let r = d.dispatch(&event());
        assert_eq!(r.delivery, Delivery::DeadLetter);
        assert_eq!(r.attempts, 5);
        assert_eq!(sink.calls.lock().unwrap().len(), 5);
        let parked: Vec<DeadLetterRecord> = parse_lines(&dl.lock().unwrap());
        assert_eq!(parked.len(), 1);
        assert_eq!(parked[0].attempts, 5);
        assert!(parked[0].last_error.contains("503"));
        let logged: Vec<AlertLogRecord> = parse_lines(&log.lock().unwrap());
        assert_eq!(logged[0].delivery, Delivery::DeadLetter);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_after(1), Duration::from_millis(200));
        assert_eq!(p.delay_after(2), Duration::from_millis(400));
        assert_eq!(p.delay_after(4), Duration::from_millis(1600));
        assert_eq!(p.delay_after(10), Duration::from_secs(5));
    }

    #[test]
    fn log_only_without_webhook() {
        let (log, buf) = JsonlWriter::memory();
        let d = Dispatcher::new(None, RetryPolicy::default(), log, JsonlWriter::discard());
        assert_eq!(d.dispatch(&event()).delivery, Delivery::LogOnly);
        assert_eq!(parse_lines::<AlertLogRecord>(&buf.lock().unwrap()).len(), 1);
    }
}
