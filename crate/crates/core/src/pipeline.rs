//! Glue between ingest, per-device analysis and alerting.

use std::collections::HashMap;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use crate::alerting::{AlertEvent, AlertRule, DeviceRules, Dispatcher};
use crate::analysis::{AnalysisOutput, AnalyzerConfig, DeviceAnalyzer, VitalsSnapshot};
use crate::ingest::AnalysisSink;
use crate::jsonl::JsonlWriter;
use crate::wire::{DeviceId, TelemetryFrame};

struct DeviceMonitor {
    analyzer: DeviceAnalyzer,
    rules: DeviceRules,
    peaks: u64,
    last: Option<VitalsSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorStats {
    pub frames: u64,
    pub peaks: u64,
    pub snapshots: u64,
    pub alerts: u64,
}

/// Runs one analyzer and rule set per device. Alerts are delivered on a
/// separate thread so a slow webhook never stalls ingestion.
pub struct MonitorSink {
    cfg: AnalyzerConfig,
    rules: Vec<AlertRule>,
    devices: Mutex<HashMap<DeviceId, Arc<Mutex<DeviceMonitor>>>>,
    vitals_log: JsonlWriter,
    alerts: Mutex<Option<Sender<AlertEvent>>>,
    dispatcher: Mutex<Option<JoinHandle<()>>>,
    stats: Mutex<MonitorStats>,
    raised: Mutex<Vec<AlertEvent>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl MonitorSink {
    pub fn new(
        cfg: AnalyzerConfig,
        rules: Vec<AlertRule>,
        dispatcher: Dispatcher,
        vitals_log: JsonlWriter,
    ) -> Self {
        let (tx, rx) = mpsc::channel::<AlertEvent>();
        let worker = thread::Builder::new()
            .name("alert-dispatch".into())
            .spawn(move || {
                for event in rx {
                    dispatcher.dispatch(&event);
                }
            })
            .expect("spawn alert dispatcher");
        Self {
            cfg,
            rules,
            devices: Mutex::new(HashMap::new()),
            vitals_log,
            alerts: Mutex::new(Some(tx)),
            dispatcher: Mutex::new(Some(worker)),
            stats: Mutex::new(MonitorStats::default()),
            raised: Mutex::new(Vec::new()),
        }
    }

    pub fn stats(&self) -> MonitorStats {
        lock(&self.stats).clone()
    }

    /// Every alert transition seen so far, in emission order.
    pub fn alert_events(&self) -> Vec<AlertEvent> {
        lock(&self.raised).clone()
    }

    pub fn latest(&self, id: DeviceId) -> Option<VitalsSnapshot> {
        let dev = lock(&self.devices).get(&id).cloned()?;
        let snap = lock(&dev).last.clone();
        snap
    }

    fn monitor(&self, id: DeviceId) -> Arc<Mutex<DeviceMonitor>> {
        lock(&self.devices)
            .entry(id)
            .or_insert_with(|| {
                Arc::new(Mutex::new(DeviceMonitor {
                    analyzer: DeviceAnalyzer::new(id, self.cfg),
                    rules: DeviceRules::new(id, &self.rules),
                    peaks: 0,
                    last: None,
                }))
            })
            .clone()
    }
}

impl AnalysisSink for MonitorSink {
    fn on_frame(&self, frame: &TelemetryFrame) {
        let dev = self.monitor(frame.device_id);
        let mut dev = lock(&dev);
        let mut out = AnalysisOutput::default();
        dev.analyzer.push_frame(frame, &mut out);
        dev.peaks += out.peaks.len() as u64;
        let mut events = Vec::new();
        for snap in &out.snapshots {
            if let Err(e) = self.vitals_log.append(snap) {
                log::warn!("vitals log write failed: {e}");
            }
            dev.rules.push(snap, &mut events);
        }
        if let Some(s) = out.snapshots.last() {
            dev.last = Some(s.clone());
        }
        drop(dev);
        {
            let mut st = lock(&self.stats);
            st.frames += 1;
            st.peaks += out.peaks.len() as u64;
            st.snapshots += out.snapshots.len() as u64;
            st.alerts += events.len() as u64;
        }
        if events.is_empty() {
            return;
        }
        lock(&self.raised).extend(events.iter().cloned());
        if let Some(tx) = lock(&self.alerts).as_ref() {
            for e in events {
                let _ = tx.send(e);
            }
        }
    }

    fn flush(&self) {
        drop(lock(&self.alerts).take());
        if let Some(worker) = lock(&self.dispatcher).take() {
            let _ = worker.join();
        }
        if let Err(e) = self.vitals_log.sync() {
            log::warn!("vitals log sync failed: {e}");
        }
    }
}

impl Drop for MonitorSink {
    fn drop(&mut self) {
        self.flush();
    }
}
