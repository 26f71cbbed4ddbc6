//! `serve`: ingest service with live analysis and alert dispatch.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cardiolink::alerting::{Dispatcher, HttpWebhook, RetryPolicy, WebhookTransport};
use cardiolink::ingest::{serve, IngestStats};
use cardiolink::jsonl::JsonlWriter;
use cardiolink::pipeline::{MonitorSink, MonitorStats};
use cardiolink::store::SeriesStore;

use crate::error::CliError;
use crate::settings::{LogPaths, Settings};

#[derive(Debug, Clone)]
pub struct ServeSummary {
    pub ingest: IngestStats,
    pub monitor: MonitorStats,
}

fn open_log(path: &std::path::Path) -> Result<JsonlWriter, CliError> {
    JsonlWriter::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

/// Runs until `stop` is set, then drains and flushes everything.
///
/// `on_ready` gets the bound address once the listener is up.
pub fn run(
    settings: &Settings,
    stop: Arc<AtomicBool>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<ServeSummary, CliError> {
    let rules = settings.alert_rules()?;
    let (store, recovery) = SeriesStore::open_with(&settings.store, settings.store_options())
        .map_err(|e| CliError::Data(format!("cannot open store {}: {e}", settings.store.display())))?;
    if recovery.truncated_bytes > 0 || recovery.discarded_segments > 0 {
        log::warn!(
            "store recovery: truncated {} bytes, discarded {} segments",
            recovery.truncated_bytes,
            recovery.discarded_segments
        );
    }
    let logs = LogPaths::under(&settings.store);
    let webhook = settings.webhook_url.as_ref().map(|url| {
        Box::new(HttpWebhook::new(url.clone(), settings.webhook_timeout)) as Box<dyn WebhookTransport>
    });
    let dispatcher = Dispatcher::new(
        webhook,
        RetryPolicy::default(),
        open_log(&logs.alerts)?,
        open_log(&logs.dead_letter)?,
    );
    let sink = Arc::new(MonitorSink::new(
        settings.analyzer_config(),
        rules,
        dispatcher,
        open_log(&logs.vitals)?,
    ));
    let service_log = Arc::new(open_log(&logs.service)?);
    let handle = serve(settings.listen.as_str(), Arc::new(store), sink.clone(), service_log)
        .map_err(|e| CliError::Connectivity(format!("cannot listen on {}: {e}", settings.listen)))?;
    on_ready(handle.local_addr());
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(20));
    }
    let ingest = handle.shutdown();
    Ok(ServeSummary {
        ingest,
        monitor: sink.stats(),
    })
}
