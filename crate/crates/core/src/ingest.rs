//! TCP ingestion service.
//!
//! One thread per connection splits the byte stream into frames, checks
//! sequence continuity, appends each accepted frame to the store and hands
//! it to the analysis sink before reading on. The sink runs on the handler
//! thread, so a slow consumer slows that device's socket and nothing else.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::jsonl::JsonlWriter;
use crate::store::{EcgSampleBatch, SeriesStore, StoreError};
use crate::wire::{DeviceId, FrameSplitter, SplitEvent, TelemetryFrame};

const POLL: Duration = Duration::from_millis(20);
const READ_CHUNK: usize = 64 * 1024;

/// Consumer of accepted frames, called in per-device arrival order.
pub trait AnalysisSink: Send + Sync {
    fn on_frame(&self, frame: &TelemetryFrame);
    /// Called once after every handler has exited.
    fn flush(&self) {}
}

pub struct NullSink;

impl AnalysisSink for NullSink {
    fn on_frame(&self, _: &TelemetryFrame) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqCheck {
    Next,
    Gap { after_seq: u32, missing: u32 },
    Stale,
}

pub fn check_gap(last_seq: u32, seq: u32) -> SeqCheck {
    match seq.checked_sub(last_seq) {
        Some(1) => SeqCheck::Next,
        Some(d) if d > 1 => SeqCheck::Gap {
            after_seq: last_seq,
            missing: d - 1,
        },
        _ => SeqCheck::Stale,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub device_id: DeviceId,
    pub after_seq: u32,
    pub missing_count: u32,
    /// Seconds since the epoch when the gap was noticed.
    pub detected_at: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounters {
    pub frames_ok: u64,
    pub frames_rejected: u64,
    pub duplicates: u64,
    pub gaps: u64,
    pub missing: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub conn_id: u64,
    pub device_id: Option<DeviceId>,
    pub peer: String,
    pub started_at: f64,
    pub last_seq: Option<u32>,
    pub counters: SessionCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum IngestEvent {
    Listening { addr: String },
    SessionOpen { conn_id: u64, peer: String, t: f64 },
    SessionBound { conn_id: u64, device_id: DeviceId, superseded: Option<u64> },
    SessionClose { conn_id: u64, device_id: Option<DeviceId>, reason: String, counters: SessionCounters, t: f64 },
    Gap { conn_id: u64, #[serde(flatten)] gap: GapRecord },
    Reject { conn_id: u64, device_id: Option<DeviceId>, offset: u64, reason: String },
    Resync { conn_id: u64, offset: u64, skipped: u64 },
    Stopped { t: f64 },
}

/// Totals for one device across all of its sessions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTotals {
    pub frames_ok: u64,
    pub records_persisted: u64,
    pub forwarded: u64,
    pub frames_rejected: u64,
    pub duplicates: u64,
    pub missing: u64,
    pub sessions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub sessions_opened: u64,
    pub sessions_closed: u64,
    /// Bytes or frames rejected before a device could be attributed.
    pub unattributed_rejects: u64,
    pub gaps: Vec<GapRecord>,
    pub devices: HashMap<DeviceId, DeviceTotals>,
}

impl IngestStats {
    pub fn device(&self, id: DeviceId) -> DeviceTotals {
        self.devices.get(&id).copied().unwrap_or_default()
    }

    pub fn total_missing(&self) -> u64 {
        self.gaps.iter().map(|g| u64::from(g.missing_count)).sum()
    }
}

#[derive(Debug, Default)]
struct DeviceState {
    last_seq: Option<u32>,
}

#[derive(Debug, Default)]
struct DeviceSlot {
    /// Connection currently allowed to write for this device.
    active: AtomicU64,
    state: Mutex<DeviceState>,
}

struct Shared {
    store: Arc<SeriesStore>,
    sink: Arc<dyn AnalysisSink>,
    log: Arc<JsonlWriter>,
    stop: AtomicBool,
    next_conn: AtomicU64,
    slots: Mutex<HashMap<DeviceId, Arc<DeviceSlot>>>,
    streams: Mutex<HashMap<u64, TcpStream>>,
    stats: Mutex<IngestStats>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn wall_clock_s() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl Shared {
    fn emit(&self, event: IngestEvent) {
        if let Err(e) = self.log.append(&event) {
            log::warn!("ingest log write failed: {e}");
        }
    }

    fn slot(&self, id: DeviceId) -> Arc<DeviceSlot> {
        lock(&self.slots).entry(id).or_default().clone()
    }

    fn totals<R>(&self, id: DeviceId, f: impl FnOnce(&mut DeviceTotals) -> R) -> R {
        f(lock(&self.stats).devices.entry(id).or_default())
    }
}

pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<Vec<JoinHandle<()>>>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> IngestStats {
        lock(&self.shared.stats).clone()
    }

    pub fn active_sessions(&self) -> usize {
        lock(&self.shared.streams).len()
    }

    /// Polls `stats` until `cond` holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, cond: impl Fn(&IngestStats) -> bool) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if cond(&self.stats()) {
                return true;
            }
            if std::time::Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stops accepting, lets every handler drain what it has already
    /// received, waits for all of them, then flushes the sink and store.
    pub fn shutdown(mut self) -> IngestStats {
        self.stop_and_join();
        self.stats()
    }

    fn stop_and_join(&mut self) {
        let Some(acceptor) = self.acceptor.take() else {
            return;
        };
        self.shared.stop.store(true, Ordering::SeqCst);
        let handlers = acceptor.join().unwrap_or_default();
        for h in handlers {
            let _ = h.join();
        }
        self.shared.sink.flush();
        if let Err(e) = self.shared.store.sync() {
            log::warn!("store sync at shutdown failed: {e}");
        }
        self.shared.emit(IngestEvent::Stopped { t: wall_clock_s() });
        let _ = self.shared.log.sync();
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `addr` and starts serving in background threads.
pub fn serve(
    addr: impl ToSocketAddrs,
    store: Arc<SeriesStore>,
    sink: Arc<dyn AnalysisSink>,
    log: Arc<JsonlWriter>,
) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let shared = Arc::new(Shared {
        store,
        sink,
        log,
        stop: AtomicBool::new(false),
        next_conn: AtomicU64::new(1),
        slots: Mutex::new(HashMap::new()),
        streams: Mutex::new(HashMap::new()),
        stats: Mutex::new(IngestStats::default()),
    });
    shared.emit(IngestEvent::Listening {
        addr: local.to_string(),
    });
    let acc_shared = shared.clone();
    let acceptor = thread::Builder::new()
        .name("ingest-accept".into())
        .spawn(move || accept_loop(listener, acc_shared))?;
    Ok(ServiceHandle {
        addr: local,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) -> Vec<JoinHandle<()>> {
    let mut handlers = Vec::new();
    loop {
        let stopping = shared.stop.load(Ordering::SeqCst);
        match listener.accept() {
            Ok((stream, peer)) => {
                let s = shared.clone();
                match thread::Builder::new()
                    .name(format!("ingest-{peer}"))
                    .spawn(move || handle_connection(stream, peer, s))
                {
                    Ok(h) => handlers.push(h),
                    Err(e) => log::error!("cannot spawn handler for {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                // Connections already queued when the stop flag was seen
                // have been taken; their data is still drained.
                if stopping {
                    break;
                }
                thread::sleep(POLL);
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                if stopping {
                    break;
                }
                thread::sleep(POLL);
            }
        }
        handlers.retain(|h| !h.is_finished());
    }
    handlers
}

enum Flow {
    Continue,
    Close(String),
}

struct Handler {
    shared: Arc<Shared>,
    session: Session,
    slot: Option<Arc<DeviceSlot>>,
    stream: TcpStream,
}

fn handle_connection(stream: TcpStream, peer: SocketAddr, shared: Arc<Shared>) {
    let conn_id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    let t = wall_clock_s();
    lock(&shared.stats).sessions_opened += 1;
    shared.emit(IngestEvent::SessionOpen {
        conn_id,
        peer: peer.to_string(),
        t,
    });
    if let Ok(clone) = stream.try_clone() {
        lock(&shared.streams).insert(conn_id, clone);
    }
    let mut h = Handler {
        shared: shared.clone(),
        session: Session {
            conn_id,
            device_id: None,
            peer: peer.to_string(),
            started_at: t,
            last_seq: None,
            counters: SessionCounters::default(),
        },
        slot: None,
        stream,
    };
    let reason = h.run();
    lock(&shared.streams).remove(&conn_id);
    {
        let mut stats = lock(&shared.stats);
        stats.sessions_closed += 1;
    }
    shared.emit(IngestEvent::SessionClose {
        conn_id,
        device_id: h.session.device_id,
        reason,
        counters: h.session.counters,
        t: wall_clock_s(),
    });
}

impl Handler {
    fn run(&mut self) -> String {
        let _ = self.stream.set_nodelay(true);
        if let Err(e) = self.stream.set_read_timeout(Some(POLL)) {
            return format!("socket setup failed: {e}");
        }
        let mut splitter = FrameSplitter::new();
        let mut events = Vec::new();
        let mut buf = vec![0u8; READ_CHUNK];
        let mut draining = false;
        loop {
            if self.superseded() {
                return "superseded".into();
            }
            if !draining && self.shared.stop.load(Ordering::SeqCst) {
                // Read whatever is already buffered, then stop.
                draining = true;
                if self.stream.set_nonblocking(true).is_err() {
                    return "shutdown".into();
                }
            }
            match self.stream.read(&mut buf) {
                Ok(0) => {
                    splitter.finish(&mut events);
                    return match self.process(&mut events) {
                        Flow::Continue => "eof".into(),
                        Flow::Close(r) => r,
                    };
                }
                Ok(n) => {
                    splitter.push(&buf[..n], &mut events);
                    if let Flow::Close(r) = self.process(&mut events) {
                        return r;
                    }
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if draining {
                        splitter.finish(&mut events);
                        return match self.process(&mut events) {
                            Flow::Continue => "shutdown".into(),
                            Flow::Close(r) => r,
                        };
                    }
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    if self.superseded() {
                        return "superseded".into();
                    }
                    return format!("read error: {e}");
                }
            }
        }
    }

    fn superseded(&self) -> bool {
        self.slot
            .as_ref()
            .is_some_and(|s| s.active.load(Ordering::SeqCst) != self.session.conn_id)
    }

    fn process(&mut self, events: &mut Vec<SplitEvent>) -> Flow {
        for ev in events.drain(..) {
            match ev {
                SplitEvent::Frame { offset, frame } => {
                    if let Flow::Close(r) = self.accept_frame(offset, frame) {
                        return Flow::Close(r);
                    }
                }
                SplitEvent::Rejected { offset, error } => {
                    self.reject(offset, error.code().to_string());
                }
                SplitEvent::Resync { offset, skipped } => {
                    self.shared.emit(IngestEvent::Resync {
                        conn_id: self.session.conn_id,
                        offset,
                        skipped,
                    });
                }
            }
        }
        Flow::Continue
    }

    fn reject(&mut self, offset: u64, reason: String) {
        self.session.counters.frames_rejected += 1;
        match self.session.device_id {
            Some(id) => self.shared.totals(id, |t| t.frames_rejected += 1),
            None => lock(&self.shared.stats).unattributed_rejects += 1,
        }
        self.shared.emit(IngestEvent::Reject {
            conn_id: self.session.conn_id,
            device_id: self.session.device_id,
            offset,
            reason,
        });
    }

    fn bind(&mut self, id: DeviceId) {
        let slot = self.shared.slot(id);
        let previous = {
            // Taking the state lock orders the takeover after any write the
            // old connection has in progress.
            let _guard = lock(&slot.state);
            slot.active.swap(self.session.conn_id, Ordering::SeqCst)
        };
        let superseded = (previous != 0).then_some(previous);
        if let Some(old) = superseded {
            if let Some(s) = lock(&self.shared.streams).get(&old) {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        self.session.device_id = Some(id);
        self.slot = Some(slot);
        self.shared.totals(id, |t| t.sessions += 1);
        self.shared.emit(IngestEvent::SessionBound {
            conn_id: self.session.conn_id,
            device_id: id,
            superseded,
        });
    }

    fn accept_frame(&mut self, offset: u64, frame: TelemetryFrame) -> Flow {
        match self.session.device_id {
            None => self.bind(frame.device_id),
            Some(id) if id != frame.device_id => {
                self.reject(offset, format!("device_mismatch:{}", frame.device_id));
                return Flow::Continue;
            }
            Some(_) => {}
        }
        let id = frame.device_id;
        let slot = self.slot.clone().expect("bound");
        let mut state = lock(&slot.state);
        if slot.active.load(Ordering::SeqCst) != self.session.conn_id {
            return Flow::Close("superseded".into());
        }

        let first_in_session = self.session.last_seq.is_none();
        if let Some(last) = state.last_seq {
            match check_gap(last, frame.seq) {
                SeqCheck::Next => {}
                SeqCheck::Gap { after_seq, missing } => {
                    let gap = GapRecord {
                        device_id: id,
                        after_seq,
                        missing_count: missing,
                        detected_at: wall_clock_s(),
                    };
                    self.session.counters.gaps += 1;
                    self.session.counters.missing += u64::from(missing);
                    {
                        let mut stats = lock(&self.shared.stats);
                        stats.gaps.push(gap.clone());
                        stats.devices.entry(id).or_default().missing += u64::from(missing);
                    }
                    self.shared.emit(IngestEvent::Gap {
                        conn_id: self.session.conn_id,
                        gap,
                    });
                }
                // A reconnecting device that restarted its counter gets a
                // fresh baseline; time ordering is still enforced by the store.
                SeqCheck::Stale if first_in_session => {}
                SeqCheck::Stale => {
                    self.session.counters.duplicates += 1;
                    self.shared.totals(id, |t| t.duplicates += 1);
                    return Flow::Continue;
                }
            }
        }

        let batch = EcgSampleBatch {
            device_id: id,
            t_start_us: frame.t_start_us,
            fs: frame.fs,
            codes: frame.samples.clone(),
        };
        match self.shared.store.append(&batch) {
            Ok(()) => {}
            Err(e @ StoreError::OutOfOrder { .. }) => {
                drop(state);
                self.reject(offset, format!("store:{e}"));
                return Flow::Continue;
            }
            Err(e) => {
                drop(state);
                self.reject(offset, format!("store:{e}"));
                return Flow::Close(format!("store unavailable: {e}"));
            }
        }
        state.last_seq = Some(frame.seq);
        self.session.last_seq = Some(frame.seq);
        self.session.counters.frames_ok += 1;
        self.shared.totals(id, |t| {
            t.frames_ok += 1;
            t.records_persisted += 1;
        });
        self.shared.sink.on_frame(&frame);
        self.shared.totals(id, |t| t.forwarded += 1);
        drop(state);
        Flow::Continue
    }
}
