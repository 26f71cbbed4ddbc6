//! Append-only per-device sample store.
//!
//! Each device owns a directory of segment files. A segment is a fixed
//! 32-byte header followed by CRC-protected records; the byte layout is
//! described in `STORAGE.md`. Appends go to the newest segment only, and a
//! record becomes visible to queries once it has been written in full.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{sample_offset_us, DeviceId, MAX_CODE};

pub const SEGMENT_MAGIC: [u8; 8] = *b"ECGSEG01";
pub const SEGMENT_HEADER_LEN: usize = 32;
/// `t_start_us` + `n` before the codes, CRC after.
pub const RECORD_OVERHEAD: usize = 8 + 2 + 4;
pub const DEFAULT_MAX_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
pub const DEFAULT_MAX_SEGMENT_SPAN_US: u64 = 24 * 3600 * 1_000_000;

pub const fn record_len(n: usize) -> usize {
    RECORD_OVERHEAD + 2 * n
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcgSampleBatch {
    pub device_id: DeviceId,
    pub t_start_us: u64,
    pub fs: u16,
    pub codes: Vec<u16>,
}

impl EcgSampleBatch {
    /// One past the last sample time.
    pub fn t_end_us(&self) -> u64 {
        self.t_start_us + sample_offset_us(self.codes.len() as u64, self.fs)
    }

    /// Whether the batch touches the half-open window `[t0, t1)`.
    pub fn overlaps(&self, t0: u64, t1: u64) -> bool {
        if t0 >= t1 {
            return false;
        }
        if self.codes.is_empty() {
            return self.t_start_us >= t0 && self.t_start_us < t1;
        }
        self.t_start_us < t1 && self.t_end_us() > t0
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record at {t_start_us} us is not after the last stored record at {last_us} us")]
    OutOfOrder { t_start_us: u64, last_us: u64 },
    #[error("batch of {0} samples does not fit one record")]
    TooManySamples(usize),
    #[error("sample code {0} exceeds the 10-bit range")]
    SampleOutOfRange(u16),
    #[error("sampling rate must be positive")]
    ZeroRate,
    #[error("corrupt segment {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// Each record is handed to the OS before `append` returns.
    #[default]
    Flush,
    /// Each record is also fsynced.
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    pub max_segment_bytes: u64,
    pub max_segment_span_us: u64,
    pub durability: Durability,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            max_segment_bytes: DEFAULT_MAX_SEGMENT_BYTES,
            max_segment_span_us: DEFAULT_MAX_SEGMENT_SPAN_US,
            durability: Durability::Flush,
        }
    }
}

/// What reopening a store found and repaired.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub segments: usize,
    pub records: u64,
    /// Bytes cut from torn or corrupt segment tails.
    pub truncated_bytes: u64,
    /// Segment files whose header never made it to disk.
    pub discarded_segments: usize,
}

#[derive(Debug, Clone)]
struct SegmentInfo {
    path: PathBuf,
    fs: u16,
    first_t: u64,
    /// End of the last complete record.
    committed: u64,
    records: u64,
    last_t: Option<u64>,
    last_end_us: u64,
}

#[derive(Debug)]
struct DeviceSeries {
    dir: PathBuf,
    segments: Vec<SegmentInfo>,
    writer: Option<File>,
}

impl DeviceSeries {
    fn last_t(&self) -> Option<u64> {
        self.segments.iter().rev().find_map(|s| s.last_t)
    }
}

#[derive(Debug)]
pub struct SeriesStore {
    root: PathBuf,
    opts: StoreOptions,
    devices: Mutex<HashMap<DeviceId, Arc<Mutex<DeviceSeries>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn segment_file_name(first_t: u64) -> String {
    format!("seg-{first_t:020}.seg")
}

pub fn encode_segment_header(device_id: DeviceId, fs: u16, first_t: u64) -> [u8; SEGMENT_HEADER_LEN] {
    let mut h = [0u8; SEGMENT_HEADER_LEN];
    h[0..8].copy_from_slice(&SEGMENT_MAGIC);
    h[8..16].copy_from_slice(&device_id.0);
    h[16..18].copy_from_slice(&fs.to_be_bytes());
    // 18..20 reserved, zero
    h[20..28].copy_from_slice(&first_t.to_be_bytes());
    let crc = crc32fast::hash(&h[..28]);
    h[28..32].copy_from_slice(&crc.to_be_bytes());
    h
}

/// Parses a header, returning `(device_id, fs, first_t)`.
pub fn decode_segment_header(h: &[u8]) -> Result<(DeviceId, u16, u64), String> {
    if h.len() < SEGMENT_HEADER_LEN {
        return Err("short header".into());
    }
    if h[0..8] != SEGMENT_MAGIC {
        return Err("bad magic".into());
    }
    let crc = u32::from_be_bytes(h[28..32].try_into().unwrap());
    if crc32fast::hash(&h[..28]) != crc {
        return Err("header checksum mismatch".into());
    }
    let mut id = [0u8; 8];
    id.copy_from_slice(&h[8..16]);
    let fs = u16::from_be_bytes([h[16], h[17]]);
    if fs == 0 {
        return Err("zero sampling rate".into());
    }
    Ok((DeviceId(id), fs, u64::from_be_bytes(h[20..28].try_into().unwrap())))
}

pub fn encode_record(t_start_us: u64, codes: &[u16], out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&t_start_us.to_be_bytes());
    out.extend_from_slice(&(codes.len() as u16).to_be_bytes());
    for c in codes {
        out.extend_from_slice(&c.to_be_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

/// Decodes the record at the front of `buf`, or `None` if it is torn or corrupt.
pub fn decode_record(buf: &[u8]) -> Option<(u64, Vec<u16>, usize)> {
    if buf.len() < RECORD_OVERHEAD {
        return None;
    }
    let t = u64::from_be_bytes(buf[0..8].try_into().unwrap());
    let n = u16::from_be_bytes([buf[8], buf[9]]) as usize;
    let len = record_len(n);
    if buf.len() < len {
        return None;
    }
    let body = &buf[..len - 4];
    let crc = u32::from_be_bytes(buf[len - 4..len].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return None;
    }
    let codes: Vec<u16> = body[10..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    if codes.iter().any(|&c| c > MAX_CODE) {
        return None;
    }
    Some((t, codes, len))
}

/// Scans a segment, stopping at the first record that is torn, corrupt or
/// not strictly later than its predecessor.
fn scan_segment(bytes: &[u8], fs: u16, after: Option<u64>) -> (u64, u64, Option<u64>, u64) {
    let mut off = SEGMENT_HEADER_LEN;
    let mut records = 0;
    let mut last_t = None;
    let mut last_end = 0;
    let mut prev = after;
    while let Some((t, codes, len)) = decode_record(&bytes[off..]) {
        if prev.is_some_and(|p| t <= p) {
            break;
        }
        prev = Some(t);
        last_t = Some(t);
        last_end = t + sample_offset_us(codes.len() as u64, fs);
        records += 1;
        off += len;
    }
    (off as u64, records, last_t, last_end)
}

impl SeriesStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default()).map(|(s, _)| s)
    }

    /// Opens or creates a store, repairing torn tails left by an abrupt stop.
    pub fn open_with(
        root: impl AsRef<Path>,
        opts: StoreOptions,
    ) -> Result<(Self, RecoveryReport), StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut report = RecoveryReport::default();
        let mut devices = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            let Some(id) = entry
                .file_name()
                .to_str()
                .and_then(|n| n.parse::<DeviceId>().ok())
            else {
                continue;
            };
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let series = recover_device(id, entry.path(), &mut report)?;
            devices.insert(id, Arc::new(Mutex::new(series)));
        }
        Ok((
            Self {
                root,
                opts,
                devices: Mutex::new(devices),
            },
            report,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn options(&self) -> StoreOptions {
        self.opts
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        let mut ids: Vec<_> = lock(&self.devices).keys().copied().collect();
        ids.sort();
        ids
    }

    fn series(&self, id: DeviceId) -> Option<Arc<Mutex<DeviceSeries>>> {
        lock(&self.devices).get(&id).cloned()
    }

    fn series_or_create(&self, id: DeviceId) -> Arc<Mutex<DeviceSeries>> {
        lock(&self.devices)
            .entry(id)
            .or_insert_with(|| {
                Arc::new(Mutex::new(DeviceSeries {
                    dir: self.root.join(id.to_hex()),
                    segments: Vec::new(),
                    writer: None,
                }))
            })
            .clone()
    }

    /// Time of the newest record for a device.
    pub fn last_time(&self, id: DeviceId) -> Option<u64> {
        self.series(id).and_then(|s| lock(&s).last_t())
    }

    pub fn append(&self, batch: &EcgSampleBatch) -> Result<(), StoreError> {
        if batch.codes.len() > u16::MAX as usize {
            return Err(StoreError::TooManySamples(batch.codes.len()));
        }
        if batch.fs == 0 {
            return Err(StoreError::ZeroRate);
        }
        if let Some(&c) = batch.codes.iter().find(|&&c| c > MAX_CODE) {
            return Err(StoreError::SampleOutOfRange(c));
        }
        let series = self.series_or_create(batch.device_id);
        let mut dev = lock(&series);
        if let Some(last) = dev.last_t() {
            if batch.t_start_us <= last {
                return Err(StoreError::OutOfOrder {
                    t_start_us: batch.t_start_us,
                    last_us: last,
                });
            }
        }

        let mut buf = Vec::with_capacity(record_len(batch.codes.len()));
        encode_record(batch.t_start_us, &batch.codes, &mut buf);

        let roll = match dev.segments.last() {
            None => true,
            Some(seg) => {
                seg.fs != batch.fs
                    || (seg.records > 0
                        && seg.committed + buf.len() as u64 > self.opts.max_segment_bytes)
                    || batch.t_start_us - seg.first_t >= self.opts.max_segment_span_us
            }
        };
        if roll {
            fs::create_dir_all(&dev.dir)?;
            let path = dev.dir.join(segment_file_name(batch.t_start_us));
            let mut file = OpenOptions::new()
                .create(true)
                .truncate(true)
                .read(true)
                .write(true)
                .open(&path)?;
            file.write_all(&encode_segment_header(batch.device_id, batch.fs, batch.t_start_us))?;
            if self.opts.durability == Durability::Sync {
                file.sync_all()?;
                if let Ok(d) = File::open(&dev.dir) {
                    let _ = d.sync_all();
                }
            }
            dev.segments.push(SegmentInfo {
                path,
                fs: batch.fs,
                first_t: batch.t_start_us,
                committed: SEGMENT_HEADER_LEN as u64,
                records: 0,
                last_t: None,
                last_end_us: batch.t_start_us,
            });
            dev.writer = Some(file);
        }
        if dev.writer.is_none() {
            let seg = dev.segments.last().expect("segment exists");
            let mut file = OpenOptions::new().write(true).open(&seg.path)?;
            file.seek(SeekFrom::Start(seg.committed))?;
            dev.writer = Some(file);
        }

        let committed = dev.segments.last().map_or(0, |s| s.committed);
        let writer = dev.writer.as_mut().expect("writer opened");
        if let Err(e) = writer.write_all(&buf) {
            // Leave the file at its last committed length so later appends
            // never follow a partial record.
            let _ = writer.set_len(committed);
            dev.writer = None;
            return Err(e.into());
        }
        if self.opts.durability == Durability::Sync {
            writer.sync_data()?;
        }
        let seg = dev.segments.last_mut().expect("segment exists");
        seg.committed += buf.len() as u64;
        seg.records += 1;
        seg.last_t = Some(batch.t_start_us);
        seg.last_end_us = batch.t_end_us();
        Ok(())
    }

    /// Every record overlapping `[t0, t1)`, in time order. Unknown devices
    /// yield an empty result.
    pub fn query(&self, id: DeviceId, t0: u64, t1: u64) -> Result<Vec<EcgSampleBatch>, StoreError> {
        if t0 >= t1 {
            return Ok(Vec::new());
        }
        let Some(series) = self.series(id) else {
            return Ok(Vec::new());
        };
        // Committed lengths only grow, so reading up to a snapshot of them
        // outside the lock never sees a partial record.
        let segments: Vec<SegmentInfo> = lock(&series)
            .segments
            .iter()
            .filter(|s| s.records > 0 && s.first_t < t1 && (s.last_end_us > t0 || s.last_t.is_some_and(|l| l >= t0)))
            .cloned()
            .collect();
        let mut out = Vec::new();
        for seg in segments {
            let bytes = read_prefix(&seg.path, seg.committed)?;
            let mut off = SEGMENT_HEADER_LEN;
            while off < bytes.len() {
                let Some((t, codes, len)) = decode_record(&bytes[off..]) else {
                    return Err(StoreError::Corrupt {
                        path: seg.path.clone(),
                        reason: format!("unreadable record at offset {off}"),
                    });
                };
                off += len;
                if t >= t1 {
                    break;
                }
                let batch = EcgSampleBatch {
                    device_id: id,
                    t_start_us: t,
                    fs: seg.fs,
                    codes,
                };
                if batch.overlaps(t0, t1) {
                    out.push(batch);
                }
            }
        }
        Ok(out)
    }

    /// Every record of a device.
    pub fn scan(&self, id: DeviceId) -> Result<Vec<EcgSampleBatch>, StoreError> {
        self.query(id, 0, u64::MAX)
    }

    pub fn record_count(&self, id: DeviceId) -> u64 {
        self.series(id)
            .map_or(0, |s| lock(&s).segments.iter().map(|g| g.records).sum())
    }

    pub fn segment_count(&self, id: DeviceId) -> usize {
        self.series(id).map_or(0, |s| lock(&s).segments.len())
    }

    /// Forces everything written so far to disk.
    pub fn sync(&self) -> Result<(), StoreError> {
        let all: Vec<_> = lock(&self.devices).values().cloned().collect();
        for series in all {
            if let Some(w) = lock(&series).writer.as_mut() {
                w.sync_data()?;
            }
        }
        Ok(())
    }
}

fn read_prefix(path: &Path, len: u64) -> io::Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len as usize);
    File::open(path)?.take(len).read_to_end(&mut buf)?;
    if (buf.len() as u64) < len {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("{} shorter than committed length", path.display()),
        ));
    }
    Ok(buf)
}

fn recover_device(
    id: DeviceId,
    dir: PathBuf,
    report: &mut RecoveryReport,
) -> Result<DeviceSeries, StoreError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seg-") && n.ends_with(".seg"))
        })
        .collect();
    paths.sort();

    let mut segments: Vec<SegmentInfo> = Vec::new();
    for path in paths {
        let bytes = fs::read(&path)?;
        let header = decode_segment_header(&bytes);
        let (hid, fs, first_t) = match header {
            Ok(h) => h,
            Err(reason) if bytes.len() < SEGMENT_HEADER_LEN => {
                // Created but never fully written.
                log::warn!("discarding {}: {reason}", path.display());
                fs::remove_file(&path)?;
                report.discarded_segments += 1;
                continue;
            }
            Err(reason) => return Err(StoreError::Corrupt { path, reason }),
        };
        if hid != id {
            return Err(StoreError::Corrupt {
                path,
                reason: format!("header names device {hid}"),
            });
        }
        let after = segments.iter().rev().find_map(|s| s.last_t);
        let (committed, records, last_t, last_end_us) = scan_segment(&bytes, fs, after);
        if committed < bytes.len() as u64 {
            report.truncated_bytes += bytes.len() as u64 - committed;
            OpenOptions::new().write(true).open(&path)?.set_len(committed)?;
        }
        report.segments += 1;
        report.records += records;
        segments.push(SegmentInfo {
            path,
            fs,
            first_t,
            committed,
            records,
            last_t,
            last_end_us: if records > 0 { last_end_us } else { first_t },
        });
    }
    Ok(DeviceSeries {
        dir,
        segments,
        writer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(i: u8) -> DeviceId {
        DeviceId([0xCA, 0xFE, 0, 0, 0, 0, 0, i])
    }

    fn batch(id: DeviceId, t: u64, codes: Vec<u16>) -> EcgSampleBatch {
        EcgSampleBatch {
            device_id: id,
            t_start_us: t,
            fs: 250,
            codes,
        }
    }

    #[test]
    fn empty_store_queries_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        assert!(store.query(dev(1), 0, u64::MAX).unwrap().is_empty());
        assert!(store.devices().is_empty());
    }

    #[test]
    fn round_trip_and_half_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        let b = batch(dev(1), 1_000_000, (0..250).map(|i| i as u16).collect());
        store.append(&b).unwrap();
        assert_eq!(store.query(dev(1), 0, 2_000_000).unwrap(), vec![b.clone()]);
        assert!(store.query(dev(1), 1_000_000, 1_000_000).unwrap().is_empty());
        assert!(store.query(dev(1), 2_000_000, 3_000_000).unwrap().is_empty());
        assert!(store.query(dev(1), 0, 1_000_000).unwrap().is_empty());
        assert_eq!(store.query(dev(1), 1_999_999, 2_000_000).unwrap().len(), 1);
    }

    #[test]
    fn out_of_order_is_rejected_without_change() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        store.append(&batch(dev(1), 5_000_000, vec![1, 2, 3])).unwrap();
        let before = store.scan(dev(1)).unwrap();
        for t in [4_000_000, 5_000_000] {
            let err = store.append(&batch(dev(1), t, vec![9])).unwrap_err();
            assert!(matches!(err, StoreError::OutOfOrder { .. }));
        }
        assert_eq!(store.scan(dev(1)).unwrap(), before);
        drop(store);
        assert_eq!(SeriesStore::open(dir.path()).unwrap().scan(dev(1)).unwrap(), before);
    }

    #[test]
    fn rejects_bad_codes() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.append(&batch(dev(1), 1, vec![1024])),
            Err(StoreError::SampleOutOfRange(1024))
        ));
        assert_eq!(store.record_count(dev(1)), 0);
    }

    #[test]
    fn rolls_over_by_size_and_span() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            max_segment_bytes: (SEGMENT_HEADER_LEN + 2 * record_len(4)) as u64,
            max_segment_span_us: 10_000_000,
            ..StoreOptions::default()
        };
        let (store, _) = SeriesStore::open_with(dir.path(), opts).unwrap();
        for i in 0..5u64 {
            store.append(&batch(dev(2), i * 16_000, vec![1, 2, 3, 4])).unwrap();
        }
        assert_eq!(store.segment_count(dev(2)), 3);
        store.append(&batch(dev(2), 20_000_000, vec![7])).unwrap();
        assert_eq!(store.segment_count(dev(2)), 4);
        let all = store.scan(dev(2)).unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].t_start_us < w[1].t_start_us));
    }

    #[test]
    fn rate_change_starts_a_segment() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        store.append(&batch(dev(3), 0, vec![1; 10])).unwrap();
        let mut b = batch(dev(3), 1_000_000, vec![2; 10]);
        b.fs = 500;
        store.append(&b).unwrap();
        assert_eq!(store.segment_count(dev(3)), 2);
        assert_eq!(store.scan(dev(3)).unwrap()[1].fs, 500);
    }

    #[test]
    fn torn_tail_is_truncated_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        for i in 0..10u64 {
            store.append(&batch(dev(4), i * 1_000_000, vec![i as u16; 250])).unwrap();
        }
        let good = store.scan(dev(4)).unwrap();
        drop(store);
        let seg = dir
            .path()
            .join(dev(4).to_hex())
            .join(segment_file_name(0));
        // Half of an eleventh record, as if the process died mid-write.
        let mut tail = Vec::new();
        encode_record(10_000_000, &[5; 250], &mut tail);
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(&tail[..tail.len() / 2]).unwrap();
        drop(f);

        let (store, report) = SeriesStore::open_with(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(report.records, 10);
        assert_eq!(report.truncated_bytes, (tail.len() / 2) as u64);
        assert_eq!(store.scan(dev(4)).unwrap(), good);
        store.append(&batch(dev(4), 10_000_000, vec![5; 250])).unwrap();
        assert_eq!(store.record_count(dev(4)), 11);
        drop(store);
        assert_eq!(SeriesStore::open(dir.path()).unwrap().record_count(dev(4)), 11);
    }

    #[test]
    fn header_layout() {
        let h = encode_segment_header(dev(9), 250, 0x0102_0304_0506_0708);
        assert_eq!(&h[..8], b"ECGSEG01");
        assert_eq!(&h[16..18], &[0x00, 0xFA]);
        assert_eq!(&h[18..20], &[0, 0]);
        assert_eq!(&h[20..28], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(decode_segment_header(&h).unwrap(), (dev(9), 250, 0x0102_0304_0506_0708));
        let mut bad = h;
        bad[17] ^= 1;
        assert!(decode_segment_header(&bad).is_err());
    }
}
