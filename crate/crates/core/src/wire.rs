//! Binary telemetry framing.
//!
//! Layout (big-endian):
//!
//! ```text
//! magic "ECG1" (4) | version (1) | device_id (8) | seq (4) | t_start_us (8)
//! | fs (2) | n (2) | flags (1) | temp_centi_c (2, signed) | alcohol_permille (2)
//! | samples (2 * n) | crc32 (4)
//! ```
//!
//! The CRC is CRC-32/IEEE over every preceding byte. `PROTOCOL.md` at the
//! repository root is the long-form description.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ECG1";
pub const VERSION: u8 = 1;
/// Bytes before the sample payload.
pub const HEADER_LEN: usize = 34;
pub const CRC_LEN: usize = 4;
/// Length of a frame with no samples.
pub const MIN_FRAME_LEN: usize = HEADER_LEN + CRC_LEN;
/// Largest value a 10-bit ADC code may take.
pub const MAX_CODE: u16 = 1023;

/// Total encoded length of a frame carrying `n` samples.
pub const fn frame_len(n: usize) -> usize {
    HEADER_LEN + 2 * n + CRC_LEN
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DeviceId(pub [u8; 8]);

impl DeviceId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Copies `base` and overwrites the trailing two bytes with `index`.
    pub fn indexed(base: DeviceId, index: u16) -> DeviceId {
        let mut b = base.0;
        b[6..].copy_from_slice(&index.to_be_bytes());
        DeviceId(b)
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({})", self.to_hex())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("device id must be 16 hex digits, got {0:?}")]
pub struct DeviceIdError(String);

impl FromStr for DeviceId {
    type Err = DeviceIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 8];
        hex::decode_to_slice(s.trim(), &mut out).map_err(|_| DeviceIdError(s.to_string()))?;
        Ok(DeviceId(out))
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> String {
        id.to_hex()
    }
}

impl TryFrom<String> for DeviceId {
    type Error = DeviceIdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FrameFlags(pub u8);

impl FrameFlags {
    pub const LEAD_OFF_PLUS: u8 = 1 << 0;
    pub const LEAD_OFF_MINUS: u8 = 1 << 1;
    pub const BUZZER: u8 = 1 << 2;
    pub const RESERVED: u8 = !0b111;

    pub fn lead_off_plus(self) -> bool {
        self.0 & Self::LEAD_OFF_PLUS != 0
    }

    pub fn lead_off_minus(self) -> bool {
        self.0 & Self::LEAD_OFF_MINUS != 0
    }

    pub fn lead_off(self) -> bool {
        self.lead_off_plus() || self.lead_off_minus()
    }

    pub fn buzzer(self) -> bool {
        self.0 & Self::BUZZER != 0
    }

    pub fn with(self, bit: u8, on: bool) -> Self {
        if on {
            FrameFlags(self.0 | bit)
        } else {
            FrameFlags(self.0 & !bit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TelemetryFrame {
    pub version: u8,
    pub device_id: DeviceId,
    pub seq: u32,
    pub t_start_us: u64,
    pub fs: u16,
    pub flags: FrameFlags,
    pub temp_centi_c: i16,
    pub alcohol_permille: u16,
    /// 10-bit ADC codes.
    pub samples: Vec<u16>,
}

impl TelemetryFrame {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Start time of the sample after this frame's last one.
    pub fn t_end_us(&self) -> u64 {
        self.t_start_us + sample_offset_us(self.samples.len() as u64, self.fs)
    }

    pub fn encoded_len(&self) -> usize {
        frame_len(self.samples.len())
    }
}

/// Microseconds from the first sample to sample `index` at `fs` Hz.
pub fn sample_offset_us(index: u64, fs: u16) -> u64 {
    if fs == 0 {
        return 0;
    }
    let fs = u64::from(fs);
    (index * 1_000_000 + fs / 2) / fs
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("frame carries {0} samples; at most 65535 fit")]
    TooManySamples(usize),
    #[error("sample {index} has value {value}, above the 10-bit maximum")]
    SampleOutOfRange { index: usize, value: u16 },
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{extra} bytes after the end of the frame")]
    TrailingBytes { extra: usize },
    #[error("crc mismatch: frame says {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("sample {index} has value {value}, above the 10-bit maximum")]
    SampleOutOfRange { index: usize, value: u16 },
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
}

impl DecodeError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::BadMagic => "bad_magic",
            DecodeError::UnsupportedVersion(_) => "unsupported_version",
            DecodeError::Truncated { .. } => "truncated",
            DecodeError::TrailingBytes { .. } => "trailing_bytes",
            DecodeError::CrcMismatch { .. } => "crc_mismatch",
            DecodeError::SampleOutOfRange { .. } => "sample_out_of_range",
            DecodeError::ReservedFlags(_) => "reserved_flags",
        }
    }
}

pub fn encode(frame: &TelemetryFrame) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_into(frame, &mut out)?;
    Ok(out)
}

pub fn encode_into(frame: &TelemetryFrame, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let n = u16::try_from(frame.samples.len())
        .map_err(|_| EncodeError::TooManySamples(frame.samples.len()))?;
    if frame.flags.0 & FrameFlags::RESERVED != 0 {
        return Err(EncodeError::ReservedFlags(frame.flags.0));
    }
    if let Some((index, &value)) = frame
        .samples
        .iter()
        .enumerate()
        .find(|(_, &v)| v > MAX_CODE)
    {
        return Err(EncodeError::SampleOutOfRange { index, value });
    }
    let start = out.len();
    out.reserve(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.version);
    out.extend_from_slice(&frame.device_id.0);
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&frame.t_start_us.to_be_bytes());
    out.extend_from_slice(&frame.fs.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    out.push(frame.flags.0);
    out.extend_from_slice(&frame.temp_centi_c.to_be_bytes());
    out.extend_from_slice(&frame.alcohol_permille.to_be_bytes());
    for s in &frame.samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(())
}

fn be_u16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn be_u64(b: &[u8], at: usize) -> u64 {
    u64::from_be_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Checks magic, version and header length, returning the full frame length.
fn frame_extent(bytes: &[u8]) -> Result<usize, DecodeError> {
    let have = bytes.len();
    let magic_len = have.min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(DecodeError::BadMagic);
    }
    if have < MAGIC.len() + 1 {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            have,
        });
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    if have < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            have,
        });
    }
    Ok(frame_len(usize::from(be_u16(bytes, 27))))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<TelemetryFrame, DecodeError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            extra: bytes.len() - used,
        });
    }
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it with its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(TelemetryFrame, usize), DecodeError> {
    let len = frame_extent(bytes)?;
    if bytes.len() < len {
        return Err(DecodeError::Truncated {
            needed: len,
            have: bytes.len(),
        });
    }
    let body = &bytes[..len - CRC_LEN];
    let stored = be_u32(bytes, len - CRC_LEN);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DecodeError::CrcMismatch { stored, computed });
    }
    let flags = bytes[29];
    if flags & FrameFlags::RESERVED != 0 {
        return Err(DecodeError::ReservedFlags(flags));
    }
    let n = usize::from(be_u16(bytes, 27));
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let value = be_u16(bytes, HEADER_LEN + 2 * index);
        if value > MAX_CODE {
            return Err(DecodeError::SampleOutOfRange { index, value });
        }
        samples.push(value);
    }
    let frame = TelemetryFrame {
        version: bytes[4],
        device_id: DeviceId(bytes[5..13].try_into().expect("8 bytes")),
        seq: be_u32(bytes, 13),
        t_start_us: be_u64(bytes, 17),
        fs: be_u16(bytes, 25),
        flags: FrameFlags(flags),
        temp_centi_c: be_u16(bytes, 30) as i16,
        alcohol_permille: be_u16(bytes, 32),
        samples,
    };
    Ok((frame, len))
}

/// Something the splitter noticed while walking the byte stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitEvent {
    Frame {
        offset: u64,
        frame: TelemetryFrame,
    },
    /// A candidate frame starting at `offset` failed to decode.
    Rejected { offset: u64, error: DecodeError },
    /// `skipped` bytes without a frame start were discarded before `offset`.
    Resync { offset: u64, skipped: u64 },
}

/// Incremental frame extractor for one connection's byte stream.
///
/// Output depends only on the concatenated input, never on how it was
/// fragmented across [`push`](FrameSplitter::push) calls.
#[derive(Debug, Default)]
pub struct FrameSplitter {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    base: u64,
    pending_skip: u64,
}

impl FrameSplitter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held waiting for more input.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn push(&mut self, bytes: &[u8], out: &mut Vec<SplitEvent>) {
        self.buf.extend_from_slice(bytes);
        self.drain(false, out);
    }

    /// Flushes everything at end of stream; incomplete frames become errors.
    pub fn finish(&mut self, out: &mut Vec<SplitEvent>) {
        self.drain(true, out);
        if !self.buf.is_empty() {
            self.pending_skip += self.buf.len() as u64;
            self.base += self.buf.len() as u64;
            self.buf.clear();
        }
        self.flush_skip(out);
    }

    fn flush_skip(&mut self, out: &mut Vec<SplitEvent>) {
        if self.pending_skip > 0 {
            out.push(SplitEvent::Resync {
                offset: self.base,
                skipped: self.pending_skip,
            });
            self.pending_skip = 0;
        }
    }

    fn consume(&mut self, n: usize) {
        self.buf.drain(..n);
        self.base += n as u64;
    }

    fn drain(&mut self, eof: bool, out: &mut Vec<SplitEvent>) {
        let mut pos = 0usize;
        loop {
            // Locate the next possible frame start.
            let rest = &self.buf[pos..];
            match find_magic(rest) {
                Some(i) => {
                    if i > 0 {
                        self.pending_skip += i as u64;
                        pos += i;
                    }
                }
                None => {
                    // Keep a tail that may be the beginning of a magic.
                    let keep = if eof { 0 } else { partial_magic_tail(rest) };
                    let skip = rest.len() - keep;
                    self.pending_skip += skip as u64;
                    pos += skip;
                    break;
                }
            }
            let cand = &self.buf[pos..];
            let needed = match frame_extent(cand) {
                Ok(len) => len,
                Err(DecodeError::Truncated { .. }) if !eof => break,
                Err(error) => {
                    self.reject(pos, error, out);
                    pos += 1;
                    continue;
                }
            };
            if cand.len() < needed {
                if eof {
                    let error = DecodeError::Truncated {
                        needed,
                        have: cand.len(),
                    };
                    self.reject(pos, error, out);
                    pos += 1;
                    continue;
                }
                break;
            }
            match decode_prefix(cand) {
                Ok((frame, used)) => {
                    self.consume(pos);
                    self.flush_skip(out);
                    out.push(SplitEvent::Frame {
                        offset: self.base,
                        frame,
                    });
                    self.consume(used);
                    pos = 0;
                }
                Err(error) => {
                    self.reject(pos, error, out);
                    pos += 1;
                }
            }
        }
        self.consume(pos);
    }

    fn reject(&mut self, pos: usize, error: DecodeError, out: &mut Vec<SplitEvent>) {
        // Report skipped garbage before the failed candidate, then count the
        // candidate's first byte as skipped so scanning resumes after it.
        let offset = self.base + pos as u64;
        if self.pending_skip > 0 {
            out.push(SplitEvent::Resync {
                offset,
                skipped: self.pending_skip,
            });
            self.pending_skip = 0;
        }
        out.push(SplitEvent::Rejected { offset, error });
        self.pending_skip += 1;
    }
}

fn find_magic(hay: &[u8]) -> Option<usize> {
    hay.windows(MAGIC.len()).position(|w| w == MAGIC)
}

fn partial_magic_tail(hay: &[u8]) -> usize {
    (1..MAGIC.len())
        .rev()
        .find(|&k| hay.len() >= k && hay[hay.len() - k..] == MAGIC[..k])
        .unwrap_or(0)
}

/// Splits a complete byte stream in one call.
pub fn frame_stream_split(bytes: &[u8]) -> Vec<SplitEvent> {
    let mut splitter = FrameSplitter::new();
    let mut out = Vec::new();
    splitter.push(bytes, &mut out);
    splitter.finish(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame(n: usize) -> TelemetryFrame {
        TelemetryFrame {
            version: VERSION,
            device_id: DeviceId(*b"dev-0001"),
            seq: 7,
            t_start_us: 1_700_000_000_000_000,
            fs: 250,
            flags: FrameFlags(FrameFlags::BUZZER),
            temp_centi_c: 3700,
            alcohol_permille: 12,
            samples: (0..n).map(|i| (i as u16 * 37) % 1024).collect(),
        }
    }

    fn frames_of(events: &[SplitEvent]) -> Vec<TelemetryFrame> {
        events
            .iter()
            .filter_map(|e| match e {
                SplitEvent::Frame { frame, .. } => Some(frame.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn empty_frame_is_38_bytes() {
        assert_eq!(encode(&sample_frame(0)).unwrap().len(), 38);
        assert_eq!(MIN_FRAME_LEN, 38);
    }

    #[test]
    fn round_trip() {
        let f = sample_frame(250);
        let bytes = encode(&f).unwrap();
        assert_eq!(bytes.len(), 38 + 500);
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn encode_rejects_invalid_frames() {
        let mut f = sample_frame(3);
        f.samples[1] = 1024;
        assert_eq!(
            encode(&f),
            Err(EncodeError::SampleOutOfRange {
                index: 1,
                value: 1024
            })
        );
        let mut f = sample_frame(3);
        f.flags = FrameFlags(0x10);
        assert_eq!(encode(&f), Err(EncodeError::ReservedFlags(0x10)));
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert!(matches!(decode(&[]), Err(DecodeError::Truncated { .. })));
        let bytes = encode(&sample_frame(4)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(DecodeError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(DecodeError::UnsupportedVersion(2)));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        assert!(matches!(decode(&bad), Err(DecodeError::CrcMismatch { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(DecodeError::TrailingBytes { extra: 1 }));
    }

    #[test]
    fn out_of_range_sample_with_valid_crc() {
        let mut bytes = encode(&sample_frame(4)).unwrap();
        bytes[HEADER_LEN + 2..HEADER_LEN + 4].copy_from_slice(&1024u16.to_be_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&crc.to_be_bytes());
        assert_eq!(
            decode(&bytes),
            Err(DecodeError::SampleOutOfRange {
                index: 1,
                value: 1024
            })
        );
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let bytes = encode(&sample_frame(16)).unwrap();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(decode(&bad).is_err(), "bit {bit} accepted");
        }
    }

    #[test]
    fn one_byte_fragments() {
        let frames: Vec<_> = (0..3)
            .map(|i| {
                let mut f = sample_frame(10 + i);
                f.seq = i as u32;
                f
            })
            .collect();
        let stream: Vec<u8> = frames.iter().flat_map(|f| encode(f).unwrap()).collect();
        let mut splitter = FrameSplitter::new();
        let mut events = Vec::new();
        for b in &stream {
            splitter.push(std::slice::from_ref(b), &mut events);
        }
        splitter.finish(&mut events);
        assert_eq!(events.len(), 3);
        assert_eq!(frames_of(&events), frames);
    }

    #[test]
    fn garbage_then_frame_resyncs_once() {
        let frame = sample_frame(5);
        let mut stream = b"noise!EC\x00G".to_vec();
        let garbage = stream.len() as u64;
        stream.extend(encode(&frame).unwrap());
        let events = frame_stream_split(&stream);
        assert_eq!(
            events,
            vec![
                SplitEvent::Resync {
                    offset: garbage,
                    skipped: garbage
                },
                SplitEvent::Frame {
                    offset: garbage,
                    frame
                },
            ]
        );
    }

    #[test]
    fn corrupt_frame_between_good_ones() {
        let a = encode(&sample_frame(3)).unwrap();
        let mut b = encode(&sample_frame(4)).unwrap();
        b[HEADER_LEN] ^= 0x01;
        let c = encode(&sample_frame(5)).unwrap();
        let stream = [a.clone(), b.clone(), c].concat();
        let events = frame_stream_split(&stream);
        assert_eq!(frames_of(&events).len(), 2);
        assert!(events.iter().any(|e| matches!(
            e,
            SplitEvent::Rejected { offset, error: DecodeError::CrcMismatch { .. } }
                if *offset == a.len() as u64
        )));
        assert!(events.contains(&SplitEvent::Resync {
            offset: (a.len() + b.len()) as u64,
            skipped: b.len() as u64
        }));
    }

    #[test]
    fn empty_stream() {
        assert!(frame_stream_split(&[]).is_empty());
    }

    #[test]
    fn inflated_length_does_not_hide_later_frames() {
        let mut a = encode(&sample_frame(2)).unwrap();
        a[27] = 0xff; // n high byte
        let b = encode(&sample_frame(3)).unwrap();
        let events = frame_stream_split(&[a, b.clone()].concat());
        assert_eq!(frames_of(&events), vec![sample_frame(3)]);
    }

    #[test]
    fn device_id_hex() {
        let id: DeviceId = "0001020304050607".parse().unwrap();
        assert_eq!(id.to_string(), "0001020304050607");
        assert!("xyz".parse::<DeviceId>().is_err());
        assert_eq!(
            DeviceId::indexed(id, 0x0a0b).to_hex(),
            "0001020304050a0b"
        );
    }

    #[test]
    fn sample_offsets() {
        assert_eq!(sample_offset_us(250, 250), 1_000_000);
        assert_eq!(sample_offset_us(1, 360), 2778);
        assert_eq!(sample_frame(250).t_end_us(), 1_700_000_001_000_000);
    }
}
