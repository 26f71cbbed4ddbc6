use std::fs;
use std::sync::Arc;
use std::thread;

use cardiolink::store::{
    encode_segment_header, record_len, segment_file_name, EcgSampleBatch, SeriesStore,
    StoreOptions, SEGMENT_HEADER_LEN,
};
use cardiolink::wire::DeviceId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dev(i: u8) -> DeviceId {
    DeviceId([0xD0, 0, 0, 0, 0, 0, 0, i])
}

/// Reference answer: every shadow record overlapping `[t0, t1)`.
fn oracle(shadow: &[EcgSampleBatch], t0: u64, t1: u64) -> Vec<EcgSampleBatch> {
    shadow
        .iter()
        .filter(|b| {
            let end = b.t_start_us + b.codes.len() as u64 * 1_000_000 / u64::from(b.fs);
            t0 < t1 && b.t_start_us < t1 && (end > t0 || (b.codes.is_empty() && b.t_start_us >= t0))
        })
        .cloned()
        .collect()
}

#[test]
fn segment_vector_matches() {
    let path = format!("{}/tests/vectors/segment_one_record.hex", env!("CARGO_MANIFEST_DIR"));
    let golden = hex::decode(fs::read_to_string(path).unwrap().trim()).unwrap();
    let id: DeviceId = "0123456789abcdef".parse().unwrap();
    let t = 1_700_000_000_000_000;
    assert_eq!(&golden[..SEGMENT_HEADER_LEN], &encode_segment_header(id, 250, t));

    let dir = tempfile::tempdir().unwrap();
    let store = SeriesStore::open(dir.path()).unwrap();
    store
        .append(&EcgSampleBatch {
            device_id: id,
            t_start_us: t,
            fs: 250,
            codes: vec![1, 512, 1023],
        })
        .unwrap();
    let on_disk = fs::read(dir.path().join(id.to_hex()).join(segment_file_name(t))).unwrap();
    assert_eq!(on_disk, golden);
}

#[test]
fn hundred_thousand_records_match_shadow() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StoreOptions {
        max_segment_bytes: 256 * 1024,
        ..StoreOptions::default()
    };
    let (store, _) = SeriesStore::open_with(dir.path(), opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut shadow = Vec::new();
    let mut t = 1_000_000u64;
    for _ in 0..100_000 {
        let n = rng.random_range(0..16);
        let b = EcgSampleBatch {
            device_id: dev(1),
            t_start_us: t,
            fs: 250,
            codes: (0..n).map(|_| rng.random_range(0..=1023)).collect(),
        };
        store.append(&b).unwrap();
        shadow.push(b);
        t += n as u64 * 4_000 + rng.random_range(1..5_000);
    }
    assert!(store.segment_count(dev(1)) > 5, "rollover exercised");
    assert_eq!(store.scan(dev(1)).unwrap(), shadow);

    let end = t;
    for _ in 0..200 {
        let a = rng.random_range(0..end + 10);
        let b = rng.random_range(0..end + 10);
        let (t0, t1) = (a.min(b), a.max(b));
        assert_eq!(store.query(dev(1), t0, t1).unwrap(), oracle(&shadow, t0, t1));
    }
    drop(store);
    let (store, report) = SeriesStore::open_with(dir.path(), opts).unwrap();
    assert_eq!(report.records, 100_000);
    assert_eq!(report.truncated_bytes, 0);
    assert_eq!(store.scan(dev(1)).unwrap(), shadow);
}

#[test]
fn query_straddling_two_segments() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StoreOptions {
        max_segment_span_us: 10_000_000,
        ..StoreOptions::default()
    };
    let (store, _) = SeriesStore::open_with(dir.path(), opts).unwrap();
    let mut shadow = Vec::new();
    for s in 0..20u64 {
        let b = EcgSampleBatch {
            device_id: dev(2),
            t_start_us: s * 1_000_000,
            fs: 250,
            codes: vec![(s * 10) as u16; 250],
        };
        store.append(&b).unwrap();
        shadow.push(b);
    }
    assert_eq!(store.segment_count(dev(2)), 2);
    let got = store.query(dev(2), 8_500_000, 11_500_000).unwrap();
    assert_eq!(got, oracle(&shadow, 8_500_000, 11_500_000));
    assert_eq!(got.len(), 4);
}

#[test]
fn devices_are_independent_under_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SeriesStore::open(dir.path()).unwrap());
    let writers: Vec<_> = (0..4u8)
        .map(|d| {
            let store = store.clone();
            thread::spawn(move || {
                for i in 0..2_000u64 {
                    store
                        .append(&EcgSampleBatch {
                            device_id: dev(10 + d),
                            t_start_us: i * 1_000_000,
                            fs: 250,
                            codes: vec![d as u16; 25],
                        })
                        .unwrap();
                }
            })
        })
        .collect();
    let reader = {
        let store = store.clone();
        thread::spawn(move || {
            let mut last = 0;
            for _ in 0..200 {
                let got = store.scan(dev(10)).unwrap();
                // Reads during appends see a growing prefix of whole records.
                assert!(got.len() >= last);
                assert!(got.iter().all(|b| b.codes == vec![0; 25]));
                last = got.len();
            }
        })
    };
    for w in writers {
        w.join().unwrap();
    }
    reader.join().unwrap();
    for d in 0..4u8 {
        assert_eq!(store.record_count(dev(10 + d)), 2_000);
    }
}

#[test]
fn abrupt_stop_at_every_cut_point_keeps_a_clean_prefix() {
    // Write ten records, then simulate a crash by cutting the active
    // segment at each byte offset of the last two records.
    let dir = tempfile::tempdir().unwrap();
    let store = SeriesStore::open(dir.path()).unwrap();
    let mut shadow = Vec::new();
    for i in 0..10u64 {
        let b = EcgSampleBatch {
            device_id: dev(3),
            t_start_us: i * 1_000_000,
            fs: 250,
            codes: (0..50).map(|k| ((i * 50 + k) % 1024) as u16).collect(),
        };
        store.append(&b).unwrap();
        shadow.push(b);
    }
    drop(store);
    let seg = dir.path().join(dev(3).to_hex()).join(segment_file_name(0));
    let full = fs::read(&seg).unwrap();
    let rec = record_len(50);
    for cut in (full.len() - 2 * rec)..=full.len() {
        fs::write(&seg, &full[..cut]).unwrap();
        let store = SeriesStore::open(dir.path()).unwrap();
        let got = store.scan(dev(3)).unwrap();
        let whole = (cut - SEGMENT_HEADER_LEN) / rec;
        assert_eq!(got, shadow[..whole], "cut at {cut}");
        assert!(shadow.len() - got.len() <= 2);
        assert_eq!(fs::metadata(&seg).unwrap().len() as usize, SEGMENT_HEADER_LEN + whole * rec);
    }
}

#[test]
fn corrupt_tail_bytes_are_cut() {
    let dir = tempfile::tempdir().unwrap();
    let store = SeriesStore::open(dir.path()).unwrap();
    for i in 0..3u64 {
        store
            .append(&EcgSampleBatch {
                device_id: dev(4),
                t_start_us: i,
                fs: 250,
                codes: vec![7; 10],
            })
            .unwrap();
    }
    drop(store);
    let seg = dir.path().join(dev(4).to_hex()).join(segment_file_name(0));
    let len = fs::metadata(&seg).unwrap().len();
    // Flip a byte inside the last record.
    let mut bytes = fs::read(&seg).unwrap();
    let last = bytes.len() - 6;
    bytes[last] ^= 0x40;
    fs::write(&seg, &bytes).unwrap();
    let (store, report) = SeriesStore::open_with(dir.path(), StoreOptions::default()).unwrap();
    assert_eq!(report.records, 2);
    assert_eq!(report.truncated_bytes, record_len(10) as u64);
    assert_eq!(store.record_count(dev(4)), 2);
    assert_eq!(fs::metadata(&seg).unwrap().len(), len - record_len(10) as u64);
}
