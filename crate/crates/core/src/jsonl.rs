//! Append-only line-delimited JSON logs.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
enum Target {
    File { file: File, path: PathBuf },
    Memory(Arc<Mutex<Vec<u8>>>),
    Stderr,
    Discard,
}

/// Serializes records one per line. Each append is written through
/// immediately, so a reader never sees half a line from a live writer.
#[derive(Debug)]
pub struct JsonlWriter {
    target: Mutex<Target>,
}

impl JsonlWriter {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with(Target::File {
            file,
            path: path.to_path_buf(),
        }))
    }

    /// Writer backed by a shared buffer, for tests and in-process consumers.
    pub fn memory() -> (Self, Arc<Mutex<Vec<u8>>>) {
        let buf = Arc::new(Mutex::new(Vec::new()));
        (Self::with(Target::Memory(buf.clone())), buf)
    }

    pub fn stderr() -> Self {
        Self::with(Target::Stderr)
    }

    pub fn discard() -> Self {
        Self::with(Target::Discard)
    }

    fn with(target: Target) -> Self {
        Self {
            target: Mutex::new(target),
        }
    }

    pub fn path(&self) -> Option<PathBuf> {
        match &*self.target.lock().expect("log lock") {
            Target::File { path, .. } => Some(path.clone()),
            _ => None,
        }
    }

    pub fn append<T: Serialize>(&self, record: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        match &mut *self.target.lock().expect("log lock") {
            Target::File { file, .. } => file.write_all(&line),
            Target::Memory(buf) => {
                buf.lock().expect("buffer lock").extend_from_slice(&line);
                Ok(())
            }
            Target::Stderr => io::stderr().lock().write_all(&line),
            Target::Discard => Ok(()),
        }
    }

    pub fn sync(&self) -> io::Result<()> {
        match &*self.target.lock().expect("log lock") {
            Target::File { file, .. } => file.sync_data(),
            _ => Ok(()),
        }
    }
}

/// Reads every parseable record; a torn final line is ignored.
pub fn read_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> io::Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if let Ok(rec) = serde_json::from_str(&line) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Parses the records held in a memory writer's buffer.
pub fn parse_lines<T: DeserializeOwned>(buf: &[u8]) -> Vec<T> {
    buf.split(|&b| b == b'\n')
        .filter_map(|l| serde_json::from_slice(l).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Rec {
        a: u32,
    }

    #[test]
    fn file_round_trip_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/log.jsonl");
        let w = JsonlWriter::open(&path).unwrap();
        w.append(&Rec { a: 1 }).unwrap();
        w.append(&Rec { a: 2 }).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"a\":").unwrap();
        assert_eq!(
            read_records::<Rec>(&path).unwrap(),
            vec![Rec { a: 1 }, Rec { a: 2 }]
        );
        assert!(read_records::<Rec>(dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn memory_writer() {
        let (w, buf) = JsonlWriter::memory();
        w.append(&Rec { a: 7 }).unwrap();
        assert_eq!(parse_lines::<Rec>(&buf.lock().unwrap()), vec![Rec { a: 7 }]);
    }
}
