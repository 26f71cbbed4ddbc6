//! Run settings: built-in defaults, overridden by a `key = value` config
//! file, overridden by flags or `CARDIOLINK_*` environment variables.

use std::path::{Path, PathBuf};
use std::time::Duration;

use cardiolink::alerting::{default_rules, rules_from_config, AlertRule};
use cardiolink::analysis::AnalyzerConfig;
use cardiolink::device::DeviceConfig;
use cardiolink::kv::{KvError, KvFile};
use cardiolink::store::{Durability, StoreOptions};
use cardiolink::wire::DeviceId;

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "listen",
    "store",
    "devices",
    "duration",
    "scenario",
    "offline",
    "out",
    "device_base",
    "fs",
    "batch_size",
    "vref",
    "rules",
    "webhook_url",
    "webhook_timeout_s",
    "durability",
    "segment_max_bytes",
    "segment_max_span_s",
];

pub const DEFAULT_DEVICE_BASE: DeviceId = DeviceId([0xEC, 0x61, 0, 0, 0, 0, 0, 0]);

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub listen: String,
    pub store: PathBuf,
    pub devices: u16,
    pub duration_s: f64,
    pub scenario: Option<PathBuf>,
    pub offline: Option<PathBuf>,
    pub out: PathBuf,
    pub device_base: DeviceId,
    pub fs: u16,
    pub batch_size: usize,
    pub vref: f64,
    pub rules: Option<PathBuf>,
    pub webhook_url: Option<String>,
    pub webhook_timeout: Duration,
    pub durability: Durability,
    pub segment_max_bytes: u64,
    pub segment_max_span_s: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let store = StoreOptions::default();
        Self {
            listen: "127.0.0.1:7878".into(),
            store: PathBuf::from("cardiolink-data"),
            devices: 1,
            duration_s: 60.0,
            scenario: None,
            offline: None,
            out: PathBuf::from("out"),
            device_base: DEFAULT_DEVICE_BASE,
            fs: 250,
            batch_size: 250,
            vref: 3.3,
            rules: None,
            webhook_url: None,
            webhook_timeout: Duration::from_secs(2),
            durability: store.durability,
            segment_max_bytes: store.max_segment_bytes,
            segment_max_span_s: store.max_segment_span_us as f64 / 1e6,
        }
    }
}

fn positive(e: &cardiolink::kv::Entry, v: f64) -> Result<f64, KvError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(e.bad("must be a positive number"))
    }
}

impl Settings {
    /// Applies a config file's entries on top of `self`.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), KvError> {
        let kv = KvFile::parse(text)?;
        kv.check_keys(KEYS)?;
        for key in KEYS {
            let Some(e) = kv.single(key)? else {
                continue;
            };
            match *key {
                "listen" => self.listen = e.value.clone(),
                "store" => self.store = PathBuf::from(&e.value),
                "devices" => {
                    self.devices = e.parse()?;
                    if self.devices == 0 {
                        return Err(e.bad("need at least one device"));
                    }
                }
                "duration" => self.duration_s = positive(e, e.parse()?)?,
                "scenario" => self.scenario = Some(PathBuf::from(&e.value)),
                "offline" => self.offline = Some(PathBuf::from(&e.value)),
                "out" => self.out = PathBuf::from(&e.value),
                "device_base" => self.device_base = e.parse()?,
                "fs" => self.fs = e.parse()?,
                "batch_size" => self.batch_size = e.parse()?,
                "vref" => self.vref = positive(e, e.parse()?)?,
                "rules" => self.rules = Some(PathBuf::from(&e.value)),
                "webhook_url" => self.webhook_url = Some(e.value.clone()),
                "webhook_timeout_s" => {
                    self.webhook_timeout = Duration::from_secs_f64(positive(e, e.parse()?)?)
                }
                "durability" => {
                    self.durability = match e.value.as_str() {
                        "flush" => Durability::Flush,
                        "sync" => Durability::Sync,
                        _ => return Err(e.bad("expected `flush` or `sync`")),
                    }
                }
                "segment_max_bytes" => self.segment_max_bytes = e.parse()?,
                "segment_max_span_s" => self.segment_max_span_s = positive(e, e.parse()?)?,
                _ => unreachable!("key list and match agree"),
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_file_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn device_id(&self, index: u16) -> DeviceId {
        DeviceId::indexed(self.device_base, index)
    }

    pub fn device_config(&self, index: u16) -> DeviceConfig {
        DeviceConfig {
            device_id: self.device_id(index),
            fs: self.fs,
            vref: self.vref,
            batch_size: self.batch_size,
            frontend_offset_v: self.vref / 2.0,
            ..DeviceConfig::default()
        }
    }

    pub fn analyzer_config(&self) -> AnalyzerConfig {
        AnalyzerConfig {
            frontend: self.device_config(0).frontend(),
            ..AnalyzerConfig::default()
        }
    }

    pub fn store_options(&self) -> StoreOptions {
        StoreOptions {
            max_segment_bytes: self.segment_max_bytes,
            max_segment_span_us: (self.segment_max_span_s * 1e6) as u64,
            durability: self.durability,
        }
    }

    pub fn alert_rules(&self) -> Result<Vec<AlertRule>, CliError> {
        let Some(path) = &self.rules else {
            return Ok(default_rules());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read rules {}: {e}", path.display())))?;
        rules_from_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Where the service keeps its logs, next to the segment directories.
pub struct LogPaths {
    pub service: PathBuf,
    pub vitals: PathBuf,
    pub alerts: PathBuf,
    pub dead_letter: PathBuf,
}

impl LogPaths {
    pub fn under(store: &Path) -> Self {
        Self {
            service: store.join("service.jsonl"),
            vitals: store.join("vitals.jsonl"),
            alerts: store.join("alerts.jsonl"),
            dead_letter: store.join("dead_letter.jsonl"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let mut s = Settings::default();
        s.apply_file_text("# demo\nlisten = 0.0.0.0:9000\ndevices = 4\ndurability = sync\n")
            .unwrap();
        assert_eq!(s.listen, "0.0.0.0:9000");
        assert_eq!(s.devices, 4);
        assert_eq!(s.durability, Durability::Sync);
        assert_eq!(s.fs, 250);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let err = Settings::default()
            .apply_file_text("listen = x\n\nlisten_port = 3\n")
            .unwrap_err();
        assert_eq!(err.key(), Some("listen_port"));
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["devices = 0", "duration = -1", "durability = maybe", "fs = fast"] {
            assert!(Settings::default().apply_file_text(text).is_err(), "{text}");
        }
    }
}
