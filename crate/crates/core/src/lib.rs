//! Wearable ECG telemetry: synthesis, device simulation, wire framing,
//! storage, ingest, analysis and alerting.

pub mod alerting;
pub mod analysis;
pub mod device;
pub mod ecg_synth;
pub mod ingest;
pub mod jsonl;
pub mod kv;
pub mod pipeline;
pub mod store;
pub mod wire;
