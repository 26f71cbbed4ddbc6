//! Rule evaluation over vitals snapshots and alert delivery.

pub mod dispatch;
pub mod evaluate;
pub mod rules;

pub use dispatch::{
    AlertLogRecord, AlertPayload, DeadLetterRecord, Delivery, Dispatcher, HttpWebhook, Receipt,
    RetryPolicy, WebhookTransport,
};
pub use evaluate::{evaluate, AlertEvent, AlertKind, DeviceRules, RuleEvaluator};
pub use rules::{
    default_rules, defaults, rules_from_config, AlertRule, Condition, Metric, RuleParseError,
    Verdict,
};
