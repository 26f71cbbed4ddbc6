use serde::{Deserialize, Serialize};

use super::rules::{AlertRule, Verdict};
use crate::analysis::VitalsSnapshot;
use crate::wire::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    Raise,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub rule_id: String,
    pub device_id: DeviceId,
    pub kind: AlertKind,
    pub t: f64,
    pub snapshot: VitalsSnapshot,
}

/// Raise/clear state machine for one rule on one device.
///
/// A transition fires once its condition has held over consecutive
/// snapshots spanning at least `sustain_s`. Snapshots without a usable value
/// for the rule are skipped entirely.
#[derive(Debug, Clone)]
pub struct RuleEvaluator {
    rule: AlertRule,
    raised: bool,
    since: Option<f64>,
}

impl RuleEvaluator {
    pub fn new(rule: AlertRule) -> Self {
        Self {
            rule,
            raised: false,
            since: None,
        }
    }

    pub fn rule(&self) -> &AlertRule {
        &self.rule
    }

    pub fn is_raised(&self) -> bool {
        self.raised
    }

    pub fn push(&mut self, snapshot: &VitalsSnapshot) -> Option<AlertEvent> {
        let verdict = self.rule.verdict(snapshot);
        let toward = match (self.raised, verdict) {
            (_, Verdict::Unknown) => return None,
            (false, Verdict::Firing) | (true, Verdict::Clear) => true,
            _ => false,
        };
        if !toward {
            self.since = None;
            return None;
        }
        let since = *self.since.get_or_insert(snapshot.t);
        if snapshot.t - since < self.rule.sustain_s {
            return None;
        }
        self.raised = !self.raised;
        self.since = None;
        Some(AlertEvent {
            rule_id: self.rule.rule_id.clone(),
            device_id: snapshot.device_id,
            kind: if self.raised {
                AlertKind::Raise
            } else {
                AlertKind::Clear
            },
            t: snapshot.t,
            snapshot: snapshot.clone(),
        })
    }
}

/// Evaluates a whole snapshot trace against one rule.
pub fn evaluate(rule: &AlertRule, snapshots: &[VitalsSnapshot]) -> Vec<AlertEvent> {
    let mut ev = RuleEvaluator::new(rule.clone());
    snapshots.iter().filter_map(|s| ev.push(s)).collect()
}

/// Every rule of a rule set for one device.
#[derive(Debug, Clone)]
pub struct DeviceRules {
    device_id: DeviceId,
    evaluators: Vec<RuleEvaluator>,
}

impl DeviceRules {
    pub fn new(device_id: DeviceId, rules: &[AlertRule]) -> Self {
        Self {
            device_id,
            evaluators: rules.iter().cloned().map(RuleEvaluator::new).collect(),
        }
    }

    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn push(&mut self, snapshot: &VitalsSnapshot, out: &mut Vec<AlertEvent>) {
        out.extend(self.evaluators.iter_mut().filter_map(|e| e.push(snapshot)));
    }
}
