//! Alert rules and their line syntax.
//!
//! ```text
//! # id: metric comparator threshold [sustain <secs>s] [clear-hyst <units>]
//! tachy: bpm > 100 sustain 10s clear-hyst 5
//! fever: temperature_c >= 38.0 sustain 5s clear-hyst 0.5
//! irr:   rhythm = irregular sustain 15s
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Rhythm, VitalsSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bpm,
    TemperatureC,
    AlcoholLevel,
    Rhythm,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bpm => "bpm",
            Metric::TemperatureC => "temperature_c",
            Metric::AlcoholLevel => "alcohol_level",
            Metric::Rhythm => "rhythm",
        }
    }

    fn parse(s: &str) -> Option<Metric> {
        [
            Metric::Bpm,
            Metric::TemperatureC,
            Metric::AlcoholLevel,
            Metric::Rhythm,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    /// The numeric value of this metric in `s`, if it has one.
    pub fn value(self, s: &VitalsSnapshot) -> Option<f64> {
        let v = match self {
            Metric::Bpm => s.bpm?,
            Metric::TemperatureC => s.temperature_c?,
            Metric::AlcoholLevel => s.alcohol_level?,
            Metric::Rhythm => return None,
        };
        v.is_finite().then_some(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum Condition {
    Above(f64),
    AtLeast(f64),
    Below(f64),
    AtMost(f64),
    Is(Rhythm),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Above(v) => write!(f, "> {v}"),
            Condition::AtLeast(v) => write!(f, ">= {v}"),
            Condition::Below(v) => write!(f, "< {v}"),
            Condition::AtMost(v) => write!(f, "<= {v}"),
            Condition::Is(r) => write!(f, "= {r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub rule_id: String,
    pub metric: Metric,
    pub condition: Condition,
    pub sustain_s: f64,
    /// Margin past the threshold the value must retreat before clearing.
    pub hysteresis: f64,
}

/// How a snapshot bears on a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// The raise condition holds.
    Firing,
    /// The hysteresis-adjusted clear condition holds.
    Clear,
    /// Between the raise and clear thresholds.
    Band,
    /// The snapshot carries no usable value for this rule.
    Unknown,
}

impl AlertRule {
    pub fn verdict(&self, s: &VitalsSnapshot) -> Verdict {
        if let Condition::Is(target) = self.condition {
            if self.metric != Metric::Rhythm || s.rhythm == Rhythm::Indeterminate {
                return Verdict::Unknown;
            }
            return if s.rhythm == target {
                Verdict::Firing
            } else {
                Verdict::Clear
            };
        }
        let Some(v) = self.metric.value(s) else {
            return Verdict::Unknown;
        };
        let h = self.hysteresis;
        let (firing, clear) = match self.condition {
            Condition::Above(t) => (v > t, v <= t - h),
            Condition::AtLeast(t) => (v >= t, v < t - h),
            Condition::Below(t) => (v < t, v >= t + h),
            Condition::AtMost(t) => (v <= t, v > t + h),
            Condition::Is(_) => unreachable!("handled above"),
        };
        if firing {
            Verdict::Firing
        } else if clear {
            Verdict::Clear
        } else {
            Verdict::Band
        }
    }

    /// The rule in the same syntax [`rules_from_config`] reads.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{}: {} {} sustain {}s",
            self.rule_id,
            self.metric.as_str(),
            self.condition,
            self.sustain_s
        );
        if self.hysteresis != 0.0 {
            line.push_str(&format!(" clear-hyst {}", self.hysteresis));
        }
        line
    }
}

/// Shipped thresholds. The device's on-board alarm reuses these too.
pub mod defaults {
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Threshold {
        pub threshold: f64,
        pub sustain_s: f64,
        pub hysteresis: f64,
    }

    pub const TACHYCARDIA_BPM: Threshold = Threshold {
        threshold: 100.0,
        sustain_s: 10.0,
        hysteresis: 5.0,
    };
    pub const BRADYCARDIA_BPM: Threshold = Threshold {
        threshold: 60.0,
        sustain_s: 10.0,
        hysteresis: 5.0,
    };
    pub const TEMPERATURE_C: Threshold = Threshold {
        threshold: 38.0,
        sustain_s: 5.0,
        hysteresis: 0.5,
    };
    pub const ALCOHOL_LEVEL: Threshold = Threshold {
        threshold: 0.25,
        sustain_s: 3.0,
        hysteresis: 0.05,
    };
    pub const IRREGULAR_SUSTAIN_S: f64 = 15.0;
}

pub fn default_rules() -> Vec<AlertRule> {
    use defaults::*;
    let rule = |id: &str, metric, condition, t: Threshold| AlertRule {
        rule_id: id.to_string(),
        metric,
        condition,
        sustain_s: t.sustain_s,
        hysteresis: t.hysteresis,
    };
    vec![
        rule(
            "tachycardia",
            Metric::Bpm,
            Condition::Above(TACHYCARDIA_BPM.threshold),
            TACHYCARDIA_BPM,
        ),
        rule(
            "bradycardia",
            Metric::Bpm,
            Condition::Below(BRADYCARDIA_BPM.threshold),
            BRADYCARDIA_BPM,
        ),
        rule(
            "fever",
            Metric::TemperatureC,
            Condition::AtLeast(TEMPERATURE_C.threshold),
            TEMPERATURE_C,
        ),
        rule(
            "alcohol",
            Metric::AlcoholLevel,
            Condition::AtLeast(ALCOHOL_LEVEL.threshold),
            ALCOHOL_LEVEL,
        ),
        AlertRule {
            rule_id: "irregular".into(),
            metric: Metric::Rhythm,
            condition: Condition::Is(Rhythm::Irregular),
            sustain_s: IRREGULAR_SUSTAIN_S,
            hysteresis: 0.0,
        },
    ]
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: duplicate rule id `{rule_id}`")]
    DuplicateId { line: usize, rule_id: String },
}

/// Parses a rule file. Blank lines and `#` comments are ignored.
pub fn rules_from_config(text: &str) -> Result<Vec<AlertRule>, RuleParseError> {
    let mut rules = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let rule = parse_rule(content, line)?;
        if !seen.insert(rule.rule_id.clone()) {
            return Err(RuleParseError::DuplicateId {
                line,
                rule_id: rule.rule_id,
            });
        }
        rules.push(rule);
    }
    Ok(rules)
}

/// Whitespace-separated tokens with their 1-based starting columns.
fn tokens(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(st)) => {
                out.push((st + 1, &s[st..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push((st + 1, &s[st..]));
    }
    out
}

fn parse_rule(content: &str, line: usize) -> Result<AlertRule, RuleParseError> {
    let err = |column: usize, message: String| RuleParseError::Syntax {
        line,
        column,
        message,
    };
    let colon = content
        .find(':')
        .ok_or_else(|| err(1, "expected `id: metric comparator threshold`".into()))?;
    let rule_id = content[..colon].trim();
    if rule_id.is_empty() || rule_id.contains(char::is_whitespace) {
        return Err(err(1, "rule id must be a single word".into()));
    }
    let body_offset = colon + 1;
    let toks: Vec<(usize, &str)> = tokens(&content[body_offset..])
        .into_iter()
        .map(|(c, t)| (c + body_offset, t))
        .collect();
    let end_col = content.trim_end().len() + 1;
    let tok = |i: usize, what: &str| -> Result<(usize, &str), RuleParseError> {
        toks.get(i)
            .copied()
            .ok_or_else(|| err(end_col, format!("expected {what}")))
    };

    let (col, m) = tok(0, "a metric")?;
    let metric = Metric::parse(m).ok_or_else(|| err(col, format!("unknown metric `{m}`")))?;
    let (col, op) = tok(1, "a comparator")?;
    let (vcol, value) = tok(2, "a threshold")?;
    let number = || -> Result<f64, RuleParseError> {
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(vcol, format!("invalid threshold `{value}`")))
    };
    let condition = match (metric, op) {
        (Metric::Rhythm, "=" | "==") => Condition::Is(
            value
                .parse()
                .map_err(|_| err(vcol, format!("unknown rhythm `{value}`")))?,
        ),
        (Metric::Rhythm, _) => {
            return Err(err(col, format!("rhythm rules only support `=`, got `{op}`")))
        }
        (_, ">") => Condition::Above(number()?),
        (_, ">=" | "≥") => Condition::AtLeast(number()?),
        (_, "<") => Condition::Below(number()?),
        (_, "<=" | "≤") => Condition::AtMost(number()?),
        (_, _) => return Err(err(col, format!("unknown comparator `{op}`"))),
    };

    let mut sustain_s = 0.0;
    let mut hysteresis = 0.0;
    let mut i = 3;
    while i < toks.len() {
        let (col, key) = toks[i];
        let (vcol, raw) = tok(i + 1, &format!("a value after `{key}`"))?;
        let parse_non_negative = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| err(vcol, format!("`{key}` needs a non-negative number, got `{raw}`")))
        };
        match key {
            "sustain" => sustain_s = parse_non_negative(raw.strip_suffix('s').unwrap_or(raw))?,
            "clear-hyst" => hysteresis = parse_non_negative(raw)?,
            _ => return Err(err(col, format!("unknown option `{key}`"))),
        }
        i += 2;
    }
    Ok(AlertRule {
        rule_id: rule_id.to_string(),
        metric,
        condition,
        sustain_s,
        hysteresis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file() {
        assert!(rules_from_config("").unwrap().is_empty());
        assert!(rules_from_config("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn basic_rule() {
        let rules = rules_from_config("r1: bpm > 100 sustain 5s clear-hyst 5").unwrap();
        assert_eq!(
            rules,
            vec![AlertRule {
                rule_id: "r1".into(),
                metric: Metric::Bpm,
                condition: Condition::Above(100.0),
                sustain_s: 5.0,
                hysteresis: 5.0,
            }]
        );
    }

    #[test]
    fn rhythm_rule() {
        let rules = rules_from_config("irr: rhythm = irregular sustain 15s").unwrap();
        assert_eq!(rules[0].condition, Condition::Is(Rhythm::Irregular));
        assert_eq!(rules[0].hysteresis, 0.0);
    }

    #[test]
    fn duplicate_ids() {
        let err = rules_from_config("a: bpm > 1\nb: bpm < 1\na: bpm > 2\n").unwrap_err();
        assert_eq!(
            err,
            RuleParseError::DuplicateId {
                line: 3,
                rule_id: "a".into()
            }
        );
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn positioned_errors() {
        let err = rules_from_config("ok: bpm > 1\nbad: pulse > 100\n").unwrap_err();
        assert_eq!(
            err,
            RuleParseError::Syntax {
                line: 2,
                column: 6,
                message: "unknown metric `pulse`".into()
            }
        );
        let err = rules_from_config("x: bpm ~ 100").unwrap_err();
        assert!(matches!(err, RuleParseError::Syntax { line: 1, column: 8, .. }));
        let err = rules_from_config("x: bpm > 100 sustain").unwrap_err();
        assert!(matches!(err, RuleParseError::Syntax { line: 1, .. }));
        assert!(rules_from_config("x: rhythm > 3").is_err());
        assert!(rules_from_config("x: bpm > 100 sustain -1s").is_err());
    }

    #[test]
    fn defaults_round_trip_through_syntax() {
        let text: String = default_rules()
            .iter()
            .map(|r| r.to_line() + "\n")
            .collect();
        assert_eq!(rules_from_config(&text).unwrap(), default_rules());
    }

    #[test]
    fn verdicts_with_hysteresis() {
        let rule = &rules_from_config("t: temperature_c >= 38.0 clear-hyst 0.5").unwrap()[0];
        let snap = |temp: f64| VitalsSnapshot {
            device_id: Default::default(),
            t: 0.0,
            bpm: None,
            rr_mean: None,
            rr_sdnn: None,
            rr_rmssd: None,
            rhythm: Rhythm::Indeterminate,
            temperature_c: Some(temp),
            alcohol_level: Some(0.0),
            lead_ok: true,
        };
        assert_eq!(rule.verdict(&snap(38.0)), Verdict::Firing);
        assert_eq!(rule.verdict(&snap(37.8)), Verdict::Band);
        assert_eq!(rule.verdict(&snap(37.4)), Verdict::Clear);
        assert_eq!(rule.verdict(&snap(f64::NAN)), Verdict::Unknown);
        let low = &rules_from_config("b: bpm < 60 clear-hyst 5").unwrap()[0];
        let mut s = snap(0.0);
        s.bpm = Some(62.0);
        assert_eq!(low.verdict(&s), Verdict::Band);
        s.bpm = Some(65.0);
        assert_eq!(low.verdict(&s), Verdict::Clear);
        s.bpm = None;
        assert_eq!(low.verdict(&s), Verdict::Unknown);
    }
}
