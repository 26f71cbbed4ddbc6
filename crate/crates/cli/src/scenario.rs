//! Scenario files for `simulate`.
//!
//! ```text
//! bpm = 72
//! rhythm = normal
//! jitter = 0.02
//! seed = 7
//! noise_mv = 0.02
//! baseline_mv = 0.1
//! powerline_mv = 0.05
//! schedule = 30 tachycardia
//! temperature = 0:36.8 20:36.8 21:38.6 40:38.6 41:36.8
//! alcohol = 0:0.1
//! humidity = 0:45
//! lead_off = 10..12 plus
//! start_us = 1760000000000000
//! ```

use cardiolink::device::{LeadOffWindow, LeadState, Scenario, SensorTrajectory, Track};
use cardiolink::ecg_synth::{
    generate_scheduled, inject_anomaly, Morphology, NoiseSpec, RhythmMode, RhythmPlan,
    ScheduledPlan,
};
use cardiolink::kv::{Entry, KvError, KvFile};

pub const KEYS: &[&str] = &[
    "bpm",
    "rhythm",
    "jitter",
    "seed",
    "noise_mv",
    "baseline_mv",
    "powerline_mv",
    "schedule",
    "temperature",
    "humidity",
    "alcohol",
    "lead_off",
    "start_us",
];

pub const DEFAULT_START_US: u64 = 1_760_000_000_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub plan: RhythmPlan,
    /// Rhythm switches after the start, as `(from_s, mode)`.
    pub schedule: Vec<(f64, RhythmMode)>,
    pub noise: NoiseSpec,
    pub sensors: SensorTrajectory,
    pub lead_off: Vec<LeadOffWindow>,
    pub start_us: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            plan: RhythmPlan::new(72.0, 0.02, RhythmMode::Normal, 1),
            schedule: Vec::new(),
            noise: NoiseSpec::white(0.01),
            sensors: SensorTrajectory::default(),
            lead_off: Vec::new(),
            start_us: DEFAULT_START_US,
        }
    }
}

fn track(e: &Entry) -> Result<Track, KvError> {
    let mut points = Vec::new();
    for tok in e.value.split_whitespace() {
        let (t, v) = tok
            .split_once(':')
            .ok_or_else(|| e.bad(format!("expected t:value, got `{tok}`")))?;
        let t: f64 = t.parse().map_err(|_| e.bad(format!("bad time `{t}`")))?;
        let v: f64 = v.parse().map_err(|_| e.bad(format!("bad value `{v}`")))?;
        points.push((t, v));
    }
    if points.is_empty() {
        return Err(e.bad("empty track"));
    }
    Track::new(points).ok_or_else(|| e.bad("breakpoints must be time-ordered"))
}

fn lead_window(e: &Entry) -> Result<LeadOffWindow, KvError> {
    let mut parts = e.value.split_whitespace();
    let range = parts.next().unwrap_or_default();
    let (a, b) = range
        .split_once("..")
        .ok_or_else(|| e.bad("expected `from..to [plus|minus|both]`"))?;
    let from_s: f64 = a.parse().map_err(|_| e.bad(format!("bad time `{a}`")))?;
    let to_s: f64 = b.parse().map_err(|_| e.bad(format!("bad time `{b}`")))?;
    if !(from_s < to_s) {
        return Err(e.bad("window must have from < to"));
    }
    let lead = match parts.next().unwrap_or("both") {
        "plus" => LeadState { lo_plus: true, lo_minus: false },
        "minus" => LeadState { lo_plus: false, lo_minus: true },
        "both" => LeadState { lo_plus: true, lo_minus: true },
        other => return Err(e.bad(format!("unknown lead `{other}`"))),
    };
    Ok(LeadOffWindow { from_s, to_s, lead })
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let kv = KvFile::parse(text)?;
        kv.check_keys(KEYS)?;
        let mut s = ScenarioSpec::default();
        if let Some(v) = kv.get("bpm")? {
            s.plan.base_bpm = v;
        }
        if let Some(v) = kv.get("rhythm")? {
            s.plan.mode = v;
        }
        if let Some(v) = kv.get("jitter")? {
            s.plan.rr_jitter = v;
        }
        if let Some(v) = kv.get("seed")? {
            s.plan.seed = v;
        }
        if let Some(v) = kv.get("noise_mv")? {
            s.noise.white_noise_mv = v;
        }
        if let Some(v) = kv.get("baseline_mv")? {
            s.noise.baseline_wander_mv = v;
            s.noise.baseline_wander_hz = 0.3;
        }
        if let Some(v) = kv.get("powerline_mv")? {
            s.noise.powerline_mv = v;
            s.noise.powerline_hz = 50.0;
        }
        if let Some(v) = kv.get("start_us")? {
            s.start_us = v;
        }
        for e in kv.all("schedule") {
            let (t, mode) = e
                .value
                .split_once(char::is_whitespace)
                .ok_or_else(|| e.bad("expected `<seconds> <rhythm>`"))?;
            let t: f64 = t.parse().map_err(|_| e.bad(format!("bad time `{t}`")))?;
            let mode: RhythmMode = mode.trim().parse().map_err(|err| e.bad(format!("{err}")))?;
            if s.schedule.last().is_some_and(|&(prev, _)| prev > t) {
                return Err(e.bad("schedule must be time-ordered"));
            }
            s.schedule.push((t, mode));
        }
        if let Some(e) = kv.single("temperature")? {
            s.sensors.temperature_c = track(e)?;
        }
        if let Some(e) = kv.single("humidity")? {
            s.sensors.humidity_pct = track(e)?;
        }
        if let Some(e) = kv.single("alcohol")? {
            s.sensors.alcohol_level = track(e)?;
        }
        for e in kv.all("lead_off") {
            s.lead_off.push(lead_window(e)?);
        }
        if let Err(err) = s.plan.validate() {
            let line = kv.single("bpm")?.or(kv.single("jitter")?).map_or(0, |e| e.line);
            return Err(KvError::BadValue {
                line,
                key: "bpm".into(),
                reason: err.to_string(),
            });
        }
        Ok(s)
    }

    /// Rhythm schedule. A `normal` opening plan keeps its bpm as written so
    /// any rate can be simulated; other modes and every switch get the
    /// mode's preset.
    pub fn plans(&self, seed: u64) -> Vec<ScheduledPlan> {
        let base = RhythmPlan { seed, ..self.plan };
        let first = match base.mode {
            RhythmMode::Normal => base,
            mode => inject_anomaly(&base, mode),
        };
        let mut out = vec![ScheduledPlan {
            from_s: 0.0,
            plan: first,
        }];
        for &(from_s, mode) in &self.schedule {
            out.push(ScheduledPlan {
                from_s,
                plan: inject_anomaly(&base, mode),
            });
        }
        out
    }

    /// Builds device `index`'s scenario; each device gets `seed + index`.
    pub fn build(&self, index: u16, duration_s: f64, fs: f64) -> Result<Scenario, String> {
        let seed = self.plan.seed.wrapping_add(u64::from(index));
        // One sample of slack so rounding never leaves the device short.
        let signal = generate_scheduled(
            duration_s + 1.0 / fs,
            fs,
            &self.plans(seed),
            &Morphology::default(),
            &self.noise,
        )
        .map_err(|e| e.to_string())?;
        Ok(Scenario {
            signal,
            sensors: self.sensors.clone(),
            lead_off: self.lead_off.clone(),
            start_time_us: self.start_us,
        })
    }
}
