//! Experiment configuration: a TOML document with typed sections, unit
//! suffixes on physical quantities, and defaults that reproduce the
//! simulated radio environment out of the box. An empty document is a
//! complete, valid configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::learner::ModelShape;
use crate::radio::RadioConfig;
use crate::scheduler::{DeadlinePolicy, Policy};

#[derive(Clone, Copy)]
enum Conv {
    Scale(f64),
    Db,
    DbMilliwatt,
}

fn convert(conv: Conv, v: f64) -> f64 {
    match conv {
        Conv::Scale(s) => v * s,
        Conv::Db => 10f64.powf(v / 10.0),
        Conv::DbMilliwatt => 10f64.powf((v - 30.0) / 10.0),
    }
}

/// Splits "20dBm" into 20.0 and "dBm", applies the matching conversion.
/// Bare numeric strings pass through as base SI units.
fn parse_suffixed(s: &str, table: &[(&str, Conv)], what: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    let cut = t
        .rfind(|c: char| c.is_ascii_digit() || c == '.')
        .map(|i| i + 1)
        .ok_or_else(|| format!("no numeric part in {what} value '{s}'"))?;
    let (num, suffix) = t.split_at(cut);
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse number in {what} value '{s}'"))?;
    let suffix = suffix.trim();
    if suffix.is_empty() {
        return Ok(v);
    }
    table
        .iter()
        .find(|(sfx, _)| *sfx == suffix)
        .map(|&(_, c)| convert(c, v))
        .ok_or_else(|| {
            let known: Vec<&str> = table.iter().map(|&(s, _)| s).collect();
            format!("unknown {what} suffix '{suffix}' in '{s}' (accepted: {})", known.join(", "))
        })
}

macro_rules! quantity {
    ($name:ident, $what:literal, [$(($sfx:literal, $conv:expr)),+ $(,)?]) => {
        /// Stored in base SI units; deserializes from a bare number or a
        /// suffixed string.
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
        #[serde(transparent)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                struct V;
                impl serde::de::Visitor<'_> for V {
                    type Value = f64;
                    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                        write!(f, "a number or suffixed string for a {} value", $what)
                    }
                    fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<f64, E> {
                        Ok(v as f64)
                    }
                    fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<f64, E> {
                        Ok(v as f64)
                    }
                    fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<f64, E> {
                        Ok(v)
                    }
                    fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<f64, E> {
                        parse_suffixed(s, &[$(($sfx, $conv)),+], $what).map_err(E::custom)
                    }
                }
                d.deserialize_any(V).map($name)
            }
        }
    };
}

quantity!(Hertz, "frequency", [
    ("Hz", Conv::Scale(1.0)),
    ("kHz", Conv::Scale(1e3)),
    ("MHz", Conv::Scale(1e6)),
    ("GHz", Conv::Scale(1e9)),
]);
quantity!(Watts, "power", [
    ("W", Conv::Scale(1.0)),
    ("mW", Conv::Scale(1e-3)),
    ("uW", Conv::Scale(1e-6)),
    ("dBm", Conv::DbMilliwatt),
]);
quantity!(Gain, "gain", [("dB", Conv::Db)]);
quantity!(Meters, "distance", [
    ("m", Conv::Scale(1.0)),
    ("cm", Conv::Scale(1e-2)),
    ("km", Conv::Scale(1e3)),
]);
quantity!(Seconds, "time", [
    ("s", Conv::Scale(1.0)),
    ("ms", Conv::Scale(1e-3)),
    ("min", Conv::Scale(60.0)),
    ("h", Conv::Scale(3600.0)),
]);

/// Radio environment and the per-client resource ranges profiles are
/// drawn from. Power draws are uniform in dBm (log-uniform in watts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSection {
    pub bandwidth: Hertz,
    pub subchannels: u32,
    pub noise: Watts,
    pub path_gain_ref: Gain,
    pub ref_distance: Meters,
    pub distance_min: Meters,
    pub distance_max: Meters,
    pub power_min: Watts,
    pub power_max: Watts,
    pub cpu_min: Hertz,
    pub cpu_max: Hertz,
    pub cycles_per_sample: f64,
    pub fading: bool,
    pub rate_log2: bool,
}

impl Default for RadioSection {
    fn default() -> Self {
        Self {
            bandwidth: Hertz(10e6),
            subchannels: 10,
            noise: Watts(1e-6),
            path_gain_ref: Gain(10f64.powf(-3.5)), // -35 dB
            ref_distance: Meters(2.0),
            distance_min: Meters(20.0),
            distance_max: Meters(100.0),
            power_min: Watts(10f64.powf(-4.0)), // -10 dBm
            power_max: Watts(0.1),              // 20 dBm
            cpu_min: Hertz(1e9),
            cpu_max: Hertz(9e9),
            cycles_per_sample: 20.0,
            fading: true,
            rate_log2: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub model: ModelKind,
    /// Hidden width, used only by the mlp model.
    pub hidden: u32,
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Logistic,
            hidden: 16,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

/// "max" or "quantile:Q" with Q in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeadlineSpec {
    Max,
    Quantile(f64),
}

impl DeadlineSpec {
    pub fn to_policy(self) -> DeadlinePolicy {
        match self {
            DeadlineSpec::Max => DeadlinePolicy::MaxEstimate,
            DeadlineSpec::Quantile(q) => DeadlinePolicy::Quantile(q),
        }
    }
}

impl Serialize for DeadlineSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DeadlineSpec::Max => s.serialize_str("max"),
            DeadlineSpec::Quantile(q) => s.serialize_str(&format!("quantile:{q}")),
        }
    }
}

impl<'de> Deserialize<'de> for DeadlineSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "max" {
            return Ok(DeadlineSpec::Max);
        }
        if let Some(q) = s.strip_prefix("quantile:") {
            let q: f64 = q
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("bad quantile in '{s}'")))?;
            return Ok(DeadlineSpec::Quantile(q));
        }
        Err(serde::de::Error::custom(format!(
            "deadline must be 'max' or 'quantile:Q', got '{s}'"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub policy: Policy,
    pub deadline: DeadlineSpec,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self { policy: Policy::Proposed, deadline: DeadlineSpec::Max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClustererSection {
    /// Stationarity bound on the weighted mean update norm.
    pub eps1: f64,
    /// Minimum individual update norm hinting at unserved members. Keeping
    /// eps2 above eps1 closes the gate for aligned populations, whose mean
    /// and max norms decay together through the (eps1, eps2) window.
    pub eps2: f64,
    pub exhaustive_limit: u32,
}

impl Default for ClustererSection {
    fn default() -> Self {
        Self { eps1: 0.1, eps2: 0.3, exhaustive_limit: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub rounds: u32,
    /// Simulated-seconds budget; rounds that cannot fit are not started.
    pub time_budget: Seconds,
    /// Relative train-loss improvement below this counts toward a plateau.
    pub convergence_tol: f64,
    /// Consecutive plateau rounds before a cluster may be marked converged.
    pub patience: u32,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            rounds: 200,
            time_budget: Seconds(f64::INFINITY),
            convergence_tol: 0.01,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub dataset: DatasetSpec,
    pub radio: RadioSection,
    pub learner: LearnerSection,
    pub scheduler: SchedulerSection,
    pub clusterer: ClustererSection,
    pub engine: EngineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: None,
            dataset: DatasetSpec::default(),
            radio: RadioSection::default(),
            learner: LearnerSection::default(),
            scheduler: SchedulerSection::default(),
            clusterer: ClustererSection::default(),
            engine: EngineSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical rendering; stable across runs.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_shape(&self) -> ModelShape {
        let features = self.dataset.features;
        let classes = self.dataset.classes as usize;
        match self.learner.model {
            ModelKind::Logistic => ModelShape::Logistic { features, classes },
            ModelKind::Mlp => {
                ModelShape::Mlp { features, hidden: self.learner.hidden as usize, classes }
            }
        }
    }

    /// Radio parameters with the model size filled in by the caller.
    pub fn radio_config(&self, model_bits: f64) -> RadioConfig {
        RadioConfig {
            bandwidth_hz: self.radio.bandwidth.0,
            subchannels: self.radio.subchannels,
            noise_w: self.radio.noise.0,
            path_gain_ref: self.radio.path_gain_ref.0,
            ref_distance_m: self.radio.ref_distance.0,
            model_bits,
            fading: self.radio.fading,
            rate_log2: self.radio.rate_log2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let r = &self.radio;
        if r.subchannels == 0 {
            return bad(
                "radio.subchannels must be at least 1; it caps concurrent uploads per round"
                    .into(),
            );
        }
        if r.bandwidth.0 <= 0.0 {
            return bad("radio.bandwidth must be positive".into());
        }
        if r.noise.0 <= 0.0 {
            return bad("radio.noise must be positive".into());
        }
        if r.path_gain_ref.0 <= 0.0 {
            return bad("radio.path_gain_ref must be positive".into());
        }
        if r.ref_distance.0 <= 0.0 {
            return bad("radio.ref_distance must be positive".into());
        }
        if r.distance_min.0 <= 0.0 || r.distance_max.0 < r.distance_min.0 {
            return bad("radio.distance range must satisfy 0 < min <= max".into());
        }
        if r.power_min.0 <= 0.0 || r.power_max.0 < r.power_min.0 {
            return bad("radio.power range must satisfy 0 < min <= max".into());
        }
        if r.cpu_min.0 <= 0.0 || r.cpu_max.0 < r.cpu_min.0 {
            return bad("radio.cpu range must satisfy 0 < min <= max".into());
        }
        if r.cycles_per_sample <= 0.0 {
            return bad("radio.cycles_per_sample must be positive".into());
        }
        let l = &self.learner;
        if l.epochs == 0 {
            return bad("learner.epochs must be at least 1".into());
        }
        if l.batch_size == 0 {
            return bad("learner.batch_size must be at least 1".into());
        }
        if !(l.learning_rate > 0.0) {
            return bad(format!(
                "learner.learning_rate must be positive, got {}",
                l.learning_rate
            ));
        }
        if l.model == ModelKind::Mlp && l.hidden == 0 {
            return bad("learner.hidden must be at least 1 for the mlp model".into());
        }
        if let DeadlineSpec::Quantile(q) = self.scheduler.deadline {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidQuantile(q));
            }
        }
        let c = &self.clusterer;
        if !(c.eps1 > 0.0) || !(c.eps2 > 0.0) {
            return bad("clusterer.eps1 and clusterer.eps2 must be positive".into());
        }
        if c.exhaustive_limit < 2 {
            return bad("clusterer.exhaustive_limit must be at least 2".into());
        }
        let e = &self.engine;
        if !(e.time_budget.0 > 0.0) {
            return bad("engine.time_budget must be positive".into());
        }
        if !(e.convergence_tol > 0.0) {
            return bad("engine.convergence_tol must be positive".into());
        }
        if e.patience == 0 {
            return bad("engine.patience must be at least 1".into());
        }
        Ok(())
    }
}
