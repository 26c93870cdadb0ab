//! Scenario configuration. One JSON document fully determines a run given
//! its seed; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actors::HeartRateSource;
use crate::detection::DetectorConfig;
use crate::mitm::{ModificationRule, RuleDirection, Transform};
use crate::pairing::{IoCapability, PairingMode, MAX_PASSKEY};
use crate::radio::{EmpiricalTable, PathLossParams, RssiModel, TimeMs};
use crate::gatt::HEART_RATE_MEASUREMENT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Distances {
    pub sensor_to_phone: f64,
    pub attacker_to_phone: f64,
    pub attacker_to_sensor: f64,
}

impl Default for Distances {
    fn default() -> Self {
        Distances {
            sensor_to_phone: 1.0,
            attacker_to_phone: 0.5,
            attacker_to_sensor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    Empirical,
}

/// `"empirical"` for the measured table, or explicit model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathLossConfig {
    Table(TableMode),
    Model(PathLossParams),
}

impl Default for PathLossConfig {
    fn default() -> Self {
        PathLossConfig::Table(TableMode::Empirical)
    }
}

impl PathLossConfig {
    pub fn rssi_model(&self) -> RssiModel {
        match self {
            PathLossConfig::Table(_) => RssiModel::Empirical(EmpiricalTable::measured()),
            PathLossConfig::Model(p) => RssiModel::Model(*p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub one_way_ms: TimeMs,
    pub proxy_processing_ms: TimeMs,
    pub echo_processing_ms: TimeMs,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            one_way_ms: 5,
            proxy_processing_ms: 2,
            echo_processing_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitmConfig {
    pub enabled: bool,
    pub start_ms: TimeMs,
    pub rules: Vec<ModificationRule>,
    pub manual_mode: bool,
    pub hold_timeout_ms: TimeMs,
}

impl Default for MitmConfig {
    fn default() -> Self {
        MitmConfig {
            enabled: false,
            start_ms: 60_000,
            rules: Vec::new(),
            manual_mode: false,
            hold_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RttProbeConfig {
    pub interval_ms: TimeMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_ms: TimeMs,
    pub pairing_mode: PairingMode,
    pub initiator_io: IoCapability,
    /// The sensor has no I/O; other values model hypothetical hardware.
    pub responder_io: IoCapability,
    pub oob_available: bool,
    /// Passkey typed by the user; random when absent.
    pub passkey: Option<u32>,
    pub distances: Distances,
    pub path_loss: PathLossConfig,
    pub latency: LatencyConfig,
    pub mitm: MitmConfig,
    pub detector: DetectorConfig,
    pub rtt_probe: Option<RttProbeConfig>,
    pub notify_interval_ms: TimeMs,
    pub heart_rate: HeartRateSource,
    pub supports_echo: bool,
    pub rssi_monitor: bool,
    pub adv_interval_ms: TimeMs,
    pub fake_adv_interval_ms: TimeMs,
    pub reconnect_delay_ms: TimeMs,
    pub scan_timeout_ms: TimeMs,
    pub always_discoverable: bool,
    pub user_auth_present: bool,
    pub end_to_end_security: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            duration_ms: 120_000,
            pairing_mode: PairingMode::LegacyLe,
            initiator_io: IoCapability::KeyboardDisplay,
            responder_io: IoCapability::NoInputNoOutput,
            oob_available: false,
            passkey: None,
            distances: Distances::default(),
            path_loss: PathLossConfig::default(),
            latency: LatencyConfig::default(),
            mitm: MitmConfig::default(),
            detector: DetectorConfig::default(),
            rtt_probe: None,
            notify_interval_ms: 1000,
            heart_rate: HeartRateSource::default(),
            supports_echo: false,
            rssi_monitor: true,
            adv_interval_ms: 100,
            fake_adv_interval_ms: 20,
            reconnect_delay_ms: 1000,
            scan_timeout_ms: 10_000,
            always_discoverable: true,
            user_auth_present: false,
            end_to_end_security: false,
        }
    }
}

impl ScenarioConfig {
    /// The fitness scenario with the 255 bpm attack enabled.
    pub fn paper_attack() -> ScenarioConfig {
        ScenarioConfig {
            mitm: MitmConfig {
                enabled: true,
                rules: vec![ModificationRule {
                    match_uuid: HEART_RATE_MEASUREMENT,
                    direction: RuleDirection::ToCentral,
                    transform: Transform::HrOverride { bpm: 255 },
                }],
                ..MitmConfig::default()
            },
            ..ScenarioConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(".", format!("{}: {e}", path.display())))?;
        ScenarioConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 hex digits of the SHA-256 of the canonical JSON form, with
    /// the seed excluded so one experiment's seeds share a prefix.
    pub fn hash8(&self) -> String {
        let canonical = serde_json::to_vec(&ScenarioConfig { seed: 0, ..self.clone() })
            .expect("config serializes");
        hex::encode(Sha256::digest(&canonical))[..8].to_string()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: TimeMs| {
            if v == 0 {
                Err(ConfigError::new(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("duration_ms", self.duration_ms)?;
        positive("notify_interval_ms", self.notify_interval_ms)?;
        positive("adv_interval_ms", self.adv_interval_ms)?;
        positive("fake_adv_interval_ms", self.fake_adv_interval_ms)?;
        positive("scan_timeout_ms", self.scan_timeout_ms)?;
        positive("latency.one_way_ms", self.latency.one_way_ms)?;
        positive("mitm.hold_timeout_ms", self.mitm.hold_timeout_ms)?;
        if let Some(p) = self.rtt_probe {
            positive("rtt_probe.interval_ms", p.interval_ms)?;
        }
        if let Some(p) = self.passkey {
            if p > MAX_PASSKEY {
                return Err(ConfigError::new("passkey", format!("{p} exceeds {MAX_PASSKEY}")));
            }
        }
        if !matches!(
            self.initiator_io,
            IoCapability::KeyboardDisplay | IoCapability::DisplayOnly
        ) {
            return Err(ConfigError::new(
                "initiator_io",
                "the app runs on a phone: KeyboardDisplay or DisplayOnly",
            ));
        }
        let model = self.path_loss.rssi_model();
        model
            .validate()
            .map_err(|e| ConfigError::new("path_loss", e.to_string()))?;
        for (field, d) in [
            ("distances.sensor_to_phone", self.distances.sensor_to_phone),
            ("distances.attacker_to_phone", self.distances.attacker_to_phone),
            ("distances.attacker_to_sensor", self.distances.attacker_to_sensor),
        ] {
            if !(d.is_finite() && d >= 0.0) {
                return Err(ConfigError::new(field, format!("distance {d} must be >= 0")));
            }
            model
                .distribution(d)
                .map_err(|e| ConfigError::new(field, e.to_string()))?;
        }
        self.detector
            .validate()
            .map_err(|e| ConfigError::new("detector", e.to_string()))?;
        self.heart_rate
            .validate()
            .map_err(|e| ConfigError::new("heart_rate", e.to_string()))?;
        for (i, r) in self.mitm.rules.iter().enumerate() {
            r.validate()
                .map_err(|e| ConfigError::new(&format!("mitm.rules[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ScenarioConfig::from_json("{}").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn round_trip() {
        let c = ScenarioConfig::paper_attack();
        assert_eq!(ScenarioConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = ScenarioConfig::from_json(r#"{"latency":{"one_way":5}}"#).unwrap_err();
        assert_eq!(e.field, "latency.one_way");
        let e = ScenarioConfig::from_json(r#"{"sead":1}"#).unwrap_err();
        assert_eq!(e.field, "sead");
    }

    #[test]
    fn negative_distance() {
        let e = ScenarioConfig::from_json(r#"{"distances":{"sensor_to_phone":-1}}"#).unwrap_err();
        assert_eq!(e.field, "distances.sensor_to_phone");
    }

    #[test]
    fn empirical_mode_needs_a_table_row() {
        let e = ScenarioConfig::from_json(r#"{"distances":{"sensor_to_phone":2}}"#).unwrap_err();
        assert_eq!(e.field, "distances.sensor_to_phone");
        let ok = r#"{"path_loss":{"n":2,"a":-60.8,"sigma":2.6},"distances":{"sensor_to_phone":2}}"#;
        let c = ScenarioConfig::from_json(ok).unwrap();
        assert!(matches!(c.path_loss, PathLossConfig::Model(_)));
    }

    #[test]
    fn field_diagnostics() {
        let cases = [
            (r#"{"duration_ms":0}"#, "duration_ms"),
            (r#"{"passkey":1000000}"#, "passkey"),
            (r#"{"initiator_io":"NoInputNoOutput"}"#, "initiator_io"),
            (r#"{"detector":{"w":0}}"#, "detector"),
            (
                r#"{"mitm":{"rules":[{"match_uuid":"2a38","direction":"both","transform":{"kind":"hr_offset","delta":1}}]}}"#,
                "mitm.rules[0]",
            ),
            (r#"{"heart_rate":{"kind":"seeded_walk","seed":1,"min":9,"max":3,"step_max":1}}"#, "heart_rate"),
        ];
        for (json, field) in cases {
            assert_eq!(ScenarioConfig::from_json(json).unwrap_err().field, field, "{json}");
        }
    }

    #[test]
    fn hash_ignores_seed() {
        let a = ScenarioConfig::default();
        let b = ScenarioConfig { seed: 99, ..a.clone() };
        assert_eq!(a.hash8(), b.hash8());
        assert_ne!(a.hash8(), ScenarioConfig::paper_attack().hash8());
        assert_eq!(a.hash8().len(), 8);
    }
}
