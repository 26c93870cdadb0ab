//! Batch entry points: single runs, Monte Carlo sweeps and assessments.
//! Every artifact goes under `<out>/<config hash>-s<seed>/`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::detection::{evaluate, Alert, DetectionError, DetectionMetrics, DetectorConfig, TrialOutcome, TrialSource};
use crate::pairing::select_association;
use crate::risk::{applicable_findings, RiskReport, ScenarioFacts};
use crate::sim::World;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dir: PathBuf,
    pub events_path: PathBuf,
    pub journal_path: PathBuf,
    pub alerts_path: PathBuf,
    pub alerts: Vec<Alert>,
}

/// `<out>/<hash8>-s<seed>`.
pub fn artifact_dir(config: &ScenarioConfig, out: &Path) -> PathBuf {
    out.join(format!("{}-s{}", config.hash8(), config.seed))
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Runs the scenario once, as fast as possible, and writes the frame log,
/// the interception journal and the alert list.
pub fn run(config: &ScenarioConfig, out: &Path) -> Result<(World, RunResult), HarnessError> {
    let mut world = World::new(config.clone())?;
    world.run();
    let dir = artifact_dir(config, out);
    create_dir(&dir)?;
    let events_path = dir.join("events.jsonl");
    let journal_path = dir.join("journal.jsonl");
    let alerts_path = dir.join("alerts.jsonl");
    write_with(&events_path, |w| world.medium.write_jsonl(w))?;
    write_with(&journal_path, |w| world.write_journal(w))?;
    write_with(&alerts_path, |w| {
        for a in world.alerts() {
            serde_json::to_writer(&mut *w, a)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let alerts = world.alerts().to_vec();
    Ok((
        world,
        RunResult {
            dir,
            events_path,
            journal_path,
            alerts_path,
            alerts,
        },
    ))
}

/// Paired attack and clean runs of the full protocol simulation. The seed
/// replaces the configured one; only `mitm.enabled` differs between the
/// two runs of a pair.
#[derive(Debug, Clone)]
pub struct SimTrials {
    pub config: ScenarioConfig,
}

impl SimTrials {
    pub fn world(&self, seed: u64, attack: bool) -> World {
        let mut cfg = self.config.clone();
        cfg.seed = seed;
        cfg.mitm.enabled = attack;
        World::new(cfg).expect("validated in montecarlo")
    }
}

impl TrialSource for SimTrials {
    fn has_attack(&self) -> bool {
        self.config.mitm.enabled
    }

    fn config(&self) -> &DetectorConfig {
        &self.config.detector
    }

    /// Windows before the proxy link count as clean. Detection is any alert
    /// at or after the takeover starts; time to detect runs from there.
    fn trial(&self, seed: u64, attack: bool) -> TrialOutcome {
        let mut w = self.world(seed, attack);
        w.run();
        let start = self.config.mitm.start_ms;
        if !attack {
            return TrialOutcome {
                clean_windows: w.phone.rssi_detector().evaluations(),
                clean_alerts: w.alerts().len() as u64,
                attack_detected: false,
                time_to_detect_ms: None,
            };
        }
        let first = w.alerts().iter().find(|a| a.time_ms >= start);
        TrialOutcome {
            clean_windows: w.evaluations_before_attack(),
            clean_alerts: w.alerts().iter().filter(|a| a.time_ms < start).count() as u64,
            attack_detected: first.is_some(),
            time_to_detect_ms: first.map(|a| a.time_ms - start),
        }
    }
}

/// Sweeps seeds `seed_base..seed_base + runs` and writes `metrics.csv`.
pub fn montecarlo(
    config: &ScenarioConfig,
    runs: usize,
    seed_base: u64,
    out: &Path,
) -> Result<(DetectionMetrics, PathBuf), HarnessError> {
    config.validate()?;
    let metrics = evaluate(&SimTrials { config: config.clone() }, runs, seed_base)?;
    let mut named = config.clone();
    named.seed = seed_base;
    let dir = artifact_dir(&named, out);
    create_dir(&dir)?;
    let path = dir.join("metrics.csv");
    fs::write(&path, metrics.to_csv()).map_err(io_err(&path))?;
    Ok((metrics, path))
}

pub fn scenario_facts(config: &ScenarioConfig) -> ScenarioFacts {
    ScenarioFacts {
        pairing_mode: config.pairing_mode,
        association_method: select_association(
            config.initiator_io,
            config.responder_io,
            config.oob_available,
        ),
        always_discoverable: config.always_discoverable,
        user_auth_present: config.user_auth_present,
        end_to_end_security: config.end_to_end_security,
    }
}

pub fn assess(config: &ScenarioConfig) -> Result<RiskReport, HarnessError> {
    config.validate()?;
    let facts = scenario_facts(config);
    Ok(RiskReport::new(applicable_findings(&facts), facts))
}

/// Writes `report.json` and `report.txt`, returning the directory.
pub fn write_report(config: &ScenarioConfig, report: &RiskReport, out: &Path) -> Result<PathBuf, HarnessError> {
    let dir = artifact_dir(config, out);
    create_dir(&dir)?;
    for (name, body) in [("report.json", report.to_json()), ("report.txt", report.to_text())] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(dir)
}
