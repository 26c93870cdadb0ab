//! MitM detectors running on the victim central: an RSSI increase detector
//! over sliding windows and an RTT inflation detector, plus Monte Carlo
//! evaluation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::{sample_gaussian, TimeMs};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("baseline needs {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(&'static str),
    #[error("evaluation needs at least one run")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Baseline sample count.
    pub k: usize,
    /// Sliding window length.
    pub w: usize,
    /// Alert threshold in standard errors of the window mean.
    pub z: f64,
    /// RTT inflation factor.
    pub rho: f64,
    /// Lower bound on the baseline sigma used for thresholding, dB.
    pub sigma_floor: f64,
    /// Apply `sigma_floor`. Off gives the raw rule, which alerts on any
    /// window mean above a zero-variance baseline.
    pub clamp_sigma: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k: 20,
            w: 5,
            z: 3.0,
            rho: 1.5,
            sigma_floor: 0.5,
            clamp_sigma: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        if self.k < 2 {
            return Err(DetectionError::InvalidConfig("k must be >= 2"));
        }
        if self.w < 1 {
            return Err(DetectionError::InvalidConfig("w must be >= 1"));
        }
        if !(self.z.is_finite() && self.z > 0.0) {
            return Err(DetectionError::InvalidConfig("z must be > 0"));
        }
        if !(self.rho.is_finite() && self.rho > 1.0) {
            return Err(DetectionError::InvalidConfig("rho must be > 1"));
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor >= 0.0) {
            return Err(DetectionError::InvalidConfig("sigma_floor must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssiBaseline {
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: usize,
}

/// Mean and sample standard deviation (divisor `k - 1`) of the first `k`
/// samples.
pub fn fit_baseline(samples: &[f64], k: usize) -> Result<RssiBaseline, DetectionError> {
    if k < 2 || samples.len() < k {
        return Err(DetectionError::InsufficientSamples {
            needed: k.max(2),
            got: samples.len(),
        });
    }
    let xs = &samples[..k];
    // Shifted by the first sample so constant input gives an exact mean.
    let x0 = xs[0];
    let mu = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / k as f64;
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(RssiBaseline {
        mu,
        sigma: var.sqrt(),
        sample_count: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    RssiIncrease,
    RttInflation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub time_ms: TimeMs,
    pub kind: AlertKind,
    /// Standardized excess over the threshold.
    pub score: f64,
}

/// Increase-only RSSI detector. Collects `k` samples, freezes the baseline,
/// then tests every full window of the last `w` samples.
#[derive(Debug, Clone)]
pub struct RssiDetector {
    config: DetectorConfig,
    pending: Vec<f64>,
    baseline: Option<RssiBaseline>,
    window: VecDeque<f64>,
    evaluations: u64,
}

impl RssiDetector {
    pub fn new(config: DetectorConfig) -> RssiDetector {
        RssiDetector {
            config,
            pending: Vec::with_capacity(config.k),
            baseline: None,
            window: VecDeque::with_capacity(config.w),
            evaluations: 0,
        }
    }

    /// A detector whose baseline is already frozen.
    pub fn with_baseline(config: DetectorConfig, baseline: RssiBaseline) -> RssiDetector {
        let mut d = RssiDetector::new(config);
        d.baseline = Some(baseline);
        d
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn baseline(&self) -> Option<&RssiBaseline> {
        self.baseline.as_ref()
    }

    /// Number of windows tested so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn effective_sigma(&self) -> Option<f64> {
        let b = self.baseline?;
        Some(if self.config.clamp_sigma {
            b.sigma.max(self.config.sigma_floor)
        } else {
            b.sigma
        })
    }

    /// Window-mean alert threshold `mu + z * sigma / sqrt(w)`.
    pub fn threshold(&self) -> Option<f64> {
        let b = self.baseline?;
        let se = self.effective_sigma()? / (self.config.w as f64).sqrt();
        Some(b.mu + self.config.z * se)
    }

    pub fn update(&mut self, time_ms: TimeMs, sample: f64) -> Option<Alert> {
        if self.baseline.is_none() {
            self.pending.push(sample);
            if self.pending.len() == self.config.k {
                self.baseline = fit_baseline(&self.pending, self.config.k).ok();
            }
            return None;
        }
        self.window.push_back(sample);
        if self.window.len() > self.config.w {
            self.window.pop_front();
        }
        if self.window.len() < self.config.w {
            return None;
        }
        self.evaluations += 1;
        let mean = self.window.iter().sum::<f64>() / self.config.w as f64;
        let threshold = self.threshold()?;
        if mean <= threshold {
            return None;
        }
        let se = self.effective_sigma()? / (self.config.w as f64).sqrt();
        let score = if se > 0.0 {
            (mean - threshold) / se
        } else {
            f64::INFINITY
        };
        Some(Alert {
            time_ms,
            kind: AlertKind::RssiIncrease,
            score,
        })
    }
}

/// `sample > rho * baseline`. The score is the excess ratio over `rho`.
pub fn rtt_update(time_ms: TimeMs, sample_ms: f64, baseline_ms: f64, rho: f64) -> Option<Alert> {
    (sample_ms > rho * baseline_ms).then(|| Alert {
        time_ms,
        kind: AlertKind::RttInflation,
        score: sample_ms / baseline_ms - rho,
    })
}

/// RTT inflation detector. The baseline is the mean of the first `k`
/// samples. A peripheral that rejects echo requests leaves it inactive.
#[derive(Debug, Clone)]
pub struct RttDetector {
    k: usize,
    rho: f64,
    pending: Vec<f64>,
    baseline: Option<f64>,
    unsupported: bool,
}

impl RttDetector {
    pub fn new(config: &DetectorConfig) -> RttDetector {
        RttDetector {
            k: config.k,
            rho: config.rho,
            pending: Vec::new(),
            baseline: None,
            unsupported: false,
        }
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn mark_unsupported(&mut self) {
        self.unsupported = true;
    }

    pub fn is_active(&self) -> bool {
        !self.unsupported
    }

    pub fn update(&mut self, time_ms: TimeMs, sample_ms: f64) -> Option<Alert> {
        if self.unsupported {
            return None;
        }
        match self.baseline {
            Some(b) => rtt_update(time_ms, sample_ms, b, self.rho),
            None => {
                self.pending.push(sample_ms);
                if self.pending.len() == self.k {
                    self.baseline = Some(self.pending.iter().sum::<f64>() / self.k as f64);
                }
                None
            }
        }
    }
}

/// Monte Carlo detection results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub runs: usize,
    /// Fraction of attack runs with an alert during the attack; undefined
    /// without attack runs.
    pub tpr: Option<f64>,
    /// Fraction of clean runs with at least one alert.
    pub fpr: f64,
    pub mean_ttd_ms: Option<f64>,
    /// Alerts per tested window, pooled over clean runs.
    pub window_false_alert_rate: Option<f64>,
    pub z: f64,
    pub w: usize,
    pub k: usize,
}

impl DetectionMetrics {
    pub const CSV_HEADER: &'static str = "runs,tpr,fpr,mean_ttd_ms,z,w,k";

    /// Header plus one row; undefined values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).unwrap();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            self.runs,
            opt(self.tpr),
            self.fpr,
            opt(self.mean_ttd_ms),
            self.z,
            self.w,
            self.k
        )
        .unwrap();
        s
    }
}

/// Outcome of one seeded trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrialOutcome {
    /// Windows tested and alerts raised outside any attack.
    pub clean_windows: u64,
    pub clean_alerts: u64,
    /// Alert raised on a window ending inside the attack.
    pub attack_detected: bool,
    /// From attack start to the first such alert.
    pub time_to_detect_ms: Option<TimeMs>,
}

/// Something that can run paired attack/clean trials from a seed.
pub trait TrialSource {
    fn has_attack(&self) -> bool;
    fn config(&self) -> &DetectorConfig;
    fn trial(&self, seed: u64, attack: bool) -> TrialOutcome;
}

/// Runs one attack trial (when the source has an attack) and one clean
/// trial per seed in `seed_base..seed_base + runs`.
pub fn evaluate<S: TrialSource + ?Sized>(
    source: &S,
    runs: usize,
    seed_base: u64,
) -> Result<DetectionMetrics, DetectionError> {
    if runs == 0 {
        return Err(DetectionError::NoRuns);
    }
    let mut detected = 0usize;
    let mut ttd_sum = 0.0;
    let mut clean_flagged = 0usize;
    let mut windows = 0u64;
    let mut alerts = 0u64;
    for i in 0..runs as u64 {
        let seed = seed_base.wrapping_add(i);
        if source.has_attack() {
            let a = source.trial(seed, true);
            if a.attack_detected {
                detected += 1;
                ttd_sum += a.time_to_detect_ms.unwrap_or(0) as f64;
            }
        }
        let c = source.trial(seed, false);
        windows += c.clean_windows;
        alerts += c.clean_alerts;
        if c.clean_alerts > 0 {
            clean_flagged += 1;
        }
    }
    let cfg = source.config();
    Ok(DetectionMetrics {
        runs,
        tpr: source.has_attack().then(|| detected as f64 / runs as f64),
        fpr: clean_flagged as f64 / runs as f64,
        mean_ttd_ms: (detected > 0).then(|| ttd_sum / detected as f64),
        window_false_alert_rate: (windows > 0).then(|| alerts as f64 / windows as f64),
        z: cfg.z,
        w: cfg.w,
        k: cfg.k,
    })
}

/// Gaussian RSSI streams without the protocol simulation: `k` baseline
/// samples, then either attack samples or clean samples.
#[derive(Debug, Clone)]
pub struct GaussianScenario {
    pub config: DetectorConfig,
    /// `(mean, std)` of the legitimate signal.
    pub baseline: (f64, f64),
    /// `(mean, std)` while the attacker relays, if there is an attack.
    pub attack: Option<(f64, f64)>,
    /// Windows tested in a clean trial.
    pub clean_windows: usize,
    /// Samples drawn from the attack distribution in an attack trial.
    pub attack_samples: usize,
    pub sample_interval_ms: TimeMs,
    /// Use the true baseline distribution instead of fitting it.
    pub known_baseline: bool,
}

impl GaussianScenario {
    /// Sensor at 1 m vs. attacker at 0.5 m, measured distributions.
    pub fn table_rows(config: DetectorConfig) -> GaussianScenario {
        GaussianScenario {
            config,
            baseline: (-60.8, 2.6),
            attack: Some((-52.8, 3.3)),
            clean_windows: 200,
            attack_samples: 20,
            sample_interval_ms: 1000,
            known_baseline: false,
        }
    }

    fn detector(&self) -> RssiDetector {
        if self.known_baseline {
            RssiDetector::with_baseline(
                self.config,
                RssiBaseline {
                    mu: self.baseline.0,
                    sigma: self.baseline.1,
                    sample_count: self.config.k,
                },
            )
        } else {
            RssiDetector::new(self.config)
        }
    }
}

impl TrialSource for GaussianScenario {
    fn has_attack(&self) -> bool {
        self.attack.is_some()
    }

    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn trial(&self, seed: u64, attack: bool) -> TrialOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(attack));
        let mut det = self.detector();
        let mut out = TrialOutcome::default();
        let mut t: TimeMs = 0;
        let lead = if self.known_baseline { 0 } else { self.config.k };
        for _ in 0..lead {
            det.update(t, sample_gaussian(self.baseline.0, self.baseline.1, &mut rng));
            t += self.sample_interval_ms;
        }
        match (attack, self.attack) {
            (true, Some((mean, std))) => {
                let start = t;
                for _ in 0..self.attack_samples {
                    if det.update(t, sample_gaussian(mean, std, &mut rng)).is_some()
                        && !out.attack_detected
                    {
                        out.attack_detected = true;
                        out.time_to_detect_ms = Some(t - start + self.sample_interval_ms);
                    }
                    t += self.sample_interval_ms;
                }
            }
            _ => {
                let n = self.clean_windows + self.config.w - 1;
                for _ in 0..n {
                    let before = det.evaluations();
                    let alert = det.update(t, sample_gaussian(self.baseline.0, self.baseline.1, &mut rng));
                    out.clean_windows += det.evaluations() - before;
                    out.clean_alerts += u64::from(alert.is_some());
                    t += self.sample_interval_ms;
                }
            }
        }
        out
    }
}
