//! Log-distance RSSI model and the measured per-distance table.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RadioError;

/// Smallest distance the log-distance model accepts, in meters.
pub const D_MIN: f64 = 0.1;

/// Parameters of `RSSI = -10 * n * log10(d) + a` plus Gaussian shadowing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossParams {
    /// Path-loss exponent (dimensionless).
    pub n: f64,
    /// Received power at 1 m, dBm.
    pub a: f64,
    /// Shadowing standard deviation, dB.
    pub sigma: f64,
}

impl PathLossParams {
    pub fn new(n: f64, a: f64, sigma: f64) -> Result<Self, RadioError> {
        let p = PathLossParams { n, a, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RadioError> {
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(RadioError::InvalidParams("n must be > 0"));
        }
        if !self.a.is_finite() {
            return Err(RadioError::InvalidParams("a must be finite"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(RadioError::InvalidParams("sigma must be >= 0"));
        }
        Ok(())
    }
}

impl Default for PathLossParams {
    /// N = 1 with the 1 m measurement as reference power.
    fn default() -> Self {
        PathLossParams {
            n: 1.0,
            a: -60.8,
            sigma: 2.6,
        }
    }
}

/// Mean RSSI at `distance` meters. Logarithm is base 10, so `a` is the
/// RSSI at exactly 1 m.
pub fn expected_rssi(distance: f64, params: &PathLossParams) -> Result<f64, RadioError> {
    if distance.is_nan() || distance < D_MIN {
        return Err(RadioError::DistanceTooSmall(distance));
    }
    Ok(-10.0 * params.n * distance.log10() + params.a)
}

/// One row of measured RSSI statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRow {
    pub distance: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-distance ground truth. Distances must match a row exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTable {
    pub rows: Vec<EmpiricalRow>,
}

impl EmpiricalTable {
    /// Mean/std over 10 readings at 0, 0.5, 1 and 3 m (iPhone receiver,
    /// heart-rate strap transmitter).
    pub fn measured() -> Self {
        let row = |distance, mean, std| EmpiricalRow {
            distance,
            mean,
            std,
        };
        EmpiricalTable {
            rows: vec![
                row(0.0, -26.4, 1.2),
                row(0.5, -52.8, 3.3),
                row(1.0, -60.8, 2.6),
                row(3.0, -66.0, 3.0),
            ],
        }
    }

    pub fn row(&self, distance: f64) -> Option<&EmpiricalRow> {
        self.rows
            .iter()
            .find(|r| (r.distance - distance).abs() < 1e-9)
    }
}

impl Default for EmpiricalTable {
    fn default() -> Self {
        EmpiricalTable::measured()
    }
}

/// How a link turns distance into an RSSI distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RssiModel {
    /// Log-distance formula with Gaussian shadowing.
    Model(PathLossParams),
    /// Measured mean/std looked up by distance.
    Empirical(EmpiricalTable),
}

impl Default for RssiModel {
    fn default() -> Self {
        RssiModel::Empirical(EmpiricalTable::measured())
    }
}

impl RssiModel {
    /// `(mean, std)` of the RSSI seen across `distance` meters.
    pub fn distribution(&self, distance: f64) -> Result<(f64, f64), RadioError> {
        match self {
            RssiModel::Model(p) => Ok((expected_rssi(distance, p)?, p.sigma)),
            RssiModel::Empirical(t) => t
                .row(distance)
                .map(|r| (r.mean, r.std))
                .ok_or(RadioError::NoEmpiricalRow(distance)),
        }
    }

    pub fn validate(&self) -> Result<(), RadioError> {
        match self {
            RssiModel::Model(p) => p.validate(),
            RssiModel::Empirical(t) => {
                if t.rows.is_empty() {
                    return Err(RadioError::InvalidParams("empirical table is empty"));
                }
                for r in &t.rows {
                    if !(r.distance >= 0.0 && r.std >= 0.0 && r.mean.is_finite()) {
                        return Err(RadioError::InvalidParams("bad empirical row"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Draws `mean + std * z` with `z ~ N(0, 1)`; zero std returns the mean exactly.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + std * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn expected_rssi_examples() {
        let p = PathLossParams::new(1.0, -60.8, 0.0).unwrap();
        assert_eq!(expected_rssi(1.0, &p).unwrap(), -60.8);
        // -10 * log10(3) = -4.7712...
        assert!(close(expected_rssi(3.0, &p).unwrap(), -65.5712, 1e-4));
        // -10 * log10(0.5) = +3.0103...
        assert!(close(expected_rssi(0.5, &p).unwrap(), -57.7897, 1e-4));
        assert_eq!(
            expected_rssi(0.05, &p),
            Err(RadioError::DistanceTooSmall(0.05))
        );
        assert!(expected_rssi(f64::NAN, &p).is_err());
        assert!(expected_rssi(D_MIN, &p).is_ok());
    }

    #[test]
    fn params_validation() {
        assert!(PathLossParams::new(0.0, -60.0, 1.0).is_err());
        assert!(PathLossParams::new(1.0, -60.0, -1.0).is_err());
        assert!(PathLossParams::new(2.0, -60.0, 0.0).is_ok());
    }

    #[test]
    fn zero_sigma_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_gaussian(-60.8, 0.0, &mut rng), -60.8);
        }
    }

    #[test]
    fn sampler_moments_at_one_meter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_gaussian(-60.8, 2.6, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(close(mean, -60.8, 0.1), "mean {mean}");
        assert!(close(var.sqrt(), 2.6, 0.1), "std {}", var.sqrt());
    }

    #[test]
    fn same_seed_same_sequence() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32)
                .map(|_| sample_gaussian(-60.8, 2.6, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn empirical_lookup() {
        let m = RssiModel::Empirical(EmpiricalTable::measured());
        assert_eq!(m.distribution(0.5).unwrap(), (-52.8, 3.3));
        assert_eq!(m.distribution(0.0).unwrap(), (-26.4, 1.2));
        assert_eq!(m.distribution(2.0), Err(RadioError::NoEmpiricalRow(2.0)));
    }

    proptest::proptest! {
        #[test]
        fn rssi_strictly_decreasing(d in 0.1f64..100.0, step in 0.001f64..10.0, n in 0.1f64..5.0) {
            let p = PathLossParams::new(n, -60.8, 0.0).unwrap();
            proptest::prop_assert!(expected_rssi(d + step, &p).unwrap() < expected_rssi(d, &p).unwrap());
        }
    }
}
