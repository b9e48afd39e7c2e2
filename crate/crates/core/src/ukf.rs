//! Unscented Kalman filter for PNLSS models.
//!
//! Additive-noise filter with the scaled unscented transform for the time
//! update. The output map `y = C x` is linear, so the measurement update is
//! the exact linear Kalman correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PolyNlssModel;

/// Eigenvalue floor applied when repairing the covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, PartialEq)]
pub struct UkfConfig {
    pub q_cov: DMatrix<f64>,
    pub r_cov: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

/// Serialisable form: process noise as a multiple of the measurement
/// variance times the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UkfSettings {
    pub r_cov: f64,
    pub q_scale: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub kappa: f64,
}

fn default_alpha() -> f64 {
    1e-3
}

fn default_beta() -> f64 {
    2.0
}

impl UkfSettings {
    pub fn config(&self, n: usize) -> UkfConfig {
        UkfConfig {
            q_cov: DMatrix::identity(n, n) * (self.q_scale * self.r_cov),
            r_cov: self.r_cov,
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
        }
    }
}

impl UkfConfig {
    pub fn new(q_cov: DMatrix<f64>, r_cov: f64) -> Self {
        Self {
            q_cov,
            r_cov,
            alpha: default_alpha(),
            beta: default_beta(),
            kappa: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.q_cov.nrows();
        if self.q_cov.ncols() != n {
            return Err(Error::Estimator("process covariance must be square".into()));
        }
        if (&self.q_cov - self.q_cov.transpose()).amax() > 0.0 {
            return Err(Error::Estimator("process covariance must be symmetric".into()));
        }
        if self.q_cov.clone().symmetric_eigenvalues().min() < 0.0 {
            return Err(Error::Estimator("process covariance must be positive semidefinite".into()));
        }
        if !(self.r_cov > 0.0) {
            return Err(Error::Estimator(format!("measurement variance must be positive, got {}", self.r_cov)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Estimator(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        let n = self.q_cov.nrows() as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }

    /// Mean and covariance weights of the `2n + 1` sigma points.
    pub fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.q_cov.nrows();
        let lambda = self.lambda();
        let c = n as f64 + lambda;
        let mut wm = vec![0.5 / c; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / c;
        wc[0] = lambda / c + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

/// Filter mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct UkfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub x_prev: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Ukf {
    config: UkfConfig,
    wm: Vec<f64>,
    wc: Vec<f64>,
    pub state: UkfState,
    repairs: usize,
}

impl Ukf {
    /// Starts at `x = 0` with `P = q_cov`.
    pub fn new(config: UkfConfig) -> Result<Self> {
        config.validate()?;
        let n = config.q_cov.nrows();
        let (wm, wc) = config.weights();
        let state = UkfState {
            x: DVector::zeros(n),
            p: config.q_cov.clone(),
            x_prev: DVector::zeros(n),
        };
        Ok(Self {
            config,
            wm,
            wc,
            state,
            repairs: 0,
        })
    }

    pub fn config(&self) -> &UkfConfig {
        &self.config
    }

    /// How many times the covariance needed an eigenvalue repair.
    pub fn repairs(&self) -> usize {
        self.repairs
    }

    /// Time update through the model dynamics with the applied input.
    pub fn predict(&mut self, model: &PolyNlssModel, u: f64) -> Result<()> {
        let n = self.state.x.len();
        if model.n() != n {
            return Err(Error::Dimension {
                field: "UKF state",
                expected: model.n(),
                found: n,
            });
        }
        let scale = (n as f64 + self.config.lambda()).sqrt();
        let sqrt_p = self.sqrt_covariance()?;

        let (center, _) = model.step(&self.state.x, u)?;
        // Propagated deviations of the sigma points from the propagated center.
        let mut devs: Vec<DVector<f64>> = Vec::with_capacity(2 * n + 1);
        devs.push(DVector::zeros(n));
        for sign in [1.0, -1.0] {
            for j in 0..n {
                let dx = sqrt_p.column(j) * (sign * scale);
                devs.push(model.step_increment(&self.state.x, &dx));
            }
        }

        let mut mean_dev = DVector::zeros(n);
        for (w, d) in self.wm.iter().zip(&devs) {
            mean_dev += d * *w;
        }
        let mut p = self.config.q_cov.clone();
        for (w, d) in self.wc.iter().zip(&devs) {
            let c = d - &mean_dev;
            p += &c * c.transpose() * *w;
        }

        self.state.x_prev = self.state.x.clone();
        self.state.x = center + mean_dev;
        self.state.p = p;
        self.symmetrise();
        Ok(())
    }

    /// Measurement update with the exact linear correction. Returns the innovation.
    pub fn update(&mut self, model: &PolyNlssModel, y_meas: f64) -> Result<f64> {
        let c = model.c();
        let innovation = y_meas - model.output(&self.state.x);
        if !innovation.is_finite() {
            return Err(Error::EstimatorDiverged(format!("non-finite innovation {innovation}")));
        }
        let pc = &self.state.p * c.transpose();
        let s = c.dot(&pc.transpose()) + self.config.r_cov;
        let k = pc / s;
        self.state.x += &k * innovation;
        let n = self.state.x.len();
        // Joseph form keeps P symmetric positive semidefinite.
        let i_kc = DMatrix::identity(n, n) - &k * c;
        self.state.p = &i_kc * &self.state.p * i_kc.transpose() + &k * k.transpose() * self.config.r_cov;
        self.symmetrise();
        self.repair();
        Ok(innovation)
    }

    pub fn filtered_output(&self, model: &PolyNlssModel) -> f64 {
        model.output(&self.state.x)
    }

    fn symmetrise(&mut self) {
        let p = &self.state.p;
        self.state.p = (p + p.transpose()) * 0.5;
    }

    /// Floors the eigenvalues of `P` when any falls below [`COVARIANCE_FLOOR`].
    fn repair(&mut self) {
        let eig = self.state.p.clone().symmetric_eigen();
        if eig.eigenvalues.min() >= COVARIANCE_FLOOR {
            return;
        }
        self.repairs += 1;
        let floored = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
        self.state.p = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        self.symmetrise();
    }

    fn sqrt_covariance(&mut self) -> Result<DMatrix<f64>> {
        if let Some(ch) = self.state.p.clone().cholesky() {
            return Ok(ch.l());
        }
        log::warn!("covariance not positive definite, flooring eigenvalues");
        self.repairs += 1;
        let eig = self.state.p.clone().symmetric_eigen();
        let floored = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
        self.state.p = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        self.symmetrise();
        self.state
            .p
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::EstimatorDiverged("covariance factorisation failed after repair".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bundled;
    use nalgebra::dvector;

    fn duffing_config() -> UkfConfig {
        UkfSettings {
            r_cov: 1.13e-14,
            q_scale: 0.05,
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
        .config(2)
    }

    #[test]
    fn mean_weights_sum_to_one() {
        for (alpha, kappa) in [(1e-3, 0.0), (0.5, 1.0), (1.0, 3.0)] {
            let mut cfg = duffing_config();
            cfg.alpha = alpha;
            cfg.kappa = kappa;
            let (wm, _) = cfg.weights();
            assert!((wm.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_predict_matches_kalman() {
        let m = bundled::duffing().linear_part();
        let cfg = UkfConfig::new(DMatrix::identity(2, 2) * 0.01, 0.1);
        let mut ukf = Ukf::new(cfg).unwrap();
        ukf.state.x = dvector![0.3, -0.2];
        ukf.state.p = nalgebra::dmatrix![0.5, 0.1; 0.1, 0.2];
        let x_kf = m.a() * &ukf.state.x + m.b() * 0.7;
        let p_kf = m.a() * &ukf.state.p * m.a().transpose() + DMatrix::identity(2, 2) * 0.01;
        ukf.predict(&m, 0.7).unwrap();
        assert!((&ukf.state.x - x_kf).amax() < 1e-9);
        assert!((&ukf.state.p - p_kf).amax() < 1e-9);
    }

    #[test]
    fn noiseless_point_mass_follows_model() {
        let m = bundled::duffing();
        let cfg = UkfConfig::new(DMatrix::zeros(2, 2), 1e-12);
        let mut ukf = Ukf::new(cfg).unwrap();
        ukf.state.x = dvector![1e-2, 2e-2];
        ukf.state.p = DMatrix::zeros(2, 2);
        let (expected, _) = m.step(&ukf.state.x, 0.05).unwrap();
        ukf.predict(&m, 0.05).unwrap();
        assert!((&ukf.state.x - &expected).amax() < 1e-12 * expected.amax());
    }

    #[test]
    fn huge_measurement_noise_ignores_measurement() {
        let m = bundled::duffing();
        let cfg = UkfConfig::new(DMatrix::identity(2, 2) * 1e-6, 1e30);
        let mut ukf = Ukf::new(cfg).unwrap();
        ukf.state.x = dvector![0.1, 0.2];
        let before = ukf.state.x.clone();
        ukf.update(&m, 5.0).unwrap();
        assert!((&ukf.state.x - before).amax() < 1e-20);
    }

    #[test]
    fn tiny_measurement_noise_matches_measurement() {
        let m = bundled::duffing();
        let cfg = UkfConfig::new(DMatrix::identity(2, 2) * 1e-2, 1e-20);
        let mut ukf = Ukf::new(cfg).unwrap();
        ukf.update(&m, 3e-4).unwrap();
        assert!((ukf.filtered_output(&m) - 3e-4).abs() < 1e-12);
    }

    #[test]
    fn covariance_stays_symmetric() {
        let m = bundled::duffing();
        let mut ukf = Ukf::new(duffing_config()).unwrap();
        for k in 0..500 {
            let u = 0.1 * (k as f64 * 0.05).sin();
            ukf.predict(&m, u).unwrap();
            ukf.update(&m, 1e-4 * (k as f64 * 0.01).cos()).unwrap();
            assert_eq!(&ukf.state.p, &ukf.state.p.transpose());
        }
    }

    #[test]
    fn zero_state_gives_zero_output() {
        let m = bundled::duffing();
        let ukf = Ukf::new(duffing_config()).unwrap();
        assert_eq!(ukf.filtered_output(&m), 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Ukf::new(UkfConfig::new(DMatrix::identity(2, 2), 0.0)).is_err());
        assert!(Ukf::new(UkfConfig::new(-DMatrix::identity(2, 2), 1.0)).is_err());
        let mut cfg = UkfConfig::new(DMatrix::identity(2, 2), 1.0);
        cfg.alpha = 1.5;
        assert!(Ukf::new(cfg).is_err());
    }
}
