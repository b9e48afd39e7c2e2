//! Open-loop and linearised-loop runners.
//!
//! The linearised loop runs two rates: the outer input `v` arrives every
//! `ts_out`, the UKF and MPC run every `ts_in = ts_out / Np_max`, and the plant
//! integrates with the input held over each inner sample.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DivergenceGuard, PolyNlssModel};
use crate::mpc::{control_step, make_reference, precompute_gains, ControllerState, MpcWeights, ReferenceBuffer};
use crate::plant::{measure, NoiseConfig, NoiseSource, Plant};
use crate::signal::{mean, rms, std_dev, SignalRecord};
use crate::ukf::{Ukf, UkfConfig};

/// Relative tolerance when checking that two rates are integer multiples.
const RATE_TOL: f64 = 1e-9;

/// Integer ratio `coarse / fine`, or an error if it is not one.
pub fn integer_ratio(coarse: f64, fine: f64, what: &str) -> Result<usize> {
    if !(coarse > 0.0 && fine > 0.0) {
        return Err(Error::Config(format!("{what}: sample times must be positive")));
    }
    let r = coarse / fine;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > RATE_TOL * n {
        return Err(Error::Config(format!("{what}: {coarse} is not an integer multiple of {fine}")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopConfig {
    /// Outer-loop sample time, s.
    pub ts_out: f64,
    /// MPC and observer sample time, s.
    pub ts_in: f64,
    /// Plant integration substep, s. Defaults to `ts_in / 10`.
    #[serde(default)]
    pub substep: Option<f64>,
}

impl ClosedLoopConfig {
    pub fn new(ts_out: f64, ts_in: f64) -> Self {
        Self {
            ts_out,
            ts_in,
            substep: None,
        }
    }

    pub fn substep(&self) -> f64 {
        self.substep.unwrap_or(self.ts_in / 10.0)
    }

    /// `Np_max = ts_out / ts_in`.
    pub fn np_max(&self) -> Result<usize> {
        integer_ratio(self.ts_out, self.ts_in, "outer/inner rate")
    }

    pub fn validate(&self) -> Result<usize> {
        let np = self.np_max()?;
        integer_ratio(self.ts_in, self.substep(), "inner rate/integration substep")?;
        Ok(np)
    }
}

/// Drives the plant directly with `input` (held over `input_ts`) and samples
/// the output every `log_ts`. Noise is realised against the RMS of the
/// noise-free output of this run.
pub fn run_open_loop(
    plant: &mut dyn Plant,
    input: &[f64],
    input_ts: f64,
    log_ts: f64,
    noise: &NoiseConfig,
) -> Result<SignalRecord> {
    let up = integer_ratio(input_ts, log_ts, "input/log rate")?;
    let mut u_log = Vec::with_capacity(input.len() * up);
    let mut y_true = Vec::with_capacity(input.len() * up);
    let mut guard = DivergenceGuard::default();
    for &u in input {
        for _ in 0..up {
            let y = plant.output();
            guard.check(y_true.len(), y)?;
            y_true.push(y);
            u_log.push(u);
            plant.advance(u, log_ts)?;
        }
    }
    let y_meas = measure(&y_true, noise);
    let mut rec = SignalRecord::new(1.0 / log_ts, u_log, y_meas);
    rec.y_true = Some(y_true);
    Ok(rec)
}

/// Everything logged by [`run_linearised`], one entry per inner sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRecord {
    pub ts_in: f64,
    pub np_max: usize,
    /// Outer input held over the inner samples.
    pub v: Vec<f64>,
    /// Plant input.
    pub u: Vec<f64>,
    pub y_meas: Vec<f64>,
    pub y_true: Vec<f64>,
    /// Reference output `C x_ref` at the same instant.
    pub y_ref: Vec<f64>,
    /// Filtered output `C x̂`.
    pub y_hat: Vec<f64>,
    pub x_hat: Vec<DVector<f64>>,
    /// Prediction horizon used at each inner sample.
    pub horizon: Vec<usize>,
}

impl ClosedLoopRecord {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn time(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.ts_in).collect()
    }

    /// `ŷ − y_ref`
    pub fn err_mpc(&self) -> Vec<f64> {
        self.y_hat.iter().zip(&self.y_ref).map(|(a, b)| a - b).collect()
    }

    /// `ŷ − y_true`
    pub fn err_ukf(&self) -> Vec<f64> {
        self.y_hat.iter().zip(&self.y_true).map(|(a, b)| a - b).collect()
    }

    /// Record of the outer input against the measured output, for spectral analysis.
    pub fn io_record(&self) -> SignalRecord {
        let mut rec = SignalRecord::new(1.0 / self.ts_in, self.v.clone(), self.y_meas.clone());
        rec.y_true = Some(self.y_true.clone());
        rec
    }

    /// Keeps samples from `start` on.
    pub fn tail(&self, start: usize) -> Self {
        let start = start.min(self.len());
        Self {
            ts_in: self.ts_in,
            np_max: self.np_max,
            v: self.v[start..].to_vec(),
            u: self.u[start..].to_vec(),
            y_meas: self.y_meas[start..].to_vec(),
            y_true: self.y_true[start..].to_vec(),
            y_ref: self.y_ref[start..].to_vec(),
            y_hat: self.y_hat[start..].to_vec(),
            x_hat: self.x_hat[start..].to_vec(),
            horizon: self.horizon[start..].to_vec(),
        }
    }
}

/// Tracking and observer errors as a fraction of the measured output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub rms_output: f64,
    pub rms_mpc: f64,
    pub rms_ukf: f64,
    pub mpc_percent: f64,
    pub ukf_percent: f64,
    pub mean_ukf: f64,
    /// Standard error of `mean_ukf` assuming independent samples.
    pub stderr_ukf: f64,
}

impl LoopMetrics {
    pub fn from_record(rec: &ClosedLoopRecord) -> Self {
        Self::pooled(std::slice::from_ref(rec))
    }

    /// Metrics over several records taken as one long record.
    pub fn pooled(records: &[ClosedLoopRecord]) -> Self {
        let y_meas: Vec<f64> = records.iter().flat_map(|r| r.y_meas.iter().copied()).collect();
        let e_mpc: Vec<f64> = records.iter().flat_map(|r| r.err_mpc()).collect();
        let e_ukf: Vec<f64> = records.iter().flat_map(|r| r.err_ukf()).collect();
        let rms_output = rms(&y_meas);
        let rms_mpc = rms(&e_mpc);
        let rms_ukf = rms(&e_ukf);
        Self {
            rms_output,
            rms_mpc,
            rms_ukf,
            mpc_percent: 100.0 * rms_mpc / rms_output,
            ukf_percent: 100.0 * rms_ukf / rms_output,
            mean_ukf: mean(&e_ukf),
            stderr_ukf: std_dev(&e_ukf) / (e_ukf.len() as f64).sqrt(),
        }
    }
}

/// Runs the linearising loop: reference generator, UKF and MPC around `plant`.
///
/// `v` is sampled at `cfg.ts_out`; `model.ts()` must equal `cfg.ts_in`.
/// `noise` is a fixed-variance sensor noise source.
pub fn run_linearised(
    plant: &mut dyn Plant,
    model: &PolyNlssModel,
    v: &[f64],
    weights: MpcWeights,
    ukf_cfg: UkfConfig,
    mut noise: NoiseSource,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopRecord> {
    let np_max = cfg.validate()?;
    if ((model.ts() - cfg.ts_in) / cfg.ts_in).abs() > RATE_TOL {
        return Err(Error::Config(format!(
            "model sample time {} differs from the inner sample time {}",
            model.ts(),
            cfg.ts_in
        )));
    }
    let gains = precompute_gains(model, weights, np_max)?;
    let mut ukf = Ukf::new(ukf_cfg)?;
    let mut ctrl = ControllerState::new(model.n(), model.exponents());
    let mut buffer = ReferenceBuffer::new(model.n(), np_max);

    let total = v.len() * np_max;
    let mut rec = ClosedLoopRecord {
        ts_in: cfg.ts_in,
        np_max,
        v: Vec::with_capacity(total),
        u: Vec::with_capacity(total),
        y_meas: Vec::with_capacity(total),
        y_true: Vec::with_capacity(total),
        y_ref: Vec::with_capacity(total),
        y_hat: Vec::with_capacity(total),
        x_hat: Vec::with_capacity(total),
        horizon: Vec::with_capacity(total),
    };
    let mut guard = DivergenceGuard::default();
    let mut y_ref_now = 0.0;
    for &vk in v {
        make_reference(model, &mut buffer, vk);
        for i in 0..np_max {
            let j = rec.u.len();
            let y_true = plant.output();
            guard.check(j, y_true)?;
            let y_meas = y_true + noise.sample();

            if j > 0 {
                ukf.predict(model, ctrl.u_prev)?;
            }
            ukf.update(model, y_meas)?;
            let x_hat = ukf.state.x.clone();
            let y_hat = ukf.filtered_output(model);

            let out = control_step(&gains, &mut ctrl, &mut buffer, &x_hat, y_hat)?;
            if !out.u.is_finite() {
                return Err(Error::Divergence { index: j, value: out.u });
            }

            rec.v.push(vk);
            rec.u.push(out.u);
            rec.y_meas.push(y_meas);
            rec.y_true.push(y_true);
            rec.y_ref.push(y_ref_now);
            rec.y_hat.push(y_hat);
            rec.x_hat.push(x_hat);
            rec.horizon.push(out.np);

            y_ref_now = buffer.all()[i];
            plant.advance(out.u, cfg.ts_in)?;
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
        use crate::plant::{DuffingParams, DuffingPlant, SurrogatePlant};
    use nalgebra::DMatrix;

    /// Poles 0.9 and 0.8, zero at 0.5.
    fn linear_world() -> (PolyNlssModel, SurrogatePlant) {
        let m = PolyNlssModel::linear(
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.8])),
            DVector::from_vec(vec![1.0, 1.0]),
            nalgebra::RowDVector::from_vec(vec![3.0, -2.0]),
            0.001,
        )
        .unwrap();
        let plant = SurrogatePlant::new(m.clone(), 0.0);
        (m, plant)
    }

    fn quiet_ukf(n: usize) -> UkfConfig {
        UkfConfig::new(DMatrix::identity(n, n) * 1e-20, 1e-20)
    }

    #[test]
    fn integer_ratios() {
        assert_eq!(integer_ratio(0.01, 0.001, "x").unwrap(), 10);
        assert_eq!(integer_ratio(1.0 / 102.4, 1.0 / 1024.0, "x").unwrap(), 10);
        assert!(integer_ratio(0.01, 0.003, "x").is_err());
        assert!(integer_ratio(0.001, 0.01, "x").is_err());
    }

    #[test]
    fn zero_excitation_open_loop() {
        let mut plant = DuffingPlant::new(DuffingParams::nominal(), 1e-4).unwrap();
        let noise = NoiseConfig {
            level: crate::plant::NoiseLevel::Sigma(1e-6),
            seed: 3,
        };
        let rec = run_open_loop(&mut plant, &[0.0; 20], 0.01, 0.001, &noise).unwrap();
        assert_eq!(rec.len(), 200);
        assert!(rec.y_true.as_ref().unwrap().iter().all(|&y| y == 0.0));
        assert!(rec.y.iter().any(|&y| y != 0.0));
    }

    #[test]
    fn horizon_counts_down_and_resets() {
        let (m, mut plant) = linear_world();
        let v: Vec<f64> = (0..7).map(|k| (k as f64).sin()).collect();
        let rec = run_linearised(
            &mut plant,
            &m,
            &v,
            MpcWeights { q: 1.0, r_delta: 1e-6 },
            quiet_ukf(2),
            NoiseSource::new(0.0, 0),
            &ClosedLoopConfig::new(0.01, 0.001),
        )
        .unwrap();
        assert_eq!(rec.len(), 70);
        for (j, &np) in rec.horizon.iter().enumerate() {
            assert_eq!(np, 10 - j % 10);
        }
        for k in 0..7 {
            assert!(rec.v[10 * k..10 * k + 10].iter().all(|&x| x == v[k]));
        }
    }

    #[test]
    fn reference_channel_is_lti_response() {
        let (m, mut plant) = linear_world();
        let v: Vec<f64> = (0..30).map(|k| 0.1 * (0.3 * k as f64).cos()).collect();
        let rec = run_linearised(
            &mut plant,
            &m,
            &v,
            MpcWeights { q: 1.0, r_delta: 1e-6 },
            quiet_ukf(2),
            NoiseSource::new(0.0, 0),
            &ClosedLoopConfig::new(0.01, 0.001),
        )
        .unwrap();
        let lti = m.simulate(&DVector::zeros(2), &rec.v).unwrap();
        for (a, b) in rec.y_ref.iter().zip(&lti.y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn model_rate_mismatch_is_rejected() {
        let (m, mut plant) = linear_world();
        let err = run_linearised(
            &mut plant,
            &m,
            &[0.0],
            MpcWeights { q: 1.0, r_delta: 1.0 },
            quiet_ukf(2),
            NoiseSource::new(0.0, 0),
            &ClosedLoopConfig::new(0.02, 0.002),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn linear_world_tracks_exactly() {
        let (m, mut plant) = linear_world();
        let v: Vec<f64> = (0..400).map(|k| 0.1 * (0.2 * k as f64).sin() + 0.05 * (0.05 * k as f64).cos()).collect();
        let rec = run_linearised(
            &mut plant,
            &m,
            &v,
            MpcWeights { q: 1.0, r_delta: 1e-14 },
            quiet_ukf(2),
            NoiseSource::new(0.0, 0),
            &ClosedLoopConfig::new(0.01, 0.001),
        )
        .unwrap();
        let tail = rec.tail(500);
        let err: Vec<f64> = tail.y_true.iter().zip(&tail.y_ref).map(|(a, b)| a - b).collect();
        assert!(rms(&err) < 1e-8 * rms(&tail.y_true), "{} vs {}", rms(&err), rms(&tail.y_true));
    }
}
