//! Truth plants used in place of hardware, and sensor noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PolyNlssModel;
use crate::signal::rms;

/// A plant driven by a zero-order-held input.
pub trait Plant: Send {
    /// Output at the current instant.
    fn output(&self) -> f64;

    /// Holds `u` for `dt` seconds and returns the output at the end of the interval.
    fn advance(&mut self, u: f64, dt: f64) -> Result<f64>;

    /// Back to the zero initial state.
    fn reset(&mut self);
}

/// Mass-spring-damper with quadratic and cubic stiffness:
/// `m y'' + c_l y' + k_l y + k_q y^2 + k_c y^3 = u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub m: f64,
    pub c_l: f64,
    pub k_l: f64,
    pub k_q: f64,
    pub k_c: f64,
}

impl DuffingParams {
    /// Parameters of the asymmetric Duffing oscillator study.
    pub const fn nominal() -> Self {
        Self {
            m: 1.0,
            c_l: 1.0,
            k_l: 5e2,
            k_q: 5e4,
            k_c: 1e8,
        }
    }

    pub fn linear(&self) -> Self {
        Self {
            k_q: 0.0,
            k_c: 0.0,
            ..*self
        }
    }

    /// Natural frequency (Hz) and damping ratio of the underlying linear
    /// system, from the eigenvalues of its companion matrix.
    pub fn linear_modes(&self) -> (f64, f64) {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -self.k_l / self.m, -self.c_l / self.m]);
        let eig = a.complex_eigenvalues();
        let lambda = if eig[0].im >= 0.0 { eig[0] } else { eig[1] };
        let wn = lambda.norm();
        (wn / std::f64::consts::TAU, -lambda.re / wn)
    }

    /// Static equilibrium for a constant force, by Newton iteration on the
    /// stiffness polynomial.
    pub fn static_deflection(&self, force: f64) -> f64 {
        let mut y = force / self.k_l;
        for _ in 0..100 {
            let f = self.k_l * y + self.k_q * y * y + self.k_c * y * y * y - force;
            let df = self.k_l + 2.0 * self.k_q * y + 3.0 * self.k_c * y * y;
            let step = f / df;
            y -= step;
            if step.abs() <= 1e-16 * y.abs().max(1e-300) {
                break;
            }
        }
        y
    }

    fn accel(&self, y: f64, v: f64, u: f64) -> f64 {
        (u - self.c_l * v - self.k_l * y - self.k_q * y * y - self.k_c * y * y * y) / self.m
    }
}

/// The Duffing oscillator integrated with fixed-step classical RK4.
#[derive(Debug, Clone)]
pub struct DuffingPlant {
    pub params: DuffingParams,
    /// Largest integration step, seconds.
    pub substep: f64,
    state: [f64; 2],
}

impl DuffingPlant {
    pub fn new(params: DuffingParams, substep: f64) -> Result<Self> {
        if !(params.m > 0.0) {
            return Err(Error::Config(format!("mass must be positive, got {}", params.m)));
        }
        if !(substep.is_finite() && substep > 0.0) {
            return Err(Error::Config(format!("invalid integration substep {substep}")));
        }
        Ok(Self {
            params,
            substep,
            state: [0.0; 2],
        })
    }

    /// Displacement and velocity.
    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 2]) {
        self.state = state;
    }

    fn rk4(&self, s: [f64; 2], u: f64, h: f64) -> [f64; 2] {
        let p = &self.params;
        let f = |y: f64, v: f64| (v, p.accel(y, v, u));
        let k1 = f(s[0], s[1]);
        let k2 = f(s[0] + 0.5 * h * k1.0, s[1] + 0.5 * h * k1.1);
        let k3 = f(s[0] + 0.5 * h * k2.0, s[1] + 0.5 * h * k2.1);
        let k4 = f(s[0] + h * k3.0, s[1] + h * k3.1);
        [
            s[0] + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            s[1] + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        ]
    }
}

impl Plant for DuffingPlant {
    fn output(&self) -> f64 {
        self.state[0]
    }

    fn advance(&mut self, u: f64, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("integration interval must be positive, got {dt}")));
        }
        let steps = (dt / self.substep - 1e-9).ceil().max(1.0) as usize;
        let h = dt / steps as f64;
        let mut s = self.state;
        for _ in 0..steps {
            s = self.rk4(s, u, h);
        }
        if !(s[0].is_finite() && s[1].is_finite()) {
            return Err(Error::Divergence { index: 0, value: s[0] });
        }
        self.state = s;
        Ok(s[0])
    }

    fn reset(&mut self) {
        self.state = [0.0; 2];
    }
}

/// A discrete-time model used as the plant, optionally with an artificial
/// cubic spring fed back from the previous output sample:
/// `u_plant(k) = u(k) - k_c y(k-1)^3`.
#[derive(Debug, Clone)]
pub struct SurrogatePlant {
    pub model: PolyNlssModel,
    pub k_c: f64,
    x: DVector<f64>,
    y_prev: f64,
}

impl SurrogatePlant {
    pub fn new(model: PolyNlssModel, k_c: f64) -> Self {
        let n = model.n();
        Self {
            model,
            k_c,
            x: DVector::zeros(n),
            y_prev: 0.0,
        }
    }

    /// The beam surrogate: linear part of the bundled beam model with the
    /// artificial hardening spring.
    pub fn beam(k_c: f64) -> Self {
        Self::new(crate::model::bundled::beam().linear_part(), k_c)
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }
}

impl Plant for SurrogatePlant {
    fn output(&self) -> f64 {
        self.model.output(&self.x)
    }

    fn advance(&mut self, u: f64, dt: f64) -> Result<f64> {
        let ratio = dt / self.model.ts();
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "interval {dt} s is not a multiple of the plant sample time {} s",
                self.model.ts()
            )));
        }
        for _ in 0..steps as usize {
            let u_plant = u - self.k_c * self.y_prev.powi(3);
            let (next, y) = self.model.step(&self.x, u_plant)?;
            self.x = next;
            self.y_prev = y;
        }
        Ok(self.output())
    }

    fn reset(&mut self) {
        self.x.fill(0.0);
        self.y_prev = 0.0;
    }
}

/// How loud the sensor noise is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    None,
    /// Relative to the RMS of the noise-free record being measured.
    SnrDb(f64),
    /// Fixed standard deviation in output units.
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub level: NoiseLevel,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            level: NoiseLevel::None,
            seed: 0,
        }
    }

    /// Standard deviation that realises this level on a record with the given RMS.
    pub fn sigma_for(&self, signal_rms: f64) -> f64 {
        match self.level {
            NoiseLevel::None => 0.0,
            NoiseLevel::SnrDb(db) => signal_rms / 10f64.powf(db / 20.0),
            NoiseLevel::Sigma(s) => s,
        }
    }
}

/// Seeded white Gaussian noise stream.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    sigma: f64,
}

impl NoiseSource {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sample(&mut self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sigma * z
    }
}

/// Adds white Gaussian noise to a whole record. An SNR level is realised
/// against the RMS of `y_true` itself.
pub fn measure(y_true: &[f64], noise: &NoiseConfig) -> Vec<f64> {
    let sigma = noise.sigma_for(rms(y_true));
    let mut src = NoiseSource::new(sigma, noise.seed);
    y_true.iter().map(|y| y + src.sample()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_stays_at_rest() {
        let mut p = DuffingPlant::new(DuffingParams::nominal(), 1e-4).unwrap();
        for _ in 0..100 {
            assert_eq!(p.advance(0.0, 1e-3).unwrap(), 0.0);
        }
    }

    #[test]
    fn nominal_linear_modes() {
        let (fn_hz, zeta) = DuffingParams::nominal().linear_modes();
        assert!((fn_hz - 3.56).abs() < 0.01, "{fn_hz}");
        assert!((zeta - 0.0224).abs() < 0.0005, "{zeta}");
    }

    #[test]
    fn linear_sine_response_matches_analytic_frf() {
        let params = DuffingParams::nominal().linear();
        let dt = 1e-3;
        for &f in &[1.0, 2.5, 6.0] {
            let mut p = DuffingPlant::new(params, 1e-4).unwrap();
            let w = std::f64::consts::TAU * f;
            // Run 60 s to kill the transient, then fit amplitude over 10 whole periods.
            let settle = (60.0 / dt) as usize;
            let window = (10.0 / f / dt).round() as usize;
            let mut ys = Vec::with_capacity(window);
            for k in 0..settle + window {
                // Sample the input at the interval midpoint to cancel the hold delay.
                let t = (k as f64 + 0.5) * dt;
                let y = p.output();
                if k >= settle {
                    ys.push((k as f64 * dt, y));
                }
                p.advance((w * t).sin(), dt).unwrap();
            }
            let (mut s, mut c) = (0.0, 0.0);
            for &(t, y) in &ys {
                s += y * (w * t).sin();
                c += y * (w * t).cos();
            }
            let amp = 2.0 * (s * s + c * c).sqrt() / ys.len() as f64;
            let expected = 1.0 / ((params.k_l - params.m * w * w).powi(2) + (params.c_l * w).powi(2)).sqrt();
            assert!((amp / expected - 1.0).abs() < 5e-3, "f={f}: {amp} vs {expected}");
        }
    }

    #[test]
    fn static_force_settles_on_stiffness_root() {
        let params = DuffingParams::nominal();
        let mut p = DuffingPlant::new(params, 1e-4).unwrap();
        let mut y = 0.0;
        for _ in 0..80_000 {
            y = p.advance(0.05, 1e-3).unwrap();
        }
        // Bisection on k_l y + k_q y^2 + k_c y^3 = 0.05 as an independent root.
        let g = |y: f64| params.k_l * y + params.k_q * y * y + params.k_c * y.powi(3) - 0.05;
        let (mut lo, mut hi) = (0.0, 1e-2);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!((y - root).abs() / root < 1e-6, "{y} vs {root}");
        assert!((params.static_deflection(0.05) - root).abs() / root < 1e-12);
    }

    #[test]
    fn halving_substep_barely_changes_output() {
        let u: Vec<f64> = (0..5000).map(|k| 0.12 * ((k as f64) * 0.013).sin() + 0.05 * ((k as f64) * 0.0021).cos()).collect();
        let run = |h: f64| {
            let mut p = DuffingPlant::new(DuffingParams::nominal(), h).unwrap();
            u.iter().map(|&v| p.advance(v, 1e-3).unwrap()).collect::<Vec<_>>()
        };
        let coarse = run(1e-4);
        let fine = run(5e-5);
        let scale = rms(&fine);
        let worst = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst / scale < 1e-6, "{}", worst / scale);
    }

    #[test]
    fn free_response_is_dissipative() {
        let params = DuffingParams::nominal();
        let mut p = DuffingPlant::new(params, 1e-4).unwrap();
        p.set_state([2e-3, 0.0]);
        let energy = |s: [f64; 2]| {
            0.5 * params.m * s[1] * s[1]
                + 0.5 * params.k_l * s[0] * s[0]
                + params.k_q * s[0].powi(3) / 3.0
                + params.k_c * s[0].powi(4) / 4.0
        };
        let period = 1.0 / 3.56;
        let mut last = energy(p.state());
        for _ in 0..20 {
            p.advance(0.0, period).unwrap();
            let e = energy(p.state());
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn surrogate_without_spring_is_the_model() {
        let model = crate::model::bundled::beam().linear_part();
        let mut plant = SurrogatePlant::new(model.clone(), 0.0);
        let u: Vec<f64> = (0..300).map(|k| (k as f64 * 0.1).sin() * 0.01).collect();
        let rec = model.simulate(&DVector::zeros(4), &u).unwrap();
        for (k, &uk) in u.iter().enumerate() {
            assert_eq!(plant.output(), rec.y[k]);
            plant.advance(uk, model.ts()).unwrap();
        }
    }

    #[test]
    fn surrogate_spring_uses_previous_sample() {
        let model = PolyNlssModel::linear(
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            nalgebra::RowDVector::from_element(1, 1.0),
            1.0,
        )
        .unwrap();
        let mut p = SurrogatePlant::new(model, 2.0);
        // k=0: y=0, fb from y(-1)=0 -> x1 = 1
        assert_eq!(p.advance(1.0, 1.0).unwrap(), 1.0);
        // k=1: y=1, fb from y(0)=0 -> x2 = 0.5 + 1 = 1.5
        assert_eq!(p.advance(1.0, 1.0).unwrap(), 1.5);
        // k=2: y=1.5, fb from y(1)=1 -> x3 = 0.75 + 1 - 2 = -0.25
        assert_eq!(p.advance(1.0, 1.0).unwrap(), -0.25);
    }

    #[test]
    fn infinite_snr_is_transparent() {
        let y = vec![1.0, -2.0, 3.0];
        assert_eq!(measure(&y, &NoiseConfig::none()), y);
    }

    #[test]
    fn empirical_snr() {
        let y: Vec<f64> = (0..200_000).map(|k| (k as f64 * 0.01).sin()).collect();
        let noise = NoiseConfig {
            level: NoiseLevel::SnrDb(40.0),
            seed: 3,
        };
        let ym = measure(&y, &noise);
        let e: Vec<f64> = ym.iter().zip(&y).map(|(a, b)| a - b).collect();
        let snr = 20.0 * (rms(&y) / rms(&e)).log10();
        assert!((snr - 40.0).abs() < 0.5, "{snr}");
        assert_eq!(measure(&y, &noise), ym);
    }
}
