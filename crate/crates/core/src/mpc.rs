//! Two-rate internal-reference-tracking MPC.
//!
//! Every outer sample `k` the outer input `v(k)` is pushed through the linear
//! part of the model for `Np_max` inner samples, giving a short reference
//! trajectory. The inner loop tracks that trajectory with a shrinking horizon:
//! at inner sample `i` only `Np_max - i` references remain, so the horizon runs
//! `Np_max, Np_max - 1, ..., 1` and then resets.
//!
//! The controller works on the velocity form of the model, with state
//! `xbar = [dx; y]`. Future outputs over a horizon `Np` are
//!
//! ```text
//! Y = Sx xbar + Su dU + Sg dG
//! ```
//!
//! where the monomial increments `dG` are estimated by substituting the
//! references for the unknown future outputs. Minimising
//! `J = (Y - Yref)' Q (Y - Yref) + dU' R dU` has the closed-form solution
//! `dU* = -W^{-1} F (Sx xbar + Sg dG - Yref)` with `W = 2 (R I + Q Su'Su)` and
//! `F = 2 Q Su'`; only the first element is applied.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_monomials, AugmentedModel, PolyNlssModel};

/// Largest admissible condition number of `W`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcWeights {
    /// Output tracking weight.
    pub q: f64,
    /// Input-increment weight.
    pub r_delta: f64,
}

/// Reference trajectory for the current outer sample.
#[derive(Debug, Clone)]
pub struct ReferenceBuffer {
    x_ref: DVector<f64>,
    refs: Vec<f64>,
    cursor: usize,
    np_max: usize,
}

impl ReferenceBuffer {
    pub fn new(n: usize, np_max: usize) -> Self {
        Self {
            x_ref: DVector::zeros(n),
            refs: Vec::with_capacity(np_max),
            cursor: 0,
            np_max,
        }
    }

    pub fn np_max(&self) -> usize {
        self.np_max
    }

    /// Reference state at the end of the current trajectory.
    pub fn x_ref(&self) -> &DVector<f64> {
        &self.x_ref
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Number of references not yet consumed, i.e. the current horizon.
    pub fn remaining(&self) -> usize {
        self.refs.len() - self.cursor
    }

    /// References `y_ref(i+1|k) .. y_ref(Np_max|k)` for the current cursor `i`.
    pub fn upcoming(&self) -> &[f64] {
        &self.refs[self.cursor..]
    }

    /// All references of the current outer sample.
    pub fn all(&self) -> &[f64] {
        &self.refs
    }

    pub fn advance(&mut self) {
        self.cursor = (self.cursor + 1).min(self.refs.len());
    }
}

/// Generates the next `Np_max` references by iterating the linear part of the
/// model with the outer input held constant. The nonlinear terms play no role.
pub fn make_reference(model: &PolyNlssModel, buffer: &mut ReferenceBuffer, v: f64) {
    buffer.refs.clear();
    buffer.cursor = 0;
    for _ in 0..buffer.np_max {
        buffer.x_ref = model.a() * &buffer.x_ref + model.b() * v;
        buffer.refs.push(model.output(&buffer.x_ref));
    }
}

/// Condensed prediction matrices for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub sx: DMatrix<f64>,
    pub su: DMatrix<f64>,
    pub sg: DMatrix<f64>,
    s: usize,
}

impl PredictionMatrices {
    pub fn horizon(&self) -> usize {
        self.su.nrows()
    }

    /// Matrices of a shorter horizon: the leading blocks of these.
    pub fn leading(&self, np: usize) -> Self {
        assert!(np >= 1 && np <= self.horizon());
        Self {
            sx: self.sx.rows(0, np).into_owned(),
            su: self.su.view((0, 0), (np, np)).into_owned(),
            sg: self.sg.view((0, 0), (np, self.s * np)).into_owned(),
            s: self.s,
        }
    }

    pub fn predict(&self, xbar: &DVector<f64>, du: &DVector<f64>, dg: &DVector<f64>) -> DVector<f64> {
        let mut y = &self.sx * xbar + &self.su * du;
        if self.s > 0 {
            y += &self.sg * dg;
        }
        y
    }
}

/// `Sx` stacks `Cbar Abar^i` for `i = 1..Np`; `Su` and `Sg` are block lower
/// triangular Toeplitz with blocks `Cbar Abar^j Bbar` and `Cbar Abar^j Ebar`.
pub fn build_prediction(aug: &AugmentedModel, np: usize) -> PredictionMatrices {
    assert!(np >= 1, "prediction horizon must be at least 1");
    let dim = aug.dim();
    let s = aug.s();

    // powers[j] = Cbar Abar^j
    let mut powers: Vec<RowDVector<f64>> = Vec::with_capacity(np + 1);
    powers.push(aug.c_bar.clone());
    for j in 0..np {
        let next = &powers[j] * &aug.a_bar;
        powers.push(next);
    }

    let mut sx = DMatrix::zeros(np, dim);
    for i in 0..np {
        sx.row_mut(i).copy_from(&powers[i + 1]);
    }

    let markov_b: Vec<f64> = (0..np).map(|j| powers[j].dot(&aug.b_bar.transpose())).collect();
    let markov_e: Vec<RowDVector<f64>> = (0..np).map(|j| &powers[j] * &aug.e_bar).collect();

    let mut su = DMatrix::zeros(np, np);
    let mut sg = DMatrix::zeros(np, s * np);
    for r in 0..np {
        for c in 0..=r {
            su[(r, c)] = markov_b[r - c];
            if s > 0 {
                sg.view_mut((r, c * s), (1, s)).copy_from(&markov_e[r - c]);
            }
        }
    }
    PredictionMatrices { sx, su, sg, s }
}

/// `J = (Y - Yref)' Q (Y - Yref) + dU' R dU` for a predicted output sequence.
pub fn cost(weights: &MpcWeights, y: &DVector<f64>, y_ref: &DVector<f64>, du: &DVector<f64>) -> f64 {
    weights.q * (y - y_ref).norm_squared() + weights.r_delta * du.norm_squared()
}

/// Full optimal increment sequence `dU*` for one horizon, by a Cholesky solve
/// of `W dU = -F r`.
pub fn optimal_sequence(
    pm: &PredictionMatrices,
    weights: &MpcWeights,
    xbar: &DVector<f64>,
    dg: &DVector<f64>,
    y_ref: &DVector<f64>,
) -> Result<DVector<f64>> {
    let np = pm.horizon();
    let mut residual = &pm.sx * xbar - y_ref;
    if pm.s > 0 {
        residual += &pm.sg * dg;
    }
    let w = weighting_matrix(&pm.su, weights);
    let f = pm.su.transpose() * (2.0 * weights.q);
    let chol = w.cholesky().ok_or(Error::IllConditioned {
        horizon: np,
        cond: f64::INFINITY,
    })?;
    Ok(-chol.solve(&(f * residual)))
}

fn weighting_matrix(su: &DMatrix<f64>, weights: &MpcWeights) -> DMatrix<f64> {
    let np = su.nrows();
    (DMatrix::identity(np, np) * weights.r_delta + su.transpose() * su * weights.q) * 2.0
}

/// Receding-horizon gain for one horizon length.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonGain {
    pub np: usize,
    /// First row of `W^{-1} F`.
    pub k: RowDVector<f64>,
    /// `k Sx`
    pub kx: RowDVector<f64>,
    /// `k Sg`
    pub kg: RowDVector<f64>,
    /// Condition number of `W`.
    pub cond: f64,
}

/// Offline gains for every horizon `1..=Np_max`.
#[derive(Debug, Clone)]
pub struct MpcGainSet {
    pub weights: MpcWeights,
    pub ts_in: f64,
    pub exponents: Vec<u32>,
    pub full: PredictionMatrices,
    gains: Vec<HorizonGain>,
}

pub fn precompute_gains(model: &PolyNlssModel, weights: MpcWeights, np_max: usize) -> Result<MpcGainSet> {
    if np_max == 0 {
        return Err(Error::Config("maximum prediction horizon must be at least 1".into()));
    }
    if !(weights.q > 0.0 && weights.r_delta > 0.0) {
        return Err(Error::Config(format!(
            "MPC weights must be positive (Q = {}, R = {})",
            weights.q, weights.r_delta
        )));
    }
    let full = build_prediction(&model.augment(), np_max);
    let mut gains = Vec::with_capacity(np_max);
    for np in 1..=np_max {
        let pm = full.leading(np);
        let w = weighting_matrix(&pm.su, &weights);
        let sv = w.singular_values();
        let cond = sv.max() / sv.min();
        if !(cond <= MAX_CONDITION) {
            return Err(Error::IllConditioned { horizon: np, cond });
        }
        let chol = w.cholesky().ok_or(Error::IllConditioned { horizon: np, cond })?;
        // W is symmetric, so the first row of W^{-1} is the solution for e1.
        let mut e1 = DVector::zeros(np);
        e1[0] = 1.0;
        let w_inv_row = chol.solve(&e1).transpose();
        let f = pm.su.transpose() * (2.0 * weights.q);
        let k = w_inv_row * f;
        let kx = &k * &pm.sx;
        let kg = &k * &pm.sg;
        gains.push(HorizonGain { np, k, kx, kg, cond });
    }
    Ok(MpcGainSet {
        weights,
        ts_in: model.ts(),
        exponents: model.exponents().to_vec(),
        full,
        gains,
    })
}

impl MpcGainSet {
    pub fn np_max(&self) -> usize {
        self.gains.len()
    }

    pub fn gain(&self, np: usize) -> Result<&HorizonGain> {
        if np == 0 || np > self.gains.len() {
            return Err(Error::Horizon {
                requested: np,
                max: self.gains.len(),
            });
        }
        Ok(&self.gains[np - 1])
    }

    pub fn gains(&self) -> &[HorizonGain] {
        &self.gains
    }

    /// Human-readable dump of the weights and per-horizon gains.
    pub fn dump(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            weights: MpcWeights,
            ts_in: f64,
            np_max: usize,
            exponents: &'a [u32],
            horizons: Vec<HorizonDump>,
        }
        #[derive(Serialize)]
        struct HorizonDump {
            np: usize,
            cond: f64,
            k: Vec<f64>,
            kx: Vec<f64>,
            kg: Vec<f64>,
        }
        let dump = Dump {
            weights: self.weights,
            ts_in: self.ts_in,
            np_max: self.np_max(),
            exponents: &self.exponents,
            horizons: self
                .gains
                .iter()
                .map(|g| HorizonDump {
                    np: g.np,
                    cond: g.cond,
                    k: g.k.iter().copied().collect(),
                    kx: g.kx.iter().copied().collect(),
                    kg: g.kg.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dump).expect("gain dump serialises")
    }
}

/// Estimated monomial increments over a horizon of `np` samples: the first
/// block uses the current and previous outputs, later blocks substitute the
/// references `refs[0], refs[1], ...` (`y_ref(i+1|k), y_ref(i+2|k), ...`)
/// for the unknown future outputs. Needs at least `np - 1` references.
pub fn estimate_disturbance(
    exponents: &[u32],
    zeta_prev: &DVector<f64>,
    y_now: f64,
    refs: &[f64],
    np: usize,
) -> Result<DVector<f64>> {
    let s = exponents.len();
    if np == 0 || refs.len() + 1 < np {
        return Err(Error::Horizon {
            requested: np,
            max: refs.len() + 1,
        });
    }
    let mut dg = DVector::zeros(s * np);
    if s == 0 {
        return Ok(dg);
    }
    let zeta_now = eval_monomials(exponents, y_now);
    dg.rows_mut(0, s).copy_from(&(&zeta_now - zeta_prev));
    let mut last = zeta_now;
    for j in 1..np {
        let z = eval_monomials(exponents, refs[j - 1]);
        dg.rows_mut(j * s, s).copy_from(&(&z - &last));
        last = z;
    }
    Ok(dg)
}

/// Memory of the controller between inner samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u_prev: f64,
    pub y_prev: f64,
    pub zeta_prev: DVector<f64>,
    pub x_prev: DVector<f64>,
}

impl ControllerState {
    pub fn new(n: usize, exponents: &[u32]) -> Self {
        Self {
            u_prev: 0.0,
            y_prev: 0.0,
            zeta_prev: eval_monomials(exponents, 0.0),
            x_prev: DVector::zeros(n),
        }
    }

    /// `xbar = [x_now - x_prev; y_now]`.
    pub fn augmented_state(&self, x_now: &DVector<f64>, y_now: f64) -> DVector<f64> {
        let n = x_now.len();
        let mut xbar = DVector::zeros(n + 1);
        xbar.rows_mut(0, n).copy_from(&(x_now - &self.x_prev));
        xbar[n] = y_now;
        xbar
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    pub du: f64,
    pub np: usize,
}

/// One inner-loop sample: computes and returns the input to apply, updates
/// the controller memory and consumes one reference.
///
/// `x_now` is the current state estimate and `y_now` the matching (filtered)
/// output `C x_now`.
pub fn control_step(
    gains: &MpcGainSet,
    ctrl: &mut ControllerState,
    buffer: &mut ReferenceBuffer,
    x_now: &DVector<f64>,
    y_now: f64,
) -> Result<ControlOutput> {
    let np = buffer.remaining();
    let g = gains.gain(np)?;
    let xbar = ctrl.augmented_state(x_now, y_now);
    let upcoming = buffer.upcoming();
    let dg = estimate_disturbance(&gains.exponents, &ctrl.zeta_prev, y_now, upcoming, np)?;

    let mut du = g.k.iter().zip(upcoming).map(|(k, r)| k * r).sum::<f64>() - g.kx.dot(&xbar.transpose());
    if !gains.exponents.is_empty() {
        du -= g.kg.dot(&dg.transpose());
    }
    let u = ctrl.u_prev + du;

    ctrl.u_prev = u;
    ctrl.y_prev = y_now;
    ctrl.zeta_prev = eval_monomials(&gains.exponents, y_now);
    ctrl.x_prev.copy_from(x_now);
    buffer.advance();
    Ok(ControlOutput { u, du, np })
}
