//! Polynomial nonlinear state-space (PNLSS) models.
//!
//! A model is an LTI system with a static polynomial of its own output fed
//! back into the state update:
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + E zeta(y(k))
//!   y(k) = C x(k)
//! ```
//!
//! where `zeta(y) = [y^p1, ..., y^ps]` holds pure output monomials. The
//! velocity-form augmentation used by the controller lives here as well.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SignalRecord;

/// Schema tag written into every model document.
pub const MODEL_SCHEMA: &str = "pnlss/1";

/// Samples whose magnitude exceeds this multiple of the running output RMS
/// are treated as divergence.
pub const DIVERGENCE_RATIO: f64 = 1e6;

/// The ratio test only starts once this many samples are in the running RMS,
/// so start-up transients from rest are not flagged.
pub const DIVERGENCE_WARMUP: usize = 1000;

/// Discrete-time SISO polynomial nonlinear state-space model.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyNlssModel {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: RowDVector<f64>,
    e: DMatrix<f64>,
    exponents: Vec<u32>,
    ts: f64,
}

impl PolyNlssModel {
    /// Builds a validated model. Monomials are reordered by increasing
    /// exponent (columns of `e` follow) so that equivalent models compare equal.
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        e: DMatrix<f64>,
        exponents: Vec<u32>,
        ts: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidModel("state dimension must be at least 1".into()));
        }
        check_dim("A columns", n, a.ncols())?;
        check_dim("B", n, b.len())?;
        check_dim("C", n, c.len())?;
        check_dim("E rows", n, e.nrows())?;
        check_dim("E columns", exponents.len(), e.ncols())?;
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidModel(format!("sample time must be positive, got {ts}")));
        }
        for (field, finite) in [
            ("A", a.iter().all(|v| v.is_finite())),
            ("B", b.iter().all(|v| v.is_finite())),
            ("C", c.iter().all(|v| v.is_finite())),
            ("E", e.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::NonFinite(field));
            }
        }
        if exponents.contains(&0) {
            return Err(Error::InvalidModel("monomial exponents must be positive".into()));
        }

        let mut order: Vec<usize> = (0..exponents.len()).collect();
        order.sort_by_key(|&i| exponents[i]);
        let sorted: Vec<u32> = order.iter().map(|&i| exponents[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidModel(format!("duplicate monomial exponent in {exponents:?}")));
        }
        let e = DMatrix::from_fn(n, sorted.len(), |r, col| e[(r, order[col])]);

        Ok(Self {
            a,
            b,
            c,
            e,
            exponents: sorted,
            ts,
        })
    }

    /// A purely linear model (no monomials).
    pub fn linear(a: DMatrix<f64>, b: DVector<f64>, c: RowDVector<f64>, ts: f64) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, c, DMatrix::zeros(n, 0), Vec::new(), ts)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn s(&self) -> usize {
        self.exponents.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    /// Same model with the nonlinear coefficients set to zero.
    pub fn linear_part(&self) -> Self {
        let mut m = self.clone();
        m.e.fill(0.0);
        m
    }

    /// Replaces the nonlinear coefficient matrix, keeping the monomial basis.
    pub fn with_e(&self, e: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            e,
            self.exponents.clone(),
            self.ts,
        )
    }

    pub fn output(&self, x: &DVector<f64>) -> f64 {
        self.c.dot(&x.transpose())
    }

    pub fn eval_monomials(&self, y: f64) -> DVector<f64> {
        eval_monomials(&self.exponents, y)
    }

    /// One sample of the model. Returns the next state and the output of the
    /// current state (the model has no direct feedthrough).
    pub fn step(&self, x: &DVector<f64>, u: f64) -> Result<(DVector<f64>, f64)> {
        let y = self.output(x);
        let mut next = &self.a * x + &self.b * u;
        if self.s() > 0 {
            next += &self.e * self.eval_monomials(y);
        }
        if !y.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { index: 0, value: y });
        }
        Ok((next, y))
    }

    /// Difference `f(x + dx, u) - f(x, u)` of the state map, evaluated without
    /// forming the two large terms separately. Used by the sigma-point filter,
    /// whose perturbations are many orders of magnitude below the state.
    pub fn step_increment(&self, x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        let mut d = &self.a * dx;
        if self.s() > 0 {
            let y = self.output(x);
            let dy = self.output(dx);
            d += &self.e * monomial_increments(&self.exponents, y, dy);
        }
        d
    }

    /// Iterates [`step`](Self::step) from `x0` over `u`, recording `y(k)` and
    /// `x(k)` for `k = 0..N-1`.
    pub fn simulate(&self, x0: &DVector<f64>, u: &[f64]) -> Result<SignalRecord> {
        if u.is_empty() {
            return Err(Error::Record("input sequence is empty".into()));
        }
        check_dim("x0", self.n(), x0.len())?;
        let mut guard = DivergenceGuard::default();
        let mut x = x0.clone();
        let mut y = Vec::with_capacity(u.len());
        let mut states = Vec::with_capacity(u.len());
        for (k, &uk) in u.iter().enumerate() {
            let (next, yk) = self.step(&x, uk).map_err(|e| match e {
                Error::Divergence { value, .. } => Error::Divergence { index: k, value },
                other => other,
            })?;
            guard.check(k, yk)?;
            states.push(x);
            y.push(yk);
            x = next;
        }
        let mut rec = SignalRecord::new(1.0 / self.ts, u.to_vec(), y);
        rec.states = Some(states);
        Ok(rec)
    }

    /// Velocity-form augmentation with state `[dx; y]`.
    pub fn augment(&self) -> AugmentedModel {
        let n = self.n();
        let s = self.s();
        let ca = &self.c * &self.a;
        let cb = self.c.dot(&self.b.transpose());
        let ce = &self.c * &self.e;

        let mut a_bar = DMatrix::zeros(n + 1, n + 1);
        a_bar.view_mut((0, 0), (n, n)).copy_from(&self.a);
        a_bar.view_mut((n, 0), (1, n)).copy_from(&ca);
        a_bar[(n, n)] = 1.0;

        let mut b_bar = DVector::zeros(n + 1);
        b_bar.rows_mut(0, n).copy_from(&self.b);
        b_bar[n] = cb;

        let mut e_bar = DMatrix::zeros(n + 1, s);
        e_bar.view_mut((0, 0), (n, s)).copy_from(&self.e);
        e_bar.view_mut((n, 0), (1, s)).copy_from(&ce);

        let mut c_bar = RowDVector::zeros(n + 1);
        c_bar[n] = 1.0;

        AugmentedModel {
            a_bar,
            b_bar,
            e_bar,
            c_bar,
        }
    }

    /// Frequency response `C (e^{jw ts} I - A)^{-1} B` of the linear part at `f` Hz.
    pub fn linear_frf(&self, f: f64) -> Complex<f64> {
        let n = self.n();
        let z = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * f * self.ts);
        let m = DMatrix::from_fn(n, n, |r, c| {
            let diag = if r == c { z } else { Complex::new(0.0, 0.0) };
            diag - Complex::new(self.a[(r, c)], 0.0)
        });
        let b = DVector::from_fn(n, |r, _| Complex::new(self.b[r], 0.0));
        let sol = m.lu().solve(&b).unwrap_or_else(|| DVector::from_element(n, Complex::new(f64::NAN, 0.0)));
        (0..n).map(|i| sol[i] * self.c[i]).sum()
    }

    /// Static gain `C (I - A)^{-1} B` of the linear part.
    pub fn dc_gain(&self) -> f64 {
        self.linear_frf(0.0).re
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ModelDocument = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.into_model()
    }

    pub fn to_toml(&self, name: &str) -> String {
        let doc = ModelDocument::from_model(self, name);
        toml::to_string(&doc).expect("model document always serialises")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, name: &str) -> Result<()> {
        std::fs::write(path, self.to_toml(name))?;
        Ok(())
    }
}

fn check_dim(field: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            field,
            expected,
            found,
        });
    }
    Ok(())
}

/// `[y^p for p in exponents]`.
pub fn eval_monomials(exponents: &[u32], y: f64) -> DVector<f64> {
    DVector::from_iterator(exponents.len(), exponents.iter().map(|&p| y.powi(p as i32)))
}

/// `zeta(y + dy) - zeta(y)` via `a^p - b^p = (a - b) * sum_j a^(p-1-j) b^j`,
/// which stays accurate when `dy` is tiny relative to `y`.
pub fn monomial_increments(exponents: &[u32], y: f64, dy: f64) -> DVector<f64> {
    let a = y + dy;
    DVector::from_iterator(
        exponents.len(),
        exponents.iter().map(|&p| {
            let p = p as i32;
            let sum: f64 = (0..p).map(|j| a.powi(p - 1 - j) * y.powi(j)).sum();
            dy * sum
        }),
    )
}

/// Velocity-form model with state `xbar = [dx; y]`, driven by input and
/// monomial increments.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub e_bar: DMatrix<f64>,
    pub c_bar: RowDVector<f64>,
}

impl AugmentedModel {
    pub fn dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn s(&self) -> usize {
        self.e_bar.ncols()
    }

    pub fn output(&self, xbar: &DVector<f64>) -> f64 {
        self.c_bar.dot(&xbar.transpose())
    }

    pub fn step(&self, xbar: &DVector<f64>, du: f64, dzeta: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a_bar * xbar + &self.b_bar * du;
        if self.s() > 0 {
            next += &self.e_bar * dzeta;
        }
        next
    }
}

/// Flags samples that are non-finite or blow past the running RMS.
#[derive(Debug, Clone, Default)]
pub struct DivergenceGuard {
    sum_sq: f64,
    count: usize,
}

impl DivergenceGuard {
    pub fn check(&mut self, index: usize, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Divergence { index, value: y });
        }
        if self.count >= DIVERGENCE_WARMUP {
            let rms = (self.sum_sq / self.count as f64).sqrt();
            if rms > 0.0 && y.abs() > DIVERGENCE_RATIO * rms {
                return Err(Error::Divergence { index, value: y });
            }
        }
        self.sum_sq += y * y;
        self.count += 1;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    n: usize,
    s: usize,
    ts: f64,
    exponents: Vec<u32>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
}

impl ModelDocument {
    fn into_model(self) -> Result<PolyNlssModel> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Parse(format!(
                "unsupported schema `{}` (expected `{MODEL_SCHEMA}`)",
                self.schema
            )));
        }
        let n = self.n;
        let s = self.s;
        check_dim("exponents", s, self.exponents.len())?;
        check_dim("A rows", n, self.a.len())?;
        for row in &self.a {
            check_dim("A columns", n, row.len())?;
        }
        check_dim("B", n, self.b.len())?;
        check_dim("C", n, self.c.len())?;
        check_dim("E rows", n, self.e.len())?;
        for row in &self.e {
            check_dim("E columns", s, row.len())?;
        }
        let a = DMatrix::from_fn(n, n, |r, c| self.a[r][c]);
        let e = DMatrix::from_fn(n, s, |r, c| self.e[r][c]);
        PolyNlssModel::new(
            a,
            DVector::from_vec(self.b),
            RowDVector::from_vec(self.c),
            e,
            self.exponents,
            self.ts,
        )
    }

    fn from_model(m: &PolyNlssModel, name: &str) -> Self {
        let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..mat.nrows())
                .map(|r| (0..mat.ncols()).map(|c| mat[(r, c)]).collect())
                .collect()
        };
        Self {
            schema: MODEL_SCHEMA.to_string(),
            name: Some(name.to_string()),
            n: m.n(),
            s: m.s(),
            ts: m.ts,
            exponents: m.exponents.clone(),
            a: rows(&m.a),
            b: m.b.iter().copied().collect(),
            c: m.c.iter().copied().collect(),
            e: rows(&m.e),
        }
    }
}

/// Model documents shipped with the crate.
pub mod bundled {
    use super::PolyNlssModel;

    pub const DUFFING_NLSS: &str = include_str!("../models/duffing_nlss.toml");
    pub const BEAM_NLSS: &str = include_str!("../models/beam_nlss.toml");

    /// Document text of a bundled model by name.
    pub fn document(name: &str) -> Option<&'static str> {
        match name {
            "duffing_nlss" => Some(DUFFING_NLSS),
            "beam_nlss" => Some(BEAM_NLSS),
            _ => None,
        }
    }

    pub fn duffing() -> PolyNlssModel {
        PolyNlssModel::from_toml(DUFFING_NLSS).expect("bundled duffing model is valid")
    }

    pub fn beam() -> PolyNlssModel {
        PolyNlssModel::from_toml(BEAM_NLSS).expect("bundled beam model is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, RowDVector};

    fn scalar_model(a: f64, b: f64, c: f64, e: f64) -> PolyNlssModel {
        PolyNlssModel::new(
            dmatrix![a],
            dvector![b],
            RowDVector::from_vec(vec![c]),
            dmatrix![e],
            vec![3],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn monomials() {
        assert_eq!(eval_monomials(&[2, 3], 2.0), dvector![4.0, 8.0]);
        assert_eq!(eval_monomials(&[2, 3], 0.0), dvector![0.0, 0.0]);
        assert_eq!(eval_monomials(&[3], -1.5), dvector![-3.375]);
    }

    #[test]
    fn monomial_increment_matches_difference() {
        let exps = [1, 2, 3, 5];
        let (y, dy) = (0.7, -0.3);
        let direct = eval_monomials(&exps, y + dy) - eval_monomials(&exps, y);
        let inc = monomial_increments(&exps, y, dy);
        assert!((direct - inc).amax() < 1e-14);
    }

    #[test]
    fn origin_is_equilibrium() {
        let m = bundled::duffing();
        let (x, y) = m.step(&DVector::zeros(2), 0.0).unwrap();
        assert_eq!(y, 0.0);
        assert_eq!(x, DVector::zeros(2));
    }

    #[test]
    fn duffing_step_by_hand() {
        // x = [1e-3, 1e-3], u = 0, evaluated entry by entry from the table values.
        let m = bundled::duffing();
        let x = dvector![1e-3, 1e-3];
        let (next, y) = m.step(&x, 0.0).unwrap();
        let y_hand = 2.467e-3 * 1e-3 + 1.854e-2 * 1e-3;
        let (y2, y3) = (y_hand * y_hand, y_hand * y_hand * y_hand);
        let x1 = 9.992e-1 * 1e-3 + 2.428e-2 * 1e-3 + 1.326e2 * y2 + 2.598e5 * y3;
        let x2 = -2.070e-2 * 1e-3 + 9.994e-1 * 1e-3 + 7.221 * y2 - 4.306e4 * y3;
        assert!((y - y_hand).abs() < 1e-18);
        assert!((next[0] - x1).abs() < 1e-15);
        assert!((next[1] - x2).abs() < 1e-15);
    }

    #[test]
    fn augment_scalar() {
        let (a, b, c, e) = (0.9, 0.5, 2.0, 0.1);
        let aug = scalar_model(a, b, c, e).augment();
        assert_eq!(aug.a_bar, dmatrix![a, 0.0; c * a, 1.0]);
        assert_eq!(aug.b_bar, dvector![b, c * b]);
        assert_eq!(aug.e_bar, dmatrix![e; c * e]);
        assert_eq!(aug.c_bar, RowDVector::from_vec(vec![0.0, 1.0]));
        assert_eq!(aug.output(&dvector![3.0, 7.0]), 7.0);
    }

    #[test]
    fn augment_identity_state_matrix() {
        let m = PolyNlssModel::linear(
            DMatrix::identity(3, 3),
            dvector![1.0, 2.0, 3.0],
            RowDVector::from_element(3, 1.0),
            1.0,
        )
        .unwrap();
        let aug = m.augment();
        for j in 0..3 {
            assert_eq!(aug.a_bar[(3, j)], 1.0);
        }
    }

    #[test]
    fn augment_duffing() {
        let m = bundled::duffing();
        let aug = m.augment();
        assert_eq!(aug.a_bar.shape(), (3, 3));
        assert_eq!(aug.a_bar[(2, 2)], 1.0);
        assert_eq!(aug.a_bar[(0, 2)], 0.0);
        assert_eq!(aug.a_bar[(1, 2)], 0.0);
        // C*A first entry: 2.467e-3 * 0.9992 + 1.854e-2 * (-2.070e-2)
        let ca0 = 2.467e-3 * 9.992e-1 + 1.854e-2 * -2.070e-2;
        assert!((aug.a_bar[(2, 0)] - ca0).abs() < 1e-18);
        let cb = 2.467e-3 * -2.468e-3 + 1.854e-2 * 2.916e-4;
        assert!((aug.b_bar[2] - cb).abs() < 1e-20);
    }

    #[test]
    fn bundled_tables() {
        let d = bundled::duffing();
        assert_eq!((d.n(), d.s()), (2, 2));
        assert_eq!(d.exponents(), &[2, 3]);
        assert_eq!(d.a()[(0, 0)], 9.992e-1);
        assert_eq!(d.e()[(0, 1)], 2.598e5);
        assert_eq!(d.ts(), 1.0 / 1000.0);

        let b = bundled::beam();
        assert_eq!((b.n(), b.s()), (4, 1));
        assert_eq!(b.exponents(), &[3]);
        assert_eq!(b.e()[(3, 0)], -1.112e7);
        assert_eq!(b.a()[(2, 0)], -4.9715e-4);
        assert_eq!(b.ts(), 1.0 / 1024.0);
    }

    #[test]
    fn rejects_bad_input_length() {
        let doc = bundled::DUFFING_NLSS.replace(
            "B = [-2.468e-3, 2.916e-4]",
            "B = [-2.468e-3, 2.916e-4, 1.0]",
        );
        match PolyNlssModel::from_toml(&doc) {
            Err(Error::Dimension { field: "B", expected: 2, found: 3 }) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_field() {
        let doc = bundled::DUFFING_NLSS.replace("ts = 1e-3\n", "");
        assert!(matches!(PolyNlssModel::from_toml(&doc), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let doc = bundled::DUFFING_NLSS.replace("7.221", "nan");
        assert!(matches!(PolyNlssModel::from_toml(&doc), Err(Error::NonFinite("E"))));
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        for m in [bundled::duffing(), bundled::beam()] {
            let text = m.to_toml("x");
            let back = PolyNlssModel::from_toml(&text).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn monomial_order_is_canonical() {
        let m = bundled::duffing();
        let swapped = PolyNlssModel::new(
            m.a().clone(),
            m.b().clone(),
            m.c().clone(),
            DMatrix::from_fn(2, 2, |r, c| m.e()[(r, 1 - c)]),
            vec![3, 2],
            m.ts(),
        )
        .unwrap();
        assert_eq!(swapped, m);
        let u: Vec<f64> = (0..200).map(|k| 0.1 * (k as f64 * 0.05).sin()).collect();
        let x0 = DVector::zeros(2);
        assert_eq!(swapped.simulate(&x0, &u).unwrap().y, m.simulate(&x0, &u).unwrap().y);
    }

    #[test]
    fn single_sample_simulation() {
        let m = bundled::duffing();
        let x0 = dvector![1e-3, -2e-3];
        let rec = m.simulate(&x0, &[0.3]).unwrap();
        let (_, y) = m.step(&x0, 0.3).unwrap();
        assert_eq!(rec.y, vec![y]);
        assert_eq!(rec.states.unwrap()[0], x0);
    }

    #[test]
    fn divergence_is_reported_with_index() {
        // Hardening in the wrong direction: y^3 feedback with positive gain blows up.
        let m = scalar_model(1.0, 1.0, 1.0, 10.0);
        let u = vec![1.0; 100];
        match m.simulate(&DVector::zeros(1), &u) {
            Err(Error::Divergence { index, .. }) => assert!(index > 1 && index < 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dc_gain_scalar() {
        let m = scalar_model(0.5, 1.0, 2.0, 0.0);
        assert!((m.dc_gain() - 4.0).abs() < 1e-14);
    }
}
