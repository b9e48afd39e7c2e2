use nalgebra::DVector;

/// Uniformly sampled input/output data.
///
/// `u` and `y` always have the same length. `y_true` carries the noise-free
/// output when the record comes from a simulation with sensor noise, and
/// `states` the state trajectory when the producer has one.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub fs: f64,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_true: Option<Vec<f64>>,
    pub states: Option<Vec<DVector<f64>>>,
}

impl SignalRecord {
    pub fn new(fs: f64, u: Vec<f64>, y: Vec<f64>) -> Self {
        debug_assert_eq!(u.len(), y.len());
        Self {
            fs,
            u,
            y,
            y_true: None,
            states: None,
        }
    }

    /// An input-only record (output channel zeroed), used for excitation signals.
    pub fn input_only(fs: f64, u: Vec<f64>) -> Self {
        let y = vec![0.0; u.len()];
        Self::new(fs, u, y)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn time(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 / self.fs).collect()
    }
}

/// Root-mean-square value; zero for an empty slice.
pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (normalised by `len - 1`).
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}
