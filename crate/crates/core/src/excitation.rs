//! Random-phase multisine excitation.
//!
//! A multisine with `N` samples per period places energy on the DFT lines
//! `q * fs / N`. Flat amplitudes are used on every excited line and the
//! phases are drawn uniformly on `[0, 2pi)`. The odd variant excites odd
//! lines only and withholds one line out of every consecutive group of
//! `group_size` odd lines, so that the withheld (odd) lines and all even lines
//! carry no input energy and can be used to detect nonlinear distortions.
//!
//! Randomness comes from ChaCha8 seeded with `spec.seed`: stream 0 picks the
//! withheld lines (shared by all realisations), stream `1 + r` draws the
//! phases of realisation `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{rms, SignalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum MultisineKind {
    Full,
    OddWithDetection { group_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    /// Samples per period (even).
    pub n_samples: usize,
    /// Sampling frequency in Hz.
    pub fs: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Target RMS of the synthesised period.
    pub rms: f64,
    pub kind: MultisineKind,
    pub seed: u64,
}

impl MultisineSpec {
    pub fn f_res(&self) -> f64 {
        self.fs / self.n_samples as f64
    }

    pub fn period(&self) -> f64 {
        self.n_samples as f64 / self.fs
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 4 || self.n_samples % 2 != 0 {
            return Err(Error::Excitation(format!(
                "samples per period must be even and at least 4, got {}",
                self.n_samples
            )));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::Excitation(format!("invalid sampling frequency {}", self.fs)));
        }
        if !(self.f_min > 0.0 && self.f_min <= self.f_max && self.f_max < self.fs / 2.0) {
            return Err(Error::Excitation(format!(
                "band [{}, {}] Hz must satisfy 0 < f_min <= f_max < fs/2 = {}",
                self.f_min,
                self.f_max,
                self.fs / 2.0
            )));
        }
        if !(self.rms.is_finite() && self.rms >= 0.0) {
            return Err(Error::Excitation(format!("invalid RMS {}", self.rms)));
        }
        if let MultisineKind::OddWithDetection { group_size } = self.kind {
            if group_size == 0 {
                return Err(Error::Excitation("group size must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineClass {
    Excited,
    OddDetection,
    EvenDetection,
    Unexcited,
}

/// One realisation of a multisine: classification of lines `0..=N/2`, their
/// phases, and one period of the time signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationDesign {
    pub spec: MultisineSpec,
    pub realisation: usize,
    pub classes: Vec<LineClass>,
    pub phases: Vec<f64>,
    pub signal: Vec<f64>,
}

impl ExcitationDesign {
    pub fn n_lines(&self) -> usize {
        self.classes.len()
    }

    pub fn freq(&self, line: usize) -> f64 {
        line as f64 * self.spec.f_res()
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n_lines()).map(|q| self.freq(q)).collect()
    }

    pub fn lines_of(&self, class: LineClass) -> Vec<usize> {
        (0..self.n_lines()).filter(|&q| self.classes[q] == class).collect()
    }

    pub fn excited_lines(&self) -> Vec<usize> {
        self.lines_of(LineClass::Excited)
    }

    /// Serialisable summary for export next to the signal.
    pub fn metadata(&self) -> DesignMetadata {
        DesignMetadata {
            spec: self.spec.clone(),
            realisation: self.realisation,
            f_res: self.spec.f_res(),
            excited: self.lines_of(LineClass::Excited),
            odd_detection: self.lines_of(LineClass::OddDetection),
            even_detection: self.lines_of(LineClass::EvenDetection),
            phases: self.excited_lines().iter().map(|&q| self.phases[q]).collect(),
        }
    }

    /// The single period repeated `periods` times.
    pub fn tiled(&self, periods: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.signal.len() * periods);
        for _ in 0..periods {
            out.extend_from_slice(&self.signal);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMetadata {
    pub spec: MultisineSpec,
    pub realisation: usize,
    pub f_res: f64,
    pub excited: Vec<usize>,
    pub odd_detection: Vec<usize>,
    pub even_detection: Vec<usize>,
    /// Phases of the excited lines, in line order.
    pub phases: Vec<f64>,
}

/// Line classification shared by every realisation of `spec`.
pub fn classify(spec: &MultisineSpec) -> Result<Vec<LineClass>> {
    spec.validate()?;
    let half = spec.n_samples / 2;
    let f_res = spec.f_res();
    // Lines strictly below Nyquist; the Nyquist line is never excited.
    let in_band = |q: usize| {
        let f = q as f64 * f_res;
        q >= 1 && q < half && f >= spec.f_min * (1.0 - 1e-12) && f <= spec.f_max * (1.0 + 1e-12)
    };
    let mut classes = vec![LineClass::Unexcited; half + 1];

    match spec.kind {
        MultisineKind::Full => {
            for (q, class) in classes.iter_mut().enumerate() {
                if in_band(q) {
                    *class = LineClass::Excited;
                }
            }
        }
        MultisineKind::OddWithDetection { group_size } => {
            let odd: Vec<usize> = (0..=half).filter(|&q| q % 2 == 1 && in_band(q)).collect();
            if group_size > odd.len() {
                return Err(Error::Excitation(format!(
                    "group size {group_size} exceeds the {} odd lines in band",
                    odd.len()
                )));
            }
            for &q in &odd {
                classes[q] = LineClass::Excited;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(0);
            // Complete groups only, counted upward from the lowest odd line.
            for group in odd.chunks_exact(group_size) {
                let pick = rng.random_range(0..group_size);
                classes[group[pick]] = LineClass::OddDetection;
            }
            for (q, class) in classes.iter_mut().enumerate() {
                let f = q as f64 * f_res;
                if q % 2 == 0 && q < half && f <= spec.f_max * (1.0 + 1e-12) {
                    *class = LineClass::EvenDetection;
                }
            }
        }
    }

    if !classes.contains(&LineClass::Excited) {
        return Err(Error::Excitation("band contains no excitable line".into()));
    }
    Ok(classes)
}

/// Realisation 0 of `spec`.
pub fn design(spec: &MultisineSpec) -> Result<ExcitationDesign> {
    design_realisation(spec, 0)
}

/// Realisation `index` of `spec`: same line classification, fresh phases.
pub fn design_realisation(spec: &MultisineSpec, index: usize) -> Result<ExcitationDesign> {
    let classes = classify(spec)?;
    let n = spec.n_samples;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + index as u64);
    let mut phases = vec![0.0; classes.len()];
    for (q, class) in classes.iter().enumerate() {
        if *class == LineClass::Excited {
            phases[q] = rng.random_range(0.0..std::f64::consts::TAU);
        }
    }

    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for (q, class) in classes.iter().enumerate() {
        if *class == LineClass::Excited {
            let x = Complex64::from_polar(1.0, phases[q]);
            spectrum[q] = x;
            spectrum[n - q] = x.conj();
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    let mut signal: Vec<f64> = spectrum.iter().map(|c| c.re).collect();

    let raw = rms(&signal);
    let scale = if raw > 0.0 { spec.rms / raw } else { 0.0 };
    signal.iter_mut().for_each(|v| *v *= scale);

    Ok(ExcitationDesign {
        spec: spec.clone(),
        realisation: index,
        classes,
        phases,
        signal,
    })
}

/// One realisation together with its multi-period record.
#[derive(Debug, Clone)]
pub struct Realisation {
    pub design: ExcitationDesign,
    pub record: SignalRecord,
}

/// `count` realisations, each tiled over `periods` periods.
pub fn realisations(spec: &MultisineSpec, count: usize, periods: usize) -> Result<Vec<Realisation>> {
    if count == 0 || periods == 0 {
        return Err(Error::Excitation("need at least one realisation and one period".into()));
    }
    (0..count)
        .map(|r| {
            let design = design_realisation(spec, r)?;
            let record = SignalRecord::input_only(spec.fs, design.tiled(periods));
            Ok(Realisation { design, record })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn odd_spec() -> MultisineSpec {
        MultisineSpec {
            n_samples: 4000,
            fs: 100.0,
            f_min: 0.025,
            f_max: 14.0,
            rms: 0.12,
            kind: MultisineKind::OddWithDetection { group_size: 4 },
            seed: 7,
        }
    }

    /// Plain O(N^2) DFT, independent of the FFT used for synthesis.
    fn dft_mag(x: &[f64], q: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in x.iter().enumerate() {
            let ang = -std::f64::consts::TAU * q as f64 * k as f64 / n;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn zero_rms_gives_zero_signal() {
        let mut spec = odd_spec();
        spec.rms = 0.0;
        let d = design(&spec).unwrap();
        assert!(d.signal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duffing_study_design() {
        let spec = odd_spec();
        assert!((spec.f_res() - 0.025).abs() < 1e-15);
        let d = design(&spec).unwrap();
        assert_eq!(d.signal.len(), 4000);
        assert!((rms(&d.signal) - 0.12).abs() < 1e-12);
        let odd_in_band = (1..=560).filter(|q| q % 2 == 1).count();
        assert_eq!(odd_in_band, 280);
        assert_eq!(d.lines_of(LineClass::OddDetection).len(), 70);
        assert_eq!(d.excited_lines().len(), 210);
        for group in (1..=560).filter(|q| q % 2 == 1).collect::<Vec<_>>().chunks(4) {
            let withheld = group.iter().filter(|&&q| d.classes[q] == LineClass::OddDetection).count();
            assert_eq!(withheld, 1);
        }
    }

    #[test]
    fn detection_lines_are_empty_and_excited_lines_flat() {
        let mut spec = odd_spec();
        spec.n_samples = 400;
        spec.fs = 10.0;
        spec.f_max = 4.0;
        let d = design(&spec).unwrap();
        let excited: Vec<f64> = d.excited_lines().iter().map(|&q| dft_mag(&d.signal, q)).collect();
        let max = excited.iter().cloned().fold(0.0, f64::max);
        for m in &excited {
            assert!((m - max).abs() / max < 1e-9);
        }
        assert!(dft_mag(&d.signal, 0) < 1e-12 * max);
        for q in d.lines_of(LineClass::OddDetection) {
            assert!(dft_mag(&d.signal, q) < 1e-12 * max);
        }
    }

    #[test]
    fn rejects_empty_band() {
        let spec = MultisineSpec {
            n_samples: 100,
            fs: 100.0,
            f_min: 10.2,
            f_max: 10.8,
            rms: 1.0,
            kind: MultisineKind::Full,
            seed: 0,
        };
        assert!(matches!(design(&spec), Err(Error::Excitation(_))));
    }

    #[test]
    fn rejects_oversized_group() {
        let spec = MultisineSpec {
            n_samples: 100,
            fs: 100.0,
            f_min: 1.0,
            f_max: 5.0,
            rms: 1.0,
            kind: MultisineKind::OddWithDetection { group_size: 4 },
            seed: 0,
        };
        assert!(matches!(design(&spec), Err(Error::Excitation(_))));
    }

    #[test]
    fn realisations_share_grid_but_not_phases() {
        let mut spec = odd_spec();
        spec.n_samples = 400;
        let rs = realisations(&spec, 2, 1).unwrap();
        assert_eq!(rs[0].design.classes, rs[1].design.classes);
        assert_ne!(rs[0].design.phases, rs[1].design.phases);
        let single = realisations(&spec, 1, 1).unwrap();
        assert_eq!(single[0].record.u, design(&spec).unwrap().signal);
    }

    #[test]
    fn tiled_record_is_periodic() {
        let mut spec = odd_spec();
        spec.n_samples = 200;
        let rs = realisations(&spec, 1, 3).unwrap();
        let u = &rs[0].record.u;
        assert_eq!(u.len(), 600);
        for k in 0..400 {
            assert_eq!(u[k], u[k + 200]);
        }
    }
}
