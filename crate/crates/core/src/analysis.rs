//! Frequency-domain analysis of multisine experiments.
//!
//! Every retained period is transformed with a rectangular DFT normalised by
//! the period length, so records logged at different rates (but with the
//! same period duration) land on the same line grid with comparable levels.
//! Within a realisation the complex spectra are averaged over periods. Output
//! levels across realisations are RMS values of the per-realisation means,
//! since the phases differ from one realisation to the next.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{ExcitationDesign, LineClass};
use crate::signal::{rms, SignalRecord};

/// `20 log10 |x|`
pub fn db(x: f64) -> f64 {
    20.0 * x.abs().log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub freqs: Vec<f64>,
    pub classes: Vec<LineClass>,
    pub periods: usize,
    /// Period-averaged input spectrum per realisation.
    pub u: Vec<Vec<Complex64>>,
    /// Period-averaged output spectrum per realisation.
    pub y: Vec<Vec<Complex64>>,
    /// Variance of the averaged output spectrum due to noise, per line.
    pub noise_var: Vec<f64>,
}

impl SpectralEstimate {
    pub fn n_lines(&self) -> usize {
        self.freqs.len()
    }

    pub fn realisations(&self) -> usize {
        self.y.len()
    }

    /// RMS over realisations of the averaged output magnitude.
    pub fn output_level(&self, line: usize) -> f64 {
        let r = self.y.len() as f64;
        (self.y.iter().map(|y| y[line].norm_sqr()).sum::<f64>() / r).sqrt()
    }

    pub fn input_level(&self, line: usize) -> f64 {
        let r = self.u.len() as f64;
        (self.u.iter().map(|u| u[line].norm_sqr()).sum::<f64>() / r).sqrt()
    }

    pub fn noise_level(&self, line: usize) -> f64 {
        self.noise_var[line].sqrt()
    }

    /// Output variance over realisations, per line.
    pub fn realisation_var(&self) -> Vec<f64> {
        let r = self.y.len();
        (0..self.n_lines())
            .map(|q| {
                if r < 2 {
                    return 0.0;
                }
                let m = self.y.iter().map(|y| y[q]).sum::<Complex64>() / r as f64;
                self.y.iter().map(|y| (y[q] - m).norm_sqr()).sum::<f64>() / (r - 1) as f64
            })
            .collect()
    }
}

fn period_spectra(x: &[f64], period: usize, n_lines: usize, fft: &dyn rustfft::Fft<f64>) -> Vec<Vec<Complex64>> {
    x.chunks_exact(period)
        .map(|chunk| {
            let mut buf: Vec<Complex64> = chunk.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            let scale = 1.0 / period as f64;
            buf.truncate(n_lines);
            buf.iter_mut().for_each(|c| *c *= scale);
            buf
        })
        .collect()
}

/// Averages the steady-state periods of each record (one per realisation).
///
/// Every record must hold `periods` whole periods of the design's duration;
/// the first `discard` are dropped.
pub fn spectra(
    records: &[SignalRecord],
    design: &ExcitationDesign,
    periods: usize,
    discard: usize,
) -> Result<SpectralEstimate> {
    if records.is_empty() {
        return Err(Error::Record("no records to analyse".into()));
    }
    if periods <= discard {
        return Err(Error::Record(format!("{periods} periods leave nothing after discarding {discard}")));
    }
    let kept = periods - discard;
    let n_lines = design.n_lines();
    let first = &records[0];
    let period = first.len() / periods;
    if period * periods != first.len() {
        return Err(Error::Record(format!(
            "record of {} samples is not {periods} whole periods",
            first.len()
        )));
    }
    let expected = first.fs * design.spec.period();
    if (expected - period as f64).abs() > 1e-6 * period as f64 {
        return Err(Error::Record(format!(
            "period of {period} samples at {} Hz does not match the design period of {} s",
            first.fs,
            design.spec.period()
        )));
    }
    if period < 2 * (n_lines - 1) {
        return Err(Error::Record("record rate is below the design rate".into()));
    }
    let fft = FftPlanner::new().plan_fft_forward(period);

    let mut u_all = Vec::with_capacity(records.len());
    let mut y_all = Vec::with_capacity(records.len());
    let mut var_sum = vec![0.0; n_lines];
    for rec in records {
        if rec.len() != first.len() || rec.fs != first.fs {
            return Err(Error::Record("records differ in length or rate".into()));
        }
        let start = discard * period;
        let us = period_spectra(&rec.u[start..], period, n_lines, fft.as_ref());
        let ys = period_spectra(&rec.y[start..], period, n_lines, fft.as_ref());
        let mean_of = |s: &[Vec<Complex64>]| -> Vec<Complex64> {
            (0..n_lines).map(|q| s.iter().map(|p| p[q]).sum::<Complex64>() / kept as f64).collect()
        };
        let um = mean_of(&us);
        let ym = mean_of(&ys);
        if kept > 1 {
            for q in 0..n_lines {
                let v = ys.iter().map(|p| (p[q] - ym[q]).norm_sqr()).sum::<f64>() / (kept - 1) as f64;
                var_sum[q] += v;
            }
        }
        u_all.push(um);
        y_all.push(ym);
    }
    let r = records.len() as f64;
    // Variance of one period's spectrum, averaged over realisations, then
    // scaled to the mean over all P R periods.
    let noise_var = var_sum.iter().map(|v| v / r / (kept as f64 * r)).collect();
    Ok(SpectralEstimate {
        freqs: design.freqs(),
        classes: design.classes.clone(),
        periods: kept,
        u: u_all,
        y: y_all,
        noise_var,
    })
}

/// Nonparametric frequency response on the excited lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Frf {
    pub lines: Vec<usize>,
    pub freqs: Vec<f64>,
    pub g: Vec<Complex64>,
    /// Variance of `g`: over realisations when there are several, otherwise
    /// propagated from the output noise.
    pub var: Vec<f64>,
}

impl Frf {
    pub fn magnitude_db(&self) -> Vec<f64> {
        self.g.iter().map(|g| db(g.norm())).collect()
    }

    /// Frequency and magnitude of the largest response in `[f_lo, f_hi]`.
    pub fn peak_in(&self, f_lo: f64, f_hi: f64) -> Option<(f64, f64)> {
        self.freqs
            .iter()
            .zip(&self.g)
            .filter(|(f, _)| **f >= f_lo && **f <= f_hi)
            .map(|(f, g)| (*f, g.norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Best linear approximation: `Y / U` per realisation on the excited lines,
/// averaged over realisations.
pub fn bla(est: &SpectralEstimate) -> Result<Frf> {
    let lines: Vec<usize> = (0..est.n_lines()).filter(|&q| est.classes[q] == LineClass::Excited).collect();
    let r = est.realisations();
    let mut g = Vec::with_capacity(lines.len());
    let mut var = Vec::with_capacity(lines.len());
    for &q in &lines {
        let mut per = Vec::with_capacity(r);
        for (u, y) in est.u.iter().zip(&est.y) {
            if u[q].norm() == 0.0 {
                return Err(Error::Record(format!("input is zero on excited line {q}")));
            }
            per.push(y[q] / u[q]);
        }
        let m = per.iter().sum::<Complex64>() / r as f64;
        let v = if r > 1 {
            per.iter().map(|p| (p - m).norm_sqr()).sum::<f64>() / ((r - 1) * r) as f64
        } else {
            est.noise_var[q] / est.u[0][q].norm_sqr()
        };
        g.push(m);
        var.push(v);
    }
    Ok(Frf {
        freqs: lines.iter().map(|&q| est.freqs[q]).collect(),
        lines,
        g,
        var,
    })
}

/// Per-line levels in dB. Each line carries only the entry matching its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub f: Vec<f64>,
    pub output_db: Vec<Option<f64>>,
    pub odd_db: Vec<Option<f64>>,
    pub even_db: Vec<Option<f64>>,
    /// Noise floor; `None` where it cannot be estimated (one period kept).
    pub noise_db: Vec<Option<f64>>,
}

/// Distortion levels relative to the output peak around one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub centre: f64,
    pub half_width: f64,
    /// Power mean of the odd-detection levels in the band, relative to the
    /// reference output, dB.
    pub odd_rel_db: Option<f64>,
    pub even_rel_db: Option<f64>,
    pub noise_rel_db: Option<f64>,
    /// Largest single odd-detection level in the band, relative, dB.
    pub odd_peak_rel_db: Option<f64>,
    pub even_peak_rel_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSummary {
    /// Frequency of the largest excited-line output near the resonance.
    pub resonance_hz: f64,
    pub output_peak_db: f64,
    pub bands: Vec<BandSummary>,
}

/// Detection-line levels, taken from the design's classification only.
/// Levels are raw (not noise-subtracted); the noise floor is reported next to them.
pub fn distortions(est: &SpectralEstimate, design: &ExcitationDesign) -> Result<DistortionReport> {
    if design.classes != est.classes {
        return Err(Error::Record("spectral estimate and design have different line grids".into()));
    }
    if !design.classes.iter().any(|c| *c == LineClass::OddDetection) {
        return Err(Error::Record("design has no odd detection lines".into()));
    }
    let n = est.n_lines();
    let mut rep = DistortionReport {
        f: est.freqs.clone(),
        output_db: vec![None; n],
        odd_db: vec![None; n],
        even_db: vec![None; n],
        noise_db: (0..n).map(|q| Some(db(est.noise_level(q))).filter(|v| v.is_finite())).collect(),
    };
    for q in 0..n {
        let level = Some(db(est.output_level(q)));
        match est.classes[q] {
            LineClass::Excited => rep.output_db[q] = level,
            LineClass::OddDetection => rep.odd_db[q] = level,
            LineClass::EvenDetection => rep.even_db[q] = level,
            LineClass::Unexcited => {}
        }
    }
    Ok(rep)
}

fn band_max(f: &[f64], x: &[Option<f64>], lo: f64, hi: f64) -> Option<(f64, f64)> {
    f.iter()
        .zip(x)
        .filter_map(|(f, x)| x.filter(|_| *f >= lo && *f <= hi).map(|x| (*f, x)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

/// Power mean of the dB levels in `[lo, hi]`, in dB.
fn band_power_mean(f: &[f64], x: &[Option<f64>], lo: f64, hi: f64) -> Option<f64> {
    let p: Vec<f64> = f
        .iter()
        .zip(x)
        .filter_map(|(f, x)| x.filter(|_| *f >= lo && *f <= hi))
        .map(|d| 10f64.powf(d / 10.0))
        .collect();
    if p.is_empty() {
        return None;
    }
    Some(10.0 * (p.iter().sum::<f64>() / p.len() as f64).log10())
}

impl DistortionReport {
    /// Summaries for bands of `±half_width` around `centres`. The reference
    /// output is the largest excited-line output within the first band.
    pub fn summarise(&self, centres: &[f64], half_width: f64) -> Result<DistortionSummary> {
        let first = *centres
            .first()
            .ok_or_else(|| Error::Record("at least one band centre is needed".into()))?;
        let (resonance_hz, peak) = band_max(&self.f, &self.output_db, first - half_width, first + half_width)
            .ok_or_else(|| Error::Record(format!("no excited line within {half_width} Hz of {first} Hz")))?;
        let bands = centres
            .iter()
            .map(|&c| {
                let (lo, hi) = (c - half_width, c + half_width);
                let mean = |x: &[Option<f64>]| band_power_mean(&self.f, x, lo, hi).map(|l| l - peak);
                let max = |x: &[Option<f64>]| band_max(&self.f, x, lo, hi).map(|(_, l)| l - peak);
                BandSummary {
                    centre: c,
                    half_width,
                    odd_rel_db: mean(&self.odd_db),
                    even_rel_db: mean(&self.even_db),
                    noise_rel_db: mean(&self.noise_db),
                    odd_peak_rel_db: max(&self.odd_db),
                    even_peak_rel_db: max(&self.even_db),
                }
            })
            .collect();
        Ok(DistortionSummary {
            resonance_hz,
            output_peak_db: peak,
            bands,
        })
    }

    /// Power mean of the excited-line output over `[f_lo, f_hi]`, dB.
    pub fn mean_output_db(&self, f_lo: f64, f_hi: f64) -> Option<f64> {
        band_power_mean(&self.f, &self.output_db, f_lo, f_hi)
    }
}

/// Per-line dB changes from `before` to `after`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub f: Vec<f64>,
    pub output_delta_db: Vec<Option<f64>>,
    pub odd_delta_db: Vec<Option<f64>>,
    pub even_delta_db: Vec<Option<f64>>,
    pub noise_delta_db: Vec<Option<f64>>,
}

impl ComparisonReport {
    /// Band-level change within `±half_width` of `centre`, per class:
    /// `(output peak, odd, even)`. Detection levels are band power means.
    pub fn band_deltas(
        before: &DistortionReport,
        after: &DistortionReport,
        centre: f64,
        half_width: f64,
    ) -> (Option<f64>, Option<f64>, Option<f64>) {
        let (lo, hi) = (centre - half_width, centre + half_width);
        let d = |a: &[Option<f64>], b: &[Option<f64>]| {
            Some(band_power_mean(&after.f, b, lo, hi)? - band_power_mean(&before.f, a, lo, hi)?)
        };
        let peak = || Some(band_max(&after.f, &after.output_db, lo, hi)?.1 - band_max(&before.f, &before.output_db, lo, hi)?.1);
        (
            peak(),
            d(&before.odd_db, &after.odd_db),
            d(&before.even_db, &after.even_db),
        )
    }
}

/// Band-level changes around one centre frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDelta {
    pub centre: f64,
    pub half_width: f64,
    pub output_peak_db: Option<f64>,
    pub odd_db: Option<f64>,
    pub even_db: Option<f64>,
}

impl BandDelta {
    pub fn new(before: &DistortionReport, after: &DistortionReport, centre: f64, half_width: f64) -> Self {
        let (output_peak_db, odd_db, even_db) = ComparisonReport::band_deltas(before, after, centre, half_width);
        Self {
            centre,
            half_width,
            output_peak_db,
            odd_db,
            even_db,
        }
    }
}

pub fn compare_runs(before: &DistortionReport, after: &DistortionReport) -> Result<ComparisonReport> {
    if before.f != after.f {
        return Err(Error::Record("reports use different frequency grids".into()));
    }
    let delta = |a: &[Option<f64>], b: &[Option<f64>]| -> Vec<Option<f64>> {
        a.iter().zip(b).map(|(a, b)| Some((*b)? - (*a)?)).collect()
    };
    Ok(ComparisonReport {
        f: before.f.clone(),
        output_delta_db: delta(&before.output_db, &after.output_db),
        odd_delta_db: delta(&before.odd_db, &after.odd_db),
        even_delta_db: delta(&before.even_db, &after.even_db),
        noise_delta_db: delta(&before.noise_db, &after.noise_db),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rms_signal: f64,
    pub rms_error: f64,
    pub percent: f64,
}

pub fn error_metrics(signal: &[f64], error: &[f64]) -> Result<ErrorMetrics> {
    if signal.is_empty() || signal.len() != error.len() {
        return Err(Error::Record(format!(
            "error metrics need equal non-empty lengths, got {} and {}",
            signal.len(),
            error.len()
        )));
    }
    let rms_signal = rms(signal);
    let rms_error = rms(error);
    Ok(ErrorMetrics {
        rms_signal,
        rms_error,
        percent: 100.0 * rms_error / rms_signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::{design, MultisineKind, MultisineSpec};
    use crate::model::bundled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_design() -> ExcitationDesign {
        design(&MultisineSpec {
            n_samples: 512,
            fs: 64.0,
            f_min: 0.5,
            f_max: 20.0,
            rms: 1.0,
            kind: MultisineKind::OddWithDetection { group_size: 4 },
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn sinusoid_lands_on_its_line() {
        let d = small_design();
        let n = 512;
        let q = 17;
        let y: Vec<f64> = (0..2 * n)
            .map(|k| (2.0 * std::f64::consts::PI * q as f64 * k as f64 / n as f64).cos())
            .collect();
        let rec = SignalRecord::new(64.0, y.clone(), y);
        let est = spectra(&[rec], &d, 2, 0).unwrap();
        for l in 0..est.n_lines() {
            let expected = if l == q { 0.5 } else { 0.0 };
            assert!((est.output_level(l) - expected).abs() < 1e-12, "line {l}");
        }
    }

    #[test]
    fn parseval_on_normalised_dft() {
        let n = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let energy: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        let rms2 = rms(&x).powi(2);
        assert!((energy - n as f64 * n as f64 * rms2).abs() < 1e-9 * energy);
    }

    #[test]
    fn identity_system_has_unit_frf() {
        let d = small_design();
        let u = d.tiled(3);
        let rec = SignalRecord::new(64.0, u.clone(), u);
        let est = spectra(&[rec], &d, 3, 1).unwrap();
        let frf = bla(&est).unwrap();
        assert!(frf.g.iter().all(|g| (g - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn linear_model_frf_matches_analytic() {
        let m = bundled::duffing().linear_part();
        let spec = MultisineSpec {
            n_samples: 2000,
            fs: 1000.0,
            f_min: 0.5,
            f_max: 40.0,
            rms: 1.0,
            kind: MultisineKind::OddWithDetection { group_size: 4 },
            seed: 4,
        };
        let d = design(&spec).unwrap();
        // Enough periods for the 3.56 Hz mode to settle.
        let u = d.tiled(40);
        let y = m.simulate(&nalgebra::DVector::zeros(2), &u).unwrap().y;
        let rec = SignalRecord::new(1000.0, u, y);
        let est = spectra(&[rec], &d, 40, 38).unwrap();
        let frf = bla(&est).unwrap();
        for (f, g) in frf.freqs.iter().zip(&frf.g) {
            let h = m.linear_frf(*f);
            assert!((g - h).norm() < 1e-6 * h.norm(), "f = {f}: {g} vs {h}");
        }
    }

    #[test]
    fn linear_system_detection_lines_are_empty() {
        let m = bundled::duffing().linear_part();
        let spec = MultisineSpec {
            n_samples: 1000,
            fs: 1000.0,
            f_min: 1.0,
            f_max: 100.0,
            rms: 1.0,
            kind: MultisineKind::OddWithDetection { group_size: 3 },
            seed: 2,
        };
        let d = design(&spec).unwrap();
        let u = d.tiled(60);
        let y = m.simulate(&nalgebra::DVector::zeros(2), &u).unwrap().y;
        let est = spectra(&[SignalRecord::new(1000.0, u, y)], &d, 60, 58).unwrap();
        let rep = distortions(&est, &d).unwrap();
        let s = rep.summarise(&[3.5], 3.0).unwrap();
        let all = rep.summarise(&[50.0], 50.0).unwrap();
        assert!(all.bands[0].odd_rel_db.unwrap() < -80.0);
        assert!(all.bands[0].even_rel_db.unwrap() < -80.0);
        assert!(s.bands[0].odd_rel_db.unwrap_or(f64::NEG_INFINITY) < -80.0);
    }

    #[test]
    fn noise_estimate_shrinks_with_more_periods() {
        let d = small_design();
        let n = 512;
        let mut wins = 0;
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..16 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rec = SignalRecord::new(64.0, vec![0.0; 16 * n], y);
            let few = spectra(&[SignalRecord::new(64.0, rec.u[..4 * n].to_vec(), rec.y[..4 * n].to_vec())], &d, 4, 0).unwrap();
            let many = spectra(&[rec], &d, 16, 0).unwrap();
            let mean = |e: &SpectralEstimate| e.noise_var.iter().sum::<f64>();
            if mean(&many) < mean(&few) {
                wins += 1;
            }
        }
        assert!(wins >= 38);
    }

    #[test]
    fn white_noise_floor_is_flat() {
        let d = small_design();
        let n = 512;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records: Vec<SignalRecord> = (0..4)
            .map(|_| {
                let y: Vec<f64> = (0..8 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                SignalRecord::new(64.0, vec![0.0; 8 * n], y)
            })
            .collect();
        let est = spectra(&records, &d, 8, 1).unwrap();
        // Each period line has variance 1/n; the mean over 7 periods and 4 realisations 1/(28 n).
        let expected = 1.0 / (28.0 * n as f64);
        let avg = est.noise_var[1..].iter().sum::<f64>() / (est.n_lines() - 1) as f64;
        assert!((avg / expected - 1.0).abs() < 0.1, "{avg} vs {expected}");
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let d = small_design();
        let u = d.tiled(2);
        let est = spectra(&[SignalRecord::new(64.0, u.clone(), u)], &d, 2, 0).unwrap();
        let rep = distortions(&est, &d).unwrap();
        let cmp = compare_runs(&rep, &rep).unwrap();
        assert!(cmp.output_delta_db.iter().flatten().all(|d| *d == 0.0));
        assert!(cmp.noise_delta_db.iter().all(|d| d.is_none_or(|d| d == 0.0)));
    }

    #[test]
    fn band_levels_are_power_means() {
        let rep = DistortionReport {
            f: vec![1.0, 2.0, 3.0, 4.0],
            output_db: vec![Some(0.0), None, None, Some(-3.0)],
            odd_db: vec![None, Some(-20.0), None, None],
            even_db: vec![None, None, Some(-30.0), None],
            noise_db: vec![Some(-60.0); 4],
        };
        let s = rep.summarise(&[2.5], 2.0).unwrap();
        assert_eq!(s.resonance_hz, 1.0);
        assert!((s.bands[0].odd_rel_db.unwrap() + 20.0).abs() < 1e-12);
        let expected = 10.0 * ((1.0 + 10f64.powf(-0.3)) / 2.0).log10();
        assert!((rep.mean_output_db(0.0, 5.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn error_metric_limits() {
        let s = [1.0, -2.0, 3.0];
        assert_eq!(error_metrics(&s, &[0.0; 3]).unwrap().percent, 0.0);
        assert!((error_metrics(&s, &s).unwrap().percent - 100.0).abs() < 1e-12);
        assert!(error_metrics(&[], &[]).is_err());
    }

    #[test]
    fn rejects_bad_lengths() {
        let d = small_design();
        let rec = SignalRecord::new(64.0, vec![0.0; 700], vec![0.0; 700]);
        assert!(spectra(&[rec], &d, 2, 0).is_err());
        let rec = SignalRecord::new(64.0, vec![0.0; 1024], vec![0.0; 1024]);
        assert!(spectra(&[rec], &d, 2, 2).is_err());
    }
}
