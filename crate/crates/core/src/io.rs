//! CSV and JSON persistence of records and reports.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::DistortionReport;
use crate::closed_loop::ClosedLoopRecord;
use crate::error::{Error, Result};
use crate::signal::SignalRecord;

/// Hex SHA-256 of a document, used to pin model files in run metadata.
pub fn content_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let f = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Excitation signal as `t, u`.
pub fn write_excitation_csv(path: impl AsRef<Path>, fs: f64, u: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "u"])?;
    for (k, x) in u.iter().enumerate() {
        w.write_record([(k as f64 / fs).to_string(), x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t, u, y_meas` and, when present, `y_true`.
pub fn write_signal_csv(path: impl AsRef<Path>, rec: &SignalRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let has_true = rec.y_true.as_ref().is_some_and(|y| y.len() == rec.u.len());
    let mut header = vec!["t", "u", "y_meas"];
    if has_true {
        header.push("y_true");
    }
    w.write_record(&header)?;
    for (k, t) in rec.time().iter().enumerate() {
        let mut row = vec![t.to_string(), rec.u[k].to_string(), rec.y[k].to_string()];
        if has_true {
            row.push(rec.y_true.as_ref().unwrap()[k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV with a `t` column, an input column (`u` or `v`) and an output
/// column (`y_meas` or `y`). The sampling rate is taken from the time column.
pub fn read_signal_csv(path: impl AsRef<Path>) -> Result<SignalRecord> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |names: &[&str]| names.iter().find_map(|n| headers.iter().position(|h| h == *n));
    let ti = find(&["t"]).ok_or_else(|| Error::Parse(format!("{}: missing column t", path.display())))?;
    let ui = find(&["u", "v"]).ok_or_else(|| Error::Parse(format!("{}: missing input column u", path.display())))?;
    let yi = find(&["y_meas", "y"]);
    let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let get = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse(format!("{}: bad number on data row {}", path.display(), line + 1)))
        };
        t.push(get(ti)?);
        u.push(get(ui)?);
        y.push(match yi {
            Some(yi) => get(yi)?,
            None => 0.0,
        });
    }
    if t.len() < 2 {
        return Err(Error::Parse(format!("{}: need at least two samples", path.display())));
    }
    let fs = 1.0 / (t[1] - t[0]);
    if !fs.is_finite() || fs <= 0.0 {
        return Err(Error::Parse(format!("{}: time column is not increasing", path.display())));
    }
    Ok(SignalRecord::new(fs, u, y))
}

/// Writes `t, v, u, y_meas, y_ref, err_mpc, err_ukf, y_true, y_hat, horizon, x_hat_1..n`.
pub fn write_closed_loop_csv(path: impl AsRef<Path>, rec: &ClosedLoopRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = rec.x_hat.first().map_or(0, |x| x.len());
    let mut header: Vec<String> = [
        "t", "v", "u", "y_meas", "y_ref", "err_mpc", "err_ukf", "y_true", "y_hat", "horizon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=n).map(|i| format!("x_hat_{i}")));
    w.write_record(&header)?;
    let e_mpc = rec.err_mpc();
    let e_ukf = rec.err_ukf();
    for (k, t) in rec.time().iter().enumerate() {
        let mut row = vec![
            t.to_string(),
            rec.v[k].to_string(),
            rec.u[k].to_string(),
            rec.y_meas[k].to_string(),
            rec.y_ref[k].to_string(),
            e_mpc[k].to_string(),
            e_ukf[k].to_string(),
            rec.y_true[k].to_string(),
            rec.y_hat[k].to_string(),
            rec.horizon[k].to_string(),
        ];
        row.extend(rec.x_hat[k].iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready `f, output_db, odd_db, even_db, noise_db`; lines without a
/// value for a class leave the cell empty.
pub fn write_report_csv(path: impl AsRef<Path>, rep: &DistortionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["f", "output_db", "odd_db", "even_db", "noise_db"])?;
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for q in 0..rep.f.len() {
        w.write_record([
            rep.f[q].to_string(),
            cell(rep.output_db[q]),
            cell(rep.odd_db[q]),
            cell(rep.even_db[q]),
            cell(rep.noise_db[q]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            content_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn signal_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rec = SignalRecord::new(4.0, vec![0.5, -1.25, 3.0], vec![1.0, 2.0, 1e-9]);
        write_signal_csv(&p, &rec).unwrap();
        let back = read_signal_csv(&p).unwrap();
        assert_eq!(back.u, rec.u);
        assert_eq!(back.y, rec.y);
        assert!((back.fs - 4.0).abs() < 1e-12);
    }

    #[test]
    fn excitation_csv_has_two_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        write_excitation_csv(&p, 2.0, &[1.0, 2.0]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "t,u\n0,1\n0.5,2\n");
        let back = read_signal_csv(&p).unwrap();
        assert_eq!(back.y, vec![0.0, 0.0]);
    }

    #[test]
    fn report_csv_leaves_missing_cells_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rep = DistortionReport {
            f: vec![0.0, 1.0],
            output_db: vec![None, Some(-3.0)],
            odd_db: vec![None, None],
            even_db: vec![Some(-40.0), None],
            noise_db: vec![Some(-90.0), None],
        };
        write_report_csv(&p, &rep).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "f,output_db,odd_db,even_db,noise_db\n0,,,-40,-90\n1,-3,,,\n");
    }
}
