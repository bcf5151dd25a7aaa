//! Plain CSV/JSON emitters. Floats in CSV bodies carry 17 significant digits.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::sampler::{reweighted_estimate, Estimate, RunRecord};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A minimal CSV writer: header once, then rows of preformatted cells.
pub struct CsvWriter<W: Write> {
    inner: W,
    columns: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut inner: W, header: &[&str]) -> io::Result<Self> {
        writeln!(inner, "{}", header.join(","))?;
        Ok(CsvWriter {
            inner,
            columns: header.len(),
        })
    }

    pub fn row(&mut self, cells: &[String]) -> io::Result<()> {
        debug_assert_eq!(cells.len(), self.columns);
        writeln!(self.inner, "{}", cells.join(","))
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize>(mut w: impl Write, value: &T) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
}

/// Least-squares line `y = slope x + intercept` and its `R²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// `bias_snapshots.csv`: one row per node per snapshot.
pub fn write_bias_snapshots(record: &RunRecord, w: impl Write) -> io::Result<()> {
    let m = record.grid.dims();
    let mut header = vec!["time".to_string()];
    header.extend((1..=m).map(|a| format!("z{a}")));
    header.push("bias".into());
    header.extend((1..=m).map(|a| format!("grad{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvWriter::new(w, &header)?;
    for snap in &record.snapshots {
        let values = snap.bias.values().values();
        let grad = snap.bias.nodal_gradient();
        for (node, v) in values.iter().enumerate() {
            let mut row = vec![fmt_f64(snap.time)];
            row.extend(record.grid.node_coords(node).into_iter().map(fmt_f64));
            row.push(fmt_f64(*v));
            row.extend((0..m).map(|c| fmt_f64(grad.component(c)[node])));
            csv.row(&row)?;
        }
    }
    csv.finish().map(drop)
}

/// `histogram.csv`: flat cell index and mass.
pub fn write_histogram(record: &RunRecord, w: impl Write) -> io::Result<()> {
    let mut csv = CsvWriter::new(w, &["cell", "mass"])?;
    for (cell, mass) in record.histogram.iter().enumerate() {
        csv.row(&[cell.to_string(), fmt_f64(*mass)])?;
    }
    csv.finish().map(drop)
}

/// `diagnostics.csv`; missing distances are left empty.
pub fn write_diagnostics(record: &RunRecord, w: impl Write) -> io::Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut csv = CsvWriter::new(w, &["time", "c0", "w12", "flat_tv", "max_bias_gradient"])?;
    for d in &record.diagnostics {
        csv.row(&[
            fmt_f64(d.time),
            opt(d.c0),
            opt(d.w12),
            opt(d.flat_tv),
            fmt_f64(d.max_bias_gradient),
        ])?;
    }
    csv.finish().map(drop)
}

/// Observable name to `{value, stderr}`, in registration order.
pub fn estimates(record: &RunRecord) -> crate::Result<BTreeMap<String, Estimate>> {
    record
        .observables
        .iter()
        .map(|o| Ok((o.name.clone(), reweighted_estimate(record, &o.name)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r_squared - 1.0).abs() < 1e-14);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn csv_writer_emits_header_then_rows() {
        let mut w = CsvWriter::new(Vec::new(), &["a", "b"]).unwrap();
        w.row(&[fmt_f64(1.0), "x".into()]).unwrap();
        let out = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(out, "a,b\n1.0000000000000000e0,x\n");
    }

    #[test]
    fn run_record_files_have_the_expected_shape() {
        use crate::sampler::{run, SimConfig};
        let mut c = SimConfig::new(crate::PotentialSpec::default_coupled_well());
        c.grid_nodes = 16;
        c.n_steps = 100;
        c.snapshot_stride = 50;
        c.observables = vec!["one".into(), "cos_z".into()];
        let r = run(&c).unwrap();
        let mut buf = Vec::new();
        write_bias_snapshots(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 16);
        assert!(text.starts_with("time,z1,bias,grad1\n"));
        let mut buf = Vec::new();
        write_histogram(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
        let mut buf = Vec::new();
        write_diagnostics(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().contains(",,,"));
        let est = estimates(&r).unwrap();
        assert_eq!(est["one"].value, 1.0);
        assert_eq!(est.len(), 2);
    }
}
