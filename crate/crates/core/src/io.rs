//! CSV and JSON output of paths, controls, jump streams, ensembles and
//! reports. Tables are plot-ready: one row per time node or per ε.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path as FsPath;

use serde::Serialize;

use crate::control::{Control, MdpControl};
use crate::dynamics::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{IntensityMeasure, JumpStream};
use crate::path::{Interpolation, Path};
use crate::verify::SlopeReport;

fn header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(value: &T, w: W) -> Result<()> {
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

pub fn write_json_file<T: Serialize + ?Sized>(value: &T, path: &FsPath) -> Result<()> {
    write_json(value, BufWriter::new(File::create(path)?))
}

/// Columns `t, x0, .., x{d-1}`.
pub fn write_path_csv<W: Write>(p: &Path, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("x", p.dim()));
    out.write_record(&head)?;
    for k in 0..p.grid().n_nodes() {
        let mut row = vec![fmt(p.grid().node(k))];
        row.extend(p.at(k).iter().map(|&v| fmt(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the layout of [`write_path_csv`] as a linearly interpolated path.
pub fn read_path_csv<R: Read>(r: R) -> Result<Path> {
    let mut rdr = csv::Reader::from_reader(r);
    let dim = rdr.headers()?.len().saturating_sub(1);
    if dim == 0 {
        return Err(Error::InvalidArgument("path table needs a t column and at least one x column".into()));
    }
    let (mut nodes, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("path table row {}: bad value in column {}", line + 2, i + 1)))
        };
        nodes.push(parse(0)?);
        for i in 1..=dim {
            values.push(parse(i)?);
        }
    }
    Path::new(TimeGrid::from_nodes(nodes)?, dim, values, Interpolation::Linear)
}

pub fn read_path_csv_file(path: &FsPath) -> Result<Path> {
    read_path_csv(File::open(path)?)
}

/// Columns `t, phi*, psi*`; row `k` holds the values on `[t_k, t_{k+1})`
/// and the final node repeats the last step.
pub fn write_control_csv<W: Write>(u: &Control, grid: &TimeGrid, w: W) -> Result<()> {
    u.check_grid(grid)?;
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("phi", u.dim()));
    head.extend(header("psi", u.n_cells()));
    out.write_record(&head)?;
    let n = grid.n_steps();
    for k in 0..=n {
        let s = k.min(n - 1);
        let mut row = vec![fmt(grid.node(k))];
        row.extend(u.phi(s).iter().map(|&v| fmt(v)));
        row.extend(u.psi_row(s).iter().map(|&v| fmt(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// As [`write_control_csv`] with columns `t, phi*, vphi*`.
pub fn write_mdp_control_csv<W: Write>(u: &MdpControl, grid: &TimeGrid, w: W) -> Result<()> {
    if u.n_steps != grid.n_steps() {
        return Err(Error::IncompatibleGrids("control and grid differ in step count".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("phi", u.dim));
    head.extend(header("vphi", u.n_cells));
    out.write_record(&head)?;
    let n = grid.n_steps();
    for k in 0..=n {
        let s = k.min(n - 1);
        let mut row = vec![fmt(grid.node(k))];
        row.extend(u.phi(s).iter().map(|&v| fmt(v)));
        row.extend(u.vphi_row(s).iter().map(|&v| fmt(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `time, cell, z0, ..`.
pub fn write_jump_stream_csv<W: Write>(s: &JumpStream, m: &IntensityMeasure, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["time".to_string(), "cell".to_string()];
    head.extend(header("z", m.mark_dim()));
    out.write_record(&head)?;
    for e in &s.events {
        let mut row = vec![fmt(e.time), e.cell.to_string()];
        row.extend(m.mark(e.cell).iter().map(|&v| fmt(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `t, mean*, var*, w2_to_limit`. The last column is the
/// Wasserstein-2 distance from the empirical law to the point mass at the
/// limit path, `sqrt(sum var + |mean - x0|^2)`.
pub fn write_ensemble_summary_csv<W: Write>(ens: &ParticleEnsemble, limit: Option<&Path>, w: W) -> Result<()> {
    let d = ens.dim();
    if let Some(l) = limit {
        l.grid().check_same(ens.grid())?;
    }
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("mean", d));
    head.extend(header("var", d));
    if limit.is_some() {
        head.push("w2_to_limit".into());
    }
    out.write_record(&head)?;
    for k in 0..ens.grid().n_nodes() {
        let (m, v) = (ens.mean(k), ens.variance(k));
        let mut row = vec![fmt(ens.grid().node(k))];
        row.extend(m.iter().map(|&x| fmt(x)));
        row.extend(v.iter().map(|&x| fmt(x)));
        if let Some(l) = limit {
            let bias: f64 = m.iter().zip(l.at(k)).map(|(a, b)| (a - b).powi(2)).sum();
            row.push(fmt((v.iter().sum::<f64>() + bias).sqrt()));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per ε.
pub fn write_report_csv<W: Write>(r: &SlopeReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "eps",
        "speed",
        "a",
        "samples",
        "hits",
        "estimate",
        "std_err",
        "statistic",
        "statistic_std_err",
        "censored",
    ])?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for p in &r.points {
        out.write_record([
            fmt(p.eps),
            fmt(p.speed),
            opt(p.a),
            p.samples.to_string(),
            p.hits.map(|h| h.to_string()).unwrap_or_default(),
            fmt(p.estimate),
            fmt(p.std_err),
            opt(p.statistic),
            opt(p.statistic_std_err),
            p.censored.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
