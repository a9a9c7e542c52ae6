//! CSV files: ball datasets, point datasets, samples, metrics and loss logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use bridgegen_core::ballsim::{Layout, Scenario, FEATURES};
use bridgegen_core::metrics::MetricsReport;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))
}

fn parse_row(rec: &csv::StringRecord, path: &Path) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("{}: bad number `{s}`", path.display())))
        .collect()
}

pub fn write_ball_dataset(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "scenario_id,timestep,ball_id,px,py,vx,vy")?;
    for (k, s) in scenarios.iter().enumerate() {
        for (i, rec) in s.states.chunks_exact(FEATURES).enumerate() {
            let (t, b) = (i / s.layout.n_balls, i % s.layout.n_balls);
            let vals: Vec<String> = rec.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{k},{t},{b},{}", vals.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a ball dataset into flattened states; rows must be ordered by
/// scenario, timestep and ball.
pub fn read_ball_dataset(path: &Path, layout: Layout) -> Result<Vec<Vec<f64>>> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    ensure!(
        header == ["scenario_id", "timestep", "ball_id", "px", "py", "vx", "vy"],
        "{}: unexpected header {:?}",
        path.display(),
        header
    );
    let per = layout.n_balls * layout.n_steps;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let v = parse_row(&rec?, path)?;
        let (k, t, b) = (row / per, (row % per) / layout.n_balls, row % layout.n_balls);
        ensure!(
            v[0] as usize == k && v[1] as usize == t && v[2] as usize == b,
            "{}: row {} is out of order for {} balls x {} steps",
            path.display(),
            row + 2,
            layout.n_balls,
            layout.n_steps
        );
        if t == 0 && b == 0 {
            out.push(Vec::with_capacity(layout.dim()));
        }
        out.last_mut().expect("pushed").extend_from_slice(&v[3..7]);
    }
    if let Some(last) = out.last() {
        ensure!(last.len() == layout.dim(), "{}: truncated final scenario", path.display());
    }
    Ok(out)
}

/// Unlabelled points with columns `x0, x1, …`.
pub fn write_points(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    let d = points.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let vals: Vec<String> = p.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rd = reader(path)?;
    rd.records().map(|r| parse_row(&r?, path)).collect()
}

/// Samples with a leading `sample_id` column.
pub fn write_samples(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    let d = samples.first().map_or(0, Vec::len);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    writeln!(w, "{}", header.join(","))?;
    for (i, s) in samples.iter().enumerate() {
        let vals: Vec<String> = s.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rd = reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let v = parse_row(&rec?, path)?;
        ensure!(!v.is_empty() && v[0] as usize == i, "{}: sample ids must be 0, 1, …", path.display());
        out.push(v[1..].to_vec());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub report: MetricsReport,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "method,collision_rate,boundary_rate,hdh,relbo,n_samples,seed";

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method,
            fmt_f64(m.collision_rate),
            fmt_f64(m.boundary_rate),
            fmt_f64(m.hdh),
            fmt_f64(m.relbo),
            m.n_samples,
            r.seed
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    ensure!(header.join(",") == METRICS_HEADER, "{}: unexpected header", path.display());
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != 7 {
            bail!("{}: expected 7 columns", path.display());
        }
        let f = |i: usize| -> Result<f64> { rec[i].parse::<f64>().with_context(|| format!("bad value `{}`", &rec[i])) };
        out.push(MetricsRow {
            method: rec[0].to_string(),
            report: MetricsReport {
                collision_rate: f(1)?,
                boundary_rate: f(2)?,
                hdh: f(3)?,
                relbo: f(4)?,
                n_samples: rec[5].parse()?,
            },
            seed: rec[6].parse()?,
        });
    }
    Ok(out)
}

/// `step,loss` rows.
pub fn write_loss_log(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,loss")?;
    for (s, l) in rows {
        writeln!(w, "{s},{}", fmt_f64(*l))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut rd = reader(path)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push((rec[0].parse()?, rec[1].parse()?));
    }
    Ok(out)
}
