//! Result files. Every file carries the config hash and the tool version;
//! wall-clock data goes to `timing.json` only, so payloads stay reproducible.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use polymer_core::quenched_limits::ExperimentReport;
use serde::Serialize;

use crate::HarnessError;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// What a run left on disk.
#[derive(Clone, Debug, Serialize)]
pub struct ResultBundle {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub dir: PathBuf,
    /// Payload files, in the order written.
    pub files: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_hash: &'a str,
    tool_version: &'a str,
    command: &'a str,
    payload: &'a T,
}

/// Writes payload files into one directory, creating it on first use.
pub struct BundleWriter {
    dir: PathBuf,
    command: String,
    hash: String,
    files: Vec<PathBuf>,
}

impl BundleWriter {
    pub fn new(dir: &Path, command: &str, hash: &str) -> Self {
        BundleWriter { dir: dir.to_path_buf(), command: command.into(), hash: hash.into(), files: Vec::new() }
    }

    fn path(&mut self, name: &str) -> Result<PathBuf, HarnessError> {
        std::fs::create_dir_all(&self.dir)?;
        let p = self.dir.join(name);
        self.files.push(p.clone());
        Ok(p)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, payload: &T) -> Result<(), HarnessError> {
        let env = Envelope { config_hash: &self.hash, tool_version: TOOL_VERSION, command: &self.command, payload };
        let mut text = serde_json::to_string_pretty(&env).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(self.path(name)?, text)?;
        Ok(())
    }

    /// A CSV file whose first line is a `#` comment with the provenance.
    pub fn csv_with<F>(&mut self, name: &str, body: F) -> Result<(), HarnessError>
    where
        F: FnOnce(&mut Vec<u8>) -> polymer_core::Result<()>,
    {
        let mut buf = format!("# config_hash={} tool_version={}\n", self.hash, TOOL_VERSION).into_bytes();
        body(&mut buf)?;
        std::fs::write(self.path(name)?, buf)?;
        Ok(())
    }

    pub fn rows(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
        self.csv_with(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn plot(&mut self, name: &str, pts: &[PlotPoint]) -> Result<(), HarnessError> {
        let rows: Vec<Vec<String>> =
            pts.iter().map(|p| [p.x, p.y, p.ci_lo, p.ci_hi].iter().map(|v| v.to_string()).collect()).collect();
        self.rows(name, &["x", "y", "ci_lo", "ci_hi"], &rows)
    }

    pub fn finish(self, wall_time: Duration) -> Result<ResultBundle, HarnessError> {
        let bundle = ResultBundle {
            command: self.command,
            config_hash: self.hash,
            tool_version: TOOL_VERSION.into(),
            dir: self.dir,
            files: self.files,
            wall_time_secs: wall_time.as_secs_f64(),
        };
        let mut f = std::fs::File::create(bundle.dir.join("timing.json"))?;
        serde_json::to_writer_pretty(&mut f, &bundle).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        Ok(bundle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl PlotPoint {
    pub fn exact(x: f64, y: f64) -> Self {
        PlotPoint { x, y, ci_lo: y, ci_hi: y }
    }
}

/// Plots derived from a replica report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Replica mean per height with its 95% interval.
    MeanVsN,
    /// Replica variance per height, interval from the normal approximation.
    VarianceVsN,
}

pub fn plot_points(report: &ExperimentReport, kind: PlotKind) -> Vec<PlotPoint> {
    report
        .per_n
        .iter()
        .map(|s| {
            let x = s.n as f64;
            let m = &s.summary;
            match kind {
                PlotKind::MeanVsN => PlotPoint { x, y: m.mean, ci_lo: m.mean - m.ci_halfwidth, ci_hi: m.mean + m.ci_halfwidth },
                PlotKind::VarianceVsN => {
                    let h = 1.96 * m.variance * (2.0 / (m.count.max(2) - 1) as f64).sqrt();
                    PlotPoint { x, y: m.variance, ci_lo: m.variance - h, ci_hi: m.variance + h }
                }
            }
        })
        .collect()
}

pub fn emit_plotdata(
    w: &mut BundleWriter,
    name: &str,
    report: &ExperimentReport,
    kind: PlotKind,
) -> Result<(), HarnessError> {
    w.plot(name, &plot_points(report, kind))
}
