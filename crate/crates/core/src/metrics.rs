//! Line-delimited training metrics and the window-averaged report built from them.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub policy: f64,
    pub value: f64,
    pub reward_train: Option<f64>,
    pub reward_validation: Option<f64>,
}

/// One metrics line. Returns are means over episodes that ended since the
/// previous record; `None` when no episode ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_true_return: Option<f64>,
    pub mean_predicted_return: Option<f64>,
    pub entropy: f64,
    pub losses: Losses,
    pub labels: usize,
    pub reward_version: u64,
}

pub struct MetricsWriter {
    out: Box<dyn Write + Send>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: Box::new(std::io::BufWriter::new(File::create(path)?)) })
    }

    pub fn sink() -> Self {
        Self { out: Box::new(std::io::sink()) }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(record)?)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::integrity(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Records per averaging window in reports.
pub const REPORT_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Step of the last record in the window.
    pub step: u64,
    pub mean_true_return: f64,
}

/// Averages true returns over consecutive windows of `window` records. A
/// trailing partial window is dropped. Records without a return are skipped
/// inside a window; a window with none at all is dropped.
pub fn windowed_curve(records: &[MetricsRecord], window: usize) -> Vec<CurvePoint> {
    records
        .chunks_exact(window.max(1))
        .filter_map(|chunk| {
            let vals: Vec<f64> = chunk.iter().filter_map(|r| r.mean_true_return).collect();
            (!vals.is_empty()).then(|| CurvePoint {
                step: chunk.last().expect("non-empty chunk").step,
                mean_true_return: vals.iter().sum::<f64>() / vals.len() as f64,
            })
        })
        .collect()
}

/// Mean of the last window, the figure compared across runs.
pub fn final_return(records: &[MetricsRecord], window: usize) -> Option<f64> {
    windowed_curve(records, window).last().map(|p| p.mean_true_return)
}

/// Pointwise mean across curves, truncated to the shortest.
pub fn mean_curve(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| CurvePoint {
            step: curves[0][i].step,
            mean_true_return: curves.iter().map(|c| c[i].mean_true_return).sum::<f64>() / curves.len() as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<(String, Vec<CurvePoint>)>,
    pub mean: Vec<CurvePoint>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Report {
    pub fn build(paths: &[&Path], window: usize) -> Self {
        let mut runs = Vec::new();
        let mut skipped = Vec::new();
        for path in paths {
            let name = path.display().to_string();
            match read_metrics(path) {
                Ok(records) => runs.push((name, windowed_curve(&records, window))),
                Err(e) => skipped.push((name, e.to_string())),
            }
        }
        let curves: Vec<Vec<CurvePoint>> = runs.iter().map(|(_, c)| c.clone()).collect();
        let mean = if curves.is_empty() { Vec::new() } else { mean_curve(&curves) };
        Self { runs, mean, skipped }
    }

    /// Long-format CSV: `run,step,mean_true_return`, with the mean curve under run `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,step,mean_true_return\n");
        for (name, curve) in &self.runs {
            for p in curve {
                out.push_str(&format!("{},{},{}\n", csv_field(name), p.step, p.mean_true_return));
            }
        }
        if self.runs.len() > 1 {
            for p in &self.mean {
                out.push_str(&format!("mean,{},{}\n", p.step, p.mean_true_return));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (name, curve) in &self.runs {
            match curve.last() {
                Some(p) => out.push_str(&format!("{name}: final {:.2} at step {} ({} points)\n", p.mean_true_return, p.step, curve.len())),
                None => out.push_str(&format!("{name}: no complete window\n")),
            }
        }
        if let Some(p) = self.mean.last() {
            out.push_str(&format!("mean of {} runs: final {:.2}\n", self.runs.len(), p.mean_true_return));
        }
        for (name, why) in &self.skipped {
            out.push_str(&format!("skipped {name}: {why}\n"));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
