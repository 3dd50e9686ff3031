//! Per-round training metrics: CSV writing, reading, and curve resampling
//! for cross-run aggregation.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,samples,reward_mean,dyn_log_lik,w_mean,w_max,version,staleness_max,wall_clock_s";

/// One row per training round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    /// Total environment samples received when the round completed.
    pub samples: u64,
    /// Mean relabeled intrinsic reward over the round's policy batches.
    pub reward_mean: f64,
    /// Mean dynamics log-likelihood over the round's dynamics batches.
    pub dyn_log_lik: f64,
    /// Mean and max clipped importance weight over the dynamics batches.
    pub w_mean: f64,
    pub w_max: f64,
    /// Snapshot version published at the end of the round.
    pub version: u64,
    /// Largest snapshot-version staleness among transitions consumed this
    /// round; identically 0 in synchronous mode.
    pub staleness_max: u64,
    /// Seconds since run start; 0 when deterministic timing is requested.
    pub wall_clock_s: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.samples,
            self.reward_mean,
            self.dyn_log_lik,
            self.w_mean,
            self.w_max,
            self.version,
            self.staleness_max,
            self.wall_clock_s
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Runtime(format!("bad metrics row: `{line}`")));
        }
        let pf = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Runtime(format!("bad float `{s}` in metrics")))
        };
        let pu = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Runtime(format!("bad integer `{s}` in metrics")))
        };
        Ok(Self {
            round: pu(parts[0])?,
            samples: pu(parts[1])?,
            reward_mean: pf(parts[2])?,
            dyn_log_lik: pf(parts[3])?,
            w_mean: pf(parts[4])?,
            w_max: pf(parts[5])?,
            version: pu(parts[6])?,
            staleness_max: pu(parts[7])?,
            wall_clock_s: pf(parts[8])?,
        })
    }
}

/// Appends rows to a CSV file, flushing after every row so concurrent
/// readers and crash recovery see complete lines.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        file.flush()?;
        Ok(Self { file })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads a metrics file; the header is validated, the body may be empty.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        Some(Ok(h)) => {
            return Err(Error::Runtime(format!("unexpected metrics header `{h}`")));
        }
        _ => return Err(Error::Runtime("empty metrics file (missing header)".into())),
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(MetricsRow::from_csv(&line)?);
        }
    }
    Ok(rows)
}

/// Linear interpolation of `(xs, ys)` onto `grid`. Grid points outside the
/// data range clamp to the boundary values.
pub fn resample(xs: &[f64], ys: &[f64], grid: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    grid.iter()
        .map(|&g| {
            if g <= xs[0] {
                return ys[0];
            }
            if g >= xs[xs.len() - 1] {
                return ys[ys.len() - 1];
            }
            let idx = xs.partition_point(|&x| x < g);
            let (x0, x1) = (xs[idx - 1], xs[idx]);
            let (y0, y1) = (ys[idx - 1], ys[idx]);
            if x1 == x0 {
                y0
            } else {
                y0 + (y1 - y0) * (g - x0) / (x1 - x0)
            }
        })
        .collect()
}

/// Median, elementwise minimum, and elementwise maximum across curves that
/// share one grid.
pub fn aggregate(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert!(!curves.is_empty());
    let n = curves[0].len();
    assert!(curves.iter().all(|c| c.len() == n));
    let mut median = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let mut column: Vec<f64> = curves.iter().map(|c| c[i]).collect();
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = column.len();
        median.push(if m % 2 == 1 {
            column[m / 2]
        } else {
            0.5 * (column[m / 2 - 1] + column[m / 2])
        });
        lo.push(column[0]);
        hi.push(column[m - 1]);
    }
    (median, lo, hi)
}
