use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 9] = ["epoch", "rec", "mi", "tc", "dim_kl", "total", "beta", "grad_norm", "wall_ms"];

/// Epoch means of the loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub rec: f64,
    pub mi: f64,
    pub tc: f64,
    pub dim_kl: f64,
    pub total: f64,
    pub beta: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    fn identity_gap(&self) -> f64 {
        let parts = self.rec + self.mi + self.beta * self.tc + self.dim_kl;
        let scale = [1.0, self.total.abs(), self.rec.abs(), self.mi.abs(), (self.beta * self.tc).abs(), self.dim_kl.abs()]
            .into_iter()
            .fold(0.0, f64::max);
        (self.total - parts).abs() / scale
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LOG_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.rec.to_string(),
                r.mi.to_string(),
                r.tc.to_string(),
                r.dim_kl.to_string(),
                r.total.to_string(),
                r.beta.to_string(),
                r.grad_norm.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a log and re-checks epoch ordering and the loss identity.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != LOG_HEADER {
            return Err(Error::format(format!("unexpected log header {header:?}")));
        }
        let mut log = TrainLog::default();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i].parse().map_err(|_| Error::format(format!("log row {}: bad `{}`", line + 1, LOG_HEADER[i])))
            };
            let rec = EpochRecord {
                epoch: row[0].parse().map_err(|_| Error::format(format!("log row {}: bad epoch", line + 1)))?,
                rec: num(1)?,
                mi: num(2)?,
                tc: num(3)?,
                dim_kl: num(4)?,
                total: num(5)?,
                beta: num(6)?,
                grad_norm: num(7)?,
                wall_ms: row[8].parse().map_err(|_| Error::format(format!("log row {}: bad wall_ms", line + 1)))?,
            };
            if log.records.last().is_some_and(|p| p.epoch >= rec.epoch) {
                return Err(Error::Consistency(format!("log epochs not increasing at row {}", line + 1)));
            }
            if rec.identity_gap() > 1e-9 {
                return Err(Error::Consistency(format!("log row {}: total != rec + mi + beta*tc + dim_kl", line + 1)));
            }
            log.records.push(rec);
        }
        Ok(log)
    }
}
