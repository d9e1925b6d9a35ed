//! Parametric cat-bond recovery and basis risk over an event loss table.

use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WorkloadError;

/// Industry losses per event and region-peril, and the sponsor's actual
/// loss per event (also known as the sponsor loss `sl`).
#[derive(Debug, Clone, PartialEq)]
pub struct EventLossTable {
    pub event_ids: Vec<String>,
    /// Row-major `n × m` industry losses.
    pub il: Vec<f64>,
    pub cl: Vec<f64>,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondTerms {
    pub attachment: f64,
    pub limit: f64,
}

impl BondTerms {
    pub fn new(attachment: f64, limit: f64) -> Result<Self, WorkloadError> {
        let terms = Self { attachment, limit };
        terms.validate()?;
        Ok(terms)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.attachment.is_finite() && self.attachment >= 0.0) {
            return Err(WorkloadError::InvalidInput(format!(
                "attachment must be finite and >= 0, got {}",
                self.attachment
            )));
        }
        if !(self.limit.is_finite() && self.limit > 0.0) {
            return Err(WorkloadError::InvalidInput(format!(
                "limit must be finite and > 0, got {}",
                self.limit
            )));
        }
        Ok(())
    }

    /// Recovery on a loss index: `min(max(x - Att, 0), Limit)`.
    pub fn pay(&self, index: f64) -> f64 {
        (index - self.attachment).max(0.0).min(self.limit)
    }
}

impl EventLossTable {
    pub fn new(event_ids: Vec<String>, il: Vec<f64>, cl: Vec<f64>, m: usize) -> Result<Self, WorkloadError> {
        let t = Self { event_ids, il, cl, m };
        t.validate()?;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.cl.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.il[i * self.m..(i + 1) * self.m]
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.m == 0 {
            return Err(WorkloadError::InvalidInput("table has no region-perils".into()));
        }
        if self.n() == 0 {
            return Err(WorkloadError::InvalidInput("table has no events".into()));
        }
        if self.il.len() != self.n() * self.m || self.event_ids.len() != self.n() {
            return Err(WorkloadError::Dimension {
                expected: self.n() * self.m,
                got: self.il.len(),
            });
        }
        if let Some(bad) = self.il.iter().chain(&self.cl).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(WorkloadError::InvalidInput(format!(
                "losses must be finite and >= 0, found {bad}"
            )));
        }
        Ok(())
    }

    /// Actual-loss recoveries `R*_i = min(max(cl_i - Att, 0), Limit)`.
    pub fn actual_recoveries(&self, terms: &BondTerms) -> Vec<f64> {
        self.cl.iter().map(|&c| terms.pay(c)).collect()
    }

    /// Read a CSV with header `event_id, cl, <region-peril columns>`. The
    /// second column may also be named `sl`.
    pub fn read_csv(path: &Path) -> Result<Self, WorkloadError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "event_id" || !matches!(&headers[1], "cl" | "sl") {
            return Err(WorkloadError::InvalidInput(format!(
                "{}: header must be `event_id, cl, <region perils...>`",
                path.display()
            )));
        }
        let m = headers.len() - 2;
        let (mut ids, mut il, mut cl) = (Vec::new(), Vec::new(), Vec::new());
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |k: usize| -> Result<f64, WorkloadError> {
                record[k].parse().map_err(|_| {
                    WorkloadError::InvalidInput(format!(
                        "{}: row {}: `{}` is not a number",
                        path.display(),
                        line + 2,
                        &record[k]
                    ))
                })
            };
            ids.push(record[0].to_string());
            cl.push(parse(1)?);
            for k in 2..headers.len() {
                il.push(parse(k)?);
            }
        }
        Self::new(ids, il, cl, m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), WorkloadError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["event_id".to_string(), "cl".to_string()];
        header.extend((1..=self.m).map(|j| format!("rp_{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.event_ids[i].clone(), self.cl[i].to_string()];
            row.extend(self.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `min(max(Σ_j w_j · IL_j − Att, 0), Limit)`.
pub fn recovery(w: &[f64], il_row: &[f64], terms: &BondTerms) -> Result<f64, WorkloadError> {
    if w.len() != il_row.len() {
        return Err(WorkloadError::Dimension {
            expected: il_row.len(),
            got: w.len(),
        });
    }
    Ok(terms.pay(dot(w, il_row)))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Root-mean-square difference between parametric and actual-loss
/// recoveries over all events.
pub fn basis_risk(w: &[f64], table: &EventLossTable, terms: &BondTerms) -> Result<f64, WorkloadError> {
    if w.len() != table.m {
        return Err(WorkloadError::Dimension {
            expected: table.m,
            got: w.len(),
        });
    }
    let mut sum = 0.0;
    for i in 0..table.n() {
        let d = terms.pay(dot(w, table.row(i))) - terms.pay(table.cl[i]);
        sum += d * d;
    }
    Ok((sum / table.n() as f64).sqrt())
}

/// A table whose actual losses are exactly replicated by a hidden weight
/// vector: `IL ~ U(0, 100)`, `w* ~ U(0, 1)`, `cl_i = Σ_j w*_j · IL_ij`.
pub fn planted_table(m: usize, n: usize, seed: u64) -> (EventLossTable, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
    let il: Vec<f64> = (0..n * m).map(|_| rng.gen::<f64>() * 100.0).collect();
    let cl = (0..n).map(|i| dot(&w, &il[i * m..(i + 1) * m])).collect();
    let ids = (1..=n).map(|i| format!("E{i}")).collect();
    (EventLossTable { event_ids: ids, il, cl, m }, w)
}

/// Bond terms used with [`planted_table`].
pub const PLANTED_TERMS: BondTerms = BondTerms {
    attachment: 100.0,
    limit: 250.0,
};

pub fn write_weights(path: &Path, w: &[f64]) -> Result<(), WorkloadError> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["region_peril", "weight"])?;
    for (j, v) in w.iter().enumerate() {
        out.write_record([format!("rp_{}", j + 1), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<f64>, WorkloadError> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .records()
        .map(|r| {
            let r = r?;
            r.get(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| WorkloadError::InvalidInput(format!("bad weight row {r:?}")))
        })
        .collect()
}

impl From<csv::Error> for WorkloadError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => WorkloadError::Io(io),
            other => WorkloadError::InvalidInput(format!("csv: {other:?}")),
        }
    }
}

impl From<WorkloadError> for io::Error {
    fn from(e: WorkloadError) -> Self {
        io::Error::other(e)
    }
}
