//! Append-only per-step training log and its CSV form.
//!
//! Columns: `step, phase, mode, dataset_ids, L_original, L_s1..L_sk,
//! P_1..P_k, query_loss, dev_acc, seed`. `dataset_ids` is `;`-joined;
//! absent values are empty cells; floats are written in shortest
//! round-trip form. The file starts with a `# format_version: N` line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: String,
    pub mode: String,
    pub dataset_ids: Vec<usize>,
    pub l_original: Option<f64>,
    /// Probe loss after pseudo-adaptation, per dataset.
    pub l_sources: Vec<Option<f64>>,
    /// Sampling probability, per dataset.
    pub probs: Vec<Option<f64>>,
    pub query_loss: Option<f64>,
    pub dev_acc: Option<f64>,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(step: u64, phase: &str, mode: &str, k: usize, seed: u64) -> Self {
        MetricRecord {
            step,
            phase: phase.into(),
            mode: mode.into(),
            dataset_ids: Vec::new(),
            l_original: None,
            l_sources: vec![None; k],
            probs: vec![None; k],
            query_loss: None,
            dev_acc: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    k: usize,
    records: Vec<MetricRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn parse_opt(cell: &str, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|e| Error::Corrupt {
        path: String::new(),
        reason: format!("column {column}: {e}"),
    })
}

impl MetricsLog {
    pub fn new(k: usize) -> Self {
        MetricsLog {
            k,
            records: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.records.last().map(|r| r.step)
    }

    /// Next free step number.
    pub fn next_step(&self) -> u64 {
        self.last_step().map_or(0, |s| s + 1)
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if record.l_sources.len() != self.k || record.probs.len() != self.k {
            return Err(Error::shape(
                "metric record",
                self.k,
                record.l_sources.len().max(record.probs.len()),
            ));
        }
        if let Some(last) = self.last_step() {
            if record.step <= last {
                return Err(Error::InvalidArgument(format!(
                    "metric step {} does not follow {last}",
                    record.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "phase", "mode", "dataset_ids", "L_original"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=self.k).map(|j| format!("L_s{j}")));
        h.extend((1..=self.k).map(|j| format!("P_{j}")));
        h.extend(["query_loss", "dev_acc", "seed"].iter().map(|s| s.to_string()));
        h
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# format_version: {METRICS_FORMAT_VERSION}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.phase.clone(),
                r.mode.clone(),
                r.dataset_ids
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                opt_cell(r.l_original),
            ];
            row.extend(r.l_sources.iter().map(|&v| opt_cell(v)));
            row.extend(r.probs.iter().map(|&v| opt_cell(v)));
            row.push(opt_cell(r.query_loss));
            row.push(opt_cell(r.dev_acc));
            row.push(r.seed.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut input = input;
        let mut first = String::new();
        input.read_line(&mut first)?;
        let version = first
            .trim()
            .strip_prefix("# format_version:")
            .map(str::trim)
            .ok_or_else(|| Error::Corrupt {
                path: String::new(),
                reason: "missing format_version line".into(),
            })?;
        if version != METRICS_FORMAT_VERSION.to_string() {
            return Err(Error::VersionMismatch {
                expected: METRICS_FORMAT_VERSION,
                found: version.into(),
            });
        }
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let n = headers.len();
        if n < 8 || (n - 8) % 2 != 0 {
            return Err(Error::Corrupt {
                path: String::new(),
                reason: format!("unexpected column count {n}"),
            });
        }
        let k = (n - 8) / 2;
        let mut log = MetricsLog::new(k);
        if headers.iter().collect::<Vec<_>>() != log.header() {
            return Err(Error::Corrupt {
                path: String::new(),
                reason: "unexpected header".into(),
            });
        }
        let corrupt = |reason: String| Error::Corrupt {
            path: String::new(),
            reason,
        };
        for row in rdr.records() {
            let row = row?;
            let step = row[0]
                .parse()
                .map_err(|e| corrupt(format!("column step: {e}")))?;
            let ids = if row[3].is_empty() {
                Vec::new()
            } else {
                row[3]
                    .split(';')
                    .map(|s| s.parse().map_err(|e| corrupt(format!("column dataset_ids: {e}"))))
                    .collect::<Result<Vec<usize>>>()?
            };
            let mut rec = MetricRecord::new(step, &row[1], &row[2], k, 0);
            rec.dataset_ids = ids;
            rec.l_original = parse_opt(&row[4], "L_original")?;
            for j in 0..k {
                rec.l_sources[j] = parse_opt(&row[5 + j], "L_s")?;
                rec.probs[j] = parse_opt(&row[5 + k + j], "P")?;
            }
            rec.query_loss = parse_opt(&row[5 + 2 * k], "query_loss")?;
            rec.dev_acc = parse_opt(&row[6 + 2 * k], "dev_acc")?;
            rec.seed = row[7 + 2 * k]
                .parse()
                .map_err(|e| corrupt(format!("column seed: {e}")))?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}
