use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation of one model on one window under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub window: String,
    pub auroc: f64,
    pub recall: f64,
    pub n_test: usize,
    pub n_positive: usize,
    pub seed: u64,
}

impl MetricRow {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.auroc) || !unit(self.recall) || self.n_positive > self.n_test {
            return Err(Error::Config(format!("invalid metric row {self:?}")));
        }
        Ok(())
    }
}

/// Ordered collection of metric rows. Model and window order follow first
/// appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        for r in &rows {
            r.validate()?;
        }
        Ok(Self { rows })
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    fn ordered<'a>(&'a self, key: impl Fn(&'a MetricRow) -> &'a str) -> Vec<&'a str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            let k = key(r);
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub fn models(&self) -> Vec<&str> {
        self.ordered(|r| &r.model)
    }

    pub fn windows(&self) -> Vec<&str> {
        self.ordered(|r| &r.window)
    }

    /// Seed-averaged `(auroc, recall)` of a model on a window.
    pub fn mean(&self, model: &str, window: &str) -> Option<(f64, f64)> {
        let hits: Vec<&MetricRow> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.window == window)
            .collect();
        if hits.is_empty() {
            return None;
        }
        let n = hits.len() as f64;
        Some((
            hits.iter().map(|r| r.auroc).sum::<f64>() / n,
            hits.iter().map(|r| r.recall).sum::<f64>() / n,
        ))
    }

    pub fn mean_auroc(&self, model: &str, window: &str) -> Option<f64> {
        self.mean(model, window).map(|m| m.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let rows = reader.deserialize().collect::<Result<Vec<MetricRow>, _>>()?;
        Self::new(rows)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Plain-text table: one line per model, AUROC and recall per window,
    /// averaged over seeds.
    pub fn table(&self) -> String {
        let models = self.models();
        let windows = self.windows();
        let name_width = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let cell = windows.iter().map(|w| w.len()).max().unwrap_or(0).max(15);
        let mut out = String::new();
        let _ = write!(out, "{:<name_width$}", "model");
        for w in &windows {
            let _ = write!(out, "  {w:>cell$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<name_width$}", "");
        for _ in &windows {
            let _ = write!(out, "  {:>cell$}", "AUROC   Recall");
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{m:<name_width$}");
            for w in &windows {
                let text = match self.mean(m, w) {
                    Some((a, r)) => format!("{a:.4}   {r:.4}"),
                    None => "-".to_string(),
                };
                let _ = write!(out, "  {text:>cell$}");
            }
            out.push('\n');
        }
        out
    }

    /// Seed-averaged AUROC keyed by `(model, window)`.
    pub fn summary(&self) -> BTreeMap<(String, String), f64> {
        let mut out = BTreeMap::new();
        for m in self.models() {
            for w in self.windows() {
                if let Some(a) = self.mean_auroc(m, w) {
                    out.insert((m.to_string(), w.to_string()), a);
                }
            }
        }
        out
    }
}
