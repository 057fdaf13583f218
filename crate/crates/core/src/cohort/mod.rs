//! Patient records, the synthetic cohort generator, CSV ingestion and
//! patient-level splitting.

mod csv_io;
mod split;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv, MISSING_SUFFIX, REF_PREFIX};
pub use split::{kfold, split};
pub use synth::{generate_synthetic, SynthSpec};

use std::collections::HashSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Event timing for the target outcome, in hours.
///
/// `start == None` means the event was not seen before `observed_until`.
/// `duration == None` means the event has no recorded resolution, so the
/// configured pseudo-duration applies.
#[derive(Clone, Debug, PartialEq)]
pub struct EventInterval {
    pub start: Option<f64>,
    pub duration: Option<f64>,
    pub observed_until: f64,
}

impl EventInterval {
    pub fn none(observed_until: f64) -> Self {
        Self {
            start: None,
            duration: None,
            observed_until,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.observed_until >= 0.0) || !self.observed_until.is_finite() {
            return Err(format!(
                "observed_until must be non-negative, got {}",
                self.observed_until
            ));
        }
        if let Some(s) = self.start {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(format!("event start must be non-negative, got {s}"));
            }
        }
        if let Some(d) = self.duration {
            if self.start.is_none() {
                return Err("event duration given without an event start".into());
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(format!("event duration must be positive, got {d}"));
            }
        }
        Ok(())
    }

    /// Duration to use for persistence, falling back to `pseudo_duration`.
    pub fn effective_duration(&self, pseudo_duration: f64) -> f64 {
        self.duration.unwrap_or(pseudo_duration)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub event: EventInterval,
    pub ref_labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    records: Vec<PatientRecord>,
    feature_names: Vec<String>,
    ref_task_names: Vec<String>,
    ground_truth: Option<SynthSpec>,
}

impl Cohort {
    pub fn new(
        records: Vec<PatientRecord>,
        feature_names: Vec<String>,
        ref_task_names: Vec<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.features.len() != feature_names.len() {
                return Err(Error::Dimension {
                    what: "feature vector length",
                    expected: feature_names.len(),
                    found: r.features.len(),
                });
            }
            if r.ref_labels.len() != ref_task_names.len() {
                return Err(Error::Dimension {
                    what: "reference label count",
                    expected: ref_task_names.len(),
                    found: r.ref_labels.len(),
                });
            }
            r.event
                .validate()
                .map_err(|m| Error::Config(format!("patient {}: {m}", r.id)))?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            feature_names,
            ref_task_names,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, spec: SynthSpec) -> Self {
        self.ground_truth = Some(spec);
        self
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn ref_task_names(&self) -> &[String] {
        &self.ref_task_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_ref(&self) -> usize {
        self.ref_task_names.len()
    }

    pub fn ground_truth(&self) -> Option<&SynthSpec> {
        self.ground_truth.as_ref()
    }

    /// Records at the given positions, keeping names and ground truth.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            ref_task_names: self.ref_task_names.clone(),
            ground_truth: self.ground_truth.clone(),
        }
    }

    /// `[indices.len(), n_features]` matrix of the selected records.
    pub fn feature_matrix(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.n_features());
        for &i in indices {
            data.extend_from_slice(&self.records[i].features);
        }
        Tensor::new(vec![indices.len(), self.n_features()], data)
            .expect("cohort rows share a feature length")
    }

    /// Fraction of records with an observed event.
    pub fn event_prevalence(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let n = self.records.iter().filter(|r| r.event.start.is_some()).count();
        n as f64 / self.records.len() as f64
    }
}
