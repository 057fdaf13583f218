//! Task decomposition over time windows, persistence-based support labels,
//! episode sampling and reference-task relevance ranking.

mod episode;
mod mi;

pub use episode::{sample_episode, Episode, EpisodeConfig, Example};
pub use mi::{mutual_information, rank_reference_tasks_mi};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeUnit {
    #[serde(rename = "h")]
    Hours,
    #[serde(rename = "d")]
    Days,
}

impl TimeUnit {
    pub fn hours(self) -> f64 {
        match self {
            TimeUnit::Hours => 1.0,
            TimeUnit::Days => 24.0,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            TimeUnit::Hours => "h",
            TimeUnit::Days => "d",
        }
    }
}

/// Ascending boundaries `[b0, ..., bJ]` defining `J` half-open windows
/// `[b_{j-1}, b_j)`. Stored in hours; `unit` only affects display.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeWindows {
    boundaries: Vec<f64>,
    unit: TimeUnit,
}

impl TimeWindows {
    /// Builds windows from boundaries expressed in `unit`.
    pub fn new(boundaries: &[f64], unit: TimeUnit) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::Config(
                "time windows need at least two boundaries".into(),
            ));
        }
        if boundaries.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config(format!(
                "window boundaries must be finite and non-negative: {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "window boundaries must be strictly ascending: {boundaries:?}"
            )));
        }
        Ok(Self {
            boundaries: boundaries.iter().map(|b| b * unit.hours()).collect(),
            unit,
        })
    }

    /// `J` windows of equal `width` (in `unit`) starting at the current
    /// first boundary.
    pub fn with_width(&self, width: f64) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::Config(format!("window width must be positive, got {width}")));
        }
        let start = self.boundaries[0] / self.unit.hours();
        let b: Vec<f64> = (0..=self.n_windows())
            .map(|k| start + k as f64 * width)
            .collect();
        Self::new(&b, self.unit)
    }

    pub fn n_windows(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn unit(&self) -> TimeUnit {
        self.unit
    }

    /// Boundaries in hours.
    pub fn boundaries_hours(&self) -> &[f64] {
        &self.boundaries
    }

    /// `(lo, hi)` of window `j` in hours.
    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.boundaries[j], self.boundaries[j + 1])
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.boundaries[0], *self.boundaries.last().expect("non-empty"))
    }

    pub fn label(&self, j: usize) -> String {
        let (lo, hi) = self.bounds(j);
        let u = self.unit.hours();
        format!("{}-{}{}", lo / u, hi / u, self.unit.suffix())
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_windows()).map(|j| self.label(j)).collect()
    }

    pub fn find(&self, label: &str) -> Result<usize> {
        let labels = self.labels();
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownWindow {
                label: label.to_string(),
                valid: labels,
            })
    }
}

impl fmt::Display for TimeWindows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let u = self.unit.hours();
        let parts: Vec<String> = self.boundaries.iter().map(|b| format!("{}", b / u)).collect();
        write!(f, "{}{}", parts.join(","), self.unit.suffix())
    }
}

impl FromStr for TimeWindows {
    type Err = Error;

    /// Parses `"0,6,12,24h"` or `"0,7,19,31,91d"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, unit) = if let Some(b) = s.strip_suffix('h') {
            (b, TimeUnit::Hours)
        } else if let Some(b) = s.strip_suffix('d') {
            (b, TimeUnit::Days)
        } else {
            return Err(Error::Config(format!(
                "window list {s:?} needs a unit suffix h or d"
            )));
        };
        let values = body
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad window boundary {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&values, unit)
    }
}

/// One meta-learning task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskSpec {
    /// Does the target event start in window `j`?
    TimeAssociated(usize),
    /// Reference outcome `i`.
    Reference(usize),
}

impl TaskSpec {
    pub fn is_time_associated(&self) -> bool {
        matches!(self, TaskSpec::TimeAssociated(_))
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::TimeAssociated(j) => write!(f, "window[{j}]"),
            TaskSpec::Reference(i) => write!(f, "reference[{i}]"),
        }
    }
}

/// One window task per window followed by `n_ref` reference tasks.
pub fn decompose(windows: &TimeWindows, n_ref: usize) -> Vec<TaskSpec> {
    (0..windows.n_windows())
        .map(TaskSpec::TimeAssociated)
        .chain((0..n_ref).map(TaskSpec::Reference))
        .collect()
}

/// Relation between a patient's event interval and a target window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Situation {
    /// The event starts inside the window.
    S1,
    /// The event started earlier and persists into the window.
    S2,
    /// No event during the observation period.
    S3,
    /// The event interval lies entirely before or after the window.
    S4,
}

/// Outcome of placing a record against a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowStatus {
    Known(Situation),
    /// Observation ended before the window closed without an event, so the
    /// record carries no label for this window.
    Censored,
}

impl WindowStatus {
    pub fn situation(self) -> Option<Situation> {
        match self {
            WindowStatus::Known(s) => Some(s),
            WindowStatus::Censored => None,
        }
    }
}

pub fn classify_situation(
    record: &PatientRecord,
    windows: &TimeWindows,
    j: usize,
    pseudo_duration: f64,
) -> WindowStatus {
    let (lo, hi) = windows.bounds(j);
    let ev = &record.event;
    match ev.start {
        None if ev.observed_until < hi => WindowStatus::Censored,
        None => WindowStatus::Known(Situation::S3),
        Some(s) if s >= lo && s < hi => WindowStatus::Known(Situation::S1),
        Some(s) if s < lo && s + ev.effective_duration(pseudo_duration) > lo => {
            WindowStatus::Known(Situation::S2)
        }
        Some(_) => WindowStatus::Known(Situation::S4),
    }
}

/// Support-set label for a situation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissLabel {
    pub y: bool,
    pub weight: f64,
}

/// Real situations (S1, S3) get weight `rho`, auxiliary ones (S2, S4)
/// weight 1. S2 is relabeled positive.
pub fn tiss_label(situation: Situation, rho: f64) -> TissLabel {
    let (y, weight) = match situation {
        Situation::S1 => (true, rho),
        Situation::S2 => (true, 1.0),
        Situation::S3 => (false, rho),
        Situation::S4 => (false, 1.0),
    };
    TissLabel { y, weight }
}

/// Plain occurrence label: does the event start in window `j`? `None` when
/// censored.
pub fn original_label(record: &PatientRecord, windows: &TimeWindows, j: usize) -> Option<bool> {
    // the pseudo-duration cannot change whether the start is inside the window
    classify_situation(record, windows, j, 0.0)
        .situation()
        .map(|s| s == Situation::S1)
}
