//! Cohort CSV schema.
//!
//! Columns `id`, `event_start`, `event_duration`, `observed_until`, then any
//! number of `ref:<name>` 0/1 columns; every other column is a numeric
//! feature, kept in file order. Empty `event_start` means no event, empty
//! `event_duration` means the pseudo-duration applies. Empty feature cells
//! are imputed with the column mean and flagged in an appended
//! `<name>_missing` indicator column.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use super::{Cohort, EventInterval, PatientRecord};
use crate::error::{Error, Result};

pub const REF_PREFIX: &str = "ref:";
pub const MISSING_SUFFIX: &str = "_missing";

const REQUIRED: [&str; 4] = ["id", "event_start", "event_duration", "observed_until"];

pub fn write_csv<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = REQUIRED.iter().map(|s| s.to_string()).collect();
    header.extend(cohort.ref_task_names().iter().map(|n| format!("{REF_PREFIX}{n}")));
    header.extend(cohort.feature_names().iter().cloned());
    w.write_record(&header)?;

    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in cohort.records() {
        let mut row = vec![
            r.id.clone(),
            opt(r.event.start),
            opt(r.event.duration),
            format!("{:?}", r.event.observed_until),
        ];
        row.extend(r.ref_labels.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        row.extend(r.features.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Cohort> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file))
}

enum Column {
    Id,
    Start,
    Duration,
    ObservedUntil,
    Ref(usize),
    Feature(usize),
}

pub fn read_csv<R: Read>(input: R) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();

    let mut columns = Vec::with_capacity(header.len());
    let mut ref_names = Vec::new();
    let mut feature_names = Vec::new();
    let mut seen = HashSet::new();
    for name in header.iter() {
        if !seen.insert(name.to_string()) {
            return Err(Error::Csv {
                row: 1,
                column: name.to_string(),
                message: "duplicate column".into(),
            });
        }
        columns.push(match name {
            "id" => Column::Id,
            "event_start" => Column::Start,
            "event_duration" => Column::Duration,
            "observed_until" => Column::ObservedUntil,
            n if n.starts_with(REF_PREFIX) => {
                ref_names.push(n[REF_PREFIX.len()..].to_string());
                Column::Ref(ref_names.len() - 1)
            }
            n => {
                feature_names.push(n.to_string());
                Column::Feature(feature_names.len() - 1)
            }
        });
    }
    for required in REQUIRED {
        if !seen.contains(required) {
            return Err(Error::Csv {
                row: 1,
                column: required.to_string(),
                message: "required column missing".into(),
            });
        }
    }

    struct Partial {
        id: String,
        event: EventInterval,
        refs: Vec<bool>,
        features: Vec<Option<f64>>,
    }

    let mut partials: Vec<Partial> = Vec::new();
    let mut ids = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let cell_err = |col: &str, message: String| Error::Csv {
            row,
            column: col.to_string(),
            message,
        };
        let number = |col: &str, s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| cell_err(col, format!("not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(cell_err(col, format!("not finite: {s:?}")));
            }
            Ok(v)
        };
        let optional = |col: &str, s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                number(col, s).map(Some)
            }
        };

        let mut p = Partial {
            id: String::new(),
            event: EventInterval::none(1.0),
            refs: vec![false; ref_names.len()],
            features: vec![None; feature_names.len()],
        };
        for ((col, name), cell) in columns.iter().zip(header.iter()).zip(rec.iter()) {
            match col {
                Column::Id => {
                    if cell.is_empty() {
                        return Err(cell_err(name, "empty id".into()));
                    }
                    p.id = cell.to_string();
                }
                Column::Start => p.event.start = optional(name, cell)?,
                Column::Duration => p.event.duration = optional(name, cell)?,
                Column::ObservedUntil => p.event.observed_until = number(name, cell)?,
                Column::Ref(k) => {
                    p.refs[*k] = match cell {
                        "1" => true,
                        "0" => false,
                        other => return Err(cell_err(name, format!("expected 0 or 1, got {other:?}"))),
                    }
                }
                Column::Feature(k) => p.features[*k] = optional(name, cell)?,
            }
        }
        p.event
            .validate()
            .map_err(|m| cell_err("event_start", m))?;
        if !ids.insert(p.id.clone()) {
            return Err(Error::DuplicateId(p.id));
        }
        partials.push(p);
    }

    // column means over observed cells; columns with no observed cell impute 0
    let n_feat = feature_names.len();
    let mut sums = vec![0.0; n_feat];
    let mut counts = vec![0usize; n_feat];
    for p in &partials {
        for (k, v) in p.features.iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let with_missing: Vec<usize> = (0..n_feat).filter(|&k| counts[k] < partials.len()).collect();

    let mut names = feature_names;
    let indicators: Vec<String> = with_missing
        .iter()
        .map(|&k| format!("{}{MISSING_SUFFIX}", names[k]))
        .collect();
    names.extend(indicators);

    let records = partials
        .into_iter()
        .map(|p| {
            let mut features: Vec<f64> = p
                .features
                .iter()
                .zip(&means)
                .map(|(v, m)| v.unwrap_or(*m))
                .collect();
            features.extend(
                with_missing
                    .iter()
                    .map(|&k| if p.features[k].is_none() { 1.0 } else { 0.0 }),
            );
            PatientRecord {
                id: p.id,
                features,
                event: p.event,
                ref_labels: p.refs,
            }
        })
        .collect();
    Cohort::new(records, names, ref_names)
}
