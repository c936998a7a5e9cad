use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use super::{EhrError, Result, VisitRecord};

/// Required header of the visit table, in canonical output order.
pub const VISIT_COLUMNS: [&str; 5] = [
    "patient_id",
    "visit_time",
    "diagnosis_codes",
    "medication_codes",
    "procedure_codes",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestOptions {
    /// Skip rows that fail to parse instead of aborting.
    pub lenient: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowIssue {
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    /// Grouped by patient id, then sorted by visit time.
    pub records: Vec<VisitRecord>,
    pub malformed: Vec<RowIssue>,
}

fn split_codes(cell: &str) -> BTreeSet<String> {
    cell.split('|')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

fn join_codes(codes: &BTreeSet<String>) -> String {
    codes.iter().map(String::as_str).collect::<Vec<_>>().join("|")
}

pub fn ingest_records(path: &Path, options: IngestOptions) -> Result<IngestReport> {
    read_records(std::fs::File::open(path)?, options)
}

/// Reads the comma-delimited visit table. Column order is free; extra
/// columns are ignored.
pub fn read_records<R: Read>(reader: R, options: IngestOptions) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 5];
    for (slot, col) in idx.iter_mut().zip(VISIT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| EhrError::Schema {
                column: col.to_string(),
            })?;
    }

    let mut report = IngestReport::default();
    let mut by_patient: BTreeMap<String, BTreeMap<i64, VisitRecord>> = BTreeMap::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if options.lenient {
                    report.malformed.push(RowIssue {
                        line,
                        reason: e.to_string(),
                    });
                    continue;
                }
                return Err(e.into());
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let patient_id = row[idx[0]].trim().to_string();
        let time_cell = row[idx[1]].trim();
        let visit_time = match time_cell.parse::<i64>() {
            Ok(t) if !patient_id.is_empty() => t,
            Ok(_) => {
                let issue = RowIssue {
                    line,
                    reason: "empty patient_id".into(),
                };
                if options.lenient {
                    report.malformed.push(issue);
                    continue;
                }
                return Err(EhrError::Row {
                    line,
                    reason: issue.reason,
                });
            }
            Err(_) => {
                let reason = format!("unparseable visit_time `{time_cell}`");
                if options.lenient {
                    report.malformed.push(RowIssue { line, reason });
                    continue;
                }
                return Err(EhrError::Row { line, reason });
            }
        };
        let record = VisitRecord {
            patient_id: patient_id.clone(),
            visit_time,
            diagnoses: split_codes(&row[idx[2]]),
            medications: split_codes(&row[idx[3]]),
            procedures: split_codes(&row[idx[4]]),
        };
        let visits = by_patient.entry(patient_id.clone()).or_default();
        if visits.insert(visit_time, record).is_some() {
            return Err(EhrError::DuplicateVisit { patient_id, visit_time });
        }
    }
    report.records = by_patient.into_values().flat_map(BTreeMap::into_values).collect();
    Ok(report)
}

/// Writes records in the same schema [`read_records`] accepts.
pub fn write_records<W: Write>(writer: W, records: &[VisitRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(VISIT_COLUMNS)?;
    for r in records {
        w.write_record([
            r.patient_id.as_str(),
            &r.visit_time.to_string(),
            &join_codes(&r.diagnoses),
            &join_codes(&r.medications),
            &join_codes(&r.procedures),
        ])?;
    }
    w.flush()?;
    Ok(())
}
