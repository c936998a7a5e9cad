use super::{VisitPair, VisitRecord};

/// Pairs every visit with the same patient's next visit. Input must be
/// grouped by patient and time-sorted within each patient, as produced by
/// ingestion; a patient with `v` visits yields `v - 1` pairs.
pub fn build_visit_pairs(records: &[VisitRecord]) -> Vec<VisitPair> {
    let mut pairs = Vec::new();
    let mut index_in_patient = 0;
    for i in 0..records.len() {
        if i > 0 && records[i - 1].patient_id == records[i].patient_id {
            index_in_patient += 1;
        } else {
            index_in_patient = 0;
        }
        let Some(next) = records.get(i + 1) else { break };
        let cur = &records[i];
        if cur.patient_id == next.patient_id {
            debug_assert!(cur.visit_time < next.visit_time, "records not time-sorted");
            pairs.push(VisitPair {
                source: cur.clone(),
                visit_index: index_in_patient,
                next_time: next.visit_time,
                next_diagnoses: next.diagnoses.clone(),
            });
        }
    }
    pairs
}
