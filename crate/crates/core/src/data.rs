//! Subject-level records, validation, and per-stratum risk-set indexes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One validated subject record. `cause` 0 means censored; 1..=m are the
/// competing failure types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    /// 0-based internal stratum index.
    pub stratum: usize,
    /// Observed time (min of failure and censoring times), >= 0.
    pub time: f64,
    pub cause: usize,
    /// Effect-modifying covariate.
    pub modifier: f64,
    /// Covariates with bivariate varying coefficients.
    pub z: Vec<f64>,
    /// Covariates with invariant coefficients.
    pub w: Vec<f64>,
}

/// Column mapping for CSV ingestion. `stratum` may be `None` for
/// single-stratum data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub stratum_col: Option<String>,
    pub time_col: String,
    pub cause_col: String,
    pub modifier_col: String,
    pub z_cols: Vec<String>,
    pub w_cols: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            stratum_col: Some("stratum".into()),
            time_col: "time".into(),
            cause_col: "cause".into(),
            modifier_col: "modifier".into(),
            z_cols: Vec::new(),
            w_cols: Vec::new(),
        }
    }
}

/// Immutable validated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    stratum_labels: Vec<String>,
    /// Largest cause code m (0 when everything is censored).
    n_causes: usize,
    p: usize,
    q: usize,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
    /// Censored records at time zero removed during validation.
    pub dropped_zero_time: usize,
}

impl Dataset {
    /// Validates raw records with stratum labels and builds the dataset.
    /// Strata are indexed by first appearance. Censored records at exactly
    /// time 0 are dropped (they belong to no risk set).
    pub fn from_labeled_records(
        rows: Vec<(String, f64, usize, f64, Vec<f64>, Vec<f64>)>,
        z_names: Vec<String>,
        w_names: Vec<String>,
    ) -> Result<Self> {
        let p = z_names.len();
        let q = w_names.len();
        let mut labels: Vec<String> = Vec::new();
        let mut label_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut records = Vec::with_capacity(rows.len());
        let mut n_causes = 0usize;
        let mut dropped = 0usize;
        for (row_no, (label, time, cause, modifier, z, w)) in rows.into_iter().enumerate() {
            let row = row_no + 1;
            if !time.is_finite() || time < 0.0 {
                return Err(Error::NegativeTime { row, value: time });
            }
            if !modifier.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: "modifier".into(),
                    value: modifier.to_string(),
                });
            }
            if z.len() != p {
                return Err(Error::DimensionMismatch {
                    what: "record z length",
                    expected: p,
                    got: z.len(),
                });
            }
            if w.len() != q {
                return Err(Error::DimensionMismatch {
                    what: "record w length",
                    expected: q,
                    got: w.len(),
                });
            }
            if time == 0.0 && cause == 0 {
                dropped += 1;
                continue;
            }
            n_causes = n_causes.max(cause);
            let stratum = match label_index.get(&label) {
                Some(&i) => i,
                None => {
                    let i = labels.len();
                    labels.push(label.clone());
                    label_index.insert(label, i);
                    i
                }
            };
            records.push(SubjectRecord {
                stratum,
                time,
                cause,
                modifier,
                z,
                w,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            records,
            stratum_labels: labels,
            n_causes,
            p,
            q,
            z_names,
            w_names,
            dropped_zero_time: dropped,
        })
    }

    /// Reads a dataset from a CSV file. A header row is required; lines
    /// starting with `#` are treated as comments. Missing values are a hard
    /// error.
    pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.into()))
        };
        let stratum_idx = match &schema.stratum_col {
            Some(name) => Some(col(name)?),
            None => None,
        };
        let time_idx = col(&schema.time_col)?;
        let cause_idx = col(&schema.cause_col)?;
        let modifier_idx = col(&schema.modifier_col)?;
        let z_idx: Vec<usize> = schema
            .z_cols
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;
        let w_idx: Vec<usize> = schema
            .w_cols
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let row = row_no + 1;
            let record = record?;
            let field = |idx: usize, column: &str| -> Result<&str> {
                let v = record.get(idx).unwrap_or("");
                if v.is_empty() {
                    Err(Error::MissingField {
                        row,
                        column: column.into(),
                    })
                } else {
                    Ok(v)
                }
            };
            let parse_f64 = |idx: usize, column: &str| -> Result<f64> {
                let v = field(idx, column)?;
                v.parse::<f64>().map_err(|_| Error::NonNumeric {
                    row,
                    column: column.into(),
                    value: v.into(),
                })
            };
            let label = match stratum_idx {
                Some(i) => field(i, schema.stratum_col.as_deref().unwrap())?.to_string(),
                None => "1".to_string(),
            };
            let time = parse_f64(time_idx, &schema.time_col)?;
            if !time.is_finite() || time < 0.0 {
                return Err(Error::NegativeTime { row, value: time });
            }
            let cause_raw = field(cause_idx, &schema.cause_col)?;
            let cause: usize = cause_raw.parse().map_err(|_| Error::InvalidCause {
                row,
                value: cause_raw.into(),
            })?;
            let modifier = parse_f64(modifier_idx, &schema.modifier_col)?;
            let z = z_idx
                .iter()
                .zip(&schema.z_cols)
                .map(|(&i, c)| parse_f64(i, c))
                .collect::<Result<Vec<f64>>>()?;
            let w = w_idx
                .iter()
                .zip(&schema.w_cols)
                .map(|(&i, c)| parse_f64(i, c))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((label, time, cause, modifier, z, w));
        }
        Self::from_labeled_records(rows, schema.z_cols.clone(), schema.w_cols.clone())
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn strata_count(&self) -> usize {
        self.stratum_labels.len()
    }

    pub fn stratum_labels(&self) -> &[String] {
        &self.stratum_labels
    }

    /// Largest cause code m.
    pub fn n_causes(&self) -> usize {
        self.n_causes
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Event counts indexed by cause (entry 0 counts censored records).
    pub fn counts_per_cause(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_causes + 1];
        for r in &self.records {
            counts[r.cause] += 1;
        }
        counts
    }

    /// Distinct observed failure times (any cause), for knot placement.
    pub fn distinct_failure_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.cause > 0)
            .map(|r| r.time)
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        times
    }

    pub fn modifier_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.modifier).collect()
    }

    /// Subset of records selected by `keep`, preserving stratum labels and
    /// covariate dimensions. Used by cross-validation folds.
    pub fn subset(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                what: "subset mask",
                expected: self.records.len(),
                got: keep.len(),
            });
        }
        let records: Vec<SubjectRecord> = self
            .records
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect();
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            records,
            stratum_labels: self.stratum_labels.clone(),
            n_causes: self.n_causes,
            p: self.p,
            q: self.q,
            z_names: self.z_names.clone(),
            w_names: self.w_names.clone(),
            dropped_zero_time: 0,
        })
    }
}

/// One distinct failure time of one cause within a stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureTime {
    pub time: f64,
    /// Positions (into `StratumIndex::subjects_desc`) of the records failing
    /// here from this cause.
    pub event_positions: Vec<usize>,
    /// Length of the risk-set prefix of `subjects_desc`: all records with
    /// observed time >= `time` (non-strict, so same-time censorings stay in).
    pub risk_len: usize,
}

/// Risk-set index for one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumIndex {
    /// Record indices sorted by observed time descending (ties by record
    /// index, for determinism).
    pub subjects_desc: Vec<usize>,
    /// Per cause (index 0 <-> cause 1): distinct failure times ascending.
    pub by_cause: Vec<Vec<FailureTime>>,
}

/// Risk-set index for the whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskIndex {
    pub strata: Vec<StratumIndex>,
}

impl RiskIndex {
    pub fn failure_times(&self, stratum: usize, cause: usize) -> &[FailureTime] {
        &self.strata[stratum].by_cause[cause - 1]
    }
}

/// Builds the per-stratum, per-cause risk-set index.
pub fn build_risk_index(ds: &Dataset) -> RiskIndex {
    let n_strata = ds.strata_count();
    let m = ds.n_causes();
    let mut strata = Vec::with_capacity(n_strata);
    for g in 0..n_strata {
        let mut subjects: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].stratum == g).collect();
        subjects.sort_by(|&a, &b| {
            let ta = ds.records()[a].time;
            let tb = ds.records()[b].time;
            tb.partial_cmp(&ta).unwrap().then(a.cmp(&b))
        });
        let mut by_cause = Vec::with_capacity(m);
        for cause in 1..=m {
            // Distinct failure times ascending with their event positions.
            let mut events: Vec<(f64, usize)> = subjects
                .iter()
                .enumerate()
                .filter(|(_, &rec)| ds.records()[rec].cause == cause)
                .map(|(pos, &rec)| (ds.records()[rec].time, pos))
                .collect();
            events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut failure_times: Vec<FailureTime> = Vec::new();
            for (time, pos) in events {
                match failure_times.last_mut() {
                    Some(ft) if ft.time == time => ft.event_positions.push(pos),
                    _ => failure_times.push(FailureTime {
                        time,
                        event_positions: vec![pos],
                        risk_len: 0,
                    }),
                }
            }
            // Risk sets are prefixes of the descending-time ordering.
            for ft in &mut failure_times {
                let mut lo = 0usize;
                let mut hi = subjects.len();
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    if ds.records()[subjects[mid]].time >= ft.time {
                        lo = mid + 1;
                    } else {
                        hi = mid;
                    }
                }
                ft.risk_len = lo;
            }
            by_cause.push(failure_times);
        }
        strata.push(StratumIndex {
            subjects_desc: subjects,
            by_cause,
        });
    }
    RiskIndex { strata }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        label: &str,
        time: f64,
        cause: usize,
        modifier: f64,
        z: f64,
    ) -> (String, f64, usize, f64, Vec<f64>, Vec<f64>) {
        (label.into(), time, cause, modifier, vec![z], vec![])
    }

    #[test]
    fn counts_and_strata() {
        let ds = Dataset::from_labeled_records(
            vec![
                row("A", 1.0, 1, 0.0, 1.0),
                row("B", 2.0, 1, 0.0, 0.0),
                row("A", 3.0, 0, 0.0, -1.0),
            ],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.strata_count(), 2);
        assert_eq!(ds.stratum_labels(), &["A".to_string(), "B".to_string()]);
        assert_eq!(ds.counts_per_cause(), vec![1, 2]);
    }

    #[test]
    fn zero_time_censored_dropped() {
        let ds = Dataset::from_labeled_records(
            vec![row("A", 0.0, 0, 0.0, 1.0), row("A", 1.0, 1, 0.0, 1.0)],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dropped_zero_time, 1);
    }

    #[test]
    fn negative_time_rejected() {
        let err = Dataset::from_labeled_records(
            vec![row("A", 1.0, 1, 0.0, 1.0), row("A", -1.0, 0, 0.0, 1.0)],
            vec!["z".into()],
            vec![],
        )
        .unwrap_err();
        match err {
            Error::NegativeTime { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn risk_sets_shrink_with_time() {
        let ds = Dataset::from_labeled_records(
            vec![
                row("A", 1.0, 1, 0.0, 1.0),
                row("A", 2.0, 1, 0.0, 0.0),
                row("A", 3.0, 1, 0.0, -1.0),
            ],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        let idx = build_risk_index(&ds);
        let fts = idx.failure_times(0, 1);
        assert_eq!(fts.len(), 3);
        assert_eq!(
            fts.iter().map(|f| f.time).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            fts.iter().map(|f| f.risk_len).collect::<Vec<_>>(),
            vec![3, 2, 1]
        );
    }

    #[test]
    fn tied_events_share_one_failure_time() {
        let ds = Dataset::from_labeled_records(
            vec![
                row("A", 2.0, 1, 0.0, 1.0),
                row("A", 2.0, 1, 0.0, 0.0),
                row("A", 5.0, 0, 0.0, -1.0),
            ],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        let idx = build_risk_index(&ds);
        let fts = idx.failure_times(0, 1);
        assert_eq!(fts.len(), 1);
        assert_eq!(fts[0].event_positions.len(), 2);
        assert_eq!(fts[0].risk_len, 3);
    }

    #[test]
    fn censoring_tied_with_event_stays_at_risk() {
        let ds = Dataset::from_labeled_records(
            vec![row("A", 2.0, 1, 0.0, 1.0), row("A", 2.0, 0, 0.0, 0.0)],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        let idx = build_risk_index(&ds);
        let fts = idx.failure_times(0, 1);
        assert_eq!(fts[0].risk_len, 2);
    }

    #[test]
    fn csv_roundtrip_preserves_index() {
        use std::io::Write;
        let dir = std::env::temp_dir().join("coxsurf-test-data");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment line").unwrap();
        writeln!(f, "stratum,time,cause,modifier,z1,w1").unwrap();
        writeln!(f, "A,1.5,1,10.0,0.3,1.0").unwrap();
        writeln!(f, "A,2.0,0,20.0,-0.3,0.0").unwrap();
        writeln!(f, "B,0.7,2,30.0,1.1,0.5").unwrap();
        drop(f);
        let schema = CsvSchema {
            z_cols: vec!["z1".into()],
            w_cols: vec!["w1".into()],
            ..CsvSchema::default()
        };
        let ds = Dataset::ingest_csv(&path, &schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_causes(), 2);
        let idx1 = build_risk_index(&ds);

        // Re-export and re-ingest: identical index.
        let path2 = dir.join("roundtrip2.csv");
        let mut f = std::fs::File::create(&path2).unwrap();
        writeln!(f, "stratum,time,cause,modifier,z1,w1").unwrap();
        for r in ds.records() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                ds.stratum_labels()[r.stratum],
                r.time,
                r.cause,
                r.modifier,
                r.z[0],
                r.w[0]
            )
            .unwrap();
        }
        drop(f);
        let ds2 = Dataset::ingest_csv(&path2, &schema).unwrap();
        let idx2 = build_risk_index(&ds2);
        assert_eq!(idx1, idx2);
    }

    #[test]
    fn csv_errors_cite_row() {
        use std::io::Write;
        let dir = std::env::temp_dir().join("coxsurf-test-data");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "stratum,time,cause,modifier,z1").unwrap();
        writeln!(f, "A,1.0,1,0.0,0.5").unwrap();
        writeln!(f, "A,-1.0,0,0.0,0.5").unwrap();
        drop(f);
        let schema = CsvSchema {
            z_cols: vec!["z1".into()],
            ..CsvSchema::default()
        };
        match Dataset::ingest_csv(&path, &schema).unwrap_err() {
            Error::NegativeTime { row, value } => {
                assert_eq!(row, 2);
                assert_eq!(value, -1.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn stratum_sizes_sum_to_n() {
        let ds = Dataset::from_labeled_records(
            vec![
                row("A", 1.0, 1, 0.0, 1.0),
                row("B", 2.0, 0, 0.0, 0.0),
                row("C", 3.0, 1, 0.0, -1.0),
                row("B", 4.0, 1, 0.0, 0.4),
            ],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        let idx = build_risk_index(&ds);
        let total: usize = idx.strata.iter().map(|s| s.subjects_desc.len()).sum();
        assert_eq!(total, ds.len());
    }
}
