//! Experiment records, seed aggregation and the deterministic CSV schema.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const CSV_HEADER: &str = "method,task,seed,split,metric,step,value";
pub const CSV_COMMENT: &str = "# aggregates: seed=mean is the mean over seeds, seed=std the population standard deviation";

/// Every metric name that may appear in output.
pub const METRICS: &[&str] = &[
    "acc",
    "cat_acc",
    "best_acc",
    "best_step",
    "sup_loss",
    "total_loss",
    "mask_rate",
    "lr",
    "d_hdh",
    "lambda_h",
    "bound_gap",
    "proxy_a_distance",
    "failed",
];

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("metric `{0}` is not in the registry")]
    UnknownMetric(String),
    #[error("non-finite value for {0}")]
    NonFinite(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeedKey {
    Run(u64),
    Mean,
    Std,
}

impl fmt::Display for SeedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedKey::Run(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
            SeedKey::Std => f.write_str("std"),
        }
    }
}

impl FromStr for SeedKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(SeedKey::Mean),
            "std" => Ok(SeedKey::Std),
            _ => s.parse().map(SeedKey::Run).map_err(|_| format!("bad seed `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub method: String,
    pub task: String,
    pub seed: SeedKey,
    /// `transductive` or `inductive`.
    pub split: String,
    pub metric: String,
    pub step: usize,
    pub value: f64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        if !METRICS.contains(&self.metric.as_str()) {
            return Err(RecordError::UnknownMetric(self.metric.clone()));
        }
        if !self.value.is_finite() {
            return Err(RecordError::NonFinite(format!(
                "{}/{}/{}/{}",
                self.task, self.method, self.seed, self.metric
            )));
        }
        Ok(())
    }

    fn sort_key(&self) -> (&str, &str, SeedKey, &str, &str, usize) {
        (&self.task, &self.method, self.seed, &self.split, &self.metric, self.step)
    }
}

pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then(a.value.total_cmp(&b.value)));
}

/// Mean and population standard deviation per (task, method, split, metric,
/// step) over all run seeds.
pub fn aggregate(records: &[ExperimentRecord]) -> Vec<ExperimentRecord> {
    let mut groups: BTreeMap<(&str, &str, &str, &str, usize), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| matches!(r.seed, SeedKey::Run(_))) {
        groups
            .entry((&r.task, &r.method, &r.split, &r.metric, r.step))
            .or_default()
            .push(r.value);
    }
    let mut out = Vec::with_capacity(2 * groups.len());
    for ((task, method, split, metric, step), vals) in groups {
        let (mean, std) = mean_std(&vals);
        for (seed, value) in [(SeedKey::Mean, mean), (SeedKey::Std, std)] {
            out.push(ExperimentRecord {
                method: method.to_string(),
                task: task.to_string(),
                seed,
                split: split.to_string(),
                metric: metric.to_string(),
                step,
                value,
            });
        }
    }
    out
}

/// Population statistics: the variance divides by `n`.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `printf("%.6g")`.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{v:.decimals$}"))
    }
}

pub fn write_csv(records: &[ExperimentRecord], out: impl Write) -> Result<(), RecordError> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{CSV_COMMENT}")?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        r.validate()?;
        w.write_record([
            r.method.as_str(),
            &r.task,
            &r.seed.to_string(),
            &r.split,
            &r.metric,
            &r.step.to_string(),
            &format_g6(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sorts, then writes the records to `path` through a temporary sibling so a
/// failure never leaves a truncated file behind.
pub fn emit_csv(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<(), RecordError> {
    let path = path.as_ref();
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let tmp = path.with_extension("csv.tmp");
    write_csv(&sorted, std::fs::File::create(&tmp)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_csv_records(reader: impl std::io::Read) -> Result<Vec<ExperimentRecord>, RecordError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(RecordError::Parse {
            line: 1,
            reason: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| RecordError::Parse { line, reason };
        if row.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", row.len())));
        }
        let rec = ExperimentRecord {
            method: row[0].to_string(),
            task: row[1].to_string(),
            seed: row[2].parse().map_err(bad)?,
            split: row[3].to_string(),
            metric: row[4].to_string(),
            step: row[5].parse().map_err(|_| bad(format!("bad step `{}`", &row[5])))?,
            value: row[6].parse().map_err(|_| bad(format!("bad value `{}`", &row[6])))?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>, RecordError> {
    read_csv_records(std::fs::File::open(path)?)
}

/// Mean and std of `metric` at the last step, per (task, method), read from
/// aggregate records.
pub fn final_summary(records: &[ExperimentRecord], split: &str, metric: &str) -> BTreeMap<(String, String), (f64, f64)> {
    let mut last: BTreeMap<(String, String), (usize, f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split && r.metric == metric) {
        let key = (r.task.clone(), r.method.clone());
        let e = last.entry(key).or_insert((r.step, f64::NAN, f64::NAN));
        match r.step.cmp(&e.0) {
            Ordering::Greater => *e = (r.step, f64::NAN, f64::NAN),
            Ordering::Less => continue,
            Ordering::Equal => {}
        }
        match r.seed {
            SeedKey::Mean => e.1 = r.value,
            SeedKey::Std => e.2 = r.value,
            SeedKey::Run(_) => {}
        }
    }
    last.into_iter()
        .filter(|(_, v)| v.1.is_finite())
        .map(|(k, (_, m, s))| (k, (m, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: SeedKey, metric: &str, step: usize, value: f64) -> ExperimentRecord {
        ExperimentRecord {
            method: method.into(),
            task: "t".into(),
            seed,
            split: "inductive".into(),
            metric: metric.into(),
            step,
            value,
        }
    }

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.9, "0.9"),
            (0.0816496580927726, "0.0816497"),
            (1.0, "1"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (0.0, "0"),
            (100.0, "100"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g6(v), s, "{v}");
        }
    }

    #[test]
    fn population_std_example() {
        let recs: Vec<_> = [0.8, 0.9, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| rec("m", SeedKey::Run(i as u64), "acc", 10, v))
            .collect();
        let agg = aggregate(&recs);
        assert_eq!(agg.len(), 2);
        assert!((agg[0].value - 0.9).abs() < 1e-15);
        assert!((agg[1].value - (0.02f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(format_g6(agg[0].value), "0.9");
        assert_eq!(format_g6(agg[1].value), "0.0816497");
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_COMMENT}\n{CSV_HEADER}\n"));
    }

    #[test]
    fn sorting_is_numeric_on_seeds_and_steps() {
        let mut v = vec![
            rec("m", SeedKey::Std, "acc", 0, 0.0),
            rec("m", SeedKey::Run(10), "acc", 0, 0.0),
            rec("m", SeedKey::Run(2), "acc", 100, 0.0),
            rec("m", SeedKey::Run(2), "acc", 20, 0.0),
            rec("a", SeedKey::Mean, "acc", 0, 0.0),
        ];
        sort_records(&mut v);
        let keys: Vec<String> = v.iter().map(|r| format!("{}:{}:{}", r.method, r.seed, r.step)).collect();
        assert_eq!(keys, ["a:mean:0", "m:2:20", "m:2:100", "m:10:0", "m:std:0"]);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = vec![
            rec("mcc+fixmatch", SeedKey::Run(1), "acc", 5, 0.8125),
            rec("source_only", SeedKey::Mean, "proxy_a_distance", 5, 1.5),
        ];
        emit_csv(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(load_records(&path).unwrap(), recs);
        let bad = vec![rec("m", SeedKey::Run(0), "accuracy", 0, 1.0)];
        assert!(matches!(emit_csv(&bad, &path), Err(RecordError::UnknownMetric(_))));
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
        let nan = vec![rec("m", SeedKey::Run(0), "acc", 0, f64::NAN)];
        assert!(matches!(emit_csv(&nan, &path), Err(RecordError::NonFinite(_))));
    }

    #[test]
    fn final_summary_takes_last_step() {
        let recs = vec![
            rec("m", SeedKey::Mean, "acc", 10, 0.5),
            rec("m", SeedKey::Std, "acc", 10, 0.1),
            rec("m", SeedKey::Mean, "acc", 20, 0.75),
            rec("m", SeedKey::Std, "acc", 20, 0.05),
        ];
        let s = final_summary(&recs, "inductive", "acc");
        assert_eq!(s[&("t".to_string(), "m".to_string())], (0.75, 0.05));
    }
}
