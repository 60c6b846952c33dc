use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{bad_format, Plane};
use crate::error::Result;

pub const RECORD_HEADER: &str = "patient,plane,slice,ssim,nmse,psnr";
pub const SUMMARY_HEADER: &str = "scope,metric,mean,std";
pub const METRICS: [&str; 3] = ["ssim", "nmse", "psnr"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub patient: String,
    pub plane: Plane,
    pub slice: usize,
    pub ssim: f64,
    pub nmse: f64,
    pub psnr: f64,
}

impl MetricRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "ssim" => Some(self.ssim),
            "nmse" => Some(self.nmse),
            "psnr" => Some(self.psnr),
            _ => None,
        }
    }

    fn sort_key(&self) -> (&str, Plane, usize) {
        (&self.patient, self.plane, self.slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub scope: String,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`n − 1`); the std of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
}

impl MetricsReport {
    pub fn new(records: Vec<MetricRecord>) -> Self {
        MetricsReport { records }
    }

    fn sorted(&self) -> Vec<&MetricRecord> {
        let mut r: Vec<&MetricRecord> = self.records.iter().collect();
        r.sort_by(|a, b| {
            a.sort_key().cmp(&b.sort_key()).then_with(|| {
                METRICS.iter().fold(std::cmp::Ordering::Equal, |o, m| {
                    o.then(a.metric(m).unwrap().total_cmp(&b.metric(m).unwrap()))
                })
            })
        });
        r
    }

    /// Per-patient rows (`patient:<id>`), the mean over patient means
    /// (`patients`), and the pooled slice statistics (`slices`).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let sorted = self.sorted();
        let mut by_patient: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
        for r in &sorted {
            by_patient.entry(&r.patient).or_default().push(r);
        }
        let mut rows = Vec::new();
        for m in METRICS {
            let mut patient_means = Vec::new();
            for (id, recs) in &by_patient {
                let vals: Vec<f64> = recs.iter().map(|r| r.metric(m).unwrap()).collect();
                let (mean, std) = mean_std(&vals);
                patient_means.push(mean);
                rows.push(SummaryRow {
                    scope: format!("patient:{id}"),
                    metric: m,
                    mean,
                    std,
                });
            }
            if !patient_means.is_empty() {
                let (mean, std) = mean_std(&patient_means);
                rows.push(SummaryRow {
                    scope: "patients".into(),
                    metric: m,
                    mean,
                    std,
                });
                let all: Vec<f64> = sorted.iter().map(|r| r.metric(m).unwrap()).collect();
                let (mean, std) = mean_std(&all);
                rows.push(SummaryRow {
                    scope: "slices".into(),
                    metric: m,
                    mean,
                    std,
                });
            }
        }
        rows
    }

    pub fn overall(&self, metric: &str) -> Option<(f64, f64)> {
        self.summary()
            .into_iter()
            .find(|r| r.scope == "patients" && r.metric == metric)
            .map(|r| (r.mean, r.std))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RECORD_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.patient, r.plane, r.slice, r.ssim, r.nmse, r.psnr
            )
            .unwrap();
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SUMMARY_HEADER);
        s.push('\n');
        for r in self.summary() {
            writeln!(s, "{},{},{},{}", r.scope, r.metric, r.mean, r.std).unwrap();
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>_summary.csv` into `dir`.
    pub fn write(
        &self,
        dir: &Path,
        stem: &str,
    ) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let records = dir.join(format!("{stem}.csv"));
        let summary = dir.join(format!("{stem}_summary.csv"));
        std::fs::write(&records, self.to_csv())?;
        std::fs::write(&summary, self.summary_csv())?;
        Ok((records, summary))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RECORD_HEADER) {
            return Err(bad_format(
                path,
                format!("expected header `{RECORD_HEADER}`"),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| bad_format(path, format!("line {}: {what}", i + 2));
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            records.push(MetricRecord {
                patient: f[0].to_string(),
                plane: f[1].parse().map_err(|_| bad("bad plane"))?,
                slice: f[2].parse().map_err(|_| bad("bad slice index"))?,
                ssim: num(f[3])?,
                nmse: num(f[4])?,
                psnr: num(f[5])?,
            });
        }
        Ok(MetricsReport { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, slice: usize, ssim: f64) -> MetricRecord {
        MetricRecord {
            patient: p.into(),
            plane: Plane::Sagittal,
            slice,
            ssim,
            nmse: 0.1,
            psnr: f64::INFINITY,
        }
    }

    #[test]
    fn aggregates_and_round_trip() {
        let rep = MetricsReport::new(vec![rec("a", 0, 0.7), rec("a", 1, 0.9), rec("b", 0, 0.5)]);
        let (m, _) = rep.overall("ssim").unwrap();
        assert!((m - 0.65).abs() < 1e-12);
        let back = MetricsReport::parse_csv(&rep.to_csv(), Path::new("x.csv")).unwrap();
        assert_eq!(back, rep);
        let pa = rep
            .summary()
            .into_iter()
            .find(|r| r.scope == "patient:a" && r.metric == "ssim")
            .unwrap();
        assert!((pa.mean - 0.8).abs() < 1e-12);
        assert!((pa.std - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(MetricsReport::parse_csv("a,b\n", Path::new("x.csv")).is_err());
    }
}
