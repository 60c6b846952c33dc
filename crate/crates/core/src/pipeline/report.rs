use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::report::{mean_std, METRICS};
use crate::metrics::{MetricRecord, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Source,
    Plane,
    Patient,
}

impl Grouping {
    fn key(self, source: &str, r: &MetricRecord) -> String {
        match self {
            Grouping::Source => source.to_string(),
            Grouping::Plane => format!("{source}/plane={}", r.plane),
            Grouping::Patient => format!("{source}/patient={}", r.patient),
        }
    }
}

/// Builds `summary.csv` (one row per group: count, then mean and sample std
/// for each metric) and long-form `plotdata.csv` (`group,metric,value`).
/// Each source is a named metrics report.
pub fn report_tables(
    sources: &[(String, MetricsReport)],
    groupings: &[Grouping],
) -> (String, String) {
    let mut summary = String::from("group,n");
    for m in METRICS {
        write!(summary, ",{m}_mean,{m}_std").unwrap();
    }
    summary.push('\n');
    let mut plot = String::from("group,metric,value\n");
    for &grouping in groupings {
        for (source, report) in sources {
            let mut records: Vec<&MetricRecord> = report.records.iter().collect();
            records.sort_by(|a, b| {
                (&a.patient, a.plane, a.slice).cmp(&(&b.patient, b.plane, b.slice))
            });
            let mut groups: BTreeMap<String, Vec<&MetricRecord>> = BTreeMap::new();
            for r in records {
                groups.entry(grouping.key(source, r)).or_default().push(r);
            }
            for (group, recs) in &groups {
                write!(summary, "{group},{}", recs.len()).unwrap();
                for m in METRICS {
                    let vals: Vec<f64> = recs.iter().map(|r| r.metric(m).unwrap()).collect();
                    let (mean, std) = mean_std(&vals);
                    write!(summary, ",{mean},{std}").unwrap();
                    for v in vals {
                        writeln!(plot, "{group},{m},{v}").unwrap();
                    }
                }
                summary.push('\n');
            }
        }
    }
    (summary, plot)
}

/// Reads metric CSVs (source name = file stem) and writes `summary.csv`
/// and `plotdata.csv` into `out_dir`.
pub fn emit_report(
    inputs: &[PathBuf],
    groupings: &[Grouping],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one metrics CSV".into(),
        ));
    }
    let mut sources = Vec::new();
    for p in inputs {
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("metrics")
            .to_string();
        sources.push((name, MetricsReport::read(p)?));
    }
    let (summary, plot) = report_tables(&sources, groupings);
    std::fs::create_dir_all(out_dir)?;
    let (s, d) = (out_dir.join("summary.csv"), out_dir.join("plotdata.csv"));
    std::fs::write(&s, summary)?;
    std::fs::write(&d, plot)?;
    Ok((s, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Plane;

    fn rec(p: &str, plane: Plane, ssim: f64) -> MetricRecord {
        MetricRecord {
            patient: p.into(),
            plane,
            slice: 0,
            ssim,
            nmse: 0.1,
            psnr: 20.0,
        }
    }

    #[test]
    fn two_values_use_sample_std() {
        let rep = MetricsReport::new(vec![
            rec("a", Plane::Sagittal, 0.7),
            rec("b", Plane::Sagittal, 0.9),
        ]);
        let (summary, plot) = report_tables(&[("x".into(), rep)], &[Grouping::Source]);
        let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "x");
        assert_eq!(row[1], "2");
        assert!((row[2].parse::<f64>().unwrap() - 0.8).abs() < 1e-12);
        assert!((row[3].parse::<f64>().unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(plot.lines().count(), 1 + 6);
    }

    #[test]
    fn plane_grouping_rows() {
        let rep = MetricsReport::new(Plane::ALL.iter().map(|&p| rec("a", p, 0.5)).collect());
        let (summary, _) = report_tables(&[("x".into(), rep)], &[Grouping::Plane]);
        assert_eq!(summary.lines().count(), 1 + 3);
        assert!(summary
            .lines()
            .skip(1)
            .all(|l| l.split(',').nth(3) == Some("0")));
    }
}
