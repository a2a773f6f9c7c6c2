//! Metric reports, their CSV form and relative-improvement tables.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub protocol: String,
    pub samples: usize,
    pub macro_acc: f64,
    pub micro_acc: f64,
    /// Needs at least two sources in the test set.
    pub offdiag_acc: Option<f64>,
    /// Alignment statistics, averaged over source pairs; `None` with fewer
    /// than two sources.
    pub centroid_distance: Option<f64>,
    pub coral: Option<f64>,
    pub mmd: Option<f64>,
    pub mmd_bandwidth: Option<f64>,
    pub class_names: Vec<String>,
    pub per_class_acc: Vec<Option<f64>>,
    pub confusion: Array2<u64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    key: String,
    value: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| {
        ParseError::Malformed {
            row: 0,
            reason: format!("`{key}` is not a number: `{v}`"),
        }
        .into()
    })
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v.is_empty() {
        Ok(None)
    } else {
        parse_f64(key, v).map(Some)
    }
}

/// Whether a larger value of the metric is better.
pub fn higher_is_better(metric: &str) -> Option<bool> {
    match metric {
        "macro_acc" | "micro_acc" | "offdiag_acc" => Some(true),
        "centroid_distance" | "coral" | "mmd" => Some(false),
        _ => None,
    }
}

/// Percentage improvement of `ours` over `baseline`: `(ours - base) / base`
/// for increasing metrics and `(base - ours) / base` for decreasing ones.
pub fn relative_improvement(ours: f64, baseline: f64, increasing: bool) -> Option<f64> {
    if baseline == 0.0 {
        return None;
    }
    let delta = if increasing { ours - baseline } else { baseline - ours };
    Some(delta / baseline * 100.0)
}

impl MetricReport {
    /// Scalar metrics by name, in report order.
    pub fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("macro_acc", Some(self.macro_acc)),
            ("micro_acc", Some(self.micro_acc)),
            ("offdiag_acc", self.offdiag_acc),
            ("centroid_distance", self.centroid_distance),
            ("coral", self.coral),
            ("mmd", self.mmd),
        ]
    }

    /// Long `key,value` form. Floats use the shortest representation that
    /// parses back to the same value, so the round trip is exact.
    pub fn to_csv(&self) -> Result<String> {
        let k = self.class_names.len();
        let mut rows: Vec<(String, String)> = vec![
            ("protocol".into(), self.protocol.clone()),
            ("samples".into(), self.samples.to_string()),
            ("classes".into(), k.to_string()),
        ];
        for (name, v) in self.scalars() {
            rows.push((name.into(), opt(v)));
        }
        rows.push(("mmd_bandwidth".into(), opt(self.mmd_bandwidth)));
        for (i, name) in self.class_names.iter().enumerate() {
            rows.push((format!("class.{i}"), name.clone()));
            rows.push((format!("per_class_acc.{i}"), opt(self.per_class_acc[i])));
        }
        for ((i, j), c) in self.confusion.indexed_iter() {
            rows.push((format!("confusion.{i}.{j}"), c.to_string()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for (key, value) in rows {
            w.serialize(Row { key, value }).map_err(|e| Error::Validation(e.to_string()))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Validation(e.to_string()))?).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut kv = std::collections::BTreeMap::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| ParseError::Malformed {
                row: i + 2,
                reason: e.to_string(),
            })?;
            kv.insert(row.key, row.value);
        }
        let get = |key: &str| -> Result<&str> {
            kv.get(key).map(String::as_str).ok_or_else(|| {
                ParseError::Malformed {
                    row: 0,
                    reason: format!("report has no `{key}` row"),
                }
                .into()
            })
        };
        let count = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| {
                ParseError::Malformed {
                    row: 0,
                    reason: format!("`{key}` is not a count"),
                }
                .into()
            })
        };
        let k = count("classes")?;
        let mut confusion = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                confusion[[i, j]] = count(&format!("confusion.{i}.{j}"))? as u64;
            }
        }
        Ok(MetricReport {
            protocol: get("protocol")?.to_string(),
            samples: count("samples")?,
            macro_acc: parse_f64("macro_acc", get("macro_acc")?)?,
            micro_acc: parse_f64("micro_acc", get("micro_acc")?)?,
            offdiag_acc: parse_opt("offdiag_acc", get("offdiag_acc")?)?,
            centroid_distance: parse_opt("centroid_distance", get("centroid_distance")?)?,
            coral: parse_opt("coral", get("coral")?)?,
            mmd: parse_opt("mmd", get("mmd")?)?,
            mmd_bandwidth: parse_opt("mmd_bandwidth", get("mmd_bandwidth")?)?,
            class_names: (0..k).map(|i| get(&format!("class.{i}")).map(str::to_string)).collect::<Result<_>>()?,
            per_class_acc: (0..k)
                .map(|i| {
                    let key = format!("per_class_acc.{i}");
                    parse_opt(&key, get(&key)?)
                })
                .collect::<Result<_>>()?,
            confusion,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// One row of a comparison between two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub ours: Option<f64>,
    pub baseline: Option<f64>,
    pub improvement_pct: Option<f64>,
}

pub fn compare(ours: &MetricReport, baseline: &MetricReport) -> Vec<Comparison> {
    ours.scalars()
        .into_iter()
        .zip(baseline.scalars())
        .map(|((metric, o), (_, b))| Comparison {
            metric: metric.to_string(),
            ours: o,
            baseline: b,
            improvement_pct: match (o, b, higher_is_better(metric)) {
                (Some(o), Some(b), Some(inc)) => relative_improvement(o, b, inc),
                _ => None,
            },
        })
        .collect()
}

pub fn comparison_csv(rows: &[Comparison]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record([r.metric.clone(), opt(r.ours), opt(r.baseline), opt(r.improvement_pct)])
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Validation(e.to_string()))?).expect("csv is utf-8");
    Ok(format!("metric,ours,baseline,improvement_pct\n{body}"))
}
