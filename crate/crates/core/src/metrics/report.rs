use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::confusion::ConfusionCounts;
use super::curves::{auprc, auroc};
use super::stats::{anova_oneway, tukey_hsd, AnovaResult, PairComparison};
use crate::error::{Error, Result};
use crate::nn::Complexity;

/// Marker for metrics that flatter models on imbalanced data.
pub const IMBALANCE_CAVEAT: &str = "† Metrics not intended for imbalanced datasets";

/// The six reported metrics, each in [0, 1] (MCC in [-1, 1]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub mcc: f64,
    pub auprc: f64,
    pub bacc: f64,
    pub auroc: f64,
    pub acc: f64,
}

impl Metrics {
    /// Column order of the results tables.
    pub const NAMES: [&'static str; 6] = ["F1", "MCC", "AUPRC", "B.ACC", "AUROC†", "ACC†"];

    pub fn values(&self) -> [f64; 6] {
        [self.f1, self.mcc, self.auprc, self.bacc, self.auroc, self.acc]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            f1: v[0],
            mcc: v[1],
            auprc: v[2],
            bacc: v[3],
            auroc: v[4],
            acc: v[5],
        }
    }
}

/// All six metrics; confusion metrics at `score >= threshold`.
pub fn score_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(Metrics, ConfusionCounts)> {
    let c = ConfusionCounts::from_scores(scores, labels, threshold)?;
    Ok((
        Metrics {
            f1: c.f1()?,
            mcc: c.mcc()?,
            auprc: auprc(scores, labels)?,
            bacc: c.bacc()?,
            auroc: auroc(scores, labels)?,
            acc: c.acc()?,
        },
        c,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: Metrics,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rows: Vec<SeedRow>,
    pub mean: Metrics,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: Metrics,
    pub complexity: Option<Complexity>,
}

fn mean_std(rows: &[SeedRow]) -> (Metrics, Metrics) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 6];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.metrics.values()) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 6];
    if rows.len() > 1 {
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r.metrics.values()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
        for s in &mut std {
            *s = s.sqrt();
        }
    }
    (Metrics::from_values(mean), Metrics::from_values(std))
}

impl MethodSummary {
    pub fn new(method: impl Into<String>, rows: Vec<SeedRow>, complexity: Option<Complexity>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("method summary without any seed rows".into()));
        }
        let (mean, std) = mean_std(&rows);
        Ok(Self {
            method: method.into(),
            rows,
            mean,
            std,
            complexity,
        })
    }
}

/// Significance tests of one metric across methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub anova: Option<AnovaResult>,
    pub tukey: Vec<PairComparison>,
    /// Why a test was skipped, if it was.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub threshold: f64,
    pub alpha: f64,
    pub methods: Vec<MethodSummary>,
    /// Keyed by metric column name.
    pub significance: BTreeMap<String, Significance>,
    pub caveat: String,
}

impl EvalReport {
    pub fn new(methods: Vec<MethodSummary>, threshold: f64, alpha: f64) -> Self {
        let mut significance = BTreeMap::new();
        if methods.len() >= 2 {
            let names: Vec<String> = methods.iter().map(|m| m.method.clone()).collect();
            for (col, name) in Metrics::NAMES.iter().enumerate() {
                let groups: Vec<Vec<f64>> = methods
                    .iter()
                    .map(|m| m.rows.iter().map(|r| r.metrics.values()[col]).collect())
                    .collect();
                let sig = match anova_oneway(&groups) {
                    Ok(a) => match tukey_hsd(&names, &groups, alpha) {
                        Ok(t) => Significance {
                            anova: Some(a),
                            tukey: t,
                            note: None,
                        },
                        Err(e) => Significance {
                            anova: Some(a),
                            tukey: Vec::new(),
                            note: Some(e.to_string()),
                        },
                    },
                    Err(e) => Significance {
                        anova: None,
                        tukey: Vec::new(),
                        note: Some(e.to_string()),
                    },
                };
                significance.insert(name.to_string(), sig);
            }
        }
        Self {
            schema_version: 1,
            threshold,
            alpha,
            methods,
            significance,
            caveat: IMBALANCE_CAVEAT.into(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `method,F1,MCC,AUPRC,B.ACC,AUROC†,ACC†` with `mean ± std` in percent.
    pub fn summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["method".to_string()];
        header.extend(Metrics::NAMES.iter().map(|s| s.to_string()));
        header.extend(["params".to_string(), "flops".to_string()]);
        w.write_record(&header)?;
        for m in &self.methods {
            let mut row = vec![m.method.clone()];
            for (mu, sd) in m.mean.values().iter().zip(m.std.values()) {
                row.push(format!("{:.1} ± {:.1}", 100.0 * mu, 100.0 * sd));
            }
            row.push(m.complexity.map(|c| c.params.to_string()).unwrap_or_default());
            row.push(m.complexity.map(|c| c.flops.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
    }

    /// One row per (method, seed) with raw metric values.
    pub fn seeds_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["method".to_string(), "seed".to_string()];
        header.extend(Metrics::NAMES.iter().map(|s| s.to_string()));
        header.extend(["tp", "tn", "fp", "fn"].map(String::from));
        w.write_record(&header)?;
        for m in &self.methods {
            for r in &m.rows {
                let mut row = vec![m.method.clone(), r.seed.to_string()];
                row.extend(r.metrics.values().iter().map(|v| format!("{v:.17}")));
                row.extend([r.counts.tp, r.counts.tn, r.counts.fp, r.counts.fn_].map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io {
            path: path.into(),
            source: io,
        },
        other => Error::Malformed {
            path: path.into(),
            reason: format!("{other:?}"),
        },
    }
}
