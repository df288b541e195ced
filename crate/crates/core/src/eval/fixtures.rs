//! Published reference results, used for deltas and ordinal checks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metric, MetricValues};
use crate::error::{Error, Result};

/// Fixtures shipped with the crate.
pub const BUNDLED_FIXTURES: &str = include_str!("../../fixtures/reference_tables.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    /// metric name → value exactly as printed
    pub values: BTreeMap<String, String>,
}

impl MethodRow {
    pub fn value(&self, metric: Metric) -> Result<Option<f64>> {
        self.values
            .get(metric.as_str())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: bad {} value {s:?}", self.label, metric.as_str())))
            })
            .transpose()
    }

    pub fn metric_values(&self) -> Result<MetricValues> {
        let mut out = MetricValues::new();
        for m in Metric::ALL {
            if let Some(v) = self.value(m)? {
                out.insert(m, v);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub dataset: String,
    pub metrics: Vec<String>,
    pub methods: Vec<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTables {
    pub format: u32,
    #[serde(default)]
    pub note: String,
    pub tables: BTreeMap<String, ReferenceTable>,
}

impl ReferenceTables {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_FIXTURES).expect("bundled fixtures parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t: ReferenceTables = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, table) in &self.tables {
            for m in &table.metrics {
                if Metric::parse(m).is_none() {
                    problems.push(format!("{name}: unknown metric {m:?}"));
                }
            }
            for row in &table.methods {
                for (m, v) in &row.values {
                    if !table.metrics.contains(m) {
                        problems.push(format!("{name}/{}: metric {m:?} not in table header", row.label));
                    }
                    if v.parse::<f64>().map_or(true, |x| !x.is_finite()) {
                        problems.push(format!("{name}/{}: {m} value {v:?} is not a number", row.label));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn row(&self, table: &str, label: &str) -> Result<&MethodRow> {
        let t = self
            .tables
            .get(table)
            .ok_or_else(|| Error::invalid(format!("no fixture table {table:?}")))?;
        t.methods
            .iter()
            .find(|r| r.label == label)
            .ok_or_else(|| Error::invalid(format!("table {table:?} has no row {label:?}")))
    }
}

/// `measured − reference` for every metric present in both.
pub fn deltas(measured: &MetricValues, reference: &MethodRow) -> Result<MetricValues> {
    let reference = reference.metric_values()?;
    Ok(measured
        .iter()
        .filter_map(|(m, v)| reference.get(m).map(|r| (*m, v - r)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

fn better(metric: Metric, a: f64, b: f64) -> bool {
    if metric.higher_is_better() {
        a > b
    } else {
        a < b
    }
}

/// The multi-expert scheme beats a single model on ITC, CLIP similarity
/// and FID. No numeric margin is asserted.
pub fn multi_expert_beats_single(multi: &MetricValues, single: &MetricValues) -> Vec<ClaimOutcome> {
    [Metric::Itc, Metric::ClipSimilarity, Metric::Fid]
        .into_iter()
        .map(|m| {
            let claim = format!("multi-expert beats single model on {}", m.as_str());
            match (multi.get(&m), single.get(&m)) {
                (Some(&a), Some(&b)) => ClaimOutcome {
                    claim,
                    holds: better(m, a, b),
                    detail: format!("{a} vs {b}"),
                },
                _ => ClaimOutcome {
                    claim,
                    holds: false,
                    detail: "metric missing".into(),
                },
            }
        })
        .collect()
}

/// A single model emitting 9 views reaches a lower FID than one emitting 16.
pub fn fewer_views_lower_fid(nine: &MetricValues, sixteen: &MetricValues) -> ClaimOutcome {
    let claim = "9-view single model has lower FID than 16-view".to_string();
    match (nine.get(&Metric::Fid), sixteen.get(&Metric::Fid)) {
        (Some(&a), Some(&b)) => ClaimOutcome {
            claim,
            holds: a < b,
            detail: format!("{a} vs {b}"),
        },
        _ => ClaimOutcome {
            claim,
            holds: false,
            detail: "fid missing".into(),
        },
    }
}
