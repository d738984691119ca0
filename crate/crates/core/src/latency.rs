//! Affine online-latency model in the ReLU count, and accuracy/latency
//! Pareto frontiers.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    /// Microseconds per ReLU.
    pub per_relu_us: f64,
    /// Intercept covering linear layers and setup.
    pub base_ms: f64,
}

impl LatencyModel {
    pub fn new(per_relu_us: f64, base_ms: f64) -> Result<Self> {
        if !(per_relu_us > 0.0 && per_relu_us.is_finite()) {
            return Err(Error::NonPositiveSlope(per_relu_us));
        }
        if !(base_ms >= 0.0 && base_ms.is_finite()) {
            return Err(Error::NegativeIntercept(base_ms));
        }
        Ok(Self { per_relu_us, base_ms })
    }

    /// `base_ms + per_relu_us * relus / 1000`. At zero ReLUs this is the intercept.
    pub fn predict(&self, relus: u64) -> f64 {
        self.base_ms + self.per_relu_us * relus as f64 / 1000.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LatencyModel = serde_json::from_str(text)?;
        Self::new(m.per_relu_us, m.base_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub relus: u64,
    pub latency_ms: f64,
    #[serde(default)]
    pub accuracy_pct: Option<f64>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>, relus: u64, latency_ms: f64, accuracy_pct: Option<f64>) -> Self {
        Self { label: label.into(), relus, latency_ms, accuracy_pct }
    }
}

/// Reads `label,relus,latency_ms,accuracy_pct` rows; accuracy may be empty.
pub fn read_records(reader: impl Read) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: RunRecord = row?;
        if r.relus == 0 || r.latency_ms.is_nan() || r.latency_ms <= 0.0 {
            return Err(Error::InvalidArgument(format!("record {:?} needs positive relus and latency", r.label)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_records(std::fs::File::open(path)?)
}

pub fn records_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub model: LatencyModel,
    /// Observed minus predicted, per input point.
    pub residuals_ms: Vec<f64>,
}

/// Least-squares line through `(relus, latency_ms)` points.
pub fn calibrate(points: &[(u64, f64)]) -> Result<Fit> {
    if points.len() < 2 {
        return Err(Error::DegeneratePoints(format!("{} points, need at least 2", points.len())));
    }
    if points.iter().any(|&(_, y)| !y.is_finite()) {
        return Err(Error::NonFinite("latency".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
    let my = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|&(x, _)| (x as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegeneratePoints("all points share one ReLU count".into()));
    }
    let sxy: f64 = points.iter().map(|&(x, y)| (x as f64 - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if slope <= 0.0 {
        return Err(Error::NonPositiveSlope(slope * 1000.0));
    }
    let model = LatencyModel::new(slope * 1000.0, intercept)?;
    let residuals_ms = points.iter().map(|&(x, y)| y - model.predict(x)).collect();
    Ok(Fit { model, residuals_ms })
}

pub fn calibrate_records(records: &[RunRecord]) -> Result<Fit> {
    calibrate(&records.iter().map(|r| (r.relus, r.latency_ms)).collect::<Vec<_>>())
}

/// Records not dominated by another with no more latency and no less
/// accuracy (one of the two strict), sorted by latency then label.
pub fn pareto_frontier(records: &[RunRecord]) -> Result<Vec<RunRecord>> {
    let mut rows: Vec<(&RunRecord, f64)> = Vec::with_capacity(records.len());
    for r in records {
        let acc =
            r.accuracy_pct.ok_or_else(|| Error::InvalidArgument(format!("record {:?} has no accuracy", r.label)))?;
        if !acc.is_finite() || !r.latency_ms.is_finite() {
            return Err(Error::NonFinite(format!("record {:?}", r.label)));
        }
        rows.push((r, acc));
    }
    rows.sort_by(|a, b| {
        a.0.latency_ms.total_cmp(&b.0.latency_ms).then(b.1.total_cmp(&a.1)).then(a.0.label.cmp(&b.0.label))
    });
    let mut out = Vec::new();
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < rows.len() {
        // records sharing one latency: only the top accuracy can survive, and
        // only if nothing faster already reaches it
        let lat = rows[i].0.latency_ms;
        let top = rows[i].1;
        let mut j = i;
        while j < rows.len() && rows[j].0.latency_ms == lat {
            if rows[j].1 == top && top > best_before {
                out.push(rows[j].0.clone());
            }
            j += 1;
        }
        best_before = best_before.max(top);
        i = j;
    }
    Ok(out)
}
