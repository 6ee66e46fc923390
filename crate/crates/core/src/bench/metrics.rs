//! Offline reconciliation of generator, endpoint and engine logs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::report::{AnalyzedRecord, LatencySummary};
use crate::sim::EmissionLogEntry;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{} analyzed record(s) missing from the emission log: {}", .offenders.len(), preview(.offenders))]
pub struct ReconcileError {
    pub offenders: Vec<(String, u64)>,
}

fn preview(v: &[(String, u64)]) -> String {
    let mut s: Vec<String> = v.iter().take(8).map(|(k, st)| format!("{k}@{st}")).collect();
    if v.len() > 8 {
        s.push("...".into());
    }
    s.join(", ")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyMeasurement {
    pub overall: LatencySummary,
    pub per_stream: BTreeMap<String, LatencySummary>,
    pub analyzed: BTreeMap<String, u64>,
    /// Emitted but never analyzed.
    pub lost: Vec<(String, u64)>,
    /// Analyzed more than once (each extra occurrence listed).
    pub duplicated: Vec<(String, u64)>,
}

/// Joins analyzed records with their emission entries; latency is
/// `analyzed_at − produced_at` per record.
pub fn measure_latency(
    emissions: &[EmissionLogEntry],
    analyzed: &[AnalyzedRecord],
) -> Result<LatencyMeasurement, ReconcileError> {
    let produced: HashMap<(&str, u64), u64> = emissions
        .iter()
        .map(|e| ((e.stream_key.as_str(), e.step), e.produced_at_ns))
        .collect();
    let mut seen: HashMap<(&str, u64), u32> = HashMap::new();
    let mut offenders = Vec::new();
    let mut m = LatencyMeasurement::default();
    let mut all = Vec::with_capacity(analyzed.len());
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in analyzed {
        let key = (a.stream_key.as_str(), a.step);
        let Some(&t0) = produced.get(&key) else {
            offenders.push((a.stream_key.clone(), a.step));
            continue;
        };
        let n = seen.entry(key).or_default();
        *n += 1;
        if *n > 1 {
            m.duplicated.push((a.stream_key.clone(), a.step));
            continue;
        }
        let lat = a.analyzed_at_ns.saturating_sub(t0) as f64;
        all.push(lat);
        per.entry(a.stream_key.clone()).or_default().push(lat);
        *m.analyzed.entry(a.stream_key.clone()).or_default() += 1;
    }
    if !offenders.is_empty() {
        return Err(ReconcileError { offenders });
    }
    m.lost = emissions
        .iter()
        .filter(|e| !seen.contains_key(&(e.stream_key.as_str(), e.step)))
        .map(|e| (e.stream_key.clone(), e.step))
        .collect();
    m.overall = LatencySummary::from_ns(&mut all);
    m.per_stream = per
        .into_iter()
        .map(|(k, mut v)| (k, LatencySummary::from_ns(&mut v)))
        .collect();
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub emitted: u64,
    pub dropped: u64,
    pub stored: u64,
    pub analyzed: u64,
    pub lost: u64,
    pub duplicated: u64,
    pub records_per_s: f64,
    pub bytes_per_s: f64,
    pub latency: LatencySummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// `P:G:E`.
    pub ratio: String,
    pub world_size: u32,
    pub groups: usize,
    pub parallelism: Option<usize>,
    pub trigger_ms: u64,
    pub element_count: usize,
    pub generator_elapsed_s: f64,
    /// Generator start to the end of the engine's drain cycle.
    pub workflow_elapsed_s: f64,
    /// Drain-cycle end minus generator finish.
    pub lag_s: f64,
    pub engine_cycles: u64,
    pub degraded_cycles: u64,
    pub aggregate: FlowMetrics,
    pub streams: BTreeMap<String, FlowMetrics>,
}

impl MetricsSummary {
    pub fn conserved(&self) -> bool {
        let a = &self.aggregate;
        a.lost == 0 && a.duplicated == 0 && a.emitted == a.stored && a.stored == a.analyzed
    }
}
