//! Latency probe collection and mean ± std reporting.
//!
//! Multi-run aggregation is two-level: per-run means first, then mean and
//! sample std across runs (the headline numbers). Pooled statistics over
//! all samples of all runs are emitted alongside, since the two readings
//! differ when runs have unequal sample counts.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// One end-to-end latency sample recorded by a behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub tag: String,
    pub origin_stamp: SimTime,
    pub received_at: SimTime,
    pub receiver: String,
}

impl ProbeRecord {
    pub fn latency_ns(&self) -> u64 {
        self.received_at - self.origin_stamp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Arithmetic mean and sample standard deviation (n−1 denominator). Std is
/// zero for fewer than two samples.
pub fn summarize(samples: &[f64]) -> Option<Stats> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(Stats { mean, std, min, max, count: n })
}

/// Distance covered at `speed_mps` during `latency_ns`, in meters.
pub fn distance_traveled(speed_mps: f64, latency_ns: u64) -> f64 {
    speed_mps * latency_ns as f64 / 1e9
}

pub fn format_summary(mean_ms: f64, std_ms: f64) -> String {
    format!("{mean_ms:.2} \u{00b1} {std_ms:.2} ms")
}

/// Parses a `"{mean} ± {std} ms"` summary back into its two numbers.
pub fn parse_summary(s: &str) -> Option<(f64, f64)> {
    let s = s.strip_suffix(" ms")?;
    let (mean, std) = s.split_once(" \u{00b1} ")?;
    Some((mean.trim().parse().ok()?, std.trim().parse().ok()?))
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TagStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub count: usize,
    /// False when fewer than two samples back the std.
    pub std_defined: bool,
    pub summary: String,
}

impl TagStats {
    fn from_stats(s: &Stats) -> Self {
        TagStats {
            mean_ms: s.mean,
            std_ms: s.std,
            min_ms: s.min,
            max_ms: s.max,
            count: s.count,
            std_defined: s.count >= 2,
            summary: format_summary(s.mean, s.std),
        }
    }
}

/// Outcome of a single run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_index: u64,
    /// Latency samples per tag, nanoseconds, in collection order.
    pub samples: BTreeMap<String, Vec<u64>>,
    pub trace_hash: String,
    pub drops: BTreeMap<String, u64>,
}

impl RunReport {
    pub fn tag_stats(&self) -> BTreeMap<String, TagStats> {
        self.samples
            .iter()
            .filter_map(|(tag, ns)| {
                let ms: Vec<f64> = ns.iter().map(|&v| ns_to_ms(v)).collect();
                summarize(&ms).map(|s| (tag.clone(), TagStats::from_stats(&s)))
            })
            .collect()
    }

    /// Per-run mean latency in ms for one tag.
    pub fn mean_ms(&self, tag: &str) -> Option<f64> {
        let ns = self.samples.get(tag)?;
        let ms: Vec<f64> = ns.iter().map(|&v| ns_to_ms(v)).collect();
        summarize(&ms).map(|s| s.mean)
    }
}

/// Aggregation over repeated runs of the same scenario.
#[derive(Debug, Clone)]
pub struct MultiRunReport {
    pub runs: Vec<RunReport>,
}

impl MultiRunReport {
    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    fn all_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .runs
            .iter()
            .flat_map(|r| r.samples.keys().cloned())
            .collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Two-level statistics: mean and sample std of the per-run means.
    pub fn tag_stats(&self) -> BTreeMap<String, TagStats> {
        self.all_tags()
            .into_iter()
            .filter_map(|tag| {
                let means: Vec<f64> =
                    self.runs.iter().filter_map(|r| r.mean_ms(&tag)).collect();
                summarize(&means).map(|s| (tag, TagStats::from_stats(&s)))
            })
            .collect()
    }

    /// Pooled statistics over every sample of every run.
    pub fn pooled_stats(&self) -> BTreeMap<String, TagStats> {
        self.all_tags()
            .into_iter()
            .filter_map(|tag| {
                let ms: Vec<f64> = self
                    .runs
                    .iter()
                    .flat_map(|r| r.samples.get(&tag).into_iter().flatten())
                    .map(|&ns| ns_to_ms(ns))
                    .collect();
                summarize(&ms).map(|s| (tag, TagStats::from_stats(&s)))
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SingleRunReportJson {
    pub schema_version: u32,
    pub scenario_name: String,
    pub seed: u64,
    pub run_index: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, String>,
    pub tags: BTreeMap<String, TagStats>,
    pub drops: BTreeMap<String, u64>,
    pub trace_hash: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MultiRunReportJson {
    pub schema_version: u32,
    pub scenario_name: String,
    pub seed: u64,
    pub n_runs: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, String>,
    /// Headline two-level statistics (mean/std of per-run means).
    pub tags: BTreeMap<String, TagStats>,
    /// Pooled statistics over all samples of all runs.
    pub pooled: BTreeMap<String, TagStats>,
    pub trace_hashes: Vec<String>,
}

pub const SCHEMA_VERSION: u32 = 1;

pub fn single_run_json(
    scenario_name: &str,
    seed: u64,
    overrides: BTreeMap<String, String>,
    report: &RunReport,
) -> SingleRunReportJson {
    SingleRunReportJson {
        schema_version: SCHEMA_VERSION,
        scenario_name: scenario_name.to_string(),
        seed,
        run_index: report.run_index,
        overrides,
        tags: report.tag_stats(),
        drops: report.drops.clone(),
        trace_hash: report.trace_hash.clone(),
    }
}

pub fn multi_run_json(
    scenario_name: &str,
    seed: u64,
    overrides: BTreeMap<String, String>,
    report: &MultiRunReport,
) -> MultiRunReportJson {
    MultiRunReportJson {
        schema_version: SCHEMA_VERSION,
        scenario_name: scenario_name.to_string(),
        seed,
        n_runs: report.n_runs(),
        overrides,
        tags: report.tag_stats(),
        pooled: report.pooled_stats(),
        trace_hashes: report.runs.iter().map(|r| r.trace_hash.clone()).collect(),
    }
}

/// Writes a report document; byte-stable for equal inputs.
pub fn emit_report<T: Serialize>(report: &T, path: &Path) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)
}
