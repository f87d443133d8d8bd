//! JSON results document written by `cmm run`.

use cmm_core::harness::{RunConfig, RunResult, TaskBias};
use cmm_core::Scenario;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Floats go through serde_json's shortest round-trip formatting, so every
/// value parses back to the identical f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub config: RunConfig,
    pub scenario: Scenario,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub biases: Vec<BiasEntry>,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub task: usize,
    pub d_before: f64,
    pub d_after: f64,
    pub steps: usize,
}

impl From<&TaskBias> for BiasEntry {
    fn from(b: &TaskBias) -> Self {
        BiasEntry {
            task: b.task,
            d_before: b.report.d_before,
            d_after: b.report.d_after,
            steps: b.report.steps_taken,
        }
    }
}

impl ResultsDocument {
    pub fn new(result: RunResult, scenario: Scenario) -> Self {
        ResultsDocument {
            seed: result.config.seed,
            config: result.config,
            scenario,
            r: result.r,
            a: result.a,
            biases: result.biases.iter().map(BiasEntry::from).collect(),
            wall_time_seconds: result.wall_time_seconds,
            version: VERSION.to_string(),
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmm_core::align::BiasReport;

    #[test]
    fn keys_and_float_round_trip() {
        let tricky = [0.1 + 0.2, 1.0 / 3.0, 2f64.powi(-1074), 123_456_789.123_456_79];
        let doc = ResultsDocument::new(
            RunResult {
                r: vec![tricky.to_vec()],
                a: vec![tricky[0]],
                biases: vec![TaskBias {
                    task: 1,
                    report: BiasReport {
                        d_before: tricky[1],
                        d_after: tricky[2],
                        steps_taken: 3,
                        per_step_trace: vec![tricky[1], tricky[2], tricky[2]],
                    },
                }],
                wall_time_seconds: 0.5,
                config: RunConfig::default(),
            },
            Scenario::Cil,
        );
        let json = doc.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["config", "scenario", "R", "A", "biases", "seed", "wall_time_seconds", "version"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let b = &v["biases"][0];
        for key in ["task", "d_before", "d_after", "steps"] {
            assert!(b.get(key).is_some(), "missing biases.{key}");
        }
        let back: ResultsDocument = serde_json::from_str(&json).unwrap();
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.r[0]), bits(&tricky));
        assert_eq!(back, doc);
    }
}
