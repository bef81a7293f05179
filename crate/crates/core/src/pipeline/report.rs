//! Run reports: JSON for machines, a summary table for people.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item counts per pipeline stage. Conservation law:
/// `candidates = plausible + implausible + parse_failures`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub train_heads: usize,
    pub candidates: usize,
    pub parse_failures: usize,
    pub plausible: usize,
    pub implausible: usize,
    pub corrections: usize,
    pub requests: usize,
    pub edited: usize,
    pub probes: usize,
    pub holdouts: usize,
    pub test_heads: usize,
}

/// Quantitative outcome of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub conceptualization_enabled: bool,
    pub edit_method: String,
    pub seed: u64,
    pub pre_plausible_rate: f64,
    pub post_plausible_rate: f64,
    pub edit_success_rate: f64,
    pub generalization_rate: f64,
    pub locality_rate: f64,
    /// Cumulative edit success after each sequential batch.
    pub drift_curve: Vec<f64>,
    pub counts: StageCounts,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("pre_plausible_rate", self.pre_plausible_rate),
            ("post_plausible_rate", self.post_plausible_rate),
            ("edit_success_rate", self.edit_success_rate),
            ("generalization_rate", self.generalization_rate),
            ("locality_rate", self.locality_rate),
        ];
        for (name, value) in rates {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Numeric(format!("{} = {} outside [0, 1]", name, value)));
            }
        }
        for (i, value) in self.drift_curve.iter().enumerate() {
            if !(0.0..=1.0).contains(value) {
                return Err(Error::Numeric(format!(
                    "drift_curve[{}] = {} outside [0, 1]",
                    i, value
                )));
            }
        }
        let c = &self.counts;
        if c.candidates != c.plausible + c.implausible + c.parse_failures {
            return Err(Error::Numeric(format!(
                "stage counts not conserved: {} candidates vs {} + {} + {}",
                c.candidates, c.plausible, c.implausible, c.parse_failures
            )));
        }
        Ok(())
    }

    /// Canonical JSON rendering; bitwise identical for identical reports.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        let report: RunReport = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("report parse failed: {}", e)))?;
        report.validate()?;
        Ok(report)
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let drift = self
            .drift_curve
            .iter()
            .map(|v| format!("{:.3}", v))
            .collect::<Vec<_>>()
            .join(" ");
        let mut out = String::new();
        out.push_str(&format!(
            "run summary (method={}, seed={}, conceptualization={})\n",
            self.edit_method, self.seed, self.conceptualization_enabled
        ));
        out.push_str("  metric                 value\n");
        out.push_str(&format!("  pre_plausible_rate     {:.4}\n", self.pre_plausible_rate));
        out.push_str(&format!("  post_plausible_rate    {:.4}\n", self.post_plausible_rate));
        out.push_str(&format!("  edit_success_rate      {:.4}\n", self.edit_success_rate));
        out.push_str(&format!("  generalization_rate    {:.4}\n", self.generalization_rate));
        out.push_str(&format!("  locality_rate          {:.4}\n", self.locality_rate));
        out.push_str(&format!("  drift_curve            [{}]\n", drift));
        out.push_str(&format!(
            "  counts                 heads={} candidates={} parse_failures={} plausible={} implausible={}\n",
            c.train_heads, c.candidates, c.parse_failures, c.plausible, c.implausible
        ));
        out.push_str(&format!(
            "                         corrections={} requests={} edited={} probes={} holdouts={} test_heads={}\n",
            c.corrections, c.requests, c.edited, c.probes, c.holdouts, c.test_heads
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        RunReport {
            conceptualization_enabled: true,
            edit_method: "memit".into(),
            seed: 7,
            pre_plausible_rate: 0.5,
            post_plausible_rate: 0.9,
            edit_success_rate: 1.0,
            generalization_rate: 0.8,
            locality_rate: 0.95,
            drift_curve: vec![1.0],
            counts: StageCounts {
                train_heads: 10,
                candidates: 10,
                parse_failures: 1,
                plausible: 6,
                implausible: 3,
                corrections: 3,
                requests: 9,
                edited: 9,
                probes: 4,
                holdouts: 5,
                test_heads: 8,
            },
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = report();
        let json = r.to_json();
        let parsed = RunReport::from_json(&json).unwrap();
        assert_eq!(parsed, r);
        assert_eq!(parsed.to_json(), json);
    }

    #[test]
    fn validation_catches_broken_conservation_and_rates() {
        let mut r = report();
        r.counts.plausible = 7; // 7 + 3 + 1 != 10
        assert!(r.validate().is_err());
        let mut r = report();
        r.locality_rate = 1.2;
        assert!(r.validate().is_err());
    }

    #[test]
    fn table_lists_every_metric() {
        let text = report().to_table();
        for needle in [
            "pre_plausible_rate",
            "post_plausible_rate",
            "edit_success_rate",
            "generalization_rate",
            "locality_rate",
            "drift_curve",
        ] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }
}
