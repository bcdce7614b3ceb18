//! Aggregated experiment reports and their CSV/JSON forms.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::RunningStats;
use crate::error::{io_err, Error, Result};
use crate::metrics::{psnr, rmse, rmse_w, ssim};
use crate::tensor::Tensor;

/// Perturbation applied to the host before watermarking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Clean,
    Rn,
    Dwv,
    Iwv,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Clean, Arm::Rn, Arm::Dwv, Arm::Iwv];

    /// References an arm may be scored against: disrupting vaccines only
    /// against the host, inerasable ones only against the watermarked input.
    pub fn references(self) -> &'static [Reference] {
        match self {
            Arm::Clean | Arm::Rn => &[Reference::Host, Reference::Watermarked],
            Arm::Dwv => &[Reference::Host],
            Arm::Iwv => &[Reference::Watermarked],
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Clean => "clean",
            Arm::Rn => "rn",
            Arm::Dwv => "dwv",
            Arm::Iwv => "iwv",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Host,
    Watermarked,
}

impl Reference {
    fn suffix(self) -> &'static str {
        match self {
            Reference::Host => "h",
            Reference::Watermarked => "w",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Rmse,
    RmseW,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::Rmse, Metric::RmseW];

    /// Column label, e.g. `psnr_h` or `rmsew_w`.
    pub fn label(self, reference: Reference) -> String {
        let base = match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Rmse => "rmse",
            Metric::RmseW => "rmsew",
        };
        format!("{base}_{}", reference.suffix())
    }
}

/// All four metrics of one restored image against one reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub rmse_w: Option<f64>,
}

impl Observation {
    pub fn measure(restored: &Tensor, reference: &Tensor, gt_mask: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(restored, reference)?,
            ssim: ssim(restored, reference)?,
            rmse: rmse(restored, reference)?,
            rmse_w: rmse_w(restored, reference, gt_mask)?,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Psnr => Some(self.psnr),
            Metric::Ssim => Some(self.ssim),
            Metric::Rmse => Some(self.rmse),
            Metric::RmseW => self.rmse_w,
        }
    }
}

/// Key of one aggregated quantity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key {
    /// Sub-experiment, e.g. `size=20` or `src=A/tgt=B`; empty for plain tables.
    pub scope: String,
    pub arm: Arm,
    pub reference: Reference,
    pub metric: Metric,
}

/// Collects observations per key, enforcing the arm/reference pairing.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    stats: BTreeMap<Key, RunningStats>,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, scope: &str, arm: Arm, reference: Reference, obs: &Observation) -> Result<()> {
        if !arm.references().contains(&reference) {
            return Err(Error::InvalidArgument(format!(
                "{arm} arms cannot be scored against the {reference:?} reference"
            )));
        }
        for metric in Metric::ALL {
            if let Some(v) = obs.get(metric) {
                self.push(
                    Key {
                        scope: scope.to_string(),
                        arm,
                        reference,
                        metric,
                    },
                    v,
                );
            }
        }
        Ok(())
    }

    fn push(&mut self, key: Key, v: f64) {
        self.stats.entry(key).or_default().push(v);
    }

    pub fn get(&self, key: &Key) -> Option<&RunningStats> {
        self.stats.get(key)
    }

    pub fn rows(&self) -> Vec<Row> {
        self.stats
            .iter()
            .map(|(k, s)| Row {
                scope: k.scope.clone(),
                arm: k.arm,
                reference: k.reference,
                metric: k.metric,
                mean: s.mean(),
                std: s.std(),
                n: s.count(),
            })
            .collect()
    }
}

/// One aggregated line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scope: String,
    pub arm: Arm,
    pub reference: Reference,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Row {
    /// Metric label qualified by scope, as written to the CSV.
    pub fn metric_label(&self) -> String {
        let m = self.metric.label(self.reference);
        if self.scope.is_empty() {
            m
        } else {
            format!("{m}@{}", self.scope)
        }
    }
}

/// Identity of a model used in an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelId {
    pub name: String,
    pub variant: String,
    pub path: String,
    /// SHA-256 of the checkpoint file.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<ModelId>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// File stem for the written report.
    pub name: String,
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn find(&self, scope: &str, arm: Arm, reference: Reference, metric: Metric) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.scope == scope && r.arm == arm && r.reference == reference && r.metric == metric)
    }

    /// Mean of a row that must exist.
    pub fn mean(&self, scope: &str, arm: Arm, reference: Reference, metric: Metric) -> Result<f64> {
        self.find(scope, arm, reference, metric).map(|r| r.mean).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "report {} has no {} row for {arm} in scope {scope:?}",
                self.name,
                metric.label(reference)
            ))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,metric,mean,std,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.arm, r.metric_label(), r.mean, r.std, r.n));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("{}.csv", self.name));
        let json = dir.join(format!("{}.json", self.name));
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        fs::write(&json, self.to_json()?).map_err(io_err(&json))?;
        Ok(vec![csv, json])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(v: f64) -> Observation {
        Observation {
            psnr: v,
            ssim: 0.5,
            rmse: 2.0 * v,
            rmse_w: None,
        }
    }

    #[test]
    fn schema_forbids_mismatched_references() {
        let mut acc = Accumulator::new();
        assert!(acc.record("", Arm::Dwv, Reference::Watermarked, &obs(1.0)).is_err());
        assert!(acc.record("", Arm::Iwv, Reference::Host, &obs(1.0)).is_err());
        assert!(acc.record("", Arm::Dwv, Reference::Host, &obs(1.0)).is_ok());
        assert!(acc.record("", Arm::Clean, Reference::Watermarked, &obs(1.0)).is_ok());
    }

    #[test]
    fn absent_rmse_w_is_skipped_and_rows_are_sorted() {
        let mut acc = Accumulator::new();
        acc.record("b", Arm::Iwv, Reference::Watermarked, &obs(3.0)).unwrap();
        acc.record("a", Arm::Clean, Reference::Host, &obs(1.0)).unwrap();
        acc.record("a", Arm::Clean, Reference::Host, &obs(2.0)).unwrap();
        let rows = acc.rows();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].scope, "a");
        assert_eq!(rows[0].metric, Metric::Psnr);
        assert_eq!(rows[0].n, 2);
        assert!((rows[0].mean - 1.5).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.metric != Metric::RmseW));
        assert_eq!(rows[3].metric_label(), "psnr_w@b");
    }

    #[test]
    fn csv_layout() {
        let mut acc = Accumulator::new();
        acc.record("", Arm::Clean, Reference::Host, &obs(1.0)).unwrap();
        let report = Report {
            name: "t".into(),
            provenance: Provenance {
                experiment: "t".into(),
                config_hash: "0".into(),
                seed: 1,
                models: vec![],
                notes: vec![],
            },
            config: serde_json::Value::Null,
            rows: acc.rows(),
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("arm,metric,mean,std,n"));
        assert_eq!(lines.next(), Some("clean,psnr_h,1,0,1"));
        assert_eq!(report.mean("", Arm::Clean, Reference::Host, Metric::Rmse).unwrap(), 2.0);
        assert!(report.mean("", Arm::Dwv, Reference::Host, Metric::Rmse).is_err());
    }
}
