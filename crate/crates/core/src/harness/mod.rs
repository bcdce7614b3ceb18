//! Experiment drivers: effectiveness, universality, transferability and
//! robustness of vaccines against trained removal networks, aggregated into
//! deterministic CSV/JSON reports.

mod experiments;
mod report;
mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use experiments::{
    effectiveness_with, robustness_with, run_effectiveness, run_robustness, run_transferability,
    run_universality, transferability_with, universality_with, LoadedModel,
};
pub use report::{Accumulator, Arm, Key, Metric, ModelId, Observation, Provenance, Reference, Report, Row};
pub use stats::RunningStats;

use crate::compositor::{DEFAULT_TRANSPARENCY, DEFAULT_WATERMARK_SIZE, SIZE_GRID, TRANSPARENCY_GRID};
use crate::error::{io_err, Error, Result};
use crate::vaccine::{VaccineConfig, VaccineKind};

/// How watermarks are placed on hosts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    /// Inclusive watermark side-length range in pixels.
    pub size_range: (usize, usize),
    /// Inclusive transparency range.
    pub alpha_range: (f32, f32),
    /// Uniform position when true, centred otherwise.
    pub random_location: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            size_range: (DEFAULT_WATERMARK_SIZE, DEFAULT_WATERMARK_SIZE),
            alpha_range: (DEFAULT_TRANSPARENCY, DEFAULT_TRANSPARENCY),
            random_location: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaccineSettings {
    pub epsilon: f32,
    pub step: f32,
    pub iterations: usize,
    pub beta: f64,
    /// Round vaccinated images to the 8-bit grid before watermarking.
    pub quantize: bool,
}

impl Default for VaccineSettings {
    fn default() -> Self {
        let v = VaccineConfig::new(VaccineKind::Dwv);
        Self {
            epsilon: v.epsilon,
            step: v.step,
            iterations: v.iterations,
            beta: v.beta,
            quantize: false,
        }
    }
}

impl VaccineSettings {
    pub fn config(&self, kind: VaccineKind) -> VaccineConfig {
        VaccineConfig {
            kind,
            epsilon: self.epsilon,
            step: self.step,
            iterations: self.iterations,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniversalityConfig {
    pub n_patterns: usize,
    pub n_locations: usize,
    pub sizes: Vec<usize>,
    pub alphas: Vec<f32>,
    /// Size used by the pattern, location and transparency sweeps.
    pub size: usize,
    /// Transparency used by the pattern, location and size sweeps.
    pub alpha: f32,
}

impl Default for UniversalityConfig {
    fn default() -> Self {
        Self {
            n_patterns: 10,
            n_locations: 10,
            sizes: SIZE_GRID.to_vec(),
            alphas: TRANSPARENCY_GRID.to_vec(),
            size: DEFAULT_WATERMARK_SIZE,
            alpha: DEFAULT_TRANSPARENCY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Budgets for the stacked-versus-single-source comparison.
    pub epsilons: Vec<f32>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epsilons: [2.0, 4.0, 6.0, 8.0].iter().map(|e| e / 255.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// JPEG qualities; quality is `100 - compression ratio`, so 100 means
    /// no compression.
    pub qualities: Vec<u8>,
    /// Gaussian blur radii (σ).
    pub radii: Vec<f32>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            qualities: vec![100, 90, 80, 70, 60, 50, 40, 30],
            radii: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
        }
    }
}

/// Everything an experiment run depends on. Serialized with the report and
/// hashed for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_hosts: usize,
    pub n_watermarks: usize,
    pub placement: PlacementConfig,
    pub vaccine: VaccineSettings,
    /// Checkpoint paths; the first is the primary model for single-model
    /// experiments.
    pub models: Vec<PathBuf>,
    pub arms: Vec<Arm>,
    pub universality: UniversalityConfig,
    pub transfer: TransferConfig,
    pub robustness: RobustnessConfig,
    /// Where reports go; not part of the hashed configuration.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_hosts: 50,
            n_watermarks: 4,
            placement: PlacementConfig::default(),
            vaccine: VaccineSettings::default(),
            models: Vec::new(),
            arms: Arm::ALL.to_vec(),
            universality: UniversalityConfig::default(),
            transfer: TransferConfig::default(),
            robustness: RobustnessConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: &str| Err(Error::InvalidArgument(format!("experiment config: {why}")));
        if self.n_hosts == 0 || self.n_watermarks == 0 {
            return fail("n_hosts and n_watermarks must be at least 1");
        }
        if self.arms.is_empty() {
            return fail("no arms selected");
        }
        let (smin, smax) = self.placement.size_range;
        let (amin, amax) = self.placement.alpha_range;
        if smin == 0 || smin > smax || !(0.0..=1.0).contains(&amin) || !(0.0..=1.0).contains(&amax) || amin > amax
        {
            return fail("invalid placement ranges");
        }
        self.vaccine.config(VaccineKind::Dwv).validate()?;
        let u = &self.universality;
        if u.size == 0 || !(0.0..=1.0).contains(&u.alpha) || u.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return fail("invalid universality grid");
        }
        if self.transfer.epsilons.iter().any(|e| !(*e > 0.0)) {
            return fail("transfer budgets must be positive");
        }
        if self.robustness.qualities.iter().any(|q| !(1..=100).contains(q))
            || self.robustness.radii.iter().any(|r| !(*r >= 0.0))
        {
            return fail("invalid robustness grid");
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
