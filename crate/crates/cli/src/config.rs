use std::path::{Path, PathBuf};

use lpa_core::bench::ScalingConfig;
use lpa_core::conversion::{ConversionConfig, SweepHyperparams, TeacherSpec};
use lpa_core::perfmodel::HardwareProfile;
use lpa_core::reference::data::SyntheticConfig;
use serde::{Deserialize, Serialize};

/// Run configuration read from `--config`. Every section is optional and
/// falls back to its defaults; command-line flags override file values.
///
/// ```json
/// {
///   "seed": 3,
///   "out": "runs/a",
///   "teacher": { "encoder": {...}, "position_slopes": [1.0, 0.5, 0, 0], "data": {...},
///                "train_samples": 32, "training": {...} },
///   "samples": { "train": 32, "val": 16 },
///   "sweep": { "lambda1": 0.01, "theta": 0.1, ... },
///   "conversion": { "lr": 0.0005, "task_epochs": 8, "max_layers": 2, ... },
///   "scaling": { "ns": [256, 512], "d": 32, ... },
///   "roofline": { "profile": {...}, "t": 6000, "d": 768, "heads": 12, "pulses": [12, 36] },
///   "memory": { "durations": [30, 60], "pulses": 12 }
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub teacher: TeacherSpec,
    pub samples: Samples,
    pub sweep: SweepHyperparams,
    pub conversion: ConversionConfig,
    pub scaling: ScalingConfig,
    pub roofline: RooflineConfig,
    pub memory: MemoryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Samples {
    pub train: usize,
    pub val: usize,
}

impl Default for Samples {
    fn default() -> Self {
        Self { train: 32, val: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RooflineConfig {
    pub profile: HardwareProfile,
    pub t: usize,
    pub d: usize,
    pub heads: usize,
    pub pulses: Vec<usize>,
    pub layers: usize,
    /// Sequence lengths for the modeled time-vs-length plot.
    pub sweep_t: Vec<usize>,
}

impl Default for RooflineConfig {
    fn default() -> Self {
        Self {
            profile: HardwareProfile::m4_pro(),
            t: 6000,
            d: 768,
            heads: 12,
            pulses: vec![12, 36],
            layers: 12,
            sweep_t: vec![500, 1000, 1500, 3000, 6000, 12000, 24000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub durations: Vec<f64>,
    pub pulses: usize,
    pub frame_rate: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            durations: vec![10.0, 30.0, 60.0, 120.0],
            pulses: 12,
            frame_rate: lpa_core::perfmodel::FRAME_RATE_HZ,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn data(&self) -> &SyntheticConfig {
        &self.teacher.data
    }
}
