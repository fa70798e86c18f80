//! The single declarative run configuration read by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, load_dataset, Sample, SynthSpec};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::DecodeOptions;
use crate::train::TrainConfig;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// A manifest to load instead of generating the synthetic dataset.
    pub manifest: Option<PathBuf>,
    /// The last `eval_images` samples form the held-out split.
    pub eval_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, eval_images: 100 }
    }
}

/// Tolerances of the gradient-check command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Bound on the relative error of single ops and blocks.
    pub tolerance: f64,
    /// Bound on the relative error of the end-to-end detector.
    pub end_to_end_tolerance: f64,
    /// Elements probed per input.
    pub max_elements: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { tolerance: 1e-4, end_to_end_tolerance: 1e-3, max_elements: 16 }
    }
}

/// Every setting of a run. Unknown keys are rejected and every field has a
/// default, so an empty document is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. [`RunConfig::resolved`] copies it into `train.seed` and
    /// `synth.seed`; randomness is split from it per purpose.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub eval: DecodeOptions,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            detector: DetectorConfig::mini(4),
            train: TrainConfig::toy(),
            synth: SynthSpec { num_images: 600, ..SynthSpec::default() },
            data: DataConfig::default(),
            eval: DecodeOptions::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The configuration with the root seed propagated, as echoed to the
    /// output directory.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c.synth.seed = c.seed;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train.apply_toggles(&self.detector).validate()?;
        if self.data.manifest.is_none() {
            self.synth.validate()?;
            if self.synth.image_size != self.detector.input_size || self.synth.channels != self.detector.in_channels {
                return Err(Error::Config(format!(
                    "synth images are {}x{}x{} but the detector expects {}x{}x{}",
                    self.synth.channels,
                    self.synth.image_size,
                    self.synth.image_size,
                    self.detector.in_channels,
                    self.detector.input_size,
                    self.detector.input_size
                )));
            }
            if self.synth.classes.len() + 1 != self.detector.num_classes {
                return Err(Error::Config(format!(
                    "detector num_classes {} must be the {} synth classes plus background",
                    self.detector.num_classes,
                    self.synth.classes.len()
                )));
            }
            if self.data.eval_images >= self.synth.num_images {
                return Err(Error::Config(format!(
                    "eval_images {} leaves no training images out of {}",
                    self.data.eval_images, self.synth.num_images
                )));
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset and splits it into (train, eval).
    /// Manifest images must already match the detector's input size.
    pub fn dataset(&self) -> Result<(Vec<String>, Vec<Sample>, Vec<Sample>)> {
        let c = self.resolved();
        let (classes, mut all) = match &c.data.manifest {
            Some(path) => load_dataset(path)?,
            None => (c.synth.class_names(), generate(&c.synth)?),
        };
        if classes.len() + 1 != c.detector.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the detector expects {}",
                classes.len(),
                c.detector.num_classes - 1
            )));
        }
        let want = [c.detector.in_channels, c.detector.input_size, c.detector.input_size];
        if let Some(bad) = all.iter().find(|s| s.image.shape() != want) {
            return Err(Error::Config(format!("image shape {:?} does not match the detector input {want:?}", bad.image.shape())));
        }
        if c.data.eval_images >= all.len() {
            return Err(Error::Config(format!("eval_images {} leaves no training images out of {}", c.data.eval_images, all.len())));
        }
        let eval = all.split_off(all.len() - c.data.eval_images);
        Ok((classes, all, eval))
    }
}
