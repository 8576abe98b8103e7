//! Pipeline configuration: profiles, JSON overrides, validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use lesionflow_core::models::{DenseNetSpec, UNetSpec};
use lesionflow_core::postprocess::Connectivity;
use lesionflow_core::radiomics::GBTParams;
use lesionflow_core::synth::PhantomConfig;
use lesionflow_core::train::{AugmentConfig, ClassifierConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of test cases generated without any lesion.
    pub test_no_lesion_fraction: f64,
    pub phantom: PhantomConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSection {
    /// Polynomial order for bias-field correction; None skips it.
    pub bias_order: Option<usize>,
    /// Resampling target in mm; None keeps the native spacing.
    pub target_spacing: Option<[f32; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostSection {
    pub threshold: f32,
    /// 6 or 26.
    pub connectivity: u8,
    pub volume_gate_mm3: f64,
    pub slice_fraction: f64,
    pub voxel_gate: usize,
    /// Optional weights for the two-model ensemble; None means uniform.
    pub ensemble_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub heatmap_grid: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictSection {
    /// Sliding-window patch in volume (x, y, z) order.
    pub patch: [usize; 3],
    pub overlap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub setting: u8,
    pub work_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for the compute pool; 0 picks the machine default.
    pub jobs: usize,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub unet: UNetSpec,
    pub unetpp: UNetSpec,
    pub densenet: DenseNetSpec,
    pub folds: usize,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub classifier: ClassifierConfig,
    pub gbt: GBTParams,
    /// Cap on harvested voxel rows per validation case for the FP classifier.
    pub fpclf_max_voxels_per_case: usize,
    pub post: PostSection,
    pub eval: EvalSection,
    pub predict: PredictSection,
}

impl PipelineConfig {
    /// Desk profile: everything sized to finish on a laptop CPU in minutes.
    pub fn desk() -> Self {
        PipelineConfig {
            setting: 1,
            work_dir: PathBuf::from("work"),
            seed: 7,
            jobs: 0,
            synth: SynthSection {
                n_train: 20,
                n_test: 5,
                test_no_lesion_fraction: 0.2,
                phantom: PhantomConfig::default(),
            },
            preprocess: PreprocessSection {
                bias_order: Some(2),
                target_spacing: None,
            },
            unet: UNetSpec {
                in_channels: 1,
                base_width: 8,
                depth: 3,
                classes: 2,
            },
            unetpp: UNetSpec {
                in_channels: 1,
                base_width: 8,
                depth: 3,
                classes: 2,
            },
            densenet: DenseNetSpec {
                growth: 8,
                layers_per_block: 2,
                blocks: 2,
                classes: 2,
            },
            folds: 2,
            train: TrainConfig {
                epochs: 30,
                batch_size: 2,
                initial_lr: 1e-2,
                patch: [32, 32, 32],
                fg_prob: 0.5,
                seed: 0,
                dice_weight: 1.0,
                ce_weight: 1.0,
                iters_per_epoch: Some(10),
            },
            augment: AugmentConfig::default(),
            classifier: ClassifierConfig {
                epochs: 8,
                batch_size: 8,
                initial_lr: 1e-2,
                seed: 0,
                neck_exclude: 4,
                val_fraction: 0.2,
            },
            gbt: GBTParams::default(),
            fpclf_max_voxels_per_case: 3000,
            post: PostSection {
                threshold: 0.5,
                connectivity: 26,
                volume_gate_mm3: 2000.0,
                slice_fraction: 0.5,
                voxel_gate: 1000,
                ensemble_weights: None,
            },
            eval: EvalSection {
                heatmap_grid: [32, 32, 32],
            },
            predict: PredictSection {
                patch: [32, 32, 32],
                overlap: 0.5,
            },
        }
    }

    /// Paper profile: full training scale. No runtime promises.
    pub fn paper() -> Self {
        let mut cfg = PipelineConfig::desk();
        cfg.synth.phantom.shape = [160, 192, 160];
        cfg.synth.phantom.lesion_radius_range = (5.0, 20.0);
        cfg.synth.n_train = 100;
        cfg.synth.n_test = 24;
        cfg.unet.base_width = 32;
        cfg.unet.depth = 5;
        cfg.unetpp.base_width = 32;
        cfg.unetpp.depth = 5;
        cfg.densenet = DenseNetSpec {
            growth: 16,
            layers_per_block: 4,
            blocks: 3,
            classes: 2,
        };
        cfg.folds = 5;
        cfg.train.epochs = 1000;
        cfg.train.patch = [128, 160, 112];
        cfg.train.iters_per_epoch = Some(250);
        cfg.classifier.epochs = 40;
        cfg.classifier.neck_exclude = 45;
        cfg.eval.heatmap_grid = [64, 64, 64];
        cfg.predict.patch = [128, 160, 112];
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(PipelineConfig::desk()),
            "paper" => Ok(PipelineConfig::paper()),
            other => Err(CliError::Config(format!(
                "unknown profile '{other}', expected desk or paper"
            ))),
        }
    }

    /// Profile base with a partial JSON document merged on top: objects
    /// merge key by key, everything else replaces the base value.
    pub fn from_json_overlay(base: Self, overlay: &serde_json::Value) -> Result<Self> {
        let mut doc = serde_json::to_value(&base)?;
        merge_json(&mut doc, overlay);
        let cfg: PipelineConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn connectivity(&self) -> Result<Connectivity> {
        match self.post.connectivity {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(CliError::Config(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=7).contains(&self.setting) {
            return Err(CliError::Config(format!(
                "setting must be 1..7, got {}",
                self.setting
            )));
        }
        if self.synth.n_train == 0 || self.synth.n_test == 0 {
            return Err(CliError::Config("cohort sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.test_no_lesion_fraction) {
            return Err(CliError::Config(
                "test_no_lesion_fraction must be in [0, 1]".into(),
            ));
        }
        if self.folds == 0 || self.folds > self.synth.n_train {
            return Err(CliError::Config(format!(
                "folds must be in [1, n_train], got {}",
                self.folds
            )));
        }
        if self.post.volume_gate_mm3 < 0.0 {
            return Err(CliError::Config("volume gate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.post.slice_fraction) {
            return Err(CliError::Config("slice fraction must be in [0, 1]".into()));
        }
        if !(self.post.threshold > 0.0 && self.post.threshold < 1.0) {
            return Err(CliError::Config("threshold must be in (0, 1)".into()));
        }
        self.connectivity()?;
        if let Some(w) = &self.post.ensemble_weights {
            if w.len() != 2 {
                return Err(CliError::Config(
                    "ensemble_weights must hold exactly 2 entries".into(),
                ));
            }
        }
        if self.fpclf_max_voxels_per_case == 0 {
            return Err(CliError::Config(
                "fpclf_max_voxels_per_case must be >= 1".into(),
            ));
        }
        if self.eval.heatmap_grid.iter().any(|&g| g == 0) {
            return Err(CliError::Config("heatmap grid dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.predict.overlap) {
            return Err(CliError::Config("overlap must be in [0, 1)".into()));
        }
        if self.predict.patch.iter().any(|&p| p == 0) {
            return Err(CliError::Config("predict patch dims must be >= 1".into()));
        }
        self.unet.validate()?;
        self.unetpp.validate()?;
        self.densenet.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn desk_profile_is_valid() {
        PipelineConfig::desk().validate().unwrap();
        PipelineConfig::paper().validate().unwrap();
    }

    #[test]
    fn overlay_merges_nested_fields() {
        let over = json!({"setting": 3, "train": {"epochs": 2}, "post": {"voxel_gate": 9}});
        let cfg = PipelineConfig::from_json_overlay(PipelineConfig::desk(), &over).unwrap();
        assert_eq!(cfg.setting, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.post.voxel_gate, 9);
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn overlay_rejects_bad_setting() {
        let over = json!({"setting": 9});
        let err = PipelineConfig::from_json_overlay(PipelineConfig::desk(), &over);
        assert!(err.is_err());
    }

    #[test]
    fn unknown_profile_is_an_error() {
        assert!(PipelineConfig::profile("prod").is_err());
        assert!(PipelineConfig::profile("desk").is_ok());
    }

    #[test]
    fn connectivity_mapping() {
        let mut cfg = PipelineConfig::desk();
        assert!(matches!(
            cfg.connectivity().unwrap(),
            Connectivity::TwentySix
        ));
        cfg.post.connectivity = 6;
        assert!(matches!(cfg.connectivity().unwrap(), Connectivity::Six));
        cfg.post.connectivity = 18;
        assert!(cfg.connectivity().is_err());
    }
}
