//! Stage orchestration for settings 1 through 7.
//!
//! Settings compose the shared stages as follows: 1 is cross-validated
//! U-Net with fold-averaged probabilities, 2 a single U-Net++ trained on
//! all cases, 3 and 4 add the slice-classifier filter to 1 and 2, 5 and 6
//! add the radiomics filter on top, and 7 averages the U-Net and U-Net++
//! probability maps before binarization. Every stage writes into its own
//! content-addressed directory (see [`crate::stages`]), so settings that
//! share work share artifacts and re-runs are no-ops.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use lesionflow_core::eval::{
    case_result, error_heatmap, metrics_to_csv, paired_ttest, pearson_log_size, stratified_dsc,
    CaseResult, ChallengeMetrics, Manifest, ManifestCase,
};
use lesionflow_core::models::{
    build_densenet2d, build_unet3d, build_unetpp3d, count_params, predict_probability,
};
use lesionflow_core::nifti::{read_nifti, read_nifti_mask, write_nifti, write_nifti_mask};
use lesionflow_core::nn::graph::Graph;
use lesionflow_core::postprocess::{
    binarize, connected_components, ensemble_average, radiomics_filter, slice_filter,
    FilterReport,
};
use lesionflow_core::preprocess::{preprocess_case, restore_prediction, PreprocessMeta};
use lesionflow_core::radiomics::{component_voxel_features, feature_schema, train_gbt, FeatureTable, GBTModel};
use lesionflow_core::synth::{derive_seed, generate_cohort, PhantomCase};
use lesionflow_core::train::{
    make_folds, trace_to_csv, train_segmentation, train_slice_classifier, FoldAssignment,
};
use lesionflow_core::volume::{Mask, Volume};
use lesionflow_core::Error as CoreError;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::stages::{ensure_stage, require_stage, stage_hash, write_provenance, StageRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Arch {
    Unet,
    Unetpp,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Unetpp => "unetpp",
        }
    }
}

// Distinct derive_seed streams off the master seed. Keeping them in one
// place guards against accidental reuse.
const SEED_TRAIN_COHORT: u64 = 11;
const SEED_TEST_COHORT: u64 = 12;
const SEED_FOLDS: u64 = 21;
const SEED_UNET_INIT: u64 = 100;
const SEED_UNET_TRAIN: u64 = 130;
const SEED_UNETPP_INIT: u64 = 200;
const SEED_UNETPP_TRAIN: u64 = 201;
const SEED_CLF_INIT: u64 = 300;
const SEED_CLF_TRAIN: u64 = 301;
const SEED_FPCLF_SAMPLE: u64 = 400;
const SEED_GBT: u64 = 410;

pub struct Pipeline {
    cfg: PipelineConfig,
    stages: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            stages: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn work(&self) -> PathBuf {
        self.cfg.work_dir.clone()
    }

    fn note(&mut self, stage: &StageRef) {
        self.stages.insert(stage.name.clone(), stage.hash.clone());
    }

    // ---- stage keys -----------------------------------------------------

    fn synth_key(&self) -> Result<Value> {
        let s = &self.cfg.synth;
        Ok(json!({
            "stage": "synth",
            "phantom": serde_json::to_value(&s.phantom)?,
            "n_train": s.n_train,
            "n_test": s.n_test,
            "test_no_lesion_fraction": s.test_no_lesion_fraction,
            "seed": self.cfg.seed,
        }))
    }

    fn preprocess_key(&self) -> Result<Value> {
        Ok(json!({
            "stage": "preprocess",
            "upstream": stage_hash(&self.synth_key()?)?,
            "bias_order": self.cfg.preprocess.bias_order,
            "target_spacing": self.cfg.preprocess.target_spacing,
        }))
    }

    fn train_seg_key(&self, arch: Arch) -> Result<Value> {
        let c = &self.cfg;
        let (spec, folds) = match arch {
            Arch::Unet => (&c.unet, c.folds),
            Arch::Unetpp => (&c.unetpp, 1),
        };
        Ok(json!({
            "stage": format!("train-seg-{}", arch.as_str()),
            "upstream": stage_hash(&self.preprocess_key()?)?,
            "spec": serde_json::to_value(spec)?,
            "folds": folds,
            "train": serde_json::to_value(&c.train)?,
            "augment": serde_json::to_value(&c.augment)?,
            "seed": c.seed,
        }))
    }

    fn train_clf_key(&self) -> Result<Value> {
        Ok(json!({
            "stage": "train-clf",
            "upstream": stage_hash(&self.preprocess_key()?)?,
            "spec": serde_json::to_value(&self.cfg.densenet)?,
            "classifier": serde_json::to_value(&self.cfg.classifier)?,
            "seed": self.cfg.seed,
        }))
    }

    fn train_fpclf_key(&self) -> Result<Value> {
        let c = &self.cfg;
        Ok(json!({
            "stage": "train-fpclf",
            "upstream": [
                stage_hash(&self.preprocess_key()?)?,
                stage_hash(&self.train_seg_key(Arch::Unet)?)?,
            ],
            "gbt": serde_json::to_value(&c.gbt)?,
            "threshold": c.post.threshold,
            "connectivity": c.post.connectivity,
            "max_voxels_per_case": c.fpclf_max_voxels_per_case,
            "predict": serde_json::to_value(&c.predict)?,
            "seed": c.seed,
        }))
    }

    fn predict_key(&self, arch: Arch) -> Result<Value> {
        Ok(json!({
            "stage": format!("predict-{}", arch.as_str()),
            "upstream": [
                stage_hash(&self.preprocess_key()?)?,
                stage_hash(&self.train_seg_key(arch)?)?,
            ],
            "predict": serde_json::to_value(&self.cfg.predict)?,
        }))
    }

    fn ensemble_key(&self) -> Result<Value> {
        Ok(json!({
            "stage": "ensemble",
            "upstream": [
                stage_hash(&self.predict_key(Arch::Unet)?)?,
                stage_hash(&self.predict_key(Arch::Unetpp)?)?,
            ],
            "weights": self.cfg.post.ensemble_weights,
        }))
    }

    /// The probability-map source a setting binarizes.
    fn probs_source(&self, setting: u8) -> Result<(String, Value, &'static str)> {
        match setting {
            1 | 3 | 5 => Ok((
                "predict-unet".into(),
                self.predict_key(Arch::Unet)?,
                "predict --arch unet",
            )),
            2 | 4 | 6 => Ok((
                "predict-unetpp".into(),
                self.predict_key(Arch::Unetpp)?,
                "predict --arch unetpp",
            )),
            7 => Ok(("ensemble".into(), self.ensemble_key()?, "ensemble")),
            other => Err(CliError::Config(format!("setting must be 1..7, got {other}"))),
        }
    }

    fn postprocess_key(&self, setting: u8) -> Result<Value> {
        let c = &self.cfg;
        let (source, source_key, _) = self.probs_source(setting)?;
        let mut upstream = vec![
            stage_hash(&source_key)?,
            stage_hash(&self.preprocess_key()?)?,
        ];
        if (3..=6).contains(&setting) {
            upstream.push(stage_hash(&self.train_clf_key()?)?);
        }
        if (5..=6).contains(&setting) {
            upstream.push(stage_hash(&self.train_fpclf_key()?)?);
        }
        Ok(json!({
            "stage": format!("postprocess-s{setting}"),
            "upstream": upstream,
            "source": source,
            "threshold": c.post.threshold,
            "connectivity": c.post.connectivity,
            "volume_gate_mm3": c.post.volume_gate_mm3,
            "slice_fraction": c.post.slice_fraction,
            "voxel_gate": c.post.voxel_gate,
        }))
    }

    fn evaluate_key(&self, setting: u8) -> Result<Value> {
        Ok(json!({
            "stage": format!("evaluate-s{setting}"),
            "upstream": [
                stage_hash(&self.synth_key()?)?,
                stage_hash(&self.postprocess_key(setting)?)?,
            ],
        }))
    }

    fn report_key(&self, settings: &[u8]) -> Result<Value> {
        let mut upstream = Vec::with_capacity(settings.len());
        for &s in settings {
            upstream.push(stage_hash(&self.evaluate_key(s)?)?);
        }
        Ok(json!({
            "stage": "report",
            "upstream": upstream,
            "settings": settings,
            "heatmap_grid": self.cfg.eval.heatmap_grid,
        }))
    }

    // ---- stage runners ---------------------------------------------------

    pub fn synth(&mut self) -> Result<StageRef> {
        let key = self.synth_key()?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "synth", &key, |dir| build_synth(&cfg, dir))?;
        self.note(&stage);
        Ok(stage)
    }

    fn require_synth(&mut self) -> Result<StageRef> {
        let stage = require_stage(&self.work(), "synth", &self.synth_key()?, "synth")?;
        self.note(&stage);
        Ok(stage)
    }

    fn require_preprocess(&mut self) -> Result<StageRef> {
        let stage = require_stage(
            &self.work(),
            "preprocess",
            &self.preprocess_key()?,
            "preprocess",
        )?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn preprocess(&mut self) -> Result<StageRef> {
        let synth = self.require_synth()?;
        let key = self.preprocess_key()?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "preprocess", &key, |dir| {
            build_preprocess(&cfg, &synth.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn train_seg(&mut self, arch: Arch) -> Result<StageRef> {
        let prep = self.require_preprocess()?;
        let key = self.train_seg_key(arch)?;
        let name = format!("train-seg-{}", arch.as_str());
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), &name, &key, |dir| {
            build_train_seg(&cfg, arch, &prep.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn train_clf(&mut self) -> Result<StageRef> {
        let synth = self.require_synth()?;
        let prep = self.require_preprocess()?;
        let key = self.train_clf_key()?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "train-clf", &key, |dir| {
            build_train_clf(&cfg, &synth.dir, &prep.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn train_fpclf(&mut self) -> Result<StageRef> {
        let synth = self.require_synth()?;
        let prep = self.require_preprocess()?;
        let seg = require_stage(
            &self.work(),
            "train-seg-unet",
            &self.train_seg_key(Arch::Unet)?,
            "train-seg --arch unet",
        )?;
        self.note(&seg);
        let key = self.train_fpclf_key()?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "train-fpclf", &key, |dir| {
            build_train_fpclf(&cfg, &synth.dir, &prep.dir, &seg.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn predict(&mut self, arch: Arch) -> Result<StageRef> {
        let prep = self.require_preprocess()?;
        let seg_name = format!("train-seg-{}", arch.as_str());
        let seg = require_stage(
            &self.work(),
            &seg_name,
            &self.train_seg_key(arch)?,
            &format!("train-seg --arch {}", arch.as_str()),
        )?;
        self.note(&seg);
        let key = self.predict_key(arch)?;
        let name = format!("predict-{}", arch.as_str());
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), &name, &key, |dir| {
            build_predict(&cfg, arch, &prep.dir, &seg.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn ensemble(&mut self) -> Result<StageRef> {
        let prep = self.require_preprocess()?;
        let a = require_stage(
            &self.work(),
            "predict-unet",
            &self.predict_key(Arch::Unet)?,
            "predict --arch unet",
        )?;
        self.note(&a);
        let b = require_stage(
            &self.work(),
            "predict-unetpp",
            &self.predict_key(Arch::Unetpp)?,
            "predict --arch unetpp",
        )?;
        self.note(&b);
        let key = self.ensemble_key()?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "ensemble", &key, |dir| {
            build_ensemble(&cfg, &prep.dir, &a.dir, &b.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn postprocess(&mut self) -> Result<StageRef> {
        let setting = self.cfg.setting;
        let prep = self.require_preprocess()?;
        let (source_name, source_key, source_cmd) = self.probs_source(setting)?;
        let probs = require_stage(&self.work(), &source_name, &source_key, source_cmd)?;
        self.note(&probs);
        let clf = if (3..=6).contains(&setting) {
            let s = require_stage(&self.work(), "train-clf", &self.train_clf_key()?, "train-clf")?;
            self.note(&s);
            Some(s)
        } else {
            None
        };
        let fpclf = if (5..=6).contains(&setting) {
            let s = require_stage(
                &self.work(),
                "train-fpclf",
                &self.train_fpclf_key()?,
                "train-fpclf",
            )?;
            self.note(&s);
            Some(s)
        } else {
            None
        };
        let key = self.postprocess_key(setting)?;
        let name = format!("postprocess-s{setting}");
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), &name, &key, |dir| {
            build_postprocess(
                &cfg,
                setting,
                &probs.dir,
                &prep.dir,
                clf.as_ref().map(|s| s.dir.as_path()),
                fpclf.as_ref().map(|s| s.dir.as_path()),
                dir,
            )
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn evaluate(&mut self) -> Result<StageRef> {
        let setting = self.cfg.setting;
        let synth = self.require_synth()?;
        let post = require_stage(
            &self.work(),
            &format!("postprocess-s{setting}"),
            &self.postprocess_key(setting)?,
            "postprocess",
        )?;
        self.note(&post);
        let key = self.evaluate_key(setting)?;
        let name = format!("evaluate-s{setting}");
        let stage = ensure_stage(&self.work(), &name, &key, |dir| {
            build_evaluate(setting, &synth.dir, &post.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    pub fn report(&mut self, settings: &[u8]) -> Result<StageRef> {
        if settings.is_empty() {
            return Err(CliError::Config("report needs at least one setting".into()));
        }
        if let Some(&bad) = settings.iter().find(|s| !(1..=7).contains(*s)) {
            return Err(CliError::Config(format!("setting must be 1..7, got {bad}")));
        }
        let synth = self.require_synth()?;
        let mut evals = Vec::with_capacity(settings.len());
        for &s in settings {
            let ev = require_stage(
                &self.work(),
                &format!("evaluate-s{s}"),
                &self.evaluate_key(s)?,
                "evaluate",
            )?;
            self.note(&ev);
            evals.push((s, ev.dir.clone()));
        }
        let primary = settings[0];
        let post = require_stage(
            &self.work(),
            &format!("postprocess-s{primary}"),
            &self.postprocess_key(primary)?,
            "postprocess",
        )?;
        self.note(&post);
        let key = self.report_key(settings)?;
        let cfg = self.cfg.clone();
        let stage = ensure_stage(&self.work(), "report", &key, |dir| {
            build_report(&cfg, &evals, &synth.dir, &post.dir, dir)
        })?;
        self.note(&stage);
        Ok(stage)
    }

    /// Run the configured setting end to end and return its metrics.
    pub fn run_setting(&mut self) -> Result<ChallengeMetrics> {
        let s = self.cfg.setting;
        self.synth()?;
        self.preprocess()?;
        match s {
            1 | 3 | 5 => {
                self.train_seg(Arch::Unet)?;
            }
            2 | 4 => {
                self.train_seg(Arch::Unetpp)?;
            }
            // The radiomics filter trains on U-Net cross-validation
            // predictions, so setting 6 needs both architectures.
            6 | 7 => {
                self.train_seg(Arch::Unet)?;
                self.train_seg(Arch::Unetpp)?;
            }
            _ => {}
        }
        if (3..=6).contains(&s) {
            self.train_clf()?;
        }
        if s == 5 || s == 6 {
            self.train_fpclf()?;
        }
        match s {
            1 | 3 | 5 => {
                self.predict(Arch::Unet)?;
            }
            2 | 4 | 6 => {
                self.predict(Arch::Unetpp)?;
            }
            7 => {
                self.predict(Arch::Unet)?;
                self.predict(Arch::Unetpp)?;
                self.ensemble()?;
            }
            _ => {}
        }
        self.postprocess()?;
        let ev = self.evaluate()?;
        let metrics: ChallengeMetrics =
            serde_json::from_str(&fs::read_to_string(ev.dir.join("metrics.json"))?)?;
        Ok(metrics)
    }

    pub fn write_run_record(&self, command: &str) -> Result<()> {
        write_provenance(
            &self.cfg.work_dir,
            command,
            &serde_json::to_value(&self.cfg)?,
            self.cfg.seed,
            &self.stages,
        )
    }
}

// ---- stage builders -------------------------------------------------------

fn build_synth(cfg: &PipelineConfig, dir: &Path) -> Result<Value> {
    let s = &cfg.synth;
    let train = generate_cohort(&s.phantom, s.n_train, 0.0, derive_seed(cfg.seed, SEED_TRAIN_COHORT))?;
    let test = generate_cohort(
        &s.phantom,
        s.n_test,
        s.test_no_lesion_fraction,
        derive_seed(cfg.seed, SEED_TEST_COHORT),
    )?;
    let write_split = |split: &str, cases: &[PhantomCase]| -> Result<Manifest> {
        fs::create_dir_all(dir.join(split))?;
        let mut out = Vec::with_capacity(cases.len());
        for c in cases {
            let image = format!("{split}/{}_img.nii", c.id);
            let mask = format!("{split}/{}_msk.nii", c.id);
            write_nifti(&dir.join(&image), &c.volume)?;
            write_nifti_mask(&dir.join(&mask), &c.mask)?;
            out.push(ManifestCase {
                id: c.id.clone(),
                image,
                mask,
                has_lesion: c.mask.count() > 0,
            });
        }
        Ok(Manifest { cases: out })
    };
    let train_m = write_split("train", &train)?;
    let test_m = write_split("test", &test)?;
    train_m.write(&dir.join("train_manifest.json"))?;
    test_m.write(&dir.join("test_manifest.json"))?;
    let no_lesion = test_m.cases.iter().filter(|c| !c.has_lesion).count();
    Ok(json!({
        "train": train.len(),
        "test": test.len(),
        "test_no_lesion": no_lesion,
    }))
}

fn build_preprocess(cfg: &PipelineConfig, synth_dir: &Path, dir: &Path) -> Result<Value> {
    let train = Manifest::read(&synth_dir.join("train_manifest.json"))?;
    let test = Manifest::read(&synth_dir.join("test_manifest.json"))?;
    let p = &cfg.preprocess;
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;

    let mut train_out = Vec::with_capacity(train.cases.len());
    for c in &train.cases {
        let v = read_nifti(&synth_dir.join(&c.image))?;
        let m = read_nifti_mask(&synth_dir.join(&c.mask))?;
        let prep = preprocess_case(&v, Some(&m), p.bias_order, p.target_spacing)?;
        let image = format!("train/{}_img.nii", c.id);
        let mask = format!("train/{}_msk.nii", c.id);
        write_nifti(&dir.join(&image), &prep.volume)?;
        write_nifti_mask(&dir.join(&mask), prep.mask.as_ref().expect("mask follows case"))?;
        fs::write(
            dir.join(format!("train/{}_meta.json", c.id)),
            serde_json::to_string_pretty(&prep.meta)?,
        )?;
        // Normalized intensities embedded back into the original grid;
        // the slice classifier and radiomics features live in this domain.
        let norm = restore_prediction(&prep.volume, &prep.meta)?;
        write_nifti(&dir.join(format!("train/{}_norm.nii", c.id)), &norm)?;
        train_out.push(ManifestCase {
            id: c.id.clone(),
            image,
            mask,
            has_lesion: c.has_lesion,
        });
    }

    let mut test_out = Vec::with_capacity(test.cases.len());
    for c in &test.cases {
        let v = read_nifti(&synth_dir.join(&c.image))?;
        let prep = preprocess_case(&v, None, p.bias_order, p.target_spacing)?;
        let image = format!("test/{}_img.nii", c.id);
        write_nifti(&dir.join(&image), &prep.volume)?;
        fs::write(
            dir.join(format!("test/{}_meta.json", c.id)),
            serde_json::to_string_pretty(&prep.meta)?,
        )?;
        let norm = restore_prediction(&prep.volume, &prep.meta)?;
        write_nifti(&dir.join(format!("test/{}_norm.nii", c.id)), &norm)?;
        test_out.push(ManifestCase {
            id: c.id.clone(),
            image,
            mask: String::new(),
            has_lesion: c.has_lesion,
        });
    }

    Manifest { cases: train_out }.write(&dir.join("train_manifest.json"))?;
    Manifest { cases: test_out }.write(&dir.join("test_manifest.json"))?;
    Ok(json!({"train": train.cases.len(), "test": test.cases.len()}))
}

fn load_train_cases(prep_dir: &Path) -> Result<(Vec<String>, Vec<(Volume, Mask)>)> {
    let manifest = Manifest::read(&prep_dir.join("train_manifest.json"))?;
    let mut ids = Vec::with_capacity(manifest.cases.len());
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        let v = read_nifti(&prep_dir.join(&c.image))?;
        let m = read_nifti_mask(&prep_dir.join(&c.mask))?;
        ids.push(c.id.clone());
        cases.push((v, m));
    }
    Ok((ids, cases))
}

fn build_train_seg(cfg: &PipelineConfig, arch: Arch, prep_dir: &Path, dir: &Path) -> Result<Value> {
    let (ids, cases) = load_train_cases(prep_dir)?;
    match arch {
        Arch::Unet => {
            let folds = make_folds(&ids, cfg.folds, derive_seed(cfg.seed, SEED_FOLDS))?;
            fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&folds)?)?;
            let mut final_losses = Vec::with_capacity(cfg.folds);
            let mut params = 0usize;
            for f in 0..cfg.folds {
                let mut g = build_unet3d(&cfg.unet, derive_seed(cfg.seed, SEED_UNET_INIT + f as u64))?;
                params = count_params(&g);
                let train_cases: Vec<(Volume, Mask)> = if cfg.folds == 1 {
                    cases.clone()
                } else {
                    ids.iter()
                        .zip(&cases)
                        .filter(|(id, _)| folds.fold_of(id) != Some(f))
                        .map(|(_, c)| c.clone())
                        .collect()
                };
                let mut tc = cfg.train.clone();
                tc.seed = derive_seed(cfg.seed, SEED_UNET_TRAIN + f as u64);
                let trace = train_segmentation(&mut g, &train_cases, &tc, &cfg.augment)?;
                g.save(&dir.join(format!("fold_{f}.ckpt")))?;
                fs::write(dir.join(format!("trace_fold_{f}.csv")), trace_to_csv(&trace))?;
                final_losses.push(trace.last().map_or(f64::NAN, |s| s.loss));
            }
            Ok(json!({
                "arch": "unet",
                "folds": cfg.folds,
                "params": params,
                "final_loss": final_losses,
            }))
        }
        Arch::Unetpp => {
            let mut g = build_unetpp3d(&cfg.unetpp, derive_seed(cfg.seed, SEED_UNETPP_INIT))?;
            let mut tc = cfg.train.clone();
            tc.seed = derive_seed(cfg.seed, SEED_UNETPP_TRAIN);
            let trace = train_segmentation(&mut g, &cases, &tc, &cfg.augment)?;
            g.save(&dir.join("model.ckpt"))?;
            fs::write(dir.join("trace.csv"), trace_to_csv(&trace))?;
            Ok(json!({
                "arch": "unetpp",
                "folds": 1,
                "params": count_params(&g),
                "final_loss": trace.last().map_or(f64::NAN, |s| s.loss),
            }))
        }
    }
}

fn build_train_clf(cfg: &PipelineConfig, synth_dir: &Path, prep_dir: &Path, dir: &Path) -> Result<Value> {
    let manifest = Manifest::read(&synth_dir.join("train_manifest.json"))?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        let norm = read_nifti(&prep_dir.join(format!("train/{}_norm.nii", c.id)))?;
        let gt = read_nifti_mask(&synth_dir.join(&c.mask))?;
        cases.push((norm, gt));
    }
    let mut g = build_densenet2d(&cfg.densenet, derive_seed(cfg.seed, SEED_CLF_INIT))?;
    let mut cc = cfg.classifier.clone();
    cc.seed = derive_seed(cfg.seed, SEED_CLF_TRAIN);
    let (val_accuracy, trace) = train_slice_classifier(&mut g, &cases, &cc)?;
    g.save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("trace.csv"), trace_to_csv(&trace))?;
    fs::write(
        dir.join("clf.json"),
        serde_json::to_string_pretty(&json!({"val_accuracy": val_accuracy}))?,
    )?;
    Ok(json!({"val_accuracy": val_accuracy}))
}

/// Deterministically keep at most `cap` rows, preserving relative order.
fn subsample(rows: &mut Vec<Vec<f64>>, labels: &mut Vec<u8>, cap: usize, seed: u64) {
    let n = rows.len();
    if n <= cap {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..cap {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut keep = idx[..cap].to_vec();
    keep.sort_unstable();
    *rows = keep.iter().map(|&i| std::mem::take(&mut rows[i])).collect();
    *labels = keep.iter().map(|&i| labels[i]).collect();
}

fn build_train_fpclf(
    cfg: &PipelineConfig,
    synth_dir: &Path,
    prep_dir: &Path,
    seg_dir: &Path,
    dir: &Path,
) -> Result<Value> {
    let manifest = Manifest::read(&synth_dir.join("train_manifest.json"))?;
    let by_id: BTreeMap<&str, &ManifestCase> =
        manifest.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let folds: FoldAssignment =
        serde_json::from_str(&fs::read_to_string(seg_dir.join("folds.json"))?)?;
    let conn = cfg.connectivity()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut case_counter = 0u64;
    for f in 0..folds.k {
        let mut g = build_unet3d(&cfg.unet, 0)?;
        g.load(&seg_dir.join(format!("fold_{f}.ckpt")))?;
        for id in folds.cases_in(f) {
            let mc = by_id.get(id.as_str()).ok_or_else(|| {
                CliError::Core(CoreError::Dataset(format!("fold case '{id}' not in manifest")))
            })?;
            let img = read_nifti(&prep_dir.join(format!("train/{id}_img.nii")))?;
            let meta: PreprocessMeta = serde_json::from_str(&fs::read_to_string(
                prep_dir.join(format!("train/{id}_meta.json")),
            )?)?;
            let norm = read_nifti(&prep_dir.join(format!("train/{id}_norm.nii")))?;
            let gt = read_nifti_mask(&synth_dir.join(&mc.mask))?;
            let prob = predict_probability(&g, &img, cfg.predict.patch, cfg.predict.overlap)?;
            let restored = restore_prediction(&prob, &meta)?;
            let mask = binarize(&restored, cfg.post.threshold);

            let mut case_rows = Vec::new();
            let mut case_labels = Vec::new();
            for comp in &connected_components(&mask, conn) {
                let feats = component_voxel_features(&norm, &mask, comp)?;
                for (row, &flat) in feats.into_iter().zip(&comp.voxels) {
                    let [x, y, z] = comp.coord(flat);
                    case_rows.push(row);
                    case_labels.push(u8::from(gt.get(x, y, z) == 1));
                }
            }
            subsample(
                &mut case_rows,
                &mut case_labels,
                cfg.fpclf_max_voxels_per_case,
                derive_seed(cfg.seed, SEED_FPCLF_SAMPLE + case_counter),
            );
            rows.extend(case_rows);
            labels.extend(case_labels);
            case_counter += 1;
        }
    }

    let positives = labels.iter().filter(|&&l| l == 1).count();
    if labels.len() < 2 {
        return Err(CliError::Core(CoreError::Dataset(
            "cross-validation predictions yielded fewer than 2 voxels".into(),
        )));
    }
    if positives == 0 || positives == labels.len() {
        return Err(CliError::Core(CoreError::Dataset(format!(
            "harvested voxels are single-class ({positives} of {} positive)",
            labels.len()
        ))));
    }

    let table = FeatureTable {
        names: feature_schema(),
        rows,
    };
    let mut params = cfg.gbt.clone();
    params.seed = derive_seed(cfg.seed, SEED_GBT);
    let (model, trace) = train_gbt(&table, &labels, &params)?;
    fs::write(dir.join("gbt.json"), serde_json::to_string_pretty(&model)?)?;
    fs::write(dir.join("features.csv"), table.to_csv(Some(&labels)))?;
    let mut csv = String::from("round,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join("trace.csv"), csv)?;
    Ok(json!({
        "rows": labels.len(),
        "positives": positives,
        "final_loss": trace.last(),
    }))
}

fn build_predict(
    cfg: &PipelineConfig,
    arch: Arch,
    prep_dir: &Path,
    seg_dir: &Path,
    dir: &Path,
) -> Result<Value> {
    let manifest = Manifest::read(&prep_dir.join("test_manifest.json"))?;
    let mut imgs = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        imgs.push((c.id.clone(), read_nifti(&prep_dir.join(&c.image))?));
    }
    let ckpts: Vec<PathBuf> = match arch {
        Arch::Unet => (0..cfg.folds)
            .map(|f| seg_dir.join(format!("fold_{f}.ckpt")))
            .collect(),
        Arch::Unetpp => vec![seg_dir.join("model.ckpt")],
    };
    let mut maps: Vec<Vec<Volume>> = vec![Vec::with_capacity(ckpts.len()); imgs.len()];
    for ckpt in &ckpts {
        let mut g = match arch {
            Arch::Unet => build_unet3d(&cfg.unet, 0)?,
            Arch::Unetpp => build_unetpp3d(&cfg.unetpp, 0)?,
        };
        g.load(ckpt)?;
        for (i, (_, v)) in imgs.iter().enumerate() {
            maps[i].push(predict_probability(&g, v, cfg.predict.patch, cfg.predict.overlap)?);
        }
    }
    for ((id, _), fold_maps) in imgs.iter().zip(&maps) {
        let avg = ensemble_average(fold_maps, None)?;
        write_nifti(&dir.join(format!("{id}_prob.nii")), &avg)?;
    }
    Ok(json!({"cases": imgs.len(), "models": ckpts.len()}))
}

fn build_ensemble(
    cfg: &PipelineConfig,
    prep_dir: &Path,
    unet_dir: &Path,
    unetpp_dir: &Path,
    dir: &Path,
) -> Result<Value> {
    let manifest = Manifest::read(&prep_dir.join("test_manifest.json"))?;
    for c in &manifest.cases {
        let a = read_nifti(&unet_dir.join(format!("{}_prob.nii", c.id)))?;
        let b = read_nifti(&unetpp_dir.join(format!("{}_prob.nii", c.id)))?;
        let fused = ensemble_average(&[a, b], cfg.post.ensemble_weights.as_deref())?;
        write_nifti(&dir.join(format!("{}_prob.nii", c.id)), &fused)?;
    }
    Ok(json!({"cases": manifest.cases.len()}))
}

fn build_postprocess(
    cfg: &PipelineConfig,
    setting: u8,
    probs_dir: &Path,
    prep_dir: &Path,
    clf_dir: Option<&Path>,
    fpclf_dir: Option<&Path>,
    dir: &Path,
) -> Result<Value> {
    let manifest = Manifest::read(&prep_dir.join("test_manifest.json"))?;
    fs::create_dir_all(dir.join("masks"))?;
    fs::create_dir_all(dir.join("reports"))?;
    let clf: Option<Graph> = match clf_dir {
        Some(d) => {
            let mut g = build_densenet2d(&cfg.densenet, 0)?;
            g.load(&d.join("model.ckpt"))?;
            Some(g)
        }
        None => None,
    };
    let gbt: Option<GBTModel> = match fpclf_dir {
        Some(d) => Some(serde_json::from_str(&fs::read_to_string(d.join("gbt.json"))?)?),
        None => None,
    };
    let conn = cfg.connectivity()?;

    for c in &manifest.cases {
        let id = &c.id;
        let prob = read_nifti(&probs_dir.join(format!("{id}_prob.nii")))?;
        let meta: PreprocessMeta = serde_json::from_str(&fs::read_to_string(
            prep_dir.join(format!("test/{id}_meta.json")),
        )?)?;
        let restored = restore_prediction(&prob, &meta)?;
        let mut mask = binarize(&restored, cfg.post.threshold);
        let mut reports: Vec<FilterReport> = Vec::new();
        if let Some(g) = &clf {
            let norm = read_nifti(&prep_dir.join(format!("test/{id}_norm.nii")))?;
            let (filtered, report) = slice_filter(
                &mask,
                g,
                &norm,
                cfg.post.volume_gate_mm3,
                cfg.post.slice_fraction,
            )?;
            mask = filtered;
            reports.push(report);
            if let Some(model) = &gbt {
                let (filtered, report) =
                    radiomics_filter(&mask, &norm, model, cfg.post.voxel_gate, conn)?;
                mask = filtered;
                reports.push(report);
            }
        }
        write_nifti_mask(&dir.join(format!("masks/{id}_mask.nii")), &mask)?;
        fs::write(
            dir.join(format!("reports/{id}.json")),
            serde_json::to_string_pretty(&reports)?,
        )?;
    }
    Ok(json!({"setting": setting, "cases": manifest.cases.len()}))
}

fn build_evaluate(setting: u8, synth_dir: &Path, post_dir: &Path, dir: &Path) -> Result<Value> {
    let manifest = Manifest::read(&synth_dir.join("test_manifest.json"))?;
    let mut results = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        let pred = read_nifti_mask(&post_dir.join(format!("masks/{}_mask.nii", c.id)))?;
        let gt = read_nifti_mask(&synth_dir.join(&c.mask))?;
        results.push(case_result(&c.id, &pred, &gt)?);
    }
    let metrics = stratified_dsc(&results)?;
    fs::write(dir.join("cases.json"), serde_json::to_string_pretty(&results)?)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    fs::write(
        dir.join("metrics.csv"),
        metrics_to_csv(&[(format!("setting_{setting}"), metrics.clone())]),
    )?;
    Ok(json!({"n": metrics.n, "accuracy": metrics.accuracy}))
}

fn build_report(
    cfg: &PipelineConfig,
    evals: &[(u8, PathBuf)],
    synth_dir: &Path,
    post_primary_dir: &Path,
    dir: &Path,
) -> Result<Value> {
    let mut rows = Vec::with_capacity(evals.len());
    let mut cases_by_setting: Vec<(u8, Vec<CaseResult>)> = Vec::with_capacity(evals.len());
    for (s, d) in evals {
        let metrics: ChallengeMetrics =
            serde_json::from_str(&fs::read_to_string(d.join("metrics.json"))?)?;
        let cases: Vec<CaseResult> =
            serde_json::from_str(&fs::read_to_string(d.join("cases.json"))?)?;
        rows.push((format!("setting_{s}"), metrics));
        cases_by_setting.push((*s, cases));
    }
    fs::write(dir.join("table.csv"), metrics_to_csv(&rows))?;

    // Size-vs-dice scatter and Pearson r on the first requested setting.
    let primary = &cases_by_setting[0].1;
    let mut scatter = String::from("case_id,gt_volume_mm3,dice\n");
    let mut volumes = Vec::new();
    let mut dices = Vec::new();
    for r in primary.iter().filter(|r| r.gt_has_lesion) {
        scatter.push_str(&format!("{},{},{}\n", r.case_id, r.gt_volume_mm3, r.dice));
        volumes.push(r.gt_volume_mm3);
        dices.push(r.dice);
    }
    fs::write(dir.join("scatter.csv"), scatter)?;
    let pearson = match pearson_log_size(&volumes, &dices) {
        Ok(r) => json!({"r": r, "n": volumes.len()}),
        Err(e) => json!({"r": null, "n": volumes.len(), "note": e.to_string()}),
    };
    fs::write(dir.join("pearson.json"), serde_json::to_string_pretty(&pearson)?)?;

    if cases_by_setting.len() >= 2 {
        let mut csv = String::from("setting_a,setting_b,t,p,df\n");
        for i in 0..cases_by_setting.len() {
            for j in i + 1..cases_by_setting.len() {
                let (sa, ca) = &cases_by_setting[i];
                let (sb, cb) = &cases_by_setting[j];
                let by_id: BTreeMap<&str, f64> =
                    cb.iter().map(|r| (r.case_id.as_str(), r.dice)).collect();
                let mut a = Vec::with_capacity(ca.len());
                let mut b = Vec::with_capacity(ca.len());
                for r in ca {
                    if let Some(&d) = by_id.get(r.case_id.as_str()) {
                        a.push(r.dice);
                        b.push(d);
                    }
                }
                match paired_ttest(&a, &b) {
                    Ok(tt) => csv.push_str(&format!("{sa},{sb},{},{},{}\n", tt.t, tt.p, tt.df)),
                    Err(_) => csv.push_str(&format!("{sa},{sb},nan,nan,{}\n", a.len().saturating_sub(1))),
                }
            }
        }
        fs::write(dir.join("ttests.csv"), csv)?;
    }

    // FP/FN heatmaps for the first requested setting.
    let manifest = Manifest::read(&synth_dir.join("test_manifest.json"))?;
    let mut preds = Vec::with_capacity(manifest.cases.len());
    let mut gts = Vec::with_capacity(manifest.cases.len());
    let mut vols = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        preds.push(read_nifti_mask(&post_primary_dir.join(format!("masks/{}_mask.nii", c.id)))?);
        gts.push(read_nifti_mask(&synth_dir.join(&c.mask))?);
        vols.push(read_nifti(&synth_dir.join(&c.image))?);
    }
    let cases: Vec<(&Mask, &Mask, &Volume)> = preds
        .iter()
        .zip(&gts)
        .zip(&vols)
        .map(|((p, g), v)| (p, g, v))
        .collect();
    let (fp, fng) = error_heatmap(&cases, cfg.eval.heatmap_grid)?;
    write_nifti(&dir.join("fp_heatmap.nii"), &fp)?;
    write_nifti(&dir.join("fn_heatmap.nii"), &fng)?;

    Ok(json!({
        "settings": cases_by_setting.iter().map(|(s, _)| *s).collect::<Vec<u8>>(),
        "cases": manifest.cases.len(),
    }))
}
