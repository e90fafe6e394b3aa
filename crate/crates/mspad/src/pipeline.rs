//! End-to-end orchestration: cube building for a manifest, per-fold
//! training and evaluation, and the modality-combination sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::datamodel::{DatasetManifest, ModalitySelection, SampleRecord};
use crate::fcn::{FcnModel, ModelConfig, ModelError};
use crate::metrics::{self, EvaluationReport, MetricsError, ScoredSample};
use crate::preprocess::{build_cube, PreprocessError, RoiConfig};
use crate::protocols::{Fold, SplitPlan};
use crate::report::SweepRow;
use crate::train::{train, TrainConfig, TrainError, TrainHistory, TrainSample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample `{0}` is not in the manifest")]
    UnknownSample(String),
    #[error("fold `{fold}` {role} set is empty")]
    EmptyRole { fold: String, role: String },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// All cubes of a manifest for one modality selection, keyed by sample id.
pub struct CubeSet {
    cubes: BTreeMap<String, TrainSample>,
}

impl CubeSet {
    /// Builds every record's cube in parallel; per-record results are
    /// independent of build order.
    pub fn build(
        manifest: &DatasetManifest,
        selection: &ModalitySelection,
        rois: &RoiConfig,
    ) -> Result<Self, PipelineError> {
        let built: Vec<Result<(String, TrainSample), PreprocessError>> = manifest
            .records()
            .par_iter()
            .map(|record| {
                let cube = build_cube(manifest, record, selection, rois)?;
                Ok((
                    record.sample_id.clone(),
                    TrainSample::new(cube, record.ground_truth),
                ))
            })
            .collect();
        let mut cubes = BTreeMap::new();
        for entry in built {
            let (id, sample) = entry?;
            cubes.insert(id, sample);
        }
        Ok(CubeSet { cubes })
    }

    pub fn get(&self, ids: &[String]) -> Result<Vec<TrainSample>, PipelineError> {
        ids.iter()
            .map(|id| {
                self.cubes
                    .get(id)
                    .cloned()
                    .ok_or_else(|| PipelineError::UnknownSample(id.clone()))
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.cubes
            .values()
            .next()
            .map_or(0, |s| s.cube.channels())
    }
}

/// Outcome of one fold: trained model, history, test scores and metrics.
pub struct FoldOutcome {
    pub fold_name: String,
    pub model: FcnModel<f32>,
    pub history: TrainHistory,
    pub scored: Vec<ScoredSample>,
    pub report: EvaluationReport,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Seed for one fold's model/training, derived so folds differ but runs
/// reproduce.
pub fn fold_seed(base: u64, fold_name: &str) -> u64 {
    base ^ fnv1a(fold_name.as_bytes())
}

/// Scores a set of samples with a trained model, in parallel.
pub fn score_samples(
    model: &FcnModel<f32>,
    ids: &[String],
    samples: &[TrainSample],
) -> Result<Vec<ScoredSample>, PipelineError> {
    let scores: Vec<Result<f64, ModelError>> = samples
        .par_iter()
        .map(|s| model.score(&s.cube))
        .collect();
    ids.iter()
        .zip(samples)
        .zip(scores)
        .map(|((id, s), score)| Ok(ScoredSample::new(id.clone(), score?, s.label)))
        .collect()
}

/// Trains on one fold's train/val split and evaluates on its test set.
pub fn run_fold(
    cubes: &CubeSet,
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FoldOutcome, PipelineError> {
    if fold.train.is_empty() {
        return Err(PipelineError::EmptyRole {
            fold: fold.name.clone(),
            role: "train".into(),
        });
    }
    if fold.test.is_empty() {
        return Err(PipelineError::EmptyRole {
            fold: fold.name.clone(),
            role: "test".into(),
        });
    }
    let train_set = cubes.get(&fold.train)?;
    let val_set = cubes.get(&fold.val)?;
    let test_set = cubes.get(&fold.test)?;

    let mut cfg = train_cfg.clone();
    cfg.seed = fold_seed(train_cfg.seed, &fold.name);
    let model = FcnModel::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let (model, history) = train(
        model,
        &train_set,
        if val_set.is_empty() { None } else { Some(&val_set) },
        &cfg,
    )?;

    let scored = score_samples(&model, &fold.test, &test_set)?;
    let report = metrics::evaluate(&scored)?;
    Ok(FoldOutcome {
        fold_name: fold.name.clone(),
        model,
        history,
        scored,
        report,
    })
}

/// Runs every fold of a plan for one modality selection.
pub fn run_plan(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    selection: &ModalitySelection,
    rois: &RoiConfig,
    base_maps: usize,
    train_cfg: &TrainConfig,
) -> Result<Vec<FoldOutcome>, PipelineError> {
    let cubes = CubeSet::build(manifest, selection, rois)?;
    let mut model_cfg = ModelConfig::with_channels(selection.channel_count());
    model_cfg.base_maps = base_maps;
    plan.folds
        .iter()
        .map(|fold| run_fold(&cubes, fold, &model_cfg, train_cfg))
        .collect()
}

/// Runs the full 15-combination sweep; returns per-selection outcomes plus
/// the summary table, one row per combination.
pub fn run_sweep(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    rois: &RoiConfig,
    base_maps: usize,
    train_cfg: &TrainConfig,
) -> Result<(Vec<(ModalitySelection, Vec<FoldOutcome>)>, Vec<SweepRow>), PipelineError> {
    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    for selection in ModalitySelection::all_subsets() {
        let fold_outcomes = run_plan(manifest, plan, &selection, rois, base_maps, train_cfg)?;
        let reports: Vec<EvaluationReport> =
            fold_outcomes.iter().map(|o| o.report.clone()).collect();
        rows.push(SweepRow::from_reports(
            selection.to_string(),
            selection.channel_count(),
            &reports,
        ));
        outcomes.push((selection, fold_outcomes));
    }
    Ok((outcomes, rows))
}

/// Merges two manifests for split validation (records only; tensor paths
/// are not resolved through the merged view).
pub fn merged_records_manifest(
    a: &DatasetManifest,
    b: &DatasetManifest,
) -> Result<DatasetManifest, crate::datamodel::ManifestError> {
    let mut records: Vec<SampleRecord> = a.records().to_vec();
    records.extend(b.records().iter().cloned());
    DatasetManifest::from_records(records, a.base_dir().to_path_buf())
}

/// Scores for every record in a manifest (used by analyze/eval exports).
pub fn score_manifest(
    model: &FcnModel<f32>,
    manifest: &DatasetManifest,
    cubes: &CubeSet,
) -> Result<Vec<ScoredSample>, PipelineError> {
    let ids: Vec<String> = manifest
        .records()
        .iter()
        .map(|r| r.sample_id.clone())
        .collect();
    let samples = cubes.get(&ids)?;
    score_samples(model, &ids, &samples)
}

/// Arc-shared cube views for analysis exports.
pub fn cube_of<'a>(cubes: &'a CubeSet, id: &str) -> Option<&'a Arc<crate::preprocess::DataCube>> {
    cubes.cubes.get(id).map(|s| &s.cube)
}
