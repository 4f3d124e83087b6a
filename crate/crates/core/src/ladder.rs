//! The experiment ladder: for every seed, train the proxy classifier on the
//! homogeneous frames, write proxy masks for the heterogeneous train and val
//! frames, then train and score one segmenter per plan.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, FrameRecord};
use crate::error::{ensure, Result};
use crate::eval_explain::MetricsReport;
use crate::mask_gen::attach_proxy_masks;
use crate::proxy_classifier::{evaluate_classifier, load_labeled_frames, train_stage1, ClassifierConfig, LabeledFrame, ProxyClassifier, TrainConfigStage1};
use crate::segmenter::{
    comparison_table, run_seed, ExperimentPlan, ExperimentResult, PlanId, SegDataset, SegmenterConfig, TestSubset, TrainConfigStage3,
};
use crate::splitter::{Split, SplitAssignment};
use crate::train_util::History;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub classifier: ClassifierConfig,
    pub stage1: TrainConfigStage1,
    pub segmenter: SegmenterConfig,
    pub stage3: TrainConfigStage3,
    /// Training seeds; results are averaged over them.
    pub seeds: Vec<u64>,
    /// Seed of the homogeneous sample paired with the heterogeneous frames.
    pub dataset_seed: u64,
    pub plans: Vec<PlanId>,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            stage1: TrainConfigStage1::default(),
            segmenter: SegmenterConfig::default(),
            stage3: TrainConfigStage3::default(),
            seeds: vec![0, 1],
            dataset_seed: 0,
            plans: PlanId::ALL.to_vec(),
        }
    }
}

impl LadderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "the ladder needs at least one seed");
        ensure!(!self.plans.is_empty(), "the ladder needs at least one plan");
        self.classifier.validate()?;
        self.classifier.backbone.validate()?;
        self.stage1.validate()?;
        self.segmenter.validate()?;
        self.stage3.validate()
    }
}

/// Homogeneous frames of one split, the classification dataset.
pub fn homogeneous_frames<'a>(manifest: &'a CorpusManifest, split: &SplitAssignment, which: Split) -> Vec<&'a FrameRecord> {
    manifest.frames().filter(|f| f.is_homogeneous() && split.split_of(&f.video_id) == Some(which)).collect()
}

pub struct ClassificationData {
    pub train: Vec<LabeledFrame>,
    pub val: Vec<LabeledFrame>,
    pub test: Vec<LabeledFrame>,
}

impl ClassificationData {
    pub fn load(manifest: &CorpusManifest, split: &SplitAssignment) -> Result<Self> {
        split.verify(manifest)?;
        let load = |s| load_labeled_frames(manifest, homogeneous_frames(manifest, split, s));
        Ok(Self { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? })
    }
}

/// Trains a classifier with `seed` and scores it on the test frames.
pub fn train_classifier(
    data: &ClassificationData,
    cfg: &ClassifierConfig,
    train_cfg: &TrainConfigStage1,
    seed: u64,
) -> Result<(ProxyClassifier, History, MetricsReport)> {
    let mut model = ProxyClassifier::new(cfg, seed)?;
    let history = train_stage1(&mut model, &data.train, &data.val, &TrainConfigStage1 { seed, ..train_cfg.clone() })?;
    let (report, _) = evaluate_classifier(&model, &data.test, "test")?;
    Ok((model, history, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRun {
    pub seed: u64,
    pub history: History,
    pub test: MetricsReport,
    pub proxy_masks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub dataset: SegDataset,
    pub classifiers: Vec<ClassifierRun>,
    pub experiments: Vec<ExperimentResult>,
}

impl LadderReport {
    pub fn experiment(&self, plan: PlanId) -> Option<&ExperimentResult> {
        self.experiments.iter().find(|e| e.plan.id == plan)
    }

    /// Seed-averaged mean IoU of `plan` on `subset`.
    pub fn mean_iou(&self, plan: PlanId, subset: TestSubset) -> Result<Option<f64>> {
        match self.experiment(plan) {
            Some(e) => e.mean_iou(subset),
            None => Ok(None),
        }
    }

    pub fn classifier_f1(&self) -> Option<f64> {
        let v: Vec<f64> = self.classifiers.iter().filter_map(|c| c.test.macro_f1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn table(&self) -> Result<String> {
        comparison_table(&self.experiments)
    }
}

/// Where the ladder writes its artifacts.
#[derive(Clone, Debug)]
pub struct LadderOutputs {
    /// Proxy masks go to `<this>/seed<k>/` relative to the manifest directory.
    pub proxy_mask_dir: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    pub run_digest: String,
}

pub fn run_ladder(manifest: &CorpusManifest, split: &SplitAssignment, cfg: &LadderConfig, out: &LadderOutputs) -> Result<LadderReport> {
    cfg.validate()?;
    let dataset = SegDataset::select(manifest, split, cfg.dataset_seed)?;
    let d1 = ClassificationData::load(manifest, split)?;
    let plans: Vec<ExperimentPlan> = cfg.plans.iter().map(|&p| ExperimentPlan::new(p)).collect();
    let mut experiments: Vec<ExperimentResult> = plans.iter().map(|&plan| ExperimentResult { plan, runs: Vec::new() }).collect();
    let mut classifiers = Vec::new();
    let save = |name: String| out.checkpoint_dir.as_ref().map(|d| d.join(name));

    for &seed in &cfg.seeds {
        let (clf, history, test) = train_classifier(&d1, &cfg.classifier, &cfg.stage1, seed)?;
        log::info!("ladder seed {seed}: classifier test F1 {:.4}", test.macro_f1.unwrap_or(0.0));
        if let Some(p) = save(format!("proxy_seed{seed}.safetensors")) {
            clf.save(&p, &out.run_digest, serde_json::json!({ "seed": seed }))?;
        }
        let mut seeded = manifest.clone();
        let rel = seed_mask_dir(&out.proxy_mask_dir, seed);
        let mut n = 0;
        if plans.iter().any(|p| p.train_masks.heterogeneous().is_some() || p.val_masks.heterogeneous().is_some()) {
            n += attach_proxy_masks(&mut seeded, split, Split::Train, &clf, &rel)?;
            n += attach_proxy_masks(&mut seeded, split, Split::Val, &clf, &rel)?;
        }
        classifiers.push(ClassifierRun { seed, history, test, proxy_masks: n });
        for (plan, exp) in plans.iter().zip(experiments.iter_mut()) {
            let (model, run) = run_seed(&seeded, &dataset, plan, &cfg.segmenter, &cfg.stage3, seed)?;
            log::info!(
                "ladder seed {seed}: plan {} heterogeneous-only mean IoU {:?}",
                plan.id,
                run.test.get(&TestSubset::ManualOnly).and_then(|r| r.mean_iou())
            );
            if let Some(p) = save(format!("seg_{}_seed{seed}.safetensors", plan.id)) {
                model.save(&p, &out.run_digest, serde_json::json!({ "seed": seed, "plan": plan.id }))?;
            }
            exp.runs.push(run);
        }
    }
    Ok(LadderReport { dataset, classifiers, experiments })
}

/// Proxy-mask directory used by [`run_ladder`] for `seed`.
pub fn seed_mask_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed{seed}"))
}
