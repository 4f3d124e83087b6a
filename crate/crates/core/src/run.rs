//! Run directories and the pipeline stages the command line drives.
//!
//! Layout of `<output_dir>/<name>/`:
//!
//! ```text
//! config.toml        configuration the run was created with
//! manifest.json      corpus manifest; frames/ and masks/gt/ sit next to it
//! splits/split.json
//! masks/proxy/       proxy masks from gen-masks (ladder masks in masks/proxy/ladder/)
//! masks/pred/<plan>/ predicted test masks from train-seg
//! checkpoints/
//! reports/<stage>.json plus rendered tables and figures
//! ```
//!
//! Each stage writes `reports/<stage>.json` carrying the configuration
//! digest. A later stage refuses to run when a stage it needs is missing or
//! was produced under a different digest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::synth::{generate_photo_pool, synthesize_corpus};
use crate::corpus::{write_file, write_mask, ContentClass, CorpusManifest};
use crate::error::{ensure, Error, Result};
use crate::eval_explain::{annotate, boundary_report, render_heatmap, render_mask_contours, BoundaryCase, MetricsReport};
use crate::ladder::{run_ladder, ClassificationData, LadderOutputs, LadderReport};
use crate::mask_gen::attach_proxy_masks;
use crate::proxy_classifier::{ablation_table, evaluate_classifier, load_rgb, run_ablation, train_stage1, ProxyClassifier};
use crate::segmenter::{
    comparison_table, run_seed, test_samples, ExperimentPlan, ExperimentResult, PlanId, SegDataset, SegModel, TestSubset,
};
use crate::splitter::{stratified_split, Split, SplitAssignment};

pub const STAGE_SYNTH: &str = "synth";
pub const STAGE_SPLIT: &str = "split";
pub const STAGE_TRAIN_PROXY: &str = "train-proxy";
pub const STAGE_EVAL_PROXY: &str = "eval-proxy";
pub const STAGE_GEN_MASKS: &str = "gen-masks";
pub const STAGE_LADDER: &str = "run-ladder";
pub const STAGE_REPORT: &str = "report";
pub const STAGE_EXPLAIN: &str = "explain";

pub fn train_seg_stage(plan: PlanId) -> String {
    format!("train-seg-{plan}")
}

/// Machine-readable record every stage leaves in `reports/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub config_digest: String,
    pub tool_version: String,
    pub data: serde_json::Value,
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
    digest: String,
    lock: PathBuf,
}

impl RunDir {
    /// Creates or reopens the run directory of `config`. Reopening with a
    /// configuration whose digest differs from the stored one fails.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = config.run_dir();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let digest = config.digest()?;
        let lock = root.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::invalid(format!("run directory {} is locked by another process (remove {} if stale)", root.display(), lock.display()))
            } else {
                Error::io(&lock, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
        let dir = Self { root, config, digest, lock };
        let stored = dir.root.join("config.toml");
        if stored.exists() {
            let previous = RunConfig::load(&stored)?;
            let prev_digest = previous.digest()?;
            if prev_digest != dir.digest {
                return Err(Error::DigestMismatch(format!(
                    "{} was created with configuration {prev_digest}, this invocation has {}",
                    dir.root.display(),
                    dir.digest
                )));
            }
        } else {
            write_file(&stored, dir.config.to_toml()?.as_bytes())?;
        }
        for sub in ["splits", "checkpoints", "reports", "masks/proxy", "masks/pred"] {
            let p = dir.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("splits").join("split.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn summary_path(&self, stage: &str) -> PathBuf {
        self.report(&format!("{stage}.json"))
    }

    pub fn write_summary(&self, stage: &str, data: serde_json::Value) -> Result<StageSummary> {
        let s = StageSummary {
            stage: stage.into(),
            config_digest: self.digest.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            data,
        };
        let mut text = serde_json::to_string_pretty(&s)?;
        text.push('\n');
        write_file(&self.summary_path(stage), text.as_bytes())?;
        Ok(s)
    }

    /// Summary of an earlier stage, checked against this run's digest.
    pub fn require(&self, stage: &str) -> Result<StageSummary> {
        let p = self.summary_path(stage);
        if !p.exists() {
            return Err(Error::MissingPrerequisite(format!("stage `{stage}` has not run in {}; run it first", self.root.display())));
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let s: StageSummary = serde_json::from_str(&text)?;
        if s.config_digest != self.digest {
            return Err(Error::DigestMismatch(format!(
                "stage `{stage}` was produced under configuration {}, current is {}",
                s.config_digest, self.digest
            )));
        }
        Ok(s)
    }

    pub fn load_manifest(&self) -> Result<CorpusManifest> {
        self.require(STAGE_SYNTH)?;
        CorpusManifest::load(&self.manifest_path())
    }

    pub fn load_split(&self, manifest: &CorpusManifest) -> Result<SplitAssignment> {
        self.require(STAGE_SPLIT)?;
        let s = SplitAssignment::load(&self.split_path())?;
        s.verify(manifest)?;
        Ok(s)
    }

    fn load_classifier(&self) -> Result<ProxyClassifier> {
        self.require(STAGE_TRAIN_PROXY)?;
        let (m, meta) = ProxyClassifier::load(&self.checkpoint("proxy.safetensors"))?;
        self.check_digest("proxy classifier checkpoint", &meta.config_digest)?;
        Ok(m)
    }

    fn check_digest(&self, what: &str, digest: &str) -> Result<()> {
        if digest != self.digest {
            return Err(Error::DigestMismatch(format!("{what} carries configuration {digest}, current is {}", self.digest)));
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// Builds the corpus: synthesized into the run directory, or an external
/// manifest rewritten with absolute frame paths.
pub fn stage_synth(run: &RunDir) -> Result<StageSummary> {
    let c = &run.config().corpus;
    let manifest = match &c.manifest {
        Some(path) => {
            let mut m = CorpusManifest::load(path)?;
            let base = m.base_dir.clone();
            for f in m.frames_mut() {
                f.image_path = base.join(&f.image_path);
                f.gt_mask_path = f.gt_mask_path.as_ref().map(|p| base.join(p));
                f.proxy_mask_path = None;
            }
            m.base_dir = run.root().to_path_buf();
            m.add_note(format!("imported from {}", path.display()));
            m.save(&run.manifest_path())?;
            m
        }
        None => {
            let pool = match &c.photo_pool {
                Some(p) => p.clone(),
                None => {
                    let p = run.root().join("photo_pool");
                    generate_photo_pool(&p, c.pool_size, c.pool_image_size, c.seed)?;
                    p
                }
            };
            synthesize_corpus(&c.synth, &pool, c.seed, run.root())?
        }
    };
    run.write_summary(
        STAGE_SYNTH,
        serde_json::json!({
            "manifest_digest": manifest.digest()?,
            "videos": manifest.videos.len(),
            "frames": manifest.frames().count(),
            "histogram": manifest.histogram(),
        }),
    )
}

pub fn stage_split(run: &RunDir) -> Result<StageSummary> {
    let manifest = run.load_manifest()?;
    let s = &run.config().split;
    let split = stratified_split(&manifest, &s.spec, s.seed)?;
    split.save(&run.split_path())?;
    run.write_summary(
        STAGE_SPLIT,
        serde_json::json!({
            "residuals": split.residuals,
            "histograms": split.histograms,
            "videos": Split::ALL.map(|x| split.videos_in(x).count()),
        }),
    )
}

/// Trains the proxy classifier on the homogeneous frames. With `ablation`
/// also trains both head modes and writes the comparison table.
pub fn stage_train_proxy(run: &RunDir, ablation: bool) -> Result<StageSummary> {
    let manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let data = ClassificationData::load(&manifest, &split)?;
    let lc = run.config().ladder_config()?;
    let mut model = ProxyClassifier::new(&lc.classifier, lc.stage1.seed)?;
    let history = train_stage1(&mut model, &data.train, &data.val, &lc.stage1)?;
    let (val, _) = evaluate_classifier(&model, &data.val, "val")?;
    let (test, _) = evaluate_classifier(&model, &data.test, "test")?;
    model.save(&run.checkpoint("proxy.safetensors"), run.digest(), serde_json::json!({ "seed": lc.stage1.seed }))?;
    let mut out = serde_json::json!({ "history": history, "val": val, "test": test });
    if ablation {
        let rows = run_ablation(&lc.classifier, &lc.stage1, lc.stage1.seed, &data.train, &data.val, &data.test)?;
        write_text(&run.report("ablation.txt"), &ablation_table(&rows))?;
        out["ablation"] = to_json(&rows)?;
    }
    run.write_summary(STAGE_TRAIN_PROXY, out)
}

/// Scores the saved classifier on the test frames and lists boundary cases.
pub fn stage_eval_proxy(run: &RunDir, band: (f64, f64)) -> Result<StageSummary> {
    let manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let model = run.load_classifier()?;
    let data = ClassificationData::load(&manifest, &split)?;
    let (report, preds) = evaluate_classifier(&model, &data.test, "test")?;
    let cases = boundary_report(&preds, band)?;
    run.write_summary(STAGE_EVAL_PROXY, serde_json::json!({ "test": report, "band": [band.0, band.1], "boundary_cases": cases }))
}

pub fn stage_gen_masks(run: &RunDir) -> Result<StageSummary> {
    let mut manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let model = run.load_classifier()?;
    let rel = PathBuf::from("masks").join("proxy");
    let train = attach_proxy_masks(&mut manifest, &split, Split::Train, &model, &rel)?;
    let val = attach_proxy_masks(&mut manifest, &split, Split::Val, &model, &rel)?;
    manifest.save(&run.manifest_path())?;
    run.write_summary(STAGE_GEN_MASKS, serde_json::json!({ "train": train, "val": val, "manifest_digest": manifest.digest()? }))
}

/// Trains one segmenter for `plan` and writes its predicted test masks.
pub fn stage_train_seg(run: &RunDir, plan: PlanId) -> Result<StageSummary> {
    let manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let p = ExperimentPlan::new(plan);
    if p.train_masks.heterogeneous() == Some(crate::segmenter::MaskSource::Proxy) {
        run.require(STAGE_GEN_MASKS)?;
    }
    let lc = run.config().ladder_config()?;
    let data = SegDataset::select(&manifest, &split, lc.dataset_seed)?;
    let (model, result) = run_seed(&manifest, &data, &p, &lc.segmenter, &lc.stage3, lc.stage3.seed)?;
    model.save(&run.checkpoint(&format!("seg_{plan}.safetensors")), run.digest(), serde_json::json!({ "plan": plan }))?;
    let pred_dir = run.root().join("masks").join("pred").join(plan.name());
    let samples = test_samples(&manifest, &data, TestSubset::HomogeneousManual)?;
    for chunk in samples.chunks(16) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        for (s, m) in chunk.iter().zip(model.segment_batch(&imgs)?) {
            write_mask(&m, &pred_dir.join(format!("{}.png", s.frame_id)))?;
        }
    }
    let exp = ExperimentResult { plan: p, runs: vec![result] };
    write_text(&run.report(&format!("train-seg-{plan}.txt")), &comparison_table(std::slice::from_ref(&exp))?)?;
    run.write_summary(&train_seg_stage(plan), to_json(&exp)?)
}

pub fn stage_run_ladder(run: &RunDir) -> Result<(StageSummary, LadderReport)> {
    let manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let out = LadderOutputs {
        proxy_mask_dir: PathBuf::from("masks").join("proxy").join("ladder"),
        checkpoint_dir: Some(run.root().join("checkpoints").join("ladder")),
        run_digest: run.digest().into(),
    };
    let report = run_ladder(&manifest, &split, &run.config().ladder_config()?, &out)?;
    for e in &report.experiments {
        let mut text = serde_json::to_string_pretty(e)?;
        text.push('\n');
        write_file(&run.report(&format!("experiment_{}.json", e.plan.id)), text.as_bytes())?;
    }
    write_text(&run.report("ladder.txt"), &ladder_text(&report)?)?;
    let s = run.write_summary(STAGE_LADDER, to_json(&report)?)?;
    Ok((s, report))
}

/// Comparison table plus the classifier line.
pub fn ladder_text(report: &LadderReport) -> Result<String> {
    let mut s = String::new();
    for c in &report.classifiers {
        s.push_str(&format!(
            "classifier seed {}: test accuracy {:.4}, F1 {:.4}, {} proxy masks\n",
            c.seed,
            c.test.accuracy.unwrap_or(f64::NAN),
            c.test.macro_f1.unwrap_or(f64::NAN),
            c.proxy_masks
        ));
    }
    s.push('\n');
    s.push_str(&report.table()?);
    Ok(s)
}

/// Collects every finished stage summary of the run into `reports/report.txt`.
pub fn stage_report(run: &RunDir) -> Result<StageSummary> {
    let mut text = format!("run {} (configuration {})\n\n", run.config().name, run.digest());
    let mut found = Vec::new();
    if let Ok(s) = run.require(STAGE_TRAIN_PROXY) {
        let test: MetricsReport = serde_json::from_value(s.data["test"].clone())?;
        text.push_str(&format!(
            "proxy classifier, test: accuracy {:.4}, F1 {:.4}\n",
            test.accuracy.unwrap_or(f64::NAN),
            test.macro_f1.unwrap_or(f64::NAN)
        ));
        if s.data.get("ablation").is_some() {
            let rows: Vec<crate::proxy_classifier::AblationRow> = serde_json::from_value(s.data["ablation"].clone())?;
            text.push_str(&format!("\n{}\n", ablation_table(&rows)));
        }
        found.push(STAGE_TRAIN_PROXY.to_string());
    }
    let mut singles = Vec::new();
    for plan in PlanId::ALL {
        if let Ok(s) = run.require(&train_seg_stage(plan)) {
            singles.push(serde_json::from_value::<ExperimentResult>(s.data)?);
            found.push(train_seg_stage(plan));
        }
    }
    if !singles.is_empty() {
        text.push_str(&format!("\nsingle-seed experiments\n{}\n", comparison_table(&singles)?));
    }
    if let Ok(s) = run.require(STAGE_LADDER) {
        let report: LadderReport = serde_json::from_value(s.data)?;
        text.push_str(&format!("\nexperiment ladder, averaged over seeds\n{}\n", ladder_text(&report)?));
        found.push(STAGE_LADDER.to_string());
    }
    ensure!(!found.is_empty(), "no stage results to report in {}", run.root().display());
    write_text(&run.report("report.txt"), &text)?;
    run.write_summary(STAGE_REPORT, serde_json::json!({ "stages": found, "text": text }))
}

/// GradCAM heatmaps for the classifier's boundary cases on the test frames,
/// or for the given frames when `frames` is non-empty.
pub fn stage_explain(run: &RunDir, frames: &[String], target: Option<ContentClass>, band: (f64, f64)) -> Result<StageSummary> {
    let manifest = run.load_manifest()?;
    let split = run.load_split(&manifest)?;
    let model = run.load_classifier()?;
    let out_dir = run.root().join("reports").join("explain");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut cases: Vec<BoundaryCase> = if frames.is_empty() {
        let data = ClassificationData::load(&manifest, &split)?;
        let (_, preds) = evaluate_classifier(&model, &data.test, "test")?;
        boundary_report(&preds, band)?
    } else {
        let mut v = Vec::new();
        for id in frames {
            let f = manifest.frame(id).ok_or_else(|| Error::invalid(format!("frame {id} is not in the manifest")))?;
            let c = model.classify_frame(&load_rgb(&manifest.resolve(&f.image_path))?)?;
            let truth = f.global_class.unwrap_or(c.label);
            v.push(BoundaryCase {
                frame_id: id.clone(),
                truth,
                predicted: c.label,
                probability: c.probability,
                misclassified: f.global_class.is_some_and(|g| g != c.label),
                attribution_path: None,
            });
        }
        v
    };
    for case in &mut cases {
        let f = manifest.frame(&case.frame_id).expect("case frames come from the manifest");
        let img = load_rgb(&manifest.resolve(&f.image_path))?;
        let map = model.gradcam(&img, target.unwrap_or(case.predicted))?;
        let mut fig = render_heatmap(&img, &map, 0.6)?;
        if let Some(gt) = &f.gt_mask_path {
            fig = render_mask_contours(&fig, &crate::corpus::read_mask(&manifest.resolve(gt))?, [255, 255, 255])?;
        }
        let fig = annotate(&fig, &format!("{}({:.2})", case.predicted, case.probability));
        let path = out_dir.join(format!("{}.png", case.frame_id));
        fig.save(&path)?;
        case.attribution_path = Some(path);
    }
    run.write_summary(STAGE_EXPLAIN, serde_json::json!({ "band": [band.0, band.1], "cases": cases }))
}

/// Loads a segmenter checkpoint of this run, checking its digest.
pub fn load_segmenter(run: &RunDir, plan: PlanId) -> Result<SegModel> {
    run.require(&train_seg_stage(plan))?;
    let (m, meta) = SegModel::load(&run.checkpoint(&format!("seg_{plan}.safetensors")))?;
    run.check_digest("segmenter checkpoint", &meta.config_digest)?;
    Ok(m)
}
