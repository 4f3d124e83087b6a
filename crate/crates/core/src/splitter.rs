//! Histogram-based greedy stratified splitting of videos into
//! train / validation / test, keeping every video inside a single split.
//!
//! Each split is seeded with one randomly drawn video. The splits then take
//! turns in proportion to their frame budgets; on its turn a split receives
//! the unassigned video whose class histogram brings the split closest (L1
//! over class proportions) to the target distribution. Leftover videos go to
//! train. An optional swap pass afterwards exchanges videos between splits
//! while that lowers the worst split residual without moving any split
//! further from its frame budget; it mainly repairs unlucky random seeds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, ClassHistogram, CorpusManifest, FrameKind, VideoRecord};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub const fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalized frame-count distribution over `[NP, P, heterogeneous]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(pub [f64; 3]);

impl ClassDistribution {
    pub fn from_histogram(h: &ClassHistogram) -> Result<Self> {
        let total = h.total();
        ensure!(total > 0, "class distribution of zero frames is undefined");
        Ok(Self(h.as_array().map(|c| c as f64 / total as f64)))
    }

    pub fn get(&self, kind: FrameKind) -> f64 {
        self.0[kind.index()]
    }

    pub fn l1(&self, other: &ClassDistribution) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Normalized class distribution of the frames of `videos`.
pub fn class_histogram(videos: &[VideoRecord]) -> Result<ClassDistribution> {
    ensure!(!videos.is_empty(), "no videos given");
    let mut h = ClassHistogram::default();
    for v in videos {
        h.merge(&v.class_histogram);
    }
    ClassDistribution::from_histogram(&h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Target class proportions `[NP, P, heterogeneous]`; the corpus
    /// distribution when absent.
    pub target_distribution: Option<[f64; 3]>,
    /// Frame fractions for `(train, val, test)`.
    pub split_fractions: [f64; 3],
    pub refine: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            target_distribution: None,
            split_fractions: [0.70, 0.15, 0.15],
            refine: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        check_fractions("split_fractions", &self.split_fractions, false)?;
        if let Some(t) = &self.target_distribution {
            check_fractions("target_distribution", t, true)?;
        }
        Ok(())
    }
}

fn check_fractions(name: &str, v: &[f64; 3], allow_zero: bool) -> Result<()> {
    for &f in v {
        let ok = if allow_zero { (0.0..=1.0).contains(&f) } else { f > 0.0 && f < 1.0 };
        ensure!(ok, "{name} entry {f} is out of range");
    }
    let s: f64 = v.iter().sum();
    ensure!((s - 1.0).abs() < 1e-6, "{name} sums to {s}, expected 1");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Seed,
    Greedy,
    Leftover,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStep {
    pub kind: StepKind,
    pub split: Split,
    pub video_id: String,
    /// Residual of the split right after this assignment.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub spec: SplitSpec,
    pub target: ClassDistribution,
    pub assignment: BTreeMap<String, Split>,
    pub histograms: [ClassHistogram; 3],
    pub residuals: [f64; 3],
    pub steps: Vec<SplitStep>,
    /// Video pairs exchanged by the refinement pass, in order.
    pub swaps: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, video_id: &str) -> Option<Split> {
        self.assignment.get(video_id).copied()
    }

    pub fn videos_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(v, _)| v.as_str())
    }

    pub fn histogram(&self, split: Split) -> &ClassHistogram {
        &self.histograms[split.index()]
    }

    pub fn residual(&self, split: Split) -> f64 {
        self.residuals[split.index()]
    }

    /// Checks that every manifest video is assigned once and that the stored
    /// histograms match a recount.
    pub fn verify(&self, manifest: &CorpusManifest) -> Result<()> {
        ensure!(
            self.assignment.len() == manifest.videos.len(),
            "assignment covers {} videos, manifest has {}",
            self.assignment.len(),
            manifest.videos.len()
        );
        let mut recount = [ClassHistogram::default(); 3];
        for v in &manifest.videos {
            let s = self
                .split_of(&v.video_id)
                .ok_or_else(|| Error::invalid(format!("video {} is unassigned", v.video_id)))?;
            recount[s.index()].merge(&ClassHistogram::from_frames(&v.frames));
        }
        ensure!(recount == self.histograms, "split histograms do not match a recount");
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_file(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn residual_of(h: &ClassHistogram, target: &ClassDistribution) -> f64 {
    match ClassDistribution::from_histogram(h) {
        Ok(d) => d.l1(target),
        Err(_) => target.0.iter().sum(),
    }
}

fn with(h: &ClassHistogram, add: &ClassHistogram) -> ClassHistogram {
    let mut out = *h;
    out.merge(add);
    out
}

fn without(h: &ClassHistogram, sub: &ClassHistogram) -> ClassHistogram {
    ClassHistogram {
        np: h.np - sub.np,
        p: h.p - sub.p,
        heterogeneous: h.heterogeneous - sub.heterogeneous,
    }
}

const EPS: f64 = 1e-12;

pub fn stratified_split(manifest: &CorpusManifest, spec: &SplitSpec, seed: u64) -> Result<SplitAssignment> {
    spec.validate()?;
    ensure!(
        manifest.videos.len() >= Split::ALL.len(),
        "{} videos cannot fill {} splits",
        manifest.videos.len(),
        Split::ALL.len()
    );
    let target = match spec.target_distribution {
        Some(t) => ClassDistribution(t),
        None => class_histogram(&manifest.videos)?,
    };

    let mut videos: Vec<(&str, ClassHistogram)> = manifest
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), ClassHistogram::from_frames(&v.frames)))
        .collect();
    videos.sort_by(|a, b| a.0.cmp(b.0));
    let total: usize = videos.iter().map(|(_, h)| h.total()).sum();
    let budgets: [f64; 3] = spec.split_fractions.map(|f| f * total as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unassigned: Vec<usize> = (0..videos.len()).collect();
    let mut owner: Vec<Option<Split>> = vec![None; videos.len()];
    let mut hists = [ClassHistogram::default(); 3];
    let mut steps = Vec::new();

    let mut assign = |vi: usize, split: Split, kind: StepKind, hists: &mut [ClassHistogram; 3], owner: &mut Vec<Option<Split>>| {
        hists[split.index()].merge(&videos[vi].1);
        owner[vi] = Some(split);
        steps.push(SplitStep {
            kind,
            split,
            video_id: videos[vi].0.to_string(),
            residual: residual_of(&hists[split.index()], &target),
        });
    };

    for split in Split::ALL {
        let pick = unassigned.remove(rng.gen_range(0..unassigned.len()));
        assign(pick, split, StepKind::Seed, &mut hists, &mut owner);
    }

    while !unassigned.is_empty() {
        let active = Split::ALL
            .iter()
            .copied()
            .filter(|s| (hists[s.index()].total() as f64) < budgets[s.index()])
            .min_by(|a, b| {
                let fa = hists[a.index()].total() as f64 / budgets[a.index()];
                let fb = hists[b.index()].total() as f64 / budgets[b.index()];
                fa.total_cmp(&fb).then(a.index().cmp(&b.index()))
            });
        let Some(split) = active else { break };
        let current = hists[split.index()];
        let mut best: Option<(usize, f64)> = None;
        for (pos, &vi) in unassigned.iter().enumerate() {
            let r = residual_of(&with(&current, &videos[vi].1), &target);
            // `unassigned` stays sorted by id, so strict improvement keeps the
            // lexicographically first video on ties.
            if best.is_none_or(|(_, br)| r < br - EPS) {
                best = Some((pos, r));
            }
        }
        let (pos, _) = best.expect("unassigned is non-empty");
        let vi = unassigned.remove(pos);
        assign(vi, split, StepKind::Greedy, &mut hists, &mut owner);
    }
    for vi in std::mem::take(&mut unassigned) {
        assign(vi, Split::Train, StepKind::Leftover, &mut hists, &mut owner);
    }

    let mut owner: Vec<Split> = owner.into_iter().map(|o| o.expect("every video assigned")).collect();
    let swaps = if spec.refine {
        refine(&videos, &mut owner, &mut hists, &budgets, &target)
    } else {
        Vec::new()
    };

    let assignment = videos
        .iter()
        .zip(&owner)
        .map(|((id, _), s)| (id.to_string(), *s))
        .collect();
    let residuals = std::array::from_fn(|i| residual_of(&hists[i], &target));
    Ok(SplitAssignment {
        seed,
        spec: spec.clone(),
        target,
        assignment,
        histograms: hists,
        residuals,
        steps,
        swaps,
        manifest_digest: None,
    })
}

fn objective(hists: &[ClassHistogram; 3], target: &ClassDistribution) -> (f64, f64) {
    let r: Vec<f64> = hists.iter().map(|h| residual_of(h, target)).collect();
    (r.iter().cloned().fold(0.0, f64::max), r.iter().sum())
}

fn budget_deviation(h: &ClassHistogram, budget: f64) -> f64 {
    (h.total() as f64 - budget).abs()
}

/// Steepest-descent pairwise swaps on `(max residual, sum of residuals)`.
fn refine(
    videos: &[(&str, ClassHistogram)],
    owner: &mut [Split],
    hists: &mut [ClassHistogram; 3],
    budgets: &[f64; 3],
    target: &ClassDistribution,
) -> Vec<(String, String)> {
    let mut swaps = Vec::new();
    for _ in 0..(4 * videos.len()).max(16) {
        let (cur_max, cur_sum) = objective(hists, target);
        let mut best: Option<(usize, usize, (f64, f64))> = None;
        for a in 0..videos.len() {
            for b in (a + 1)..videos.len() {
                let (sa, sb) = (owner[a], owner[b]);
                if sa == sb {
                    continue;
                }
                let (ha, hb) = (&videos[a].1, &videos[b].1);
                let na = with(&without(&hists[sa.index()], ha), hb);
                let nb = with(&without(&hists[sb.index()], hb), ha);
                let dev_before = budget_deviation(&hists[sa.index()], budgets[sa.index()])
                    + budget_deviation(&hists[sb.index()], budgets[sb.index()]);
                let dev_after = budget_deviation(&na, budgets[sa.index()]) + budget_deviation(&nb, budgets[sb.index()]);
                if dev_after > dev_before + EPS {
                    continue;
                }
                let mut trial = *hists;
                trial[sa.index()] = na;
                trial[sb.index()] = nb;
                let obj = objective(&trial, target);
                let improves = |o: (f64, f64), m: f64, s: f64| o.0 < m - EPS || (o.0 <= m + EPS && o.1 < s - EPS);
                if improves(obj, cur_max, cur_sum)
                    && best.is_none_or(|(_, _, bo)| improves(obj, bo.0, bo.1))
                {
                    best = Some((a, b, obj));
                }
            }
        }
        let Some((a, b, _)) = best else { break };
        let (sa, sb) = (owner[a], owner[b]);
        hists[sa.index()] = with(&without(&hists[sa.index()], &videos[a].1), &videos[b].1);
        hists[sb.index()] = with(&without(&hists[sb.index()], &videos[b].1), &videos[a].1);
        owner.swap(a, b);
        swaps.push((videos[a].0.to_string(), videos[b].0.to_string()));
    }
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ContentClass, FrameRecord, Homogeneity, Provenance};
    use proptest::prelude::*;

    pub(crate) fn video(id: &str, np: usize, p: usize, het: usize) -> VideoRecord {
        let mut frames = Vec::new();
        let mut push = |kind: FrameKind, n: usize| {
            for _ in 0..n {
                let i = frames.len();
                let (homogeneity, global_class) = match kind {
                    FrameKind::Np => (Homogeneity::Homogeneous, Some(ContentClass::NP)),
                    FrameKind::P => (Homogeneity::Homogeneous, Some(ContentClass::P)),
                    FrameKind::Heterogeneous => (Homogeneity::Heterogeneous, None),
                };
                frames.push(FrameRecord {
                    frame_id: format!("{id}_{i}"),
                    video_id: id.into(),
                    sequence_id: format!("{id}_s"),
                    image_path: format!("{id}_{i}.png").into(),
                    homogeneity,
                    global_class,
                    gt_mask_path: None,
                    proxy_mask_path: None,
                });
            }
        };
        push(FrameKind::Np, np);
        push(FrameKind::P, p);
        push(FrameKind::Heterogeneous, het);
        VideoRecord::new(id, frames)
    }

    fn manifest(videos: Vec<VideoRecord>) -> CorpusManifest {
        CorpusManifest::new(Provenance::External, None, videos)
    }

    #[test]
    fn histogram_examples() {
        let d = class_histogram(&[video("a", 0, 10, 0)]).unwrap();
        assert_eq!(d.get(FrameKind::P), 1.0);
        assert_eq!(d.get(FrameKind::Np), 0.0);
        let d = class_histogram(&[video("a", 5, 5, 0)]).unwrap();
        assert_eq!(d.0, [0.5, 0.5, 0.0]);
        let d = class_histogram(&[video("a", 0, 10, 0), video("b", 10, 0, 0), video("c", 5, 5, 0)]).unwrap();
        assert_eq!(d.0, [0.5, 0.5, 0.0]);
        assert!(class_histogram(&[video("z", 0, 0, 0)]).is_err());
        assert!(class_histogram(&[]).is_err());
    }

    #[test]
    fn three_videos_one_per_split() {
        let m = manifest(vec![video("a", 3, 0, 0), video("b", 0, 3, 0), video("c", 1, 1, 1)]);
        let spec = SplitSpec { refine: false, ..SplitSpec::default() };
        let a = stratified_split(&m, &spec, 17).unwrap();
        for s in Split::ALL {
            assert_eq!(a.videos_in(s).count(), 1);
        }
        a.verify(&m).unwrap();
        assert_eq!(a, stratified_split(&m, &spec, 17).unwrap());
    }

    #[test]
    fn too_few_videos_is_an_error() {
        let m = manifest(vec![video("a", 3, 0, 0), video("b", 0, 3, 0)]);
        assert!(stratified_split(&m, &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn rejects_bad_fractions() {
        let spec = SplitSpec { split_fractions: [0.5, 0.5, 0.0], ..SplitSpec::default() };
        assert!(spec.validate().is_err());
        let spec = SplitSpec { split_fractions: [0.6, 0.3, 0.3], ..SplitSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn greedy_steps_pick_a_best_candidate() {
        let vids: Vec<VideoRecord> = (0..30)
            .map(|i| video(&format!("v{i:02}"), (i * 7) % 11, (i * 5) % 9 + 1, i % 3))
            .collect();
        let m = manifest(vids.clone());
        let spec = SplitSpec { refine: false, ..SplitSpec::default() };
        let a = stratified_split(&m, &spec, 5).unwrap();
        // Replay the log, re-evaluating every candidate at every greedy step.
        let mut hists = [ClassHistogram::default(); 3];
        let mut taken = std::collections::HashSet::new();
        for step in &a.steps {
            let h = |id: &str| vids.iter().find(|v| v.video_id == id).unwrap().class_histogram;
            if step.kind == StepKind::Greedy {
                let cur = hists[step.split.index()];
                let chosen = residual_of(&with(&cur, &h(&step.video_id)), &a.target);
                for v in vids.iter().filter(|v| !taken.contains(v.video_id.as_str())) {
                    let r = residual_of(&with(&cur, &v.class_histogram), &a.target);
                    assert!(chosen <= r + 1e-12, "step for {} skipped a better video {}", step.video_id, v.video_id);
                }
                assert!((chosen - step.residual).abs() < 1e-12);
            }
            hists[step.split.index()].merge(&h(&step.video_id));
            taken.insert(step.video_id.as_str());
        }
    }

    fn six_video_instance() -> CorpusManifest {
        manifest(vec![
            video("A", 0, 10, 0),
            video("B", 10, 0, 0),
            video("C", 5, 5, 0),
            video("D", 5, 5, 0),
            video("E", 0, 10, 0),
            video("F", 10, 0, 0),
        ])
    }

    /// Smallest worst-split residual over all 3^6 assignments whose split
    /// sizes equal the frame budgets exactly.
    fn exhaustive_optimum(m: &CorpusManifest, budgets: [usize; 3], target: &ClassDistribution) -> f64 {
        let n = m.videos.len();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut hists = [ClassHistogram::default(); 3];
            let mut c = code;
            for v in &m.videos {
                hists[c % 3].merge(&v.class_histogram);
                c /= 3;
            }
            if (0..3).any(|i| hists[i].total() != budgets[i]) {
                continue;
            }
            let worst = hists.iter().map(|h| residual_of(h, target)).fold(0.0, f64::max);
            best = best.min(worst);
        }
        best
    }

    #[test]
    fn six_video_instance_is_near_exhaustive_optimum() {
        let m = six_video_instance();
        let spec = SplitSpec {
            target_distribution: Some([0.5, 0.5, 0.0]),
            split_fractions: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            refine: true,
        };
        let opt = exhaustive_optimum(&m, [40, 10, 10], &ClassDistribution([0.5, 0.5, 0.0]));
        assert_eq!(opt, 0.0);
        for seed in 0..64 {
            let a = stratified_split(&m, &spec, seed).unwrap();
            a.verify(&m).unwrap();
            for s in Split::ALL {
                assert!(a.residual(s) <= opt + 0.2 + 1e-12, "seed {seed} split {s} residual {}", a.residual(s));
            }
            assert_eq!(a, stratified_split(&m, &spec, seed).unwrap());
        }
    }

    #[test]
    fn swap_pass_never_moves_sizes_away_from_budgets() {
        let m = six_video_instance();
        let base = SplitSpec {
            target_distribution: Some([0.5, 0.5, 0.0]),
            split_fractions: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            refine: false,
        };
        let budgets = [40.0, 10.0, 10.0];
        for seed in 0..32 {
            let raw = stratified_split(&m, &base, seed).unwrap();
            let refined = stratified_split(&m, &SplitSpec { refine: true, ..base.clone() }, seed).unwrap();
            let dev = |a: &SplitAssignment| -> f64 {
                (0..3).map(|i| (a.histograms[i].total() as f64 - budgets[i]).abs()).sum()
            };
            assert!(dev(&refined) <= dev(&raw) + 1e-9);
            let worst = |a: &SplitAssignment| a.residuals.iter().cloned().fold(0.0, f64::max);
            assert!(worst(&refined) <= worst(&raw) + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn group_constraint_on_random_corpora(
            seed in any::<u64>(),
            counts in prop::collection::vec((0usize..12, 0usize..12, 0usize..4), 3..40),
        ) {
            let vids: Vec<VideoRecord> = counts
                .iter()
                .enumerate()
                .map(|(i, &(np, p, h))| video(&format!("v{i:03}"), np, p.max(if np + h == 0 { 1 } else { 0 }), h))
                .collect();
            let m = manifest(vids);
            let a = stratified_split(&m, &SplitSpec::default(), seed).unwrap();
            a.verify(&m).unwrap();
            // every frame of a video lands in its video's split
            for v in &m.videos {
                let s = a.split_of(&v.video_id).unwrap();
                for f in &v.frames {
                    prop_assert_eq!(a.split_of(&f.video_id), Some(s));
                }
            }
            for s in Split::ALL {
                prop_assert!(a.videos_in(s).count() >= 1);
            }
        }

        #[test]
        fn balanced_pairs_stay_close_to_target(
            seed in any::<u64>(),
            sizes in prop::collection::vec(1usize..8, 6..30),
        ) {
            // Every P video has an NP twin of equal size, so a perfect 50/50
            // stratification exists whenever the budgets allow it.
            let mut vids = Vec::new();
            for (i, &s) in sizes.iter().enumerate() {
                vids.push(video(&format!("p{i:03}"), 0, s, 0));
                vids.push(video(&format!("n{i:03}"), s, 0, 0));
            }
            let m = manifest(vids);
            let a = stratified_split(&m, &SplitSpec::default(), seed).unwrap();
            let largest = *sizes.iter().max().unwrap() as f64;
            for s in Split::ALL {
                let frames = a.histogram(s).total() as f64;
                prop_assert!(
                    a.residual(s) <= 2.0 * largest / frames + 1e-9,
                    "split {} residual {} with {} frames, largest video {}", s, a.residual(s), frames, largest
                );
            }
        }
    }
}
