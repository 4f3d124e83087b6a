//! Frame corpus data model, manifest I/O, mask codec and the synthetic
//! compositor.

mod mask;
pub mod raster;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

pub use mask::{homogeneous_mask, read_mask, write_mask, MaskImage};
pub use synth::{synthesize_corpus, OverlayKind, SynthesisSpec};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Content class of a pixel or a whole homogeneous frame.
///
/// The index convention `{0: NP, 1: P}` is used everywhere: in-memory masks,
/// classifier logits and metric tables.
#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContentClass {
    NP,
    P,
}

impl ContentClass {
    pub const ALL: [ContentClass; 2] = [ContentClass::NP, ContentClass::P];

    pub const fn index(self) -> usize {
        match self {
            ContentClass::NP => 0,
            ContentClass::P => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(ContentClass::NP),
            1 => Ok(ContentClass::P),
            other => Err(Error::invalid(format!("class index {other} is not 0 or 1"))),
        }
    }

    /// Value of this class in an in-memory [`MaskImage`].
    pub const fn label(self) -> u8 {
        self.index() as u8
    }

    /// Byte written to mask files.
    pub const fn file_value(self) -> u8 {
        match self {
            ContentClass::NP => 0,
            ContentClass::P => 255,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            ContentClass::NP => "NP",
            ContentClass::P => "P",
        }
    }
}

impl std::fmt::Display for ContentClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Homogeneity {
    Homogeneous,
    Heterogeneous,
}

/// Histogram bin of a frame: its class if homogeneous, otherwise its own bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Np,
    P,
    Heterogeneous,
}

impl FrameKind {
    pub const ALL: [FrameKind; 3] = [FrameKind::Np, FrameKind::P, FrameKind::Heterogeneous];

    pub const fn index(self) -> usize {
        match self {
            FrameKind::Np => 0,
            FrameKind::P => 1,
            FrameKind::Heterogeneous => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub video_id: String,
    pub sequence_id: String,
    /// Relative to the manifest directory.
    pub image_path: PathBuf,
    pub homogeneity: Homogeneity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_class: Option<ContentClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_mask_path: Option<PathBuf>,
}

impl FrameRecord {
    pub fn kind(&self) -> FrameKind {
        match (self.homogeneity, self.global_class) {
            (Homogeneity::Heterogeneous, _) => FrameKind::Heterogeneous,
            (Homogeneity::Homogeneous, Some(ContentClass::NP)) => FrameKind::Np,
            (Homogeneity::Homogeneous, Some(ContentClass::P)) => FrameKind::P,
            // rejected by validate(); treat as heterogeneous rather than panic
            (Homogeneity::Homogeneous, None) => FrameKind::Heterogeneous,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.homogeneity == Homogeneity::Homogeneous
    }

    pub fn validate(&self) -> Result<()> {
        match (self.homogeneity, self.global_class) {
            (Homogeneity::Homogeneous, None) => Err(Error::invalid(format!(
                "homogeneous frame {} has no global class",
                self.frame_id
            ))),
            (Homogeneity::Heterogeneous, Some(_)) => Err(Error::invalid(format!(
                "heterogeneous frame {} carries a global class",
                self.frame_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Frame counts per [`FrameKind`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub np: usize,
    pub p: usize,
    pub heterogeneous: usize,
}

impl ClassHistogram {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a FrameRecord>) -> Self {
        let mut h = Self::default();
        for f in frames {
            h.add(f.kind(), 1);
        }
        h
    }

    pub fn add(&mut self, kind: FrameKind, n: usize) {
        match kind {
            FrameKind::Np => self.np += n,
            FrameKind::P => self.p += n,
            FrameKind::Heterogeneous => self.heterogeneous += n,
        }
    }

    pub fn merge(&mut self, other: &ClassHistogram) {
        self.np += other.np;
        self.p += other.p;
        self.heterogeneous += other.heterogeneous;
    }

    pub fn get(&self, kind: FrameKind) -> usize {
        match kind {
            FrameKind::Np => self.np,
            FrameKind::P => self.p,
            FrameKind::Heterogeneous => self.heterogeneous,
        }
    }

    pub fn total(&self) -> usize {
        self.np + self.p + self.heterogeneous
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.np, self.p, self.heterogeneous]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<FrameRecord>,
    pub class_histogram: ClassHistogram,
}

impl VideoRecord {
    pub fn new(video_id: impl Into<String>, frames: Vec<FrameRecord>) -> Self {
        let class_histogram = ClassHistogram::from_frames(&frames);
        Self {
            video_id: video_id.into(),
            frames,
            class_histogram,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub videos: Vec<VideoRecord>,
    /// Free-form provenance notes appended by later stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Directory that relative frame and mask paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(provenance: Provenance, seed: Option<u64>, videos: Vec<VideoRecord>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            provenance,
            seed,
            videos,
            notes: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == MANIFEST_SCHEMA_VERSION,
            "unsupported manifest schema version {}",
            self.schema_version
        );
        let mut videos = HashSet::new();
        let mut frames = HashSet::new();
        for v in &self.videos {
            ensure!(videos.insert(v.video_id.as_str()), "duplicate video id {}", v.video_id);
            for f in &v.frames {
                f.validate()?;
                ensure!(
                    f.video_id == v.video_id,
                    "frame {} lists video {} but is stored under {}",
                    f.frame_id,
                    f.video_id,
                    v.video_id
                );
                ensure!(frames.insert(f.frame_id.as_str()), "duplicate frame id {}", f.frame_id);
            }
            ensure!(
                v.class_histogram == ClassHistogram::from_frames(&v.frames),
                "class histogram of video {} does not match its frames",
                v.video_id
            );
        }
        Ok(())
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.videos.iter().flat_map(|v| v.frames.iter())
    }

    pub fn frames_mut(&mut self) -> impl Iterator<Item = &mut FrameRecord> {
        self.videos.iter_mut().flat_map(|v| v.frames.iter_mut())
    }

    pub fn frame(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.frames().find(|f| f.frame_id == frame_id)
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn histogram(&self) -> ClassHistogram {
        let mut h = ClassHistogram::default();
        for v in &self.videos {
            h.merge(&v.class_histogram);
        }
        h
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    pub fn add_note(&mut self, note: impl Into<String>) {
        let note = note.into();
        if !self.notes.contains(&note) {
            self.notes.push(note);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: CorpusManifest = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, video: &str, kind: FrameKind) -> FrameRecord {
        let (homogeneity, global_class) = match kind {
            FrameKind::Np => (Homogeneity::Homogeneous, Some(ContentClass::NP)),
            FrameKind::P => (Homogeneity::Homogeneous, Some(ContentClass::P)),
            FrameKind::Heterogeneous => (Homogeneity::Heterogeneous, None),
        };
        FrameRecord {
            frame_id: id.into(),
            video_id: video.into(),
            sequence_id: format!("{video}-s0"),
            image_path: format!("frames/{id}.png").into(),
            homogeneity,
            global_class,
            gt_mask_path: None,
            proxy_mask_path: None,
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let v = VideoRecord::new(
            "v0",
            vec![frame("f0", "v0", FrameKind::P), frame("f1", "v0", FrameKind::Heterogeneous)],
        );
        let m = CorpusManifest::new(Provenance::Synthetic, Some(3), vec![v]);
        let text = m.to_json().unwrap();
        let back = CorpusManifest::from_json(&text, "").unwrap();
        assert_eq!(m, back);
        assert_eq!(m.digest().unwrap(), back.digest().unwrap());
    }

    #[test]
    fn rejects_duplicate_frame_ids_across_videos() {
        let a = VideoRecord::new("a", vec![frame("f0", "a", FrameKind::P)]);
        let b = VideoRecord::new("b", vec![frame("f0", "b", FrameKind::Np)]);
        let m = CorpusManifest::new(Provenance::External, None, vec![a, b]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_stale_histogram() {
        let mut v = VideoRecord::new("a", vec![frame("f0", "a", FrameKind::P)]);
        v.class_histogram.np = 4;
        let m = CorpusManifest::new(Provenance::External, None, vec![v]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn homogeneity_and_class_must_agree() {
        let mut f = frame("f0", "a", FrameKind::Heterogeneous);
        f.global_class = Some(ContentClass::P);
        assert!(f.validate().is_err());
        let mut f = frame("f1", "a", FrameKind::P);
        f.global_class = None;
        assert!(f.validate().is_err());
    }

    #[test]
    fn class_index_convention() {
        assert_eq!(ContentClass::NP.index(), 0);
        assert_eq!(ContentClass::P.index(), 1);
        assert_eq!(ContentClass::NP.file_value(), 0);
        assert_eq!(ContentClass::P.file_value(), 255);
        assert!(ContentClass::from_index(2).is_err());
    }
}
