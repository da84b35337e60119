//! Keypoint interchange documents, dataset manifests and the stratified split.
//!
//! One UTF-8 JSON document describes one video:
//!
//! ```json
//! {"video_id": "bad_001", "label": "bad", "fps": 30.0, "frames": [
//!   {"frame_index": 0, "detected": true, "handedness": "Right",
//!    "detection_score": 0.93, "joints": [[0.51, 0.62, -0.01], ...21 entries]},
//!   {"frame_index": 1, "detected": false, "handedness": "Unknown"}
//! ]}
//! ```
//!
//! `detection_score` and `joints` are present iff `detected` is true. Bare
//! `NaN`/`Infinity` tokens, as written by Python's `json` module, are read so
//! that they can be rejected as non-finite coordinates rather than as syntax.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Landmarks per detected hand.
pub const JOINT_COUNT: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct JointCoordinate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl JointCoordinate {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        JointCoordinate { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Handedness {
    Left,
    Right,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandFrame {
    pub frame_index: u64,
    pub detected: bool,
    pub handedness: Handedness,
    /// `Some` iff `detected`.
    pub detection_score: Option<f64>,
    /// 21 joints when detected, empty otherwise.
    pub joints: Vec<JointCoordinate>,
}

impl HandFrame {
    pub fn detected(frame_index: u64, handedness: Handedness, score: f64, joints: Vec<JointCoordinate>) -> Self {
        HandFrame {
            frame_index,
            detected: true,
            handedness,
            detection_score: Some(score),
            joints,
        }
    }

    pub fn missing(frame_index: u64) -> Self {
        HandFrame {
            frame_index,
            detected: false,
            handedness: Handedness::Unknown,
            detection_score: None,
            joints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub video_id: String,
    pub label: String,
    pub fps: f64,
    pub frames: Vec<HandFrame>,
}

impl KeypointSequence {
    pub fn detected_count(&self) -> usize {
        self.frames.iter().filter(|f| f.detected).count()
    }

    /// Parses and validates one interchange document.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Malformed(format!("not UTF-8: {e}")))?;
        let raw: RawDocument = serde_json::from_str(&quote_non_finite(text))
            .map_err(|e| Error::Malformed(e.to_string()))?;
        raw.validate()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|e| Error::in_file(path, e))
    }

    pub fn to_json(&self) -> String {
        let frames = self
            .frames
            .iter()
            .map(|f| RawFrame {
                frame_index: f.frame_index,
                detected: f.detected,
                handedness: Some(f.handedness),
                detection_score: f.detection_score.map(Number::Finite),
                joints: f.detected.then(|| {
                    f.joints
                        .iter()
                        .map(|j| j.to_array().iter().map(|&v| Number::Finite(v)).collect())
                        .collect()
                }),
            })
            .collect();
        let raw = RawDocument {
            video_id: self.video_id.clone(),
            label: self.label.clone(),
            fps: self.fps,
            frames,
        };
        serde_json::to_string(&raw).expect("keypoint document serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    video_id: String,
    label: String,
    fps: f64,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    frame_index: u64,
    detected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    handedness: Option<Handedness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detection_score: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<Vec<Number>>>,
}

/// A JSON number, or one of the quoted non-finite spellings.
#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(untagged)]
enum Number {
    Finite(f64),
    #[serde(deserialize_with = "non_finite")]
    NonFinite(f64),
}

impl Number {
    fn get(self) -> f64 {
        match self {
            Number::Finite(v) | Number::NonFinite(v) => v,
        }
    }
}

fn non_finite<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let s = String::deserialize(d)?;
    match s.as_str() {
        "NaN" => Ok(f64::NAN),
        "Infinity" => Ok(f64::INFINITY),
        "-Infinity" => Ok(f64::NEG_INFINITY),
        other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
    }
}

/// Wraps bare `NaN`, `Infinity` and `-Infinity` tokens in quotes.
fn quote_non_finite(text: &str) -> std::borrow::Cow<'_, str> {
    if !text.contains("NaN") && !text.contains("Infinity") {
        return text.into();
    }
    let mut out = String::with_capacity(text.len() + 16);
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
        } else if c == '"' {
            in_string = true;
        } else if let Some(tok) = ["NaN", "Infinity", "-Infinity"]
            .into_iter()
            .find(|t| rest.starts_with(t))
        {
            out.push('"');
            out.push_str(tok);
            out.push('"');
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out.into()
}

impl RawDocument {
    fn validate(self) -> Result<KeypointSequence> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Malformed(format!("fps must be positive, got {}", self.fps)));
        }
        let mut frames = Vec::with_capacity(self.frames.len());
        let mut previous: Option<u64> = None;
        for (pos, raw) in self.frames.into_iter().enumerate() {
            if previous.is_some_and(|p| raw.frame_index <= p) {
                return Err(Error::FrameOrder {
                    frame: pos,
                    index: raw.frame_index,
                });
            }
            previous = Some(raw.frame_index);
            let invalid = |message: &str| Error::InvalidFrame {
                frame: pos,
                message: message.to_string(),
            };
            let handedness = raw.handedness.unwrap_or_default();
            if !raw.detected {
                if raw.detection_score.is_some() || raw.joints.is_some() {
                    return Err(invalid("undetected frame carries detection_score or joints"));
                }
                frames.push(HandFrame {
                    handedness,
                    ..HandFrame::missing(raw.frame_index)
                });
                continue;
            }
            let score = raw
                .detection_score
                .ok_or_else(|| invalid("detected frame lacks detection_score"))?
                .get();
            if !(0.0..=1.0).contains(&score) {
                return Err(invalid(&format!("detection_score {score} outside [0, 1]")));
            }
            let raw_joints = raw.joints.ok_or_else(|| invalid("detected frame lacks joints"))?;
            if raw_joints.len() != JOINT_COUNT {
                return Err(Error::JointCount {
                    frame: pos,
                    count: raw_joints.len(),
                });
            }
            let mut joints = Vec::with_capacity(JOINT_COUNT);
            for (j, coords) in raw_joints.iter().enumerate() {
                let [x, y, z] = coords[..] else {
                    return Err(invalid(&format!("joint {j} has {} components, expected 3", coords.len())));
                };
                let joint = JointCoordinate::new(x.get(), y.get(), z.get());
                if !joint.to_array().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteCoordinate { frame: pos, joint: j });
                }
                joints.push(joint);
            }
            frames.push(HandFrame::detected(raw.frame_index, handedness, score, joints));
        }
        Ok(KeypointSequence {
            video_id: self.video_id,
            label: self.label,
            fps: self.fps,
            frames,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: String,
    pub path: PathBuf,
    pub split: Option<Split>,
}

/// Ordered class list plus one entry per video, sorted by (label, video_id).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub split_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    video_id: String,
    label: String,
    path: String,
    split: String,
}

impl DatasetManifest {
    /// Indexes `root/<class>/*.json`, validating every document.
    pub fn build(root: &Path) -> Result<Self> {
        let mut class_dirs: Vec<(String, PathBuf)> = read_dir_sorted(root)?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Manifest(format!("no class directories under {}", root.display())));
        }
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (class, dir) in &class_dirs {
            let files: Vec<PathBuf> = read_dir_sorted(dir)?
                .into_iter()
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
                .collect();
            if files.is_empty() {
                return Err(Error::Manifest(format!("empty class directory {}", dir.display())));
            }
            for path in files {
                let seq = match KeypointSequence::from_path(&path) {
                    Ok(seq) => seq,
                    Err(e) => {
                        problems.push(e.to_string());
                        continue;
                    }
                };
                if &seq.label != class {
                    problems.push(format!(
                        "{}: label {:?} does not match class directory {class:?}",
                        path.display(),
                        seq.label
                    ));
                    continue;
                }
                if !seen.insert(seq.video_id.clone()) {
                    return Err(Error::Manifest(format!(
                        "duplicate video_id {:?} at {}",
                        seq.video_id,
                        path.display()
                    )));
                }
                entries.push(ManifestEntry {
                    video_id: seq.video_id,
                    label: class.clone(),
                    path,
                    split: None,
                });
            }
        }
        if !problems.is_empty() {
            return Err(Error::Manifest(format!(
                "{} invalid file(s):\n  {}",
                problems.len(),
                problems.join("\n  ")
            )));
        }
        Self::from_entries(entries, None)
    }

    /// Normalizes ordering and derives the class list from the entries.
    pub fn from_entries(mut entries: Vec<ManifestEntry>, split_seed: Option<u64>) -> Result<Self> {
        entries.sort_by(|a, b| (&a.label, &a.video_id).cmp(&(&b.label, &b.video_id)));
        let mut ids = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !ids.insert(&e.video_id)) {
            return Err(Error::Manifest(format!("duplicate video_id {:?}", dup.video_id)));
        }
        let mut classes: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
        classes.dedup();
        Ok(DatasetManifest {
            classes,
            entries,
            split_seed,
        })
    }

    pub fn class_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> = self.classes.iter().map(|c| (c.as_str(), 0)).collect();
        for e in &self.entries {
            *counts.entry(e.label.as_str()).or_default() += 1;
        }
        counts
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Entries assigned to `split`, keeping the full class list.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == Some(split))
                .cloned()
                .collect(),
            split_seed: self.split_seed,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for e in &self.entries {
            writer
                .serialize(ManifestRow {
                    video_id: e.video_id.clone(),
                    label: e.label.clone(),
                    path: e.path.to_string_lossy().into_owned(),
                    split: e.split.map(Split::as_str).unwrap_or("").to_string(),
                })
                .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io("<manifest>", e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 1)))?;
            let split = match row.split.as_str() {
                "" => None,
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                other => {
                    return Err(Error::Manifest(format!("row {}: unknown split {other:?}", line + 1)))
                }
            };
            entries.push(ManifestEntry {
                video_id: row.video_id,
                label: row.label,
                path: PathBuf::from(row.path),
                split,
            });
        }
        if entries.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        Self::from_entries(entries, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file).map_err(|e| Error::in_file(path, e))
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    paths.sort();
    Ok(paths)
}

/// Per-class test count: `round(fraction * n)`, at least one and at most `n - 1`.
pub fn test_count(n: usize, test_fraction: f64) -> usize {
    ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Splits every class independently; the selection depends only on the
/// manifest contents, `test_fraction` and `seed`.
pub fn stratified_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let labelled = assign_splits(manifest, test_fraction, seed)?;
    Ok((labelled.subset(Split::Train), labelled.subset(Split::Test)))
}

/// Like [`stratified_split`], returning one manifest with every entry tagged.
pub fn assign_splits(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for class in &manifest.classes {
        let mut members: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| &e.label == class).collect();
        if members.len() < 2 {
            return Err(Error::Split(format!(
                "class {class:?} has {} entries, need at least 2",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        members.shuffle(&mut rng);
        let n_test = test_count(members.len(), test_fraction);
        for (i, e) in members.into_iter().enumerate() {
            entries.push(ManifestEntry {
                split: Some(if i < n_test { Split::Test } else { Split::Train }),
                ..e.clone()
            });
        }
    }
    let mut out = DatasetManifest::from_entries(entries, Some(seed))?;
    out.classes = manifest.classes.clone();
    Ok(out)
}
