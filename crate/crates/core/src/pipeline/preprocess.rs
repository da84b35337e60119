use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keypoints::{DatasetManifest, KeypointSequence, JOINT_COUNT};
use crate::tensor::Tensor;

/// Coordinates per joint.
pub const COORDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Interpolate,
    ZeroFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResamplePolicy {
    #[default]
    UniformIndex,
    PadRepeatLast,
}

impl MissingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingPolicy::Interpolate => "interpolate",
            MissingPolicy::ZeroFill => "zero-fill",
        }
    }
}

impl FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(MissingPolicy::Interpolate),
            "zero-fill" => Ok(MissingPolicy::ZeroFill),
            _ => Err(Error::Config(format!("unknown missing-frame policy {s:?}"))),
        }
    }
}

impl ResamplePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ResamplePolicy::UniformIndex => "uniform-index",
            ResamplePolicy::PadRepeatLast => "pad-repeat-last",
        }
    }
}

impl FromStr for ResamplePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-index" => Ok(ResamplePolicy::UniformIndex),
            "pad-repeat-last" => Ok(ResamplePolicy::PadRepeatLast),
            _ => Err(Error::Config(format!("unknown resample policy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub time_steps: usize,
    pub missing: MissingPolicy,
    pub resample: ResamplePolicy,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            time_steps: 50,
            missing: MissingPolicy::Interpolate,
            resample: ResamplePolicy::UniformIndex,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps < 2 {
            return Err(Error::Config(format!("T = {} must be at least 2", self.time_steps)));
        }
        Ok(())
    }
}

/// Source frame chosen for each of the `t` output steps of an `l`-frame clip.
pub fn resample_indices(l: usize, t: usize, policy: ResamplePolicy) -> Vec<usize> {
    if l == 0 {
        return Vec::new();
    }
    if policy == ResamplePolicy::PadRepeatLast && l < t {
        return (0..t).map(|i| i.min(l - 1)).collect();
    }
    if l == 1 || t == 1 {
        return vec![0; t];
    }
    // round(i (L-1) / (T-1)) with halves rounded up, in integers
    let (num, den) = (l - 1, t - 1);
    (0..t).map(|i| (2 * i * num + den) / (2 * den)).collect()
}

/// Per-frame joint positions after filling undetected frames.
pub fn fill_missing(seq: &KeypointSequence, policy: MissingPolicy) -> Result<Vec<[[f64; COORDS]; JOINT_COUNT]>> {
    let detected: Vec<usize> = (0..seq.frames.len()).filter(|&i| seq.frames[i].detected).collect();
    if detected.is_empty() {
        return Err(Error::Empty(format!("{}: no detected frames", seq.video_id)));
    }
    let pose = |i: usize| {
        let mut p = [[0.0; COORDS]; JOINT_COUNT];
        for (slot, j) in p.iter_mut().zip(&seq.frames[i].joints) {
            *slot = j.to_array();
        }
        p
    };
    let mut out = Vec::with_capacity(seq.frames.len());
    let mut next = 0usize;
    for (i, frame) in seq.frames.iter().enumerate() {
        if frame.detected {
            out.push(pose(i));
            next += 1;
            continue;
        }
        if policy == MissingPolicy::ZeroFill {
            out.push([[0.0; COORDS]; JOINT_COUNT]);
            continue;
        }
        let filled = match (next.checked_sub(1).map(|k| detected[k]), detected.get(next)) {
            (Some(a), Some(&b)) => {
                let (fa, fb) = (seq.frames[a].frame_index as f64, seq.frames[b].frame_index as f64);
                let w = (frame.frame_index as f64 - fa) / (fb - fa);
                let (pa, pb) = (pose(a), pose(b));
                let mut p = [[0.0; COORDS]; JOINT_COUNT];
                for v in 0..JOINT_COUNT {
                    for c in 0..COORDS {
                        p[v][c] = pa[v][c] + w * (pb[v][c] - pa[v][c]);
                    }
                }
                p
            }
            (Some(a), None) => pose(a),
            (None, Some(&b)) => pose(b),
            (None, None) => unreachable!("at least one detected frame"),
        };
        out.push(filled);
    }
    Ok(out)
}

/// `[3, T, 21]` model input for one sequence.
pub fn to_input_tensor(seq: &KeypointSequence, cfg: &PreprocessConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let frames = fill_missing(seq, cfg.missing)?;
    let t = cfg.time_steps;
    let idx = resample_indices(frames.len(), t, cfg.resample);
    Ok(Tensor::from_fn(&[COORDS, t, JOINT_COUNT], |i| {
        let (c, rest) = (i / (t * JOINT_COUNT), i % (t * JOINT_COUNT));
        frames[idx[rest / JOINT_COUNT]][rest % JOINT_COUNT][c]
    }))
}

/// Stacked inputs and class indices for a whole manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 3, T, 21]`.
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds from in-memory sequences labelled by index into `classes`.
    pub fn from_sequences(seqs: &[(KeypointSequence, usize)], classes: Vec<String>, cfg: &PreprocessConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("no sequences".into()));
        }
        let mut labels = Vec::with_capacity(seqs.len());
        let mut samples = Vec::with_capacity(seqs.len());
        for (seq, label) in seqs {
            if *label >= classes.len() {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    classes: classes.len(),
                });
            }
            samples.push(to_input_tensor(seq, cfg)?);
            labels.push(*label);
        }
        Ok(Dataset {
            inputs: Tensor::stack(&samples)?,
            labels,
            classes,
        })
    }

    /// Loads and preprocesses every entry of `manifest`.
    pub fn load(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Self> {
        let mut seqs = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let seq = KeypointSequence::from_path(&entry.path)?;
            let label = manifest
                .class_index(&entry.label)
                .ok_or_else(|| Error::Manifest(format!("unknown label {:?}", entry.label)))?;
            seqs.push((seq, label));
        }
        if seqs.is_empty() {
            return Err(Error::Empty("manifest has no entries".into()));
        }
        let mut labels = Vec::with_capacity(seqs.len());
        let mut samples = Vec::with_capacity(seqs.len());
        for ((seq, label), entry) in seqs.iter().zip(&manifest.entries) {
            samples.push(to_input_tensor(seq, cfg).map_err(|e| Error::in_file(&entry.path, e))?);
            labels.push(*label);
        }
        Ok(Dataset {
            inputs: Tensor::stack(&samples)?,
            labels,
            classes: manifest.classes.clone(),
        })
    }

    /// Rows `idx` as a `[n, 3, T, 21]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let shape = self.inputs.shape();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = idx.len();
        Ok((Tensor::new(&bshape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}
