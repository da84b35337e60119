use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::keypoints::{HandFrame, Handedness, JointCoordinate, KeypointSequence, JOINT_COUNT};

/// Clips of constant per-class hand poses plus Gaussian jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            per_class: 16,
            frames: 50,
            noise: 0.01,
            seed: 7,
        }
    }
}

pub fn class_name(c: usize) -> String {
    format!("sign{c:02}")
}

/// `(sequence, class index)` pairs ordered by class.
pub fn separable_sequences(spec: &SyntheticSpec) -> Vec<(KeypointSequence, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poses: Vec<Vec<[f64; 3]>> = (0..spec.classes)
        .map(|_| {
            (0..JOINT_COUNT)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-0.2..0.2)])
                .collect()
        })
        .collect();
    let jitter = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, pose) in poses.iter().enumerate() {
        for i in 0..spec.per_class {
            let frames = (0..spec.frames as u64)
                .map(|f| {
                    let joints = pose
                        .iter()
                        .map(|p| {
                            JointCoordinate::new(
                                p[0] + jitter.sample(&mut rng),
                                p[1] + jitter.sample(&mut rng),
                                p[2] + jitter.sample(&mut rng),
                            )
                        })
                        .collect();
                    HandFrame::detected(f, Handedness::Right, 0.99, joints)
                })
                .collect();
            out.push((
                KeypointSequence {
                    video_id: format!("{}_{i:03}", class_name(c)),
                    label: class_name(c),
                    fps: 30.0,
                    frames,
                },
                c,
            ));
        }
    }
    out
}
