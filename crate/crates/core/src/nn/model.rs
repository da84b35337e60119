use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::block::{dims4, AgcnBlock, AgcnBlockConfig};
use super::layers::{BatchNorm, ForwardCtx, Role};
use crate::autodiff::{BatchNormState, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyStack, HandGraphTopology, SUBSET_COUNT, VERTEX_COUNT};
use crate::tensor::{Real, Tensor};

/// Which view of the skeleton a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Raw joint coordinates.
    Joint,
    /// Joint minus parent joint.
    Bone,
}

impl Stream {
    pub fn tag(self) -> u8 {
        match self {
            Stream::Joint => 0,
            Stream::Bone => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stream::Joint),
            1 => Some(Stream::Bone),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Bone => "bone",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Stream::Joint),
            "bone" => Ok(Stream::Bone),
            other => Err(Error::Config(format!("unknown stream {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub vertex_count: usize,
    pub num_classes: usize,
    pub blocks: Vec<AgcnBlockConfig>,
}

impl ModelConfig {
    /// Seven blocks: 64, 64, 64, 128 (stride 2), 128, 256 (stride 2), 256.
    pub fn standard(num_classes: usize) -> Self {
        let plan = [
            (3, 64, 1),
            (64, 64, 1),
            (64, 64, 1),
            (64, 128, 2),
            (128, 128, 1),
            (128, 256, 2),
            (256, 256, 1),
        ];
        ModelConfig {
            in_channels: 3,
            vertex_count: VERTEX_COUNT,
            num_classes,
            blocks: plan
                .iter()
                .map(|&(i, o, s)| AgcnBlockConfig::new(i, o, s))
                .collect(),
        }
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Temporal length after each block for an input of `t` frames.
    pub fn temporal_lengths(&self, t: usize) -> Option<Vec<usize>> {
        let mut len = t;
        self.blocks
            .iter()
            .map(|b| {
                len = b.geometry().output_len(len)?;
                Some(len)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block and one class".into()));
        }
        let mut channels = self.in_channels;
        for b in &self.blocks {
            b.validate()?;
            if b.in_channels != channels || b.out_channels < b.in_channels {
                return Err(Error::Config(format!(
                    "block {b:?} does not continue a non-decreasing channel chain from {channels}"
                )));
            }
            channels = b.out_channels;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgcnModel<F: Real> {
    pub config: ModelConfig,
    pub classes: Vec<String>,
    pub stream: Stream,
    pub adjacency: AdjacencyStack,
    pub parents: Vec<usize>,
    /// Normalizes each (coordinate, joint) channel over batch and time.
    pub input_bn: BatchNorm<F>,
    pub blocks: Vec<AgcnBlock<F>>,
    /// `[K, C_final]`.
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
}

impl<F: Real> AgcnModel<F> {
    pub fn new(
        config: ModelConfig,
        classes: Vec<String>,
        stream: Stream,
        adjacency: AdjacencyStack,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} outputs",
                classes.len(),
                config.num_classes
            )));
        }
        let v = config.vertex_count;
        if adjacency.vertex_count() != v {
            return Err(Error::Config(format!(
                "adjacency over {} vertices for a {v}-vertex model",
                adjacency.vertex_count()
            )));
        }
        let topology = HandGraphTopology::build();
        let parents = if v == topology.vertex_count {
            topology.parent_of.clone()
        } else {
            vec![0; v]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = config
            .blocks
            .iter()
            .map(|&b| AgcnBlock::new(b, v, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let k = config.num_classes;
        let fc = Normal::new(0.0, (2.0 / k as f64).sqrt()).expect("positive std");
        let fc_weight = Tensor::from_fn(&[k, config.final_channels()], |_| F::lit(fc.sample(&mut rng)));
        Ok(AgcnModel {
            input_bn: BatchNorm::new(&[config.in_channels, v], &[0, 2]),
            fc_bias: Tensor::zeros(&[k]),
            fc_weight,
            blocks,
            parents,
            adjacency,
            stream,
            classes,
            config,
        })
    }

    /// Logits `[N, K]` for `x: [N, C, T, V]`.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, ctx: &mut ForwardCtx<F>) -> Result<Var> {
        self.forward_traced(g, x, ctx).map(|(logits, _)| logits)
    }

    /// Like [`AgcnModel::forward`], also returning each block's output.
    pub fn forward_traced(&self, g: &mut Graph<F>, x: Var, ctx: &mut ForwardCtx<F>) -> Result<(Var, Vec<Var>)> {
        let [_, c, _, v] = dims4(g.shape(x))?;
        if c != self.config.in_channels || v != self.config.vertex_count {
            return Err(Error::shape("model", format!("input {:?}", g.shape(x))));
        }
        let mut h = match self.stream {
            Stream::Joint => x,
            Stream::Bone => g.vertex_diff(x, &self.parents)?,
        };
        h = self.input_bn.forward(g, h, "input_bn", ctx)?;
        let adjacency: Vec<Var> = (0..SUBSET_COUNT)
            .map(|k| g.input(self.adjacency.slice(k).cast()))
            .collect();
        let mut trace = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, &adjacency, &format!("blocks.{i}"), ctx)?;
            trace.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let w = ctx.binder.bind(g, "fc.weight".into(), &self.fc_weight);
        let b = ctx.binder.bind(g, "fc.bias".into(), &self.fc_bias);
        let wt = g.transpose_last(w)?;
        let logits = g.matmul(pooled, wt)?;
        Ok((g.add(logits, b)?, trace))
    }

    /// Eval-mode logits for a batch, without keeping the tape.
    pub fn predict_logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let logits = self.forward(&mut g, xv, &mut ctx)?;
        Ok(g.value(logits).clone())
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BatchNormState<F>)>) -> Result<()> {
        for (name, state) in updates {
            let applied = if name == "input_bn" {
                self.input_bn.state = state;
                true
            } else {
                name.strip_prefix("blocks.")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(i, suffix)| Some((i.parse::<usize>().ok()?, suffix)))
                    .and_then(|(i, suffix)| Some(self.blocks.get_mut(i)?.apply_bn_update(suffix, state)))
                    .unwrap_or(false)
            };
            if !applied {
                return Err(Error::Config(format!("unknown batch-norm layer {name:?}")));
            }
        }
        Ok(())
    }

    /// Every named tensor (parameters and running statistics) in checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Role, &'a Tensor<F>)) {
        self.input_bn.visit("input_bn", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("fc.weight".into(), Role::Param, &self.fc_weight);
        f("fc.bias".into(), Role::Param, &self.fc_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, Role, &mut Tensor<F>)) {
        self.input_bn.visit_mut("input_bn", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("fc.weight".into(), Role::Param, &mut self.fc_weight);
        f("fc.bias".into(), Role::Param, &mut self.fc_bias);
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, role, t| {
            if role == Role::Param {
                total += t.numel();
            }
        });
        total
    }
}

/// `out[..., v] = x[..., v] - x[..., parent(v)]` for `(joint, parent)` pairs;
/// the root bone is zero.
pub fn to_bone_stream<F: Real>(g: &mut Graph<F>, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let mut parents = vec![usize::MAX; pairs.len()];
    for &(joint, parent) in pairs {
        if joint >= parents.len() {
            return Err(Error::shape("to_bone_stream", format!("joint {joint} out of range")));
        }
        parents[joint] = parent;
    }
    if parents.contains(&usize::MAX) {
        return Err(Error::shape("to_bone_stream", "bone pairs do not cover every joint"));
    }
    g.vertex_diff(x, &parents)
}

/// Sum of per-stream softmax probabilities, renormalized per row.
pub fn fuse_streams<F: Real>(joint: &Tensor<F>, bone: &Tensor<F>) -> Result<Tensor<F>> {
    if joint.shape() != bone.shape() || joint.rank() != 2 {
        return Err(Error::shape(
            "fuse_streams",
            format!("{:?} vs {:?}", joint.shape(), bone.shape()),
        ));
    }
    let pj = crate::autodiff::softmax_rows(joint);
    let pb = crate::autodiff::softmax_rows(bone);
    let k = joint.shape()[1];
    let mut fused: Vec<F> = pj.data().iter().zip(pb.data()).map(|(a, b)| *a + *b).collect();
    for row in fused.chunks_mut(k) {
        let total: F = row.iter().copied().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    Tensor::new(joint.shape(), fused)
}
