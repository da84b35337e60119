//! One adaptive graph convolution block.
//!
//! Spatial step, per adjacency subset `k`:
//!
//! ```text
//! y = sum_k W_k . x . (A_k + B_k + C_k(x))
//! ```
//!
//! `A_k` is the fixed normalized slice, `B_k` a learned `[V, V]` offset and
//! `C_k(x)` a per-sample affinity: embeddings `theta_k x` and `phi_k x` are
//! contracted over embedding channels and time, scaled by `1 / (E * T)` and
//! softmax-normalized over the target vertex. The spatial output then runs
//! through BN, ReLU, a strided temporal convolution, BN, the residual add
//! and a final ReLU.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{BatchNorm, ForwardCtx, Role};
use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::graph::SUBSET_COUNT;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgcnBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub temporal_kernel: usize,
    pub embed_channels: usize,
    /// Include the data-dependent affinity term `C_k`.
    pub adaptive_affinity: bool,
}

impl AgcnBlockConfig {
    /// Kernel 9 along time, embedding width `max(out / 4, 4)`.
    pub fn new(in_channels: usize, out_channels: usize, temporal_stride: usize) -> Self {
        AgcnBlockConfig {
            in_channels,
            out_channels,
            temporal_stride,
            temporal_kernel: 9,
            embed_channels: (out_channels / 4).max(4),
            adaptive_affinity: true,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.temporal_kernel, self.temporal_stride, self.temporal_kernel / 2)
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.temporal_stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("block {self:?}: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.embed_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return bad("temporal kernel must be odd");
        }
        if self.temporal_stride == 0 {
            return bad("temporal stride must be positive");
        }
        Ok(())
    }
}

/// 1x1 strided projection on the residual path.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<F: Real> {
    pub weight: Tensor<F>,
    pub bn: BatchNorm<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgcnBlock<F: Real> {
    pub config: AgcnBlockConfig,
    /// `[C_out, C_in]` per subset.
    pub channel_maps: Vec<Tensor<F>>,
    /// Learned adjacency offsets `[V, V]`, zero at initialization.
    pub learned_adjacency: Vec<Tensor<F>>,
    /// `[E, C_in]` per subset.
    pub theta: Vec<Tensor<F>>,
    pub phi: Vec<Tensor<F>>,
    /// `[C_out, C_out, kernel, 1]`.
    pub temporal_weight: Tensor<F>,
    pub temporal_bias: Tensor<F>,
    pub bn_spatial: BatchNorm<F>,
    pub bn_temporal: BatchNorm<F>,
    pub residual: Option<Projection<F>>,
}

fn normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

impl<F: Real> AgcnBlock<F> {
    pub fn new<R: Rng + ?Sized>(config: AgcnBlockConfig, vertices: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (ci, co, e, kt) = (
            config.in_channels,
            config.out_channels,
            config.embed_channels,
            config.temporal_kernel,
        );
        let branch_std = (2.0 / (co * SUBSET_COUNT) as f64).sqrt();
        let channel_maps = (0..SUBSET_COUNT).map(|_| normal(&[co, ci], branch_std, rng)).collect();
        let embed_std = (2.0 / e as f64).sqrt();
        let theta = (0..SUBSET_COUNT).map(|_| normal(&[e, ci], embed_std, rng)).collect();
        let phi = (0..SUBSET_COUNT).map(|_| normal(&[e, ci], embed_std, rng)).collect();
        let temporal_weight = normal(&[co, co, kt, 1], (2.0 / (co * kt) as f64).sqrt(), rng);
        let residual = config.has_projection().then(|| Projection {
            weight: normal(&[co, ci, 1, 1], (2.0 / co as f64).sqrt(), rng),
            bn: BatchNorm::new(&[co], &[0, 2, 3]),
        });
        Ok(AgcnBlock {
            config,
            channel_maps,
            learned_adjacency: (0..SUBSET_COUNT).map(|_| Tensor::zeros(&[vertices, vertices])).collect(),
            theta,
            phi,
            temporal_weight,
            temporal_bias: Tensor::zeros(&[co]),
            bn_spatial: BatchNorm::new(&[co], &[0, 2, 3]),
            bn_temporal: BatchNorm::new(&[co], &[0, 2, 3]),
            residual,
        })
    }

    /// Temporal length after this block.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        self.config.geometry().output_len(t)
    }

    /// Softmax-normalized affinity `C_k(x)` as `[N, V, V]`, rows summing to one.
    pub fn affinity(&self, g: &mut Graph<F>, x: Var, k: usize, prefix: &str, ctx: &mut ForwardCtx<F>) -> Result<Var> {
        let [n, ci, t, v] = dims4(g.shape(x))?;
        let e = self.config.embed_channels;
        let flat = g.reshape(x, &[n, ci, t * v])?;
        let theta = ctx.binder.bind(g, format!("{prefix}.theta.{k}"), &self.theta[k]);
        let phi = ctx.binder.bind(g, format!("{prefix}.phi.{k}"), &self.phi[k]);
        let a = g.matmul(theta, flat)?;
        let a = g.reshape(a, &[n, e * t, v])?;
        let a = g.transpose_last(a)?;
        let b = g.matmul(phi, flat)?;
        let b = g.reshape(b, &[n, e * t, v])?;
        let scores = g.matmul(a, b)?;
        let scores = g.scale(scores, F::one() / F::lit((e * t) as f64))?;
        g.softmax(scores, 2)
    }

    /// `x: [N, C_in, T, V]` to `[N, C_out, T', V]`; `adjacency` holds the three
    /// fixed normalized slices.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        x: Var,
        adjacency: &[Var],
        prefix: &str,
        ctx: &mut ForwardCtx<F>,
    ) -> Result<Var> {
        let [n, ci, t, v] = dims4(g.shape(x))?;
        let co = self.config.out_channels;
        if ci != self.config.in_channels || adjacency.len() != SUBSET_COUNT {
            return Err(Error::shape(
                "agcn_block",
                format!("input {:?} for {:?}", g.shape(x), self.config),
            ));
        }
        let mut spatial: Option<Var> = None;
        for (k, &fixed) in adjacency.iter().enumerate() {
            let learned = ctx
                .binder
                .bind(g, format!("{prefix}.adj.{k}"), &self.learned_adjacency[k]);
            let mut adj = g.add(fixed, learned)?;
            if self.config.adaptive_affinity {
                let c = self.affinity(g, x, k, prefix, ctx)?;
                adj = g.add(c, adj)?;
            }
            let mixed = g.graph_conv_term(x, adj)?;
            let mixed = g.reshape(mixed, &[n, ci, t * v])?;
            let w = ctx.binder.bind(g, format!("{prefix}.w.{k}"), &self.channel_maps[k]);
            let term = g.matmul(w, mixed)?;
            spatial = Some(match spatial {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let y = spatial.expect("three subsets");
        let y = g.reshape(y, &[n, co, t, v])?;
        let y = self.bn_spatial.forward(g, y, &format!("{prefix}.bn_spatial"), ctx)?;
        let y = g.relu(y)?;

        let tw = ctx.binder.bind(g, format!("{prefix}.tconv.weight"), &self.temporal_weight);
        let tb = ctx.binder.bind(g, format!("{prefix}.tconv.bias"), &self.temporal_bias);
        let y = g.temporal_conv_bias(y, tw, Some(tb), self.config.geometry())?;
        let y = self.bn_temporal.forward(g, y, &format!("{prefix}.bn_temporal"), ctx)?;

        let shortcut = match &self.residual {
            None => x,
            Some(p) => {
                let w = ctx.binder.bind(g, format!("{prefix}.residual.weight"), &p.weight);
                let geom = ConvGeometry::new(1, self.config.temporal_stride, 0);
                let r = g.temporal_conv_bias(x, w, None, geom)?;
                p.bn.forward(g, r, &format!("{prefix}.residual.bn"), ctx)?
            }
        };
        let y = g.add(y, shortcut)?;
        g.relu(y)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Role, &'a Tensor<F>)) {
        for k in 0..SUBSET_COUNT {
            f(format!("{prefix}.w.{k}"), Role::Param, &self.channel_maps[k]);
            f(format!("{prefix}.adj.{k}"), Role::Param, &self.learned_adjacency[k]);
            f(format!("{prefix}.theta.{k}"), Role::Param, &self.theta[k]);
            f(format!("{prefix}.phi.{k}"), Role::Param, &self.phi[k]);
        }
        f(format!("{prefix}.tconv.weight"), Role::Param, &self.temporal_weight);
        f(format!("{prefix}.tconv.bias"), Role::Param, &self.temporal_bias);
        self.bn_spatial.visit(&format!("{prefix}.bn_spatial"), f);
        self.bn_temporal.visit(&format!("{prefix}.bn_temporal"), f);
        if let Some(p) = &self.residual {
            f(format!("{prefix}.residual.weight"), Role::Param, &p.weight);
            p.bn.visit(&format!("{prefix}.residual.bn"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Role, &mut Tensor<F>)) {
        for k in 0..SUBSET_COUNT {
            f(format!("{prefix}.w.{k}"), Role::Param, &mut self.channel_maps[k]);
            f(format!("{prefix}.adj.{k}"), Role::Param, &mut self.learned_adjacency[k]);
            f(format!("{prefix}.theta.{k}"), Role::Param, &mut self.theta[k]);
            f(format!("{prefix}.phi.{k}"), Role::Param, &mut self.phi[k]);
        }
        f(format!("{prefix}.tconv.weight"), Role::Param, &mut self.temporal_weight);
        f(format!("{prefix}.tconv.bias"), Role::Param, &mut self.temporal_bias);
        self.bn_spatial.visit_mut(&format!("{prefix}.bn_spatial"), f);
        self.bn_temporal.visit_mut(&format!("{prefix}.bn_temporal"), f);
        if let Some(p) = &mut self.residual {
            f(format!("{prefix}.residual.weight"), Role::Param, &mut p.weight);
            p.bn.visit_mut(&format!("{prefix}.residual.bn"), f);
        }
    }

    pub(crate) fn apply_bn_update(&mut self, suffix: &str, state: crate::autodiff::BatchNormState<F>) -> bool {
        let slot = match suffix {
            "bn_spatial" => &mut self.bn_spatial.state,
            "bn_temporal" => &mut self.bn_temporal.state,
            "residual.bn" => match &mut self.residual {
                Some(p) => &mut p.bn.state,
                None => return false,
            },
            _ => return false,
        };
        *slot = state;
        true
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape("agcn", format!("expected [N, C, T, V], got {shape:?}")))
}
