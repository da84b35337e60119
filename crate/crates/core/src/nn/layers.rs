use crate::autodiff::{BatchNormState, Graph, Mode, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Whether a named tensor is trained or carried as state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Param,
    Buffer,
}

/// Registers parameters on a tape under their checkpoint names.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: bool,
    vars: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(trainable: bool) -> Self {
        Binder {
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn bind<F: Real>(&mut self, g: &mut Graph<F>, name: String, t: &Tensor<F>) -> Var {
        let v = if self.trainable {
            g.param(t.clone())
        } else {
            g.input(t.clone())
        };
        self.vars.push((name, v));
        v
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Moves every bound parameter's gradient off the tape.
    pub fn take_grads<F: Real>(&self, g: &mut Graph<F>) -> Vec<(String, Option<Tensor<F>>)> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), g.take_grad(*v)))
            .collect()
    }
}

/// Per-forward state: mode, parameter bindings and pending running-stat updates.
pub struct ForwardCtx<F: Real> {
    pub mode: Mode,
    pub binder: Binder,
    pub bn_updates: Vec<(String, BatchNormState<F>)>,
}

impl<F: Real> ForwardCtx<F> {
    /// Train mode binds parameters as trainable leaves; eval mode binds constants.
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            binder: Binder::new(mode == Mode::Train),
            bn_updates: Vec::new(),
        }
    }

    pub fn with_binder(mode: Mode, binder: Binder) -> Self {
        ForwardCtx {
            mode,
            binder,
            bn_updates: Vec::new(),
        }
    }
}

/// Affine batch normalization with its running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub state: BatchNormState<F>,
    pub axes: Vec<usize>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channel_shape: &[usize], axes: &[usize]) -> Self {
        BatchNorm {
            gamma: Tensor::full(channel_shape, F::one()),
            beta: Tensor::zeros(channel_shape),
            state: BatchNormState::new(channel_shape),
            axes: axes.to_vec(),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, prefix: &str, ctx: &mut ForwardCtx<F>) -> Result<Var> {
        let gamma = ctx.binder.bind(g, format!("{prefix}.gamma"), &self.gamma);
        let beta = ctx.binder.bind(g, format!("{prefix}.beta"), &self.beta);
        let mut state = self.state.clone();
        let y = g.batch_norm(x, &self.axes, gamma, beta, &mut state, ctx.mode)?;
        if ctx.mode == Mode::Train {
            ctx.bn_updates.push((prefix.to_string(), state));
        }
        Ok(y)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Role, &'a Tensor<F>)) {
        f(format!("{prefix}.gamma"), Role::Param, &self.gamma);
        f(format!("{prefix}.beta"), Role::Param, &self.beta);
        f(format!("{prefix}.running_mean"), Role::Buffer, &self.state.running_mean);
        f(format!("{prefix}.running_var"), Role::Buffer, &self.state.running_var);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Role, &mut Tensor<F>)) {
        f(format!("{prefix}.gamma"), Role::Param, &mut self.gamma);
        f(format!("{prefix}.beta"), Role::Param, &mut self.beta);
        f(format!("{prefix}.running_mean"), Role::Buffer, &mut self.state.running_mean);
        f(format!("{prefix}.running_var"), Role::Buffer, &mut self.state.running_var);
    }
}
