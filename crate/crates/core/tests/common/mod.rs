//! Shared harness: finite-difference gradient checks, loop oracles and the
//! criterion suites reused by the acceptance target.
#![allow(dead_code)]

use handgcn::autodiff::{BatchNormState, Graph, Mode, Var};
use handgcn::graph::{AdjacencyStack, HandGraphTopology};
use handgcn::nn::{AgcnBlockConfig, AgcnModel, Binder, ForwardCtx, ModelConfig, Role, Stream};
use handgcn::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const LINEAR_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
/// ReLU inputs closer than this to zero make a central difference straddle the kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / 1f64.max(a.abs()).max(f.abs())
}

#[derive(Debug)]
pub enum CheckError {
    /// A ReLU input sat too close to zero; draw another instance.
    Kink,
    Failed(String),
}

/// `<out, r>` for a fixed weight tensor `r`, as a `[1, 1]` loss.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let m = g.value(out).numel();
    let flat = g.reshape(out, &[1, m])?;
    let w = g.input(r.clone().reshape(&[m, 1])?);
    g.matmul(flat, w)
}

/// Largest relative error between analytic and central-difference gradients
/// of `<f(inputs), r>` over every input element.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> std::result::Result<f64, CheckError> {
    let fail = |e: handgcn::Error| CheckError::Failed(e.to_string());
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).map_err(fail)?;
    if g.min_relu_input_magnitude().is_some_and(|m| m < KINK_MARGIN) {
        return Err(CheckError::Kink);
    }
    let r = uniform(&mut rng(seed ^ 0x5eed), g.shape(out), -1.0, 1.0);
    let loss = project(&mut g, out, &r).map_err(fail)?;
    g.backward(loss).map_err(fail)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = project(&mut g, out, &r)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = t.data()[j] + EPS;
            let lp = eval(&xs).map_err(fail)?;
            xs[i].data_mut()[j] = t.data()[j] - EPS;
            let lm = eval(&xs).map_err(fail)?;
            let numeric = (lp - lm) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

pub struct OpCase {
    pub name: &'static str,
    pub tol: f64,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub build: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

fn bn_train(g: &mut Graph<f64>, v: &[Var], axes: &[usize], channels: &[usize]) -> Result<Var> {
    let mut state = BatchNormState::new(channels);
    g.batch_norm(v[0], axes, v[1], v[2], &mut state, Mode::Train)
}

/// Every differentiable primitive with its tolerance class.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_batched",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add_broadcast",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[3, 5], -1.0, 1.0)],
            build: |g, v| g.scale(v[0], -2.5),
        },
        OpCase {
            name: "reshape",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 6], -1.0, 1.0)],
            build: |g, v| g.reshape(v[0], &[3, 4]),
        },
        OpCase {
            name: "transpose_last",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            build: |g, v| g.transpose_last(v[0]),
        },
        OpCase {
            name: "sum",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            build: |g, v| g.sum(v[0]),
        },
        OpCase {
            name: "global_avg_pool",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 4, 5], -1.0, 1.0)],
            build: |g, v| g.global_avg_pool(v[0]),
        },
        OpCase {
            name: "graph_conv_term",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 5, 21], -1.0, 1.0), uniform(r, &[21, 21], 0.0, 1.0)],
            build: |g, v| g.graph_conv_term(v[0], v[1]),
        },
        OpCase {
            name: "graph_conv_term_per_sample",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 2, 3, 21], -1.0, 1.0), uniform(r, &[2, 21, 21], 0.0, 1.0)],
            build: |g, v| g.graph_conv_term(v[0], v[1]),
        },
        OpCase {
            name: "temporal_conv",
            tol: LINEAR_TOL,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 3, 7, 4], -1.0, 1.0),
                    uniform(r, &[5, 3, 3, 1], -1.0, 1.0),
                    uniform(r, &[5], -1.0, 1.0),
                ]
            },
            build: |g, v| g.temporal_conv_bias(v[0], v[1], Some(v[2]), handgcn::autodiff::ConvGeometry::new(3, 2, 1)),
        },
        OpCase {
            name: "vertex_diff",
            tol: LINEAR_TOL,
            inputs: |r| vec![uniform(r, &[2, 3, 2, 21], -1.0, 1.0)],
            build: |g, v| g.vertex_diff(v[0], &HandGraphTopology::build().parent_of),
        },
        OpCase {
            name: "relu",
            tol: COMPOSITE_TOL,
            inputs: |r| vec![uniform(r, &[4, 6], -1.0, 1.0)],
            build: |g, v| g.relu(v[0]),
        },
        OpCase {
            name: "softmax",
            tol: COMPOSITE_TOL,
            inputs: |r| vec![uniform(r, &[3, 5, 2], -2.0, 2.0)],
            build: |g, v| g.softmax(v[0], 1),
        },
        OpCase {
            name: "cross_entropy",
            tol: COMPOSITE_TOL,
            inputs: |r| vec![uniform(r, &[4, 5], -2.0, 2.0)],
            build: |g, v| g.cross_entropy(v[0], &[0, 3, 4, 3]),
        },
        OpCase {
            name: "batch_norm_train",
            tol: COMPOSITE_TOL,
            inputs: |r| {
                vec![
                    uniform(r, &[4, 3, 5, 21], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
            build: |g, v| bn_train(g, v, &[0, 2, 3], &[3]),
        },
        OpCase {
            name: "batch_norm_per_vertex",
            tol: COMPOSITE_TOL,
            inputs: |r| {
                vec![
                    uniform(r, &[4, 3, 5, 21], -1.0, 1.0),
                    uniform(r, &[3, 21], 0.5, 1.5),
                    uniform(r, &[3, 21], -0.5, 0.5),
                ]
            },
            build: |g, v| bn_train(g, v, &[0, 2], &[3, 21]),
        },
        OpCase {
            name: "batch_norm_eval",
            tol: LINEAR_TOL,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 3, 4, 5], -1.0, 1.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
            build: |g, v| {
                let mut state = BatchNormState::new(&[3]);
                state.running_mean = Tensor::new(&[3], vec![0.1, -0.2, 0.3])?;
                state.running_var = Tensor::new(&[3], vec![0.5, 1.5, 2.0])?;
                g.batch_norm(v[0], &[0, 2, 3], v[1], v[2], &mut state, Mode::Eval)
            },
        },
    ]
}

/// Checks one op, redrawing instances that land on a ReLU kink.
pub fn check_op(case: &OpCase, seed: u64) -> std::result::Result<f64, String> {
    for attempt in 0..50u64 {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        let inputs = (case.inputs)(&mut rng(s));
        match gradcheck(&inputs, s, case.build) {
            Ok(err) if err < case.tol => return Ok(err),
            Ok(err) => return Err(format!("{} seed {seed}: rel err {err:.3e} >= {:.0e}", case.name, case.tol)),
            Err(CheckError::Kink) => continue,
            Err(CheckError::Failed(m)) => return Err(format!("{} seed {seed}: {m}", case.name)),
        }
    }
    Err(format!("{} seed {seed}: every draw hit a ReLU kink", case.name))
}

/// Input BN, one `3 -> 6` strided block, GAP and FC, with random adaptive terms.
pub fn one_block_model(seed: u64) -> AgcnModel<f64> {
    let config = ModelConfig {
        in_channels: 3,
        vertex_count: 21,
        num_classes: 4,
        blocks: vec![AgcnBlockConfig::new(3, 6, 2)],
    };
    let classes = (0..4).map(|c| format!("c{c}")).collect();
    let adjacency = AdjacencyStack::build(&HandGraphTopology::build(), true);
    let mut model = AgcnModel::new(config, classes, Stream::Joint, adjacency, seed).expect("valid config");
    let mut r = rng(seed ^ 0xb10c);
    model.visit_mut(&mut |name, role, t| {
        if role == Role::Param && (name.contains(".adj.") || name.contains("gamma") || name.contains("beta")) {
            let lo = if name.contains("gamma") { 0.5 } else { -0.1 };
            let hi = if name.contains("gamma") { 1.5 } else { 0.1 };
            *t = uniform(&mut r, t.shape(), lo, hi);
        }
    });
    model
}

fn model_loss(model: &AgcnModel<f64>, x: &Tensor<f64>, labels: &[usize], grads: bool) -> Result<(f64, Vec<(String, Option<Tensor<f64>>)>, Option<f64>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut ctx = ForwardCtx::with_binder(Mode::Train, Binder::new(grads));
    let logits = model.forward(&mut g, xv, &mut ctx)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).data()[0];
    let margin = g.min_relu_input_magnitude();
    if !grads {
        return Ok((value, Vec::new(), margin));
    }
    g.backward(loss)?;
    Ok((value, ctx.binder.take_grads(&mut g), margin))
}

/// Every parameter of a 1-block network on `[2, 3, 8, 21]`, train-mode BN,
/// cross-entropy loss.
pub fn check_composite(seed: u64) -> std::result::Result<f64, String> {
    for attempt in 0..50u64 {
        let s = seed.wrapping_mul(1000).wrapping_add(attempt);
        let model = one_block_model(s);
        let x = uniform(&mut rng(s ^ 0xda7a), &[2, 3, 8, 21], -1.0, 1.0);
        let labels = [(s % 4) as usize, ((s + 1) % 4) as usize];
        let (_, grads, margin) = model_loss(&model, &x, &labels, true).map_err(|e| e.to_string())?;
        if margin.is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        let mut worst = 0.0f64;
        for (name, grad) in grads {
            let grad = grad.ok_or_else(|| format!("{name} has no gradient"))?;
            for j in 0..grad.numel() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.visit_mut(&mut |n, _, t| {
                        if n == name {
                            t.data_mut()[j] += delta;
                        }
                    });
                    model_loss(&m, &x, &labels, false).map(|r| r.0)
                };
                let lp = eval(EPS).map_err(|e| e.to_string())?;
                let lm = eval(-EPS).map_err(|e| e.to_string())?;
                worst = worst.max(rel_err(grad.data()[j], (lp - lm) / (2.0 * EPS)));
            }
        }
        return if worst < COMPOSITE_TOL {
            Ok(worst)
        } else {
            Err(format!("composite seed {seed}: rel err {worst:.3e}"))
        };
    }
    Err(format!("composite seed {seed}: every draw hit a ReLU kink"))
}

// Nested-loop oracles.

pub fn oracle_graph_conv(x: &Tensor<f64>, adj: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                for vi in 0..v {
                    let mut acc = 0.0;
                    for w in 0..v {
                        let a = if adj.rank() == 3 { adj.get(&[ni, w, vi]) } else { adj.get(&[w, vi]) };
                        acc += x.get(&[ni, ci, ti, w]) * a;
                    }
                    out.set(&[ni, ci, ti, vi], acc);
                }
            }
        }
    }
    out
}

pub fn oracle_temporal_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, t_out, v]);
    for ni in 0..n {
        for oi in 0..o {
            for to in 0..t_out {
                for vi in 0..v {
                    let mut acc = bias.map_or(0.0, |b| b.get(&[oi]));
                    for ci in 0..c {
                        for ki in 0..k {
                            let src = (to * stride + ki) as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                acc += w.get(&[oi, ci, ki, 0]) * x.get(&[ni, ci, src as usize, vi]);
                            }
                        }
                    }
                    out.set(&[ni, oi, to, vi], acc);
                }
            }
        }
    }
    out
}

pub fn oracle_bone(x: &Tensor<f64>, pairs: &[(usize, usize)]) -> Tensor<f64> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for ni in 0..s[0] {
        for ci in 0..s[1] {
            for ti in 0..s[2] {
                for &(j, p) in pairs {
                    let d = x.get(&[ni, ci, ti, j]) - x.get(&[ni, ci, ti, p]);
                    out.set(&[ni, ci, ti, j], d);
                }
            }
        }
    }
    out
}

/// `(precision, recall, f1)` per class and accuracy, by scalar loops.
pub fn oracle_metrics(m: &[Vec<u64>]) -> (Vec<[f64; 3]>, f64) {
    let k = m.len();
    let mut rows = Vec::new();
    let mut total = 0u64;
    let mut diag = 0u64;
    for c in 0..k {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fneg = 0u64;
        for i in 0..k {
            for j in 0..k {
                if i == c && j == c {
                    tp += m[i][j];
                } else if j == c {
                    fp += m[i][j];
                } else if i == c {
                    fneg += m[i][j];
                }
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        rows.push([p, r, f]);
    }
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            total += x;
            if i == j {
                diag += x;
            }
        }
    }
    (rows, diag as f64 / total as f64)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Graph conv, temporal conv, bone stream and metrics against the loop oracles;
/// returns the largest deviation seen per operation.
pub fn oracle_suite(instances: usize, seed: u64) -> std::result::Result<[f64; 4], String> {
    use handgcn::nn::to_bone_stream;
    use handgcn::pipeline::compute_metrics;
    let mut r = rng(seed);
    let mut worst = [0.0f64; 4];
    let topo = HandGraphTopology::build();
    let pairs = topo.bone_pairs();
    for _ in 0..instances {
        let (n, c, t) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..7));
        let x = uniform(&mut r, &[n, c, t, 21], -2.0, 2.0);
        let adj = if r.random_bool(0.5) {
            uniform(&mut r, &[21, 21], -1.0, 1.0)
        } else {
            uniform(&mut r, &[n, 21, 21], -1.0, 1.0)
        };
        let mut g = Graph::new();
        let (xv, av) = (g.input(x.clone()), g.input(adj.clone()));
        let out = g.graph_conv_term(xv, av).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(max_abs_diff(g.value(out), &oracle_graph_conv(&x, &adj)));

        let k = [1, 3, 5][r.random_range(0..3)];
        let pad = r.random_range(0..=k / 2);
        let stride = r.random_range(1..4);
        let tt = r.random_range(k.max(1)..k + 6);
        let o = r.random_range(1..5);
        let v = r.random_range(1..6);
        let x = uniform(&mut r, &[n, c, tt, v], -2.0, 2.0);
        let w = uniform(&mut r, &[o, c, k, 1], -1.0, 1.0);
        let b = uniform(&mut r, &[o], -1.0, 1.0);
        let with_bias = r.random_bool(0.5);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let geom = handgcn::autodiff::ConvGeometry::new(k, stride, pad);
        let out = g
            .temporal_conv_bias(xv, wv, with_bias.then_some(bv), geom)
            .map_err(|e| e.to_string())?;
        let expect = oracle_temporal_conv(&x, &w, with_bias.then_some(&b), stride, pad);
        worst[1] = worst[1].max(max_abs_diff(g.value(out), &expect));

        let x = uniform(&mut r, &[n, 3, t, 21], -2.0, 2.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = to_bone_stream(&mut g, xv, &pairs).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(max_abs_diff(g.value(out), &oracle_bone(&x, &pairs)));

        let kk = r.random_range(2..9);
        let mut m: Vec<Vec<u64>> = (0..kk).map(|_| (0..kk).map(|_| r.random_range(0..20)).collect()).collect();
        m[0][0] += 1;
        let names: Vec<String> = (0..kk).map(|i| format!("c{i}")).collect();
        let report = compute_metrics(&m, &names).map_err(|e| e.to_string())?;
        let (rows, acc) = oracle_metrics(&m);
        let mut dev = (report.accuracy - acc).abs();
        for (got, want) in report.per_class.iter().zip(&rows) {
            dev = dev
                .max((got.precision - want[0]).abs())
                .max((got.recall - want[1]).abs())
                .max((got.f1 - want[2]).abs());
        }
        worst[3] = worst[3].max(dev);
    }
    Ok(worst)
}
