mod common;

use handgcn::autodiff::{Graph, Mode, Var};
use handgcn::graph::{AdjacencyStack, HandGraphTopology, SUBSET_COUNT, WRIST};
use handgcn::nn::{checkpoint, Binder, to_bone_stream, AgcnBlock, AgcnBlockConfig, AgcnModel, ForwardCtx, ModelConfig, Stream};
use handgcn::{Error, Tensor};

fn adjacency() -> AdjacencyStack {
    AdjacencyStack::build(&HandGraphTopology::build(), true)
}

fn block(config: AgcnBlockConfig, seed: u64) -> AgcnBlock<f64> {
    AgcnBlock::new(config, 21, &mut common::rng(seed)).unwrap()
}

fn slices(g: &mut Graph<f64>, stack: &[Tensor<f64>]) -> Vec<Var> {
    stack.iter().map(|t| g.input(t.clone())).collect()
}

fn run_block(b: &AgcnBlock<f64>, x: &Tensor<f64>, adj: &[Tensor<f64>], mode: Mode) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let a = slices(&mut g, adj);
    let mut ctx = ForwardCtx::new(mode);
    let y = b.forward(&mut g, xv, &a, "b", &mut ctx).unwrap();
    g.value(y).clone()
}

fn fixed_slices() -> Vec<Tensor<f64>> {
    let a = adjacency();
    (0..SUBSET_COUNT).map(|k| a.slice(k)).collect()
}

#[test]
fn degenerate_block_doubles_nonnegative_input() {
    let c = 4;
    let mut config = AgcnBlockConfig::new(c, c, 1);
    config.adaptive_affinity = false;
    let mut b = block(config, 1);
    b.channel_maps = vec![Tensor::eye(c), Tensor::zeros(&[c, c]), Tensor::zeros(&[c, c])];
    b.temporal_weight = Tensor::from_fn(&[c, c, 9, 1], |i| {
        let (o, rest) = (i / (c * 9), i % (c * 9));
        if rest / 9 == o && rest % 9 == 4 {
            1.0
        } else {
            0.0
        }
    });
    let mut adj = vec![Tensor::eye(21), Tensor::zeros(&[21, 21]), Tensor::zeros(&[21, 21])];
    adj.truncate(SUBSET_COUNT);
    let x = common::uniform(&mut common::rng(2), &[2, c, 10, 21], 0.0, 2.0);
    let y = run_block(&b, &x, &adj, Mode::Eval);
    let bn_gain = 1.0 / (1.0 + handgcn::autodiff::BN_EPSILON).sqrt();
    for (yv, xv) in y.data().iter().zip(x.data()) {
        let expect = xv * (1.0 + bn_gain * bn_gain);
        assert!((yv - expect).abs() < 1e-12, "{yv} vs {expect}");
        assert!((yv - 2.0 * xv).abs() < 1e-4 * (1.0 + xv));
    }
}

#[test]
fn zeroed_embeddings_give_uniform_affinity() {
    let mut b = block(AgcnBlockConfig::new(3, 8, 1), 3);
    for k in 0..SUBSET_COUNT {
        b.theta[k] = Tensor::zeros(b.theta[k].shape());
        b.phi[k] = Tensor::zeros(b.phi[k].shape());
    }
    let x = common::uniform(&mut common::rng(4), &[2, 3, 6, 21], -1.0, 1.0);
    let with_affinity = run_block(&b, &x, &fixed_slices(), Mode::Train);

    let mut plain = b.clone();
    plain.config.adaptive_affinity = false;
    let shifted: Vec<Tensor<f64>> = fixed_slices().iter().map(|s| s.map(|v| v + 1.0 / 21.0)).collect();
    let reference = run_block(&plain, &x, &shifted, Mode::Train);
    assert!(common::max_abs_diff(&with_affinity, &reference) < 1e-12);
}

/// With no adaptive terms the block is the fixed-graph pipeline built from primitives.
#[test]
fn zero_adaptive_block_matches_fixed_graph_construction() {
    let mut config = AgcnBlockConfig::new(3, 8, 2);
    config.adaptive_affinity = false;
    let b = block(config, 5);
    let x = common::uniform(&mut common::rng(6), &[2, 3, 9, 21], -1.0, 1.0);
    let adj = fixed_slices();
    let got = run_block(&b, &x, &adj, Mode::Eval);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut acc: Option<Var> = None;
    for (k, slice) in adj.iter().enumerate() {
        let a = g.input(slice.clone());
        let mixed = g.graph_conv_term(xv, a).unwrap();
        let mixed = g.reshape(mixed, &[2, 3, 9 * 21]).unwrap();
        let w = g.input(b.channel_maps[k].clone());
        let term = g.matmul(w, mixed).unwrap();
        acc = Some(match acc {
            Some(s) => g.add(s, term).unwrap(),
            None => term,
        });
    }
    let y = g.reshape(acc.unwrap(), &[2, 8, 9, 21]).unwrap();
    let bn = |g: &mut Graph<f64>, y: Var, layer: &handgcn::nn::BatchNorm<f64>| {
        let gamma = g.input(layer.gamma.clone());
        let beta = g.input(layer.beta.clone());
        let mut state = layer.state.clone();
        g.batch_norm(y, &layer.axes, gamma, beta, &mut state, Mode::Eval).unwrap()
    };
    let y = bn(&mut g, y, &b.bn_spatial);
    let y = g.relu(y).unwrap();
    let tw = g.input(b.temporal_weight.clone());
    let tb = g.input(b.temporal_bias.clone());
    let y = g.temporal_conv_bias(y, tw, Some(tb), b.config.geometry()).unwrap();
    let y = bn(&mut g, y, &b.bn_temporal);
    let proj = b.residual.as_ref().unwrap();
    let pw = g.input(proj.weight.clone());
    let r = g.temporal_conv(xv, pw, 2, 0).unwrap();
    let r = bn(&mut g, r, &proj.bn);
    let y = g.add(y, r).unwrap();
    let y = g.relu(y).unwrap();
    assert!(common::max_abs_diff(&got, g.value(y)) < 1e-12);
}

#[test]
fn block_shape_contract_and_affinity_rows() {
    let b = block(AgcnBlockConfig::new(3, 64, 1), 7);
    let x = common::uniform(&mut common::rng(8), &[2, 3, 50, 21], -1.0, 1.0);
    let y = run_block(&b, &x, &fixed_slices(), Mode::Train);
    assert_eq!(y.shape(), &[2, 64, 50, 21]);

    let mut g = Graph::new();
    let xv = g.input(x);
    let mut ctx = ForwardCtx::new(Mode::Eval);
    for k in 0..SUBSET_COUNT {
        let c = b.affinity(&mut g, xv, k, "b", &mut ctx).unwrap();
        assert_eq!(g.shape(c), &[2, 21, 21]);
        for row in g.value(c).data().chunks(21) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn standard(classes: usize, seed: u64) -> AgcnModel<f64> {
    let names = (0..classes).map(|c| format!("class{c:02}")).collect();
    AgcnModel::new(ModelConfig::standard(classes), names, Stream::Joint, adjacency(), seed).unwrap()
}

#[test]
fn shape_chain_through_standard_model() {
    let model = standard(40, 1);
    assert_eq!(model.config.temporal_lengths(50).unwrap(), vec![50, 50, 50, 25, 25, 13, 13]);
    let mut g = Graph::new();
    let x = g.input(common::uniform(&mut common::rng(9), &[4, 3, 50, 21], -1.0, 1.0));
    let mut ctx = ForwardCtx::new(Mode::Eval);
    let (logits, trace) = model.forward_traced(&mut g, x, &mut ctx).unwrap();
    let lengths: Vec<usize> = trace.iter().map(|&v| g.shape(v)[2]).collect();
    assert_eq!(lengths, vec![50, 50, 50, 25, 25, 13, 13]);
    assert_eq!(g.shape(*trace.last().unwrap())[1], 256);
    assert_eq!(model.fc_weight.shape(), &[40, 256]);
    assert_eq!(g.shape(logits), &[4, 40]);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let model = standard(5, 2);
    let mut g = Graph::new();
    let x = g.input(common::uniform(&mut common::rng(10), &[2, 3, 20, 21], -1.0, 1.0));
    let mut ctx = ForwardCtx::with_binder(Mode::Train, Binder::new(true));
    let logits = model.forward(&mut g, x, &mut ctx).unwrap();
    let loss = g.cross_entropy(logits, &[1, 3]).unwrap();
    g.backward(loss).unwrap();
    let grads = ctx.binder.take_grads(&mut g);
    let mut params = 0;
    model.visit(&mut |_, role, _| params += usize::from(role == handgcn::nn::Role::Param));
    assert_eq!(grads.len(), params);
    for (name, grad) in grads {
        let grad = grad.unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.is_finite(), "{name}");
    }
}

#[test]
fn eval_forward_is_pure_and_batch_independent() {
    let model = standard(6, 3);
    let mut r = common::rng(11);
    let a = common::uniform(&mut r, &[1, 3, 12, 21], -1.0, 1.0);
    let b = common::uniform(&mut r, &[1, 3, 12, 21], -1.0, 1.0);
    let c = common::uniform(&mut r, &[1, 3, 12, 21], -1.0, 1.0);
    let batch = |parts: &[&Tensor<f64>]| {
        let flat: Vec<Tensor<f64>> = parts.iter().map(|t| (*t).clone().reshape(&[3, 12, 21]).unwrap()).collect();
        Tensor::stack(&flat).unwrap()
    };
    let abc = model.predict_logits(&batch(&[&a, &b, &c])).unwrap();
    assert_eq!(abc, model.predict_logits(&batch(&[&a, &b, &c])).unwrap());
    let cab = model.predict_logits(&batch(&[&c, &a, &b])).unwrap();
    let rows = |t: &Tensor<f64>| t.data().chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (p, q) = (rows(&abc), rows(&cab));
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        for (x, y) in p[i].iter().zip(&q[j]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let aa = rows(&model.predict_logits(&batch(&[&a, &a])).unwrap());
    assert_eq!(aa[0], aa[1]);
}

#[test]
fn bone_stream_conventions() {
    let pairs = HandGraphTopology::build().bone_pairs();
    let mut g = Graph::<f64>::new();
    let constant = g.input(Tensor::from_fn(&[2, 3, 4, 21], |i| (i / 21) as f64));
    let bones = to_bone_stream(&mut g, constant, &pairs).unwrap();
    assert!(g.value(bones).data().iter().all(|&v| v == 0.0));
    let x = g.input(common::uniform(&mut common::rng(12), &[2, 3, 4, 21], -1.0, 1.0));
    let bones = to_bone_stream(&mut g, x, &pairs).unwrap();
    assert!(g.value(bones).data().chunks(21).all(|r| r[WRIST] == 0.0));
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let model: AgcnModel<f32> = {
        let names = vec!["bad".to_string(), "good".to_string()];
        AgcnModel::new(ModelConfig::standard(2), names, Stream::Bone, adjacency(), 4).unwrap()
    };
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let mut back: AgcnModel<f32> = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    assert_eq!(back.adjacency.tensor().cast::<f32>(), model.adjacency.tensor().cast::<f32>());
    back.adjacency = model.adjacency.clone();
    assert!(back == model);
    assert_eq!(&bytes[..4], b"AGCN");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.agcn");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::to_bytes(&checkpoint::load::<f32>(&path).unwrap()).unwrap(), bytes);

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    for bad in [wrong_version, wrong_magic, bytes[..bytes.len() - 3].to_vec()] {
        assert!(matches!(checkpoint::from_bytes::<f32>(&bad), Err(Error::Checkpoint(_))));
    }
}
