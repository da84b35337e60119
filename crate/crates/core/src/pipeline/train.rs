use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::nn::{fuse_streams, AgcnModel, ForwardCtx, Role};
use crate::pipeline::metrics::{compute_metrics, ClassificationReport};
use crate::pipeline::preprocess::Dataset;
use crate::tensor::{Real, Tensor};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be 32 or 64, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-2,
            epochs: 5,
            momentum: 0.9,
            seed: 7,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not usable", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Sample-weighted mean loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
}

pub fn write_epoch_log<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    let io = |e| Error::io("epoch log", e);
    writeln!(w, "epoch,step,loss,train_acc").map_err(io)?;
    for r in records {
        writeln!(w, "{},{},{:.6},{:.4}", r.epoch, r.step, r.loss, r.train_acc).map_err(io)?;
    }
    Ok(())
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD with momentum over a fixed dataset.
pub struct Trainer<F: Real> {
    pub model: AgcnModel<F>,
    pub config: TrainConfig,
    velocity: BTreeMap<String, Tensor<F>>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: AgcnModel<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            velocity: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in a fresh seeded order; the last batch may be short.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if data.classes != self.model.classes {
            return Err(Error::ClassMismatch("training data and model disagree on classes".into()));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            self.step += 1;
            let (epoch, step) = (self.epoch, self.step);
            let (loss, hits) = self.train_step(data, chunk).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    epoch,
                    step,
                    detail: format!("non-finite value from {op}"),
                },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        Ok(EpochRecord {
            epoch: self.epoch,
            step: self.step,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        })
    }

    fn train_step(&mut self, data: &Dataset, idx: &[usize]) -> Result<(f64, usize)> {
        let (x, labels) = data.batch(idx)?;
        let mut g = Graph::new();
        let xv = g.input(x.cast());
        let mut ctx = ForwardCtx::new(Mode::Train);
        let logits = self.model.forward(&mut g, xv, &mut ctx)?;
        let k = self.model.config.num_classes;
        let hits = g
            .value(logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let loss = g.cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        g.backward(loss)?;
        let grads: BTreeMap<String, Tensor<F>> = ctx
            .binder
            .take_grads(&mut g)
            .into_iter()
            .filter_map(|(n, t)| Some((n, t?)))
            .collect();
        drop(g);
        self.apply_sgd(&grads)?;
        self.model.apply_bn_updates(ctx.bn_updates)?;
        Ok((loss_value, hits))
    }

    fn apply_sgd(&mut self, grads: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        let lr = F::lit(self.config.learning_rate);
        let mu = F::lit(self.config.momentum);
        let velocity = &mut self.velocity;
        let mut mismatch = None;
        self.model.visit_mut(&mut |name, role, p| {
            let Some(grad) = grads.get(&name).filter(|_| role == Role::Param) else {
                return;
            };
            if grad.shape() != p.shape() {
                mismatch = Some(name);
                return;
            }
            let v = velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vv = mu * *vv + *gv;
                *pv -= lr * *vv;
            }
        });
        match mismatch {
            Some(name) => Err(Error::shape("sgd", format!("gradient shape for {name}"))),
            None => Ok(()),
        }
    }

    pub fn into_model(self) -> AgcnModel<F> {
        self.model
    }
}

/// Trains for `config.epochs` epochs, returning the model and its log.
pub fn train<F: Real>(model: AgcnModel<F>, data: &Dataset, config: TrainConfig) -> Result<(AgcnModel<F>, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, config)?;
    let log = (0..config.epochs)
        .map(|_| trainer.run_epoch(data))
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.into_model(), log))
}

/// Eval-mode logits `[N, K]` for every sample, in dataset order.
pub fn predict_dataset<F: Real>(model: &AgcnModel<F>, data: &Dataset) -> Result<Tensor<F>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len() * model.config.num_classes);
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        rows.extend_from_slice(model.predict_logits(&x.cast())?.data());
    }
    Tensor::new(&[data.len(), model.config.num_classes], rows)
}

/// Scores with one model (argmax of logits) or two (argmax of fused probabilities).
pub fn evaluate<F: Real>(models: &[&AgcnModel<F>], data: &Dataset) -> Result<ClassificationReport> {
    let Some(first) = models.first() else {
        return Err(Error::Config("evaluate needs at least one model".into()));
    };
    if models.len() > 2 {
        return Err(Error::Config("at most two streams can be fused".into()));
    }
    for m in models {
        if m.classes != first.classes {
            return Err(Error::ClassMismatch("models were trained on different class lists".into()));
        }
    }
    if data.classes != first.classes {
        return Err(Error::ClassMismatch("test data and model disagree on classes".into()));
    }
    let mut scores = predict_dataset(first, data)?;
    if let Some(second) = models.get(1) {
        scores = fuse_streams(&scores, &predict_dataset(second, data)?)?;
    }
    let k = first.classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (row, &label) in scores.data().chunks(k).zip(&data.labels) {
        confusion[label][argmax(row)] += 1;
    }
    compute_metrics(&confusion, &first.classes)
}

/// `(class index, probability)` for the `n` highest-scoring classes.
pub fn top_k<F: Real>(probs: &[F], n: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.to_f64().unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}
