//! Training loops: supervised teacher training and manifold distillation.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{argmax_rows, GraphForward, TapSet, VitModel};

use super::config::{DistillConfig, ScheduleConfig};
use super::optim::{cosine_lr, AdamW};
use super::total::{total_loss, LayerBreakdown, LossBreakdown, Objective, ObjectiveVars, TeacherTargets};

/// Images `(S, H, W, C)` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(shape_err!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self { images, labels }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (gather_first_axis(&self.images, idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Rows of the first axis, in the given order.
pub fn gather_first_axis<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(row * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_raw(shape, data)
}

/// Epoch-wise shuffled mini-batches; a short epoch tail is dropped.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub kd: f64,
    pub ce: f64,
    pub kl: f64,
    pub intra: f64,
    pub inter: f64,
    pub random: f64,
    pub manifold: f64,
    pub eval_acc: Option<f64>,
    #[serde(default)]
    pub layers: Vec<LayerBreakdown>,
}

impl MetricsRecord {
    fn from_breakdown(step: usize, lr: f64, b: LossBreakdown, eval_acc: Option<f64>) -> Self {
        Self {
            step,
            lr,
            total: b.total,
            kd: b.kd,
            ce: b.ce,
            kl: b.kl,
            intra: b.intra,
            inter: b.inter,
            random: b.random,
            manifold: b.manifold,
            eval_acc,
            layers: b.layers,
        }
    }

    pub fn all_finite(&self) -> bool {
        let scalars = [self.lr, self.total, self.kd, self.ce, self.kl, self.intra, self.inter, self.random, self.manifold];
        scalars.iter().all(|v| v.is_finite())
            && self.eval_acc.map_or(true, f64::is_finite)
            && self
                .layers
                .iter()
                .all(|l| [l.intra, l.inter, l.random, l.weighted].iter().all(|v| v.is_finite()))
    }
}

/// Receives metrics as they are produced; wall-clock is passed separately so
/// the records themselves stay reproducible.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord, elapsed: Duration) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord, _elapsed: Duration) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRecord, _: Duration) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: VitModel<T>,
    pub history: Vec<MetricsRecord>,
    /// Accuracy on the held-out split after the last step.
    pub final_eval_acc: f64,
}

/// Top-1 accuracy of `model` on `data`, evaluated in chunks.
pub fn evaluate<T: Scalar>(model: &VitModel<T>, data: &LabeledImages<T>, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let chunk = chunk.max(1);
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk) {
        let (x, y) = data.batch(idx);
        let pred = argmax_rows(&model.logits(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Teacher logits and taps for every training sample, computed once.
///
/// The teacher is frozen and evaluated without stochastic layers, so its
/// outputs per sample never change during a run.
pub struct TeacherCache<T> {
    all: TeacherTargets<T>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn build(teacher: &VitModel<T>, data: &LabeledImages<T>, taps: &TapSet, chunk: usize) -> Result<Self> {
        let all_idx: Vec<usize> = (0..data.len()).collect();
        let mut logits = Vec::new();
        let mut tap_data: std::collections::BTreeMap<usize, (Vec<usize>, Vec<T>)> = Default::default();
        for idx in all_idx.chunks(chunk.max(1)) {
            let (x, _) = data.batch(idx);
            let out = teacher.forward_with_taps(&x, taps)?;
            logits.extend_from_slice(out.logits.data());
            for (l, t) in out.taps {
                let e = tap_data.entry(l).or_insert_with(|| (t.shape()[1..].to_vec(), Vec::new()));
                e.1.extend_from_slice(t.data());
            }
        }
        let classes = teacher.config().num_classes;
        let s = data.len();
        let taps = tap_data
            .into_iter()
            .map(|(l, (rest, v))| {
                let mut shape = vec![s];
                shape.extend(rest);
                (l, Tensor::from_raw(shape, v))
            })
            .collect();
        Ok(Self { all: TeacherTargets { logits: Tensor::from_raw(vec![s, classes], logits), taps } })
    }

    pub fn targets(&self, idx: &[usize]) -> TeacherTargets<T> {
        TeacherTargets {
            logits: gather_first_axis(&self.all.logits, idx),
            taps: self.all.taps.iter().map(|(&l, t)| (l, gather_first_axis(t, idx))).collect(),
        }
    }
}

/// Per-step loss construction used by the shared loop.
type StepLoss<'a, T> =
    dyn FnMut(&mut Graph<T>, &GraphForward, &[usize], &[usize], usize) -> Result<ObjectiveVars> + 'a;

fn run_loop<T: Scalar>(
    mut model: VitModel<T>,
    train: &LabeledImages<T>,
    eval: &LabeledImages<T>,
    schedule: &ScheduleConfig,
    taps: &TapSet,
    sink: &mut dyn MetricsSink,
    loss_fn: &mut StepLoss<'_, T>,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut history = Vec::new();
    let mut sampler = BatchSampler::new(train.len(), schedule.data_seed);
    let mut opt = AdamW::new(schedule.optim.clone(), model.params());
    let started = Instant::now();
    let eval_chunk = 256;

    for step in 1..=schedule.steps {
        let idx = sampler.next_batch(schedule.batch_size);
        let (x, labels) = train.batch(&idx);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let xi = g.constant(x);
        let fwd = model
            .forward_graph(&mut g, &vars, xi, taps)
            .map_err(|e| Error::Numeric(format!("step {step}: student forward pass: {e}")))?;
        let obj = loss_fn(&mut g, &fwd, &idx, &labels, step)?;
        let breakdown = obj.values(&g);
        if let Some(term) = obj.first_non_finite(&g) {
            return Err(Error::Numeric(format!(
                "step {step}: non-finite {term} loss; {}",
                breakdown.summary()
            )));
        }
        g.backward(obj.total)?;
        if !grads_finite(&g, &vars) {
            let term = attribute_gradient(&mut g, &vars, &obj);
            return Err(Error::Numeric(format!(
                "step {step}: non-finite gradient from the {term} term; {}",
                breakdown.summary()
            )));
        }
        let lr = cosine_lr(&schedule.optim, step, schedule.steps);
        let grads: Vec<Option<&Tensor<T>>> = vars.iter().map(|&v| g.grad(v)).collect();
        opt.step(model.params_mut(), &grads, lr);
        if !model.all_finite() {
            return Err(Error::Numeric(format!(
                "step {step}: parameters became non-finite after the update; {}",
                breakdown.summary()
            )));
        }

        let last = step == schedule.steps;
        let do_eval = last || step % schedule.eval_interval == 0;
        if do_eval || step % schedule.log_interval == 0 {
            let acc = if do_eval { Some(evaluate(&model, eval, eval_chunk)?) } else { None };
            let rec = MetricsRecord::from_breakdown(step, lr, breakdown, acc);
            sink.record(&rec, started.elapsed())?;
            history.push(rec);
        }
    }
    let final_eval_acc = match history.last().and_then(|r| r.eval_acc) {
        Some(a) => a,
        None => evaluate(&model, eval, eval_chunk)?,
    };
    Ok(TrainOutcome { model, history, final_eval_acc })
}

fn grads_finite<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> bool {
    vars.iter().all(|&v| g.grad(v).map_or(true, Tensor::all_finite))
}

/// Re-runs backward per weighted term to find which one produced a non-finite gradient.
fn attribute_gradient<T: Scalar>(g: &mut Graph<T>, vars: &[Var], obj: &ObjectiveVars) -> String {
    let mut terms: Vec<(String, Var)> = vec![("ce".into(), obj.ce), ("kl".into(), obj.kl)];
    terms.extend(obj.named_terms().into_iter().filter(|(n, _)| n.starts_with("weighted")));
    for (name, var) in terms {
        g.zero_grad();
        if !g.requires_grad(var) || g.backward(var).is_err() {
            continue;
        }
        if !grads_finite(g, vars) {
            return name;
        }
    }
    "total".into()
}

/// Trains a model on hard labels only.
pub fn train_supervised<T: Scalar>(
    model: VitModel<T>,
    train: &LabeledImages<T>,
    eval: &LabeledImages<T>,
    schedule: &ScheduleConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome<T>> {
    let mut loss = |g: &mut Graph<T>, fwd: &GraphForward, _: &[usize], labels: &[usize], _: usize| {
        let ce = g.cross_entropy(fwd.logits, labels)?;
        let kl = g.constant(Tensor::scalar(T::zero()));
        Ok(ObjectiveVars { total: ce, kd: ce, ce, kl, layers: Vec::new() })
    };
    run_loop(model, train, eval, schedule, &TapSet::empty(), sink, &mut loss)
}

/// Distills `student` from a frozen `teacher` with the composite objective.
///
/// The teacher's parameter checksum is compared before and after the run.
pub fn distill<T: Scalar>(
    teacher: &VitModel<T>,
    student: VitModel<T>,
    train: &LabeledImages<T>,
    eval: &LabeledImages<T>,
    cfg: &DistillConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome<T>> {
    let objective = Objective::new(cfg, teacher.config(), student.config())?;
    let before = teacher.checksum();
    if cfg.schedule.steps == 0 {
        let acc = if eval.is_empty() { 0.0 } else { evaluate(&student, eval, 256)? };
        return Ok(TrainOutcome { model: student, history: Vec::new(), final_eval_acc: acc });
    }
    let teacher_taps = objective.teacher_taps(teacher.config().num_layers)?;
    let student_taps = objective.student_taps(student.config().num_layers)?;
    let cache = TeacherCache::build(teacher, train, &teacher_taps, 256)?;
    let seed = cfg.seed;
    let mut loss = |g: &mut Graph<T>, fwd: &GraphForward, idx: &[usize], labels: &[usize], step: usize| {
        total_loss(g, &objective, fwd, &cache.targets(idx), labels, seed, step)
    };
    let out = run_loop(student, train, eval, &cfg.schedule, &student_taps, sink, &mut loss)?;
    if teacher.checksum() != before {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    Ok(out)
}
