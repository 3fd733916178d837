//! Training: token-level negative log-likelihood, Adam with the
//! warmup/decay schedule, gradient clipping, and the two-step strategy
//! that first fits sentence-level weights on sentence pairs and then fits
//! document-level weights on document data with everything else frozen.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{make_batches, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{DocTransformer, TrainScope};
use crate::params::{ParamId, ParamStore, Partition};
use crate::scalar::Scalar;

/// Warmup-then-decay schedule: hidden^-0.5 · min(step^-0.5, step·warmup^-1.5),
/// peaking exactly at step == warmup.
pub fn learning_rate(step: usize, warmup: usize, hidden: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning rate is defined for step >= 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1 step".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((hidden as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// Adam with bias correction. Moment state exists only for the parameters
/// that actually receive gradients (the trainable set).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<usize, (Vec<f64>, Vec<f64>)>,
    t: u32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            moments: HashMap::new(),
            t: 0,
        }
    }
}

impl Adam {
    pub fn tracked_params(&self) -> usize {
        self.moments.len()
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id.0)
    }

    /// One update over the supplied gradients, optionally clipped by global
    /// norm first.
    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Vec<F>)],
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<()> {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(limit) = clip_norm {
            let mut sq = 0.0;
            for (_, g) in grads {
                for &v in g {
                    let v = v.to_f64();
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > limit {
                scale = limit / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let value = store.value_mut(*id);
            let n = value.numel();
            if g.len() != n {
                return Err(Error::Dim {
                    op: "adam step",
                    lhs: vec![n],
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = value.data_mut();
            for i in 0..n {
                let gi = g[i].to_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = data[i] - F::from_f64(delta);
            }
        }
        Ok(())
    }
}

/// Which parameter set a run optimizes and how document modules behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Sentence-level weights only; document modules inactivated.
    Sentence,
    /// Document-level weights only; sentence-level weights frozen.
    Document,
    /// Everything at once on document data.
    Joint,
}

impl TrainMode {
    fn scope(self) -> TrainScope {
        match self {
            TrainMode::Sentence => TrainScope::Only(Partition::Sentence),
            TrainMode::Document => TrainScope::Only(Partition::Document),
            TrainMode::Joint => TrainScope::All,
        }
    }

    fn integration(self) -> (bool, bool) {
        match self {
            TrainMode::Sentence => (false, false),
            _ => (true, true),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub max_steps: usize,
    pub token_budget: usize,
    pub warmup: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// None uses the model configuration's rate.
    pub dropout: Option<f64>,
    pub lr_scale: f64,
    pub clip_norm: Option<f64>,
    /// Evaluate dev loss every this many steps and keep the best-scoring
    /// snapshot of the trainable weights. None keeps the final weights.
    pub dev_eval_interval: Option<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            max_steps: 200,
            token_budget: 1024,
            warmup: 100,
            seed: 1,
            log_interval: 20,
            dropout: None,
            lr_scale: 1.0,
            clip_norm: Some(5.0),
            dev_eval_interval: None,
        }
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.8},{:.1}",
            self.step, self.loss, self.lr, self.tokens_per_sec
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_train_loss: f64,
    pub dev_loss: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub total_tokens: usize,
    pub wall_seconds: f64,
}

impl TrainSummary {
    pub fn mean_tokens_per_sec(&self) -> f64 {
        if self.wall_seconds > 0.0 {
            self.total_tokens as f64 / self.wall_seconds
        } else {
            0.0
        }
    }
}

/// Mean per-token negative log-likelihood of one padded batch under the
/// model's own integration switches.
pub fn nll_loss<F: Scalar>(model: &DocTransformer<F>, batch: &crate::corpus::Batch) -> Result<f64> {
    let mut fwd = model.begin();
    let (loss, _) = model.batch_nll(&mut fwd, batch)?;
    Ok(fwd.graph.scalar_value(loss)?.to_f64())
}

/// Mean per-token negative log-likelihood over a set of examples, with the
/// given (encoder, decoder) integration switches.
pub fn eval_loss<F: Scalar>(
    model: &DocTransformer<F>,
    examples: &[TrainingExample],
    integration: (bool, bool),
    token_budget: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("no evaluation examples".into()));
    }
    let batches = make_batches(examples, token_budget)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        let mut fwd = model
            .begin()
            .with_integration(integration.0, integration.1);
        let (loss, count) = model.batch_nll(&mut fwd, batch)?;
        total += fwd.graph.scalar_value(loss)?.to_f64() * count as f64;
        tokens += count;
    }
    Ok(total / tokens as f64)
}

/// Core loop: epochs over shuffled batches until `max_steps`.
pub fn train<F: Scalar>(
    model: &mut DocTransformer<F>,
    mode: TrainMode,
    examples: &[TrainingExample],
    dev: Option<&[TrainingExample]>,
    plan: &TrainPlan,
) -> Result<TrainSummary> {
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    if plan.max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    if mode != TrainMode::Sentence
        && model.store().partition_numel(Partition::Document) == 0
        && mode == TrainMode::Document
    {
        return Err(Error::Config(
            "document-step training needs a configuration with context integration".into(),
        ));
    }
    let (enc, dec) = mode.integration();
    let scope = mode.scope();
    let dropout = plan.dropout.unwrap_or(model.config().dropout);
    let hidden = model.config().hidden;
    let batches = make_batches(examples, plan.token_budget)?;
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Adam::default();
    let snapshot_ids: Vec<ParamId> = match scope {
        TrainScope::All => model.store().ids().collect(),
        TrainScope::Only(p) => model.store().partition_ids(p),
        TrainScope::Eval => Vec::new(),
    };
    // (best dev loss, trainable weights at that point)
    let mut best_dev: Option<(f64, Vec<crate::tensor::Tensor<F>>)> = None;

    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut step = 0usize;
    let mut total_tokens = 0usize;
    let mut interval_tokens = 0usize;
    let start = Instant::now();
    let mut interval_start = Instant::now();

    'epochs: loop {
        order.shuffle(&mut rng);
        for &bi in &order {
            step += 1;
            let lr = plan.lr_scale * learning_rate(step, plan.warmup, hidden)?;
            let dropout_seed: u64 = rng.gen();
            let batch = &batches[bi];
            let (step_loss, grads): (f64, Vec<(ParamId, Vec<F>)>) = {
                let mut fwd = model
                    .begin()
                    .trainable(scope)
                    .with_integration(enc, dec);
                if dropout > 0.0 {
                    fwd = fwd.with_dropout(dropout, ChaCha8Rng::seed_from_u64(dropout_seed));
                }
                let (loss_node, _) = model.batch_nll(&mut fwd, batch)?;
                let loss = fwd.graph.scalar_value(loss_node)?.to_f64();
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became non-finite at step {step}"
                    )));
                }
                fwd.graph.backward(loss_node)?;
                let grads = fwd
                    .trainable_bindings()
                    .into_iter()
                    .filter_map(|(id, node)| {
                        fwd.graph.grad(node).map(|g| (id, g.to_vec()))
                    })
                    .collect();
                (loss, grads)
            };
            opt.step(model.store_mut(), &grads, lr, plan.clip_norm)?;

            let work = batch.work_tokens();
            total_tokens += work;
            interval_tokens += work;
            if step % plan.log_interval == 0 || step == plan.max_steps {
                let elapsed = interval_start.elapsed().as_secs_f64().max(1e-9);
                metrics.push(MetricsRow {
                    step,
                    loss: step_loss,
                    lr,
                    tokens_per_sec: interval_tokens as f64 / elapsed,
                });
                interval_tokens = 0;
                interval_start = Instant::now();
            }
            if let (Some(every), Some(d)) = (plan.dev_eval_interval, dev) {
                if step % every == 0 && !d.is_empty() {
                    let dl = eval_loss(model, d, (enc, dec), plan.token_budget)?;
                    if best_dev.as_ref().map_or(true, |(b, _)| dl < *b) {
                        let snap = snapshot_ids
                            .iter()
                            .map(|&id| model.store().value(id).clone())
                            .collect();
                        best_dev = Some((dl, snap));
                    }
                }
            }
            if step >= plan.max_steps {
                break 'epochs;
            }
        }
    }

    let dev_loss = match dev {
        Some(d) if !d.is_empty() => {
            let final_dev = eval_loss(model, d, (enc, dec), plan.token_budget)?;
            match best_dev {
                Some((best, snap)) if best < final_dev => {
                    for (&id, value) in snapshot_ids.iter().zip(snap) {
                        model.store_mut().set(id, value)?;
                    }
                    Some(best)
                }
                _ => Some(final_dev),
            }
        }
        _ => None,
    };
    let final_train_loss = metrics.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainSummary {
        steps: step,
        final_train_loss,
        dev_loss,
        metrics,
        total_tokens,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Step one: fit sentence-level weights on sentence pairs with all document
/// modules inactive.
pub fn train_step_one<F: Scalar>(
    model: &mut DocTransformer<F>,
    sentence_examples: &[TrainingExample],
    dev: Option<&[TrainingExample]>,
    plan: &TrainPlan,
) -> Result<TrainSummary> {
    train(model, TrainMode::Sentence, sentence_examples, dev, plan)
}

/// Step two: fit document-level weights on document examples; every
/// sentence-level weight stays bitwise unchanged.
pub fn train_step_two<F: Scalar>(
    model: &mut DocTransformer<F>,
    doc_examples: &[TrainingExample],
    dev: Option<&[TrainingExample]>,
    plan: &TrainPlan,
) -> Result<TrainSummary> {
    if model.store().partition_numel(Partition::Document) == 0 {
        return Err(Error::Config(
            "model has no document-level parameters; enable context integration".into(),
        ));
    }
    train(model, TrainMode::Document, doc_examples, dev, plan)
}

/// The single-step alternative: everything trained jointly on document data
/// from scratch.
pub fn direct_joint_train<F: Scalar>(
    model: &mut DocTransformer<F>,
    doc_examples: &[TrainingExample],
    dev: Option<&[TrainingExample]>,
    plan: &TrainPlan,
) -> Result<TrainSummary> {
    train(model, TrainMode::Joint, doc_examples, dev, plan)
}
