//! Joint objective, Adam with global-norm clipping, the training loop and
//! finite-difference gradient checks.

mod examples;
mod gradcheck;
mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::CorpusSplits;
use crate::encoder::{Model, ModelConfig, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tracker::{evaluate, EmdTracker, EvalOptions};

pub use examples::{build_examples, TurnExample};
pub use gradcheck::{demo_batch, grad_check, grad_check_demo, GradCheckConfig, GradCheckReport, TensorCheck};
pub use loss::{joint_loss, kl_divergence, LossTerms, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Train the tagger on constraint-masked scores (the scores it is
    /// decoded from) instead of raw tag distributions.
    pub masked_tag_loss: bool,
    /// Also track the training split after every epoch.
    pub monitor_train: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            grad_clip: 2.0,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            masked_tag_loss: true,
            monitor_train: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::json("train config", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path.display().to_string(), source),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.grad_clip, self.adam_eps];
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("grad_clip and adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = F::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(c));
    }
    norm
}

pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[Tensor<F>], config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (fb1, fb2, lr, eps) = (F::of(b1), F::of(b2), F::of(self.lr), F::of(self.eps));
        let (fc1, fc2) = (F::of(c1), F::of(c2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = fb1 * *m + (F::one() - fb1) * g;
                *v = fb2 * *v + (F::one() - fb2) * g * g;
                let mh = *m / fc1;
                let vh = *v / fc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossTerms,
    pub grad_norm: f64,
    pub train_jga: f64,
    pub train_domain_accuracy: f64,
    pub dev_jga: f64,
    pub dev_domain_accuracy: f64,
    pub dev_osr: f64,
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(
        "epoch,loss,loss_domain,loss_ctype,loss_tag,loss_keep,loss_constraint,grad_norm,train_jga,train_domain_accuracy,dev_jga,dev_domain_accuracy,dev_osr\n",
    );
    for m in log {
        let t = m.terms.as_array();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch,
            m.loss,
            t[0],
            t[1],
            t[2],
            t[3],
            t[4],
            m.grad_norm,
            m.train_jga,
            m.train_domain_accuracy,
            m.dev_jga,
            m.dev_domain_accuracy,
            m.dev_osr
        ));
    }
    out
}

pub struct TrainOutcome {
    /// Best model on the dev split (the last epoch when there is no dev
    /// split), or the last good parameters when training diverged.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    /// Set when a non-finite loss or gradient stopped training.
    pub diverged: Option<Error>,
}

/// Mean joint loss and its gradient over `batch`. Per-example gradients are
/// computed in parallel and summed in batch order.
pub fn batch_gradients<F: Scalar>(
    model: &Model<F>,
    batch: &[&TurnExample],
    weights: &LossWeights,
    masked_tag_loss: bool,
) -> (f64, LossTerms, Vec<Tensor<F>>) {
    let labels = model.params.tensor(model.token_table_id());
    let per_example: Vec<(f64, LossTerms, Vec<Tensor<F>>)> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(model.params.tensors());
            let (loss, terms) = loss::turn_loss(model, &mut tape, ex, labels, weights, masked_tag_loss);
            let value = tape.scalar(loss).as_f64();
            (value, terms, tape.backward(loss))
        })
        .collect();
    let mut grads: Vec<Tensor<F>> = model
        .params
        .tensors()
        .iter()
        .map(|p| Tensor::zeros(p.rows(), p.cols()))
        .collect();
    let mut total = 0.0;
    let mut terms = LossTerms::default();
    for (value, t, g) in per_example {
        total += value;
        terms.add(&t);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    let n = batch.len().max(1) as f64;
    let inv = F::of(1.0 / n);
    grads.iter_mut().for_each(|g| g.scale_assign(inv));
    terms.scale(1.0 / n);
    (total / n, terms, grads)
}

/// Builds the vocabulary from the ontology and training dialogues and
/// initializes a model from `config.seed`.
pub fn init_model(splits: &CorpusSplits, config: &TrainConfig) -> Result<Model<f32>> {
    let vocab = Vocab::build(&splits.ontology, &splits.train);
    Model::new(config.model.clone(), vocab, splits.ontology.clone(), config.seed)
}

/// Trains on `splits.train`, evaluating on `splits.dev` after each epoch.
/// `on_epoch` sees every epoch's metrics as they are produced.
pub fn train(
    splits: &CorpusSplits,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut model = init_model(splits, config)?;
    let examples = build_examples(&splits.train, &splits.ontology, &model.vocab, config.model.max_len)?;
    let truncated = examples.iter().filter(|e| e.truncated).count();
    if truncated > 0 {
        log::warn!("{truncated} training turns truncated to {} tokens", config.model.max_len);
    }
    log::info!(
        "training on {} turns, {} parameters",
        examples.len(),
        model.params.num_scalars()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::new(model.params.tensors(), config);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let eval_options = EvalOptions::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_terms = LossTerms::default();
        let mut max_norm: f64 = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TurnExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, terms, mut grads) = batch_gradients(&model, &batch, &config.weights, config.masked_tag_loss);
            let bad = if !loss.is_finite() {
                Some(Error::NonFiniteGradient { tensor: "loss".into() })
            } else {
                grads.iter().position(|g| !g.all_finite()).map(|i| Error::NonFiniteGradient {
                    tensor: model.params.name(i).to_string(),
                })
            };
            if let Some(err) = bad {
                log::error!("epoch {epoch}: {err}; stopping with the last good parameters");
                return Ok(TrainOutcome {
                    best_epoch: best.as_ref().map_or(epoch - 1, |b| b.1),
                    model: best.map_or(model, |b| b.2),
                    log,
                    diverged: Some(err),
                });
            }
            max_norm = max_norm.max(clip_global_norm(&mut grads, config.grad_clip));
            adam.step(model.params.tensors_mut(), &grads);
            let w = batch.len() as f64;
            epoch_loss += loss * w;
            let mut t = terms;
            t.scale(w);
            epoch_terms.add(&t);
        }
        let n = examples.len() as f64;
        epoch_terms.scale(1.0 / n);

        let mut m = EpochMetrics {
            epoch,
            loss: epoch_loss / n,
            terms: epoch_terms,
            grad_norm: max_norm,
            ..EpochMetrics::default()
        };
        if config.monitor_train {
            let report = evaluate(&splits.train, &EmdTracker::new(&model), &eval_options);
            m.train_jga = report.jga;
            m.train_domain_accuracy = report.domain_accuracy;
        }
        let score = if splits.dev.is_empty() {
            epoch as f64
        } else {
            let report = evaluate(&splits.dev, &EmdTracker::new(&model), &eval_options);
            m.dev_jga = report.jga;
            m.dev_domain_accuracy = report.domain_accuracy;
            m.dev_osr = report.osr;
            report.jga
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev jga {:.3} domain {:.3}",
            m.loss,
            m.dev_jga,
            m.dev_domain_accuracy
        );
        on_epoch(&m);
        log.push(m);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::synthetic::{generate_synthetic, SyntheticConfig};

    fn tiny_splits(n: usize) -> CorpusSplits {
        let mut cfg = SyntheticConfig::standard(2);
        cfg.n_train = n;
        cfg.n_dev = 2;
        cfg.n_test = 0;
        cfg.max_turns = 4;
        generate_synthetic(&cfg, 9).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 2,
            seed: 4,
            model: ModelConfig::tiny(16),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_log_and_parameters() {
        let splits = tiny_splits(4);
        let a = train(&splits, &tiny_config(), |_| {}).unwrap();
        let b = train(&splits, &tiny_config(), |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let splits = tiny_splits(3);
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        cfg.epochs = 1;
        let out = train(&splits, &cfg, |_| {}).unwrap();
        let fresh = init_model(&splits, &cfg).unwrap();
        assert_eq!(out.model.params.tensors(), fresh.params.tensors());
    }

    #[test]
    fn loss_decreases_on_small_corpus() {
        let splits = tiny_splits(5);
        let mut cfg = tiny_config();
        cfg.epochs = 10;
        let out = train(&splits, &cfg, |_| {}).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|m| m.loss).collect();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        assert!(losses.windows(2).filter(|w| w[1] > w[0]).count() <= 2, "{losses:?}");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = TrainConfig::from_json_str(r#"{"epochs": 3, "model": {"d_model": 16, "n_heads": 2}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.model.d_model, 16);
        assert!(TrainConfig::from_json_str(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"model": {"d_model": 10, "n_heads": 4}}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(
            vals in prop::collection::vec(-100.0f64..100.0, 1..40),
            split in 0usize..40,
            limit in 0.01f64..5.0,
        ) {
            let k = split.min(vals.len());
            let mut grads = vec![
                Tensor::from_vec(1, k, vals[..k].to_vec()),
                Tensor::from_vec(1, vals.len() - k, vals[k..].to_vec()),
            ];
            clip_global_norm(&mut grads, limit);
            let after = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
            prop_assert!(after <= limit + 1e-6);
        }
    }
}
