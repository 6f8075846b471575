//! Reverse-mode gradients against central finite differences.

use serde::Serialize;

use super::examples::{build_examples, TurnExample};
use super::loss::{turn_loss, LossTerms, LossWeights};
use crate::autodiff::Tape;
use crate::corpus::synthetic::{generate_synthetic, SyntheticConfig};
use crate::encoder::{Model, ModelConfig, Vocab};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator. Central differences
    /// resolve a gradient only to about `ulp(loss) / step` (around 1e-11
    /// here), so a gradient entry that is exactly zero needs a floor well
    /// above that.
    pub floor: f64,
    pub masked_tag_loss: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            masked_tag_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Which loss was checked: one head's term or `joint`.
    pub component: String,
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_err < self.tolerance))
            .map(|t| t.name.as_str())
            .collect()
    }
}

fn batch_loss(
    model: &Model<f64>,
    batch: &[TurnExample],
    labels: &Tensor<f64>,
    weights: &LossWeights,
    masked: bool,
    with_grad: bool,
) -> (f64, Option<Vec<Tensor<f64>>>) {
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor<f64>>> = None;
    for ex in batch {
        let mut tape = Tape::new(model.params.tensors());
        let (loss, _) = turn_loss(model, &mut tape, ex, labels, weights, masked);
        total += tape.scalar(loss);
        if with_grad {
            let g = tape.backward(loss);
            match grads.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                None => grads = Some(g),
            }
        }
    }
    if let Some(g) = grads.as_mut() {
        g.iter_mut().for_each(|t| t.scale_assign(1.0 / n));
    }
    (total / n, grads)
}

/// Compares the analytic gradient of the mean weighted loss over `batch`
/// with central differences, element by element. `corrupt` may tamper with
/// the analytic gradients (used to test the harness itself). Label
/// embeddings are read from a frozen copy of the token table so that
/// perturbing it only moves the encoder path.
pub fn grad_check(
    model: &Model<f64>,
    batch: &[TurnExample],
    weights: &LossWeights,
    component: &str,
    config: &GradCheckConfig,
    corrupt: impl Fn(&mut [Tensor<f64>]),
) -> GradCheckReport {
    let labels = model.params.tensor(model.token_table_id()).clone();
    let (loss, grads) = batch_loss(model, batch, &labels, weights, config.masked_tag_loss, true);
    let mut analytic = grads.unwrap_or_else(|| {
        model
            .params
            .tensors()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect()
    });
    corrupt(&mut analytic);

    let mut probe = model.clone();
    let h = config.step;
    let mut tensors = Vec::with_capacity(model.params.len());
    for (id, a) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: model.params.name(id).to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
        };
        for k in 0..a.len() {
            let orig = probe.params.tensor(id).data()[k];
            probe.params.tensors_mut()[id].data_mut()[k] = orig + h;
            let (up, _) = batch_loss(&probe, batch, &labels, weights, config.masked_tag_loss, false);
            probe.params.tensors_mut()[id].data_mut()[k] = orig - h;
            let (down, _) = batch_loss(&probe, batch, &labels, weights, config.masked_tag_loss, false);
            probe.params.tensors_mut()[id].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * h);
            let an = a.data()[k];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(config.floor);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = k;
            }
            check.max_abs_err = check.max_abs_err.max(abs);
        }
        tensors.push(check);
    }
    GradCheckReport {
        component: component.to_string(),
        tolerance: config.tolerance,
        loss,
        tensors,
    }
}

/// A small batch from a generated two-domain corpus that exercises every
/// head: C-type slots, carried triplets and tagged values.
pub fn demo_batch(model_config: &ModelConfig, seed: u64) -> Result<(Model<f64>, Vec<TurnExample>)> {
    let mut cfg = SyntheticConfig::standard(2);
    cfg.n_train = 3;
    cfg.n_dev = 0;
    cfg.n_test = 0;
    cfg.min_turns = 3;
    cfg.max_turns = 4;
    let splits = generate_synthetic(&cfg, seed)?;
    let vocab = Vocab::build(&splits.ontology, &splits.train);
    let model: Model<f64> = Model::new(model_config.clone(), vocab, splits.ontology.clone(), seed)?;
    let all = build_examples(&splits.train, &splits.ontology, &model.vocab, model_config.max_len)?;
    let mut batch: Vec<TurnExample> = Vec::new();
    let mut want = [true, true, true];
    for ex in &all {
        let has = [
            ex.num_carried() > 0,
            !ex.ctype.is_empty(),
            ex.tags.iter().any(|t| *t != Some(0)),
        ];
        if has.iter().zip(&want).any(|(h, w)| *h && *w) {
            for (w, h) in want.iter_mut().zip(has) {
                *w &= !h;
            }
            batch.push(ex.clone());
        }
        if batch.len() >= 3 {
            break;
        }
    }
    Ok((model, batch))
}

/// Checks each head's term alone and the joint loss on a model of width
/// `dims` in 64-bit precision.
pub fn grad_check_demo(dims: usize, seed: u64, config: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut mc = ModelConfig::tiny(dims);
    mc.max_len = 48;
    let (model, batch) = demo_batch(&mc, seed)?;
    let mut reports = Vec::with_capacity(6);
    for (i, name) in LossTerms::NAMES.iter().enumerate() {
        reports.push(grad_check(&model, &batch, &LossWeights::only(i), name, config, |_| {}));
    }
    reports.push(grad_check(&model, &batch, &LossWeights::default(), "joint", config, |_| {}));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_matches_finite_differences() {
        let reports = grad_check_demo(8, 3, &GradCheckConfig::default()).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} failed: {:?}", r.component, r.failures());
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn raw_tag_loss_gradients() {
        let cfg = GradCheckConfig {
            masked_tag_loss: false,
            ..GradCheckConfig::default()
        };
        let (model, batch) = demo_batch(&ModelConfig::tiny(8), 5).unwrap();
        let r = grad_check(&model, &batch, &LossWeights::only(2), "tag", &cfg, |_| {});
        assert!(r.passed(), "{:?}", r.failures());
    }

    #[test]
    fn corrupted_gradient_is_reported_by_name() {
        let (model, batch) = demo_batch(&ModelConfig::tiny(4), 1).unwrap();
        let target = model.params.id("head.domain.w").unwrap();
        let r = grad_check(&model, &batch, &LossWeights::default(), "joint", &GradCheckConfig::default(), |g| {
            g[target].data_mut()[0] += 0.5;
        });
        assert!(!r.passed());
        assert_eq!(r.failures(), vec!["head.domain.w"]);
    }

    #[test]
    fn zero_parameters_give_a_finite_report() {
        let (mut model, batch) = demo_batch(&ModelConfig::tiny(4), 2).unwrap();
        model.params.tensors_mut().iter_mut().for_each(|t| t.fill(0.0));
        let r = grad_check(&model, &batch, &LossWeights::default(), "joint", &GradCheckConfig::default(), |_| {});
        assert!(r.loss.is_finite());
        assert!(r.tensors.iter().all(|t| t.max_rel_err.is_finite()));
    }
}
