//! ELBO objective, Adam optimizer, training loop and prediction.
//!
//! Training minimizes the negative ELBO: mean binary cross-entropy over the
//! batch plus the summed per-layer KL contributions weighted by `1/n_train`.
//! Deterministic specs reduce to plain BCE because their ledger is empty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy};
use crate::autodiff::{NodeId, Tape};
use crate::bayes::KlLedger;
use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::layers::{HeadKind, NetworkSpec};
use crate::network::{Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::uncertainty::{mc_predictive_network, PredictiveSamples};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
/// cross-entropy so the loss stays finite.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlWeightMode {
    #[default]
    OneOverNTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight_mode: KlWeightMode,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 10,
            batch_size: 2,
            kl_weight_mode: KlWeightMode::OneOverNTrain,
            seed: 7,
            early_stop_patience: 15,
            augment: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Negative ELBO from probabilities: mean BCE plus `ledger_total / n_train`.
pub fn elbo_loss(
    probs: &[f64],
    labels: &[f64],
    ledger: &KlLedger,
    n_train: usize,
) -> Result<f64> {
    if n_train == 0 {
        return Err(Error::Config("elbo_loss: n_train must be positive".into()));
    }
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape {
            op: "elbo_loss",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut bce = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    bce /= probs.len() as f64;
    Ok(bce + ledger.total() / n_train as f64)
}

/// Graph twin of [`elbo_loss`]: builds the loss node from the probability
/// node and the per-layer KL nodes.
pub fn loss_graph(
    tape: &Tape,
    probs: NodeId,
    labels: &Tensor,
    kl_nodes: &[(String, NodeId)],
    n_train: usize,
) -> Result<NodeId> {
    if n_train == 0 {
        return Err(Error::Config("loss_graph: n_train must be positive".into()));
    }
    let y = tape.constant(labels.clone());
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let log_1p = tape.log(tape.affine(p, -1.0, 1.0)?)?;
    let one_minus_y = tape.affine(y, -1.0, 1.0)?;
    let ll = tape.add(tape.mul(y, log_p)?, tape.mul(one_minus_y, log_1p)?)?;
    let bce = tape.affine(tape.mean(ll)?, -1.0, 0.0)?;
    if kl_nodes.is_empty() {
        return Ok(bce);
    }
    let mut kl_total = kl_nodes[0].1;
    for (_, node) in &kl_nodes[1..] {
        kl_total = tape.add(kl_total, *node)?;
    }
    tape.add(bce, tape.affine(kl_total, 1.0 / n_train as f64, 0.0)?)
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamHyper {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update over every parameter that received a
/// gradient. Parameters without gradients (running statistics) are left
/// untouched.
pub fn adam_step(
    net: &mut Network,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let mut failure: Option<Error> = None;
    net.for_each_tensor_mut(&mut |name, tensor| {
        let Some(grad) = grads.get(name) else {
            return;
        };
        if grad.shape() != tensor.shape() {
            failure.get_or_insert(Error::Shape {
                op: "adam_step",
                lhs: grad.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
            return;
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; tensor.numel()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; tensor.numel()]);
        for ((p, &g), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * g;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

fn stack_batch(samples: &[&LabeledSample]) -> Result<(Tensor, Tensor)> {
    let shape = samples[0].volume.shape();
    let numel = shape[0] * shape[1] * shape[2];
    let b = samples.len();
    let mut data = Vec::with_capacity(b * numel);
    let mut labels = Vec::with_capacity(b);
    for s in samples {
        if s.volume.shape() != shape {
            return Err(Error::Shape {
                op: "stack_batch",
                lhs: s.volume.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        data.extend_from_slice(s.volume.voxels.data());
        labels.push(s.label as f64);
    }
    Ok((
        Tensor::from_parts(vec![b, 1, shape[0], shape[1], shape[2]], data),
        Tensor::from_parts(vec![b, 1], labels),
    ))
}

/// Mean-field accuracy at threshold 0.5, evaluated in small batches.
pub fn mean_field_accuracy(net: &Network, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("accuracy of an empty set is undefined".into()));
    }
    let mut correct = 0usize;
    let mut rng = Rng::new(0); // unused by MeanField
    for chunk in data.chunks(8) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (input, _) = stack_batch(&refs)?;
        let probs = net.predict_batch(&input, Mode::MeanField, &mut rng)?;
        for (p, s) in probs.iter().zip(chunk) {
            let pred = (*p >= 0.5) as u8;
            correct += (pred == s.label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train a network on the labelled set, early-stopping on validation
/// accuracy. Returns the best-validation checkpoint and per-epoch history.
pub fn train(
    spec: &NetworkSpec,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochStats>)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let mut net = Network::init(spec.clone(), config.seed)?;
    let model_id = format!("model-{}", config.seed);
    let n_train = train_set.len();
    let hyper = AdamHyper::with_lr(config.learning_rate);
    let mut adam = AdamState::default();
    let root = Rng::new(config.seed);
    let mut shuffle_rng = root.derive(1);
    let mut noise_rng = root.derive(2);
    let mut augment_rng = root.derive(3);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // batchnorm needs two items to form statistics
            if chunk.len() == 1 && config.batch_size > 1 {
                continue;
            }
            let mut holders: Vec<LabeledSample> = Vec::new();
            let refs: Vec<&LabeledSample> = if let Some(policy) = &config.augment {
                for &i in chunk {
                    let mut s = train_set[i].clone();
                    s.volume = augment(&s.volume, &mut augment_rng, policy)?;
                    holders.push(s);
                }
                holders.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let (input, labels) = stack_batch(&refs)?;

            let tape = Tape::new();
            let pass = net.forward(&tape, &input, Mode::Train, &mut noise_rng)?;
            let loss = loss_graph(&tape, pass.probs, &labels, &pass.kl_nodes, n_train)?;
            let loss_value = tape.value_item(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::Numerical { op: "train_loss" });
            }
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = pass
                .param_nodes
                .iter()
                .map(|(name, &node)| (name.clone(), tape.grad(node)))
                .collect();
            adam_step(&mut net, &grads, &mut adam, &hyper)?;
            net.apply_bn_updates(&pass.bn_updates);
            epoch_loss += loss_value;
            batches += 1;
        }
        let train_loss = if batches > 0 { epoch_loss / batches as f64 } else { 0.0 };
        let val_accuracy = mean_field_accuracy(&net, val_set)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
        });

        let improved = best
            .as_ref()
            .map(|(acc, _, _)| val_accuracy > *acc)
            .unwrap_or(true);
        if improved {
            best = Some((val_accuracy, epoch, net.clone()));
        } else if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= config.early_stop_patience {
                break;
            }
        }
    }

    let (metrics, epoch, chosen) = match best {
        Some((acc, epoch, net)) => {
            let mut m = BTreeMap::new();
            m.insert("best_val_accuracy".to_string(), acc);
            if let Some(last) = history.last() {
                m.insert("final_train_loss".to_string(), last.train_loss);
            }
            (m, epoch, net)
        }
        None => (BTreeMap::new(), 0, net),
    };
    Ok((
        Checkpoint::from_network(&chosen, &model_id, epoch, config.seed, metrics),
        history,
    ))
}

// ── prediction ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Deterministic,
    Mc { t: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Prob(f64),
    Samples(PredictiveSamples),
}

/// Single-volume prediction from a checkpoint. `Deterministic` runs one
/// mean-field pass; `Mc { t }` draws `t` stochastic forwards.
pub fn predict(
    ckpt: &Checkpoint,
    volume: &Tensor,
    mode: PredictMode,
    seed: u64,
) -> Result<Prediction> {
    let net = ckpt.to_network()?;
    predict_with_network(&net, &ckpt.manifest.model_id, volume, mode, seed)
}

pub fn predict_with_network(
    net: &Network,
    model_id: &str,
    volume: &Tensor,
    mode: PredictMode,
    seed: u64,
) -> Result<Prediction> {
    if volume.rank() != 3 {
        return Err(Error::Shape {
            op: "predict",
            lhs: volume.shape().to_vec(),
            rhs: net.spec.input_shape.to_vec(),
        });
    }
    let s = volume.shape();
    let input = volume.reshaped(vec![1, 1, s[0], s[1], s[2]])?;
    match mode {
        PredictMode::Deterministic => {
            let mut rng = Rng::new(0);
            let probs = net.predict_batch(&input, Mode::MeanField, &mut rng)?;
            Ok(Prediction::Prob(probs[0]))
        }
        PredictMode::Mc { t } => {
            let samples = mc_predictive_network(net, model_id, volume, t, seed)?;
            Ok(Prediction::Samples(samples))
        }
    }
}

/// Evaluation-time probabilities for a labelled set. The Bernoulli-mean head
/// reports the mean over `t_mc` stochastic forwards; the sigmoid head reports
/// the single mean-field pass.
pub fn predict_probs(
    net: &Network,
    data: &[LabeledSample],
    head: HeadKind,
    t_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    match head {
        HeadKind::Sigmoid => {
            let mut out = Vec::with_capacity(data.len());
            let mut rng = Rng::new(0);
            for chunk in data.chunks(8) {
                let refs: Vec<&LabeledSample> = chunk.iter().collect();
                let (input, _) = stack_batch(&refs)?;
                out.extend(net.predict_batch(&input, Mode::MeanField, &mut rng)?);
            }
            Ok(out)
        }
        HeadKind::BernoulliMean => {
            let mut out = Vec::with_capacity(data.len());
            for (i, s) in data.iter().enumerate() {
                let samples =
                    mc_predictive_network(net, "eval", &s.volume.voxels, t_mc, seed ^ i as u64)?;
                out.push(samples.mean());
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, BayesVariant, LayerSpec};
    use crate::synth::blob_dataset;

    #[test]
    fn elbo_matches_bce_closed_form() {
        let ledger = KlLedger::new();
        let loss = elbo_loss(&[0.5], &[1.0], &ledger, 10).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn elbo_near_perfect_fit() {
        let ledger = KlLedger::new();
        let loss = elbo_loss(&[1.0], &[1.0], &ledger, 10).unwrap();
        assert!(loss > 0.0 && loss < 1.1e-7, "clamped BCE {loss}");
    }

    #[test]
    fn elbo_kl_weighting() {
        let mut ledger = KlLedger::new();
        ledger.record("layer", 10.0).unwrap();
        // zero BCE: p == y == 1 up to the clamp
        let loss = elbo_loss(&[1.0], &[1.0], &ledger, 100).unwrap();
        assert!((loss - 0.1).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn elbo_rejects_zero_n_train() {
        let ledger = KlLedger::new();
        assert!(matches!(
            elbo_loss(&[0.5], &[1.0], &ledger, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_graph_matches_plain_elbo() {
        use crate::network::Mode;
        let spec = tiny_spec(BayesVariant::Reparam);
        let net = Network::init(spec, 3).unwrap();
        let data = blob_dataset(4, [8, 8, 8], 1);
        let refs: Vec<&LabeledSample> = data.iter().collect();
        let (input, labels) = stack_batch(&refs).unwrap();
        let tape = Tape::new();
        let mut rng = Rng::new(2);
        let pass = net.forward(&tape, &input, Mode::Train, &mut rng).unwrap();
        let loss = loss_graph(&tape, pass.probs, &labels, &pass.kl_nodes, 4).unwrap();

        let probs = tape.forward(pass.probs);
        let mut ledger = KlLedger::new();
        for (name, node) in &pass.kl_nodes {
            ledger.record(name, tape.value_item(*node).unwrap()).unwrap();
        }
        let label_vals: Vec<f64> = labels.data().to_vec();
        let plain = elbo_loss(probs.data(), &label_vals, &ledger, 4).unwrap();
        assert!((tape.value_item(loss).unwrap() - plain).abs() < 1e-12);
    }

    fn tiny_spec(variant: BayesVariant) -> NetworkSpec {
        NetworkSpec {
            input_shape: [8, 8, 8],
            layers: vec![
                LayerSpec::Conv3d {
                    filters: 2,
                    kernel: [3, 3, 3],
                    stride: 1,
                    padding: crate::autodiff::Padding::Same,
                    activation: Activation::Relu,
                    variant,
                },
                LayerSpec::MaxPool3d { window: [2, 2, 2] },
                LayerSpec::BatchNorm,
                LayerSpec::GlobalMaxPool,
                LayerSpec::Dense {
                    units: 4,
                    activation: Activation::Relu,
                    variant,
                },
                LayerSpec::Dense {
                    units: 1,
                    activation: Activation::None,
                    variant,
                },
                LayerSpec::SigmoidHead,
            ],
            head: HeadKind::Sigmoid,
        }
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let spec = tiny_spec(BayesVariant::None);
        let mut net = Network::init(spec, 1).unwrap();
        let before = net.tensors();
        let mut grads = BTreeMap::new();
        for (name, t) in &before {
            grads.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        let mut state = AdamState::default();
        adam_step(&mut net, &grads, &mut state, &AdamHyper::with_lr(0.01)).unwrap();
        assert_eq!(net.tensors(), before);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let spec = tiny_spec(BayesVariant::None);
        let mut net = Network::init(spec, 1).unwrap();
        let before = net.tensors();
        let mut grads = BTreeMap::new();
        grads.insert(
            "l00.bias".to_string(),
            Tensor::full(&[2], 0.37), // arbitrary nonzero gradient
        );
        let mut state = AdamState::default();
        adam_step(&mut net, &grads, &mut state, &AdamHyper::with_lr(0.01)).unwrap();
        let after = net.tensors();
        let b0 = before.iter().find(|(n, _)| n == "l00.bias").unwrap();
        let b1 = after.iter().find(|(n, _)| n == "l00.bias").unwrap();
        for (x, y) in b0.1.data().iter().zip(b1.1.data()) {
            // m_hat/sqrt(v_hat) == sign(g) on the first step
            assert!(((x - y) - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn train_zero_epochs_returns_init() {
        let spec = tiny_spec(BayesVariant::None);
        let data = blob_dataset(6, [8, 8, 8], 5);
        let config = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (ckpt, history) = train(&spec, &data[..4], &data[4..], &config).unwrap();
        assert!(history.is_empty());
        assert_eq!(ckpt.manifest.epoch, 0);
    }

    #[test]
    fn train_history_bounded_by_epochs() {
        let spec = tiny_spec(BayesVariant::None);
        let data = blob_dataset(8, [8, 8, 8], 5);
        let config = TrainConfig {
            epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let (_, history) = train(&spec, &data[..6], &data[6..], &config).unwrap();
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn identical_configs_reproduce_trajectories() {
        let spec = tiny_spec(BayesVariant::Flipout);
        let data = blob_dataset(8, [8, 8, 8], 5);
        let config = TrainConfig {
            epochs: 2,
            seed: 11,
            ..Default::default()
        };
        let (a, ha) = train(&spec, &data[..6], &data[6..], &config).unwrap();
        let (b, hb) = train(&spec, &data[..6], &data[6..], &config).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.arrays, b.arrays);
    }

    #[test]
    fn mc_predict_on_deterministic_spec_errors() {
        let spec = tiny_spec(BayesVariant::None);
        let net = Network::init(spec, 1).unwrap();
        let ckpt = Checkpoint::from_network(&net, "m", 0, 1, BTreeMap::new());
        let volume = Tensor::zeros(&[8, 8, 8]);
        assert!(matches!(
            predict(&ckpt, &volume, PredictMode::Mc { t: 4 }, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mc_with_one_draw_yields_one_sample() {
        let spec = tiny_spec(BayesVariant::Reparam);
        let net = Network::init(spec, 1).unwrap();
        let ckpt = Checkpoint::from_network(&net, "m", 0, 1, BTreeMap::new());
        let volume = Tensor::full(&[8, 8, 8], 0.2);
        match predict(&ckpt, &volume, PredictMode::Mc { t: 1 }, 5).unwrap() {
            Prediction::Samples(s) => assert_eq!(s.samples.len(), 1),
            other => panic!("expected samples, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_posterior_mc_mean_equals_deterministic() {
        let spec = tiny_spec(BayesVariant::Reparam);
        let mut net = Network::init(spec, 1).unwrap();
        net.for_each_tensor_mut(&mut |name, t| {
            if name.ends_with(".rho") {
                for v in t.data_mut() {
                    *v = -800.0;
                }
            }
        });
        let ckpt = Checkpoint::from_network(&net, "m", 0, 1, BTreeMap::new());
        let volume = Tensor::full(&[8, 8, 8], 0.3);
        let det = match predict(&ckpt, &volume, PredictMode::Deterministic, 0).unwrap() {
            Prediction::Prob(p) => p,
            other => panic!("{other:?}"),
        };
        let samples = match predict(&ckpt, &volume, PredictMode::Mc { t: 64 }, 3).unwrap() {
            Prediction::Samples(s) => s,
            other => panic!("{other:?}"),
        };
        assert!((samples.mean() - det).abs() < 1e-12);
    }

    #[test]
    fn deterministic_predict_is_stable() {
        let spec = tiny_spec(BayesVariant::None);
        let net = Network::init(spec, 1).unwrap();
        let ckpt = Checkpoint::from_network(&net, "m", 0, 1, BTreeMap::new());
        let volume = Tensor::full(&[8, 8, 8], 0.4);
        let a = predict(&ckpt, &volume, PredictMode::Deterministic, 1).unwrap();
        let b = predict(&ckpt, &volume, PredictMode::Deterministic, 99).unwrap();
        assert_eq!(a, b);
    }
}
