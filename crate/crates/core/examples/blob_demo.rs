//! End-to-end library walkthrough on a small synthetic task: train a
//! Bayesian (MNF) classifier, evaluate metrics and calibration, draw
//! Monte-Carlo intervals and attribute one prediction to voxel patches.
//!
//! Run with: `cargo run --release -p voxbayes --example blob_demo`

use voxbayes::calibration::threshold_sweep;
use voxbayes::layers::{Activation, BayesVariant, HeadKind, LayerSpec, NetworkSpec};
use voxbayes::network::Mode;
use voxbayes::rng::Rng;
use voxbayes::shap::{exact_shapley, partition_volume};
use voxbayes::synth::blob_dataset;
use voxbayes::tensor::Tensor;
use voxbayes::train::{train, TrainConfig};
use voxbayes::uncertainty::{
    flag_high_uncertainty, mc_predictive_network, predictive_interval, DEFAULT_WIDTH_THRESHOLD,
};
use voxbayes::autodiff::Padding;

fn main() -> voxbayes::Result<()> {
    let shape = [16usize, 16, 8];
    let data = blob_dataset(104, shape, 11);
    let (train_set, rest) = data.split_at(80);
    let (val_set, test_set) = rest.split_at(8);

    let variant = BayesVariant::Mnf;
    let spec = NetworkSpec {
        input_shape: shape,
        layers: vec![
            LayerSpec::Conv3d {
                filters: 16,
                kernel: [3, 3, 3],
                stride: 1,
                padding: Padding::Same,
                activation: Activation::Relu,
                variant,
            },
            LayerSpec::MaxPool3d { window: [2, 2, 2] },
            LayerSpec::BatchNorm,
            LayerSpec::GlobalMaxPool,
            LayerSpec::Dense { units: 32, activation: Activation::Relu, variant },
            LayerSpec::Dropout { rate: 0.2, always_on: false },
            LayerSpec::Dense { units: 1, activation: Activation::None, variant },
            LayerSpec::SigmoidHead,
        ],
        head: HeadKind::Sigmoid,
    };
    let config = TrainConfig { epochs: 12, seed: 3, batch_size: 4, ..Default::default() };
    let (checkpoint, history) = train(&spec, train_set, val_set, &config)?;
    for h in &history {
        println!(
            "epoch {:>2}  negative elbo {:>10.4}  val accuracy {:.3}",
            h.epoch, h.train_loss, h.val_accuracy
        );
    }

    let net = checkpoint.to_network()?;
    let mut rng = Rng::new(0);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in test_set {
        let v = &s.volume.voxels;
        let input = v.reshaped(vec![1, 1, shape[0], shape[1], shape[2]])?;
        probs.push(net.predict_batch(&input, Mode::MeanField, &mut rng)?[0]);
        labels.push(s.label);
    }
    println!("\nthreshold sweep on {} test volumes:", test_set.len());
    for (report, ece) in threshold_sweep(&probs, &labels, &[0.4, 0.5, 0.6], 10)? {
        println!(
            "  t={:.1}  acc {:.3}  f1 {:.3}  kappa {:+.3}  auc {}  ece {:.3}",
            report.threshold,
            report.accuracy,
            report.f1,
            report.kappa,
            report.auc.map(|a| format!("{a:.3}")).unwrap_or_default(),
            ece
        );
    }

    // Monte-Carlo interval for one positive case
    let case = &test_set.iter().find(|s| s.label == 1).unwrap().volume;
    let samples = mc_predictive_network(&net, "demo", &case.voxels, 200, 17)?;
    let interval = predictive_interval(&samples, 0.95)?;
    println!(
        "\nclass-1 95% interval [{:.4}, {:.4}] width {:.4} -> {:?}",
        interval.class1.0,
        interval.class1.1,
        interval.width,
        flag_high_uncertainty(&interval, DEFAULT_WIDTH_THRESHOLD)
    );

    // exact patch attribution of the same case
    let partition = partition_volume(shape, [2, 2, 2])?;
    let baseline = Tensor::zeros(&[shape[0], shape[1], shape[2]]);
    let model_fn = |t: &Tensor| -> voxbayes::Result<f64> {
        let input = t.reshaped(vec![1, 1, shape[0], shape[1], shape[2]])?;
        Ok(net.predict_batch(&input, Mode::MeanField, &mut Rng::new(0))?[0])
    };
    let map = exact_shapley(&model_fn, &case.voxels, &partition, &baseline)?;
    println!(
        "\npatch attribution (p1 {:.3}, baseline {:.3}):",
        map.target_value, map.base_value
    );
    for (i, phi) in map.values.iter().enumerate() {
        println!("  patch {i}: {phi:+.4}");
    }
    Ok(())
}
