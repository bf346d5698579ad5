//! Monte-Carlo predictive distributions, percentile intervals and
//! width-based review flags.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

use rayon::prelude::*;

/// Default number of Monte-Carlo forwards.
pub const DEFAULT_MC_SAMPLES: usize = 200;
/// Default interval width above which a prediction is flagged for review.
pub const DEFAULT_WIDTH_THRESHOLD: f64 = 0.3;

/// T class-1 probability draws for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSamples {
    pub samples: Vec<f64>,
    pub seed: u64,
    pub model_id: String,
}

impl PredictiveSamples {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// Per-class percentile interval at one confidence level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveInterval {
    pub level: f64,
    pub class1: (f64, f64),
    pub class0: (f64, f64),
    pub mean: f64,
    pub width: f64,
}

/// Draw `t` stochastic forwards through the network, each from the derived
/// stream `(seed, index)`. Samples are collected in index order, so the
/// result is identical however the draws are scheduled.
pub fn mc_predictive_network(
    net: &Network,
    model_id: &str,
    volume: &Tensor,
    t: usize,
    seed: u64,
) -> Result<PredictiveSamples> {
    if t == 0 {
        return Err(Error::Config("mc_predictive needs T >= 1".into()));
    }
    if !net.spec.has_stochastic_layers() {
        return Err(Error::Config(
            "Monte-Carlo prediction requires a Bayesian or MC-dropout model".into(),
        ));
    }
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "mc_predictive",
            lhs: s.to_vec(),
            rhs: net.spec.input_shape.to_vec(),
        });
    }
    let input = volume.reshaped(vec![1, 1, s[0], s[1], s[2]])?;
    let root = Rng::new(seed);
    let samples: Result<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let probs = net.predict_batch(&input, Mode::Sample, &mut rng)?;
            Ok(probs[0])
        })
        .collect();
    Ok(PredictiveSamples {
        samples: samples?,
        seed,
        model_id: model_id.to_string(),
    })
}

/// Checkpoint-level convenience wrapper around [`mc_predictive_network`].
pub fn mc_predictive(
    ckpt: &Checkpoint,
    volume: &Tensor,
    t: usize,
    seed: u64,
) -> Result<PredictiveSamples> {
    let net = ckpt.to_network()?;
    mc_predictive_network(&net, &ckpt.manifest.model_id, volume, t, seed)
}

/// Linear-interpolation percentile: rank `q * (T - 1)` between order
/// statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let r = q * (sorted.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = r - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Empirical percentile interval at `level`; the class-0 interval is the
/// exact complement of the class-1 interval.
pub fn predictive_interval(samples: &PredictiveSamples, level: f64) -> Result<PredictiveInterval> {
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::Config(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    if samples.samples.is_empty() {
        return Err(Error::Config("no samples to form an interval".into()));
    }
    let mut sorted = samples.samples.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = percentile(&sorted, tail);
    let hi = percentile(&sorted, 1.0 - tail);
    Ok(PredictiveInterval {
        level,
        class1: (lo, hi),
        class0: (1.0 - hi, 1.0 - lo),
        mean: samples.mean(),
        width: hi - lo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewFlag {
    Flagged,
    NotFlagged,
}

/// Flag an interval for human review when its width strictly exceeds the
/// threshold.
pub fn flag_high_uncertainty(interval: &PredictiveInterval, width_threshold: f64) -> ReviewFlag {
    if interval.width > width_threshold {
        ReviewFlag::Flagged
    } else {
        ReviewFlag::NotFlagged
    }
}

/// One prediction-log record: `{id, label?, samples, seed, model_id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLogEntry {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub samples: Vec<f64>,
    pub seed: u64,
    pub model_id: String,
}

/// Serialize prediction-log entries as JSON lines.
pub fn write_prediction_log(entries: &[PredictionLogEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(|err| Error::Io(err.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_prediction_log(text: &str) -> Result<Vec<PredictionLogEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("prediction log: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(values: &[f64]) -> PredictiveSamples {
        PredictiveSamples {
            samples: values.to_vec(),
            seed: 0,
            model_id: "m".into(),
        }
    }

    #[test]
    fn constant_samples_give_zero_width() {
        let s = samples(&[0.7; 5]);
        let iv = predictive_interval(&s, 0.95).unwrap();
        assert_eq!(iv.class1, (0.7, 0.7));
        assert_eq!(iv.width, 0.0);
    }

    #[test]
    fn interpolated_percentile_on_uniform_grid() {
        let values: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let s = samples(&values);
        let iv = predictive_interval(&s, 0.95).unwrap();
        assert!((iv.class1.0 - 0.025).abs() < 1e-12);
        assert!((iv.class1.1 - 0.975).abs() < 1e-12);
    }

    #[test]
    fn class0_is_exact_complement() {
        let s = samples(&[0.47307159, 0.6, 0.80, 0.9939988]);
        let iv = predictive_interval(&s, 0.95).unwrap();
        assert_eq!(iv.class0.0, 1.0 - iv.class1.1);
        assert_eq!(iv.class0.1, 1.0 - iv.class1.0);
    }

    #[test]
    fn reported_interval_complement_values() {
        // class-1 interval [0.47307159, 0.9939988] -> class-0
        // [0.0060012, 0.52692841]
        let iv = PredictiveInterval {
            level: 0.95,
            class1: (0.47307159, 0.9939988),
            class0: (1.0 - 0.9939988, 1.0 - 0.47307159),
            mean: 0.7,
            width: 0.9939988 - 0.47307159,
        };
        assert!((iv.class0.0 - 0.0060012).abs() < 1e-9);
        assert!((iv.class0.1 - 0.52692841).abs() < 1e-9);
        // width ~ 0.5209 flags at the default threshold
        assert_eq!(
            flag_high_uncertainty(&iv, DEFAULT_WIDTH_THRESHOLD),
            ReviewFlag::Flagged
        );
    }

    #[test]
    fn flag_uses_strict_inequality() {
        let iv = PredictiveInterval {
            level: 0.95,
            class1: (0.3, 0.6),
            class0: (0.4, 0.7),
            mean: 0.45,
            width: 0.3,
        };
        assert_eq!(flag_high_uncertainty(&iv, 0.3), ReviewFlag::NotFlagged);
        let zero = PredictiveInterval { width: 0.0, ..iv };
        assert_eq!(flag_high_uncertainty(&zero, 0.3), ReviewFlag::NotFlagged);
    }

    #[test]
    fn intervals_nest_with_level() {
        let values: Vec<f64> = (0..200).map(|i| (i as f64 * 0.017).sin().abs()).collect();
        let s = samples(&values);
        let narrow = predictive_interval(&s, 0.5).unwrap();
        let wide = predictive_interval(&s, 0.95).unwrap();
        assert!(wide.class1.0 <= narrow.class1.0);
        assert!(wide.class1.1 >= narrow.class1.1);
    }

    #[test]
    fn bad_level_rejected() {
        let s = samples(&[0.5, 0.6]);
        assert!(predictive_interval(&s, 0.0).is_err());
        assert!(predictive_interval(&s, 1.0).is_err());
    }

    #[test]
    fn prediction_log_round_trip() {
        let entries = vec![
            PredictionLogEntry {
                id: "vol_0001".into(),
                label: Some(1),
                samples: vec![0.25, 0.5],
                seed: 9,
                model_id: "m".into(),
            },
            PredictionLogEntry {
                id: "vol_0002".into(),
                label: None,
                samples: vec![0.75],
                seed: 9,
                model_id: "m".into(),
            },
        ];
        let text = write_prediction_log(&entries).unwrap();
        assert_eq!(read_prediction_log(&text).unwrap(), entries);
        assert!(!text.lines().next().unwrap().contains("label\":null"));
    }
}
