//! Subcommand implementations.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use voxbayes::augment::AugmentPolicy;
use voxbayes::calibration::{
    calibration_report, calibration_to_csv, reliability_diagram, sweep_to_csv, threshold_sweep,
};
use voxbayes::checkpoint::Checkpoint;
use voxbayes::dataset::{read_manifest, write_manifest, LabeledSample, ManifestEntry, SourceClass};
use voxbayes::layers::{build_reference_model, BayesVariant, HeadKind};
use voxbayes::network::{Mode, Network};
use voxbayes::nifti::{
    apply_hu_window, parse_nifti, write_nifti, HuWindow, Volume, WriteDatatype,
};
use voxbayes::rng::Rng;
use voxbayes::shap::{
    attribution_to_json, exact_shapley, partition_volume, render_attribution_overlay,
    sampled_shapley, AttributionMap, MAX_EXACT_PATCHES,
};
use voxbayes::synth::blob_dataset;
use voxbayes::train::{predict_probs, train, TrainConfig};
use voxbayes::uncertainty::{
    flag_high_uncertainty, mc_predictive_network, predictive_interval, write_prediction_log,
    PredictionLogEntry, ReviewFlag,
};
use voxbayes::Tensor;

use crate::config::{Cfg, CliError, CliResult};

fn ensure_out_dir(cfg: &Cfg) -> CliResult<PathBuf> {
    let out = cfg.require_path("out")?;
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn finish(cfg: &Cfg, command: &str, out: &Path) -> CliResult<()> {
    write_file(&out.join("manifest.json"), cfg.manifest_json(command).as_bytes())
}

fn window(cfg: &Cfg) -> CliResult<HuWindow> {
    Ok(HuWindow::standard(cfg.require("data.window")?)?)
}

/// Load, window and label every entry of a manifest, in manifest order.
fn load_samples(manifest: &Path, win: &HuWindow) -> CliResult<Vec<LabeledSample>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Runtime(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    let samples: Result<Vec<LabeledSample>, CliError> = entries
        .par_iter()
        .map(|e| load_sample(e, win))
        .collect();
    samples
}

/// Read a scan, transparently gunzipping `.nii.gz` payloads; the parser
/// itself only sees uncompressed bytes.
fn read_volume_bytes(path: &Path) -> CliResult<Vec<u8>> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        use std::io::Read;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| CliError::Runtime(format!("{}: gzip: {e}", path.display())))?;
        return Ok(out);
    }
    Ok(bytes)
}

fn load_sample(entry: &ManifestEntry, win: &HuWindow) -> CliResult<LabeledSample> {
    let bytes = read_volume_bytes(&entry.path)?;
    let (_, raw) = parse_nifti(&bytes, &entry.path.display().to_string())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", entry.path.display())))?;
    let windowed = apply_hu_window(&raw, win);
    Ok(LabeledSample::new(windowed, entry.source_class))
}

fn sample_id(sample: &LabeledSample) -> String {
    Path::new(&sample.volume.provenance.source)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| sample.volume.provenance.source.clone())
}

// ── synth ────────────────────────────────────────────────────────────

/// Generate the built-in blob dataset as windowed-HU NIfTI volumes plus a
/// dataset manifest.
pub fn synth(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let n: usize = cfg.get_parsed("synth.n")?;
    let shape = cfg.get_shape("synth.shape")?;
    let seed: u64 = cfg.get_parsed("seed")?;
    let win = window(cfg)?;
    if n == 0 {
        return Err(CliError::Usage("synth.n must be at least 1".into()));
    }
    let samples = blob_dataset(n, shape, seed);
    let span = win.upper - win.lower;
    let mut entries = Vec::with_capacity(n);
    for (i, sample) in samples.iter().enumerate() {
        // map normalized intensities back into the HU window so the
        // ingestion pipeline reproduces them
        let mut hu = sample.volume.clone();
        for v in hu.voxels.data_mut() {
            *v = win.lower + *v * span;
        }
        let name = format!("vol_{i:04}.nii");
        let bytes = write_nifti(&hu, WriteDatatype::Float32)?;
        write_file(&out.join(&name), &bytes)?;
        entries.push((name, sample.source_class));
    }
    write_manifest(&out.join("dataset.csv"), &entries)?;
    finish(cfg, "synth", &out)
}

// ── prepare ──────────────────────────────────────────────────────────

/// Shuffle-split a dataset manifest 70/20/10 into train/test/val manifests.
pub fn prepare(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let manifest = cfg.require_path("data.manifest")?;
    let seed: u64 = cfg.get_parsed("seed")?;
    let entries = read_manifest(&manifest)?;
    let mut rng = Rng::new(seed);
    let (train_e, test_e, val_e) =
        voxbayes::dataset::split_dataset(&entries, voxbayes::dataset::SPLIT_RATIOS, &mut rng)?;
    for (name, part) in [("train.csv", &train_e), ("test.csv", &test_e), ("val.csv", &val_e)] {
        let rows: Vec<(String, SourceClass)> = part
            .iter()
            .map(|e| (e.path.display().to_string(), e.source_class))
            .collect();
        write_manifest(&out.join(name), &rows)?;
    }
    finish(cfg, "prepare", &out)
}

// ── train ────────────────────────────────────────────────────────────

pub fn train_cmd(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let win = window(cfg)?;
    let train_set = load_samples(&cfg.require_path("data.train")?, &win)?;
    let val_set = load_samples(&cfg.require_path("data.val")?, &win)?;
    let shape = train_set[0].volume.shape();
    let variant = BayesVariant::parse(cfg.require("model.variant")?)?;
    let head = HeadKind::parse(cfg.require("model.head")?)?;
    let mc_dropout = cfg.get_bool("model.mc_dropout")?;
    let spec = build_reference_model(shape, variant, head, mc_dropout)?;

    let augment = if cfg.get_bool("train.augment")? {
        Some(AugmentPolicy {
            rotate_max_deg: Some(cfg.get_parsed("train.augment.rotate_deg")?),
            flips: true,
            noise_sigma: cfg.get_parsed("train.augment.noise_sigma")?,
        })
    } else {
        None
    };
    let config = TrainConfig {
        learning_rate: cfg.get_parsed("train.learning_rate")?,
        epochs: cfg.get_parsed("train.epochs")?,
        batch_size: cfg.get_parsed("train.batch_size")?,
        kl_weight_mode: Default::default(),
        seed: cfg.get_parsed("seed")?,
        early_stop_patience: cfg.get_parsed("train.patience")?,
        augment,
    };
    let (ckpt, history) = train(&spec, &train_set, &val_set, &config)?;
    ckpt.save(&out.join("checkpoint"))?;
    let mut hist = String::from("epoch,train_loss,val_accuracy\n");
    for h in &history {
        hist.push_str(&format!(
            "{},{:.6},{:.6}\n",
            h.epoch, h.train_loss, h.val_accuracy
        ));
    }
    write_file(&out.join("history.csv"), hist.as_bytes())?;
    finish(cfg, "train", &out)
}

// ── shared evaluation plumbing ───────────────────────────────────────

struct EvalContext {
    net: Network,
    head: HeadKind,
    samples: Vec<LabeledSample>,
    labels: Vec<u8>,
    seed: u64,
}

fn eval_context(cfg: &Cfg) -> CliResult<EvalContext> {
    let ckpt = Checkpoint::load(&cfg.require_path("eval.checkpoint")?)?;
    let win = window(cfg)?;
    let samples = load_samples(&cfg.require_path("data.test")?, &win)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let head = ckpt.manifest.spec.head;
    Ok(EvalContext {
        net: ckpt.to_network()?,
        head,
        samples,
        labels,
        seed: cfg.get_parsed("seed")?,
    })
}

fn eval_probs(ctx: &EvalContext, mc_samples: usize) -> CliResult<Vec<f64>> {
    Ok(predict_probs(
        &ctx.net,
        &ctx.samples,
        ctx.head,
        mc_samples,
        ctx.seed,
    )?)
}

// ── evaluate ─────────────────────────────────────────────────────────

pub fn evaluate(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let ctx = eval_context(cfg)?;
    let probs = eval_probs(&ctx, cfg.get_parsed("eval.mc_samples")?)?;
    let thresholds = cfg.get_f64_list("eval.thresholds")?;
    let bins: usize = cfg.get_parsed("eval.bins")?;
    let rows = threshold_sweep(&probs, &ctx.labels, &thresholds, bins)?;
    write_file(&out.join("metrics.csv"), sweep_to_csv(&rows).as_bytes())?;
    finish(cfg, "evaluate", &out)
}

// ── calibrate ────────────────────────────────────────────────────────

pub fn calibrate(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let ctx = eval_context(cfg)?;
    let probs = eval_probs(&ctx, cfg.get_parsed("eval.mc_samples")?)?;
    let threshold: f64 = cfg.get_parsed("calibrate.threshold")?;
    let bins: usize = cfg.get_parsed("eval.bins")?;
    let report = calibration_report(&probs, &ctx.labels, threshold, bins)?;
    write_file(&out.join("calibration.csv"), calibration_to_csv(&report).as_bytes())?;
    write_file(&out.join("reliability.svg"), reliability_diagram(&report).as_bytes())?;
    finish(cfg, "calibrate", &out)
}

// ── uncertainty ──────────────────────────────────────────────────────

pub fn uncertainty(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let ctx = eval_context(cfg)?;
    let t: usize = cfg.get_parsed("uncertainty.t")?;
    let level: f64 = cfg.get_parsed("uncertainty.level")?;
    let width_threshold: f64 = cfg.get_parsed("uncertainty.width_threshold")?;
    let model_id = format!("model-{}", ctx.seed);

    let mut log = Vec::new();
    let mut intervals_csv =
        String::from("id,label,mean,class1_lo,class1_hi,class0_lo,class0_hi,width,flagged\n");
    for (i, sample) in ctx.samples.iter().enumerate() {
        let samples = mc_predictive_network(
            &ctx.net,
            &model_id,
            &sample.volume.voxels,
            t,
            ctx.seed.wrapping_add(i as u64),
        )?;
        let interval = predictive_interval(&samples, level)?;
        let flag = flag_high_uncertainty(&interval, width_threshold);
        let id = sample_id(sample);
        intervals_csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            id,
            sample.label,
            interval.mean,
            interval.class1.0,
            interval.class1.1,
            interval.class0.0,
            interval.class0.1,
            interval.width,
            matches!(flag, ReviewFlag::Flagged)
        ));
        log.push(PredictionLogEntry {
            id,
            label: Some(sample.label),
            samples: samples.samples,
            seed: samples.seed,
            model_id: samples.model_id,
        });
    }
    write_file(&out.join("predictions.jsonl"), write_prediction_log(&log)?.as_bytes())?;
    write_file(&out.join("intervals.csv"), intervals_csv.as_bytes())?;
    finish(cfg, "uncertainty", &out)
}

// ── explain ──────────────────────────────────────────────────────────

pub fn explain(cfg: &Cfg) -> CliResult<()> {
    let out = ensure_out_dir(cfg)?;
    let ckpt = Checkpoint::load(&cfg.require_path("eval.checkpoint")?)?;
    let net = ckpt.to_network()?;
    let win = window(cfg)?;
    let input_path = cfg.require_path("explain.input")?;
    let bytes = read_volume_bytes(&input_path)?;
    let (_, raw) = parse_nifti(&bytes, &input_path.display().to_string())?;
    let volume = apply_hu_window(&raw, &win);
    explain_volume(cfg, &out, &net, &volume)?;
    finish(cfg, "explain", &out)
}

fn explain_volume(cfg: &Cfg, out: &Path, net: &Network, volume: &Volume) -> CliResult<()> {
    let grid = cfg.get_shape("explain.grid")?;
    let shape = volume.shape();
    let partition = partition_volume(shape, grid)?;
    let baseline = Tensor::zeros(&[shape[0], shape[1], shape[2]]);
    let seed: u64 = cfg.get_parsed("seed")?;
    let permutations: usize = cfg.get_parsed("explain.permutations")?;

    // attribution explains the mean-field prediction
    let model_fn = |t: &Tensor| -> voxbayes::Result<f64> {
        let s = t.shape();
        let input = t.reshaped(vec![1, 1, s[0], s[1], s[2]])?;
        let mut rng = Rng::new(0);
        Ok(net.predict_batch(&input, Mode::MeanField, &mut rng)?[0])
    };
    let map = if cfg.get_bool("explain.exact")? {
        if partition.len() > MAX_EXACT_PATCHES {
            return Err(CliError::Usage(format!(
                "exact attribution needs at most {MAX_EXACT_PATCHES} patches, grid gives {}",
                partition.len()
            )));
        }
        exact_shapley(&model_fn, &volume.voxels, &partition, &baseline)?
    } else {
        sampled_shapley(&model_fn, &volume.voxels, &partition, &baseline, permutations, seed)?
    };

    let class0 = AttributionMap {
        grid: map.grid,
        base_value: map.class0_base_value(),
        target_value: map.class0_target_value(),
        values: map.class0_values(),
        baseline: map.baseline.clone(),
    };
    write_file(&out.join("attribution_class1.json"), attribution_to_json(&map)?.as_bytes())?;
    write_file(&out.join("attribution_class0.json"), attribution_to_json(&class0)?.as_bytes())?;
    write_file(
        &out.join("attribution.svg"),
        render_attribution_overlay(&volume.voxels, &partition, &map).as_bytes(),
    )?;
    Ok(())
}
