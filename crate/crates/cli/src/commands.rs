//! The eight subcommands. Each returns a [`CliError`] whose category fixes
//! the process exit code; success output goes to stdout.

use std::fmt::Display;
use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use a2net_core::autodiff::{no_grad, Shape, Tensor};
use a2net_core::colorspace::{
    residual_histogram, swap_channels, AnalysisSpace, ColorError, RgbImage, SwapMode,
};
use a2net_core::data::{
    crop, decode_image, encode_image, generate_clean, load_pairs, materialize_synthetic,
    pad_reflect, sample_patches, PatchSpec, SynthParams,
};
use a2net_core::net::Model;
use a2net_core::objective::evaluate_pair;
use a2net_core::training::{
    checkpoint_name, image_to_tensor, load_checkpoint, tensor_to_image, Adam, TrainRun,
    TrainingError,
};

use crate::config::RunConfig;
use crate::CliError;

fn data_err(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn ckpt_err(e: impl Display) -> CliError {
    CliError::Checkpoint(e.to_string())
}

fn training_err(e: TrainingError) -> CliError {
    match e {
        TrainingError::Checkpoint { .. } => CliError::Checkpoint(e.to_string()),
        TrainingError::BadConfig { .. } | TrainingError::Schedule { .. } => {
            CliError::Config(e.to_string())
        }
        other => CliError::Data(other.to_string()),
    }
}

/// Pads to the model's extent multiple, runs the forward pass in the
/// model's color space, and crops back to the source extent.
fn restore(model: &Model, img: &RgbImage) -> Result<RgbImage, CliError> {
    let m = model.config().extent_multiple();
    let (w, h) = (img.width(), img.height());
    let (tw, th) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    if tw >= 2 * w || th >= 2 * h {
        return Err(CliError::Data(format!(
            "image {w}x{h} is too small to reflect-pad to a multiple of {m}"
        )));
    }
    let padded = if (tw, th) == (w, h) {
        img.clone()
    } else {
        pad_reflect(img, tw, th)
    };
    let yuv = model.config().variant.expects_yuv();
    let input = image_to_tensor(&padded, yuv).map_err(data_err)?;
    let output = no_grad(|| model.forward(&input)).map_err(data_err)?;
    let out_img = tensor_to_image(&output, yuv).map_err(data_err)?;
    Ok(crop(&out_img, 0, 0, w, h))
}

pub fn train(config: &RunConfig, data_root: &Path, out: &Path) -> Result<(), CliError> {
    let model_cfg = config.network()?;
    let train_cfg = config.training()?;
    let mut model = Model::build(model_cfg).map_err(|e| CliError::Config(e.to_string()))?;

    let dataset = load_pairs(data_root, "train").map_err(data_err)?;
    let spec = PatchSpec {
        size: config.patch_size,
        count: config.patch_count,
        seed: config.seed,
    };
    let patches = sample_patches(&dataset, &spec).map_err(data_err)?;

    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let log_path = out.join("loss_log.csv");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;

    let total = train_cfg.total_epochs();
    let mut optimizer = Adam::from_config(&train_cfg);
    let outcome = a2net_core::training::train(
        &mut model,
        &mut optimizer,
        &patches,
        &train_cfg,
        TrainRun {
            start_epoch: 0,
            end_epoch: total,
            loss_log: Some(&mut log),
            checkpoint_dir: Some(out),
            save_final: true,
        },
    )
    .map_err(training_err)?;

    println!(
        "trained {} epochs ({} steps) on {} patches from {} pairs",
        outcome.epochs_run,
        outcome.steps_run,
        patches.len(),
        dataset.len()
    );
    if let Some(report) = outcome.last_report {
        println!("final loss {}", report.l_total);
    }
    println!("checkpoint {}", out.join(checkpoint_name(total)).display());
    println!("loss log {}", log_path.display());
    Ok(())
}

pub fn infer(ckpt: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(ckpt).map_err(ckpt_err)?;
    let img = decode_image(input).map_err(data_err)?;
    let restored = restore(&model, &img)?;
    encode_image(&restored, output).map_err(data_err)?;
    println!("wrote {}", output.display());
    Ok(())
}

pub fn eval(ckpt: &Path, pairs_root: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(ckpt).map_err(ckpt_err)?;
    let dataset = load_pairs(pairs_root, "eval").map_err(data_err)?;
    if dataset.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no pairs to evaluate",
            pairs_root.display()
        )));
    }

    println!("file,psnr,ssim");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (rain_path, clean_path) in &dataset.pairs {
        let rain = decode_image(rain_path).map_err(data_err)?;
        let clean = decode_image(clean_path).map_err(data_err)?;
        let restored = restore(&model, &rain)?;
        let report = evaluate_pair(&restored, &clean).map_err(data_err)?;
        let name = rain_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("?");
        println!("{name},{:.10},{:.10}", report.psnr, report.ssim);
        psnr_sum += report.psnr;
        ssim_sum += report.ssim;
    }
    let n = dataset.len() as f64;
    println!("mean,{:.10},{:.10}", psnr_sum / n, ssim_sum / n);
    Ok(())
}

pub fn params(config: &RunConfig) -> Result<(), CliError> {
    let model = Model::build(config.network()?).map_err(|e| CliError::Config(e.to_string()))?;
    println!("variant: {}", model.config().variant.as_str());
    println!("parameters: {}", model.param_count());
    Ok(())
}

pub fn analyze(pairs_root: &Path, space: &str, bins: usize, out: &Path) -> Result<(), CliError> {
    let space = match space {
        "rgb" => AnalysisSpace::Rgb,
        "yuv" => AnalysisSpace::Yuv,
        other => {
            return Err(CliError::Config(format!(
                "unknown space `{other}` (expected rgb or yuv)"
            )))
        }
    };
    let dataset = load_pairs(pairs_root, "analyze").map_err(data_err)?;
    let mut pairs = Vec::with_capacity(dataset.len());
    for (rain_path, clean_path) in &dataset.pairs {
        pairs.push((
            decode_image(rain_path).map_err(data_err)?,
            decode_image(clean_path).map_err(data_err)?,
        ));
    }
    let hist = residual_histogram(&pairs, space, bins).map_err(|e| match e {
        ColorError::TooFewBins { .. } => CliError::Config(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    fs::write(out, hist.to_csv()).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    for (c, label) in space.channel_labels().iter().enumerate() {
        println!("{label} mean {:+.6} std {:.6}", hist.mean[c], hist.std[c]);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn swap(degraded: &Path, clean: &Path, mode: &str, out: &Path) -> Result<(), CliError> {
    let mode = match mode {
        "y" => SwapMode::YFromClean,
        "uv" => SwapMode::UvFromClean,
        other => {
            return Err(CliError::Config(format!(
                "unknown mode `{other}` (expected y or uv)"
            )))
        }
    };
    let degraded = decode_image(degraded).map_err(data_err)?;
    let clean = decode_image(clean).map_err(data_err)?;
    let composite = swap_channels(&degraded, &clean, mode).map_err(data_err)?;
    encode_image(&composite, out).map_err(data_err)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn bench(ckpt: &Path, sizes: &[usize], repeat: usize) -> Result<(), CliError> {
    if repeat == 0 {
        return Err(CliError::Config("repeat must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(CliError::Config("at least one size is required".into()));
    }
    let (model, _) = load_checkpoint(ckpt).map_err(ckpt_err)?;
    let m = model.config().extent_multiple();

    println!("size,seconds");
    for &size in sizes {
        if size == 0 {
            return Err(CliError::Config("sizes must be positive".into()));
        }
        let padded = size.div_ceil(m) * m;
        let shape = Shape::new(1, 3, padded, padded);
        let data: Vec<f32> = (0..shape.numel())
            .map(|i| (i % 251) as f32 / 251.0)
            .collect();
        let input = Tensor::leaf(shape, data, false).map_err(data_err)?;

        no_grad(|| model.forward(&input)).map_err(data_err)?;
        let start = Instant::now();
        for _ in 0..repeat {
            black_box(no_grad(|| model.forward(black_box(&input))).map_err(data_err)?);
        }
        let mean = start.elapsed().as_secs_f64() / repeat as f64;
        println!("{size},{mean:.6}");
    }
    Ok(())
}

/// Degrader knobs as an optional JSON document; omitted fields keep the
/// stock values.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthParamsFile {
    blob_count: (usize, usize),
    blob_radius: (f32, f32),
    gain: (f32, f32),
    blur_radius: usize,
    chroma_leak: f32,
    seed: u64,
}

impl Default for SynthParamsFile {
    fn default() -> Self {
        let p = SynthParams::default();
        SynthParamsFile {
            blob_count: p.blob_count,
            blob_radius: p.blob_radius,
            gain: p.gain,
            blur_radius: p.blur_radius,
            chroma_leak: p.chroma_leak,
            seed: p.seed,
        }
    }
}

fn png_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    paths.sort();
    Ok(paths)
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    clean_root: Option<&Path>,
    out_root: &Path,
    params_path: Option<&Path>,
    seed: Option<u64>,
    count: usize,
    size: usize,
) -> Result<(), CliError> {
    let mut params = match params_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let file: SynthParamsFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            SynthParams {
                blob_count: file.blob_count,
                blob_radius: file.blob_radius,
                gain: file.gain,
                blur_radius: file.blur_radius,
                chroma_leak: file.chroma_leak,
                seed: file.seed,
            }
        }
        None => SynthParams::default(),
    };
    if let Some(seed) = seed {
        params.seed = seed;
    }
    params.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let cleans: Vec<RgbImage> = match clean_root {
        Some(dir) => {
            let paths = png_paths(dir)?;
            if paths.is_empty() {
                return Err(CliError::Data(format!(
                    "{}: no PNG files to degrade",
                    dir.display()
                )));
            }
            let mut imgs = Vec::with_capacity(paths.len());
            for p in &paths {
                imgs.push(decode_image(p).map_err(data_err)?);
            }
            imgs
        }
        None => {
            if count == 0 || size == 0 {
                return Err(CliError::Config(
                    "count and size must be positive without --clean-root".into(),
                ));
            }
            (0..count)
                .map(|i| generate_clean(size, size, params.seed.wrapping_add(0x5EED + i as u64)))
                .collect()
        }
    };

    let dataset = materialize_synthetic(out_root, &cleans, &params).map_err(data_err)?;
    println!("wrote {} pairs under {}", dataset.len(), out_root.display());
    Ok(())
}
