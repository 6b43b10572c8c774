//! Optimization loop: Adam, the two-phase learning-rate schedule, batch
//! assembly, and binary checkpoints with an optimizer sidecar so a resumed
//! run reproduces an uninterrupted one bit for bit.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{slice_channels, Shape, Tensor, TensorError};
use crate::colorspace::{rgb_to_yuv, yuv_to_rgb, ColorError, RgbImage, YuvImage};
use crate::net::{Model, NetError, NetworkConfig, Variant};
use crate::objective::{dual_loss, single_loss, LossMode, LossReport, LossWeights, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("log stream: {0}")]
    Log(io::Error),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("epoch {epoch} is outside the {total}-epoch schedule")]
    Schedule { epoch: usize, total: usize },
    #[error("training config: {reason}")]
    BadConfig { reason: String },
    #[error("batch: {reason}")]
    BadBatch { reason: String },
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Optimization hyperparameters. The schedule holds `base_lr` for
/// `epochs_constant` epochs, then decays linearly to zero over
/// `epochs_decay` more.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub loss_mode: LossMode,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            base_lr: 2e-4,
            epochs_constant: 100,
            epochs_decay: 100,
            batch_size: 4,
            weights: LossWeights::default(),
            loss_mode: LossMode::MseSsim,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainingConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(TrainingError::BadConfig { reason });
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive and finite", self.base_lr));
        }
        if self.total_epochs() == 0 {
            return bad("schedule needs at least one epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.weights.alpha) {
            return bad(format!("alpha {} must lie in [0, 1]", self.weights.alpha));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index, computed in f64 so the
/// constant phase is exact and the decay phase hits exactly zero on the
/// final epoch.
pub fn lr_at(cfg: &TrainingConfig, epoch: usize) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch >= total {
        return Err(TrainingError::Schedule { epoch, total });
    }
    if epoch < cfg.epochs_constant {
        Ok(cfg.base_lr)
    } else {
        let into_decay = (epoch - cfg.epochs_constant + 1) as f64;
        Ok(cfg.base_lr * (1.0 - into_decay / cfg.epochs_decay as f64))
    }
}

/// Adam with bias correction. State is keyed by parameter name, so it
/// survives checkpointing and reattaches to a rebuilt model.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    t: u64,
    state: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, epsilon: f32) -> Adam {
        Adam {
            beta1,
            beta2,
            epsilon,
            t: 0,
            state: IndexMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Adam {
        Adam::new(cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// Completed update steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Consumes the gradients accumulated on `params` and replaces every
    /// entry with an updated leaf. A missing gradient counts as zero, and a
    /// zero gradient reproduces the parameter bit for bit.
    pub fn apply(&mut self, params: &mut IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - (self.beta1 as f64).powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - (self.beta2 as f64).powi(self.t.min(i32::MAX as u64) as i32);
        let (c1, c2, lr) = (c1 as f32, c2 as f32, lr as f32);
        for (name, param) in params.iter_mut() {
            let n = param.numel();
            let grad = param.grad().unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = param.data().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                next[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            *param = Tensor::leaf(param.shape(), next, true)?;
        }
        Ok(())
    }
}

/// Stacks same-sized images into a `[n, 3, h, w]` tensor, converting to
/// YUV channel order when `yuv` is set.
pub fn batch_to_tensor(images: &[&RgbImage], yuv: bool) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| TrainingError::BadBatch {
        reason: "empty batch".into(),
    })?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(TrainingError::BadBatch {
                reason: format!(
                    "extent {}x{} differs from the batch's {}x{}",
                    img.width(),
                    img.height(),
                    w,
                    h
                ),
            });
        }
        if yuv {
            let c = rgb_to_yuv(img);
            data.extend_from_slice(c.y());
            data.extend_from_slice(c.u());
            data.extend_from_slice(c.v());
        } else {
            for ch in 0..3 {
                data.extend_from_slice(img.plane(ch));
            }
        }
    }
    Ok(Tensor::leaf(
        Shape::new(images.len(), 3, h, w),
        data,
        false,
    )?)
}

/// Single-image tensor in the model's expected color space.
pub fn image_to_tensor(img: &RgbImage, yuv: bool) -> Result<Tensor> {
    batch_to_tensor(&[img], yuv)
}

/// Decodes a single-image network output back to RGB.
pub fn tensor_to_image(t: &Tensor, yuv: bool) -> Result<RgbImage> {
    if yuv {
        Ok(yuv_to_rgb(&YuvImage::from_tensor(t)?))
    } else {
        Ok(RgbImage::from_tensor(t)?)
    }
}

/// Builds the variant-appropriate objective: luminance/chrominance split
/// with the alpha balance for YUV models, a plain whole-tensor loss for RGB
/// models. Returns the differentiable total plus its scalar report.
pub fn evaluate_loss(
    model: &Model,
    output: &Tensor,
    target: &Tensor,
    weights: LossWeights,
    mode: LossMode,
) -> Result<(Tensor, LossReport)> {
    if model.config().variant.expects_yuv() {
        let out_y = slice_channels(output, 0, 1)?;
        let out_uv = slice_channels(output, 1, 2)?;
        let t_y = slice_channels(target, 0, 1)?;
        let t_uv = slice_channels(target, 1, 2)?;
        Ok(dual_loss(&out_y, &t_y, &out_uv, &t_uv, weights, mode)?)
    } else {
        Ok(single_loss(output, target, mode, 0.0)?)
    }
}

/// One optimization step: forward, loss, backward, Adam update. The report
/// reflects the loss before the update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    input: &Tensor,
    target: &Tensor,
    lr: f64,
    weights: LossWeights,
    mode: LossMode,
) -> Result<LossReport> {
    let output = model.forward(input)?;
    let (loss, report) = evaluate_loss(model, &output, target, weights, mode)?;
    loss.backward()?;
    optimizer.apply(model.params_mut(), lr)?;
    Ok(report)
}

/// Epoch range and output plumbing for [`train`].
pub struct TrainRun<'a> {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub loss_log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Save a checkpoint when `end_epoch` is reached even if it falls off
    /// the `checkpoint_every` cadence.
    pub save_final: bool,
}

/// What [`train`] did.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub steps_run: u64,
    pub last_report: Option<LossReport>,
}

pub fn checkpoint_name(completed_epochs: usize) -> String {
    format!("epoch_{completed_epochs:04}.a2ck")
}

/// Sidecar path holding the optimizer state for a model checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("opt")
}

/// Runs epochs `[start_epoch, end_epoch)` over `(degraded, clean)` patch
/// pairs. Each epoch shuffles deterministically from `cfg.seed` and the
/// absolute epoch index, so resuming from a checkpoint replays the exact
/// batch sequence of an uninterrupted run. Trailing patches that do not
/// fill a batch are skipped. The loss log gets one `epoch,step,l_total,
/// l_y,l_uv,lr` line per step (plus a header when starting from epoch 0).
pub fn train(
    model: &mut Model,
    optimizer: &mut Adam,
    patches: &[(RgbImage, RgbImage)],
    cfg: &TrainingConfig,
    run: TrainRun<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let TrainRun {
        start_epoch,
        end_epoch,
        mut loss_log,
        checkpoint_dir,
        save_final,
    } = run;
    if start_epoch > end_epoch || end_epoch > cfg.total_epochs() {
        return Err(TrainingError::Schedule {
            epoch: end_epoch,
            total: cfg.total_epochs(),
        });
    }
    if patches.len() < cfg.batch_size {
        return Err(TrainingError::BadBatch {
            reason: format!(
                "{} patches cannot fill a batch of {}",
                patches.len(),
                cfg.batch_size
            ),
        });
    }
    let yuv = model.config().variant.expects_yuv();
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|source| TrainingError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    if let (Some(log), 0) = (loss_log.as_deref_mut(), start_epoch) {
        writeln!(log, "epoch,step,l_total,l_y,l_uv,lr").map_err(TrainingError::Log)?;
    }

    let mut last_report = None;
    let mut steps_run = 0;
    for epoch in start_epoch..end_epoch {
        let lr = lr_at(cfg, epoch)?;
        let mut order: Vec<usize> = (0..patches.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        for chunk in order.chunks_exact(cfg.batch_size) {
            let inputs: Vec<&RgbImage> = chunk.iter().map(|&i| &patches[i].0).collect();
            let targets: Vec<&RgbImage> = chunk.iter().map(|&i| &patches[i].1).collect();
            let input = batch_to_tensor(&inputs, yuv)?;
            let target = batch_to_tensor(&targets, yuv)?;
            let report = train_step(model, optimizer, &input, &target, lr, cfg.weights, cfg.loss_mode)?;
            steps_run += 1;
            if let Some(log) = loss_log.as_deref_mut() {
                writeln!(
                    log,
                    "{},{},{},{},{},{}",
                    epoch,
                    optimizer.step_count(),
                    report.l_total,
                    report.l_y,
                    report.l_uv,
                    lr
                )
                .map_err(TrainingError::Log)?;
            }
            last_report = Some(report);
        }

        if let Some(dir) = checkpoint_dir {
            let completed = epoch + 1;
            let on_cadence = cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0;
            let at_end = save_final && completed == end_epoch;
            if on_cadence || at_end {
                let path = dir.join(checkpoint_name(completed));
                save_checkpoint(&path, model, completed)?;
                save_optimizer(&optimizer_path(&path), optimizer, model)?;
            }
        }
    }
    Ok(TrainOutcome {
        epochs_run: end_epoch - start_epoch,
        steps_run,
        last_report,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"A2CK";
const OPT_MAGIC: &[u8; 4] = b"A2OP";
const FORMAT_VERSION: u32 = 1;

struct CountingWriter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, vs: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn get_str(r: &mut impl Read, cap: usize) -> io::Result<String> {
    let len = get_u32(r)? as usize;
    if len > cap {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("string length {len} exceeds the {cap}-byte cap"),
        ));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Size in bytes of a checkpoint for this model; the writer is verified
/// against it, so readers can sanity-check files before parsing.
pub fn checkpoint_size(model: &Model) -> u64 {
    let mut size = 4 + 4; // magic, version
    size += 4 + model.config().variant.as_str().len() as u64;
    size += 4 * 4 + 8; // levels, widths, seed
    size += 4 + 4; // trained epochs, entry count
    for (name, t) in model.params() {
        size += 4 + name.len() as u64 + 4 + 4 * 4 + 4 * t.numel() as u64;
    }
    size
}

/// Writes the model's configuration and every parameter tensor as
/// little-endian binary. Reloading reproduces the parameters bit for bit.
pub fn save_checkpoint(path: &Path, model: &Model, trained_epochs: usize) -> Result<()> {
    let io_err = |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = CountingWriter {
        inner: io::BufWriter::new(file),
        written: 0,
    };
    let cfg = model.config();
    (|| -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_str(&mut w, cfg.variant.as_str())?;
        put_u32(&mut w, cfg.levels as u32)?;
        put_u32(&mut w, cfg.k_encoder as u32)?;
        put_u32(&mut w, cfg.k_y as u32)?;
        put_u32(&mut w, cfg.k_uv as u32)?;
        put_u64(&mut w, cfg.seed)?;
        put_u32(&mut w, trained_epochs as u32)?;
        put_u32(&mut w, model.params().len() as u32)?;
        for (name, t) in model.params() {
            put_str(&mut w, name)?;
            put_u32(&mut w, 4)?;
            let s = t.shape();
            for d in [s.batch, s.channels, s.height, s.width] {
                put_u32(&mut w, d as u32)?;
            }
            put_f32s(&mut w, t.data())?;
        }
        w.flush()
    })()
    .map_err(io_err)?;
    debug_assert_eq!(w.written, checkpoint_size(model));
    Ok(())
}

/// Rebuilds the model a checkpoint describes and installs the stored
/// parameters. Returns the model and how many epochs it had trained.
pub fn load_checkpoint(path: &Path) -> Result<(Model, usize)> {
    let corrupt = |reason: String| TrainingError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let io_err = |source: io::Error| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut r = io::BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MODEL_MAGIC {
        return Err(corrupt("bad magic, not a model checkpoint".into()));
    }
    let version = get_u32(&mut r).map_err(io_err)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let variant_str = get_str(&mut r, 64).map_err(io_err)?;
    let variant = Variant::parse(&variant_str)
        .ok_or_else(|| corrupt(format!("unknown variant `{variant_str}`")))?;
    let config = NetworkConfig {
        variant,
        levels: get_u32(&mut r).map_err(io_err)? as usize,
        k_encoder: get_u32(&mut r).map_err(io_err)? as usize,
        k_y: get_u32(&mut r).map_err(io_err)? as usize,
        k_uv: get_u32(&mut r).map_err(io_err)? as usize,
        seed: get_u64(&mut r).map_err(io_err)?,
    };
    let trained_epochs = get_u32(&mut r).map_err(io_err)? as usize;
    let mut model = Model::build(config)?;
    let count = get_u32(&mut r).map_err(io_err)? as usize;
    if count != model.params().len() {
        return Err(corrupt(format!(
            "{count} tensors stored, model has {}",
            model.params().len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name = get_str(&mut r, 256).map_err(io_err)?;
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
        let ndims = get_u32(&mut r).map_err(io_err)?;
        if ndims != 4 {
            return Err(corrupt(format!("tensor `{name}` has {ndims} dims, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = get_u32(&mut r).map_err(io_err)? as usize;
        }
        let expected = model
            .params()
            .get(&name)
            .ok_or_else(|| corrupt(format!("tensor `{name}` is not part of this architecture")))?
            .shape();
        if dims != [expected.batch, expected.channels, expected.height, expected.width] {
            return Err(corrupt(format!(
                "tensor `{name}` has shape {dims:?}, model expects {expected:?}"
            )));
        }
        let data = get_f32s(&mut r, expected.numel()).map_err(io_err)?;
        model.set_param(&name, data)?;
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing).map_err(io_err)? {
        0 => Ok((model, trained_epochs)),
        _ => Err(corrupt("trailing bytes after the last tensor".into())),
    }
}

/// Writes the Adam state sidecar for a checkpointed model.
pub fn save_optimizer(path: &Path, optimizer: &Adam, model: &Model) -> Result<()> {
    let io_err = |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    for name in optimizer.state.keys() {
        if !model.params().contains_key(name) {
            return Err(TrainingError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("optimizer tracks `{name}`, which the model lacks"),
            });
        }
    }
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = io::BufWriter::new(file);
    (|| -> io::Result<()> {
        w.write_all(OPT_MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_f32s(&mut w, &[optimizer.beta1, optimizer.beta2, optimizer.epsilon])?;
        put_u64(&mut w, optimizer.t)?;
        put_u32(&mut w, optimizer.state.len() as u32)?;
        for (name, (m, v)) in &optimizer.state {
            put_str(&mut w, name)?;
            put_u32(&mut w, m.len() as u32)?;
            put_f32s(&mut w, m)?;
            put_f32s(&mut w, v)?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

/// Restores the Adam state written by [`save_optimizer`], validating every
/// entry against the model it will drive.
pub fn load_optimizer(path: &Path, model: &Model) -> Result<Adam> {
    let corrupt = |reason: String| TrainingError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let io_err = |source: io::Error| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut r = io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != OPT_MAGIC {
        return Err(corrupt("bad magic, not an optimizer sidecar".into()));
    }
    let version = get_u32(&mut r).map_err(io_err)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let hp = get_f32s(&mut r, 3).map_err(io_err)?;
    let mut opt = Adam::new(hp[0], hp[1], hp[2]);
    opt.t = get_u64(&mut r).map_err(io_err)?;
    let count = get_u32(&mut r).map_err(io_err)? as usize;
    for _ in 0..count {
        let name = get_str(&mut r, 256).map_err(io_err)?;
        let numel = get_u32(&mut r).map_err(io_err)? as usize;
        let expected = model
            .params()
            .get(&name)
            .ok_or_else(|| corrupt(format!("state for `{name}`, which the model lacks")))?
            .numel();
        if numel != expected {
            return Err(corrupt(format!(
                "state for `{name}` has {numel} values, parameter has {expected}"
            )));
        }
        let m = get_f32s(&mut r, numel).map_err(io_err)?;
        let v = get_f32s(&mut r, numel).map_err(io_err)?;
        opt.state.insert(name, (m, v));
    }
    Ok(opt)
}
