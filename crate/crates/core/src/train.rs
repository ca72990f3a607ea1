//! Contrastive pretraining loop: augment -> encode -> project -> NT-Xent.
//!
//! Determinism contract: every random draw is keyed off
//! (seed, epoch, sample index, view index) through counter-based streams, so
//! the loss trace is bitwise identical across reruns and across any number
//! of augmentation workers. The optimizer step itself is sequential.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_view, AugmentConfig};
use crate::imaging::ImagePatch;
use crate::model::{patches_to_tensor, Model, ModelError};
use crate::optim::{OptimConfig, OptimError, Optimizer};
use crate::rng::RngStream;
use crate::tensorgrad::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid pretraining config: {0}")]
    Config(String),
    #[error("need at least {need} source images for batch size {batch}, got {got}")]
    TooFewImages { need: usize, batch: usize, got: usize },
    #[error("patch side {got} does not match model input side {expected}")]
    PatchSide { got: usize, expected: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}; last checkpoint retained")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("augmentation failed: {0}")]
    Augment(#[from] crate::imaging::ImagingError),
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Total views per optimization step (2N); must be even.
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub optimizer: OptimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 512,
            temperature: 0.1,
            epochs: 50,
            optimizer: OptimConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(TrainError::Config(format!("batch_size {} must be even and >= 2", self.batch_size)));
        }
        // rejects NaN as well as non-positive values
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TrainError::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        self.augment.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Mean NT-Xent loss per epoch, in epoch order (1-based epoch numbers).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn first_mean(&self) -> Option<f64> {
        self.rows.first().map(|&(_, l)| l)
    }
    pub fn last_mean(&self) -> Option<f64> {
        self.rows.last().map(|&(_, l)| l)
    }
}

/// CSV export: header `epoch,mean_loss`, 9 significant digits per loss.
pub fn loss_trace_export(trace: &LossTrace, path: &Path) -> Result<()> {
    std::fs::write(path, loss_trace_csv(trace))
        .map_err(|source| TrainError::Write { path: path.display().to_string(), source })
}

pub fn loss_trace_csv(trace: &LossTrace) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for &(epoch, loss) in &trace.rows {
        let _ = writeln!(out, "{epoch},{loss:.8e}");
    }
    out
}

fn checkpoint_path(dir: &Path, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("epoch_{e:04}.sslh")),
        None => dir.join("final.sslh"),
    }
}

/// Build the two augmented views for each sampled source image, in parallel.
/// Per-sample RNG streams make the result independent of worker count.
fn build_views(
    patches: &[ImagePatch],
    order: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<Vec<ImagePatch>> {
    let pairs: Vec<(ImagePatch, ImagePatch)> = order
        .par_iter()
        .map(|&idx| {
            let mut r0 = RngStream::for_sample(cfg.seed, epoch as u64, idx as u64, 0);
            let mut r1 = RngStream::for_sample(cfg.seed, epoch as u64, idx as u64, 1);
            let a = make_view(&patches[idx], &cfg.augment, &mut r0)?;
            let b = make_view(&patches[idx], &cfg.augment, &mut r1)?;
            Ok::<_, crate::imaging::ImagingError>((a, b))
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut views = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in pairs {
        views.push(a);
        views.push(b);
    }
    Ok(views)
}

/// One forward/backward pass over a prepared view batch. Returns the loss
/// and per-parameter gradients in model parameter order.
pub fn batch_step(model: &Model, views: &[ImagePatch], temperature: f64) -> Result<(f64, Vec<Vec<f32>>)> {
    let side = model.encoder.input_side;
    for v in views {
        if v.width != side || v.height != side {
            return Err(TrainError::PatchSide { got: v.width, expected: side });
        }
    }
    let refs: Vec<&ImagePatch> = views.iter().collect();
    let pixels = patches_to_tensor(&refs);
    let mut tape = Tape::<f32>::new();
    let input = tape.leaf(&[views.len(), 3, side, side], pixels, false).map_err(TrainError::from)?;
    let ids = model.leaf_params(&mut tape, true)?;
    let feat = model.build_encoder(&mut tape, &ids, input)?;
    let proj = model.build_projection(&mut tape, &ids, feat)?;
    let loss_id = tape.nt_xent(proj, temperature)?;
    let loss = f64::from(tape.data(loss_id)[0]);
    tape.backward(loss_id)?;
    let grads = ids
        .iter()
        .zip(&model.params)
        .map(|(&id, p)| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]))
        .collect();
    Ok((loss, grads))
}

/// Run the pretraining loop, mutating `model` in place. When `out_dir` is
/// set, checkpoints are written every `checkpoint_every` epochs plus a final
/// one; on a non-finite loss the run aborts with the last checkpoint intact.
pub fn pretrain(model: &mut Model, patches: &[ImagePatch], cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<LossTrace> {
    cfg.validate()?;
    let n_sources = cfg.batch_size / 2;
    if patches.len() < n_sources {
        return Err(TrainError::TooFewImages { need: n_sources, batch: cfg.batch_size, got: patches.len() });
    }
    let side = model.encoder.input_side;
    if let Some(p) = patches.iter().find(|p| p.width != side || p.height != side) {
        return Err(TrainError::PatchSide { got: p.width, expected: side });
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.batch_size)?;
    let mut trace = LossTrace::default();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        let mut shuffle_rng = RngStream::from_parts(&[cfg.seed, 0x45504f4348, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_losses = Vec::new();
        // drop the last incomplete batch: the loss normalization assumes 2N
        for (step, batch) in order.chunks_exact(n_sources).enumerate() {
            let views = build_views(patches, batch, cfg, epoch)?;
            let (loss, grads) = batch_step(model, &views, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            opt.step(&mut model.params, &grads)?;
            epoch_losses.push(loss);
        }
        if !epoch_losses.is_empty() {
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            trace.rows.push((epoch, mean));
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                model.save(&checkpoint_path(dir, Some(epoch)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.save(&checkpoint_path(dir, None))?;
    }
    Ok(trace)
}
