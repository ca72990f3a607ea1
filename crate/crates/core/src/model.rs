//! Encoder, projection head, and the checkpoint container glue.
//!
//! The encoder is a small staged CNN: each stage opens with a 3x3 stride-2
//! convolution + ReLU, followed by optional residual 3x3 blocks. Features
//! are the global-average-pooled output of the last stage after its ReLU;
//! probes and clustering consume those features only. The projection head
//! (linear -> relu -> linear -> l2-normalize) exists solely for the
//! contrastive loss.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, TensorEntry};
use crate::rng::RngStream;
use crate::tensorgrad::{Element, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("malformed checkpoint metadata: {0}")]
    Meta(String),
    #[error("bad input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { input_side: 64, stage_channels: vec![16, 32, 64, 128], blocks_per_stage: 1 }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("non-empty stages")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(ModelError::Config("stage_channels must be non-empty".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(ModelError::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.input_side >> self.stage_channels.len() == 0 {
            return Err(ModelError::Config(format!(
                "input side {} collapses below 1 after {} stride-2 stages",
                self.input_side,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Hidden width; 0 means "same as the encoder feature dim".
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { hidden_dim: 0, out_dim: 128 }
    }
}

impl ProjectionConfig {
    pub fn hidden(&self, feature_dim: usize) -> usize {
        if self.hidden_dim == 0 {
            feature_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(ModelError::Config(format!("out_dim {} < 2", self.out_dim)));
        }
        Ok(())
    }
}

/// One named parameter tensor. Biases are excluded from weight decay and
/// trust-ratio scaling in the optimizers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub is_bias: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub params: Vec<Param>,
}

fn he_uniform(rng: &mut RngStream, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
}

/// He-uniform weights, zero biases, deterministic in the seed.
pub fn init_model(ec: &EncoderConfig, pc: &ProjectionConfig, seed: u64) -> Result<Model> {
    ec.validate()?;
    pc.validate()?;
    let mut params = Vec::new();
    let root = RngStream::from_parts(&[seed, 0x4d4f44454c]);
    let mut push = |name: String, shape: Vec<usize>, data: Vec<f32>, is_bias: bool| {
        params.push(Param { name, shape, data, is_bias });
    };
    let mut in_ch = 3usize;
    for (si, &out_ch) in ec.stage_channels.iter().enumerate() {
        for bi in 0..ec.blocks_per_stage {
            let cin = if bi == 0 { in_ch } else { out_ch };
            let fan_in = cin * 9;
            let name = format!("enc/stage{si}/block{bi}");
            let mut rng = root.derive(&name);
            push(format!("{name}/w"), vec![out_ch, cin, 3, 3], he_uniform(&mut rng, fan_in, out_ch * cin * 9), false);
            push(format!("{name}/b"), vec![out_ch], vec![0.0; out_ch], true);
        }
        in_ch = out_ch;
    }
    let feat = ec.feature_dim();
    let hidden = pc.hidden(feat);
    let mut rng = root.derive("proj/fc1");
    push("proj/fc1/w".into(), vec![feat, hidden], he_uniform(&mut rng, feat, feat * hidden), false);
    push("proj/fc1/b".into(), vec![hidden], vec![0.0; hidden], true);
    let mut rng = root.derive("proj/fc2");
    push("proj/fc2/w".into(), vec![hidden, pc.out_dim], he_uniform(&mut rng, hidden, hidden * pc.out_dim), false);
    push("proj/fc2/b".into(), vec![pc.out_dim], vec![0.0; pc.out_dim], true);
    Ok(Model { encoder: ec.clone(), projection: pc.clone(), params })
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Put all parameters on a tape as leaves, in declaration order.
    pub fn leaf_params<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| {
                let data: Vec<T> = p.data.iter().map(|&v| T::from_f64(f64::from(v)).unwrap()).collect();
                tape.leaf(&p.shape, data, requires_grad).map_err(ModelError::from)
            })
            .collect()
    }

    /// Build the encoder forward graph. `input` must be [N, 3, S, S] with
    /// pixels already scaled to [0, 1]. Returns the pooled feature tensor.
    pub fn build_encoder<T: Element>(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[TensorId],
        input: TensorId,
    ) -> Result<TensorId> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.encoder.input_side || shape[3] != self.encoder.input_side {
            return Err(ModelError::Input(format!(
                "expected [N, 3, {side}, {side}] input, got {shape:?}",
                side = self.encoder.input_side
            )));
        }
        let mut idx = 0usize;
        let mut x = input;
        for _stage in &self.encoder.stage_channels {
            for bi in 0..self.encoder.blocks_per_stage {
                let w = param_ids[idx];
                let b = param_ids[idx + 1];
                idx += 2;
                if bi == 0 {
                    let y = tape.conv2d(x, w, b, 2, 1)?;
                    x = tape.relu(y)?;
                } else {
                    let y = tape.conv2d(x, w, b, 1, 1)?;
                    let s = tape.add(y, x)?;
                    x = tape.relu(s)?;
                }
            }
        }
        Ok(tape.global_avg_pool(x)?)
    }

    /// Projection head: linear -> relu -> linear -> row L2 normalization.
    pub fn build_projection<T: Element>(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[TensorId],
        features: TensorId,
    ) -> Result<TensorId> {
        let base = param_ids.len() - 4;
        let h = tape.linear(features, param_ids[base], param_ids[base + 1])?;
        let r = tape.relu(h)?;
        let o = tape.linear(r, param_ids[base + 2], param_ids[base + 3])?;
        Ok(tape.l2_normalize(o, 1e-12)?)
    }

    /// Inference-only encode of a pixel batch ([0,1] floats, N*3*S*S).
    pub fn encode(&self, pixels: &[f32], n: usize) -> Result<Vec<f32>> {
        let side = self.encoder.input_side;
        let mut tape = Tape::<f32>::new();
        let input = tape
            .leaf(&[n, 3, side, side], pixels.to_vec(), false)
            .map_err(ModelError::from)?;
        let ids = self.leaf_params(&mut tape, false)?;
        let feat = self.build_encoder(&mut tape, &ids, input)?;
        Ok(tape.data(feat).to_vec())
    }

    /// Inference-only encode + project.
    pub fn encode_project(&self, pixels: &[f32], n: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let side = self.encoder.input_side;
        let mut tape = Tape::<f32>::new();
        let input = tape
            .leaf(&[n, 3, side, side], pixels.to_vec(), false)
            .map_err(ModelError::from)?;
        let ids = self.leaf_params(&mut tape, false)?;
        let feat = self.build_encoder(&mut tape, &ids, input)?;
        let proj = self.build_projection(&mut tape, &ids, feat)?;
        Ok((tape.data(feat).to_vec(), tape.data(proj).to_vec()))
    }

    fn meta_entry(&self) -> TensorEntry {
        let mut meta = vec![
            self.encoder.input_side as f32,
            self.encoder.blocks_per_stage as f32,
            self.projection.hidden_dim as f32,
            self.projection.out_dim as f32,
            self.encoder.stage_channels.len() as f32,
        ];
        meta.extend(self.encoder.stage_channels.iter().map(|&c| c as f32));
        TensorEntry::new("meta", &[meta.len()], meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = vec![self.meta_entry()];
        for p in &self.params {
            entries.push(TensorEntry::new(&p.name, &p.shape, p.data.clone()));
        }
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let entries = checkpoint::load(path)?;
        let meta = checkpoint::find(&entries, "meta")?;
        if meta.data.len() < 6 {
            return Err(ModelError::Meta("meta entry too short".into()));
        }
        let n_stages = meta.data[4] as usize;
        if meta.data.len() != 5 + n_stages {
            return Err(ModelError::Meta("meta entry length mismatch".into()));
        }
        let ec = EncoderConfig {
            input_side: meta.data[0] as usize,
            stage_channels: meta.data[5..].iter().map(|&v| v as usize).collect(),
            blocks_per_stage: meta.data[1] as usize,
        };
        let pc = ProjectionConfig { hidden_dim: meta.data[2] as usize, out_dim: meta.data[3] as usize };
        // reconstruct the canonical parameter list, pulling entries by name
        let skeleton = init_model(&ec, &pc, 0)?;
        let mut params = Vec::with_capacity(skeleton.params.len());
        for p in &skeleton.params {
            let e = checkpoint::find(&entries, &p.name)?;
            if e.dims != p.shape {
                return Err(ModelError::Meta(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    p.name, e.dims, p.shape
                )));
            }
            params.push(Param { name: p.name.clone(), shape: p.shape.clone(), data: e.data.clone(), is_bias: p.is_bias });
        }
        Ok(Model { encoder: ec, projection: pc, params })
    }
}

/// Scale interleaved RGB patches into a [N, 3, S, S] float tensor in [0, 1].
pub fn patches_to_tensor(patches: &[&crate::imaging::ImagePatch]) -> Vec<f32> {
    let n = patches.len();
    if n == 0 {
        return Vec::new();
    }
    let side = patches[0].width;
    let plane = side * side;
    let mut out = vec![0.0f32; n * 3 * plane];
    for (i, p) in patches.iter().enumerate() {
        debug_assert_eq!((p.width, p.height), (side, side));
        for (px, chunk) in p.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[(i * 3 + c) * plane + px] = f32::from(chunk[c]) / 255.0;
            }
        }
    }
    out
}
