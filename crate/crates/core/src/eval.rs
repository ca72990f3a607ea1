//! Downstream evaluation: stratified splits, label-fraction subsampling,
//! macro-F1 / mean-L1 metrics, frozen linear probes, full fine-tuning, and
//! label-percentage sweeps.
//!
//! Model selection follows a max-validation rule: every epoch the head (or
//! full model) is scored on the validation part, and the test metric at the
//! best-validation epoch is reported, with ties going to the earliest epoch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImagePatch;
use crate::model::{patches_to_tensor, Model, ModelError, Param};
use crate::optim::{OptimConfig, OptimError, Optimizer, OptimizerKind};
use crate::rng::RngStream;
use crate::tensorgrad::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("prediction/truth length mismatch: {preds} vs {truth}")]
    LengthMismatch { preds: usize, truth: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Task labels for one dataset, parallel to its patch list.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class indices in [0, k).
    Classes { labels: Vec<usize>, k: usize },
    /// Regression targets (e.g. percentages in [0, 100]).
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if let Labels::Classes { labels, k } = self {
            if *k == 0 {
                return Err(EvalError::Input("classification needs k >= 1".into()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= *k) {
                return Err(EvalError::Input(format!("label {bad} out of range for k={k}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.50, val_fraction: 0.25, stratified: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Non-fatal notes, e.g. classes too small to stratify.
    pub warnings: Vec<String>,
}

fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && (r as i64) % 2 != 0 {
        r - x.signum()
    } else {
        r
    }
}

/// Largest-remainder apportionment of `target` items across groups with
/// per-group quotas and capacities. Ties go to the lower group index.
fn apportion(quotas: &[f64], caps: &[usize], target: usize) -> Vec<usize> {
    let mut take: Vec<usize> = quotas.iter().zip(caps).map(|(q, &c)| (q.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = take.iter().sum();
    while assigned < target {
        let mut progressed = false;
        for &g in &order {
            if assigned == target {
                break;
            }
            if take[g] < caps[g] {
                take[g] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    take
}

/// Partition item indices into train/val/test. With stratification, every
/// class with at least 4 members forms its own group; smaller classes are
/// pooled into one group, with a warning. Exact global part sizes
/// round(n*fraction) are apportioned across groups by largest remainder.
pub fn split(labels: &Labels, spec: &SplitSpec) -> Result<Split> {
    labels.validate()?;
    let n = labels.len();
    if n < 8 {
        return Err(EvalError::Input(format!("need at least 8 items to split, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.val_fraction > 0.0 && spec.train_fraction + spec.val_fraction < 1.0) {
        return Err(EvalError::Input("split fractions must be positive and sum below 1".into()));
    }
    let mut out = Split { train: vec![], val: vec![], test: vec![], warnings: vec![] };
    let root = RngStream::from_parts(&[spec.seed, 0x53504c4954]);
    // build the stratification groups
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    match labels {
        Labels::Classes { labels, k } if spec.stratified => {
            let mut pooled: Vec<usize> = Vec::new();
            for class in 0..*k {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                if members.len() < 4 {
                    out.warnings.push(format!(
                        "class {class} has only {} members; splitting it unstratified",
                        members.len()
                    ));
                    pooled.extend(members);
                } else {
                    groups.push((format!("class{class}"), members));
                }
            }
            if !pooled.is_empty() {
                groups.push(("pooled".into(), pooled));
            }
        }
        _ => groups.push(("all".into(), (0..n).collect())),
    }
    let sizes: Vec<usize> = groups.iter().map(|(_, g)| g.len()).collect();
    let t_train = (round_half_even(n as f64 * spec.train_fraction) as usize).min(n);
    let t_val = (round_half_even(n as f64 * spec.val_fraction) as usize).min(n - t_train);
    let train_quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * spec.train_fraction).collect();
    let train_take = apportion(&train_quotas, &sizes, t_train);
    let val_caps: Vec<usize> = sizes.iter().zip(&train_take).map(|(&s, &t)| s - t).collect();
    let val_quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * spec.val_fraction).collect();
    let val_take = apportion(&val_quotas, &val_caps, t_val);
    for (gi, (name, members)) in groups.into_iter().enumerate() {
        let mut members = members;
        let mut rng = root.derive(&name);
        rng.shuffle(&mut members);
        let (tr, va) = (train_take[gi], val_take[gi]);
        out.train.extend(&members[..tr]);
        out.val.extend(&members[tr..tr + va]);
        out.test.extend(&members[tr + va..]);
    }
    Ok(out)
}

/// Stratified subset of the training indices with total size
/// round(n * percent / 100), at least one item per represented class.
/// Distinct `run_index` values draw distinct subsets.
pub fn subsample_labels(train: &[usize], labels: &Labels, percent: f64, run_index: usize, seed: u64) -> Result<Vec<usize>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(EvalError::Input(format!("percent {percent} outside (0, 100]")));
    }
    if percent == 100.0 {
        return Ok(train.to_vec());
    }
    let target = (round_half_even(train.len() as f64 * percent / 100.0) as usize).min(train.len());
    let root = RngStream::from_parts(&[seed, 0x53554253, run_index as u64]);
    match labels {
        Labels::Values(_) => {
            let mut rng = root.derive("values");
            let picks = rng.sample_without_replacement(train.len(), target.max(1));
            Ok(picks.into_iter().map(|i| train[i]).collect())
        }
        Labels::Classes { labels, k } => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); *k];
            for &i in train {
                by_class[labels[i]].push(i);
            }
            // largest-remainder apportionment of the target across classes,
            // then a floor of one per represented class
            let quotas: Vec<f64> =
                by_class.iter().map(|m| m.len() as f64 * percent / 100.0).collect();
            let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
            let mut remaining = target.saturating_sub(take.iter().sum::<usize>());
            let mut order: Vec<usize> = (0..*k).collect();
            order.sort_by(|&a, &b| {
                let fa = quotas[a] - quotas[a].floor();
                let fb = quotas[b] - quotas[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for &c in &order {
                if remaining == 0 {
                    break;
                }
                if take[c] < by_class[c].len() {
                    take[c] += 1;
                    remaining -= 1;
                }
            }
            for c in 0..*k {
                if !by_class[c].is_empty() && take[c] == 0 {
                    take[c] = 1;
                }
                take[c] = take[c].min(by_class[c].len());
            }
            let mut out = Vec::new();
            for c in 0..*k {
                if take[c] == 0 {
                    continue;
                }
                let mut rng = root.derive(&format!("class{c}"));
                let picks = rng.sample_without_replacement(by_class[c].len(), take[c]);
                out.extend(picks.into_iter().map(|i| by_class[c][i]));
            }
            out.sort_unstable();
            Ok(out)
        }
    }
}

/// Macro-averaged F1 over `k` classes. Per class, precision = tp/(tp+fp)
/// and recall = tp/(tp+fn); any zero denominator contributes 0 for that
/// class, and classes absent from both vectors still count in the mean.
pub fn macro_f1(preds: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truth: truth.len() });
    }
    if k == 0 {
        return Err(EvalError::Input("k must be >= 1".into()));
    }
    if let Some(&bad) = preds.iter().chain(truth).find(|&&l| l >= k) {
        return Err(EvalError::Input(format!("label {bad} out of range for k={k}")));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &t) in preds.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        let prec = if tp[c] + fp[c] > 0 { tp[c] as f64 / (tp[c] + fp[c]) as f64 } else { 0.0 };
        let rec = if tp[c] + fn_[c] > 0 { tp[c] as f64 / (tp[c] + fn_[c]) as f64 } else { 0.0 };
        if prec + rec > 0.0 {
            total += 2.0 * prec * rec / (prec + rec);
        }
    }
    Ok(total / k as f64)
}

/// Mean absolute difference between predictions and ground truth.
pub fn l1_error(preds: &[f64], truth: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(EvalError::Input("l1_error needs at least one pair".into()));
    }
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truth: truth.len() });
    }
    Ok(preds.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    LinearProbe,
    FineTune,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mode: EvalMode::LinearProbe,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

/// Outcome of one probe or fine-tune run. `history` holds the
/// (validation, test) metric per evaluation point; index 0 is the untrained
/// head, index e is after epoch e.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric_name: String,
    pub best_epoch: usize,
    pub val_metric: f64,
    pub test_metric: f64,
    pub history: Vec<(f64, f64)>,
}

/// Row-major feature matrix (one row per item).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }
}

/// Encode every patch with the frozen model, in bounded chunks.
pub fn encode_features(model: &Model, patches: &[ImagePatch]) -> Result<FeatureMatrix> {
    let d = model.feature_dim();
    let mut data = Vec::with_capacity(patches.len() * d);
    for chunk in patches.chunks(128) {
        let refs: Vec<&ImagePatch> = chunk.iter().collect();
        let pixels = patches_to_tensor(&refs);
        data.extend(model.encode(&pixels, chunk.len())?);
    }
    Ok(FeatureMatrix { n: patches.len(), d, data })
}

fn head_dims(labels: &Labels) -> usize {
    match labels {
        Labels::Classes { k, .. } => *k,
        Labels::Values(_) => 1,
    }
}

fn head_params(d: usize, out: usize) -> Vec<Param> {
    vec![
        Param { name: "head/w".into(), shape: vec![d, out], data: vec![0.0; d * out], is_bias: false },
        Param { name: "head/b".into(), shape: vec![out], data: vec![0.0; out], is_bias: true },
    ]
}

fn head_loss(
    tape: &mut Tape<f32>,
    logits: TensorId,
    labels: &Labels,
    indices: &[usize],
) -> Result<TensorId> {
    match labels {
        Labels::Classes { labels, .. } => {
            let targets: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            Ok(tape.softmax_cross_entropy(logits, &targets)?)
        }
        Labels::Values(values) => {
            let targets: Vec<f64> = indices.iter().map(|&i| values[i]).collect();
            Ok(tape.l1_loss(logits, &targets)?)
        }
    }
}

fn predict_from_logits(logits: &[f32], out: usize, labels: &Labels) -> (Vec<usize>, Vec<f64>) {
    match labels {
        Labels::Classes { .. } => {
            let preds = logits
                .chunks_exact(out)
                .map(|row| {
                    let mut best = 0usize;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            (preds, Vec::new())
        }
        Labels::Values(_) => (Vec::new(), logits.iter().map(|&v| f64::from(v)).collect()),
    }
}

/// Score a set of logits. Returns (selection metric, reported metric): the
/// selection metric is maximized (negated L1 for regression).
fn score(logits: &[f32], out: usize, labels: &Labels, indices: &[usize]) -> Result<(f64, f64)> {
    let (class_preds, value_preds) = predict_from_logits(logits, out, labels);
    match labels {
        Labels::Classes { labels, k } => {
            let truth: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            let f1 = macro_f1(&class_preds, &truth, *k)?;
            Ok((f1, f1))
        }
        Labels::Values(values) => {
            let truth: Vec<f64> = indices.iter().map(|&i| values[i]).collect();
            let l1 = l1_error(&value_preds, &truth)?;
            Ok((-l1, l1))
        }
    }
}

fn metric_name(labels: &Labels) -> &'static str {
    match labels {
        Labels::Classes { .. } => "macro_f1",
        Labels::Values(_) => "l1",
    }
}

fn head_logits(feat: &FeatureMatrix, indices: &[usize], head: &[Param]) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&[indices.len(), feat.d], feat.gather(indices), false)?;
    let w = tape.leaf(&head[0].shape, head[0].data.clone(), false)?;
    let b = tape.leaf(&head[1].shape, head[1].data.clone(), false)?;
    let logits = tape.linear(x, w, b)?;
    Ok(tape.data(logits).to_vec())
}

/// Train a linear head on frozen, precomputed features.
pub fn fit_linear_head(
    feat: &FeatureMatrix,
    labels: &Labels,
    sp: &Split,
    train_subset: &[usize],
    proto: &EvalProtocol,
) -> Result<EvalReport> {
    labels.validate()?;
    if train_subset.is_empty() || sp.val.is_empty() || sp.test.is_empty() {
        return Err(EvalError::Input("every split part must be non-empty".into()));
    }
    let out = head_dims(labels);
    let mut head = head_params(feat.d, out);
    let mut opt = Optimizer::new(
        OptimConfig {
            kind: OptimizerKind::Adam,
            learning_rate: proto.learning_rate,
            weight_decay: proto.weight_decay,
            ..OptimConfig::default()
        },
        proto.batch_size,
    )?;
    let mut history = Vec::with_capacity(proto.epochs + 1);
    let eval_point = |head: &[Param]| -> Result<(f64, f64, f64)> {
        let (val_sel, val_rep) = score(&head_logits(feat, &sp.val, head)?, out, labels, &sp.val)?;
        let (_, test_rep) = score(&head_logits(feat, &sp.test, head)?, out, labels, &sp.test)?;
        Ok((val_sel, val_rep, test_rep))
    };
    let (sel0, v, t) = eval_point(&head)?;
    let mut best = (sel0, 0usize);
    history.push((v, t));
    for epoch in 1..=proto.epochs {
        let mut order = train_subset.to_vec();
        let mut rng = RngStream::from_parts(&[proto.seed, 0x4845414432, epoch as u64]);
        rng.shuffle(&mut order);
        for batch in order.chunks(proto.batch_size) {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(&[batch.len(), feat.d], feat.gather(batch), false)?;
            let w = tape.leaf(&head[0].shape, head[0].data.clone(), true)?;
            let b = tape.leaf(&head[1].shape, head[1].data.clone(), true)?;
            let logits = tape.linear(x, w, b)?;
            let loss = head_loss(&mut tape, logits, labels, batch)?;
            tape.backward(loss)?;
            let grads = vec![tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec()];
            opt.step(&mut head, &grads)?;
        }
        let (s, v, t) = eval_point(&head)?;
        history.push((v, t));
        if s > best.0 {
            best = (s, epoch);
        }
    }
    let best_epoch = best.1;
    Ok(EvalReport {
        metric_name: metric_name(labels).into(),
        best_epoch,
        val_metric: history[best_epoch].0,
        test_metric: history[best_epoch].1,
        history,
    })
}

fn val_rep_from_sel(sel: f64, labels: &Labels) -> f64 {
    match labels {
        Labels::Classes { .. } => sel,
        Labels::Values(_) => -sel,
    }
}

/// Frozen-encoder linear probe: features are computed once, then a single
/// linear layer is trained on them.
pub fn linear_probe(
    model: &Model,
    patches: &[ImagePatch],
    labels: &Labels,
    sp: &Split,
    train_subset: &[usize],
    proto: &EvalProtocol,
) -> Result<EvalReport> {
    let feat = encode_features(model, patches)?;
    fit_linear_head(&feat, labels, sp, train_subset, proto)
}

fn model_logits(model: &Model, head: &[Param], patches: &[ImagePatch], indices: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in indices.chunks(128) {
        let refs: Vec<&ImagePatch> = chunk.iter().map(|&i| &patches[i]).collect();
        let pixels = patches_to_tensor(&refs);
        let side = model.encoder.input_side;
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&[chunk.len(), 3, side, side], pixels, false)?;
        let ids = model.leaf_params(&mut tape, false)?;
        let f = model.build_encoder(&mut tape, &ids, x)?;
        let w = tape.leaf(&head[0].shape, head[0].data.clone(), false)?;
        let b = tape.leaf(&head[1].shape, head[1].data.clone(), false)?;
        let logits = tape.linear(f, w, b)?;
        out.extend_from_slice(tape.data(logits));
    }
    Ok(out)
}

/// Fine-tune: all encoder parameters train together with a fresh head.
/// The input `model` is not mutated; the trained copy is discarded after
/// metrics are taken, matching the probe's report-only contract.
pub fn fine_tune(
    model: &Model,
    patches: &[ImagePatch],
    labels: &Labels,
    sp: &Split,
    train_subset: &[usize],
    proto: &EvalProtocol,
) -> Result<EvalReport> {
    labels.validate()?;
    if train_subset.is_empty() || sp.val.is_empty() || sp.test.is_empty() {
        return Err(EvalError::Input("every split part must be non-empty".into()));
    }
    let mut m = model.clone();
    let out = head_dims(labels);
    let mut head = head_params(m.feature_dim(), out);
    let n_enc = m.params.len() - 4; // projection head params are not tuned
    let mut opt = Optimizer::new(
        OptimConfig {
            kind: OptimizerKind::Adam,
            learning_rate: proto.learning_rate,
            weight_decay: proto.weight_decay,
            ..OptimConfig::default()
        },
        proto.batch_size,
    )?;
    let side = m.encoder.input_side;
    let mut history = Vec::with_capacity(proto.epochs + 1);
    let eval_point = |m: &Model, head: &[Param]| -> Result<(f64, f64, f64)> {
        let (vs, _) = score(&model_logits(m, head, patches, &sp.val)?, out, labels, &sp.val)?;
        let (_, tr) = score(&model_logits(m, head, patches, &sp.test)?, out, labels, &sp.test)?;
        Ok((vs, val_rep_from_sel(vs, labels), tr))
    };
    let (sel0, v0, t0) = eval_point(&m, &head)?;
    let mut best = (sel0, 0usize);
    history.push((v0, t0));
    for epoch in 1..=proto.epochs {
        let mut order = train_subset.to_vec();
        let mut rng = RngStream::from_parts(&[proto.seed, 0x46494e45, epoch as u64]);
        rng.shuffle(&mut order);
        for batch in order.chunks(proto.batch_size) {
            let refs: Vec<&ImagePatch> = batch.iter().map(|&i| &patches[i]).collect();
            let pixels = patches_to_tensor(&refs);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(&[batch.len(), 3, side, side], pixels, false)?;
            let ids = m.leaf_params(&mut tape, true)?;
            let f = m.build_encoder(&mut tape, &ids, x)?;
            let w = tape.leaf(&head[0].shape, head[0].data.clone(), true)?;
            let b = tape.leaf(&head[1].shape, head[1].data.clone(), true)?;
            let logits = tape.linear(f, w, b)?;
            let loss = head_loss(&mut tape, logits, labels, batch)?;
            tape.backward(loss)?;
            // encoder params + head in one optimizer step
            let mut trained: Vec<Param> = m.params[..n_enc].to_vec();
            trained.extend_from_slice(&head);
            let mut grads: Vec<Vec<f32>> = ids[..n_enc]
                .iter()
                .zip(&m.params[..n_enc])
                .map(|(&id, p)| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]))
                .collect();
            grads.push(tape.grad(w).unwrap().to_vec());
            grads.push(tape.grad(b).unwrap().to_vec());
            opt.step(&mut trained, &grads)?;
            let head_start = trained.len() - 2;
            m.params[..n_enc].clone_from_slice(&trained[..head_start]);
            head.clone_from_slice(&trained[head_start..]);
        }
        let (s, v, t) = eval_point(&m, &head)?;
        history.push((v, t));
        if s > best.0 {
            best = (s, epoch);
        }
    }
    let best_epoch = best.1;
    Ok(EvalReport {
        metric_name: metric_name(labels).into(),
        best_epoch,
        val_metric: history[best_epoch].0,
        test_metric: history[best_epoch].1,
        history,
    })
}

/// One raw sweep measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub init: String,
    pub mode: String,
    pub percent: f64,
    pub run: usize,
    pub split_seed: u64,
    pub metric_name: String,
    pub value: f64,
}

/// Mean/std aggregate over the repeats of one (init, percent) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub init: String,
    pub mode: String,
    pub percent: f64,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than 2 values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Label-percentage sweep: for every (init, percent) cell, run `repeats`
/// evaluations on distinct label subsets and aggregate mean/std. The split
/// is fixed; only the labeled subset is resampled per repeat.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    inits: &[(String, Model)],
    patches: &[ImagePatch],
    labels: &Labels,
    sp: &Split,
    split_seed: u64,
    proto: &EvalProtocol,
    percents: &[f64],
    repeats: usize,
) -> Result<SweepTable> {
    if inits.is_empty() || percents.is_empty() || repeats == 0 {
        return Err(EvalError::Input("sweep needs inits, percents, and repeats >= 1".into()));
    }
    let mode = match proto.mode {
        EvalMode::LinearProbe => "linear_probe",
        EvalMode::FineTune => "fine_tune",
    };
    let mut table = SweepTable::default();
    for (init_name, model) in inits {
        // probe features depend only on the init, not the cell
        let feat =
            if proto.mode == EvalMode::LinearProbe { Some(encode_features(model, patches)?) } else { None };
        for &percent in percents {
            let mut values = Vec::with_capacity(repeats);
            for run in 0..repeats {
                let subset = subsample_labels(&sp.train, labels, percent, run, proto.seed)?;
                let report = match &feat {
                    Some(f) => fit_linear_head(f, labels, sp, &subset, proto)?,
                    None => fine_tune(model, patches, labels, sp, &subset, proto)?,
                };
                values.push(report.test_metric);
                table.rows.push(SweepRow {
                    init: init_name.clone(),
                    mode: mode.into(),
                    percent,
                    run,
                    split_seed,
                    metric_name: report.metric_name.clone(),
                    value: report.test_metric,
                });
            }
            let (mean, std) = mean_std(&values);
            table.aggregates.push(SweepAggregate {
                init: init_name.clone(),
                mode: mode.into(),
                percent,
                metric_name: metric_name(labels).into(),
                mean,
                std,
            });
        }
    }
    Ok(table)
}
