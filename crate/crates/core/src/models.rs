//! The model zoo: a 3-D ViT encoder with a linear unpatch decoder for
//! reconstruction pretraining, a classifier head over frozen embeddings, a
//! small 3-D CNN baseline and per-group tabular autoencoders.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::nncore::{self, layers, Adam, Conv3dSpec, NnError, ParamStore, Tape, Tensor, TrainConfig, Var};
use crate::rng::{self, Rng};
use crate::synthcohort::{FeatureGroup, TabularRecord};
use crate::volio::Volume;
use crate::N_CLASSES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Intensities in [0, 255] mapped to [0, 1], laid out as a [1, Z, Y, X]
/// tensor (the volume's own x-fastest order).
pub fn volume_tensor(v: &Volume) -> Tensor {
    let [x, y, z] = v.dims();
    let data = v.data().iter().map(|&s| s as f64 / 255.0).collect();
    Tensor::new(vec![1, z, y, x], data).expect("volume dims are positive")
}

/// Splits a volume buffer (x-fastest, dims [X, Y, Z]) into a
/// [tokens x p³] matrix, tokens ordered z, y, x over the patch grid.
pub fn patchify(data: &[f64], dims: [usize; 3], p: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let (gx, gy, gz) = (nx / p, ny / p, nz / p);
    let mut out = Vec::with_capacity(data.len());
    for tz in 0..gz {
        for ty in 0..gy {
            for tx in 0..gx {
                for kz in 0..p {
                    for ky in 0..p {
                        let row = tx * p + nx * (ty * p + ky + ny * (tz * p + kz));
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], dims: [usize; 3], p: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let (gx, gy, gz) = (nx / p, ny / p, nz / p);
    let mut out = vec![0.0; tokens.len()];
    let mut src = 0;
    for tz in 0..gz {
        for ty in 0..gy {
            for tx in 0..gx {
                for kz in 0..p {
                    for ky in 0..p {
                        let row = tx * p + nx * (ty * p + ky + ny * (tz * p + kz));
                        out[row..row + p].copy_from_slice(&tokens[src..src + p]);
                        src += p;
                    }
                }
            }
        }
    }
    out
}

fn softmax_rows(logits: &Tensor) -> Vec<[f64; N_CLASSES]> {
    logits
        .data()
        .chunks(N_CLASSES)
        .map(|r| {
            let mut q: [f64; N_CLASSES] = r.try_into().expect("4 logits per row");
            nncore::softmax_in_place(&mut q);
            q
        })
        .collect()
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(ModelError::Input(format!("{n} inputs but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(ModelError::Input(format!("label {l} out of range 0..{N_CLASSES}")));
    }
    Ok(())
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Mini-batch loop for models whose whole batch fits one tape. `loss`
/// builds the mean batch loss for the given row indices.
fn train_batched<F>(
    store: &mut ParamStore,
    n: usize,
    cfg: &TrainConfig,
    lr_for: impl Fn(&str) -> Option<f64>,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore, &[usize]) -> nncore::Result<Var>,
{
    cfg.validate()?;
    let adam = Adam::default();
    let mut t = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::seeded(rng::derive_indexed(cfg.seed, "epoch", epoch as u64));
        let order = shuffled(n, &mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new(true, rng::derive_indexed(cfg.seed, "dropout", t));
            let l = loss(&mut tape, store, batch)?;
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            total += value * batch.len() as f64;
            store.zero_grad();
            let grads = tape.backward(l)?;
            tape.accumulate_param_grads(&grads, store)?;
            t += 1;
            adam.step(store, t, &lr_for);
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    /// Volume dims as [X, Y, Z].
    pub vol_dims: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self { vol_dims: [32; 3], patch_size: 8, embed_dim: 64, depth: 4, heads: 4, mlp_ratio: 4, dropout_rate: 0.0 }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.vol_dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(ModelError::Config(format!(
                "patch size {p} must divide every volume dim {:?}",
                self.vol_dims
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::Config("mlp_ratio must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.vol_dims.iter().map(|d| d / self.patch_size).product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub cfg: ViTConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReconHistory {
    pub train_mse: Vec<f64>,
    pub monitor_ssim: Vec<f64>,
}

impl ReconHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,monitor_ssim\n");
        for (e, (m, q)) in self.train_mse.iter().zip(&self.monitor_ssim).enumerate() {
            s.push_str(&format!("{},{m},{q}\n", e + 1));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub subject_id: String,
    pub vector: Vec<f64>,
}

pub fn embeddings_to_csv(embeddings: &[Embedding]) -> String {
    let d = embeddings.first().map_or(0, |e| e.vector.len());
    let mut s = String::from("subject_id");
    (0..d).for_each(|i| s.push_str(&format!(",e{i}")));
    s.push('\n');
    for e in embeddings {
        s.push_str(&e.subject_id);
        e.vector.iter().for_each(|v| s.push_str(&format!(",{v}")));
        s.push('\n');
    }
    s
}

pub fn embeddings_from_csv(text: &str) -> Result<Vec<Embedding>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ModelError::Data("empty embeddings file".into()))?;
    let d = header.split(',').count().saturating_sub(1);
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut cells = l.split(',');
            let subject_id = cells.next().unwrap_or_default().to_string();
            let vector = cells
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ModelError::Data(format!("embeddings line {}: {e}", i + 2)))?;
            if vector.len() != d {
                return Err(ModelError::Data(format!("embeddings line {}: expected {d} values", i + 2)));
            }
            Ok(Embedding { subject_id, vector })
        })
        .collect()
}

pub fn build_vit(cfg: &ViTConfig, seed: u64) -> Result<VitModel> {
    cfg.validate()?;
    let mut rng = rng::seeded(rng::derive(seed, "vit-init"));
    let (d, p, t) = (cfg.embed_dim, cfg.patch_size, cfg.n_tokens());
    let mut params = ParamStore::new();
    params.insert("patch.w", nncore::init::fan_in_uniform(&[d, 1, p, p, p], p * p * p, &mut rng));
    params.insert("patch.b", Tensor::zeros(&[d]));
    params.insert("pos", nncore::init::trunc_normal(&[t, d], 0.02, &mut rng));
    for b in 0..cfg.depth {
        layers::init_transformer_block(&mut params, &format!("blk{b}"), d, cfg.mlp_ratio, &mut rng);
    }
    layers::init_layer_norm(&mut params, "norm", d);
    layers::init_linear(&mut params, "dec", d, cfg.patch_voxels(), &mut rng);
    Ok(VitModel { cfg: *cfg, params })
}

impl VitModel {
    fn check_dims(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.cfg.vol_dims {
            return Err(ModelError::Input(format!(
                "volume dims {:?} do not match model dims {:?}",
                v.dims(),
                self.cfg.vol_dims
            )));
        }
        Ok(())
    }

    /// Final normalized tokens, [tokens x d].
    pub fn encode(&self, tape: &mut Tape, x: Var) -> nncore::Result<Var> {
        let (d, t) = (self.cfg.embed_dim, self.cfg.n_tokens());
        let s = &self.params;
        let w = tape.param(s, "patch.w")?;
        let b = tape.param(s, "patch.b")?;
        let spec = Conv3dSpec { stride: self.cfg.patch_size, padding: 0 };
        let grid = tape.conv3d(x, w, b, spec)?;
        let flat = tape.reshape(grid, &[d, t])?;
        let tokens = tape.transpose(flat)?;
        let pos = tape.param(s, "pos")?;
        let mut h = tape.add(tokens, pos)?;
        for blk in 0..self.cfg.depth {
            h = layers::transformer_block(tape, s, &format!("blk{blk}"), h, self.cfg.heads, self.cfg.dropout_rate)?;
        }
        layers::layer_norm(tape, s, "norm", h)
    }

    /// Per-token patch reconstructions, [tokens x p³].
    pub fn decode(&self, tape: &mut Tape, tokens: Var) -> nncore::Result<Var> {
        layers::linear(tape, &self.params, "dec", tokens)
    }

    /// Reconstruction in [0, 1] intensity units, x-fastest.
    pub fn reconstruct(&self, v: &Volume) -> Result<Vec<f64>> {
        self.check_dims(v)?;
        let mut tape = Tape::new(false, 0);
        let x = tape.input(volume_tensor(v));
        let enc = self.encode(&mut tape, x)?;
        let dec = self.decode(&mut tape, enc)?;
        Ok(unpatchify(tape.value(dec).data(), self.cfg.vol_dims, self.cfg.patch_size))
    }

    /// Mean of the final tokens.
    pub fn embed(&self, v: &Volume) -> Result<Vec<f64>> {
        self.check_dims(v)?;
        let mut tape = Tape::new(false, 0);
        let x = tape.input(volume_tensor(v));
        let enc = self.encode(&mut tape, x)?;
        let pooled = tape.mean_rows(enc)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::to_value(self.cfg).expect("config serializes");
        Ok(self.params.save(path, meta)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let cfg: ViTConfig =
            serde_json::from_value(meta).map_err(|e| ModelError::Data(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        let reference = build_vit(&cfg, 0)?;
        for (name, p) in reference.params.iter() {
            let got = params.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(ModelError::Data(format!("parameter {name} has shape {:?}", got.shape())));
            }
        }
        Ok(Self { cfg, params })
    }
}

/// Largest odd window up to 7 that fits every dim.
pub fn ssim_window(dims: [usize; 3]) -> usize {
    let m = dims.iter().copied().min().unwrap_or(1).min(7);
    if m % 2 == 1 { m } else { m - 1 }
}

/// Trains the encoder-decoder to reconstruct `targets[i]` from
/// `inputs[i]`; pass the same slice twice for plain autoencoding. SSIM on
/// the `monitor` volumes (their own reconstructions) is recorded after
/// each epoch.
pub fn pretrain_reconstruction(
    model: &mut VitModel,
    inputs: &[Volume],
    targets: &[Volume],
    monitor: &[Volume],
    cfg: &TrainConfig,
) -> Result<ReconHistory> {
    cfg.validate()?;
    if inputs.len() != targets.len() {
        return Err(ModelError::Input(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    for v in inputs.iter().chain(targets).chain(monitor) {
        model.check_dims(v)?;
    }
    let mut history = ReconHistory::default();
    if cfg.epochs == 0 || inputs.is_empty() {
        return Ok(history);
    }
    let (dims, p) = (model.cfg.vol_dims, model.cfg.patch_size);
    let xs: Vec<Tensor> = inputs.iter().map(volume_tensor).collect();
    let ys: Vec<Tensor> = targets
        .iter()
        .map(|v| {
            let t = volume_tensor(v);
            Tensor::new(vec![model.cfg.n_tokens(), model.cfg.patch_voxels()], patchify(t.data(), dims, p))
                .expect("patch grid matches")
        })
        .collect();
    let window = ssim_window(dims);
    let monitor_targets: Vec<Vec<f64>> = monitor.iter().map(|v| volume_tensor(v).into_data()).collect();

    let adam = Adam::default();
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::seeded(rng::derive_indexed(cfg.seed, "pretrain-epoch", epoch as u64));
        let order = shuffled(xs.len(), &mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            for &i in batch {
                let mut tape = Tape::new(true, rng::derive_indexed(cfg.seed, "pretrain-dropout", t * 1024 + i as u64));
                let x = tape.input(xs[i].clone());
                let enc = model.encode(&mut tape, x)?;
                let dec = model.decode(&mut tape, enc)?;
                let loss = tape.mse(dec, &ys[i])?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                total += value;
                let grads = tape.backward(loss)?;
                tape.accumulate_param_grads(&grads, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            if !model.params.grads_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            t += 1;
            adam.step(&mut model.params, t, |_| Some(cfg.learning_rate));
        }
        history.train_mse.push(total / xs.len() as f64);
        let ssim = if monitor.is_empty() {
            f64::NAN
        } else {
            let mut s = 0.0;
            for (v, target) in monitor.iter().zip(&monitor_targets) {
                let recon = model.reconstruct(v)?;
                s += metrics::ssim3d_raw(&recon, target, dims, window, Some(1.0))?;
            }
            s / monitor.len() as f64
        };
        history.monitor_ssim.push(ssim);
        log::debug!("pretrain epoch {} mse {:.5} ssim {:.4}", epoch + 1, history.train_mse[epoch], ssim);
    }
    Ok(history)
}

pub fn extract_embeddings(model: &VitModel, subject_ids: &[String], volumes: &[Volume]) -> Result<Vec<Embedding>> {
    if subject_ids.len() != volumes.len() {
        return Err(ModelError::Input(format!("{} ids but {} volumes", subject_ids.len(), volumes.len())));
    }
    subject_ids
        .iter()
        .zip(volumes)
        .map(|(id, v)| Ok(Embedding { subject_id: id.clone(), vector: model.embed(v)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcHeadConfig {
    pub hidden: [usize; 2],
    pub train: TrainConfig,
    /// Standardize embeddings with training-set statistics first.
    pub standardize: bool,
}

impl Default for FcHeadConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 32],
            train: TrainConfig { epochs: 200, learning_rate: 1e-4, batch_size: 16, dropout_rate: 0.3, seed: 0 },
            standardize: true,
        }
    }
}

/// Column means and standard deviations; zero spread maps to 1.
fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn standardize(rows: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s).collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcHead {
    pub params: ParamStore,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub dropout_rate: f64,
    pub loss_history: Vec<f64>,
}

impl FcHead {
    /// d -> hidden[0] -> hidden[1] -> 4 with ReLU and dropout.
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize], cfg: &FcHeadConfig) -> Result<Self> {
        check_labels(labels, embeddings.len())?;
        let d = embeddings.first().map_or(0, |r| r.len());
        if d == 0 || embeddings.iter().any(|r| r.len() != d) {
            return Err(ModelError::Input("embeddings must be nonempty with equal length".into()));
        }
        let (mean, sd) = if cfg.standardize { column_stats(embeddings) } else { (vec![0.0; d], vec![1.0; d]) };
        let x = standardize(embeddings, &mean, &sd);
        let mut rng = rng::seeded(rng::derive(cfg.train.seed, "fc-init"));
        let mut params = ParamStore::new();
        let [h1, h2] = cfg.hidden;
        layers::init_linear(&mut params, "fc1", d, h1, &mut rng);
        layers::init_linear(&mut params, "fc2", h1, h2, &mut rng);
        layers::init_linear(&mut params, "out", h2, N_CLASSES, &mut rng);
        let rate = cfg.train.dropout_rate;
        let lr = cfg.train.learning_rate;
        let loss_history = train_batched(&mut params, x.len(), &cfg.train, |_| Some(lr), |tape, store, batch| {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let input = tape.input(Tensor::from_rows(&rows)?);
            let logits = Self::forward(tape, store, input, rate)?;
            tape.softmax_cross_entropy(logits, &ys)
        })?;
        Ok(Self { params, mean, sd, dropout_rate: rate, loss_history })
    }

    fn forward(tape: &mut Tape, store: &ParamStore, x: Var, rate: f64) -> nncore::Result<Var> {
        let mut h = x;
        for name in ["fc1", "fc2"] {
            h = layers::linear(tape, store, name, h)?;
            h = tape.relu(h);
            h = tape.dropout(h, rate);
        }
        layers::linear(tape, store, "out", h)
    }

    pub fn predict_proba(&self, embeddings: &[Vec<f64>]) -> Result<Vec<[f64; N_CLASSES]>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        if embeddings.iter().any(|r| r.len() != self.mean.len()) {
            return Err(ModelError::Input(format!("embeddings must have length {}", self.mean.len())));
        }
        let x = standardize(embeddings, &self.mean, &self.sd);
        let mut tape = Tape::new(false, 0);
        let input = tape.input(Tensor::from_rows(&x)?);
        let logits = Self::forward(&mut tape, &self.params, input, self.dropout_rate)?;
        Ok(softmax_rows(tape.value(logits)))
    }
}

/// Trains the head on embeddings from a frozen encoder and scores the
/// validation volumes.
pub fn train_fc_head(
    encoder: &VitModel,
    volumes: &[Volume],
    labels: &[usize],
    validation: &[Volume],
    cfg: &FcHeadConfig,
) -> Result<(FcHead, Vec<[f64; N_CLASSES]>)> {
    let before = encoder.params.checksum();
    let train: Vec<Vec<f64>> = volumes.iter().map(|v| encoder.embed(v)).collect::<Result<_>>()?;
    let val: Vec<Vec<f64>> = validation.iter().map(|v| encoder.embed(v)).collect::<Result<_>>()?;
    let head = FcHead::fit(&train, labels, cfg)?;
    let probs = head.predict_proba(&val)?;
    if encoder.params.checksum() != before {
        return Err(ModelError::Invariant("encoder parameters changed while training the head".into()));
    }
    Ok((head, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub channels: [usize; 4],
    pub backbone_lr: f64,
    pub head_lr: f64,
    /// `learning_rate` is unused; the two group rates above apply.
    pub train: TrainConfig,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32, 64],
            backbone_lr: 1e-4,
            head_lr: 1e-2,
            train: TrainConfig { epochs: 30, learning_rate: 1e-4, batch_size: 8, dropout_rate: 0.0, seed: 0 },
        }
    }
}

pub const CNN_MIN_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub cfg: CnnConfig,
    pub params: ParamStore,
    pub loss_history: Vec<f64>,
}

impl CnnModel {
    pub fn new(cfg: &CnnConfig) -> Result<Self> {
        if cfg.channels.contains(&0) {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        for (name, lr) in [("backbone_lr", cfg.backbone_lr), ("head_lr", cfg.head_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(ModelError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        let mut rng = rng::seeded(rng::derive(cfg.train.seed, "cnn-init"));
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let fan_in = cin * 27;
            params.insert(format!("backbone.conv{i}.w"), nncore::init::fan_in_uniform(&[c, cin, 3, 3, 3], fan_in, &mut rng));
            params.insert(format!("backbone.conv{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        layers::init_linear(&mut params, "head", cin, N_CLASSES, &mut rng);
        Ok(Self { cfg: cfg.clone(), params, loss_history: Vec::new() })
    }

    /// Learning rate of a parameter's group.
    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with("backbone.") {
            self.cfg.backbone_lr
        } else {
            self.cfg.head_lr
        }
    }

    /// One Adam step over both groups using the current gradients.
    pub fn optimizer_step(&mut self, t: u64) {
        let (b, h) = (self.cfg.backbone_lr, self.cfg.head_lr);
        Adam::default().step(&mut self.params, t, |name| Some(if name.starts_with("backbone.") { b } else { h }));
    }

    fn check_volume(v: &Volume) -> Result<()> {
        if v.dims().iter().any(|&d| d < CNN_MIN_DIM) {
            return Err(ModelError::Config(format!(
                "volume dims {:?} are below the {CNN_MIN_DIM}³ minimum",
                v.dims()
            )));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> nncore::Result<Var> {
        let spec = Conv3dSpec { stride: 2, padding: 1 };
        let mut h = x;
        for i in 0..self.cfg.channels.len() {
            let w = tape.param(&self.params, &format!("backbone.conv{i}.w"))?;
            let b = tape.param(&self.params, &format!("backbone.conv{i}.b"))?;
            h = tape.conv3d(h, w, b, spec)?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        layers::linear(tape, &self.params, "head", pooled)
    }

    pub fn predict_proba(&self, volumes: &[Volume]) -> Result<Vec<[f64; N_CLASSES]>> {
        volumes
            .iter()
            .map(|v| {
                Self::check_volume(v)?;
                let mut tape = Tape::new(false, 0);
                let x = tape.input(volume_tensor(v));
                let logits = self.forward(&mut tape, x)?;
                Ok(softmax_rows(tape.value(logits))[0])
            })
            .collect()
    }
}

pub fn train_cnn_baseline(volumes: &[Volume], labels: &[usize], cfg: &CnnConfig) -> Result<CnnModel> {
    cfg.train.validate()?;
    check_labels(labels, volumes.len())?;
    for v in volumes {
        CnnModel::check_volume(v)?;
    }
    let mut model = CnnModel::new(cfg)?;
    let xs: Vec<Tensor> = volumes.iter().map(volume_tensor).collect();
    let mut t = 0u64;
    for epoch in 0..cfg.train.epochs {
        let mut order_rng = rng::seeded(rng::derive_indexed(cfg.train.seed, "cnn-epoch", epoch as u64));
        let order = shuffled(xs.len(), &mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.train.batch_size) {
            model.params.zero_grad();
            for &i in batch {
                let mut tape = Tape::new(true, 0);
                let x = tape.input(xs[i].clone());
                let logits = model.forward(&mut tape, x)?;
                let loss = tape.softmax_cross_entropy(logits, &[labels[i]])?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                total += value;
                let grads = tape.backward(loss)?;
                tape.accumulate_param_grads(&grads, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            t += 1;
            model.optimizer_step(t);
        }
        model.loss_history.push(total / xs.len().max(1) as f64);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularAeConfig {
    pub hidden: usize,
    pub max_latent: usize,
    pub train: TrainConfig,
}

impl Default for TabularAeConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            max_latent: 8,
            train: TrainConfig { epochs: 300, learning_rate: 1e-2, batch_size: 32, dropout_rate: 0.0, seed: 0 },
        }
    }
}

/// min(max_latent, ceil(in_dim / 2))
pub fn latent_dim(in_dim: usize, max_latent: usize) -> usize {
    max_latent.min(in_dim.div_ceil(2)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularAutoencoder {
    pub medians: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub params: ParamStore,
    pub latent: usize,
    pub loss_history: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl TabularAutoencoder {
    /// Fits imputation, scaling and the network on training rows.
    pub fn fit(rows: &[Vec<Option<f64>>], names: &[&str], cfg: &TabularAeConfig) -> Result<Self> {
        let p = names.len();
        if p == 0 || rows.is_empty() {
            return Err(ModelError::Input("need at least one row and one feature".into()));
        }
        if rows.iter().any(|r| r.len() != p) {
            return Err(ModelError::Input(format!("every row must have {p} features")));
        }
        if cfg.hidden == 0 || cfg.max_latent == 0 {
            return Err(ModelError::Config("hidden and max_latent must be >= 1".into()));
        }
        let mut medians = Vec::with_capacity(p);
        for (j, name) in names.iter().enumerate() {
            let present: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
            if present.is_empty() {
                return Err(ModelError::Data(format!("feature column {name} is entirely missing")));
            }
            medians.push(median(present));
        }
        let imputed = impute(rows, &medians);
        let (mean, sd) = column_stats(&imputed);
        let x = standardize(&imputed, &mean, &sd);
        let latent = latent_dim(p, cfg.max_latent);
        let mut rng = rng::seeded(rng::derive(cfg.train.seed, "ae-init"));
        let mut params = ParamStore::new();
        layers::init_linear(&mut params, "enc1", p, cfg.hidden, &mut rng);
        layers::init_linear(&mut params, "enc2", cfg.hidden, latent, &mut rng);
        layers::init_linear(&mut params, "dec1", latent, cfg.hidden, &mut rng);
        layers::init_linear(&mut params, "dec2", cfg.hidden, p, &mut rng);
        let lr = cfg.train.learning_rate;
        let loss_history = train_batched(&mut params, x.len(), &cfg.train, |_| Some(lr), |tape, store, batch| {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let target = Tensor::from_rows(&rows)?;
            let input = tape.input(target.clone());
            let z = Self::encode(tape, store, input)?;
            let out = Self::decode(tape, store, z)?;
            tape.mse(out, &target)
        })?;
        Ok(Self { medians, mean, sd, params, latent, loss_history })
    }

    fn encode(tape: &mut Tape, store: &ParamStore, x: Var) -> nncore::Result<Var> {
        let h = layers::linear(tape, store, "enc1", x)?;
        let h = tape.tanh(h);
        layers::linear(tape, store, "enc2", h)
    }

    fn decode(tape: &mut Tape, store: &ParamStore, z: Var) -> nncore::Result<Var> {
        let h = layers::linear(tape, store, "dec1", z)?;
        let h = tape.tanh(h);
        layers::linear(tape, store, "dec2", h)
    }

    fn prepare(&self, rows: &[Vec<Option<f64>>]) -> Result<Tensor> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.medians.len()) {
            return Err(ModelError::Input(format!("row has {} features, expected {}", r.len(), self.medians.len())));
        }
        Ok(Tensor::from_rows(&standardize(&impute(rows, &self.medians), &self.mean, &self.sd))?)
    }

    pub fn transform(&self, rows: &[Vec<Option<f64>>]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(false, 0);
        let x = tape.input(self.prepare(rows)?);
        let z = Self::encode(&mut tape, &self.params, x)?;
        Ok(tape.value(z).rows())
    }

    /// MSE between standardized inputs and their reconstructions.
    pub fn reconstruction_mse(&self, rows: &[Vec<Option<f64>>]) -> Result<f64> {
        let target = self.prepare(rows)?;
        let mut tape = Tape::new(false, 0);
        let x = tape.input(target.clone());
        let z = Self::encode(&mut tape, &self.params, x)?;
        let out = Self::decode(&mut tape, &self.params, z)?;
        let l = tape.mse(out, &target)?;
        Ok(tape.value(l).data()[0])
    }
}

fn impute(rows: &[Vec<Option<f64>>], medians: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().zip(medians).map(|(v, m)| v.unwrap_or(*m)).collect()).collect()
}

/// Fits on the training subjects of one feature group and returns latent
/// vectors for every record.
pub fn train_tabular_autoencoder(
    records: &[TabularRecord],
    group: FeatureGroup,
    train_ids: &BTreeSet<String>,
    cfg: &TabularAeConfig,
) -> Result<(TabularAutoencoder, BTreeMap<String, Vec<f64>>)> {
    let train_rows: Vec<Vec<Option<f64>>> = records
        .iter()
        .filter(|r| train_ids.contains(&r.subject_id))
        .map(|r| r.group(group).to_vec())
        .collect();
    let names = group.feature_names();
    let ae = TabularAutoencoder::fit(&train_rows, &names, cfg)?;
    let all: Vec<Vec<Option<f64>>> = records.iter().map(|r| r.group(group).to_vec()).collect();
    let latents = ae.transform(&all)?;
    let map = records.iter().zip(latents).map(|(r, z)| (r.subject_id.clone(), z)).collect();
    Ok((ae, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vit() -> ViTConfig {
        ViTConfig { vol_dims: [16; 3], patch_size: 8, embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2, dropout_rate: 0.0 }
    }

    fn ramp(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        Volume::new(dims, [1.0; 3], (0..n).map(|i| (i % 200) as f32).collect()).unwrap()
    }

    #[test]
    fn vit_shapes_and_determinism() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.n_tokens(), 64);
        let a = build_vit(&small_vit(), 3).unwrap();
        assert_eq!(a, build_vit(&small_vit(), 3).unwrap());
        assert_ne!(a.params.checksum(), build_vit(&small_vit(), 4).unwrap().params.checksum());
        let v = ramp([16; 3]);
        assert_eq!(a.reconstruct(&v).unwrap().len(), v.len());
        assert_eq!(a.embed(&v).unwrap().len(), 16);
        assert_eq!(a.embed(&v).unwrap(), a.embed(&v).unwrap());
        assert!(matches!(a.embed(&ramp([16, 16, 8])), Err(ModelError::Input(_))));
        let bad = ViTConfig { vol_dims: [30, 32, 32], ..ViTConfig::default() };
        assert!(matches!(build_vit(&bad, 0), Err(ModelError::Config(_))));
        let bad = ViTConfig { heads: 3, ..ViTConfig::default() };
        assert!(matches!(build_vit(&bad, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn patchify_round_trip() {
        let dims = [8, 12, 4];
        let data: Vec<f64> = (0..384).map(|i| i as f64).collect();
        let p = patchify(&data, dims, 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p[4..8], &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(unpatchify(&p, dims, 4), data);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = build_vit(&small_vit(), 1).unwrap();
        let before = m.clone();
        let vols = vec![ramp([16; 3])];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let h = pretrain_reconstruction(&mut m, &vols, &vols, &vols, &cfg).unwrap();
        assert!(h.train_mse.is_empty() && h.monitor_ssim.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut m = build_vit(&small_vit(), 1).unwrap();
        let vols: Vec<Volume> = (0..2).map(|k| {
            let n = 16usize.pow(3);
            Volume::new([16; 3], [1.0; 3], (0..n).map(|i| ((i * (k + 1)) % 97) as f32 * 2.0).collect()).unwrap()
        }).collect();
        let cfg = TrainConfig { epochs: 15, learning_rate: 3e-3, batch_size: 2, dropout_rate: 0.0, seed: 0 };
        let h = pretrain_reconstruction(&mut m, &vols, &vols, &vols[..1], &cfg).unwrap();
        assert_eq!(h.train_mse.len(), 15);
        assert_eq!(h.monitor_ssim.len(), 15);
        assert!(h.train_mse[14] < h.train_mse[0]);
        let mut again = build_vit(&small_vit(), 1).unwrap();
        assert_eq!(pretrain_reconstruction(&mut again, &vols, &vols, &vols[..1], &cfg).unwrap(), h);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_vit(&small_vit(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.ckpt");
        m.save(&path).unwrap();
        assert_eq!(VitModel::load(&path).unwrap(), m);
    }

    #[test]
    fn fc_head_outputs_probabilities() {
        let emb: Vec<Vec<f64>> = (0..16).map(|i| vec![(i % 4) as f64, (i / 4) as f64, 1.0]).collect();
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let cfg = FcHeadConfig { train: TrainConfig { epochs: 3, ..FcHeadConfig::default().train }, ..FcHeadConfig::default() };
        let head = FcHead::fit(&emb, &labels, &cfg).unwrap();
        for p in head.predict_proba(&emb).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(FcHead::fit(&emb, &labels[..3], &cfg).is_err());
    }

    #[test]
    fn cnn_groups_and_limits() {
        let mut m = CnnModel::new(&CnnConfig::default()).unwrap();
        let before = m.params.clone();
        for name in before.names().map(str::to_string).collect::<Vec<_>>() {
            m.params.grad_mut(&name).unwrap().data_mut().iter_mut().for_each(|g| *g = 1.0);
        }
        m.optimizer_step(1);
        for (name, p) in m.params.iter() {
            let lr = if name.starts_with("backbone.") { 1e-4 } else { 1e-2 };
            let old = before.value(name).unwrap();
            for (a, b) in p.value.data().iter().zip(old.data()) {
                assert!(((b - a) - lr).abs() < lr * 1e-6, "{name}");
            }
        }
        let small = vec![Volume::filled([8, 16, 16], 1.0)];
        assert!(matches!(train_cnn_baseline(&small, &[0], &CnnConfig::default()), Err(ModelError::Config(_))));
    }

    #[test]
    fn tabular_ae_basics() {
        assert_eq!(latent_dim(5, 8), 3);
        assert_eq!(latent_dim(20, 8), 8);
        assert_eq!(latent_dim(1, 8), 1);
        let rows: Vec<Vec<Option<f64>>> =
            (0..20).map(|i| vec![Some(i as f64), if i % 5 == 0 { None } else { Some(2.0 * i as f64) }]).collect();
        let cfg = TabularAeConfig { train: TrainConfig { epochs: 5, ..TabularAeConfig::default().train }, ..TabularAeConfig::default() };
        let ae = TabularAutoencoder::fit(&rows, &["a", "b"], &cfg).unwrap();
        assert_eq!(ae.transform(&rows).unwrap(), ae.transform(&rows).unwrap());
        assert_eq!(ae.transform(&rows[..1]).unwrap()[0].len(), 1);
        let missing: Vec<Vec<Option<f64>>> = (0..4).map(|i| vec![Some(i as f64), None]).collect();
        let err = TabularAutoencoder::fit(&missing, &["a", "b"], &cfg).unwrap_err();
        assert!(matches!(&err, ModelError::Data(m) if m.contains("b")));
    }

    #[test]
    fn embeddings_csv_round_trip() {
        let e = vec![
            Embedding { subject_id: "S0001".into(), vector: vec![0.5, -1.25] },
            Embedding { subject_id: "S0002".into(), vector: vec![1e-3, 2.0] },
        ];
        assert_eq!(embeddings_from_csv(&embeddings_to_csv(&e)).unwrap(), e);
    }
}
