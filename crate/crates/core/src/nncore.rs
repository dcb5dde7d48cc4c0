//! A small dense-tensor engine with tape-based reverse-mode gradients.
//!
//! A [`Tape`] records one forward pass. Parameters are pulled in by name
//! from a [`ParamStore`]; after [`Tape::backward`] their gradients are
//! added into the store and an optimizer step consumes them. Everything is
//! 64-bit and single-threaded, so a pass is a pure function of parameters,
//! inputs and the tape seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, NnError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(NnError::Shape { op, detail })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err("tensor", format!("zero-sized axis in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return shape_err("from_rows", "ragged rows".into());
        }
        Self::new(vec![rows.len(), m], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        let (_, c) = self.dims2().expect("rows() needs a 2-D tensor");
        self.data.chunks(c).map(|r| r.to_vec()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Matrix kernels over row-major slices. All accumulate into `c`.
pub mod kernels {
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut acc = [0.0f64; 4];
        let chunks = n / 4;
        for c in 0..chunks {
            let i = 4 * c;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in 4 * chunks..n {
            s += a[i] * b[i];
        }
        s
    }

    #[inline]
    fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
        let m = y.len();
        let (x0, x1, x2, x3) = (&x[0][..m], &x[1][..m], &x[2][..m], &x[3][..m]);
        for j in 0..m {
            y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
        }
    }

    #[inline]
    fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        for (y, x) in y.iter_mut().zip(x) {
            *y += alpha * x;
        }
    }

    /// c[n x m] += a[n x k] * b[k x m]
    pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        let row = |p: usize| &b[p * m..(p + 1) * m];
        for i in 0..n {
            let ai = &a[i * k..(i + 1) * k];
            let ci = &mut c[i * m..(i + 1) * m];
            let mut p = 0;
            while p + 4 <= k {
                let s = [ai[p], ai[p + 1], ai[p + 2], ai[p + 3]];
                if s != [0.0; 4] {
                    axpy4(s, [row(p), row(p + 1), row(p + 2), row(p + 3)], ci);
                }
                p += 4;
            }
            for p in p..k {
                if ai[p] != 0.0 {
                    axpy(ai[p], row(p), ci);
                }
            }
        }
    }

    /// c[n x m] += a[n x k] * b[m x k]^T
    pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..m {
                c[i * m + j] += dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// c[k x m] += a[n x k]^T * b[n x m]
    pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
        let row = |i: usize| &b[i * m..(i + 1) * m];
        for p in 0..k {
            let cp = &mut c[p * m..(p + 1) * m];
            let mut i = 0;
            while i + 4 <= n {
                let s = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
                if s != [0.0; 4] {
                    axpy4(s, [row(i), row(i + 1), row(i + 2), row(i + 3)], cp);
                }
                i += 4;
            }
            for i in i..n {
                let s = a[i * k + p];
                if s != 0.0 {
                    axpy(s, row(i), cp);
                }
            }
        }
    }
}

use kernels::{gemm_nn, gemm_nt, gemm_tn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Self { value, grad: z.clone(), m: z.clone(), v: z }
    }
}

/// Named parameters with gradient buffers and Adam moments, iterated in
/// name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.values().all(|p| p.grad.is_finite())
    }

    /// Order-sensitive FNV-1a digest over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in &self.params {
            eat(name.as_bytes());
            for v in &p.value.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, encode_checkpoint(self, meta)).map_err(|e| NnError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NnError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        decode_checkpoint(&bytes).map_err(|detail| NnError::Checkpoint {
            path: path.display().to_string(),
            detail,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the blob from the start of the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Layout: magic (8) | version u32 | manifest length u64 | manifest JSON |
/// f64 little-endian blobs in name order.
pub fn encode_checkpoint(store: &ParamStore, meta: serde_json::Value) -> Vec<u8> {
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(name, p)| {
            let e = ManifestEntry { name: name.to_string(), shape: p.value.shape.clone(), offset };
            offset += 8 * p.value.numel();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { version: CHECKPOINT_VERSION, params, meta })
        .expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + manifest.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, p) in store.iter() {
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ParamStore, serde_json::Value), String> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + mlen).ok_or("truncated manifest")?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    let payload = &bytes[20 + mlen..];
    let mut store = ParamStore::new();
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        let blob = payload
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| format!("truncated blob for {}", e.name))?;
        let data = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(e.name, Tensor::new(e.shape, data).map_err(|e| e.to_string())?);
    }
    Ok((store, manifest.meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected update at step `t` (1-based). `lr_for` returns the
    /// learning rate of a parameter, or `None` to leave it untouched.
    pub fn step(&self, store: &mut ParamStore, t: u64, lr_for: impl Fn(&str) -> Option<f64>) {
        let t = t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.params.iter_mut() {
            let Some(lr) = lr_for(name) else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                let m = b1 * p.m.data[i] + (1.0 - b1) * g;
                let v = b2 * p.v.data[i] + (1.0 - b2) * g * g;
                p.m.data[i] = m;
                p.v.data[i] = v;
                p.value.data[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Adam over every parameter with a single learning rate.
pub fn adam_step(store: &mut ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64) {
    Adam { beta1, beta2, eps }.step(store, t, |_| Some(lr));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1e-4, batch_size: 4, dropout_rate: 0.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Conv3d { x: Var, w: Var, b: Var, spec: Conv3dSpec, cols: Vec<f64>, geo: ConvGeometry },
    GlobalAvgPool(Var),
    Mse(Var, Tensor),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSum(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    rng: Rng,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    cin: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    cout: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.out.iter().product()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn im2col(x: &[f64], g: &ConvGeometry, spec: Conv3dSpec) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.positions() * pl];
    let [d, h, w] = g.inp;
    let pad = spec.padding as isize;
    let mut row = 0;
    for oz in 0..g.out[0] {
        for oy in 0..g.out[1] {
            for ox in 0..g.out[2] {
                let dst = &mut cols[row * pl..(row + 1) * pl];
                let mut q = 0;
                for c in 0..g.cin {
                    let base = c * d * h * w;
                    for kz in 0..g.k {
                        let z = (oz * spec.stride + kz) as isize - pad;
                        for ky in 0..g.k {
                            let y = (oy * spec.stride + ky) as isize - pad;
                            for kx in 0..g.k {
                                let xx = (ox * spec.stride + kx) as isize - pad;
                                if z >= 0
                                    && y >= 0
                                    && xx >= 0
                                    && (z as usize) < d
                                    && (y as usize) < h
                                    && (xx as usize) < w
                                {
                                    dst[q] = x[base + (z as usize * h + y as usize) * w + xx as usize];
                                }
                                q += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeometry, spec: Conv3dSpec, dx: &mut [f64]) {
    let pl = g.patch_len();
    let [d, h, w] = g.inp;
    let pad = spec.padding as isize;
    let mut row = 0;
    for oz in 0..g.out[0] {
        for oy in 0..g.out[1] {
            for ox in 0..g.out[2] {
                let src = &dcols[row * pl..(row + 1) * pl];
                let mut q = 0;
                for c in 0..g.cin {
                    let base = c * d * h * w;
                    for kz in 0..g.k {
                        let z = (oz * spec.stride + kz) as isize - pad;
                        for ky in 0..g.k {
                            let y = (oy * spec.stride + ky) as isize - pad;
                            for kx in 0..g.k {
                                let xx = (ox * spec.stride + kx) as isize - pad;
                                if z >= 0
                                    && y >= 0
                                    && xx >= 0
                                    && (z as usize) < d
                                    && (y as usize) < h
                                    && (xx as usize) < w
                                {
                                    dx[base + (z as usize * h + y as usize) * w + xx as usize] += src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output size of one spatial axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl Tape {
    /// `train` enables dropout; `seed` drives dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), train, rng: rng::seeded(seed) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| NnError::Shape {
            op,
            detail: format!("expected a matrix, got shape {:?}", self.value(v).shape()),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat(a, "matmul")?;
        let (k2, m) = self.mat(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("[{n}x{k}] x [{k2}x{m}]"));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a, b)))
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat(a, "matmul_nt")?;
        let (m, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("[{n}x{k}] x [{m}x{k2}]^T"));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMulNT(a, b)))
    }

    /// Adds a length-m vector to every row of an n x m matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.mat(x, "add_bias")?;
        if self.value(b).numel() != m {
            return shape_err("add_bias", format!("bias {:?} for [{n}x{m}]", self.value(b).shape()));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err("add", format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// Inverted dropout; the identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(out, Op::Dropout(x, mask))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.mat(x, "layer_norm")?;
        if self.value(gain).numel() != m || self.value(bias).numel() != m {
            return shape_err("layer_norm", format!("gain/bias must have {m} entries"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.mat(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::SoftmaxRows(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.mat(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Transpose(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat(x, "slice_cols")?;
        if start + len > m || len == 0 {
            return shape_err("slice_cols", format!("columns {start}..{} of {m}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![n, len], data: out }, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "nothing to concatenate".into());
        };
        let (n, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != n {
                return shape_err("concat_cols", format!("row counts {n} and {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor { shape: vec![n, total], data: out }, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means: [n x m] -> [1 x m].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.mat(x, "mean_rows")?;
        let mut out = vec![0.0; m];
        for row in self.value(x).data().chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor { shape: vec![1, m], data: out }, Op::MeanRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// 3-D cross-correlation. `x`: [C, D, H, W]; `w`: [O, C, k, k, k];
    /// `b`: [O]. Output: [O, D', H', W'].
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let ([cin, d, h, wd], [cout, cin2, k, k2, k3]) = (
            <[usize; 4]>::try_from(xs.as_slice()).map_err(|_| NnError::Shape {
                op: "conv3d",
                detail: format!("input must be [C,D,H,W], got {xs:?}"),
            })?,
            <[usize; 5]>::try_from(ws.as_slice()).map_err(|_| NnError::Shape {
                op: "conv3d",
                detail: format!("kernels must be [O,C,k,k,k], got {ws:?}"),
            })?,
        );
        if cin != cin2 || k != k2 || k != k3 {
            return shape_err("conv3d", format!("input {xs:?} vs kernels {ws:?}"));
        }
        if self.value(b).numel() != cout {
            return shape_err("conv3d", format!("bias needs {cout} entries"));
        }
        let mut out = [0usize; 3];
        for (o, &i) in out.iter_mut().zip(&[d, h, wd]) {
            *o = conv_out_size(i, k, spec.stride, spec.padding).ok_or_else(|| NnError::Shape {
                op: "conv3d",
                detail: format!("kernel {k} (stride {}, pad {}) does not fit input {xs:?}", spec.stride, spec.padding),
            })?;
        }
        let geo = ConvGeometry { cin, inp: [d, h, wd], out, k, cout };
        let cols = im2col(self.value(x).data(), &geo, spec);
        let p = geo.positions();
        // [P x O] = cols [P x CK] * W^T, W stored [O x CK]
        let mut po = vec![0.0; p * cout];
        gemm_nt(&cols, self.value(w).data(), &mut po, p, geo.patch_len(), cout);
        let bias = self.value(b).data();
        let mut data = vec![0.0; cout * p];
        for pos in 0..p {
            for o in 0..cout {
                data[o * p + pos] = po[pos * cout + o] + bias[o];
            }
        }
        let t = Tensor { shape: vec![cout, out[0], out[1], out[2]], data };
        Ok(self.push(t, Op::Conv3d { x, w, b, spec, cols, geo }))
    }

    /// [C, D, H, W] -> [1 x C] spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("expected [C,D,H,W], got {s:?}"));
        }
        let c = s[0];
        let per = s[1] * s[2] * s[3];
        let out: Vec<f64> =
            self.value(x).data().chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect();
        Ok(self.push(Tensor { shape: vec![1, c], data: out }, Op::GlobalAvgPool(x)))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return shape_err("mse", format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()));
        }
        let n = target.numel() as f64;
        let loss = self.value(pred).data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.clone())))
    }

    /// Mean over rows of -log softmax(logits)[label]; scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return shape_err("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(NnError::Argument(format!("label {l} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let loss = loss / n as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// sum(x * w) for a constant weight tensor; scalar output.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.value(x).numel() != w.numel() {
            return shape_err("weighted_sum", format!("{:?} vs {:?}", self.value(x).shape(), w.shape()));
        }
        let s = kernels::dot(self.value(x).data(), w.data());
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w.clone())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = Tensor::full(self.value(x).shape(), 1.0);
        self.weighted_sum(x, &w).expect("same shape")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(NnError::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<f64>| Tensor { shape: val(v).shape.clone(), data };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2().unwrap();
                let m = val(*b).shape[1];
                let mut da = vec![0.0; n * k];
                gemm_nt(&g.data, &val(*b).data, &mut da, n, m, k);
                let mut db = vec![0.0; k * m];
                gemm_tn(&val(*a).data, &g.data, &mut db, n, k, m);
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T, a [n x k], b [m x k]
                let (n, k) = val(*a).dims2().unwrap();
                let m = val(*b).shape[0];
                let mut da = vec![0.0; n * k];
                gemm_nn(&g.data, &val(*b).data, &mut da, n, m, k);
                let mut db = vec![0.0; m * k];
                gemm_tn(&g.data, &val(*a).data, &mut db, n, m, k);
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::AddBias(x, b) => {
                let m = val(*b).numel();
                let mut db = vec![0.0; m];
                for row in g.data.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*x, g.clone());
                acc(*b, like(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, s) => acc(*x, like(*x, g.data.iter().map(|v| v * s).collect())),
            Op::Relu(x) => {
                let d = g.data.iter().zip(&val(*x).data).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, like(*x, d));
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, like(*x, g.data.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Gelu(x) => {
                let d = g.data.iter().zip(&val(*x).data).map(|(g, &v)| g * gelu_parts(v).1).collect();
                acc(*x, like(*x, d));
            }
            Op::Dropout(x, mask) => acc(*x, like(*x, g.data.iter().zip(mask).map(|(g, m)| g * m).collect())),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let m = val(*gain).numel();
                let gv = &val(*gain).data;
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                let mut dx = vec![0.0; g.numel()];
                for (i, r) in rstd.iter().enumerate() {
                    let gr = &g.data[i * m..(i + 1) * m];
                    let hr = &xhat[i * m..(i + 1) * m];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..m {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let mf = m as f64;
                    for j in 0..m {
                        let dh = gr[j] * gv[j];
                        dx[i * m + j] = r / mf * (mf * dh - s1 - hr[j] * s2);
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gain, like(*gain, dgain));
                acc(*bias, like(*bias, dbias));
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.shape[1];
                let mut dx = vec![0.0; g.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(m).zip(node.value.data.chunks(m)).zip(g.data.chunks(m)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Transpose(x) => {
                let (n, m) = val(*x).dims2().unwrap();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = g.data[j * n + i];
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::SliceCols(x, start) => {
                let (n, m) = val(*x).dims2().unwrap();
                let len = node.value.shape[1];
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    dx[i * m + start..i * m + start + len].copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                acc(*x, like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape[1];
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&g.data[i * total + off..i * total + off + w]);
                    }
                    acc(p, like(p, dp));
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                let (n, m) = val(*x).dims2().unwrap();
                let mut dx = Vec::with_capacity(n * m);
                for _ in 0..n {
                    dx.extend(g.data.iter().map(|v| v / n as f64));
                }
                acc(*x, like(*x, dx));
            }
            Op::Reshape(x) => acc(*x, like(*x, g.data.clone())),
            Op::Conv3d { x, w, b, spec, cols, geo } => {
                let p = geo.positions();
                let pl = geo.patch_len();
                let cout = geo.cout;
                let mut db = vec![0.0; cout];
                // [P x O] layout of the upstream gradient
                let mut gpo = vec![0.0; p * cout];
                for o in 0..cout {
                    let ch = &g.data[o * p..(o + 1) * p];
                    db[o] = ch.iter().sum();
                    for pos in 0..p {
                        gpo[pos * cout + o] = ch[pos];
                    }
                }
                let mut dw = vec![0.0; cout * pl];
                gemm_tn(&gpo, cols, &mut dw, p, cout, pl);
                let mut dcols = vec![0.0; p * pl];
                gemm_nn(&gpo, &val(*w).data, &mut dcols, p, cout, pl);
                let mut dx = vec![0.0; val(*x).numel()];
                col2im(&dcols, geo, *spec, &mut dx);
                acc(*x, like(*x, dx));
                acc(*w, like(*w, dw));
                acc(*b, like(*b, db));
            }
            Op::GlobalAvgPool(x) => {
                let per = val(*x).numel() / node.value.numel();
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &gc in &g.data {
                    dx.extend(std::iter::repeat_n(gc / per as f64, per));
                }
                acc(*x, like(*x, dx));
            }
            Op::Mse(pred, target) => {
                let s = 2.0 * g.data[0] / target.numel() as f64;
                let d = val(*pred).data.iter().zip(&target.data).map(|(p, t)| s * (p - t)).collect();
                acc(*pred, like(*pred, d));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let (n, c) = val(*logits).dims2().unwrap();
                let s = g.data[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= s;
                }
                acc(*logits, like(*logits, d));
            }
            Op::WeightedSum(x, w) => {
                acc(*x, like(*x, w.data.iter().map(|v| v * g.data[0]).collect()));
            }
        }
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) {
                store.grad_mut(name)?.add_assign(g);
            }
        }
        Ok(())
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Parameter initializers, all driven by an explicit stream.
pub mod init {
    use super::*;

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

/// Largest relative gradient error between reverse mode and central
/// differences (step `h`) over every entry of every input.
///
/// `fragment` must build a scalar from the given input vars; it runs with
/// dropout disabled. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(fragment: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new(false, 0);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = fragment(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(NnError::Argument(format!(
                "grad_check needs a scalar output, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, out, vars))
    };
    let (tape, out, vars) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data[i];
            probe[k].data[i] = orig + h;
            let (t, o, _) = eval(&probe)?;
            let plus = t.value(o).data[0];
            probe[k].data[i] = orig - h;
            let (t, o, _) = eval(&probe)?;
            let minus = t.value(o).data[0];
            probe[k].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Building blocks shared by the models: each reads its parameters from a
/// store under a name prefix.
pub mod layers {
    use super::*;

    pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
        store.insert(format!("{prefix}.w"), init::fan_in_uniform(&[d_in, d_out], d_in, rng));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
    }

    pub fn init_linear_trunc(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
        store.insert(format!("{prefix}.w"), init::trunc_normal(&[d_in, d_out], 0.02, rng));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
    }

    pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
        store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
    }

    pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{prefix}.w"))?;
        let b = tape.param(store, &format!("{prefix}.b"))?;
        linear_forward(tape, x, w, b)
    }

    /// x W + b
    pub fn linear_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(store, &format!("{prefix}.g"))?;
        let b = tape.param(store, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, 1e-5)
    }

    /// Multi-head self-attention on an [n x d] token matrix from explicit
    /// weight vars: `qkv_w` [d x 3d], `qkv_b` [3d], `proj_w` [d x d],
    /// `proj_b` [d].
    pub fn multi_head_attention(
        tape: &mut Tape,
        x: Var,
        heads: usize,
        qkv_w: Var,
        qkv_b: Var,
        proj_w: Var,
        proj_b: Var,
    ) -> Result<Var> {
        let (_, d) = tape.mat(x, "multi_head_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!("embed dim {d} is not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let qkv = linear_forward(tape, x, qkv_w, qkv_b)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * hd, hd)?;
            let k = tape.slice_cols(qkv, d + h * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * d + h * hd, hd)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, v)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        linear_forward(tape, cat, proj_w, proj_b)
    }

    pub fn init_transformer_block(store: &mut ParamStore, prefix: &str, d: usize, mlp_ratio: usize, rng: &mut Rng) {
        init_layer_norm(store, &format!("{prefix}.ln1"), d);
        init_linear_trunc(store, &format!("{prefix}.attn.qkv"), d, 3 * d, rng);
        init_linear_trunc(store, &format!("{prefix}.attn.proj"), d, d, rng);
        init_layer_norm(store, &format!("{prefix}.ln2"), d);
        init_linear_trunc(store, &format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, rng);
        init_linear_trunc(store, &format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, rng);
    }

    /// Pre-norm block: x + drop(MHA(LN(x))), then h + drop(MLP(LN(h))).
    pub fn transformer_block(
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let n1 = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
        let qkv_w = tape.param(store, &format!("{prefix}.attn.qkv.w"))?;
        let qkv_b = tape.param(store, &format!("{prefix}.attn.qkv.b"))?;
        let proj_w = tape.param(store, &format!("{prefix}.attn.proj.w"))?;
        let proj_b = tape.param(store, &format!("{prefix}.attn.proj.b"))?;
        let a = multi_head_attention(tape, n1, heads, qkv_w, qkv_b, proj_w, proj_b)?;
        let a = tape.dropout(a, dropout);
        let h = tape.add(x, a)?;
        let n2 = layer_norm(tape, store, &format!("{prefix}.ln2"), h)?;
        let m = linear(tape, store, &format!("{prefix}.mlp.fc1"), n2)?;
        let m = tape.gelu(m);
        let m = linear(tape, store, &format!("{prefix}.mlp.fc2"), m)?;
        let m = tape.dropout(m, dropout);
        tape.add(h, m)
    }
}

/// One entry of [`gradient_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// Pre-norm transformer block built from explicit vars in the order
/// ln1.g, ln1.b, qkv.w, qkv.b, proj.w, proj.b, ln2.g, ln2.b, fc1.w, fc1.b,
/// fc2.w, fc2.b.
pub fn transformer_block_from_vars(tape: &mut Tape, x: Var, heads: usize, p: &[Var]) -> Result<Var> {
    if p.len() != 12 {
        return Err(NnError::Argument(format!("transformer block needs 12 parameter vars, got {}", p.len())));
    }
    let n1 = tape.layer_norm(x, p[0], p[1], 1e-5)?;
    let a = layers::multi_head_attention(tape, n1, heads, p[2], p[3], p[4], p[5])?;
    let h = tape.add(x, a)?;
    let n2 = tape.layer_norm(h, p[6], p[7], 1e-5)?;
    let m = layers::linear_forward(tape, n2, p[8], p[9])?;
    let m = tape.gelu(m);
    let m = layers::linear_forward(tape, m, p[10], p[11])?;
    tape.add(h, m)
}

/// Parameter names of a transformer block in [`transformer_block_from_vars`] order.
pub fn transformer_block_param_names(prefix: &str) -> Vec<String> {
    ["ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.proj.w", "attn.proj.b", "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"]
        .iter()
        .map(|n| format!("{prefix}.{n}"))
        .collect()
}

/// Finite-difference checks of every differentiable building block on
/// random 64-bit inputs, each against its own tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = rng::seeded(seed);
    let mut r = |shape: &[usize]| init::trunc_normal(shape, 1.0, &mut rng);
    let h = 1e-6;
    let mut out = Vec::new();
    let mut case = |name, tolerance, err: Result<f64>| -> Result<()> {
        out.push(GradCase { name, error: err?, tolerance });
        Ok(())
    };

    let wl = r(&[3, 5]);
    case(
        "linear",
        1e-6,
        grad_check(
            |t, v| {
                let y = layers::linear_forward(t, v[0], v[1], v[2])?;
                t.weighted_sum(y, &wl)
            },
            &[r(&[3, 4]), r(&[4, 5]), r(&[5])],
            h,
        ),
    )?;

    let wc = r(&[3, 2, 2, 2]);
    let spec = Conv3dSpec { stride: 2, padding: 1 };
    case(
        "conv3d",
        1e-5,
        grad_check(
            |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], spec)?;
                t.weighted_sum(y, &wc)
            },
            &[r(&[2, 4, 4, 4]), r(&[3, 2, 3, 3, 3]), r(&[3])],
            h,
        ),
    )?;

    let wn = r(&[3, 6]);
    case(
        "layer_norm",
        1e-5,
        grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                t.weighted_sum(y, &wn)
            },
            &[r(&[3, 6]), r(&[6]), r(&[6])],
            h,
        ),
    )?;

    let wa = r(&[4, 8]);
    case(
        "attention",
        1e-5,
        grad_check(
            |t, v| {
                let y = layers::multi_head_attention(t, v[0], 2, v[1], v[2], v[3], v[4])?;
                t.weighted_sum(y, &wa)
            },
            &[r(&[4, 8]), r(&[8, 24]), r(&[24]), r(&[8, 8]), r(&[8])],
            h,
        ),
    )?;

    let wt = r(&[4, 8]);
    let mut block_inputs = vec![r(&[4, 8])];
    for shape in [&[8][..], &[8], &[8, 24], &[24], &[8, 8], &[8], &[8], &[8], &[8, 16], &[16], &[16, 8], &[8]] {
        block_inputs.push(r(shape));
    }
    case(
        "transformer_block",
        1e-4,
        grad_check(
            |t, v| {
                let y = transformer_block_from_vars(t, v[0], 2, &v[1..])?;
                t.weighted_sum(y, &wt)
            },
            &block_inputs,
            h,
        ),
    )?;

    let labels = [0, 3, 1, 2, 1];
    case(
        "fc_head",
        1e-5,
        grad_check(
            |t, v| {
                let mut a = v[0];
                for k in 0..2 {
                    a = layers::linear_forward(t, a, v[1 + 2 * k], v[2 + 2 * k])?;
                    a = t.relu(a);
                }
                let logits = layers::linear_forward(t, a, v[5], v[6])?;
                t.softmax_cross_entropy(logits, &labels)
            },
            &[r(&[5, 6]), r(&[6, 7]), r(&[7]), r(&[7, 5]), r(&[5]), r(&[5, 4]), r(&[4])],
            h,
        ),
    )?;

    case(
        "softmax_cross_entropy",
        1e-6,
        grad_check(|t, v| t.softmax_cross_entropy(v[0], &labels), &[r(&[5, 4])], h),
    )?;

    let target = r(&[3, 4]);
    case("mse", 1e-8, grad_check(|t, v| t.mse(v[0], &target), &[r(&[3, 4])], 1e-3))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        init::trunc_normal(shape, 1.0, &mut rng)
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::new(false, 0);
        let x = t.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.input(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = layers::linear_forward(&mut t, x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0]);

        let bad = t.input(Tensor::zeros(&[3, 2]));
        let err = t.matmul(x, bad).unwrap_err();
        assert!(err.to_string().contains("[1x2] x [3x2]"));
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new(false, 0);
        let x = t.input(rand_tensor(&[2, 3, 3, 3], 1));
        let w = t.input(Tensor::new(vec![2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.input(Tensor::zeros(&[2]));
        let y = t.conv3d(x, w, b, Conv3dSpec { stride: 1, padding: 0 }).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let x = t.input(Tensor::full(&[1, 2, 2, 2], 1.0));
        let w = t.input(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = t.input(Tensor::zeros(&[1]));
        let y = t.conv3d(x, w, b, Conv3dSpec { stride: 2, padding: 0 }).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[8.0]);

        let w3 = t.input(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        assert!(t.conv3d(x, w3, b, Conv3dSpec { stride: 1, padding: 0 }).is_err());
        assert_eq!(conv_out_size(32, 3, 2, 1), Some(16));
    }

    #[test]
    fn softmax_ce_examples() {
        let mut t = Tape::new(false, 0);
        let l = t.input(Tensor::zeros(&[3, 4]));
        let loss = t.softmax_cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((t.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        let big = t.input(Tensor::new(vec![1, 4], vec![0.0, 800.0, 0.0, 0.0]).unwrap());
        let loss = t.softmax_cross_entropy(big, &[1]).unwrap();
        assert!(t.value(loss).data()[0] < 1e-12);
        assert!(matches!(t.softmax_cross_entropy(l, &[0, 1, 4]), Err(NnError::Argument(_))));
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new(false, 0);
        let p = t.input(Tensor::zeros(&[2]));
        let l = t.mse(p, &Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(t.value(l).data(), &[12.5]);
        let l = t.mse(p, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        assert!(t.mse(p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new(false, 0);
        let g = t.input(Tensor::full(&[2], 1.0));
        let b = t.input(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let x = t.input(Tensor::new(vec![2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.5, -0.5]);
        assert!((v[2] - 1.5).abs() < 1e-9 && (v[3] + 1.5).abs() < 1e-9);
    }

    #[test]
    fn attention_examples() {
        let mut rng = rng::seeded(3);
        let d = 8;
        let mut t = Tape::new(false, 0);
        let qkv_w = t.input(init::trunc_normal(&[d, 3 * d], 0.5, &mut rng));
        let qkv_b = t.input(init::trunc_normal(&[3 * d], 0.5, &mut rng));
        let proj_w = t.input(init::trunc_normal(&[d, d], 0.5, &mut rng));
        let proj_b = t.input(init::trunc_normal(&[d], 0.5, &mut rng));

        // one token: output = proj(value(token))
        let tok = rand_tensor(&[1, d], 4);
        let x = t.input(tok.clone());
        let y = layers::multi_head_attention(&mut t, x, 2, qkv_w, qkv_b, proj_w, proj_b).unwrap();
        let qkv = layers::linear_forward(&mut t, x, qkv_w, qkv_b).unwrap();
        let v = t.slice_cols(qkv, 2 * d, d).unwrap();
        let expect = layers::linear_forward(&mut t, v, proj_w, proj_b).unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // identical tokens give identical rows
        let row = tok.data().to_vec();
        let x2 = t.input(Tensor::new(vec![2, d], [row.clone(), row].concat()).unwrap());
        let y2 = layers::multi_head_attention(&mut t, x2, 2, qkv_w, qkv_b, proj_w, proj_b).unwrap();
        let out = t.value(y2).data();
        assert_eq!(&out[..d], &out[d..]);

        assert!(matches!(
            layers::multi_head_attention(&mut t, x2, 3, qkv_w, qkv_b, proj_w, proj_b),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new(false, 0);
        let x = t.input(rand_tensor(&[4, 6], 8));
        let s = t.scale(x, 20.0);
        let y = t.softmax_rows(s).unwrap();
        for row in t.value(y).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_modes() {
        let x = rand_tensor(&[3, 5], 2);
        let mut t = Tape::new(false, 1);
        let v = t.input(x.clone());
        let y = t.dropout(v, 0.5);
        assert_eq!(t.value(y), &x);
        let mut t = Tape::new(true, 1);
        let v = t.input(x.clone());
        let y = t.dropout(v, 0.0);
        assert_eq!(t.value(y), &x);
        let y = t.dropout(v, 0.5);
        assert!(t.value(y).data().iter().zip(x.data()).all(|(a, b)| *a == 0.0 || (*a - 2.0 * b).abs() < 1e-12));
    }

    #[test]
    fn adam_examples() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0));
        adam_step(&mut s, 0.1, 0.9, 0.999, 1e-8, 1);
        assert_eq!(s.value("p").unwrap().data(), &[0.0]);
        s.grad_mut("p").unwrap().data_mut()[0] = 1.0;
        adam_step(&mut s, 0.1, 0.9, 0.999, 1e-8, 1);
        assert!((s.value("p").unwrap().data()[0] + 0.1).abs() < 1e-9);

        let mut a = ParamStore::new();
        a.insert("w", rand_tensor(&[3, 3], 5));
        *a.grad_mut("w").unwrap() = rand_tensor(&[3, 3], 6);
        let mut b = a.clone();
        for t in 1..4 {
            adam_step(&mut a, 0.01, 0.9, 0.999, 1e-8, t);
            adam_step(&mut b, 0.01, 0.9, 0.999, 1e-8, t);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new(false, 0);
        let x = t.input(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
        let err = grad_check(|_, v| Ok(v[0]), &[Tensor::zeros(&[2])], 1e-5).unwrap_err();
        assert!(matches!(err, NnError::Argument(_)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.insert("b.w", rand_tensor(&[2, 3], 1));
        s.insert("a", rand_tensor(&[4], 2));
        let meta = serde_json::json!({"kind": "test"});
        let bytes = encode_checkpoint(&s, meta.clone());
        let (back, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.checksum(), s.checksum());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"nope").is_err());
    }

    #[test]
    fn param_grads_reach_store() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let mut t = Tape::new(false, 0);
        let x = t.input(Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap());
        let w = t.param(&s, "w").unwrap();
        let y = t.matmul(x, w).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        t.accumulate_param_grads(&g, &mut s).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[3.0, 5.0]);
        assert!(matches!(t.param(&s, "missing"), Err(NnError::UnknownParam(_))));
    }
}
