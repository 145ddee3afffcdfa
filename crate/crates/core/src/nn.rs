//! Dense ReLU networks, the Adam optimizer, and the shared model file format.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::massmodel::{read_f64, read_u32};

/// Fully connected layer `y = x·W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / input.max(1) as f64).sqrt()).expect("finite std");
        Self {
            w: Array2::from_shape_simple_fn((input, output), || normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Gradients for upstream `dy`, plus `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            w: x.t().dot(&dy),
            b: dy.sum_axis(Axis(0)),
        };
        (grad, dy.dot(&self.w.t()))
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn tensors(&self) -> [Tensor; 2] {
        [
            Tensor::new(vec![self.w.nrows(), self.w.ncols()], self.w.iter().copied().collect()),
            Tensor::new(vec![self.b.len()], self.b.to_vec()),
        ]
    }

    pub fn from_tensors(w: Tensor, b: Tensor) -> Result<Self> {
        match (w.shape.as_slice(), b.shape.as_slice()) {
            ([i, o], [ob]) if o == ob => Ok(Self {
                w: Array2::from_shape_vec((*i, *o), w.data).map_err(|e| Error::Format(e.to_string()))?,
                b: Array1::from(b.data),
            }),
            _ => Err(Error::Format(format!("layer shapes {:?} / {:?} do not match", w.shape, b.shape))),
        }
    }
}

impl DenseGrad {
    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Stack of dense layers with ReLU between them, and after the last layer
/// when `relu_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_output: bool,
}

/// Activations kept for backpropagation: the input of every layer and the output.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], relu_output: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: dims.windows(2).map(|d| Dense::new(d[0], d[1], rng)).collect(),
            relu_output,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_output
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            a = l.forward(a.view());
            if self.activated(i) {
                relu_inplace(&mut a);
            }
        }
        a
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.forward(a.view());
            if self.activated(i) {
                relu_inplace(&mut z);
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        MlpCache { inputs, output: a }
    }

    pub fn backward(&self, cache: &MlpCache, dout: Array2<f64>) -> (Vec<DenseGrad>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                let out = if i + 1 < self.layers.len() {
                    &cache.inputs[i + 1]
                } else {
                    &cache.output
                };
                ndarray::Zip::from(&mut d).and(out).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let (g, dx) = self.layers[i].backward(cache.inputs[i].view(), d.view());
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        (grads, d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn from_tensors(tensors: &mut impl Iterator<Item = Tensor>, n_layers: usize, relu_output: bool) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| match (tensors.next(), tensors.next()) {
                (Some(w), Some(b)) => Dense::from_tensors(w, b),
                _ => Err(Error::Format("model file ends before all layers".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Format("consecutive layer widths disagree".into()));
            }
        }
        Ok(Self { layers, relu_output })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count changed");
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Per-column mean and standard deviation; constant columns get unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let std = (0..rows.ncols())
            .map(|j| {
                let m = mean[j];
                let sd = (rows.column(j).iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            std,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }

    pub fn tensors(&self) -> [Tensor; 2] {
        [
            Tensor::new(vec![self.len()], self.mean.clone()),
            Tensor::new(vec![self.len()], self.std.clone()),
        ]
    }

    pub fn from_tensors(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.shape != std.shape || mean.shape.len() != 1 {
            return Err(Error::Format("standardizer tensors disagree".into()));
        }
        Ok(Self {
            mean: mean.data,
            std: std.data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }
}

pub const MODEL_VERSION: u32 = 1;

/// Model file: 4-byte magic, u32 version, u32 metadata length and UTF-8 JSON
/// metadata, u32 tensor count, then per tensor a u32 rank, u32 dims and the
/// row-major f64 values. All integers and floats little-endian.
pub fn write_model<W: Write>(mut w: W, magic: &[u8; 4], meta: &serde_json::Value, tensors: &[Tensor]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.data.len());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let n = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor { shape, data });
    }
    Ok((meta, tensors))
}
