//! Single-head multilayer perceptron with hand-written backpropagation.
//!
//! The output dimension is the total number of classes over the whole
//! continual run and is fixed at construction. Hidden layers use ReLU, the
//! output layer is linear (logits).
//!
//! # Checkpoint layout
//!
//! All integers and reals are little-endian.
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `PFCLMLP\0` |
//! | 4 | format version, `u32` = 1 |
//! | 4 | layer count `L`, `u32` |
//! | 16·L | per layer: input dim `u64`, output dim `u64` |
//! | ... | per layer: weight `in × out` row-major `f64`, then bias `out` `f64` |
//!
//! Values are stored as raw IEEE-754 bits, so `load(save(m)) == m` bitwise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{init_uniform_scaled, Matrix, Rng};

const MAGIC: &[u8; 8] = b"PFCLMLP\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`.
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Activations recorded by [`MlpModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input fed to each layer (the batch for layer 0, post-ReLU after).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer; the last one is the logits.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn layer_inputs(&self) -> &[Matrix] {
        &self.inputs
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub dw: Matrix,
    pub db: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: Matrix::zeros(l.in_dim(), l.out_dim()),
                    db: Matrix::zeros(1, l.out_dim()),
                })
                .collect(),
        }
    }

    pub fn add(&self, other: &Gradients) -> Result<Gradients> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient layer counts differ"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(LayerGrad {
                    dw: a.dw.add(&b.dw)?,
                    db: a.db.add(&b.db)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { layers })
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.dw.max_abs().max(g.db.max_abs()))
            .fold(0.0, f64::max)
    }
}

impl MlpModel {
    /// Fresh model with layer widths `dims[0] → dims[1] → … → dims[last]`.
    /// Weights use [`init_uniform_scaled`], biases start at zero.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape(format!(
                "an MLP needs at least input and output dims, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                Ok(Layer {
                    weight: init_uniform_scaled(w[0], w[1], rng)?,
                    bias: Matrix::zeros(1, w[1]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("model has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(Error::shape(format!(
                    "layer {i}: bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.data().len())
            .sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            let bias = layer.bias.row(0);
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if !z.is_finite() {
                return Err(Error::NonFinite("forward"));
            }
            let next = if i < last { z.map(relu) } else { z.clone() };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Logits only.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Parameter gradients of the scalar loss whose gradient with respect to
    /// the logits is `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if cache.inputs.len() != n_layers || cache.pre.len() != n_layers {
            return Err(Error::shape(format!(
                "cache holds {} layers, model has {n_layers}",
                cache.inputs.len()
            )));
        }
        for (i, (layer, input)) in self.layers.iter().zip(&cache.inputs).enumerate() {
            if input.cols() != layer.in_dim() || cache.pre[i].cols() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "cache for layer {i} does not match the model"
                )));
            }
        }
        if dlogits.shape() != cache.pre[n_layers - 1].shape() {
            return Err(Error::shape(format!(
                "dlogits {:?} does not match logits {:?}",
                dlogits.shape(),
                cache.pre[n_layers - 1].shape()
            )));
        }

        let mut grads = Vec::with_capacity(n_layers);
        let mut delta = dlogits.clone();
        for i in (0..n_layers).rev() {
            let dw = cache.inputs[i].transpose().matmul(&delta)?;
            let db = delta.column_sums();
            if i > 0 {
                let mut back = delta.matmul(&self.layers[i].weight.transpose())?;
                let pre = &cache.pre[i - 1];
                for r in 0..back.rows() {
                    for (g, &z) in back.row_mut(r).iter_mut().zip(pre.row(r)) {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                delta = back;
            }
            grads.push(LayerGrad { dw, db });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// `p ← p − lr · g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} gradient layers for {} model layers",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            if layer.weight.shape() != g.dw.shape() || layer.bias.shape() != g.db.shape() {
                return Err(Error::shape("gradient shapes do not match the model"));
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.axpy_in_place(-lr, &g.dw)?;
            layer.bias.axpy_in_place(-lr, &g.db)?;
        }
        Ok(())
    }

    /// Deep copy used as the frozen old model.
    pub fn snapshot(&self) -> MlpModel {
        self.clone()
    }

    /// Bitwise parameter equality.
    pub fn bitwise_eq(&self, other: &MlpModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape()
                    && bits_eq(a.weight.data(), b.weight.data())
                    && bits_eq(a.bias.data(), b.bias.data())
            })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim() as u64).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u64).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 16 * self.layers.len() + 8 * self.param_count());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut cur = ByteCursor {
            bytes,
            pos: 0,
            source,
        };
        if cur.take(8)? != MAGIC {
            return Err(cur.error(0, "bad checkpoint magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(cur.error(8, format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32()? as usize;
        if count == 0 {
            return Err(cur.error(12, "checkpoint has no layers"));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            let at = cur.pos;
            let (i, o) = (cur.u64()? as usize, cur.u64()? as usize);
            if i == 0 || o == 0 {
                return Err(cur.error(at, "zero layer dimension"));
            }
            dims.push((i, o));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, o) in dims {
            let at = cur.pos;
            let weight = Matrix::new(i, o, cur.f64s(i * o)?)
                .map_err(|e| cur.error(at, e.to_string()))?;
            let at = cur.pos;
            let bias =
                Matrix::new(1, o, cur.f64s(o)?).map_err(|e| cur.error(at, e.to_string()))?;
            layers.push(Layer { weight, bias });
        }
        if cur.pos != bytes.len() {
            return Err(cur.error(cur.pos, "trailing bytes after checkpoint"));
        }
        MlpModel::from_layers(layers).map_err(|e| cur.error(16, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl ByteCursor<'_> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.source.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
