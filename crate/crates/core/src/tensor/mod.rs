//! Dense f64 tensors and the reverse-mode gradient tape.
//!
//! Everything downstream (networks, mining, the toy minimax models) is built
//! from the small set of operations in [`tape`]. Values are 64-bit floats
//! throughout so gradient checks are not fighting precision, and every
//! forward/backward pass verifies that it produced only finite numbers.

mod checkpoint;
mod matmul;
mod param;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};

pub(crate) use matmul::{mm_nn, mm_nt, mm_tn};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid configuration for {op}: {detail}")]
    InvalidConfig { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parameter '{name}' has no accumulated gradient")]
    MissingGrad { name: String },
    #[error("labels must be exactly 0 or 1, got {value}")]
    NonBinaryLabel { value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array of f64 in row-major layout.
///
/// 4-D tensors are laid out batch x channels x height x width. The optional
/// gradient buffer is only populated on tensors owned by a [`Parameter`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidConfig {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if data.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        ensure_finite(&data, "tensor")?;
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<f64>> {
        &mut self.grad
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulates `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("gradient length {} vs data length {}", g.len(), self.data.len()),
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_value(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-location minimum over equally shaped tensors. Plain value math, used
/// for merging stored region maps where no gradient is wanted.
pub fn min_many(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or(TensorError::InvalidConfig {
        op: "min_many",
        detail: "at least one input required".into(),
    })?;
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "min_many",
                detail: format!("{:?} vs {:?}", t.shape(), first.shape()),
            });
        }
    }
    let mut out = (*first).clone();
    out.grad = None;
    for t in &inputs[1..] {
        for (o, v) in out.data.iter_mut().zip(&t.data) {
            if *v < *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of a 2-D map with the half-pixel (align-corners-false)
/// convention: src = (dst + 0.5) * in/out - 0.5, clamped at the borders.
pub fn bilinear_resize_2d(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "bilinear_resize_2d",
            detail: format!("expected rank 2, got {:?}", input.shape()),
        });
    }
    let (in_h, in_w) = (input.shape()[0], input.shape()[1]);
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidConfig {
            op: "bilinear_resize_2d",
            detail: "output size must be positive".into(),
        });
    }
    let rows = axis_weights(in_h, out_h);
    let cols = axis_weights(in_w, out_w);
    let src = input.data();
    let mut data = vec![0.0; out_h * out_w];
    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
            let v00 = src[y0 * in_w + x0];
            let v01 = src[y0 * in_w + x1];
            let v10 = src[y1 * in_w + x0];
            let v11 = src[y1 * in_w + x1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            data[oy * out_w + ox] = top + (bot - top) * wy;
        }
    }
    Tensor::new(vec![out_h, out_w], data)
}

/// Per output index: (lower source index, upper source index, weight of upper).
pub(crate) fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn min_many_basic() {
        let a = Tensor::new(vec![2], vec![1.0, 0.3]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
        let m = min_many(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[0.5, 0.3]);
    }

    #[test]
    fn min_many_single_input_is_identity() {
        let a = Tensor::new(vec![3], vec![0.2, 0.9, 0.5]).unwrap();
        assert_eq!(min_many(&[&a]).unwrap().data(), a.data());
    }

    #[test]
    fn min_many_idempotent() {
        let a = Tensor::new(vec![2], vec![0.7, 0.1]).unwrap();
        let b = Tensor::new(vec![2], vec![0.4, 0.8]).unwrap();
        let ab = min_many(&[&a, &b]).unwrap();
        let again = min_many(&[&a, &ab]).unwrap();
        assert_eq!(again.data(), ab.data());
    }

    #[test]
    fn min_many_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(min_many(&[&a, &b]).is_err());
    }

    #[test]
    fn bilinear_identity_size() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = bilinear_resize_2d(&t, 2, 2).unwrap();
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        // 1x2 [0,1] doubled along width: the half-pixel rule gives
        // [0, 0.25, 0.75, 1].
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize_2d(&t, 1, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in r.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.data());
        }
    }

    #[test]
    fn bilinear_preserves_constant() {
        let t = Tensor::full(&[3, 5], 0.37);
        let r = bilinear_resize_2d(&t, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }
}
