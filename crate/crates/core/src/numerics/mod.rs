//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The free functions here are tape-free forward evaluations of the same
//! kernels the [`Tape`] records; models use them for evaluation passes.

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `x·W + b` without recording.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = tape.affine(xv, wv, bv)?;
    Ok(tape.value(out).clone())
}

/// Cross-correlation without bias.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = tape::conv_geom(x.shape(), kernels.shape(), stride, pad)?;
    let (out, _) = kernels::conv_forward(x.data(), kernels.data(), None, &geom);
    Ok(Tensor::from_parts(
        vec![geom.batch, geom.filters, geom.out_h, geom.out_w],
        out,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

/// Row-wise softmax of a B×K matrix with max-subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[1] < 2 {
        return Err(Error::dim(format!(
            "softmax expects B×K with K ≥ 2, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = vec![0.0; logits.len()];
    for (o, z) in out.chunks_exact_mut(k).zip(logits.data().chunks_exact(k)) {
        kernels::softmax_row(z, o);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}
