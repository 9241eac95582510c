use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `grad_out` where `x > 0`; the derivative at exactly zero is zero.
pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch { left: x.shape().dims(), right: grad_out.shape().dims() });
    }
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}
