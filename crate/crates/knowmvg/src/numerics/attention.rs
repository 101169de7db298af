//! Reference scaled dot-product attention on plain tensors (no tape). The
//! differentiable model paths compose the same arithmetic from graph ops;
//! this standalone version is the contract for both.

use super::kernels::matmul_nt;
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// softmax(q·kᵀ/√d)·v with row-stabilised softmax.
///
/// `q` is m×d, `k` and `v` are n×d; the result is m×d.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.cols() != k.cols() {
        return Err(Error::contract(format!(
            "attention: query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::contract(format!(
            "attention: {} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let mut scores = matmul_nt(q, k);
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let mut m = T::neg_infinity();
        for v in row.iter_mut() {
            *v *= scale;
            m = m.max(*v);
        }
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(super::kernels::matmul(&scores, v))
}
