//! Fully connected map on channel descriptors.

use crate::error::{Error, Result};
use crate::kernels;
use crate::ops::names;
use crate::real::Real;
use crate::tensor::Tensor;

/// y = v · Wᵀ + b for v (N × C_in), W (C_out × C_in), b (C_out).
pub fn linear<T: Real>(v: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c_in) = match v.shape() {
        [n, c] => (*n, *c),
        other => return Err(Error::shape(names::LINEAR, format!("expected N×C, got {other:?}"))),
    };
    let (c_out, w_in) = match weight.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(Error::shape(names::LINEAR, format!("weight must be 2-D, got {other:?}")))
        }
    };
    if w_in != c_in || bias.shape() != [c_out] {
        return Err(Error::shape(
            names::LINEAR,
            format!("v {:?} · W {:?} + b {:?}", v.shape(), weight.shape(), bias.shape()),
        ));
    }

    let mut out = vec![T::zero(); n_batch * c_out];
    kernels::matmul_bt(&v.data(), &weight.data(), &mut out, n_batch, c_in, c_out);
    {
        let bd = bias.data();
        for row in out.chunks_mut(c_out) {
            for (o, &b) in row.iter_mut().zip(bd.iter()) {
                *o += b;
            }
        }
    }
    Tensor::from_op(
        out,
        vec![n_batch, c_out],
        names::LINEAR,
        vec![v.clone(), weight.clone(), bias.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let (v, weight, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            if v.needs_grad() {
                // dv = dy · W
                let mut dv = vec![T::zero(); n_batch * c_in];
                kernels::matmul(grad_out, &weight.data(), &mut dv, n_batch, c_out, c_in);
                v.accumulate_grad_owned(dv);
            }
            if weight.needs_grad() {
                // dW = dyᵀ · v
                let mut dw = vec![T::zero(); c_out * c_in];
                kernels::matmul_ta(grad_out, &v.data(), &mut dw, c_out, n_batch, c_in);
                weight.accumulate_grad_owned(dw);
            }
            if bias.needs_grad() {
                let mut db = vec![T::zero(); c_out];
                for row in grad_out.chunks(c_out) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                bias.accumulate_grad_owned(db);
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn known_product() {
        // v = [1 2], W = [[1 0], [0 1], [1 1]], b = [0.5, 0, -1]
        let v = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.0, -1.0], &[3]).unwrap();
        let y = linear(&v, &w, &b).unwrap();
        assert_eq!(*y.data(), vec![1.5, 2.0, 2.0]);
    }

    #[test]
    fn gradients_match_hand_computation() {
        let v = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let w = Tensor::param(vec![0.5, -0.5, 1.0, 2.0], &[2, 2]).unwrap();
        let b = Tensor::param(vec![0.0, 1.0], &[2]).unwrap();
        let y = linear(&v, &w, &b).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        // d/dv = ones·W (row sums of W columns): [0.5+1.0, -0.5+2.0] per row.
        assert_eq!(v.grad().unwrap(), vec![1.5, 1.5, 1.5, 1.5]);
        // d/dW = Σ_n v_n for each output row: [1+3, 2+4] twice.
        assert_eq!(w.grad().unwrap(), vec![4.0, 6.0, 4.0, 6.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let v = Tensor::<f64>::zeros(&[1, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(linear(&v, &w, &b).is_err());
    }
}
