//! Finite-difference gradient auditing.
//!
//! Compares the analytic gradient of a scalar-valued tensor function against
//! central differences in double precision. The relative-error normalization
//! follows |a − n| / max(|a|, |n|, 1e-8).

use rand::seq::index::sample;
use rand::RngCore;

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Max relative error between the analytic gradient of `f` w.r.t. `x` and
/// central finite differences, checking every element of `x`.
///
/// `f` is rebuilt per evaluation; it must be a pure function of its input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// [`grad_check`] over a random sample of coordinates — for tensors too
/// large to sweep exhaustively (composite blocks, whole models).
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor<f64>,
    eps: f64,
    max_coords: usize,
    rng: &mut dyn RngCore,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut picked: Vec<usize> = sample(rng, n, max_coords).into_iter().collect();
        picked.sort_unstable();
        picked
    };
    grad_check_at(f, x, eps, &coords)
}

fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let base = x.to_vec();
    let shape = x.shape().to_vec();

    // Analytic pass on a fresh leaf so the caller's tensor stays untouched.
    let leaf = Tensor::param(base.clone(), &shape)?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(data, &shape)?;
        Ok(f(&t)?.item())
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, relu, sum_all};
    use rand::SeedableRng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let err = grad_check(|t| sum_all(t), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "linear f should be FD-exact, got {err}");
    }

    #[test]
    fn quadratic_function_under_tolerance() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0, 0.25], &[4]).unwrap();
        let err = grad_check(|t| sum_all(&mul(t, t)?), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-7, "got {err}");
    }

    #[test]
    fn relu_away_from_kinks() {
        // Kink at 0 is excluded by construction: all inputs well away from it.
        let x = Tensor::from_vec(vec![-1.0, 0.5, 2.0, -0.25], &[4]).unwrap();
        let err = grad_check(|t| sum_all(&relu(t)?), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "got {err}");
    }

    #[test]
    fn sampled_matches_full_on_small_input() {
        let x = Tensor::from_vec(vec![0.3, 0.7], &[2]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let full = grad_check(|t| sum_all(&mul(t, t)?), &x, DEFAULT_EPS).unwrap();
        let sampled =
            grad_check_sampled(|t| sum_all(&mul(t, t)?), &x, DEFAULT_EPS, 10, &mut rng).unwrap();
        assert_eq!(full, sampled);
    }
}
