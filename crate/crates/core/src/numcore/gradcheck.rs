//! Central finite-difference check of tape gradients.

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Coordinates probed per tensor (all of them when the tensor is smaller).
pub const COORDS_PER_TENSOR: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (tensor index, flat coordinate, tape gradient, numeric gradient) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval(f: &impl Fn(&[Tensor]) -> Result<Tensor>, params: &[Tensor]) -> Result<f64> {
    let out = f(params)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Compares the tape gradient of the scalar `f` at `params` against
/// `(f(θ + eps·e) − f(θ − eps·e)) / (2·eps)` on up to
/// [`COORDS_PER_TENSOR`] sampled coordinates per tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = params.iter().map(Tensor::detach_param).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    let constants: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let again = eval(&f, &constants)?;
    if again.to_bits() != loss.item().to_bits() {
        return Err(Error::Determinism {
            first: loss.item(),
            second: again,
        });
    }
    loss.backward()?;

    let mut rng = Rng::new(0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (ti, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            // partial Fisher-Yates for distinct coordinates
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..COORDS_PER_TENSOR {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(COORDS_PER_TENSOR);
            idx
        };
        for &ci in &coords {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = params[ti].to_vec();
                data[ci] += delta;
                let mut ps = constants.clone();
                ps[ti] = Tensor::new(data, params[ti].shape())?;
                eval(&f, &ps)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let err = rel_error(analytic[ci], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ci, analytic[ci], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new(vec![0.3, -1.2, 2.5, 0.0, 4.0], &[5]).unwrap();
        let r = grad_check(|p| p[0].mul(&p[0])?.sum(), &[theta], 1e-6).unwrap();
        assert_eq!(r.coords_checked, 5);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let theta = Tensor::new(vec![1.0], &[1]).unwrap();
        let r = grad_check(
            |p| {
                let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
                p[0].scale(1.0 + k)?.sum()
            },
            &[theta],
            1e-6,
        );
        assert!(matches!(r, Err(Error::Determinism { .. })));
    }

    #[test]
    fn samples_at_most_32_coords_per_tensor() {
        let theta = Tensor::from_fn(&[100], |i| i as f64 * 0.01).unwrap();
        let r = grad_check(|p| p[0].square()?.sum(), &[theta], 1e-6).unwrap();
        assert_eq!(r.coords_checked, COORDS_PER_TENSOR);
    }
}
