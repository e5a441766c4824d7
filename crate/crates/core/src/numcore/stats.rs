use super::cost::{self, Primitive};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default variance guard for [`Tensor::instance_stats`].
pub const INSTANCE_EPS: f64 = 1e-5;

impl Tensor {
    /// Per-(batch, channel) spatial mean and standard deviation of a
    /// `[B, C, H, W]` map: `sigma = sqrt(mean((x - mu)^2) + eps)`.
    pub fn instance_stats(&self, eps: f64) -> Result<(Tensor, Tensor)> {
        let &[b, c, _, _] = self.shape() else {
            return Err(Error::shape(
                "instance_stats",
                format!("expected [B, C, H, W], got {:?}", self.shape()),
            ));
        };
        let mu = self.mean_axes(&[2, 3], true)?;
        let var = self.sub(&mu)?.square()?.mean_axes(&[2, 3], false)?;
        let sigma = var.add_scalar(eps)?.sqrt()?;
        Ok((mu.reshape(&[b, c])?, sigma))
    }

    /// Euclidean norm of all elements, as a rank-0 tensor. The gradient at the
    /// origin is taken as zero.
    pub fn l2_norm(&self) -> Result<Tensor> {
        let n = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        cost::record(Primitive::Reduce, 2 * self.numel() as u64);
        let x = self.clone();
        Tensor::from_op(
            "l2_norm",
            vec![n],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = if n > 0.0 { g[0] / n } else { 0.0 };
                vec![Some(x.data().iter().map(|v| v * scale).collect())]
            }),
        )
    }

    /// Euclidean norm over the last axis; output drops that axis.
    pub fn l2_norm_last(&self) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_norm_last", "rank-0 input"))?;
        let norms: Vec<f64> = self
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        cost::record(Primitive::Reduce, 2 * self.numel() as u64);
        let x = self.clone();
        let saved = norms.clone();
        Tensor::from_op(
            "l2_norm_last",
            norms,
            self.shape()[..self.rank() - 1].to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(x.numel());
                for ((row, &n), gi) in x.data().chunks(d).zip(&saved).zip(g) {
                    let scale = if n > 0.0 { gi / n } else { 0.0 };
                    gx.extend(row.iter().map(|v| v * scale));
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_stats_examples() {
        let x = Tensor::new(vec![1.0, 3.0], &[1, 1, 1, 2]).unwrap();
        let (mu, sigma) = x.instance_stats(0.0).unwrap();
        assert_eq!(mu.data(), &[2.0]);
        assert_eq!(sigma.data(), &[1.0]);

        let x = Tensor::full(&[2, 3, 2, 2], 0.75);
        let (mu, sigma) = x.instance_stats(INSTANCE_EPS).unwrap();
        assert_eq!(mu.shape(), &[2, 3]);
        assert!(mu.data().iter().all(|&m| m == 0.75));
        assert!(sigma.data().iter().all(|&s| (s - INSTANCE_EPS.sqrt()).abs() < 1e-18));
    }

    #[test]
    fn norms() {
        let x = Tensor::param(vec![3.0, 4.0, 0.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(x.l2_norm().unwrap().item(), 5.0);
        let rows = x.l2_norm_last().unwrap();
        assert_eq!(rows.data(), &[5.0, 0.0]);
        rows.sum().unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        for (a, b) in g.data().iter().zip([0.6, 0.8, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
