//! Learnable diagonal Gaussian base distribution over the latent tensor.
//!
//! Parameters are a mean and a log standard deviation per latent dimension
//! (channel x height x width), both initialized to zero so the distribution
//! starts as standard normal and a model trained without base updates stays
//! exactly N(0, I). Gradients are closed form; the log-determinant of the
//! flow never enters here because it does not depend on these parameters.

use crate::error::{Error, Result};
use crate::numerics::{Shape4, Tensor4};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8; // ln(2*pi)/2

#[derive(Clone, Debug, PartialEq)]
pub struct BaseDistribution {
    mu: Tensor4,
    log_sigma: Tensor4,
}

impl BaseDistribution {
    /// Standard normal: zero mean, zero log standard deviation.
    pub fn standard(c: usize, h: usize, w: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid_spec("base: dimensions must be >= 1"));
        }
        let shape = Shape4::new(1, c, h, w);
        Ok(BaseDistribution {
            mu: Tensor4::zeros(shape),
            log_sigma: Tensor4::zeros(shape),
        })
    }

    pub fn from_parts(mu: Tensor4, log_sigma: Tensor4) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "base.from_parts",
                expected: mu.shape().to_string(),
                got: log_sigma.shape().to_string(),
            });
        }
        if mu.shape().b != 1 {
            return Err(Error::ShapeMismatch {
                op: "base.from_parts",
                expected: "batch dimension 1".to_string(),
                got: mu.shape().to_string(),
            });
        }
        Ok(BaseDistribution { mu, log_sigma })
    }

    pub fn set_parts(&mut self, mu: Tensor4, log_sigma: Tensor4) -> Result<()> {
        let fresh = BaseDistribution::from_parts(mu, log_sigma)?;
        if fresh.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "base.set_parts",
                expected: self.shape().to_string(),
                got: fresh.shape().to_string(),
            });
        }
        *self = fresh;
        Ok(())
    }

    pub fn shape(&self) -> Shape4 {
        self.mu.shape()
    }

    pub fn mu(&self) -> &Tensor4 {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor4 {
        &self.log_sigma
    }

    /// True when every parameter is exactly zero (untouched standard normal).
    pub fn is_standard(&self) -> bool {
        self.mu.data().iter().all(|&v| v == 0.0)
            && self.log_sigma.data().iter().all(|&v| v == 0.0)
    }

    /// Both parameter blocks as one flat vector: mean first, then log sigma.
    pub fn psi_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.shape().len());
        out.extend_from_slice(self.mu.data());
        out.extend_from_slice(self.log_sigma.data());
        out
    }

    pub fn set_psi_flat(&mut self, psi: &[f64]) -> Result<()> {
        let n = self.shape().len();
        if psi.len() != 2 * n {
            return Err(Error::ShapeMismatch {
                op: "base.set_psi_flat",
                expected: format!("{} values", 2 * n),
                got: format!("{}", psi.len()),
            });
        }
        let shape = self.shape();
        self.mu = Tensor4::from_vec(shape, psi[..n].to_vec())?;
        self.log_sigma = Tensor4::from_vec(shape, psi[n..].to_vec())?;
        Ok(())
    }

    fn check_latent(&self, z: &Tensor4, op: &'static str) -> Result<()> {
        let s = self.shape();
        let zs = z.shape();
        if (zs.c, zs.h, zs.w) != (s.c, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("(*,{},{},{})", s.c, s.h, s.w),
                got: zs.to_string(),
            });
        }
        Ok(())
    }

    /// Per-sample log density: sum over latent dimensions of
    /// -ln(2*pi)/2 - log_sigma - (z - mu)^2 / (2 * sigma^2).
    pub fn log_prob(&self, z: &Tensor4) -> Result<Vec<f64>> {
        self.check_latent(z, "base.log_prob")?;
        let n = self.shape().len();
        let zs = z.shape();
        let mu = self.mu.data();
        let ls = self.log_sigma.data();
        let zd = z.data();
        let mut out = Vec::with_capacity(zs.b);
        for b in 0..zs.b {
            let row = &zd[b * n..(b + 1) * n];
            let mut acc = 0.0;
            for d in 0..n {
                let diff = row[d] - mu[d];
                let var = (2.0 * ls[d]).exp();
                acc += -HALF_LN_2PI - ls[d] - diff * diff / (2.0 * var);
            }
            if !acc.is_finite() {
                return Err(Error::non_finite_at("base.log_prob", format!("sample {b}")));
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Batch-mean gradients of the negative log-likelihood with respect to
    /// (mu, log_sigma):
    ///   d/d mu    = mean_b (mu - z_b) / sigma^2
    ///   d/d logsd = mean_b (1 - (z_b - mu)^2 / sigma^2)
    pub fn grad_psi(&self, z: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        self.check_latent(z, "base.grad_psi")?;
        let n = self.shape().len();
        let zs = z.shape();
        if zs.b == 0 {
            return Err(Error::EmptyInput {
                op: "base.grad_psi",
            });
        }
        let mu = self.mu.data();
        let ls = self.log_sigma.data();
        let zd = z.data();
        let inv_b = 1.0 / zs.b as f64;
        let mut g_mu = vec![0.0f64; n];
        let mut g_ls = vec![0.0f64; n];
        for b in 0..zs.b {
            let row = &zd[b * n..(b + 1) * n];
            for d in 0..n {
                let var = (2.0 * ls[d]).exp();
                let diff = row[d] - mu[d];
                g_mu[d] += -diff / var;
                g_ls[d] += 1.0 - diff * diff / var;
            }
        }
        for d in 0..n {
            g_mu[d] *= inv_b;
            g_ls[d] *= inv_b;
        }
        let shape = self.shape();
        let g_mu = Tensor4::from_vec(shape, g_mu)
            .map_err(|_| Error::non_finite("base.grad_psi"))?;
        let g_ls = Tensor4::from_vec(shape, g_ls)
            .map_err(|_| Error::non_finite("base.grad_psi"))?;
        Ok((g_mu, g_ls))
    }

    /// Per-element gradient of the per-sample negative log density with
    /// respect to z: (z - mu) / sigma^2.
    pub fn grad_z(&self, z: &Tensor4) -> Result<Tensor4> {
        self.check_latent(z, "base.grad_z")?;
        let n = self.shape().len();
        let zs = z.shape();
        let mu = self.mu.data();
        let ls = self.log_sigma.data();
        let zd = z.data();
        let mut out = vec![0.0f64; zd.len()];
        for b in 0..zs.b {
            for d in 0..n {
                let i = b * n + d;
                let var = (2.0 * ls[d]).exp();
                out[i] = (zd[i] - mu[d]) / var;
            }
        }
        Tensor4::from_vec(zs, out).map_err(|_| Error::non_finite("base.grad_z"))
    }

    /// (z - mu) / sigma per element. With zero parameters this is the
    /// identity bit for bit.
    pub fn standardize(&self, z: &Tensor4) -> Result<Tensor4> {
        self.check_latent(z, "base.standardize")?;
        let n = self.shape().len();
        let zs = z.shape();
        let mu = self.mu.data();
        let ls = self.log_sigma.data();
        let zd = z.data();
        let mut out = vec![0.0f64; zd.len()];
        for b in 0..zs.b {
            for d in 0..n {
                let i = b * n + d;
                out[i] = (zd[i] - mu[d]) / ls[d].exp();
            }
        }
        Tensor4::from_vec(zs, out).map_err(|_| Error::non_finite("base.standardize"))
    }
}
