//! Distribution-fit diagnostics for latent tensors.
//!
//! The central tool is the exact one-sample Kolmogorov-Smirnov statistic of
//! each channel's pooled latent values against the standard normal CDF,
//! optionally after standardizing by a learned base. Reports can pool
//! snapshots taken across epochs; the confidence halfwidth follows
//! 1.96 * std / sqrt(channels * epochs).
//!
//! A Monte-Carlo KL check estimates the data-to-model divergence in both
//! input space and latent space on the same samples; by the change of
//! variables the two estimators are algebraically identical, so any gap
//! beyond rounding indicates a broken log-determinant.

use serde::Serialize;

use crate::base::BaseDistribution;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{Rng, Shape4, Tensor4};

/// Standard normal CDF through the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Asymptotic 5% critical value of the one-sample KS statistic.
pub fn ks_critical_5pct(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

/// Exact one-sample KS statistic against a reference CDF:
/// max over the sorted sample of max(i/n - F(x_i), F(x_i) - (i-1)/n).
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "ks_statistic" });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("ks_statistic"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Domain {
                op: "ks_statistic",
                detail: format!("reference CDF returned {f} at {x}"),
            });
        }
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsReport {
    /// Per-channel statistic; when snapshots are pooled, the per-channel
    /// mean across snapshots.
    pub per_channel_ks: Vec<f64>,
    /// Grand mean over every pooled value.
    pub mean: f64,
    /// 1.96 * std(pooled values) / sqrt(channels * epochs).
    pub ci95_halfwidth: f64,
    /// Pooled observations per channel in one snapshot (B * H * W).
    pub n_samples: usize,
    /// Number of pooled snapshots.
    pub n_epochs: usize,
}

fn mean_unbiased_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn report_from_snapshots(snapshots: &[Vec<f64>], n_samples: usize) -> Result<KsReport> {
    if snapshots.is_empty() {
        return Err(Error::EmptyInput { op: "KsReport" });
    }
    let channels = snapshots[0].len();
    let mut per_channel_ks = vec![0.0f64; channels];
    let mut all = Vec::with_capacity(channels * snapshots.len());
    for snap in snapshots {
        for (c, &v) in snap.iter().enumerate() {
            per_channel_ks[c] += v;
            all.push(v);
        }
    }
    for v in &mut per_channel_ks {
        *v /= snapshots.len() as f64;
    }
    let (mean, std) = mean_unbiased_std(&all);
    let ci95_halfwidth = 1.96 * std / (all.len() as f64).sqrt();
    Ok(KsReport {
        per_channel_ks,
        mean,
        ci95_halfwidth,
        n_samples,
        n_epochs: snapshots.len(),
    })
}

/// KS of each channel's pooled (batch x height x width) values against the
/// standard normal, after standardizing by `base` when one is given. A model
/// whose latents truly follow the base lands at the null level.
pub fn channel_ks_report(z: &Tensor4, base: Option<&BaseDistribution>) -> Result<KsReport> {
    let standardized;
    let z = match base {
        Some(b) => {
            standardized = b.standardize(z)?;
            &standardized
        }
        None => z,
    };
    let s = z.shape();
    if s.is_empty() {
        return Err(Error::EmptyInput {
            op: "channel_ks_report",
        });
    }
    let plane = s.h * s.w;
    let mut per_channel = Vec::with_capacity(s.c);
    let mut pooled = vec![0.0f64; s.b * plane];
    for c in 0..s.c {
        for b in 0..s.b {
            let off = (b * s.c + c) * plane;
            pooled[b * plane..(b + 1) * plane].copy_from_slice(&z.data()[off..off + plane]);
        }
        per_channel.push(ks_statistic(&pooled, normal_cdf)?);
    }
    report_from_snapshots(&[per_channel], s.b * plane)
}

/// Accumulator for KS snapshots taken across epochs.
#[derive(Clone, Debug, Default)]
pub struct KsPool {
    snapshots: Vec<Vec<f64>>,
    n_samples: usize,
}

impl KsPool {
    pub fn new() -> Self {
        KsPool::default()
    }

    pub fn add_report(&mut self, report: &KsReport) -> Result<()> {
        if let Some(first) = self.snapshots.first() {
            if first.len() != report.per_channel_ks.len() {
                return Err(Error::ShapeMismatch {
                    op: "KsPool::add_report",
                    expected: format!("{} channels", first.len()),
                    got: format!("{}", report.per_channel_ks.len()),
                });
            }
        }
        self.snapshots.push(report.per_channel_ks.clone());
        self.n_samples = report.n_samples;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn report(&self) -> Result<KsReport> {
        report_from_snapshots(&self.snapshots, self.n_samples)
    }
}

/// Mean of squared entries over the whole tensor.
pub fn mean_square_statistic(z: &Tensor4) -> Result<f64> {
    if z.shape().is_empty() {
        return Err(Error::EmptyInput {
            op: "mean_square_statistic",
        });
    }
    let n = z.shape().len() as f64;
    Ok(z.data().iter().map(|v| v * v).sum::<f64>() / n)
}

/// Diagonal Gaussian data source with a known per-sample log density, used
/// by the KL identity check (a sampler without a closed-form density cannot
/// drive that diagnostic).
#[derive(Clone, Debug)]
pub struct GaussianSource {
    mean: Tensor4,
    std: Tensor4,
}

impl GaussianSource {
    pub fn from_parts(mean: Tensor4, std: Tensor4) -> Result<Self> {
        if mean.shape() != std.shape() || mean.shape().b != 1 {
            return Err(Error::ShapeMismatch {
                op: "GaussianSource::from_parts",
                expected: format!("matching (1,C,H,W), got mean {}", mean.shape()),
                got: std.shape().to_string(),
            });
        }
        if std.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain {
                op: "GaussianSource::from_parts",
                detail: "standard deviations must be positive".to_string(),
            });
        }
        Ok(GaussianSource { mean, std })
    }

    pub fn isotropic(c: usize, h: usize, w: usize, mean: f64, std: f64) -> Result<Self> {
        let shape = Shape4::new(1, c, h, w);
        GaussianSource::from_parts(Tensor4::filled(shape, mean)?, Tensor4::filled(shape, std)?)
    }

    pub fn shape(&self) -> Shape4 {
        self.mean.shape()
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Tensor4> {
        let s = self.shape();
        let out_shape = Shape4::new(n, s.c, s.h, s.w);
        let dim = s.len();
        let mut data = Vec::with_capacity(out_shape.len());
        for _ in 0..n {
            for d in 0..dim {
                data.push(self.mean.data()[d] + self.std.data()[d] * rng.next_gaussian());
            }
        }
        Tensor4::from_vec(out_shape, data)
    }

    pub fn log_density(&self, x: &Tensor4) -> Result<Vec<f64>> {
        let s = self.shape();
        let xs = x.shape();
        if (xs.c, xs.h, xs.w) != (s.c, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op: "GaussianSource::log_density",
                expected: format!("(*,{},{},{})", s.c, s.h, s.w),
                got: xs.to_string(),
            });
        }
        let dim = s.len();
        let half_ln_2pi = (2.0 * std::f64::consts::PI).ln() / 2.0;
        let mut out = Vec::with_capacity(xs.b);
        for b in 0..xs.b {
            let mut acc = 0.0;
            for d in 0..dim {
                let sd = self.std.data()[d];
                let t = (x.data()[b * dim + d] - self.mean.data()[d]) / sd;
                acc += -half_ln_2pi - sd.ln() - 0.5 * t * t;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlCheck {
    /// Mean of log p_data(x) - log p_model(x) over the draws.
    pub kl_x: f64,
    /// Same divergence estimated in latent space from the same draws.
    pub kl_z: f64,
    /// Monte-Carlo standard error of the input-space estimate.
    pub stderr: f64,
    pub n: usize,
}

/// Estimate KL(data || model) twice from shared samples: once in input space
/// against the flow's full log-likelihood, once in latent space against the
/// pushforward of the data density. The two estimates must agree to rounding.
pub fn kl_identity_check(
    model: &FlowModel,
    base: &BaseDistribution,
    source: &GaussianSource,
    n: usize,
    rng: &mut Rng,
) -> Result<KlCheck> {
    if n == 0 {
        return Err(Error::EmptyInput {
            op: "kl_identity_check",
        });
    }
    const CHUNK: usize = 8192;
    let mut sum_x = 0.0f64;
    let mut sum_x_sq = 0.0f64;
    let mut sum_z = 0.0f64;
    let mut left = n;
    while left > 0 {
        let take = left.min(CHUNK);
        let x = source.sample(rng, take)?;
        let (z, logdet) = model.forward(&x)?;
        let lp_star = source.log_density(&x)?;
        let lp_z = base.log_prob(&z)?;
        for b in 0..take {
            let term_x = lp_star[b] - (lp_z[b] + logdet[b]);
            let term_z = (lp_star[b] - logdet[b]) - lp_z[b];
            sum_x += term_x;
            sum_x_sq += term_x * term_x;
            sum_z += term_z;
        }
        left -= take;
    }
    let nf = n as f64;
    let kl_x = sum_x / nf;
    let kl_z = sum_z / nf;
    let var = (sum_x_sq / nf - kl_x * kl_x).max(0.0);
    let stderr = (var / nf).sqrt();
    if !kl_x.is_finite() || !kl_z.is_finite() {
        return Err(Error::non_finite("kl_identity_check"));
    }
    Ok(KlCheck {
        kl_x,
        kl_z,
        stderr,
        n,
    })
}
