//! Maximum-likelihood training with an alternating schedule for the base
//! distribution.
//!
//! Normal epochs take joint Adam steps on the flow parameters theta (and,
//! when the learnable base is active, on psi as well) at rate eta1. When
//! alternation is enabled, every epoch at a multiple of the freezing
//! interval past warm-up becomes a base-only epoch: theta is untouched and
//! psi takes plain SGD steps at eta2 with its gradient norm-clipped.
//! Warm-up epochs freeze psi entirely. Stereotype mode instead trains psi
//! jointly at eta1 with no alternating epochs at all.
//!
//! The loss is the batch-mean negative log-likelihood under the flow; the
//! psi gradient deliberately carries no log-determinant term because the
//! coupling determinant does not depend on the base.

use serde::{Deserialize, Serialize};

use crate::base::BaseDistribution;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{Rng, Tensor4};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const STREAM_BATCHES: u64 = 0x62_61_74; // shuffle stream tag

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Joint-step learning rate.
    pub eta1: f64,
    /// Cap for the base-only rate; equals the rate itself while eta1 is
    /// constant (see eta2_schedule).
    pub eta2_max: f64,
    /// Epochs between base-only epochs.
    pub freezing_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm ceiling for the psi gradient.
    pub clip_norm: f64,
    /// Leading epochs during which psi stays frozen.
    pub warmup_epochs: usize,
    /// Alternating schedule on; mutually exclusive with stereotype_mode.
    pub altub_enabled: bool,
    /// Train psi jointly at eta1 with no alternating epochs.
    pub stereotype_mode: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta1: 1e-3,
            eta2_max: 0.05,
            freezing_interval: 5,
            epochs: 10,
            batch_size: 32,
            clip_norm: 100.0,
            warmup_epochs: 0,
            altub_enabled: true,
            stereotype_mode: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0) || !self.eta1.is_finite() {
            return Err(Error::invalid_spec("train: eta1 must be > 0"));
        }
        if !(self.eta2_max > 0.0 && self.eta2_max <= 1.0) {
            return Err(Error::invalid_spec("train: eta2_max must lie in (0, 1]"));
        }
        if self.freezing_interval == 0 {
            return Err(Error::invalid_spec("train: freezing_interval must be >= 1"));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::invalid_spec("train: clip_norm must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_spec("train: epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_spec("train: batch_size must be >= 1"));
        }
        if self.altub_enabled && self.stereotype_mode {
            return Err(Error::invalid_spec(
                "train: altub_enabled and stereotype_mode are mutually exclusive",
            ));
        }
        Ok(())
    }

    /// Base-only epochs are exactly {e : e = 0 mod freezing_interval,
    /// e >= warmup_epochs} and exist only under the alternating schedule.
    pub fn is_base_only_epoch(&self, epoch: usize) -> bool {
        self.altub_enabled
            && epoch >= self.warmup_epochs
            && epoch % self.freezing_interval == 0
    }

    /// Whether psi joins the Adam step on a joint epoch. The alternating
    /// schedule trains {theta, psi} together on normal epochs; warm-up
    /// freezes psi entirely; a frozen base never trains.
    pub fn psi_joins_joint_step(&self, epoch: usize) -> bool {
        (self.altub_enabled || self.stereotype_mode) && epoch >= self.warmup_epochs
    }
}

/// eta2(t) = eta2_max * eta1(t) / max_t eta1(t) for an arbitrary eta1
/// profile. Scheduled decay of eta1 scales eta2 proportionally.
pub fn eta2_from_profile(eta2_max: f64, eta1_profile: &[f64], epoch: usize) -> Result<f64> {
    if eta1_profile.is_empty() {
        return Err(Error::EmptyInput {
            op: "eta2_from_profile",
        });
    }
    if epoch >= eta1_profile.len() {
        return Err(Error::Domain {
            op: "eta2_from_profile",
            detail: format!("epoch {epoch} outside profile of {}", eta1_profile.len()),
        });
    }
    let peak = eta1_profile.iter().cloned().fold(f64::MIN, f64::max);
    if !(peak > 0.0) || eta1_profile.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::Domain {
            op: "eta2_from_profile",
            detail: "eta1 profile entries must be positive and finite".to_string(),
        });
    }
    Ok(eta2_max * eta1_profile[epoch] / peak)
}

/// The engine runs a constant eta1, so the ratio eta1(t)/max eta1 is one
/// and the base-only rate equals eta2_max at every alternating epoch.
pub fn eta2_schedule(config: &TrainConfig, _epoch: usize) -> f64 {
    config.eta2_max
}

/// Scale `grad` so its global norm does not exceed `max_norm`; returns the
/// applied scale. Direction is preserved, only magnitude changes.
pub fn clip_to_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        scale
    } else {
        1.0
    }
}

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Batch-mean negative log-likelihood and its gradients. The theta gradient
/// flows through both the latent and the log-determinant; the psi gradient
/// (flat [mu | log_sigma], matching psi_flat) sees only the latent term.
pub fn loss_and_grads(
    model: &FlowModel,
    base: &BaseDistribution,
    batch: &Tensor4,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let b = batch.shape().b;
    if b == 0 {
        return Err(Error::EmptyInput {
            op: "loss_and_grads",
        });
    }
    let (z, logdet) = model.forward(batch)?;
    let log_prob = base.log_prob(&z)?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for i in 0..b {
        loss -= (log_prob[i] + logdet[i]) * inv_b;
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("loss_and_grads"));
    }
    let upstream_z = base.grad_z(&z)?.mul_scalar(inv_b)?;
    let upstream_logdet = vec![-inv_b; b];
    let (grad_theta, _) = model.backward(batch, &upstream_z, &upstream_logdet)?;
    let (g_mu, g_ls) = base.grad_psi(&z)?;
    let mut grad_psi = Vec::with_capacity(2 * g_mu.data().len());
    grad_psi.extend_from_slice(g_mu.data());
    grad_psi.extend_from_slice(g_ls.data());
    Ok((loss, grad_theta, grad_psi))
}

/// Optimizer state threaded through the epochs: Adam moments for theta and
/// psi, the batch-shuffling RNG, and the loss history.
#[derive(Clone, Debug)]
pub struct TrainState {
    epoch: usize,
    adam_theta: Adam,
    adam_psi: Adam,
    rng: Rng,
    loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, model: &FlowModel, base: &BaseDistribution) -> Self {
        TrainState {
            epoch: 0,
            adam_theta: Adam::new(model.param_count()),
            adam_psi: Adam::new(2 * base.shape().len()),
            rng: Rng::new(config.seed).derive(STREAM_BATCHES),
            loss_history: Vec::with_capacity(config.epochs),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }
}

/// One epoch over `data` in shuffled batches. Base-only epochs leave theta
/// bit-identical and move psi by plain clipped SGD at eta2; joint epochs
/// move theta (and psi when it trains) by Adam at eta1. Any non-finite
/// value aborts the epoch: parameters roll back to their epoch-start state
/// and the error propagates.
pub fn train_epoch(
    model: &mut FlowModel,
    base: &mut BaseDistribution,
    data: &Tensor4,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64> {
    config.validate()?;
    if state.epoch >= config.epochs {
        return Err(Error::invalid_spec(format!(
            "train: epoch {} past configured total {}",
            state.epoch, config.epochs
        )));
    }
    if data.shape().is_empty() {
        return Err(Error::EmptyInput { op: "train_epoch" });
    }
    let theta_snapshot = model.params_flat();
    let psi_snapshot = base.psi_flat();
    let adam_theta_snapshot = state.adam_theta.clone();
    let adam_psi_snapshot = state.adam_psi.clone();
    let rng_snapshot = state.rng.clone();

    match run_epoch_batches(model, base, data, config, state) {
        Ok(epoch_loss) => {
            state.epoch += 1;
            state.loss_history.push(epoch_loss);
            Ok(epoch_loss)
        }
        Err(err) => {
            model
                .set_params_flat(&theta_snapshot)
                .expect("epoch-start parameters restore");
            base.set_psi_flat(&psi_snapshot)
                .expect("epoch-start base restore");
            state.adam_theta = adam_theta_snapshot;
            state.adam_psi = adam_psi_snapshot;
            state.rng = rng_snapshot;
            Err(err)
        }
    }
}

fn run_epoch_batches(
    model: &mut FlowModel,
    base: &mut BaseDistribution,
    data: &Tensor4,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64> {
    let n = data.shape().b;
    let mut order: Vec<usize> = (0..n).collect();
    state.rng.shuffle(&mut order);
    let base_only = config.is_base_only_epoch(state.epoch);
    let psi_joint = config.psi_joins_joint_step(state.epoch);
    let eta2 = eta2_schedule(config, state.epoch);

    let mut loss_sum = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let batch = data.select_batch(chunk)?;
        if base_only {
            // theta untouched; forward pass only feeds the psi gradient
            let (z, logdet) = model.forward(&batch)?;
            let log_prob = base.log_prob(&z)?;
            let mut batch_loss = 0.0;
            for i in 0..chunk.len() {
                batch_loss -= (log_prob[i] + logdet[i]) / chunk.len() as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::non_finite("train_epoch"));
            }
            let (g_mu, g_ls) = base.grad_psi(&z)?;
            let mut grad_psi = Vec::with_capacity(2 * g_mu.data().len());
            grad_psi.extend_from_slice(g_mu.data());
            grad_psi.extend_from_slice(g_ls.data());
            clip_to_norm(&mut grad_psi, config.clip_norm);
            let mut psi = base.psi_flat();
            for (p, g) in psi.iter_mut().zip(&grad_psi) {
                *p -= eta2 * g;
            }
            base.set_psi_flat(&psi)?;
            loss_sum += batch_loss * chunk.len() as f64;
        } else {
            let (batch_loss, grad_theta, mut grad_psi) = loss_and_grads(model, base, &batch)?;
            let mut theta = model.params_flat();
            state.adam_theta.step(&mut theta, &grad_theta, config.eta1);
            if theta.iter().any(|p| !p.is_finite()) {
                return Err(Error::non_finite("train_epoch"));
            }
            model.set_params_flat(&theta)?;
            if psi_joint {
                clip_to_norm(&mut grad_psi, config.clip_norm);
                let mut psi = base.psi_flat();
                state.adam_psi.step(&mut psi, &grad_psi, config.eta1);
                base.set_psi_flat(&psi)?;
            }
            loss_sum += batch_loss * chunk.len() as f64;
        }
    }
    Ok(loss_sum / n as f64)
}

/// Everything an end-of-epoch observer may inspect.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub loss: f64,
    pub base_only: bool,
    pub model: &'a FlowModel,
    pub base: &'a BaseDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub base_only: bool,
    /// Named metrics contributed by the fit observer, in callback order.
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRow>,
}

/// Run the full schedule, invoking `observer` after every epoch; its named
/// metrics land in the report rows. Same seed and config reproduce the
/// report bit-for-bit.
pub fn fit(
    model: &mut FlowModel,
    base: &mut BaseDistribution,
    train_data: &Tensor4,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochView) -> Result<Vec<(String, f64)>>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_data.shape().is_empty() {
        return Err(Error::EmptyInput { op: "fit" });
    }
    let mut state = TrainState::new(config, model, base);
    let mut rows = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let epoch = state.epoch();
        let base_only = config.is_base_only_epoch(epoch);
        let loss = train_epoch(model, base, train_data, config, &mut state)?;
        let metrics = observer(&EpochView {
            epoch,
            loss,
            base_only,
            model,
            base,
        })?;
        rows.push(EpochRow {
            epoch,
            loss,
            base_only,
            metrics,
        });
    }
    Ok(TrainReport {
        config: config.clone(),
        epochs: rows,
    })
}

/// Observer that records nothing; for callers that only want the loss curve.
pub fn no_metrics(_: &EpochView) -> Result<Vec<(String, f64)>> {
    Ok(Vec::new())
}
