//! Federated training loop with pluggable uplink and downlink schemes.
//!
//! Each round: sample K of N clients, broadcast the global model over the
//! downlink (every client trains from its own noisy copy), run E local
//! mini-batch SGD steps, send the differential `received − local` over the
//! uplink, and update `w_{t+1} = w_t − x̃/K`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{estimate_csi, ChannelModelConfig, ChannelSampler, CorrelationKind, EstimationMode};
use crate::data::Dataset;
use crate::numerics::{solve_real_spd, NumericsError, RngStream};
use crate::phy::{
    db_to_linear, downlink_broadcast_with_noise, draw_downlink_noise, draw_uplink_noise, linear_to_db,
    uplink_aggregate_with_noise, DownlinkScheme, DownlinkSchemeConfig, PhyError, UplinkPayload, UplinkScheme,
    UplinkSchemeConfig,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round}{}: {source}", client.map(|c| format!(", client {c}")).unwrap_or_default())]
    Phy { round: usize, client: Option<usize>, source: PhyError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, FlError>;

/// Per-sample loss of a linear model `s = a·w`, plus `(reg/2)‖w‖²` per client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossModel {
    /// Least squares `½(a·w − y)²` with ridge; client k's objective is the
    /// quadratic with Hessian `A_kᵀA_k/D_k + ridge·I`.
    Quadratic { ridge: f64 },
    /// `log(1 + exp(−y a·w))`.
    LogisticL2 { lambda: f64 },
    /// Smoothed hinge on the margin `z = y a·w`: 0 for `z ≥ 1`,
    /// `(1−z)²/(2s)` for `1−s < z < 1`, `1 − z − s/2` below.
    SvmHingeSmoothed { lambda: f64, smoothing: f64 },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sqr(a: &[f64]) -> f64 {
    dot(a, a)
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Quadratic { ridge } => ridge >= 0.0,
            Self::LogisticL2 { lambda } => lambda > 0.0,
            Self::SvmHingeSmoothed { lambda, smoothing } => lambda > 0.0 && smoothing > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FlError::Config(format!("invalid loss parameters {self:?}")))
        }
    }

    pub fn regularizer(&self) -> f64 {
        match *self {
            Self::Quadratic { ridge } => ridge,
            Self::LogisticL2 { lambda } | Self::SvmHingeSmoothed { lambda, .. } => lambda,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Self::Quadratic { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Quadratic { .. } => "quadratic",
            Self::LogisticL2 { .. } => "logistic_l2",
            Self::SvmHingeSmoothed { .. } => "svm_hinge_smoothed",
        }
    }

    /// Unregularized loss of one sample given its score `s = a·w`.
    fn sample_value(&self, s: f64, y: f64) -> f64 {
        match *self {
            Self::Quadratic { .. } => 0.5 * (s - y).powi(2),
            Self::LogisticL2 { .. } => {
                let z = y * s;
                if z > 0.0 {
                    (-z).exp().ln_1p()
                } else {
                    -z + z.exp().ln_1p()
                }
            }
            Self::SvmHingeSmoothed { smoothing, .. } => {
                let z = y * s;
                if z >= 1.0 {
                    0.0
                } else if z > 1.0 - smoothing {
                    (1.0 - z).powi(2) / (2.0 * smoothing)
                } else {
                    1.0 - z - smoothing / 2.0
                }
            }
        }
    }

    /// Derivative of [`Self::sample_value`] with respect to the score.
    fn sample_slope(&self, s: f64, y: f64) -> f64 {
        match *self {
            Self::Quadratic { .. } => s - y,
            Self::LogisticL2 { .. } => -y / (1.0 + (y * s).exp()),
            Self::SvmHingeSmoothed { smoothing, .. } => {
                let z = y * s;
                if z >= 1.0 {
                    0.0
                } else if z > 1.0 - smoothing {
                    -y * (1.0 - z) / smoothing
                } else {
                    -y
                }
            }
        }
    }

    /// Client objective `f_k(w)`.
    pub fn loss(&self, w: &[f64], data: &Dataset) -> f64 {
        let total: f64 = (0..data.len()).map(|i| self.sample_value(dot(data.row(i), w), data.label(i))).sum();
        total / data.len() as f64 + 0.5 * self.regularizer() * norm_sqr(w)
    }

    /// Gradient of one sample's loss including the regularizer.
    pub fn sample_gradient(&self, w: &[f64], data: &Dataset, i: usize) -> Vec<f64> {
        let a = data.row(i);
        let g = self.sample_slope(dot(a, w), data.label(i));
        let reg = self.regularizer();
        a.iter().zip(w).map(|(ai, wi)| g * ai + reg * wi).collect()
    }

    /// Mean gradient over `indices` (all samples when `None`).
    pub fn gradient(&self, w: &[f64], data: &Dataset, indices: Option<&[usize]>) -> Vec<f64> {
        let mut grad = vec![0.0; w.len()];
        let mut add = |i: usize| {
            let a = data.row(i);
            let g = self.sample_slope(dot(a, w), data.label(i));
            grad.iter_mut().zip(a).for_each(|(acc, ai)| *acc += g * ai);
        };
        let count = match indices {
            Some(idx) => {
                idx.iter().for_each(|&i| add(i));
                idx.len()
            }
            None => {
                (0..data.len()).for_each(&mut add);
                data.len()
            }
        };
        let reg = self.regularizer();
        let inv = 1.0 / count as f64;
        grad.iter_mut().zip(w).for_each(|(g, wi)| *g = *g * inv + reg * wi);
        grad
    }

    /// `(μ, L)` valid for every client objective.
    pub fn curvature(&self, datasets: &[Dataset]) -> (f64, f64) {
        let reg = self.regularizer();
        match *self {
            Self::Quadratic { .. } => datasets.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
                let eig = SymmetricEigen::new(hessian_unregularized(d)).eigenvalues;
                let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
                let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo.min(min.max(0.0) + reg), hi.max(max + reg))
            }),
            Self::LogisticL2 { .. } => (reg, reg + max_norm(datasets) / 4.0),
            Self::SvmHingeSmoothed { smoothing, .. } => (reg, reg + max_norm(datasets) / smoothing),
        }
    }

    /// Minimizer of the average of the client objectives: closed form for the
    /// quadratic loss, `steps` of full-batch gradient descent at `1/L`
    /// otherwise.
    pub fn minimize(&self, datasets: &[Dataset], steps: usize) -> Result<Vec<f64>> {
        let d = datasets.first().map(Dataset::dim).ok_or_else(|| FlError::Config("no datasets".into()))?;
        match *self {
            Self::Quadratic { ridge } => {
                let mut h = DMatrix::zeros(d, d);
                let mut rhs = vec![0.0; d];
                for data in datasets {
                    h += hessian_unregularized(data);
                    for i in 0..data.len() {
                        let y = data.label(i) / data.len() as f64;
                        rhs.iter_mut().zip(data.row(i)).for_each(|(r, a)| *r += y * a);
                    }
                }
                let n = datasets.len() as f64;
                let mut a: Vec<f64> = h.iter().map(|v| v / n).collect();
                (0..d).for_each(|i| a[i * d + i] += ridge);
                rhs.iter_mut().for_each(|r| *r /= n);
                Ok(solve_real_spd(&a, &rhs)?)
            }
            _ => {
                let (_, l) = self.curvature(datasets);
                let mut w = vec![0.0; d];
                for _ in 0..steps {
                    let g = global_gradient(self, &w, datasets);
                    w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= gi / l);
                }
                Ok(w)
            }
        }
    }
}

fn max_norm(datasets: &[Dataset]) -> f64 {
    datasets.iter().map(Dataset::max_row_norm_sqr).fold(0.0, f64::max)
}

/// `AᵀA/D` for one dataset.
fn hessian_unregularized(data: &Dataset) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(
        data.len(),
        data.dim(),
        &(0..data.len()).flat_map(|i| data.row(i).to_vec()).collect::<Vec<_>>(),
    );
    a.transpose() * &a / data.len() as f64
}

/// `F(w) = (1/N) Σ_k f_k(w)`.
pub fn global_loss(loss: &LossModel, w: &[f64], datasets: &[Dataset]) -> f64 {
    datasets.iter().map(|d| loss.loss(w, d)).sum::<f64>() / datasets.len() as f64
}

pub fn global_gradient(loss: &LossModel, w: &[f64], datasets: &[Dataset]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for d in datasets {
        g.iter_mut().zip(loss.gradient(w, d, None)).for_each(|(a, b)| *a += b);
    }
    let n = datasets.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

/// Fraction of samples with `sign(a·w) = y`.
pub fn accuracy(w: &[f64], data: &Dataset) -> f64 {
    let hits = (0..data.len()).filter(|&i| (dot(data.row(i), w) >= 0.0) == (data.label(i) > 0.0)).count();
    hits as f64 / data.len() as f64
}

/// `E` mini-batch SGD steps at constant `eta`. Batches are drawn without
/// replacement from a shuffled pass over the data; when fewer than
/// `batch_size` samples remain the data is reshuffled.
pub fn local_sgd(
    w_start: &[f64],
    data: &Dataset,
    loss: &LossModel,
    steps: usize,
    batch_size: usize,
    eta: f64,
    rng: &mut RngStream,
) -> Vec<f64> {
    let batch = batch_size.clamp(1, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut w = w_start.to_vec();
    for _ in 0..steps {
        if cursor + batch > data.len() {
            if batch < data.len() {
                order.shuffle(rng);
            }
            cursor = 0;
        }
        let g = loss.gradient(&w, data, Some(&order[cursor..cursor + batch]));
        cursor += batch;
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= eta * gi);
    }
    w
}

/// `x = w_received − w_local`.
pub fn compute_differential(w_received: &[f64], w_local: &[f64]) -> Vec<f64> {
    assert_eq!(w_received.len(), w_local.len(), "model length mismatch");
    w_received.iter().zip(w_local).map(|(a, b)| a - b).collect()
}

/// `w_{t+1} = w_t − x̃/K`. With an exact aggregate this is the mean of the
/// local models.
pub fn aggregate_global(w: &[f64], aggregate: &[f64], clients: usize) -> Vec<f64> {
    assert_eq!(w.len(), aggregate.len(), "model length mismatch");
    let k = clients as f64;
    w.iter().zip(aggregate).map(|(wi, xi)| wi - xi / k).collect()
}

/// `η_t = 2/(μ(t+γ))`.
pub fn lr_schedule(t: usize, mu: f64, gamma_shift: f64) -> f64 {
    2.0 / (mu * (t as f64 + gamma_shift))
}

/// Downlink SNR `max(floor, (1 − μη)/η²)`; the floor alone when `μη > 1`.
pub fn dl_power_schedule(mu: f64, eta: f64, floor_linear: f64) -> f64 {
    if mu * eta <= 1.0 {
        floor_linear.max((1.0 - mu * eta) / (eta * eta))
    } else {
        floor_linear
    }
}

/// Divide by the RMS entry; an all-zero payload is returned with scale 1.
pub fn normalize_payload(x: &[f64]) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if ms == 0.0 {
        return (x.to_vec(), 1.0);
    }
    let scale = ms.sqrt();
    (x.iter().map(|v| v / scale).collect(), scale)
}

pub fn denormalize(x: &[f64], scale: f64) -> Vec<f64> {
    x.iter().map(|v| v * scale).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DlPowerSchedule {
    /// Always `downlink.snr_dl_db`.
    #[default]
    Fixed,
    /// Grow with the learning rate, never below `initial_snr_db`.
    Theorem1Scaling { initial_snr_db: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadNormalization {
    None,
    #[default]
    PerRoundUnitPower,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub total_clients: usize,
    pub participants_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub mu: f64,
    pub gamma_shift: f64,
    pub antennas: usize,
    #[serde(default)]
    pub channel: CorrelationKind,
    #[serde(default)]
    pub csi: EstimationMode,
    pub uplink: UplinkSchemeConfig,
    pub downlink: DownlinkSchemeConfig,
    #[serde(default)]
    pub dl_power: DlPowerSchedule,
    #[serde(default)]
    pub normalization: PayloadNormalization,
    /// Evaluate loss and accuracy every this many rounds (and at the end).
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Keep every global iterate in [`FlState::trajectory`].
    #[serde(default)]
    pub record_models: bool,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(FlError::Config(s));
        if self.participants_per_round == 0 || self.participants_per_round > self.total_clients {
            return bad(format!(
                "need 1 <= K <= N, got K = {}, N = {}",
                self.participants_per_round, self.total_clients
            ));
        }
        if self.local_steps == 0 || self.rounds == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("local_steps, rounds, batch_size and eval_every must be >= 1".into());
        }
        if !(self.mu > 0.0) || !(self.gamma_shift >= 0.0) {
            return bad(format!("need mu > 0 and gamma_shift >= 0, got {}, {}", self.mu, self.gamma_shift));
        }
        ChannelModelConfig { antennas: self.antennas, clients: self.participants_per_round, kind: self.channel }
            .validate()
            .and_then(|_| self.csi.validate())
            .map_err(|e| FlError::Config(e.to_string()))?;
        self.uplink.validate().and_then(|_| self.downlink.validate()).map_err(|e| FlError::Config(e.to_string()))?;
        if let DlPowerSchedule::Theorem1Scaling { initial_snr_db } = self.dl_power {
            if !initial_snr_db.is_finite() {
                return bad(format!("initial downlink SNR must be finite, got {initial_snr_db}"));
            }
        }
        Ok(())
    }

    /// Learning rate of round `r` (1-based): the schedule at the index of
    /// the round's first local step.
    pub fn learning_rate(&self, round: usize) -> f64 {
        lr_schedule((round - 1) * self.local_steps + 1, self.mu, self.gamma_shift)
    }

    pub fn downlink_snr_db(&self, eta: f64) -> f64 {
        match self.dl_power {
            DlPowerSchedule::Fixed => self.downlink.snr_dl_db,
            DlPowerSchedule::Theorem1Scaling { initial_snr_db } => {
                linear_to_db(dl_power_schedule(self.mu, eta, db_to_linear(initial_snr_db)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// 0 is the initial model.
    pub round: usize,
    /// `F(w_t)` over all client data.
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    /// `‖w̄‖² / ‖w_{t} − w̄‖²` where `w̄` is the exact aggregate of this
    /// round's differentials; `None` for the ideal uplink.
    pub uplink_sinr: Option<f64>,
    /// `‖w‖² / mean_k ‖ŵ_k − w‖²` of the models the clients received;
    /// `None` for the ideal downlink.
    pub downlink_sinr: Option<f64>,
    /// Learning rate and downlink SNR used in this round; `None` for round 0.
    pub learning_rate: Option<f64>,
    pub snr_dl_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlState {
    pub global_model: Vec<f64>,
    pub round: usize,
    pub history: Vec<RoundLog>,
    /// `w_0 … w_T` when `record_models` is set.
    pub trajectory: Vec<Vec<f64>>,
}

const KEY_SAMPLING: u64 = 0;
const KEY_CHANNEL: u64 = 1;
const KEY_DOWNLINK: u64 = 2;
const KEY_UPLINK: u64 = 3;
const KEY_CLIENT: u64 = 4;

/// K of N clients, uniformly without replacement, in increasing order.
pub fn sample_clients(total: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(rng, total, k).into_vec();
    chosen.sort_unstable();
    chosen
}

fn ratio(signal: f64, error: f64) -> f64 {
    if error == 0.0 {
        f64::INFINITY
    } else {
        signal / error
    }
}

pub fn run_federated_training(
    cfg: &FlConfig,
    loss: &LossModel,
    datasets: &[Dataset],
    test_set: Option<&Dataset>,
    rng: &RngStream,
) -> Result<FlState> {
    let d = datasets.first().map(Dataset::dim).ok_or_else(|| FlError::Config("no client datasets".into()))?;
    run_federated_training_from(cfg, loss, datasets, test_set, &vec![0.0; d], rng)
}

/// Training from an explicit initial model. All randomness derives from
/// `rng` by (round, purpose[, client]) so runs are reproducible regardless of
/// thread count.
pub fn run_federated_training_from(
    cfg: &FlConfig,
    loss: &LossModel,
    datasets: &[Dataset],
    test_set: Option<&Dataset>,
    w0: &[f64],
    rng: &RngStream,
) -> Result<FlState> {
    cfg.validate()?;
    loss.validate()?;
    if datasets.len() != cfg.total_clients {
        return Err(FlError::Config(format!("{} datasets for N = {}", datasets.len(), cfg.total_clients)));
    }
    let size = datasets[0].len();
    if datasets.iter().any(|ds| ds.is_empty() || ds.len() != size || ds.dim() != w0.len()) {
        return Err(FlError::Config(
            "client datasets must be non-empty, equal-size and match the model dimension".into(),
        ));
    }
    let k = cfg.participants_per_round;
    let sampler = ChannelSampler::new(ChannelModelConfig { antennas: cfg.antennas, clients: k, kind: cfg.channel })
        .map_err(|e| FlError::Config(e.to_string()))?;
    let normalize = cfg.normalization == PayloadNormalization::PerRoundUnitPower;

    let evaluate = |w: &[f64], round: usize| RoundLog {
        round,
        train_loss: global_loss(loss, w, datasets),
        test_accuracy: test_set.filter(|_| loss.is_classifier()).map(|t| accuracy(w, t)),
        uplink_sinr: None,
        downlink_sinr: None,
        learning_rate: None,
        snr_dl_db: None,
    };

    let mut w = w0.to_vec();
    let mut state = FlState {
        global_model: w.clone(),
        round: 0,
        history: vec![evaluate(&w, 0)],
        trajectory: if cfg.record_models { vec![w.clone()] } else { Vec::new() },
    };

    for round in 1..=cfg.rounds {
        let r = round as u64;
        let phy_err = |client: Option<usize>, source: PhyError| FlError::Phy { round, client, source };
        let eta = cfg.learning_rate(round);
        let snr_dl_db = cfg.downlink_snr_db(eta);
        let chosen = sample_clients(cfg.total_clients, k, &mut rng.substream_path(&[r, KEY_SAMPLING]));

        let needs_channel = cfg.uplink.scheme != UplinkScheme::Ideal || cfg.downlink.scheme != DownlinkScheme::Ideal;
        let mut channel_rng = rng.substream_path(&[r, KEY_CHANNEL]);
        let link = if needs_channel {
            let real = sampler.draw(&mut channel_rng);
            let csi = estimate_csi(&real, cfg.csi, &mut channel_rng).map_err(|e| {
                let e = PhyError::from(e);
                match e {
                    PhyError::SingularEchoGain { client, .. } => phy_err(Some(chosen[client]), e),
                    _ => phy_err(None, e),
                }
            })?;
            Some((real, csi))
        } else {
            None
        };
        let singular = |e: PhyError| match e {
            PhyError::SingularEchoGain { client, .. } => phy_err(Some(chosen[client]), e),
            _ => phy_err(None, e),
        };

        // Downlink.
        let dl_cfg = DownlinkSchemeConfig::new(cfg.downlink.scheme, snr_dl_db);
        let received: Vec<Vec<f64>> = match (&link, cfg.downlink.scheme) {
            (Some((real, csi)), scheme) if scheme != DownlinkScheme::Ideal => {
                let (wn, scale) = if normalize { normalize_payload(&w) } else { (w.clone(), 1.0) };
                let noise = draw_downlink_noise(k, w.len(), &dl_cfg, &mut rng.substream_path(&[r, KEY_DOWNLINK]));
                let rx = downlink_broadcast_with_noise(scheme, real, &csi.sum_channel, &csi.echo_gains, &wn, &noise)
                    .map_err(singular)?;
                rx.per_client.iter().map(|m| denormalize(m, scale)).collect()
            }
            _ => vec![w.clone(); k],
        };
        let downlink_sinr = (cfg.downlink.scheme != DownlinkScheme::Ideal).then(|| {
            let err = received.iter().map(|m| norm_sqr(&compute_differential(m, &w))).sum::<f64>() / k as f64;
            ratio(norm_sqr(&w), err)
        });

        // Local training, one independent stream per (round, client).
        let differentials: Vec<Vec<f64>> = chosen
            .par_iter()
            .zip(received.par_iter())
            .map(|(&c, start)| {
                let mut crng = rng.substream_path(&[r, KEY_CLIENT, c as u64]);
                let local = local_sgd(start, &datasets[c], loss, cfg.local_steps, cfg.batch_size, eta, &mut crng);
                compute_differential(start, &local)
            })
            .collect();

        // Uplink.
        let exact: Vec<f64> = (0..w.len()).map(|i| differentials.iter().map(|x| x[i]).sum()).collect();
        let aggregate = match &link {
            Some((real, csi)) if cfg.uplink.scheme != UplinkScheme::Ideal => {
                let payload = UplinkPayload::from_columns(&differentials).map_err(|e| phy_err(None, e))?;
                let (payload, scale) = if normalize {
                    let (xn, s) = normalize_payload(payload.as_slice());
                    (UplinkPayload::new(payload.slots(), k, xn).map_err(|e| phy_err(None, e))?, s)
                } else {
                    (payload, 1.0)
                };
                let noise =
                    draw_uplink_noise(cfg.antennas, w.len(), &cfg.uplink, &mut rng.substream_path(&[r, KEY_UPLINK]));
                let est =
                    uplink_aggregate_with_noise(&cfg.uplink, real, &csi.sum_channel, &csi.echo_gains, &payload, &noise)
                        .map_err(singular)?;
                denormalize(&est.values, scale)
            }
            _ => exact.clone(),
        };
        let next = aggregate_global(&w, &aggregate, k);
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i).into());
        }
        let uplink_sinr = (cfg.uplink.scheme != UplinkScheme::Ideal).then(|| {
            let ideal = aggregate_global(&w, &exact, k);
            ratio(norm_sqr(&ideal), norm_sqr(&compute_differential(&next, &ideal)))
        });
        w = next;

        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let mut log = evaluate(&w, round);
            log.uplink_sinr = uplink_sinr;
            log.downlink_sinr = downlink_sinr;
            log.learning_rate = Some(eta);
            log.snr_dl_db = Some(snr_dl_db);
            state.history.push(log);
        }
        if cfg.record_models {
            state.trajectory.push(w.clone());
        }
        state.round = round;
    }
    state.global_model = w;
    Ok(state)
}

/// Gradient constants of the convergence analysis estimated at given
/// points: `h_sq` bounds `E‖∇f_k(w; ξ)‖²` and `hk_sq[k]` bounds the
/// mini-batch variance `E‖∇f_k(w; ξ) − ∇f_k(w)‖²`, both for batches of
/// `batch_size` drawn without replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientConstants {
    pub h_sq: f64,
    pub hk_sq: Vec<f64>,
}

pub fn estimate_gradient_constants(
    loss: &LossModel,
    datasets: &[Dataset],
    points: &[Vec<f64>],
    batch_size: usize,
) -> GradientConstants {
    let mut h_sq = 0.0f64;
    let hk_sq = datasets
        .iter()
        .map(|data| {
            let n = data.len();
            let b = batch_size.clamp(1, n);
            // Finite-population correction for sampling without replacement.
            let fpc = if n > 1 { (n - b) as f64 / ((n - 1) as f64 * b as f64) } else { 0.0 };
            let mut worst = 0.0f64;
            for w in points {
                let full = loss.gradient(w, data, None);
                let var = (0..n)
                    .map(|i| norm_sqr(&compute_differential(&loss.sample_gradient(w, data, i), &full)))
                    .sum::<f64>()
                    / n as f64;
                let batch_var = var * fpc;
                worst = worst.max(batch_var);
                h_sq = h_sq.max(norm_sqr(&full) + batch_var);
            }
            worst
        })
        .collect();
    GradientConstants { h_sq, hk_sq }
}

/// Non-iid degree `Γ = F* − (1/N) Σ_k f_k*`.
pub fn heterogeneity(loss: &LossModel, datasets: &[Dataset], steps: usize) -> Result<f64> {
    let w_star = loss.minimize(datasets, steps)?;
    let f_star = global_loss(loss, &w_star, datasets);
    let mut local = 0.0;
    for d in datasets {
        let wk = loss.minimize(std::slice::from_ref(d), steps)?;
        local += loss.loss(&wk, d);
    }
    Ok((f_star - local / datasets.len() as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, synthetic_regression, SyntheticBinaryTask};

    fn losses() -> [LossModel; 3] {
        [
            LossModel::Quadratic { ridge: 0.1 },
            LossModel::LogisticL2 { lambda: 0.05 },
            LossModel::SvmHingeSmoothed { lambda: 0.05, smoothing: 0.5 },
        ]
    }

    fn classification(rng: &mut RngStream) -> Dataset {
        SyntheticBinaryTask::new(5, 0.1, rng).sample(40, rng)
    }

    fn base_config(n: usize, k: usize) -> FlConfig {
        FlConfig {
            total_clients: n,
            participants_per_round: k,
            local_steps: 1,
            batch_size: 1_000_000,
            rounds: 10,
            mu: 0.5,
            gamma_shift: 20.0,
            antennas: 32,
            channel: CorrelationKind::IidRayleigh,
            csi: EstimationMode::Perfect,
            uplink: UplinkSchemeConfig::new(UplinkScheme::Ideal, 10.0),
            downlink: DownlinkSchemeConfig::new(DownlinkScheme::Ideal, 10.0),
            dl_power: DlPowerSchedule::Fixed,
            normalization: PayloadNormalization::PerRoundUnitPower,
            eval_every: 1,
            record_models: true,
        }
    }

    fn regression_clients(n: usize, per: usize, d: usize, seed: u64) -> Vec<Dataset> {
        let mut rng = RngStream::new(seed, 0);
        let w_true: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.5).collect();
        let data = synthetic_regression(n * per, &w_true, 0.5, &mut rng);
        partition_iid(&data, n, &mut rng).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = RngStream::new(1, 0);
        let data = classification(&mut rng);
        let reg_data = synthetic_regression(30, &[0.5, -1.0, 2.0, 0.0, 1.0], 0.3, &mut rng);
        for loss in losses() {
            let data = if loss.is_classifier() { &data } else { &reg_data };
            for _ in 0..100 {
                let w: Vec<f64> = (0..5).map(|_| 2.0 * rng.standard_normal()).collect();
                let g = loss.gradient(&w, data, None);
                let h = 1e-6;
                for j in 0..5 {
                    let (mut wp, mut wm) = (w.clone(), w.clone());
                    wp[j] += h;
                    wm[j] -= h;
                    let fd = (loss.loss(&wp, data) - loss.loss(&wm, data)) / (2.0 * h);
                    let tol = 1e-5 * fd.abs().max(g[j].abs()).max(1e-2);
                    assert!((fd - g[j]).abs() <= tol, "{loss:?} j={j}: fd {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn sample_gradients_average_to_full_gradient() {
        let mut rng = RngStream::new(2, 0);
        let data = classification(&mut rng);
        let w: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        for loss in losses() {
            let full = loss.gradient(&w, &data, None);
            let mean: Vec<f64> = (0..5)
                .map(|j| {
                    (0..data.len()).map(|i| loss.sample_gradient(&w, &data, i)[j]).sum::<f64>() / data.len() as f64
                })
                .collect();
            for (a, b) in full.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curvature_constants() {
        let clients = regression_clients(3, 50, 4, 3);
        let loss = LossModel::Quadratic { ridge: 0.1 };
        let (mu, l) = loss.curvature(&clients);
        assert!(0.1 < mu && mu < l);
        // Rayleigh quotients of each client Hessian lie in [mu, L].
        let mut rng = RngStream::new(4, 0);
        for d in &clients {
            let h = hessian_unregularized(d);
            for _ in 0..20 {
                let v = nalgebra::DVector::from_fn(4, |_, _| rng.standard_normal());
                let q = (v.transpose() * &h * &v)[(0, 0)] / v.norm_squared() + 0.1;
                assert!(mu - 1e-12 <= q && q <= l + 1e-12);
            }
        }
        let mut rng = RngStream::new(5, 0);
        let data = classification(&mut rng);
        let m = data.max_row_norm_sqr();
        assert_eq!(LossModel::LogisticL2 { lambda: 0.05 }.curvature(&[data.clone()]), (0.05, 0.05 + m / 4.0));
        assert_eq!(
            LossModel::SvmHingeSmoothed { lambda: 0.05, smoothing: 0.5 }.curvature(&[data]),
            (0.05, 0.05 + m / 0.5)
        );
    }

    #[test]
    fn quadratic_minimizer_zeroes_gradient() {
        let clients = regression_clients(4, 30, 3, 6);
        let loss = LossModel::Quadratic { ridge: 0.01 };
        let w = loss.minimize(&clients, 0).unwrap();
        assert!(norm_sqr(&global_gradient(&loss, &w, &clients)).sqrt() < 1e-10);
        let mut rng = RngStream::new(7, 0);
        let data = classification(&mut rng);
        let logistic = LossModel::LogisticL2 { lambda: 0.1 };
        let w = logistic.minimize(std::slice::from_ref(&data), 5000).unwrap();
        assert!(norm_sqr(&logistic.gradient(&w, &data, None)).sqrt() < 1e-8);
    }

    #[test]
    fn full_batch_single_step_is_exact() {
        let clients = regression_clients(1, 20, 3, 8);
        let loss = LossModel::Quadratic { ridge: 0.2 };
        let w0 = [0.3, -0.1, 0.7];
        let w1 = local_sgd(&w0, &clients[0], &loss, 1, 1000, 0.05, &mut RngStream::new(0, 0));
        let g = loss.gradient(&w0, &clients[0], None);
        for j in 0..3 {
            assert!((w1[j] - (w0[j] - 0.05 * g[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn small_steps_do_not_increase_quadratic_loss() {
        let clients = regression_clients(1, 60, 4, 9);
        let loss = LossModel::Quadratic { ridge: 0.1 };
        let (_, l) = loss.curvature(&clients);
        let mut w = vec![0.0; 4];
        let mut prev = loss.loss(&w, &clients[0]);
        let mut rng = RngStream::new(1, 1);
        for _ in 0..10 {
            w = local_sgd(&w, &clients[0], &loss, 1, 60, 0.5 / l, &mut rng);
            let cur = loss.loss(&w, &clients[0]);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn differential_and_aggregation_algebra() {
        let w = [1.0, 2.0, -3.0];
        assert_eq!(compute_differential(&w, &w), vec![0.0; 3]);
        let local = [0.5, 2.5, -1.0];
        let x = compute_differential(&w, &local);
        let back: Vec<f64> = w.iter().zip(&x).map(|(a, b)| a - b).collect();
        assert_eq!(back, local);
        assert_eq!(aggregate_global(&w, &[0.0; 3], 4), w.to_vec());
        let locals = [[1.0, 0.0, 2.0], [3.0, -2.0, 0.0]];
        let sum: Vec<f64> = (0..3).map(|i| locals.iter().map(|l| w[i] - l[i]).sum()).collect();
        let next = aggregate_global(&w, &sum, 2);
        for i in 0..3 {
            assert!((next[i] - (locals[0][i] + locals[1][i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_schedule(1, 2.0, 0.0), 1.0);
        assert!((lr_schedule(1, 1.0, 9.0) - 0.2).abs() < 1e-15);
        // Holds whenever E <= t + γ.
        for t in 1..200 {
            for e in 1..10 {
                assert!(lr_schedule(t, 0.3, 9.0) <= 2.0 * lr_schedule(t + e, 0.3, 9.0) + 1e-15);
            }
        }
        assert_eq!(dl_power_schedule(1.0, 1.0, 3.0), 3.0);
        assert_eq!(dl_power_schedule(1.0, lr_schedule(1, 1.0, 1.0), 0.5), 0.5);
        assert_eq!(dl_power_schedule(1.0, 2.0, 0.7), 0.7);
        let (mu, g) = (0.5, 10.0);
        for t in [1_000usize, 10_000, 100_000] {
            let eta = lr_schedule(t, mu, g);
            let direct = (1.0 - mu * eta) / (eta * eta);
            let asym = mu * mu * (t as f64 + g).powi(2) / 4.0;
            assert_eq!(dl_power_schedule(mu, eta, 1.0), direct);
            assert!((direct / asym - 1.0).abs() < 4.0 / (t as f64 + g));
        }
    }

    #[test]
    fn normalization() {
        let (z, s) = normalize_payload(&[0.0; 5]);
        assert_eq!((z, s), (vec![0.0; 5], 1.0));
        let x = [3.0, -1.0, 0.5, 2.0];
        let (n, s) = normalize_payload(&x);
        assert!((n.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        for (a, b) in denormalize(&n, s).iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn client_sampling_frequency() {
        let (n, k, rounds) = (10usize, 3usize, 100_000usize);
        let mut counts = vec![0usize; n];
        let mut rng = RngStream::new(11, 0);
        for _ in 0..rounds {
            let s = sample_clients(n, k, &mut rng);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            s.iter().for_each(|&c| counts[c] += 1);
        }
        let p = k as f64 / n as f64;
        let se = (p * (1.0 - p) / rounds as f64).sqrt();
        for c in counts {
            assert!((c as f64 / rounds as f64 - p).abs() < 3.0 * se + 1e-12, "{c}");
        }
    }

    /// Plain FedAvg on the same streams: average the locally trained models.
    fn reference_fedavg(cfg: &FlConfig, loss: &LossModel, clients: &[Dataset], rng: &RngStream) -> Vec<Vec<f64>> {
        let mut w = vec![0.0; clients[0].dim()];
        let mut out = vec![w.clone()];
        for round in 1..=cfg.rounds {
            let r = round as u64;
            let eta = 2.0 / (cfg.mu * (((round - 1) * cfg.local_steps + 1) as f64 + cfg.gamma_shift));
            let chosen =
                sample_clients(cfg.total_clients, cfg.participants_per_round, &mut rng.substream_path(&[r, 0]));
            let mut next = vec![0.0; w.len()];
            for &c in &chosen {
                let mut crng = rng.substream_path(&[r, 4, c as u64]);
                let local = local_sgd(&w, &clients[c], loss, cfg.local_steps, cfg.batch_size, eta, &mut crng);
                next.iter_mut().zip(&local).for_each(|(a, b)| *a += b / chosen.len() as f64);
            }
            w = next;
            out.push(w.clone());
        }
        out
    }

    #[test]
    fn ideal_links_match_reference_fedavg() {
        let clients = regression_clients(6, 20, 4, 12);
        let loss = LossModel::Quadratic { ridge: 0.05 };
        let mut cfg = base_config(6, 3);
        cfg.local_steps = 3;
        cfg.batch_size = 5;
        cfg.rounds = 25;
        let rng = RngStream::new(13, 0);
        let state = run_federated_training(&cfg, &loss, &clients, None, &rng).unwrap();
        let reference = reference_fedavg(&cfg, &loss, &clients, &rng);
        for (a, b) in state.trajectory.iter().zip(&reference) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ideal_full_participation_is_gradient_descent_on_the_average() {
        let clients = regression_clients(4, 25, 3, 14);
        let loss = LossModel::Quadratic { ridge: 0.1 };
        let cfg = base_config(4, 4);
        let state = run_federated_training(&cfg, &loss, &clients, None, &RngStream::new(15, 0)).unwrap();
        // Average Hessian and linear term assembled explicitly.
        let d = 3;
        let mut a = vec![0.0; d * d];
        let mut c = vec![0.0; d];
        let total = (4 * 25) as f64;
        for data in &clients {
            for i in 0..data.len() {
                let row = data.row(i);
                for p in 0..d {
                    c[p] += data.label(i) * row[p] / total;
                    for q in 0..d {
                        a[p * d + q] += row[p] * row[q] / total;
                    }
                }
            }
        }
        (0..d).for_each(|p| a[p * d + p] += 0.1);
        let mut w = vec![0.0; d];
        for (t, got) in state.trajectory.iter().enumerate().skip(1) {
            let eta = 2.0 / (0.5 * (t as f64 + 20.0));
            let grad: Vec<f64> = (0..d).map(|p| (0..d).map(|q| a[p * d + q] * w[q]).sum::<f64>() - c[p]).collect();
            w.iter_mut().zip(&grad).for_each(|(wi, gi)| *wi -= eta * gi);
            for (x, y) in got.iter().zip(&w) {
                assert!((x - y).abs() < 1e-10, "round {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn runs_are_reproducible_across_thread_counts() {
        let clients = regression_clients(6, 20, 4, 16);
        let loss = LossModel::Quadratic { ridge: 0.05 };
        let mut cfg = base_config(6, 4);
        cfg.uplink = UplinkSchemeConfig::new(UplinkScheme::RandomOrthogonalization, 5.0);
        cfg.downlink = DownlinkSchemeConfig::new(DownlinkScheme::Enhanced, 5.0);
        cfg.batch_size = 4;
        let rng = RngStream::new(17, 0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_federated_training(&cfg, &loss, &clients, None, &rng).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn every_scheme_pair_runs() {
        let clients = regression_clients(5, 10, 3, 18);
        let loss = LossModel::Quadratic { ridge: 0.05 };
        for ul in [
            UplinkScheme::Ideal,
            UplinkScheme::RandomOrthogonalization,
            UplinkScheme::Enhanced,
            UplinkScheme::MmseFullCsi,
        ] {
            for dl in [DownlinkScheme::Ideal, DownlinkScheme::RandomOrthogonalization, DownlinkScheme::Enhanced] {
                let mut cfg = base_config(5, 3);
                cfg.uplink = UplinkSchemeConfig::new(ul, 20.0);
                cfg.downlink = DownlinkSchemeConfig::new(dl, 20.0);
                cfg.dl_power = DlPowerSchedule::Theorem1Scaling { initial_snr_db: 0.0 };
                let s = run_federated_training(&cfg, &loss, &clients, None, &RngStream::new(19, 0)).unwrap();
                assert_eq!(s.history.len(), 11);
                assert_eq!(s.history[5].uplink_sinr.is_some(), ul != UplinkScheme::Ideal);
                assert_eq!(s.history[5].downlink_sinr.is_some(), dl != DownlinkScheme::Ideal);
                assert!(s.global_model.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let clients = regression_clients(4, 10, 2, 20);
        let loss = LossModel::Quadratic { ridge: 0.1 };
        let rng = RngStream::new(0, 0);
        let mut cfg = base_config(4, 5);
        assert!(matches!(run_federated_training(&cfg, &loss, &clients, None, &rng), Err(FlError::Config(_))));
        cfg = base_config(4, 2);
        cfg.local_steps = 0;
        assert!(run_federated_training(&cfg, &loss, &clients, None, &rng).is_err());
        cfg = base_config(5, 2);
        assert!(run_federated_training(&cfg, &loss, &clients, None, &rng).is_err());
        let mut uneven = clients.clone();
        uneven[0] = uneven[0].subset(&[0, 1]);
        assert!(run_federated_training(&base_config(4, 2), &loss, &uneven, None, &rng).is_err());
        assert!(LossModel::LogisticL2 { lambda: 0.0 }.validate().is_err());
    }

    #[test]
    fn phy_errors_carry_round_and_client() {
        let e =
            FlError::Phy { round: 7, client: Some(3), source: PhyError::SingularEchoGain { client: 1, real: 1e-12 } };
        let msg = e.to_string();
        assert!(msg.starts_with("round 7, client 3:"), "{msg}");
        let e = FlError::Phy { round: 2, client: None, source: PhyError::InvalidArgument("x".into()) };
        assert_eq!(e.to_string(), "round 2: invalid argument: x");
    }

    #[test]
    fn gradient_constants_bound_sampled_batches() {
        let clients = regression_clients(2, 30, 3, 23);
        let loss = LossModel::Quadratic { ridge: 0.1 };
        let w = vec![vec![0.2, -0.4, 0.1]];
        let gc = estimate_gradient_constants(&loss, &clients, &w, 5);
        // Monte Carlo second moment of a 5-sample batch gradient.
        let mut rng = RngStream::new(24, 0);
        for (k, data) in clients.iter().enumerate() {
            let full = loss.gradient(&w[0], data, None);
            let mut idx: Vec<usize> = (0..data.len()).collect();
            let trials = 20_000;
            let mut var = 0.0;
            for _ in 0..trials {
                idx.shuffle(&mut rng);
                let g = loss.gradient(&w[0], data, Some(&idx[..5]));
                var += norm_sqr(&compute_differential(&g, &full));
            }
            var /= trials as f64;
            assert!((var / gc.hk_sq[k] - 1.0).abs() < 0.05, "{var} vs {}", gc.hk_sq[k]);
            assert!(gc.h_sq >= norm_sqr(&full) + gc.hk_sq[k] - 1e-12);
        }
        assert!(heterogeneity(&loss, &clients, 0).unwrap() >= 0.0);
    }
}
