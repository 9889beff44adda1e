//! Uplink aggregation and downlink broadcast schemes.
//!
//! Every scheme takes the channel realization, the receiver's partial CSI and
//! the payload, and returns real-valued estimates. Noise can be drawn inside
//! (the `rng` variants) or supplied explicitly (the `_with_noise` variants) so
//! several schemes can be compared on identical channel and noise draws.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{check_echo_gains, ChannelError, ChannelRealization};
use crate::numerics::{dot_conj, fill_complex_gaussian, Cholesky, Complex, ComplexMatrix, NumericsError, RngStream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhyError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("near-singular echo gain at client {client}: Re(g) = {real:e}")]
    SingularEchoGain { client: usize, real: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<ChannelError> for PhyError {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::SingularEchoGain { client, real } => Self::SingularEchoGain { client, real },
            ChannelError::Numerics(n) => Self::Numerics(n),
            ChannelError::InvalidConfig(s) => Self::InvalidArgument(s),
        }
    }
}

pub type Result<T> = std::result::Result<T, PhyError>;

fn ensure(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(PhyError::DimensionMismatch { what, expected, actual })
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(value: f64) -> f64 {
    10.0 * value.log10()
}

/// Per-antenna variance of the uplink noise vector `n_i`.
///
/// `Scaled` is `σ²/M` per antenna (so `‖n_i‖²` has mean σ²); `Unscaled` is
/// `σ²` per antenna, the model behind the Fisher information
/// `2·SNR·Re(H^H H)` and the `dK/SNR` noise power of the aggregation-error
/// identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    Scaled,
    #[default]
    Unscaled,
}

impl NoiseConvention {
    pub fn per_antenna_variance(&self, snr_linear: f64, antennas: usize) -> f64 {
        match self {
            Self::Scaled => 1.0 / (snr_linear * antennas as f64),
            Self::Unscaled => 1.0 / snr_linear,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Scaled => "scaled",
            Self::Unscaled => "unscaled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UplinkScheme {
    Ideal,
    RandomOrthogonalization,
    Enhanced,
    MmseFullCsi,
}

impl UplinkScheme {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ideal => "ideal_uplink",
            Self::RandomOrthogonalization => "ro_uplink",
            Self::Enhanced => "enhanced_uplink",
            Self::MmseFullCsi => "mmse_uplink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UplinkSchemeConfig {
    pub scheme: UplinkScheme,
    pub snr_ul_db: f64,
    #[serde(default)]
    pub noise: NoiseConvention,
}

impl UplinkSchemeConfig {
    pub fn new(scheme: UplinkScheme, snr_ul_db: f64) -> Self {
        Self { scheme, snr_ul_db, noise: NoiseConvention::default() }
    }

    pub fn with_noise(mut self, noise: NoiseConvention) -> Self {
        self.noise = noise;
        self
    }

    pub fn snr_linear(&self) -> f64 {
        db_to_linear(self.snr_ul_db)
    }

    pub fn noise_variance(&self, antennas: usize) -> f64 {
        self.noise.per_antenna_variance(self.snr_linear(), antennas)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_ul_db.is_finite() {
            Ok(())
        } else {
            Err(PhyError::InvalidArgument(format!("uplink SNR must be finite, got {}", self.snr_ul_db)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkScheme {
    Ideal,
    RandomOrthogonalization,
    Enhanced,
}

impl DownlinkScheme {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ideal => "ideal_downlink",
            Self::RandomOrthogonalization => "ro_downlink",
            Self::Enhanced => "enhanced_downlink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkSchemeConfig {
    pub scheme: DownlinkScheme,
    pub snr_dl_db: f64,
}

impl DownlinkSchemeConfig {
    pub fn new(scheme: DownlinkScheme, snr_dl_db: f64) -> Self {
        Self { scheme, snr_dl_db }
    }

    pub fn snr_linear(&self) -> f64 {
        db_to_linear(self.snr_dl_db)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_dl_db.is_finite() {
            Ok(())
        } else {
            Err(PhyError::InvalidArgument(format!("downlink SNR must be finite, got {}", self.snr_dl_db)))
        }
    }
}

/// Real payload `X`: `slots` rows (d) × `clients` columns (K). Column k is
/// client k's differential vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkPayload {
    slots: usize,
    clients: usize,
    data: Vec<f64>,
}

impl UplinkPayload {
    pub fn new(slots: usize, clients: usize, data: Vec<f64>) -> Result<Self> {
        ensure("payload entries", slots * clients, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i).into());
        }
        Ok(Self { slots, clients, data })
    }

    /// Build from per-client vectors of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let clients = columns.len();
        let slots = columns.first().map_or(0, Vec::len);
        let mut data = vec![0.0; slots * clients];
        for (k, col) in columns.iter().enumerate() {
            ensure("client vector length", slots, col.len())?;
            for (i, &v) in col.iter().enumerate() {
                data[i * clients + k] = v;
            }
        }
        Self::new(slots, clients, data)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The K values transmitted in slot i.
    pub fn slot(&self, i: usize) -> &[f64] {
        &self.data[i * self.clients..(i + 1) * self.clients]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.slots).map(|i| self.data[i * self.clients + k]).collect()
    }

    /// Σ_k x_{k,i} for every slot.
    pub fn slot_sums(&self) -> Vec<f64> {
        self.data.chunks_exact(self.clients.max(1)).map(|s| s.iter().sum()).collect()
    }

    /// ‖x_k‖² for every client.
    pub fn column_energies(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.clients];
        for s in self.data.chunks_exact(self.clients.max(1)) {
            e.iter_mut().zip(s).for_each(|(acc, v)| *acc += v * v);
        }
        e
    }
}

/// Decomposition of the complex projection of one slot:
/// `signal + interference + noise`. The estimate is the real part of the sum;
/// the imaginary part is the discarded residue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotComponents {
    pub signal: Complex,
    pub interference: Complex,
    pub noise: Complex,
}

impl SlotComponents {
    pub fn total(&self) -> Complex {
        self.signal + self.interference + self.noise
    }

    pub fn imaginary_residue(&self) -> f64 {
        self.total().im
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateEstimate {
    pub values: Vec<f64>,
    pub components: Option<Vec<SlotComponents>>,
}

impl AggregateEstimate {
    /// Complex projection per slot (before the real part is taken).
    pub fn complex_values(&self) -> Option<Vec<Complex>> {
        self.components.as_ref().map(|c| c.iter().map(SlotComponents::total).collect())
    }
}

/// Uplink noise vectors `n_1 … n_d` (each of length M), drawn once per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkNoise {
    antennas: usize,
    data: Vec<Complex>,
}

impl UplinkNoise {
    pub fn zeros(antennas: usize, slots: usize) -> Self {
        Self { antennas, data: vec![Complex::new(0.0, 0.0); antennas * slots] }
    }

    pub fn from_vectors(antennas: usize, data: Vec<Complex>) -> Result<Self> {
        if antennas == 0 || !data.len().is_multiple_of(antennas) {
            return Err(PhyError::InvalidArgument("noise length must be a multiple of M".into()));
        }
        Ok(Self { antennas, data })
    }

    pub fn slots(&self) -> usize {
        self.data.len() / self.antennas
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn slot(&self, i: usize) -> &[Complex] {
        &self.data[i * self.antennas..(i + 1) * self.antennas]
    }
}

/// Fresh i.i.d. noise for every slot, per-antenna variance from the config's
/// noise convention.
pub fn draw_uplink_noise(antennas: usize, slots: usize, cfg: &UplinkSchemeConfig, rng: &mut RngStream) -> UplinkNoise {
    let mut data = vec![Complex::new(0.0, 0.0); antennas * slots];
    fill_complex_gaussian(&mut data, cfg.noise_variance(antennas), rng);
    UplinkNoise { antennas, data }
}

/// Downlink noise `z_i^k ~ CN(0, 1/SNR_DL)`, laid out slot-major (d × K).
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkNoise {
    clients: usize,
    data: Vec<Complex>,
}

impl DownlinkNoise {
    pub fn zeros(clients: usize, slots: usize) -> Self {
        Self { clients, data: vec![Complex::new(0.0, 0.0); clients * slots] }
    }

    pub fn slots(&self) -> usize {
        self.data.len() / self.clients
    }

    pub fn get(&self, slot: usize, client: usize) -> Complex {
        self.data[slot * self.clients + client]
    }
}

pub fn draw_downlink_noise(
    clients: usize,
    slots: usize,
    cfg: &DownlinkSchemeConfig,
    rng: &mut RngStream,
) -> DownlinkNoise {
    let mut data = vec![Complex::new(0.0, 0.0); clients * slots];
    fill_complex_gaussian(&mut data, 1.0 / cfg.snr_linear(), rng);
    DownlinkNoise { clients, data }
}

pub fn uplink_aggregate_ideal(x: &UplinkPayload) -> AggregateEstimate {
    AggregateEstimate { values: x.slot_sums(), components: None }
}

fn check_uplink_dims(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    x: &UplinkPayload,
    noise: &UplinkNoise,
) -> Result<()> {
    ensure("sum channel length", real.antennas(), sum_channel.len())?;
    ensure("payload clients", real.clients(), x.clients())?;
    ensure("noise antennas", real.antennas(), noise.antennas())?;
    ensure("noise slots", x.slots(), noise.slots())
}

/// Projection `ĥ_s^H y_i` where client k transmits `x_{k,i}·scale_k`.
/// Signal = Σ‖h_k‖² x_k scale_k; interference = Σ(ĥ_s^H h_k − ‖h_k‖²) x_k scale_k.
fn project_aggregate(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    x: &UplinkPayload,
    scale: &[f64],
    noise: &UplinkNoise,
) -> AggregateEstimate {
    let h = real.matrix();
    let k = real.clients();
    let mut coupling = vec![Complex::new(0.0, 0.0); k];
    let mut energy = vec![0.0; k];
    for (row, &s) in h.as_slice().chunks_exact(k).zip(sum_channel) {
        let sc = s.conj();
        for j in 0..k {
            coupling[j] += sc * row[j];
            energy[j] += row[j].norm_sqr();
        }
    }
    let mut values = Vec::with_capacity(x.slots());
    let mut components = Vec::with_capacity(x.slots());
    for i in 0..x.slots() {
        let (mut signal, mut interference) = (0.0, Complex::new(0.0, 0.0));
        for (j, &xv) in x.slot(i).iter().enumerate() {
            let tx = xv * scale[j];
            signal += energy[j] * tx;
            interference += (coupling[j] - energy[j]) * tx;
        }
        let noise_term = dot_conj(sum_channel, noise.slot(i));
        let c = SlotComponents { signal: Complex::new(signal, 0.0), interference, noise: noise_term };
        values.push(c.total().re);
        components.push(c);
    }
    AggregateEstimate { values, components: Some(components) }
}

/// Random orthogonalization: `x̃_i = Re(ĥ_s^H (Σ_k h_k x_{k,i} + n_i))`.
pub fn uplink_aggregate_ro_with_noise(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    x: &UplinkPayload,
    noise: &UplinkNoise,
) -> Result<AggregateEstimate> {
    check_uplink_dims(real, sum_channel, x, noise)?;
    Ok(project_aggregate(real, sum_channel, x, &vec![1.0; x.clients()], noise))
}

pub fn uplink_aggregate_ro(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    x: &UplinkPayload,
    cfg: &UplinkSchemeConfig,
    rng: &mut RngStream,
) -> Result<AggregateEstimate> {
    cfg.validate()?;
    let noise = draw_uplink_noise(real.antennas(), x.slots(), cfg, rng);
    uplink_aggregate_ro_with_noise(real, sum_channel, x, &noise)
}

/// Channel-echo uplink: client k pre-scales by `1/Re(ĝ_k)`, the server takes
/// `Re(ĥ_s^H y_i)`.
pub fn uplink_aggregate_enhanced_with_noise(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    x: &UplinkPayload,
    noise: &UplinkNoise,
) -> Result<AggregateEstimate> {
    check_uplink_dims(real, sum_channel, x, noise)?;
    ensure("echo gains", real.clients(), echo_gains.len())?;
    check_echo_gains(echo_gains)?;
    let scale: Vec<f64> = echo_gains.iter().map(|g| 1.0 / g.re).collect();
    Ok(project_aggregate(real, sum_channel, x, &scale, noise))
}

pub fn uplink_aggregate_enhanced(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    x: &UplinkPayload,
    cfg: &UplinkSchemeConfig,
    rng: &mut RngStream,
) -> Result<AggregateEstimate> {
    cfg.validate()?;
    let noise = draw_uplink_noise(real.antennas(), x.slots(), cfg, rng);
    uplink_aggregate_enhanced_with_noise(real, sum_channel, echo_gains, x, &noise)
}

/// Which side of the push-through identity the MMSE receiver inverts.
/// Both produce the same estimate; they differ only in cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmseForm {
    /// `(H^H H + σ² I_K)^{-1} H^H y` — K × K solve.
    #[default]
    Gram,
    /// `H^H (H H^H + σ² I_M)^{-1} y` — M × M solve.
    Covariance,
}

/// Per-user linear MMSE estimates `x̂_i` for every slot, full CSI at the receiver.
#[derive(Debug, Clone)]
pub struct MmseReceiver {
    form: MmseForm,
    h: ComplexMatrix,
    factor: Cholesky,
}

impl MmseReceiver {
    pub fn new(real: &ChannelRealization, regularizer: f64, form: MmseForm) -> Result<Self> {
        if !(regularizer >= 0.0) {
            return Err(PhyError::InvalidArgument(format!("regularizer must be >= 0, got {regularizer}")));
        }
        let h = real.matrix().clone();
        let mut a = match form {
            MmseForm::Gram => h.gram(),
            MmseForm::Covariance => h.outer_gram(),
        };
        a.add_diagonal(regularizer);
        let factor = Cholesky::factor(&a)?;
        Ok(Self { form, h, factor })
    }

    pub fn estimate(&self, y: &[Complex]) -> Result<Vec<f64>> {
        ensure("received vector", self.h.rows(), y.len())?;
        let est = match self.form {
            MmseForm::Gram => {
                let mut v = self.h.conj_transpose_mul_vec(y)?.into_vec();
                self.factor.solve_in_place(&mut v);
                v
            }
            MmseForm::Covariance => {
                let mut v = y.to_vec();
                self.factor.solve_in_place(&mut v);
                self.h.conj_transpose_mul_vec(&v)?.into_vec()
            }
        };
        Ok(est.into_iter().map(|z| z.re).collect())
    }
}

/// Received vectors `y_i = H x_i + n_i` for every slot.
pub fn received_signals(
    real: &ChannelRealization,
    x: &UplinkPayload,
    noise: &UplinkNoise,
) -> Result<Vec<Vec<Complex>>> {
    ensure("payload clients", real.clients(), x.clients())?;
    ensure("noise slots", x.slots(), noise.slots())?;
    (0..x.slots())
        .map(|i| {
            let mut y = real.matrix().mul_real_vec(x.slot(i))?.into_vec();
            y.iter_mut().zip(noise.slot(i)).for_each(|(a, n)| *a += n);
            Ok(y)
        })
        .collect()
}

/// Per-user MMSE estimates (d × K, slot-major) and their per-slot sums.
pub fn mmse_estimates_with_noise(
    real: &ChannelRealization,
    x: &UplinkPayload,
    noise: &UplinkNoise,
    regularizer: f64,
    form: MmseForm,
) -> Result<(Vec<Vec<f64>>, AggregateEstimate)> {
    let rx = MmseReceiver::new(real, regularizer, form)?;
    let per_user = received_signals(real, x, noise)?.iter().map(|y| rx.estimate(y)).collect::<Result<Vec<_>>>()?;
    let values = per_user.iter().map(|v| v.iter().sum()).collect();
    Ok((per_user, AggregateEstimate { values, components: None }))
}

/// Full-CSI linear MMSE baseline, regularizer `σ²` (the per-antenna noise
/// variance, `1/SNR` under the unscaled convention).
pub fn uplink_aggregate_mmse_with_noise(
    real: &ChannelRealization,
    x: &UplinkPayload,
    cfg: &UplinkSchemeConfig,
    noise: &UplinkNoise,
) -> Result<AggregateEstimate> {
    cfg.validate()?;
    mmse_estimates_with_noise(real, x, noise, cfg.noise_variance(real.antennas()), MmseForm::Gram).map(|(_, a)| a)
}

pub fn uplink_aggregate_mmse(
    real: &ChannelRealization,
    x: &UplinkPayload,
    cfg: &UplinkSchemeConfig,
    rng: &mut RngStream,
) -> Result<AggregateEstimate> {
    cfg.validate()?;
    let noise = draw_uplink_noise(real.antennas(), x.slots(), cfg, rng);
    uplink_aggregate_mmse_with_noise(real, x, cfg, &noise)
}

/// Dispatch on `cfg.scheme`. Echo gains are only read by the enhanced scheme.
pub fn uplink_aggregate_with_noise(
    cfg: &UplinkSchemeConfig,
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    x: &UplinkPayload,
    noise: &UplinkNoise,
) -> Result<AggregateEstimate> {
    match cfg.scheme {
        UplinkScheme::Ideal => Ok(uplink_aggregate_ideal(x)),
        UplinkScheme::RandomOrthogonalization => uplink_aggregate_ro_with_noise(real, sum_channel, x, noise),
        UplinkScheme::Enhanced => uplink_aggregate_enhanced_with_noise(real, sum_channel, echo_gains, x, noise),
        UplinkScheme::MmseFullCsi => uplink_aggregate_mmse_with_noise(real, x, cfg, noise),
    }
}

/// Models as received by each client, plus the effective gains for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedModels {
    /// `per_client[k][i]` = ŵ_{k,i}.
    pub per_client: Vec<Vec<f64>>,
    /// `‖h_k‖²` (signal part of the effective gain), when a channel is involved.
    pub self_gain: Option<Vec<f64>>,
    /// `h_k^H ĥ_s − ‖h_k‖²` (interference part), when a channel is involved.
    pub cross_gain: Option<Vec<Complex>>,
}

pub fn downlink_broadcast_ideal(w: &[f64], clients: usize) -> ReceivedModels {
    ReceivedModels { per_client: vec![w.to_vec(); clients], self_gain: None, cross_gain: None }
}

fn downlink_gains(real: &ChannelRealization, sum_channel: &[Complex]) -> Result<(Vec<Complex>, Vec<f64>)> {
    ensure("sum channel length", real.antennas(), sum_channel.len())?;
    let h = real.matrix();
    let k = real.clients();
    let mut gain = vec![Complex::new(0.0, 0.0); k];
    let mut energy = vec![0.0; k];
    for (row, &s) in h.as_slice().chunks_exact(k).zip(sum_channel) {
        for j in 0..k {
            gain[j] += row[j].conj() * s;
            energy[j] += row[j].norm_sqr();
        }
    }
    Ok((gain, energy))
}

/// Sum-channel precoding: `ŵ_{k,i} = Re(h_k^H ĥ_s w_i + z_i^k)`.
pub fn downlink_broadcast_ro_with_noise(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    w: &[f64],
    noise: &DownlinkNoise,
) -> Result<ReceivedModels> {
    ensure("noise slots", w.len(), noise.slots())?;
    ensure("noise clients", real.clients(), noise.clients)?;
    let (gain, energy) = downlink_gains(real, sum_channel)?;
    let per_client = gain
        .iter()
        .enumerate()
        .map(|(k, g)| w.iter().enumerate().map(|(i, &wi)| g.re * wi + noise.get(i, k).re).collect())
        .collect();
    let cross = gain.iter().zip(&energy).map(|(g, e)| g - e).collect();
    Ok(ReceivedModels { per_client, self_gain: Some(energy), cross_gain: Some(cross) })
}

pub fn downlink_broadcast_ro(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    w: &[f64],
    cfg: &DownlinkSchemeConfig,
    rng: &mut RngStream,
) -> Result<ReceivedModels> {
    cfg.validate()?;
    let noise = draw_downlink_noise(real.clients(), w.len(), cfg, rng);
    downlink_broadcast_ro_with_noise(real, sum_channel, w, &noise)
}

/// Channel-echo downlink: precoder `ĥ_s/√K`, client k computes
/// `Re(√K y_k / ĝ_k)`.
pub fn downlink_broadcast_enhanced_with_noise(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    w: &[f64],
    noise: &DownlinkNoise,
) -> Result<ReceivedModels> {
    ensure("noise slots", w.len(), noise.slots())?;
    ensure("noise clients", real.clients(), noise.clients)?;
    ensure("echo gains", real.clients(), echo_gains.len())?;
    check_echo_gains(echo_gains)?;
    let (gain, energy) = downlink_gains(real, sum_channel)?;
    let root_k = (real.clients() as f64).sqrt();
    let per_client = gain
        .iter()
        .zip(echo_gains)
        .enumerate()
        .map(|(k, (&g, &ge))| {
            w.iter()
                .enumerate()
                .map(|(i, &wi)| {
                    let y = g * wi / root_k + noise.get(i, k);
                    (root_k * y / ge).re
                })
                .collect()
        })
        .collect();
    let cross = gain.iter().zip(&energy).map(|(g, e)| g - e).collect();
    Ok(ReceivedModels { per_client, self_gain: Some(energy), cross_gain: Some(cross) })
}

pub fn downlink_broadcast_enhanced(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    w: &[f64],
    cfg: &DownlinkSchemeConfig,
    rng: &mut RngStream,
) -> Result<ReceivedModels> {
    cfg.validate()?;
    let noise = draw_downlink_noise(real.clients(), w.len(), cfg, rng);
    downlink_broadcast_enhanced_with_noise(real, sum_channel, echo_gains, w, &noise)
}

pub fn downlink_broadcast_with_noise(
    scheme: DownlinkScheme,
    real: &ChannelRealization,
    sum_channel: &[Complex],
    echo_gains: &[Complex],
    w: &[f64],
    noise: &DownlinkNoise,
) -> Result<ReceivedModels> {
    match scheme {
        DownlinkScheme::Ideal => Ok(downlink_broadcast_ideal(w, real.clients())),
        DownlinkScheme::RandomOrthogonalization => downlink_broadcast_ro_with_noise(real, sum_channel, w, noise),
        DownlinkScheme::Enhanced => downlink_broadcast_enhanced_with_noise(real, sum_channel, echo_gains, w, noise),
    }
}

/// Approximate post-projection SINR of random orthogonalization,
/// `M / (K − 1 + 1/SNR)`. Infinite when K = 1 and the SNR is infinite.
pub fn approx_sinr(antennas: usize, clients: usize, snr_linear: f64) -> f64 {
    assert!(clients >= 1, "at least one client");
    antennas as f64 / ((clients - 1) as f64 + 1.0 / snr_linear)
}
