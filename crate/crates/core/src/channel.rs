//! Block-fading MIMO channel draws and partial-CSI estimation.
//!
//! A [`ChannelRealization`] holds `H` (M antennas × K clients), columns
//! `h_k ~ CN(0, I/M)`. Receivers only ever see the sum channel `h_s = Σ h_k`
//! (one common pilot) and, with channel echo, the scalar gains
//! `g_k = h_k^H h_s`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    complex_gaussian_scalar, fill_complex_gaussian, Cholesky, Complex, ComplexMatrix, ComplexVector, NumericsError,
    RngStream,
};

/// Echo gains whose real part falls below this are rejected.
pub const ECHO_GAIN_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("near-singular echo gain at client {client}: Re(g) = {real:e}")]
    SingularEchoGain { client: usize, real: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Small-scale fading statistics. The correlated variants use the matrix
/// with 1 on the diagonal and `rho` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrelationKind {
    #[default]
    IidRayleigh,
    /// K × K covariance across users, applied per antenna row.
    UserCorrelated { rho: f64 },
    /// M × M covariance across antennas, applied per user column.
    AntennaCorrelated { rho: f64 },
}

impl CorrelationKind {
    pub fn rho(&self) -> f64 {
        match *self {
            Self::IidRayleigh => 0.0,
            Self::UserCorrelated { rho } | Self::AntennaCorrelated { rho } => rho,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::IidRayleigh => "iid".to_string(),
            Self::UserCorrelated { rho } => format!("user_rho{rho}"),
            Self::AntennaCorrelated { rho } => format!("antenna_rho{rho}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelConfig {
    pub antennas: usize,
    pub clients: usize,
    pub kind: CorrelationKind,
}

impl ChannelModelConfig {
    pub fn iid(antennas: usize, clients: usize) -> Self {
        Self { antennas, clients, kind: CorrelationKind::IidRayleigh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.clients == 0 {
            return Err(ChannelError::InvalidConfig(format!(
                "antennas and clients must be >= 1 (got M={}, K={})",
                self.antennas, self.clients
            )));
        }
        let rho = self.kind.rho();
        if !(0.0..1.0).contains(&rho) {
            return Err(ChannelError::InvalidConfig(format!("correlation rho must lie in [0, 1), got {rho}")));
        }
        Ok(())
    }
}

fn equicorrelation(n: usize, rho: f64) -> ComplexMatrix {
    ComplexMatrix::from_fn(n, n, |r, c| Complex::new(if r == c { 1.0 } else { rho }, 0.0))
}

/// One block-fading draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    h: ComplexMatrix,
    config: ChannelModelConfig,
}

impl ChannelRealization {
    /// Wrap an explicit channel matrix (M × K).
    pub fn from_matrix(h: ComplexMatrix, kind: CorrelationKind) -> Result<Self> {
        let config = ChannelModelConfig { antennas: h.rows(), clients: h.cols(), kind };
        config.validate()?;
        Ok(Self { h, config })
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.h
    }

    pub fn config(&self) -> &ChannelModelConfig {
        &self.config
    }

    pub fn antennas(&self) -> usize {
        self.h.rows()
    }

    pub fn clients(&self) -> usize {
        self.h.cols()
    }

    pub fn column(&self, k: usize) -> ComplexVector {
        self.h.column(k)
    }

    /// True sum channel `Σ_k h_k`.
    pub fn sum_channel(&self) -> ComplexVector {
        self.h.column_sum()
    }

    /// `h_k^H v` for every client k.
    pub fn project_columns(&self, v: &[Complex]) -> Vec<Complex> {
        self.h.conj_transpose_mul_vec(v).expect("dimension checked by caller").into_vec()
    }
}

/// Draws channel realizations; holds the correlation factor so repeated draws
/// do not refactor it.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    config: ChannelModelConfig,
    factor: Option<ComplexMatrix>,
}

impl ChannelSampler {
    pub fn new(config: ChannelModelConfig) -> Result<Self> {
        config.validate()?;
        let factor = match config.kind {
            CorrelationKind::IidRayleigh => None,
            CorrelationKind::UserCorrelated { rho } => {
                Some(Cholesky::factor(&equicorrelation(config.clients, rho))?.into_factor())
            }
            CorrelationKind::AntennaCorrelated { rho } => {
                Some(Cholesky::factor(&equicorrelation(config.antennas, rho))?.into_factor())
            }
        };
        Ok(Self { config, factor })
    }

    pub fn config(&self) -> &ChannelModelConfig {
        &self.config
    }

    pub fn draw(&self, rng: &mut RngStream) -> ChannelRealization {
        let (m, k) = (self.config.antennas, self.config.clients);
        let mut white = vec![Complex::new(0.0, 0.0); m * k];
        fill_complex_gaussian(&mut white, 1.0 / m as f64, rng);
        let h = match (&self.factor, self.config.kind) {
            (None, _) => white,
            // rho = 0 keeps the white draw untouched (identity factor).
            (Some(_), kind) if kind.rho() == 0.0 => white,
            (Some(l), CorrelationKind::UserCorrelated { .. }) => {
                // Each row r of H is L · (white row r), so Cov(row) = (1/M) L L^H = C/M.
                let mut out = vec![Complex::new(0.0, 0.0); m * k];
                for (src, dst) in white.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = l.row(i)[..=i].iter().zip(src).map(|(a, b)| a * b).sum();
                    }
                }
                out
            }
            (Some(l), _) => {
                // H = L · W with L the M × M antenna factor.
                let mut out = vec![Complex::new(0.0, 0.0); m * k];
                for r in 0..m {
                    let dst = &mut out[r * k..(r + 1) * k];
                    for (j, a) in l.row(r)[..=r].iter().enumerate() {
                        for (d, w) in dst.iter_mut().zip(&white[j * k..(j + 1) * k]) {
                            *d += a * w;
                        }
                    }
                }
                out
            }
        };
        ChannelRealization { h: ComplexMatrix::from_vec_unchecked(m, k, h), config: self.config }
    }
}

pub fn draw_channel(config: &ChannelModelConfig, rng: &mut RngStream) -> Result<ChannelRealization> {
    Ok(ChannelSampler::new(*config)?.draw(rng))
}

/// How the receiver-side CSI is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimationMode {
    #[default]
    Perfect,
    PilotNoise {
        pilot_snr_db: f64,
    },
}

impl EstimationMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::PilotNoise { pilot_snr_db } if !pilot_snr_db.is_finite() => {
                Err(ChannelError::InvalidConfig(format!("pilot SNR must be finite, got {pilot_snr_db}")))
            }
            _ => Ok(()),
        }
    }

    /// `10^(-snr/10)`, or 0 for perfect estimation.
    pub fn error_variance(&self) -> f64 {
        match *self {
            Self::Perfect => 0.0,
            Self::PilotNoise { pilot_snr_db } => 10f64.powf(-pilot_snr_db / 10.0),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Perfect => "perfect".to_string(),
            Self::PilotNoise { pilot_snr_db } => format!("pilot_{pilot_snr_db}dB"),
        }
    }
}

/// Partial CSI held by the base station (`sum_channel`) and the clients
/// (`echo_gains`).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiEstimates {
    pub sum_channel: ComplexVector,
    pub echo_gains: Vec<Complex>,
    pub mode: EstimationMode,
}

/// Common-pilot estimate of `h_s`. With unit pilot `s = 1` the ML estimate is
/// the received vector `Σ h_k + n_s`, `n_s ~ CN(0, σ_p²/M · I)`.
pub fn estimate_sum_channel(
    real: &ChannelRealization,
    mode: EstimationMode,
    rng: &mut RngStream,
) -> Result<ComplexVector> {
    mode.validate()?;
    let mut hs = real.sum_channel().into_vec();
    if let EstimationMode::PilotNoise { .. } = mode {
        let var = mode.error_variance() / real.antennas() as f64;
        let mut noise = vec![Complex::new(0.0, 0.0); hs.len()];
        fill_complex_gaussian(&mut noise, var, rng);
        hs.iter_mut().zip(&noise).for_each(|(h, n)| *h += n);
    }
    Ok(ComplexVector::new(hs)?)
}

/// Client-side estimates of `g_k = h_k^H ĥ_s` from the downlink echo
/// `ĥ_s/√K`; the `√K` rescaling turns echo noise `ε_k ~ CN(0, σ_e²)` into
/// `√K ε_k` on the gain.
pub fn estimate_echo_gains(
    real: &ChannelRealization,
    sum_channel: &[Complex],
    mode: EstimationMode,
    rng: &mut RngStream,
) -> Result<Vec<Complex>> {
    mode.validate()?;
    if sum_channel.len() != real.antennas() {
        return Err(NumericsError::DimensionMismatch { expected: real.antennas(), actual: sum_channel.len() }.into());
    }
    let k = real.clients();
    let mut gains = real.project_columns(sum_channel);
    if let EstimationMode::PilotNoise { .. } = mode {
        let var = mode.error_variance();
        let amp = (k as f64).sqrt();
        for g in gains.iter_mut() {
            *g += amp * complex_gaussian_scalar(var, rng);
        }
    }
    check_echo_gains(&gains)?;
    Ok(gains)
}

pub fn check_echo_gains(gains: &[Complex]) -> Result<()> {
    match gains.iter().position(|g| g.re.abs() < ECHO_GAIN_FLOOR) {
        Some(client) => Err(ChannelError::SingularEchoGain { client, real: gains[client].re }),
        None => Ok(()),
    }
}

/// Sum-channel and echo-gain estimates in one call.
pub fn estimate_csi(real: &ChannelRealization, mode: EstimationMode, rng: &mut RngStream) -> Result<CsiEstimates> {
    let sum_channel = estimate_sum_channel(real, mode, rng)?;
    let echo_gains = estimate_echo_gains(real, &sum_channel, mode, rng)?;
    Ok(CsiEstimates { sum_channel, echo_gains, mode })
}

/// `h_k^H h_j` for explicit columns.
pub fn cross_gain(real: &ChannelRealization, k: usize, j: usize) -> Complex {
    let h = real.matrix();
    (0..h.rows()).map(|r| h.get(r, k).conj() * h.get(r, j)).sum()
}
