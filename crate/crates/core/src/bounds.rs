//! Closed-form benchmarks: Fisher information and Cramér-Rao bounds for the
//! aggregation links, the convergence constants of the federated training
//! analysis, and exact variance identities used as Monte Carlo oracles.

use thiserror::Error;

use crate::channel::ChannelRealization;
use crate::numerics::{dot_conj, Cholesky, Complex, ComplexMatrix, NumericsError};
use crate::phy::{NoiseConvention, UplinkPayload};

/// Fisher matrices whose condition estimate exceeds this give an unbounded CRLB.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("CRLB is unbounded (singular or near-singular Fisher information, condition ~ {condition:e})")]
    Unbounded { condition: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Real symmetric K × K Fisher information of the uplink payload of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrixUl {
    dim: usize,
    data: Vec<f64>,
}

impl FisherMatrixUl {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(NumericsError::DimensionMismatch { expected: dim * dim, actual: data.len() }.into());
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn factor(&self) -> Result<Cholesky> {
        let m = ComplexMatrix::from_real(self.dim, self.dim, &self.data)?;
        let chol = match Cholesky::factor(&m) {
            Ok(c) => c,
            Err(NumericsError::NotPositiveDefinite { .. }) => {
                return Err(BoundsError::Unbounded { condition: f64::INFINITY })
            }
            Err(e) => return Err(e.into()),
        };
        let condition = chol.condition_estimate();
        if condition > CONDITION_LIMIT {
            return Err(BoundsError::Unbounded { condition });
        }
        Ok(chol)
    }
}

/// `F = 2·snr·Re(H^H H)` for `y = H x + n`, `n ~ CN(0, I/snr)`. With the scaled
/// noise convention pass `snr = 1/σ²` of the actual per-antenna variance
/// (see [`effective_snr`]).
pub fn fim_uplink(h_effective: &ComplexMatrix, snr_linear: f64) -> Result<FisherMatrixUl> {
    if !(snr_linear > 0.0) {
        return Err(BoundsError::InvalidParams(format!("snr must be > 0, got {snr_linear}")));
    }
    let g = h_effective.gram();
    let k = h_effective.cols();
    let data = g.as_slice().iter().map(|z| 2.0 * snr_linear * z.re).collect();
    FisherMatrixUl::new(k, data)
}

/// Inverse per-antenna noise variance under the given convention.
pub fn effective_snr(snr_linear: f64, antennas: usize, noise: NoiseConvention) -> f64 {
    1.0 / noise.per_antenna_variance(snr_linear, antennas)
}

/// Channel seen by the receiver when client k pre-scales by `1/Re(g_k)`:
/// columns `h_k / Re(g_k)`.
pub fn effective_channel_enhanced(real: &ChannelRealization, echo_gains: &[Complex]) -> Result<ComplexMatrix> {
    if echo_gains.len() != real.clients() {
        return Err(NumericsError::DimensionMismatch { expected: real.clients(), actual: echo_gains.len() }.into());
    }
    let h = real.matrix();
    Ok(ComplexMatrix::from_fn(h.rows(), h.cols(), |r, c| h.get(r, c) / echo_gains[c].re))
}

/// `trace(F⁻¹)`: lower bound on `E‖x − x̂‖²` for any unbiased estimator of the
/// per-slot payload vector.
pub fn crlb_uplink_sum_mse(f: &FisherMatrixUl) -> Result<f64> {
    let inv = f.factor()?.inverse();
    Ok((0..f.dim).map(|i| inv.get(i, i).re).sum())
}

/// `1ᵀ F⁻¹ 1`: lower bound on `E|Σ_k x_k − ŝ|²` for any unbiased estimator of
/// the per-slot sum. This is the bound matched to an aggregation MSE.
pub fn crlb_uplink_aggregate(f: &FisherMatrixUl) -> Result<f64> {
    let ones = vec![Complex::new(1.0, 0.0); f.dim];
    let z = f.factor()?.solve(&ones)?;
    Ok(z.iter().map(|v| v.re).sum())
}

/// `1/(2·snr·|h_k^H p|²)` for the scalar model `y = (h_k^H p) w + z`,
/// `z ~ CN(0, 1/snr)`, where `p` is the transmitted precoder.
pub fn crlb_downlink(h_k: &[Complex], precoder: &[Complex], snr_linear: f64) -> Result<f64> {
    if h_k.len() != precoder.len() {
        return Err(NumericsError::DimensionMismatch { expected: h_k.len(), actual: precoder.len() }.into());
    }
    if !(snr_linear > 0.0) {
        return Err(BoundsError::InvalidParams(format!("snr must be > 0, got {snr_linear}")));
    }
    let gain = dot_conj(h_k, precoder).norm_sqr();
    let scale = h_k.iter().map(|z| z.norm_sqr()).sum::<f64>() * precoder.iter().map(|z| z.norm_sqr()).sum::<f64>();
    if gain <= scale / CONDITION_LIMIT || gain == 0.0 {
        return Err(BoundsError::Unbounded { condition: f64::INFINITY });
    }
    Ok(1.0 / (2.0 * snr_linear * gain))
}

/// Per-element MSE of the random-orthogonalization downlink predicted from
/// the channel-hardening and favorable-propagation variance laws, for a
/// unit-power model entry: `1/M + (K−1)/(2M) + 1/(2·snr)`.
pub fn ro_downlink_mse_prediction(antennas: usize, clients: usize, snr_linear: f64) -> f64 {
    let m = antennas as f64;
    1.0 / m + (clients as f64 - 1.0) / (2.0 * m) + 1.0 / (2.0 * snr_linear)
}

/// Constants of the strongly convex convergence analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceParams {
    /// Total clients N.
    pub n: usize,
    /// Clients scheduled per round K.
    pub k: usize,
    /// Antennas M.
    pub m: usize,
    /// Local steps E.
    pub e: usize,
    /// Model dimension d.
    pub d: usize,
    pub mu: f64,
    pub l: f64,
    /// Non-iid degree Γ.
    pub gamma_noniid: f64,
    /// Bound H² on the expected squared stochastic gradient norm.
    pub h_sq: f64,
    /// Per-client gradient variance bounds H_k², length N.
    pub hk_sq: Vec<f64>,
    pub snr_ul_linear: f64,
    /// Learning-rate shift γ.
    pub gamma_shift: f64,
    /// ‖w_0 − w*‖².
    pub delta0: f64,
}

impl ConvergenceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(BoundsError::InvalidParams(s));
        if self.n == 0 || self.k == 0 || self.m == 0 || self.e == 0 || self.d == 0 {
            return bad("N, K, M, E, d must all be >= 1".into());
        }
        if self.k > self.n {
            return bad(format!("K = {} exceeds N = {}", self.k, self.n));
        }
        if !(self.mu > 0.0 && self.l >= self.mu) {
            return bad(format!("need 0 < mu <= L, got mu = {}, L = {}", self.mu, self.l));
        }
        if self.hk_sq.len() != self.n {
            return bad(format!("expected {} per-client variance bounds, got {}", self.n, self.hk_sq.len()));
        }
        let nonneg = [self.gamma_noniid, self.h_sq, self.gamma_shift, self.delta0];
        if nonneg.iter().chain(&self.hk_sq).any(|v| !(*v >= 0.0)) {
            return bad("Gamma, H^2, H_k^2, gamma and delta0 must be >= 0".into());
        }
        if !(self.snr_ul_linear > 0.0) {
            return bad(format!("uplink SNR must be > 0, got {}", self.snr_ul_linear));
        }
        Ok(())
    }
}

/// The six additive terms of the constant B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantBTerms {
    pub gradient_variance: f64,
    pub heterogeneity: f64,
    pub local_drift: f64,
    pub partial_participation: f64,
    pub uplink_channel: f64,
    pub downlink_noise: f64,
}

impl ConstantBTerms {
    pub fn total(&self) -> f64 {
        self.gradient_variance
            + self.heterogeneity
            + self.local_drift
            + self.partial_participation
            + self.uplink_channel
            + self.downlink_noise
    }
}

pub fn convergence_constant_b_terms(p: &ConvergenceParams) -> Result<ConstantBTerms> {
    p.validate()?;
    let (n, k, m, e, d) = (p.n as f64, p.k as f64, p.m as f64, p.e as f64, p.d as f64);
    let e2h2 = e * e * p.h_sq;
    let partial_participation = if p.n == 1 { 0.0 } else { (n - k) / (n - 1.0) * (4.0 / k) * e2h2 };
    Ok(ConstantBTerms {
        gradient_variance: p.hk_sq.iter().sum::<f64>() / (n * n),
        heterogeneity: 6.0 * p.l * p.gamma_noniid,
        local_drift: 8.0 * (e - 1.0).powi(2) * p.h_sq,
        partial_participation,
        uplink_channel: 4.0 / k * (k / m + 1.0 / p.snr_ul_linear) * e2h2,
        downlink_noise: d * m * k / (n * n * (k + m)),
    })
}

pub fn convergence_constant_b(p: &ConvergenceParams) -> Result<f64> {
    convergence_constant_b_terms(p).map(|t| t.total())
}

/// `(1 + K/M + 1/SNR)·H²/K`, the constant for full participation, one local
/// step and i.i.d. data.
pub fn convergence_constant_btilde(k: usize, m: usize, snr_linear: f64, h_sq: f64) -> f64 {
    let kf = k as f64;
    (1.0 + kf / m as f64 + 1.0 / snr_linear) * h_sq / kf
}

/// `L/(2(t+γ))·[4B/μ² + (1+γ)Δ₀]`.
pub fn convergence_bound_rhs(t: usize, p: &ConvergenceParams, b: f64) -> Result<f64> {
    if t == 0 {
        return Err(BoundsError::InvalidParams("round index t must be >= 1".into()));
    }
    let g = p.gamma_shift;
    Ok(p.l / (2.0 * (t as f64 + g)) * (4.0 * b / (p.mu * p.mu) + (1.0 + g) * p.delta0))
}

/// Exact `E|ĥ_s^H y − Σ_k x_k|²` summed over slots, divided by K², for i.i.d.
/// Rayleigh channels with perfect sum-channel knowledge:
/// `(1/K²)[(K/M)·Σ_k‖x_k‖² + d·K·σ²]`, σ² the per-antenna noise variance.
/// For unit-power payloads (`Σ_k‖x_k‖² = dK`) this is
/// `(1/K²)(K/M + 1/SNR)·Σ_k‖x_k‖²` under the unscaled convention.
pub fn lemma3_variance_exact(x: &UplinkPayload, antennas: usize, snr_linear: f64, noise: NoiseConvention) -> f64 {
    let k = x.clients() as f64;
    let m = antennas as f64;
    let energy: f64 = x.column_energies().iter().sum();
    let noise_power = x.slots() as f64 * k * noise.per_antenna_variance(snr_linear, antennas);
    (k / m * energy + noise_power) / (k * k)
}

/// `(MK/(N²(K+M)))·d/SNR_DL`.
pub fn lemma4_variance_exact(n: usize, k: usize, m: usize, d: usize, snr_dl_linear: f64) -> f64 {
    let (n, k, m, d) = (n as f64, k as f64, m as f64, d as f64);
    m * k / (n * n * (k + m)) * d / snr_dl_linear
}
