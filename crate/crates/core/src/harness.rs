//! Experiment driver: Monte Carlo MSE sweeps, robustness studies, federated
//! training runs, bound evaluation and timing, all emitting [`RunRecord`]s.
//!
//! Every trial owns an RNG stream addressed by (M, K, SNR, trial), and per
//! trial results are reduced with a fixed pairwise tree, so output does not
//! depend on the number of worker threads.

use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{
    convergence_bound_rhs, convergence_constant_b, convergence_constant_btilde, crlb_downlink, crlb_uplink_aggregate,
    effective_channel_enhanced, effective_snr, fim_uplink, BoundsError, ConvergenceParams,
};
use crate::channel::{estimate_csi, ChannelModelConfig, ChannelSampler, CorrelationKind, EstimationMode};
use crate::data::{
    load_delimited, load_mnist_even_odd, partition_iid, partition_label_skewed, synthetic_regression, Dataset,
    SyntheticBinaryTask,
};
use crate::fl::{
    estimate_gradient_constants, global_loss, heterogeneity, run_federated_training, DlPowerSchedule, FlConfig,
    FlError, FlState, LossModel, PayloadNormalization,
};
use crate::numerics::{fill_complex_gaussian, Complex, ComplexMatrix, RngStream};
use crate::phy::{
    approx_sinr, db_to_linear, downlink_broadcast_with_noise, draw_downlink_noise, draw_uplink_noise, linear_to_db,
    received_signals, uplink_aggregate_with_noise, DownlinkScheme, DownlinkSchemeConfig, MmseForm, MmseReceiver,
    NoiseConvention, PhyError, UplinkPayload, UplinkScheme, UplinkSchemeConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure in {cell}: {message}")]
    Numeric { cell: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric { .. } => 3,
            Self::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MseSweep,
    RobustnessCorrelation,
    RobustnessImperfectCsi,
    FlRun,
    BoundsEval,
    Timing,
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::MseSweep => "mse_sweep",
            Self::RobustnessCorrelation => "robustness_correlation",
            Self::RobustnessImperfectCsi => "robustness_imperfect_csi",
            Self::FlRun => "fl_run",
            Self::BoundsEval => "bounds_eval",
            Self::Timing => "timing",
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_trials() -> usize {
    2000
}
fn default_slots() -> usize {
    8
}
fn default_antennas() -> Vec<usize> {
    vec![64, 256]
}
fn default_full_grid() -> Vec<usize> {
    vec![512, 1024]
}
fn default_clients() -> Vec<usize> {
    vec![8]
}
fn default_snr() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]
}
fn default_uplink() -> Vec<UplinkScheme> {
    vec![UplinkScheme::RandomOrthogonalization, UplinkScheme::Enhanced, UplinkScheme::MmseFullCsi]
}
fn default_downlink() -> Vec<DownlinkScheme> {
    vec![DownlinkScheme::RandomOrthogonalization, DownlinkScheme::Enhanced]
}

/// Top-level experiment description, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Identifier written to the `experiment` column; defaults to the kind.
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Payload entries per trial (d).
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default = "default_antennas")]
    pub antennas: Vec<usize>,
    /// Added to `antennas` when `full_grid` is set.
    #[serde(default = "default_full_grid")]
    pub full_grid_antennas: Vec<usize>,
    #[serde(default)]
    pub full_grid: bool,
    #[serde(default = "default_clients")]
    pub clients: Vec<usize>,
    #[serde(default = "default_snr")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_uplink")]
    pub uplink_schemes: Vec<UplinkScheme>,
    #[serde(default = "default_downlink")]
    pub downlink_schemes: Vec<DownlinkScheme>,
    #[serde(default)]
    pub noise_convention: NoiseConvention,
    /// Channel model for sweeps and the correlation baseline.
    #[serde(default)]
    pub channel: CorrelationKind,
    /// CSI acquisition for sweeps and the imperfect-CSI baseline.
    #[serde(default)]
    pub csi: EstimationMode,
    /// Channel models compared against `channel` in correlation studies.
    #[serde(default)]
    pub correlations: Vec<CorrelationKind>,
    /// CSI modes compared against `csi` in imperfect-CSI studies.
    #[serde(default)]
    pub csi_modes: Vec<EstimationMode>,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub fl: Option<FlExperiment>,
    #[serde(default)]
    pub bounds: Option<BoundsExperiment>,
}

impl ExperimentConfig {
    /// Built-in configuration for a kind, used when no file is given.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let mut cfg = Self {
            kind,
            experiment: None,
            master_seed: default_seed(),
            trials: default_trials(),
            slots: default_slots(),
            antennas: default_antennas(),
            full_grid_antennas: default_full_grid(),
            full_grid: false,
            clients: default_clients(),
            snr_db: default_snr(),
            uplink_schemes: default_uplink(),
            downlink_schemes: default_downlink(),
            noise_convention: NoiseConvention::default(),
            channel: CorrelationKind::IidRayleigh,
            csi: EstimationMode::Perfect,
            correlations: Vec::new(),
            csi_modes: Vec::new(),
            workers: 0,
            output_path: None,
            fl: None,
            bounds: None,
        };
        match kind {
            ExperimentKind::RobustnessCorrelation => {
                cfg.antennas = vec![256];
                cfg.full_grid_antennas = Vec::new();
                cfg.snr_db = vec![10.0];
                cfg.correlations = [0.01, 0.05]
                    .iter()
                    .flat_map(|&rho| {
                        [CorrelationKind::AntennaCorrelated { rho }, CorrelationKind::UserCorrelated { rho }]
                    })
                    .collect();
            }
            ExperimentKind::RobustnessImperfectCsi => {
                cfg.antennas = vec![256];
                cfg.full_grid_antennas = Vec::new();
                cfg.snr_db = vec![10.0];
                cfg.uplink_schemes = vec![UplinkScheme::RandomOrthogonalization, UplinkScheme::Enhanced];
                cfg.csi_modes = vec![EstimationMode::PilotNoise { pilot_snr_db: 20.0 }];
            }
            ExperimentKind::FlRun => {
                cfg.antennas = vec![256];
                cfg.full_grid_antennas = Vec::new();
                cfg.snr_db = vec![10.0];
                cfg.fl = Some(FlExperiment::default());
            }
            ExperimentKind::BoundsEval => {
                cfg.antennas = vec![16, 64, 256, 1024];
                cfg.full_grid_antennas = Vec::new();
                cfg.snr_db = vec![0.0, 10.0, 20.0];
                cfg.bounds = Some(BoundsExperiment::default());
            }
            ExperimentKind::Timing => {
                cfg.antennas = vec![64, 256];
                cfg.trials = 200;
            }
            ExperimentKind::MseSweep => {}
        }
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn experiment_id(&self) -> String {
        self.experiment.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    /// The antenna grid in effect, sorted and deduplicated.
    pub fn antenna_grid(&self) -> Vec<usize> {
        let mut grid = self.antennas.clone();
        if self.full_grid {
            grid.extend(&self.full_grid_antennas);
        }
        grid.sort_unstable();
        grid.dedup();
        grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(HarnessError::Config(s.to_string()));
        if self.trials == 0 || self.slots == 0 {
            return bad("trials and slots must be >= 1");
        }
        if self.antennas.is_empty() || self.clients.is_empty() || self.snr_db.is_empty() {
            return bad("antennas, clients and snr_db grids must be non-empty");
        }
        if self.antenna_grid().contains(&0) || self.clients.contains(&0) {
            return bad("antenna and client counts must be >= 1");
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db values must be finite");
        }
        for kind in std::iter::once(&self.channel).chain(&self.correlations) {
            ChannelModelConfig { antennas: 1, clients: 1, kind: *kind }
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        for mode in std::iter::once(&self.csi).chain(&self.csi_modes) {
            mode.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        match self.kind {
            ExperimentKind::MseSweep | ExperimentKind::Timing
                if self.uplink_schemes.is_empty() && self.downlink_schemes.is_empty() =>
            {
                bad("no schemes selected")
            }
            ExperimentKind::RobustnessCorrelation if self.correlations.is_empty() => {
                bad("robustness_correlation needs a non-empty `correlations` list")
            }
            ExperimentKind::RobustnessImperfectCsi if self.csi_modes.is_empty() => {
                bad("robustness_imperfect_csi needs a non-empty `csi_modes` list")
            }
            ExperimentKind::FlRun => self.fl.clone().unwrap_or_default().validate(),
            ExperimentKind::BoundsEval => self.bounds.clone().unwrap_or_default().validate(),
            _ => Ok(()),
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub experiment: String,
    pub scheme: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub snr_db: f64,
    pub metric: String,
    /// `inf` marks an unbounded value.
    pub value: f64,
    pub trials: usize,
    pub seed: u64,
    pub noise_convention: String,
    pub csi_mode: String,
}

pub const CSV_HEADER: &str = "experiment,scheme,M,K,snr_db,metric,value,trials,seed,noise_convention,csi_mode";

pub fn write_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let io = |e: csv::Error| HarnessError::Io { path: "<csv>".into(), message: e.to_string() };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    }
    for r in records {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: "<csv>".into(), message: e.to_string() })
}

pub fn write_csv_file(records: &[RunRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })?;
    write_csv(records, std::io::BufWriter::new(file)).map_err(|e| match e {
        HarnessError::Io { message, .. } => HarnessError::Io { path: path.display().to_string(), message },
        other => other,
    })
}

/// Sum with a fixed binary tree over the slice order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

/// One Monte Carlo cell: every selected scheme sees the same channel,
/// payload and noise draws in each trial.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub antennas: usize,
    pub clients: usize,
    pub snr_db: f64,
    pub slots: usize,
    pub trials: usize,
    pub seed: u64,
    pub channel: CorrelationKind,
    pub csi: EstimationMode,
    pub noise: NoiseConvention,
    pub uplink: Vec<UplinkScheme>,
    pub downlink: Vec<DownlinkScheme>,
}

impl CellSpec {
    pub fn label(&self) -> String {
        format!(
            "cell M={} K={} snr={} dB channel={} csi={}",
            self.antennas,
            self.clients,
            self.snr_db,
            self.channel.label(),
            self.csi.label()
        )
    }

    /// Stream of one trial. Keyed by the cell coordinates rather than its
    /// position in a grid so that variants of a cell (other channel model,
    /// CSI mode or scheme list) reuse the same draws.
    pub fn trial_stream(&self, trial: usize) -> RngStream {
        RngStream::new(self.seed, 0).substream_path(&[
            self.antennas as u64,
            self.clients as u64,
            self.snr_db.to_bits(),
            trial as u64,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeStats {
    /// Mean squared error per entry, averaged over trials.
    pub mse: f64,
    pub mse_se: f64,
    /// Matched CRLB averaged over the trials where it is bounded.
    pub crlb: f64,
    pub crlb_unbounded_trials: usize,
    /// Per-trial values, in trial order.
    pub trial_mse: Vec<f64>,
    pub trial_crlb: Vec<Option<f64>>,
}

impl SchemeStats {
    fn from_trials(trial_mse: Vec<f64>, trial_crlb: Vec<Option<f64>>) -> Self {
        let (mse, mse_se) = mean_and_se(&trial_mse);
        let bounded: Vec<f64> = trial_crlb.iter().flatten().copied().collect();
        let crlb = if bounded.is_empty() { f64::INFINITY } else { pairwise_sum(&bounded) / bounded.len() as f64 };
        Self { mse, mse_se, crlb, crlb_unbounded_trials: trial_crlb.len() - bounded.len(), trial_mse, trial_crlb }
    }

    /// MSE minus CRLB in dB.
    pub fn gap_db(&self) -> f64 {
        linear_to_db(self.mse) - linear_to_db(self.crlb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub spec: CellSpec,
    pub uplink: Vec<(UplinkScheme, SchemeStats)>,
    pub downlink: Vec<(DownlinkScheme, SchemeStats)>,
    /// Monte Carlo SINR of the random-orthogonalization projection:
    /// signal power over interference-plus-noise power, pooled over trials.
    pub sinr_mc: Option<f64>,
}

impl CellResult {
    pub fn uplink_stats(&self, scheme: UplinkScheme) -> Option<&SchemeStats> {
        self.uplink.iter().find(|(s, _)| *s == scheme).map(|(_, st)| st)
    }

    pub fn downlink_stats(&self, scheme: DownlinkScheme) -> Option<&SchemeStats> {
        self.downlink.iter().find(|(s, _)| *s == scheme).map(|(_, st)| st)
    }
}

struct TrialOutcome {
    uplink: Vec<(f64, Option<f64>)>,
    downlink: Vec<(f64, Option<f64>)>,
    sinr: Option<(f64, f64)>,
}

const STREAM_CHANNEL: u64 = 0;
const STREAM_CSI: u64 = 1;
const STREAM_PAYLOAD: u64 = 2;
const STREAM_UL_NOISE: u64 = 3;
const STREAM_MODEL: u64 = 4;
const STREAM_DL_NOISE: u64 = 5;

fn bounded(r: std::result::Result<f64, BoundsError>) -> std::result::Result<Option<f64>, BoundsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(BoundsError::Unbounded { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_trial(spec: &CellSpec, sampler: &ChannelSampler, trial: usize) -> std::result::Result<TrialOutcome, String> {
    let base = spec.trial_stream(trial);
    let (m, k, d) = (spec.antennas, spec.clients, spec.slots);
    let real = sampler.draw(&mut base.substream(STREAM_CHANNEL));
    let csi = estimate_csi(&real, spec.csi, &mut base.substream(STREAM_CSI)).map_err(|e| e.to_string())?;
    let mut prng = base.substream(STREAM_PAYLOAD);
    let payload =
        UplinkPayload::new(d, k, (0..d * k).map(|_| prng.standard_normal()).collect()).map_err(|e| e.to_string())?;
    let ul_base = UplinkSchemeConfig::new(UplinkScheme::RandomOrthogonalization, spec.snr_db).with_noise(spec.noise);
    let ul_noise = draw_uplink_noise(m, d, &ul_base, &mut base.substream(STREAM_UL_NOISE));
    let truth = payload.slot_sums();
    let snr_eff = effective_snr(ul_base.snr_linear(), m, spec.noise);
    let crlb_h = || -> std::result::Result<Option<f64>, BoundsError> {
        bounded(fim_uplink(real.matrix(), snr_eff).and_then(|f| crlb_uplink_aggregate(&f)))
    };

    let mut sinr = None;
    let mut uplink = Vec::with_capacity(spec.uplink.len());
    for &scheme in &spec.uplink {
        let cfg = UplinkSchemeConfig { scheme, ..ul_base };
        let est = uplink_aggregate_with_noise(&cfg, &real, &csi.sum_channel, &csi.echo_gains, &payload, &ul_noise)
            .map_err(|e| format!("{}: {e}", scheme.label()))?;
        let mse = est.values.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
        let crlb = match scheme {
            UplinkScheme::Ideal => Ok(Some(0.0)),
            UplinkScheme::Enhanced => bounded(
                effective_channel_enhanced(&real, &csi.echo_gains)
                    .and_then(|h| fim_uplink(&h, snr_eff))
                    .and_then(|f| crlb_uplink_aggregate(&f)),
            ),
            _ => crlb_h(),
        }
        .map_err(|e| e.to_string())?;
        if scheme == UplinkScheme::RandomOrthogonalization {
            let comps = est.components.as_ref().expect("projection schemes report components");
            let s = comps.iter().map(|c| c.signal.norm_sqr()).sum::<f64>();
            let i = comps.iter().map(|c| (c.interference + c.noise).norm_sqr()).sum::<f64>();
            sinr = Some((s, i));
        }
        uplink.push((mse, crlb));
    }

    let mut downlink = Vec::with_capacity(spec.downlink.len());
    if !spec.downlink.is_empty() {
        let mut mrng = base.substream(STREAM_MODEL);
        let w: Vec<f64> = (0..d).map(|_| mrng.standard_normal()).collect();
        let dl_cfg = DownlinkSchemeConfig::new(DownlinkScheme::RandomOrthogonalization, spec.snr_db);
        let dl_noise = draw_downlink_noise(k, d, &dl_cfg, &mut base.substream(STREAM_DL_NOISE));
        let root_k = (k as f64).sqrt();
        for &scheme in &spec.downlink {
            let rx = downlink_broadcast_with_noise(scheme, &real, &csi.sum_channel, &csi.echo_gains, &w, &dl_noise)
                .map_err(|e| format!("{}: {e}", scheme.label()))?;
            let err: f64 = rx.per_client.iter().flat_map(|c| c.iter().zip(&w).map(|(a, b)| (a - b).powi(2))).sum();
            let precoder: Vec<Complex> = match scheme {
                DownlinkScheme::Enhanced => csi.sum_channel.iter().map(|z| z / root_k).collect(),
                _ => csi.sum_channel.to_vec(),
            };
            let crlb = if scheme == DownlinkScheme::Ideal {
                Some(0.0)
            } else {
                let per_client = (0..k)
                    .map(|c| bounded(crlb_downlink(&real.column(c), &precoder, dl_cfg.snr_linear())))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                per_client.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / k as f64)
            };
            downlink.push((err / (k * d) as f64, crlb));
        }
    }
    Ok(TrialOutcome { uplink, downlink, sinr })
}

/// Run one cell on the current rayon pool.
pub fn simulate_cell(spec: &CellSpec) -> Result<CellResult> {
    let cell = spec.label();
    let sampler =
        ChannelSampler::new(ChannelModelConfig { antennas: spec.antennas, clients: spec.clients, kind: spec.channel })
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    if spec.trials == 0 || spec.slots == 0 {
        return Err(HarnessError::Config(format!("{cell}: trials and slots must be >= 1")));
    }
    let outcomes: Vec<TrialOutcome> = (0..spec.trials)
        .into_par_iter()
        .map(|t| run_trial(spec, &sampler, t).map_err(|message| (t, message)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|(t, message)| HarnessError::Numeric { cell: format!("{cell} trial {t}"), message })?;

    let stats = |pick: &dyn Fn(&TrialOutcome) -> (f64, Option<f64>)| {
        let (mse, crlb): (Vec<f64>, Vec<Option<f64>>) = outcomes.iter().map(pick).unzip();
        SchemeStats::from_trials(mse, crlb)
    };
    let uplink: Vec<_> =
        spec.uplink.iter().enumerate().map(|(i, &s)| (s, stats(&|o: &TrialOutcome| o.uplink[i]))).collect();
    let downlink: Vec<_> =
        spec.downlink.iter().enumerate().map(|(i, &s)| (s, stats(&|o: &TrialOutcome| o.downlink[i]))).collect();
    let non_finite = uplink
        .iter()
        .map(|(s, st): &(UplinkScheme, SchemeStats)| (s.label(), st))
        .chain(downlink.iter().map(|(s, st): &(DownlinkScheme, SchemeStats)| (s.label(), st)))
        .find(|(_, st)| !st.mse.is_finite());
    if let Some((label, st)) = non_finite {
        return Err(HarnessError::Numeric { cell, message: format!("{label}: non-finite MSE {}", st.mse) });
    }
    let sinr_mc = outcomes.first().and_then(|o| o.sinr).map(|_| {
        let s: Vec<f64> = outcomes.iter().map(|o| o.sinr.unwrap().0).collect();
        let i: Vec<f64> = outcomes.iter().map(|o| o.sinr.unwrap().1).collect();
        pairwise_sum(&s) / pairwise_sum(&i)
    });
    Ok(CellResult { spec: spec.clone(), uplink, downlink, sinr_mc })
}

struct RecordContext<'a> {
    experiment: String,
    cfg: &'a ExperimentConfig,
}

impl RecordContext<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        scheme: &str,
        m: usize,
        k: usize,
        snr_db: f64,
        metric: &str,
        value: f64,
        trials: usize,
        csi: &str,
    ) -> RunRecord {
        RunRecord {
            experiment: self.experiment.clone(),
            scheme: scheme.to_string(),
            m,
            k,
            snr_db,
            metric: metric.to_string(),
            value,
            trials,
            seed: self.cfg.master_seed,
            noise_convention: self.cfg.noise_convention.label().to_string(),
            csi_mode: csi.to_string(),
        }
    }
}

fn cell_records(ctx: &RecordContext, res: &CellResult, baseline: Option<&CellResult>) -> Vec<RunRecord> {
    let s = &res.spec;
    let csi = s.csi.label();
    let rec = |scheme: &str, metric: &str, value: f64| {
        ctx.record(scheme, s.antennas, s.clients, s.snr_db, metric, value, s.trials, &csi)
    };
    let mut out = Vec::new();
    let mut push_stats = |label: &str, st: &SchemeStats, base: Option<&SchemeStats>| {
        out.push(rec(label, "mse", st.mse));
        out.push(rec(label, "mse_db", linear_to_db(st.mse)));
        out.push(rec(label, "mse_se", st.mse_se));
        out.push(rec(label, "crlb", st.crlb));
        out.push(rec(label, "crlb_db", linear_to_db(st.crlb)));
        if st.crlb_unbounded_trials > 0 {
            out.push(rec(label, "crlb_unbounded_trials", st.crlb_unbounded_trials as f64));
        }
        if let Some(b) = base {
            out.push(rec(label, "mse_delta_db", linear_to_db(st.mse) - linear_to_db(b.mse)));
        }
    };
    for (scheme, st) in &res.uplink {
        push_stats(scheme.label(), st, baseline.and_then(|b| b.uplink_stats(*scheme)));
    }
    for (scheme, st) in &res.downlink {
        push_stats(scheme.label(), st, baseline.and_then(|b| b.downlink_stats(*scheme)));
    }
    if let Some(sinr) = res.sinr_mc {
        let label = UplinkScheme::RandomOrthogonalization.label();
        out.push(rec(label, "sinr_mc", sinr));
        out.push(rec(label, "sinr_formula", approx_sinr(s.antennas, s.clients, db_to_linear(s.snr_db))));
    }
    out
}

fn base_spec(cfg: &ExperimentConfig, m: usize, k: usize, snr_db: f64) -> CellSpec {
    CellSpec {
        antennas: m,
        clients: k,
        snr_db,
        slots: cfg.slots,
        trials: cfg.trials,
        seed: cfg.master_seed,
        channel: cfg.channel,
        csi: cfg.csi,
        noise: cfg.noise_convention,
        uplink: cfg.uplink_schemes.clone(),
        downlink: cfg.downlink_schemes.clone(),
    }
}

fn grid(cfg: &ExperimentConfig) -> Vec<(usize, usize, f64)> {
    let mut cells = Vec::new();
    for &m in &cfg.antenna_grid() {
        for &k in &cfg.clients {
            for &snr in &cfg.snr_db {
                cells.push((m, k, snr));
            }
        }
    }
    cells
}

/// MSE and matched CRLB of every selected scheme over the (M, K, SNR) grid.
pub fn run_mse_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ctx = RecordContext { experiment: cfg.experiment_id(), cfg };
    let mut out = Vec::new();
    for (m, k, snr) in grid(cfg) {
        let res = simulate_cell(&base_spec(cfg, m, k, snr))?;
        out.extend(cell_records(&ctx, &res, None));
    }
    Ok(out)
}

/// Each channel model in `correlations` (or CSI mode in `csi_modes`) against
/// the baseline on the same trial streams. Rows carry `mse_delta_db`
/// relative to the baseline.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let id = cfg.experiment_id();
    let mut out = Vec::new();
    for (m, k, snr) in grid(cfg) {
        let spec = base_spec(cfg, m, k, snr);
        let baseline = simulate_cell(&spec)?;
        let base_label = match cfg.kind {
            ExperimentKind::RobustnessImperfectCsi => cfg.csi.label(),
            _ => cfg.channel.label(),
        };
        let ctx = RecordContext { experiment: format!("{id}:{base_label}"), cfg };
        out.extend(cell_records(&ctx, &baseline, None));
        let variants: Vec<(String, CellSpec)> = match cfg.kind {
            ExperimentKind::RobustnessImperfectCsi => {
                cfg.csi_modes.iter().map(|&csi| (csi.label(), CellSpec { csi, ..spec.clone() })).collect()
            }
            _ => cfg
                .correlations
                .iter()
                .map(|&channel| (channel.label(), CellSpec { channel, ..spec.clone() }))
                .collect(),
        };
        for (label, variant) in variants {
            let res = simulate_cell(&variant)?;
            let ctx = RecordContext { experiment: format!("{id}:{label}"), cfg };
            out.extend(cell_records(&ctx, &res, Some(&baseline)));
        }
    }
    Ok(out)
}

/// Data source for federated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlTask {
    SyntheticBinary { dim: usize, samples_per_client: usize, test_samples: usize, label_noise: f64 },
    SyntheticRegression { dim: usize, samples_per_client: usize, noise_std: f64 },
    Delimited { train: PathBuf, test: Option<PathBuf> },
    Mnist { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    LabelSkewed,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeCombo {
    pub uplink: UplinkScheme,
    pub downlink: DownlinkScheme,
}

impl SchemeCombo {
    pub fn label(&self) -> String {
        format!("{}+{}", self.uplink.label(), self.downlink.label())
    }
}

/// Federated-training section of an experiment. The uplink SNR comes from
/// the top-level `snr_db` grid and the antenna count from the antenna grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlExperiment {
    pub task: FlTask,
    pub loss: LossModel,
    pub partition: Partition,
    pub total_clients: usize,
    pub participants_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    /// Strong-convexity constant of the schedule; defaults to the loss's μ.
    #[serde(default)]
    pub mu: Option<f64>,
    /// Learning-rate shift γ; defaults to `max(8L/μ − 1, 0)`.
    #[serde(default)]
    pub gamma_shift: Option<f64>,
    /// Fixed downlink SNR, used unless `dl_power` scales it.
    pub snr_dl_db: f64,
    #[serde(default)]
    pub dl_power: DlPowerSchedule,
    #[serde(default)]
    pub normalization: PayloadNormalization,
    pub combos: Vec<SchemeCombo>,
    pub seeds: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Gradient-descent steps used to find f* for losses without a closed
    /// form minimizer; 0 skips the optimality gap for those losses.
    #[serde(default)]
    pub minimize_steps: usize,
}

fn default_eval_every() -> usize {
    10
}

impl Default for FlExperiment {
    fn default() -> Self {
        use DownlinkScheme as D;
        use UplinkScheme as U;
        Self {
            task: FlTask::SyntheticBinary { dim: 784, samples_per_client: 500, test_samples: 2000, label_noise: 0.05 },
            loss: LossModel::SvmHingeSmoothed { lambda: 0.01, smoothing: 0.5 },
            partition: Partition::LabelSkewed,
            total_clients: 20,
            participants_per_round: 8,
            local_steps: 1,
            batch_size: 50,
            rounds: 200,
            mu: None,
            gamma_shift: None,
            snr_dl_db: 0.0,
            dl_power: DlPowerSchedule::Theorem1Scaling { initial_snr_db: 0.0 },
            normalization: PayloadNormalization::PerRoundUnitPower,
            combos: [
                (U::Ideal, D::Ideal),
                (U::RandomOrthogonalization, D::Ideal),
                (U::Enhanced, D::Enhanced),
                (U::Ideal, D::RandomOrthogonalization),
            ]
            .iter()
            .map(|&(uplink, downlink)| SchemeCombo { uplink, downlink })
            .collect(),
            seeds: 5,
            eval_every: default_eval_every(),
            minimize_steps: 0,
        }
    }
}

impl FlExperiment {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(HarnessError::Config(s.to_string()));
        if self.combos.is_empty() || self.seeds == 0 {
            return bad("fl: combos must be non-empty and seeds >= 1");
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.total_clients {
            return bad("fl: need 1 <= participants_per_round <= total_clients");
        }
        if self.local_steps == 0 || self.batch_size == 0 || self.rounds == 0 || self.eval_every == 0 {
            return bad("fl: local_steps, batch_size, rounds and eval_every must be >= 1");
        }
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.loss.is_classifier() == matches!(self.task, FlTask::SyntheticRegression { .. }) {
            return bad("fl: classification losses need a labelled task and the quadratic loss a regression task");
        }
        Ok(())
    }

    /// Client datasets and the optional test set for one seed.
    pub fn build_data(&self, rng: &RngStream) -> Result<(Vec<Dataset>, Option<Dataset>)> {
        let n = self.total_clients;
        let cfg_err = |e: crate::data::DataError| HarnessError::Config(e.to_string());
        let mut drng = rng.substream(0);
        let (train, test) = match &self.task {
            FlTask::SyntheticBinary { dim, samples_per_client, test_samples, label_noise } => {
                let task = SyntheticBinaryTask::new(*dim, *label_noise, &mut drng);
                let train = task.sample(samples_per_client * n, &mut drng);
                (train, Some(task.sample(*test_samples, &mut drng)))
            }
            FlTask::SyntheticRegression { dim, samples_per_client, noise_std } => {
                let w_true: Vec<f64> = (0..*dim).map(|_| drng.standard_normal()).collect();
                (synthetic_regression(samples_per_client * n, &w_true, *noise_std, &mut drng), None)
            }
            FlTask::Delimited { train, test } => (
                load_delimited(train).map_err(cfg_err)?,
                test.as_deref().map(load_delimited).transpose().map_err(cfg_err)?,
            ),
            FlTask::Mnist { train_images, train_labels, test_images, test_labels } => (
                load_mnist_even_odd(train_images, train_labels).map_err(cfg_err)?,
                Some(load_mnist_even_odd(test_images, test_labels).map_err(cfg_err)?),
            ),
        };
        let mut prng = rng.substream(1);
        let clients = match self.partition {
            Partition::LabelSkewed => partition_label_skewed(&train, n, &mut prng),
            Partition::Iid => partition_iid(&train, n, &mut prng),
        }
        .map_err(cfg_err)?;
        Ok((clients, test))
    }

    /// Whether the full-participation, single-step, i.i.d. conditions of the
    /// simplified bound hold.
    pub fn simplified_bound_applies(&self, combo: &SchemeCombo) -> bool {
        self.total_clients == self.participants_per_round
            && self.local_steps == 1
            && self.partition == Partition::Iid
            && matches!(self.loss, LossModel::Quadratic { .. })
            && combo.downlink == DownlinkScheme::Ideal
    }

    pub fn training_config(&self, combo: &SchemeCombo, link: &LinkSetting, mu: f64, gamma_shift: f64) -> FlConfig {
        FlConfig {
            total_clients: self.total_clients,
            participants_per_round: self.participants_per_round,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            rounds: self.rounds,
            mu,
            gamma_shift,
            antennas: link.antennas,
            channel: link.channel,
            csi: link.csi,
            uplink: UplinkSchemeConfig::new(combo.uplink, link.snr_ul_db).with_noise(link.noise),
            downlink: DownlinkSchemeConfig::new(combo.downlink, self.snr_dl_db),
            dl_power: self.dl_power,
            normalization: self.normalization,
            eval_every: self.eval_every,
            record_models: self.simplified_bound_applies(combo),
        }
    }
}

/// Radio conditions of a federated run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSetting {
    pub antennas: usize,
    pub snr_ul_db: f64,
    pub noise: NoiseConvention,
    pub channel: CorrelationKind,
    pub csi: EstimationMode,
}

impl LinkSetting {
    /// i.i.d. Rayleigh, perfect CSI, unscaled noise.
    pub fn iid(antennas: usize, snr_ul_db: f64) -> Self {
        Self {
            antennas,
            snr_ul_db,
            noise: NoiseConvention::Unscaled,
            channel: CorrelationKind::IidRayleigh,
            csi: EstimationMode::Perfect,
        }
    }
}

/// Schedule constants `(μ, γ)` for a dataset: configured values or the
/// loss curvature with `γ = max(8L/μ − 1, 0)`.
pub fn schedule_constants(fl: &FlExperiment, clients: &[Dataset]) -> (f64, f64) {
    let (mu_c, l) = fl.loss.curvature(clients);
    let mu = fl.mu.unwrap_or(mu_c);
    (mu, fl.gamma_shift.unwrap_or_else(|| (8.0 * l / mu - 1.0).max(0.0)))
}

/// Per-round averages over seeds for one (combo, M, SNR) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct FlSummary {
    pub combo: SchemeCombo,
    pub antennas: usize,
    pub snr_ul_db: f64,
    pub rounds: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
    pub uplink_sinr: Option<Vec<f64>>,
    /// `F(w_t) − F*` averaged over seeds, when F* is available.
    pub optimality_gap: Option<Vec<f64>>,
    /// Theorem-style envelope, when the simplified conditions hold.
    pub bound_rhs: Option<Vec<f64>>,
    pub bound_rhs_btilde: Option<Vec<f64>>,
    pub runs: Vec<FlState>,
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Train one scheme combination over all seeds.
pub fn run_fl_combo(fl: &FlExperiment, combo: &SchemeCombo, link: &LinkSetting, master_seed: u64) -> Result<FlSummary> {
    let LinkSetting { antennas, snr_ul_db, .. } = *link;
    fl.validate()?;
    let root = RngStream::new(master_seed, 1);
    let mut runs = Vec::with_capacity(fl.seeds);
    let mut gaps = Vec::with_capacity(fl.seeds);
    let mut rhs_rows = Vec::new();
    let mut rhs_tilde_rows = Vec::new();
    for seed in 0..fl.seeds {
        let srng = root.substream(seed as u64);
        let (clients, test) = fl.build_data(&srng.substream(0))?;
        let (mu, gamma) = schedule_constants(fl, &clients);
        let cfg = fl.training_config(combo, link, mu, gamma);
        let state = run_federated_training(&cfg, &fl.loss, &clients, test.as_ref(), &srng.substream(1)).map_err(
            |e| match e {
                FlError::Config(s) => HarnessError::Config(s),
                other => HarnessError::Numeric {
                    cell: format!("fl {} M={antennas} seed={seed}", combo.label()),
                    message: other.to_string(),
                },
            },
        )?;
        let exact = matches!(fl.loss, LossModel::Quadratic { .. });
        if !exact && fl.minimize_steps == 0 {
            runs.push(state);
            continue;
        }
        let w_star = fl
            .loss
            .minimize(&clients, fl.minimize_steps)
            .map_err(|e| HarnessError::Numeric { cell: format!("fl minimizer seed={seed}"), message: e.to_string() })?;
        let f_star = global_loss(&fl.loss, &w_star, &clients);
        gaps.push(state.history.iter().map(|h| h.train_loss - f_star).collect::<Vec<f64>>());
        if cfg.record_models {
            let (mu_c, l) = fl.loss.curvature(&clients);
            let gc = estimate_gradient_constants(&fl.loss, &clients, &state.trajectory, fl.batch_size);
            let gamma_noniid = heterogeneity(&fl.loss, &clients, fl.minimize_steps)
                .map_err(|e| HarnessError::Numeric { cell: "fl heterogeneity".into(), message: e.to_string() })?;
            let w0 = &state.trajectory[0];
            let p = ConvergenceParams {
                n: fl.total_clients,
                k: fl.participants_per_round,
                m: antennas,
                e: fl.local_steps,
                d: w0.len(),
                mu: mu.min(mu_c),
                l,
                gamma_noniid,
                h_sq: gc.h_sq,
                hk_sq: gc.hk_sq,
                snr_ul_linear: db_to_linear(snr_ul_db),
                gamma_shift: gamma,
                delta0: w0.iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum(),
            };
            let b = convergence_constant_b(&p).map_err(|e| HarnessError::Config(e.to_string()))?;
            let btilde = convergence_constant_btilde(p.k, p.m, p.snr_ul_linear, p.h_sq);
            let rhs = |bv: f64| -> Vec<f64> {
                state
                    .history
                    .iter()
                    .map(
                        |h| if h.round == 0 { f64::NAN } else { convergence_bound_rhs(h.round * p.e, &p, bv).unwrap() },
                    )
                    .collect()
            };
            rhs_rows.push(rhs(b));
            rhs_tilde_rows.push(rhs(btilde));
        }
        runs.push(state);
    }
    let rounds = runs[0].history.iter().map(|h| h.round).collect();
    let losses: Vec<Vec<f64>> = runs.iter().map(|r| r.history.iter().map(|h| h.train_loss).collect()).collect();
    let accuracy = fl.loss.is_classifier().then(|| {
        let rows: Vec<Vec<f64>> =
            runs.iter().map(|r| r.history.iter().map(|h| h.test_accuracy.unwrap_or(f64::NAN)).collect()).collect();
        mean_columns(&rows)
    });
    let uplink_sinr = (combo.uplink != UplinkScheme::Ideal).then(|| {
        let rows: Vec<Vec<f64>> =
            runs.iter().map(|r| r.history.iter().map(|h| h.uplink_sinr.unwrap_or(f64::NAN)).collect()).collect();
        mean_columns(&rows)
    });
    Ok(FlSummary {
        combo: *combo,
        antennas,
        snr_ul_db,
        rounds,
        train_loss: mean_columns(&losses),
        accuracy,
        uplink_sinr,
        optimality_gap: (!gaps.is_empty()).then(|| mean_columns(&gaps)),
        // Constants are estimated per seed; the envelope uses the largest.
        bound_rhs: (!rhs_rows.is_empty()).then(|| max_columns(&rhs_rows)),
        bound_rhs_btilde: (!rhs_tilde_rows.is_empty()).then(|| max_columns(&rhs_tilde_rows)),
        runs,
    })
}

fn max_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Per-round loss, accuracy, SINR and (when applicable) bound rows for every
/// scheme combination, antenna count and uplink SNR.
pub fn run_fl_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let fl = cfg.fl.clone().unwrap_or_default();
    let id = cfg.experiment_id();
    let mut out = Vec::new();
    for &m in &cfg.antenna_grid() {
        for &snr in &cfg.snr_db {
            for combo in &fl.combos {
                let s = run_fl_combo(
                    &fl,
                    combo,
                    &LinkSetting {
                        antennas: m,
                        snr_ul_db: snr,
                        noise: cfg.noise_convention,
                        channel: cfg.channel,
                        csi: cfg.csi,
                    },
                    cfg.master_seed,
                )?;
                let label = combo.label();
                for (j, &round) in s.rounds.iter().enumerate() {
                    let ctx = RecordContext { experiment: format!("{id}:round={round}"), cfg };
                    let rec = |metric: &str, v: f64| {
                        ctx.record(&label, m, fl.participants_per_round, snr, metric, v, fl.seeds, &cfg.csi.label())
                    };
                    out.push(rec("train_loss", s.train_loss[j]));
                    if let Some(gap) = &s.optimality_gap {
                        out.push(rec("optimality_gap", gap[j]));
                    }
                    if let Some(acc) = &s.accuracy {
                        out.push(rec("accuracy", acc[j]));
                    }
                    if let Some(sinr) = s.uplink_sinr.as_ref().filter(|_| round > 0) {
                        out.push(rec("sinr_mc", sinr[j]));
                    }
                    if round > 0 {
                        if let Some(rhs) = &s.bound_rhs {
                            out.push(rec("bound_rhs", rhs[j]));
                        }
                        if let Some(rhs) = &s.bound_rhs_btilde {
                            out.push(rec("bound_rhs_btilde", rhs[j]));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parameters for [`evaluate_bounds`]; M and the uplink SNR come from the
/// top-level grids and K from `clients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsExperiment {
    pub total_clients: usize,
    pub local_steps: usize,
    pub dim: usize,
    pub mu: f64,
    pub smoothness: f64,
    pub gamma_noniid: f64,
    pub h_sq: f64,
    /// Per-client variance bound, the same for every client.
    pub hk_sq: f64,
    pub gamma_shift: f64,
    pub delta0: f64,
    pub rounds: Vec<usize>,
}

impl Default for BoundsExperiment {
    fn default() -> Self {
        Self {
            total_clients: 20,
            local_steps: 1,
            dim: 1,
            mu: 1.0,
            smoothness: 1.0,
            gamma_noniid: 1.0,
            h_sq: 1.0,
            hk_sq: 1.0,
            gamma_shift: 7.0,
            delta0: 1.0,
            rounds: vec![1, 10, 100, 1000],
        }
    }
}

impl BoundsExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() || self.rounds.contains(&0) {
            return Err(HarnessError::Config("bounds: rounds must be non-empty and >= 1".into()));
        }
        Ok(())
    }

    pub fn params(&self, k: usize, m: usize, snr_linear: f64) -> ConvergenceParams {
        ConvergenceParams {
            n: self.total_clients,
            k,
            m,
            e: self.local_steps,
            d: self.dim,
            mu: self.mu,
            l: self.smoothness,
            gamma_noniid: self.gamma_noniid,
            h_sq: self.h_sq,
            hk_sq: vec![self.hk_sq; self.total_clients],
            snr_ul_linear: snr_linear,
            gamma_shift: self.gamma_shift,
            delta0: self.delta0,
        }
    }
}

/// B, B̃ and the envelope at the requested rounds over the (M, K, SNR) grid.
pub fn evaluate_bounds(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let b_cfg = cfg.bounds.clone().unwrap_or_default();
    let id = cfg.experiment_id();
    let mut out = Vec::new();
    for (m, k, snr) in grid(cfg) {
        let p = b_cfg.params(k, m, db_to_linear(snr));
        let b = convergence_constant_b(&p).map_err(|e| HarnessError::Config(e.to_string()))?;
        let bt = convergence_constant_btilde(k, m, p.snr_ul_linear, p.h_sq);
        let ctx = RecordContext { experiment: id.clone(), cfg };
        out.push(ctx.record("theorem", m, k, snr, "bound_b", b, 1, "perfect"));
        out.push(ctx.record("corollary", m, k, snr, "bound_btilde", bt, 1, "perfect"));
        for &t in &b_cfg.rounds {
            let ctx = RecordContext { experiment: format!("{id}:round={t}"), cfg };
            let rhs = convergence_bound_rhs(t, &p, b).map_err(|e| HarnessError::Config(e.to_string()))?;
            out.push(ctx.record("theorem", m, k, snr, "bound_rhs", rhs, 1, "perfect"));
            let rhs = convergence_bound_rhs(t, &p, bt).map_err(|e| HarnessError::Config(e.to_string()))?;
            out.push(ctx.record("corollary", m, k, snr, "bound_rhs", rhs, 1, "perfect"));
        }
    }
    Ok(out)
}

/// Total wall time (seconds) of the receiver-side aggregation for each
/// scheme over `trials` channel blocks of `slots` entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingResult {
    pub ro: f64,
    pub enhanced: f64,
    pub mmse_gram: f64,
    pub mmse_covariance: f64,
}

/// Time the aggregation inner loops only; channel draws and received
/// signals are generated outside the timed regions.
pub fn time_cell(antennas: usize, clients: usize, slots: usize, trials: usize, seed: u64) -> Result<TimingResult> {
    let sampler = ChannelSampler::new(ChannelModelConfig::iid(antennas, clients))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let cfg = UplinkSchemeConfig::new(UplinkScheme::MmseFullCsi, 10.0);
    let reg = cfg.noise_variance(antennas);
    let mut total = TimingResult { ro: 0.0, enhanced: 0.0, mmse_gram: 0.0, mmse_covariance: 0.0 };
    let numeric = |e: PhyError| HarnessError::Numeric {
        cell: format!("timing M={antennas} K={clients}"),
        message: e.to_string(),
    };
    for trial in 0..trials {
        let mut rng = RngStream::new(seed, 2).substream_path(&[antennas as u64, clients as u64, trial as u64]);
        let real = sampler.draw(&mut rng);
        let payload = UplinkPayload::new(slots, clients, (0..slots * clients).map(|_| rng.standard_normal()).collect())
            .map_err(numeric)?;
        let noise = draw_uplink_noise(antennas, slots, &cfg, &mut rng);
        let ys = received_signals(&real, &payload, &noise).map_err(numeric)?;
        let hs = real.sum_channel();
        let gains: Vec<f64> = real.project_columns(&hs).iter().map(|g| g.re).collect();

        let start = Instant::now();
        for y in &ys {
            black_box(crate::numerics::hermitian_inner(&hs, y).map_err(|e| numeric(e.into()))?.re);
        }
        total.ro += start.elapsed().as_secs_f64();

        // Client-side pre-scaling by the echo gain plus the same projection.
        let start = Instant::now();
        for (i, y) in ys.iter().enumerate() {
            let scaled: f64 = payload.slot(i).iter().zip(&gains).map(|(x, g)| x / g).sum();
            black_box(scaled);
            black_box(crate::numerics::hermitian_inner(&hs, y).map_err(|e| numeric(e.into()))?.re);
        }
        total.enhanced += start.elapsed().as_secs_f64();

        for (form, slot) in [(MmseForm::Gram, &mut total.mmse_gram), (MmseForm::Covariance, &mut total.mmse_covariance)]
        {
            let start = Instant::now();
            let rx = MmseReceiver::new(&real, reg, form).map_err(numeric)?;
            for y in &ys {
                black_box(rx.estimate(y).map_err(numeric)?.iter().sum::<f64>());
            }
            *slot += start.elapsed().as_secs_f64();
        }
    }
    Ok(total)
}

/// Wall time per scheme and the RO/MMSE ratios over the (M, K) grid. Runs
/// sequentially so timings are not distorted by sharing cores.
pub fn run_timing(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ctx = RecordContext { experiment: cfg.experiment_id(), cfg };
    let snr = 10.0;
    let mut out = Vec::new();
    for &m in &cfg.antenna_grid() {
        for &k in &cfg.clients {
            let t = time_cell(m, k, cfg.slots, cfg.trials, cfg.master_seed)?;
            let rec =
                |scheme: &str, metric: &str, v: f64| ctx.record(scheme, m, k, snr, metric, v, cfg.trials, "perfect");
            out.push(rec("ro_uplink", "wall_time_s", t.ro));
            out.push(rec("enhanced_uplink", "wall_time_s", t.enhanced));
            out.push(rec("mmse_uplink_gram", "wall_time_s", t.mmse_gram));
            out.push(rec("mmse_uplink_covariance", "wall_time_s", t.mmse_covariance));
            out.push(rec("ro_over_mmse_gram", "wall_time_ratio", t.ro / t.mmse_gram));
            out.push(rec("ro_over_mmse_covariance", "wall_time_ratio", t.ro / t.mmse_covariance));
        }
    }
    Ok(out)
}

/// Dispatch on `cfg.kind` inside a pool of `cfg.workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cfg.kind {
        ExperimentKind::MseSweep => run_mse_sweep(cfg),
        ExperimentKind::RobustnessCorrelation | ExperimentKind::RobustnessImperfectCsi => run_robustness(cfg),
        ExperimentKind::FlRun => run_fl_experiment(cfg),
        ExperimentKind::BoundsEval => evaluate_bounds(cfg),
        ExperimentKind::Timing => run_timing(cfg),
    })
}

/// Fill `out` with CN(0, var) draws; exposed for tests that build received
/// signals by hand.
pub fn complex_noise(len: usize, var: f64, rng: &mut RngStream) -> Vec<Complex> {
    let mut out = vec![Complex::new(0.0, 0.0); len];
    fill_complex_gaussian(&mut out, var, rng);
    out
}

/// Channel matrix of a cell's trial, as the sweep would draw it.
pub fn trial_channel(spec: &CellSpec, trial: usize) -> Result<ComplexMatrix> {
    let sampler =
        ChannelSampler::new(ChannelModelConfig { antennas: spec.antennas, clients: spec.clients, kind: spec.channel })
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(sampler.draw(&mut spec.trial_stream(trial).substream(STREAM_CHANNEL)).matrix().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_for(kind);
        cfg.trials = 60;
        cfg.antennas = vec![16];
        cfg.full_grid_antennas = vec![32];
        cfg.clients = vec![4];
        cfg.snr_db = vec![0.0, 20.0];
        cfg
    }

    fn csv_bytes(records: &[RunRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_csv(records, &mut buf).unwrap();
        buf
    }

    #[test]
    fn pairwise_sum_and_se() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
        let (m, se) = mean_and_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_header_and_format() {
        let bytes = csv_bytes(&[]);
        assert_eq!(String::from_utf8(bytes).unwrap(), format!("{CSV_HEADER}\n"));
        let cfg = small(ExperimentKind::MseSweep);
        let ctx = RecordContext { experiment: "e".into(), cfg: &cfg };
        let r = ctx.record("ro_uplink", 16, 4, 10.0, "mse", 0.1 + 0.2, 60, "perfect");
        let text = String::from_utf8(csv_bytes(&[r])).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "e,ro_uplink,16,4,10.0,mse,0.30000000000000004,60,1,unscaled,perfect");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn sweep_is_identical_across_worker_counts() {
        let mut cfg = small(ExperimentKind::MseSweep);
        cfg.workers = 1;
        let one = csv_bytes(&run_experiment(&cfg).unwrap());
        cfg.workers = 4;
        let four = csv_bytes(&run_experiment(&cfg).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn sweep_emits_paired_mse_and_crlb_rows() {
        let cfg = small(ExperimentKind::MseSweep);
        let rows = run_mse_sweep(&cfg).unwrap();
        for scheme in ["ro_uplink", "enhanced_uplink", "mmse_uplink", "ro_downlink", "enhanced_downlink"] {
            let count = |metric: &str| rows.iter().filter(|r| r.scheme == scheme && r.metric == metric).count();
            assert_eq!(count("mse"), 2, "{scheme}");
            assert_eq!(count("crlb"), 2, "{scheme}");
        }
        assert!(rows.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn enhanced_uplink_noiseless_cell_is_exact() {
        let mut cfg = small(ExperimentKind::MseSweep);
        cfg.snr_db = vec![300.0];
        let spec = base_spec(&cfg, 16, 4, 300.0);
        let res = simulate_cell(&spec).unwrap();
        assert!(res.uplink_stats(UplinkScheme::Enhanced).unwrap().mse < 1e-6);
        assert!(res.downlink_stats(DownlinkScheme::Enhanced).unwrap().mse < 1e-6);
    }

    #[test]
    fn full_grid_flag_extends_antennas() {
        let mut cfg = small(ExperimentKind::MseSweep);
        assert_eq!(cfg.antenna_grid(), vec![16]);
        cfg.full_grid = true;
        assert_eq!(cfg.antenna_grid(), vec![16, 32]);
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = ExperimentConfig::from_toml(
            "kind = \"mse_sweep\"\ntrials = 10\nantennas = [8]\nsnr_db = [5.0]\nuplink_schemes = [\"enhanced\"]\n\
             channel = { kind = \"antenna_correlated\", rho = 0.05 }\n",
        )
        .unwrap();
        assert_eq!(cfg.trials, 10);
        assert_eq!(cfg.channel, CorrelationKind::AntennaCorrelated { rho: 0.05 });
        assert!(matches!(
            ExperimentConfig::from_toml("kind = \"mse_sweep\"\ntrails = 3\n"),
            Err(HarnessError::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("kind = \"mse_sweep\"\ntrials = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"mse_sweep\"\nantennas = []\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"robustness_correlation\"\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"nope\"\n").is_err());
        let e =
            ExperimentConfig::from_toml("kind = \"mse_sweep\"\nchannel = { kind = \"user_correlated\", rho = 1.5 }\n");
        assert_eq!(e.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn robustness_rows_carry_deltas() {
        let mut cfg = small(ExperimentKind::RobustnessCorrelation);
        cfg.snr_db = vec![10.0];
        let rows = run_robustness(&cfg).unwrap();
        let deltas: Vec<_> = rows.iter().filter(|r| r.metric == "mse_delta_db").collect();
        assert_eq!(deltas.len(), 4 * 5);
        assert!(rows.iter().any(|r| r.experiment == "robustness_correlation:antenna_rho0.05"));

        let mut cfg = small(ExperimentKind::RobustnessImperfectCsi);
        cfg.snr_db = vec![10.0];
        let rows = run_robustness(&cfg).unwrap();
        assert!(rows.iter().any(|r| r.csi_mode == "pilot_20dB" && r.metric == "mse_delta_db"));
    }

    #[test]
    fn bounds_rows() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::BoundsEval);
        cfg.antennas = vec![256];
        cfg.snr_db = vec![10.0];
        let rows = evaluate_bounds(&cfg).unwrap();
        let b = rows.iter().find(|r| r.metric == "bound_b").unwrap().value;
        assert!((b - 6.450808).abs() < 1e-6);
        assert_eq!(rows.iter().filter(|r| r.metric == "bound_rhs").count(), 8);
    }

    #[test]
    fn fl_experiment_small_run() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::FlRun);
        cfg.antennas = vec![32];
        let fl = cfg.fl.as_mut().unwrap();
        fl.task = FlTask::SyntheticBinary { dim: 10, samples_per_client: 20, test_samples: 100, label_noise: 0.0 };
        fl.total_clients = 4;
        fl.participants_per_round = 2;
        fl.rounds = 6;
        fl.seeds = 2;
        fl.eval_every = 3;
        let rows = run_fl_experiment(&cfg).unwrap();
        let acc = rows.iter().filter(|r| r.metric == "accuracy").count();
        assert_eq!(acc, 4 * 3);
        assert!(rows.iter().any(|r| r.experiment == "fl_run:round=6"));
    }

    #[test]
    fn fl_quadratic_run_emits_bound_rows() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::FlRun);
        cfg.antennas = vec![16];
        let fl = cfg.fl.as_mut().unwrap();
        fl.task = FlTask::SyntheticRegression { dim: 3, samples_per_client: 20, noise_std: 0.5 };
        fl.loss = LossModel::Quadratic { ridge: 0.1 };
        fl.partition = Partition::Iid;
        (fl.total_clients, fl.participants_per_round, fl.rounds, fl.seeds) = (4, 4, 5, 2);
        fl.combos =
            vec![SchemeCombo { uplink: UplinkScheme::RandomOrthogonalization, downlink: DownlinkScheme::Ideal }];
        let rows = run_fl_experiment(&cfg).unwrap();
        assert!(rows.iter().any(|r| r.metric == "bound_rhs"));
        assert!(rows.iter().all(|r| r.metric != "accuracy"));
    }

    #[test]
    fn timing_reports_all_schemes() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Timing);
        cfg.antennas = vec![16];
        cfg.trials = 3;
        let rows = run_timing(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.value >= 0.0));
    }

    #[test]
    fn trial_channel_matches_sweep_draws() {
        let cfg = small(ExperimentKind::MseSweep);
        let spec = base_spec(&cfg, 16, 4, 0.0);
        assert_eq!(trial_channel(&spec, 3).unwrap(), trial_channel(&spec, 3).unwrap());
        assert_ne!(trial_channel(&spec, 3).unwrap(), trial_channel(&spec, 4).unwrap());
    }
}
