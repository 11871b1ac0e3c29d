//! Raw event synthesis for the two-arm camera setup.
//!
//! Every generated pair walks the same chain as in the lab: sampling of the
//! joint momentum, random splitting at the non-polarizing beam splitter,
//! projection by the two polarization analyzers, the detection efficiency,
//! far-field (or near-field) imaging onto the sensor and finally the
//! intensifier cluster with its time walk and jitter. Dark counts are added
//! uniformly over the sensor.
//!
//! Generation is split into fixed-length time chunks, each with its own RNG
//! stream derived from `(seed, setting label, basis plane, chunk index)`, so
//! the output is bit-identical regardless of the number of worker threads.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::polcore::{born_unchecked, projector_from_waveplates, DensityMatrix2Q, WaveplateSetting};
use crate::source::{local_state, SourceConfig, TransverseMomentum};

/// Length of one generation chunk.
const CHUNK_NS: f64 = 1.0e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Signal,
    Idler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisPlane {
    FarField,
    NearField,
}

/// Pixel rectangle `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: u16,
    pub y0: u16,
    pub width: u16,
    pub height: u16,
}

impl Roi {
    pub const fn new(x0: u16, y0: u16, width: u16, height: u16) -> Self {
        Self { x0, y0, width, height }
    }

    /// Geometric center in pixel coordinates (pixel `x` spans `[x−½, x+½)`).
    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + (self.width as f64 - 1.0) / 2.0,
            self.y0 as f64 + (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn contains_pixel(&self, x: i64, y: i64) -> bool {
        x >= self.x0 as i64
            && x < self.x0 as i64 + self.width as i64
            && y >= self.y0 as i64
            && y < self.y0 as i64 + self.height as i64
    }

    /// Containment of a sub-pixel coordinate.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 - 0.5
            && x < self.x0 as f64 + self.width as f64 - 0.5
            && y >= self.y0 as f64 - 0.5
            && y < self.y0 as f64 + self.height as f64 - 0.5
    }

    fn overlaps(&self, o: &Roi) -> bool {
        let (ax1, ay1) = (self.x0 as u32 + self.width as u32, self.y0 as u32 + self.height as u32);
        let (bx1, by1) = (o.x0 as u32 + o.width as u32, o.y0 as u32 + o.height as u32);
        (self.x0 as u32) < bx1 && (o.x0 as u32) < ax1 && (self.y0 as u32) < by1 && (o.y0 as u32) < ay1
    }
}

/// Sensor, optics, intensifier and acquisition parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub sensor_size: u16,
    pub pitch_um: f64,
    /// Effective focal length of the far-field imaging system.
    pub f_eff_mm: f64,
    /// Near-field magnification.
    pub magnification: f64,
    pub wavelength_nm: f64,
    /// RMS per-pixel timing jitter.
    pub time_resolution_ns: f64,
    /// Time walk `c / tot`, in ns·tot.
    pub time_walk_coeff: f64,
    /// Spatial RMS spread of the intensifier cluster.
    pub cluster_sigma: f64,
    /// Mean of the (truncated Poisson) cluster size.
    pub cluster_mean_size: f64,
    pub cluster_max_size: u32,
    /// Typical tot of the central cluster pixel.
    pub tot_scale: f64,
    /// Pixels below this amplitude do not trigger.
    pub tot_threshold: u32,
    pub efficiency: f64,
    /// Dark-count rate over the whole sensor.
    pub dark_rate_hz: f64,
    pub signal_roi: Roi,
    pub idler_roi: Roi,
    pub acquisition_s: f64,
    pub pair_rate_hz: f64,
    /// Route every pair to distinct arms instead of a 50/50 split.
    pub deterministic_split: bool,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sensor_size: 256,
            pitch_um: 55.0,
            f_eff_mm: 75.0,
            magnification: 2.0,
            wavelength_nm: 800.0,
            time_resolution_ns: 2.0,
            time_walk_coeff: 100.0,
            cluster_sigma: 0.7,
            cluster_mean_size: 4.0,
            cluster_max_size: 16,
            tot_scale: 300.0,
            tot_threshold: 5,
            efficiency: 0.08,
            dark_rate_hz: 1000.0,
            signal_roi: Roi::new(0, 0, 128, 256),
            idler_roi: Roi::new(128, 0, 128, 256),
            acquisition_s: 1.0,
            pair_rate_hz: 2.0e6,
            deterministic_split: false,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.sensor_size as u32;
        for (name, roi) in [("signal", &self.signal_roi), ("idler", &self.idler_roi)] {
            if roi.width == 0 || roi.height == 0 {
                return Err(Error::Config(format!("{name} ROI is empty")));
            }
            if roi.x0 as u32 + roi.width as u32 > s || roi.y0 as u32 + roi.height as u32 > s {
                return Err(Error::Config(format!("{name} ROI exceeds the sensor")));
            }
        }
        if self.signal_roi.overlaps(&self.idler_roi) {
            return Err(Error::Config("signal and idler ROIs overlap".into()));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config("efficiency must lie in (0, 1]".into()));
        }
        let nonneg = [
            ("dark_rate_hz", self.dark_rate_hz),
            ("pair_rate_hz", self.pair_rate_hz),
            ("acquisition_s", self.acquisition_s),
            ("time_resolution_ns", self.time_resolution_ns),
            ("time_walk_coeff", self.time_walk_coeff),
            ("cluster_sigma", self.cluster_sigma),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        let positive = [
            ("pitch_um", self.pitch_um),
            ("f_eff_mm", self.f_eff_mm),
            ("magnification", self.magnification),
            ("wavelength_nm", self.wavelength_nm),
            ("tot_scale", self.tot_scale),
            ("cluster_mean_size", self.cluster_mean_size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive")));
            }
        }
        if self.cluster_max_size == 0 {
            return Err(Error::Config("cluster_max_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn roi(&self, arm: Arm) -> &Roi {
        match arm {
            Arm::Signal => &self.signal_roi,
            Arm::Idler => &self.idler_roi,
        }
    }

    /// Far-field angle subtended by one pixel, rad.
    pub fn pixel_angle(&self) -> f64 {
        self.pitch_um / (self.f_eff_mm * 1000.0)
    }

    /// Wavenumber `2π/λ` in µm⁻¹.
    pub fn k_um(&self) -> f64 {
        2.0 * PI / (self.wavelength_nm * 1e-3)
    }
}

/// One raw pixel hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhotonEvent {
    pub x: u16,
    pub y: u16,
    pub toa: u64,
    pub tot: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSetting {
    pub label: String,
    pub signal: WaveplateSetting,
    pub idler: WaveplateSetting,
    pub basis_plane: BasisPlane,
}

impl MeasurementSetting {
    /// Setting from a two-letter label over `{H, V, D, A, R, L}`.
    pub fn from_label(label: &str, basis_plane: BasisPlane) -> Result<Self> {
        let chars: Vec<char> = label.chars().collect();
        let bad = || Error::Config(format!("unknown polarization setting label {label:?}"));
        if chars.len() != 2 {
            return Err(bad());
        }
        let signal = WaveplateSetting::for_state(chars[0]).ok_or_else(bad)?;
        let idler = WaveplateSetting::for_state(chars[1]).ok_or_else(bad)?;
        Ok(Self {
            label: label.to_string(),
            signal,
            idler,
            basis_plane,
        })
    }
}

/// Labels of the standard 16-setting two-qubit tomography set.
pub const TOMOGRAPHY_LABELS: [&str; 16] = [
    "HH", "HV", "VV", "VH", "RH", "RV", "DV", "DH", "DR", "DD", "RD", "HD", "VD", "VL", "HL", "RL",
];

/// The 16 far-field tomography settings.
pub fn tomography_settings() -> Vec<MeasurementSetting> {
    TOMOGRAPHY_LABELS
        .iter()
        .map(|l| MeasurementSetting::from_label(l, BasisPlane::FarField).expect("valid label"))
        .collect()
}

/// Draws `(p_s, p_i)` from the normalized joint momentum density.
pub fn sample_pair<R: Rng + ?Sized>(cfg: &SourceConfig, rng: &mut R) -> (TransverseMomentum, TransverseMomentum) {
    let pump = Normal::new(0.0, cfg.sigma_pump).expect("positive sigma");
    let sum = TransverseMomentum::new(pump.sample(rng), pump.sample(rng));
    let half_diff = if cfg.ring_radius == 0.0 {
        let pm = Normal::new(0.0, cfg.sigma_pm).expect("positive sigma");
        TransverseMomentum::new(pm.sample(rng), pm.sample(rng))
    } else {
        let r = sample_ring_radius(cfg.ring_radius, cfg.sigma_pm, rng);
        let t = rng.random::<f64>() * 2.0 * PI;
        TransverseMomentum::new(r * t.cos(), r * t.sin())
    };
    let half_sum = sum * 0.5;
    (half_sum + half_diff, half_sum - half_diff)
}

/// Radius with planar density `∝ r·exp(−(r−R)²/2σ²)`, by rejection from the
/// Gaussian proposal truncated at `R + 8σ`.
fn sample_ring_radius<R: Rng + ?Sized>(ring: f64, sigma: f64, rng: &mut R) -> f64 {
    let proposal = Normal::new(ring, sigma).expect("positive sigma");
    let r_max = ring + 8.0 * sigma;
    loop {
        let r = proposal.sample(rng);
        if r <= 0.0 || r > r_max {
            continue;
        }
        if rng.random::<f64>() * r_max < r {
            return r;
        }
    }
}

/// Draws near-field birth positions `(q_s, q_i)` in µm at the crystal.
pub fn sample_positions<R: Rng + ?Sized>(cfg: &SourceConfig, rng: &mut R) -> ([f64; 2], [f64; 2]) {
    let beam = Normal::new(0.0, cfg.near_field.sigma_beam_um).expect("positive sigma");
    let diff = Normal::new(0.0, cfg.near_field.sigma_diff_um).expect("positive sigma");
    let c = [beam.sample(rng), beam.sample(rng)];
    let d = [diff.sample(rng), diff.sample(rng)];
    (
        [c[0] + d[0] / 2.0, c[1] + d[1] / 2.0],
        [c[0] - d[0] / 2.0, c[1] - d[1] / 2.0],
    )
}

/// Outcome of the beam-splitter routing for the photon pair `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmAssignment {
    /// Photon `a` is the signal.
    Direct,
    /// Photon `b` is the signal.
    Swapped,
}

/// Routes each photon independently to either arm with probability ½;
/// pairs that exit the same port are discarded (`None`).
pub fn assign_arms<R: Rng + ?Sized>(deterministic: bool, rng: &mut R) -> Option<ArmAssignment> {
    if deterministic {
        return Some(ArmAssignment::Direct);
    }
    let a_to_signal: bool = rng.random();
    let b_to_signal: bool = rng.random();
    match (a_to_signal, b_to_signal) {
        (true, false) => Some(ArmAssignment::Direct),
        (false, true) => Some(ArmAssignment::Swapped),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionOutcome {
    Both,
    SignalOnly,
    IdlerOnly,
    None,
}

impl DetectionOutcome {
    pub fn signal_passes(self) -> bool {
        matches!(self, Self::Both | Self::SignalOnly)
    }

    pub fn idler_passes(self) -> bool {
        matches!(self, Self::Both | Self::IdlerOnly)
    }
}

/// Analyzer projectors for one setting, with their orthogonal complements.
#[derive(Clone, Copy, Debug)]
pub struct Analyzers {
    signal: crate::polcore::PolarizationKet,
    idler: crate::polcore::PolarizationKet,
    signal_perp: crate::polcore::PolarizationKet,
    idler_perp: crate::polcore::PolarizationKet,
}

impl Analyzers {
    pub fn new(setting: &MeasurementSetting) -> Self {
        let signal = projector_from_waveplates(&setting.signal);
        let idler = projector_from_waveplates(&setting.idler);
        Self {
            signal,
            idler,
            signal_perp: signal.orthogonal(),
            idler_perp: idler.orthogonal(),
        }
    }

    /// `[P(both), P(signal only), P(idler only), P(none)]`.
    pub fn outcome_probabilities(&self, rho: &DensityMatrix2Q) -> [f64; 4] {
        [
            born_unchecked(rho, &self.signal, &self.idler),
            born_unchecked(rho, &self.signal, &self.idler_perp),
            born_unchecked(rho, &self.signal_perp, &self.idler),
            born_unchecked(rho, &self.signal_perp, &self.idler_perp),
        ]
    }
}

/// Samples the joint analyzer outcome for one pair in state `rho`.
pub fn project_polarization<R: Rng + ?Sized>(
    rho: &DensityMatrix2Q,
    setting: &MeasurementSetting,
    rng: &mut R,
) -> DetectionOutcome {
    sample_outcome(&Analyzers::new(setting).outcome_probabilities(rho), rng)
}

fn sample_outcome<R: Rng + ?Sized>(p: &[f64; 4], rng: &mut R) -> DetectionOutcome {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    if u < p[0] {
        DetectionOutcome::Both
    } else if u < p[0] + p[1] {
        DetectionOutcome::SignalOnly
    } else if u < p[0] + p[1] + p[2] {
        DetectionOutcome::IdlerOnly
    } else {
        DetectionOutcome::None
    }
}

fn to_pixel(det: &DetectorConfig, arm: Arm, dx: f64, dy: f64) -> Option<(u16, u16)> {
    let roi = det.roi(arm);
    let (cx, cy) = roi.center();
    let x = (cx + dx).round();
    let y = (cy + dy).round();
    if !x.is_finite() || !y.is_finite() {
        return None;
    }
    let (xi, yi) = (x as i64, y as i64);
    roi.contains_pixel(xi, yi).then_some((xi as u16, yi as u16))
}

/// Far-field pixel of a photon with transverse momentum `p`; `None` when it
/// falls outside the arm's ROI.
pub fn momentum_to_pixel(det: &DetectorConfig, p: TransverseMomentum, arm: Arm) -> Option<(u16, u16)> {
    let scale = 1.0 / det.pixel_angle();
    to_pixel(det, arm, p.px * scale, p.py * scale)
}

/// Near-field pixel of a photon born at `q` (µm at the crystal).
pub fn position_to_pixel(det: &DetectorConfig, q: [f64; 2], arm: Arm) -> Option<(u16, u16)> {
    let scale = det.magnification / det.pitch_um;
    to_pixel(det, arm, q[0] * scale, q[1] * scale)
}

fn cluster_size<R: Rng + ?Sized>(det: &DetectorConfig, rng: &mut R) -> u32 {
    if det.cluster_max_size == 1 {
        return 1;
    }
    let poisson = Poisson::new(det.cluster_mean_size).expect("positive mean");
    loop {
        let k = poisson.sample(rng) as u32;
        if (1..=det.cluster_max_size).contains(&k) {
            return k;
        }
    }
}

/// Intensifier response to one photon hitting pixel `(x, y)` at time `t_ns`.
///
/// The struck pixel always fires; the remaining `K − 1` pixels scatter with a
/// Gaussian profile of width `cluster_sigma`, and their amplitude falls off
/// with distance. Each pixel's time of arrival is delayed by `c / tot` and
/// jittered by `time_resolution_ns`.
pub fn emit_cluster<R: Rng + ?Sized>(det: &DetectorConfig, hit: (u16, u16, f64), rng: &mut R) -> Vec<PhotonEvent> {
    let (x0, y0, t) = hit;
    let k = cluster_size(det, rng);
    let sensor = det.sensor_size as i64;
    let mut pixels: Vec<(i64, i64)> = Vec::with_capacity(k as usize);
    pixels.push((x0 as i64, y0 as i64));
    if det.cluster_sigma > 0.0 {
        let spread = Normal::new(0.0, det.cluster_sigma).expect("positive sigma");
        for _ in 1..k {
            for _attempt in 0..8 {
                let px = x0 as i64 + spread.sample(rng).round() as i64;
                let py = y0 as i64 + spread.sample(rng).round() as i64;
                let inside = (0..sensor).contains(&px) && (0..sensor).contains(&py);
                if inside && !pixels.contains(&(px, py)) {
                    pixels.push((px, py));
                    break;
                }
            }
        }
    }

    let gain = Normal::<f64>::new(0.0, 0.25).expect("positive sigma");
    let peak = det.tot_scale * gain.sample(rng).exp();
    let falloff = det.cluster_sigma.max(0.5);
    let jitter = Normal::new(0.0, det.time_resolution_ns.max(f64::MIN_POSITIVE)).expect("positive sigma");
    let mut out = Vec::with_capacity(pixels.len());
    for (j, &(px, py)) in pixels.iter().enumerate() {
        let d2 = ((px - x0 as i64).pow(2) + (py - y0 as i64).pow(2)) as f64;
        let amp = peak * (-d2 / (2.0 * falloff * falloff)).exp() * (0.15 * gain.sample(rng)).exp();
        let mut tot = amp.round().max(0.0) as u32;
        if j == 0 {
            tot = tot.max(det.tot_threshold.max(1));
        } else if tot < det.tot_threshold.max(1) {
            continue;
        }
        let walk = det.time_walk_coeff / tot as f64;
        let dt = if det.time_resolution_ns > 0.0 { jitter.sample(rng) } else { 0.0 };
        let toa = (t + dt + walk).round().max(0.0) as u64;
        out.push(PhotonEvent {
            x: px as u16,
            y: py as u16,
            toa,
            tot,
        });
    }
    out
}

/// Ground truth for one generated pair that survived the beam splitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub birth_ns: f64,
    pub assignment: ArmAssignment,
    pub ps_x: f64,
    pub ps_y: f64,
    pub pi_x: f64,
    pub pi_y: f64,
    pub outcome: DetectionOutcome,
    /// Hit pixel of the signal photon, when it reached the sensor.
    pub signal_pixel: Option<(u16, u16)>,
    pub idler_pixel: Option<(u16, u16)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub pairs_generated: u64,
    pub pairs_same_arm: u64,
    pub photons_blocked: u64,
    pub photons_undetected: u64,
    pub photons_vignetted: u64,
    pub photons_detected: u64,
    pub pairs_detected: u64,
    pub dark_counts: u64,
    pub events: u64,
}

impl SimStats {
    fn merge(&mut self, o: &SimStats) {
        self.pairs_generated += o.pairs_generated;
        self.pairs_same_arm += o.pairs_same_arm;
        self.photons_blocked += o.photons_blocked;
        self.photons_undetected += o.photons_undetected;
        self.photons_vignetted += o.photons_vignetted;
        self.photons_detected += o.photons_detected;
        self.pairs_detected += o.pairs_detected;
        self.dark_counts += o.dark_counts;
        self.events += o.events;
    }
}

#[derive(Clone, Debug, Default)]
pub struct Acquisition {
    /// Raw events sorted by `toa` (stable with respect to generation order).
    pub events: Vec<PhotonEvent>,
    pub truth: Option<Vec<TruthRecord>>,
    pub stats: SimStats,
}

fn chunk_rng(seed: u64, setting: &MeasurementSetting, chunk: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(b"hypercam-synth");
    h.update(seed.to_le_bytes());
    h.update(setting.label.as_bytes());
    h.update([match setting.basis_plane {
        BasisPlane::FarField => 0u8,
        BasisPlane::NearField => 1u8,
    }]);
    h.update(chunk.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

struct ChunkOutput {
    events: Vec<PhotonEvent>,
    truth: Vec<TruthRecord>,
    stats: SimStats,
}

fn simulate_chunk(
    src: &SourceConfig,
    det: &DetectorConfig,
    setting: &MeasurementSetting,
    analyzers: &Analyzers,
    (start, len): (f64, f64),
    chunk: u64,
    keep_truth: bool,
) -> ChunkOutput {
    let mut rng = chunk_rng(det.seed, setting, chunk);
    let mut stats = SimStats::default();
    let mut events = Vec::new();
    let mut truth = Vec::new();

    let n_pairs = poisson_count(det.pair_rate_hz * len * 1e-9, &mut rng);
    let mut births: Vec<f64> = (0..n_pairs).map(|_| start + rng.random::<f64>() * len).collect();
    births.sort_by(f64::total_cmp);
    stats.pairs_generated = n_pairs;

    for t in births {
        let (pa, pb) = sample_pair(src, &mut rng);
        let positions = (setting.basis_plane == BasisPlane::NearField).then(|| sample_positions(src, &mut rng));
        let Some(assignment) = assign_arms(det.deterministic_split, &mut rng) else {
            stats.pairs_same_arm += 1;
            continue;
        };
        let (ps, pi) = match assignment {
            ArmAssignment::Direct => (pa, pb),
            ArmAssignment::Swapped => (pb, pa),
        };
        let (qs, qi) = match (positions, assignment) {
            (Some((qa, qb)), ArmAssignment::Direct) => (Some(qa), Some(qb)),
            (Some((qa, qb)), ArmAssignment::Swapped) => (Some(qb), Some(qa)),
            (None, _) => (None, None),
        };
        let rho = local_state(src, ps, pi);
        let outcome = sample_outcome(&analyzers.outcome_probabilities(&rho), &mut rng);

        let mut hits = [None, None];
        for (slot, (arm, passes, p, q)) in [
            (Arm::Signal, outcome.signal_passes(), ps, qs),
            (Arm::Idler, outcome.idler_passes(), pi, qi),
        ]
        .into_iter()
        .enumerate()
        {
            if !passes {
                stats.photons_blocked += 1;
                continue;
            }
            if rng.random::<f64>() >= det.efficiency {
                stats.photons_undetected += 1;
                continue;
            }
            let pixel = match q {
                Some(q) => position_to_pixel(det, q, arm),
                None => momentum_to_pixel(det, p, arm),
            };
            match pixel {
                Some(px) => {
                    stats.photons_detected += 1;
                    events.extend(emit_cluster(det, (px.0, px.1, t), &mut rng));
                    hits[slot] = Some(px);
                }
                None => stats.photons_vignetted += 1,
            }
        }
        if hits[0].is_some() && hits[1].is_some() {
            stats.pairs_detected += 1;
        }
        if keep_truth {
            truth.push(TruthRecord {
                birth_ns: t,
                assignment,
                ps_x: ps.px,
                ps_y: ps.py,
                pi_x: pi.px,
                pi_y: pi.py,
                outcome,
                signal_pixel: hits[0],
                idler_pixel: hits[1],
            });
        }
    }

    let n_dark = poisson_count(det.dark_rate_hz * len * 1e-9, &mut rng);
    stats.dark_counts = n_dark;
    for _ in 0..n_dark {
        let t = start + rng.random::<f64>() * len;
        let x = rng.random_range(0..det.sensor_size);
        let y = rng.random_range(0..det.sensor_size);
        events.extend(emit_cluster(det, (x, y, t), &mut rng));
    }
    stats.events = events.len() as u64;
    ChunkOutput { events, truth, stats }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Full forward model for one measurement setting.
pub fn simulate_acquisition(
    src: &SourceConfig,
    det: &DetectorConfig,
    setting: &MeasurementSetting,
    keep_truth: bool,
) -> Result<Acquisition> {
    src.validate()?;
    det.validate()?;
    let duration = det.acquisition_s * 1e9;
    let n_chunks = (duration / CHUNK_NS).ceil() as u64;
    let analyzers = Analyzers::new(setting);

    let chunks: Vec<ChunkOutput> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c as f64 * CHUNK_NS;
            let len = (duration - start).min(CHUNK_NS);
            simulate_chunk(src, det, setting, &analyzers, (start, len), c, keep_truth)
        })
        .collect();

    let mut stats = SimStats::default();
    let total: usize = chunks.iter().map(|c| c.events.len()).sum();
    let mut events = Vec::with_capacity(total);
    let mut truth = keep_truth.then(Vec::new);
    for c in chunks {
        stats.merge(&c.stats);
        events.extend(c.events);
        if let Some(t) = truth.as_mut() {
            t.extend(c.truth);
        }
    }
    events.par_sort_by_key(|e| e.toa);
    Ok(Acquisition { events, truth, stats })
}
