//! End-to-end chain from raw events to the summary report, shared by the
//! command-line tool and the integration tests.

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certify, CertificationResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{
    accidental_estimate, cluster_and_centroid, find_coincidences, split_arms, ArmLayout, CentroidedPhoton,
    CoincidencePair,
};
use crate::polcore::{biphoton_phase, concurrence, DensityMatrix2Q, C64, DEFAULT_PHASE_FLOOR};
use crate::source::{local_state, SourceConfig};
use crate::spatial::{
    bin_to_superpixels, correlation_profile, epr_products, fit_gaussian_width, Axis, CorrelationMatrix, EprResult,
    GaussianFit, Measured, Projection, SpatialBasis, SuperpixelGrid,
};
use crate::synth::{
    momentum_to_pixel, sample_pair, simulate_acquisition, Arm, BasisPlane, DetectorConfig, MeasurementSetting,
    PhotonEvent,
};
use crate::tomo::{aggregate, map_tomography, Aggregate, EntanglementMaps, HyperdimResult, TomographyInput};

/// Far-field settings whose sum is polarization-blind; their pairs form the
/// momentum-basis matrix and the far-field width profiles.
pub const SUMMED_LABELS: [&str; 4] = ["HH", "HV", "VH", "VV"];

/// File stem for a setting, e.g. `ff_HH` or `nf_VV`.
pub fn setting_stem(s: &MeasurementSetting) -> String {
    let plane = match s.basis_plane {
        BasisPlane::FarField => "ff",
        BasisPlane::NearField => "nf",
    };
    format!("{plane}_{}", s.label)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub events: usize,
    pub clusters: usize,
    pub unassigned: usize,
    pub signal_photons: usize,
    pub idler_photons: usize,
    pub coincidences: usize,
    /// Coincidences with the idler stream delayed by the accidental offset.
    pub accidentals: usize,
}

/// Coincidences and the accidental estimate from time-sorted photons.
pub fn coincide_photons(
    photons: &[CentroidedPhoton],
    cfg: &RunConfig,
) -> Result<(Vec<CoincidencePair>, StageStats)> {
    let (signal, idler) = split_arms(photons);
    let p = &cfg.pipeline;
    let pairs = find_coincidences(&signal, &idler, p.window_ns)?;
    let accidentals = accidental_estimate(&signal, &idler, p.window_ns, p.accidental_offset_ns)?;
    let stats = StageStats {
        signal_photons: signal.len(),
        idler_photons: idler.len(),
        coincidences: pairs.len(),
        accidentals,
        ..Default::default()
    };
    Ok((pairs, stats))
}

/// Clustering, centroiding and coincidence finding for one event stream.
pub fn process_events(events: &[PhotonEvent], cfg: &RunConfig) -> Result<(Vec<CoincidencePair>, StageStats)> {
    let (photons, cs) = cluster_and_centroid(events, &cfg.pipeline.cluster, &cfg.layout())?;
    let (pairs, stats) = coincide_photons(&photons, cfg)?;
    Ok((
        pairs,
        StageStats {
            events: cs.events,
            clusters: cs.clusters,
            unassigned: cs.unassigned,
            ..stats
        },
    ))
}

#[derive(Clone, Debug)]
pub struct SettingPairs {
    pub setting: MeasurementSetting,
    pub pairs: Vec<CoincidencePair>,
    pub stats: StageStats,
}

/// Simulates every setting of the run and reduces it to coincidences, one
/// setting at a time so that only one raw stream is held in memory.
pub fn simulate_and_process(cfg: &RunConfig) -> Result<Vec<SettingPairs>> {
    let det = cfg.detector();
    cfg.all_settings()?
        .into_iter()
        .map(|setting| {
            let acq = simulate_acquisition(&cfg.source, &det, &setting, false)?;
            let (pairs, stats) = process_events(&acq.events, cfg)?;
            Ok(SettingPairs { setting, pairs, stats })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthFits {
    /// Sum-coordinate fits of the far-field pairs, `[x, y]`.
    pub far_field: [GaussianFit; 2],
    /// Difference-coordinate fits of the near-field pairs, `[x, y]`.
    pub near_field: [GaussianFit; 2],
}

fn fit_axes(pairs: &[CoincidencePair], plane: BasisPlane, pitch_um: f64) -> Result<[GaussianFit; 2]> {
    let proj = Projection::natural(plane);
    let fx = fit_gaussian_width(&correlation_profile(pairs, Axis::X, proj)?, pitch_um)?;
    let fy = fit_gaussian_width(&correlation_profile(pairs, Axis::Y, proj)?, pitch_um)?;
    Ok([fx, fy])
}

pub fn fit_widths(far: &[CoincidencePair], near: &[CoincidencePair], det: &DetectorConfig) -> Result<WidthFits> {
    Ok(WidthFits {
        far_field: fit_axes(far, BasisPlane::FarField, det.pitch_um)?,
        near_field: fit_axes(near, BasisPlane::NearField, det.pitch_um)?,
    })
}

pub fn epr_from_widths(det: &DetectorConfig, w: &WidthFits) -> Result<EprResult> {
    let m = |f: &GaussianFit| Measured::new(f.sigma_um, f.sigma_err_um);
    epr_products(
        det,
        [m(&w.far_field[0]), m(&w.far_field[1])],
        [m(&w.near_field[0]), m(&w.near_field[1])],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub momentum_grid: SuperpixelGrid,
    pub position_grid: SuperpixelGrid,
    /// Sum of the polarization-blind far-field settings.
    pub momentum: CorrelationMatrix,
    /// Sum of all near-field settings.
    pub position: CorrelationMatrix,
    /// One momentum-basis matrix per far-field setting, in config order.
    pub far_field: Vec<(MeasurementSetting, CorrelationMatrix)>,
    pub widths: WidthFits,
    pub epr: EprResult,
}

fn summed_far_field(data: &[SettingPairs]) -> Vec<CoincidencePair> {
    let far: Vec<&SettingPairs> = data.iter().filter(|s| s.setting.basis_plane == BasisPlane::FarField).collect();
    let blind: Vec<&&SettingPairs> = far.iter().filter(|s| SUMMED_LABELS.contains(&s.setting.label.as_str())).collect();
    if blind.is_empty() {
        far.iter().flat_map(|s| s.pairs.iter().copied()).collect()
    } else {
        blind.iter().flat_map(|s| s.pairs.iter().copied()).collect()
    }
}

/// Grids, correlation matrices, width fits and EPR products.
pub fn correlate(cfg: &RunConfig, data: &[SettingPairs]) -> Result<Correlations> {
    let layout: ArmLayout = cfg.layout();
    let det = cfg.detector();
    let far = summed_far_field(data);
    let near: Vec<CoincidencePair> = data
        .iter()
        .filter(|s| s.setting.basis_plane == BasisPlane::NearField)
        .flat_map(|s| s.pairs.iter().copied())
        .collect();
    if far.is_empty() || near.is_empty() {
        return Err(Error::InsufficientData("need far-field and near-field coincidences".into()));
    }
    let momentum_grid = SuperpixelGrid::auto(cfg.grid, SpatialBasis::Momentum, &layout, &far)?;
    let position_grid = SuperpixelGrid::auto(cfg.grid, SpatialBasis::Position, &layout, &near)?;
    let momentum = bin_to_superpixels(&far, &momentum_grid);
    let position = bin_to_superpixels(&near, &position_grid);
    let far_field = data
        .iter()
        .filter(|s| s.setting.basis_plane == BasisPlane::FarField)
        .map(|s| (s.setting.clone(), bin_to_superpixels(&s.pairs, &momentum_grid)))
        .collect();
    let widths = fit_widths(&far, &near, &det)?;
    let epr = epr_from_widths(&det, &widths)?;
    Ok(Correlations {
        momentum_grid,
        position_grid,
        momentum,
        position,
        far_field,
        widths,
        epr,
    })
}

/// Certification of perfectly conjugate-diagonal data on a `d`-mode grid.
pub fn ideal_certification(d: usize) -> Result<CertificationResult> {
    let mut counts = vec![0u64; d * d];
    for m in 0..d {
        counts[m * d + m] = 1;
    }
    let mom = CorrelationMatrix::from_counts(d, SpatialBasis::Momentum, counts.clone())?;
    let pos = CorrelationMatrix::from_counts(d, SpatialBasis::Position, counts)?;
    certify(&mom, &pos, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyOutput {
    pub maps: EntanglementMaps,
    pub aggregate: Aggregate,
    pub hyperdim: HyperdimResult,
}

/// Entanglement maps over the conjugate cells of `grid`, their averages and
/// the hyperentanglement dimension.
pub fn tomography(
    cfg: &RunConfig,
    grid: &SuperpixelGrid,
    far_field: &[(MeasurementSetting, CorrelationMatrix)],
    spatial_dim: usize,
) -> Result<TomographyOutput> {
    let (settings, counts): (Vec<_>, Vec<_>) = far_field.iter().cloned().unzip();
    let input = TomographyInput::new(settings.clone(), counts)?;
    let maps = map_tomography(&input, grid, cfg.pipeline.min_counts)?;
    let p = &cfg.pipeline;
    let agg = aggregate(&maps, &settings, p.n_bootstrap, p.weighting, cfg.seed)?;
    let hyperdim = HyperdimResult::new(spatial_dim, &agg)?;
    Ok(TomographyOutput {
        maps,
        aggregate: agg,
        hyperdim,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spatial_dim: usize,
    pub ideal_certified_dim: usize,
    pub avg_concurrence: f64,
    pub concurrence_err: f64,
    pub avg_eof: f64,
    pub eof_err: f64,
    pub total_dim: usize,
    pub epr_product_x: Measured,
    pub epr_product_y: Measured,
    pub far_field_coincidences: u64,
    pub near_field_coincidences: u64,
    pub accidentals: u64,
    pub valid_cells: usize,
    pub certification: CertificationResult,
    pub hyperdim: HyperdimResult,
    pub epr: EprResult,
    pub widths: WidthFits,
}

pub fn report(cfg: &RunConfig, data: &[SettingPairs]) -> Result<(Report, Correlations, TomographyOutput)> {
    let corr = correlate(cfg, data)?;
    let cert = certify(&corr.momentum, &corr.position, false)?;
    let ideal = ideal_certification(corr.momentum.d)?;
    let tomo = tomography(cfg, &corr.momentum_grid, &corr.far_field, cert.certified_dim)?;
    let count = |plane| {
        data.iter()
            .filter(|s| s.setting.basis_plane == plane)
            .map(|s| s.pairs.len() as u64)
            .sum()
    };
    let h = &tomo.hyperdim;
    let report = Report {
        spatial_dim: cert.certified_dim,
        ideal_certified_dim: ideal.certified_dim,
        avg_concurrence: h.avg_concurrence,
        concurrence_err: h.concurrence_err,
        avg_eof: h.avg_eof,
        eof_err: h.eof_err,
        total_dim: h.total_dim,
        epr_product_x: corr.epr.x.product,
        epr_product_y: corr.epr.y.product,
        far_field_coincidences: count(BasisPlane::FarField),
        near_field_coincidences: count(BasisPlane::NearField),
        accidentals: data.iter().map(|s| s.stats.accidentals as u64).sum(),
        valid_cells: tomo.aggregate.valid_cells,
        certification: cert,
        hyperdim: *h,
        epr: corr.epr,
        widths: corr.widths,
    };
    Ok((report, corr, tomo))
}

/// Source-model state of one conjugate cell, averaged over the pairs that
/// land in it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCell {
    pub mode: usize,
    /// Fraction of sampled pairs landing in this conjugate cell.
    pub weight: f64,
    pub concurrence: f64,
    pub phase: Option<f64>,
}

/// Monte Carlo ground truth for every conjugate cell `(m, m)` of a
/// momentum grid: pairs are drawn from the source, mapped to pixels without
/// detector noise, and their local states averaged per cell.
pub fn model_cell_states(
    src: &SourceConfig,
    det: &DetectorConfig,
    grid: &SuperpixelGrid,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Option<ModelCell>>> {
    if grid.basis != SpatialBasis::Momentum {
        return Err(Error::Config("model cell states need a far-field grid".into()));
    }
    const CHUNKS: usize = 64;
    let d = grid.d();
    let per_chunk = n_samples.div_ceil(CHUNKS);
    let zero = || (vec![Matrix4::<C64>::zeros(); d], vec![0u64; d]);
    let (sums, counts) = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (mut sums, mut counts) = zero();
            for _ in 0..per_chunk.min(n_samples.saturating_sub(c * per_chunk)) {
                let (ps, pi) = sample_pair(src, &mut rng);
                let (Some(s), Some(i)) = (momentum_to_pixel(det, ps, Arm::Signal), momentum_to_pixel(det, pi, Arm::Idler))
                else {
                    continue;
                };
                let (Some(m), Some(n)) = (
                    grid.locate(Arm::Signal, s.0 as f64, s.1 as f64),
                    grid.locate(Arm::Idler, i.0 as f64, i.1 as f64),
                ) else {
                    continue;
                };
                if m == n {
                    sums[m] += local_state(src, ps, pi).elements();
                    counts[m] += 1;
                }
            }
            (sums, counts)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(zero(), |(mut a, mut ac), (b, bc)| {
            for k in 0..d {
                a[k] += b[k];
                ac[k] += bc[k];
            }
            (a, ac)
        });
    let total = n_samples.max(1) as f64;
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(mode, (sum, n))| {
            if n == 0 {
                return Ok(None);
            }
            let rho = DensityMatrix2Q::from_matrix_unchecked(sum / C64::new(n as f64, 0.0));
            Ok(Some(ModelCell {
                mode,
                weight: n as f64 / total,
                concurrence: concurrence(&rho)?,
                phase: biphoton_phase(&rho, DEFAULT_PHASE_FLOOR),
            }))
        })
        .collect()
}
