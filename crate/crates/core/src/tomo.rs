//! Spatially resolved polarization tomography.
//!
//! Each conjugate superpixel pair gets a 16-setting linear reconstruction,
//! a projection onto physical states and the derived concurrence, phase and
//! entanglement of formation.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix, SVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polcore::{
    biphoton_phase, concurrence, entanglement_of_formation, projector_from_waveplates, wrap_phase, DensityMatrix2Q,
    PolarizationKet, C64, DEFAULT_PHASE_FLOOR,
};
use crate::source::TransverseMomentum;
use crate::spatial::{CellCentroids, CorrelationMatrix, SpatialBasis, SuperpixelGrid};
use crate::synth::{Arm, DetectorConfig, MeasurementSetting};

pub const N_SETTINGS: usize = 16;

/// Smallest acceptable ratio of extreme singular values of the design matrix.
const MIN_INVERSE_CONDITION: f64 = 1e-10;

fn pauli(k: usize) -> Matrix2<C64> {
    let (o, i, z) = (C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, 0.0));
    match k {
        0 => Matrix2::new(o, z, z, o),
        1 => Matrix2::new(z, o, o, z),
        2 => Matrix2::new(z, -i, i, z),
        _ => Matrix2::new(o, z, z, -o),
    }
}

/// `⟨ψ|σ_k|ψ⟩` for `k = 0..4`.
fn bloch(ket: &PolarizationKet) -> [f64; 4] {
    let [h, v] = ket.amplitudes();
    let c = h.conj() * v;
    [1.0, 2.0 * c.re, 2.0 * c.im, h.norm_sqr() - v.norm_sqr()]
}

fn kron(a: &Matrix2<C64>, b: &Matrix2<C64>) -> Matrix4<C64> {
    Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// Linear map from Pauli coefficients to the 16 expected count fractions,
/// pre-inverted.
#[derive(Clone, Debug)]
pub struct TomographyDesign {
    inverse: SMatrix<f64, N_SETTINGS, N_SETTINGS>,
    pub condition: f64,
    basis: Vec<Matrix4<C64>>,
}

impl TomographyDesign {
    pub fn new(settings: &[MeasurementSetting]) -> Result<Self> {
        if settings.len() != N_SETTINGS {
            return Err(Error::DimensionMismatch {
                expected: N_SETTINGS,
                got: settings.len(),
            });
        }
        let mut a = SMatrix::<f64, N_SETTINGS, N_SETTINGS>::zeros();
        for (nu, s) in settings.iter().enumerate() {
            let bs = bloch(&projector_from_waveplates(&s.signal));
            let bi = bloch(&projector_from_waveplates(&s.idler));
            for i in 0..4 {
                for j in 0..4 {
                    a[(nu, 4 * i + j)] = 0.25 * bs[i] * bi[j];
                }
            }
        }
        let sv = a.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(lo > MIN_INVERSE_CONDITION * hi) {
            return Err(Error::SingularDesign { condition });
        }
        let inverse = a.try_inverse().ok_or(Error::SingularDesign { condition })?;
        let basis = (0..4)
            .flat_map(|i| (0..4).map(move |j| kron(&pauli(i), &pauli(j))))
            .collect();
        Ok(Self {
            inverse,
            condition,
            basis,
        })
    }
}

/// Linear-inversion estimate from the 16 setting counts, normalized to unit
/// trace. May have negative eigenvalues.
pub fn reconstruct_linear(design: &TomographyDesign, counts: &[f64; N_SETTINGS]) -> Result<DensityMatrix2Q> {
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Domain("tomography counts must be finite and nonnegative".into()));
    }
    let r = design.inverse * SVector::<f64, N_SETTINGS>::from_column_slice(counts);
    if !(r[0] > 0.0) {
        return Err(Error::InsufficientData("tomography counts carry no weight".into()));
    }
    let mut rho = Matrix4::<C64>::zeros();
    for (k, b) in design.basis.iter().enumerate() {
        rho += b * C64::new(0.25 * r[k] / r[0], 0.0);
    }
    Ok(DensityMatrix2Q::from_matrix_unchecked(rho))
}

/// Euclidean projection of `x` onto the probability simplex.
fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (i + 1) as f64;
        if v - t > 0.0 {
            tau = t;
        }
    }
    x.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// Nearest unit-trace positive semidefinite matrix in Frobenius norm.
pub fn project_physical(rho: &DensityMatrix2Q) -> DensityMatrix2Q {
    let eig = SymmetricEigen::new(rho.hermitian_part());
    let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let clipped = project_simplex(&vals);
    let u = eig.eigenvectors;
    let mut out = Matrix4::<C64>::zeros();
    for (k, &w) in clipped.iter().enumerate() {
        if w > 0.0 {
            let col = u.column(k);
            out += col * col.adjoint() * C64::new(w, 0.0);
        }
    }
    let herm = (out + out.adjoint()) * C64::new(0.5, 0.0);
    DensityMatrix2Q::from_matrix_unchecked(herm)
}

/// Per-setting correlation matrices for one spatial basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyInput {
    pub settings: Vec<MeasurementSetting>,
    pub counts: Vec<CorrelationMatrix>,
}

impl TomographyInput {
    pub fn new(settings: Vec<MeasurementSetting>, counts: Vec<CorrelationMatrix>) -> Result<Self> {
        if settings.len() != N_SETTINGS || counts.len() != N_SETTINGS {
            return Err(Error::DimensionMismatch {
                expected: N_SETTINGS,
                got: settings.len().min(counts.len()),
            });
        }
        let d = counts[0].d;
        if let Some(bad) = counts.iter().find(|c| c.d != d) {
            return Err(Error::DimensionMismatch { expected: d, got: bad.d });
        }
        Ok(Self { settings, counts })
    }

    pub fn d(&self) -> usize {
        self.counts[0].d
    }

    pub fn pair_counts(&self, m: usize, n: usize) -> [u64; N_SETTINGS] {
        std::array::from_fn(|k| self.counts[k].get(m, n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub concurrence: f64,
    /// `None` when the coherence is too small for a meaningful phase.
    pub phase: Option<f64>,
    pub eof: f64,
}

fn analyze(design: &TomographyDesign, counts: &[u64; N_SETTINGS]) -> Result<(DensityMatrix2Q, CellState)> {
    let c = counts.map(|v| v as f64);
    let rho = project_physical(&reconstruct_linear(design, &c)?);
    let conc = concurrence(&rho)?;
    let state = CellState {
        concurrence: conc,
        phase: biphoton_phase(&rho, DEFAULT_PHASE_FLOOR),
        eof: entanglement_of_formation(conc)?,
    };
    Ok((rho, state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub mode: usize,
    pub signal_px: [f64; 2],
    pub idler_px: [f64; 2],
    pub counts: [u64; N_SETTINGS],
    pub total: u64,
    /// `total / max total` over all cells.
    pub intensity: f64,
    pub valid: bool,
    pub state: Option<CellState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementMaps {
    pub d: usize,
    pub min_counts: u64,
    pub cells: Vec<MapCell>,
}

impl EntanglementMaps {
    pub fn valid_cells(&self) -> impl Iterator<Item = (&MapCell, &CellState)> {
        self.cells.iter().filter_map(|c| c.state.as_ref().filter(|_| c.valid).map(|s| (c, s)))
    }
}

/// Tomography of every conjugate pair `(m, m)` of the grid.
pub fn map_tomography(input: &TomographyInput, grid: &SuperpixelGrid, min_counts: u64) -> Result<EntanglementMaps> {
    if grid.d() != input.d() {
        return Err(Error::DimensionMismatch {
            expected: grid.d(),
            got: input.d(),
        });
    }
    let design = TomographyDesign::new(&input.settings)?;
    let raw: Vec<(usize, [u64; N_SETTINGS])> = (0..grid.d()).map(|m| (m, input.pair_counts(m, m))).collect();
    let max_total = raw.iter().map(|(_, c)| c.iter().sum::<u64>()).max().unwrap_or(0);
    let cells = raw
        .into_par_iter()
        .map(|(m, counts)| {
            let total: u64 = counts.iter().sum();
            let state = (total >= min_counts && total > 0)
                .then(|| analyze(&design, &counts).ok().map(|(_, s)| s))
                .flatten();
            MapCell {
                mode: m,
                signal_px: grid.cell_center(Arm::Signal, m),
                idler_px: grid.cell_center(Arm::Idler, m),
                counts,
                total,
                intensity: if max_total > 0 { total as f64 / max_total as f64 } else { 0.0 },
                valid: state.is_some(),
                state,
            }
        })
        .collect();
    Ok(EntanglementMaps {
        d: grid.d(),
        min_counts,
        cells,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Cells weighted by their coincidence totals.
    #[default]
    Counts,
    /// Every valid cell weighted equally.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg_concurrence: f64,
    pub concurrence_err: f64,
    /// Mean of the per-cell entanglement of formation.
    pub avg_eof: f64,
    pub eof_err: f64,
    /// Entanglement of formation of the mean concurrence.
    pub eof_of_avg_concurrence: f64,
    pub valid_cells: usize,
    pub weighting: Weighting,
    pub n_bootstrap: usize,
}

fn weighted_means(cells: &[(u64, CellState)], weighting: Weighting) -> Option<(f64, f64)> {
    let mut w_sum = 0.0;
    let (mut c, mut e) = (0.0, 0.0);
    for (total, s) in cells {
        let w = match weighting {
            Weighting::Counts => *total as f64,
            Weighting::Uniform => 1.0,
        };
        w_sum += w;
        c += w * s.concurrence;
        e += w * s.eof;
    }
    (w_sum > 0.0).then(|| (c / w_sum, e / w_sum))
}

fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Spatial averages of concurrence and entanglement of formation over valid
/// cells, with standard errors from Poisson resampling of every setting
/// count. Replicate `b` draws from a generator seeded by `(seed, b)`.
pub fn aggregate(
    maps: &EntanglementMaps,
    settings: &[MeasurementSetting],
    n_bootstrap: usize,
    weighting: Weighting,
    seed: u64,
) -> Result<Aggregate> {
    let cells: Vec<(u64, CellState, [u64; N_SETTINGS])> =
        maps.valid_cells().map(|(c, s)| (c.total, *s, c.counts)).collect();
    if cells.is_empty() {
        return Err(Error::InsufficientData("no valid tomography cells".into()));
    }
    let point: Vec<(u64, CellState)> = cells.iter().map(|(t, s, _)| (*t, *s)).collect();
    let (avg_c, avg_e) = weighted_means(&point, weighting).expect("nonempty");

    let design = TomographyDesign::new(settings)?;
    let replicates: Vec<(f64, f64)> = (0..n_bootstrap)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let resampled: Vec<(u64, CellState)> = cells
                .iter()
                .filter_map(|(_, _, counts)| {
                    let draw = counts.map(|c| {
                        if c == 0 {
                            0
                        } else {
                            Poisson::new(c as f64).expect("positive mean").sample(&mut rng) as u64
                        }
                    });
                    let total = draw.iter().sum::<u64>();
                    analyze(&design, &draw).ok().map(|(_, s)| (total, s))
                })
                .collect();
            weighted_means(&resampled, weighting)
        })
        .collect();
    let cs: Vec<f64> = replicates.iter().map(|r| r.0).collect();
    let es: Vec<f64> = replicates.iter().map(|r| r.1).collect();
    Ok(Aggregate {
        avg_concurrence: avg_c,
        concurrence_err: std_dev(&cs),
        avg_eof: avg_e,
        eof_err: std_dev(&es),
        eof_of_avg_concurrence: entanglement_of_formation(avg_c.clamp(0.0, 1.0))?,
        valid_cells: cells.len(),
        weighting,
        n_bootstrap,
    })
}

/// `⌊spatial_dim · 2^E⌋`.
pub fn hyperdimensionality(spatial_dim: usize, eof: f64) -> Result<usize> {
    if spatial_dim == 0 {
        return Err(Error::Domain("spatial dimension must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&eof) {
        return Err(Error::Domain(format!("entanglement of formation {eof} outside [0, 1]")));
    }
    Ok((spatial_dim as f64 * eof.exp2()).floor() as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperdimResult {
    pub spatial_dim: usize,
    pub avg_concurrence: f64,
    pub concurrence_err: f64,
    pub avg_eof: f64,
    pub eof_err: f64,
    /// Polarization entanglement used for the product; `E` of the mean
    /// concurrence, which never exceeds the mean of `E` since `E(C)` is convex.
    pub eof_used: f64,
    pub total_dim: usize,
}

impl HyperdimResult {
    pub fn new(spatial_dim: usize, agg: &Aggregate) -> Result<Self> {
        let eof_used = agg.eof_of_avg_concurrence;
        Ok(Self {
            spatial_dim,
            avg_concurrence: agg.avg_concurrence,
            concurrence_err: agg.concurrence_err,
            avg_eof: agg.avg_eof,
            eof_err: agg.eof_err,
            eof_used,
            total_dim: hyperdimensionality(spatial_dim, eof_used)?,
        })
    }
}

/// Signal and idler momenta (rad) of cell centers, measured from the ROI
/// centers of the far-field mapping.
pub fn cell_momenta(det: &DetectorConfig, grid: &SuperpixelGrid, m: usize, n: usize) -> (TransverseMomentum, TransverseMomentum) {
    (
        pixel_momentum(det, Arm::Signal, grid.cell_center(Arm::Signal, m)),
        pixel_momentum(det, Arm::Idler, grid.cell_center(Arm::Idler, n)),
    )
}

/// Far-field momentum (rad) of a sensor position, relative to the ROI center.
pub fn pixel_momentum(det: &DetectorConfig, arm: Arm, px: [f64; 2]) -> TransverseMomentum {
    let a = det.pixel_angle();
    let (rx, ry) = det.roi(arm).center();
    TransverseMomentum::new((px[0] - rx) * a, (px[1] - ry) * a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PumpCell {
    pub idler_mode: usize,
    pub ps: TransverseMomentum,
    pub pi: TransverseMomentum,
    /// `p_s + p_i`, rad.
    pub pump: TransverseMomentum,
    pub total: u64,
    pub state: CellState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PumpMap {
    pub signal_mode: usize,
    pub cells: Vec<PumpCell>,
}

impl PumpMap {
    /// Replaces cell-center momenta by the mean centroids of the binned
    /// pairs. Within a cell the pump envelope skews the pair distribution
    /// toward zero pump momentum, so cell centers overstate `|p_s + p_i|`.
    pub fn refine_momenta(&mut self, centroids: &CellCentroids, det: &DetectorConfig) {
        for c in &mut self.cells {
            if let Some((s, i)) = centroids.mean(self.signal_mode, c.idler_mode) {
                c.ps = pixel_momentum(det, Arm::Signal, s);
                c.pi = pixel_momentum(det, Arm::Idler, i);
                c.pump = c.ps + c.pi;
            }
        }
    }
}

/// Tomography of one signal superpixel against every idler superpixel with
/// at least `min_counts`, keyed by the pump momentum `p_s + p_i`.
pub fn pump_momentum_maps(
    input: &TomographyInput,
    grid: &SuperpixelGrid,
    det: &DetectorConfig,
    signal_mode: usize,
    min_counts: u64,
) -> Result<PumpMap> {
    if grid.basis != SpatialBasis::Momentum {
        return Err(Error::Config("pump momentum maps need a far-field grid".into()));
    }
    if grid.d() != input.d() || signal_mode >= grid.d() {
        return Err(Error::DimensionMismatch {
            expected: grid.d(),
            got: input.d().max(signal_mode + 1),
        });
    }
    let design = TomographyDesign::new(&input.settings)?;
    let cells: Vec<PumpCell> = (0..grid.d())
        .into_par_iter()
        .filter_map(|n| {
            let counts = input.pair_counts(signal_mode, n);
            let total: u64 = counts.iter().sum();
            if total < min_counts.max(1) {
                return None;
            }
            let (_, state) = analyze(&design, &counts).ok()?;
            let (ps, pi) = cell_momenta(det, grid, signal_mode, n);
            Some(PumpCell {
                idler_mode: n,
                ps,
                pi,
                pump: ps + pi,
                total,
                state,
            })
        })
        .collect();
    if cells.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} populated idler superpixels, need at least 3",
            cells.len()
        )));
    }
    Ok(PumpMap { signal_mode, cells })
}

/// One phase observation for [`fit_phase_model`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSample {
    pub ps: TransverseMomentum,
    pub pi: TransverseMomentum,
    pub phase: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTerms {
    /// Fit `β · (p_s + p_i)`.
    pub pump: bool,
    /// Fit `α (|p_s|² + |p_i|²)`.
    pub radial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFit {
    pub phi0: f64,
    pub beta: Option<[f64; 2]>,
    pub alpha: Option<f64>,
    /// Weighted circular RMS residual, rad.
    pub rms: f64,
}

/// Weighted circular least-squares fit of
/// `φ = φ₀ + β·(p_s + p_i) + α(|p_s|² + |p_i|²)` to wrapped phases.
pub fn fit_phase_model(samples: &[PhaseSample], terms: PhaseTerms) -> Result<PhaseFit> {
    let n_par = 1 + 2 * terms.pump as usize + terms.radial as usize;
    if samples.len() < n_par + 1 {
        return Err(Error::InsufficientData(format!(
            "{} phase samples for {n_par} parameters",
            samples.len()
        )));
    }
    let row = |s: &PhaseSample| {
        let mut r = vec![1.0];
        if terms.pump {
            let p = s.ps + s.pi;
            r.extend([p.px, p.py]);
        }
        if terms.radial {
            r.push(s.ps.norm_sqr() + s.pi.norm_sqr());
        }
        r
    };
    let w: Vec<f64> = samples.iter().map(|s| s.weight.max(0.0).sqrt()).collect();
    let x = DMatrix::from_fn(samples.len(), n_par, |i, j| w[i] * row(&samples[i])[j]);
    // Unit column norms keep the solve well conditioned for rad² regressors.
    let norms: Vec<f64> = (0..n_par).map(|j| x.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    let xs = DMatrix::from_fn(samples.len(), n_par, |i, j| x[(i, j)] / norms[j]);
    let svd = xs.clone().svd(true, true);
    if svd.singular_values.min() < 1e-9 * svd.singular_values.max() {
        return Err(Error::SingularDesign {
            condition: svd.singular_values.max() / svd.singular_values.min(),
        });
    }
    let solve = |rhs: &DVector<f64>| -> DVector<f64> {
        let b = svd.solve(rhs, 1e-12).expect("svd with vectors");
        DVector::from_fn(n_par, |j, _| b[j] / norms[j])
    };

    // Start from phases unwrapped around the heaviest sample, then refine on
    // wrapped residuals.
    let anchor = samples
        .iter()
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .expect("nonempty")
        .phase;
    let y = DVector::from_fn(samples.len(), |i, _| w[i] * (anchor + wrap_phase(samples[i].phase - anchor)));
    let mut theta = solve(&y);
    let model = |theta: &DVector<f64>, s: &PhaseSample| row(s).iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..20 {
        let r = DVector::from_fn(samples.len(), |i, _| w[i] * wrap_phase(samples[i].phase - model(&theta, &samples[i])));
        let step = solve(&r);
        theta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    let w_sum: f64 = samples.iter().map(|s| s.weight.max(0.0)).sum();
    let rms = (samples
        .iter()
        .map(|s| s.weight.max(0.0) * wrap_phase(s.phase - model(&theta, s)).powi(2))
        .sum::<f64>()
        / w_sum)
        .sqrt();
    let mut k = 1;
    let beta = terms.pump.then(|| {
        k += 2;
        [theta[1], theta[2]]
    });
    let alpha = terms.radial.then(|| theta[k]);
    Ok(PhaseFit {
        phi0: wrap_phase(theta[0]),
        beta,
        alpha,
        rms,
    })
}
