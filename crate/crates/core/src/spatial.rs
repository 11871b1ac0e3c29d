//! Superpixel grids, correlation matrices, correlation-width fits and EPR
//! uncertainty products.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, Dyn, Matrix4, OMatrix, OVector, Owned, Vector4, U4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ArmLayout, CoincidencePair};
use crate::synth::{Arm, BasisPlane, DetectorConfig, Roi};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialBasis {
    Momentum,
    Position,
}

impl From<BasisPlane> for SpatialBasis {
    fn from(p: BasisPlane) -> Self {
        match p {
            BasisPlane::FarField => SpatialBasis::Momentum,
            BasisPlane::NearField => SpatialBasis::Position,
        }
    }
}

impl SpatialBasis {
    /// +1 when conjugate modes sit at the same offset in both arms, −1 when
    /// they are point reflections of each other.
    fn idler_sign(self) -> f64 {
        match self {
            SpatialBasis::Momentum => -1.0,
            SpatialBasis::Position => 1.0,
        }
    }
}

/// Layout of the superpixel lattice, shared by both arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    /// Side of a superpixel, pixels.
    pub cell: u16,
    /// Center-to-center spacing, pixels.
    pub stride: u16,
    pub nx: u16,
    pub ny: u16,
    /// Keep only cells within this many strides of the grid center.
    pub radius_cells: Option<f64>,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            cell: 3,
            stride: 5,
            nx: 10,
            ny: 10,
            radius_cells: None,
        }
    }
}

impl GridParams {
    fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.stride < self.cell {
            return Err(Error::Config("superpixel cell must be nonzero and no larger than the stride".into()));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("superpixel grid must have at least one cell".into()));
        }
        if let Some(r) = self.radius_cells {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config("radius_cells must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Offsets of the lattice sites from the grid center, row-major.
    fn lattice(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        let hx = (self.nx as f64 - 1.0) / 2.0;
        let hy = (self.ny as f64 - 1.0) / 2.0;
        let s = self.stride as f64;
        (0..self.ny as usize).flat_map(move |iy| {
            (0..self.nx as usize).map(move |ix| {
                (iy * self.nx as usize + ix, [(ix as f64 - hx) * s, (iy as f64 - hy) * s])
            })
        })
    }
}

/// Matching sets of `d` superpixels in the signal and idler ROIs.
///
/// Idler mode `n` is labeled so that `(m, m)` are conjugate: in the momentum
/// basis idler offsets are point reflections of signal offsets about the
/// respective grid centers, in the position basis they are equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelGrid {
    pub params: GridParams,
    pub basis: SpatialBasis,
    pub signal_center: [f64; 2],
    pub idler_center: [f64; 2],
    offsets: Vec<[f64; 2]>,
    lookup: Vec<Option<u32>>,
}

impl SuperpixelGrid {
    pub fn new(params: GridParams, basis: SpatialBasis, signal_center: [f64; 2], idler_center: [f64; 2]) -> Result<Self> {
        params.validate()?;
        let mut offsets = Vec::new();
        let mut lookup = vec![None; params.nx as usize * params.ny as usize];
        let s = params.stride as f64;
        for (k, o) in params.lattice() {
            let keep = params
                .radius_cells
                .is_none_or(|r| (o[0] / s).powi(2) + (o[1] / s).powi(2) <= r * r + 1e-9);
            if keep {
                lookup[k] = Some(offsets.len() as u32);
                offsets.push(o);
            }
        }
        if offsets.is_empty() {
            return Err(Error::Config("superpixel grid has no active cells".into()));
        }
        Ok(Self {
            params,
            basis,
            signal_center,
            idler_center,
            offsets,
            lookup,
        })
    }

    /// Places the grid on the coincidence-weighted centroid of each arm,
    /// snapped so that cell centers fall on pixel centers. Falls back to the
    /// ROI centers when there are no pairs.
    pub fn auto(params: GridParams, basis: SpatialBasis, layout: &ArmLayout, pairs: &[CoincidencePair]) -> Result<Self> {
        let snap = |v: f64, n: u16| {
            if n % 2 == 1 {
                v.round()
            } else {
                (v - 0.5).round() + 0.5
            }
        };
        let mean = |f: &dyn Fn(&CoincidencePair) -> (f64, f64), roi: &Roi| -> [f64; 2] {
            if pairs.is_empty() {
                let c = roi.center();
                return [c.0, c.1];
            }
            let (sx, sy) = pairs.iter().map(f).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let n = pairs.len() as f64;
            [sx / n, sy / n]
        };
        let s = mean(&|p| (p.signal.cx, p.signal.cy), &layout.signal_roi);
        let i = mean(&|p| (p.idler.cx, p.idler.cy), &layout.idler_roi);
        let grid = Self::new(
            params,
            basis,
            [snap(s[0], params.nx), snap(s[1], params.ny)],
            [snap(i[0], params.nx), snap(i[1], params.ny)],
        )?;
        grid.check_inside(layout)?;
        Ok(grid)
    }

    /// Same lattice with the idler grid moved by `(dx, dy)` pixels.
    pub fn with_idler_shift(&self, dx: f64, dy: f64) -> Self {
        let mut g = self.clone();
        g.idler_center = [self.idler_center[0] + dx, self.idler_center[1] + dy];
        g
    }

    /// Fails if any active cell extends beyond its arm's ROI.
    pub fn check_inside(&self, layout: &ArmLayout) -> Result<()> {
        let h = self.params.cell as f64 / 2.0;
        for m in 0..self.d() {
            for arm in [Arm::Signal, Arm::Idler] {
                let roi = match arm {
                    Arm::Signal => &layout.signal_roi,
                    Arm::Idler => &layout.idler_roi,
                };
                let [x, y] = self.cell_center(arm, m);
                let inside = roi.contains(x - h, y - h) && roi.contains(x + h - 1e-9, y + h - 1e-9);
                if !inside {
                    return Err(Error::Config(format!("superpixel {m} of the {arm:?} grid lies outside its ROI")));
                }
            }
        }
        Ok(())
    }

    /// Number of active modes.
    pub fn d(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn cell_center(&self, arm: Arm, mode: usize) -> [f64; 2] {
        let o = self.offsets[mode];
        match arm {
            Arm::Signal => [self.signal_center[0] + o[0], self.signal_center[1] + o[1]],
            Arm::Idler => {
                let s = self.basis.idler_sign();
                [self.idler_center[0] + s * o[0], self.idler_center[1] + s * o[1]]
            }
        }
    }

    /// Mode whose cell `[c − cell/2, c + cell/2)²` contains `(x, y)`.
    pub fn locate(&self, arm: Arm, x: f64, y: f64) -> Option<usize> {
        let (center, sign) = match arm {
            Arm::Signal => (self.signal_center, 1.0),
            Arm::Idler => (self.idler_center, self.basis.idler_sign()),
        };
        let s = self.params.stride as f64;
        let ix = (sign * (x - center[0]) / s + (self.params.nx as f64 - 1.0) / 2.0).round();
        let iy = (sign * (y - center[1]) / s + (self.params.ny as f64 - 1.0) / 2.0).round();
        if !(0.0..self.params.nx as f64).contains(&ix) || !(0.0..self.params.ny as f64).contains(&iy) {
            return None;
        }
        let mode = self.lookup[iy as usize * self.params.nx as usize + ix as usize]? as usize;
        let c = self.cell_center(arm, mode);
        let h = self.params.cell as f64 / 2.0;
        let inside = |v: f64, c: f64| v >= c - h && v < c + h;
        (inside(x, c[0]) && inside(y, c[1])).then_some(mode)
    }

    /// Sum of the signal and idler cell offsets from their grid centers, in
    /// pixels. In the far field this is the pump momentum `p_s + p_i`.
    pub fn sum_offset(&self, m: usize, n: usize) -> [f64; 2] {
        let s = self.cell_center(Arm::Signal, m);
        let i = self.cell_center(Arm::Idler, n);
        [
            s[0] - self.signal_center[0] + i[0] - self.idler_center[0],
            s[1] - self.signal_center[1] + i[1] - self.idler_center[1],
        ]
    }
}

/// `d × d` coincidence counts, rows indexed by signal mode and columns by
/// idler mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub d: usize,
    pub basis: SpatialBasis,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Pairs with at least one photon outside every active cell.
    pub dropped: u64,
}

impl CorrelationMatrix {
    pub fn zeros(d: usize, basis: SpatialBasis) -> Self {
        Self {
            d,
            basis,
            counts: vec![0; d * d],
            total: 0,
            dropped: 0,
        }
    }

    pub fn from_counts(d: usize, basis: SpatialBasis, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: counts.len(),
            });
        }
        let total = counts.iter().sum();
        Ok(Self {
            d,
            basis,
            counts,
            total,
            dropped: 0,
        })
    }

    pub fn get(&self, m: usize, n: usize) -> u64 {
        self.counts[m * self.d + n]
    }

    pub fn diagonal_total(&self) -> u64 {
        (0..self.d).map(|m| self.get(m, m)).sum()
    }

    fn add(mut self, o: &Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.total += o.total;
        self.dropped += o.dropped;
        self
    }
}

/// Accumulates pairs into the grid's correlation matrix.
pub fn bin_to_superpixels(pairs: &[CoincidencePair], grid: &SuperpixelGrid) -> CorrelationMatrix {
    let d = grid.d();
    let chunk = (pairs.len() / rayon::current_num_threads().max(1)).max(1 << 15);
    pairs
        .par_chunks(chunk)
        .map(|part| {
            let mut m = CorrelationMatrix::zeros(d, grid.basis);
            for p in part {
                let s = grid.locate(Arm::Signal, p.signal.cx, p.signal.cy);
                let i = grid.locate(Arm::Idler, p.idler.cx, p.idler.cy);
                match (s, i) {
                    (Some(s), Some(i)) => {
                        m.counts[s * d + i] += 1;
                        m.total += 1;
                    }
                    _ => m.dropped += 1,
                }
            }
            m
        })
        .reduce(|| CorrelationMatrix::zeros(d, grid.basis), |a, b| a.add(&b))
}

/// Mean centroid positions of the pairs binned into each cell `(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCentroids {
    pub d: usize,
    sums: Vec<[f64; 4]>,
    counts: Vec<u64>,
}

impl CellCentroids {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            sums: vec![[0.0; 4]; d * d],
            counts: vec![0; d * d],
        }
    }

    pub fn accumulate(&mut self, pairs: &[CoincidencePair], grid: &SuperpixelGrid) {
        for p in pairs {
            let s = grid.locate(Arm::Signal, p.signal.cx, p.signal.cy);
            let i = grid.locate(Arm::Idler, p.idler.cx, p.idler.cy);
            if let (Some(s), Some(i)) = (s, i) {
                let k = s * self.d + i;
                let acc = &mut self.sums[k];
                acc[0] += p.signal.cx;
                acc[1] += p.signal.cy;
                acc[2] += p.idler.cx;
                acc[3] += p.idler.cy;
                self.counts[k] += 1;
            }
        }
    }

    /// Mean signal and idler centroids of cell `(m, n)`, px.
    pub fn mean(&self, m: usize, n: usize) -> Option<([f64; 2], [f64; 2])> {
        let k = m * self.d + n;
        let c = self.counts[k];
        (c > 0).then(|| {
            let s = self.sums[k].map(|v| v / c as f64);
            ([s[0], s[1]], [s[2], s[3]])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `s + i`, narrow for anti-correlated photons.
    Sum,
    /// `i − s`, narrow for correlated photons.
    Difference,
}

impl Projection {
    /// Projection that exposes the correlation width in a given plane.
    pub fn natural(plane: BasisPlane) -> Self {
        match plane {
            BasisPlane::FarField => Projection::Sum,
            BasisPlane::NearField => Projection::Difference,
        }
    }
}

/// Histogram with 1-pixel bins; bin `k` is centered at `origin + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub origin: f64,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn center(&self, k: usize) -> f64 {
        self.origin + k as f64
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Histogram of `s ± i` centroid coordinates along one axis.
pub fn correlation_profile(pairs: &[CoincidencePair], axis: Axis, projection: Projection) -> Result<Histogram> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("correlation profile of an empty pair list".into()));
    }
    let value = |p: &CoincidencePair| {
        let (s, i) = match axis {
            Axis::X => (p.signal.cx, p.idler.cx),
            Axis::Y => (p.signal.cy, p.idler.cy),
        };
        match projection {
            Projection::Sum => s + i,
            Projection::Difference => i - s,
        }
    };
    let bins: Vec<i64> = pairs.iter().map(|p| value(p).round() as i64).collect();
    let lo = *bins.iter().min().expect("nonempty");
    let hi = *bins.iter().max().expect("nonempty");
    let mut counts = vec![0.0; (hi - lo + 1) as usize];
    for b in bins {
        counts[(b - lo) as usize] += 1.0;
    }
    Ok(Histogram { origin: lo as f64, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    LeastSquares,
    /// Too few populated bins for a fit; σ is the histogram standard deviation.
    Moments,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub sigma_um: f64,
    pub sigma_err_um: f64,
    pub sigma_px: f64,
    pub mu_px: f64,
    pub amplitude: f64,
    pub background: f64,
    pub method: FitMethod,
    /// Width below one pixel: the profile is not resolved.
    pub sub_pixel: bool,
}

struct GaussianProblem<'a> {
    y: &'a [f64],
    p: Vector4<f64>,
}

impl GaussianProblem<'_> {
    fn eval(&self, x: f64) -> (f64, [f64; 4]) {
        let [a, mu, s, b] = [self.p[0], self.p[1], self.p[2], self.p[3]];
        let u = (x - mu) / s;
        let g = (-0.5 * u * u).exp();
        (a * g + b, [g, a * g * u / s, a * g * u * u / s, 1.0])
    }
}

impl LeastSquaresProblem<f64, Dyn, U4> for GaussianProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, p: &Vector4<f64>) {
        self.p.copy_from(p);
    }

    fn params(&self) -> Vector4<f64> {
        self.p
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        Some(OVector::<f64, Dyn>::from_iterator(
            self.y.len(),
            self.y.iter().enumerate().map(|(k, &y)| self.eval(k as f64).0 - y),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U4>> {
        let mut j = OMatrix::<f64, Dyn, U4>::zeros(self.y.len());
        for k in 0..self.y.len() {
            let (_, g) = self.eval(k as f64);
            for (c, v) in g.into_iter().enumerate() {
                j[(k, c)] = v;
            }
        }
        Some(j)
    }
}

fn moments(y: &[f64]) -> (f64, f64) {
    let n: f64 = y.iter().sum();
    let mean = y.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / n;
    let var = y.iter().enumerate().map(|(k, v)| (k as f64 - mean).powi(2) * v).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares fit of `A·exp(−(x−µ)²/2σ²) + B`; `σ` is reported in µm at
/// the sensor using `pitch_um`.
///
/// Histograms with fewer than 5 populated bins are summarized by their
/// moments instead, with [`FitMethod::Moments`].
pub fn fit_gaussian_width(hist: &Histogram, pitch_um: f64) -> Result<GaussianFit> {
    let y = &hist.counts;
    if hist.total() <= 0.0 {
        return Err(Error::InsufficientData("empty histogram".into()));
    }
    let (mean, sd) = moments(y);
    let populated = y.iter().filter(|&&v| v > 0.0).count();
    if populated < 5 {
        return Ok(GaussianFit {
            sigma_um: sd * pitch_um,
            sigma_err_um: f64::NAN,
            sigma_px: sd,
            mu_px: hist.origin + mean,
            amplitude: y.iter().cloned().fold(0.0, f64::max),
            background: 0.0,
            method: FitMethod::Moments,
            sub_pixel: sd < 1.0,
        });
    }

    let peak = y.iter().cloned().fold(f64::MIN, f64::max);
    let k_peak = y.iter().position(|&v| v == peak).expect("nonempty") as f64;
    let floor = y.iter().cloned().fold(f64::MAX, f64::min);
    // Start from the peak with a half-maximum width estimate; the moment width
    // is inflated by any flat background.
    let half = floor + 0.5 * (peak - floor);
    let above = y.iter().filter(|&&v| v >= half).count() as f64;
    let s0 = (above / 2.355).clamp(0.5, sd.max(0.5));
    let problem = GaussianProblem {
        y,
        p: Vector4::new(peak - floor, k_peak, s0, floor),
    };
    let (problem, report) = LevenbergMarquardt::new().with_patience(200).minimize(problem);
    let p = problem.p;
    let sigma = p[2].abs();
    if !report.termination.was_successful() || !sigma.is_finite() || !p[1].is_finite() {
        return Err(Error::FitFailed(format!(
            "Gaussian fit did not converge ({:?}, {} evaluations, start σ={s0:.3} px)",
            report.termination, report.number_of_evaluations
        )));
    }

    let j = problem.jacobian().expect("jacobian");
    let dof = (y.len() as f64 - 4.0).max(1.0);
    let rss = 2.0 * report.objective_function;
    let jtj: Matrix4<f64> = (j.transpose() * &j).fixed_view::<4, 4>(0, 0).into_owned();
    let sigma_err = DMatrix::from_column_slice(4, 4, jtj.as_slice())
        .try_inverse()
        .map(|c| (c[(2, 2)] * rss / dof).max(0.0).sqrt())
        .unwrap_or(f64::NAN);

    Ok(GaussianFit {
        sigma_um: sigma * pitch_um,
        sigma_err_um: sigma_err * pitch_um,
        sigma_px: sigma,
        mu_px: hist.origin + p[1],
        amplitude: p[0],
        background: p[3],
        method: FitMethod::LeastSquares,
        sub_pixel: sigma < 1.0,
    })
}

/// A width with its 1σ uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub err: f64,
}

impl Measured {
    pub fn new(value: f64, err: f64) -> Self {
        Self { value, err }
    }

    fn rel(&self) -> f64 {
        if self.err.is_finite() {
            self.err / self.value
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EprAxis {
    /// Far-field correlation width at the sensor, µm.
    pub delta_ff: Measured,
    /// Near-field correlation width at the sensor, µm.
    pub delta_nf: Measured,
    /// Conditional momentum uncertainty, ħ/µm.
    pub dp: Measured,
    /// Conditional position uncertainty, µm.
    pub dq: Measured,
    /// `dp · dq` in units of ħ.
    pub product: Measured,
    /// `product < 1/2`.
    pub violation: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EprResult {
    pub x: EprAxis,
    pub y: EprAxis,
}

fn epr_axis(det: &DetectorConfig, ff: Measured, nf: Measured) -> Result<EprAxis> {
    if !(ff.value > 0.0 && nf.value > 0.0) {
        return Err(Error::Domain("correlation widths must be positive".into()));
    }
    let scale = det.k_um() / (det.f_eff_mm * 1000.0);
    let dp = Measured::new(scale * ff.value, scale * ff.value * ff.rel());
    let dq = Measured::new(nf.value / det.magnification, nf.value / det.magnification * nf.rel());
    let product = dp.value * dq.value;
    Ok(EprAxis {
        delta_ff: ff,
        delta_nf: nf,
        dp,
        dq,
        product: Measured::new(product, product * ff.rel().hypot(nf.rel())),
        violation: product < 0.5,
    })
}

/// Conditional uncertainties `Δp = k·Δ_FF/f_e` and `Δq = Δ_NF/M` and their
/// products, from widths in µm at the sensor given as `[x, y]`.
pub fn epr_products(det: &DetectorConfig, ff: [Measured; 2], nf: [Measured; 2]) -> Result<EprResult> {
    Ok(EprResult {
        x: epr_axis(det, ff[0], nf[0])?,
        y: epr_axis(det, ff[1], nf[1])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CentroidedPhoton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    fn layout() -> ArmLayout {
        ArmLayout {
            signal_roi: Roi::new(0, 0, 128, 256),
            idler_roi: Roi::new(128, 0, 128, 256),
        }
    }

    fn photon(x: f64, y: f64, arm: Arm) -> CentroidedPhoton {
        CentroidedPhoton {
            cx: x,
            cy: y,
            toa_corr: 0,
            cluster_size: 1,
            total_tot: 1,
            arm,
        }
    }

    fn pair(s: [f64; 2], i: [f64; 2]) -> CoincidencePair {
        CoincidencePair {
            signal: photon(s[0], s[1], Arm::Signal),
            idler: photon(i[0], i[1], Arm::Idler),
            dt: 0,
        }
    }

    fn grid(basis: SpatialBasis) -> SuperpixelGrid {
        SuperpixelGrid::new(GridParams::default(), basis, [63.5, 127.5], [191.5, 127.5]).unwrap()
    }

    #[test]
    fn conjugate_cells_bin_on_the_diagonal() {
        let g = grid(SpatialBasis::Momentum);
        let pairs = [pair(g.cell_center(Arm::Signal, 7), g.cell_center(Arm::Idler, 7))];
        let m = bin_to_superpixels(&pairs, &g);
        assert_eq!((m.get(7, 7), m.total, m.dropped), (1, 1, 0));
    }

    #[test]
    fn gutter_pairs_are_dropped() {
        let g = grid(SpatialBasis::Momentum);
        let c = g.cell_center(Arm::Signal, 0);
        let pairs = [pair([c[0] + 2.0, c[1]], g.cell_center(Arm::Idler, 0))];
        let m = bin_to_superpixels(&pairs, &g);
        assert_eq!((m.total, m.dropped), (0, 1));
    }

    #[test]
    fn momentum_idler_cells_are_reflected() {
        let g = grid(SpatialBasis::Momentum);
        let s = g.cell_center(Arm::Signal, 0);
        let i = g.cell_center(Arm::Idler, 0);
        assert_eq!(s[0] - g.signal_center[0], -(i[0] - g.idler_center[0]));
        assert_eq!(s[1] - g.signal_center[1], -(i[1] - g.idler_center[1]));
        let p = grid(SpatialBasis::Position);
        assert_eq!(p.cell_center(Arm::Idler, 0)[0] - p.idler_center[0], s[0] - g.signal_center[0]);
    }

    #[test]
    fn cell_bounds_are_half_open() {
        for basis in [SpatialBasis::Momentum, SpatialBasis::Position] {
            let g = grid(basis);
            for arm in [Arm::Signal, Arm::Idler] {
                for m in [0, 45, 99] {
                    let [x, y] = g.cell_center(arm, m);
                    assert_eq!(g.locate(arm, x - 1.5, y - 1.5), Some(m));
                    assert_eq!(g.locate(arm, x + 1.4999, y + 1.4999), Some(m));
                    assert_eq!(g.locate(arm, x + 1.5, y), None);
                    assert_eq!(g.locate(arm, x, y - 1.5001), None);
                }
            }
        }
    }

    #[test]
    fn circular_mask_counts() {
        let params = GridParams {
            nx: 25,
            ny: 25,
            radius_cells: Some(11.8),
            ..Default::default()
        };
        let g = SuperpixelGrid::new(params, SpatialBasis::Momentum, [0.0, 0.0], [0.0, 0.0]).unwrap();
        let expected = (0..25)
            .flat_map(|a| (0..25).map(move |b| (a, b)))
            .filter(|&(a, b)| ((a - 12) * (a - 12) + (b - 12) * (b - 12)) as f64 <= 11.8 * 11.8)
            .count();
        assert_eq!(g.d(), expected);
        // every active cell's reflection is active
        for o in g.offsets() {
            assert!(g.offsets().contains(&[-o[0], -o[1]]));
        }
    }

    #[test]
    fn auto_placement_snaps_and_checks_bounds() {
        let pairs = [pair([60.2, 120.9], [190.0, 130.0]), pair([61.0, 121.0], [191.0, 131.0])];
        let g = SuperpixelGrid::auto(GridParams::default(), SpatialBasis::Momentum, &layout(), &pairs).unwrap();
        assert_eq!(g.signal_center, [60.5, 120.5]);
        assert_eq!(g.idler_center, [190.5, 130.5]);
        let far = [pair([2.0, 2.0], [190.0, 130.0])];
        assert!(SuperpixelGrid::auto(GridParams::default(), SpatialBasis::Momentum, &layout(), &far).is_err());
    }

    #[test]
    fn binning_conserves_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 20.0).unwrap();
        let g = grid(SpatialBasis::Momentum);
        let pairs: Vec<_> = (0..100_000)
            .map(|_| {
                pair(
                    [63.5 + n.sample(&mut rng), 127.5 + n.sample(&mut rng)],
                    [191.5 + n.sample(&mut rng), 127.5 + n.sample(&mut rng)],
                )
            })
            .collect();
        let m = bin_to_superpixels(&pairs, &g);
        assert_eq!(m.total + m.dropped, pairs.len() as u64);
        assert_eq!(m.total, m.counts.iter().sum::<u64>());
    }

    #[test]
    fn profiles_of_perfect_correlations_are_deltas() {
        let pairs: Vec<_> = (0..20)
            .map(|k| {
                let o = k as f64 - 10.0;
                pair([63.5 + o, 100.0], [191.5 - o, 100.0])
            })
            .collect();
        let h = correlation_profile(&pairs, Axis::X, Projection::Sum).unwrap();
        assert_eq!(h.counts, vec![20.0]);
        assert_eq!(h.origin, 255.0);

        let pairs: Vec<_> = (0..20).map(|k| pair([50.0, k as f64], [178.0, k as f64])).collect();
        let h = correlation_profile(&pairs, Axis::Y, Projection::Difference).unwrap();
        assert_eq!((h.origin, h.counts.clone()), (0.0, vec![20.0]));
        let h = correlation_profile(&pairs, Axis::X, Projection::Difference).unwrap();
        assert_eq!((h.origin, h.counts.clone()), (128.0, vec![20.0]));
        assert!(correlation_profile(&[], Axis::X, Projection::Sum).is_err());
    }

    fn gaussian_hist(sigma: f64, amplitude: f64, origin: f64, n: usize) -> Histogram {
        let mu = (n as f64 - 1.0) / 2.0 + 0.3;
        Histogram {
            origin,
            counts: (0..n).map(|k| amplitude * (-(k as f64 - mu).powi(2) / (2.0 * sigma * sigma)).exp()).collect(),
        }
    }

    #[test]
    fn exact_gaussian_width() {
        let fit = fit_gaussian_width(&gaussian_hist(2.0, 1000.0, 0.0, 41), 55.0).unwrap();
        assert_eq!(fit.method, FitMethod::LeastSquares);
        assert!((fit.sigma_um - 110.0).abs() < 1.1, "{fit:?}");
        assert!(!fit.sub_pixel);
    }

    #[test]
    fn delta_histogram_is_flagged() {
        let h = Histogram {
            origin: 10.0,
            counts: vec![0.0, 50.0, 0.0],
        };
        let fit = fit_gaussian_width(&h, 55.0).unwrap();
        assert_eq!(fit.method, FitMethod::Moments);
        assert!(fit.sub_pixel);
        assert_eq!(fit.mu_px, 11.0);
    }

    #[test]
    fn fit_is_translation_invariant() {
        let h = gaussian_hist(3.1, 500.0, -40.0, 61);
        let shifted = Histogram {
            origin: 1234.0,
            ..h.clone()
        };
        let a = fit_gaussian_width(&h, 55.0).unwrap();
        let b = fit_gaussian_width(&shifted, 55.0).unwrap();
        assert_eq!(a.sigma_px, b.sigma_px);
        assert!((b.mu_px - a.mu_px - 1274.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_gaussian_with_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::<f64>::new(0.0, 2.5).unwrap();
        let mut counts = vec![0.0f64; 81];
        for _ in 0..10_000 {
            let k = (40.0 + n.sample(&mut rng)).round() as usize;
            counts[k] += 1.0;
        }
        for c in counts.iter_mut() {
            *c += Poisson::new(20.0).unwrap().sample(&mut rng);
        }
        let fit = fit_gaussian_width(&Histogram { origin: 0.0, counts }, 55.0).unwrap();
        // pixel binning adds 1/12 px² to the variance
        let expected = (2.5f64.powi(2) + 1.0 / 12.0).sqrt();
        assert!((fit.sigma_px / expected - 1.0).abs() < 0.05, "{fit:?}");
        assert!(fit.sigma_err_um > 0.0 && fit.sigma_err_um < 0.05 * fit.sigma_um);
        assert!((fit.background - 20.0).abs() < 3.0);
    }

    #[test]
    fn epr_products_from_uncertainties() {
        let det = DetectorConfig {
            wavelength_nm: 810.0,
            ..Default::default()
        };
        let k = 2.0 * std::f64::consts::PI / 0.81;
        let ff = |dp: f64| Measured::new(dp * 75_000.0 / k, 0.0);
        let nf = |dq: f64| Measured::new(dq * 2.0, 0.0);
        let r = epr_products(&det, [ff(4.9e-3), ff(6.4e-3)], [nf(18.76), nf(18.18)]).unwrap();
        assert!((r.y.product.value - 6.4e-3 * 18.18).abs() < 1e-12);
        assert!((r.x.product.value - 4.9e-3 * 18.76).abs() < 1e-12);
        assert!(r.x.violation && r.y.violation);
        assert!(epr_products(&det, [Measured::new(0.0, 0.0); 2], [nf(1.0); 2]).is_err());
    }

    #[test]
    fn epr_error_propagation() {
        let det = DetectorConfig::default();
        let r = epr_products(
            &det,
            [Measured::new(100.0, 10.0); 2],
            [Measured::new(50.0, 5.0); 2],
        )
        .unwrap();
        let rel = r.x.product.err / r.x.product.value;
        assert!((rel - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
