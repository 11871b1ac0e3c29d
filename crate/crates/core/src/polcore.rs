//! Two-qubit polarization algebra.
//!
//! Basis order for every 4×4 object in this module is `HH, HV, VH, VV`
//! (signal first). Waveplates use the Jones convention
//! `R(θ)·diag(1, e^{iδ})·R(−θ)` with `δ = π` (HWP) and `δ = π/2` (QWP).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-10;
pub const DEFAULT_PHASE_FLOOR: f64 = 1e-6;

/// Basis index of `|HH⟩`.
pub const HH: usize = 0;
/// Basis index of `|HV⟩`.
pub const HV: usize = 1;
/// Basis index of `|VH⟩`.
pub const VH: usize = 2;
/// Basis index of `|VV⟩`.
pub const VV: usize = 3;

/// Wraps an angle into `[−π, π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = x - two_pi * ((x + PI) / two_pi).floor();
    // floor() can land exactly on +π through rounding
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// Output port of the polarizing beam splitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Port {
    Transmit,
    Reflect,
}

/// Orientation of the QWP → HWP → PBS analyzer in front of one detector arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveplateSetting {
    pub hwp_angle: f64,
    pub qwp_angle: f64,
    pub port: Port,
}

impl WaveplateSetting {
    pub fn new(hwp_angle: f64, qwp_angle: f64, port: Port) -> Result<Self> {
        if !hwp_angle.is_finite() || !qwp_angle.is_finite() {
            return Err(Error::Domain("waveplate angles must be finite".into()));
        }
        Ok(Self {
            hwp_angle: wrap_phase(hwp_angle),
            qwp_angle: wrap_phase(qwp_angle),
            port,
        })
    }

    pub fn transmit(hwp_angle: f64, qwp_angle: f64) -> Self {
        Self::new(hwp_angle, qwp_angle, Port::Transmit).expect("finite angles")
    }

    /// Analyzer settings (transmit port) for the six standard polarizations.
    pub fn for_state(label: char) -> Option<Self> {
        let (h, q) = match label {
            'H' => (0.0, 0.0),
            'V' => (PI / 4.0, 0.0),
            'D' => (PI / 8.0, PI / 4.0),
            'A' => (-PI / 8.0, -PI / 4.0),
            'R' => (0.0, -PI / 4.0),
            'L' => (0.0, PI / 4.0),
            _ => return None,
        };
        Some(Self::transmit(h, q))
    }
}

/// Single-photon polarization state over `(H, V)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarizationKet {
    amps: Vector2<C64>,
}

impl PolarizationKet {
    /// Normalizes and fixes the global phase (first nonzero amplitude real positive).
    pub fn new(h: C64, v: C64) -> Result<Self> {
        let norm = (h.norm_sqr() + v.norm_sqr()).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Domain("polarization ket must be nonzero and finite".into()));
        }
        let mut amps = Vector2::new(h / norm, v / norm);
        let lead = if amps[0].norm() > 1e-15 { amps[0] } else { amps[1] };
        let phase = lead.conj() / lead.norm();
        amps *= phase;
        Ok(Self { amps })
    }

    pub fn h() -> Self {
        Self::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0)).unwrap()
    }

    pub fn v() -> Self {
        Self::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0)).unwrap()
    }

    pub fn d() -> Self {
        Self::new(C64::new(1.0, 0.0), C64::new(1.0, 0.0)).unwrap()
    }

    pub fn a() -> Self {
        Self::new(C64::new(1.0, 0.0), C64::new(-1.0, 0.0)).unwrap()
    }

    /// `(H − iV)/√2`
    pub fn r() -> Self {
        Self::new(C64::new(1.0, 0.0), C64::new(0.0, -1.0)).unwrap()
    }

    /// `(H + iV)/√2`
    pub fn l() -> Self {
        Self::new(C64::new(1.0, 0.0), C64::new(0.0, 1.0)).unwrap()
    }

    pub fn amplitudes(&self) -> [C64; 2] {
        [self.amps[0], self.amps[1]]
    }

    pub fn as_vector(&self) -> &Vector2<C64> {
        &self.amps
    }

    /// The orthogonal state (the other PBS port).
    pub fn orthogonal(&self) -> Self {
        Self::new(-self.amps[1].conj(), self.amps[0].conj()).unwrap()
    }

    /// `|⟨self|other⟩|²`
    pub fn overlap(&self, other: &Self) -> f64 {
        self.amps.dotc(&other.amps).norm_sqr()
    }

    /// Two-photon product ket `self ⊗ idler` in `HH, HV, VH, VV` order.
    pub fn tensor(&self, idler: &Self) -> Vector4<C64> {
        let s = &self.amps;
        let i = &idler.amps;
        Vector4::new(s[0] * i[0], s[0] * i[1], s[1] * i[0], s[1] * i[1])
    }
}

fn rotation(theta: f64) -> Matrix2<C64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(
        C64::new(c, 0.0),
        C64::new(-s, 0.0),
        C64::new(s, 0.0),
        C64::new(c, 0.0),
    )
}

/// Jones matrix of a retarder with fast axis at `theta` and retardance `delta`.
pub fn retarder(theta: f64, delta: f64) -> Matrix2<C64> {
    let d = Matrix2::new(
        C64::new(1.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::from_polar(1.0, delta),
    );
    rotation(theta) * d * rotation(-theta)
}

pub fn half_wave_plate(theta: f64) -> Matrix2<C64> {
    retarder(theta, PI)
}

pub fn quarter_wave_plate(theta: f64) -> Matrix2<C64> {
    retarder(theta, PI / 2.0)
}

/// State whose Born overlap with the incoming photon gives the detection
/// probability behind the analyzer: `U_QWP(q)† · U_HWP(h)† · |port⟩`.
pub fn projector_from_waveplates(setting: &WaveplateSetting) -> PolarizationKet {
    let port = match setting.port {
        Port::Transmit => Vector2::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
        Port::Reflect => Vector2::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
    };
    let back = quarter_wave_plate(setting.qwp_angle).adjoint()
        * half_wave_plate(setting.hwp_angle).adjoint()
        * port;
    PolarizationKet::new(back[0], back[1]).expect("unitary preserves norm")
}

/// 4×4 two-photon polarization density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix2Q {
    elements: Matrix4<C64>,
}

/// Diagnostic output of [`validate_density_matrix`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub hermiticity_deviation: f64,
    pub trace_deviation: f64,
    pub min_eigenvalue: f64,
    pub hermitian: bool,
    pub unit_trace: bool,
    pub positive: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.hermitian && self.unit_trace && self.positive
    }
}

impl DensityMatrix2Q {
    /// Wraps a matrix without checking any invariant. Raw linear
    /// reconstructions go through here before physical projection.
    pub fn from_matrix_unchecked(elements: Matrix4<C64>) -> Self {
        Self { elements }
    }

    /// Wraps a matrix, requiring Hermiticity, unit trace and positivity.
    pub fn from_matrix(elements: Matrix4<C64>) -> Result<Self> {
        let rho = Self { elements };
        let report = validate_density_matrix(&rho);
        if !report.passed() {
            return Err(Error::InvalidState(format!("{report:?}")));
        }
        Ok(rho)
    }

    pub fn from_pure(ket: &Vector4<C64>) -> Self {
        let n = ket.norm();
        let k = ket / C64::new(n, 0.0);
        Self {
            elements: k * k.adjoint(),
        }
    }

    pub fn maximally_mixed() -> Self {
        Self {
            elements: Matrix4::identity() * C64::new(0.25, 0.0),
        }
    }

    /// `(|HH⟩ + e^{iθ}|VV⟩)/√2`
    pub fn phi_state(theta: f64) -> Self {
        let c = C64::new(FRAC_1_SQRT_2, 0.0);
        Self::from_pure(&Vector4::new(
            c,
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            c * C64::from_polar(1.0, theta),
        ))
    }

    pub fn elements(&self) -> &Matrix4<C64> {
        &self.elements
    }

    pub fn into_inner(self) -> Matrix4<C64> {
        self.elements
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.elements[(row, col)]
    }

    pub fn trace(&self) -> C64 {
        self.elements.trace()
    }

    /// Mixture `w·self + (1−w)·other`.
    pub fn mix(&self, other: &Self, w: f64) -> Self {
        Self {
            elements: self.elements * C64::new(w, 0.0) + other.elements * C64::new(1.0 - w, 0.0),
        }
    }

    /// `U ρ U†`
    pub fn transform(&self, u: &Matrix4<C64>) -> Self {
        Self {
            elements: u * self.elements * u.adjoint(),
        }
    }

    pub fn hermitian_part(&self) -> Matrix4<C64> {
        (self.elements + self.elements.adjoint()) * C64::new(0.5, 0.0)
    }

    /// Ascending eigenvalues of the Hermitian part.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let ev = self.hermitian_part().symmetric_eigenvalues();
        let mut out = [ev[0], ev[1], ev[2], ev[3]];
        out.sort_by(f64::total_cmp);
        out
    }

    /// Uhlmann fidelity with a pure state, `⟨ψ|ρ|ψ⟩`.
    pub fn fidelity_pure(&self, ket: &Vector4<C64>) -> f64 {
        (ket.adjoint() * self.elements * ket)[(0, 0)].re / ket.norm_squared()
    }

    fn check_hermitian_unit_trace(&self) -> Result<()> {
        let herm = hermiticity_deviation(&self.elements);
        if herm > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!(
                "not Hermitian (deviation {herm:.3e})"
            )));
        }
        let tr = (self.trace() - C64::new(1.0, 0.0)).norm();
        if tr > TRACE_TOL {
            return Err(Error::InvalidState(format!(
                "trace differs from 1 by {tr:.3e}"
            )));
        }
        Ok(())
    }
}

fn hermiticity_deviation(m: &Matrix4<C64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..4 {
        for c in 0..4 {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

pub fn validate_density_matrix(rho: &DensityMatrix2Q) -> ValidationReport {
    let hermiticity_deviation = hermiticity_deviation(&rho.elements);
    let trace_deviation = (rho.trace() - C64::new(1.0, 0.0)).norm();
    let min_eigenvalue = rho.eigenvalues()[0];
    ValidationReport {
        hermiticity_deviation,
        trace_deviation,
        min_eigenvalue,
        hermitian: hermiticity_deviation <= HERMITIAN_TOL,
        unit_trace: trace_deviation <= TRACE_TOL,
        positive: min_eigenvalue >= -PSD_TOL,
    }
}

/// Joint detection probability `⟨ψ_s ⊗ ψ_i| ρ |ψ_s ⊗ ψ_i⟩`.
pub fn born_probability_joint(
    rho: &DensityMatrix2Q,
    proj_s: &PolarizationKet,
    proj_i: &PolarizationKet,
) -> Result<f64> {
    rho.check_hermitian_unit_trace()?;
    Ok(born_unchecked(rho, proj_s, proj_i))
}

pub(crate) fn born_unchecked(
    rho: &DensityMatrix2Q,
    proj_s: &PolarizationKet,
    proj_i: &PolarizationKet,
) -> f64 {
    let k = proj_s.tensor(proj_i);
    let p = (k.adjoint() * rho.elements * k)[(0, 0)].re;
    p.clamp(0.0, 1.0)
}

/// `σ_y ⊗ σ_y` in the `HH, HV, VH, VV` basis.
fn sigma_yy() -> Matrix4<C64> {
    let z = C64::new(0.0, 0.0);
    let p = C64::new(1.0, 0.0);
    let n = C64::new(-1.0, 0.0);
    Matrix4::new(z, z, z, n, z, z, p, z, z, p, z, z, n, z, z, z)
}

/// Wootters concurrence.
///
/// The `λᵢ` are the square roots of the eigenvalues of `ρ·(σy⊗σy)·ρ*·(σy⊗σy)`.
/// They are obtained as singular values of `√ρ·(σy⊗σy)·√ρ*`, whose squares
/// are exactly those eigenvalues; this avoids square-rooting rounding noise
/// near zero.
pub fn concurrence(rho: &DensityMatrix2Q) -> Result<f64> {
    rho.check_hermitian_unit_trace()?;
    let eig = rho.hermitian_part().symmetric_eigen();
    let mut sqrt_vals = Vector4::<C64>::zeros();
    for (k, &mu) in eig.eigenvalues.iter().enumerate() {
        if mu < -PSD_TOL {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue {mu:.3e}; project to a physical state first"
            )));
        }
        // eigenvalues indistinguishable from zero are treated as exact zeros
        let mu = if mu < 1e-14 { 0.0 } else { mu };
        sqrt_vals[k] = C64::new(mu.sqrt(), 0.0);
    }
    let vecs = &eig.eigenvectors;
    let sqrt_rho = vecs * Matrix4::from_diagonal(&sqrt_vals) * vecs.adjoint();
    let a = sqrt_rho * sigma_yy() * sqrt_rho.map(|z| z.conj());
    let mut lambdas: Vec<f64> = a.singular_values().iter().copied().collect();
    lambdas.sort_by(|x, y| y.total_cmp(x));
    let c = lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3];
    Ok(c.clamp(0.0, 1.0))
}

/// Binary entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    term(x) + term(1.0 - x)
}

/// Entanglement of formation from concurrence.
pub fn entanglement_of_formation(concurrence: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&concurrence) {
        return Err(Error::Domain(format!(
            "concurrence {concurrence} outside [0, 1]"
        )));
    }
    let x = 0.5 * (1.0 + (1.0 - concurrence * concurrence).max(0.0).sqrt());
    Ok(binary_entropy(x).clamp(0.0, 1.0))
}

/// Phase of the `⟨VV|ρ|HH⟩` coherence, or `None` when its magnitude does not
/// exceed `floor`.
pub fn biphoton_phase(rho: &DensityMatrix2Q, floor: f64) -> Option<f64> {
    let z = rho.get(VV, HH);
    if z.norm() > floor {
        Some(wrap_phase(z.arg()))
    } else {
        None
    }
}
