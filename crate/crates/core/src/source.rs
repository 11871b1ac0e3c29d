//! Parametric model of the hyperentangled biphoton.
//!
//! Transverse momenta are small-angle `k⊥/k` values in radians. The joint
//! amplitude is a separable Gaussian in the sum `p_s + p_i` (pump angular
//! spectrum) and the half-difference `(p_s − p_i)/2` (phase matching, with an
//! optional annulus). The biphoton polarization phase is
//! `φ = φ₀ + α(|p_s|² + |p_i|²) + β·(p_s + p_i)`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polcore::{wrap_phase, DensityMatrix2Q, C64};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransverseMomentum {
    pub px: f64,
    pub py: f64,
}

impl TransverseMomentum {
    pub const fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.px * self.px + self.py * self.py
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn dot(&self, other: [f64; 2]) -> f64 {
        self.px * other[0] + self.py * other[1]
    }
}

impl Add for TransverseMomentum {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.px + o.px, self.py + o.py)
    }
}

impl Sub for TransverseMomentum {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.px - o.px, self.py - o.py)
    }
}

impl Neg for TransverseMomentum {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.px, -self.py)
    }
}

impl Mul<f64> for TransverseMomentum {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.px * k, self.py * k)
    }
}

/// Gaussian-correlated model of the crystal output face, used for
/// near-field (position basis) acquisitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearFieldModel {
    /// Standard deviation of `q_s − q_i` per axis, µm at the crystal.
    pub sigma_diff_um: f64,
    /// Standard deviation of `(q_s + q_i)/2` per axis, µm at the crystal.
    pub sigma_beam_um: f64,
}

impl Default for NearFieldModel {
    fn default() -> Self {
        Self {
            sigma_diff_um: 30.0,
            sigma_beam_um: 330.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Spread of `p_s + p_i` per axis, rad.
    pub sigma_pump: f64,
    /// Spread of `(p_s − p_i)/2` per axis, rad.
    pub sigma_pm: f64,
    /// Mean emission half-angle; 0 gives a collinear disk.
    #[serde(default)]
    pub ring_radius: f64,
    #[serde(default)]
    pub phi0: f64,
    /// Coefficient of `|p_s|² + |p_i|²`, rad/rad².
    #[serde(default)]
    pub alpha: f64,
    /// Coefficient of `p_s + p_i`, rad/rad.
    #[serde(default)]
    pub beta: [f64; 2],
    pub visibility: f64,
    /// Weight `ε` of the HH branch; 0.5 is balanced.
    #[serde(default = "half")]
    pub hh_vv_imbalance: f64,
    #[serde(default)]
    pub near_field: NearFieldModel,
}

fn half() -> f64 {
    0.5
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            sigma_pump: 8.8e-4,
            sigma_pm: 8.8e-3,
            ring_radius: 0.0,
            phi0: 0.0,
            alpha: 0.0,
            beta: [0.0, 0.0],
            visibility: 1.0,
            hh_vv_imbalance: 0.5,
            near_field: NearFieldModel::default(),
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sigma_pump,
            self.sigma_pm,
            self.ring_radius,
            self.phi0,
            self.alpha,
            self.beta[0],
            self.beta[1],
            self.visibility,
            self.hh_vv_imbalance,
            self.near_field.sigma_diff_um,
            self.near_field.sigma_beam_um,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("source parameters must be finite".into()));
        }
        if self.sigma_pump <= 0.0 || self.sigma_pm <= 0.0 {
            return Err(Error::Config("sigma_pump and sigma_pm must be positive".into()));
        }
        if self.ring_radius < 0.0 {
            return Err(Error::Config("ring_radius must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::Config("visibility must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hh_vv_imbalance) {
            return Err(Error::Config("hh_vv_imbalance must lie in [0, 1]".into()));
        }
        if self.near_field.sigma_diff_um <= 0.0 || self.near_field.sigma_beam_um <= 0.0 {
            return Err(Error::Config("near-field widths must be positive".into()));
        }
        Ok(())
    }
}

/// Biphoton polarization phase in `[−π, π)`.
pub fn phi(cfg: &SourceConfig, ps: TransverseMomentum, pi: TransverseMomentum) -> f64 {
    let radial = ps.norm_sqr() + pi.norm_sqr();
    let pump = (ps + pi).dot(cfg.beta);
    wrap_phase(cfg.phi0 + cfg.alpha * radial + pump)
}

/// Unnormalized `|c_{p_s,p_i}|²`.
pub fn joint_momentum_pdf(cfg: &SourceConfig, ps: TransverseMomentum, pi: TransverseMomentum) -> f64 {
    let sum = (ps + pi).norm_sqr();
    let half_diff = ((ps - pi) * 0.5).norm();
    let pump = (-sum / (2.0 * cfg.sigma_pump * cfg.sigma_pump)).exp();
    let dr = half_diff - cfg.ring_radius;
    let pm = (-dr * dr / (2.0 * cfg.sigma_pm * cfg.sigma_pm)).exp();
    pump * pm
}

/// Local polarization state of the pair emitted into `(p_s, p_i)`:
/// `v|ψ⟩⟨ψ| + (1−v)·diag(ε, 0, 0, 1−ε)` with `|ψ⟩ = √ε|HH⟩ + e^{iφ}√(1−ε)|VV⟩`.
pub fn local_state(cfg: &SourceConfig, ps: TransverseMomentum, pi: TransverseMomentum) -> DensityMatrix2Q {
    local_state_with_phase(cfg, phi(cfg, ps, pi))
}

pub(crate) fn local_state_with_phase(cfg: &SourceConfig, phase: f64) -> DensityMatrix2Q {
    let eps = cfg.hh_vv_imbalance;
    let v = cfg.visibility;
    let zero = C64::new(0.0, 0.0);
    let ket = Vector4::new(
        C64::new(eps.sqrt(), 0.0),
        zero,
        zero,
        C64::from_polar((1.0 - eps).sqrt(), phase),
    );
    let pure = ket * ket.adjoint();
    let mut mixed = Matrix4::<C64>::zeros();
    mixed[(0, 0)] = C64::new(eps, 0.0);
    mixed[(3, 3)] = C64::new(1.0 - eps, 0.0);
    DensityMatrix2Q::from_matrix_unchecked(pure * C64::new(v, 0.0) + mixed * C64::new(1.0 - v, 0.0))
}
