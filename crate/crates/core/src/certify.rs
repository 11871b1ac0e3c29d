//! Entanglement-dimensionality certification from correlation matrices in
//! the discrete momentum and position bases.
//!
//! Mode labels are assumed conjugate-aligned: `(m, m)` is the correlated
//! pair in both matrices (see [`crate::spatial::SuperpixelGrid`]).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{CorrelationMatrix, SpatialBasis};

/// Largest `d` for which the quadruple sum is evaluated term by term.
pub const LITERAL_MAX_D: usize = 64;

/// Joint probabilities `N_mn / Σ N`.
pub fn normalize_counts(m: &CorrelationMatrix) -> Result<DMatrix<f64>> {
    if m.counts.len() != m.d * m.d {
        return Err(Error::DimensionMismatch {
            expected: m.d * m.d,
            got: m.counts.len(),
        });
    }
    let total: u64 = m.counts.iter().sum();
    if total == 0 {
        return Err(Error::ZeroTotal);
    }
    let t = total as f64;
    Ok(DMatrix::from_fn(m.d, m.d, |r, c| m.counts[r * m.d + c] as f64 / t))
}

/// Probability mass on the conjugate diagonal.
pub fn fidelity_f1(momentum: &DMatrix<f64>) -> f64 {
    momentum.diagonal().sum()
}

/// `Σ' γ √(p_mn p_m'n')` over the constrained index set, one term at a time.
pub fn gamma_sum_literal(momentum: &DMatrix<f64>) -> f64 {
    let d = momentum.nrows();
    let a = momentum.map(f64::sqrt);
    let di = d as i64;
    let partial: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|m| {
            let mut acc = 0.0;
            for n in 0..d {
                for mp in 0..d {
                    for np in 0..d {
                        if m == np || m == n || n == np || np == mp {
                            continue;
                        }
                        if (m as i64 - mp as i64 - n as i64 + np as i64).rem_euclid(di) == 0 {
                            acc += a[(m, n)] * a[(mp, np)];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    partial.iter().sum::<f64>() / d as f64
}

/// Same sum grouped by the residue `r = n − m (mod d)`, in `O(d²)`.
///
/// The residue condition forces `n' − m' ≡ r`, and the index constraints
/// reduce to `r ≠ 0`, `m' ≠ m` and `m' ≠ m − r`, so each class contributes
/// `S_r² − Σ_m p_{m,m+r} − Σ_m a_{m,m+r} a_{m−r,m}` with `a = √p` and
/// `S_r = Σ_m a_{m,m+r}`.
pub fn gamma_sum_residue(momentum: &DMatrix<f64>) -> f64 {
    let d = momentum.nrows();
    let a = momentum.map(f64::sqrt);
    let mut total = 0.0;
    for r in 1..d {
        let mut s = 0.0;
        let mut same = 0.0;
        let mut shifted = 0.0;
        for m in 0..d {
            let v = a[(m, (m + r) % d)];
            s += v;
            same += v * v;
            shifted += v * a[((m + d - r) % d, m)];
        }
        total += s * s - same - shifted;
    }
    total / d as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F2Terms {
    pub f2_tilde: f64,
    /// `Σ_u ⟨uu|ρ|uu⟩` from the position matrix.
    pub position_diagonal: f64,
    pub gamma_sum: f64,
}

/// Lower bound on the off-diagonal fidelity contribution.
pub fn fidelity_f2_lower(momentum: &DMatrix<f64>, position: &DMatrix<f64>) -> Result<F2Terms> {
    let d = momentum.nrows();
    for m in [momentum, position] {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: if m.nrows() != d { m.nrows() } else { m.ncols() },
            });
        }
    }
    if d == 0 {
        return Err(Error::Domain("zero-dimensional correlation matrix".into()));
    }
    let gamma_sum = if d <= LITERAL_MAX_D {
        gamma_sum_literal(momentum)
    } else {
        gamma_sum_residue(momentum)
    };
    let position_diagonal = position.diagonal().sum();
    Ok(F2Terms {
        f2_tilde: position_diagonal - 1.0 / d as f64 - gamma_sum,
        position_diagonal,
        gamma_sum,
    })
}

/// `1 + max{k ∈ [0, d−1] : f̃ > k/d}`, or 1 when no `k` qualifies.
pub fn certify_dimension(f_tilde: f64, d: usize) -> usize {
    if d == 0 || f_tilde.is_nan() || f_tilde <= 0.0 {
        return 1;
    }
    let df = d as f64;
    let mut k = ((f_tilde * df).ceil() as i64 - 1).clamp(0, d as i64 - 1) as usize;
    while k + 1 < d && ((k + 1) as f64) / df < f_tilde {
        k += 1;
    }
    while k > 0 && (k as f64) / df >= f_tilde {
        k -= 1;
    }
    k + 1
}

/// Bound `B_k = k/d` for a flat target state.
pub fn b_value(k: usize, d: usize) -> f64 {
    k as f64 / d as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedBound {
    /// `F₁/d + F̃₂`; equals 1 on ideal data.
    pub f_tilde: f64,
    pub certified_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub d: usize,
    pub f1: f64,
    pub f2_tilde: f64,
    pub f_tilde: f64,
    pub certified_dim: usize,
    /// `f_tilde > 1`, which no state fidelity can reach.
    pub exceeds_unity: bool,
    pub position_diagonal: f64,
    pub gamma_sum: f64,
    pub weighted: WeightedBound,
    /// `B_k` for `k = 0..d`, when requested.
    pub b_values: Option<Vec<f64>>,
}

/// Full certification from the momentum- and position-basis matrices.
pub fn certify(momentum: &CorrelationMatrix, position: &CorrelationMatrix, with_b_table: bool) -> Result<CertificationResult> {
    if momentum.basis != SpatialBasis::Momentum || position.basis != SpatialBasis::Position {
        return Err(Error::Config("certification needs a momentum and a position matrix, in that order".into()));
    }
    if momentum.d != position.d {
        return Err(Error::DimensionMismatch {
            expected: momentum.d,
            got: position.d,
        });
    }
    let pm = normalize_counts(momentum)?;
    let pp = normalize_counts(position)?;
    let d = momentum.d;
    let f1 = fidelity_f1(&pm);
    let f2 = fidelity_f2_lower(&pm, &pp)?;
    let f_tilde = f1 + f2.f2_tilde;
    let weighted = f1 / d as f64 + f2.f2_tilde;
    Ok(CertificationResult {
        d,
        f1,
        f2_tilde: f2.f2_tilde,
        f_tilde,
        certified_dim: certify_dimension(f_tilde, d),
        exceeds_unity: f_tilde > 1.0,
        position_diagonal: f2.position_diagonal,
        gamma_sum: f2.gamma_sum,
        weighted: WeightedBound {
            f_tilde: weighted,
            certified_dim: certify_dimension(weighted, d),
        },
        b_values: with_b_table.then(|| (0..=d).map(|k| b_value(k, d)).collect()),
    })
}
