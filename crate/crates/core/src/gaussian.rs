//! Gaussian potentials in canonical and moment form.
//!
//! A canonical potential `exp(g + hᵀz − ½ zᵀKz)` need not be normalizable:
//! messages routinely carry indefinite precisions. Definiteness is only
//! demanded when converting to moments or integrating variables out.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Sign of a canonical combination: `Plus` multiplies potentials, `Minus`
/// divides them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// `exp(scale + shiftᵀz − ½ zᵀ precision z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussCanonical {
    scale: f64,
    shift: DVector<f64>,
    precision: DMatrix<f64>,
}

/// A scaled Gaussian density `exp(log_weight) · N(z; mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussMoments {
    pub log_weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Cholesky factor of a symmetric matrix, `None` unless positive definite.
pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m.clone())?;
    if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(chol)
    } else {
        None
    }
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

impl GaussCanonical {
    pub fn new(scale: f64, shift: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let n = shift.len();
        if precision.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: precision.nrows(),
            });
        }
        if precision.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: precision.ncols(),
            });
        }
        Ok(Self {
            scale,
            shift,
            precision: symmetrize(&precision),
        })
    }

    /// The constant potential 1 on an `n`-dimensional space.
    pub fn unit(n: usize) -> Self {
        Self {
            scale: 0.0,
            shift: DVector::zeros(n),
            precision: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Multiply (`Plus`) or divide (`Minus`) two potentials.
    pub fn combine(&self, other: &Self, sign: Sign) -> Result<Self> {
        self.add_scaled(other, sign.factor())
    }

    /// Canonical parameters `self + factor · other`.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(Self {
            scale: self.scale + factor * other.scale,
            shift: &self.shift + &other.shift * factor,
            precision: &self.precision + &other.precision * factor,
        })
    }

    /// Canonical parameters multiplied by `factor` (a power of the potential).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            scale: self.scale * factor,
            shift: &self.shift * factor,
            precision: &self.precision * factor,
        }
    }

    /// Logarithm of the potential at `z`.
    pub fn log_value(&self, z: &DVector<f64>) -> f64 {
        self.scale + self.shift.dot(z) - 0.5 * z.dot(&(&self.precision * z))
    }

    /// Embed into a larger space, placing this potential's variables at
    /// `offset..offset + dim`.
    pub fn embed(&self, total: usize, offset: usize) -> Self {
        let n = self.dim();
        assert!(offset + n <= total, "embedding out of bounds");
        let mut shift = DVector::zeros(total);
        shift.rows_mut(offset, n).copy_from(&self.shift);
        let mut precision = DMatrix::zeros(total, total);
        precision
            .view_mut((offset, offset), (n, n))
            .copy_from(&self.precision);
        Self {
            scale: self.scale,
            shift,
            precision,
        }
    }

    fn improper(&self) -> Error {
        Error::ImproperPotential {
            eigenvalue: min_eigenvalue(&self.precision),
            state: None,
        }
    }

    pub fn to_moments(&self) -> Result<GaussMoments> {
        let chol = cholesky(&self.precision).ok_or_else(|| self.improper())?;
        let covariance = symmetrize(&chol.inverse());
        let mean = chol.solve(&self.shift);
        let n = self.dim() as f64;
        let log_weight =
            self.scale + 0.5 * self.shift.dot(&mean) + 0.5 * n * LN_2PI - 0.5 * chol_log_det(&chol);
        Ok(GaussMoments {
            log_weight,
            mean,
            covariance,
        })
    }

    /// Log of the integral of the potential over all variables.
    pub fn log_mass(&self) -> Result<f64> {
        let chol = cholesky(&self.precision).ok_or_else(|| self.improper())?;
        let mean = chol.solve(&self.shift);
        let n = self.dim() as f64;
        Ok(self.scale + 0.5 * self.shift.dot(&mean) + 0.5 * n * LN_2PI - 0.5 * chol_log_det(&chol))
    }

    /// Integrate out every variable not listed in `keep`; `keep` orders the
    /// retained coordinates of the result.
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        let n = self.dim();
        let mut kept = vec![false; n];
        for &k in keep {
            if k >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: k + 1,
                });
            }
            kept[k] = true;
        }
        let drop: Vec<usize> = (0..n).filter(|i| !kept[*i]).collect();
        let a = keep.len();
        let b = drop.len();
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
                self.precision[(rows[r], cols[c])]
            })
        };
        let k_aa = sub(keep, keep);
        let h_a = DVector::from_fn(a, |r, _| self.shift[keep[r]]);
        if b == 0 {
            return Ok(Self {
                scale: self.scale,
                shift: h_a,
                precision: symmetrize(&k_aa),
            });
        }
        let k_ab = sub(keep, &drop);
        let k_bb = sub(&drop, &drop);
        let h_b = DVector::from_fn(b, |r, _| self.shift[drop[r]]);
        let chol = cholesky(&k_bb).ok_or_else(|| Error::ImproperPotential {
            eigenvalue: min_eigenvalue(&k_bb),
            state: None,
        })?;
        let kbb_inv_hb = chol.solve(&h_b);
        let kbb_inv_kba = chol.solve(&k_ab.transpose());
        let scale = self.scale + 0.5 * h_b.dot(&kbb_inv_hb) + 0.5 * b as f64 * LN_2PI
            - 0.5 * chol_log_det(&chol);
        let shift = h_a - &k_ab * kbb_inv_hb;
        let precision = symmetrize(&(k_aa - &k_ab * kbb_inv_kba));
        Ok(Self {
            scale,
            shift,
            precision,
        })
    }
}

impl GaussMoments {
    pub fn new(log_weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: covariance.nrows(),
            });
        }
        Ok(Self {
            log_weight,
            mean,
            covariance: symmetrize(&covariance),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_canonical(&self) -> Result<GaussCanonical> {
        let chol = cholesky(&self.covariance).ok_or_else(|| Error::SingularCovariance {
            eigenvalue: min_eigenvalue(&self.covariance),
        })?;
        let precision = symmetrize(&chol.inverse());
        let shift = chol.solve(&self.mean);
        let n = self.dim() as f64;
        let scale = self.log_weight
            - 0.5 * self.mean.dot(&shift)
            - 0.5 * n * LN_2PI
            - 0.5 * chol_log_det(&chol);
        Ok(GaussCanonical {
            scale,
            shift,
            precision,
        })
    }

    /// Marginal over the coordinates in `keep`, mass unchanged.
    pub fn marginal(&self, keep: &[usize]) -> Self {
        Self {
            log_weight: self.log_weight,
            mean: DVector::from_fn(keep.len(), |r, _| self.mean[keep[r]]),
            covariance: DMatrix::from_fn(keep.len(), keep.len(), |r, c| {
                self.covariance[(keep[r], keep[c])]
            }),
        }
    }

    /// Contiguous block marginal `offset..offset + len`.
    pub fn block(&self, offset: usize, len: usize) -> Self {
        Self {
            log_weight: self.log_weight,
            mean: self.mean.rows(offset, len).into_owned(),
            covariance: self.covariance.view((offset, offset), (len, len)).into_owned(),
        }
    }

    /// Differential entropy of the normalized density.
    pub fn entropy(&self) -> Result<f64> {
        let chol = cholesky(&self.covariance).ok_or_else(|| Error::SingularCovariance {
            eigenvalue: min_eigenvalue(&self.covariance),
        })?;
        let n = self.dim() as f64;
        Ok(0.5 * (n * (1.0 + (2.0 * PI).ln()) + chol_log_det(&chol)))
    }
}
