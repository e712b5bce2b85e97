//! Least-squares Koopman surrogates: the full-space operator and the reduced
//! operator fitted in the span of the leading left singular vectors of `X`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector, PINV_REL_TOL};

/// Largest state dimension accepted by [`fit_full`].
pub const FULL_FIT_MAX_DIM: usize = 2000;

/// Relative cutoff below which singular values of `X` count as numerically zero.
pub const RANK_REL_TOL: f64 = 1e-12;

pub const KOOP_MAGIC: &str = "CYCLKOOP1";

#[derive(Debug, Clone)]
pub struct FullFit {
    pub operator: Matrix,
    /// `||X' - K X||_F / ||X'||_F`
    pub fit_residual: f64,
}

fn relative_residual(targets: &Matrix, op: &Matrix, inputs: &Matrix) -> f64 {
    let denom = targets.norm();
    let res = (targets - op * inputs).norm();
    if denom > 0.0 {
        res / denom
    } else {
        res
    }
}

fn check_pair(x: &Matrix, xp: &Matrix) -> Result<()> {
    if x.shape() != xp.shape() {
        return Err(Error::shape(
            "snapshot pair",
            format!("{}x{}", x.nrows(), x.ncols()),
            format!("{}x{}", xp.nrows(), xp.ncols()),
        ));
    }
    if x.is_empty() {
        return Err(Error::EmptyMatrix {
            rows: x.nrows(),
            cols: x.ncols(),
        });
    }
    Ok(())
}

/// Full-space operator `K = argmin ||X' - A X||_F` (minimum-norm solution).
pub fn fit_full(x: &Matrix, xp: &Matrix) -> Result<FullFit> {
    check_pair(x, xp)?;
    if x.nrows() > FULL_FIT_MAX_DIM {
        return Err(Error::FullFitTooLarge {
            n: x.nrows(),
            limit: FULL_FIT_MAX_DIM,
        });
    }
    let operator = numerics::lstsq_operator(xp, x, PINV_REL_TOL)?;
    let fit_residual = relative_residual(xp, &operator, x);
    Ok(FullFit {
        operator,
        fit_residual,
    })
}

/// How the reduced dimension is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSelection {
    Fixed(usize),
    /// Smallest rank whose singular values capture this fraction of `sum sigma^2`.
    Energy(f64),
}

impl Default for RankSelection {
    fn default() -> Self {
        RankSelection::Energy(0.9999)
    }
}

/// Reduced surrogate `z_{t+1} ≈ K̂ z_t` with `z = U_rᵀ x`.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub basis: Matrix,
    pub operator: Matrix,
    pub reduced_snapshots: Matrix,
    pub reduced_targets: Matrix,
    pub singular_values: Vector,
    pub fit_residual: f64,
    pub spectral_radius: f64,
    pub requested_rank: usize,
}

/// Fits the reduced surrogate from snapshot matrices `X`, `X'`.
pub fn reduce(x: &Matrix, xp: &Matrix, rank: RankSelection) -> Result<ReducedModel> {
    check_pair(x, xp)?;
    let max_rank = x.nrows().min(x.ncols());
    let requested = match rank {
        RankSelection::Fixed(0) => {
            return Err(Error::InvalidArgument("rank must be at least 1".into()))
        }
        RankSelection::Fixed(r) => r,
        RankSelection::Energy(frac) => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "energy fraction must lie in (0, 1], got {frac}"
                )));
            }
            let full = numerics::truncated_svd(x, max_rank, RANK_REL_TOL)?;
            energy_rank(&full.singular_values, frac)
        }
    };
    if requested > max_rank {
        log::warn!(
            "requested rank {requested} exceeds snapshot matrix rank bound {max_rank}; \
             falling back to {max_rank}"
        );
    }
    let svd = numerics::truncated_svd(x, requested.min(max_rank), RANK_REL_TOL)?;
    if svd.effective_rank() < requested {
        log::warn!(
            "requested rank {requested} exceeds numerical rank {} of the snapshots",
            svd.effective_rank()
        );
    }

    let basis = svd.basis;
    let z = basis.transpose() * x;
    let zp = basis.transpose() * xp;
    ReducedModel::fit_in_basis(basis, z, zp, svd.singular_values, requested)
}

fn energy_rank(singular_values: &Vector, frac: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= frac * total {
            return i + 1;
        }
    }
    singular_values.len()
}

impl ReducedModel {
    fn fit_in_basis(
        basis: Matrix,
        z: Matrix,
        zp: Matrix,
        singular_values: Vector,
        requested_rank: usize,
    ) -> Result<Self> {
        let operator = numerics::lstsq_operator(&zp, &z, PINV_REL_TOL)?;
        let fit_residual = relative_residual(&zp, &operator, &z);
        let spectral_radius = numerics::spectral_radius(&operator)?;
        Ok(Self {
            basis,
            operator,
            reduced_snapshots: z,
            reduced_targets: zp,
            singular_values,
            fit_residual,
            spectral_radius,
            requested_rank,
        })
    }

    /// Builds a model from a known basis and operator, with no snapshot data.
    pub fn from_parts(basis: Matrix, operator: Matrix) -> Result<Self> {
        let r = basis.ncols();
        if operator.shape() != (r, r) {
            return Err(Error::shape(
                "reduced operator",
                format!("{r}x{r}"),
                format!("{}x{}", operator.nrows(), operator.ncols()),
            ));
        }
        numerics::ensure_finite(&basis, "basis")?;
        numerics::ensure_finite(&operator, "operator")?;
        let gram = basis.transpose() * &basis;
        let dev = (gram - Matrix::identity(r, r)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (deviation {dev:.3e})"
            )));
        }
        let spectral_radius = numerics::spectral_radius(&operator)?;
        Ok(Self {
            basis,
            operator,
            reduced_snapshots: Matrix::zeros(r, 0),
            reduced_targets: Matrix::zeros(r, 0),
            singular_values: Vector::zeros(0),
            fit_residual: 0.0,
            spectral_radius,
            requested_rank: r,
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Reduced coordinates `U_rᵀ x`.
    pub fn project(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.dim() {
            return Err(Error::shape("project", self.dim(), x.len()));
        }
        Ok(self.basis.tr_mul(x))
    }

    /// Reduced coordinates of every column of `states`.
    pub fn project_all(&self, states: &Matrix) -> Result<Matrix> {
        if states.nrows() != self.dim() {
            return Err(Error::shape("project_all", self.dim(), states.nrows()));
        }
        Ok(self.basis.tr_mul(states))
    }

    /// Full-space reconstruction `U_r z`.
    pub fn lift(&self, z: &Vector) -> Result<Vector> {
        if z.len() != self.rank() {
            return Err(Error::shape("lift", self.rank(), z.len()));
        }
        Ok(&self.basis * z)
    }

    /// Uncontrolled rollout `z_1 .. z_steps`.
    pub fn rollout(&self, z1: &Vector, steps: usize) -> Result<Vec<Vector>> {
        if z1.len() != self.rank() {
            return Err(Error::shape("rollout", self.rank(), z1.len()));
        }
        let mut out = Vec::with_capacity(steps);
        if steps == 0 {
            return Ok(out);
        }
        out.push(z1.clone());
        for t in 1..steps {
            let next = &self.operator * &out[t - 1];
            out.push(next);
        }
        Ok(out)
    }

    /// One-step prediction error `||U_rᵀx_next - K̂ U_rᵀx_prev||` on a held-out pair.
    pub fn one_step_error(&self, prev: &Vector, next: &Vector) -> Result<f64> {
        let zp = self.project(prev)?;
        let zn = self.project(next)?;
        Ok((zn - &self.operator * zp).norm())
    }

    /// Content hash of the basis and operator, used to key caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.basis.shape().hash(&mut h);
        for v in self.basis.iter().chain(self.operator.iter()) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = KoopHeader {
            n: self.dim(),
            r: self.rank(),
            fit_residual: self.fit_residual,
            spectral_radius: self.spectral_radius,
            requested_rank: self.requested_rank,
            snapshot_cols: self.reduced_snapshots.ncols(),
            singular_values: self.singular_values.iter().copied().collect(),
        };
        let mut payload = Vec::with_capacity(
            self.basis.len()
                + self.operator.len()
                + self.reduced_snapshots.len()
                + self.reduced_targets.len(),
        );
        payload.extend_from_slice(self.basis.as_slice());
        payload.extend_from_slice(self.operator.as_slice());
        payload.extend_from_slice(self.reduced_snapshots.as_slice());
        payload.extend_from_slice(self.reduced_targets.as_slice());
        container::write(path.as_ref(), KOOP_MAGIC, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = container::read(path.as_ref())?;
        let (h, payload): (KoopHeader, _) = container::decode(KOOP_MAGIC, &bytes)?;
        let (n, r, c) = (h.n, h.r, h.snapshot_cols);
        let values = container::floats(payload, n * r + r * r + 2 * r * c)?;
        let (basis, rest) = values.split_at(n * r);
        let (operator, rest) = rest.split_at(r * r);
        let (z, zp) = rest.split_at(r * c);
        Ok(Self {
            basis: Matrix::from_column_slice(n, r, basis),
            operator: Matrix::from_column_slice(r, r, operator),
            reduced_snapshots: Matrix::from_column_slice(r, c, z),
            reduced_targets: Matrix::from_column_slice(r, c, zp),
            singular_values: Vector::from_vec(h.singular_values),
            fit_residual: h.fit_residual,
            spectral_radius: h.spectral_radius,
            requested_rank: h.requested_rank,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KoopHeader {
    n: usize,
    r: usize,
    fit_residual: f64,
    spectral_radius: f64,
    requested_rank: usize,
    snapshot_cols: usize,
    singular_values: Vec<f64>,
}
