//! Dense linear-algebra kernels shared by the fitting and solver modules.
//!
//! Everything here is a pure function on borrowed inputs. Matrices are
//! `nalgebra::DMatrix<f64>`; vectors are `DVector<f64>`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used by the least-squares fits.
pub const PINV_REL_TOL: f64 = 1e-12;

/// Constraint rows with a Euclidean norm below this are dropped before a KKT solve.
pub const ZERO_ROW_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;
const KKT_REL_RESIDUAL: f64 = 1e-8;

/// Leading singular triplets of a matrix.
#[derive(Debug, Clone)]
pub struct SvdTruncation {
    /// Left singular vectors, `rows x effective_rank`, orthonormal columns.
    pub basis: Matrix,
    /// Descending, strictly positive.
    pub singular_values: Vector,
    /// Right singular vectors, `cols x effective_rank`.
    pub right_vectors: Matrix,
    pub requested_rank: usize,
}

impl SvdTruncation {
    pub fn effective_rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let scaled = &self.basis * Matrix::from_diagonal(&self.singular_values);
        scaled * self.right_vectors.transpose()
    }
}

pub(crate) fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn ensure_finite_vec(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Full thin SVD with singular values sorted in descending order.
fn sorted_svd(m: &Matrix) -> (Matrix, Vector, Matrix) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let u = Matrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v = Matrix::from_fn(v_t.ncols(), order.len(), |i, j| v_t[(order[j], i)]);
    let s = Vector::from_iterator(order.len(), order.iter().map(|&k| s[k]));
    (u, s, v)
}

/// Rank-`rank` truncated SVD. Trailing singular values below `rel_tol * sigma_max`
/// are dropped, so the returned rank may be lower than requested.
pub fn truncated_svd(m: &Matrix, rank: usize, rel_tol: f64) -> Result<SvdTruncation> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    ensure_finite(m, "svd input")?;
    let max_rank = m.nrows().min(m.ncols());
    if rank == 0 || rank > max_rank {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={max_rank}"
        )));
    }

    let (u, s, v) = sorted_svd(m);
    let sigma_max = s[0];
    if sigma_max == 0.0 {
        return Err(Error::DegenerateRank("matrix is identically zero".into()));
    }
    let keep = s
        .iter()
        .take(rank)
        .take_while(|&&sv| sv > rel_tol * sigma_max)
        .count();

    Ok(SvdTruncation {
        basis: u.columns(0, keep).into_owned(),
        singular_values: s.rows(0, keep).into_owned(),
        right_vectors: v.columns(0, keep).into_owned(),
        requested_rank: rank,
    })
}

/// Moore-Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pseudoinverse(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    ensure_finite(m, "pseudoinverse input")?;
    if m.is_empty() {
        return Ok(Matrix::zeros(m.ncols(), m.nrows()));
    }
    let (u, s, v) = sorted_svd(m);
    let cutoff = rel_tol * s.get(0).copied().unwrap_or(0.0);
    let mut v_scaled = v;
    for (j, &sv) in s.iter().enumerate() {
        let inv = if sv > cutoff && sv > 0.0 { 1.0 / sv } else { 0.0 };
        v_scaled.column_mut(j).scale_mut(inv);
    }
    Ok(v_scaled * u.transpose())
}

/// Minimum-Frobenius-norm `A` minimizing `||targets - A * inputs||_F`.
pub fn lstsq_operator(targets: &Matrix, inputs: &Matrix, rel_tol: f64) -> Result<Matrix> {
    if targets.ncols() != inputs.ncols() {
        return Err(Error::shape(
            "lstsq_operator columns",
            inputs.ncols(),
            targets.ncols(),
        ));
    }
    if targets.nrows() == 0 || inputs.nrows() == 0 {
        return Err(Error::EmptyMatrix {
            rows: targets.nrows().min(inputs.nrows()),
            cols: inputs.ncols(),
        });
    }
    ensure_finite(targets, "lstsq targets")?;
    ensure_finite(inputs, "lstsq inputs")?;
    Ok(targets * pseudoinverse(inputs, rel_tol)?)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(a.nrows() * br, a.ncols() * bc);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc))
                    .copy_from(&(b * aij));
            }
        }
    }
    out
}

/// Column-major vectorization, `vec(G)`.
pub fn vec_col_major(m: &Matrix) -> Vector {
    // nalgebra storage is already column-major
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec_col_major(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::shape("unvec", rows * cols, v.len()));
    }
    Ok(Matrix::from_column_slice(rows, cols, v))
}

/// Solution of an equality-constrained QP saddle-point system
///
/// ```text
/// [ H  Cᵀ ] [ primal ]   [ rhs_primal ]
/// [ C  0  ] [ dual   ] = [ rhs_dual   ]
/// ```
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub primal: Vector,
    /// One multiplier per input constraint row; dropped rows carry zero.
    pub dual: Vector,
    /// `||K x - rhs|| / (1 + ||rhs||)` on the retained system.
    pub relative_residual: f64,
    pub dropped_rows: Vec<usize>,
    /// max/min pivot magnitude of the equilibrated factorization.
    pub condition_estimate: f64,
}

/// Solves the KKT system with a fully pivoted LU of the symmetrically
/// equilibrated saddle matrix, followed by iterative refinement.
pub fn solve_kkt(
    hessian: &Matrix,
    constraints: &Matrix,
    rhs_primal: &Vector,
    rhs_dual: &Vector,
) -> Result<KktSolution> {
    let n = hessian.nrows();
    if hessian.ncols() != n {
        return Err(Error::shape(
            "solve_kkt hessian",
            format!("{n}x{n}"),
            format!("{}x{}", n, hessian.ncols()),
        ));
    }
    if constraints.nrows() > 0 && constraints.ncols() != n {
        return Err(Error::shape("solve_kkt constraints", n, constraints.ncols()));
    }
    if rhs_primal.len() != n {
        return Err(Error::shape("solve_kkt rhs_primal", n, rhs_primal.len()));
    }
    if rhs_dual.len() != constraints.nrows() {
        return Err(Error::shape(
            "solve_kkt rhs_dual",
            constraints.nrows(),
            rhs_dual.len(),
        ));
    }
    ensure_finite(hessian, "kkt hessian")?;
    ensure_finite(constraints, "kkt constraints")?;
    ensure_finite_vec(rhs_primal, "kkt rhs")?;
    ensure_finite_vec(rhs_dual, "kkt rhs")?;

    let h_norm = hessian.norm();
    let asymmetry = (hessian - hessian.transpose()).norm();
    if asymmetry > SYMMETRY_TOL * h_norm {
        return Err(Error::AsymmetricHessian {
            asymmetry,
            norm: h_norm,
        });
    }

    let mut kept = Vec::with_capacity(constraints.nrows());
    let mut dropped = Vec::new();
    for i in 0..constraints.nrows() {
        if constraints.row(i).norm() < ZERO_ROW_TOL {
            if rhs_dual[i].abs() > ZERO_ROW_TOL {
                return Err(Error::InconsistentConstraint {
                    row: i,
                    rhs: rhs_dual[i],
                });
            }
            dropped.push(i);
        } else {
            kept.push(i);
        }
    }
    let p = kept.len();
    let size = n + p;

    let mut kkt = Matrix::zeros(size, size);
    kkt.view_mut((0, 0), (n, n)).copy_from(hessian);
    for (k, &row) in kept.iter().enumerate() {
        for j in 0..n {
            let c = constraints[(row, j)];
            kkt[(n + k, j)] = c;
            kkt[(j, n + k)] = c;
        }
    }
    let mut rhs = Vector::zeros(size);
    rhs.rows_mut(0, n).copy_from(rhs_primal);
    for (k, &row) in kept.iter().enumerate() {
        rhs[n + k] = rhs_dual[row];
    }

    // symmetric diagonal equilibration: D K D with D_i = 1/sqrt(max_j |K_ij|)
    let scale = Vector::from_iterator(
        size,
        (0..size).map(|i| {
            let m = kkt.row(i).amax();
            if m > 0.0 {
                1.0 / m.sqrt()
            } else {
                1.0
            }
        }),
    );
    let scaled = Matrix::from_fn(size, size, |i, j| scale[i] * kkt[(i, j)] * scale[j]);
    let lu = scaled.full_piv_lu();

    let pivots = lu.u().diagonal().abs();
    let (pmax, pmin) = pivots
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)));
    let pivot_ratio = if size == 0 { 1.0 } else { pmin / pmax };
    if size > 0 && !(pivot_ratio > size as f64 * f64::EPSILON) {
        return Err(Error::SingularKkt {
            size,
            pivot_ratio,
            condition_estimate: 1.0 / pivot_ratio,
        });
    }

    let solve_scaled = |r: &Vector| -> Option<Vector> {
        let rs = r.component_mul(&scale);
        lu.solve(&rs).map(|y| y.component_mul(&scale))
    };

    let rhs_norm = rhs.norm();
    let mut x = solve_scaled(&rhs).ok_or(Error::SingularKkt {
        size,
        pivot_ratio,
        condition_estimate: 1.0 / pivot_ratio,
    })?;
    let mut residual = &rhs - &kkt * &x;
    let mut res_norm = residual.norm();
    for _ in 0..3 {
        if res_norm <= f64::EPSILON * (1.0 + rhs_norm) {
            break;
        }
        let Some(dx) = solve_scaled(&residual) else { break };
        let candidate = &x + dx;
        let cand_res = &rhs - &kkt * &candidate;
        let cand_norm = cand_res.norm();
        if cand_norm >= res_norm {
            break;
        }
        x = candidate;
        residual = cand_res;
        res_norm = cand_norm;
    }

    let relative_residual = res_norm / (1.0 + rhs_norm);
    if relative_residual > KKT_REL_RESIDUAL {
        return Err(Error::InaccurateSolve {
            residual: relative_residual,
            tolerance: KKT_REL_RESIDUAL,
        });
    }

    let mut dual = Vector::zeros(constraints.nrows());
    for (k, &row) in kept.iter().enumerate() {
        dual[row] = x[n + k];
    }
    Ok(KktSolution {
        primal: x.rows(0, n).into_owned(),
        dual,
        relative_residual,
        dropped_rows: dropped,
        condition_estimate: 1.0 / pivot_ratio,
    })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape(
            "spectral_radius",
            "square",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    ensure_finite(m, "spectral_radius input")?;
    let eig = m.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}
