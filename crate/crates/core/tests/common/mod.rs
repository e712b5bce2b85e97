//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the solver internals: rollouts are simulated one
//! step at a time, the QP is solved by nullspace elimination, and spectra come
//! from characteristic polynomials.

#![allow(dead_code)]

use koopcycle::control_basis::FourierBasis;
use koopcycle::koopman::ReducedModel;
use koopcycle::numerics::{Matrix, Vector};
use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-amp..amp))
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize, amp: f64) -> Vector {
    Vector::from_fn(len, |_, _| rng.gen_range(-amp..amp))
}

/// Random matrix with orthonormal columns from a QR of a Gaussian-ish draw.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let g = random_matrix(rng, rows, cols, 1.0);
    g.qr().q().columns(0, cols).into_owned()
}

/// Surrogate with identity-like basis columns and a random operator of bounded norm.
pub fn random_model(rng: &mut ChaCha8Rng, n: usize, r: usize, amp: f64) -> ReducedModel {
    let basis = random_orthonormal(rng, n, r);
    let op = random_matrix(rng, r, r, amp);
    ReducedModel::from_parts(basis, op).unwrap()
}

/// Block-diagonal operator of 2x2 rotations scaled by `radii`, plus a trailing
/// real eigenvalue when `r` is odd, conjugated by a random orthogonal matrix.
pub fn stable_operator(rng: &mut ChaCha8Rng, r: usize, radii: (f64, f64)) -> Matrix {
    let mut d = Matrix::zeros(r, r);
    let mut i = 0;
    while i + 1 < r {
        let rho = rng.gen_range(radii.0..radii.1);
        let th: f64 = rng.gen_range(0.2..1.2);
        d[(i, i)] = rho * th.cos();
        d[(i, i + 1)] = -rho * th.sin();
        d[(i + 1, i)] = rho * th.sin();
        d[(i + 1, i + 1)] = rho * th.cos();
        i += 2;
    }
    if r % 2 == 1 {
        d[(r - 1, r - 1)] = rng.gen_range(radii.0..radii.1);
    }
    let q = random_orthonormal(rng, r, r);
    &q * d * q.transpose()
}

/// `z_{t+1} = K z_t + G h(t)` stepped by hand; returns `z_1 .. z_{T+1}` as columns.
pub fn simulate(operator: &Matrix, gamma: &Matrix, basis: &FourierBasis, z1: &Vector) -> Matrix {
    let period = basis.period;
    let mut out = Matrix::zeros(z1.len(), period + 1);
    let mut z = z1.clone();
    out.set_column(0, &z);
    for t in 1..=period {
        let s = fourier_row(basis, t);
        let mut force = Vector::zeros(z.len());
        for (i, si) in s.iter().enumerate() {
            force += gamma.column(i) * *si;
        }
        z = operator * &z + force;
        out.set_column(t, &z);
    }
    out
}

/// Fourier features written out from their definition.
pub fn fourier_row(basis: &FourierBasis, t: usize) -> Vec<f64> {
    let period = basis.period as f64;
    let mut s = Vec::with_capacity(basis.m());
    for h in 1..=basis.harmonics {
        let w = 2.0 * std::f64::consts::PI * h as f64 * (t % basis.period) as f64 / period;
        s.push(w.sin());
        s.push(w.cos());
    }
    if basis.include_constant {
        s.push(1.0);
    }
    s
}

/// Dense affine maps of the cyclic QP built column by column from simulation.
pub struct DenseProblem {
    /// `q -> [z_1; ..; z_T]`
    pub fidelity: Matrix,
    /// `q -> z_{T+1} - z_1`
    pub closure: Matrix,
    /// `q -> [Γ s_1; ..; Γ s_T]`
    pub control: Matrix,
    pub r: usize,
    pub m: usize,
}

pub fn dense_problem(model: &ReducedModel, basis: &FourierBasis) -> DenseProblem {
    let r = model.rank();
    let m = basis.m();
    let period = basis.period;
    let nq = r + r * m;
    let mut fidelity = Matrix::zeros(r * period, nq);
    let mut closure = Matrix::zeros(r, nq);
    let mut control = Matrix::zeros(r * period, nq);
    for j in 0..nq {
        let mut z1 = Vector::zeros(r);
        let mut gamma = Matrix::zeros(r, m);
        if j < r {
            z1[j] = 1.0;
        } else {
            let idx = j - r;
            gamma[(idx % r, idx / r)] = 1.0;
        }
        let traj = simulate(&model.operator, &gamma, basis, &z1);
        for t in 0..period {
            fidelity.view_mut((t * r, j), (r, 1)).copy_from(&traj.column(t));
            let s = Vector::from_vec(fourier_row(basis, t + 1));
            control
                .view_mut((t * r, j), (r, 1))
                .copy_from(&(&gamma * s));
        }
        closure.set_column(j, &(traj.column(period) - traj.column(0)));
    }
    DenseProblem {
        fidelity,
        closure,
        control,
        r,
        m,
    }
}

/// Orthonormal basis of `ker(c)` from the right singular vectors.
pub fn nullspace(c: &Matrix, rel_tol: f64) -> Matrix {
    let n = c.ncols();
    let padded = if c.nrows() < n {
        let mut p = Matrix::zeros(n, n);
        p.view_mut((0, 0), c.shape()).copy_from(c);
        p
    } else {
        c.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let cols: Vec<Vector> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= rel_tol * smax.max(1.0))
        .map(|i| vt.row(i).transpose())
        .collect();
    if cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&cols)
    }
}

pub struct OracleSolution {
    pub q: Vector,
    pub objective: f64,
    /// Condition number of the Hessian restricted to the feasible subspace.
    pub reduced_condition: f64,
}

/// Minimizes `w_red ||F q - y||² + w_u ||G q||²` over `ker(C)` by nullspace
/// elimination and a Cholesky solve.
pub fn nullspace_qp(
    problem: &DenseProblem,
    y: &Vector,
    w_red: f64,
    w_u: f64,
    weighted_energy: bool,
) -> OracleSolution {
    let f = &problem.fidelity;
    let energy = if weighted_energy {
        problem.control.tr_mul(&problem.control)
    } else {
        let nq = f.ncols();
        let mut e = Matrix::zeros(nq, nq);
        for i in problem.r..nq {
            e[(i, i)] = 1.0;
        }
        e
    };
    let n = nullspace(&problem.closure, 1e-11);
    let hess = f.tr_mul(f) * w_red + energy.clone() * w_u;
    let reduced = n.tr_mul(&(&hess * &n));
    let grad = n.tr_mul(&(f.tr_mul(y) * w_red));
    let chol = reduced.clone().cholesky().expect("reduced Hessian must be positive definite");
    let coords = chol.solve(&grad);
    let q = &n * coords;
    let eig = reduced.symmetric_eigenvalues();
    let reduced_condition = eig.max() / eig.min();
    let objective = oracle_objective(problem, &energy, y, w_red, w_u, &q);
    OracleSolution {
        q,
        objective,
        reduced_condition,
    }
}

pub fn oracle_objective(
    problem: &DenseProblem,
    energy: &Matrix,
    y: &Vector,
    w_red: f64,
    w_u: f64,
    q: &Vector,
) -> f64 {
    w_red * (&problem.fidelity * q - y).norm_squared() + w_u * q.dot(&(energy * q))
}

/// Characteristic polynomial coefficients `c_0 .. c_n` (monic, `c_n = 1`) by Faddeev-LeVerrier.
pub fn char_poly(a: &Matrix) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = Matrix::zeros(n, n);
    for k in 1..=n {
        let mut next = a * &m;
        for i in 0..n {
            next[(i, i)] += coeffs[n - k + 1];
        }
        m = next;
        coeffs[n - k] = -(a * &m).trace() / k as f64;
    }
    coeffs
}

/// Polynomial roots by Durand-Kerner iteration.
pub fn poly_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let n = coeffs.len() - 1;
    let eval = |z: Complex<f64>| {
        coeffs
            .iter()
            .rev()
            .fold(Complex::new(0.0, 0.0), |acc, &c| acc * z + Complex::new(c, 0.0))
    };
    let seed = Complex::new(0.4, 0.9);
    let mut roots: Vec<Complex<f64>> = (0..n).map(|i| seed.powi(i as i32)).collect();
    for _ in 0..2000 {
        let mut delta = 0.0f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    roots
}

pub fn spectral_radius_oracle(a: &Matrix) -> f64 {
    poly_roots(&char_poly(a))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}
