//! Cyclic trajectory synthesis as an equality-constrained QP.
//!
//! Unknowns are stacked as `q = [z̃_1; vec(Γ)]` with `vec` column-major, so that
//! `(s_tᵀ ⊗ I_r) vec(Γ) = Γ s_t`. Rollout matrices `R_t` give `z̃_t = R_t q`,
//! the closure constraint is `(R_{T+1} - R_1) q = 0`, and the objective is
//!
//! ```text
//! w_red ||A q - y||² + w_u vec(Γ)ᵀ (W ⊗ I_r) vec(Γ)
//! ```
//!
//! with `W = M = Σ s_t s_tᵀ` (control energy) or `W = I` (coefficient norm).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::control_basis::FourierBasis;
use crate::error::{Error, Result};
use crate::koopman::{self, RankSelection, ReducedModel};
use crate::numerics::{self, Matrix, Vector};
use crate::trajectory::{self, BlockScales, FieldLayout, Trajectory};

pub const CYC_MAGIC: &str = "CYCLSOLN1";

/// Maximum tolerated gap between `A q` and the re-rolled recursion, relative to state scale.
pub const ROLLOUT_CONSISTENCY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverWeights {
    pub w_red: f64,
    pub w_u: f64,
}

impl Default for SolverWeights {
    fn default() -> Self {
        Self { w_red: 1e-2, w_u: 3.0 }
    }
}

impl SolverWeights {
    pub fn new(w_red: f64, w_u: f64) -> Result<Self> {
        let w = Self { w_red, w_u };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_red > 0.0 && self.w_red.is_finite() && self.w_u > 0.0 && self.w_u.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be positive and finite, got w_red={} w_u={}",
                self.w_red, self.w_u
            )));
        }
        Ok(())
    }
}

/// Weighting of the control regularizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlEnergy {
    /// `Σ_t ||Γ s_t||²`, i.e. `W = M`.
    #[default]
    Gram,
    /// `||Γ||_F²`, i.e. `W = I_m`.
    Identity,
}

/// Rollout matrices for a fixed surrogate and Fourier basis.
#[derive(Debug, Clone)]
pub struct RolloutSystem {
    /// `R_1 .. R_{T+1}`, each `r x (r + r m)`.
    pub blocks: Vec<Matrix>,
    /// `A = [R_1; ..; R_T]`, `rT x (r + r m)`.
    pub stacked: Matrix,
    /// `C = R_{T+1} - R_1`.
    pub closure: Matrix,
    pub gram: Matrix,
    pub basis: FourierBasis,
    pub r: usize,
}

impl RolloutSystem {
    pub fn period(&self) -> usize {
        self.basis.period
    }

    pub fn unknowns(&self) -> usize {
        self.r + self.r * self.basis.m()
    }

    pub fn pack(&self, z1: &Vector, gamma: &Matrix) -> Vector {
        let mut q = Vector::zeros(self.unknowns());
        q.rows_mut(0, self.r).copy_from(z1);
        q.rows_mut(self.r, self.r * self.basis.m())
            .copy_from(&numerics::vec_col_major(gamma));
        q
    }

    pub fn unpack(&self, q: &Vector) -> (Vector, Matrix) {
        let r = self.r;
        let z1 = q.rows(0, r).into_owned();
        let gamma = Matrix::from_column_slice(r, self.basis.m(), &q.as_slice()[r..]);
        (z1, gamma)
    }
}

/// Builds `R_1 = [I | 0]`, `R_{t+1} = K̂ R_t + (s_tᵀ ⊗ I_r) E_Γ` for `t = 1..T`.
pub fn build_rollout(model: &ReducedModel, basis: &FourierBasis, period: usize) -> Result<RolloutSystem> {
    if period < 2 {
        return Err(Error::InvalidArgument(format!("period must be >= 2, got {period}")));
    }
    if basis.period != period {
        return Err(Error::shape("rollout period", period, basis.period));
    }
    let r = model.rank();
    let m = basis.m();
    let nq = r + r * m;

    let mut blocks = Vec::with_capacity(period + 1);
    let mut current = Matrix::zeros(r, nq);
    current.view_mut((0, 0), (r, r)).fill_with_identity();
    blocks.push(current.clone());
    for t in 1..=period {
        let s = basis.eval(t);
        let mut next = &model.operator * &current;
        for j in 0..m {
            for i in 0..r {
                next[(i, r + j * r + i)] += s[j];
            }
        }
        blocks.push(next.clone());
        current = next;
    }

    let mut stacked = Matrix::zeros(r * period, nq);
    for (t, b) in blocks.iter().take(period).enumerate() {
        stacked.view_mut((t * r, 0), (r, nq)).copy_from(b);
    }
    let closure = &blocks[period] - &blocks[0];
    Ok(RolloutSystem {
        blocks,
        stacked,
        closure,
        gram: basis.gram(),
        basis: *basis,
        r,
    })
}

/// `½ qᵀ H q - rhsᵀ q + constant` subject to `constraint · q = 0`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: Matrix,
    pub rhs: Vector,
    pub constraint: Matrix,
    /// `w_red ||y||²`, making `objective` equal the weighted cost exactly.
    pub constant: f64,
}

impl QpProblem {
    pub fn objective(&self, q: &Vector) -> f64 {
        0.5 * q.dot(&(&self.hessian * q)) - self.rhs.dot(q) + self.constant
    }

    pub fn gradient(&self, q: &Vector) -> Vector {
        &self.hessian * q - &self.rhs
    }
}

/// Adds `scale · (W ⊗ I_r)` into the `Γ` block of `hessian`.
pub(crate) fn add_kron_identity(hessian: &mut Matrix, offset: usize, w: &Matrix, r: usize, scale: f64) {
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let v = scale * w[(i, j)];
            if v != 0.0 {
                for a in 0..r {
                    hessian[(offset + i * r + a, offset + j * r + a)] += v;
                }
            }
        }
    }
}

pub(crate) fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Assembles `H = 2(w_red AᵀA + w_u E_Γᵀ(W ⊗ I_r)E_Γ)`, `rhs = 2 w_red Aᵀy`, constraint `C`.
/// `observed` holds `z_1 .. z_T` as columns.
pub fn assemble_qp(
    sys: &RolloutSystem,
    observed: &Matrix,
    weights: &SolverWeights,
    energy: ControlEnergy,
) -> Result<QpProblem> {
    weights.validate()?;
    let (r, period) = (sys.r, sys.period());
    if observed.shape() != (r, period) {
        return Err(Error::shape(
            "observed reduced frames",
            format!("{r}x{period}"),
            format!("{}x{}", observed.nrows(), observed.ncols()),
        ));
    }
    let y = Vector::from_column_slice(observed.as_slice());
    let mut hessian = sys.stacked.tr_mul(&sys.stacked) * (2.0 * weights.w_red);
    let w = match energy {
        ControlEnergy::Gram => sys.gram.clone(),
        ControlEnergy::Identity => Matrix::identity(sys.basis.m(), sys.basis.m()),
    };
    add_kron_identity(&mut hessian, r, &w, r, 2.0 * weights.w_u);
    symmetrize(&mut hessian);
    let rhs = sys.stacked.tr_mul(&y) * (2.0 * weights.w_red);
    Ok(QpProblem {
        hessian,
        rhs,
        constraint: sys.closure.clone(),
        constant: weights.w_red * y.norm_squared(),
    })
}

/// Controlled recursion `z̃_{t+1} = K̂ z̃_t + Γ s_t`, returning `z̃_1 .. z̃_{T+1}` as columns.
pub fn controlled_rollout(
    operator: &Matrix,
    control_basis: &Matrix,
    basis: &FourierBasis,
    z1: &Vector,
    coeffs: &Matrix,
) -> Matrix {
    let r = z1.len();
    let period = basis.period;
    let mut out = Matrix::zeros(r, period + 1);
    out.set_column(0, z1);
    for t in 1..=period {
        let force = control_basis * (coeffs * basis.eval(t));
        let next = operator * out.column(t - 1) + force;
        out.set_column(t, &next);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveMetrics {
    /// `||z̃_{T+1} - z̃_1||` from the re-rolled recursion.
    pub closure_residual: f64,
    /// `Σ_{t=1}^{T} ||z̃_t - z_t||²`
    pub fidelity_cost: f64,
    /// `Σ_{t=1}^{T} ||Γ s_t||²`
    pub control_cost: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub kkt_condition_estimate: f64,
    /// `max_t ||R_t q - z̃_t||_∞` between the stacked map and the recursion.
    pub rollout_discrepancy: f64,
    pub processing_seconds: f64,
    pub solve_seconds: f64,
}

/// Solution of the reduced cyclic problem.
#[derive(Debug, Clone)]
pub struct ReducedSolution {
    pub z1_opt: Vector,
    pub gamma: Matrix,
    pub dual: Vector,
    pub q: Vector,
    /// `z̃_1 .. z̃_{T+1}` as columns.
    pub reduced_cycle: Matrix,
    pub basis: FourierBasis,
    pub weights: SolverWeights,
    pub energy: ControlEnergy,
    pub metrics: SolveMetrics,
}

impl ReducedSolution {
    /// Largest column norm of the reduced cycle, the scale used for relative tolerances.
    pub fn state_scale(&self) -> f64 {
        self.reduced_cycle
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

fn control_cost(gamma: &Matrix, basis: &FourierBasis) -> f64 {
    (1..=basis.period)
        .map(|t| (gamma * basis.eval(t)).norm_squared())
        .sum()
}

/// Solves the reduced cyclic QP for a given surrogate and observed reduced frames `z_1..z_T`.
pub fn solve_reduced(
    model: &ReducedModel,
    observed: &Matrix,
    basis: &FourierBasis,
    weights: &SolverWeights,
    energy: ControlEnergy,
) -> Result<ReducedSolution> {
    let start = Instant::now();
    let period = basis.period;
    let sys = build_rollout(model, basis, period)?;
    let qp = assemble_qp(&sys, observed, weights, energy)?;
    let processing_seconds = start.elapsed().as_secs_f64();
    let mut sol = solve_assembled(model, &sys, &qp, observed, weights, energy)?;
    sol.metrics.processing_seconds = processing_seconds;
    Ok(sol)
}

pub(crate) fn solve_assembled(
    model: &ReducedModel,
    sys: &RolloutSystem,
    qp: &QpProblem,
    observed: &Matrix,
    weights: &SolverWeights,
    energy: ControlEnergy,
) -> Result<ReducedSolution> {
    let start = Instant::now();
    let r = sys.r;
    let kkt = numerics::solve_kkt(
        &qp.hessian,
        &qp.constraint,
        &qp.rhs,
        &Vector::zeros(qp.constraint.nrows()),
    )?;
    let q = kkt.primal;
    let (z1, gamma) = sys.unpack(&q);
    let reduced_cycle = controlled_rollout(
        &model.operator,
        &Matrix::identity(r, r),
        &sys.basis,
        &z1,
        &gamma,
    );
    let solve_seconds = start.elapsed().as_secs_f64();

    let period = sys.period();
    let mut discrepancy = 0.0f64;
    for (t, block) in sys.blocks.iter().enumerate() {
        let d = (block * &q - reduced_cycle.column(t)).amax();
        discrepancy = discrepancy.max(d);
    }
    let closure_residual = (reduced_cycle.column(period) - reduced_cycle.column(0)).norm();
    let fidelity_cost = (reduced_cycle.columns(0, period) - observed).norm_squared();
    let ctrl = control_cost(&gamma, &sys.basis);

    let sol = ReducedSolution {
        z1_opt: z1,
        gamma,
        dual: kkt.dual,
        q: q.clone(),
        reduced_cycle,
        basis: sys.basis,
        weights: *weights,
        energy,
        metrics: SolveMetrics {
            closure_residual,
            fidelity_cost,
            control_cost: ctrl,
            objective: qp.objective(&q),
            kkt_residual: kkt.relative_residual,
            kkt_condition_estimate: kkt.condition_estimate,
            rollout_discrepancy: discrepancy,
            processing_seconds: 0.0,
            solve_seconds,
        },
    };
    let scale = 1.0 + sol.state_scale();
    if sol.metrics.rollout_discrepancy > ROLLOUT_CONSISTENCY_TOL * scale {
        log::warn!(
            "stacked rollout and recursion disagree by {:.3e} (state scale {scale:.3e})",
            sol.metrics.rollout_discrepancy
        );
    }
    Ok(sol)
}

/// Parameters of the end-to-end pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicConfig {
    pub rank: RankSelection,
    pub harmonics: usize,
    pub include_constant: bool,
    pub weights: SolverWeights,
    pub energy: ControlEnergy,
    #[serde(default)]
    pub scales: BlockScales,
}

impl CyclicConfig {
    pub fn new(rank: usize, harmonics: usize) -> Self {
        Self {
            rank: RankSelection::Fixed(rank),
            harmonics,
            include_constant: false,
            weights: SolverWeights::default(),
            energy: ControlEnergy::Gram,
            scales: BlockScales::default(),
        }
    }
}

/// Output of [`solve_cyclic`].
#[derive(Debug, Clone)]
pub struct CyclicSolution {
    pub model: ReducedModel,
    pub reduced: ReducedSolution,
    /// Observed reduced frames `z_1 .. z_T`.
    pub observed: Matrix,
    /// Lifted frames `U_r z̃_1 .. U_r z̃_{T+1}` in the input's units.
    pub full_cycle: Trajectory,
    /// Reduce + rollout build + assembly.
    pub processing_seconds: f64,
    /// KKT solve + re-rollout.
    pub optimization_seconds: f64,
}

impl CyclicSolution {
    pub fn metrics(&self) -> &SolveMetrics {
        &self.reduced.metrics
    }

    pub fn record(&self, include_frames: bool) -> LoopRecord {
        LoopRecord {
            r: self.model.rank(),
            n: self.full_cycle.dim(),
            basis: self.reduced.basis,
            weights: self.reduced.weights,
            energy: self.reduced.energy,
            metrics: self.reduced.metrics.clone(),
            z1: self.reduced.z1_opt.clone(),
            gamma: self.reduced.gamma.clone(),
            frames: include_frames.then(|| self.full_cycle.clone()),
        }
    }
}

/// Fits the reduced surrogate on the first `T` frames of `traj` (`T+1` frames in total)
/// and synthesizes the cyclic trajectory of period `T`.
pub fn solve_cyclic(traj: &Trajectory, config: &CyclicConfig) -> Result<CyclicSolution> {
    config.weights.validate()?;
    let total = Instant::now();
    let split = traj.split();
    let period = split.fit_frames;
    if 2 * config.harmonics >= period {
        return Err(Error::InvalidArgument(format!(
            "{} harmonics need more than {} fit frames",
            config.harmonics,
            2 * config.harmonics
        )));
    }
    let scaled;
    let work = if config.scales.is_identity() {
        traj
    } else {
        scaled = config.scales.apply(traj)?;
        &scaled
    };

    let (x, xp) = trajectory::snapshot_pair(work, period)?;
    let model = koopman::reduce(&x, &xp, config.rank)?;
    let observed = model.project_all(&work.states().columns(0, period).into_owned())?;
    let basis = FourierBasis::new(period, config.harmonics, config.include_constant)?;
    let sys = build_rollout(&model, &basis, period)?;
    let qp = assemble_qp(&sys, &observed, &config.weights, config.energy)?;
    let processing_seconds = total.elapsed().as_secs_f64();

    let mut reduced = solve_assembled(&model, &sys, &qp, &observed, &config.weights, config.energy)?;
    reduced.metrics.processing_seconds = processing_seconds;
    let optimization_seconds = reduced.metrics.solve_seconds;

    let lifted = &model.basis * &reduced.reduced_cycle;
    let mut full_cycle = Trajectory::new(lifted, traj.dt, traj.layout.clone())?;
    if !config.scales.is_identity() {
        full_cycle = config.scales.unapply(&full_cycle)?;
    }
    Ok(CyclicSolution {
        model,
        reduced,
        observed,
        full_cycle,
        processing_seconds,
        optimization_seconds,
    })
}

/// Serializable loop result: the `.cyc` file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub r: usize,
    pub n: usize,
    pub basis: FourierBasis,
    pub weights: SolverWeights,
    pub energy: ControlEnergy,
    pub metrics: SolveMetrics,
    pub z1: Vector,
    /// `Γ`, stored column-major (`vec(Γ)`) on disk.
    pub gamma: Matrix,
    pub frames: Option<Trajectory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CycHeader {
    r: usize,
    m: usize,
    #[serde(rename = "T")]
    period: usize,
    n: usize,
    harmonics: usize,
    include_constant: bool,
    weights: SolverWeights,
    energy: ControlEnergy,
    metrics: SolveMetrics,
    frames: bool,
    dt: Option<f64>,
    layout: Option<FieldLayout>,
}

impl LoopRecord {
    pub fn control_energy(&self) -> f64 {
        control_cost(&self.gamma, &self.basis)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = CycHeader {
            r: self.r,
            m: self.basis.m(),
            period: self.basis.period,
            n: self.n,
            harmonics: self.basis.harmonics,
            include_constant: self.basis.include_constant,
            weights: self.weights,
            energy: self.energy,
            metrics: self.metrics.clone(),
            frames: self.frames.is_some(),
            dt: self.frames.as_ref().map(|f| f.dt),
            layout: self.frames.as_ref().map(|f| f.layout.clone()),
        };
        let mut payload: Vec<f64> = self.z1.iter().copied().collect();
        payload.extend_from_slice(self.gamma.as_slice());
        if let Some(f) = &self.frames {
            payload.extend_from_slice(f.states().as_slice());
        }
        container::encode(CYC_MAGIC, &header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CycHeader, _) = container::decode(CYC_MAGIC, bytes)?;
        let basis = FourierBasis::new(h.period, h.harmonics, h.include_constant)?;
        if basis.m() != h.m {
            return Err(Error::MalformedHeader(format!(
                "m = {} inconsistent with {} harmonics",
                h.m, h.harmonics
            )));
        }
        let frame_values = if h.frames { h.n * (h.period + 1) } else { 0 };
        let values = container::floats(payload, h.r + h.r * h.m + frame_values)?;
        let z1 = Vector::from_column_slice(&values[..h.r]);
        let gamma = Matrix::from_column_slice(h.r, h.m, &values[h.r..h.r + h.r * h.m]);
        let frames = if h.frames {
            let (Some(dt), Some(layout)) = (h.dt, h.layout) else {
                return Err(Error::MalformedHeader("frames flagged without dt/layout".into()));
            };
            let states = Matrix::from_column_slice(h.n, h.period + 1, &values[h.r + h.r * h.m..]);
            Some(Trajectory::new(states, dt, layout)?)
        } else {
            None
        };
        Ok(Self {
            r: h.r,
            n: h.n,
            basis,
            weights: h.weights,
            energy: h.energy,
            metrics: h.metrics,
            z1,
            gamma,
            frames,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&container::read(path.as_ref())?)
    }
}

/// Comparison of a synthesized loop against its input trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub reduced_closure: f64,
    /// `||x̃_{T+1} - x̃_1||`
    pub full_closure: f64,
    /// RMSE of `x̃_t - x_t` over frames `1..T` and all components.
    pub fidelity_rmse: f64,
    /// `Σ_t ||u_t||²` with `u_t = Γ s_t`.
    pub control_energy: f64,
    /// `||x_{T+1} - x_1||` of the input.
    pub raw_seam_gap: f64,
    pub edited_seam_gap: f64,
}

pub fn evaluate(record: &LoopRecord, input: &Trajectory) -> Result<EvaluationReport> {
    let frames = record
        .frames
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("loop record carries no lifted frames".into()))?;
    let period = record.basis.period;
    if input.dim() != frames.dim() {
        return Err(Error::shape("evaluate state dimension", frames.dim(), input.dim()));
    }
    if input.frame_count() != period + 1 {
        return Err(Error::shape("evaluate frame count", period + 1, input.frame_count()));
    }
    let diff = frames.states().columns(0, period) - input.states().columns(0, period);
    let fidelity_rmse = (diff.norm_squared() / (diff.len() as f64)).sqrt();
    Ok(EvaluationReport {
        reduced_closure: record.metrics.closure_residual,
        full_closure: frames.seam_gap(),
        fidelity_rmse,
        control_energy: record.control_energy(),
        raw_seam_gap: input.seam_gap(),
        edited_seam_gap: frames.seam_gap(),
    })
}

pub fn evaluate_solution(solution: &CyclicSolution, input: &Trajectory) -> Result<EvaluationReport> {
    evaluate(&solution.record(true), input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, r: usize) -> ReducedModel {
        let k = Matrix::from_fn(r, r, |_, _| rng.gen_range(-0.6..0.6));
        ReducedModel::from_parts(Matrix::identity(r, r), k).unwrap()
    }

    #[test]
    fn first_step_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 3);
        let basis = FourierBasis::new(6, 2, false).unwrap();
        let sys = build_rollout(&model, &basis, 6).unwrap();
        let s1 = basis.eval(1);
        let expected = numerics::kron(
            &Matrix::from_row_slice(1, 4, s1.as_slice()),
            &Matrix::identity(3, 3),
        );
        assert!((sys.blocks[1].columns(3, 12) - expected).amax() < 1e-15);
        // R_2's z-block is K̂
        assert!((sys.blocks[1].columns(0, 3) - &model.operator).amax() < 1e-15);
    }

    #[test]
    fn memoryless_dynamics() {
        let model = ReducedModel::from_parts(Matrix::identity(2, 2), Matrix::zeros(2, 2)).unwrap();
        let basis = FourierBasis::new(6, 1, false).unwrap();
        let sys = build_rollout(&model, &basis, 6).unwrap();
        for t in 2..=7 {
            let s = basis.eval(t - 1);
            let b = &sys.blocks[t - 1];
            assert!(b.columns(0, 2).amax() == 0.0);
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(b[(i, 2 + j * 2 + i)], s[j]);
                }
            }
        }
    }

    #[test]
    fn stacked_map_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 2);
        let basis = FourierBasis::new(6, 2, false).unwrap();
        let sys = build_rollout(&model, &basis, 6).unwrap();
        let q = Vector::from_fn(sys.unknowns(), |_, _| rng.gen_range(-1.0..1.0));
        let (z1, gamma) = sys.unpack(&q);
        let rec = controlled_rollout(&model.operator, &Matrix::identity(2, 2), &basis, &z1, &gamma);
        let aq = &sys.stacked * &q;
        for t in 0..6 {
            assert!((aq.rows(2 * t, 2) - rec.column(t)).amax() < 1e-12);
        }
        assert!((&sys.closure * &q - (rec.column(6) - rec.column(0))).amax() < 1e-12);
        assert_eq!(sys.pack(&z1, &gamma), q);
    }

    #[test]
    fn period_mismatch_rejected() {
        let model = ReducedModel::from_parts(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let basis = FourierBasis::new(8, 1, false).unwrap();
        assert!(build_rollout(&model, &basis, 9).is_err());
    }

    #[test]
    fn single_mode_control_cost() {
        // Γ with one nonzero coefficient γ on mode j costs w_u γ² M_jj
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 2);
        let basis = FourierBasis::new(9, 2, true).unwrap();
        let sys = build_rollout(&model, &basis, 9).unwrap();
        let observed = Matrix::zeros(2, 9);
        let weights = SolverWeights::new(0.5, 3.0).unwrap();
        let qp = assemble_qp(&sys, &observed, &weights, ControlEnergy::Gram).unwrap();
        let gamma_val = 0.7;
        let (row, mode) = (1, 3);
        let mut gamma = Matrix::zeros(2, 5);
        gamma[(row, mode)] = gamma_val;
        let direct: f64 = (1..=9).map(|t| (&gamma * basis.eval(t)).norm_squared()).sum();
        let q = sys.pack(&Vector::zeros(2), &gamma);
        let e_gamma_term = 0.5 * q.dot(&(&qp.hessian * &q))
            - weights.w_red * (&sys.stacked * &q).norm_squared();
        let m_jj = basis.gram()[(mode, mode)];
        assert!((e_gamma_term - 3.0 * gamma_val * gamma_val * m_jj).abs() < 1e-12);
        assert!((direct - gamma_val * gamma_val * m_jj).abs() < 1e-12);
    }

    #[test]
    fn hessian_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 3);
        let basis = FourierBasis::new(11, 3, false).unwrap();
        let sys = build_rollout(&model, &basis, 11).unwrap();
        let obs = Matrix::from_fn(3, 11, |_, _| rng.gen_range(-1.0..1.0));
        let qp = assemble_qp(&sys, &obs, &SolverWeights::default(), ControlEnergy::Gram).unwrap();
        assert_eq!((&qp.hessian - qp.hessian.transpose()).amax(), 0.0);
    }

    #[test]
    fn zero_data_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 2);
        let basis = FourierBasis::new(8, 2, false).unwrap();
        let sol = solve_reduced(
            &model,
            &Matrix::zeros(2, 8),
            &basis,
            &SolverWeights::default(),
            ControlEnergy::Gram,
        )
        .unwrap();
        assert!(sol.q.amax() < 1e-14);
    }

    #[test]
    fn observed_shape_checked() {
        let model = ReducedModel::from_parts(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let basis = FourierBasis::new(8, 1, false).unwrap();
        let sys = build_rollout(&model, &basis, 8).unwrap();
        assert!(assemble_qp(&sys, &Matrix::zeros(2, 7), &SolverWeights::default(), ControlEnergy::Gram).is_err());
        assert!(SolverWeights::new(0.0, 1.0).is_err());
    }

    #[test]
    fn cyc_round_trip() {
        let layout = FieldLayout::flat(3);
        let frames = Trajectory::new(Matrix::from_fn(3, 9, |i, j| (i * 9 + j) as f64), 0.1, layout).unwrap();
        let rec = LoopRecord {
            r: 2,
            n: 3,
            basis: FourierBasis::new(8, 2, false).unwrap(),
            weights: SolverWeights::default(),
            energy: ControlEnergy::Gram,
            metrics: SolveMetrics {
                closure_residual: 1.5e-13,
                ..Default::default()
            },
            z1: Vector::from_vec(vec![0.1, 0.2]),
            gamma: Matrix::from_fn(2, 4, |i, j| (i + 10 * j) as f64 * 0.1),
            frames: Some(frames),
        };
        let back = LoopRecord::decode(&rec.encode().unwrap()).unwrap();
        assert_eq!(back, rec);
        let no_frames = LoopRecord { frames: None, ..rec };
        let back = LoopRecord::decode(&no_frames.encode().unwrap()).unwrap();
        assert_eq!(back, no_frames);
    }
}
