//! Local edits on a cyclic loop.
//!
//! The reduced control is factored as `Γ = H C` with `H` (`r x k`) a set of
//! reduced-space directions and `C` (`k x m`) the Fourier coefficients. The
//! unknown is `q = [z̃_1; vec(C)]` and the edit QP is
//!
//! ```text
//! w_red ||F q - y||² + w_u ||vec(C)||² + w_profile ||S vec(C) - a||²   s.t.  A_cl q = 0
//! ```
//!
//! where row `t` of `S` reads `(C s_t)_{j*}` for the selected direction `j*` and
//! `a` is a temporal target profile. The regularizer is the plain coefficient
//! norm, so with `H = I` and `w_profile = 0` this is the base solver with
//! [`ControlEnergy::Identity`](crate::cyclic_solver::ControlEnergy::Identity).

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control_basis::{
    self, FourierBasis, LocalBasisDescriptor, LocalBasisSet, RegionSpec, TemporalProfile,
};
use crate::cyclic_solver::{self, symmetrize};
use crate::error::{Error, Result};
use crate::koopman::{self, RankSelection, ReducedModel};
use crate::numerics::{self, Matrix, Vector};
use crate::trajectory::{self, FieldLayout, Trajectory};

/// Number of `(FᵀF, A_cl)` caches a session keeps.
const CACHE_CAPACITY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditWeights {
    pub w_red: f64,
    pub w_u: f64,
    pub w_profile: f64,
}

impl Default for EditWeights {
    fn default() -> Self {
        Self {
            w_red: 1e-2,
            w_u: 3.0,
            w_profile: 10.0,
        }
    }
}

impl EditWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        if !(ok(self.w_red) && ok(self.w_u) && self.w_profile.is_finite() && self.w_profile >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "edit weights must be finite with w_red, w_u > 0 and w_profile >= 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Rollout matrices `A_1 .. A_{T+1}` for `Γ = H C`.
#[derive(Debug, Clone)]
pub struct EditRollout {
    /// `A_1 .. A_{T+1}`, each `r x (r + k m)`.
    pub blocks: Vec<Matrix>,
    /// `F = [A_1; ..; A_T]`.
    pub stacked: Matrix,
    /// `A_cl = A_{T+1} - A_1`.
    pub closure: Matrix,
    pub basis: FourierBasis,
    pub r: usize,
    pub k: usize,
}

impl EditRollout {
    pub fn period(&self) -> usize {
        self.basis.period
    }

    pub fn unknowns(&self) -> usize {
        self.r + self.k * self.basis.m()
    }

    pub fn pack(&self, z1: &Vector, coeffs: &Matrix) -> Vector {
        let mut q = Vector::zeros(self.unknowns());
        q.rows_mut(0, self.r).copy_from(z1);
        q.rows_mut(self.r, self.k * self.basis.m())
            .copy_from(&numerics::vec_col_major(coeffs));
        q
    }

    pub fn unpack(&self, q: &Vector) -> (Vector, Matrix) {
        let z1 = q.rows(0, self.r).into_owned();
        let coeffs = Matrix::from_column_slice(self.k, self.basis.m(), &q.as_slice()[self.r..]);
        (z1, coeffs)
    }
}

/// Builds `A_1 = [I | 0]`, `A_{t+1} = K̂ A_t + [0 | H (s_tᵀ ⊗ I_k)]`.
pub fn build_edit_rollout(
    model: &ReducedModel,
    basis: &FourierBasis,
    local: &LocalBasisSet,
    period: usize,
) -> Result<EditRollout> {
    if period < 2 {
        return Err(Error::InvalidArgument(format!("period must be >= 2, got {period}")));
    }
    if basis.period != period {
        return Err(Error::shape("edit rollout period", period, basis.period));
    }
    let r = model.rank();
    if local.rank() != r {
        return Err(Error::shape("local basis rows", r, local.rank()));
    }
    let k = local.k();
    let m = basis.m();
    let nq = r + k * m;
    let h = &local.columns;

    let mut blocks = Vec::with_capacity(period + 1);
    let mut current = Matrix::zeros(r, nq);
    current.view_mut((0, 0), (r, r)).fill_with_identity();
    blocks.push(current.clone());
    for t in 1..=period {
        let s = basis.eval(t);
        let mut next = &model.operator * &current;
        // column (i, j) of vec(C) is index r + i k + j and contributes s_i h_j
        for i in 0..m {
            for j in 0..k {
                let col = r + i * k + j;
                next.column_mut(col).axpy(s[i], &h.column(j), 1.0);
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
    Ok(EditRollout {
        blocks,
        stacked,
        closure,
        basis: *basis,
        r,
        k,
    })
}

/// One local edit: the data of the extended QP.
#[derive(Debug, Clone)]
pub struct EditProblem<'a> {
    pub model: &'a ReducedModel,
    pub basis: FourierBasis,
    pub local_bases: &'a LocalBasisSet,
    /// 0-based column of `H` the profile acts on.
    pub selected: usize,
    pub profile: TemporalProfile,
    /// Added to the profile to form `a`; `None` means `a = profile`.
    pub profile_offset: Option<Vector>,
    pub weights: EditWeights,
}

impl EditProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let k = self.local_bases.k();
        if self.selected >= k {
            return Err(Error::InvalidArgument(format!(
                "selected direction {} outside 0..{k}",
                self.selected
            )));
        }
        let period = self.basis.period;
        if self.profile.values.len() != period {
            return Err(Error::shape("profile length", period, self.profile.values.len()));
        }
        if let Some(off) = &self.profile_offset {
            if off.len() != period {
                return Err(Error::shape("profile offset length", period, off.len()));
            }
        }
        Ok(())
    }

    /// `a_1 .. a_T`.
    pub fn target(&self) -> Vector {
        match &self.profile_offset {
            Some(off) => &self.profile.values + off,
            None => self.profile.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// `||z̃_{T+1} - z̃_1||` from the re-rolled recursion.
    pub closure_residual: f64,
    /// RMS of `(C s_t)_{j*} - a_t` over the period.
    pub profile_rmse: f64,
    pub fidelity_cost: f64,
    /// `||C||_F²`
    pub coefficient_cost: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub kkt_condition_estimate: f64,
    /// Assembly + KKT solve + re-rollout.
    pub solve_seconds: f64,
    /// True when `FᵀF` and `A_cl` came from a cache.
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct EditSolution {
    pub z1_opt: Vector,
    /// `C`, `k x m`.
    pub coeffs: Matrix,
    /// `H C`, `r x m`.
    pub gamma: Matrix,
    pub duals: Vector,
    pub q: Vector,
    /// `z̃_1 .. z̃_{T+1}` as columns.
    pub reduced_cycle: Matrix,
    /// `U_r z̃_1 .. U_r z̃_{T+1}` as columns.
    pub full_cycle: Matrix,
    /// `(C s_t)_{j*}` for `t = 1..T`.
    pub selected_series: Vector,
    pub selected: usize,
    pub metrics: EditMetrics,
}

/// Reusable pieces of an edit solve that do not depend on the profile or weights.
#[derive(Debug, Clone)]
pub struct EditCache {
    pub key: u64,
    pub rollout: EditRollout,
    /// `FᵀF`
    pub normal: Matrix,
    /// `Fᵀy`
    pub moment: Vector,
    /// Observed reduced frames `z_1 .. z_T`.
    pub observed: Matrix,
}

fn hash_matrix(m: &Matrix, h: &mut DefaultHasher) {
    m.shape().hash(h);
    for v in m.iter() {
        v.to_bits().hash(h);
    }
}

/// Cache key over `(model, Fourier basis, H, observed frames)`.
pub fn cache_key(
    model: &ReducedModel,
    basis: &FourierBasis,
    local: &LocalBasisSet,
    observed: &Matrix,
) -> u64 {
    let mut h = DefaultHasher::new();
    model.fingerprint().hash(&mut h);
    basis.hash(&mut h);
    hash_matrix(&local.columns, &mut h);
    hash_matrix(observed, &mut h);
    h.finish()
}

impl EditCache {
    pub fn build(
        model: &ReducedModel,
        basis: &FourierBasis,
        local: &LocalBasisSet,
        observed: &Matrix,
    ) -> Result<Self> {
        let period = basis.period;
        let r = model.rank();
        if observed.shape() != (r, period) {
            return Err(Error::shape(
                "observed reduced frames",
                format!("{r}x{period}"),
                format!("{}x{}", observed.nrows(), observed.ncols()),
            ));
        }
        let rollout = build_edit_rollout(model, basis, local, period)?;
        let y = Vector::from_column_slice(observed.as_slice());
        let normal = rollout.stacked.tr_mul(&rollout.stacked);
        let moment = rollout.stacked.tr_mul(&y);
        Ok(Self {
            key: cache_key(model, basis, local, observed),
            rollout,
            normal,
            moment,
            observed: observed.clone(),
        })
    }
}

/// Solves an edit from scratch.
pub fn solve_edit(problem: &EditProblem<'_>, observed: &Matrix) -> Result<EditSolution> {
    problem.validate()?;
    let start = Instant::now();
    let cache = EditCache::build(problem.model, &problem.basis, problem.local_bases, observed)?;
    let mut sol = solve_with_cache(problem, &cache, start)?;
    sol.metrics.cached = false;
    Ok(sol)
}

/// Solves an edit reusing `cache`, which must have been built for the same
/// model, Fourier basis, `H` and observed frames.
pub fn solve_edit_cached(
    problem: &EditProblem<'_>,
    observed: &Matrix,
    cache: &EditCache,
) -> Result<EditSolution> {
    problem.validate()?;
    let key = cache_key(problem.model, &problem.basis, problem.local_bases, observed);
    if key != cache.key {
        return Err(Error::StaleModel {
            expected: cache.key,
            actual: key,
        });
    }
    let mut sol = solve_with_cache(problem, cache, Instant::now())?;
    sol.metrics.cached = true;
    Ok(sol)
}

fn solve_with_cache(
    problem: &EditProblem<'_>,
    cache: &EditCache,
    start: Instant,
) -> Result<EditSolution> {
    let rollout = &cache.rollout;
    let (r, k, m, period) = (rollout.r, rollout.k, problem.basis.m(), rollout.period());
    let w = &problem.weights;
    let j = problem.selected;
    let a = problem.target();

    // SᵀS = M ⊗ e_j e_jᵀ and Sᵀa has entry i k + j equal to Σ_t s_t[i] a_t
    let mut hessian = &cache.normal * (2.0 * w.w_red);
    for d in 0..k * m {
        hessian[(r + d, r + d)] += 2.0 * w.w_u;
    }
    let mut s_a = Vector::zeros(m);
    if w.w_profile > 0.0 {
        let gram = problem.basis.gram();
        for i in 0..m {
            for i2 in 0..m {
                hessian[(r + i * k + j, r + i2 * k + j)] += 2.0 * w.w_profile * gram[(i, i2)];
            }
        }
        for t in 1..=period {
            s_a.axpy(a[t - 1], &problem.basis.eval(t), 1.0);
        }
    }
    symmetrize(&mut hessian);
    let mut rhs = &cache.moment * (2.0 * w.w_red);
    for i in 0..m {
        rhs[r + i * k + j] += 2.0 * w.w_profile * s_a[i];
    }

    let kkt = numerics::solve_kkt(
        &hessian,
        &rollout.closure,
        &rhs,
        &Vector::zeros(rollout.closure.nrows()),
    )?;
    let q = kkt.primal;
    let (z1, coeffs) = rollout.unpack(&q);
    let gamma = &problem.local_bases.columns * &coeffs;
    let reduced_cycle = cyclic_solver::controlled_rollout(
        &problem.model.operator,
        &problem.local_bases.columns,
        &problem.basis,
        &z1,
        &coeffs,
    );
    let full_cycle = &problem.model.basis * &reduced_cycle;

    let selected_series = Vector::from_fn(period, |t, _| {
        let s = problem.basis.eval(t + 1);
        (0..m).map(|i| coeffs[(j, i)] * s[i]).sum()
    });
    let profile_rmse = ((&selected_series - &a).norm_squared() / period as f64).sqrt();
    let fidelity = {
        let mut acc = 0.0;
        for t in 0..period {
            acc += (reduced_cycle.column(t) - cache.observed.column(t)).norm_squared();
        }
        acc
    };
    let coefficient_cost = coeffs.norm_squared();
    let objective = w.w_red * fidelity
        + w.w_u * coefficient_cost
        + w.w_profile * (&selected_series - &a).norm_squared();
    let closure_residual = (reduced_cycle.column(period) - reduced_cycle.column(0)).norm();

    Ok(EditSolution {
        z1_opt: z1,
        coeffs,
        gamma,
        duals: kkt.dual,
        q,
        reduced_cycle,
        full_cycle,
        selected_series,
        selected: j,
        metrics: EditMetrics {
            closure_residual,
            profile_rmse,
            fidelity_cost: fidelity,
            coefficient_cost,
            objective,
            kkt_residual: kkt.relative_residual,
            kkt_condition_estimate: kkt.condition_estimate,
            solve_seconds: start.elapsed().as_secs_f64(),
            cached: false,
        },
    })
}


/// What the temporal profile is measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileReference {
    /// `a` is the Gaussian bump itself.
    #[default]
    Zero,
    /// `a` is the baseline loop's coefficient along the edited direction plus the bump,
    /// so a zero-strength edit reproduces the baseline.
    Baseline,
}

/// A user edit as received from a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub region: RegionSpec,
    pub block: String,
    pub direction: Vec<f64>,
    /// 1-based target frame.
    pub frame: usize,
    pub strength: f64,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub weights: Option<EditWeights>,
    #[serde(default)]
    pub profile_reference: ProfileReference,
}

/// A fitted model with its baseline loop and the state needed for fast repeat edits.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub model: ReducedModel,
    pub layout: FieldLayout,
    pub dt: f64,
    pub basis: FourierBasis,
    /// Observed reduced frames `z_1 .. z_T`.
    pub observed: Matrix,
    /// Defaults for requests that carry no weights.
    pub weights: EditWeights,
    /// Full-space frame 1, used to resolve box regions.
    reference: Vector,
    registry: Vec<LocalBasisSet>,
    /// Registry entry used by the latest edit.
    latest_local: Option<usize>,
    caches: Vec<EditCache>,
    pub baseline: EditSolution,
    pub latest: EditSolution,
    pub version: u64,
    pub fit_seconds: f64,
}

impl EditSession {
    /// Fits a reduced model on all but the last frame of `traj` and solves the
    /// baseline loop (`H = I`, no profile).
    pub fn fit(
        traj: &Trajectory,
        rank: RankSelection,
        harmonics: usize,
        include_constant: bool,
        weights: EditWeights,
    ) -> Result<Self> {
        let start = Instant::now();
        let period = traj.split().fit_frames;
        let (x, xp) = trajectory::snapshot_pair(traj, period)?;
        let model = koopman::reduce(&x, &xp, rank)?;
        let mut session = Self::from_model(model, traj, harmonics, include_constant, weights)?;
        session.fit_seconds = start.elapsed().as_secs_f64();
        Ok(session)
    }

    pub fn from_model(
        model: ReducedModel,
        traj: &Trajectory,
        harmonics: usize,
        include_constant: bool,
        weights: EditWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if traj.dim() != model.dim() {
            return Err(Error::shape("session trajectory dimension", model.dim(), traj.dim()));
        }
        let period = traj.split().fit_frames;
        let basis = FourierBasis::new(period, harmonics, include_constant)?;
        let observed = model.project_all(&traj.states().columns(0, period).into_owned())?;
        let identity = LocalBasisSet::identity(model.rank());
        let cache = EditCache::build(&model, &basis, &identity, &observed)?;
        let problem = EditProblem {
            model: &model,
            basis,
            local_bases: &identity,
            selected: 0,
            profile: control_basis::make_profile(period, 1, 1.0, 0.0)?,
            profile_offset: None,
            weights: EditWeights {
                w_profile: 0.0,
                ..weights
            },
        };
        let baseline = solve_with_cache(&problem, &cache, Instant::now())?;
        Ok(Self {
            reference: traj.frame(0).into_owned(),
            layout: traj.layout.clone(),
            dt: traj.dt,
            basis,
            observed,
            weights,
            registry: Vec::new(),
            latest_local: None,
            caches: vec![cache],
            latest: baseline.clone(),
            baseline,
            version: 0,
            fit_seconds: 0.0,
            model,
        })
    }

    pub fn period(&self) -> usize {
        self.basis.period
    }

    /// Fails when `fingerprint` does not identify this session's model.
    pub fn ensure_model(&self, fingerprint: u64) -> Result<()> {
        let own = self.model.fingerprint();
        if own != fingerprint {
            return Err(Error::StaleModel {
                expected: own,
                actual: fingerprint,
            });
        }
        Ok(())
    }

    /// Local bases built so far, one per distinct (region, block, direction).
    pub fn local_bases(&self) -> &[LocalBasisSet] {
        &self.registry
    }

    /// Descriptor of the direction edited last, `None` before the first edit.
    pub fn latest_descriptor(&self) -> Option<&LocalBasisDescriptor> {
        self.latest_local.map(|i| &self.registry[i].descriptors[0])
    }

    /// Resolves the request to a completed local basis `[h, h⊥]`, reusing a
    /// registered one when the descriptor matches.
    fn local_basis_index(&mut self, req: &EditRequest) -> Result<usize> {
        let mask = req.region.resolve(&self.layout, &self.reference)?;
        let (h, descriptor) = control_basis::build_local_basis(
            &self.model,
            &self.layout,
            &mask,
            &req.block,
            &req.direction,
        )?;
        if let Some(i) = self
            .registry
            .iter()
            .position(|set| set.descriptors[0] == descriptor)
        {
            return Ok(i);
        }
        self.registry.push(LocalBasisSet::completed(h, descriptor)?);
        Ok(self.registry.len() - 1)
    }

    fn cache_index(&mut self, local: usize) -> Result<usize> {
        let set = &self.registry[local];
        let key = cache_key(&self.model, &self.basis, set, &self.observed);
        if let Some(i) = self.caches.iter().position(|c| c.key == key) {
            return Ok(i);
        }
        let cache = EditCache::build(&self.model, &self.basis, set, &self.observed)?;
        if self.caches.len() >= CACHE_CAPACITY {
            // keep the baseline cache in slot 0
            self.caches.remove(1);
        }
        self.caches.push(cache);
        Ok(self.caches.len() - 1)
    }

    /// Builds the problem for `req` without solving it.
    fn prepare(&mut self, req: &EditRequest) -> Result<(usize, usize, TemporalProfile, Option<Vector>, EditWeights)> {
        let weights = req.weights.unwrap_or(self.weights);
        weights.validate()?;
        let period = self.period();
        let width = req
            .width
            .unwrap_or_else(|| control_basis::default_profile_width(period));
        let profile = control_basis::make_profile(period, req.frame, width, req.strength)?;
        let local = self.local_basis_index(req)?;
        let offset = match req.profile_reference {
            ProfileReference::Zero => None,
            ProfileReference::Baseline => {
                let h = self.registry[local].columns.column(0).into_owned();
                let g = &self.baseline.gamma;
                Some(Vector::from_fn(period, |t, _| {
                    h.dot(&(g * self.basis.eval(t + 1)))
                }))
            }
        };
        let cache = self.cache_index(local)?;
        Ok((local, cache, profile, offset, weights))
    }

    /// Solves `req` against the session model and makes it the latest solution.
    pub fn apply(&mut self, req: &EditRequest) -> Result<&EditSolution> {
        let start = Instant::now();
        let (local, cache, profile, profile_offset, weights) = self.prepare(req)?;
        let problem = EditProblem {
            model: &self.model,
            basis: self.basis,
            local_bases: &self.registry[local],
            selected: 0,
            profile,
            profile_offset,
            weights,
        };
        problem.validate()?;
        let mut sol = solve_with_cache(&problem, &self.caches[cache], start)?;
        sol.metrics.cached = true;
        self.latest = sol;
        self.latest_local = Some(local);
        self.version += 1;
        Ok(&self.latest)
    }

    /// Solves `req` from scratch without touching session state.
    pub fn solve_cold(&self, req: &EditRequest) -> Result<EditSolution> {
        let mut scratch = self.clone();
        scratch.caches.clear();
        scratch.registry.clear();
        let (local, _, profile, profile_offset, weights) = scratch.prepare(req)?;
        let problem = EditProblem {
            model: &scratch.model,
            basis: scratch.basis,
            local_bases: &scratch.registry[local],
            selected: 0,
            profile,
            profile_offset,
            weights,
        };
        solve_edit(&problem, &scratch.observed)
    }

    /// Latest loop lifted to full space, `T + 1` frames with the closing frame last.
    pub fn latest_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.latest.full_cycle.clone(), self.dt, self.layout.clone())
    }
}
