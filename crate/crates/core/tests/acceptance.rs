//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use common::*;
use koopcycle::control_basis::{make_profile, FourierBasis, LocalBasisSet, RegionSpec};
use koopcycle::cyclic_solver::{
    build_rollout, evaluate_solution, solve_cyclic, solve_reduced, ControlEnergy, CyclicConfig,
    CyclicSolution, SolverWeights,
};
use koopcycle::datagen::DatasetClass;
use koopcycle::interactive::{
    solve_edit, EditProblem, EditRequest, EditSession, EditWeights, ProfileReference,
};
use koopcycle::koopman::{self, RankSelection};
use koopcycle::numerics::{Matrix, Vector};
use koopcycle::trajectory::{FieldLayout, Trajectory};
use rand::Rng;

const W_RED: f64 = 1e-2;
const W_U: f64 = 3.0;
const HARMONICS: usize = 8;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Dataset {
    class: DatasetClass,
    input: Trajectory,
    solution: CyclicSolution,
    wall_seconds: f64,
}

fn run_dataset(class: DatasetClass) -> Dataset {
    let start = Instant::now();
    let input = class.generate_default().expect("dataset generation");
    let mut config = CyclicConfig::new(class.default_rank(), HARMONICS);
    config.weights = SolverWeights::new(W_RED, W_U).unwrap();
    let solution = solve_cyclic(&input, &config).expect("cyclic solve");
    Dataset {
        class,
        input,
        solution,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

fn closure(datasets: &[Dataset]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for d in datasets {
        let m = d.solution.metrics();
        let bound = 1e-8 * (1.0 + d.solution.reduced.z1_opt.norm());
        let ok = m.closure_residual <= bound && d.wall_seconds < 10.0;
        pass &= ok;
        parts.push(format!(
            "{} r={} T={} m={}: closure {:.2e} (bound {:.2e}), {:.2}s",
            d.class,
            d.solution.model.rank(),
            d.solution.reduced.basis.period,
            d.solution.reduced.basis.m(),
            m.closure_residual,
            bound,
            d.wall_seconds
        ));
    }
    Outcome {
        name: "closure at near machine precision on generated datasets",
        pass,
        detail: parts.join("; "),
    }
}

fn oracle_equivalence() -> Outcome {
    let mut worst_obj = 0.0f64;
    let mut worst_q = 0.0f64;
    let mut compared = 0;
    for seed in 0..20u64 {
        let mut g = rng(5000 + seed);
        let r = g.gen_range(1..=3);
        let period = g.gen_range(5..=10);
        let h = g.gen_range(1..=2);
        let model = random_model(&mut g, r + 3, r, 0.7);
        let basis = FourierBasis::new(period, h, false).unwrap();
        let observed = random_matrix(&mut g, r, period, 1.0);
        let weights = SolverWeights::new(W_RED, W_U).unwrap();
        let sol = solve_reduced(&model, &observed, &basis, &weights, ControlEnergy::Gram).unwrap();
        let oracle = nullspace_qp(
            &dense_problem(&model, &basis),
            &Vector::from_column_slice(observed.as_slice()),
            W_RED,
            W_U,
            true,
        );
        let rel = (sol.metrics.objective - oracle.objective).abs() / (1.0 + oracle.objective.abs());
        worst_obj = worst_obj.max(rel);
        if oracle.reduced_condition < 1e8 {
            worst_q = worst_q.max((&sol.q - &oracle.q).amax());
            compared += 1;
        }
    }
    Outcome {
        name: "objective and minimizer match nullspace-elimination oracle (20 instances)",
        pass: worst_obj <= 1e-8 && worst_q <= 1e-6,
        detail: format!(
            "max relative objective gap {worst_obj:.2e} (tol 1e-8), max |dq| {worst_q:.2e} over {compared} well-conditioned (tol 1e-6)"
        ),
    }
}

fn rollout_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut g = rng(7000 + seed);
        let r = g.gen_range(1..=6);
        let period = g.gen_range(4..=60);
        let h = g.gen_range(1..=((period - 1) / 2).min(6));
        let model = random_model(&mut g, r + 4, r, 0.9 / (r as f64).sqrt());
        let basis = FourierBasis::new(period, h, g.gen_bool(0.5)).unwrap();
        let sys = build_rollout(&model, &basis, period).unwrap();
        let z1 = random_vector(&mut g, r, 1.0);
        let gamma = random_matrix(&mut g, r, basis.m(), 1.0);
        let stepped = simulate(&model.operator, &gamma, &basis, &z1);
        let stacked = &sys.stacked * sys.pack(&z1, &gamma);
        for t in 0..period {
            let err = (stacked.rows(t * r, r) - stepped.column(t)).amax();
            worst = worst.max(err);
        }
    }
    Outcome {
        name: "stacked rollout equals step-by-step recursion (50 triples)",
        pass: worst <= 1e-11,
        detail: format!("max abs error {worst:.2e} (tol 1e-11)"),
    }
}

fn zero_control_fixed_point() -> Outcome {
    // two planar rotations with periods T and T/2, embedded in 10 dimensions
    let period = 40;
    let mut g = rng(31);
    let embed = random_orthonormal(&mut g, 10, 4);
    let frames: Vec<Vector> = (0..=period)
        .map(|t| {
            let a = 2.0 * PI * t as f64 / period as f64;
            let z = Vector::from_vec(vec![a.cos(), a.sin(), 0.5 * (2.0 * a).cos(), 0.5 * (2.0 * a).sin()]);
            &embed * z
        })
        .collect();
    let traj = Trajectory::from_frames(&frames, 0.1, FieldLayout::flat(10)).unwrap();
    let mut config = CyclicConfig::new(4, 3);
    config.weights = SolverWeights::new(W_RED, W_U).unwrap();
    let sol = solve_cyclic(&traj, &config).unwrap();
    let report = evaluate_solution(&sol, &traj).unwrap();
    let gamma = sol.reduced.gamma.norm();
    Outcome {
        name: "exactly cyclic input reproduced by the surrogate needs no control",
        pass: gamma <= 1e-8 && report.fidelity_rmse <= 1e-8,
        detail: format!(
            "||Gamma||_F {gamma:.2e}, fidelity RMSE {:.2e} (tol 1e-8)",
            report.fidelity_rmse
        ),
    }
}

fn koopman_recovery() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..12u64 {
        let mut g = rng(900 + seed);
        let r = 1 + (seed as usize % 6);
        let k = stable_operator(&mut g, r, (0.9, 0.995));
        let frames = 10 * r + 20;
        let mut x = Matrix::zeros(r, frames);
        x.set_column(0, &random_vector(&mut g, r, 1.0));
        for t in 1..frames {
            let next = &k * x.column(t - 1);
            x.set_column(t, &next);
        }
        let cols = frames - 1;
        let model = koopman::reduce(
            &x.columns(0, cols).into_owned(),
            &x.columns(1, cols).into_owned(),
            RankSelection::Fixed(r),
        )
        .unwrap();
        let lifted = &model.basis * &model.operator * model.basis.transpose();
        worst = worst.max((lifted - &k).amax());
    }
    Outcome {
        name: "known stable linear operator recovered (r <= 6)",
        pass: worst <= 1e-8,
        detail: format!("max entry error {worst:.2e} (tol 1e-8)"),
    }
}

fn timing(datasets: &[Dataset]) -> Outcome {
    let parts: Vec<String> = datasets
        .iter()
        .map(|d| format!("{} {:.4}s", d.class, d.solution.optimization_seconds))
        .collect();
    Outcome {
        name: "optimization phase under 1 s at table scale",
        pass: datasets.iter().all(|d| d.solution.optimization_seconds < 1.0),
        detail: parts.join(", "),
    }
}

fn edit_request(class: DatasetClass, session: &EditSession, frame: usize, strength: f64) -> EditRequest {
    let (block, direction, region) = match class {
        DatasetClass::Nbody => ("positions", vec![0.0, 0.0, 1.0], RegionSpec::Indices(vec![2])),
        DatasetClass::Sheet => {
            ("positions", vec![0.0, 0.0, 1.0], RegionSpec::Indices((150..169).collect()))
        }
        DatasetClass::Water => ("height", vec![1.0], RegionSpec::Indices((1000..1040).collect())),
    };
    let frame = frame.min(session.period());
    EditRequest {
        region,
        block: block.into(),
        direction,
        frame,
        strength,
        width: None,
        weights: None,
        profile_reference: ProfileReference::Zero,
    }
}

fn interactive_equivalence(datasets: &[Dataset]) -> Outcome {
    let mut worst_traj = 0.0f64;
    let mut worst_closure = 0.0f64;
    let mut edits = 0;
    let mut failures = Vec::new();
    for d in datasets {
        let model = &d.solution.model;
        let r = model.rank();
        let basis = d.solution.reduced.basis;
        let local = LocalBasisSet::identity(r);
        let problem = EditProblem {
            model,
            basis,
            local_bases: &local,
            selected: 0,
            profile: make_profile(basis.period, 1, 1.0, 0.0).unwrap(),
            profile_offset: None,
            weights: EditWeights {
                w_red: W_RED,
                w_u: W_U,
                w_profile: 0.0,
            },
        };
        let edit = solve_edit(&problem, &d.solution.observed).unwrap();
        let weights = SolverWeights::new(W_RED, W_U).unwrap();
        let base = solve_reduced(model, &d.solution.observed, &basis, &weights, ControlEnergy::Identity)
            .unwrap();
        let lifted_base = &model.basis * &base.reduced_cycle;
        worst_traj = worst_traj.max((&edit.full_cycle - lifted_base).amax());

        let mut session = EditSession::from_model(
            model.clone(),
            &d.input,
            basis.harmonics,
            basis.include_constant,
            EditWeights::default(),
        )
        .unwrap();
        for (frame, strength) in [(53, 10.0), (10, 2.0), (53, 0.0)] {
            let req = edit_request(d.class, &session, frame, strength);
            match session.apply(&req) {
                Ok(sol) => {
                    let rel = sol.metrics.closure_residual / (1.0 + sol.z1_opt.norm());
                    worst_closure = worst_closure.max(rel);
                    edits += 1;
                }
                Err(e) => failures.push(format!("{} edit failed: {e}", d.class)),
            }
        }
    }
    Outcome {
        name: "local-edit solve with H = I and no profile equals identity-energy base solve",
        pass: worst_traj <= 1e-8 && worst_closure <= 1e-9 && failures.is_empty(),
        detail: format!(
            "max trajectory gap {worst_traj:.2e} (tol 1e-8), worst relative closure over {edits} edits {worst_closure:.2e} (tol 1e-9){}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    }
}

fn seam_gap(datasets: &[Dataset]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for d in datasets {
        let report = evaluate_solution(&d.solution, &d.input).unwrap();
        pass &= report.raw_seam_gap > report.edited_seam_gap;
        parts.push(format!(
            "{} raw {:.3e} -> looped {:.3e}",
            d.class, report.raw_seam_gap, report.edited_seam_gap
        ));
    }
    Outcome {
        name: "looped seam gap below raw seam gap on every generated dataset",
        pass,
        detail: parts.join(", "),
    }
}

fn main() {
    let datasets: Vec<Dataset> = [DatasetClass::Nbody, DatasetClass::Sheet, DatasetClass::Water]
        .into_iter()
        .map(run_dataset)
        .collect();

    let outcomes = vec![
        closure(&datasets),
        oracle_equivalence(),
        rollout_correctness(),
        zero_control_fixed_point(),
        koopman_recovery(),
        timing(&datasets),
        interactive_equivalence(&datasets),
        seam_gap(&datasets),
    ];

    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag}  {}: {}", o.name, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {} failed",
        outcomes.len() - failed,
        failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
