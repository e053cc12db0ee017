use mmnmpc::config::{RobotModel, SolverOptions};
use mmnmpc::kinematics::JointVector;
use mmnmpc::ocp::{solve_step, OcpProblem, ReferencePose, Weights};
use mmnmpc::plant::{self, BasePose};
use mmnmpc::so3;
use nalgebra::Vector3;
use std::time::Instant;

fn main() {
    let model = RobotModel::default();
    let weights = Weights::default();
    let sets = plant::ConstraintSets::default();
    let mut options = SolverOptions::default();
    options.max_iterations = 60;
    options.kkt_tolerance = 1e-4;

    // Scenario-1-like: start at (2, 0, 1.42) identity, drive to (0, 0, 0.5) Rz(pi).
    let base = BasePose { x: 2.0, y: 0.0, gamma: 0.0 };
    let q = JointVector::from_column_slice(&[0.0, 0.12, 0.0, 0.35, 0.0, -0.47, 0.0]);
    let mut state = plant::compose_feedback(&base, &q, &model);
    println!("initial ee: {:?}  sing: {:.3e}", state.position, mmnmpc::kinematics::singularity_measure(&q, &model.dh));
    let reference = ReferencePose {
        position: Vector3::new(0.0, 0.0, 0.5),
        rotation: so3::rotz(std::f64::consts::PI),
    };

    let mut warm = None;
    let mut base_pose = base;
    let mut joints = q;
    let mut times = Vec::new();
    let mut iters = Vec::new();
    for step in 0..60 {
        let problem = OcpProblem {
            horizon: 5,
            tau: 0.15,
            weights: &weights,
            reference: &reference,
            sets: &sets,
            model: &model,
            state: state.clone(),
        };
        let t0 = Instant::now();
        let outcome = solve_step(&problem, warm.as_ref(), &options).unwrap();
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        times.push(dt);
        iters.push(outcome.report.iterations);
        if outcome.report.status != sqp::Status::Optimal {
            let k = &outcome.report.kkt;
            println!("  step {step} kkt: stat {:.2e} eq {:.2e} ineq {:.2e} compl {:.2e}", k.stationarity, k.eq_feasibility, k.ineq_feasibility, k.complementarity);
        }
        if step < 5 || step % 10 == 0 {
            println!(
                "step {step}: {dt:6.1} ms, {} iters, status {:?}, |Ep| {:.4}, u {:?}",
                outcome.report.iterations,
                outcome.report.status,
                (state.position - reference.position).norm(),
                outcome.control.base
            );
        }
        base_pose = plant::base_step(&base_pose, &outcome.control.base, 0.15);
        joints += 0.15 * outcome.control.joint_rates;
        state = plant::compose_feedback(&base_pose, &joints, &model);
        warm = Some(outcome.plan.shifted());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let max = times.iter().cloned().fold(0.0, f64::max);
    println!("mean {mean:.1} ms  max {max:.1} ms  mean iters {:.1}", iters.iter().sum::<usize>() as f64 / iters.len() as f64);
}
