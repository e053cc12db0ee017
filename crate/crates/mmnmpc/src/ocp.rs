//! NMPC problem construction: the quadratic pose-stabilization cost, the
//! multiple-shooting transcription into a smooth NLP (shooting defects as
//! equality constraints, wheel-speed and singularity path constraints,
//! state/control boxes), warm starting, and the receding-horizon solve.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::config::{RobotModel, SolverOptions};
use crate::kinematics::{self, JointVector};
use crate::plant::{
    self, ConstraintSets, ControlInput, ControlVector, MMState, StateVector, CONTROL_DIM,
    STATE_DIM,
};
use crate::so3::{self, FlatOrientation};

/// Node stride in the interleaved decision vector `[x_0, u_0, x_1, ...]`.
const NODE_STRIDE: usize = STATE_DIM + CONTROL_DIM;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("weight matrix {0} is not positive definite")]
    IndefiniteWeight(&'static str),
    #[error(transparent)]
    Solver(#[from] sqp::Error),
}

/// Weighting matrices of the quadratic cost; all symmetric positive
/// definite.
#[derive(Debug, Clone)]
pub struct Weights {
    pub stage_position: Matrix3<f64>,
    pub stage_orientation: SMatrix<f64, 9, 9>,
    pub control: SMatrix<f64, 10, 10>,
    pub terminal_position: Matrix3<f64>,
    pub terminal_orientation: SMatrix<f64, 9, 9>,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            stage_position: Matrix3::identity() * 2.0,
            stage_orientation: SMatrix::identity() * 15.0,
            control: SMatrix::identity(),
            terminal_position: Matrix3::identity() * 2.0,
            terminal_orientation: SMatrix::identity() * 15.0,
        }
    }
}

impl Weights {
    pub fn validate_positive_definite(&self) -> Result<(), OcpError> {
        if self.stage_position.cholesky().is_none() {
            return Err(OcpError::IndefiniteWeight("stage_position"));
        }
        if self.stage_orientation.cholesky().is_none() {
            return Err(OcpError::IndefiniteWeight("stage_orientation"));
        }
        if self.control.cholesky().is_none() {
            return Err(OcpError::IndefiniteWeight("control"));
        }
        if self.terminal_position.cholesky().is_none() {
            return Err(OcpError::IndefiniteWeight("terminal_position"));
        }
        if self.terminal_orientation.cholesky().is_none() {
            return Err(OcpError::IndefiniteWeight("terminal_orientation"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReferencePose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// Orientation error of a flattened (possibly drifted) orientation against
/// the reference rotation: `flatten(I) - flatten(R^T R_r)`. Linear in the
/// flattened orientation.
pub fn orientation_error_flat(theta: &FlatOrientation, reference: &Matrix3<f64>) -> FlatOrientation {
    let r = so3::unflatten(theta);
    so3::flatten(&Matrix3::identity()) - so3::flatten(&(r.transpose() * reference))
}

/// The constant matrix L with `flatten(R^T R_r) = L theta`; the error
/// gradient is then `-L`.
fn orientation_error_map(reference: &Matrix3<f64>) -> SMatrix<f64, 9, 9> {
    let mut l = SMatrix::<f64, 9, 9>::zeros();
    for a in 0..9 {
        let row_a = a % 3; // row index inside R^T R_r
        let col_a = a / 3;
        for j in 0..9 {
            let r_j = j % 3;
            let s_j = j / 3;
            if s_j == row_a {
                l[(a, j)] = reference[(r_j, col_a)];
            }
        }
    }
    l
}

/// Stage cost: position error, orientation error and control effort in
/// their weighted squared norms.
pub fn stage_cost(
    state: &MMState,
    control: &ControlInput,
    reference: &ReferencePose,
    weights: &Weights,
) -> f64 {
    let e_p = state.position - reference.position;
    let e_theta = orientation_error_flat(&state.orientation, &reference.rotation);
    let c = control.to_vector();
    (e_p.transpose() * weights.stage_position * e_p)[0]
        + (e_theta.transpose() * weights.stage_orientation * e_theta)[0]
        + (c.transpose() * weights.control * c)[0]
}

/// Terminal cost: the stage cost without the control term, with the
/// terminal weights.
pub fn terminal_cost(state: &MMState, reference: &ReferencePose, weights: &Weights) -> f64 {
    let e_p = state.position - reference.position;
    let e_theta = orientation_error_flat(&state.orientation, &reference.rotation);
    (e_p.transpose() * weights.terminal_position * e_p)[0]
        + (e_theta.transpose() * weights.terminal_orientation * e_theta)[0]
}

/// Arm singularity measure of a state's joint vector (state-only path
/// constraint).
pub fn singularity_measure(q: &JointVector, model: &RobotModel) -> f64 {
    kinematics::singularity_measure(q, &model.dh)
}

#[derive(Debug, Clone)]
pub struct OcpProblem<'a> {
    pub horizon: usize,
    pub tau: f64,
    pub weights: &'a Weights,
    pub reference: &'a ReferencePose,
    pub sets: &'a ConstraintSets,
    pub model: &'a RobotModel,
    pub state: MMState,
}

/// Shooting-node solution, kept for warm starting.
#[derive(Debug, Clone)]
pub struct Plan {
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
}

impl Plan {
    /// Receding-horizon shift: drop the first node, duplicate the last.
    pub fn shifted(&self) -> Plan {
        let n = self.controls.len();
        let mut states: Vec<StateVector> = self.states[1..].to_vec();
        states.push(self.states[self.states.len() - 1]);
        let mut controls: Vec<ControlVector> = self.controls[1..].to_vec();
        controls.push(self.controls[n - 1]);
        Plan { states, controls }
    }
}

/// Multiple-shooting transcription of an [`OcpProblem`]; implements the
/// generic NLP interface consumed by the solver.
pub struct Transcription {
    horizon: usize,
    tau: f64,
    weights: Weights,
    reference_position: Vector3<f64>,
    error_map: SMatrix<f64, 9, 9>,
    reference_flat_error_offset: FlatOrientation,
    sets: ConstraintSets,
    model: RobotModel,
    initial: StateVector,
    wheel_map: SMatrix<f64, 4, 3>,
    /// Scale of the singularity rows: near the threshold the raw measure
    /// has gradients of order epsilon, so rows are normalized by the
    /// measure at the current state to stay O(1).
    singularity_scale: f64,
}

impl Transcription {
    pub fn dim(&self) -> usize {
        NODE_STRIDE * self.horizon + STATE_DIM
    }

    fn state_offset(&self, node: usize) -> usize {
        NODE_STRIDE * node
    }

    fn control_offset(&self, node: usize) -> usize {
        NODE_STRIDE * node + STATE_DIM
    }

    fn state_at(&self, z: &DVector<f64>, node: usize) -> StateVector {
        StateVector::from_column_slice(&z.as_slice()[self.state_offset(node)..][..STATE_DIM])
    }

    fn control_at(&self, z: &DVector<f64>, node: usize) -> ControlVector {
        ControlVector::from_column_slice(&z.as_slice()[self.control_offset(node)..][..CONTROL_DIM])
    }

    /// Orientation error at a node: offset - L theta.
    fn theta_error(&self, theta: &FlatOrientation) -> FlatOrientation {
        self.reference_flat_error_offset - self.error_map * theta
    }

    /// Diagonal seed for the solver's quasi-Newton Hessian: the exact
    /// (constant) objective Hessian on the position/orientation/control
    /// coordinates, unit weight on the joint coordinates.
    pub fn objective_hessian_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let mut diag = vec![1.0; n];
        let stage_ori = self.error_map.transpose() * self.weights.stage_orientation * self.error_map;
        let term_ori =
            self.error_map.transpose() * self.weights.terminal_orientation * self.error_map;
        for node in 0..=self.horizon {
            let so = self.state_offset(node);
            let (pos_w, ori_w) = if node == self.horizon {
                (&self.weights.terminal_position, &term_ori)
            } else {
                (&self.weights.stage_position, &stage_ori)
            };
            for i in 0..3 {
                diag[so + i] = 2.0 * pos_w[(i, i)];
            }
            for i in 0..9 {
                diag[so + 3 + i] = 2.0 * ori_w[(i, i)];
            }
            // Joint coordinates carry no direct objective curvature; leave
            // the unit seed.
        }
        for node in 0..self.horizon {
            let co = self.control_offset(node);
            for i in 0..CONTROL_DIM {
                diag[co + i] = 2.0 * self.weights.control[(i, i)];
            }
        }
        diag
    }

    /// Initial decision vector from the current state and an optional
    /// shifted previous plan.
    pub fn initial_guess(&self, warm: Option<&Plan>) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        match warm {
            Some(plan)
                if plan.states.len() == self.horizon + 1
                    && plan.controls.len() == self.horizon =>
            {
                for node in 0..=self.horizon {
                    let source = if node == 0 { &self.initial } else { &plan.states[node] };
                    z.rows_mut(self.state_offset(node), STATE_DIM)
                        .copy_from_slice(source.as_slice());
                }
                for node in 0..self.horizon {
                    z.rows_mut(self.control_offset(node), CONTROL_DIM)
                        .copy_from_slice(plan.controls[node].as_slice());
                }
            }
            _ => {
                for node in 0..=self.horizon {
                    z.rows_mut(self.state_offset(node), STATE_DIM)
                        .copy_from_slice(self.initial.as_slice());
                }
            }
        }
        z
    }

    pub fn plan_from_solution(&self, z: &DVector<f64>) -> Plan {
        Plan {
            states: (0..=self.horizon).map(|k| self.state_at(z, k)).collect(),
            controls: (0..self.horizon).map(|k| self.control_at(z, k)).collect(),
        }
    }
}

impl sqp::Nlp for Transcription {
    fn dim(&self) -> usize {
        Transcription::dim(self)
    }

    fn num_eq(&self) -> usize {
        STATE_DIM * (self.horizon + 1)
    }

    fn num_ineq(&self) -> usize {
        // 8 wheel-speed rows per control node, one singularity row per
        // predicted state node.
        9 * self.horizon
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for node in 0..=self.horizon {
            let state = self.state_at(z, node);
            let e_p = state.fixed_rows::<3>(0).into_owned() - self.reference_position;
            let e_t = self.theta_error(&state.fixed_rows::<9>(3).into_owned());
            let (pos_w, ori_w) = if node == self.horizon {
                (&self.weights.terminal_position, &self.weights.terminal_orientation)
            } else {
                (&self.weights.stage_position, &self.weights.stage_orientation)
            };
            total += (e_p.transpose() * pos_w * e_p)[0] + (e_t.transpose() * ori_w * e_t)[0];
            if node < self.horizon {
                let c = self.control_at(z, node);
                total += (c.transpose() * self.weights.control * c)[0];
            }
        }
        total
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.dim());
        for node in 0..=self.horizon {
            let so = self.state_offset(node);
            let state = self.state_at(z, node);
            let e_p = state.fixed_rows::<3>(0).into_owned() - self.reference_position;
            let e_t = self.theta_error(&state.fixed_rows::<9>(3).into_owned());
            let (pos_w, ori_w) = if node == self.horizon {
                (&self.weights.terminal_position, &self.weights.terminal_orientation)
            } else {
                (&self.weights.stage_position, &self.weights.stage_orientation)
            };
            let g_p = 2.0 * pos_w * e_p;
            let g_t = -2.0 * self.error_map.transpose() * (ori_w * e_t);
            for i in 0..3 {
                grad[so + i] = g_p[i];
            }
            for i in 0..9 {
                grad[so + 3 + i] = g_t[i];
            }
            if node < self.horizon {
                let co = self.control_offset(node);
                let c = self.control_at(z, node);
                let g_c = 2.0 * self.weights.control * c;
                for i in 0..CONTROL_DIM {
                    grad[co + i] = g_c[i];
                }
            }
        }
        grad
    }

    fn eq_residual(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut res = DVector::zeros(self.num_eq());
        // Initial-state pin.
        let x0 = self.state_at(z, 0);
        for i in 0..STATE_DIM {
            res[i] = x0[i] - self.initial[i];
        }
        // Shooting defects x_{k+1} - x_k - tau * v(x_k, u_k).
        for node in 0..self.horizon {
            let state = MMState::from_vector(&self.state_at(z, node));
            let control = ControlInput::from_vector(&self.control_at(z, node));
            let velocity = plant::whole_body_velocity(&state, &control, &self.model);
            let next = self.state_at(z, node + 1);
            let defect = next - self.state_at(z, node) - self.tau * velocity;
            for i in 0..STATE_DIM {
                res[STATE_DIM * (node + 1) + i] = defect[i];
            }
        }
        res
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_eq(), self.dim());
        for i in 0..STATE_DIM {
            jac[(i, self.state_offset(0) + i)] = 1.0;
        }
        for node in 0..self.horizon {
            let state = MMState::from_vector(&self.state_at(z, node));
            let control = ControlInput::from_vector(&self.control_at(z, node));
            let derivs = plant::whole_body_velocity_derivatives(&state, &control, &self.model);
            let row0 = STATE_DIM * (node + 1);
            let xk = self.state_offset(node);
            let uk = self.control_offset(node);
            let xk1 = self.state_offset(node + 1);
            for r in 0..STATE_DIM {
                jac[(row0 + r, xk1 + r)] = 1.0;
                jac[(row0 + r, xk + r)] -= 1.0;
                for c in 0..STATE_DIM {
                    let v = derivs.d_state[(r, c)];
                    if v != 0.0 {
                        jac[(row0 + r, xk + c)] -= self.tau * v;
                    }
                }
                for c in 0..CONTROL_DIM {
                    let v = derivs.d_control[(r, c)];
                    if v != 0.0 {
                        jac[(row0 + r, uk + c)] -= self.tau * v;
                    }
                }
            }
        }
        jac
    }

    fn ineq_residual(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut res = DVector::zeros(self.num_ineq());
        // Wheel-speed rows: w_max - (Hu)_i >= 0 and (Hu)_i + w_max >= 0.
        for node in 0..self.horizon {
            let c = self.control_at(z, node);
            let u = Vector3::new(c[0], c[1], c[2]);
            let wheels = self.wheel_map * u;
            for w in 0..4 {
                res[8 * node + 2 * w] = self.sets.wheel_speed_max - wheels[w];
                res[8 * node + 2 * w + 1] = wheels[w] + self.sets.wheel_speed_max;
            }
        }
        // Singularity rows on the predicted nodes, scaled by epsilon so
        // the row is well-conditioned when the constraint is active.
        let base = 8 * self.horizon;
        for node in 1..=self.horizon {
            let state = self.state_at(z, node);
            let q = state.fixed_rows::<7>(12).into_owned();
            res[base + node - 1] = (kinematics::singularity_measure(&q, &self.model.dh)
                - self.sets.singularity_epsilon)
                * self.singularity_scale;
        }
        res
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_ineq(), self.dim());
        for node in 0..self.horizon {
            let uk = self.control_offset(node);
            for w in 0..4 {
                for c in 0..3 {
                    jac[(8 * node + 2 * w, uk + c)] = -self.wheel_map[(w, c)];
                    jac[(8 * node + 2 * w + 1, uk + c)] = self.wheel_map[(w, c)];
                }
            }
        }
        let base = 8 * self.horizon;
        for node in 1..=self.horizon {
            let xk = self.state_offset(node);
            let state = self.state_at(z, node);
            let q = state.fixed_rows::<7>(12).into_owned();
            let grad = kinematics::singularity_measure_gradient(&q, &self.model.dh)
                * self.singularity_scale;
            for c in 0..7 {
                jac[(base + node - 1, xk + 12 + c)] = grad[c];
            }
        }
        jac
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        // Boxes on the predicted state nodes (node 0 is pinned by the
        // equality constraint and left unbounded).
        for node in 1..=self.horizon {
            let so = self.state_offset(node);
            for i in 0..3 {
                lower[so + i] = self.sets.position_lower[i];
                upper[so + i] = self.sets.position_upper[i];
            }
            for i in 0..7 {
                lower[so + 12 + i] = self.sets.joint_lower[i];
                upper[so + 12 + i] = self.sets.joint_upper[i];
            }
        }
        // Joint-rate boxes; the base twist is limited through the wheel
        // rows instead.
        for node in 0..self.horizon {
            let co = self.control_offset(node);
            for i in 0..7 {
                lower[co + 3 + i] = -self.sets.joint_rate_max;
                upper[co + 3 + i] = self.sets.joint_rate_max;
            }
        }
        (lower, upper)
    }
}

/// Build the multiple-shooting NLP for the given problem.
pub fn transcribe(problem: &OcpProblem<'_>) -> Result<Transcription, OcpError> {
    if problem.horizon == 0 {
        return Err(OcpError::InvalidProblem("horizon must be at least 1".into()));
    }
    if !(problem.tau > 0.0) {
        return Err(OcpError::InvalidProblem("sampling time must be positive".into()));
    }
    problem.weights.validate_positive_definite()?;
    let error_map = orientation_error_map(&problem.reference.rotation);
    let measure_now = kinematics::singularity_measure(&problem.state.joints, &problem.model.dh);
    let singularity_scale =
        1.0 / measure_now.abs().max(problem.sets.singularity_epsilon);
    Ok(Transcription {
        horizon: problem.horizon,
        tau: problem.tau,
        weights: problem.weights.clone(),
        reference_position: problem.reference.position,
        error_map,
        reference_flat_error_offset: so3::flatten(&Matrix3::identity()),
        sets: problem.sets.clone(),
        model: problem.model.clone(),
        initial: problem.state.to_vector(),
        wheel_map: kinematics::wheel_matrix(&problem.model.geometry),
        singularity_scale,
    })
}

/// Clamp a control onto the admissible set: joint rates elementwise, the
/// base twist rescaled so the wheel-speed bound holds exactly.
pub fn clamp_control(
    control: &ControlInput,
    sets: &ConstraintSets,
    model: &RobotModel,
) -> (ControlInput, bool) {
    let mut clamped = *control;
    let mut changed = false;
    for i in 0..7 {
        let limited = clamped.joint_rates[i].clamp(-sets.joint_rate_max, sets.joint_rate_max);
        if limited != clamped.joint_rates[i] {
            changed = true;
            clamped.joint_rates[i] = limited;
        }
    }
    let mut peak = kinematics::wheel_speeds(&clamped.base, &model.geometry).amax();
    while peak > sets.wheel_speed_max {
        changed = true;
        clamped.base *= (sets.wheel_speed_max / peak) * (1.0 - 1e-14);
        peak = kinematics::wheel_speeds(&clamped.base, &model.geometry).amax();
    }
    (clamped, changed)
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// First element of the optimal control sequence, clamped onto the
    /// admissible set.
    pub control: ControlInput,
    /// Raw solution plan (unclamped), kept for warm starting.
    pub plan: Plan,
    /// Predicted states over the horizon.
    pub predicted: Vec<MMState>,
    pub report: sqp::Report,
    /// True when clamping had to adjust the returned control.
    pub clamped: bool,
}

/// Solve the OCP at the problem's current state and return the
/// receding-horizon control.
pub fn solve_step(
    problem: &OcpProblem<'_>,
    warm: Option<&Plan>,
    options: &SolverOptions,
) -> Result<SolveOutcome, OcpError> {
    let transcription = transcribe(problem)?;
    let z0 = transcription.initial_guess(warm);
    let sqp_options = sqp::Options {
        max_iterations: options.max_iterations,
        kkt_tolerance: options.kkt_tolerance,
        constraint_tolerance: options.constraint_tolerance,
        init_hessian_diag: Some(transcription.objective_hessian_diagonal()),
        hessian_updates: options.hessian_updates,
        log_iterations: false,
    };
    let (z, report) = sqp::solve(&transcription, &z0, &sqp_options)?;
    let plan = transcription.plan_from_solution(&z);
    let raw = ControlInput::from_vector(&plan.controls[0]);
    let (control, clamped) = clamp_control(&raw, problem.sets, problem.model);
    let predicted = plan.states.iter().map(MMState::from_vector).collect();
    Ok(SolveOutcome {
        control,
        plan,
        predicted,
        report,
        clamped,
    })
}
