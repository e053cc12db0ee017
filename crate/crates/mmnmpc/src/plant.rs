//! Discrete-time models: the mecanum base step, the 19-dimensional
//! whole-body Euler step used both as NMPC prediction model and simulated
//! plant, pose-feedback composition, constraint sets and violation checks.
//!
//! The whole-body velocity is `J_mm(x, q) [u; qdot]`; its closed-form
//! derivatives with respect to the state are assembled here for the
//! multiple-shooting defect Jacobians.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::RobotModel;
use crate::kinematics::{
    self, fk_chain, geometric_jacobian, geometric_jacobian_partials, wheel_speeds, JointVector,
    JOINT_COUNT,
};
use crate::so3::{self, FlatOrientation, So3Error};

pub const STATE_DIM: usize = 19;
pub const CONTROL_DIM: usize = 10;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type ControlVector = SVector<f64, CONTROL_DIM>;

/// Planar pose of the mobile base; yaw wrapped to [-pi, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub gamma: f64,
}

/// Whole-body state: end-effector position and flattened orientation in
/// the inertial frame plus the seven joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct MMState {
    pub position: Vector3<f64>,
    pub orientation: FlatOrientation,
    pub joints: JointVector,
}

impl MMState {
    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<9>(3).copy_from(&self.orientation);
        v.fixed_rows_mut::<7>(12).copy_from(&self.joints);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            position: v.fixed_rows::<3>(0).into_owned(),
            orientation: v.fixed_rows::<9>(3).into_owned(),
            joints: v.fixed_rows::<7>(12).into_owned(),
        }
    }

    /// End-effector rotation matrix (no validity repair).
    pub fn rotation(&self) -> Matrix3<f64> {
        so3::unflatten(&self.orientation)
    }
}

/// Base twist `(u1, u2, u3)` plus the seven joint rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub base: Vector3<f64>,
    pub joint_rates: JointVector,
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            base: Vector3::zeros(),
            joint_rates: JointVector::zeros(),
        }
    }

    pub fn to_vector(&self) -> ControlVector {
        let mut v = ControlVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.base);
        v.fixed_rows_mut::<7>(3).copy_from(&self.joint_rates);
        v
    }

    pub fn from_vector(v: &ControlVector) -> Self {
        Self {
            base: v.fixed_rows::<3>(0).into_owned(),
            joint_rates: v.fixed_rows::<7>(3).into_owned(),
        }
    }
}

/// Box bounds and limit values for states and controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSets {
    pub position_lower: [f64; 3],
    pub position_upper: [f64; 3],
    pub joint_lower: [f64; 7],
    pub joint_upper: [f64; 7],
    /// Wheel speed limit: `||H u||_inf <= wheel_speed_max` (rad/s).
    pub wheel_speed_max: f64,
    /// Joint rate limit: `||qdot||_inf <= joint_rate_max` (rad/s).
    pub joint_rate_max: f64,
    /// Lower bound on the arm singularity measure.
    pub singularity_epsilon: f64,
}

impl Default for ConstraintSets {
    fn default() -> Self {
        use std::f64::consts::{FRAC_PI_2, PI};
        Self {
            position_lower: [-3.0, -3.0, 0.4],
            position_upper: [3.0, 3.0, 1.43],
            joint_lower: [-2.6, -1.985, -2.8, -0.9, -4.55, -1.5707, -3.0],
            joint_upper: [2.6, 1.985, 2.8, PI, 1.25, FRAC_PI_2, 3.0],
            wheel_speed_max: 0.6,
            joint_rate_max: 0.5,
            singularity_epsilon: 1e-6,
        }
    }
}

impl ConstraintSets {
    pub fn position_lower_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.position_lower)
    }
    pub fn position_upper_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.position_upper)
    }
    pub fn joint_lower_vec(&self) -> JointVector {
        JointVector::from_column_slice(&self.joint_lower)
    }
    pub fn joint_upper_vec(&self) -> JointVector {
        JointVector::from_column_slice(&self.joint_upper)
    }

    pub fn joint_midpoint(&self) -> JointVector {
        (self.joint_lower_vec() + self.joint_upper_vec()) * 0.5
    }
}

/// One violated bound; `margin` is the amount by which it is exceeded.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: String,
    pub value: f64,
    pub bound: f64,
    pub margin: f64,
}

pub fn wrap_angle(angle: f64) -> f64 {
    use std::f64::consts::PI;
    (angle + PI).rem_euclid(2.0 * PI) - PI
}

/// Euler step of the holonomic base model with body-to-inertial rotation.
pub fn base_step(pose: &BasePose, u: &Vector3<f64>, tau: f64) -> BasePose {
    let (s, c) = pose.gamma.sin_cos();
    BasePose {
        x: pose.x + tau * (c * u.x - s * u.y),
        y: pose.y + tau * (s * u.x + c * u.y),
        gamma: wrap_angle(pose.gamma + tau * u.z),
    }
}

/// Whole-body velocity `J_mm(x, q) [u; qdot]`.
pub fn whole_body_velocity(
    state: &MMState,
    control: &ControlInput,
    model: &RobotModel,
) -> StateVector {
    let jac = kinematics::whole_body_from_state(
        &state.orientation,
        &state.joints,
        &model.dh,
        &model.mount,
    );
    jac * control.to_vector()
}

/// Prediction-model Euler step: `x + tau * J_mm(x, q) [u; qdot]`, with the
/// predicted orientation left unprojected.
pub fn mm_step(state: &MMState, control: &ControlInput, tau: f64, model: &RobotModel) -> MMState {
    let next = state.to_vector() + tau * whole_body_velocity(state, control, model);
    MMState::from_vector(&next)
}

/// Plant-side step: same integration, then the orientation is pulled back
/// onto SO(3) by the polar projection.
pub fn mm_step_plant(
    state: &MMState,
    control: &ControlInput,
    tau: f64,
    model: &RobotModel,
) -> Result<MMState, So3Error> {
    let mut next = mm_step(state, control, tau, model);
    let repaired = so3::orthonormalize(&so3::unflatten(&next.orientation))?;
    next.orientation = so3::flatten(&repaired);
    Ok(next)
}

/// End-effector state implied by a base pose and joint angles.
pub fn compose_feedback(base: &BasePose, q: &JointVector, model: &RobotModel) -> MMState {
    let chain = fk_chain(q, &model.dh);
    let r_ib = so3::rotz(base.gamma);
    let p_be = model.mount.translation + model.mount.rotation * chain.position;
    let r_ie = r_ib * model.mount.rotation * chain.rotation;
    MMState {
        position: Vector3::new(base.x, base.y, 0.0) + r_ib * p_be,
        orientation: so3::flatten(&r_ie),
        joints: *q,
    }
}

/// List every violated bound of the state/control constraint sets
/// (position and joint boxes, joint-rate and wheel-speed limits). The
/// singularity threshold is an OCP path constraint and is monitored from
/// the logged measure instead.
pub fn check_constraints(
    state: &MMState,
    control: &ControlInput,
    sets: &ConstraintSets,
    model: &RobotModel,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |constraint: String, value: f64, bound: f64, margin: f64| {
        violations.push(Violation {
            constraint,
            value,
            bound,
            margin,
        });
    };

    let axis = ["x", "y", "z"];
    for i in 0..3 {
        let p = state.position[i];
        if p < sets.position_lower[i] {
            push(
                format!("position_{}_lower", axis[i]),
                p,
                sets.position_lower[i],
                sets.position_lower[i] - p,
            );
        }
        if p > sets.position_upper[i] {
            push(
                format!("position_{}_upper", axis[i]),
                p,
                sets.position_upper[i],
                p - sets.position_upper[i],
            );
        }
    }
    for i in 0..JOINT_COUNT {
        let q = state.joints[i];
        if q < sets.joint_lower[i] {
            push(
                format!("joint_{}_lower", i + 1),
                q,
                sets.joint_lower[i],
                sets.joint_lower[i] - q,
            );
        }
        if q > sets.joint_upper[i] {
            push(
                format!("joint_{}_upper", i + 1),
                q,
                sets.joint_upper[i],
                q - sets.joint_upper[i],
            );
        }
        let rate = control.joint_rates[i].abs();
        if rate > sets.joint_rate_max {
            push(
                format!("joint_rate_{}", i + 1),
                rate,
                sets.joint_rate_max,
                rate - sets.joint_rate_max,
            );
        }
    }
    let wheels = wheel_speeds(&control.base, &model.geometry);
    for i in 0..4 {
        let speed = wheels[i].abs();
        if speed > sets.wheel_speed_max {
            push(
                format!("wheel_speed_{}", i + 1),
                speed,
                sets.wheel_speed_max,
                speed - sets.wheel_speed_max,
            );
        }
    }
    violations
}

/// Velocity together with its Jacobians for the shooting defects.
pub struct DynamicsDerivatives {
    pub velocity: StateVector,
    /// d(velocity)/d(state), 19x19 (columns for p are zero).
    pub d_state: SMatrix<f64, 19, 19>,
    /// d(velocity)/d(control) = J_mm, 19x10.
    pub d_control: SMatrix<f64, 19, 10>,
}

/// Closed-form first derivatives of the whole-body velocity.
///
/// Everything is built from the factored frames: with `R` the (possibly
/// drifted) end-effector orientation from the state, `A` the arm-frame
/// end-effector rotation and `B = R_m A`, the model uses `R^I_b = R B^T`
/// and `R^I_a = R A^T`, both linear in the state orientation, so the
/// orientation partials reduce to single-entry perturbations `E_j` and the
/// joint partials to cross products with the joint axes.
pub fn whole_body_velocity_derivatives(
    state: &MMState,
    control: &ControlInput,
    model: &RobotModel,
) -> DynamicsDerivatives {
    let dh = &model.dh;
    let mount = &model.mount;
    let chain = fk_chain(&state.joints, dh);
    let geo = geometric_jacobian(&chain);
    let partials = geometric_jacobian_partials(&chain);

    let jv: SMatrix<f64, 3, 7> = geo.fixed_view::<3, 7>(0, 0).into_owned();
    let jw: SMatrix<f64, 3, 7> = geo.fixed_view::<3, 7>(3, 0).into_owned();

    let r = so3::unflatten(&state.orientation);
    let a_rot = chain.rotation;
    let b_rot = mount.rotation * a_rot;
    let r_ib = r * b_rot.transpose();
    let r_ia = r * a_rot.transpose();
    let p_be = mount.translation + mount.rotation * chain.position;

    let u = control.base;
    let qd = control.joint_rates;

    // Shared intermediates.
    let jv_qd = jv * qd; // arm-frame linear velocity
    let jw_qd = jw * qd; // arm-frame angular velocity
    let cv = a_rot.transpose() * jv_qd; // A^T Jv qd
    let cw = a_rot.transpose() * jw_qd; // A^T Jw qd
    let w_arm = r_ia * jw_qd; // inertial angular velocity of the arm
    let w2 = nalgebra::Vector2::new(u.x - u.z * p_be.y, u.y + u.z * p_be.x);
    let theta_r = so3::stacked_skew(&r);

    // Velocity itself.
    let mut velocity = StateVector::zeros();
    {
        let base_xy = nalgebra::Vector2::new(
            r_ib[(0, 0)] * w2.x + r_ib[(0, 1)] * w2.y,
            r_ib[(1, 0)] * w2.x + r_ib[(1, 1)] * w2.y,
        );
        let arm_p = r_ia * jv_qd;
        velocity[0] = base_xy.x + arm_p.x;
        velocity[1] = base_xy.y + arm_p.y;
        velocity[2] = arm_p.z;
        let ori = -so3::stacked_skew_yaw_column(&r) * u.z - theta_r * w_arm;
        velocity.fixed_rows_mut::<9>(3).copy_from(&ori);
        velocity.fixed_rows_mut::<7>(12).copy_from(&qd);
    }

    let mut d_state = SMatrix::<f64, 19, 19>::zeros();

    // Orientation partials: columns 3..12, one per entry of R. For the
    // single-entry matrix E_j = e_row e_col^T:
    //   d(R B^T)   = E_j B^T      -> rank-one with row pattern e_row
    //   d(R A^T)   = E_j A^T
    //   d(Theta_3) = Theta_3(E_j), d(Theta) z = block col: e_row x z
    for j in 0..9 {
        let row = j % 3;
        let col = j / 3;
        let e_row = Vector3::ith(row, 1.0);

        // Position rows.
        if row < 2 {
            // [E_j B^T]_{2x2} w2 contributes only to row `row`.
            let b_col = b_rot.column(col);
            d_state[(row, 3 + j)] += b_col[0] * w2.x + b_col[1] * w2.y;
        }
        // E_j A^T Jv qd = e_row * cv[col].
        d_state[(row, 3 + j)] += cv[col];

        // Orientation rows:
        //   -Theta_3(E_j) u3 - Theta(E_j) w_arm - Theta(R) (E_j A^T Jw qd).
        // Theta(E_j) z has a single nonzero block (index `col`): e_row x z.
        let third_col_of_skew = Vector3::new(e_row.y, -e_row.x, 0.0);
        let block = -(third_col_of_skew * u.z) - e_row.cross(&w_arm);
        for i in 0..3 {
            d_state[(3 + 3 * col + i, 3 + j)] += block[i];
        }
        // -Theta(R) e_row * cw[col]: column `row` of Theta(R).
        for i in 0..9 {
            d_state[(3 + i, 3 + j)] -= theta_r[(i, row)] * cw[col];
        }
    }

    // Joint partials: columns 12..19.
    for k in 0..JOINT_COUNT {
        let axis = jw.column(k).into_owned(); // d(A)/dq_k = skew(axis) A
        let d_jv: SMatrix<f64, 3, 7> = partials[k].fixed_view::<3, 7>(0, 0).into_owned();
        let d_jw: SMatrix<f64, 3, 7> = partials[k].fixed_view::<3, 7>(3, 0).into_owned();

        let d_p_be = mount.rotation * jv.column(k);
        let d_w2 = nalgebra::Vector2::new(-u.z * d_p_be.y, u.z * d_p_be.x);

        // d(R^I_b) = -R^I_a skew(axis) R_m^T, d(R^I_a) = -R^I_a skew(axis).
        let d_r_ia = -r_ia * so3::skew(&axis);
        let d_r_ib = d_r_ia * mount.rotation.transpose();

        // Position rows: base part (rows 0..2 only) + arm part.
        let d_base_xy = nalgebra::Vector2::new(
            d_r_ib[(0, 0)] * w2.x + d_r_ib[(0, 1)] * w2.y + r_ib[(0, 0)] * d_w2.x + r_ib[(0, 1)] * d_w2.y,
            d_r_ib[(1, 0)] * w2.x + d_r_ib[(1, 1)] * w2.y + r_ib[(1, 0)] * d_w2.x + r_ib[(1, 1)] * d_w2.y,
        );
        let d_arm_p = d_r_ia * jv_qd + r_ia * (d_jv * qd);
        d_state[(0, 12 + k)] = d_base_xy.x + d_arm_p.x;
        d_state[(1, 12 + k)] = d_base_xy.y + d_arm_p.y;
        d_state[(2, 12 + k)] = d_arm_p.z;

        // Orientation rows: -Theta(R) d(w_arm).
        let d_w_arm = d_r_ia * jw_qd + r_ia * (d_jw * qd);
        let d_ori = -theta_r * d_w_arm;
        for i in 0..9 {
            d_state[(3 + i, 12 + k)] = d_ori[i];
        }
    }

    let d_control = kinematics::whole_body_from_frames(&kinematics::WholeBodyFrames {
        r_ib,
        r_ie: r,
        r_ia,
        p_be,
        jac_linear: jv,
        jac_angular: jw,
    });

    DynamicsDerivatives {
        velocity,
        d_state,
        d_control,
    }
}
