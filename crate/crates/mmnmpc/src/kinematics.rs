//! Kinematics of the 10-DOF platform: DH forward kinematics of the 7-DOF
//! arm, geometric and analytic Jacobians (with closed-form partials), the
//! mecanum wheel map, and assembly of the 19x10 whole-body Jacobian that
//! maps `[u; qdot]` to the rate of the stacked end-effector/joint state.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{self, FlatOrientation};

pub const JOINT_COUNT: usize = 7;

pub type JointVector = SVector<f64, JOINT_COUNT>;
/// 12x7 analytic Jacobian: position rows then flat-orientation rows.
pub type ArmJacobian = SMatrix<f64, 12, 7>;
/// 6x7 geometric Jacobian: linear rows then angular rows.
pub type GeometricJacobian = SMatrix<f64, 6, 7>;
/// 19x10 whole-body Jacobian.
pub type WholeBodyJacobian = SMatrix<f64, 19, 10>;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("DH table must have exactly {JOINT_COUNT} rows, got {0}")]
    WrongRowCount(usize),
    #[error("DH table entry {row}.{field} is not finite")]
    NonFiniteEntry { row: usize, field: &'static str },
    #[error("base geometry field {0} must be positive")]
    NonPositiveGeometry(&'static str),
}

/// One standard (distal) DH row; the joint variable adds to `theta_offset`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

/// Validated 7-row DH table.
#[derive(Debug, Clone)]
pub struct DhTable {
    rows: [DhRow; JOINT_COUNT],
}

impl DhTable {
    pub fn new(rows: Vec<DhRow>) -> Result<Self, KinematicsError> {
        if rows.len() != JOINT_COUNT {
            return Err(KinematicsError::WrongRowCount(rows.len()));
        }
        for (i, row) in rows.iter().enumerate() {
            for (value, field) in [
                (row.a, "a"),
                (row.alpha, "alpha"),
                (row.d, "d"),
                (row.theta_offset, "theta_offset"),
            ] {
                if !value.is_finite() {
                    return Err(KinematicsError::NonFiniteEntry { row: i, field });
                }
            }
        }
        let rows: [DhRow; JOINT_COUNT] = rows.try_into().expect("length checked");
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DhRow; JOINT_COUNT] {
        &self.rows
    }
}

impl Default for DhTable {
    /// Barrett WAM 7-DOF table (meters/radians). Configuration data, not a
    /// property of the algorithms; any 7-row table can be loaded instead.
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let row = |a: f64, alpha: f64, d: f64| DhRow {
            a,
            alpha,
            d,
            theta_offset: 0.0,
        };
        Self {
            rows: [
                row(0.0, -FRAC_PI_2, 0.0),
                row(0.0, FRAC_PI_2, 0.0),
                row(0.045, -FRAC_PI_2, 0.55),
                row(-0.045, FRAC_PI_2, 0.0),
                row(0.0, -FRAC_PI_2, 0.3),
                row(0.0, FRAC_PI_2, 0.0),
                row(0.0, 0.0, 0.06),
            ],
        }
    }
}

/// Mecanum base geometry: wheel radius and half wheelbase/trackwidth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaseGeometry {
    pub wheel_radius: f64,
    pub half_wheelbase: f64,
    pub half_trackwidth: f64,
}

impl BaseGeometry {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.wheel_radius > 0.0) {
            return Err(KinematicsError::NonPositiveGeometry("wheel_radius"));
        }
        if !(self.half_wheelbase > 0.0) {
            return Err(KinematicsError::NonPositiveGeometry("half_wheelbase"));
        }
        if !(self.half_trackwidth > 0.0) {
            return Err(KinematicsError::NonPositiveGeometry("half_trackwidth"));
        }
        Ok(())
    }
}

impl Default for BaseGeometry {
    /// Summit-XLS-class platform.
    fn default() -> Self {
        Self {
            wheel_radius: 0.127,
            half_wheelbase: 0.2345,
            half_trackwidth: 0.2755,
        }
    }
}

/// Fixed transform from the mobile-base frame to the arm base frame.
#[derive(Debug, Clone, Copy)]
pub struct MountOffset {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for MountOffset {
    fn default() -> Self {
        Self {
            rotation: Matrix3::identity(),
            // Arm base on top of the chassis; with the default DH table the
            // fully stretched arm then peaks at z = 1.43 m.
            translation: Vector3::new(0.0, 0.0, 0.52),
        }
    }
}

/// Forward-kinematics chain: per-joint axis lines plus the end-effector
/// pose, everything in the arm base frame.
#[derive(Debug, Clone)]
pub struct FkChain {
    pub joint_origins: [Vector3<f64>; JOINT_COUNT],
    pub joint_axes: [Vector3<f64>; JOINT_COUNT],
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// Walk the DH chain, recording each joint's axis line before applying its
/// transform.
pub fn fk_chain(q: &JointVector, dh: &DhTable) -> FkChain {
    let mut rotation = Matrix3::identity();
    let mut position = Vector3::zeros();
    let mut joint_origins = [Vector3::zeros(); JOINT_COUNT];
    let mut joint_axes = [Vector3::zeros(); JOINT_COUNT];

    for (i, row) in dh.rows().iter().enumerate() {
        joint_origins[i] = position;
        joint_axes[i] = rotation * Vector3::z();

        let theta = q[i] + row.theta_offset;
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = row.alpha.sin_cos();
        let step_rotation = Matrix3::new(
            ct, -st * ca, st * sa, //
            st, ct * ca, -ct * sa, //
            0.0, sa, ca,
        );
        let step_translation = Vector3::new(row.a * ct, row.a * st, row.d);

        position += rotation * step_translation;
        rotation *= step_rotation;
    }

    FkChain {
        joint_origins,
        joint_axes,
        position,
        rotation,
    }
}

/// End-effector pose in the arm base frame.
pub fn forward_kinematics(q: &JointVector, dh: &DhTable) -> (Vector3<f64>, Matrix3<f64>) {
    let chain = fk_chain(q, dh);
    (chain.position, chain.rotation)
}

/// 6x7 geometric Jacobian from the chain: column i is
/// `[axis_i x (p - origin_i); axis_i]`.
pub fn geometric_jacobian(chain: &FkChain) -> GeometricJacobian {
    let mut jac = GeometricJacobian::zeros();
    for i in 0..JOINT_COUNT {
        let linear = chain.joint_axes[i].cross(&(chain.position - chain.joint_origins[i]));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&linear);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&chain.joint_axes[i]);
    }
    jac
}

/// Partials of the geometric Jacobian with respect to each joint angle.
///
/// For revolute joints everything reduces to cross products of the axis
/// lines: with `a_i` the axis and `o_i` the origin of joint i,
///
/// ```text
///   d a_i / d q_k = a_k x a_i                (k < i)
///   d o_i / d q_k = a_k x (o_i - o_k)        (k < i)
///   d p   / d q_k = Jv_k
/// ```
pub fn geometric_jacobian_partials(chain: &FkChain) -> [GeometricJacobian; JOINT_COUNT] {
    let jac = geometric_jacobian(chain);
    let mut partials = [GeometricJacobian::zeros(); JOINT_COUNT];
    for k in 0..JOINT_COUNT {
        let jv_k: Vector3<f64> = jac.fixed_view::<3, 1>(0, k).into_owned();
        let a_k = chain.joint_axes[k];
        let o_k = chain.joint_origins[k];
        for i in 0..JOINT_COUNT {
            let a_i = chain.joint_axes[i];
            let o_i = chain.joint_origins[i];
            let (da, d_origin) = if k < i {
                (a_k.cross(&a_i), a_k.cross(&(o_i - o_k)))
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            let d_linear = da.cross(&(chain.position - o_i)) + a_i.cross(&(jv_k - d_origin));
            partials[k].fixed_view_mut::<3, 1>(0, i).copy_from(&d_linear);
            partials[k].fixed_view_mut::<3, 1>(3, i).copy_from(&da);
        }
    }
    partials
}

/// 12x7 analytic Jacobian of the flattened end-effector pose `[p; theta]`
/// with respect to the joint angles: `[Jv; -Theta(R) Jw]`.
pub fn analytic_jacobian(q: &JointVector, dh: &DhTable) -> ArmJacobian {
    let chain = fk_chain(q, dh);
    let geo = geometric_jacobian(&chain);
    let theta = so3::stacked_skew(&chain.rotation);
    let mut jac = ArmJacobian::zeros();
    jac.fixed_view_mut::<3, 7>(0, 0)
        .copy_from(&geo.fixed_view::<3, 7>(0, 0).into_owned());
    let angular: SMatrix<f64, 3, 7> = geo.fixed_view::<3, 7>(3, 0).into_owned();
    jac.fixed_view_mut::<9, 7>(3, 0).copy_from(&(-theta * angular));
    jac
}

/// Wheel map H: body twist `(u1, u2, u3)` to the four wheel speeds.
pub fn wheel_matrix(geometry: &BaseGeometry) -> SMatrix<f64, 4, 3> {
    let k = geometry.half_wheelbase + geometry.half_trackwidth;
    SMatrix::<f64, 4, 3>::new(
        1.0, -1.0, -k, //
        1.0, 1.0, k, //
        1.0, -1.0, k, //
        1.0, 1.0, -k,
    ) / geometry.wheel_radius
}

pub fn wheel_speeds(u: &Vector3<f64>, geometry: &BaseGeometry) -> SVector<f64, 4> {
    wheel_matrix(geometry) * u
}

/// Planar end-effector velocity induced by the base twist:
/// `[R]_2x2 (u1, u2) + psi u3` with `psi = [R]_2x2 (-y_E, x_E)`.
pub fn base_ee_linear_velocity(
    u: &Vector3<f64>,
    gamma: f64,
    ee_in_base_xy: &Vector2<f64>,
) -> Vector2<f64> {
    let (s, c) = gamma.sin_cos();
    let rot = nalgebra::Matrix2::new(c, -s, s, c);
    let lever = Vector2::new(-ee_in_base_xy.y, ee_in_base_xy.x);
    rot * (Vector2::new(u.x, u.y) + lever * u.z)
}

/// Gram determinant of the 6x7 geometric Jacobian, `det(Jg Jg^T)`: the
/// squared manipulability. Zero exactly at kinematic singularities of the
/// arm, where the pseudo-inverse `Jg^T (Jg Jg^T)^{-1}` ceases to exist.
pub fn singularity_measure(q: &JointVector, dh: &DhTable) -> f64 {
    let chain = fk_chain(q, dh);
    let jac = geometric_jacobian(&chain);
    let gram = jac * jac.transpose();
    gram.determinant()
}

/// Gradient of [`singularity_measure`]:
/// `d det(G) = tr(adj(G) dG)` with `dG = D_k Jg^T + Jg D_k^T`.
pub fn singularity_measure_gradient(q: &JointVector, dh: &DhTable) -> JointVector {
    let chain = fk_chain(q, dh);
    let jac = geometric_jacobian(&chain);
    let partials = geometric_jacobian_partials(&chain);
    let gram = jac * jac.transpose();
    let adj = adjugate6(&gram);
    // 2 tr(Jg^T adj(G) D_k) since G and its adjugate are symmetric.
    let weighted = jac.transpose() * adj;
    let mut grad = JointVector::zeros();
    for k in 0..JOINT_COUNT {
        let mut trace = 0.0;
        for r in 0..JOINT_COUNT {
            for c in 0..6 {
                trace += weighted[(r, c)] * partials[k][(c, r)];
            }
        }
        grad[k] = 2.0 * trace;
    }
    grad
}

/// Adjugate of a 6x6 matrix via cofactors; exact even at singular input.
fn adjugate6(m: &SMatrix<f64, 6, 6>) -> SMatrix<f64, 6, 6> {
    let dynamic = nalgebra::DMatrix::from_column_slice(6, 6, m.as_slice());
    let mut adj = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..6 {
        for j in 0..6 {
            let minor = dynamic.clone().remove_row(i).remove_column(j);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = transposed cofactor matrix.
            adj[(j, i)] = sign * minor.determinant();
        }
    }
    adj
}

/// Ingredients shared by the two whole-body Jacobian entry points.
pub(crate) struct WholeBodyFrames {
    /// Base orientation in the inertial frame (may be non-orthogonal when
    /// derived from a drifted predicted state).
    pub r_ib: Matrix3<f64>,
    /// End-effector orientation in the inertial frame.
    pub r_ie: Matrix3<f64>,
    /// Arm base orientation in the inertial frame.
    pub r_ia: Matrix3<f64>,
    /// End-effector position in the mobile-base frame.
    pub p_be: Vector3<f64>,
    pub jac_linear: SMatrix<f64, 3, 7>,
    pub jac_angular: SMatrix<f64, 3, 7>,
}

pub(crate) fn whole_body_from_frames(frames: &WholeBodyFrames) -> WholeBodyJacobian {
    let mut jac = WholeBodyJacobian::zeros();

    // Base columns, position rows (the z row stays zero: planar base).
    jac[(0, 0)] = frames.r_ib[(0, 0)];
    jac[(0, 1)] = frames.r_ib[(0, 1)];
    jac[(1, 0)] = frames.r_ib[(1, 0)];
    jac[(1, 1)] = frames.r_ib[(1, 1)];
    let psi_x = frames.r_ib[(0, 0)] * (-frames.p_be.y) + frames.r_ib[(0, 1)] * frames.p_be.x;
    let psi_y = frames.r_ib[(1, 0)] * (-frames.p_be.y) + frames.r_ib[(1, 1)] * frames.p_be.x;
    jac[(0, 2)] = psi_x;
    jac[(1, 2)] = psi_y;

    // Base yaw column, orientation rows.
    let yaw_column = so3::stacked_skew_yaw_column(&frames.r_ie);
    for r in 0..9 {
        jac[(3 + r, 2)] = -yaw_column[r];
    }

    // Arm columns in the inertial frame.
    let jv = frames.r_ia * frames.jac_linear;
    let jw = frames.r_ia * frames.jac_angular;
    let theta = so3::stacked_skew(&frames.r_ie);
    let ori = -theta * jw;
    jac.fixed_view_mut::<3, 7>(0, 3).copy_from(&jv);
    jac.fixed_view_mut::<9, 7>(3, 3).copy_from(&ori);

    // Joint rows: identity.
    for i in 0..JOINT_COUNT {
        jac[(12 + i, 3 + i)] = 1.0;
    }
    jac
}

pub(crate) fn frames_from_base_pose(
    gamma: f64,
    q: &JointVector,
    dh: &DhTable,
    mount: &MountOffset,
) -> WholeBodyFrames {
    let chain = fk_chain(q, dh);
    let geo = geometric_jacobian(&chain);
    let r_ib = so3::rotz(gamma);
    let r_ia = r_ib * mount.rotation;
    WholeBodyFrames {
        r_ib,
        r_ie: r_ia * chain.rotation,
        r_ia,
        p_be: mount.translation + mount.rotation * chain.position,
        jac_linear: geo.fixed_view::<3, 7>(0, 0).into_owned(),
        jac_angular: geo.fixed_view::<3, 7>(3, 0).into_owned(),
    }
}

pub(crate) fn frames_from_state(
    theta: &FlatOrientation,
    q: &JointVector,
    dh: &DhTable,
    mount: &MountOffset,
) -> WholeBodyFrames {
    let chain = fk_chain(q, dh);
    let geo = geometric_jacobian(&chain);
    let r_ie = so3::unflatten(theta);
    // The base orientation implied by the state: R^I_b = R^I_E (R^b_E)^T.
    let r_be = mount.rotation * chain.rotation;
    let r_ib = r_ie * r_be.transpose();
    WholeBodyFrames {
        r_ib,
        r_ie,
        r_ia: r_ie * chain.rotation.transpose(),
        p_be: mount.translation + mount.rotation * chain.position,
        jac_linear: geo.fixed_view::<3, 7>(0, 0).into_owned(),
        jac_angular: geo.fixed_view::<3, 7>(3, 0).into_owned(),
    }
}

/// Whole-body Jacobian for an on-manifold configuration given by the base
/// yaw and joint angles.
pub fn assemble_whole_body(
    gamma: f64,
    q: &JointVector,
    dh: &DhTable,
    mount: &MountOffset,
) -> WholeBodyJacobian {
    whole_body_from_frames(&frames_from_base_pose(gamma, q, dh, mount))
}

/// Whole-body Jacobian as a function of the 19-dimensional state alone
/// (the prediction-model form; the base orientation is recovered from the
/// flattened end-effector orientation and the arm forward kinematics).
pub fn whole_body_from_state(
    theta: &FlatOrientation,
    q: &JointVector,
    dh: &DhTable,
    mount: &MountOffset,
) -> WholeBodyJacobian {
    whole_body_from_frames(&frames_from_state(theta, q, dh, mount))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// Independent oracle: chain the textbook homogeneous DH matrices.
    fn dh_transform_oracle(q: &JointVector, dh: &DhTable) -> Matrix4<f64> {
        let mut t = Matrix4::identity();
        for (i, row) in dh.rows().iter().enumerate() {
            let theta = q[i] + row.theta_offset;
            let (st, ct) = theta.sin_cos();
            let (sa, ca) = row.alpha.sin_cos();
            let a = Matrix4::new(
                ct,
                -st * ca,
                st * sa,
                row.a * ct,
                st,
                ct * ca,
                -ct * sa,
                row.a * st,
                0.0,
                sa,
                ca,
                row.d,
                0.0,
                0.0,
                0.0,
                1.0,
            );
            t *= a;
        }
        t
    }

    fn random_joints(rng: &mut ChaCha8Rng) -> JointVector {
        JointVector::from_fn(|_, _| rng.random_range(-1.2..1.2))
    }

    #[test]
    fn forward_kinematics_matches_chained_transform_oracle() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let q = random_joints(&mut rng);
            let (p, r) = forward_kinematics(&q, &dh);
            let t = dh_transform_oracle(&q, &dh);
            for i in 0..3 {
                assert_relative_eq!(p[i], t[(i, 3)], epsilon = 1e-12);
                for j in 0..3 {
                    assert_relative_eq!(r[(i, j)], t[(i, j)], epsilon = 1e-12);
                }
            }
        }
        // Zero posture of the default table: fully stretched upward.
        let (p, r) = forward_kinematics(&JointVector::zeros(), &dh);
        assert_relative_eq!(p.z, 0.91, epsilon = 1e-12);
        assert!(p.xy().norm() < 1e-12);
        assert!((r - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn first_joint_rotates_about_base_z() {
        let dh = DhTable::default();
        let q0 = JointVector::from_column_slice(&[0.0, 0.4, 0.1, 0.7, -0.2, 0.3, 0.0]);
        let (p0, _) = forward_kinematics(&q0, &dh);
        for delta in [0.3, -0.8, 1.4] {
            let mut q = q0;
            q[0] += delta;
            let (p, _) = forward_kinematics(&q, &dh);
            let expected = so3::rotz(delta) * p0;
            assert!((p - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn rotation_stays_orthonormal() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = random_joints(&mut rng);
            let (_, r) = forward_kinematics(&q, &dh);
            assert!(so3::is_rotation(&r, 1e-12));
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_joints(&mut rng);
            let jac = analytic_jacobian(&q, &dh);
            for k in 0..JOINT_COUNT {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let (pp, rp) = forward_kinematics(&qp, &dh);
                let (pm, rm) = forward_kinematics(&qm, &dh);
                for r in 0..3 {
                    let fd = (pp[r] - pm[r]) / (2.0 * h);
                    let rel = (jac[(r, k)] - fd).abs() / jac[(r, k)].abs().max(fd.abs()).max(1.0);
                    assert!(rel < 1e-5, "position row {r} joint {k}: rel {rel}");
                }
                let tp = so3::flatten(&rp);
                let tm = so3::flatten(&rm);
                for r in 0..9 {
                    let fd = (tp[r] - tm[r]) / (2.0 * h);
                    let rel =
                        (jac[(3 + r, k)] - fd).abs() / jac[(3 + r, k)].abs().max(fd.abs()).max(1.0);
                    assert!(rel < 1e-5, "orientation row {r} joint {k}: rel {rel}");
                }
            }
        }
    }

    #[test]
    fn analytic_orientation_rows_follow_stacked_skew_structure() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let q = random_joints(&mut rng);
            let chain = fk_chain(&q, &dh);
            let geo = geometric_jacobian(&chain);
            let jac = analytic_jacobian(&q, &dh);
            let jw: SMatrix<f64, 3, 7> = geo.fixed_view::<3, 7>(3, 0).into_owned();
            let expected = -so3::stacked_skew(&chain.rotation) * jw;
            let block: SMatrix<f64, 9, 7> = jac.fixed_view::<9, 7>(3, 0).into_owned();
            assert!((block - expected).amax() < 1e-14);
        }
    }

    #[test]
    fn geometric_jacobian_partials_match_finite_differences() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = 1e-6;
        for _ in 0..30 {
            let q = random_joints(&mut rng);
            let partials = geometric_jacobian_partials(&fk_chain(&q, &dh));
            for k in 0..JOINT_COUNT {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let jp = geometric_jacobian(&fk_chain(&qp, &dh));
                let jm = geometric_jacobian(&fk_chain(&qm, &dh));
                let fd = (jp - jm) / (2.0 * h);
                assert!(
                    (partials[k] - fd).amax() < 1e-7,
                    "partial {k} max err {}",
                    (partials[k] - fd).amax()
                );
            }
        }
    }

    #[test]
    fn wheel_map_columns() {
        let geometry = BaseGeometry {
            wheel_radius: 0.1,
            half_wheelbase: 0.2,
            half_trackwidth: 0.3,
        };
        let v = wheel_speeds(&Vector3::new(1.0, 0.0, 0.0), &geometry);
        for i in 0..4 {
            assert_relative_eq!(v[i], 10.0, epsilon = 1e-14);
        }
        let v = wheel_speeds(&Vector3::new(0.0, 0.0, 1.0), &geometry);
        let k = 0.5 / 0.1;
        let expected = [-k, k, k, -k];
        for i in 0..4 {
            assert_relative_eq!(v[i], expected[i], epsilon = 1e-14);
        }
        assert_eq!(
            wheel_speeds(&Vector3::zeros(), &geometry),
            SVector::<f64, 4>::zeros()
        );
        // Exact homogeneity.
        let u = Vector3::new(0.3, -0.7, 0.4);
        let scaled = wheel_speeds(&(2.5 * u), &geometry);
        let direct = 2.5 * wheel_speeds(&u, &geometry);
        assert_eq!(scaled, direct);
    }

    #[test]
    fn base_velocity_map_examples_and_finite_difference() {
        let p_e = Vector2::new(0.4, -0.2);
        // Pure forward motion at zero yaw.
        let v = base_ee_linear_velocity(&Vector3::new(1.3, 0.0, 0.0), 0.0, &p_e);
        assert_relative_eq!(v.x, 1.3, epsilon = 1e-14);
        assert_relative_eq!(v.y, 0.0, epsilon = 1e-14);
        // Pure spin: lever-arm term.
        let w = 0.7;
        let v = base_ee_linear_velocity(&Vector3::new(0.0, 0.0, w), 0.0, &p_e);
        assert_relative_eq!(v.x, -w * p_e.y, epsilon = 1e-14);
        assert_relative_eq!(v.y, w * p_e.x, epsilon = 1e-14);

        // Finite difference of the rigid-body position map
        // p(t) = p_base(t) + R(gamma(t)) p_E.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let gamma = rng.random_range(-3.0..3.0);
            let u = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let p_e = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let dt = 1e-7;
            let pose_at = |t: f64| {
                // Base pose integrated exactly for constant body twist.
                let g = gamma + u.z * t;
                // For small t, first-order position update suffices for the check.
                let (s, c) = gamma.sin_cos();
                let dx = (c * u.x - s * u.y) * t;
                let dy = (s * u.x + c * u.y) * t;
                let (sg, cg) = g.sin_cos();
                Vector2::new(
                    dx + cg * p_e.x - sg * p_e.y,
                    dy + sg * p_e.x + cg * p_e.y,
                )
            };
            let fd = (pose_at(dt) - pose_at(-dt)) / (2.0 * dt);
            let analytic = base_ee_linear_velocity(&u, gamma, &p_e);
            assert!((fd - analytic).amax() < 1e-6);
        }
    }

    #[test]
    fn whole_body_blocks_at_zero_yaw() {
        let dh = DhTable::default();
        let mount = MountOffset::default();
        let q = JointVector::from_column_slice(&[0.3, 0.5, -0.2, 0.8, 0.1, -0.4, 0.2]);
        let jac = assemble_whole_body(0.0, &q, &dh, &mount);

        let chain = fk_chain(&q, &dh);
        let p_be = mount.translation + mount.rotation * chain.position;
        assert_relative_eq!(jac[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(jac[(0, 1)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(jac[(1, 0)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(jac[(1, 1)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(jac[(0, 2)], -p_be.y, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 2)], p_be.x, epsilon = 1e-12);
    }

    #[test]
    fn whole_body_block_structure_invariants() {
        let dh = DhTable::default();
        let mount = MountOffset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..50 {
            let gamma = rng.random_range(-3.0..3.0);
            let q = random_joints(&mut rng);
            let jac = assemble_whole_body(gamma, &q, &dh, &mount);
            // z row of the base block is zero.
            for c in 0..3 {
                assert_eq!(jac[(2, c)], 0.0);
            }
            // Orientation rows have no u1/u2 coupling.
            for r in 3..12 {
                assert_eq!(jac[(r, 0)], 0.0);
                assert_eq!(jac[(r, 1)], 0.0);
            }
            // Bottom-left block zero, bottom-right identity.
            for r in 12..19 {
                for c in 0..10 {
                    let expected = if c == r - 9 { 1.0 } else { 0.0 };
                    assert_eq!(jac[(r, c)], expected, "({r}, {c})");
                }
            }
            // The yaw orientation column is the negated stacked-skew column
            // of the end-effector rotation.
            let r_ie = so3::rotz(gamma) * mount.rotation * fk_chain(&q, &dh).rotation;
            let col = so3::stacked_skew_yaw_column(&r_ie);
            for r in 0..9 {
                assert_relative_eq!(jac[(3 + r, 2)], -col[r], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn state_form_matches_base_pose_form_on_manifold() {
        let dh = DhTable::default();
        let mount = MountOffset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let gamma = rng.random_range(-3.0..3.0);
            let q = random_joints(&mut rng);
            let chain = fk_chain(&q, &dh);
            let theta = so3::flatten(&(so3::rotz(gamma) * mount.rotation * chain.rotation));
            let a = assemble_whole_body(gamma, &q, &dh, &mount);
            let b = whole_body_from_state(&theta, &q, &dh, &mount);
            assert!((a - b).amax() < 1e-13);
        }
    }

    #[test]
    fn singularity_measure_behaves() {
        let dh = DhTable::default();
        // Fully stretched arm is (near-)singular; a bent posture is not.
        let stretched = singularity_measure(&JointVector::zeros(), &dh);
        let bent = singularity_measure(
            &JointVector::from_column_slice(&[0.2, 0.6, -0.1, 1.2, 0.3, -0.6, 0.1]),
            &dh,
        );
        assert!(stretched >= 0.0);
        assert!(
            stretched < 1e-3 * bent,
            "stretched {stretched} vs bent {bent}"
        );

        // Continuity: small joint changes move the measure slightly.
        let q = JointVector::from_column_slice(&[0.2, 0.6, -0.1, 1.2, 0.3, -0.6, 0.1]);
        let m0 = singularity_measure(&q, &dh);
        for step in [1e-3, 1e-5, 1e-7] {
            let mut qd = q;
            qd[3] += step;
            let delta = (singularity_measure(&qd, &dh) - m0).abs();
            assert!(delta < 10.0 * step * m0.max(1.0), "step {step} delta {delta}");
        }
    }

    #[test]
    fn singularity_gradient_matches_finite_differences() {
        let dh = DhTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let h = 1e-6;
        for _ in 0..30 {
            let q = random_joints(&mut rng);
            let grad = singularity_measure_gradient(&q, &dh);
            for k in 0..JOINT_COUNT {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (singularity_measure(&qp, &dh) - singularity_measure(&qm, &dh)) / (2.0 * h);
                let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "joint {k}: analytic {} fd {fd}", grad[k]);
            }
        }
    }

    #[test]
    fn dh_table_validation() {
        assert!(matches!(
            DhTable::new(vec![
                DhRow { a: 0.0, alpha: 0.0, d: 0.0, theta_offset: 0.0 };
                5
            ]),
            Err(KinematicsError::WrongRowCount(5))
        ));
        let mut rows = DhTable::default().rows().to_vec();
        rows[2].d = f64::NAN;
        assert!(matches!(
            DhTable::new(rows),
            Err(KinematicsError::NonFiniteEntry { row: 2, field: "d" })
        ));
    }

    #[test]
    fn default_geometry_is_valid() {
        BaseGeometry::default().validate().unwrap();
        let bad = BaseGeometry {
            wheel_radius: 0.0,
            ..BaseGeometry::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wam_alpha_pattern() {
        let dh = DhTable::default();
        let alphas: Vec<f64> = dh.rows().iter().map(|r| r.alpha).collect();
        let expected = [
            -FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2, FRAC_PI_2, 0.0,
        ];
        for (a, b) in alphas.iter().zip(expected.iter()) {
            assert_eq!(a, b);
        }
    }
}
