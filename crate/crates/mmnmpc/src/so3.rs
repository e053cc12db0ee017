//! Rotation-matrix algebra for the flattened SO(3) orientation state.
//!
//! Orientations are carried through the controller as the 9-vector of
//! column-stacked rotation matrix entries,
//!
//! ```text
//!   theta = [ col_1(R); col_2(R); col_3(R) ],
//! ```
//!
//! which avoids the representation singularities of Euler angles. The
//! derivative of a rotation satisfies `dR/dt = S(omega) R`, which in
//! stacked form reads `dtheta/dt = -Theta(R) omega` with `Theta` the 9x3
//! matrix of per-column skew blocks built here.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

/// Column-stacked image of a rotation matrix.
pub type FlatOrientation = SVector<f64, 9>;

/// 9x3 stack of the skew matrices of the three columns of R.
pub type StackedSkew = SMatrix<f64, 9, 3>;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    /// The polar projection has no unique rotation factor.
    #[error("degenerate orientation: matrix is singular or nearly singular")]
    DegenerateOrientation,
}

/// Cross-product matrix: `skew(v) * w == v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Column-stack a 3x3 matrix into a 9-vector.
pub fn flatten(r: &Matrix3<f64>) -> FlatOrientation {
    // nalgebra stores matrices column-major, so the raw slice is already
    // the column stack.
    FlatOrientation::from_column_slice(r.as_slice())
}

/// Rebuild a 3x3 matrix from its column stack. Validity is not enforced:
/// predicted orientations may drift off SO(3) and are repaired separately
/// with [`orthonormalize`].
pub fn unflatten(theta: &FlatOrientation) -> Matrix3<f64> {
    Matrix3::from_column_slice(theta.as_slice())
}

/// Nearest rotation in the Frobenius norm via the polar decomposition
/// (SVD with determinant correction).
pub fn orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>, So3Error> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(So3Error::DegenerateOrientation)?;
    let v_t = svd.v_t.ok_or(So3Error::DegenerateOrientation)?;
    if svd.singular_values.min() <= 1e-12 * svd.singular_values.max().max(1e-300) {
        return Err(So3Error::DegenerateOrientation);
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to land on SO(3), not O(3).
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    Ok(r)
}

pub fn rotx(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, c, -s, //
        0.0, s, c,
    )
}

pub fn roty(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(
        c, 0.0, s, //
        0.0, 1.0, 0.0, //
        -s, 0.0, c,
    )
}

pub fn rotz(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(
        c, -s, 0.0, //
        s, c, 0.0, //
        0.0, 0.0, 1.0,
    )
}

/// Z-Y-X Euler angles to a rotation matrix: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_zyx_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rotz(yaw) * roty(pitch) * rotx(roll)
}

/// Stack of skew matrices of the columns of `m`: row block i is
/// `skew(col_i(m))`. Linear in `m`, so it is also used on perturbation
/// matrices when differentiating.
pub fn stacked_skew(m: &Matrix3<f64>) -> StackedSkew {
    let mut theta = StackedSkew::zeros();
    for i in 0..3 {
        let block = skew(&m.column(i).into_owned());
        theta.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&block);
    }
    theta
}

/// Third column of [`stacked_skew`]: the only column that survives when
/// the angular velocity is a pure yaw rate.
pub fn stacked_skew_yaw_column(m: &Matrix3<f64>) -> FlatOrientation {
    let mut col = FlatOrientation::zeros();
    for i in 0..3 {
        let c = m.column(i);
        // Third column of skew((x, y, z)) is (y, -x, 0).
        col[3 * i] = c.y;
        col[3 * i + 1] = -c.x;
    }
    col
}

/// Orientation error vector between the current end-effector rotation and
/// the reference: `flatten(I) - flatten(R_current^T * R_reference)`.
pub fn orientation_error(r_current: &Matrix3<f64>, r_reference: &Matrix3<f64>) -> FlatOrientation {
    let relative = r_current.transpose() * r_reference;
    flatten(&Matrix3::identity()) - flatten(&relative)
}

/// Trace-based orientation distance `3 - tr(R_current * R_reference^T)`,
/// in `[0, 4]`; zero iff the rotations coincide.
pub fn orientation_metric(r_current: &Matrix3<f64>, r_reference: &Matrix3<f64>) -> f64 {
    3.0 - (r_current * r_reference.transpose()).trace()
}

/// Frobenius distance of `R^T R` from the identity.
pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// True when `r` is a rotation matrix within `tol` (orthonormality and
/// positive determinant).
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    orthonormality_defect(r) <= tol && (r.determinant() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        let angle = rng.random_range(-PI..PI);
        rotation_about(&axis, angle)
    }

    pub(crate) fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
        // Rodrigues formula.
        let k = skew(axis);
        Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
    }

    #[test]
    fn skew_matches_cross_product_definition() {
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_eq!(skew(&Vector3::x()), expected);
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let w = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let m = skew(&v);
            assert!((m + m.transpose()).norm() == 0.0);
            assert!((m * w - v.cross(&w)).amax() < 1e-14);
        }
    }

    #[test]
    fn flatten_identity_and_z_rotation() {
        let flat = flatten(&Matrix3::identity());
        assert_eq!(
            flat.as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
        let flat = flatten(&rotz(FRAC_PI_2));
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in flat.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let back = unflatten(&flatten(&r));
            assert_eq!(back, r, "round trip must be exact");
        }
    }

    #[test]
    fn orthonormalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            // A valid rotation is a fixed point.
            let fixed = orthonormalize(&r).unwrap();
            assert!((fixed - r).amax() < 1e-14);
            // Uniform scaling does not move the polar factor.
            let scaled = orthonormalize(&(1.01 * r)).unwrap();
            assert!((scaled - r).amax() < 1e-10);
            // Small perturbations are repaired to machine-precision SO(3).
            let noise = Matrix3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
            let repaired = orthonormalize(&(r + noise)).unwrap();
            assert!(orthonormality_defect(&repaired) < 1e-12);
            assert!((repaired.determinant() - 1.0).abs() < 1e-12);
            // Idempotent.
            let twice = orthonormalize(&repaired).unwrap();
            assert!((twice - repaired).amax() < 1e-14);
        }
    }

    #[test]
    fn orthonormalize_rejects_singular_input() {
        let mut m = Matrix3::zeros();
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        assert_eq!(orthonormalize(&m), Err(So3Error::DegenerateOrientation));
    }

    #[test]
    fn rotz_examples_and_angle_addition() {
        assert!((rotz(0.0) - Matrix3::identity()).amax() == 0.0);
        let half_turn = rotz(PI);
        let expected = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!((half_turn - expected).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = rng.random_range(-PI..PI);
            let b = rng.random_range(-PI..PI);
            assert!((rotz(a) * rotz(b) - rotz(a + b)).amax() < 1e-14);
        }
    }

    #[test]
    fn stacked_skew_blocks_and_identity_yaw_column() {
        let theta = stacked_skew(&Matrix3::identity());
        for i in 0..3 {
            let block = theta.fixed_view::<3, 3>(3 * i, 0).into_owned();
            let axis = Matrix3::identity().column(i).into_owned();
            assert_eq!(block, skew(&axis));
        }
        // Third column at the identity: stack of third columns of
        // skew(e1), skew(e2), skew(e3) = (0,-1,0), (1,0,0), (0,0,0).
        let col = stacked_skew_yaw_column(&Matrix3::identity());
        let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(col.as_slice(), &expected);
        assert_eq!(col, stacked_skew(&Matrix3::identity()) * Vector3::z());
    }

    #[test]
    fn stacked_skew_reproduces_rotation_rate() {
        // -Theta(R) w must equal the column stack of skew(w) R.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let w = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let direct = flatten(&(skew(&w) * r));
            let via_theta = -stacked_skew(&r) * w;
            assert!((direct - via_theta).amax() < 1e-14);
        }
    }

    #[test]
    fn orientation_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_rotation(&mut rng);
        assert!(orientation_error(&r, &r).amax() < 1e-15);

        let err = orientation_error(&Matrix3::identity(), &rotx(PI));
        let expected = [0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        for (a, b) in err.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }

        // The error norm is invariant under a common left rotation.
        for _ in 0..50 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let q = random_rotation(&mut rng);
            let base = orientation_error(&r1, &r2).norm();
            let moved = orientation_error(&(q * r1), &(q * r2)).norm();
            assert_relative_eq!(base, moved, epsilon = 1e-12);
        }
    }

    #[test]
    fn orientation_metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_rotation(&mut rng);
        assert!(orientation_metric(&r, &r).abs() < 1e-14);
        assert_relative_eq!(
            orientation_metric(&Matrix3::identity(), &rotx(PI)),
            4.0,
            epsilon = 1e-15
        );
        // Axis-angle identity: metric = 2 (1 - cos(angle)).
        for _ in 0..100 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(-PI..PI);
            let base = random_rotation(&mut rng);
            let rotated = rotation_about(&axis, angle) * base;
            let metric = orientation_metric(&rotated, &base);
            assert_relative_eq!(metric, 2.0 * (1.0 - angle.cos()), epsilon = 1e-10);
        }
    }

    #[test]
    fn metric_and_error_vanish_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let perturbation = rng.random_range(1e-6..1e-2);
            let axis = Vector3::new(1.0, -0.3, 0.2).normalize();
            let moved = rotation_about(&axis, perturbation) * r;
            let metric = orientation_metric(&moved, &r);
            let err = orientation_error(&moved, &r).norm();
            assert!(metric > 0.0 && err > 0.0);
            let metric0 = orientation_metric(&r, &r);
            let err0 = orientation_error(&r, &r).norm();
            assert!(metric0.abs() < 1e-13 && err0 < 1e-13);
        }
    }

    #[test]
    fn euler_zyx_composition_order() {
        let r = euler_zyx_to_rotation(0.3, -0.2, 0.9);
        let direct = rotz(0.3) * roty(-0.2) * rotx(0.9);
        assert_eq!(r, direct);
        assert!(is_rotation(&r, 1e-14));
    }
}
