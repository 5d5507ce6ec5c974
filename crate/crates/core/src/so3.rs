//! Rotations in SO(3): metrics, sampling, projection and the geodesic L1 mean.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

/// Tolerance used when validating the orthonormality of a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-12;

/// Smallest singular value accepted by [`project_to_so3`].
pub const RANK_TOLERANCE: f64 = 1e-12;

const SMALL_ANGLE: f64 = 1e-6;

/// Regularizer of the Weiszfeld weights, in radians.
pub const WEISZFELD_DELTA: f64 = 1e-8;
const WEISZFELD_STEP_TOL: f64 = 1e-10;
const WEISZFELD_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficientInput(f64),
    #[error("matrix is not a rotation (orthonormality error {orthonormality:e}, det {det})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("invalid angle range [{min}, {max}] degrees")]
    InvalidRange { min: f64, max: f64 },
    #[error("cannot average an empty set of rotations")]
    EmptyInput,
    #[error("non-finite matrix entry")]
    NonFinite,
}

/// A 3x3 orthonormal matrix with unit determinant.
#[derive(Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl fmt::Debug for RotationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RotationMatrix({:?})", self.0.as_slice())
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking the rotation invariants at `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self, So3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(So3Error::NonFinite);
        }
        let orthonormality = orthonormality_error(&m);
        let det = m.determinant();
        if orthonormality > tol || (det - 1.0).abs() > tol {
            return Err(So3Error::NotARotation { orthonormality, det });
        }
        Ok(Self(m))
    }

    /// Wraps `m` without any check. The caller guarantees `m` is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Row-major construction, checked at [`ROTATION_TOLERANCE`].
    pub fn from_row_slice(entries: &[f64; 9]) -> Result<Self, So3Error> {
        Self::from_matrix(Matrix3::from_row_slice(entries), ROTATION_TOLERANCE)
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Rotation by `angle` radians about the `x`, `y` or `z` axis.
    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Intrinsic ZYX Euler angles: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::about_z(yaw) * Self::about_y(pitch) * Self::about_x(roll)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let sin = 0.5 * vee_skew(m).norm();
        let cos = 0.5 * (m.trace() - 1.0);
        sin.atan2(cos)
    }

    /// Logarithm map to the rotation vector (axis times angle).
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let angle = self.angle();
        let skew = vee_skew(m);
        if angle < SMALL_ANGLE {
            // theta / sin(theta) = 1 + theta^2 / 6 + O(theta^4)
            return 0.5 * skew * (1.0 + angle * angle / 6.0);
        }
        if PI - angle < SMALL_ANGLE {
            // (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T
            let cos = angle.cos();
            let sym = 0.5 * (m + m.transpose()) - Matrix3::identity() * cos;
            let k = (0..3)
                .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
                .unwrap_or(0);
            let mut axis: Vector3<f64> = sym.column(k).into_owned();
            let norm = axis.norm();
            if norm == 0.0 {
                return Vector3::new(angle, 0.0, 0.0);
            }
            axis /= norm;
            if axis.dot(&skew) < 0.0 {
                axis = -axis;
            }
            return axis * angle;
        }
        skew * (angle / (2.0 * angle.sin()))
    }

    /// Exponential map of a rotation vector (Rodrigues' formula).
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let angle = omega.norm();
        let k = skew(omega);
        if angle < SMALL_ANGLE {
            return Self(Matrix3::identity() + k + 0.5 * k * k);
        }
        let a = angle.sin() / angle;
        let b = (1.0 - angle.cos()) / (angle * angle);
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        let omega = self.log();
        let angle = omega.norm();
        if angle == 0.0 {
            AxisAngle { axis: Vector3::x(), angle: 0.0 }
        } else {
            AxisAngle { axis: omega / angle, angle }
        }
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl Mul<&RotationMatrix> for &RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// Unit axis and angle in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Vector3<f64>,
    pub angle: f64,
}

impl AxisAngle {
    pub fn to_rotation(&self) -> RotationMatrix {
        RotationMatrix::exp(&(self.axis * self.angle))
    }
}

fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m * m.transpose() - Matrix3::identity()).amax()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `vee(M - M^T)`: twice the axial vector of the skew part.
fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Nearest rotation in the Frobenius sense, `U diag(1, 1, det(U V^T)) V^T`.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<RotationMatrix, So3Error> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(So3Error::NonFinite);
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(So3Error::RankDeficientInput(0.0)),
    };
    let sv = svd.singular_values;
    let (smallest, min_sv) = sv
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((2, 0.0));
    if min_sv <= RANK_TOLERANCE {
        return Err(So3Error::RankDeficientInput(min_sv));
    }
    let mut d = Matrix3::identity();
    d[(smallest, smallest)] = (u * v_t).determinant().signum();
    Ok(RotationMatrix(u * d * v_t))
}

/// Angle of `B A^T` in degrees, in `[0, 180]`.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    geodesic_distance_rad(a, b).to_degrees()
}

pub fn geodesic_distance_rad(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    (b * &a.transpose()).angle()
}

/// Frobenius norm of `A - B`.
pub fn chordal_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    (a.0 - b.0).norm()
}

/// Haar-distributed rotation (Shoemake's subgroup algorithm).
pub fn random_rotation_uniform<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    // unit quaternion (w, x, y, z)
    let q = nalgebra::Quaternion::new(b * c3, a * s2, a * c2, b * s3);
    let uq = nalgebra::UnitQuaternion::from_quaternion(q);
    RotationMatrix(*uq.to_rotation_matrix().matrix())
}

/// `Rz(a) Ry(b) Rx(c)` with `a, c` uniform on `[0, 2pi)` and `b` uniform on `[-pi/2, pi/2]`.
pub fn random_rotation_euler<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    let yaw = rng.random_range(0.0..2.0 * PI);
    let pitch = rng.random_range(-PI / 2.0..=PI / 2.0);
    let roll = rng.random_range(0.0..2.0 * PI);
    RotationMatrix::from_euler_zyx(yaw, pitch, roll)
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let rho = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
}

/// Rotation with angle uniform in `[angle_min, angle_max]` degrees about a uniform axis.
pub fn random_perturbation<R: Rng + ?Sized>(
    rng: &mut R,
    angle_min: f64,
    angle_max: f64,
) -> Result<RotationMatrix, So3Error> {
    if !(0.0..=180.0).contains(&angle_min)
        || !(0.0..=180.0).contains(&angle_max)
        || angle_min > angle_max
    {
        return Err(So3Error::InvalidRange { min: angle_min, max: angle_max });
    }
    let axis = random_unit_vector(rng);
    let angle = if angle_min == angle_max {
        angle_min
    } else {
        rng.random_range(angle_min..=angle_max)
    };
    Ok(AxisAngle { axis, angle: angle.to_radians() }.to_rotation())
}

/// Geodesic L1 mean (Weiszfeld iteration in the tangent space).
///
/// Starts from the input with the smallest summed distance to the others and
/// iterates `R <- R exp(sum w_i log(R^T R_i) / sum w_i)` with
/// `w_i = 1 / max(d(R, R_i), delta)`.
pub fn l1_single_average(rotations: &[RotationMatrix]) -> Result<RotationMatrix, So3Error> {
    if rotations.is_empty() {
        return Err(So3Error::EmptyInput);
    }
    let start = (0..rotations.len())
        .map(|i| {
            let total: f64 = rotations
                .iter()
                .map(|r| geodesic_distance_rad(&rotations[i], r))
                .sum();
            (i, total)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let mut current = rotations[start];
    for _ in 0..WEISZFELD_MAX_ITER {
        let current_t = current.transpose();
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for r in rotations {
            let v = (&current_t * r).log();
            let w = 1.0 / v.norm().max(WEISZFELD_DELTA);
            num += v * w;
            den += w;
        }
        let step = num / den;
        current = project_unchecked(&(current.0 * RotationMatrix::exp(&step).0));
        if step.norm() < WEISZFELD_STEP_TOL {
            break;
        }
    }
    Ok(current)
}

// Re-orthonormalize a product of rotations; falls back to the input if the
// projection is degenerate, which cannot happen for well-formed rotations.
fn project_unchecked(m: &Matrix3<f64>) -> RotationMatrix {
    project_to_so3(m).unwrap_or(RotationMatrix(*m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn projection_of_identity_is_identity() {
        let r = project_to_so3(&Matrix3::identity()).unwrap();
        assert!((r.matrix() - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn projection_removes_positive_scale() {
        let mut g = rng(1);
        for _ in 0..200 {
            let r = random_rotation_uniform(&mut g);
            let p = project_to_so3(&(r.matrix() * 2.5)).unwrap();
            assert!((p.matrix() - r.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn projection_corrects_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = project_to_so3(&m).unwrap();
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        assert!(RotationMatrix::from_matrix(*r.matrix(), 1e-12).is_ok());
    }

    #[test]
    fn projection_rejects_rank_deficient() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(project_to_so3(&m), Err(So3Error::RankDeficientInput(_))));
    }

    #[test]
    fn small_perturbation_projects_close() {
        // Oracle: scan a fine axis-angle mesh around R for the rotation
        // nearest to R + E in Frobenius norm.
        let mut g = rng(7);
        let r = random_rotation_uniform(&mut g);
        let e = Matrix3::from_fn(|_, _| g.random_range(-1.0..1.0));
        let e = e * (1e-6 / e.norm());
        let target = r.matrix() + e;
        let projected = project_to_so3(&target).unwrap();
        assert!(geodesic_distance(&projected, &r) < 1e-5);

        let step = 2e-7;
        let mut best = (f64::INFINITY, RotationMatrix::identity());
        for a in -6..=6 {
            for b in -6..=6 {
                for c in -6..=6 {
                    let w = Vector3::new(a as f64, b as f64, c as f64) * step;
                    let cand = r * RotationMatrix::exp(&w);
                    let d = (cand.matrix() - target).norm();
                    if d < best.0 {
                        best = (d, cand);
                    }
                }
            }
        }
        let proj_dist = (projected.matrix() - target).norm();
        assert!(proj_dist <= best.0 + 1e-12);
        assert!(geodesic_distance_rad(&projected, &best.1) < 2.0 * step);
    }

    #[test]
    fn geodesic_examples() {
        let i = RotationMatrix::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        let rz = RotationMatrix::about_z(PI / 2.0);
        assert!((geodesic_distance(&i, &rz) - 90.0).abs() < 1e-12);
        let mut g = rng(3);
        for _ in 0..100 {
            let a = random_rotation_uniform(&mut g);
            let b = random_rotation_uniform(&mut g);
            assert!((geodesic_distance(&a, &b) - geodesic_distance(&b, &a)).abs() < 1e-9);
        }
    }

    #[test]
    fn chordal_examples() {
        let i = RotationMatrix::identity();
        assert_eq!(chordal_distance(&i, &i), 0.0);
        assert!((chordal_distance(&i, &RotationMatrix::about_z(PI / 2.0)) - 2.0).abs() < 1e-12);
        let mut g = rng(5);
        for _ in 0..50 {
            let half_turn = AxisAngle { axis: random_unit_vector(&mut g), angle: PI }.to_rotation();
            let direct = chordal_distance(&i, &half_turn);
            assert!((direct - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_exp_round_trip_across_branches() {
        let mut g = rng(11);
        for &angle in &[0.0, 1e-9, 5e-7, 1e-3, 1.0, 3.0, PI - 5e-7, PI - 1e-9, PI] {
            for _ in 0..20 {
                let axis = random_unit_vector(&mut g);
                let r = AxisAngle { axis, angle }.to_rotation();
                let back = RotationMatrix::exp(&r.log());
                assert!(
                    (back.matrix() - r.matrix()).amax() < 1e-9,
                    "angle {angle}: {:?} vs {:?}",
                    back,
                    r
                );
                assert!((r.log().norm() - angle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_norm_matches_geodesic_formula() {
        // d = (1/sqrt 2) ||log(B A^T)||_F where log is the skew matrix
        let mut g = rng(13);
        for _ in 0..100 {
            let a = random_rotation_uniform(&mut g);
            let b = random_rotation_uniform(&mut g);
            let w = (b * a.transpose()).log();
            let skew_norm = skew(&w).norm();
            assert!((skew_norm / 2f64.sqrt() - geodesic_distance_rad(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn euler_zero_is_identity() {
        let r = RotationMatrix::from_euler_zyx(0.0, 0.0, 0.0);
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn euler_samples_are_rotations_and_reproducible() {
        let mut g = rng(17);
        for _ in 0..10_000 {
            let r = random_rotation_euler(&mut g);
            assert!(RotationMatrix::from_matrix(*r.matrix(), 1e-12).is_ok());
        }
        let a = random_rotation_euler(&mut rng(99));
        let b = random_rotation_euler(&mut rng(99));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_is_reproducible() {
        let a = random_rotation_uniform(&mut rng(42));
        let b = random_rotation_uniform(&mut rng(42));
        assert_eq!(a, b);
        assert!(RotationMatrix::from_matrix(*a.matrix(), 1e-12).is_ok());
    }

    #[test]
    fn perturbation_examples() {
        let mut g = rng(19);
        let r = random_perturbation(&mut g, 0.0, 0.0).unwrap();
        assert!((r.matrix() - Matrix3::identity()).amax() < 1e-15);
        for _ in 0..100 {
            let r = random_perturbation(&mut g, 5.0, 5.0).unwrap();
            assert!((geodesic_distance(&RotationMatrix::identity(), &r) - 5.0).abs() < 1e-9);
        }
        for _ in 0..10_000 {
            let r = random_perturbation(&mut g, 1.0, 10.0).unwrap();
            let d = geodesic_distance(&RotationMatrix::identity(), &r);
            assert!((1.0 - 1e-9..=10.0 + 1e-9).contains(&d));
        }
    }

    #[test]
    fn perturbation_rejects_bad_ranges() {
        let mut g = rng(0);
        assert!(random_perturbation(&mut g, 10.0, 1.0).is_err());
        assert!(random_perturbation(&mut g, -1.0, 1.0).is_err());
        assert!(random_perturbation(&mut g, 0.0, 181.0).is_err());
    }

    #[test]
    fn l1_average_of_copies() {
        let r = random_rotation_uniform(&mut rng(23));
        let avg = l1_single_average(&[r; 6]).unwrap();
        assert!(geodesic_distance(&avg, &r) < 1e-9);
    }

    #[test]
    fn l1_average_on_common_geodesic_is_median() {
        let rots: Vec<_> = [10.0f64, 20.0, 30.0]
            .iter()
            .map(|d| RotationMatrix::about_z(d.to_radians()))
            .collect();
        let avg = l1_single_average(&rots).unwrap();
        assert!(geodesic_distance(&avg, &RotationMatrix::about_z(20f64.to_radians())) < 1e-6);
    }

    #[test]
    fn l1_average_ignores_single_outlier() {
        let mut g = rng(29);
        let r = random_rotation_uniform(&mut g);
        let far = r * AxisAngle { axis: random_unit_vector(&mut g), angle: PI / 2.0 }.to_rotation();
        let mut set = vec![r; 9];
        set.push(far);
        let avg = l1_single_average(&set).unwrap();
        assert!(geodesic_distance(&avg, &r) < 1e-6);

        // dense 1-D oracle along the connecting geodesic
        let dir = (r.transpose() * far).log();
        let cost = |t: f64| -> f64 {
            let p = r * RotationMatrix::exp(&(dir * t));
            set.iter().map(|q| geodesic_distance_rad(&p, q)).sum()
        };
        let best_t = (0..=10_000)
            .map(|k| k as f64 / 10_000.0)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap();
        assert_eq!(best_t, 0.0);
    }

    #[test]
    fn l1_average_rejects_empty() {
        assert_eq!(l1_single_average(&[]), Err(So3Error::EmptyInput));
    }
}
