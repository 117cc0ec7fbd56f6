//! Rigid-body transforms, the sensor/tool coordinate chain and the
//! small-angle pose update used by the registration solver.
//!
//! All lengths are millimetres. Transforms are stored as a rotation matrix
//! plus a translation; twists only exist transiently inside the solver.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Orthonormality tolerance accepted when a pose is read from outside.
const POSE_ORTHONORMAL_TOL: f64 = 1e-6;

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }

    pub fn from_translation(x: T, y: T, z: T) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation of `angle` radians about the unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        Self {
            rotation: axis_angle_matrix(axis, angle),
            translation: Vector3::zeros(),
        }
    }

    pub fn rot_x(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Returns a copy with the translation replaced.
    pub fn with_translation(mut self, translation: Vector3<T>) -> Self {
        self.translation = translation;
        self
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> T {
        let half = T::lit(0.5);
        let c = ((self.rotation.trace() - T::one()) * half).clamp(-T::one(), T::one());
        c.acos()
    }

    /// Largest deviation of `R Rᵀ` from identity.
    pub fn orthonormality_error(&self) -> T {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax()
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    RigidTransform {
        rotation: nearest_rotation(&(a.rotation * b.rotation)),
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

impl<T: Real> std::ops::Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        compose(&self, &rhs)
    }
}

/// LiDAR-frame point to robot-base frame: `P_B = T_EB · T_LE · P_L`.
pub fn chain_to_base<T: Real>(
    p_lidar: &Vector3<T>,
    end_effector_to_base: &RigidTransform<T>,
    lidar_to_end_effector: &RigidTransform<T>,
) -> Vector3<T> {
    end_effector_to_base.transform_point(&lidar_to_end_effector.transform_point(p_lidar))
}

/// LiDAR-frame point to stethoscope frame: `P_S = T_SE⁻¹ · T_LE · P_L`.
pub fn chain_to_stethoscope<T: Real>(
    p_lidar: &Vector3<T>,
    stethoscope_to_end_effector: &RigidTransform<T>,
    lidar_to_end_effector: &RigidTransform<T>,
) -> Vector3<T> {
    let in_end_effector = lidar_to_end_effector.transform_point(p_lidar);
    invert(stethoscope_to_end_effector).transform_point(&in_end_effector)
}

/// First-order pose increment `(alpha, beta, gamma, a, b, c)`.
///
/// Rotation parameters are radians about x, y, z; translation is mm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwistVector<T: Real> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> TwistVector<T> {
    pub fn new(alpha: T, beta: T, gamma: T, a: T, b: T, c: T) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            a,
            b,
            c,
        }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_vector(&self) -> Vector6<T> {
        Vector6::new(self.alpha, self.beta, self.gamma, self.a, self.b, self.c)
    }

    pub fn rotation_part(&self) -> Vector3<T> {
        Vector3::new(self.alpha, self.beta, self.gamma)
    }

    pub fn translation_part(&self) -> Vector3<T> {
        Vector3::new(self.a, self.b, self.c)
    }

    pub fn norm(&self) -> T {
        self.to_vector().norm()
    }

    /// The linearized 3x3 rotation block `I + [omega]x`.
    pub fn linear_rotation(&self) -> Matrix3<T> {
        let one = T::one();
        Matrix3::new(
            one,
            -self.gamma,
            self.beta,
            self.gamma,
            one,
            -self.alpha,
            -self.beta,
            self.alpha,
            one,
        )
    }
}

/// Left-multiplies the linearized increment onto `prev` and repairs the
/// rotation block by projecting it to the nearest rotation.
pub fn apply_twist<T: Real>(xi: &TwistVector<T>, prev: &RigidTransform<T>) -> RigidTransform<T> {
    let m = xi.linear_rotation();
    RigidTransform {
        rotation: nearest_rotation(&(m * prev.rotation)),
        translation: m * prev.translation + xi.translation_part(),
    }
}

/// Nearest rotation in the Frobenius sense (polar factor with det +1).
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u = u;
        // flip the axis paired with the smallest singular value
        let s = &svd.singular_values;
        let mut min_idx = 0;
        for i in 1..3 {
            if s[i] < s[min_idx] {
                min_idx = i;
            }
        }
        u.column_mut(min_idx).neg_mut();
        r = u * v_t;
    }
    r
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

fn axis_angle_matrix<T: Real>(axis: &Vector3<T>, angle: T) -> Matrix3<T> {
    let n = axis.norm();
    if n <= T::zero() {
        return Matrix3::identity();
    }
    let k = skew(&(axis / n));
    Matrix3::identity() + k * angle.sin() + k * k * (T::one() - angle.cos())
}

/// On-disk pose record: row-major rotation and translation in mm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl<T: Real> From<&RigidTransform<T>> for PoseRecord {
    fn from(t: &RigidTransform<T>) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = t.rotation[(r, c)].as_f64();
            }
        }
        PoseRecord {
            rotation,
            translation: [
                t.translation.x.as_f64(),
                t.translation.y.as_f64(),
                t.translation.z.as_f64(),
            ],
        }
    }
}

impl PoseRecord {
    /// Validates orthonormality and returns the transform with its rotation
    /// renormalized.
    pub fn to_transform<T: Real>(&self) -> Result<RigidTransform<T>> {
        if self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let m = Matrix3::from_row_slice(&self.rotation);
        let err = (m * m.transpose() - Matrix3::identity()).amax();
        if err > POSE_ORTHONORMAL_TOL || m.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "pose rotation is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        let rotation = nearest_rotation(&m);
        let t = RigidTransform {
            rotation,
            translation: Vector3::from_column_slice(&self.translation),
        };
        Ok(t.cast())
    }
}

impl<T: Real> Serialize for RigidTransform<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(serializer)
    }
}

impl<'de, T: Real> Deserialize<'de> for RigidTransform<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = PoseRecord::deserialize(deserializer)?;
        record.to_transform().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn max_abs_diff(a: &RigidTransform<f64>, b: &RigidTransform<f64>) -> f64 {
        (a.rotation - b.rotation)
            .amax()
            .max((a.translation - b.translation).amax())
    }

    pub(crate) fn random_pose(rng: &mut impl Rng) -> RigidTransform<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-PI..PI);
        RigidTransform::from_axis_angle(&axis, angle).with_translation(Vector3::new(
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
        ))
    }

    /// Closed-form se(3) exponential, used as the reference the linearized
    /// update must approach.
    fn exp_se3(xi: &TwistVector<f64>) -> RigidTransform<f64> {
        let w = xi.rotation_part();
        let rho = xi.translation_part();
        let theta = w.norm();
        let k = skew(&w);
        let (r, v) = if theta < 1e-12 {
            (Matrix3::identity() + k, Matrix3::identity() + k * 0.5)
        } else {
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / (theta * theta);
            let c = (theta - theta.sin()) / (theta * theta * theta);
            (
                Matrix3::identity() + k * a + k * k * b,
                Matrix3::identity() + k * b + k * k * c,
            )
        };
        RigidTransform {
            rotation: r,
            translation: v * rho,
        }
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        assert!(max_abs_diff(&compose(&RigidTransform::identity(), &t), &t) < 1e-12);
        assert!(max_abs_diff(&compose(&t, &RigidTransform::identity()), &t) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let id = compose(&t, &invert(&t));
            assert!(max_abs_diff(&id, &RigidTransform::identity()) < 1e-9);
            let id = compose(&invert(&t), &t);
            assert!(max_abs_diff(&id, &RigidTransform::identity()) < 1e-9);
        }
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        let q = RigidTransform::<f64>::rot_z(FRAC_PI_2);
        let h = compose(&q, &q);
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((h.rotation - expected).amax() < 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let rot = RigidTransform::<f64>::rot_z(FRAC_PI_2);
        let shift = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let p = Vector3::zeros();
        // shift then rotate: (1,0,0) -> (0,1,0)
        let q = compose(&rot, &shift).transform_point(&p);
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn invert_simple_cases() {
        let id = invert(&RigidTransform::<f64>::identity());
        assert_eq!(id.translation, Vector3::zeros());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-15);

        let t = invert(&RigidTransform::from_translation(1.0, 2.0, 3.0));
        assert_eq!(t.translation, Vector3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn double_inverse_over_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            assert!(max_abs_diff(&invert(&invert(&t)), &t) < 1e-9);
        }
    }

    #[test]
    fn chain_to_base_examples() {
        let id = RigidTransform::<f64>::identity();
        assert_eq!(chain_to_base(&Vector3::zeros(), &id, &id), Vector3::zeros());
        let lidar = RigidTransform::from_translation(0.0, 0.0, 100.0);
        let p = chain_to_base(&Vector3::new(10.0, 0.0, 0.0), &id, &lidar);
        assert_eq!(p, Vector3::new(10.0, 0.0, 100.0));
    }

    #[test]
    fn chain_to_base_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let eb = random_pose(&mut rng);
            let le = random_pose(&mut rng);
            let p = Vector3::new(
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
            );
            let base = chain_to_base(&p, &eb, &le);
            let back = invert(&le).transform_point(&invert(&eb).transform_point(&base));
            assert!((back - p).amax() < 1e-9);
        }
    }

    #[test]
    fn chain_to_stethoscope_examples() {
        let id = RigidTransform::<f64>::identity();
        let p = Vector3::new(3.0, -4.0, 5.0);
        assert_eq!(chain_to_stethoscope(&p, &id, &id), p);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_pose(&mut rng);
        assert!((chain_to_stethoscope(&p, &t, &t) - p).amax() < 1e-9);

        for _ in 0..50 {
            let se = random_pose(&mut rng);
            let le = random_pose(&mut rng);
            let two_step = invert(&se).transform_point(&le.transform_point(&p));
            assert!((chain_to_stethoscope(&p, &se, &le) - two_step).amax() < 1e-9);
        }
    }

    #[test]
    fn apply_twist_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prev = random_pose(&mut rng);
        let same = apply_twist(&TwistVector::zero(), &prev);
        assert!(max_abs_diff(&same, &prev) < 1e-12);

        let xi = TwistVector::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let t = apply_twist(&xi, &RigidTransform::identity());
        assert!(max_abs_diff(&t, &RigidTransform::from_translation(1.0, 0.0, 0.0)) < 1e-15);

        let xi = TwistVector::new(0.0, 0.0, 1e-3, 0.0, 0.0, 0.0);
        let t = apply_twist(&xi, &RigidTransform::identity());
        let exact = RigidTransform::rot_z(1e-3);
        assert!((t.rotation - exact.rotation).amax() <= 1e-6);
    }

    #[test]
    fn apply_twist_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dir = TwistVector::new(0.3, -0.5, 0.8, 0.6, 0.2, -0.4);
        let dir_norm = dir.norm();
        let prev = random_pose(&mut rng);
        let mut worst_c: f64 = 0.0;
        for k in 0..8 {
            let scale = 10f64.powi(-k) * 0.1 / dir_norm;
            let xi = TwistVector::from_vector(&(dir.to_vector() * scale));
            let approx = apply_twist(&xi, &prev);
            let exact = compose(&exp_se3(&xi), &prev);
            let err = (approx.rotation - exact.rotation)
                .amax()
                .max((approx.translation - exact.translation).amax());
            let mag = xi.norm();
            if mag > 1e-6 {
                worst_c = worst_c.max(err / (mag * mag));
            }
        }
        // translation block of prev reaches 500 mm; the constant absorbs it
        assert!(worst_c < 1e3, "C = {worst_c}");
    }

    #[test]
    fn outputs_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = RigidTransform::<f64>::identity();
        for _ in 0..500 {
            let xi = TwistVector::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            t = apply_twist(&xi, &t);
            assert!(t.orthonormality_error() < 1e-9);
            assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nearest_rotation_repairs_reflection() {
        let m = Matrix3::<f64>::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let r = nearest_rotation(&m);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_record_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_pose(&mut rng);
        let json = serde_json::to_string(&t).unwrap();
        let back: RigidTransform<f64> = serde_json::from_str(&json).unwrap();
        assert!(max_abs_diff(&t, &back) < 1e-12);

        let bad = r#"{"rotation":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform<f64>>(bad).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let t = RigidTransform::<f32>::rot_z(0.3).with_translation(Vector3::new(1.0, 2.0, 3.0));
        let id = compose(&t, &invert(&t));
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-5);
        assert!(id.translation.amax() < 1e-5);
    }

    proptest! {
        #[test]
        fn chain_collapses_when_tool_equals_lidar(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in 0.1f64..1.0, angle in -3.0f64..3.0,
            tx in -200.0f64..200.0, px in -100.0f64..100.0, pz in 0.0f64..400.0,
        ) {
            let t = RigidTransform::from_axis_angle(&Vector3::new(ax, ay, az), angle)
                .with_translation(Vector3::new(tx, -tx, 0.5 * tx));
            let p = Vector3::new(px, 0.5 * px, pz);
            prop_assert!((chain_to_stethoscope(&p, &t, &t) - p).amax() < 1e-9);
        }
    }
}
