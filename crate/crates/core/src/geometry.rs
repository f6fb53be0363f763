//! Rotations, rigid motions, similarity transforms and the pinhole camera.
//!
//! All cameras follow the world-to-camera convention `x ~ K R (X - c)`.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, UnitQuaternion, Vector2, Vector3};

use crate::error::GeometryError;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Depth at or below which a point counts as behind the camera.
pub const CHEIRALITY_EPS: f64 = 1e-12;

/// A proper rotation stored as its 3x3 matrix.
///
/// A rotation built from a quaternion remembers it, so that writing it back
/// out reproduces the same text and a text round trip is exact.
#[derive(Clone, Copy, Debug)]
pub struct Rotation3 {
    m: Mat3,
    quat: Option<[f64; 4]>,
}

impl PartialEq for Rotation3 {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self::from_matrix_unchecked(Mat3::identity())
    }

    /// Wraps a matrix that is already known to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self { m, quat: None }
    }

    /// Nearest rotation in the Frobenius sense (SVD projection with det fix).
    pub fn project(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self::from_matrix_unchecked(u * d * v_t)
    }

    /// Rotation from an axis-angle (Euler) vector, Rodrigues formula.
    pub fn from_axis_angle(w: &Vec3) -> Self {
        let theta = w.norm();
        let k = skew(w);
        if theta < 1e-8 {
            // second-order series keeps the result orthonormal to ~1e-16
            return Self::project(&(Mat3::identity() + k + 0.5 * k * k));
        }
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Self::from_matrix_unchecked(Mat3::identity() + a * k + b * k * k)
    }

    /// Axis-angle vector with angle in `[0, pi]`.
    pub fn to_axis_angle(&self) -> Vec3 {
        self.nalgebra_quaternion().scaled_axis()
    }

    fn nalgebra_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(self.m))
    }

    /// From a (not necessarily normalized) quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let m = Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Self { m, quat: Some(q) }
    }

    /// Quaternion `(w, x, y, z)`: the one this rotation was built from, if
    /// any, otherwise the unit quaternion with non-negative `w`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        if let Some(q) = self.quat {
            return q;
        }
        let c = self.nalgebra_quaternion().quaternion().coords;
        let mut out = [c.w, c.x, c.y, c.z];
        let flip = out[0] < 0.0 || (out[0] == 0.0 && out[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0));
        if flip {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    /// The same rotation rebuilt from its quaternion, so that its text form
    /// reproduces the matrix bit for bit.
    pub fn canonical(&self) -> Self {
        Self::from_quaternion(self.to_quaternion())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn inverse(&self) -> Self {
        Self::from_matrix_unchecked(self.m.transpose())
    }

    /// `self * other` as matrices.
    pub fn mul(&self, other: &Rotation3) -> Self {
        Self::from_matrix_unchecked(self.m * other.m)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.m * v
    }

    pub fn angle(&self) -> f64 {
        let c = ((self.m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near 0; use the sine from the skew part there
        let s = 0.5
            * Vec3::new(
                self.m[(2, 1)] - self.m[(1, 2)],
                self.m[(0, 2)] - self.m[(2, 0)],
                self.m[(1, 0)] - self.m[(0, 1)],
            )
            .norm();
        s.atan2(c)
    }

    /// Largest deviation from orthonormality and unit determinant.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.m.transpose() * self.m - Mat3::identity()).abs().max();
        e.max((self.m.determinant() - 1.0).abs())
    }
}

/// Angle of `r1^T r2`, in `[0, pi]`.
pub fn rotation_geodesic_distance(r1: &Rotation3, r2: &Rotation3) -> f64 {
    r1.inverse().mul(r2).angle()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Object motion `X -> A X + a`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RigidMotion {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.apply(x) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -r.apply(&self.translation))
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &RigidMotion) -> Self {
        Self::new(other.rotation.mul(&self.rotation), other.rotation.apply(&self.translation) + other.translation)
    }

    /// Express this motion in a frame related to the current one by `s`
    /// (i.e. `s o self o s^-1`).
    pub fn conjugate(&self, s: &SimilarityTransform) -> Self {
        let b = s.rotation;
        let rot = b.mul(&self.rotation).mul(&b.inverse());
        let t = s.scale * b.apply(&self.translation) + s.translation - rot.apply(&s.translation);
        Self::new(rot, t)
    }
}

/// Motion from take `s` to take `t` given the motions of both takes from the
/// initial configuration: `(A_t A_s^-1, a_t - A_t A_s^-1 a_s)`.
pub fn compose_motion(from_s: &RigidMotion, to_t: &RigidMotion) -> RigidMotion {
    let rel = to_t.rotation.mul(&from_s.rotation.inverse());
    RigidMotion::new(rel, to_t.translation - rel.apply(&from_s.translation))
}

pub fn invert_motion(m: &RigidMotion) -> RigidMotion {
    m.inverse()
}

/// Change of coordinates `X -> scale * B X + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Rotation3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(rotation: Rotation3, translation: Vec3, scale: f64) -> Self {
        debug_assert!(scale > 0.0);
        Self { rotation, translation, scale }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vec3::zeros(), 1.0)
    }

    pub fn from_motion(m: &RigidMotion) -> Self {
        Self::new(m.rotation, m.translation, 1.0)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * self.rotation.apply(x) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -r.apply(&self.translation) / self.scale, 1.0 / self.scale)
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &SimilarityTransform) -> Self {
        Self::new(
            other.rotation.mul(&self.rotation),
            other.scale * other.rotation.apply(&self.translation) + other.translation,
            other.scale * self.scale,
        )
    }

    /// Drops the scale.
    pub fn rigid_part(&self) -> RigidMotion {
        RigidMotion::new(self.rotation, self.translation)
    }
}

/// Change of coordinates between two frames given both frames' changes from
/// the world frame: `(B_t B_s^-1, b_t - (beta_t/beta_s) B_t B_s^-1 b_s, beta_t/beta_s)`.
pub fn compose_similarity(s: &SimilarityTransform, t: &SimilarityTransform) -> SimilarityTransform {
    let rel = t.rotation.mul(&s.rotation.inverse());
    let ratio = t.scale / s.scale;
    SimilarityTransform::new(rel, t.translation - ratio * rel.apply(&s.translation), ratio)
}

pub fn invert_similarity(s: &SimilarityTransform) -> SimilarityTransform {
    s.inverse()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, n: &Vec2) -> Vec2 {
        Vec2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }
}

/// A registered view: intrinsics plus world-to-camera rotation and center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub rotation: Rotation3,
    pub center: Vec3,
}

impl CameraPose {
    pub fn new(intrinsics: Intrinsics, rotation: Rotation3, center: Vec3) -> Self {
        Self { intrinsics, rotation, center }
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.apply(&(x - self.center))
    }

    /// Translation `t = -R c` of the `[R | t]` form.
    pub fn translation(&self) -> Vec3 {
        -self.rotation.apply(&self.center)
    }

    /// The 3x4 camera matrix `K [R | -R c]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        rt.set_column(3, &self.translation());
        self.intrinsics.matrix() * rt
    }

    /// World-frame direction of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: &Vec2) -> Vec3 {
        let n = self.intrinsics.normalize(pixel);
        self.rotation.inverse().apply(&Vec3::new(n.x, n.y, 1.0))
    }

    /// Pose of the same physical camera in a frame related by `s`
    /// (points map as `X' = s(X)`).
    pub fn transported(&self, s: &SimilarityTransform) -> CameraPose {
        CameraPose::new(self.intrinsics, self.rotation.mul(&s.rotation.inverse()), s.apply(&self.center))
    }
}

/// Pinhole projection `K pi(R (X - c))`.
pub fn project(pose: &CameraPose, point: &Vec3) -> Result<Vec2, GeometryError> {
    let y = pose.to_camera(point);
    if y.z <= CHEIRALITY_EPS {
        return Err(GeometryError::Cheirality { depth: y.z });
    }
    Ok(pose.intrinsics.denormalize(&Vec2::new(y.x / y.z, y.y / y.z)))
}

/// Derivative of the pixel `K pi(y)` with respect to the camera-frame point `y`.
pub fn projection_jacobian(k: &Intrinsics, y: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / y.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * y.x * iz2, 0.0, k.fy * iz, -k.fy * y.y * iz2)
}

/// Pixel distance between `obs` and the projection of the moved point `A X + a`.
pub fn reprojection_error(
    pose: &CameraPose,
    motion: &RigidMotion,
    point: &Vec3,
    obs: &Vec2,
) -> Result<f64, GeometryError> {
    let p = project(pose, &motion.apply(point))?;
    Ok((p - obs).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::from_axis_angle(&(axis.normalize() * rng.random_range(0.0..3.1)))
    }

    fn random_vec(rng: &mut impl Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_motion(rng: &mut impl Rng) -> RigidMotion {
        RigidMotion::new(random_rotation(rng), random_vec(rng, 5.0))
    }

    fn random_similarity(rng: &mut impl Rng) -> SimilarityTransform {
        SimilarityTransform::new(random_rotation(rng), random_vec(rng, 5.0), rng.random_range(0.5..2.0))
    }

    #[test]
    fn project_on_optical_axis() {
        let pose = CameraPose::new(Intrinsics::new(1.0, 1.0, 0.0, 0.0), Rotation3::identity(), Vec3::zeros());
        let p = project(&pose, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vec2::new(0.0, 0.0));
    }

    #[test]
    fn project_hand_computed() {
        let pose = CameraPose::new(Intrinsics::new(2.0, 2.0, 3.0, 4.0), Rotation3::identity(), Vec3::zeros());
        let p = project(&pose, &Vec3::new(1.0, 1.0, 2.0)).unwrap();
        assert_abs_diff_eq!(p, Vec2::new(4.0, 5.0), epsilon = 1e-15);
    }

    #[test]
    fn project_behind_camera_is_error() {
        let pose = CameraPose::new(Intrinsics::new(1.0, 1.0, 0.0, 0.0), Rotation3::identity(), Vec3::zeros());
        assert!(project(&pose, &Vec3::new(0.0, 0.0, -1.0)).is_err());
        assert!(project(&pose, &Vec3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn project_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let pose = CameraPose::new(
                Intrinsics::new(rng.random_range(100.0..1000.0), rng.random_range(100.0..1000.0), 320.0, 240.0),
                random_rotation(&mut rng),
                random_vec(&mut rng, 3.0),
            );
            let dir = pose.rotation.inverse().apply(&Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                1.0,
            ));
            let x = pose.center + dir * rng.random_range(0.5..10.0);
            let p = project(&pose, &x).unwrap();
            let h = pose.projection_matrix() * x.push(1.0);
            let oracle = Vec2::new(h.x / h.z, h.y / h.z);
            assert!((p - oracle).norm() < 1e-10 * oracle.norm().max(1.0));
        }
    }

    #[test]
    fn reprojection_error_cases() {
        let pose = CameraPose::new(Intrinsics::new(500.0, 500.0, 320.0, 240.0), Rotation3::identity(), Vec3::zeros());
        let x = Vec3::new(0.1, -0.2, 3.0);
        let obs = project(&pose, &x).unwrap();
        let id = RigidMotion::identity();
        assert_abs_diff_eq!(reprojection_error(&pose, &id, &x, &obs).unwrap(), 0.0);
        let off = obs + Vec2::new(3.0, 4.0);
        assert_abs_diff_eq!(reprojection_error(&pose, &id, &x, &off).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn back_projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let pose = CameraPose::new(
                Intrinsics::new(800.0, 780.0, 320.0, 240.0),
                random_rotation(&mut rng),
                random_vec(&mut rng, 3.0),
            );
            let pixel = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let x = pose.center + pose.ray_direction(&pixel) * rng.random_range(0.1..20.0);
            assert!((project(&pose, &x).unwrap() - pixel).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_motion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_motion(&mut rng);
        let same = compose_motion(&m, &m);
        assert!(same.rotation.angle() < 1e-12);
        assert!(same.translation.norm() < 1e-12);
        let from_id = compose_motion(&RigidMotion::identity(), &m);
        assert_abs_diff_eq!(from_id.rotation.matrix(), m.rotation.matrix(), epsilon = 1e-15);
        assert_abs_diff_eq!(from_id.translation, m.translation, epsilon = 1e-15);
    }

    #[test]
    fn compose_motion_point_transport() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (ms, mt) = (random_motion(&mut rng), random_motion(&mut rng));
            let x0 = random_vec(&mut rng, 2.0);
            // point in configuration s, transported to t
            let xs = ms.apply(&x0);
            let xt = mt.apply(&x0);
            let st = compose_motion(&ms, &mt);
            assert!((st.apply(&xs) - xt).norm() < 1e-12 * 10.0);
        }
    }

    #[test]
    fn compose_motion_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (a, b, c) = (random_motion(&mut rng), random_motion(&mut rng), random_motion(&mut rng));
            let l = a.then(&b).then(&c);
            let r = a.then(&b.then(&c));
            assert!(rotation_geodesic_distance(&l.rotation, &r.rotation) < 1e-10);
            assert!((l.translation - r.translation).norm() < 1e-10);
        }
    }

    #[test]
    fn compose_similarity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let s = random_similarity(&mut rng);
            let id = compose_similarity(&s, &s);
            assert!(id.rotation.angle() < 1e-10);
            assert!(id.translation.norm() < 1e-10);
            assert!((id.scale - 1.0).abs() < 1e-10);
            let unchanged = compose_similarity(&SimilarityTransform::identity(), &s);
            assert!((unchanged.translation - s.translation).norm() < 1e-15);
            assert_eq!(unchanged.scale, s.scale);
        }
    }

    #[test]
    fn compose_similarity_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (s, t) = (random_similarity(&mut rng), random_similarity(&mut rng));
            let xw = random_vec(&mut rng, 2.0);
            let st = compose_similarity(&s, &t);
            let via = st.apply(&s.apply(&xw));
            let direct = t.apply(&xw);
            assert!((via - direct).norm() < 1e-12 * direct.norm().max(1.0) * 10.0);
        }
    }

    #[test]
    fn inversion() {
        let id = invert_motion(&RigidMotion::identity());
        assert_eq!(id, RigidMotion::identity());
        let t = RigidMotion::new(Rotation3::identity(), Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(invert_motion(&t).translation, Vec3::new(0.0, 0.0, -5.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_motion(&mut rng);
        let s = random_similarity(&mut rng);
        let (mi, si) = (invert_motion(&m), invert_similarity(&s));
        let mut max_err: f64 = 0.0;
        for _ in 0..100 {
            let x = random_vec(&mut rng, 3.0);
            max_err = max_err.max((mi.apply(&m.apply(&x)) - x).norm());
            max_err = max_err.max((si.apply(&s.apply(&x)) - x).norm());
        }
        assert!(max_err < 1e-10);
        let round = m.then(&mi);
        assert!(round.rotation.angle() < 1e-12 && round.translation.norm() < 1e-12);
    }

    #[test]
    fn geodesic_distance() {
        let r = Rotation3::from_axis_angle(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_eq!(rotation_geodesic_distance(&r, &r), 0.0);
        assert_abs_diff_eq!(
            rotation_geodesic_distance(&Rotation3::identity(), &r),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-15
        );
        // quaternion oracle: angle = 2 acos(|w|) of the relative quaternion
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
            let qa = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*a.matrix()));
            let qb = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*b.matrix()));
            let rel = qa.inverse() * qb;
            let oracle = 2.0 * rel.quaternion().w.abs().min(1.0).acos();
            assert!((rotation_geodesic_distance(&a, &b) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn quaternion_round_trip_and_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng).canonical();
            assert!(r.orthonormality_error() < 1e-12);
            assert_eq!(Rotation3::from_quaternion(r.to_quaternion()), r);
        }
    }

    #[test]
    fn motion_conjugation_matches_frame_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_motion(&mut rng);
        let s = random_similarity(&mut rng);
        let mc = m.conjugate(&s);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 2.0);
            let lhs = mc.apply(&s.apply(&x));
            let rhs = s.apply(&m.apply(&x));
            assert!((lhs - rhs).norm() < 1e-11);
        }
    }

    #[test]
    fn transported_pose_sees_same_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pose = CameraPose::new(Intrinsics::new(700.0, 700.0, 320.0, 240.0), Rotation3::identity(), Vec3::zeros());
        let s = random_similarity(&mut rng);
        let moved = pose.transported(&s);
        let x = Vec3::new(0.2, 0.1, 4.0);
        let a = project(&pose, &x).unwrap();
        let b = project(&moved, &s.apply(&x)).unwrap();
        assert!((a - b).norm() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn produced_rotations_are_orthonormal(wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0,
                                              vx in -3.0f64..3.0, vy in -3.0f64..3.0, vz in -3.0f64..3.0) {
            let a = Rotation3::from_axis_angle(&Vec3::new(wx, wy, wz));
            let b = Rotation3::from_axis_angle(&Vec3::new(vx, vy, vz));
            let m1 = RigidMotion::new(a, Vec3::new(1.0, 2.0, 3.0));
            let m2 = RigidMotion::new(b, Vec3::new(-1.0, 0.5, 2.0));
            for r in [a.mul(&b), compose_motion(&m1, &m2).rotation, m1.inverse().rotation,
                      Rotation3::from_quaternion(a.to_quaternion())] {
                proptest::prop_assert!(r.orthonormality_error() < 1e-9);
            }
        }
    }
}
