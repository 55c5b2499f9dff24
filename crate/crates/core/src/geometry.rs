//! Pose parameterizations and camera-frame conversions.
//!
//! Everything here is a pure function over small value types. Matrices follow
//! the usual math convention: a rotation acts on column vectors, and the
//! columns of a rotation matrix are the rotated basis vectors.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{degenerate, Error, Result};
use crate::scalar::Real;

/// Tolerance used to detect collapsed parameterizations.
pub const DEGENERATE_EPS: f64 = 1e-9;

/// Dynamic zoom-in: relative jitter of the box center.
pub const DZI_SHIFT_RATIO: f64 = 0.25;
/// Dynamic zoom-in: relative jitter of the box scale.
pub const DZI_SCALE_RATIO: f64 = 0.25;
/// Ratio between the crop side and the (jittered) object box size.
pub const ZOOM_RATIO: f64 = 1.5;

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix<T: Real>(Matrix3<T>);

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Wraps a matrix after checking `MᵀM = I` and `det M = 1` within `tol`.
    pub fn from_matrix(m: Matrix3<T>, tol: T) -> Result<Self> {
        let r = Self(m);
        if r.is_valid(tol) {
            Ok(r)
        } else {
            Err(degenerate("matrix is not a proper rotation"))
        }
    }

    /// Rotation of `angle` radians about the unit vector `axis`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let k = skew(axis);
        Self(Matrix3::identity() + k * angle.sin() + k * k * (T::one() - angle.cos()))
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

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self(self.0 * rhs.0)
    }

    pub fn apply(&self, v: &Vector3<T>) -> Vector3<T> {
        self.0 * v
    }

    pub fn is_valid(&self, tol: T) -> bool {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.iter().all(|x| x.abs() <= tol) && (self.0.determinant() - T::one()).abs() <= tol
    }

    /// Geodesic distance in radians, accurate for small and near-π angles.
    pub fn angle_to(&self, other: &Self) -> T {
        let a = self.0.transpose() * other.0;
        let s = Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)]);
        let half = T::lit(0.5);
        let c = (a.trace() - T::one()) * half;
        (s.norm() * half).atan2(c)
    }

    pub fn cast<U: Real>(&self) -> RotationMatrix<U> {
        RotationMatrix(self.0.map(|x| U::lit(x.as_f64())))
    }
}

/// Continuous 6D rotation parameterization: two (not necessarily orthonormal) column vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6d<T: Real> {
    pub r1: Vector3<T>,
    pub r2: Vector3<T>,
}

impl<T: Real> Rot6d<T> {
    pub fn new(r1: Vector3<T>, r2: Vector3<T>) -> Self {
        Self { r1, r2 }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.r1.x, self.r1.y, self.r1.z, self.r2.x, self.r2.y, self.r2.z]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T: Real> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn vector(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Rotation vector: axis times angle (the Lie algebra of SO(3)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle<T: Real> {
    pub v: Vector3<T>,
}

/// Logarithm of a unit quaternion: axis times half angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogQuat<T: Real> {
    pub v: Vector3<T>,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn project(&self, p: &Vector3<T>) -> Vector2<T> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Ray direction `K⁻¹ (u, v, 1)ᵀ` through a pixel.
    pub fn unproject(&self, px: &Vector2<T>) -> Vector3<T> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, T::one())
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
        }
    }
}

/// Rigid transform from the object frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rot: RotationMatrix<T>,
    pub t: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rot: RotationMatrix<T>, t: Vector3<T>) -> Self {
        Self { rot, t }
    }

    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rot.apply(x) + self.t
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self { t: -rt.apply(&self.t), rot: rt }
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose { rot: self.rot.cast(), t: self.t.map(|x| U::lit(x.as_f64())) }
    }
}

/// Axis-aligned image box given by center and size in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T: Real> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        if !(w > T::zero() && h > T::zero()) {
            return Err(degenerate("bounding box must have positive size"));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// `max(w, h)`.
    pub fn size(&self) -> T {
        self.w.max(self.h)
    }

    /// Square crop of side `ZOOM_RATIO * max(w, h)` around the box center.
    pub fn zoomed(&self) -> Self {
        let side = T::lit(ZOOM_RATIO) * self.size();
        Self { cx: self.cx, cy: self.cy, w: side, h: side }
    }
}

/// Scale-invariant translation: box-relative projected center and zoom-normalized depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteTranslation<T: Real> {
    pub dx: T,
    pub dy: T,
    pub dz: T,
}

pub(crate) fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Gram-Schmidt reconstruction of a rotation from its 6D parameterization.
pub fn rot6d_to_matrix<T: Real>(r: &Rot6d<T>) -> Result<RotationMatrix<T>> {
    let eps = T::lit(DEGENERATE_EPS);
    let n1 = r.r1.norm();
    if !(n1 > eps) {
        return Err(degenerate("first 6D column has (near) zero length"));
    }
    let c1 = r.r1 / n1;
    let cross = c1.cross(&r.r2);
    let n3 = cross.norm();
    // compare against |r2| so the parallel test is scale free
    if !(n3 > eps * r.r2.norm().max(T::one())) {
        return Err(degenerate("6D columns are (nearly) parallel"));
    }
    let c3 = cross / n3;
    let c2 = c3.cross(&c1);
    Ok(RotationMatrix(Matrix3::from_columns(&[c1, c2, c3])))
}

/// The first two columns of `rot`.
pub fn matrix_to_rot6d<T: Real>(rot: &RotationMatrix<T>) -> Rot6d<T> {
    Rot6d::new(rot.0.column(0).into_owned(), rot.0.column(1).into_owned())
}

/// Rotation for a quaternion; the input is normalized first.
pub fn quat_to_matrix<T: Real>(q: &Quaternion<T>) -> Result<RotationMatrix<T>> {
    let n = q.norm();
    if !(n > T::lit(DEGENERATE_EPS)) {
        return Err(degenerate("zero-norm quaternion"));
    }
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    let two = T::lit(2.0);
    let one = T::one();
    Ok(RotationMatrix(Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )))
}

/// Unit quaternion with `w >= 0`.
pub fn matrix_to_quat<T: Real>(rot: &RotationMatrix<T>) -> Quaternion<T> {
    let m = &rot.0;
    let one = T::one();
    let quarter = T::lit(0.25);
    let tr = m.trace();
    // Shepperd: branch on the largest diagonal term of the 4x4 symmetric form
    let q = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
        let s = (one + tr).sqrt() * T::lit(2.0);
        Quaternion::new(
            quarter * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (one + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * T::lit(2.0);
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            quarter * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (one + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * T::lit(2.0);
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            quarter * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (one + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * T::lit(2.0);
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            quarter * s,
        )
    };
    let n = q.norm();
    let q = Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n);
    if q.w < T::zero() {
        q.neg()
    } else {
        q
    }
}

/// `sin(x) / x`, with its Taylor series near zero.
pub(crate) fn sinc<T: Real>(x: T) -> T {
    if x.abs() < T::lit(1e-4) {
        let x2 = x * x;
        T::one() - x2 / T::lit(6.0) + x2 * x2 / T::lit(120.0)
    } else {
        x.sin() / x
    }
}

/// Unit quaternion `exp((0, v))`.
fn quat_exp<T: Real>(v: &Vector3<T>) -> Quaternion<T> {
    let theta = v.norm();
    let s = sinc(theta);
    Quaternion::new(theta.cos(), s * v.x, s * v.y, s * v.z)
}

/// Vector part of the logarithm of a unit quaternion with `w >= 0`.
fn quat_log<T: Real>(q: &Quaternion<T>) -> Vector3<T> {
    let q = if q.w < T::zero() { q.neg() } else { *q };
    let v = q.vector();
    let s = v.norm();
    let half_angle = s.atan2(q.w);
    if s == T::zero() {
        return v;
    }
    v * (half_angle / s)
}

pub fn axisangle_to_matrix<T: Real>(a: &AxisAngle<T>) -> RotationMatrix<T> {
    let q = quat_exp(&(a.v * T::lit(0.5)));
    quat_to_matrix(&q).expect("exp map yields a unit quaternion")
}

/// Rotation vector with angle in `[0, π]`.
pub fn matrix_to_axisangle<T: Real>(rot: &RotationMatrix<T>) -> AxisAngle<T> {
    AxisAngle { v: quat_log(&matrix_to_quat(rot)) * T::lit(2.0) }
}

pub fn logquat_to_matrix<T: Real>(l: &LogQuat<T>) -> RotationMatrix<T> {
    quat_to_matrix(&quat_exp(&l.v)).expect("exp map yields a unit quaternion")
}

pub fn matrix_to_logquat<T: Real>(rot: &RotationMatrix<T>) -> LogQuat<T> {
    LogQuat { v: quat_log(&matrix_to_quat(rot)) }
}

/// Minimal rotation taking the optical axis `(0, 0, 1)` onto the viewing ray through `t`.
pub fn view_rotation<T: Real>(t: &Vector3<T>) -> Result<RotationMatrix<T>> {
    let n = t.norm();
    if !(n > T::lit(DEGENERATE_EPS)) {
        return Err(degenerate("translation too close to the camera center"));
    }
    let d = t / n;
    let c = d.z;
    if c < T::lit(-1.0 + DEGENERATE_EPS) {
        return Ok(RotationMatrix::rot_x(T::pi()));
    }
    // ẑ × d
    let v = Vector3::new(-d.y, d.x, T::zero());
    let k = skew(&v);
    Ok(RotationMatrix(Matrix3::identity() + k + k * k / (T::one() + c)))
}

pub fn allo_to_ego<T: Real>(allo: &RotationMatrix<T>, t: &Vector3<T>) -> Result<RotationMatrix<T>> {
    Ok(view_rotation(t)?.compose(allo))
}

pub fn ego_to_allo<T: Real>(ego: &RotationMatrix<T>, t: &Vector3<T>) -> Result<RotationMatrix<T>> {
    Ok(view_rotation(t)?.transpose().compose(ego))
}

/// `t = K⁻¹ t_z (o_x, o_y, 1)ᵀ`.
pub fn backproject_center<T: Real>(o: &Vector2<T>, tz: T, k: &CameraIntrinsics<T>) -> Result<Vector3<T>> {
    if !(tz > T::zero()) {
        return Err(degenerate("depth must be positive"));
    }
    Ok(k.unproject(o) * tz)
}

pub fn encode_site<T: Real>(
    t: &Vector3<T>,
    bbox: &BBox<T>,
    zoom_size: T,
    k: &CameraIntrinsics<T>,
) -> Result<SiteTranslation<T>> {
    if !(t.z > T::zero()) {
        return Err(degenerate("object must lie in front of the camera"));
    }
    if !(zoom_size > T::zero()) {
        return Err(degenerate("zoom size must be positive"));
    }
    let o = k.project(t);
    let ratio = zoom_size / bbox.size();
    Ok(SiteTranslation { dx: (o.x - bbox.cx) / bbox.w, dy: (o.y - bbox.cy) / bbox.h, dz: t.z / ratio })
}

pub fn decode_site<T: Real>(
    s: &SiteTranslation<T>,
    bbox: &BBox<T>,
    zoom_size: T,
    k: &CameraIntrinsics<T>,
) -> Result<Vector3<T>> {
    let ratio = zoom_size / bbox.size();
    let o = Vector2::new(bbox.cx + s.dx * bbox.w, bbox.cy + s.dy * bbox.h);
    backproject_center(&o, s.dz * ratio, k)
}

/// Dynamic zoom-in for explicit jitter draws `u ∈ [-1, 1]⁴`: center shift (x, y) and scale (w, h).
pub fn dynamic_zoom_in_with<T: Real>(bbox: &BBox<T>, u: [T; 4]) -> BBox<T> {
    let shift = T::lit(DZI_SHIFT_RATIO);
    let scale = T::lit(DZI_SCALE_RATIO);
    let cx = bbox.cx + u[0] * shift * bbox.w;
    let cy = bbox.cy + u[1] * shift * bbox.h;
    let w = bbox.w * (T::one() + u[2] * scale);
    let h = bbox.h * (T::one() + u[3] * scale);
    let side = T::lit(ZOOM_RATIO) * w.max(h);
    BBox { cx, cy, w: side, h: side }
}

/// Dynamic zoom-in with uniform jitter drawn from `rng`.
pub fn dynamic_zoom_in<T: Real, R: Rng + ?Sized>(bbox: &BBox<T>, rng: &mut R) -> BBox<T> {
    let mut u = [T::zero(); 4];
    for x in &mut u {
        *x = T::lit(rng.random_range(-1.0..=1.0));
    }
    dynamic_zoom_in_with(bbox, u)
}

/// Uniformly distributed rotation (normalized 4D Gaussian quaternion).
pub fn sample_rotation<T: Real, R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix<T> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let q = Quaternion::new(T::lit(q[0]), T::lit(q[1]), T::lit(q[2]), T::lit(q[3]));
        if let Ok(r) = quat_to_matrix(&q) {
            return r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn rz90() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn rot6d_examples() {
        let id = rot6d_to_matrix(&Rot6d::new(v(1., 0., 0.), v(0., 1., 0.))).unwrap();
        assert_eq!(*id.matrix(), Matrix3::identity());
        let id = rot6d_to_matrix(&Rot6d::new(v(2., 0., 0.), v(1., 1., 0.))).unwrap();
        assert_relative_eq!(*id.matrix(), Matrix3::identity(), epsilon = 1e-15);
        let r = rot6d_to_matrix(&Rot6d::new(v(0., 1., 0.), v(-1., 0., 0.))).unwrap();
        assert_relative_eq!(*r.matrix(), rz90(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_degenerate_inputs() {
        assert!(matches!(rot6d_to_matrix(&Rot6d::new(v(0., 0., 0.), v(0., 1., 0.))), Err(Error::DegenerateInput(_))));
        assert!(matches!(rot6d_to_matrix(&Rot6d::new(v(1., 2., 3.), v(2., 4., 6.))), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn matrix_to_rot6d_examples() {
        let r = matrix_to_rot6d(&RotationMatrix::<f64>::identity());
        assert_eq!(r.to_array(), [1., 0., 0., 0., 1., 0.]);
        let r = matrix_to_rot6d(&RotationMatrix::from_matrix_unchecked(rz90()));
        assert_eq!(r.to_array(), [0., 1., 0., -1., 0., 0.]);
    }

    #[test]
    fn standard_conversions() {
        let id = quat_to_matrix(&Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(*id.matrix(), Matrix3::identity());
        let r = axisangle_to_matrix(&AxisAngle { v: v(0., 0., std::f64::consts::FRAC_PI_2) });
        assert_relative_eq!(*r.matrix(), rz90(), epsilon = 1e-15);
        assert!(quat_to_matrix(&Quaternion::new(0.0, 0.0, 0.0, 0.0)).is_err());
        let r = logquat_to_matrix(&LogQuat { v: v(0., 0., std::f64::consts::FRAC_PI_4) });
        assert_relative_eq!(*r.matrix(), rz90(), epsilon = 1e-15);
    }

    #[test]
    fn quaternion_round_trip_moves_vectors_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r: RotationMatrix<f64> = sample_rotation(&mut rng);
            let q = matrix_to_quat(&r);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            let back = quat_to_matrix(&q).unwrap();
            // oracle: rotate 100 random vectors through both matrices
            for _ in 0..100 {
                let x = v(rng.random(), rng.random(), rng.random());
                assert!((r.apply(&x) - back.apply(&x)).norm() < 1e-12);
            }
            // double cover
            assert_relative_eq!(*back.matrix(), *quat_to_matrix(&q.neg()).unwrap().matrix(), epsilon = 1e-15);
        }
    }

    #[test]
    fn axis_angle_near_pi_and_zero() {
        for angle in [0.0, 1e-12, 1e-6, 1.0, std::f64::consts::PI - 1e-9] {
            let axis = v(1.0, -2.0, 0.5).normalize();
            let r = RotationMatrix::from_axis_angle(&axis, angle);
            let a = matrix_to_axisangle(&r);
            assert!((a.v - axis * angle).norm() < 1e-9, "angle {angle}");
            assert_relative_eq!(*axisangle_to_matrix(&a).matrix(), *r.matrix(), epsilon = 1e-12);
        }
    }

    #[test]
    fn geodesic_angle() {
        let a = RotationMatrix::<f64>::rot_y(0.3);
        let b = RotationMatrix::<f64>::rot_y(-0.2);
        assert_relative_eq!(a.angle_to(&b), 0.5, epsilon = 1e-14);
        assert_relative_eq!(a.angle_to(&a), 0.0);
        let c = RotationMatrix::<f64>::rot_z(std::f64::consts::PI);
        assert_relative_eq!(RotationMatrix::identity().angle_to(&c), std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn on_axis_translation_keeps_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r: RotationMatrix<f64> = sample_rotation(&mut rng);
        let allo = ego_to_allo(&r, &v(0., 0., 5.)).unwrap();
        assert_eq!(allo, r);
    }

    #[test]
    fn view_rotation_maps_axis_onto_ray() {
        let t = v(1.5, -0.7, 4.0);
        let rv = view_rotation(&t).unwrap();
        assert!(rv.is_valid(1e-12));
        assert!((rv.apply(&Vector3::z()) - t.normalize()).norm() < 1e-14);
        // antiparallel: fixed axis x, angle π
        let rv = view_rotation(&v(0., 0., -2.)).unwrap();
        assert_relative_eq!(*rv.matrix(), *RotationMatrix::<f64>::rot_x(std::f64::consts::PI).matrix());
        assert!(view_rotation(&v(0., 0., 0.)).is_err());
    }

    #[test]
    fn backprojection_examples() {
        let k = CameraIntrinsics::<f64>::new(800.0, 800.0, 320.0, 240.0).unwrap();
        let t = backproject_center(&Vector2::new(320.0, 240.0), 4.0, &k).unwrap();
        assert_eq!(t, v(0., 0., 4.));
        let t = backproject_center(&Vector2::new(400.0, 240.0), 4.0, &k).unwrap();
        assert_relative_eq!(t, v(0.4, 0., 4.), epsilon = 1e-15);
        assert_relative_eq!(k.project(&t), Vector2::new(400.0, 240.0), epsilon = 1e-12);
        let t = backproject_center(&Vector2::new(320.0, 640.0), 8.0, &k).unwrap();
        assert_relative_eq!(t, v(0., 4., 8.), epsilon = 1e-15);
        assert!(backproject_center(&Vector2::new(0.0, 0.0), 0.0, &k).is_err());
    }

    #[test]
    fn site_examples() {
        let k = CameraIntrinsics::<f64>::new(800.0, 800.0, 320.0, 240.0).unwrap();
        let bbox = BBox::new(300.0, 200.0, 100.0, 50.0).unwrap();
        // centroid projecting onto the box center
        let t = backproject_center(&Vector2::new(300.0, 200.0), 4.0, &k).unwrap();
        let s = encode_site(&t, &bbox, 256.0, &k).unwrap();
        assert!(s.dx.abs() < 1e-12 && s.dy.abs() < 1e-12);
        // r = 256 / 100 = 2.56, δz = 4 / 2.56
        assert_relative_eq!(s.dz, 1.5625, epsilon = 1e-14);
        let back = decode_site(&s, &bbox, 256.0, &k).unwrap();
        assert_relative_eq!(back, t, epsilon = 1e-12);
    }

    #[test]
    fn zoom_in_examples() {
        let b = BBox::<f64>::new(100.0, 80.0, 40.0, 60.0).unwrap();
        let z = dynamic_zoom_in_with(&b, [0.0; 4]);
        assert_eq!((z.cx, z.cy, z.w, z.h), (100.0, 80.0, 90.0, 90.0));
        assert_eq!(b.zoomed(), z);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = dynamic_zoom_in(&b, &mut r1);
            assert_eq!(a, dynamic_zoom_in(&b, &mut r2));
            assert!(a.w >= 1.5 * 0.75 * 60.0 - 1e-12 && a.w <= 1.5 * 1.25 * 60.0 + 1e-12);
            assert!((a.cx - b.cx).abs() <= 0.25 * b.w + 1e-12);
            assert!((a.cy - b.cy).abs() <= 0.25 * b.h + 1e-12);
        }
    }
}
