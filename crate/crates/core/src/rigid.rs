//! Six-parameter rigid transforms.
//!
//! Convention: angles `α = (αx, αy, αz)` in degrees, `R = Rz(αz)·Ry(αy)·Rx(αx)`,
//! and a point maps as `p ↦ R·p + d`. Everything else in the crate (motion
//! about a center, slice poses) is built from this one convention.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn dry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(αz)·Ry(αy)·Rx(αx)` for angles in degrees.
pub fn rotation_matrix(alpha_deg: [f64; 3]) -> Matrix3<f64> {
    let [x, y, z] = alpha_deg.map(f64::to_radians);
    rz(z) * ry(y) * rx(x)
}

/// `∂R/∂αi` for i = x, y, z, per degree.
pub fn rotation_partials(alpha_deg: [f64; 3]) -> [Matrix3<f64>; 3] {
    let [x, y, z] = alpha_deg.map(f64::to_radians);
    let k = std::f64::consts::PI / 180.0;
    [
        rz(z) * ry(y) * drx(x) * k,
        rz(z) * dry(y) * rx(x) * k,
        drz(z) * ry(y) * rx(x) * k,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    alpha: [f64; 3],
    d: [f64; 3],
    rot: Matrix3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(alpha_deg: [f64; 3], d: [f64; 3]) -> Self {
        Self {
            alpha: alpha_deg,
            d,
            rot: rotation_matrix(alpha_deg),
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], [0.0; 3])
    }

    pub fn translation(d: [f64; 3]) -> Self {
        Self::new([0.0; 3], d)
    }

    pub fn rotation(alpha_deg: [f64; 3]) -> Self {
        Self::new(alpha_deg, [0.0; 3])
    }

    /// Parameters as `[αx, αy, αz, dx, dy, dz]`.
    pub fn from_params(p: [f64; 6]) -> Self {
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn params(&self) -> [f64; 6] {
        let (a, d) = (self.alpha, self.d);
        [a[0], a[1], a[2], d[0], d[1], d[2]]
    }

    pub fn alpha(&self) -> [f64; 3] {
        self.alpha
    }

    pub fn d(&self) -> [f64; 3] {
        self.d
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rot
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.d)
    }

    /// Homogeneous 4×4 form.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation_vector());
        m
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.translation_vector()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let r = self.rot * other.rot;
        let d = self.rot * other.translation_vector() + self.translation_vector();
        Self::from_rotation_translation(&r, &d)
            .expect("product of rotations is a rotation")
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rot.transpose();
        let d = -(rt * self.translation_vector());
        Self::from_rotation_translation(&rt, &d).expect("transpose of a rotation is a rotation")
    }

    /// The same motion expressed about `center`: `p ↦ c + R(p − c) + d`.
    pub fn about_center(&self, center: Vector3<f64>) -> RigidTransform {
        let d = center - self.rot * center + self.translation_vector();
        Self {
            alpha: self.alpha,
            d: d.into(),
            rot: self.rot,
        }
    }

    /// Recovers parameters from a homogeneous matrix. Fails when the upper
    /// 3×3 block is not a proper rotation to within 1e-6 or the last row is
    /// not `(0, 0, 0, 1)`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<RigidTransform> {
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if last.iter().any(|v| v.abs() > 1e-6) {
            return Err(Error::geometry("last row of a rigid matrix must be (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let d: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rotation_translation(&r, &d)
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, d: &Vector3<f64>) -> Result<RigidTransform> {
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if !(err < 1e-6) || r.determinant() < 0.0 {
            return Err(Error::geometry(format!(
                "matrix is not a proper rotation (orthonormality error {err:.2e})"
            )));
        }
        Ok(Self {
            alpha: euler_from_rotation(r),
            d: [d.x, d.y, d.z],
            rot: *r,
        })
    }
}

/// Inverse of [`rotation_matrix`]. Near gimbal lock (`|cos αy| < 1e-7`) the
/// split between αx and αz is arbitrary; αx is pinned to zero.
fn euler_from_rotation(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let ay = sy.asin();
    if ay.cos().abs() < 1e-7 {
        let az = (-r[(0, 1)]).atan2(r[(1, 1)]);
        [0.0, ay.to_degrees(), az.to_degrees()]
    } else {
        let ax = r[(2, 1)].atan2(r[(2, 2)]);
        let az = r[(1, 0)].atan2(r[(0, 0)]);
        [ax.to_degrees(), ay.to_degrees(), az.to_degrees()]
    }
}

/// Angle of `Ra·Rbᵀ` in degrees.
pub fn geodesic_rotation_deg(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let m = a.rot * b.rot.transpose();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// One text row: `αx αy αz dx dy dz`.
impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.params();
        write!(f, "{} {} {} {} {} {}", p[0], p[1], p[2], p[3], p[4], p[5])
    }
}

impl FromStr for RigidTransform {
    type Err = Error;

    /// Parses the first six whitespace-separated numbers of a row; further
    /// columns (e.g. a loss) are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .take(6)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::input(format!("bad transform row {s:?}: {e}")))?;
        if vals.len() != 6 {
            return Err(Error::input(format!("transform row needs 6 values: {s:?}")));
        }
        Ok(Self::from_params([vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Vector3<f64>, b: Vector3<f64>, tol: f64) -> bool {
        (a - b).amax() < tol
    }

    fn random_transform(rng: &mut ChaCha8Rng, max_deg: f64) -> RigidTransform {
        let mut p = [0.0; 6];
        for (i, v) in p.iter_mut().enumerate() {
            *v = if i < 3 {
                rng.random_range(-max_deg..max_deg)
            } else {
                rng.random_range(-20.0..20.0)
            };
        }
        RigidTransform::from_params(p)
    }

    #[test]
    fn zero_params_give_identity() {
        assert_eq!(RigidTransform::identity().matrix(), Matrix4::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::rotation([0.0, 0.0, 90.0]);
        assert!(close(t.apply(Vector3::x()), Vector3::y(), 1e-15));
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::translation([1.0, 2.0, 3.0]);
        let p = Vector3::new(-4.0, 0.5, 9.0);
        assert!(close(t.apply(p), p + Vector3::new(1.0, 2.0, 3.0), 1e-15));
    }

    #[test]
    fn declared_euler_order() {
        // Rz(30)·Ry(20)·Rx(10) built by hand from the elementary matrices
        let (a, b, c) = (10f64.to_radians(), 20f64.to_radians(), 30f64.to_radians());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rz = Matrix3::new(c.cos(), -c.sin(), 0.0, c.sin(), c.cos(), 0.0, 0.0, 0.0, 1.0);
        let t = RigidTransform::rotation([10.0, 20.0, 30.0]);
        assert!((t.rotation_matrix() - rz * ry * rx).amax() < 1e-15);
    }

    #[test]
    fn inverse_of_identity() {
        let i = RigidTransform::identity().inverse();
        assert!((i.matrix() - Matrix4::identity()).amax() < 1e-15);
    }

    #[test]
    fn translate_after_rotate_maps_origin() {
        let a = RigidTransform::translation([1.0, 0.0, 0.0]);
        let b = RigidTransform::rotation([0.0, 0.0, 90.0]);
        let p = a.compose(&b).apply(Vector3::zeros());
        assert!(close(p, Vector3::new(1.0, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t = random_transform(&mut rng, 80.0);
            let back = RigidTransform::from_matrix(&t.matrix()).unwrap();
            for (x, y) in t.params().iter().zip(back.params()) {
                assert!((x - y).abs() < 1e-9, "{t} vs {back}");
            }
        }
    }

    #[test]
    fn gimbal_lock_is_deterministic() {
        let t = RigidTransform::rotation([25.0, 90.0, 40.0]);
        let back = RigidTransform::from_matrix(&t.matrix()).unwrap();
        assert_eq!(back.alpha()[0], 0.0);
        assert!((back.rotation_matrix() - t.rotation_matrix()).amax() < 1e-9);
    }

    #[test]
    fn group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_transform(&mut rng, 180.0);
            let b = random_transform(&mut rng, 180.0);
            let c = random_transform(&mut rng, 180.0);
            let lhs = a.compose(&b).compose(&c).matrix();
            let rhs = a.compose(&b.compose(&c)).matrix();
            assert!((lhs - rhs).amax() < 1e-9);
            let id = a.compose(&a.inverse()).matrix();
            assert!((id - Matrix4::identity()).amax() < 1e-9);
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            assert!(close(a.compose(&b).apply(p), a.apply(b.apply(p)), 1e-9));
            let v = Vector3::new(3.0, -1.0, 2.0);
            assert!(((a.rotation_matrix() * v).norm() - v.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn non_rigid_matrix_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(RigidTransform::from_matrix(&m).is_err());
        let mut reflect = Matrix4::identity();
        reflect[(2, 2)] = -1.0;
        assert!(RigidTransform::from_matrix(&reflect).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let id = RigidTransform::identity();
        assert_eq!(geodesic_rotation_deg(&id, &id), 0.0);
        let a = RigidTransform::rotation([0.0, 0.0, 10.0]);
        let b = RigidTransform::rotation([0.0, 0.0, 15.0]);
        assert!((geodesic_rotation_deg(&a, &b) - 5.0).abs() < 1e-9);
        // Rx(90)·Ry(90)ᵀ has trace 0, so the angle is acos(-1/2)
        let x = RigidTransform::rotation([90.0, 0.0, 0.0]);
        let y = RigidTransform::rotation([0.0, 90.0, 0.0]);
        assert!((geodesic_rotation_deg(&x, &y) - 120.0).abs() < 1e-9);
    }

    #[test]
    fn partials_match_differences() {
        let a = [12.0, -33.0, 71.0];
        let parts = rotation_partials(a);
        for (i, p) in parts.iter().enumerate() {
            let (mut hi, mut lo) = (a, a);
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (rotation_matrix(hi) - rotation_matrix(lo)) / 2e-5;
            assert!((fd - p).amax() < 1e-9);
        }
    }

    #[test]
    fn about_center_fixes_the_center() {
        let c = Vector3::new(10.0, -3.0, 7.0);
        let t = RigidTransform::rotation([20.0, 5.0, -40.0]).about_center(c);
        assert!(close(t.apply(c), c, 1e-12));
    }

    #[test]
    fn text_row_round_trip() {
        let t = RigidTransform::new([1.5, -2.25, 0.1], [3.0, 4.0, -5.5]);
        let back: RigidTransform = t.to_string().parse().unwrap();
        assert_eq!(back.params(), t.params());
        let with_loss: RigidTransform = format!("{t} 0.0123").parse().unwrap();
        assert_eq!(with_loss.params(), t.params());
        assert!("1 2 3".parse::<RigidTransform>().is_err());
    }
}
