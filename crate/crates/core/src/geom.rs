//! Pinhole camera, rigid transforms, projection and pose sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

/// Depth below which a camera-frame point is not in front of the image plane.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

/// Threshold on `|R[0][2]|` above which the XYZ Euler decomposition is
/// reported as gimbal locked.
pub const GIMBAL_LOCK_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InvalidIntrinsics(format!("focal lengths {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!("image {width}x{height}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// The 3×3 matrix `K`.
    pub fn matrix(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        Mat3::from_rows([[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]])
    }

    /// Builds intrinsics from a row-major 3×3 block. Skew and the bottom
    /// row must be those of a pinhole matrix.
    pub fn from_flat(k: &[T; 9], width: usize, height: usize) -> Result<Self> {
        let (z, o) = (T::zero(), T::one());
        if k[1] != z || k[3] != z || k[6] != z || k[7] != z || k[8] != o {
            return Err(Error::InvalidIntrinsics(
                "expected [fx 0 cx; 0 fy cy; 0 0 1]".into(),
            ));
        }
        Self::new(k[0], k[4], k[2], k[5], width, height)
    }

    pub fn to_flat(&self) -> [T; 9] {
        let m = self.matrix().m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// Half-open frustum test on image coordinates.
    #[inline]
    pub fn contains(&self, px: &Pixel<T>) -> bool {
        px.u >= T::zero()
            && px.v >= T::zero()
            && px.u < T::from_usize_lossy(self.width)
            && px.v < T::from_usize_lossy(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Pixel<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, o: &Self) -> T {
        let du = self.u - o.u;
        let dv = self.v - o.v;
        (du * du + dv * dv).sqrt()
    }
}

/// The camera-frame point lies at or behind `z_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BehindCamera;

/// Proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

fn rotation_tolerance<T: Real>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(100.0))
}

impl<T: Real> RigidTransform<T> {
    /// Validates `rotation` as orthonormal with determinant +1.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        if !rotation.is_finite() || !translation.is_finite() {
            return Err(Error::InvalidRotation(f64::NAN));
        }
        let ortho = rotation.orthonormality_error();
        let det_err = (rotation.determinant() - T::one()).abs();
        let err = ortho.max(det_err);
        if err > rotation_tolerance::<T>() {
            return Err(Error::InvalidRotation(err.to_f64_lossy()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// Row-major `[R|t]` as twelve values.
    pub fn to_row_major(&self) -> [T; 12] {
        let r = &self.rotation.m;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1],
            r[2][2], t.z,
        ]
    }

    pub fn from_row_major(v: &[T; 12]) -> Result<Self> {
        let rot = Mat3::from_rows([[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]]);
        Self::new(rot, Vec3::new(v[3], v[7], v[11]))
    }

    /// KITTI-style pose line: twelve whitespace-separated reals.
    pub fn to_pose_line(&self) -> String {
        self.to_row_major()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_pose_line(line: &str) -> Result<Self> {
        let vals: Vec<T> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Parse(format!("pose value {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let arr: [T; 12] = vals
            .try_into()
            .map_err(|v: Vec<T>| Error::Parse(format!("pose line has {} values, expected 12", v.len())))?;
        Self::from_row_major(&arr)
    }
}

/// Projects a camera-frame point through `K`.
#[inline]
pub fn project_camera_point<T: Real>(
    k: &CameraIntrinsics<T>,
    pc: Vec3<T>,
    z_min: T,
) -> Result<Pixel<T>, BehindCamera> {
    if !(pc.z > z_min) {
        return Err(BehindCamera);
    }
    Ok(Pixel::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Pixel of a world point under pose `t`, or [`BehindCamera`].
#[inline]
pub fn project_point<T: Real>(
    k: &CameraIntrinsics<T>,
    t: &RigidTransform<T>,
    p: Vec3<T>,
) -> Result<Pixel<T>, BehindCamera> {
    project_point_with_z_min(k, t, p, T::lit(DEFAULT_Z_MIN))
}

#[inline]
pub fn project_point_with_z_min<T: Real>(
    k: &CameraIntrinsics<T>,
    t: &RigidTransform<T>,
    p: Vec3<T>,
    z_min: T,
) -> Result<Pixel<T>, BehindCamera> {
    project_camera_point(k, t.apply(p), z_min)
}

/// Every point that lands inside the image, in ascending index order.
pub fn project_cloud<T: Real>(
    k: &CameraIntrinsics<T>,
    t: &RigidTransform<T>,
    points: &[Vec3<T>],
) -> Vec<(usize, Pixel<T>)> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| match project_point(k, t, p) {
            Ok(px) if k.contains(&px) => Some((i, px)),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles<T> {
    /// Angles about x, y, z in degrees.
    pub degrees: [T; 3],
    pub gimbal_lock: bool,
}

/// Decomposes `R = Rx(a) · Ry(b) · Rz(c)` (intrinsic X, then Y, then Z).
pub fn rotation_to_euler<T: Real>(r: &Mat3<T>) -> EulerAngles<T> {
    let m = &r.m;
    let sb = m[0][2].max(-T::one()).min(T::one());
    let b = sb.asin();
    let gimbal_lock = sb.abs() > T::lit(GIMBAL_LOCK_THRESHOLD);
    let (a, c) = if gimbal_lock {
        let s = sb.signum();
        ((s * m[1][0]).atan2(m[1][1]), T::zero())
    } else {
        ((-m[1][2]).atan2(m[2][2]), (-m[0][1]).atan2(m[0][0]))
    };
    EulerAngles {
        degrees: [a.to_degrees(), b.to_degrees(), c.to_degrees()],
        gimbal_lock,
    }
}

/// Inverse of [`rotation_to_euler`].
pub fn euler_to_rotation<T: Real>(degrees: [T; 3]) -> Mat3<T> {
    let [a, b, c] = degrees.map(|d| d.to_radians());
    Mat3::rot_x(a).mul_mat(&Mat3::rot_y(b)).mul_mat(&Mat3::rot_z(c))
}

/// Rotation about `axis` (any nonzero vector) by `angle` radians.
pub fn axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let a = axis * (T::one() / axis.norm());
    let (s, c) = (angle * T::lit(0.5)).sin_cos();
    Mat3::from_quaternion([c, a.x * s, a.y * s, a.z * s])
}

/// Uniformly distributed rotation.
pub fn random_rotation<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Mat3<T> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    Mat3::from_quaternion(q.map(|v| T::lit(v / n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpAxis {
    X,
    #[default]
    Y,
    Z,
}

impl UpAxis {
    pub fn unit<T: Real>(self) -> Vec3<T> {
        let (z, o) = (T::zero(), T::one());
        match self {
            UpAxis::X => Vec3::new(o, z, z),
            UpAxis::Y => Vec3::new(z, o, z),
            UpAxis::Z => Vec3::new(z, z, o),
        }
    }

    fn ground_axes<T: Real>(self) -> (Vec3<T>, Vec3<T>) {
        let (z, o) = (T::zero(), T::one());
        let (ex, ey, ez) = (Vec3::new(o, z, z), Vec3::new(z, o, z), Vec3::new(z, z, o));
        match self {
            UpAxis::X => (ey, ez),
            UpAxis::Y => (ez, ex),
            UpAxis::Z => (ex, ey),
        }
    }
}

/// Ground-vehicle style pose perturbation: a yaw about the up axis and a
/// translation in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    /// Radius of the translation disc in meters.
    pub max_translation: f64,
    /// Yaw drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub up_axis: UpAxis,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            max_translation: 10.0,
            max_rotation_deg: 180.0,
            up_axis: UpAxis::Y,
        }
    }
}

impl PoseSampler {
    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> RigidTransform<T> {
        let yaw = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let (radius, phi) = if self.max_translation > 0.0 {
            let r = self.max_translation * rng.random::<f64>().sqrt();
            (r, rng.random_range(0.0..std::f64::consts::TAU))
        } else {
            (0.0, 0.0)
        };
        let rotation = if yaw == 0.0 {
            Mat3::identity()
        } else {
            axis_angle(self.up_axis.unit(), T::lit(yaw.to_radians()))
        };
        let (e1, e2) = self.up_axis.ground_axes::<T>();
        let translation = e1 * T::lit(radius * phi.cos()) + e2 * T::lit(radius * phi.sin());
        RigidTransform {
            rotation,
            translation,
        }
    }
}

/// Full-circle yaw about `up_axis` with a translation in the ground disc of
/// radius `max_translation`.
pub fn random_pose<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    max_translation: f64,
    up_axis: UpAxis,
) -> RigidTransform<T> {
    PoseSampler {
        max_translation,
        max_rotation_deg: 180.0,
        up_axis,
    }
    .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 64, 64).unwrap()
    }

    #[test]
    fn principal_ray_and_hand_projection() {
        let id = RigidTransform::identity();
        let px = project_point(&unit_k(), &id, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.u, px.v), (0.0, 0.0));
        let px = project_point(&unit_k(), &id, Vec3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!((px.u, px.v), (1.0, 2.0));
    }

    #[test]
    fn behind_camera_is_classified() {
        let id = RigidTransform::identity();
        for z in [0.0, -1.0, 1e-7] {
            assert_eq!(
                project_point(&unit_k(), &id, Vec3::new(0.0, 0.0, z)),
                Err(BehindCamera)
            );
        }
    }

    #[test]
    fn invalid_intrinsics_and_rotation_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
        let mut m = Mat3::<f64>::identity();
        m.m[0][0] = -1.0;
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
        m.m[0][0] = 1.0 + 1e-6;
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn euler_of_identity_and_single_axis() {
        let e = rotation_to_euler(&Mat3::<f64>::identity());
        assert_eq!(e.degrees, [0.0, 0.0, 0.0]);
        let e = rotation_to_euler(&Mat3::rot_y(30f64.to_radians()));
        assert!((e.degrees[0]).abs() < 1e-12);
        assert!((e.degrees[1] - 30.0).abs() < 1e-12);
        assert!((e.degrees[2]).abs() < 1e-12);
        assert!(!e.gimbal_lock);
    }

    #[test]
    fn gimbal_lock_branch_still_reconstructs() {
        for sign in [1.0, -1.0] {
            let r = euler_to_rotation([25.0, 90.0 * sign, 0.0]);
            let e = rotation_to_euler(&r);
            assert!(e.gimbal_lock);
            let back = euler_to_rotation(e.degrees);
            assert!(back.frobenius_distance(&r) < 1e-7);
        }
    }

    #[test]
    fn pose_line_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: RigidTransform<f64> = random_pose(&mut rng, 10.0, UpAxis::Y);
        let back = RigidTransform::<f64>::from_pose_line(&t.to_pose_line()).unwrap();
        assert_eq!(back, t);
        assert!(RigidTransform::<f64>::from_pose_line("1 0 0").is_err());
    }

    #[test]
    fn random_pose_is_a_ground_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for axis in [UpAxis::X, UpAxis::Y, UpAxis::Z] {
            for _ in 0..50 {
                let t: RigidTransform<f64> = random_pose(&mut rng, 10.0, axis);
                let up = axis.unit::<f64>();
                assert!(t.translation().dot(up).abs() < 1e-15);
                assert!((t.rotation().mul_vec(up) - up).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn intrinsics_flat_round_trip() {
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(CameraIntrinsics::from_flat(&k.to_flat(), 640, 480).unwrap(), k);
        let mut bad = k.to_flat();
        bad[1] = 0.5;
        assert!(CameraIntrinsics::from_flat(&bad, 640, 480).is_err());
    }
}
