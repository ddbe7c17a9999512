//! Camera projection, rigid poses and the distance metrics shared by the
//! constraint builders, the controller and the executor.
//!
//! Pixel coordinates are `(x, y)` = `(column, row)`. The camera frame is the
//! usual pinhole convention: `+z` along the optical axis, `+x` to the right
//! in the image and `+y` down the image.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

const ROTATION_TOLERANCE: f64 = 1e-9;
const UNIT_QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth value {0}")]
    InvalidDepth(f64),
    #[error("quaternion norm {0} is not 1")]
    NonUnitQuaternion(f64),
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidFocalLength { fx: f64, fy: f64 },
    #[error("extrinsic rotation is not a proper rotation (det={det}, orthogonality error={ortho})")]
    InvalidRotation { det: f64, ortho: f64 },
    #[error("image buffer has {actual} entries, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("point lies behind the camera (z={0})")]
    BehindCamera(f64),
}

/// Row-major binary mask. Non-zero bytes are foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self, GeometryError> {
        if bits.len() != width * height {
            return Err(GeometryError::BufferSize {
                expected: width * height,
                actual: bits.len(),
            });
        }
        let bits = bits.into_iter().map(|b| u8::from(b != 0)).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Mask with the given pixels set; pixels outside the image are ignored.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let mut mask = Self::empty(width, height);
        for &(x, y) in pixels {
            if x < width && y < height {
                mask.set(x, y, true);
            }
        }
        mask
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    /// Like [`BinaryMask::get`] but treats out-of-image coordinates as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = u8::from(value);
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Foreground pixels in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Tight bounding box as `(left, top, right, bottom)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (x, y) in self.foreground() {
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((l, t, r, b)) => (l.min(x), t.min(y), r.max(x), b.max(y)),
            });
        }
        bounds
    }

    /// Number of pixels set in both masks. Shapes must match.
    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        debug_assert!(self.same_shape(other));
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Mean of the foreground pixel coordinates.
    pub fn centroid(&self) -> Option<Vec2> {
        let mut sum = Vec2::zeros();
        let mut n = 0usize;
        for (x, y) in self.foreground() {
            sum += Vec2::new(x as f64, y as f64);
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Abstracts "what is the depth at this pixel", so constraint updates can
/// read from a stored raster or from a live scene probe.
pub trait DepthLookup {
    /// Valid depth (meters along the optical axis) at a continuous pixel
    /// coordinate, or `None` when missing.
    fn depth_at(&self, pixel: Vec2) -> Option<f64>;
}

/// Row-major depth raster in meters. Non-positive or non-finite values are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f32>) -> Result<Self, GeometryError> {
        if depth.len() != width * height {
            return Err(GeometryError::BufferSize {
                expected: width * height,
                actual: depth.len(),
            });
        }
        Ok(Self {
            width,
            height,
            depth,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            depth: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[f32] {
        &self.depth
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.depth[y * self.width + x] = value;
    }

    /// Raw stored value, valid or not.
    pub fn raw_at(&self, x: usize, y: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    /// Valid depth at an integer pixel.
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.depth[y * self.width + x] as f64;
        is_valid_depth(d).then_some(d)
    }
}

impl DepthLookup for DepthImage {
    /// Nearest-pixel lookup.
    fn depth_at(&self, pixel: Vec2) -> Option<f64> {
        let (x, y) = (pixel.x.round(), pixel.y.round());
        if x < 0.0 || y < 0.0 {
            return None;
        }
        self.at(x as usize, y as usize)
    }
}

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let det = rotation.determinant();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if (det - 1.0).abs() > ROTATION_TOLERANCE || ortho > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation { det, ortho });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Pinhole intrinsics plus camera-to-world extrinsic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRepr", into = "CameraModelRepr")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidFocalLength { fx, fy });
        }
        // Re-validate in case the transform was built field-by-field.
        let extrinsic = RigidTransform::new(extrinsic.rotation, extrinsic.translation)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
        })
    }

    /// Camera at `eye` looking at `target`. `up` picks the image "up"
    /// direction (the image `-y` axis).
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(fx, fy, cx, cy, RigidTransform::new(rotation, eye)?)
    }

    /// Camera-frame ray direction (not normalized, z = 1) through a pixel.
    pub fn ray_camera(&self, pixel: Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.translation
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.extrinsic.apply_inverse(world)
    }

    /// Projects a world point to a continuous pixel coordinate.
    pub fn project(&self, world: &Vec3) -> Result<Vec2, GeometryError> {
        let c = self.to_camera(world);
        if c.z <= 0.0 {
            return Err(GeometryError::BehindCamera(c.z));
        }
        Ok(Vec2::new(
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct CameraModelRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major camera-to-world rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<CameraModelRepr> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraModelRepr) -> Result<Self, Self::Error> {
        let rotation = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        let extrinsic = RigidTransform::new(rotation, Vec3::from(r.translation))?;
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, extrinsic)
    }
}

impl From<CameraModel> for CameraModelRepr {
    fn from(c: CameraModel) -> Self {
        let m = c.extrinsic.rotation;
        CameraModelRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: c.extrinsic.translation.into(),
        }
    }
}

/// Lifts a pixel with its depth into the world frame.
pub fn deproject(pixel: Vec2, depth: f64, cam: &CameraModel) -> Result<Vec3, GeometryError> {
    if !is_valid_depth(depth) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let local = Vec3::new(
        (pixel.x - cam.cx) * depth / cam.fx,
        (pixel.y - cam.cy) * depth / cam.fy,
        depth,
    );
    Ok(cam.extrinsic.apply(&local))
}

/// End-effector or target pose. Orientation is a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, rejecting
    /// anything that is not unit length to 1e-9.
    pub fn from_wxyz(position: Vec3, wxyz: [f64; 4]) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
        Ok(Self::new(position, UnitQuaternion::new_unchecked(q)))
    }

    pub fn from_rotation(position: Vec3, rotation: &Rotation3<f64>) -> Self {
        Self::new(position, UnitQuaternion::from_rotation_matrix(rotation))
    }
}

/// A world-frame target point, optionally with an orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint3D {
    pub position: [f64; 3],
    /// `(w, x, y, z)`; `None` means orientation is unconstrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<[f64; 4]>,
    pub source_label: String,
}

impl Constraint3D {
    pub fn at(position: Vec3, source_label: impl Into<String>) -> Self {
        Self {
            position: position.into(),
            orientation: None,
            source_label: source_label.into(),
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn orientation(&self) -> Option<Quaternion<f64>> {
        self.orientation
            .map(|q| Quaternion::new(q[0], q[1], q[2], q[3]))
    }

    /// Normalised orientation, if the constraint has one.
    pub fn orientation_quaternion(&self) -> Option<UnitQuaternion<f64>> {
        self.orientation().map(UnitQuaternion::new_normalize)
    }

    pub fn with_orientation(mut self, q: &UnitQuaternion<f64>) -> Self {
        self.orientation = Some([q.w, q.i, q.j, q.k]);
        self
    }
}

/// Anything with a world position.
pub trait HasPosition {
    fn world_position(&self) -> Vec3;
}

impl HasPosition for Pose {
    fn world_position(&self) -> Vec3 {
        self.position
    }
}

impl HasPosition for Constraint3D {
    fn world_position(&self) -> Vec3 {
        self.position()
    }
}

impl HasPosition for Vec3 {
    fn world_position(&self) -> Vec3 {
        *self
    }
}

pub fn position_distance(a: &impl HasPosition, b: &impl HasPosition) -> f64 {
    (a.world_position() - b.world_position()).norm()
}

/// Geodesic angle between two rotations, identifying `q` with `-q`.
pub fn orientation_distance(
    q1: &Quaternion<f64>,
    q2: &Quaternion<f64>,
) -> Result<f64, GeometryError> {
    for q in [q1, q2] {
        let n = q.norm();
        if (n - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
    }
    let dot = q1.coords.dot(&q2.coords).abs().clamp(0.0, 1.0);
    Ok(2.0 * dot.acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn cam(fx: f64, fy: f64, cx: f64, cy: f64) -> CameraModel {
        CameraModel::new(fx, fy, cx, cy, RigidTransform::identity()).unwrap()
    }

    #[test]
    fn deproject_principal_point() {
        let c = cam(600.0, 600.0, 320.0, 240.0);
        let p = deproject(Vec2::new(320.0, 240.0), 1.0, &c).unwrap();
        assert_relative_eq!(p, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn deproject_unit_tangent() {
        let c = cam(600.0, 600.0, 320.0, 240.0);
        let p = deproject(Vec2::new(920.0, 240.0), 2.0, &c).unwrap();
        assert_relative_eq!(p, Vec3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn deproject_offset_row() {
        let c = cam(600.0, 600.0, 320.0, 240.0);
        let p = deproject(Vec2::new(320.0, 180.0), 0.8, &c).unwrap();
        assert_relative_eq!(p, Vec3::new(0.0, -0.08, 0.8), epsilon = 1e-12);
    }

    #[test]
    fn deproject_rejects_bad_depth() {
        let c = cam(600.0, 600.0, 320.0, 240.0);
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                deproject(Vec2::new(1.0, 1.0), d, &c),
                Err(GeometryError::InvalidDepth(_))
            ));
        }
    }

    #[test]
    fn camera_rejects_reflection_and_bad_focal() {
        let flip = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(flip, Vec3::zeros()).is_err());
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, RigidTransform::identity()).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let c = CameraModel::look_at(
            500.0,
            510.0,
            320.0,
            240.0,
            Vec3::new(0.5, 0.1, 1.4),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: CameraModel = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.extrinsic.rotation, c.extrinsic.rotation, epsilon = 1e-15);
        assert_eq!(back.fx, c.fx);
    }

    #[test]
    fn position_distance_examples() {
        let o = Pose::from_position(Vec3::zeros());
        assert_eq!(position_distance(&o, &o), 0.0);
        assert_relative_eq!(
            position_distance(&o, &Pose::from_position(Vec3::new(3.0, 4.0, 0.0))),
            5.0
        );
        let c = Constraint3D::at(Vec3::new(0.4, 0.6, 0.3), "c");
        let p = Pose::from_position(Vec3::new(0.1, 0.2, 0.3));
        assert_relative_eq!(position_distance(&p, &c), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn orientation_distance_examples() {
        let id = *UnitQuaternion::identity().quaternion();
        assert_eq!(orientation_distance(&id, &id).unwrap(), 0.0);
        assert_eq!(orientation_distance(&id, &(-id)).unwrap(), 0.0);
        let z90 = *UnitQuaternion::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2).quaternion();
        // <q1,q2> = cos(pi/4)
        assert_relative_eq!(id.coords.dot(&z90.coords), FRAC_PI_4.cos(), epsilon = 1e-15);
        assert_relative_eq!(orientation_distance(&id, &z90).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        let bad = Quaternion::new(1.1, 0.0, 0.0, 0.0);
        assert!(matches!(
            orientation_distance(&id, &bad),
            Err(GeometryError::NonUnitQuaternion(_))
        ));
    }

    #[test]
    fn pose_rejects_non_unit() {
        assert!(Pose::from_wxyz(Vec3::zeros(), [1.0, 0.0, 0.0, 1e-3]).is_err());
        assert!(Pose::from_wxyz(Vec3::zeros(), [0.0, 1.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn mask_helpers() {
        let m = BinaryMask::from_pixels(4, 3, &[(1, 1), (2, 1), (2, 2)]);
        assert_eq!(m.area(), 3);
        assert_eq!(m.bounding_box(), Some((1, 1, 2, 2)));
        assert_eq!(m.foreground().collect::<Vec<_>>(), vec![(1, 1), (2, 1), (2, 2)]);
        assert!(BinaryMask::new(2, 2, vec![0; 3]).is_err());
        assert!(BinaryMask::empty(3, 3).centroid().is_none());
    }

    fn arb_unit_quat() -> impl Strategy<Value = Quaternion<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalize())
    }

    fn arb_vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn reprojection_recovers_pixel(
            u in 0.0..640.0f64, v in 0.0..480.0f64, d in 0.05..20.0f64,
            ex in -1.0..1.0f64, ey in -1.0..1.0f64, yaw in -3.0..3.0f64,
        ) {
            let c = CameraModel::look_at(
                600.0, 590.0, 321.5, 239.0,
                Vec3::new(ex, ey, 1.5),
                Vec3::new(yaw.cos(), yaw.sin(), 0.0),
                Vec3::z(),
            ).unwrap();
            let w = deproject(Vec2::new(u, v), d, &c).unwrap();
            let back = c.project(&w).unwrap();
            prop_assert!((back - Vec2::new(u, v)).norm() < 1e-6);
        }

        #[test]
        fn position_triangle_inequality(a in arb_vec3(), b in arb_vec3(), c in arb_vec3()) {
            let ab = position_distance(&a, &b);
            let bc = position_distance(&b, &c);
            let ac = position_distance(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, position_distance(&b, &a));
        }

        #[test]
        fn orientation_symmetric_and_sign_invariant(q1 in arb_unit_quat(), q2 in arb_unit_quat()) {
            let d = orientation_distance(&q1, &q2).unwrap();
            prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&d));
            prop_assert_eq!(d, orientation_distance(&q2, &q1).unwrap());
            prop_assert_eq!(d, orientation_distance(&(-q1), &q2).unwrap());
            prop_assert_eq!(d, orientation_distance(&q1, &(-q2)).unwrap());
        }
    }
}
