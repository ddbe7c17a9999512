//! Desk-scale synthetic world.
//!
//! Objects are analytic primitives resting on a ground plane at `z = 0`.
//! Rendering casts one ray per pixel centre and keeps the nearest hit, which
//! gives exact per-object silhouettes and a z-buffer depth image. Timed
//! disturbances displace objects rigidly, the scripted tracker reprojects
//! bound object points at a fixed rate, and sphere/box obstacles provide an
//! exact signed distance field for the collision cost.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::Rotation3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    BinaryMask, CameraModel, DepthImage, DepthLookup, GeometryError, Vec2, Vec3,
};
use crate::mask::MaskSet;
use crate::mppi::CollisionField;
use crate::observation::Observation;

pub const SCENE_SCHEMA_VERSION: u32 = 1;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed scene: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    LookAt {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    },
    Explicit(CameraModel),
}

impl CameraSpec {
    pub fn model(&self) -> Result<CameraModel, GeometryError> {
        match *self {
            CameraSpec::LookAt {
                fx,
                fy,
                cx,
                cy,
                eye,
                target,
                up,
            } => CameraModel::look_at(fx, fy, cx, cy, eye.into(), target.into(), up.into()),
            CameraSpec::Explicit(m) => Ok(m),
        }
    }
}

/// Shapes in their local frame: base centred on the origin, `+z` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box {
        size: [f64; 3],
    },
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Cup: a tube of wall thickness `wall` on a solid floor of thickness `floor`.
    OpenCylinder {
        radius: f64,
        height: f64,
        wall: f64,
        floor: f64,
    },
    /// Two parallel prongs along `+x` joined by a hinge block at `x = 0`.
    /// `gap` is the clear distance between the prongs.
    Tweezer {
        length: f64,
        prong_width: f64,
        thickness: f64,
        gap: f64,
        hinge_length: f64,
    },
    /// Base block with a narrower ridge centred on its top face.
    Switch {
        base: [f64; 3],
        ridge: [f64; 3],
    },
}

impl Shape {
    fn validate(&self) -> Result<(), String> {
        let pos = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        let ok = match *self {
            Shape::Box { size } => pos(&size),
            Shape::Cylinder { radius, height } => pos(&[radius, height]),
            Shape::OpenCylinder {
                radius,
                height,
                wall,
                floor,
            } => pos(&[radius, height, wall, floor]) && wall < radius && floor < height,
            Shape::Tweezer {
                length,
                prong_width,
                thickness,
                gap,
                hinge_length,
            } => pos(&[length, prong_width, thickness, gap, hinge_length]) && hinge_length < length,
            Shape::Switch { base, ridge } => pos(&base) && pos(&ridge),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad dimensions in {self:?}"))
        }
    }

    /// First ray parameter `t > 0` at which the local-frame ray enters the shape.
    fn entry(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match *self {
            Shape::Box { size: [sx, sy, sz] } => {
                entry_of(aabb([-sx / 2.0, -sy / 2.0, 0.0], [sx / 2.0, sy / 2.0, sz], o, d))
            }
            Shape::Cylinder { radius, height } => entry_of(cylinder(radius, 0.0, height, o, d)),
            Shape::OpenCylinder {
                radius,
                height,
                wall,
                floor,
            } => {
                let outer = cylinder(radius, 0.0, height, o, d)?;
                // The bore extends above the rim so rays entering through
                // the opening start inside it.
                let bore = cylinder(radius - wall, floor, height + 1.0, o, d);
                let t = match bore {
                    Some((b0, b1)) if outer.0 >= b0 && outer.0 <= b1 => {
                        if b1 < outer.1 {
                            b1
                        } else {
                            return None;
                        }
                    }
                    _ => outer.0,
                };
                (t > HIT_EPS).then_some(t)
            }
            Shape::Tweezer {
                length,
                prong_width: w,
                thickness: h,
                gap: g,
                hinge_length,
            } => {
                let half = g / 2.0 + w;
                [
                    aabb([0.0, g / 2.0, 0.0], [length, half, h], o, d),
                    aabb([0.0, -half, 0.0], [length, -g / 2.0, h], o, d),
                    aabb([0.0, -half, 0.0], [hinge_length, half, h], o, d),
                ]
                .into_iter()
                .filter_map(entry_of)
                .reduce(f64::min)
            }
            Shape::Switch {
                base: [bx, by, bz],
                ridge: [rx, ry, rz],
            } => [
                aabb([-bx / 2.0, -by / 2.0, 0.0], [bx / 2.0, by / 2.0, bz], o, d),
                aabb([-rx / 2.0, -ry / 2.0, bz], [rx / 2.0, ry / 2.0, bz + rz], o, d),
            ]
            .into_iter()
            .filter_map(entry_of)
            .reduce(f64::min),
        }
    }
}

fn entry_of(interval: Option<(f64, f64)>) -> Option<f64> {
    let (t0, _) = interval?;
    (t0 > HIT_EPS).then_some(t0)
}

fn aabb(lo: [f64; 3], hi: [f64; 3], o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
        } else {
            let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 <= t1 && t1 > HIT_EPS).then_some((t0, t1))
}

/// Solid vertical cylinder `x² + y² ≤ r²`, `z0 ≤ z ≤ z1`.
fn cylinder(r: f64, z0: f64, z1: f64, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let a = d.x * d.x + d.y * d.y;
    let c = o.x * o.x + o.y * o.y - r * r;
    let (mut t0, mut t1) = if a < 1e-300 {
        if c > 0.0 {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        ((-b - s) / (2.0 * a), (-b + s) / (2.0 * a))
    };
    if d.z.abs() < 1e-300 {
        if o.z < z0 || o.z > z1 {
            return None;
        }
    } else {
        let (a, b) = ((z0 - o.z) / d.z, (z1 - o.z) / d.z);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t1 > HIT_EPS).then_some((t0, t1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub shape: Shape,
    /// World position of the shape's base centre.
    pub position: [f64; 3],
    /// Rotation about `+z`, radians.
    #[serde(default)]
    pub yaw: f64,
    /// Transparent objects keep their mask but report no depth.
    #[serde(default)]
    pub transparent: bool,
}

/// Rigid displacement applied at `time` and kept afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    pub object: String,
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Obstacle {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl Obstacle {
    /// Exact signed distance, positive outside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Obstacle::Sphere { center, radius } => (p - Vec3::from(center)).norm() - radius,
            Obstacle::Box {
                center,
                half_extents,
            } => {
                let q = (p - Vec3::from(center)).abs() - Vec3::from(half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerSpec {
    pub rate_hz: f64,
    /// Standard deviation of Gaussian pixel noise.
    pub noise_px: f64,
    pub seed: u64,
}

impl Default for TrackerSpec {
    fn default() -> Self {
        Self {
            rate_hz: 20.0,
            noise_px: 0.0,
            seed: 0,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_arm() -> String {
    "ur5e".into()
}

fn default_width() -> usize {
    640
}

fn default_height() -> usize {
    480
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    pub camera: CameraSpec,
    #[serde(default = "default_true")]
    pub ground: bool,
    /// Built-in arm name or path to an arm file, resolved by the caller.
    #[serde(default = "default_arm")]
    pub arm: String,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub tracker: TrackerSpec,
}

/// Object placement at some instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub position: Vec3,
    pub yaw: f64,
}

impl ObjectPose {
    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        Rotation3::from_axis_angle(&Vec3::z_axis(), self.yaw) * local + self.position
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        Rotation3::from_axis_angle(&Vec3::z_axis(), -self.yaw) * (world - self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; with camera rays this is the camera-frame depth.
    pub t: f64,
    /// `None` for the ground plane.
    pub object: Option<usize>,
}

/// Masks and depth for one instant, with the object behind each mask.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub observation: Observation,
    /// Object index for each mask in `observation.masks`.
    pub mask_objects: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub camera: CameraModel,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if spec.schema_version != SCENE_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", spec.schema_version));
        }
        if spec.width == 0 || spec.height == 0 {
            return bad("image size must be positive".into());
        }
        let mut ids = HashSet::new();
        for o in &spec.objects {
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate object id {:?}", o.id));
            }
            o.shape.validate().map_err(SceneError::Invalid)?;
        }
        let mut last = 0.0;
        for d in &spec.disturbances {
            if !(d.time >= last) {
                return bad("disturbance times must be non-decreasing and >= 0".into());
            }
            last = d.time;
            if !ids.contains(d.object.as_str()) {
                return bad(format!("disturbance names unknown object {:?}", d.object));
            }
        }
        if !(spec.tracker.rate_hz > 0.0 && spec.tracker.noise_px >= 0.0) {
            return bad("tracker rate must be positive and noise non-negative".into());
        }
        let camera = spec.camera.model()?;
        Ok(Self { spec, camera })
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(|e| SceneError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.spec.objects.iter().position(|o| o.id == id)
    }

    pub fn object_pose(&self, index: usize, time: f64) -> ObjectPose {
        let o = &self.spec.objects[index];
        let mut pose = ObjectPose {
            position: Vec3::from(o.position),
            yaw: o.yaw,
        };
        for d in self.spec.disturbances.iter().filter(|d| d.time <= time && d.object == o.id) {
            pose.position += Vec3::from(d.translation);
            pose.yaw += d.yaw;
        }
        pose
    }

    /// Nearest hit along `origin + t·dir`, `t > 0`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, time: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, o) in self.spec.objects.iter().enumerate() {
            let pose = self.object_pose(i, time);
            let lo = pose.to_local(origin);
            let ld = Rotation3::from_axis_angle(&Vec3::z_axis(), -pose.yaw) * dir;
            if let Some(t) = o.shape.entry(&lo, &ld) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, object: Some(i) });
                }
            }
        }
        if self.spec.ground && dir.z.abs() > 1e-300 {
            let t = -origin.z / dir.z;
            if t > HIT_EPS && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, object: None });
            }
        }
        best
    }

    /// World-frame ray through a pixel, scaled so `t` is camera depth.
    pub fn pixel_ray(&self, pixel: Vec2) -> (Vec3, Vec3) {
        let dir = self.camera.extrinsic.rotation * self.camera.ray_camera(pixel);
        (self.camera.center(), dir)
    }

    pub fn cast_pixel(&self, pixel: Vec2, time: f64) -> Option<Hit> {
        let (o, d) = self.pixel_ray(pixel);
        self.cast(&o, &d, time)
    }

    /// Per-pixel nearest object index (`None` for ground or background).
    fn id_buffer(&self, time: f64) -> (Vec<Option<usize>>, Vec<f32>) {
        let (w, h) = (self.spec.width, self.spec.height);
        let rows: Vec<(Vec<Option<usize>>, Vec<f32>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut ids = Vec::with_capacity(w);
                let mut depth = Vec::with_capacity(w);
                for x in 0..w {
                    match self.cast_pixel(Vec2::new(x as f64, y as f64), time) {
                        Some(hit) => {
                            let transparent =
                                hit.object.is_some_and(|i| self.spec.objects[i].transparent);
                            ids.push(hit.object);
                            depth.push(if transparent { 0.0 } else { hit.t as f32 });
                        }
                        None => {
                            ids.push(None);
                            depth.push(0.0);
                        }
                    }
                }
                (ids, depth)
            })
            .collect();
        let mut ids = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for (i, d) in rows {
            ids.extend(i);
            depth.extend(d);
        }
        (ids, depth)
    }

    /// Silhouette masks (visible objects only, in scene order) and depth.
    pub fn render(&self, time: f64) -> Result<Rendering, SceneError> {
        let (w, h) = (self.spec.width, self.spec.height);
        let (ids, depth) = self.id_buffer(time);
        let mut masks = Vec::new();
        let mut mask_objects = Vec::new();
        for obj in 0..self.spec.objects.len() {
            let bits: Vec<u8> = ids.iter().map(|&i| u8::from(i == Some(obj))).collect();
            if bits.iter().any(|&b| b != 0) {
                masks.push(BinaryMask::new(w, h, bits)?);
                mask_objects.push(obj);
            }
        }
        Ok(Rendering {
            observation: Observation {
                masks: MaskSet::with_size(w, h, masks)
                    .map_err(|e| SceneError::Invalid(e.to_string()))?,
                depth: DepthImage::new(w, h, depth)?,
                camera: self.camera,
            },
            mask_objects,
        })
    }

    /// Visible object at a pixel.
    pub fn object_at(&self, pixel: Vec2, time: f64) -> Option<usize> {
        self.cast_pixel(pixel, time).and_then(|h| h.object)
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.spec
            .obstacles
            .iter()
            .map(|o| o.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn obstacle_field(&self) -> ObstacleField {
        ObstacleField {
            obstacles: self.spec.obstacles.clone(),
        }
    }

    /// Exact depth lookups at scene time `time`.
    pub fn depth_probe(&self, time: f64) -> SceneDepthProbe<'_> {
        SceneDepthProbe { scene: self, time }
    }

    pub fn bind(&self, label: &str, object: usize, world: &Vec3, time: f64) -> TrackerBinding {
        TrackerBinding {
            label: label.to_string(),
            object,
            local: self.object_pose(object, time).to_local(world),
        }
    }

    /// Tracker frames with timestamps in `(after, until]`.
    pub fn tracker_updates(
        &self,
        bindings: &[TrackerBinding],
        after: f64,
        until: f64,
    ) -> Vec<TrackerUpdate> {
        let rate = self.spec.tracker.rate_hz;
        let first = if after < 0.0 { 0 } else { (after * rate).floor() as u64 + 1 };
        let mut out = Vec::new();
        let mut k = first;
        loop {
            let ts = k as f64 / rate;
            if ts > until {
                break;
            }
            for (bi, b) in bindings.iter().enumerate() {
                if let Some(u) = self.tracker_frame(b, bi, k) {
                    out.push(u);
                }
            }
            k += 1;
        }
        out
    }

    fn tracker_frame(&self, b: &TrackerBinding, index: usize, frame: u64) -> Option<TrackerUpdate> {
        let ts = frame as f64 / self.spec.tracker.rate_hz;
        let world = self.object_pose(b.object, ts).to_world(&b.local);
        let mut px = self.camera.project(&world).ok()?;
        let sigma = self.spec.tracker.noise_px;
        if sigma > 0.0 {
            let seed = self.spec.tracker.seed ^ (frame << 20) ^ index as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, sigma).expect("sigma >= 0");
            px.x += n.sample(&mut rng);
            px.y += n.sample(&mut rng);
        }
        Some(TrackerUpdate {
            label: b.label.clone(),
            pixel: [px.x, px.y],
            timestamp: ts,
        })
    }
}

/// Ray-cast depth at any subpixel location.
pub struct SceneDepthProbe<'a> {
    scene: &'a Scene,
    time: f64,
}

impl DepthLookup for SceneDepthProbe<'_> {
    fn depth_at(&self, pixel: Vec2) -> Option<f64> {
        let hit = self.scene.cast_pixel(pixel, self.time)?;
        if hit.object.is_some_and(|i| self.scene.spec.objects[i].transparent) {
            return None;
        }
        Some(hit.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleField {
    pub obstacles: Vec<Obstacle>,
}

impl CollisionField for ObstacleField {
    fn sdf(&self, p: &Vec3) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A constraint label tied to a point fixed on an object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerBinding {
    pub label: String,
    pub object: usize,
    pub local: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerUpdate {
    pub label: String,
    pub pixel: [f64; 2],
    pub timestamp: f64,
}
