//! Synthetic stand-in for the mannequin and the arm-mounted LiDAR.
//!
//! The torso is a height field in its own frame: `x` lateral (the
//! patient's left is `+x`), `y` toward the head, `z` out of the chest with
//! the table at `z = 0`. Cross-sections are superellipses whose height
//! tapers away from the nipple line, with shallow mounds under the nipples
//! and a dimple at the navel so the surface is not translation invariant.
//! A rigid `pose` places the torso in the robot-base frame.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{invert, RigidTransform};
use crate::landmarks::{
    body_frame_from_points, map_valves, AnatomicalMap, BodyFrame, LandingPositions, LandingRecord, LandmarkTemplates,
};
use crate::pointcloud::{rgbd_io, CameraIntrinsics, DepthMap, PointCloud, RgbdFrame};

pub const SKIN_COLOR: [u8; 3] = [225, 190, 165];
pub const NIPPLE_MARKER_COLOR: [u8; 3] = [70, 30, 30];
pub const NAVEL_MARKER_COLOR: [u8; 3] = [60, 60, 150];
pub const BACKGROUND_COLOR: [u8; 3] = [30, 30, 30];

/// Side length of the template patches cut from a rendered frame, px.
pub const TEMPLATE_SIZE: u32 = 21;

/// Spatial step of the ray march, mm.
const MARCH_STEP_MM: f64 = 3.0;
const BISECTION_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TorsoParams {
    pub chest_width: f64,
    /// Peak height of the cross-section above the table.
    pub chest_depth: f64,
    pub head_end_y: f64,
    pub foot_end_y: f64,
    pub superellipse_exponent: f64,
    /// Relative height loss at the torso ends.
    pub taper: f64,
    /// Nipple offset from the midline as a fraction of `chest_width`.
    pub nipple_lateral_fraction: f64,
    pub nipple_y: f64,
    /// Navel distance below the nipple line.
    pub navel_offset: f64,
    pub mound_height: f64,
    pub mound_sigma: f64,
    pub navel_depth: f64,
    pub navel_sigma: f64,
    pub nipple_marker_radius: f64,
    pub navel_marker_inner: f64,
    pub navel_marker_outer: f64,
}

impl Default for TorsoParams {
    fn default() -> Self {
        Self {
            chest_width: 360.0,
            chest_depth: 110.0,
            head_end_y: 220.0,
            foot_end_y: -420.0,
            superellipse_exponent: 2.5,
            taper: 0.5,
            nipple_lateral_fraction: 0.25,
            nipple_y: 0.0,
            navel_offset: 280.0,
            mound_height: 12.0,
            mound_sigma: 40.0,
            navel_depth: 5.0,
            navel_sigma: 10.0,
            nipple_marker_radius: 8.0,
            navel_marker_inner: 3.0,
            navel_marker_outer: 8.0,
        }
    }
}

impl TorsoParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chest_width", self.chest_width),
            ("chest_depth", self.chest_depth),
            ("navel_offset", self.navel_offset),
            ("mound_sigma", self.mound_sigma),
            ("navel_sigma", self.navel_sigma),
            ("nipple_marker_radius", self.nipple_marker_radius),
            ("navel_marker_outer", self.navel_marker_outer),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("torso {name} must be > 0")));
            }
        }
        let non_negative = [
            ("mound_height", self.mound_height),
            ("navel_depth", self.navel_depth),
            ("navel_marker_inner", self.navel_marker_inner),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("torso {name} must be >= 0")));
            }
        }
        if !(self.superellipse_exponent >= 1.0) {
            return Err(Error::invalid("superellipse exponent must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.taper) {
            return Err(Error::invalid("taper must be in [0, 1)"));
        }
        if !(self.nipple_lateral_fraction > 0.0 && self.nipple_lateral_fraction < 0.5) {
            return Err(Error::invalid("nipple lateral fraction must be in (0, 0.5)"));
        }
        if self.navel_marker_inner >= self.navel_marker_outer {
            return Err(Error::invalid("navel marker inner radius must be below the outer"));
        }
        let navel_y = self.nipple_y - self.navel_offset;
        if !(self.foot_end_y < navel_y && self.nipple_y < self.head_end_y) {
            return Err(Error::invalid("landmarks must lie between the torso ends"));
        }
        if self.mound_height >= self.chest_depth {
            return Err(Error::invalid("mound height must be below the chest depth"));
        }
        Ok(())
    }

    pub fn nipple_lateral(&self) -> f64 {
        self.nipple_lateral_fraction * self.chest_width
    }

    pub fn navel_y(&self) -> f64 {
        self.nipple_y - self.navel_offset
    }

    /// Upper bound on the surface height.
    pub fn height_bound(&self) -> f64 {
        self.chest_depth + 2.0 * self.mound_height
    }

    /// Surface height in the torso frame; `None` off the footprint.
    pub fn height(&self, x: f64, y: f64) -> Option<f64> {
        let half = 0.5 * self.chest_width;
        if !(x.abs() < half && y >= self.foot_end_y && y <= self.head_end_y) {
            return None;
        }
        let u = x.abs() / half;
        let n = self.superellipse_exponent;
        let section = (1.0 - u.powf(n)).max(0.0).powf(1.0 / n);
        let dy = (y - self.nipple_y) / (self.head_end_y - self.foot_end_y);
        let profile = self.chest_depth * (1.0 - self.taper * dy * dy);
        let bump = |cx: f64, cy: f64, sigma: f64| {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            (-0.5 * r2 / (sigma * sigma)).exp()
        };
        let nl = self.nipple_lateral();
        let mounds = bump(nl, self.nipple_y, self.mound_sigma) + bump(-nl, self.nipple_y, self.mound_sigma);
        let dimple = bump(0.0, self.navel_y(), self.navel_sigma);
        Some(profile * section + self.mound_height * mounds - self.navel_depth * dimple)
    }

    /// Colour painted at a torso-frame surface location.
    pub fn albedo(&self, x: f64, y: f64) -> [u8; 3] {
        let nl = self.nipple_lateral();
        let r_nipple = ((x.abs() - nl).powi(2) + (y - self.nipple_y).powi(2)).sqrt();
        if r_nipple <= self.nipple_marker_radius {
            return NIPPLE_MARKER_COLOR;
        }
        let r_navel = (x * x + (y - self.navel_y()).powi(2)).sqrt();
        if r_navel >= self.navel_marker_inner && r_navel <= self.navel_marker_outer {
            return NAVEL_MARKER_COLOR;
        }
        SKIN_COLOR
    }
}

/// Anything the virtual camera can see: a height field over the local
/// `xy` plane plus a rigid pose into the base frame.
pub trait HeightSurface: Sync {
    fn pose(&self) -> &RigidTransform<f64>;
    fn height(&self, x: f64, y: f64) -> Option<f64>;
    /// Upper bound on `height`.
    fn height_bound(&self) -> f64;
    fn albedo(&self, x: f64, y: f64) -> [u8; 3];
}

/// Infinite horizontal plane `z = height` in the base frame.
#[derive(Debug, Clone)]
pub struct FlatPlane {
    pub height: f64,
    pub color: [u8; 3],
    pose: RigidTransform<f64>,
}

impl FlatPlane {
    pub fn new(height: f64) -> Self {
        Self {
            height,
            color: SKIN_COLOR,
            pose: RigidTransform::identity(),
        }
    }
}

impl HeightSurface for FlatPlane {
    fn pose(&self) -> &RigidTransform<f64> {
        &self.pose
    }

    fn height(&self, _x: f64, _y: f64) -> Option<f64> {
        Some(self.height)
    }

    fn height_bound(&self) -> f64 {
        self.height
    }

    fn albedo(&self, _x: f64, _y: f64) -> [u8; 3] {
        self.color
    }
}

/// Ground-truth landmark positions, base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorsoLandmarks {
    pub nipple_left: Vector3<f64>,
    pub nipple_right: Vector3<f64>,
    pub navel: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct TorsoModel {
    pub params: TorsoParams,
    pub map: AnatomicalMap,
    pub pose: RigidTransform<f64>,
    pub landmarks: TorsoLandmarks,
    pub body: BodyFrame<f64>,
    /// Valve points in the body plane.
    pub valves_planar: LandingPositions<f64>,
    /// The planar points carried along the body normal onto the surface.
    pub valves: LandingPositions<f64>,
    top_z: f64,
}

/// Torso with default anatomy at the identity pose.
pub fn synth_torso(params: &TorsoParams) -> Result<TorsoModel> {
    TorsoModel::new(params.clone(), AnatomicalMap::default(), RigidTransform::identity())
}

impl TorsoModel {
    pub fn new(params: TorsoParams, map: AnatomicalMap, pose: RigidTransform<f64>) -> Result<Self> {
        params.validate()?;
        map.validate()?;
        let on_surface = |x: f64, y: f64| -> Result<Vector3<f64>> {
            let z = params
                .height(x, y)
                .ok_or_else(|| Error::invalid("landmark outside the torso footprint"))?;
            Ok(pose.transform_point(&Vector3::new(x, y, z)))
        };
        let nl = params.nipple_lateral();
        let landmarks = TorsoLandmarks {
            nipple_left: on_surface(nl, params.nipple_y)?,
            nipple_right: on_surface(-nl, params.nipple_y)?,
            navel: on_surface(0.0, params.navel_y())?,
        };
        let above = pose.transform_point(&Vector3::new(0.0, params.nipple_y, 10.0 * params.height_bound()));
        let body = body_frame_from_points(
            &landmarks.nipple_left,
            &landmarks.nipple_right,
            &landmarks.navel,
            &above,
        )?;
        let valves_planar = map_valves(&body, &map);

        // coarse scan; fine enough for camera placement
        let half = 0.5 * params.chest_width;
        let mut top_z = 0.0f64;
        let steps = 200;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = -half + params.chest_width * i as f64 / steps as f64;
                let y = params.foot_end_y + (params.head_end_y - params.foot_end_y) * j as f64 / steps as f64;
                if let Some(h) = params.height(x, y) {
                    top_z = top_z.max(h);
                }
            }
        }

        let mut model = Self {
            params,
            map,
            pose,
            landmarks,
            body,
            valves_planar,
            valves: valves_planar,
            top_z,
        };
        let reach = 2.0 * model.params.height_bound();
        model.valves = LandingPositions::try_from_fn(|v| {
            let start = valves_planar.get(v) + body.z_axis * reach;
            cast_ray_base(&model, &start, &(-body.z_axis))
                .map(|t| start - body.z_axis * t)
                .ok_or_else(|| Error::Degenerate(format!("{} valve misses the torso surface", v.name())))
        })?;
        Ok(model)
    }

    /// Same anatomy, different placement.
    pub fn with_pose(&self, pose: RigidTransform<f64>) -> Result<Self> {
        Self::new(self.params.clone(), self.map.clone(), pose)
    }

    /// Highest point of the surface above the table (torso frame).
    pub fn top_z(&self) -> f64 {
        self.top_z
    }

    /// First-order distance from a base-frame point to the surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = invert(&self.pose).transform_point(p);
        let prm = &self.params;
        match prm.height(q.x, q.y) {
            Some(h) => {
                let e = 0.5;
                let grad = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * e),
                    _ => 0.0,
                };
                let gx = grad(prm.height(q.x + e, q.y), prm.height(q.x - e, q.y));
                let gy = grad(prm.height(q.x, q.y + e), prm.height(q.x, q.y - e));
                (q.z - h).abs() / (1.0 + gx * gx + gy * gy).sqrt()
            }
            None => {
                let half = 0.5 * prm.chest_width - 1e-6;
                let x = q.x.clamp(-half, half);
                let y = q.y.clamp(prm.foot_end_y, prm.head_end_y);
                let h = prm.height(x, y).unwrap_or(0.0);
                (q - Vector3::new(x, y, h)).norm()
            }
        }
    }

    /// Surface samples on a regular torso-frame grid, base frame.
    pub fn surface_samples(&self, spacing: f64) -> Result<PointCloud<f64>> {
        if !(spacing > 0.0) {
            return Err(Error::invalid("sample spacing must be > 0"));
        }
        let prm = &self.params;
        let half = 0.5 * prm.chest_width;
        let mut pts = Vec::new();
        let mut y = prm.foot_end_y;
        while y <= prm.head_end_y {
            let mut x = -half + 0.5 * spacing;
            while x < half {
                if let Some(h) = prm.height(x, y) {
                    pts.push(self.pose.transform_point(&Vector3::new(x, y, h)));
                }
                x += spacing;
            }
            y += spacing;
        }
        PointCloud::new(pts, "base")
    }

    pub fn landmark_record(&self) -> LandmarkRecord {
        let a = |v: Vector3<f64>| [v.x, v.y, v.z];
        LandmarkRecord {
            nipple_left: a(self.landmarks.nipple_left),
            nipple_right: a(self.landmarks.nipple_right),
            navel: a(self.landmarks.navel),
        }
    }
}

impl HeightSurface for TorsoModel {
    fn pose(&self) -> &RigidTransform<f64> {
        &self.pose
    }

    fn height(&self, x: f64, y: f64) -> Option<f64> {
        self.params.height(x, y)
    }

    fn height_bound(&self) -> f64 {
        self.params.height_bound()
    }

    fn albedo(&self, x: f64, y: f64) -> [u8; 3] {
        self.params.albedo(x, y)
    }
}

/// First hit of `o + t·d` (local frame) with the height field, as `t`.
/// Marches down from the height bound to the table plane, then bisects.
fn cast_ray_local<S: HeightSurface + ?Sized>(surface: &S, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    if d.z >= -1e-12 {
        return None;
    }
    let top = surface.height_bound() + 1.0;
    let t0 = ((o.z - top) / -d.z).max(0.0);
    let t1 = o.z / -d.z;
    if !(t1 > t0) {
        return None;
    }
    let gap = |t: f64| {
        let p = o + d * t;
        match surface.height(p.x, p.y) {
            Some(h) => p.z - h,
            None => 1.0,
        }
    };
    let dt = MARCH_STEP_MM / d.norm();
    let (mut lo, mut t) = (t0, t0);
    if gap(t0) <= 0.0 {
        return Some(t0);
    }
    loop {
        t = (t + dt).min(t1);
        if gap(t) <= 0.0 {
            let mut hi = t;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if gap(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        if t >= t1 {
            return None;
        }
        lo = t;
    }
}

fn cast_ray_base<S: HeightSurface + ?Sized>(surface: &S, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let inv = invert(surface.pose());
    cast_ray_local(surface, &inv.transform_point(o), &inv.transform_vector(d))
}

/// Axial depth noise `σ(d) = sigma_base + sigma_per_mm·d`, quantization
/// and random dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarNoiseModel {
    pub sigma_base: f64,
    pub sigma_per_mm: f64,
    /// mm; 0 disables.
    pub quantization: f64,
    pub dropout: f64,
}

impl Default for LidarNoiseModel {
    fn default() -> Self {
        Self {
            sigma_base: 1.0,
            sigma_per_mm: 0.008,
            quantization: 0.25,
            dropout: 0.002,
        }
    }
}

impl LidarNoiseModel {
    pub fn noise_free() -> Self {
        Self {
            sigma_base: 0.0,
            sigma_per_mm: 0.0,
            quantization: 0.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_base >= 0.0 && self.sigma_per_mm >= 0.0 && self.quantization >= 0.0) {
            return Err(Error::invalid("noise parameters must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn sigma(&self, depth: f64) -> f64 {
        self.sigma_base + self.sigma_per_mm * depth
    }

    fn quantize(&self, depth: f64) -> f64 {
        if self.quantization > 0.0 {
            (depth / self.quantization).round() * self.quantization
        } else {
            depth
        }
    }
}

/// Intrinsics of the virtual depth camera.
pub fn default_intrinsics() -> CameraIntrinsics<f64> {
    CameraIntrinsics {
        fx: 190.0,
        fy: 190.0,
        cx: 159.5,
        cy: 149.5,
        width: 320,
        height: 300,
    }
}

/// Ray-casts every pixel; noise is drawn in row-major order from `seed`.
pub fn render_rgbd<S: HeightSurface + ?Sized>(
    surface: &S,
    camera_pose: &RigidTransform<f64>,
    intrinsics: &CameraIntrinsics<f64>,
    noise: &LidarNoiseModel,
    seed: u64,
) -> Result<RgbdFrame<f64>> {
    intrinsics.validate()?;
    noise.validate()?;
    let local_from_camera = invert(surface.pose()) * *camera_pose;
    let origin = local_from_camera.translation;
    let (w, h) = (intrinsics.width, intrinsics.height);
    // camera-frame ray with unit z, so the hit parameter is the depth
    let hits: Vec<Option<(f64, [u8; 3])>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..w).map(move |u| {
                let ray = Vector3::new(
                    (u as f64 - intrinsics.cx) / intrinsics.fx,
                    (v as f64 - intrinsics.cy) / intrinsics.fy,
                    1.0,
                );
                let d = local_from_camera.transform_vector(&ray);
                cast_ray_local(surface, &origin, &d).map(|t| {
                    let p = origin + d * t;
                    (t, surface.albedo(p.x, p.y))
                })
            })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut color = RgbImage::from_pixel(w, h, Rgb(BACKGROUND_COLOR));
    for (idx, hit) in hits.into_iter().enumerate() {
        let Some((t, rgb)) = hit else { continue };
        let (u, v) = ((idx as u32) % w, (idx as u32) / w);
        color.put_pixel(u, v, Rgb(rgb));
        let drop: f64 = rng.random();
        let n: f64 = StandardNormal.sample(&mut rng);
        let d = noise.quantize(t + noise.sigma(t) * n);
        if drop >= noise.dropout && d > 0.0 {
            depth.set(u, v, d);
        }
    }
    RgbdFrame::new(color, depth, *intrinsics, *camera_pose)
}

/// Independent 64-bit seed for stream `stream` of a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Camera sweep over the chest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureProtocol {
    /// Lateral camera positions from the central axis, mm.
    pub x_offsets: Vec<f64>,
    /// Camera height above the top of the chest, mm.
    pub height: f64,
    /// Camera position along the body axis, mm.
    pub y_center: f64,
    pub intrinsics: CameraIntrinsics<f64>,
    pub noise: LidarNoiseModel,
    /// Bounds of the uniform error between the commanded and the actual
    /// camera pose. The recorded capture pose is always the commanded one.
    pub pose_error_translation_mm: f64,
    pub pose_error_rotation_deg: f64,
}

impl Default for CaptureProtocol {
    fn default() -> Self {
        Self {
            x_offsets: vec![-200.0, -100.0, 0.0, 100.0, 200.0],
            height: 300.0,
            y_center: -120.0,
            intrinsics: default_intrinsics(),
            noise: LidarNoiseModel::default(),
            pose_error_translation_mm: 0.0,
            pose_error_rotation_deg: 0.0,
        }
    }
}

impl CaptureProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.x_offsets.is_empty() {
            return Err(Error::invalid("capture protocol needs at least one position"));
        }
        if !(self.height > 0.0) {
            return Err(Error::invalid("camera height must be > 0"));
        }
        if !(self.pose_error_translation_mm >= 0.0 && self.pose_error_rotation_deg >= 0.0) {
            return Err(Error::invalid("pose error bounds must be >= 0"));
        }
        self.intrinsics.validate()?;
        self.noise.validate()
    }

    /// Looking straight down (sensor `z` = base `−z`) from `height` above
    /// the chest top.
    pub fn commanded_poses(&self, chest_top_z: f64) -> Vec<RigidTransform<f64>> {
        self.x_offsets
            .iter()
            .map(|&x| {
                RigidTransform::rot_x(std::f64::consts::PI).with_translation(Vector3::new(
                    x,
                    self.y_center,
                    chest_top_z + self.height,
                ))
            })
            .collect()
    }
}

fn uniform_pose_error(rng: &mut ChaCha8Rng, max_t: f64, max_deg: f64) -> RigidTransform<f64> {
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let t = Vector3::new(sym(max_t), sym(max_t), sym(max_t));
    let axis = Vector3::new(sym(1.0), sym(1.0), sym(1.0));
    let angle = sym(max_deg).to_radians();
    let r = if axis.norm() > 1e-9 {
        RigidTransform::from_axis_angle(&axis, angle)
    } else {
        RigidTransform::identity()
    };
    r.with_translation(t)
}

/// One frame per protocol position. Frame `k` uses noise stream `k + 1`
/// of `seed`; stream 0 drives the optional pose error.
pub fn capture_sequence(torso: &TorsoModel, protocol: &CaptureProtocol, seed: u64) -> Result<Vec<RgbdFrame<f64>>> {
    protocol.validate()?;
    let mut pose_rng = ChaCha8Rng::seed_from_u64(seed);
    protocol
        .commanded_poses(torso.top_z())
        .into_iter()
        .enumerate()
        .map(|(k, commanded)| {
            let err = uniform_pose_error(
                &mut pose_rng,
                protocol.pose_error_translation_mm,
                protocol.pose_error_rotation_deg,
            );
            let actual = commanded * err;
            let mut frame = render_rgbd(
                torso,
                &actual,
                &protocol.intrinsics,
                &protocol.noise,
                derive_seed(seed, k as u64 + 1),
            )?;
            frame.capture_pose = commanded;
            Ok(frame)
        })
        .collect()
}

/// Random in-plane torso placement: translation in `x`/`y` within
/// `±max_translation`, rotation about the table normal within `±max_deg`.
pub fn planar_perturbation(seed: u64, max_translation: f64, max_deg: f64) -> RigidTransform<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let (dx, dy) = (sym(max_translation), sym(max_translation));
    let angle = sym(max_deg).to_radians();
    RigidTransform::rot_z(angle).with_translation(Vector3::new(dx, dy, 0.0))
}

/// Patches centred on the left nipple and the navel, cut from a noise-free
/// render of `torso` at the protocol's frontal position.
pub fn marker_templates(torso: &TorsoModel, protocol: &CaptureProtocol) -> Result<LandmarkTemplates> {
    protocol.validate()?;
    let poses = protocol.commanded_poses(torso.top_z());
    let frontal = poses
        .iter()
        .min_by(|a, b| a.translation.x.abs().total_cmp(&b.translation.x.abs()))
        .copied()
        .expect("validated non-empty");
    let frame = render_rgbd(torso, &frontal, &protocol.intrinsics, &LidarNoiseModel::noise_free(), 0)?;
    let to_cam = invert(&frontal);
    let crop = |name: &str, p: &Vector3<f64>| -> Result<RgbImage> {
        let (u, v) = protocol
            .intrinsics
            .project(&to_cam.transform_point(p))
            .ok_or_else(|| Error::invalid(format!("{name} behind the camera")))?;
        let half = (TEMPLATE_SIZE / 2) as f64;
        let (u0, v0) = (u.round() - half, v.round() - half);
        let fits = u0 >= 0.0
            && v0 >= 0.0
            && u0 + TEMPLATE_SIZE as f64 <= protocol.intrinsics.width as f64
            && v0 + TEMPLATE_SIZE as f64 <= protocol.intrinsics.height as f64;
        if !fits {
            return Err(Error::invalid(format!(
                "{name} is not fully visible from the frontal pose"
            )));
        }
        Ok(image::imageops::crop_imm(&frame.color, u0 as u32, v0 as u32, TEMPLATE_SIZE, TEMPLATE_SIZE).to_image())
    };
    Ok(LandmarkTemplates {
        nipple: crop("nipple", &torso.landmarks.nipple_left)?,
        navel: crop("navel", &torso.landmarks.navel)?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub torso: TorsoParams,
    pub map: AnatomicalMap,
    /// Torso placement in the base frame; identity when absent.
    pub torso_pose: Option<RigidTransform<f64>>,
    pub protocol: CaptureProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub nipple_left: [f64; 3],
    pub nipple_right: [f64; 3],
    pub navel: [f64; 3],
}

/// `manifest.json` of a generated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub config: SceneConfig,
    /// Frame sidecars, relative to the manifest.
    pub frames: Vec<String>,
    /// Template directory, relative to the manifest.
    pub templates: String,
    pub landmarks: LandmarkRecord,
    pub valves: LandingRecord,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub torso: TorsoModel,
    pub frames: Vec<RgbdFrame<f64>>,
    pub templates: LandmarkTemplates,
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    let pose = config.torso_pose.unwrap_or_else(RigidTransform::identity);
    let torso = TorsoModel::new(config.torso.clone(), config.map.clone(), pose)?;
    let frames = capture_sequence(&torso, &config.protocol, seed)?;
    // templates always come from the unperturbed torso
    let reference = torso.with_pose(RigidTransform::identity())?;
    let templates = marker_templates(&reference, &config.protocol)?;
    Ok(Scene {
        seed,
        config: config.clone(),
        torso,
        frames,
        templates,
    })
}

impl Scene {
    /// Writes frames, templates and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut names = Vec::with_capacity(self.frames.len());
        for (k, frame) in self.frames.iter().enumerate() {
            let stem = format!("frame_{k:02}");
            rgbd_io::write_frame(frame, dir, &stem)?;
            names.push(format!("{stem}.json"));
        }
        self.templates.save(dir.join("templates"))?;
        let manifest = SceneManifest {
            seed: self.seed,
            config: self.config.clone(),
            frames: names,
            templates: "templates".into(),
            landmarks: self.torso.landmark_record(),
            valves: self.torso.valves.record(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Frames and templates named by a scene manifest.
pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub frames: Vec<RgbdFrame<f64>>,
    pub templates: LandmarkTemplates,
}

pub fn load_scene(manifest_path: impl AsRef<Path>) -> Result<LoadedScene> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SceneManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let frames = manifest
        .frames
        .iter()
        .map(|f| rgbd_io::read_frame(base.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let templates = LandmarkTemplates::load(base.join(&manifest.templates))?;
    Ok(LoadedScene {
        manifest,
        frames,
        templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::{detect_landmarks, SearchConfig, Valve};
    use crate::pointcloud::{deproject, transform_cloud, KdTree};

    fn torso() -> TorsoModel {
        synth_torso(&TorsoParams::default()).unwrap()
    }

    #[test]
    fn default_landmarks_are_symmetric() {
        let t = torso();
        let l = t.landmarks;
        assert!((l.nipple_left.x + l.nipple_right.x).abs() < 1e-9);
        assert!((l.nipple_left.y - l.nipple_right.y).abs() < 1e-9);
        assert!((l.nipple_left.z - l.nipple_right.z).abs() < 1e-9);
        assert!(l.navel.x.abs() < 1e-9);
        assert_eq!(l.nipple_left.x, 90.0);
        assert_eq!(l.navel.y, -280.0);
    }

    #[test]
    fn landmarks_lie_on_the_surface() {
        let t = torso();
        for p in [t.landmarks.nipple_left, t.landmarks.nipple_right, t.landmarks.navel] {
            assert!(t.surface_distance(&p) < 1e-9);
        }
    }

    #[test]
    fn width_scales_nipple_separation() {
        let a = torso();
        let wide = synth_torso(&TorsoParams {
            chest_width: 720.0,
            ..TorsoParams::default()
        })
        .unwrap();
        let sep = |t: &TorsoModel| (t.landmarks.nipple_left - t.landmarks.nipple_right).x.abs();
        assert!((sep(&wide) - 2.0 * sep(&a)).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_physical_params() {
        for p in [
            TorsoParams {
                chest_width: -1.0,
                ..TorsoParams::default()
            },
            TorsoParams {
                navel_offset: 900.0,
                ..TorsoParams::default()
            },
            TorsoParams {
                nipple_lateral_fraction: 0.6,
                ..TorsoParams::default()
            },
            TorsoParams {
                superellipse_exponent: 0.5,
                ..TorsoParams::default()
            },
        ] {
            assert_eq!(synth_torso(&p).unwrap_err().kind(), "invalid_input");
        }
    }

    #[test]
    fn ground_truth_valves_follow_the_map() {
        let t = torso();
        let b = &t.body;
        for v in Valve::ALL {
            let [ox, oy] = t.map.planar_offset(v);
            for p in [t.valves_planar.get(v), t.valves.get(v)] {
                let d = p - b.origin;
                assert!((d.dot(&b.x_axis) - ox).abs() < 1e-9, "{v:?}");
                assert!((d.dot(&b.y_axis) - oy).abs() < 1e-9, "{v:?}");
            }
            assert!(t.surface_distance(&t.valves.get(v)) < 1e-3);
        }
        // patient's right is -x in the torso frame
        assert!(b.x_axis.x < -0.99);
        assert!(t.valves.aortic.x < 0.0 && t.valves.mitral.x > 0.0);
    }

    #[test]
    fn valves_move_with_the_torso() {
        let pose = RigidTransform::rot_z(0.05).with_translation(Vector3::new(12.0, -7.0, 0.0));
        let moved = torso().with_pose(pose).unwrap();
        let base = torso();
        for v in Valve::ALL {
            let expect = pose.transform_point(&base.valves.get(v));
            assert!((moved.valves.get(v) - expect).norm() < 1e-3);
        }
    }

    #[test]
    fn flat_plane_zero_noise_depth() {
        let plane = FlatPlane::new(100.0);
        let pose = RigidTransform::rot_x(std::f64::consts::PI).with_translation(Vector3::new(0.0, 0.0, 400.0));
        let noise = LidarNoiseModel {
            quantization: 0.25,
            ..LidarNoiseModel::noise_free()
        };
        let f = render_rgbd(&plane, &pose, &default_intrinsics(), &noise, 1).unwrap();
        for &d in f.depth.data() {
            assert!((d - 300.0).abs() <= 0.125 + 1e-9, "{d}");
        }
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let t = torso();
        let p = CaptureProtocol::default();
        let pose = p.commanded_poses(t.top_z())[2];
        let a = render_rgbd(&t, &pose, &p.intrinsics, &p.noise, 5).unwrap();
        let b = render_rgbd(&t, &pose, &p.intrinsics, &p.noise, 5).unwrap();
        let c = render_rgbd(&t, &pose, &p.intrinsics, &p.noise, 6).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.color, b.color);
        assert_ne!(a.depth, c.depth);
        // only the noise differs
        assert_eq!(a.color, c.color);
        let valid = |f: &RgbdFrame<f64>| f.depth.data().iter().filter(|d| **d > 0.0).count();
        assert!((valid(&a) as f64 - valid(&c) as f64).abs() < 0.01 * valid(&a) as f64);
    }

    #[test]
    fn noise_grows_with_distance() {
        let n = LidarNoiseModel::default();
        assert!(n.sigma(250.0) < n.sigma(350.0));
        assert!((n.sigma(250.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn default_protocol_offsets() {
        let t = torso();
        let p = CaptureProtocol::default();
        let frames = capture_sequence(&t, &p, 3).unwrap();
        assert_eq!(frames.len(), 5);
        let commanded = p.commanded_poses(t.top_z());
        for (f, (c, x)) in frames
            .iter()
            .zip(commanded.iter().zip([-200.0, -100.0, 0.0, 100.0, 200.0]))
        {
            assert_eq!(f.capture_pose, *c);
            assert_eq!(f.capture_pose.translation.x, x);
            assert!((f.capture_pose.translation.z - t.top_z() - 300.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_error_changes_the_view_not_the_record() {
        let t = torso();
        let p = CaptureProtocol {
            pose_error_translation_mm: 10.0,
            pose_error_rotation_deg: 2.0,
            noise: LidarNoiseModel::noise_free(),
            ..CaptureProtocol::default()
        };
        let exact = CaptureProtocol {
            noise: LidarNoiseModel::noise_free(),
            ..CaptureProtocol::default()
        };
        let a = capture_sequence(&t, &p, 1).unwrap();
        let b = capture_sequence(&t, &exact, 1).unwrap();
        assert_eq!(a[0].capture_pose, b[0].capture_pose);
        assert_ne!(a[0].depth, b[0].depth);
    }

    #[test]
    fn noise_free_frames_land_on_the_surface() {
        let t = torso();
        let p = CaptureProtocol {
            noise: LidarNoiseModel::noise_free(),
            ..CaptureProtocol::default()
        };
        let frames = capture_sequence(&t, &p, 0).unwrap();
        let cloud = transform_cloud(&deproject(&frames[1]), &frames[1].capture_pose, "base");
        assert!(cloud.len() > 10_000);
        let worst = cloud.points().iter().map(|q| t.surface_distance(q)).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    fn surface_normal(t: &TorsoModel, q: &Vector3<f64>) -> Vector3<f64> {
        let l = invert(&t.pose).transform_point(q);
        let e = 0.25;
        let h = |x: f64, y: f64| t.params.height(x, y).unwrap_or(0.0);
        let gx = (h(l.x + e, l.y) - h(l.x - e, l.y)) / (2.0 * e);
        let gy = (h(l.x, l.y + e) - h(l.x, l.y - e)) / (2.0 * e);
        t.pose.transform_vector(&Vector3::new(-gx, -gy, 1.0).normalize())
    }

    /// Fraction of camera-visible surface samples with a deprojected point
    /// within 1 mm. Visible means unoccluded and seen at no more than 60°
    /// incidence; at grazing angles the pixel footprint alone exceeds 1 mm.
    #[test]
    fn noise_free_sweep_covers_visible_surface() {
        let t = torso();
        let p = CaptureProtocol {
            noise: LidarNoiseModel::noise_free(),
            height: 250.0,
            ..CaptureProtocol::default()
        };
        let frames = capture_sequence(&t, &p, 0).unwrap();
        let clouds: Vec<_> = frames
            .iter()
            .map(|f| transform_cloud(&deproject(f), &f.capture_pose, "base"))
            .collect();
        let union = PointCloud::concat(&clouds, "base");
        let tree = KdTree::build(union.points()).unwrap();

        let samples = t.surface_samples(4.0).unwrap();
        let (mut visible, mut covered) = (0usize, 0usize);
        for q in samples.points() {
            let seen = frames.iter().any(|f| {
                let cam = invert(&f.capture_pose).transform_point(q);
                let in_view = p.intrinsics.project(&cam).is_some_and(|(u, v)| {
                    u >= 0.0
                        && v >= 0.0
                        && u <= (p.intrinsics.width - 1) as f64
                        && v <= (p.intrinsics.height - 1) as f64
                });
                let eye = f.capture_pose.translation;
                let dir = q - eye;
                let facing = surface_normal(&t, q).dot(&(-dir.normalize())) >= 0.5;
                in_view
                    && facing
                    && cast_ray_base(&t, &eye, &dir.normalize()).is_some_and(|s| (s - dir.norm()).abs() < 0.5)
            });
            if seen {
                visible += 1;
                if tree.nearest(q).1 <= 1.0 {
                    covered += 1;
                }
            }
        }
        let frac = covered as f64 / visible as f64;
        assert!(visible > 3000);
        assert!(frac >= 0.95, "coverage {frac:.4} of {visible}");
    }

    #[test]
    fn templates_find_the_landmarks() {
        let t = torso();
        let p = CaptureProtocol::default();
        let templates = marker_templates(&t, &p).unwrap();
        assert_eq!(templates.nipple.width(), TEMPLATE_SIZE);
        let frames = capture_sequence(&t, &p, 9).unwrap();
        let frontal = &frames[2];
        let lm = detect_landmarks(&frontal.color, &templates, &SearchConfig::default()).unwrap();
        let to_cam = invert(&frontal.capture_pose);
        let px = |q: &Vector3<f64>| p.intrinsics.project(&to_cam.transform_point(q)).unwrap();
        for (found, truth) in [
            (lm.nipple_left, t.landmarks.nipple_left),
            (lm.nipple_right, t.landmarks.nipple_right),
            (lm.navel, t.landmarks.navel),
        ] {
            let (u, v) = px(&truth);
            assert!(
                (found.u as f64 - u).abs() <= 1.0 && (found.v as f64 - v).abs() <= 1.0,
                "{found:?} vs {u},{v}"
            );
        }
    }

    #[test]
    fn perturbation_is_bounded_and_planar() {
        for seed in 0..50 {
            let t = planar_perturbation(seed, 20.0, 5.0);
            assert!(t.translation.x.abs() <= 20.0 && t.translation.y.abs() <= 20.0);
            assert_eq!(t.translation.z, 0.0);
            assert!(t.rotation_angle() <= 5f64.to_radians() + 1e-12);
            assert!((t.rotation[(2, 2)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_round_trip() {
        let cfg = SceneConfig {
            protocol: CaptureProtocol {
                x_offsets: vec![-100.0, 0.0, 100.0],
                ..CaptureProtocol::default()
            },
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = scene.write(dir.path()).unwrap();
        let loaded = load_scene(&manifest).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.manifest.config, cfg);
        assert_eq!(loaded.manifest.valves, scene.torso.valves.record());
        assert_eq!(loaded.templates.nipple, scene.templates.nipple);
        assert_eq!(loaded.frames[1].capture_pose, scene.frames[1].capture_pose);
    }
}
