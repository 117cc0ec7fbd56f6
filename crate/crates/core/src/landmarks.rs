//! Landing-position estimation from surface landmarks.
//!
//! Nipples and navel are found by template matching on the colour image of
//! the frontal capture, lifted to 3D with the depth map, and turned into a
//! body frame: origin at the nipple midpoint, `y` toward the head, `z` out
//! of the chest, `x` toward the patient's right. Valve listening posts are
//! fixed planar offsets in that frame, projected onto the reconstructed
//! surface along `z`.

use std::fmt;
use std::path::Path;

use image::RgbImage;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::pointcloud::{PointCloud, RgbdFrame};
use crate::scalar::Real;

/// Integer pixel position (column `u`, row `v`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub u: u32,
    pub v: u32,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Self { u, v }
    }

    fn dist(&self, other: &Pixel) -> f64 {
        let du = self.u as f64 - other.u as f64;
        let dv = self.v as f64 - other.v as f64;
        du.hypot(dv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub nipple_left: Pixel,
    pub nipple_right: Pixel,
    pub navel: Pixel,
    pub nipple_left_score: f64,
    pub nipple_right_score: f64,
    pub navel_score: f64,
}

impl LandmarkSet {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (name, p) in [
            ("nipple_left", self.nipple_left),
            ("nipple_right", self.nipple_right),
            ("navel", self.navel),
        ] {
            if p.u >= width || p.v >= height {
                return Err(Error::invalid(format!("{name} pixel outside the image")));
            }
        }
        if self.nipple_left == self.nipple_right {
            return Err(Error::invalid("nipple pixels coincide"));
        }
        Ok(())
    }
}

/// Template patches; the landmark sits at the patch centre.
#[derive(Debug, Clone)]
pub struct LandmarkTemplates {
    pub nipple: RgbImage,
    pub navel: RgbImage,
}

impl LandmarkTemplates {
    /// Loads `nipple.png` and `navel.png` from a directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            nipple: image::open(dir.join("nipple.png"))?.to_rgb8(),
            navel: image::open(dir.join("navel.png"))?.to_rgb8(),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.nipple.save(dir.join("nipple.png"))?;
        self.navel.save(dir.join("navel.png"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Minimum NCC score accepted for any landmark.
    pub threshold: f64,
    /// Minimum pixel distance between the two nipple peaks.
    pub min_separation_px: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            min_separation_px: 40.0,
        }
    }
}

/// Listening-post offsets in mm from the nipple-centre origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnatomicalMap {
    /// Nipple line (4th intercostal space) up to the 2nd.
    pub dy_up: f64,
    /// Nipple line down to the 5th intercostal space.
    pub dy_down: f64,
    pub sternum_half_width: f64,
    pub midclavicular_offset: f64,
}

impl Default for AnatomicalMap {
    fn default() -> Self {
        Self {
            dy_up: 39.0,
            dy_down: 20.6,
            sternum_half_width: 13.0,
            midclavicular_offset: 100.0,
        }
    }
}

impl AnatomicalMap {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.dy_up,
            self.dy_down,
            self.sternum_half_width,
            self.midclavicular_offset,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("anatomical map offsets must be finite and non-negative"));
        }
        Ok(())
    }

    /// `(x, y)` offsets per valve; `+x` is the patient's right, `+y` the head.
    pub fn planar_offset(&self, valve: Valve) -> [f64; 2] {
        match valve {
            Valve::Aortic => [self.sternum_half_width, self.dy_up],
            Valve::Pulmonary => [-self.sternum_half_width, self.dy_up],
            Valve::Tricuspid => [-self.sternum_half_width, -self.dy_down],
            Valve::Mitral => [-self.midclavicular_offset, -self.dy_down],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Valve {
    Aortic,
    Pulmonary,
    Tricuspid,
    Mitral,
}

impl Valve {
    pub const ALL: [Valve; 4] = [Valve::Aortic, Valve::Pulmonary, Valve::Tricuspid, Valve::Mitral];

    pub fn name(self) -> &'static str {
        match self {
            Valve::Aortic => "aortic",
            Valve::Pulmonary => "pulmonary",
            Valve::Tricuspid => "tricuspid",
            Valve::Mitral => "mitral",
        }
    }
}

impl fmt::Display for Valve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyFrame<T: Real> {
    pub origin: Vector3<T>,
    /// Toward the patient's right.
    pub x_axis: Vector3<T>,
    /// Toward the head.
    pub y_axis: Vector3<T>,
    /// Out of the chest.
    pub z_axis: Vector3<T>,
}

impl<T: Real> BodyFrame<T> {
    /// Identity frame at the origin.
    pub fn identity() -> Self {
        Self {
            origin: Vector3::zeros(),
            x_axis: Vector3::x(),
            y_axis: Vector3::y(),
            z_axis: Vector3::z(),
        }
    }

    /// Maps a planar offset to 3D.
    pub fn point(&self, x: T, y: T) -> Vector3<T> {
        self.origin + self.x_axis * x + self.y_axis * y
    }

    /// Largest deviation of the axes from orthonormality.
    pub fn orthonormality_error(&self) -> T {
        let a = [self.x_axis, self.y_axis, self.z_axis];
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                let e = (a[i].dot(&a[j]) - target).abs();
                if e > worst {
                    worst = e;
                }
            }
        }
        worst
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        Self {
            origin: t.transform_point(&self.origin),
            x_axis: t.transform_vector(&self.x_axis),
            y_axis: t.transform_vector(&self.y_axis),
            z_axis: t.transform_vector(&self.z_axis),
        }
    }
}

/// One 3D point per valve, robot-base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandingPositions<T: Real> {
    pub aortic: Vector3<T>,
    pub pulmonary: Vector3<T>,
    pub tricuspid: Vector3<T>,
    pub mitral: Vector3<T>,
}

impl<T: Real> LandingPositions<T> {
    pub fn from_fn(mut f: impl FnMut(Valve) -> Vector3<T>) -> Self {
        Self {
            aortic: f(Valve::Aortic),
            pulmonary: f(Valve::Pulmonary),
            tricuspid: f(Valve::Tricuspid),
            mitral: f(Valve::Mitral),
        }
    }

    pub fn try_from_fn(mut f: impl FnMut(Valve) -> Result<Vector3<T>>) -> Result<Self> {
        Ok(Self {
            aortic: f(Valve::Aortic)?,
            pulmonary: f(Valve::Pulmonary)?,
            tricuspid: f(Valve::Tricuspid)?,
            mitral: f(Valve::Mitral)?,
        })
    }

    pub fn get(&self, valve: Valve) -> Vector3<T> {
        match valve {
            Valve::Aortic => self.aortic,
            Valve::Pulmonary => self.pulmonary,
            Valve::Tricuspid => self.tricuspid,
            Valve::Mitral => self.mitral,
        }
    }

    pub fn record(&self) -> LandingRecord {
        let a = |v: Vector3<T>| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()];
        LandingRecord {
            aortic: a(self.aortic),
            pulmonary: a(self.pulmonary),
            tricuspid: a(self.tricuspid),
            mitral: a(self.mitral),
            frame: "base".to_string(),
        }
    }
}

/// JSON form of [`LandingPositions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandingRecord {
    pub aortic: [f64; 3],
    pub pulmonary: [f64; 3],
    pub tricuspid: [f64; 3],
    pub mitral: [f64; 3],
    pub frame: String,
}

impl LandingRecord {
    pub fn positions<T: Real>(&self) -> Result<LandingPositions<T>> {
        if self.frame != "base" {
            return Err(Error::invalid(format!(
                "landing positions in frame '{}', expected 'base'",
                self.frame
            )));
        }
        let v = |a: [f64; 3]| -> Result<Vector3<T>> {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite landing position"));
            }
            Ok(Vector3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2])))
        };
        Ok(LandingPositions {
            aortic: v(self.aortic)?,
            pulmonary: v(self.pulmonary)?,
            tricuspid: v(self.tricuspid)?,
            mitral: v(self.mitral)?,
        })
    }
}

// ---------------------------------------------------------------------------
// template matching

/// Grayscale image as `f64` luma, row-major.
#[derive(Debug, Clone)]
pub struct LumaImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LumaImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Zero-mean normalized cross-correlation scores for every placement of the
/// template, indexed by the template-centre pixel.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    /// Centre column of the first placement.
    pub u0: usize,
    pub v0: usize,
    pub cols: usize,
    pub rows: usize,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, p: Pixel) -> Option<f64> {
        let (u, v) = (p.u as usize, p.v as usize);
        if u < self.u0 || v < self.v0 || u >= self.u0 + self.cols || v >= self.v0 + self.rows {
            return None;
        }
        Some(self.scores[(v - self.v0) * self.cols + (u - self.u0)])
    }

    /// Best score among placements accepted by `keep`; ties go to the
    /// lowest `(row, col)`.
    pub fn best(&self, mut keep: impl FnMut(Pixel) -> bool) -> Option<(Pixel, f64)> {
        let mut best: Option<(Pixel, f64)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = Pixel::new((self.u0 + c) as u32, (self.v0 + r) as u32);
                let s = self.scores[r * self.cols + c];
                if best.is_none_or(|(_, b)| s > b) && keep(p) {
                    best = Some((p, s));
                }
            }
        }
        best
    }
}

/// Summed-area table with a zero first row and column.
fn integral(img: &LumaImage, square: bool) -> Vec<f64> {
    let w = img.width + 1;
    let mut s = vec![0.0; w * (img.height + 1)];
    for y in 0..img.height {
        let mut row = 0.0;
        for x in 0..img.width {
            let v = img.at(x, y);
            row += if square { v * v } else { v };
            s[(y + 1) * w + x + 1] = s[y * w + x + 1] + row;
        }
    }
    s
}

fn window_sum(table: &[f64], stride: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
    table[(y + h) * stride + x + w] - table[y * stride + x + w] - table[(y + h) * stride + x] + table[y * stride + x]
}

/// Computes the NCC score map. Flat image windows score 0.
pub fn ncc_scores(image: &RgbImage, template: &RgbImage) -> Result<ScoreMap> {
    let (tw, th) = (template.width() as usize, template.height() as usize);
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    if tw == 0 || th == 0 || tw > iw || th > ih {
        return Err(Error::invalid(
            "template must be non-empty and no larger than the image",
        ));
    }
    let img = LumaImage::from_rgb(image);
    let tpl = LumaImage::from_rgb(template);
    let n = (tw * th) as f64;
    let t_mean = tpl.data.iter().sum::<f64>() / n;
    let t_zero: Vec<f64> = tpl.data.iter().map(|v| v - t_mean).collect();
    let t_norm = t_zero.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm < 1e-9 {
        return Err(Error::invalid("template has no contrast"));
    }
    let sum = integral(&img, false);
    let sum_sq = integral(&img, true);
    let stride = iw + 1;
    let (cols, rows) = (iw - tw + 1, ih - th + 1);
    let scores: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|y| {
            let (img, t_zero, sum, sum_sq) = (&img, &t_zero, &sum, &sum_sq);
            (0..cols).map(move |x| {
                let s = window_sum(sum, stride, x, y, tw, th);
                let s2 = window_sum(sum_sq, stride, x, y, tw, th);
                let var = s2 - s * s / n;
                if var <= 1e-9 * n {
                    return 0.0;
                }
                let mut cross = 0.0;
                for ty in 0..th {
                    let row = &img.data[(y + ty) * img.width + x..(y + ty) * img.width + x + tw];
                    let trow = &t_zero[ty * tw..(ty + 1) * tw];
                    cross += row.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
                }
                (cross / (t_norm * var.sqrt())).clamp(-1.0, 1.0)
            })
        })
        .collect();
    Ok(ScoreMap {
        u0: tw / 2,
        v0: th / 2,
        cols,
        rows,
        scores,
    })
}

/// Finds both nipples and the navel in a colour image.
///
/// Assumes the head is toward the top of the image (smaller rows); the
/// navel is searched strictly below the lower nipple. Left/right labels
/// follow from the in-image head direction for a camera facing the chest.
pub fn detect_landmarks(image: &RgbImage, templates: &LandmarkTemplates, config: &SearchConfig) -> Result<LandmarkSet> {
    let nipple_map = ncc_scores(image, &templates.nipple)?;
    let navel_map = ncc_scores(image, &templates.navel)?;
    let fail = |landmark, score: f64| Error::DetectionFailure {
        landmark,
        score,
        threshold: config.threshold,
    };

    let (first, s1) = nipple_map.best(|_| true).ok_or_else(|| fail("nipple", f64::NAN))?;
    if s1 < config.threshold {
        return Err(fail("nipple", s1));
    }
    let (second, s2) = nipple_map
        .best(|p| p.dist(&first) >= config.min_separation_px)
        .ok_or_else(|| fail("nipple", f64::NAN))?;
    if s2 < config.threshold {
        return Err(fail("nipple", s2));
    }

    let below = first.v.max(second.v) + (templates.navel.height() / 2).max(1);
    let (navel, sn) = navel_map.best(|p| p.v > below).ok_or_else(|| fail("navel", f64::NAN))?;
    if sn < config.threshold {
        return Err(fail("navel", sn));
    }

    // head direction h = midpoint - navel; with the outward normal pointing
    // at the camera the patient's right is (h_v, -h_u) in image axes
    let mid_u = (first.u as f64 + second.u as f64) / 2.0;
    let mid_v = (first.v as f64 + second.v as f64) / 2.0;
    let (hu, hv) = (mid_u - navel.u as f64, mid_v - navel.v as f64);
    let side = |p: Pixel| (p.u as f64 - mid_u) * hv - (p.v as f64 - mid_v) * hu;
    let ((right, sr), (left, sl)) = if side(first) >= side(second) {
        ((first, s1), (second, s2))
    } else {
        ((second, s2), (first, s1))
    };
    Ok(LandmarkSet {
        nipple_left: left,
        nipple_right: right,
        navel,
        nipple_left_score: sl,
        nipple_right_score: sr,
        navel_score: sn,
    })
}

// ---------------------------------------------------------------------------
// geometry

/// Minimum nipple-midpoint to navel distance, mm.
pub const MIN_MIDLINE_MM: f64 = 10.0;
/// Half-size of the depth median window around a landmark pixel.
pub const DEPTH_WINDOW_RADIUS: u32 = 2;

/// Body frame from the three landmark positions. `viewpoint` is any point
/// on the outside of the chest (e.g. the camera centre) and fixes the sign
/// of the normal.
pub fn body_frame_from_points<T: Real>(
    nipple_left: &Vector3<T>,
    nipple_right: &Vector3<T>,
    navel: &Vector3<T>,
    viewpoint: &Vector3<T>,
) -> Result<BodyFrame<T>> {
    let origin = (nipple_left + nipple_right) * T::lit(0.5);
    let midline = origin - navel;
    if midline.norm().as_f64() < MIN_MIDLINE_MM {
        return Err(Error::Degenerate(format!(
            "nipple midpoint within {MIN_MIDLINE_MM} mm of the navel"
        )));
    }
    let y_axis = midline.normalize();
    let normal = (nipple_right - nipple_left).cross(&(navel - nipple_left));
    if normal.norm().as_f64() < 1e-9 * midline.norm_squared().as_f64().max(1.0) {
        return Err(Error::Degenerate("landmarks are collinear".into()));
    }
    let mut z_axis = normal - y_axis * normal.dot(&y_axis);
    z_axis.normalize_mut();
    if z_axis.dot(&(viewpoint - origin)) < T::zero() {
        z_axis = -z_axis;
    }
    let x_axis = z_axis.cross(&y_axis).normalize();
    Ok(BodyFrame {
        origin,
        x_axis,
        y_axis,
        z_axis,
    })
}

/// Lifts landmark pixels to 3D through the frame's depth and capture pose,
/// then applies `refinement` (the frame's registration pose).
pub fn build_body_frame<T: Real>(
    landmarks: &LandmarkSet,
    frame: &RgbdFrame<T>,
    refinement: &RigidTransform<T>,
) -> Result<BodyFrame<T>> {
    landmarks.validate(frame.depth.width(), frame.depth.height())?;
    let to_base = |name: &str, p: Pixel| -> Result<Vector3<T>> {
        let cam = frame
            .point_at_pixel(p.u, p.v, DEPTH_WINDOW_RADIUS)
            .ok_or_else(|| Error::invalid(format!("no valid depth near the {name}")))?;
        Ok(refinement.transform_point(&frame.capture_pose.transform_point(&cam)))
    };
    let left = to_base("left nipple", landmarks.nipple_left)?;
    let right = to_base("right nipple", landmarks.nipple_right)?;
    let navel = to_base("navel", landmarks.navel)?;
    let eye = refinement.transform_point(&frame.capture_pose.translation);
    body_frame_from_points(&left, &right, &navel, &eye)
}

/// Valve points in the body-frame plane (not yet on the surface).
pub fn map_valves<T: Real>(body: &BodyFrame<T>, map: &AnatomicalMap) -> LandingPositions<T> {
    LandingPositions::from_fn(|v| {
        let [x, y] = map.planar_offset(v);
        body.point(T::lit(x), T::lit(y))
    })
}

/// Default radius of the projection cylinder, mm.
pub const PROJECTION_RADIUS_MM: f64 = 10.0;

/// Picks the cloud point closest to the line through `p` along `axis`,
/// among points within `radius` of that line. Falls back to the nearest
/// neighbour of `p` when the cylinder is empty.
pub fn project_to_surface<T: Real>(
    p: &Vector3<T>,
    axis: &Vector3<T>,
    merged: &PointCloud<T>,
    radius: T,
) -> Result<Vector3<T>> {
    if merged.is_empty() {
        return Err(Error::EmptyCloud("merged surface"));
    }
    let dir = axis.normalize();
    let r2 = radius * radius;
    // (perpendicular², |along|, index): total order with index tie-break
    let mut best: Option<(T, T, usize)> = None;
    let mut nearest = (T::lit(f64::INFINITY), 0usize);
    for (i, q) in merged.points().iter().enumerate() {
        let d = q - p;
        let d2 = d.norm_squared();
        if d2 < nearest.0 {
            nearest = (d2, i);
        }
        let along = d.dot(&dir);
        let perp2 = (d2 - along * along).max(T::zero());
        if perp2 <= r2 {
            let key = (perp2, along.abs(), i);
            let better = match best {
                None => true,
                Some((bp, ba, _)) => perp2 < bp || (perp2 == bp && key.1 < ba),
            };
            if better {
                best = Some(key);
            }
        }
    }
    let idx = best.map_or(nearest.1, |b| b.2);
    Ok(merged.points()[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandingConfig {
    pub map: AnatomicalMap,
    pub search: SearchConfig,
    pub projection_radius: f64,
}

impl Default for LandingConfig {
    fn default() -> Self {
        Self {
            map: AnatomicalMap::default(),
            search: SearchConfig::default(),
            projection_radius: PROJECTION_RADIUS_MM,
        }
    }
}

/// Index of the capture whose camera centre is closest to the centroid of
/// all camera centres (the middle of a symmetric sweep).
pub fn frontal_frame_index<T: Real>(frames: &[RgbdFrame<T>]) -> Option<usize> {
    if frames.is_empty() {
        return None;
    }
    let centres: Vec<Vector3<T>> = frames.iter().map(|f| f.capture_pose.translation).collect();
    let mean = centres.iter().fold(Vector3::zeros(), |a, c| a + c) / T::count(centres.len());
    let mut best = (T::lit(f64::INFINITY), 0);
    for (i, c) in centres.iter().enumerate() {
        let d = (c - mean).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    Some(best.1)
}

/// Full result of the landing pipeline for one frame.
#[derive(Debug, Clone)]
pub struct LandingEstimate<T: Real> {
    pub landmarks: LandmarkSet,
    pub body: BodyFrame<T>,
    /// Valve points in the body plane before projection.
    pub planar: LandingPositions<T>,
    pub positions: LandingPositions<T>,
}

/// Steps (ii)–(iv) given already-detected landmarks.
pub fn landing_from_landmarks<T: Real>(
    landmarks: &LandmarkSet,
    frame: &RgbdFrame<T>,
    refinement: &RigidTransform<T>,
    merged: &PointCloud<T>,
    config: &LandingConfig,
) -> Result<LandingEstimate<T>> {
    config.map.validate()?;
    let body = build_body_frame(landmarks, frame, refinement)?;
    let planar = map_valves(&body, &config.map);
    let radius = T::lit(config.projection_radius);
    let positions =
        LandingPositions::try_from_fn(|v| project_to_surface(&planar.get(v), &body.z_axis, merged, radius))?;
    Ok(LandingEstimate {
        landmarks: *landmarks,
        body,
        planar,
        positions,
    })
}

/// Runs detection on the frontal frame and the rest of the pipeline.
/// `refinements` holds one registration pose per frame, or is empty when
/// the captures were not refined.
pub fn estimate_landing_positions<T: Real>(
    frames: &[RgbdFrame<T>],
    refinements: &[RigidTransform<T>],
    merged: &PointCloud<T>,
    templates: &LandmarkTemplates,
    config: &LandingConfig,
) -> Result<LandingEstimate<T>> {
    let idx = frontal_frame_index(frames).ok_or_else(|| Error::invalid("no frames given"))?;
    if !refinements.is_empty() && refinements.len() != frames.len() {
        return Err(Error::invalid("one refinement pose per frame required"));
    }
    let refinement = refinements.get(idx).copied().unwrap_or_else(RigidTransform::identity);
    let frame = &frames[idx];
    let landmarks = detect_landmarks(&frame.color, templates, &config.search)?;
    landing_from_landmarks(&landmarks, frame, &refinement, merged, config)
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::pointcloud::{CameraIntrinsics, DepthMap};

    const SKIN: [u8; 3] = [225, 190, 165];

    fn disk_template(size: u32, radius: f64, color: [u8; 3]) -> RgbImage {
        let c = (size / 2) as f64;
        RgbImage::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if d <= radius {
                Rgb(color)
            } else {
                Rgb(SKIN)
            }
        })
    }

    fn ring_template(size: u32) -> RgbImage {
        let c = (size / 2) as f64;
        RgbImage::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if (3.0..=6.0).contains(&d) {
                Rgb([90, 40, 40])
            } else {
                Rgb(SKIN)
            }
        })
    }

    fn templates() -> LandmarkTemplates {
        LandmarkTemplates {
            nipple: disk_template(15, 4.0, [70, 30, 30]),
            navel: ring_template(17),
        }
    }

    fn paste(img: &mut RgbImage, tpl: &RgbImage, centre: (u32, u32)) {
        let (x0, y0) = (centre.0 - tpl.width() / 2, centre.1 - tpl.height() / 2);
        for (x, y, p) in tpl.enumerate_pixels() {
            img.put_pixel(x0 + x, y0 + y, *p);
        }
    }

    fn scene() -> RgbImage {
        let t = templates();
        let mut img = RgbImage::from_pixel(480, 480, Rgb(SKIN));
        paste(&mut img, &t.nipple, (200, 150));
        paste(&mut img, &t.nipple, (280, 150));
        paste(&mut img, &t.navel, (240, 400));
        img
    }

    #[test]
    fn exact_copies_recovered() {
        let lm = detect_landmarks(&scene(), &templates(), &SearchConfig::default()).unwrap();
        // head is up, so the patient's right is on the image left
        assert_eq!(lm.nipple_right, Pixel::new(200, 150));
        assert_eq!(lm.nipple_left, Pixel::new(280, 150));
        assert_eq!(lm.navel, Pixel::new(240, 400));
        assert!((lm.nipple_left_score - 1.0).abs() < 1e-9);
        assert!((lm.navel_score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_image_fails_detection() {
        let img = RgbImage::from_pixel(200, 200, Rgb([128, 128, 128]));
        let err = detect_landmarks(&img, &templates(), &SearchConfig::default()).unwrap_err();
        assert!(
            matches!(err, Error::DetectionFailure { landmark: "nipple", .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_navel_fails_detection() {
        let t = templates();
        let mut img = RgbImage::from_pixel(480, 480, Rgb(SKIN));
        paste(&mut img, &t.nipple, (200, 150));
        paste(&mut img, &t.nipple, (280, 150));
        let err = detect_landmarks(&img, &t, &SearchConfig::default()).unwrap_err();
        assert!(
            matches!(err, Error::DetectionFailure { landmark: "navel", .. }),
            "{err}"
        );
    }

    #[test]
    fn oversized_template_rejected() {
        let img = RgbImage::from_pixel(10, 10, Rgb(SKIN));
        assert!(ncc_scores(&img, &disk_template(15, 4.0, [0, 0, 0])).is_err());
    }

    /// Direct evaluation of zero-mean NCC at one placement.
    fn ncc_brute(img: &RgbImage, tpl: &RgbImage, x0: u32, y0: u32) -> f64 {
        let luma = |p: &Rgb<u8>| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, p) in tpl.enumerate_pixels() {
            a.push(luma(img.get_pixel(x0 + x, y0 + y)));
            b.push(luma(p));
        }
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if da <= 1e-9 * a.len() as f64 {
            0.0
        } else {
            num / (da * db).sqrt()
        }
    }

    fn noisy(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        let mut out = img.clone();
        for p in out.pixels_mut() {
            for c in p.0.iter_mut() {
                *c = (*c as f64 + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    #[test]
    fn score_map_matches_direct_ncc() {
        let t = templates();
        let mut img = RgbImage::from_pixel(60, 50, Rgb(SKIN));
        paste(&mut img, &t.nipple, (20, 20));
        let img = noisy(&img, 5.0, 3);
        let map = ncc_scores(&img, &t.nipple).unwrap();
        for r in 0..map.rows {
            for c in 0..map.cols {
                let want = ncc_brute(&img, &t.nipple, c as u32, r as u32);
                assert!((map.scores[r * map.cols + c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noisy_copies_recovered_within_one_pixel() {
        let t = templates();
        for seed in 0..5 {
            let img = noisy(&scene(), 5.0, seed);
            let lm = detect_landmarks(&img, &t, &SearchConfig::default()).unwrap();
            for (got, want) in [
                (lm.nipple_right, Pixel::new(200, 150)),
                (lm.nipple_left, Pixel::new(280, 150)),
                (lm.navel, Pixel::new(240, 400)),
            ] {
                assert!(got.u.abs_diff(want.u) <= 1 && got.v.abs_diff(want.v) <= 1, "{got:?}");
            }
        }
    }

    #[test]
    fn ties_break_to_lowest_row_then_column() {
        let map = ScoreMap {
            u0: 0,
            v0: 0,
            cols: 3,
            rows: 2,
            scores: vec![0.1, 0.9, 0.2, 0.9, 0.9, 0.3],
        };
        assert_eq!(map.best(|_| true), Some((Pixel::new(1, 0), 0.9)));
    }

    #[test]
    fn flat_plane_frame() {
        let b = body_frame_from_points(
            &Vector3::new(50.0, 0.0, 0.0),
            &Vector3::new(-50.0, 0.0, 0.0),
            &Vector3::new(0.0, -300.0, 0.0),
            &Vector3::new(0.0, 0.0, 500.0),
        )
        .unwrap();
        assert_eq!(b.origin, Vector3::zeros());
        assert!((b.y_axis - Vector3::y()).norm() < 1e-12);
        assert!((b.z_axis - Vector3::z()).norm() < 1e-12);
        // z × y points toward the patient's right, i.e. toward -x here
        assert!((b.x_axis + Vector3::x()).norm() < 1e-12);
        assert!(b.orthonormality_error() < 1e-9);
        assert!(b.x_axis.dot(&Vector3::new(-100.0, 0.0, 0.0)) > 0.0);
    }

    #[test]
    fn frame_rotates_with_scene() {
        let pts = [
            Vector3::new(50.0, 4.0, 3.0),
            Vector3::new(-48.0, 1.0, 2.0),
            Vector3::new(2.0, -290.0, -10.0),
            Vector3::new(0.0, 0.0, 400.0),
        ];
        let r = RigidTransform::rot_z(30f64.to_radians()).with_translation(Vector3::new(5.0, -7.0, 11.0));
        let a = body_frame_from_points(&pts[0], &pts[1], &pts[2], &pts[3]).unwrap();
        let m: Vec<_> = pts.iter().map(|p| r.transform_point(p)).collect();
        let b = body_frame_from_points(&m[0], &m[1], &m[2], &m[3]).unwrap();
        let want = a.transformed(&r);
        for (x, y) in [
            (b.origin, want.origin),
            (b.x_axis, want.x_axis),
            (b.y_axis, want.y_axis),
            (b.z_axis, want.z_axis),
        ] {
            assert!((x - y).norm() < 1e-9);
        }
        let axes = |f: &BodyFrame<f64>| nalgebra::Matrix3::from_columns(&[f.x_axis, f.y_axis, f.z_axis]);
        let rel = axes(&b) * axes(&a).transpose();
        let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!((angle.to_degrees() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_midline_rejected() {
        let err = body_frame_from_points(
            &Vector3::new(50.0, 0.0, 0.0),
            &Vector3::new(-50.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 500.0),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "degenerate");
    }

    #[test]
    fn default_map_offsets() {
        let v = map_valves(&BodyFrame::<f64>::identity(), &AnatomicalMap::default());
        assert_eq!(v.aortic, Vector3::new(13.0, 39.0, 0.0));
        assert_eq!(v.pulmonary, Vector3::new(-13.0, 39.0, 0.0));
        assert_eq!(v.tricuspid, Vector3::new(-13.0, -20.6, 0.0));
        assert_eq!(v.mitral, Vector3::new(-100.0, -20.6, 0.0));
    }

    #[test]
    fn zero_map_collapses_to_origin() {
        let map = AnatomicalMap {
            dy_up: 0.0,
            dy_down: 0.0,
            sternum_half_width: 0.0,
            midclavicular_offset: 0.0,
        };
        let body = BodyFrame::<f64>::identity().transformed(&RigidTransform::from_translation(1.0, 2.0, 3.0));
        let v = map_valves(&body, &map);
        for valve in Valve::ALL {
            assert_eq!(v.get(valve), Vector3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn valves_move_rigidly_with_frame() {
        let t = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.7)
            .with_translation(Vector3::new(10.0, -20.0, 300.0));
        let map = AnatomicalMap::default();
        let a = map_valves(&BodyFrame::<f64>::identity(), &map);
        let b = map_valves(&BodyFrame::identity().transformed(&t), &map);
        for v in Valve::ALL {
            assert!((t.transform_point(&a.get(v)) - b.get(v)).norm() < 1e-12);
        }
    }

    #[test]
    fn tricuspid_closest_to_origin_in_default_map() {
        let m = AnatomicalMap::default();
        let r = |v| {
            let [x, y] = m.planar_offset(v);
            x.hypot(y)
        };
        for v in [Valve::Aortic, Valve::Pulmonary, Valve::Mitral] {
            assert!(r(Valve::Tricuspid) < r(v));
        }
    }

    fn plane_cloud(step: f64) -> PointCloud<f64> {
        let mut pts = Vec::new();
        let n = (100.0 / step) as i32;
        for i in -n..=n {
            for j in -n..=n {
                pts.push(Vector3::new(i as f64 * step, j as f64 * step, 0.0));
            }
        }
        PointCloud::new(pts, "base").unwrap()
    }

    #[test]
    fn projection_cases() {
        let cloud = plane_cloud(2.0);
        let z = Vector3::z();
        let on = Vector3::new(4.0, -6.0, 0.0);
        assert_eq!(project_to_surface(&on, &z, &cloud, 10.0).unwrap(), on);

        let above = Vector3::new(13.3, 27.9, 20.0);
        let got = project_to_surface(&above, &z, &cloud, 10.0).unwrap();
        let foot = Vector3::new(13.3, 27.9, 0.0);
        assert!((got - foot).norm() <= 2f64.sqrt());

        // far outside: the cylinder is empty, so the plain nearest point wins
        let far = Vector3::new(300.0, 40.3, 50.0);
        let got = project_to_surface(&far, &z, &cloud, 10.0).unwrap();
        let brute = cloud
            .points()
            .iter()
            .min_by(|a, b| (*a - far).norm().partial_cmp(&(*b - far).norm()).unwrap())
            .unwrap();
        assert_eq!(got, *brute);

        assert!(project_to_surface(&far, &z, &PointCloud::empty("base"), 10.0).is_err());
    }

    #[test]
    fn landing_record_round_trip() {
        let p = map_valves(&BodyFrame::<f64>::identity(), &AnatomicalMap::default());
        let json = serde_json::to_string(&p.record()).unwrap();
        assert!(json.contains("\"frame\":\"base\""));
        let back: LandingRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.positions::<f64>().unwrap(), p);
    }

    #[test]
    fn map_validation() {
        let m = AnatomicalMap {
            dy_up: -1.0,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        let m: AnatomicalMap = serde_json::from_str(r#"{"dy_up": 40}"#).unwrap();
        assert_eq!(m.dy_down, 20.6);
    }

    /// Flat chest at z = 0 seen by a camera 300 mm above, head toward +y.
    fn flat_frame() -> (RgbdFrame<f64>, PointCloud<f64>) {
        let k = CameraIntrinsics::new(300.0, 300.0, 240.0, 240.0, 480, 480).unwrap();
        // camera x = base x, camera y = -base y, camera z = -base z
        let pose = RigidTransform::rot_x(std::f64::consts::PI).with_translation(Vector3::new(0.0, -120.0, 300.0));
        let depth = DepthMap::filled(480, 480, 300.0);
        let frame = RgbdFrame::new(scene(), depth, k, pose).unwrap();
        (frame, plane_cloud(1.0).retag("base"))
    }

    #[test]
    fn end_to_end_on_flat_chest() {
        let (frame, cloud) = flat_frame();
        let est = estimate_landing_positions(
            std::slice::from_ref(&frame),
            &[],
            &cloud,
            &templates(),
            &LandingConfig::default(),
        )
        .unwrap();
        let px = |p: Pixel| {
            frame
                .capture_pose
                .transform_point(&frame.intrinsics.back_project(p.u as f64, p.v as f64, 300.0))
        };
        let right = px(Pixel::new(200, 150));
        let left = px(Pixel::new(280, 150));
        assert!(right.x < left.x, "patient's right is base -x for this camera");
        let origin = (right + left) / 2.0;
        assert!((est.body.origin - origin).norm() < 1e-9);
        assert!((est.body.z_axis - Vector3::z()).norm() < 1e-9);
        for v in Valve::ALL {
            let [x, y] = AnatomicalMap::default().planar_offset(v);
            let want = Vector3::new(origin.x - x, origin.y + y, 0.0);
            assert!(
                (est.positions.get(v) - want).norm() <= 0.75,
                "{v}: {:?}",
                est.positions.get(v)
            );
        }
    }

    #[test]
    fn refinement_moves_landings_rigidly() {
        let (frame, cloud) = flat_frame();
        let t = RigidTransform::rot_z(0.05).with_translation(Vector3::new(3.0, -2.0, 0.0));
        let cfg = LandingConfig::default();
        let lm = detect_landmarks(&frame.color, &templates(), &cfg.search).unwrap();
        let a = landing_from_landmarks(&lm, &frame, &RigidTransform::identity(), &cloud, &cfg).unwrap();
        let b = landing_from_landmarks(&lm, &frame, &t, &cloud, &cfg).unwrap();
        for v in Valve::ALL {
            assert!((t.transform_point(&a.planar.get(v)) - b.planar.get(v)).norm() < 1e-9);
        }
    }

    #[test]
    fn missing_depth_is_reported() {
        let (mut frame, cloud) = flat_frame();
        frame.depth = DepthMap::filled(480, 480, 0.0);
        let err =
            estimate_landing_positions(&[frame], &[], &cloud, &templates(), &LandingConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "invalid_input");
    }
}
