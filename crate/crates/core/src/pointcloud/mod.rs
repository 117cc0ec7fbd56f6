//! Point clouds, RGB-D frames and the preprocessing applied before and after
//! registration.

mod kdtree;
pub mod ply;
pub mod rgbd_io;

use std::collections::BTreeMap;

use image::RgbImage;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use self::kdtree::KdTree;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::scalar::Real;

pub type Rgb = [u8; 3];

/// Neighbour count used by the statistical outlier filter when none is given.
pub const DEFAULT_OUTLIER_K: usize = 20;
/// Standard-deviation multiplier used by the statistical outlier filter.
pub const DEFAULT_OUTLIER_STD_RATIO: f64 = 2.0;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: &Vector3<T>) -> Option<(T, T)> {
        if p.z <= T::zero() {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-projects pixel `(u, v)` at depth `d` (mm along the optical axis).
    pub fn back_project(&self, u: T, v: T, depth: T) -> Vector3<T> {
        Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Row-major depth image in millimetres; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "depth buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|d| !d.is_finite_value() || *d < T::zero()) {
            return Err(Error::invalid("depth values must be finite and non-negative"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> T {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: T) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = value;
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.get(u, v) > T::zero()
    }

    /// Median of the valid depths in the `(2r+1)²` window around `(u, v)`.
    pub fn window_median(&self, u: u32, v: u32, radius: u32) -> Option<T> {
        let u0 = u.saturating_sub(radius);
        let v0 = v.saturating_sub(radius);
        let u1 = (u + radius).min(self.width - 1);
        let v1 = (v + radius).min(self.height - 1);
        let mut vals: Vec<T> = Vec::new();
        for vv in v0..=v1 {
            for uu in u0..=u1 {
                let d = self.get(uu, vv);
                if d > T::zero() {
                    vals.push(d);
                }
            }
        }
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            (vals[n / 2 - 1] + vals[n / 2]) * T::lit(0.5)
        })
    }
}

/// Colour + depth capture with the pose that maps the sensor frame into the
/// robot-base frame at capture time.
#[derive(Debug, Clone)]
pub struct RgbdFrame<T: Real> {
    pub color: RgbImage,
    pub depth: DepthMap<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub capture_pose: RigidTransform<T>,
}

impl<T: Real> RgbdFrame<T> {
    pub fn new(
        color: RgbImage,
        depth: DepthMap<T>,
        intrinsics: CameraIntrinsics<T>,
        capture_pose: RigidTransform<T>,
    ) -> Result<Self> {
        if color.width() != depth.width() || color.height() != depth.height() {
            return Err(Error::invalid("color and depth dimensions differ"));
        }
        if depth.width() != intrinsics.width || depth.height() != intrinsics.height {
            return Err(Error::invalid("intrinsics do not match the image size"));
        }
        intrinsics.validate()?;
        if capture_pose.orthonormality_error().as_f64() > 1e-6 {
            return Err(Error::invalid("capture pose rotation is not orthonormal"));
        }
        Ok(Self {
            color,
            depth,
            intrinsics,
            capture_pose,
        })
    }

    /// Camera-frame point for a pixel using the median depth of its
    /// neighbourhood.
    pub fn point_at_pixel(&self, u: u32, v: u32, window_radius: u32) -> Option<Vector3<T>> {
        let d = self.depth.window_median(u, v, window_radius)?;
        Some(self.intrinsics.back_project(T::lit(u as f64), T::lit(v as f64), d))
    }
}

/// A set of 3D points (mm) with optional per-point colour.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    points: Vec<Vector3<T>>,
    colors: Option<Vec<Rgb>>,
    frame_tag: String,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vector3<T>>, frame_tag: impl Into<String>) -> Result<Self> {
        Self::with_colors(points, None, frame_tag)
    }

    pub fn with_colors(
        points: Vec<Vector3<T>>,
        colors: Option<Vec<Rgb>>,
        frame_tag: impl Into<String>,
    ) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::invalid(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite_value())) {
            return Err(Error::invalid(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self {
            points,
            colors,
            frame_tag: frame_tag.into(),
        })
    }

    pub fn empty(frame_tag: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            colors: None,
            frame_tag: frame_tag.into(),
        }
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn frame_tag(&self) -> &str {
        &self.frame_tag
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Vector3<T>>, Option<Vec<Rgb>>, String) {
        (self.points, self.colors, self.frame_tag)
    }

    pub fn retag(mut self, frame_tag: impl Into<String>) -> Self {
        self.frame_tag = frame_tag.into();
        self
    }

    /// Keeps the points whose index satisfies `keep`.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            frame_tag: self.frame_tag.clone(),
        }
    }

    /// Concatenates clouds; colours survive only if every input has them.
    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud<T>>, frame_tag: &str) -> Self
    where
        T: 'a,
    {
        let mut points = Vec::new();
        let mut colors = Some(Vec::new());
        for c in clouds {
            points.extend_from_slice(&c.points);
            match (&mut colors, &c.colors) {
                (Some(acc), Some(cc)) => acc.extend_from_slice(cc),
                _ => colors = None,
            }
        }
        Self {
            points,
            colors,
            frame_tag: frame_tag.to_string(),
        }
    }

    pub fn centroid(&self) -> Option<Vector3<T>> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
        Some(sum / T::count(self.len()))
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.map(|v| U::lit(v.as_f64()))).collect(),
            colors: self.colors.clone(),
            frame_tag: self.frame_tag.clone(),
        }
    }
}

/// Inverse pinhole model over every pixel with positive depth.
/// The result lives in the camera frame.
pub fn deproject<T: Real>(frame: &RgbdFrame<T>) -> PointCloud<T> {
    let k = &frame.intrinsics;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for v in 0..frame.depth.height() {
        for u in 0..frame.depth.width() {
            let d = frame.depth.get(u, v);
            if d <= T::zero() {
                continue;
            }
            points.push(k.back_project(T::lit(u as f64), T::lit(v as f64), d));
            colors.push(frame.color.get_pixel(u, v).0);
        }
    }
    PointCloud {
        points,
        colors: Some(colors),
        frame_tag: "camera".into(),
    }
}

pub fn transform_cloud<T: Real>(
    cloud: &PointCloud<T>,
    transform: &RigidTransform<T>,
    frame_tag: &str,
) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().map(|p| transform.transform_point(p)).collect(),
        colors: cloud.colors.clone(),
        frame_tag: frame_tag.to_string(),
    }
}

/// Replaces the points of every occupied voxel by their centroid. Output is
/// ordered by voxel index, so it does not depend on input order.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, voxel_mm: T) -> Result<PointCloud<T>> {
    if !(voxel_mm > T::zero()) || !voxel_mm.is_finite_value() {
        return Err(Error::invalid("voxel size must be positive"));
    }
    struct Acc<T: Real> {
        sum: Vector3<T>,
        rgb: [u64; 3],
        n: usize,
    }
    let mut cells: BTreeMap<(i64, i64, i64), Acc<T>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.x / voxel_mm).floor().as_f64() as i64,
            (p.y / voxel_mm).floor().as_f64() as i64,
            (p.z / voxel_mm).floor().as_f64() as i64,
        );
        let acc = cells.entry(key).or_insert(Acc {
            sum: Vector3::zeros(),
            rgb: [0; 3],
            n: 0,
        });
        acc.sum += p;
        acc.n += 1;
        if let Some(c) = &cloud.colors {
            for (sum, v) in acc.rgb.iter_mut().zip(c[i]) {
                *sum += v as u64;
            }
        }
    }
    let mut points = Vec::with_capacity(cells.len());
    let mut colors = Vec::with_capacity(cells.len());
    for acc in cells.values() {
        points.push(acc.sum / T::count(acc.n));
        let n = acc.n as u64;
        colors.push([
            ((acc.rgb[0] + n / 2) / n) as u8,
            ((acc.rgb[1] + n / 2) / n) as u8,
            ((acc.rgb[2] + n / 2) / n) as u8,
        ]);
    }
    Ok(PointCloud {
        points,
        colors: cloud.colors.as_ref().map(|_| colors),
        frame_tag: cloud.frame_tag.clone(),
    })
}

/// Nearest neighbour of `query` in `tree`: `(index, distance)`.
pub fn nearest_neighbor<T: Real>(tree: &KdTree<T>, query: &Vector3<T>) -> (usize, T) {
    tree.nearest(query)
}

/// Mean distance from every point to its `k` nearest other points.
pub fn mean_knn_distances<T: Real>(cloud: &PointCloud<T>, k: usize) -> Result<Vec<T>> {
    let tree = KdTree::build(&cloud.points)?;
    Ok(cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut sum = T::zero();
            let mut taken = 0;
            for (j, d) in tree.knn(p, k + 1) {
                if j == i || taken == k {
                    continue;
                }
                sum += d;
                taken += 1;
            }
            sum / T::count(taken.max(1))
        })
        .collect())
}

/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// `mean + std_ratio * std` of that statistic over the whole cloud.
pub fn remove_statistical_outliers<T: Real>(cloud: &PointCloud<T>, k: usize, std_ratio: T) -> Result<PointCloud<T>> {
    if k == 0 {
        return Err(Error::invalid("outlier filter needs k >= 1"));
    }
    if cloud.len() < k + 1 {
        return Ok(cloud.clone());
    }
    let dists = mean_knn_distances(cloud, k)?;
    let threshold = outlier_threshold(&dists, std_ratio);
    Ok(cloud.select(|i| dists[i] <= threshold))
}

/// `mean + ratio * std` (population), accumulated in sorted order so the
/// value is independent of point order.
pub(crate) fn outlier_threshold<T: Real>(values: &[T], std_ratio: T) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = T::count(sorted.len());
    let mean = sorted.iter().fold(T::zero(), |a, &b| a + b) / n;
    let mut dev: Vec<T> = sorted.iter().map(|&d| (d - mean) * (d - mean)).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let var = dev.iter().fold(T::zero(), |a, &b| a + b) / n;
    mean + std_ratio * var.sqrt()
}
