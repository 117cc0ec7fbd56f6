//! On-disk RGB-D frames: 8-bit RGB PNG, 16-bit grayscale depth PNG
//! (1 unit = 1 mm, 0 = invalid) and a JSON sidecar with intrinsics and the
//! capture pose.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, DepthMap, RgbdFrame};
use crate::error::{Error, Result};
use crate::geometry::{PoseRecord, RigidTransform};
use crate::scalar::Real;

pub type Depth16Image = ImageBuffer<Luma<u16>, Vec<u16>>;

/// JSON sidecar describing one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub color: String,
    pub depth: String,
    pub depth_unit_mm: f64,
    pub intrinsics: CameraIntrinsics<f64>,
    pub capture_pose: PoseRecord,
}

pub fn depth_to_png16<T: Real>(depth: &DepthMap<T>) -> Depth16Image {
    ImageBuffer::from_fn(depth.width(), depth.height(), |u, v| {
        let d = depth.get(u, v).as_f64().round();
        Luma([d.clamp(0.0, u16::MAX as f64) as u16])
    })
}

pub fn depth_from_png16<T: Real>(img: &Depth16Image, unit_mm: f64) -> DepthMap<T> {
    let data = img.pixels().map(|p| T::lit(p.0[0] as f64 * unit_mm)).collect();
    DepthMap::new(img.width(), img.height(), data).expect("dimensions come from the image")
}

/// Writes `<stem>_color.png`, `<stem>_depth.png` and `<stem>.json` into
/// `dir`, returning the sidecar path.
pub fn write_frame<T: Real>(frame: &RgbdFrame<T>, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let color_name = format!("{stem}_color.png");
    let depth_name = format!("{stem}_depth.png");
    frame.color.save(dir.join(&color_name))?;
    depth_to_png16(&frame.depth).save(dir.join(&depth_name))?;
    let sidecar = FrameSidecar {
        color: color_name,
        depth: depth_name,
        depth_unit_mm: 1.0,
        intrinsics: frame.intrinsics.cast(),
        capture_pose: PoseRecord::from(&frame.capture_pose),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a frame from its JSON sidecar; image paths resolve relative to it.
pub fn read_frame<T: Real>(sidecar_path: impl AsRef<Path>) -> Result<RgbdFrame<T>> {
    let path = sidecar_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: FrameSidecar = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let color: RgbImage = image::open(base.join(&sidecar.color))?.to_rgb8();
    let depth_img: Depth16Image = image::open(base.join(&sidecar.depth))?.to_luma16();
    let depth = depth_from_png16(&depth_img, sidecar.depth_unit_mm);
    let pose: RigidTransform<T> = sidecar.capture_pose.to_transform()?;
    RgbdFrame::new(color, depth, sidecar.intrinsics.cast(), pose)
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use nalgebra::Vector3;

    use super::*;

    #[test]
    fn frame_round_trip_quantizes_depth_to_mm() {
        let k = CameraIntrinsics::new(50.0, 50.0, 8.0, 6.0, 16, 12).unwrap();
        let mut depth = DepthMap::filled(16, 12, 0.0);
        depth.set(3, 4, 301.4);
        depth.set(5, 6, 299.6);
        let mut color = RgbImage::from_pixel(16, 12, Rgb([1, 2, 3]));
        color.put_pixel(3, 4, Rgb([200, 100, 50]));
        let pose = RigidTransform::rot_x(std::f64::consts::PI).with_translation(Vector3::new(-100.0, 0.0, 400.0));
        let frame = RgbdFrame::new(color, depth, k, pose).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let sidecar = write_frame(&frame, dir.path(), "f0").unwrap();
        let back: RgbdFrame<f64> = read_frame(&sidecar).unwrap();
        assert_eq!(back.color, frame.color);
        assert_eq!(back.depth.get(3, 4), 301.0);
        assert_eq!(back.depth.get(5, 6), 300.0);
        assert_eq!(back.depth.get(0, 0), 0.0);
        assert_eq!(back.intrinsics, k);
        assert!((back.capture_pose.rotation - pose.rotation).amax() < 1e-12);
        assert_eq!(back.capture_pose.translation, pose.translation);
    }

    #[test]
    fn missing_sidecar_is_io_error() {
        let err = read_frame::<f64>("/nonexistent/frame.json").unwrap_err();
        assert_eq!(err.kind(), "io");
    }
}
