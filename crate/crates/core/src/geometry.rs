//! Surrounding-camera ring, cube normalization and render manifests.
//!
//! World frame is right-handed with +z up. Azimuth is measured
//! counter-clockwise from +x in the xy-plane; positive elevation is above
//! the horizontal plane through the object center.
//!
//! Extrinsics map world points into a camera frame whose +x is image
//! right, +y is image down and +z is the viewing direction.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

pub const DEFAULT_N_VIEWS: usize = 16;
pub const DEFAULT_ELEVATION_DEG: f64 = 5.0;
pub const DEFAULT_RADIUS: f64 = 1.5;
pub const DEFAULT_IMAGE_SIZE: u32 = 256;
pub const DEFAULT_FOV_DEG: f64 = 50.0;

/// World-to-camera transform `[R | t]`, row-major.
pub type Extrinsic = [[f64; 4]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub extrinsic: Extrinsic,
}

impl CameraPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        let e = &self.extrinsic;
        Matrix3::new(
            e[0][0], e[0][1], e[0][2], e[1][0], e[1][1], e[1][2], e[2][0], e[2][1], e[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        let e = &self.extrinsic;
        Vector3::new(e[0][3], e[1][3], e[2][3])
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Unit viewing direction in world coordinates (third row of R).
    pub fn forward(&self) -> Vector3<f64> {
        let e = &self.extrinsic;
        Vector3::new(e[2][0], e[2][1], e[2][2])
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub poses: Vec<CameraPose>,
    pub n_views: usize,
    pub start_azimuth_deg: f64,
}

impl CameraRing {
    pub fn azimuth_step_deg(&self) -> f64 {
        360.0 / self.n_views as f64
    }
}

/// Spherical position for the given azimuth/elevation (degrees) and radius.
pub fn spherical_position(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Vector3<f64> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vector3::new(
        radius * el.cos() * az.cos(),
        radius * el.cos() * az.sin(),
        radius * el.sin(),
    )
}

/// Builds `n_views` cameras equally spaced in azimuth, all looking at the
/// origin with world up `+z`.
pub fn camera_ring(
    n_views: usize,
    elevation_deg: f64,
    radius: f64,
    start_azimuth_deg: f64,
) -> Result<CameraRing> {
    if n_views == 0 {
        return Err(Error::invalid("n_views must be positive"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    if !elevation_deg.is_finite() || !start_azimuth_deg.is_finite() {
        return Err(Error::invalid("angles must be finite"));
    }
    if elevation_deg.abs() >= 90.0 {
        return Err(Error::invalid(format!(
            "elevation {elevation_deg} leaves no horizontal look-at baseline"
        )));
    }
    let up = Vector3::z();
    let poses = (0..n_views)
        .map(|i| {
            let azimuth = (start_azimuth_deg + 360.0 * i as f64 / n_views as f64).rem_euclid(360.0);
            let position = spherical_position(azimuth, elevation_deg, radius);
            let extrinsic = look_at_extrinsic(&position, &Vector3::zeros(), &up)?;
            Ok(CameraPose {
                azimuth_deg: azimuth,
                elevation_deg,
                radius,
                extrinsic,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraRing {
        poses,
        n_views,
        start_azimuth_deg: start_azimuth_deg.rem_euclid(360.0),
    })
}

/// World-to-camera transform for a camera at `position` looking at `target`.
pub fn look_at_extrinsic(
    position: &Vector3<f64>,
    target: &Vector3<f64>,
    up_hint: &Vector3<f64>,
) -> Result<Extrinsic> {
    let baseline = target - position;
    let dist = baseline.norm();
    if !(dist > 1e-12) {
        return Err(Error::DegenerateGeometry(
            "camera position coincides with target".into(),
        ));
    }
    let forward = baseline / dist;
    let side = forward.cross(up_hint);
    if !(side.norm() > 1e-12 * up_hint.norm().max(1.0)) {
        return Err(Error::DegenerateGeometry(
            "up hint is parallel to the viewing direction".into(),
        ));
    }
    let right = side.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * position);
    Ok([
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub translation: [f64; 3],
}

impl NormalizationTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
            self.scale * p[2] + self.translation[2],
        ]
    }
}

/// Uniform scale and translation taking the box into `[-0.5, 0.5]³`, with
/// its longest axis spanning the full cube.
pub fn normalize_to_cube(bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Result<NormalizationTransform> {
    let mut max_extent = 0.0f64;
    for axis in 0..3 {
        let (lo, hi) = (bbox_min[axis], bbox_max[axis]);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("bounding box must be finite"));
        }
        if hi < lo {
            return Err(Error::invalid(format!(
                "bbox max < min on axis {axis} ({hi} < {lo})"
            )));
        }
        max_extent = max_extent.max(hi - lo);
    }
    if max_extent <= 0.0 {
        return Err(Error::invalid("bounding box has zero extent on all axes"));
    }
    let scale = 1.0 / max_extent;
    let translation = [0, 1, 2].map(|a| -scale * 0.5 * (bbox_min[a] + bbox_max[a]));
    Ok(NormalizationTransform { scale, translation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub extrinsic: Extrinsic,
}

/// Declarative input for an external renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub instance_id: String,
    pub model_path: String,
    pub normalization: NormalizationTransform,
    pub cameras: Vec<ManifestCamera>,
    pub start_azimuth_deg: f64,
    pub image_size: u32,
    pub fov_deg: f64,
    pub outputs: Vec<String>,
}

impl RenderManifest {
    pub fn ring(&self) -> CameraRing {
        CameraRing {
            poses: self
                .cameras
                .iter()
                .map(|c| CameraPose {
                    azimuth_deg: c.azimuth_deg,
                    elevation_deg: c.elevation_deg,
                    radius: c.radius,
                    extrinsic: c.extrinsic,
                })
                .collect(),
            n_views: self.cameras.len(),
            start_azimuth_deg: self.start_azimuth_deg,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_canonical_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub image_size: u32,
    pub fov_deg: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

pub fn view_file_name(index: usize) -> String {
    format!("view_{index:02}.png")
}

/// Path of the manifest written by [`build_manifest`].
pub fn manifest_path(out_dir: &Path, instance_id: &str) -> PathBuf {
    out_dir.join(instance_id).join("manifest.json")
}

/// Writes `<out_dir>/<instance_id>/manifest.json` and returns the manifest.
/// Output paths point at `<out_dir>/<instance_id>/view_NN.png`.
pub fn build_manifest(
    instance_id: &str,
    model_path: &str,
    bbox: ([f64; 3], [f64; 3]),
    ring: &CameraRing,
    out_dir: &Path,
    options: RenderOptions,
) -> Result<RenderManifest> {
    if instance_id.is_empty() || instance_id.contains(['/', '\\']) {
        return Err(Error::invalid(format!("bad instance id {instance_id:?}")));
    }
    if ring.poses.len() != ring.n_views || ring.n_views == 0 {
        return Err(Error::invalid("camera ring is inconsistent"));
    }
    let normalization = normalize_to_cube(bbox.0, bbox.1)?;
    let instance_dir = out_dir.join(instance_id);
    let outputs = (0..ring.n_views)
        .map(|i| {
            instance_dir
                .join(view_file_name(i))
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let manifest = RenderManifest {
        instance_id: instance_id.to_string(),
        model_path: model_path.to_string(),
        normalization,
        cameras: ring
            .poses
            .iter()
            .map(|p| ManifestCamera {
                azimuth_deg: p.azimuth_deg,
                elevation_deg: p.elevation_deg,
                radius: p.radius,
                extrinsic: p.extrinsic,
            })
            .collect(),
        start_azimuth_deg: ring.start_azimuth_deg,
        image_size: options.image_size,
        fov_deg: options.fov_deg,
        outputs,
    };
    let path = manifest_path(out_dir, instance_id);
    let write = || -> std::io::Result<()> {
        std::fs::create_dir_all(&instance_dir)?;
        std::fs::write(&path, manifest.to_json().map_err(std::io::Error::other)?)
    };
    write().map_err(|source| Error::ManifestWrite {
        path: path.clone(),
        source,
    })?;
    Ok(manifest)
}
