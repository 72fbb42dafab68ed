//! Posed multi-view datasets on disk: `images/NNN.png`, `masks/NNN.png`,
//! `cameras.json` and an optional `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Camera, MaskRaster, Raster, RgbRaster};

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4 world-to-camera transform.
    pub world_to_camera: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn from_camera(c: &Camera) -> Self {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for k in 0..4 {
                m[r * 4 + k] = c.world_to_camera[(r, k)];
            }
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: m,
            width: c.width,
            height: c.height,
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: Matrix4::from_row_slice(&self.world_to_camera),
            width: self.width,
            height: self.height,
        }
    }
}

/// Optional dataset metadata. A bounding box maps world space into `[-1, 1]³`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_min: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_max: Option<[f64; 3]>,
    /// Views the generator intended for evaluation; informational only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suggested_held_out: Vec<usize>,
}

impl DatasetMeta {
    /// `(center, scale)` with `x_normalized = scale · (x_world − center)`.
    pub fn normalization(&self) -> Result<Option<([f64; 3], f64)>> {
        match (self.bbox_min, self.bbox_max) {
            (Some(lo), Some(hi)) => {
                let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
                if !(extent > 0.0 && extent.is_finite()) {
                    return Err(Error::Validation(vec![format!(
                        "meta.json: degenerate bounding box {lo:?}..{hi:?}"
                    )]));
                }
                let center = std::array::from_fn(|d| 0.5 * (lo[d] + hi[d]));
                Ok(Some((center, 2.0 / extent)))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Validation(vec![
                "meta.json: bbox_min and bbox_max must be given together".into(),
            ])),
        }
    }
}

/// Re-express a world-space camera in normalized object space. Scaling the
/// camera-frame coordinates by the same factor keeps the pose rigid.
pub fn normalize_camera(camera: &Camera, center: [f64; 3], scale: f64) -> Camera {
    let r = camera.rotation();
    let t = camera.translation();
    let c = Vector3::from(center);
    let t_new = scale * (r * c + t);
    let mut out = camera.clone();
    out.world_to_camera[(0, 3)] = t_new.x;
    out.world_to_camera[(1, 3)] = t_new.y;
    out.world_to_camera[(2, 3)] = t_new.z;
    out
}

#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: RgbRaster,
    pub mask: MaskRaster,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<View>,
    pub meta: DatasetMeta,
}

fn view_file(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:03}.png"))
}

fn count_pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                .count()
        })
        .unwrap_or(0)
}

fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    Ok(img.to_rgb8())
}

fn decode_gray(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    Ok(img.to_luma8())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        format: "json",
        reason: format!("{}: {e}", path.display()),
    })
}

impl Dataset {
    /// Load and validate a dataset directory. Every problem found is reported
    /// at once before any pixels are used.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut problems = Vec::new();
        let cameras: Vec<CameraRecord> = match read_json(&dir.join("cameras.json")) {
            Ok(c) => c,
            Err(e) => return Err(Error::Validation(vec![format!("cameras.json: {e}")])),
        };
        if cameras.is_empty() {
            problems.push("cameras.json lists no views".to_string());
        }
        let meta: DatasetMeta = if dir.join("meta.json").exists() {
            match read_json(&dir.join("meta.json")) {
                Ok(m) => m,
                Err(e) => {
                    problems.push(format!("meta.json: {e}"));
                    DatasetMeta::default()
                }
            }
        } else {
            DatasetMeta::default()
        };
        let norm = match meta.normalization() {
            Ok(n) => n,
            Err(Error::Validation(p)) => {
                problems.extend(p);
                None
            }
            Err(e) => return Err(e),
        };
        let n_images = count_pngs(&dir.join("images"));
        let n_masks = count_pngs(&dir.join("masks"));
        if n_images != cameras.len() || n_masks != cameras.len() {
            problems.push(format!(
                "count mismatch: {} cameras, {} images, {} masks",
                cameras.len(),
                n_images,
                n_masks
            ));
        }

        let mut views = Vec::new();
        for (i, rec) in cameras.iter().enumerate() {
            let camera = rec.to_camera();
            if let Err(e) = camera.validate() {
                problems.push(format!("view {i:03}: {e}"));
            }
            let img_path = view_file(dir, "images", i);
            let mask_path = view_file(dir, "masks", i);
            let image = if img_path.exists() {
                decode_rgb(&img_path).map_err(|e| problems.push(format!("view {i:03}: {e}"))).ok()
            } else {
                problems.push(format!("view {i:03}: missing image {}", img_path.display()));
                None
            };
            let mask = if mask_path.exists() {
                decode_gray(&mask_path).map_err(|e| problems.push(format!("view {i:03}: {e}"))).ok()
            } else {
                problems.push(format!("view {i:03}: missing mask {}", mask_path.display()));
                None
            };
            let (Some(image), Some(mask)) = (image, mask) else {
                continue;
            };
            if image.dimensions() != mask.dimensions() {
                problems.push(format!(
                    "view {i:03}: mask is {:?} but image is {:?}",
                    mask.dimensions(),
                    image.dimensions()
                ));
                continue;
            }
            if (image.width() as usize, image.height() as usize) != (rec.width, rec.height) {
                problems.push(format!(
                    "view {i:03}: camera says {}×{} but image is {}×{}",
                    rec.width,
                    rec.height,
                    image.width(),
                    image.height()
                ));
                continue;
            }
            let (w, h) = (rec.width, rec.height);
            let rgb = Raster {
                width: w,
                height: h,
                data: image
                    .pixels()
                    .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
                    .collect(),
            };
            let m = Raster {
                width: w,
                height: h,
                data: mask.pixels().map(|p| p[0] >= MASK_THRESHOLD).collect(),
            };
            let camera = match norm {
                Some((c, s)) => normalize_camera(&camera, c, s),
                None => camera,
            };
            views.push(View { camera, image: rgb, mask: m });
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self { views, meta })
    }

    /// Write the dataset; cameras are stored as given (no normalization applied).
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut records = Vec::new();
        for (i, v) in self.views.iter().enumerate() {
            write_rgb_png(&view_file(dir, "images", i), &v.image)?;
            write_mask_png(&view_file(dir, "masks", i), &v.mask)?;
            records.push(CameraRecord::from_camera(&v.camera));
        }
        write_json(&dir.join("cameras.json"), &records)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        Ok(())
    }
}

/// 8-bit RGB PNG; channels are clamped to `[0, 1]`.
pub fn write_rgb_png(path: &Path, raster: &RgbRaster) -> Result<()> {
    let img = RgbImage::from_fn(raster.width as u32, raster.height as u32, |x, y| {
        let c = raster.get(x as usize, y as usize);
        image::Rgb(c.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub fn write_mask_png(path: &Path, mask: &MaskRaster) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Grayscale PNG of a fractional raster such as rendered opacity.
pub fn write_gray_png(path: &Path, raster: &Raster<f64>) -> Result<()> {
    let img = GrayImage::from_fn(raster.width as u32, raster.height as u32, |x, y| {
        image::Luma([(raster.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        format: "json",
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
