//! Analytic scenes used as ground truth: exact occupancy, first-hit renders
//! and reference meshes.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, View};
use crate::error::{Error, Result};
use crate::extract::{marching_cubes, write_ply, ScalarGrid};
use crate::mesh::Mesh;
use crate::render::{Camera, MaskRaster, Raster, RgbRaster};

pub const DEFAULT_RESOLUTION: usize = 128;
pub const GT_MESH_RESOLUTION: usize = 256;
pub const CAMERA_DISTANCE: f64 = 3.0;
/// Focal length in pixels for a 128-pixel raster; scaled with the raster width.
pub const FOCAL_128: f64 = 150.0;
pub const TRAIN_AZIMUTHS_DEG: [f64; 3] = [0.0, 120.0, 240.0];
pub const TRAIN_ELEVATION_DEG: f64 = 30.0;
pub const HELD_OUT_AZIMUTH_DEG: f64 = 60.0;
pub const HELD_OUT_ELEVATION_DEG: f64 = 20.0;
/// Index of the held-out view in every standard rig.
pub const HELD_OUT_VIEW: usize = 3;

const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, -0.3, 0.85).normalize()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Box `[-half, half]` in the solid's frame.
    Box { half: [f64; 3] },
    /// Cylinder along the local z axis with flat caps at `±half_height`.
    Cylinder { radius: f64, half_height: f64 },
    Ellipsoid { radii: [f64; 3] },
}

/// A closed solid placed by `world = rotation · local + center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solid {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Row-major rotation from the solid frame to the world.
    pub rotation: [[f64; 3]; 3],
    pub color: [f64; 3],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Solid {
    pub fn new(shape: Shape, center: [f64; 3], color: [f64; 3]) -> Self {
        Self {
            shape,
            center,
            rotation: IDENTITY,
            color,
        }
    }

    pub fn rotated(mut self, r: Rotation3<f64>) -> Self {
        let m = r.matrix();
        self.rotation = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        self
    }

    fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn to_local(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rot().transpose() * (Vector3::from(p) - Vector3::from(self.center))
    }

    /// Closed point-in-solid test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        match self.shape {
            Shape::Sphere { radius } => l.norm_squared() <= radius * radius,
            Shape::Box { half } => (0..3).all(|d| l[d].abs() <= half[d]),
            Shape::Cylinder { radius, half_height } => {
                l.x * l.x + l.y * l.y <= radius * radius && l.z.abs() <= half_height
            }
            Shape::Ellipsoid { radii } => (0..3).map(|d| (l[d] / radii[d]).powi(2)).sum::<f64>() <= 1.0,
        }
    }

    /// Distance-like field, non-positive inside; used for meshing.
    pub fn field(&self, p: [f64; 3]) -> f64 {
        let l = self.to_local(p);
        match self.shape {
            Shape::Sphere { radius } => l.norm() - radius,
            Shape::Box { half } => (0..3).map(|d| l[d].abs() - half[d]).fold(f64::NEG_INFINITY, f64::max),
            Shape::Cylinder { radius, half_height } => {
                ((l.x * l.x + l.y * l.y).sqrt() - radius).max(l.z.abs() - half_height)
            }
            Shape::Ellipsoid { radii } => {
                let r = (0..3).map(|d| (l[d] / radii[d]).powi(2)).sum::<f64>().sqrt();
                (r - 1.0) * radii.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Nearest ray parameter `t ≥ 0` at which the ray enters the solid, with
    /// the outward world normal there. A ray starting inside hits at `t = 0`.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, Vector3<f64>)> {
        let r = self.rot();
        let o = r.transpose() * (Vector3::from(origin) - Vector3::from(self.center));
        let d = r.transpose() * Vector3::from(dir);
        let (t, n) = match self.shape {
            Shape::Sphere { radius } => ellipsoid_hit(o, d, [radius; 3])?,
            Shape::Ellipsoid { radii } => ellipsoid_hit(o, d, radii)?,
            Shape::Box { half } => box_hit(o, d, half)?,
            Shape::Cylinder { radius, half_height } => cylinder_hit(o, d, radius, half_height)?,
        };
        Some((t, (r * n).normalize()))
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let ext = match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
            Shape::Cylinder { radius, half_height } => [radius, radius, half_height],
            Shape::Ellipsoid { radii } => radii,
        };
        let r = self.rot();
        let mut lo = self.center;
        let mut hi = self.center;
        for i in 0..3 {
            let reach: f64 = (0..3).map(|j| r[(i, j)].abs() * ext[j]).sum();
            lo[i] -= reach;
            hi[i] += reach;
        }
        (lo, hi)
    }
}

fn ellipsoid_hit(o: Vector3<f64>, d: Vector3<f64>, radii: [f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let inv = Vector3::new(1.0 / radii[0], 1.0 / radii[1], 1.0 / radii[2]);
    let os = o.component_mul(&inv);
    let ds = d.component_mul(&inv);
    let a = ds.norm_squared();
    let b = os.dot(&ds);
    let c = os.norm_squared() - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = ((-b - s) / a, (-b + s) / a);
    if t1 < 0.0 {
        return None;
    }
    let t = t0.max(0.0);
    let p = o + d * t;
    Some((t, p.component_mul(&inv).component_mul(&inv)))
}

fn box_hit(o: Vector3<f64>, d: Vector3<f64>, half: [f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let (mut t_enter, mut t_exit) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t_enter {
            t_enter = near;
            axis = k;
            sign = -d[k].signum();
        }
        t_exit = t_exit.min(far);
    }
    if t_enter > t_exit || t_exit < 0.0 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t_enter.max(0.0), n))
}

fn cylinder_hit(o: Vector3<f64>, d: Vector3<f64>, radius: f64, hh: f64) -> Option<(f64, Vector3<f64>)> {
    // Side slab in the xy plane.
    let a = d.x * d.x + d.y * d.y;
    let b = o.x * d.x + o.y * d.y;
    let c = o.x * o.x + o.y * o.y - radius * radius;
    let (side_in, side_out) = if a == 0.0 {
        if c > 0.0 {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        ((-b - s) / a, (-b + s) / a)
    };
    let (cap_in, cap_out) = if d.z == 0.0 {
        if o.z.abs() > hh {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let (p, q) = ((-hh - o.z) / d.z, (hh - o.z) / d.z);
        if p < q { (p, q) } else { (q, p) }
    };
    let t_enter = side_in.max(cap_in);
    let t_exit = side_out.min(cap_out);
    if t_enter > t_exit || t_exit < 0.0 {
        return None;
    }
    let t = t_enter.max(0.0);
    let n = if cap_in >= side_in {
        Vector3::new(0.0, 0.0, -d.z.signum())
    } else {
        let p = o + d * t;
        Vector3::new(p.x, p.y, 0.0)
    };
    Some((t, n))
}

/// Union of solids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub solids: Vec<Solid>,
}

/// First solid hit by a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub solid: usize,
    pub normal: [f64; 3],
}

impl AnalyticScene {
    pub fn new(name: impl Into<String>, solids: Vec<Solid>) -> Result<Self> {
        let scene = Self {
            name: name.into(),
            solids,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solids.is_empty() {
            return Err(Error::Config(format!("scene `{}` has no solids", self.name)));
        }
        let (lo, hi) = self.bounds();
        if lo.iter().chain(&hi).any(|v| v.abs() > 1.0) {
            return Err(Error::Config(format!("scene `{}` leaves the [-1, 1]³ cube", self.name)));
        }
        Ok(())
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.solids {
            let (a, b) = s.bounds();
            for d in 0..3 {
                lo[d] = lo[d].min(a[d]);
                hi[d] = hi[d].max(b[d]);
            }
        }
        (lo, hi)
    }

    /// Lowest-index solid containing `p`.
    pub fn owner(&self, p: [f64; 3]) -> Option<usize> {
        self.solids.iter().position(|s| s.contains(p))
    }

    pub fn occupancy(&self, points: &[[f64; 3]]) -> Vec<Option<usize>> {
        points.par_iter().map(|&p| self.owner(p)).collect()
    }

    pub fn field(&self, p: [f64; 3]) -> f64 {
        self.solids.iter().map(|s| s.field(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest entry point; ties go to the lowest solid index.
    pub fn first_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, s) in self.solids.iter().enumerate() {
            if let Some((t, n)) = s.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        solid: i,
                        normal: [n.x, n.y, n.z],
                    });
                }
            }
        }
        best
    }

    /// Lambert-shaded color of a hit under the fixed light.
    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let lambert = Vector3::from(hit.normal).dot(&light_dir()).max(0.0);
        self.solids[hit.solid].color.map(|c| (c * (AMBIENT + DIFFUSE * lambert)).clamp(0.0, 1.0))
    }

    /// Render one view through pixel centers: shaded colors on black and the hit mask.
    pub fn render(&self, camera: &Camera) -> Result<(RgbRaster, MaskRaster)> {
        camera.validate()?;
        let (w, h) = (camera.width, camera.height);
        let rt = camera.rotation().transpose();
        let c = camera.center();
        let origin = [c.x, c.y, c.z];
        let px: Vec<(Option<Hit>, [f64; 3])> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                let dc = Vector3::new((x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0);
                let dw = (rt * dc).normalize();
                let hit = self.first_hit(origin, [dw.x, dw.y, dw.z]);
                let color = hit.as_ref().map_or([0.0; 3], |h| self.shade(h));
                (hit, color)
            })
            .collect();
        let rgb = Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.1).collect(),
        };
        let mask = Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.0.is_some()).collect(),
        };
        Ok((rgb, mask))
    }

    /// Closed reference surface by marching cubes on `res³` nodes over `[-1, 1]³`.
    pub fn gt_mesh(&self, res: usize) -> Mesh {
        marching_cubes(&ScalarGrid::sample(res, |p| self.field(p)), 0.0)
    }
}

pub fn camera_on_sphere(azimuth_deg: f64, elevation_deg: f64, distance: f64, size: usize) -> Result<Camera> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = [distance * el.cos() * az.cos(), distance * el.cos() * az.sin(), distance * el.sin()];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], FOCAL_128 * size as f64 / 128.0, size, size)
}

/// Three training views 120° apart in azimuth plus the held-out view at [`HELD_OUT_VIEW`].
pub fn standard_rig(size: usize) -> Result<Vec<Camera>> {
    let mut cams = TRAIN_AZIMUTHS_DEG
        .iter()
        .map(|&az| camera_on_sphere(az, TRAIN_ELEVATION_DEG, CAMERA_DISTANCE, size))
        .collect::<Result<Vec<_>>>()?;
    cams.push(camera_on_sphere(HELD_OUT_AZIMUTH_DEG, HELD_OUT_ELEVATION_DEG, CAMERA_DISTANCE, size)?);
    Ok(cams)
}

fn bx(center: [f64; 3], half: [f64; 3], color: [f64; 3]) -> Solid {
    Solid::new(Shape::Box { half }, center, color)
}

/// Names of the pinned scene catalog.
pub const SCENE_NAMES: [&str; 6] = ["sphere", "box", "two-boxes-L", "table", "dumbbell", "bowl"];

/// A scene of the pinned catalog by name.
pub fn scene(name: &str) -> Result<AnalyticScene> {
    let wood = [0.65, 0.45, 0.25];
    let solids = match name {
        "sphere" => vec![Solid::new(Shape::Sphere { radius: 0.6 }, [0.0; 3], [0.85, 0.3, 0.25])],
        "box" => vec![bx([0.0; 3], [0.55, 0.4, 0.3], [0.25, 0.5, 0.85])],
        "two-boxes-L" => vec![
            bx([0.0, 0.0, -0.35], [0.6, 0.25, 0.2], [0.9, 0.6, 0.2]),
            bx([-0.4, 0.0, 0.2], [0.2, 0.25, 0.35], [0.3, 0.75, 0.35]),
        ],
        "table" => {
            let mut s = vec![bx([0.0, 0.0, 0.3], [0.7, 0.5, 0.07], wood)];
            for (x, y) in [(0.55, 0.38), (-0.55, 0.38), (0.55, -0.38), (-0.55, -0.38)] {
                s.push(bx([x, y, -0.12], [0.07, 0.07, 0.35], [0.5, 0.32, 0.18]));
            }
            s
        }
        "dumbbell" => vec![
            Solid::new(Shape::Sphere { radius: 0.35 }, [-0.55, 0.0, 0.0], [0.8, 0.2, 0.2]),
            Solid::new(Shape::Sphere { radius: 0.35 }, [0.55, 0.0, 0.0], [0.2, 0.2, 0.8]),
            Solid::new(
                Shape::Cylinder {
                    radius: 0.12,
                    half_height: 0.45,
                },
                [0.0; 3],
                [0.7, 0.7, 0.7],
            )
            .rotated(Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2)),
        ],
        // Concave: a base disc with a ring of wall slabs.
        "bowl" => {
            let mut s = vec![Solid::new(
                Shape::Cylinder {
                    radius: 0.7,
                    half_height: 0.08,
                },
                [0.0, 0.0, -0.3],
                [0.85, 0.8, 0.7],
            )];
            for k in 0..8 {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                s.push(
                    Solid::new(
                        Shape::Box { half: [0.07, 0.3, 0.25] },
                        [0.62 * a.cos(), 0.62 * a.sin(), -0.05],
                        [0.85, 0.8, 0.7],
                    )
                    .rotated(Rotation3::from_axis_angle(&Vector3::z_axis(), a)),
                );
            }
            s
        }
        _ => {
            return Err(Error::UnknownScene {
                name: name.to_string(),
                available: SCENE_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    AnalyticScene::new(name, solids)
}

pub fn standard_scenes() -> Vec<AnalyticScene> {
    SCENE_NAMES.iter().map(|n| scene(n).expect("catalog scene")).collect()
}

/// Views of `scene` from the standard rig as a dataset in normalized space.
pub fn synth_dataset(scene: &AnalyticScene, size: usize) -> Result<Dataset> {
    let views = standard_rig(size)?
        .into_iter()
        .map(|camera| {
            let (image, mask) = scene.render(&camera)?;
            Ok(View { camera, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        views,
        meta: DatasetMeta {
            scene: Some(scene.name.clone()),
            bbox_min: None,
            bbox_max: None,
            suggested_held_out: vec![HELD_OUT_VIEW],
        },
    })
}

/// Write the dataset of a catalog scene plus `gt.ply` into `dir`.
pub fn write_scene(scene: &AnalyticScene, dir: &Path, size: usize, mesh_res: usize) -> Result<Dataset> {
    let ds = synth_dataset(scene, size)?;
    ds.save(dir)?;
    write_ply(&scene.gt_mesh(mesh_res), &dir.join("gt.ply"))?;
    Ok(ds)
}
