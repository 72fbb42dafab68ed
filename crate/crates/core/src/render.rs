//! Pinhole cameras, ray generation, silhouette-aware pixel sampling and
//! front-to-back volume accumulation of color and mask.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{clip01, min_active, soft_sum, FieldKernel};
use crate::error::{Error, Result};
use crate::optim::Phase;

/// Radius of the sphere bounding the normalized object cube `[-1,1]³`.
pub const BOUNDING_RADIUS: f64 = 1.732_050_807_568_877_2;

/// Scale applied to membership values in opacity, overlap and color weights.
pub const SHARPNESS: f64 = 10.0;

/// Row-major raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub type MaskRaster = Raster<bool>;
pub type RgbRaster = Raster<[f64; 3]>;

/// Pinhole camera; `world_to_camera` maps world points into an x-right,
/// y-down, z-forward frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("eye coincides with target".into()))?;
        let right = forward
            .cross(&Vector3::from(up))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: m,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Camera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("zero raster size".into()));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::Camera("non-finite pose".into()));
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Camera("pose bottom row must be (0,0,0,1)".into()));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() <= 0.0 {
            return Err(Error::Camera(format!(
                "rotation block is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Project a world point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let pc = self.rotation() * Vector3::from(p) + self.translation();
        (pc.z > 0.0).then(|| [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelSource {
    Random,
    Contour,
}

/// A sampled pixel location (continuous coordinates, pixel centers at `i + 0.5`)
/// with the ground truth it is compared against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    pub uv: [f64; 2],
    pub source: PixelSource,
    pub color: [f64; 3],
    pub mask: f64,
}

/// Binary morphological closing with a `size×size` square element.
/// Out-of-raster pixels never shrink the foreground during erosion.
pub fn close_mask(mask: &MaskRaster, size: usize) -> MaskRaster {
    let r = (size / 2) as isize;
    let (w, h) = (mask.width as isize, mask.height as isize);
    let window = |src: &MaskRaster, x: isize, y: isize, want: bool| -> bool {
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                if *src.get(nx as usize, ny as usize) == want {
                    return true;
                }
            }
        }
        false
    };
    let mut dilated = mask.clone();
    for y in 0..h {
        for x in 0..w {
            dilated.set(x as usize, y as usize, window(mask, x, y, true));
        }
    }
    let mut closed = dilated.clone();
    for y in 0..h {
        for x in 0..w {
            closed.set(x as usize, y as usize, !window(&dilated, x, y, false));
        }
    }
    closed
}

/// Foreground pixels with at least one background 4-neighbor; the raster
/// border counts as background.
pub fn contour_pixels(mask: &MaskRaster) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            let boundary = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !*mask.get(x - 1, y)
                || !*mask.get(x + 1, y)
                || !*mask.get(x, y - 1)
                || !*mask.get(x, y + 1);
            if boundary {
                out.push((x, y));
            }
        }
    }
    out
}

pub const CLOSING_KERNEL: usize = 5;

/// Precomputed contour of the closed mask of one view.
#[derive(Clone, Debug)]
pub struct SilhouetteSampler {
    width: usize,
    height: usize,
    contour: Vec<(usize, usize)>,
}

impl SilhouetteSampler {
    pub fn new(mask: &MaskRaster) -> Result<Self> {
        if !mask.data.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let closed = close_mask(mask, CLOSING_KERNEL);
        Ok(Self {
            width: mask.width,
            height: mask.height,
            contour: contour_pixels(&closed),
        })
    }

    pub fn contour(&self) -> &[(usize, usize)] {
        &self.contour
    }

    /// `n_random` uniform pixel centers plus `n_contour` contour pixels jittered
    /// by isotropic Gaussian noise and clamped to the raster.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        image: &RgbRaster,
        mask: &MaskRaster,
        n_random: usize,
        n_contour: usize,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Vec<PixelSample> {
        let lookup = |uv: [f64; 2], source| {
            let x = (uv[0].floor() as isize).clamp(0, self.width as isize - 1) as usize;
            let y = (uv[1].floor() as isize).clamp(0, self.height as isize - 1) as usize;
            let inside = *mask.get(x, y);
            PixelSample {
                uv,
                source,
                color: if inside { *image.get(x, y) } else { [0.0; 3] },
                mask: if inside { 1.0 } else { 0.0 },
            }
        };
        let mut out = Vec::with_capacity(n_random + n_contour);
        for _ in 0..n_random {
            let x = rng.random_range(0..self.width);
            let y = rng.random_range(0..self.height);
            out.push(lookup([x as f64 + 0.5, y as f64 + 0.5], PixelSource::Random));
        }
        let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("sigma > 0"));
        let (umax, vmax) = (self.width as f64 - 0.5, self.height as f64 - 0.5);
        for _ in 0..n_contour {
            let (x, y) = self.contour[rng.random_range(0..self.contour.len())];
            let mut uv = [x as f64 + 0.5, y as f64 + 0.5];
            if let Some(n) = &noise {
                uv[0] = (uv[0] + n.sample(rng)).clamp(0.5, umax);
                uv[1] = (uv[1] + n.sample(rng)).clamp(0.5, vmax);
            }
            out.push(lookup(uv, PixelSource::Contour));
        }
        out
    }
}

/// Silhouette-aware pixel sampling on one view.
pub fn sample_pixels<R: Rng + ?Sized>(
    image: &RgbRaster,
    mask: &MaskRaster,
    n_random: usize,
    n_contour: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<PixelSample>> {
    Ok(SilhouetteSampler::new(mask)?.sample(image, mask, n_random, n_contour, noise_sigma, rng))
}

/// World-space rays with per-ray `[near, far]` clipped to the bounding sphere.
/// Rays missing the sphere have `near == far == 0` and carry no samples.
#[derive(Clone, Debug, Default)]
pub struct RayBundle {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn hits(&self, i: usize) -> bool {
        self.far[i] > self.near[i]
    }
}

/// Intersection interval of a ray with the origin-centered sphere of `radius`.
pub fn sphere_interval(origin: [f64; 3], dir: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = dot(origin, dir);
    let c = dot(origin, origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = (-b - s, -b + s);
    (t1 > 0.0).then_some((t0.max(0.0), t1))
}

pub fn generate_rays(camera: &Camera, pixels: &[[f64; 2]]) -> Result<RayBundle> {
    camera.validate()?;
    let rt = camera.rotation().transpose();
    let center = camera.center();
    let origin = [center.x, center.y, center.z];
    let mut bundle = RayBundle::default();
    for &[u, v] in pixels {
        let dc = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
        let dw = (rt * dc).normalize();
        let dir = [dw.x, dw.y, dw.z];
        let (near, far) = sphere_interval(origin, dir, BOUNDING_RADIUS).unwrap_or((0.0, 0.0));
        bundle.origins.push(origin);
        bundle.directions.push(dir);
        bundle.near.push(near);
        bundle.far.push(far);
    }
    Ok(bundle)
}

/// Sample depths along each ray: `R` per ray, row-major.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub samples_per_ray: usize,
    pub depths: Vec<f64>,
}

impl RaySamples {
    pub fn ray_depths(&self, i: usize) -> &[f64] {
        &self.depths[i * self.samples_per_ray..(i + 1) * self.samples_per_ray]
    }

    /// World-space sample points of all hitting rays, ray-major.
    pub fn points(&self, bundle: &RayBundle) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..bundle.len() {
            if !bundle.hits(i) {
                continue;
            }
            for &t in self.ray_depths(i) {
                out.push(point_at(bundle.origins[i], bundle.directions[i], t));
            }
        }
        out
    }

    pub fn query_batch(&self, bundle: &RayBundle) -> Result<crate::assembly::QueryBatch> {
        crate::assembly::lift_points(&self.points(bundle))
    }
}

#[inline]
pub fn point_at(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

/// Bin midpoints in `[near, far]`, jittered uniformly within bins when `rng` is given.
pub fn sample_along_rays<R: Rng + ?Sized>(
    bundle: &RayBundle,
    samples_per_ray: usize,
    mut rng: Option<&mut R>,
) -> Result<RaySamples> {
    if samples_per_ray < 2 {
        return Err(Error::Config("need at least 2 samples per ray".into()));
    }
    let mut depths = Vec::with_capacity(bundle.len() * samples_per_ray);
    for i in 0..bundle.len() {
        let (near, far) = (bundle.near[i], bundle.far[i]);
        let step = (far - near) / samples_per_ray as f64;
        for k in 0..samples_per_ray {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            depths.push(near + (k as f64 + u) * step);
        }
    }
    Ok(RaySamples {
        samples_per_ray,
        depths,
    })
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Softmax weights over active convexes of `−10·O`; zero for inactive ones.
pub fn convex_weights(o_row: &[f64], active: &[bool], out: &mut [f64]) {
    let mut max_logit = f64::NEG_INFINITY;
    for (&o, &a) in o_row.iter().zip(active) {
        if a {
            max_logit = max_logit.max(-SHARPNESS * o);
        }
    }
    let mut sum = 0.0;
    for ((s, &o), &a) in out.iter_mut().zip(o_row).zip(active) {
        *s = if a { (-SHARPNESS * o - max_logit).exp() } else { 0.0 };
        sum += *s;
    }
    if sum > 0.0 {
        for s in out.iter_mut() {
            *s /= sum;
        }
    }
}

/// Per-point color as a softmax blend of the per-convex colors.
pub fn point_color(o_row: &[f64], colors: &[[f64; 3]], active: &[bool]) -> [f64; 3] {
    let mut s = vec![0.0; o_row.len()];
    convex_weights(o_row, active, &mut s);
    let mut rgb = [0.0; 3];
    for (sc, col) in s.iter().zip(colors) {
        for k in 0..3 {
            rgb[k] += sc * col[k];
        }
    }
    rgb
}

/// Color of the convex that owns the point under the hard union.
pub fn argmin_color(o_row: &[f64], colors: &[[f64; 3]], active: &[bool]) -> [f64; 3] {
    min_active(o_row, active).map_or([0.0; 3], |(_, c)| colors[c])
}

/// `Ĉ = Σ tᵢαᵢcᵢ`, `M̂ = Σ tᵢαᵢ` with `tᵢ = Π_{k<i}(1 − α_k)`.
pub fn accumulate(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut mask = 0.0;
    for (&a, c) in alphas.iter().zip(colors) {
        let wgt = trans * a;
        for k in 0..3 {
            rgb[k] += wgt * c[k];
        }
        mask += wgt;
        trans *= 1.0 - a;
    }
    (rgb, mask)
}

/// How occupancy becomes per-sample opacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpacityRule {
    /// `α = a⁺`
    SoftOccupancy,
    /// `α = exp(−10·a*)`, clamped to 1 where `a* < 0`
    ExpHard,
}

impl OpacityRule {
    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::One => OpacityRule::SoftOccupancy,
            Phase::Two | Phase::Three => OpacityRule::ExpHard,
        }
    }
}

#[inline]
pub fn exp_opacity(a_star: f64) -> f64 {
    (-SHARPNESS * a_star).exp().min(1.0)
}

pub fn opacity_for_phase(phase: Phase, a_star: &[f64], a_plus: &[f64]) -> Vec<f64> {
    match OpacityRule::for_phase(phase) {
        OpacityRule::SoftOccupancy => a_plus.to_vec(),
        OpacityRule::ExpHard => a_star.iter().map(|&a| exp_opacity(a)).collect(),
    }
}

/// Per-sample opacity of one point given its `O` row.
#[inline]
pub(crate) fn sample_opacity(rule: OpacityRule, o_row: &[f64], kernel: &FieldKernel, weights: &[f64]) -> f64 {
    match rule {
        OpacityRule::SoftOccupancy => clip01(soft_sum(o_row, weights)),
        OpacityRule::ExpHard => {
            min_active(o_row, &kernel.active).map_or(0.0, |(v, _)| exp_opacity(v))
        }
    }
}

/// Deterministic render of a full view (bin-midpoint samples).
pub struct RenderedView {
    pub rgb: RgbRaster,
    pub mask: Raster<f64>,
}

pub fn render_view(
    kernel: &FieldKernel,
    weights: &[f64],
    colors: &[[f64; 3]],
    camera: &Camera,
    rule: OpacityRule,
    samples_per_ray: usize,
) -> Result<RenderedView> {
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<[f64; 2]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| [x as f64 + 0.5, y as f64 + 0.5]))
        .collect();
    let bundle = generate_rays(camera, &pixels)?;
    let samples = sample_along_rays::<rand::rngs::ThreadRng>(&bundle, samples_per_ray, None)?;
    let results: Vec<([f64; 3], f64)> = (0..bundle.len())
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0.0; kernel.convexes()],
                    vec![0.0; samples_per_ray],
                    vec![[0.0; 3]; samples_per_ray],
                )
            },
            |(o, alphas, cols), i| {
                if !bundle.hits(i) {
                    return ([0.0; 3], 0.0);
                }
                for (k, &t) in samples.ray_depths(i).iter().enumerate() {
                    let x = point_at(bundle.origins[i], bundle.directions[i], t);
                    kernel.eval_o(x, o);
                    alphas[k] = sample_opacity(rule, o, kernel, weights);
                    cols[k] = point_color(o, colors, &kernel.active);
                }
                accumulate(alphas, cols)
            },
        )
        .collect();
    Ok(RenderedView {
        rgb: Raster {
            width: w,
            height: h,
            data: results.iter().map(|r| r.0).collect(),
        },
        mask: Raster {
            width: w,
            height: h,
            data: results.iter().map(|r| r.1).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_camera(f: f64, w: usize, h: usize) -> Camera {
        let mut m = Matrix4::identity();
        m[(2, 3)] = 5.0;
        Camera {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            world_to_camera: m,
            width: w,
            height: h,
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], 50.0, 64, 64).unwrap();
        let b = generate_rays(&cam, &[[cam.cx, cam.cy]]).unwrap();
        let axis = cam.rotation().row(2).transpose();
        let d = Vector3::from(b.directions[0]);
        assert!((d - axis).norm() < 1e-12);
    }

    #[test]
    fn symmetric_pixels_give_mirrored_directions() {
        let cam = identity_camera(10.0, 32, 32);
        let b = generate_rays(&cam, &[[cam.cx + 3.0, cam.cy], [cam.cx - 3.0, cam.cy]]).unwrap();
        let (a, c) = (b.directions[0], b.directions[1]);
        assert!((a[0] + c[0]).abs() < 1e-12);
        assert!((a[1] - c[1]).abs() < 1e-12 && (a[2] - c[2]).abs() < 1e-12);
    }

    #[test]
    fn unit_focal_offset_pixel_direction() {
        let mut cam = identity_camera(1.0, 4, 4);
        cam.world_to_camera = Matrix4::identity();
        let b = generate_rays(&cam, &[[cam.cx + 1.0, cam.cy]]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = b.directions[0];
        assert!((d[0] - s).abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] - s).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut cam = identity_camera(1.0, 4, 4);
        cam.world_to_camera[(0, 0)] = 0.0;
        assert!(matches!(generate_rays(&cam, &[[0.0, 0.0]]), Err(Error::Camera(_))));
        let mut cam = identity_camera(1.0, 4, 4);
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn midpoint_depths() {
        let bundle = RayBundle {
            origins: vec![[0.0; 3]],
            directions: vec![[0.0, 0.0, 1.0]],
            near: vec![0.0],
            far: vec![1.0],
        };
        let s = sample_along_rays::<ChaCha8Rng>(&bundle, 4, None).unwrap();
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(sample_along_rays::<ChaCha8Rng>(&bundle, 1, None).is_err());
    }

    #[test]
    fn stratified_depths_stay_in_bins_and_are_seeded() {
        let bundle = RayBundle {
            origins: vec![[0.0; 3]; 3],
            directions: vec![[0.0, 0.0, 1.0]; 3],
            near: vec![0.5, 1.0, 0.0],
            far: vec![2.0, 3.0, 0.1],
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_along_rays(&bundle, 8, Some(&mut r1)).unwrap();
        let b = sample_along_rays(&bundle, 8, Some(&mut r2)).unwrap();
        assert_eq!(a.depths, b.depths);
        for i in 0..3 {
            let step = (bundle.far[i] - bundle.near[i]) / 8.0;
            let d = a.ray_depths(i);
            for (k, &t) in d.iter().enumerate() {
                let lo = bundle.near[i] + k as f64 * step;
                assert!(t >= lo && t < lo + step);
            }
            assert!(d.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn color_examples() {
        let active = [true, true, true];
        let red = [1.0, 0.0, 0.0];
        let green = [0.0, 1.0, 0.0];
        let blue = [0.0, 0.0, 1.0];
        let c = point_color(&[0.0, 5.0, 6.0], &[red, green, blue], &active);
        assert!((c[0] - 1.0).abs() < 1e-4 && c[1] < 1e-4 && c[2] < 1e-4);
        let c = point_color(&[0.3, 0.3], &[[0.0; 3], [1.0; 3]], &[true, true]);
        assert!(c.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let c = point_color(&[0.0, 0.0693], &[red, blue], &[true, true]);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-4 && (c[2] - 1.0 / 3.0).abs() < 1e-4);
        let c = argmin_color(&[0.2, 0.0, 0.1], &[red, green, blue], &active);
        assert_eq!(c, green);
    }

    #[test]
    fn accumulate_examples() {
        let (c, m) = accumulate(&[1.0, 0.7], &[[0.2, 0.3, 0.4], [1.0, 1.0, 1.0]]);
        assert_eq!((c, m), ([0.2, 0.3, 0.4], 1.0));
        let (c, m) = accumulate(&[0.0, 0.0], &[[1.0; 3], [1.0; 3]]);
        assert_eq!((c, m), ([0.0; 3], 0.0));
        let (c, m) = accumulate(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(c, [0.5, 0.0, 0.25]);
        assert_eq!(m, 0.75);
    }

    #[test]
    fn mask_equals_one_minus_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let alphas: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let (_, m) = accumulate(&alphas, &vec![[0.0; 3]; n]);
            let prod: f64 = alphas.iter().map(|a| 1.0 - a).product();
            assert!((m - (1.0 - prod)).abs() < 1e-12);
            assert!(m <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(opacity_for_phase(Phase::Two, &[0.0], &[0.0]), vec![1.0]);
        assert_eq!(opacity_for_phase(Phase::One, &[0.0], &[0.3]), vec![0.3]);
        let a = opacity_for_phase(Phase::Three, &[0.23], &[0.0])[0];
        assert!((a - 0.100_258_843_722_803_5).abs() < 1e-12);
    }

    fn disk_mask(size: usize, radius: f64) -> MaskRaster {
        let c = size as f64 / 2.0;
        let mut m = Raster::filled(size, size, false);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                m.set(x, y, dx.hypot(dy) <= radius);
            }
        }
        m
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = Raster::filled(8, 8, false);
        let img = Raster::filled(8, 8, [0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pixels(&img, &m, 4, 4, 2.0, &mut rng),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn full_frame_contour_hugs_border() {
        let m = Raster::filled(20, 16, true);
        let img = Raster::filled(20, 16, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_pixels(&img, &m, 0, 500, 2.0, &mut rng).unwrap();
        for p in &s {
            let d = p.uv[0].min(20.0 - p.uv[0]).min(p.uv[1]).min(16.0 - p.uv[1]);
            assert!(d <= 0.5 + 4.0 * 2.0 * 2.0, "{:?}", p.uv);
        }
    }

    #[test]
    fn zero_noise_samples_lie_on_contour() {
        let m = disk_mask(32, 9.0);
        let img = Raster::filled(32, 32, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sampler = SilhouetteSampler::new(&m).unwrap();
        let contour: std::collections::HashSet<_> = sampler.contour().iter().copied().collect();
        let s = sampler.sample(&img, &m, 10, 200, 0.0, &mut rng);
        assert_eq!(s.len(), 210);
        for p in s.iter().filter(|p| p.source == PixelSource::Contour) {
            assert_eq!(p.uv[0].fract(), 0.5);
            let key = (p.uv[0] as usize, p.uv[1] as usize);
            assert!(contour.contains(&key));
        }
    }

    #[test]
    fn contour_samples_concentrate_on_disk_boundary() {
        let (size, radius, sigma) = (128, 30.0, 2.0);
        let m = disk_mask(size, radius);
        let img = Raster::filled(size, size, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_pixels(&img, &m, 0, 2000, sigma, &mut rng).unwrap();
        let bound = 3.0 * sigma + (CLOSING_KERNEL / 2) as f64;
        let c = size as f64 / 2.0;
        let near = s
            .iter()
            .filter(|p| ((p.uv[0] - c).hypot(p.uv[1] - c) - radius).abs() <= bound)
            .count();
        assert!(near as f64 >= 0.95 * s.len() as f64, "{near}");
    }

    #[test]
    fn closing_fills_small_gaps() {
        let mut m = Raster::filled(12, 12, true);
        m.set(5, 5, false);
        m.set(6, 5, false);
        let closed = close_mask(&m, 5);
        assert!(closed.data.iter().all(|&v| v));
    }
}
