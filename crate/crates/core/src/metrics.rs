//! Mesh metrics (Chamfer, edge Chamfer, normal consistency) and image
//! metrics (PSNR, SSIM, mask IoU).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{FieldKernel, SelectionMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::extract::{extract_mesh, extract_parts, AssemblyCheckpoint, ISO};
use crate::mesh::{dot, norm, Mesh};
use crate::render::{render_view, MaskRaster, OpacityRule, Raster, RenderedView, RgbRaster};

/// Surface samples per mesh for Chamfer and normal consistency.
pub const DEFAULT_SAMPLES: usize = 10_000;
/// Neighborhood size for edge detection.
pub const EDGE_NEIGHBORS: usize = 10;
/// A sample is on an edge when two normals in its neighborhood have a dot below this.
pub const EDGE_DOT_THRESHOLD: f64 = 0.1;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MASK_THRESHOLD: f64 = 0.5;

/// Points on a surface with the unit normal of the triangle they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

/// `n` area-weighted uniform samples; identical for identical meshes and seeds.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<SurfaceSamples> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::EmptyMesh("surface sampling"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push(std::array::from_fn(|d| wa * a[d] + wb * b[d] + wc * c[d]));
        let nv = mesh.area_vector(t);
        let l = norm(nv);
        normals.push(nv.map(|v| v / l));
    }
    Ok(SurfaceSamples { points, normals })
}

/// Static 3-d tree over a point set.
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Point indices arranged so that every subtree is a contiguous range with
    /// its splitting point in the middle.
    order: Vec<usize>,
    axes: Vec<u8>,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot(d, d)
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::build(points, &mut order, &mut axes, 0);
        Self { points, order, axes }
    }

    fn build(points: &[[f64; 3]], idx: &mut [usize], axes: &mut [u8], offset: usize) {
        if idx.len() <= 1 {
            return;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for d in 0..3 {
                lo[d] = lo[d].min(points[i][d]);
                hi[d] = hi[d].max(points[i][d]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).expect("3 axes");
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        axes[offset + mid] = axis as u8;
        let (left, right) = idx.split_at_mut(mid);
        let (axes_l, axes_r) = axes.split_at_mut(offset + mid);
        Self::build(points, left, axes_l, offset);
        Self::build(points, &mut right[1..], &mut axes_r[1..], 0);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point; lowest index on ties.
    pub fn nearest(&self, q: [f64; 3]) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(q, 0, self.order.len(), &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn nearest_in(&self, q: [f64; 3], lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let d = dist2(q, self.points[i]);
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - self.points[i][axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_in(q, near.0, near.1, best);
        if delta * delta <= best.1 {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    /// Indices of the `k` nearest points, closest first.
    pub fn k_nearest(&self, q: [f64; 3], k: usize) -> Vec<usize> {
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_in(q, k, 0, self.order.len(), &mut found);
        found.into_iter().map(|(_, i)| i).collect()
    }

    fn knn_in(&self, q: [f64; 3], k: usize, lo: usize, hi: usize, found: &mut Vec<(f64, usize)>) {
        if lo >= hi || k == 0 {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let d = dist2(q, self.points[i]);
        if found.len() < k || (d, i) < found[found.len() - 1] {
            let at = found.partition_point(|&e| e < (d, i));
            found.insert(at, (d, i));
            found.truncate(k);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - self.points[i][axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_in(q, k, near.0, near.1, found);
        if found.len() < k || delta * delta <= found[found.len() - 1].0 {
            self.knn_in(q, k, far.0, far.1, found);
        }
    }
}

/// Mean squared distance from each point of `from` to its nearest point of `to`.
fn directed_mean_sq(from: &[[f64; 3]], to: &KdTree<'_>) -> f64 {
    let sum: f64 = from
        .par_iter()
        .map(|&p| to.nearest(p).expect("non-empty tree").1)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / from.len() as f64
}

/// Symmetric Chamfer distance between two point sets, ×1000.
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    1000.0 * 0.5 * (directed_mean_sq(a, &tb) + directed_mean_sq(b, &ta))
}

/// Symmetric Chamfer distance ×1000 over `n` surface samples per mesh.
pub fn chamfer(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<f64> {
    let sa = sample_surface(a, n, seed)?;
    let sb = sample_surface(b, n, seed)?;
    Ok(chamfer_points(&sa.points, &sb.points))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeChamfer {
    Value(f64),
    /// One of the meshes has no sharp-feature samples.
    NoEdges,
}

impl EdgeChamfer {
    pub fn value(self) -> Option<f64> {
        match self {
            EdgeChamfer::Value(v) => Some(v),
            EdgeChamfer::NoEdges => None,
        }
    }
}

/// Samples whose `k`-neighborhood holds two normals with dot below `threshold`.
pub fn edge_samples(s: &SurfaceSamples, k: usize, threshold: f64) -> Vec<[f64; 3]> {
    let tree = KdTree::new(&s.points);
    let flags: Vec<bool> = s
        .points
        .par_iter()
        .map(|&p| {
            let nb = tree.k_nearest(p, k);
            nb.iter().enumerate().any(|(x, &i)| {
                nb[x + 1..].iter().any(|&j| dot(s.normals[i], s.normals[j]) < threshold)
            })
        })
        .collect();
    s.points.iter().zip(flags).filter(|(_, f)| *f).map(|(p, _)| *p).collect()
}

/// Chamfer distance ×1000 restricted to edge samples.
pub fn edge_chamfer(a: &Mesh, b: &Mesh, n: usize, seed: u64, threshold: f64) -> Result<EdgeChamfer> {
    let ea = edge_samples(&sample_surface(a, n, seed)?, EDGE_NEIGHBORS, threshold);
    let eb = edge_samples(&sample_surface(b, n, seed)?, EDGE_NEIGHBORS, threshold);
    if ea.is_empty() || eb.is_empty() {
        return Ok(EdgeChamfer::NoEdges);
    }
    Ok(EdgeChamfer::Value(chamfer_points(&ea, &eb)))
}

fn directed_normal_agreement(from: &SurfaceSamples, to: &SurfaceSamples, tree: &KdTree<'_>) -> f64 {
    let sum: f64 = from
        .points
        .par_iter()
        .zip(&from.normals)
        .map(|(&p, &n)| {
            let (j, _) = tree.nearest(p).expect("non-empty tree");
            dot(n, to.normals[j]).abs()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / from.points.len() as f64
}

/// Mean `|n_a · n_b|` over nearest-sample pairs, averaged over both directions.
pub fn normal_consistency(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<f64> {
    let sa = sample_surface(a, n, seed)?;
    let sb = sample_surface(b, n, seed)?;
    let (ta, tb) = (KdTree::new(&sa.points), KdTree::new(&sb.points));
    Ok(0.5 * (directed_normal_agreement(&sa, &sb, &tb) + directed_normal_agreement(&sb, &sa, &ta)))
}

fn check_size<A, B>(op: &'static str, a: &Raster<A>, b: &Raster<B>) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{}×{}", b.width, b.height),
            format!("{}×{}", a.width, a.height),
        ))
    }
}

/// PSNR in dB for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &RgbRaster, truth: &RgbRaster) -> Result<f64> {
    check_size("psnr", rendered, truth)?;
    let n = rendered.data.len() * 3;
    let se: f64 = rendered
        .data
        .iter()
        .zip(&truth.data)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
        .sum();
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained windows of one channel.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let g = gaussian_window();
    let k = SSIM_WINDOW;
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let wt = g[dy] * g[dx];
                    let i = (oy + dy) * w + ox + dx;
                    mx += wt * x[i];
                    my += wt * y[i];
                    xx += wt * x[i] * x[i];
                    yy += wt * y[i] * y[i];
                    xy += wt * x[i] * y[i];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    }
    total / (ow * oh) as f64
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over RGB channels.
pub fn ssim(rendered: &RgbRaster, truth: &RgbRaster) -> Result<f64> {
    check_size("ssim", rendered, truth)?;
    let (w, h) = (rendered.width, rendered.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("at least {SSIM_WINDOW}×{SSIM_WINDOW}"), format!("{w}×{h}")));
    }
    let per_channel: Vec<f64> = (0..3)
        .into_par_iter()
        .map(|c| {
            let x: Vec<f64> = rendered.data.iter().map(|p| p[c]).collect();
            let y: Vec<f64> = truth.data.iter().map(|p| p[c]).collect();
            ssim_channel(&x, &y, w, h)
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / 3.0)
}

/// IoU of `rendered > 0.5` against the ground-truth mask; 1 when both are empty.
pub fn mask_iou(rendered: &Raster<f64>, truth: &MaskRaster) -> Result<f64> {
    check_size("mask_iou", rendered, truth)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&r, &t) in rendered.data.iter().zip(&truth.data) {
        let r = r > MASK_THRESHOLD;
        inter += (r && t) as usize;
        union += (r || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub held_out: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub mask_iou: f64,
}

/// Shape and image metrics of one fitted assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    /// ×1000, normalized space; absent without a ground-truth mesh.
    pub cd: Option<f64>,
    pub ecd: Option<EdgeChamfer>,
    pub nc: Option<f64>,
    pub parts: usize,
    pub views: Vec<ViewMetrics>,
    pub notices: Vec<String>,
}

/// Knobs of [`evaluate_assembly`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub resolution: usize,
    pub samples: usize,
    pub samples_per_ray: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            resolution: crate::extract::EVAL_RESOLUTION,
            samples: DEFAULT_SAMPLES,
            samples_per_ray: 96,
        }
    }
}

/// Everything an evaluation produces: the report, the extracted mesh and the
/// renders of the held-out views.
pub struct Evaluation {
    pub report: EvalReport,
    pub mesh: Mesh,
    pub held_out_renders: Vec<(usize, RenderedView)>,
}

/// Render every view, extract the surface and compare it with `gt` when given.
/// A ground-truth mesh in world coordinates is mapped through the dataset's
/// normalization before comparison.
pub fn evaluate_assembly(
    checkpoint: &AssemblyCheckpoint,
    dataset: &Dataset,
    gt: Option<&Mesh>,
    held_out: &[usize],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let bank = &checkpoint.bank;
    let colors = &checkpoint.colors;
    for &h in held_out {
        if h >= dataset.views.len() {
            return Err(Error::Validation(vec![format!(
                "held-out view {h} does not exist ({} views)",
                dataset.views.len()
            )]));
        }
    }
    let mut notices = Vec::new();
    let kernel = FieldKernel::new(bank);
    let mut views = Vec::new();
    let mut held_out_renders = Vec::new();
    for (i, view) in dataset.views.iter().enumerate() {
        let r = render_view(&kernel, bank.weights(), colors, &view.camera, OpacityRule::ExpHard, opts.samples_per_ray)?;
        let is_held = held_out.contains(&i);
        views.push(ViewMetrics {
            view: i,
            held_out: is_held,
            psnr: psnr(&r.rgb, &view.image)?,
            ssim: ssim(&r.rgb, &view.image)?,
            mask_iou: mask_iou(&r.mask, &view.mask)?,
        });
        if is_held {
            held_out_renders.push((i, r));
        }
    }
    let mesh = extract_mesh(bank, opts.resolution, ISO)?;
    let parts = if bank.mode() == SelectionMode::Binary {
        extract_parts(bank, colors, opts.resolution)?.parts.len()
    } else {
        notices.push("selection is not binarized; part count not computed".into());
        0
    };
    let (mut cd, mut ecd, mut nc) = (None, None, None);
    match gt {
        None => notices.push("no ground-truth mesh; CD, ECD and NC omitted".into()),
        Some(_) if mesh.is_empty() => notices.push("extracted surface is empty; CD, ECD and NC omitted".into()),
        Some(gt) => {
            let gt = match dataset.meta.normalization()? {
                Some((center, scale)) => {
                    gt.map_vertices(|v| std::array::from_fn(|d| scale * (v[d] - center[d])))
                }
                None => gt.clone(),
            };
            let seed = checkpoint.seed;
            cd = Some(chamfer(&mesh, &gt, opts.samples, seed)?);
            ecd = Some(edge_chamfer(&mesh, &gt, opts.samples, seed, EDGE_DOT_THRESHOLD)?);
            nc = Some(normal_consistency(&mesh, &gt, opts.samples, seed)?);
        }
    }
    Ok(Evaluation {
        report: EvalReport {
            seed: checkpoint.seed,
            config_hash: checkpoint.config_hash.clone(),
            cd,
            ecd,
            nc,
            parts,
            views,
            notices,
        },
        mesh,
        held_out_renders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{marching_cubes, ScalarGrid};
    use proptest::prelude::*;

    fn brute_nearest(pts: &[[f64; 3]], q: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, &p) in pts.iter().enumerate() {
            let d = dist2(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn brute_knn(pts: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, &p)| (dist2(q, p), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn rigid(mesh: &Mesh) -> Mesh {
        let r = nalgebra::Rotation3::from_euler_angles(0.4, 1.1, -0.7);
        mesh.map_vertices(|v| {
            let p = r * nalgebra::Vector3::new(v[0], v[1], v[2]);
            [p.x + 0.3, p.y - 0.2, p.z + 0.1]
        })
    }

    #[test]
    fn identical_meshes_have_zero_chamfer() {
        let m = Mesh::cuboid([-0.5; 3], [0.5, 0.2, 0.1]);
        assert!(chamfer(&m, &m, 2000, 9).unwrap().abs() < 1e-9);
    }

    #[test]
    fn parallel_squares_give_squared_offset() {
        let d = 0.2;
        let a = Mesh::square(0.0);
        let b = Mesh::square(d);
        let cd = chamfer(&a, &b, DEFAULT_SAMPLES, 1).unwrap();
        let expected = 1000.0 * d * d;
        assert!((cd - expected).abs() < 0.01 * expected, "{cd}");
        assert!((chamfer(&b, &a, DEFAULT_SAMPLES, 1).unwrap() - cd).abs() < 1e-12);
    }

    #[test]
    fn chamfer_is_rigid_invariant() {
        let a = Mesh::cuboid([-0.5; 3], [0.5, 0.2, 0.1]);
        let b = Mesh::cuboid([-0.4, -0.5, -0.5], [0.6, 0.1, 0.3]);
        let cd = chamfer(&a, &b, 3000, 5).unwrap();
        let moved = chamfer(&rigid(&a), &rigid(&b), 3000, 5).unwrap();
        assert!((cd - moved).abs() < 1e-6 * cd);
    }

    #[test]
    fn empty_mesh_is_an_error() {
        assert!(matches!(chamfer(&Mesh::default(), &Mesh::square(0.0), 10, 0), Err(Error::EmptyMesh(_))));
    }

    fn sphere_mesh() -> Mesh {
        marching_cubes(&ScalarGrid::sample(40, |p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 0.36), 0.0)
    }

    fn box_mesh(res: usize) -> Mesh {
        marching_cubes(&ScalarGrid::sample(res, |p| p[0].abs().max(p[1].abs()).max(p[2].abs()) - 0.5), 0.0)
    }

    #[test]
    fn edge_chamfer_cases() {
        let cube = Mesh::cuboid([-0.5; 3], [0.5; 3]);
        let same = edge_chamfer(&cube, &cube, DEFAULT_SAMPLES, 2, EDGE_DOT_THRESHOLD).unwrap();
        assert_eq!(same, EdgeChamfer::Value(0.0));
        let sphere = sphere_mesh();
        assert_eq!(
            edge_chamfer(&sphere, &sphere, DEFAULT_SAMPLES, 2, EDGE_DOT_THRESHOLD).unwrap(),
            EdgeChamfer::NoEdges
        );
        let bevel = edge_chamfer(&cube, &box_mesh(48), DEFAULT_SAMPLES, 2, EDGE_DOT_THRESHOLD).unwrap();
        let v = bevel.value().expect("beveled cube keeps edges");
        assert!(v.is_finite() && v > 0.0 && v < 1.0, "{v}");
    }

    #[test]
    fn edge_chamfer_matches_brute_force_pipeline() {
        let a = Mesh::cuboid([-0.5; 3], [0.5; 3]);
        let b = box_mesh(24);
        let n = 1500;
        let brute_edges = |s: &SurfaceSamples| -> Vec<[f64; 3]> {
            (0..s.points.len())
                .filter(|&i| {
                    let nb = brute_knn(&s.points, s.points[i], EDGE_NEIGHBORS);
                    nb.iter().any(|&x| nb.iter().any(|&y| dot(s.normals[x], s.normals[y]) < EDGE_DOT_THRESHOLD))
                })
                .map(|i| s.points[i])
                .collect()
        };
        let ea = brute_edges(&sample_surface(&a, n, 4).unwrap());
        let eb = brute_edges(&sample_surface(&b, n, 4).unwrap());
        let directed = |f: &[[f64; 3]], t: &[[f64; 3]]| f.iter().map(|&p| brute_nearest(t, p).1).sum::<f64>() / f.len() as f64;
        let want = 1000.0 * 0.5 * (directed(&ea, &eb) + directed(&eb, &ea));
        let got = edge_chamfer(&a, &b, n, 4, EDGE_DOT_THRESHOLD).unwrap().value().unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn normal_consistency_cases() {
        let sphere = sphere_mesh();
        assert!(normal_consistency(&sphere, &sphere, DEFAULT_SAMPLES, 3).unwrap() >= 0.999);
        let plane = Mesh::square(0.0);
        assert_eq!(normal_consistency(&plane, &plane, 1000, 3).unwrap(), 1.0);
        let wall = plane.map_vertices(|v| [0.0, v[1], v[0]]);
        assert_eq!(normal_consistency(&plane, &wall, 1000, 3).unwrap(), 0.0);
    }

    #[test]
    fn image_metric_closed_forms() {
        let zero = RgbRaster::filled(16, 16, [0.0; 3]);
        let half = RgbRaster::filled(16, 16, [0.5; 3]);
        assert_eq!(psnr(&zero, &zero).unwrap(), PSNR_CAP);
        assert!((psnr(&zero, &half).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((ssim(&half, &half).unwrap() - 1.0).abs() < 1e-12);
        // Constant images: only the luminance term differs from 1.
        let (a, b) = (0.2, 0.7);
        let c1 = 1e-4;
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&RgbRaster::filled(12, 14, [a; 3]), &RgbRaster::filled(12, 14, [b; 3])).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(ssim(&RgbRaster::filled(8, 8, [a; 3]), &RgbRaster::filled(8, 8, [a; 3])).is_err());
        assert!(psnr(&zero, &RgbRaster::filled(8, 16, [0.0; 3])).is_err());
    }

    #[test]
    fn mask_iou_cases() {
        let mut m = MaskRaster::filled(4, 4, false);
        let r = Raster::filled(4, 4, 0.0);
        assert_eq!(mask_iou(&r, &m).unwrap(), 1.0);
        m.set(0, 0, true);
        let mut r2 = r.clone();
        r2.set(3, 3, 0.9);
        assert_eq!(mask_iou(&r2, &m).unwrap(), 0.0);
        r2.set(0, 0, 0.51);
        assert_eq!(mask_iou(&r2, &m).unwrap(), 0.5);
        r2.set(3, 3, 0.5);
        assert_eq!(mask_iou(&r2, &m).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn kd_tree_matches_brute_force(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..200),
            q in (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5),
            k in 1usize..12,
        ) {
            let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let q = [q.0, q.1, q.2];
            let tree = KdTree::new(&pts);
            prop_assert_eq!(tree.nearest(q).unwrap(), brute_nearest(&pts, q));
            prop_assert_eq!(tree.k_nearest(q, k), brute_knn(&pts, q, k));
        }

        #[test]
        fn chamfer_is_symmetric_and_zero_on_self(
            lo in (-0.9f64..-0.1, -0.9f64..-0.1, -0.9f64..-0.1),
            hi in (0.1f64..0.9, 0.1f64..0.9, 0.1f64..0.9),
            seed in 0u64..100,
        ) {
            let a = Mesh::cuboid([lo.0, lo.1, lo.2], [hi.0, hi.1, hi.2]);
            let b = Mesh::cuboid([-0.5; 3], [0.5; 3]);
            prop_assert_eq!(chamfer(&a, &a, 500, seed).unwrap(), 0.0);
            prop_assert_eq!(chamfer(&a, &b, 500, seed).unwrap(), chamfer(&b, &a, 500, seed).unwrap());
        }
    }
}
