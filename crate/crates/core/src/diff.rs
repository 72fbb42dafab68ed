//! Reverse-mode gradients of the fitting losses.
//!
//! The graph is static per phase (lift → D → O → union → opacity →
//! accumulation → loss), so every node has a hand-written adjoint. Rays are
//! processed in a fixed number of chunks whose partial gradients are summed in
//! chunk order, which keeps results bitwise reproducible under any thread
//! count.
//!
//! Subgradient conventions: `ReLU′(0) = 0`, `clip′ = 0` on both boundaries,
//! `|x|′(0) = 0`, and the hard minimum routes to its lowest-index argmin.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    clip01, lift, min_active, FieldKernel, PrimitiveBank, SelectionRows, PARAM_COLS,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::render::{
    convex_weights, exp_opacity, generate_rays, point_at, sample_along_rays, OpacityRule,
    PixelSample, RayBundle, RaySamples, SHARPNESS,
};

/// Inside test for the overlap loss support set `Ω`.
pub const INSIDE_THRESHOLD: f64 = 0.01;
/// Floor of the overlap penalty `max(h, 1.9)`.
pub const OVERLAP_FLOOR: f64 = 1.9;

/// Named stages of the computation graph, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Node {
    Abs,
    Distance,
    Intersect,
    UnionHard,
    UnionSoft,
    Opacity,
    Color,
    Accumulate,
    Photo,
    SelectionReg,
    WeightReg,
    Overlap,
}

impl Node {
    pub const ALL: [Node; 12] = [
        Node::Abs,
        Node::Distance,
        Node::Intersect,
        Node::UnionHard,
        Node::UnionSoft,
        Node::Opacity,
        Node::Color,
        Node::Accumulate,
        Node::Photo,
        Node::SelectionReg,
        Node::WeightReg,
        Node::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Node::Abs => "abs",
            Node::Distance => "distance",
            Node::Intersect => "intersect",
            Node::UnionHard => "union-hard",
            Node::UnionSoft => "union-soft",
            Node::Opacity => "opacity",
            Node::Color => "color",
            Node::Accumulate => "accumulate",
            Node::Photo => "photo",
            Node::SelectionReg => "selection-reg",
            Node::WeightReg => "weight-reg",
            Node::Overlap => "overlap",
        }
    }

    pub fn parse(s: &str) -> Option<Node> {
        Node::ALL.into_iter().find(|n| n.name() == s)
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deliberate corruption of one adjoint, for exercising the checkers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultKind {
    Scale(f64),
    NaN,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub node: Node,
    pub kind: FaultKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FaultHook(pub Option<AdjointFault>);

impl FaultHook {
    #[inline]
    pub fn apply(&self, node: Node, values: &mut [f64]) {
        if let Some(f) = self.0 {
            if f.node == node {
                match f.kind {
                    FaultKind::Scale(s) => values.iter_mut().for_each(|v| *v *= s),
                    FaultKind::NaN => {
                        if let Some(v) = values.first_mut() {
                            *v = f64::NAN;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn check(node: Node, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { node })
    }
}

/// Which variable groups move in the current phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub params: bool,
    pub selection: bool,
    pub weights: bool,
    pub colors: bool,
}

/// Which loss terms are summed in the current phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub color: bool,
    pub mask: bool,
    pub selection_reg: bool,
    pub weight_reg: bool,
    pub overlap: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub opacity: OpacityRule,
    pub terms: LossTerms,
    pub trainable: Trainable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo_color: f64,
    pub photo_mask: f64,
    pub selection_reg: f64,
    pub weight_reg: f64,
    pub overlap: f64,
    pub total: f64,
    /// Size of the overlap support set `Ω`.
    pub inside_points: usize,
}

/// Gradients for every learnable group. Frozen groups are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_params: Matrix,
    pub d_selection: Matrix,
    pub d_weights: Vec<f64>,
    pub d_colors: Vec<[f64; 3]>,
}

impl GradientBundle {
    pub fn zeros(primitives: usize, convexes: usize) -> Self {
        Self {
            d_params: Matrix::zeros(primitives, PARAM_COLS),
            d_selection: Matrix::zeros(primitives, convexes),
            d_weights: vec![0.0; convexes],
            d_colors: vec![[0.0; 3]; convexes],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_params.find_non_finite().is_none()
            && self.d_selection.find_non_finite().is_none()
            && self.d_weights.iter().all(|v| v.is_finite())
            && self.d_colors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Rays, their sample depths and the ground truth of each pixel.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub bundle: RayBundle,
    pub samples: RaySamples,
    pub target_rgb: Vec<[f64; 3]>,
    pub target_mask: Vec<f64>,
}

impl RayBatch {
    pub fn from_pixels<R: Rng + ?Sized>(
        camera: &crate::render::Camera,
        pixels: &[PixelSample],
        samples_per_ray: usize,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        let uv: Vec<[f64; 2]> = pixels.iter().map(|p| p.uv).collect();
        let bundle = generate_rays(camera, &uv)?;
        let samples = sample_along_rays(&bundle, samples_per_ray, rng)?;
        Ok(Self {
            bundle,
            samples,
            target_rgb: pixels.iter().map(|p| p.color).collect(),
            target_mask: pixels.iter().map(|p| p.mask).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bundle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundle.is_empty()
    }

    /// Append another batch with the same samples-per-ray.
    pub fn extend(&mut self, other: RayBatch) -> Result<()> {
        if other.samples.samples_per_ray != self.samples.samples_per_ray {
            return Err(Error::shape(
                "RayBatch::extend",
                self.samples.samples_per_ray,
                other.samples.samples_per_ray,
            ));
        }
        let b = &mut self.bundle;
        b.origins.extend(other.bundle.origins);
        b.directions.extend(other.bundle.directions);
        b.near.extend(other.bundle.near);
        b.far.extend(other.bundle.far);
        self.samples.depths.extend(other.samples.depths);
        self.target_rgb.extend(other.target_rgb);
        self.target_mask.extend(other.target_mask);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Node adjoints. Each writes the adjoint of its inputs given the adjoint of
// its output.
// ---------------------------------------------------------------------------

/// Adjoint of front-to-back accumulation. `g_alpha` and `g_colors` are overwritten.
pub fn accumulate_backward(
    alphas: &[f64],
    colors: &[[f64; 3]],
    g_rgb: [f64; 3],
    g_mask: f64,
    g_alpha: &mut [f64],
    g_colors: &mut [[f64; 3]],
) {
    let mut trans = 1.0;
    for (g, &a) in g_alpha.iter_mut().zip(alphas) {
        *g = trans;
        trans *= 1.0 - a;
    }
    // suffix_k = Σ_{j>k} G_j α_j Π_{k<m<j} (1 − α_m)
    let mut suffix = 0.0;
    for k in (0..alphas.len()).rev() {
        let t = g_alpha[k];
        let a = alphas[k];
        let c = colors[k];
        let gk = g_rgb[0] * c[0] + g_rgb[1] * c[1] + g_rgb[2] * c[2] + g_mask;
        g_alpha[k] = t * (gk - suffix);
        let w = t * a;
        g_colors[k] = [w * g_rgb[0], w * g_rgb[1], w * g_rgb[2]];
        suffix = gk * a + (1.0 - a) * suffix;
    }
}

/// Adjoint of the softmax color blend given its weights `s`.
/// `g_o` is overwritten; `g_table` is accumulated.
pub fn color_backward(
    s: &[f64],
    table: &[[f64; 3]],
    g_rgb: [f64; 3],
    g_o: &mut [f64],
    g_table: &mut [[f64; 3]],
) {
    let mut mean = 0.0;
    for (c, &sc) in s.iter().enumerate() {
        let col = table[c];
        let gs = col[0] * g_rgb[0] + col[1] * g_rgb[1] + col[2] * g_rgb[2];
        g_o[c] = gs;
        mean += sc * gs;
    }
    for (c, &sc) in s.iter().enumerate() {
        g_o[c] = -SHARPNESS * sc * (g_o[c] - mean);
        if sc != 0.0 {
            for k in 0..3 {
                g_table[c][k] += sc * g_rgb[k];
            }
        }
    }
}

/// Adjoint of `a⁺ = clip(Σ w_c clip(1 − O_c))`. Outputs are overwritten.
pub fn union_soft_backward(o_row: &[f64], w: &[f64], g_out: f64, g_o: &mut [f64], g_w: &mut [f64]) {
    let u: f64 = o_row
        .iter()
        .zip(w)
        .map(|(&o, &wc)| wc * clip01(1.0 - o))
        .sum();
    let live = u > 0.0 && u < 1.0;
    for c in 0..o_row.len() {
        let inner = 1.0 - o_row[c];
        if live {
            g_w[c] = g_out * clip01(inner);
            g_o[c] = if inner > 0.0 && inner < 1.0 { -g_out * w[c] } else { 0.0 };
        } else {
            g_w[c] = 0.0;
            g_o[c] = 0.0;
        }
    }
}

/// Adjoint of `α = min(1, exp(−10·a))` with respect to `a`.
#[inline]
pub fn exp_opacity_backward(a: f64, g_alpha: f64) -> f64 {
    if a > 0.0 {
        -SHARPNESS * (-SHARPNESS * a).exp() * g_alpha
    } else {
        0.0
    }
}

/// Adjoint of the hard minimum: everything goes to the argmin. `g_o` is overwritten.
#[inline]
pub fn min_route_backward(argmin: usize, g_min: f64, g_o: &mut [f64]) {
    g_o.fill(0.0);
    g_o[argmin] = g_min;
}

/// Adjoint of `max(h, 1.9)` with `h = Σ_active exp(−10·O_c)`.
/// Returns false (and leaves `g_o` zeroed) when the floor is active.
pub fn overlap_backward(o_row: &[f64], active: &[bool], g_out: f64, g_o: &mut [f64]) -> bool {
    g_o.fill(0.0);
    let h: f64 = o_row
        .iter()
        .zip(active)
        .filter(|(_, &on)| on)
        .map(|(&v, _)| (-SHARPNESS * v).exp())
        .sum();
    if h <= OVERLAP_FLOOR {
        return false;
    }
    for c in 0..o_row.len() {
        if active[c] {
            g_o[c] = -SHARPNESS * (-SHARPNESS * o_row[c]).exp() * g_out;
        }
    }
    true
}

/// Seeds of the photometric loss for one pixel: `[∂/∂Ĉ (3), ∂/∂M̂]`.
pub fn photo_backward(
    rgb: [f64; 3],
    mask: f64,
    target_rgb: [f64; 3],
    target_mask: f64,
    inv_batch: f64,
    terms: LossTerms,
) -> [f64; 4] {
    let mut g = [0.0; 4];
    if terms.color {
        for k in 0..3 {
            g[k] = 2.0 * (rgb[k] - target_rgb[k]) * inv_batch;
        }
    }
    if terms.mask {
        g[3] = 2.0 * (mask - target_mask) * inv_batch;
    }
    g
}

/// Adjoint of `O = ReLU(D)·T` for one point. `g_relu` is overwritten with the
/// adjoint of `D` (ReLU already applied); `g_t` (row-major P×C) is accumulated.
pub fn intersect_backward(
    d_row: &[f64],
    rows: &SelectionRowsRef<'_>,
    g_o: &[f64],
    g_relu: &mut [f64],
    g_t: Option<&mut [f64]>,
) {
    let convexes = g_o.len();
    for (p, &d) in d_row.iter().enumerate() {
        g_relu[p] = if d > 0.0 {
            rows.row(p).iter().map(|&(c, t)| t * g_o[c]).sum()
        } else {
            0.0
        };
    }
    if let Some(g_t) = g_t {
        for (p, &d) in d_row.iter().enumerate() {
            if d > 0.0 {
                let out = &mut g_t[p * convexes..(p + 1) * convexes];
                for (gt, &go) in out.iter_mut().zip(g_o) {
                    *gt += d * go;
                }
            }
        }
    }
}

/// Adjoint of `D_p = q·|coef_p|` with respect to the evaluated coefficients,
/// accumulated into `g_abs` (row-major P×7).
pub fn distance_backward(q: &[f64; PARAM_COLS], g_d: &[f64], g_abs: &mut [f64]) {
    for (p, &g) in g_d.iter().enumerate() {
        if g != 0.0 {
            let out = &mut g_abs[p * PARAM_COLS..(p + 1) * PARAM_COLS];
            for (o, &qj) in out.iter_mut().zip(q) {
                *o += g * qj;
            }
        }
    }
}

/// Chain through `|a|, |b|, |c|` with `sign(0) = 0`.
pub fn abs_backward(params: &Matrix, g_abs: &Matrix) -> Matrix {
    let mut out = g_abs.clone();
    for p in 0..params.rows() {
        for j in 0..3 {
            let v = params.get(p, j);
            let s = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            out.set(p, j, s * g_abs.get(p, j));
        }
    }
    out
}

/// Borrowed sparse rows of `T`.
pub struct SelectionRowsRef<'a>(pub(crate) &'a SelectionRows);

impl SelectionRowsRef<'_> {
    #[inline]
    fn row(&self, p: usize) -> &[(usize, f64)] {
        &self.0.rows[p]
    }
}

impl<'a> SelectionRowsRef<'a> {
    pub fn from_kernel(kernel: &'a FieldKernel) -> Self {
        Self(&kernel.rows)
    }
}

/// `Σ max(−T, 0) + max(T − 1, 0)` and its gradient.
pub fn selection_penalty(t: &Matrix) -> (f64, Matrix) {
    let mut g = Matrix::zeros(t.rows(), t.cols());
    let mut loss = 0.0;
    for (v, gv) in t.as_slice().iter().zip(g.as_mut_slice()) {
        if *v < 0.0 {
            loss += -v;
            *gv = -1.0;
        } else if *v > 1.0 {
            loss += v - 1.0;
            *gv = 1.0;
        }
    }
    (loss, g)
}

/// `Σ |w − 1|` and its gradient.
pub fn weight_penalty(w: &[f64]) -> (f64, Vec<f64>) {
    let loss = w.iter().map(|v| (v - 1.0).abs()).sum();
    let g = w
        .iter()
        .map(|&v| {
            if v > 1.0 {
                1.0
            } else if v < 1.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (loss, g)
}

// ---------------------------------------------------------------------------
// Fused kernels
// ---------------------------------------------------------------------------

/// Fixed chunk count for deterministic reductions.
pub const REDUCTION_CHUNKS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineOptions {
    pub hook: FaultHook,
    pub check_finite: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            hook: FaultHook::default(),
            check_finite: true,
        }
    }
}

struct Ctx<'a> {
    kernel: FieldKernel,
    weights: &'a [f64],
    colors: &'a [[f64; 3]],
    spec: LossSpec,
    opts: EngineOptions,
}

impl Ctx<'_> {
    fn primitives(&self) -> usize {
        self.kernel.primitives()
    }
    fn convexes(&self) -> usize {
        self.kernel.convexes()
    }
    #[inline]
    fn check(&self, node: Node, v: &[f64]) -> Result<()> {
        if self.opts.check_finite {
            check(node, v)
        } else {
            Ok(())
        }
    }
}

#[derive(Clone)]
struct Partial {
    g_abs: Vec<f64>,
    g_t: Vec<f64>,
    g_w: Vec<f64>,
    g_colors: Vec<[f64; 3]>,
}

impl Partial {
    fn new(p: usize, c: usize, with_t: bool) -> Self {
        Self {
            g_abs: vec![0.0; p * PARAM_COLS],
            g_t: if with_t { vec![0.0; p * c] } else { Vec::new() },
            g_w: vec![0.0; c],
            g_colors: vec![[0.0; 3]; c],
        }
    }

    fn add(&mut self, o: &Partial) {
        for (a, b) in self.g_abs.iter_mut().zip(&o.g_abs) {
            *a += b;
        }
        for (a, b) in self.g_t.iter_mut().zip(&o.g_t) {
            *a += b;
        }
        for (a, b) in self.g_w.iter_mut().zip(&o.g_w) {
            *a += b;
        }
        for (a, b) in self.g_colors.iter_mut().zip(&o.g_colors) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
}

struct RayScratch {
    q: Vec<[f64; PARAM_COLS]>,
    d: Vec<f64>,
    o: Vec<f64>,
    s: Vec<f64>,
    alpha: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    g_alpha: Vec<f64>,
    g_rgb: Vec<[f64; 3]>,
    g_o: Vec<f64>,
    g_o_tmp: Vec<f64>,
    g_w_tmp: Vec<f64>,
    g_relu: Vec<f64>,
}

impl RayScratch {
    fn new(r: usize, p: usize, c: usize) -> Self {
        Self {
            q: vec![[0.0; PARAM_COLS]; r],
            d: vec![0.0; r * p],
            o: vec![0.0; r * c],
            s: vec![0.0; r * c],
            alpha: vec![0.0; r],
            rgb: vec![[0.0; 3]; r],
            g_alpha: vec![0.0; r],
            g_rgb: vec![[0.0; 3]; r],
            g_o: vec![0.0; c],
            g_o_tmp: vec![0.0; c],
            g_w_tmp: vec![0.0; c],
            g_relu: vec![0.0; p],
        }
    }
}

fn ray_forward(ctx: &Ctx, batch: &RayBatch, i: usize, sc: &mut RayScratch) -> ([f64; 3], f64) {
    if !batch.bundle.hits(i) {
        return ([0.0; 3], 0.0);
    }
    let (p_n, c_n) = (ctx.primitives(), ctx.convexes());
    let origin = batch.bundle.origins[i];
    let dir = batch.bundle.directions[i];
    let color_on = ctx.spec.terms.color;
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut mask = 0.0;
    for (k, &t) in batch.samples.ray_depths(i).iter().enumerate() {
        let x = point_at(origin, dir, t);
        sc.q[k] = lift(x);
        let d = &mut sc.d[k * p_n..(k + 1) * p_n];
        let o = &mut sc.o[k * c_n..(k + 1) * c_n];
        ctx.kernel.eval(x, d, o);
        let alpha = match ctx.spec.opacity {
            OpacityRule::SoftOccupancy => clip01(crate::assembly::soft_sum(o, ctx.weights)),
            OpacityRule::ExpHard => {
                min_active(o, &ctx.kernel.active).map_or(0.0, |(a, _)| exp_opacity(a))
            }
        };
        sc.alpha[k] = alpha;
        if color_on {
            let s = &mut sc.s[k * c_n..(k + 1) * c_n];
            convex_weights(o, &ctx.kernel.active, s);
            let mut col = [0.0; 3];
            for (sc_c, tc) in s.iter().zip(ctx.colors) {
                for j in 0..3 {
                    col[j] += sc_c * tc[j];
                }
            }
            sc.rgb[k] = col;
        } else {
            sc.rgb[k] = [0.0; 3];
        }
        let wgt = trans * alpha;
        for j in 0..3 {
            rgb[j] += wgt * sc.rgb[k][j];
        }
        mask += wgt;
        trans *= 1.0 - alpha;
    }
    (rgb, mask)
}

fn ray_backward(
    ctx: &Ctx,
    batch: &RayBatch,
    i: usize,
    sc: &mut RayScratch,
    mut seed: [f64; 4],
    acc: &mut Partial,
) -> Result<()> {
    if !batch.bundle.hits(i) {
        return Ok(());
    }
    let hook = ctx.opts.hook;
    hook.apply(Node::Photo, &mut seed);
    ctx.check(Node::Photo, &seed)?;
    let g_pix_rgb = [seed[0], seed[1], seed[2]];
    let g_pix_mask = seed[3];

    let r = batch.samples.samples_per_ray;
    let (p_n, c_n) = (ctx.primitives(), ctx.convexes());
    accumulate_backward(
        &sc.alpha[..r],
        &sc.rgb[..r],
        g_pix_rgb,
        g_pix_mask,
        &mut sc.g_alpha[..r],
        &mut sc.g_rgb[..r],
    );
    hook.apply(Node::Accumulate, &mut sc.g_alpha[..r]);
    ctx.check(Node::Accumulate, &sc.g_alpha[..r])?;

    let color_on = ctx.spec.terms.color;
    let train_t = ctx.spec.trainable.selection;
    let train_w = ctx.spec.trainable.weights;
    let rows = SelectionRowsRef(&ctx.kernel.rows);
    for k in 0..r {
        let g_a = sc.g_alpha[k];
        let g_c = sc.g_rgb[k];
        let color_live = color_on && g_c.iter().any(|&v| v != 0.0);
        if g_a == 0.0 && !color_live {
            continue;
        }
        let o = &sc.o[k * c_n..(k + 1) * c_n];
        sc.g_o.fill(0.0);
        if g_a != 0.0 {
            match ctx.spec.opacity {
                OpacityRule::SoftOccupancy => {
                    union_soft_backward(o, ctx.weights, g_a, &mut sc.g_o_tmp, &mut sc.g_w_tmp);
                    hook.apply(Node::UnionSoft, &mut sc.g_o_tmp);
                    hook.apply(Node::UnionSoft, &mut sc.g_w_tmp);
                    ctx.check(Node::UnionSoft, &sc.g_o_tmp)?;
                    if train_w {
                        for (a, b) in acc.g_w.iter_mut().zip(&sc.g_w_tmp) {
                            *a += b;
                        }
                    }
                }
                OpacityRule::ExpHard => match min_active(o, &ctx.kernel.active) {
                    Some((a, idx)) => {
                        let mut g_min = [exp_opacity_backward(a, g_a)];
                        hook.apply(Node::Opacity, &mut g_min);
                        ctx.check(Node::Opacity, &g_min)?;
                        min_route_backward(idx, g_min[0], &mut sc.g_o_tmp);
                        hook.apply(Node::UnionHard, &mut sc.g_o_tmp);
                        ctx.check(Node::UnionHard, &sc.g_o_tmp)?;
                    }
                    None => sc.g_o_tmp.fill(0.0),
                },
            }
            for (a, b) in sc.g_o.iter_mut().zip(&sc.g_o_tmp) {
                *a += b;
            }
        }
        if color_live {
            let s = &sc.s[k * c_n..(k + 1) * c_n];
            color_backward(s, ctx.colors, g_c, &mut sc.g_o_tmp, &mut acc.g_colors);
            hook.apply(Node::Color, &mut sc.g_o_tmp);
            ctx.check(Node::Color, &sc.g_o_tmp)?;
            for (a, b) in sc.g_o.iter_mut().zip(&sc.g_o_tmp) {
                *a += b;
            }
        }
        if sc.g_o.iter().all(|&v| v == 0.0) {
            continue;
        }
        let d = &sc.d[k * p_n..(k + 1) * p_n];
        let g_t = if train_t { Some(acc.g_t.as_mut_slice()) } else { None };
        intersect_backward(d, &rows, &sc.g_o, &mut sc.g_relu, g_t);
        hook.apply(Node::Intersect, &mut sc.g_relu);
        ctx.check(Node::Intersect, &sc.g_relu)?;
        distance_backward(&sc.q[k], &sc.g_relu, &mut acc.g_abs);
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct PhotoSums {
    color: f64,
    mask: f64,
}

fn photo_pass(
    ctx: &Ctx,
    batch: &RayBatch,
    with_grad: bool,
) -> Result<(PhotoSums, Option<Partial>)> {
    let n = batch.len();
    if n == 0 {
        return Ok((PhotoSums::default(), None));
    }
    let inv_b = 1.0 / n as f64;
    let r = batch.samples.samples_per_ray;
    let (p_n, c_n) = (ctx.primitives(), ctx.convexes());
    let chunk = n.div_ceil(REDUCTION_CHUNKS);
    let parts: Vec<Result<(PhotoSums, Option<Partial>)>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let mut sc = RayScratch::new(r, p_n, c_n);
            let mut sums = PhotoSums::default();
            let mut part = with_grad.then(|| Partial::new(p_n, c_n, ctx.spec.trainable.selection));
            for &i in idx {
                let (rgb, mask) = ray_forward(ctx, batch, i, &mut sc);
                let gt = batch.target_rgb[i];
                let diff = [rgb[0] - gt[0], rgb[1] - gt[1], rgb[2] - gt[2]];
                let dm = mask - batch.target_mask[i];
                if ctx.spec.terms.color {
                    sums.color += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
                }
                if ctx.spec.terms.mask {
                    sums.mask += dm * dm;
                }
                if let Some(acc) = part.as_mut() {
                    let seed = photo_backward(rgb, mask, gt, batch.target_mask[i], inv_b, ctx.spec.terms);
                    ray_backward(ctx, batch, i, &mut sc, seed, acc)?;
                }
            }
            Ok((sums, part))
        })
        .collect();
    let mut total = PhotoSums::default();
    let mut grad: Option<Partial> = None;
    for part in parts {
        let (s, g) = part?;
        total.color += s.color;
        total.mask += s.mask;
        if let Some(g) = g {
            match grad.as_mut() {
                Some(acc) => acc.add(&g),
                None => grad = Some(g),
            }
        }
    }
    total.color *= inv_b;
    total.mask *= inv_b;
    Ok((total, grad))
}

/// Overlap term over `points`: returns `(Σ_{Ω} max(h, 1.9), |Ω|, unnormalized grad)`.
fn overlap_pass(
    ctx: &Ctx,
    points: &[[f64; 3]],
    with_grad: bool,
) -> Result<(f64, usize, Option<Partial>)> {
    if points.is_empty() || !ctx.kernel.any_active() {
        return Ok((0.0, 0, None));
    }
    let (p_n, c_n) = (ctx.primitives(), ctx.convexes());
    let chunk = points.len().div_ceil(REDUCTION_CHUNKS);
    let hook = ctx.opts.hook;
    let rows = SelectionRowsRef(&ctx.kernel.rows);
    let parts: Vec<Result<(f64, usize, Option<Partial>)>> = points
        .par_chunks(chunk)
        .map(|pts| {
            let mut d = vec![0.0; p_n];
            let mut o = vec![0.0; c_n];
            let mut g_o = vec![0.0; c_n];
            let mut g_relu = vec![0.0; p_n];
            let mut sum = 0.0;
            let mut count = 0;
            let mut part = with_grad.then(|| Partial::new(p_n, c_n, ctx.spec.trainable.selection));
            for &x in pts {
                ctx.kernel.eval(x, &mut d, &mut o);
                let Some((a, _)) = min_active(&o, &ctx.kernel.active) else {
                    continue;
                };
                if a >= INSIDE_THRESHOLD {
                    continue;
                }
                count += 1;
                let h: f64 = o
                    .iter()
                    .zip(&ctx.kernel.active)
                    .filter(|(_, &on)| on)
                    .map(|(&v, _)| (-SHARPNESS * v).exp())
                    .sum();
                sum += h.max(OVERLAP_FLOOR);
                if let Some(acc) = part.as_mut() {
                    if !overlap_backward(&o, &ctx.kernel.active, 1.0, &mut g_o) {
                        continue;
                    }
                    hook.apply(Node::Overlap, &mut g_o);
                    ctx.check(Node::Overlap, &g_o)?;
                    let g_t = if ctx.spec.trainable.selection {
                        Some(acc.g_t.as_mut_slice())
                    } else {
                        None
                    };
                    intersect_backward(&d, &rows, &g_o, &mut g_relu, g_t);
                    hook.apply(Node::Intersect, &mut g_relu);
                    ctx.check(Node::Intersect, &g_relu)?;
                    distance_backward(&lift(x), &g_relu, &mut acc.g_abs);
                }
            }
            Ok((sum, count, part))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0;
    let mut grad: Option<Partial> = None;
    for part in parts {
        let (s, n, g) = part?;
        sum += s;
        count += n;
        if let Some(g) = g {
            match grad.as_mut() {
                Some(acc) => acc.add(&g),
                None => grad = Some(g),
            }
        }
    }
    Ok((sum, count, grad))
}

/// Fitting loss over one ray batch (plus optional overlap probe points),
/// with a recorded forward pass that `backward` differentiates.
pub struct LossGraph<'a> {
    bank: &'a PrimitiveBank,
    colors: &'a [[f64; 3]],
    spec: LossSpec,
    rays: &'a RayBatch,
    overlap_points: Option<&'a [[f64; 3]]>,
    opts: EngineOptions,
    recorded: Option<LossBreakdown>,
}

impl<'a> LossGraph<'a> {
    pub fn new(
        bank: &'a PrimitiveBank,
        colors: &'a [[f64; 3]],
        spec: LossSpec,
        rays: &'a RayBatch,
        overlap_points: Option<&'a [[f64; 3]]>,
    ) -> Self {
        Self {
            bank,
            colors,
            spec,
            rays,
            overlap_points,
            opts: EngineOptions::default(),
            recorded: None,
        }
    }

    pub fn with_options(mut self, opts: EngineOptions) -> Self {
        self.opts = opts;
        self
    }

    fn ctx(&self) -> Result<Ctx<'a>> {
        if self.colors.len() != self.bank.convex_count() {
            return Err(Error::shape(
                "LossGraph",
                format!("{} colors", self.bank.convex_count()),
                self.colors.len(),
            ));
        }
        Ok(Ctx {
            kernel: FieldKernel::new(self.bank),
            weights: &self.bank.weights,
            colors: self.colors,
            spec: self.spec,
            opts: self.opts,
        })
    }

    fn run(&self, with_grad: bool) -> Result<(LossBreakdown, Option<GradientBundle>)> {
        let ctx = self.ctx()?;
        let terms = self.spec.terms;
        let (p_n, c_n) = (self.bank.primitive_count(), self.bank.convex_count());
        let mut loss = LossBreakdown::default();

        let (photo, photo_grad) = if terms.color || terms.mask {
            photo_pass(&ctx, self.rays, with_grad)?
        } else {
            (PhotoSums::default(), None)
        };
        loss.photo_color = photo.color;
        loss.photo_mask = photo.mask;
        let mut acc = photo_grad.unwrap_or_else(|| Partial::new(p_n, c_n, self.spec.trainable.selection));

        if terms.overlap {
            if let Some(points) = self.overlap_points {
                let (sum, count, g) = overlap_pass(&ctx, points, with_grad)?;
                loss.inside_points = count;
                if count == 0 {
                    log::warn!("overlap support set is empty; the shape has vanished");
                } else {
                    let inv = 1.0 / count as f64;
                    loss.overlap = sum * inv;
                    if let Some(mut g) = g {
                        g.g_abs.iter_mut().for_each(|v| *v *= inv);
                        g.g_t.iter_mut().for_each(|v| *v *= inv);
                        acc.add(&g);
                    }
                }
            }
        }

        let (t_loss, t_grad) = selection_penalty(&self.bank.selection);
        let (w_loss, w_grad) = weight_penalty(&self.bank.weights);
        if terms.selection_reg {
            loss.selection_reg = t_loss;
        }
        if terms.weight_reg {
            loss.weight_reg = w_loss;
        }
        loss.total = loss.photo_color + loss.photo_mask + loss.selection_reg + loss.weight_reg + loss.overlap;

        if !with_grad {
            return Ok((loss, None));
        }

        let tr = self.spec.trainable;
        let mut g = GradientBundle::zeros(p_n, c_n);
        if tr.params {
            let mut g_abs = Matrix::from_vec(p_n, PARAM_COLS, acc.g_abs)?;
            self.opts.hook.apply(Node::Distance, g_abs.as_mut_slice());
            if self.opts.check_finite {
                check(Node::Distance, g_abs.as_slice())?;
            }
            g.d_params = abs_backward(&self.bank.params, &g_abs);
            self.opts.hook.apply(Node::Abs, g.d_params.as_mut_slice());
            if self.opts.check_finite {
                check(Node::Abs, g.d_params.as_slice())?;
            }
        }
        if tr.selection {
            g.d_selection = Matrix::from_vec(p_n, c_n, acc.g_t)?;
            if terms.selection_reg {
                let mut reg = t_grad;
                self.opts.hook.apply(Node::SelectionReg, reg.as_mut_slice());
                g.d_selection.add_assign(&reg);
            }
            if self.opts.check_finite {
                check(Node::SelectionReg, g.d_selection.as_slice())?;
            }
        }
        if tr.weights {
            g.d_weights = acc.g_w;
            if terms.weight_reg {
                let mut reg = w_grad;
                self.opts.hook.apply(Node::WeightReg, &mut reg);
                for (a, b) in g.d_weights.iter_mut().zip(&reg) {
                    *a += b;
                }
            }
            if self.opts.check_finite {
                check(Node::WeightReg, &g.d_weights)?;
            }
        }
        if tr.colors && terms.color {
            g.d_colors = acc.g_colors;
            if self.opts.check_finite {
                check(Node::Color, g.d_colors.as_flattened())?;
            }
        }
        Ok((loss, Some(g)))
    }

    /// Evaluate the loss and record the forward pass.
    pub fn forward(&mut self) -> Result<LossBreakdown> {
        let (loss, _) = self.run(false)?;
        self.recorded = Some(loss);
        Ok(loss)
    }

    /// Gradients of the recorded loss.
    pub fn backward(&self) -> Result<GradientBundle> {
        if self.recorded.is_none() {
            return Err(Error::NoForward);
        }
        let (_, g) = self.run(true)?;
        Ok(g.expect("gradient requested"))
    }

    /// Forward and backward in a single fused sweep.
    pub fn forward_backward(&mut self) -> Result<(LossBreakdown, GradientBundle)> {
        let (loss, g) = self.run(true)?;
        self.recorded = Some(loss);
        Ok((loss, g.expect("gradient requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{SelectionMode, FieldSample};
    use crate::render::Camera;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_primitive_bank(g: f64) -> PrimitiveBank {
        PrimitiveBank::new(
            Matrix::from_rows(&[[1.0, 1.0, 1.0, 0.1, 0.0, 0.0, g]]),
            Matrix::from_rows(&[[0.7]]),
            vec![0.8],
            SelectionMode::Float,
        )
        .unwrap()
    }

    fn a_plus_at(bank: &PrimitiveBank, x: [f64; 3]) -> f64 {
        FieldSample::evaluate(bank, &[x]).unwrap().a_plus[0]
    }

    #[test]
    fn single_point_soft_union_matches_central_difference() {
        let x = [0.6, 0.2, -0.1];
        let g = 0.0;
        let bank = one_primitive_bank(g);
        let kernel = FieldKernel::new(&bank);
        let mut d = vec![0.0; 1];
        let mut o = vec![0.0; 1];
        kernel.eval(x, &mut d, &mut o);
        let mut g_o = vec![0.0; 1];
        let mut g_w = vec![0.0; 1];
        union_soft_backward(&o, bank.weights(), 1.0, &mut g_o, &mut g_w);
        let mut g_relu = vec![0.0; 1];
        intersect_backward(&d, &SelectionRowsRef::from_kernel(&kernel), &g_o, &mut g_relu, None);
        let mut g_abs = vec![0.0; 7];
        distance_backward(&lift(x), &g_relu, &mut g_abs);
        let analytic = g_abs[6];
        let eps = 1e-5;
        let fd = (a_plus_at(&one_primitive_bank(g + eps), x)
            - a_plus_at(&one_primitive_bank(g - eps), x))
            / (2.0 * eps);
        assert!(analytic != 0.0);
        assert!((analytic - fd).abs() <= 1e-6 * fd.abs(), "{analytic} vs {fd}");
    }

    #[test]
    fn dead_relu_gives_zero_selection_gradient() {
        let bank = PrimitiveBank::new(
            Matrix::from_rows(&[
                [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -0.5],
                [0.5, 0.5, 0.5, 0.0, 0.0, 0.0, -0.4],
            ]),
            Matrix::from_rows(&[[0.6], [0.3]]),
            vec![1.0],
            SelectionMode::Float,
        )
        .unwrap();
        let kernel = FieldKernel::new(&bank);
        let x = [0.05, 0.0, 0.0];
        let mut d = vec![0.0; 2];
        let mut o = vec![0.0; 1];
        kernel.eval(x, &mut d, &mut o);
        assert!(d.iter().all(|&v| v < -0.1));
        let mut g_o = vec![1.0];
        let mut g_t = vec![0.0; 2];
        let mut g_relu = vec![0.0; 2];
        g_o[0] = 3.0;
        intersect_backward(&d, &SelectionRowsRef::from_kernel(&kernel), &g_o, &mut g_relu, Some(&mut g_t));
        assert_eq!(g_t, vec![0.0, 0.0]);
        assert_eq!(g_relu, vec![0.0, 0.0]);
    }

    #[test]
    fn hard_union_routes_to_unique_argmin() {
        let o = [0.4, 0.1, 0.3];
        let (a, idx) = min_active(&o, &[true; 3]).unwrap();
        assert_eq!(idx, 1);
        let mut g_o = vec![0.0; 3];
        min_route_backward(idx, exp_opacity_backward(a, 1.0), &mut g_o);
        assert_eq!(g_o[0], 0.0);
        assert_eq!(g_o[2], 0.0);
        assert!((g_o[1] + 10.0 * (-1.0f64).exp()).abs() < 1e-15);
        // ties route to the lowest index
        assert_eq!(min_active(&[0.2, 0.2], &[true; 2]).unwrap().1, 0);
        // clamped opacity inside the shape has no gradient
        assert_eq!(exp_opacity_backward(-0.1, 1.0), 0.0);
    }

    #[test]
    fn accumulate_adjoint_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let alphas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let g_rgb = [0.3, -0.7, 0.2];
        let g_m = 0.9;
        let f = |a: &[f64], c: &[[f64; 3]]| {
            let (rgb, m) = crate::render::accumulate(a, c);
            g_rgb[0] * rgb[0] + g_rgb[1] * rgb[1] + g_rgb[2] * rgb[2] + g_m * m
        };
        let mut ga = vec![0.0; n];
        let mut gc = vec![[0.0; 3]; n];
        accumulate_backward(&alphas, &colors, g_rgb, g_m, &mut ga, &mut gc);
        let eps = 1e-6;
        for k in 0..n {
            let mut hi = alphas.clone();
            hi[k] += eps;
            let mut lo = alphas.clone();
            lo[k] -= eps;
            let fd = (f(&hi, &colors) - f(&lo, &colors)) / (2.0 * eps);
            assert!((fd - ga[k]).abs() < 1e-8);
            for j in 0..3 {
                let mut hi = colors.clone();
                hi[k][j] += eps;
                let mut lo = colors.clone();
                lo[k][j] -= eps;
                let fd = (f(&alphas, &hi) - f(&alphas, &lo)) / (2.0 * eps);
                assert!((fd - gc[k][j]).abs() < 1e-8);
            }
        }
    }

    fn tiny_batch(seed: u64) -> (PrimitiveBank, Vec<[f64; 3]>, RayBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Matrix::zeros(6, 7);
        for p in 0..6 {
            let r = params.row_mut(p);
            for j in 0..3 {
                r[j] = rng.random_range(0.5..2.0);
            }
            for j in 3..6 {
                r[j] = rng.random_range(-0.3..0.3);
            }
            r[6] = rng.random_range(-0.6..-0.2);
        }
        let mut t = Matrix::zeros(6, 3);
        for v in t.as_mut_slice() {
            *v = rng.random_range(0.0..1.0);
        }
        let bank = PrimitiveBank::new(params, t, vec![1.0, 0.9, 1.1], SelectionMode::Float).unwrap();
        let colors = vec![[0.2, 0.5, 0.8], [0.9, 0.1, 0.3], [0.4, 0.4, 0.4]];
        let cam = Camera::look_at([2.5, 1.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0], 10.0, 12, 12).unwrap();
        let pixels: Vec<PixelSample> = (0..20)
            .map(|_| PixelSample {
                uv: [rng.random_range(0.0..12.0), rng.random_range(0.0..12.0)],
                source: crate::render::PixelSource::Random,
                color: [rng.random(), rng.random(), rng.random()],
                mask: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
            })
            .collect();
        let batch = RayBatch::from_pixels(&cam, &pixels, 12, Some(&mut rng)).unwrap();
        (bank, colors, batch)
    }

    fn spec(opacity: OpacityRule) -> LossSpec {
        LossSpec {
            opacity,
            terms: LossTerms {
                color: true,
                mask: true,
                selection_reg: true,
                weight_reg: opacity == OpacityRule::SoftOccupancy,
                overlap: false,
            },
            trainable: Trainable {
                params: true,
                selection: true,
                weights: opacity == OpacityRule::SoftOccupancy,
                colors: true,
            },
        }
    }

    #[test]
    fn backward_requires_forward() {
        let (bank, colors, batch) = tiny_batch(1);
        let g = LossGraph::new(&bank, &colors, spec(OpacityRule::ExpHard), &batch, None);
        assert!(matches!(g.backward(), Err(Error::NoForward)));
    }

    #[test]
    fn fused_and_split_passes_agree_bitwise() {
        let (bank, colors, batch) = tiny_batch(2);
        for rule in [OpacityRule::SoftOccupancy, OpacityRule::ExpHard] {
            let mut g1 = LossGraph::new(&bank, &colors, spec(rule), &batch, None);
            let l1 = g1.forward().unwrap();
            let b1 = g1.backward().unwrap();
            let mut g2 = LossGraph::new(&bank, &colors, spec(rule), &batch, None);
            let (l2, b2) = g2.forward_backward().unwrap();
            assert_eq!(l1, l2);
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn injected_nan_names_its_node() {
        let (bank, colors, batch) = tiny_batch(3);
        for node in [Node::Accumulate, Node::Intersect, Node::UnionHard, Node::Color] {
            let opts = EngineOptions {
                hook: FaultHook(Some(AdjointFault { node, kind: FaultKind::NaN })),
                check_finite: true,
            };
            let mut g = LossGraph::new(&bank, &colors, spec(OpacityRule::ExpHard), &batch, None)
                .with_options(opts);
            match g.forward_backward() {
                Err(Error::NonFiniteGradient { node: got }) => assert_eq!(got, node),
                other => panic!("expected failure at {node}, got {:?}", other.map(|r| r.0)),
            }
        }
    }

    #[test]
    fn frozen_groups_are_exactly_zero() {
        let (bank, colors, batch) = tiny_batch(4);
        let mut s = spec(OpacityRule::ExpHard);
        s.trainable = Trainable { params: true, selection: false, weights: false, colors: false };
        let mut g = LossGraph::new(&bank, &colors, s, &batch, None);
        let (_, grad) = g.forward_backward().unwrap();
        assert!(grad.d_selection.as_slice().iter().all(|&v| v == 0.0));
        assert!(grad.d_weights.iter().all(|&v| v == 0.0));
        assert!(grad.d_colors.iter().flatten().all(|&v| v == 0.0));
        assert!(grad.d_params.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn penalties() {
        let (l, g) = selection_penalty(&Matrix::from_rows(&[[-0.1, 1.1], [0.5, 1.0]]));
        assert!((l - 0.2).abs() < 1e-15);
        assert_eq!(g.as_slice(), &[-1.0, 1.0, 0.0, 0.0]);
        let (l, g) = weight_penalty(&[0.8, 1.2, 1.0]);
        assert!((l - 0.4).abs() < 1e-15);
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    }
}
