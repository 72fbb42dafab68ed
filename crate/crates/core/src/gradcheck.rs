//! Finite-difference verification of the analytic gradients.
//!
//! Two layers: every graph node's adjoint is checked in isolation against
//! central differences of an independently written forward, then the fused
//! engine is checked end to end for each phase. Coordinates whose perturbation
//! window crosses a kink (ReLU, clip, min routing, regularizer corners, the
//! overlap support set) are skipped rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{lift, FieldKernel, FieldSample, PrimitiveBank, SelectionMode, PARAM_COLS};
use crate::diff::{
    abs_backward, accumulate_backward, color_backward, distance_backward, exp_opacity_backward,
    intersect_backward, min_route_backward, overlap_backward, photo_backward, selection_penalty,
    union_soft_backward, weight_penalty, AdjointFault, EngineOptions, FaultHook, FaultKind,
    LossGraph, LossSpec, LossTerms, Node, RayBatch, SelectionRowsRef, INSIDE_THRESHOLD,
    OVERLAP_FLOOR,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{Phase, PhaseConfig};
use crate::render::{convex_weights, point_at, Camera, OpacityRule, PixelSample, PixelSource, SHARPNESS};

/// Minimum number of compared coordinates for a run to count.
pub const MIN_CHECKED: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub primitives: usize,
    pub convexes: usize,
    pub views: usize,
    pub image_size: usize,
    pub rays_per_view: usize,
    pub samples_per_ray: usize,
    pub overlap_points: usize,
    pub eps: f64,
    /// Half-width of the window that must be kink-free around a checked coordinate.
    pub kink_margin: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            primitives: 8,
            convexes: 4,
            views: 2,
            image_size: 16,
            rays_per_view: 16,
            samples_per_ray: 16,
            overlap_points: 32,
            eps: 1e-5,
            kink_margin: 1e-4,
            abs_tol: 1e-5,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Params,
    Selection,
    Weights,
    Colors,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Params, Group::Selection, Group::Weights, Group::Colors];

    pub fn name(self) -> &'static str {
        match self {
            Group::Params => "params",
            Group::Selection => "selection",
            Group::Weights => "weights",
            Group::Colors => "colors",
        }
    }
}

/// Comparison of one trainable group in one phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub phase: u8,
    pub group: Group,
    pub trainable: bool,
    pub checked: usize,
    pub skipped: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeCheck {
    pub node: Node,
    pub compared: usize,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseForward {
    pub phase: u8,
    pub engine: f64,
    pub reference: f64,
    pub matches: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub config: GradCheckConfig,
    pub forward: Vec<PhaseForward>,
    pub groups: Vec<GroupCheck>,
    pub nodes: Vec<NodeCheck>,
    /// Set when the engine refused to produce a gradient.
    pub engine_error: Option<String>,
    pub checked: usize,
    pub skipped: usize,
    /// Nodes implicated by a failed node check or a non-finite engine gradient.
    pub failing_nodes: Vec<Node>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_node_names(&self) -> Vec<&'static str> {
        self.failing_nodes.iter().map(|n| n.name()).collect()
    }
}

/// Parse `node`, `node:nan` or `node:<scale>` into a fault.
pub fn parse_fault(s: &str) -> Result<AdjointFault> {
    let (name, kind) = match s.split_once(':') {
        Some((n, k)) => (n, Some(k)),
        None => (s, None),
    };
    let node = Node::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Node::ALL.iter().map(|n| n.name()).collect();
        Error::Config(format!("unknown node '{name}'; expected one of {}", names.join(", ")))
    })?;
    let kind = match kind {
        None => FaultKind::Scale(2.0),
        Some("nan") => FaultKind::NaN,
        Some(k) => FaultKind::Scale(
            k.parse()
                .map_err(|_| Error::Config(format!("bad fault kind '{k}'; expected 'nan' or a number")))?,
        ),
    };
    Ok(AdjointFault { node, kind })
}

fn within(a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> bool {
    // NaN never passes.
    (a - b).abs() <= abs_tol.max(rel_tol * a.abs().max(b.abs()))
}

// ---------------------------------------------------------------------------
// Random instance
// ---------------------------------------------------------------------------

struct Instance {
    params: Matrix,
    float_selection: Matrix,
    binary_selection: Matrix,
    weights: Vec<f64>,
    colors: Vec<[f64; 3]>,
    rays: RayBatch,
    probes: Vec<[f64; 3]>,
}

fn random_params<R: Rng>(p_n: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(p_n, PARAM_COLS);
    for p in 0..p_n {
        for j in 0..3 {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            m.set(p, j, sign * rng.random_range(0.5..2.0));
        }
        for j in 3..6 {
            m.set(p, j, rng.random_range(-0.5..0.5));
        }
        m.set(p, 6, rng.random_range(-0.5..-0.1));
    }
    m
}

fn random_instance(cfg: &GradCheckConfig, seed: u64) -> Result<Instance> {
    if cfg.primitives < cfg.convexes || cfg.convexes == 0 {
        return Err(Error::Config("grad check needs at least one primitive per convex".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p_n, c_n) = (cfg.primitives, cfg.convexes);
    let params = random_params(p_n, &mut rng);
    let mut float_selection = Matrix::zeros(p_n, c_n);
    for v in float_selection.as_mut_slice() {
        *v = rng.random_range(-0.2..1.2);
    }
    let mut binary_selection = Matrix::zeros(p_n, c_n);
    for p in 0..p_n {
        for c in 0..c_n {
            if p % c_n == c || rng.random_bool(0.3) {
                binary_selection.set(p, c, 1.0);
            }
        }
    }
    let weights: Vec<f64> = (0..c_n).map(|_| rng.random_range(0.5..1.5)).collect();
    let colors: Vec<[f64; 3]> = (0..c_n).map(|_| rng.random()).collect();

    let size = cfg.image_size as f64;
    let mut rays: Option<RayBatch> = None;
    for v in 0..cfg.views {
        let az = std::f64::consts::TAU * v as f64 / cfg.views as f64 + 0.3;
        let el: f64 = 0.35;
        let eye = [3.0 * el.cos() * az.cos(), 3.0 * el.cos() * az.sin(), 3.0 * el.sin()];
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], size, cfg.image_size, cfg.image_size)?;
        let pixels: Vec<PixelSample> = (0..cfg.rays_per_view)
            .map(|_| PixelSample {
                uv: [rng.random_range(0.2 * size..0.8 * size), rng.random_range(0.2 * size..0.8 * size)],
                source: PixelSource::Random,
                color: rng.random(),
                mask: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
            })
            .collect();
        let batch = RayBatch::from_pixels(&cam, &pixels, cfg.samples_per_ray, Some(&mut rng))?;
        match rays.as_mut() {
            Some(r) => r.extend(batch)?,
            None => rays = Some(batch),
        }
    }
    let rays = rays.ok_or_else(|| Error::Config("grad check needs at least one view".into()))?;
    let probes = (0..cfg.overlap_points)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ]
        })
        .collect();
    Ok(Instance {
        params,
        float_selection,
        binary_selection,
        weights,
        colors,
        rays,
        probes,
    })
}

// ---------------------------------------------------------------------------
// Reference forward, written against the dense matrix path
// ---------------------------------------------------------------------------

fn category(v: f64, lo: f64, hi: f64) -> i8 {
    if v <= lo {
        0
    } else if v >= hi {
        2
    } else {
        1
    }
}

fn active_columns(t: &Matrix) -> Vec<bool> {
    (0..t.cols()).map(|c| (0..t.rows()).any(|p| t.get(p, c) != 0.0)).collect()
}

/// Lowest-index minimum over active columns.
fn hard_min(o: &[f64], active: &[bool]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (c, (&v, &on)) in o.iter().zip(active).enumerate() {
        if on && best.is_none_or(|(b, _)| v < b) {
            best = Some((v, c));
        }
    }
    best
}

/// Loss plus a signature of every piecewise branch the loss passes through.
fn reference(
    bank: &PrimitiveBank,
    colors: &[[f64; 3]],
    spec: &LossSpec,
    rays: &RayBatch,
    probes: &[[f64; 3]],
) -> Result<(f64, Vec<i8>)> {
    let terms = spec.terms;
    let active = active_columns(bank.selection());
    let w = bank.weights();
    let c_n = bank.convex_count();
    let mut sig: Vec<i8> = Vec::new();
    let mut total = 0.0;

    if terms.color || terms.mask {
        let n = rays.len();
        let r = rays.samples.samples_per_ray;
        let mut points = Vec::new();
        let mut hit = Vec::new();
        for i in 0..n {
            if rays.bundle.hits(i) {
                hit.push(i);
                for &t in rays.samples.ray_depths(i) {
                    points.push(point_at(rays.bundle.origins[i], rays.bundle.directions[i], t));
                }
            }
        }
        let field = if points.is_empty() { None } else { Some(FieldSample::evaluate(bank, &points)?) };
        let mut rendered = vec![([0.0; 3], 0.0); n];
        if let Some(field) = &field {
            for (h, &i) in hit.iter().enumerate() {
                let mut trans = 1.0;
                let mut rgb = [0.0; 3];
                let mut mask = 0.0;
                for k in 0..r {
                    let row = h * r + k;
                    sig.extend(field.d.row(row).iter().map(|&v| i8::from(v > 0.0)));
                    let o = field.o.row(row);
                    let alpha = match spec.opacity {
                        OpacityRule::SoftOccupancy => {
                            let mut u = 0.0;
                            for c in 0..c_n {
                                let inner = 1.0 - o[c];
                                sig.push(category(inner, 0.0, 1.0));
                                u += w[c] * inner.clamp(0.0, 1.0);
                            }
                            sig.push(category(u, 0.0, 1.0));
                            u.clamp(0.0, 1.0)
                        }
                        OpacityRule::ExpHard => match hard_min(o, &active) {
                            Some((a, idx)) => {
                                sig.push(idx as i8);
                                sig.push(i8::from(a > 0.0));
                                (-SHARPNESS * a).exp().min(1.0)
                            }
                            None => 0.0,
                        },
                    };
                    let mut col = [0.0; 3];
                    if terms.color {
                        let logits: Vec<f64> = (0..c_n).filter(|&c| active[c]).map(|c| -SHARPNESS * o[c]).collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                        let mut li = 0;
                        for c in 0..c_n {
                            if active[c] {
                                let s = (logits[li] - m).exp() / z;
                                li += 1;
                                for j in 0..3 {
                                    col[j] += s * colors[c][j];
                                }
                            }
                        }
                    }
                    for j in 0..3 {
                        rgb[j] += trans * alpha * col[j];
                    }
                    mask += trans * alpha;
                    trans *= 1.0 - alpha;
                }
                rendered[i] = (rgb, mask);
            }
        }
        let inv = 1.0 / n as f64;
        for (i, (rgb, mask)) in rendered.iter().enumerate() {
            if terms.color {
                let gt = rays.target_rgb[i];
                total += inv * (0..3).map(|j| (rgb[j] - gt[j]).powi(2)).sum::<f64>();
            }
            if terms.mask {
                total += inv * (mask - rays.target_mask[i]).powi(2);
            }
        }
    }

    if terms.selection_reg {
        for &t in bank.selection().as_slice() {
            sig.push(category(t, 0.0, 1.0));
            total += (-t).max(0.0) + (t - 1.0).max(0.0);
        }
    }
    if terms.weight_reg {
        for &v in w {
            sig.push(category(v, 1.0, 1.0));
            total += (v - 1.0).abs();
        }
    }
    if terms.overlap && !probes.is_empty() && active.iter().any(|&a| a) {
        let field = FieldSample::evaluate(bank, probes)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..probes.len() {
            sig.extend(field.d.row(i).iter().map(|&v| i8::from(v > 0.0)));
            let o = field.o.row(i);
            let (a, _) = hard_min(o, &active).expect("some column is active");
            let inside = a < INSIDE_THRESHOLD;
            sig.push(i8::from(inside));
            if inside {
                let h: f64 = (0..c_n).filter(|&c| active[c]).map(|c| (-SHARPNESS * o[c]).exp()).sum();
                sig.push(i8::from(h > OVERLAP_FLOOR));
                sum += h.max(OVERLAP_FLOOR);
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    for p in 0..bank.primitive_count() {
        for j in 0..3 {
            sig.push(category(bank.params().get(p, j), 0.0, 0.0));
        }
    }
    Ok((total, sig))
}

// ---------------------------------------------------------------------------
// End-to-end checks
// ---------------------------------------------------------------------------

fn group_len(bank: &PrimitiveBank, group: Group) -> usize {
    let (p, c) = (bank.primitive_count(), bank.convex_count());
    match group {
        Group::Params => p * PARAM_COLS,
        Group::Selection => p * c,
        Group::Weights => c,
        Group::Colors => 3 * c,
    }
}

fn nudge(bank: &mut PrimitiveBank, colors: &mut [[f64; 3]], group: Group, k: usize, delta: f64) -> Result<()> {
    match group {
        Group::Params => bank.params_mut().as_mut_slice()[k] += delta,
        Group::Selection => bank.selection_mut()?.as_mut_slice()[k] += delta,
        Group::Weights => bank.weights_mut()[k] += delta,
        Group::Colors => colors[k / 3][k % 3] += delta,
    }
    Ok(())
}

fn analytic(g: &crate::diff::GradientBundle, group: Group) -> Vec<f64> {
    match group {
        Group::Params => g.d_params.as_slice().to_vec(),
        Group::Selection => g.d_selection.as_slice().to_vec(),
        Group::Weights => g.d_weights.clone(),
        Group::Colors => g.d_colors.as_flattened().to_vec(),
    }
}

fn trainable(spec: &LossSpec, group: Group) -> bool {
    let t = spec.trainable;
    match group {
        Group::Params => t.params,
        Group::Selection => t.selection,
        Group::Weights => t.weights,
        // Colors only receive gradient through the color term.
        Group::Colors => t.colors && spec.terms.color,
    }
}

struct PhaseResult {
    forward: PhaseForward,
    groups: Vec<GroupCheck>,
}

fn check_phase(
    cfg: &GradCheckConfig,
    inst: &Instance,
    phase: Phase,
    hook: FaultHook,
) -> Result<PhaseResult> {
    let spec = PhaseConfig::new(phase, false, 1).loss_spec();
    let (selection, mode) = match phase {
        Phase::Three => (inst.binary_selection.clone(), SelectionMode::Binary),
        _ => (inst.float_selection.clone(), SelectionMode::Float),
    };
    let bank = PrimitiveBank::new(inst.params.clone(), selection, inst.weights.clone(), mode)?;
    let colors = inst.colors.clone();
    let probes = (phase == Phase::Three).then_some(inst.probes.as_slice());

    let mut graph = LossGraph::new(&bank, &colors, spec, &inst.rays, probes).with_options(EngineOptions {
        hook,
        check_finite: true,
    });
    let (loss, grad) = graph.forward_backward()?;
    let (ref_loss, base_sig) = reference(&bank, &colors, &spec, &inst.rays, probes.unwrap_or(&[]))?;
    let forward = PhaseForward {
        phase: phase.number(),
        engine: loss.total,
        reference: ref_loss,
        matches: within(loss.total, ref_loss, 1e-12, 1e-9),
    };

    let mut groups = Vec::new();
    for group in Group::ALL {
        let g = analytic(&grad, group);
        let live = trainable(&spec, group);
        let mut row = GroupCheck {
            phase: phase.number(),
            group,
            trainable: live,
            checked: 0,
            skipped: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            passed: true,
        };
        if !live {
            // Frozen groups must be exactly zero, not merely small.
            row.checked = g.len();
            row.max_abs_err = g.iter().fold(0.0, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) });
            row.passed = g.iter().all(|&v| v == 0.0);
            groups.push(row);
            continue;
        }
        for k in 0..group_len(&bank, group) {
            let eval = |delta: f64| -> Result<(f64, Vec<i8>)> {
                let mut b = bank.clone();
                let mut c = colors.clone();
                nudge(&mut b, &mut c, group, k, delta)?;
                reference(&b, &c, &spec, &inst.rays, probes.unwrap_or(&[]))
            };
            let (_, sig_hi) = eval(cfg.kink_margin)?;
            let (_, sig_lo) = eval(-cfg.kink_margin)?;
            if sig_hi != base_sig || sig_lo != base_sig {
                row.skipped += 1;
                continue;
            }
            let (f_hi, _) = eval(cfg.eps)?;
            let (f_lo, _) = eval(-cfg.eps)?;
            let fd = (f_hi - f_lo) / (2.0 * cfg.eps);
            let a = g[k];
            let err = (a - fd).abs();
            let rel = err / a.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
            row.checked += 1;
            if err.is_nan() || err > row.max_abs_err {
                row.max_abs_err = err;
            }
            if !err.is_nan() && err > cfg.abs_tol {
                row.max_rel_err = row.max_rel_err.max(rel);
            }
            if !within(a, fd, cfg.abs_tol, cfg.rel_tol) {
                row.passed = false;
            }
        }
        groups.push(row);
    }
    Ok(PhaseResult { forward, groups })
}

// ---------------------------------------------------------------------------
// Node-level checks
// ---------------------------------------------------------------------------

struct NodeAcc {
    compared: usize,
    max_abs_err: f64,
    passed: bool,
}

impl NodeAcc {
    fn new() -> Self {
        Self {
            compared: 0,
            max_abs_err: 0.0,
            passed: true,
        }
    }

    /// Compare `analytic` with central differences of `f` around `x`.
    fn compare(&mut self, cfg: &GradCheckConfig, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
        let mut y = x.to_vec();
        for k in 0..x.len() {
            y[k] = x[k] + cfg.eps;
            let hi = f(&y);
            y[k] = x[k] - cfg.eps;
            let lo = f(&y);
            y[k] = x[k];
            let fd = (hi - lo) / (2.0 * cfg.eps);
            let err = (analytic[k] - fd).abs();
            self.compared += 1;
            if err.is_nan() || err > self.max_abs_err {
                self.max_abs_err = err;
            }
            if !within(analytic[k], fd, cfg.abs_tol, cfg.rel_tol) {
                self.passed = false;
            }
        }
    }
}

fn signed<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) { v } else { -v }
}

fn softmax_color(o: &[f64], table: &[[f64; 3]]) -> [f64; 3] {
    let m = o.iter().map(|v| -SHARPNESS * v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|v| (-SHARPNESS * v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = [0.0; 3];
    for (ec, t) in e.iter().zip(table) {
        for j in 0..3 {
            out[j] += ec / z * t[j];
        }
    }
    out
}

fn composite(alpha: &[f64], cols: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut mask = 0.0;
    for (a, c) in alpha.iter().zip(cols) {
        for j in 0..3 {
            rgb[j] += trans * a * c[j];
        }
        mask += trans * a;
        trans *= 1.0 - a;
    }
    (rgb, mask)
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn check_node<R: Rng>(cfg: &GradCheckConfig, node: Node, hook: FaultHook, rng: &mut R) -> Result<NodeCheck> {
    const TRIALS: usize = 4;
    let (p_n, c_n) = (cfg.primitives, cfg.convexes);
    let mut acc = NodeAcc::new();
    let active = vec![true; c_n];
    for _ in 0..TRIALS {
        match node {
            Node::Abs => {
                let params = random_params(p_n, rng);
                let mut g_abs = Matrix::zeros(p_n, PARAM_COLS);
                g_abs.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                let mut a = abs_backward(&params, &g_abs);
                hook.apply(Node::Abs, a.as_mut_slice());
                acc.compare(cfg, params.as_slice(), a.as_slice(), |x| {
                    x.iter()
                        .zip(g_abs.as_slice())
                        .enumerate()
                        .map(|(k, (&v, &g))| g * if k % PARAM_COLS < 3 { v.abs() } else { v })
                        .sum()
                });
            }
            Node::Distance => {
                let q = lift([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let coefs: Vec<f64> = (0..p_n * PARAM_COLS).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g_d: Vec<f64> = (0..p_n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut a = vec![0.0; p_n * PARAM_COLS];
                distance_backward(&q, &g_d, &mut a);
                hook.apply(Node::Distance, &mut a);
                acc.compare(cfg, &coefs, &a, |x| {
                    (0..p_n)
                        .map(|p| g_d[p] * (0..PARAM_COLS).map(|j| q[j] * x[p * PARAM_COLS + j]).sum::<f64>())
                        .sum()
                });
            }
            Node::Intersect => {
                let mut t = Matrix::zeros(p_n, c_n);
                t.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.2..1.2));
                let bank = PrimitiveBank::new(random_params(p_n, rng), t.clone(), vec![1.0; c_n], SelectionMode::Float)?;
                let kernel = FieldKernel::new(&bank);
                let rows = SelectionRowsRef::from_kernel(&kernel);
                let d: Vec<f64> = (0..p_n).map(|_| signed(rng, 0.1, 1.0)).collect();
                let g_o: Vec<f64> = (0..c_n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut g_relu = vec![0.0; p_n];
                let mut g_t = vec![0.0; p_n * c_n];
                intersect_backward(&d, &rows, &g_o, &mut g_relu, Some(&mut g_t));
                hook.apply(Node::Intersect, &mut g_relu);
                let out = |d: &[f64], t: &[f64]| -> f64 {
                    (0..c_n)
                        .map(|c| g_o[c] * (0..p_n).map(|p| d[p].max(0.0) * t[p * c_n + c]).sum::<f64>())
                        .sum()
                };
                acc.compare(cfg, &d, &g_relu, |x| out(x, t.as_slice()));
                acc.compare(cfg, t.as_slice(), &g_t, |x| out(&d, x));
            }
            Node::UnionHard => {
                let o: Vec<f64> = (0..c_n).map(|_| rng.random_range(-0.5..1.0)).collect();
                let (_, idx) = hard_min(&o, &active).expect("all columns active");
                // Keep the argmin isolated so the window stays on one branch.
                if o.iter().enumerate().any(|(c, &v)| c != idx && (v - o[idx]).abs() < 1e-3) {
                    continue;
                }
                let g_min = rng.random_range(-1.0..1.0);
                let mut a = vec![0.0; c_n];
                min_route_backward(idx, g_min, &mut a);
                hook.apply(Node::UnionHard, &mut a);
                acc.compare(cfg, &o, &a, |x| g_min * hard_min(x, &active).expect("active").0);
            }
            Node::UnionSoft => {
                let o: Vec<f64> = (0..c_n).map(|_| rng.random_range(0.05..0.95)).collect();
                let w: Vec<f64> = (0..c_n).map(|_| rng.random_range(0.05..0.2)).collect();
                let g = rng.random_range(-1.0..1.0);
                let mut g_o = vec![0.0; c_n];
                let mut g_w = vec![0.0; c_n];
                union_soft_backward(&o, &w, g, &mut g_o, &mut g_w);
                hook.apply(Node::UnionSoft, &mut g_o);
                hook.apply(Node::UnionSoft, &mut g_w);
                let f = |o: &[f64], w: &[f64]| -> f64 {
                    g * o
                        .iter()
                        .zip(w)
                        .map(|(&v, &wc)| wc * (1.0 - v).clamp(0.0, 1.0))
                        .sum::<f64>()
                        .clamp(0.0, 1.0)
                };
                acc.compare(cfg, &o, &g_o, |x| f(x, &w));
                acc.compare(cfg, &w, &g_w, |x| f(&o, x));
            }
            Node::Opacity => {
                let a = rng.random_range(0.05..0.5);
                let g = rng.random_range(-1.0..1.0);
                let mut out = [exp_opacity_backward(a, g)];
                hook.apply(Node::Opacity, &mut out);
                acc.compare(cfg, &[a], &out, |x| g * (-SHARPNESS * x[0]).exp().min(1.0));
            }
            Node::Color => {
                let o: Vec<f64> = (0..c_n).map(|_| rng.random_range(-0.2..0.3)).collect();
                let table: Vec<[f64; 3]> = (0..c_n).map(|_| rng.random()).collect();
                let g_rgb = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let mut s = vec![0.0; c_n];
                convex_weights(&o, &active, &mut s);
                let mut g_o = vec![0.0; c_n];
                let mut g_table = vec![[0.0; 3]; c_n];
                color_backward(&s, &table, g_rgb, &mut g_o, &mut g_table);
                hook.apply(Node::Color, &mut g_o);
                acc.compare(cfg, &o, &g_o, |x| dot3(g_rgb, softmax_color(x, &table)));
                let flat: Vec<f64> = table.as_flattened().to_vec();
                acc.compare(cfg, &flat, g_table.as_flattened(), |x| {
                    let t: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    dot3(g_rgb, softmax_color(&o, &t))
                });
            }
            Node::Accumulate => {
                let r = cfg.samples_per_ray;
                let alpha: Vec<f64> = (0..r).map(|_| rng.random_range(0.05..0.5)).collect();
                let cols: Vec<[f64; 3]> = (0..r).map(|_| rng.random()).collect();
                let g_rgb = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let g_mask = rng.random_range(-1.0..1.0);
                let mut g_alpha = vec![0.0; r];
                let mut g_cols = vec![[0.0; 3]; r];
                accumulate_backward(&alpha, &cols, g_rgb, g_mask, &mut g_alpha, &mut g_cols);
                hook.apply(Node::Accumulate, &mut g_alpha);
                let f = |a: &[f64], c: &[[f64; 3]]| -> f64 {
                    let (rgb, m) = composite(a, c);
                    dot3(g_rgb, rgb) + g_mask * m
                };
                acc.compare(cfg, &alpha, &g_alpha, |x| f(x, &cols));
                acc.compare(cfg, cols.as_flattened(), g_cols.as_flattened(), |x| {
                    let c: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    f(&alpha, &c)
                });
            }
            Node::Photo => {
                let x0: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let gt: [f64; 3] = rng.random();
                let gm = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let inv = 0.25;
                let terms = LossTerms {
                    color: true,
                    mask: true,
                    selection_reg: false,
                    weight_reg: false,
                    overlap: false,
                };
                let mut seed = photo_backward([x0[0], x0[1], x0[2]], x0[3], gt, gm, inv, terms);
                hook.apply(Node::Photo, &mut seed);
                acc.compare(cfg, &x0, &seed, |x| {
                    inv * ((0..3).map(|j| (x[j] - gt[j]).powi(2)).sum::<f64>() + (x[3] - gm).powi(2))
                });
            }
            Node::SelectionReg => {
                let mut t = Matrix::zeros(p_n, c_n);
                for v in t.as_mut_slice() {
                    // Stay clear of the corners at 0 and 1.
                    *v = [rng.random_range(-0.5..-0.05), rng.random_range(0.05..0.95), rng.random_range(1.05..1.5)]
                        [rng.random_range(0..3)];
                }
                let (_, mut g) = selection_penalty(&t);
                hook.apply(Node::SelectionReg, g.as_mut_slice());
                acc.compare(cfg, t.as_slice(), g.as_slice(), |x| {
                    x.iter().map(|&v| (-v).max(0.0) + (v - 1.0).max(0.0)).sum()
                });
            }
            Node::WeightReg => {
                let w: Vec<f64> = (0..c_n).map(|_| 1.0 + signed(rng, 0.05, 0.5)).collect();
                let (_, mut g) = weight_penalty(&w);
                hook.apply(Node::WeightReg, &mut g);
                acc.compare(cfg, &w, &g, |x| x.iter().map(|v| (v - 1.0).abs()).sum());
            }
            Node::Overlap => {
                let o: Vec<f64> = (0..c_n).map(|_| rng.random_range(-0.05..0.05)).collect();
                let mut g_o = vec![0.0; c_n];
                let g = rng.random_range(0.5..1.5);
                overlap_backward(&o, &active, g, &mut g_o);
                hook.apply(Node::Overlap, &mut g_o);
                acc.compare(cfg, &o, &g_o, |x| {
                    g * x.iter().map(|v| (-SHARPNESS * v).exp()).sum::<f64>().max(OVERLAP_FLOOR)
                });
            }
        }
    }
    Ok(NodeCheck {
        node,
        compared: acc.compared,
        max_abs_err: acc.max_abs_err,
        passed: acc.passed && acc.compared > 0,
    })
}

/// Run both layers of the gradient check on a random instance drawn from `seed`.
pub fn run_gradcheck(cfg: &GradCheckConfig, seed: u64, fault: Option<AdjointFault>) -> Result<GradCheckReport> {
    let hook = FaultHook(fault);
    let inst = random_instance(cfg, seed)?;

    let mut node_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let nodes = Node::ALL
        .into_iter()
        .map(|n| check_node(cfg, n, hook, &mut node_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut failing_nodes: Vec<Node> = nodes.iter().filter(|n| !n.passed).map(|n| n.node).collect();

    let mut forward = Vec::new();
    let mut groups = Vec::new();
    let mut engine_error = None;
    for phase in Phase::ALL {
        match check_phase(cfg, &inst, phase, hook) {
            Ok(r) => {
                forward.push(r.forward);
                groups.extend(r.groups);
            }
            Err(Error::NonFiniteGradient { node }) => {
                engine_error = Some(format!("phase {}: non-finite gradient at node '{node}'", phase.number()));
                if !failing_nodes.contains(&node) {
                    failing_nodes.push(node);
                }
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let checked = groups.iter().filter(|g| g.trainable).map(|g| g.checked).sum();
    let skipped = groups.iter().map(|g| g.skipped).sum();
    let passed = engine_error.is_none()
        && failing_nodes.is_empty()
        && forward.iter().all(|f| f.matches)
        && groups.iter().all(|g| g.passed)
        && checked >= MIN_CHECKED;
    Ok(GradCheckReport {
        seed,
        config: *cfg,
        forward,
        groups,
        nodes,
        engine_error,
        checked,
        skipped,
        failing_nodes,
        passed,
    })
}
