use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    binarize_selection, mean_inside_overlap, primitive_dropout, probe_points, AdamConfig,
    DropoutStats, GroupOptimizer, Phase, PhaseConfig,
};
use crate::assembly::{
    FieldKernel, InitParams, PrimitiveBank, SelectionMode, DEFAULT_CONVEXES, DEFAULT_PRIMITIVES,
};
use crate::dataset::Dataset;
use crate::diff::{GradientBundle, LossBreakdown, LossGraph, RayBatch};
use crate::error::{Error, Result};
use crate::extract::{extract_parts, AssemblyCheckpoint};
use crate::metrics::{mask_iou, psnr, ssim, ViewMetrics};
use crate::render::{render_view, OpacityRule, SilhouetteSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewSelection {
    Random,
    RoundRobin,
}

/// Every knob of a fit. Unspecified keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub primitives: usize,
    pub convexes: usize,
    pub mask_only: bool,
    pub samples_per_ray: usize,
    pub n_random: usize,
    pub n_contour: usize,
    pub contour_noise: f64,
    pub lr: f64,
    /// Learning rate of the selection matrix; `lr` when absent.
    pub selection_lr: Option<f64>,
    /// Per-phase multiplier on both learning rates.
    pub phase_lr_scale: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub phase3_iters: usize,
    pub binarize_threshold: f64,
    pub dropout: bool,
    pub dropout_period: usize,
    pub v_threshold: f64,
    /// Probe points drawn around the shape for each dropout pass.
    pub probe_points: usize,
    pub overlap_loss: bool,
    /// Points drawn around the Phase-2 shape for the overlap loss.
    pub overlap_points: usize,
    pub view_selection: ViewSelection,
    /// View indices excluded from training and reported separately.
    pub held_out: Vec<usize>,
    pub init: InitParams,
    /// Grid resolution used to count non-empty parts.
    pub parts_resolution: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            primitives: DEFAULT_PRIMITIVES,
            convexes: DEFAULT_CONVEXES,
            mask_only: false,
            samples_per_ray: 96,
            n_random: 256,
            n_contour: 1000,
            contour_noise: 2.0,
            lr: adam.lr,
            selection_lr: None,
            phase_lr_scale: [1.0; 3],
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            phase1_iters: 3000,
            phase2_iters: 2000,
            phase3_iters: 2000,
            binarize_threshold: 0.01,
            dropout: true,
            dropout_period: 400,
            v_threshold: 0.002,
            probe_points: 40_960,
            overlap_loss: true,
            overlap_points: 40_960,
            view_selection: ViewSelection::Random,
            held_out: Vec::new(),
            init: InitParams::default(),
            parts_resolution: 64,
        }
    }
}

impl FitConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FitConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Adam settings for `phase`, with its learning-rate scale applied.
    pub fn adam(&self, phase: Phase) -> AdamConfig {
        AdamConfig {
            lr: self.lr * self.lr_scale(phase),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr_scale(&self, phase: Phase) -> f64 {
        self.phase_lr_scale[usize::from(phase.number() - 1)]
    }

    pub fn selection_lr(&self, phase: Phase) -> f64 {
        self.selection_lr.unwrap_or(self.lr) * self.lr_scale(phase)
    }

    pub fn iterations(&self, phase: Phase) -> usize {
        match phase {
            Phase::One => self.phase1_iters,
            Phase::Two => self.phase2_iters,
            Phase::Three => self.phase3_iters,
        }
    }

    pub fn phase_config(&self, phase: Phase) -> PhaseConfig {
        let mut cfg = PhaseConfig::new(phase, self.mask_only, self.iterations(phase));
        if phase == Phase::Three {
            cfg.terms.overlap = self.overlap_loss;
            cfg.dropout_period = self.dropout.then_some(self.dropout_period);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.primitives == 0 || self.convexes == 0 {
            bad.push("primitives and convexes must be positive".to_string());
        }
        if self.samples_per_ray < 2 {
            bad.push("samples_per_ray must be at least 2".to_string());
        }
        if self.n_random + self.n_contour == 0 {
            bad.push("n_random + n_contour must be positive".to_string());
        }
        if !(self.contour_noise >= 0.0) {
            bad.push("contour_noise must be non-negative".to_string());
        }
        if self.selection_lr.is_some_and(|v| !(v > 0.0)) {
            bad.push("selection_lr must be positive".to_string());
        }
        if self.phase_lr_scale.iter().any(|v| !(*v > 0.0)) {
            bad.push("phase_lr_scale entries must be positive".to_string());
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            bad.push("lr and eps must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)".to_string());
        }
        if self.dropout_period == 0 {
            bad.push("dropout_period must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.v_threshold) {
            bad.push("v_threshold must lie in [0, 1]".to_string());
        }
        if self.parts_resolution < 16 {
            bad.push("parts_resolution must be at least 16".to_string());
        }
        if !(self.init.param_sigma >= 0.0) || !(self.init.selection_max >= 0.0) {
            bad.push("init.param_sigma and init.selection_max must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.init.selection_density) {
            bad.push("init.selection_density must lie in [0, 1]".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub iterations: usize,
    /// Total loss of every step.
    pub loss: Vec<f64>,
    pub final_loss: LossBreakdown,
    pub dropout: Vec<DropoutStats>,
    pub seconds: f64,
}

/// State right before the first dropout pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSnapshot {
    pub active_primitives: usize,
    pub held_out_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    pub config_hash: String,
    pub resumed_after_phase: Option<u8>,
    pub phases: Vec<PhaseReport>,
    pub active_primitives: usize,
    pub active_convexes: usize,
    pub parts: usize,
    pub views: Vec<ViewMetrics>,
    pub pre_dropout: Option<DropoutSnapshot>,
    /// Mean overlap indicator over inside probe points of the final shape.
    pub mean_inside_overlap: Option<f64>,
    pub under_constrained: bool,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

impl FitReport {
    /// Mean mask IoU over held-out views, if any.
    pub fn held_out_iou(&self) -> Option<f64> {
        mean(self.views.iter().filter(|v| v.held_out).map(|v| v.mask_iou))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub struct StepInfo<'a> {
    pub config: &'a PhaseConfig,
    pub iteration: usize,
    pub loss: &'a LossBreakdown,
    pub gradient: &'a GradientBundle,
    /// The bank before the update, when the observer asked for snapshots.
    pub before: Option<&'a PrimitiveBank>,
    pub after: &'a PrimitiveBank,
}

/// Instrumentation hooks called from inside the fit loop.
pub trait FitObserver {
    fn wants_snapshots(&self) -> bool {
        false
    }
    fn on_phase_start(&mut self, _config: &PhaseConfig, _bank: &PrimitiveBank) {}
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_dropout(&mut self, _stats: &DropoutStats, _bank: &PrimitiveBank) {}
    fn on_phase_end(&mut self, _config: &PhaseConfig, _bank: &PrimitiveBank, _colors: &[[f64; 3]]) {}
}

pub struct NoopObserver;

impl FitObserver for NoopObserver {}

pub struct FitOutcome {
    pub checkpoint: AssemblyCheckpoint,
    pub report: FitReport,
}

/// Independent random streams so that toggling one feature does not shift
/// the samples drawn by another.
struct Streams {
    init: ChaCha8Rng,
    pixels: ChaCha8Rng,
    probes: ChaCha8Rng,
    report: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(1),
            pixels: stream(2),
            probes: stream(3),
            report: stream(4),
        }
    }
}

fn evaluate_views(
    dataset: &Dataset,
    bank: &PrimitiveBank,
    colors: &[[f64; 3]],
    held_out: &[usize],
    samples_per_ray: usize,
    only_held_out: bool,
) -> Result<Vec<ViewMetrics>> {
    let kernel = FieldKernel::new(bank);
    let mut out = Vec::new();
    for (i, view) in dataset.views.iter().enumerate() {
        let is_held = held_out.contains(&i);
        if only_held_out && !is_held {
            continue;
        }
        let r = render_view(&kernel, bank.weights(), colors, &view.camera, OpacityRule::ExpHard, samples_per_ray)?;
        out.push(ViewMetrics {
            view: i,
            held_out: is_held,
            psnr: psnr(&r.rgb, &view.image)?,
            ssim: ssim(&r.rgb, &view.image)?,
            mask_iou: mask_iou(&r.mask, &view.mask)?,
        });
    }
    Ok(out)
}

/// Run the remaining phases of the schedule and evaluate the result.
///
/// With `resume`, phases up to and including the checkpoint's completed phase
/// are skipped and the checkpoint's state is the starting point.
pub fn run_fit(
    dataset: &Dataset,
    config: &FitConfig,
    resume: Option<AssemblyCheckpoint>,
    observer: &mut dyn FitObserver,
) -> Result<FitOutcome> {
    let started = Instant::now();
    config.validate()?;
    let n_views = dataset.views.len();
    let mut problems = Vec::new();
    for &h in &config.held_out {
        if h >= n_views {
            problems.push(format!("held-out view {h} does not exist ({n_views} views)"));
        }
    }
    let training: Vec<usize> = (0..n_views).filter(|i| !config.held_out.contains(i)).collect();
    if training.is_empty() {
        problems.push("no training views remain after excluding held-out views".into());
    }
    let mut samplers = Vec::new();
    for &i in &training {
        match SilhouetteSampler::new(&dataset.views[i].mask) {
            Ok(s) => samplers.push(s),
            Err(e) => problems.push(format!("view {i:03}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let mut warnings = Vec::new();
    let under_constrained = training.len() < 2;
    if under_constrained {
        let msg = format!("only {} training view(s); the fit is under-constrained", training.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut rng = Streams::new(config.seed);
    let (mut bank, mut colors, resumed_after) = match resume {
        Some(ck) => {
            let done = ck.completed_phase;
            (ck.bank, ck.colors, done)
        }
        None => {
            let bank = PrimitiveBank::random(config.primitives, config.convexes, &config.init, &mut rng.init)?;
            let colors = vec![[0.5; 3]; config.convexes];
            (bank, colors, None)
        }
    };
    if colors.len() != bank.convex_count() {
        return Err(Error::shape("run_fit colors", bank.convex_count(), colors.len()));
    }
    let first = match resumed_after {
        None => Some(Phase::One),
        Some(p) => p.next(),
    };

    let mut phases = Vec::new();
    let mut pre_dropout = None;
    let mut overlap_pts: Option<Vec<[f64; 3]>> = None;
    let mut phase = first;
    let mut completed = resumed_after;
    while let Some(ph) = phase {
        let pcfg = config.phase_config(ph);
        let t0 = Instant::now();
        if ph == Phase::Three && bank.mode() == SelectionMode::Float {
            binarize_selection(&mut bank, config.binarize_threshold)?;
        }
        if ph == Phase::Three && pcfg.terms.overlap {
            overlap_pts = Some(probe_points(&bank, config.overlap_points, &mut rng.probes));
        }
        observer.on_phase_start(&pcfg, &bank);
        let spec = pcfg.loss_spec();
        let mut opt = GroupOptimizer::new(&bank, pcfg.trainable, config.adam(ph))
            .with_selection_lr(config.selection_lr(ph));
        let mut report = PhaseReport {
            phase: ph.number(),
            iterations: pcfg.iterations,
            ..Default::default()
        };
        for it in 0..pcfg.iterations {
            let slot = match config.view_selection {
                ViewSelection::Random => rng.pixels.random_range(0..training.len()),
                ViewSelection::RoundRobin => it % training.len(),
            };
            let view = &dataset.views[training[slot]];
            let pixels = samplers[slot].sample(
                &view.image,
                &view.mask,
                config.n_random,
                config.n_contour,
                config.contour_noise,
                &mut rng.pixels,
            );
            let batch = RayBatch::from_pixels(&view.camera, &pixels, config.samples_per_ray, Some(&mut rng.pixels))?;
            let overlap = if spec.terms.overlap { overlap_pts.as_deref() } else { None };
            let mut graph = LossGraph::new(&bank, &colors, spec, &batch, overlap);
            let (loss, grad) = graph.forward_backward()?;
            let before = observer.wants_snapshots().then(|| bank.clone());
            opt.step(&mut bank, &mut colors, &grad)?;
            observer.on_step(&StepInfo {
                config: &pcfg,
                iteration: it,
                loss: &loss,
                gradient: &grad,
                before: before.as_ref(),
                after: &bank,
            });
            report.loss.push(loss.total);
            report.final_loss = loss;

            if let Some(period) = pcfg.dropout_period {
                if (it + 1) % period == 0 {
                    if pre_dropout.is_none() {
                        let held = evaluate_views(dataset, &bank, &colors, &config.held_out, config.samples_per_ray, true)?;
                        pre_dropout = Some(DropoutSnapshot {
                            active_primitives: bank.active_primitive_count(),
                            held_out_iou: mean(held.iter().map(|v| v.mask_iou)),
                        });
                    }
                    let probes = probe_points(&bank, config.probe_points, &mut rng.probes);
                    let stats = primitive_dropout(&mut bank, &probes, config.v_threshold)?;
                    log::info!(
                        "phase 3 step {}: dropout kept {} of {} rows",
                        it + 1,
                        stats.rows_after,
                        stats.rows_before
                    );
                    observer.on_dropout(&stats, &bank);
                    report.dropout.push(stats);
                }
            }
            if it % 100 == 0 {
                log::debug!("phase {} step {it}: loss {:.6}", ph.number(), loss.total);
            }
        }
        report.seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "phase {} done in {:.1}s, final loss {:.6}",
            ph.number(),
            report.seconds,
            report.final_loss.total
        );
        observer.on_phase_end(&pcfg, &bank, &colors);
        phases.push(report);
        completed = Some(ph);
        phase = ph.next();
    }

    let views = evaluate_views(dataset, &bank, &colors, &config.held_out, config.samples_per_ray, false)?;
    let parts = if bank.mode() == SelectionMode::Binary {
        extract_parts(&bank, &colors, config.parts_resolution)?.parts.len()
    } else {
        0
    };
    let final_probes = probe_points(&bank, config.overlap_points.max(1), &mut rng.report);
    let report = FitReport {
        seed: config.seed,
        config_hash: config.hash(),
        resumed_after_phase: resumed_after.map(Phase::number),
        phases,
        active_primitives: bank.active_primitive_count(),
        active_convexes: bank.active_convex_count(),
        parts,
        views,
        pre_dropout,
        mean_inside_overlap: mean_inside_overlap(&bank, &final_probes),
        under_constrained,
        warnings,
        seconds: started.elapsed().as_secs_f64(),
    };
    let checkpoint = AssemblyCheckpoint {
        bank,
        colors,
        completed_phase: completed,
        config_hash: report.config_hash.clone(),
        seed: config.seed,
    };
    Ok(FitOutcome { checkpoint, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = FitConfig::default();
        let back = FitConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = FitConfig::from_toml_str("seed = 7\nmask_only = true\n[init]\nparam_sigma = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.mask_only);
        assert_eq!(cfg.init.param_sigma, 0.2);
        assert_eq!(cfg.n_contour, 1000);
        assert_eq!(cfg.lr, 1e-4);
        assert_ne!(cfg.hash(), FitConfig::default().hash());
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(matches!(FitConfig::from_toml_str("samples_per_ray = 1"), Err(Error::Config(_))));
        assert!(matches!(FitConfig::from_toml_str("no_such_key = 1"), Err(Error::Config(_))));
        assert!(matches!(
            FitConfig::from_toml_str("phase_lr_scale = [1.0, 0.0, 1.0]"),
            Err(Error::Config(_))
        ));
        assert!(matches!(FitConfig::from_toml_str("selection_lr = -1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn learning_rates_follow_phase_scale() {
        let cfg = FitConfig::from_toml_str("lr = 0.1\nselection_lr = 0.001\nphase_lr_scale = [1.0, 0.5, 0.25]").unwrap();
        assert_eq!(cfg.adam(Phase::One).lr, 0.1);
        assert_eq!(cfg.adam(Phase::Three).lr, 0.025);
        assert_eq!(cfg.selection_lr(Phase::Two), 0.0005);
        let plain = FitConfig::from_toml_str("lr = 0.1").unwrap();
        assert_eq!(plain.selection_lr(Phase::One), 0.1);
    }

    #[test]
    fn phase_three_follows_toggles() {
        let cfg = FitConfig {
            overlap_loss: false,
            dropout: false,
            ..Default::default()
        };
        let p3 = cfg.phase_config(Phase::Three);
        assert!(!p3.terms.overlap);
        assert_eq!(p3.dropout_period, None);
        assert_eq!(FitConfig::default().phase_config(Phase::Three).dropout_period, Some(400));
    }
}
