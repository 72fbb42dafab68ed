//! Losses, Adam, the three-phase schedule, binarization and primitive dropout.

mod adam;
mod dropout;
mod fit;

pub use adam::{Adam, AdamConfig, GroupOptimizer};
pub use dropout::{
    binarize_selection, primitive_dropout, probe_points, shape_bounds, DropoutStats,
    DROPOUT_INSIDE_THRESHOLD,
};
pub use fit::{
    run_fit, DropoutSnapshot, FitConfig, FitObserver, FitOutcome, FitReport, NoopObserver, PhaseReport,
    StepInfo, ViewSelection,
};

use serde::{Deserialize, Serialize};

use crate::assembly::{min_active, FieldKernel, PrimitiveBank};
use crate::diff::{LossSpec, LossTerms, Trainable, INSIDE_THRESHOLD, OVERLAP_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::render::{OpacityRule, SHARPNESS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
    Three,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::One, Phase::Two, Phase::Three];

    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
            Phase::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Phase> {
        match n {
            1 => Some(Phase::One),
            2 => Some(Phase::Two),
            3 => Some(Phase::Three),
            _ => None,
        }
    }

    pub fn next(self) -> Option<Phase> {
        Phase::from_number(self.number() + 1)
    }
}

/// Which occupancy field feeds the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupancy {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub occupancy: Occupancy,
    pub opacity: OpacityRule,
    pub terms: LossTerms,
    pub trainable: Trainable,
    pub iterations: usize,
    /// Steps between dropout passes; `None` outside Phase 3 or when disabled.
    pub dropout_period: Option<usize>,
}

impl PhaseConfig {
    pub fn new(phase: Phase, mask_only: bool, iterations: usize) -> Self {
        let color = !mask_only;
        match phase {
            Phase::One => Self {
                phase,
                occupancy: Occupancy::Soft,
                opacity: OpacityRule::SoftOccupancy,
                terms: LossTerms {
                    color,
                    mask: true,
                    selection_reg: true,
                    weight_reg: true,
                    overlap: false,
                },
                trainable: Trainable {
                    params: true,
                    selection: true,
                    weights: true,
                    colors: color,
                },
                iterations,
                dropout_period: None,
            },
            Phase::Two => Self {
                phase,
                occupancy: Occupancy::Hard,
                opacity: OpacityRule::ExpHard,
                terms: LossTerms {
                    color,
                    mask: true,
                    selection_reg: true,
                    weight_reg: false,
                    overlap: false,
                },
                trainable: Trainable {
                    params: true,
                    selection: true,
                    weights: false,
                    colors: color,
                },
                iterations,
                dropout_period: None,
            },
            Phase::Three => Self {
                phase,
                occupancy: Occupancy::Hard,
                opacity: OpacityRule::ExpHard,
                terms: LossTerms {
                    color,
                    mask: true,
                    selection_reg: false,
                    weight_reg: false,
                    overlap: true,
                },
                trainable: Trainable {
                    params: true,
                    selection: false,
                    weights: false,
                    colors: color,
                },
                iterations,
                dropout_period: None,
            },
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            opacity: self.opacity,
            terms: self.terms,
            trainable: self.trainable,
        }
    }
}

/// Mean squared color error plus mean squared mask error over the batch.
pub fn loss_photo(
    rendered_rgb: &[[f64; 3]],
    rendered_mask: &[f64],
    gt_rgb: &[[f64; 3]],
    gt_mask: &[f64],
    mask_only: bool,
) -> Result<f64> {
    let b = rendered_mask.len();
    if b == 0 {
        return Err(Error::Config("photometric loss over an empty batch".into()));
    }
    if gt_mask.len() != b || rendered_rgb.len() != b || gt_rgb.len() != b {
        return Err(Error::shape("loss_photo", b, gt_mask.len()));
    }
    let mut color = 0.0;
    let mut mask = 0.0;
    for i in 0..b {
        if !mask_only {
            for k in 0..3 {
                let e = rendered_rgb[i][k] - gt_rgb[i][k];
                color += e * e;
            }
        }
        let e = rendered_mask[i] - gt_mask[i];
        mask += e * e;
    }
    Ok((color + mask) / b as f64)
}

pub fn loss_t(t: &Matrix) -> f64 {
    t.as_slice()
        .iter()
        .map(|&v| (-v).max(0.0) + (v - 1.0).max(0.0))
        .sum()
}

pub fn loss_w(w: &[f64]) -> f64 {
    w.iter().map(|v| (v - 1.0).abs()).sum()
}

/// Mean of `max(h, 1.9)` over the probe points with `a* < 0.01`.
/// Returns `(loss, |Ω|)`; an empty support set gives zero.
pub fn loss_overlap(bank: &PrimitiveBank, points: &[[f64; 3]]) -> (f64, usize) {
    let kernel = FieldKernel::new(bank);
    let mut o = vec![0.0; bank.convex_count()];
    let mut sum = 0.0;
    let mut count = 0;
    for &x in points {
        kernel.eval_o(x, &mut o);
        match min_active(&o, kernel.active()) {
            Some((a, _)) if a < INSIDE_THRESHOLD => {
                let h: f64 = o
                    .iter()
                    .zip(kernel.active())
                    .filter(|(_, &on)| on)
                    .map(|(&v, _)| (-SHARPNESS * v).exp())
                    .sum();
                sum += h.max(OVERLAP_FLOOR);
                count += 1;
            }
            _ => {}
        }
    }
    if count == 0 {
        log::warn!("overlap support set is empty; the shape has vanished");
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

/// Mean overlap indicator `h` over the inside probe points.
pub fn mean_inside_overlap(bank: &PrimitiveBank, points: &[[f64; 3]]) -> Option<f64> {
    let kernel = FieldKernel::new(bank);
    let mut o = vec![0.0; bank.convex_count()];
    let mut sum = 0.0;
    let mut count = 0usize;
    for &x in points {
        kernel.eval_o(x, &mut o);
        if let Some((a, _)) = min_active(&o, kernel.active()) {
            if a < INSIDE_THRESHOLD {
                sum += o
                    .iter()
                    .zip(kernel.active())
                    .filter(|(_, &on)| on)
                    .map(|(&v, _)| (-SHARPNESS * v).exp())
                    .sum::<f64>();
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}
