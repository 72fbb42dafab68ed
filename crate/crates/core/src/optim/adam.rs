use serde::{Deserialize, Serialize};

use crate::assembly::PrimitiveBank;
use crate::diff::{GradientBundle, Trainable};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over one flat variable group, with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One update. Rejects the whole step if any gradient is non-finite.
    pub fn step(&mut self, group: &'static str, vars: &mut [f64], grads: &[f64]) -> Result<()> {
        if vars.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("Adam::step", self.m.len(), grads.len()));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::RejectedStep { group, index });
        }
        self.apply(vars, grads);
        Ok(())
    }

    fn apply(&mut self, vars: &mut [f64], grads: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..vars.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            vars[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One Adam per trainable group of a phase; frozen groups have no state and never move.
#[derive(Clone, Debug)]
pub struct GroupOptimizer {
    params: Option<Adam>,
    selection: Option<Adam>,
    weights: Option<Adam>,
    colors: Option<Adam>,
}

impl GroupOptimizer {
    pub fn new(bank: &PrimitiveBank, trainable: Trainable, cfg: AdamConfig) -> Self {
        let p = bank.primitive_count();
        let c = bank.convex_count();
        Self {
            params: trainable.params.then(|| Adam::new(p * crate::assembly::PARAM_COLS, cfg)),
            selection: trainable.selection.then(|| Adam::new(p * c, cfg)),
            weights: trainable.weights.then(|| Adam::new(c, cfg)),
            colors: trainable.colors.then(|| Adam::new(c * 3, cfg)),
        }
    }

    /// Override the learning rate of the selection group only.
    pub fn with_selection_lr(mut self, lr: f64) -> Self {
        if let Some(a) = self.selection.as_mut() {
            a.cfg.lr = lr;
        }
        self
    }

    /// Update every trainable group, or none of them if any gradient is non-finite.
    /// Colors are projected back onto `[0, 1]`.
    pub fn step(
        &mut self,
        bank: &mut PrimitiveBank,
        colors: &mut [[f64; 3]],
        g: &GradientBundle,
    ) -> Result<()> {
        let groups: [(&'static str, bool, &[f64]); 4] = [
            ("params", self.params.is_some(), g.d_params.as_slice()),
            ("selection", self.selection.is_some(), g.d_selection.as_slice()),
            ("weights", self.weights.is_some(), &g.d_weights),
            ("colors", self.colors.is_some(), g.d_colors.as_flattened()),
        ];
        for (group, on, grads) in groups {
            if on {
                if let Some(index) = grads.iter().position(|v| !v.is_finite()) {
                    return Err(Error::RejectedStep { group, index });
                }
            }
        }
        if let Some(a) = self.params.as_mut() {
            a.step("params", bank.params.as_mut_slice(), g.d_params.as_slice())?;
        }
        if let Some(a) = self.selection.as_mut() {
            a.step("selection", bank.selection_mut()?.as_mut_slice(), g.d_selection.as_slice())?;
        }
        if let Some(a) = self.weights.as_mut() {
            a.step("weights", bank.weights_mut(), &g.d_weights)?;
        }
        if let Some(a) = self.colors.as_mut() {
            a.step("colors", colors.as_flattened_mut(), g.d_colors.as_flattened())?;
            for v in colors.as_flattened_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{InitParams, SelectionMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(1, AdamConfig::default());
        let mut x = [0.5];
        a.step("x", &mut x, &[1.0]).unwrap();
        assert!((x[0] - (0.5 - 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut a = Adam::new(2, AdamConfig::default());
        let mut x = [0.5, -0.25];
        a.step("x", &mut x, &[0.3, -0.2]).unwrap();
        let before = x;
        let (m0, v0) = (a.moments().0.to_vec(), a.moments().1.to_vec());
        let mut y = before;
        let mut b = a.clone();
        b.step("x", &mut y, &[0.0, 0.0]).unwrap();
        let (m1, v1) = b.moments();
        for i in 0..2 {
            assert!((m1[i] - 0.9 * m0[i]).abs() < 1e-18);
            assert!((v1[i] - 0.999 * v0[i]).abs() < 1e-18);
        }
        // stale momentum still moves the variable; a fresh optimizer does not
        let mut fresh = Adam::new(2, AdamConfig::default());
        let mut z = before;
        fresh.step("x", &mut z, &[0.0, 0.0]).unwrap();
        assert_eq!(z, before);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut a = Adam::new(3, AdamConfig::default());
        let mut x = [1.0, 2.0, 3.0];
        let err = a.step("params", &mut x, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::RejectedStep { group: "params", index: 1 }));
        assert_eq!(x, [1.0, 2.0, 3.0]);
        assert_eq!(a.steps(), 0);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = PrimitiveBank::random(4, 2, &InitParams::default(), &mut rng).unwrap();
        let t_before = bank.selection().clone();
        let w_before = bank.weights().to_vec();
        let mut colors = vec![[0.5; 3]; 2];
        let trainable = Trainable { params: true, selection: false, weights: false, colors: false };
        let mut opt = GroupOptimizer::new(&bank, trainable, AdamConfig::default());
        let mut g = GradientBundle::zeros(4, 2);
        g.d_params.as_mut_slice().fill(1.0);
        g.d_selection.as_mut_slice().fill(1.0);
        g.d_weights.fill(1.0);
        g.d_colors.iter_mut().for_each(|c| *c = [1.0; 3]);
        opt.step(&mut bank, &mut colors, &g).unwrap();
        assert_eq!(bank.selection(), &t_before);
        assert_eq!(bank.weights(), &w_before[..]);
        assert_eq!(colors, vec![[0.5; 3]; 2]);
        assert_eq!(bank.mode(), SelectionMode::Float);
    }
}
