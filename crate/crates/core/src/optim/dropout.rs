use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{dot7, lift, min_active, FieldKernel, PrimitiveBank, SelectionMode};
use crate::diff::INSIDE_THRESHOLD;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Inside test used when measuring shape variation during dropout.
pub const DROPOUT_INSIDE_THRESHOLD: f64 = 0.1;

/// Margin added around the shape's bounding box before drawing probes.
const PROBE_DILATION: f64 = 0.1;
const BOUNDS_GRID: usize = 32;

/// Threshold a Float-mode `T` (entries `> threshold` become 1) and switch to Binary.
pub fn binarize_selection(bank: &mut PrimitiveBank, threshold: f64) -> Result<()> {
    if bank.mode() != SelectionMode::Float {
        return Err(Error::Mode { expected: "float" });
    }
    let t = bank.selection();
    let data = t
        .as_slice()
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    let binary = Matrix::from_vec(t.rows(), t.cols(), data)?;
    let active = (0..binary.cols()).any(|c| (0..binary.rows()).any(|p| binary.get(p, c) != 0.0));
    if !active {
        return Err(Error::NoActiveConvex);
    }
    bank.selection = binary;
    bank.mode = SelectionMode::Binary;
    Ok(())
}

/// Axis-aligned bounds of the grid nodes with `a* < 0.01`, padded by one grid step.
pub fn shape_bounds(bank: &PrimitiveBank) -> Option<([f64; 3], [f64; 3])> {
    let kernel = FieldKernel::new(bank);
    if !kernel.any_active() {
        return None;
    }
    let n = BOUNDS_GRID;
    let step = 2.0 / n as f64;
    let coord = |i: usize| -1.0 + i as f64 * step;
    let slabs: Vec<Option<([f64; 3], [f64; 3])>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut scratch = vec![0.0; bank.convex_count()];
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            let mut any = false;
            for j in 0..=n {
                for k in 0..=n {
                    let x = [coord(i), coord(j), coord(k)];
                    if kernel.a_star(x, &mut scratch) < INSIDE_THRESHOLD {
                        any = true;
                        for d in 0..3 {
                            lo[d] = lo[d].min(x[d]);
                            hi[d] = hi[d].max(x[d]);
                        }
                    }
                }
            }
            any.then_some((lo, hi))
        })
        .collect();
    let mut out: Option<([f64; 3], [f64; 3])> = None;
    for (lo, hi) in slabs.into_iter().flatten() {
        let acc = out.get_or_insert((lo, hi));
        for d in 0..3 {
            acc.0[d] = acc.0[d].min(lo[d]);
            acc.1[d] = acc.1[d].max(hi[d]);
        }
    }
    out.map(|(lo, hi)| (lo.map(|v| v - step), hi.map(|v| v + step)))
}

/// Uniform points in the shape's bounding box dilated by 0.1 (the whole cube
/// `[-1, 1]³` if the shape is empty).
pub fn probe_points<R: Rng + ?Sized>(bank: &PrimitiveBank, count: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let (lo, hi) = shape_bounds(bank).unwrap_or(([-1.0; 3], [1.0; 3]));
    let lo = lo.map(|v| v - PROBE_DILATION);
    let hi = hi.map(|v| v + PROBE_DILATION);
    (0..count)
        .map(|_| std::array::from_fn(|d| lo[d] + rng.random::<f64>() * (hi[d] - lo[d])))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutStats {
    /// Nonzero `T` rows before the pass.
    pub rows_before: usize,
    pub rows_after: usize,
    /// Rows whose removal was kept, in index order.
    pub dropped: Vec<usize>,
    /// Largest shape variation among accepted drops.
    pub max_accepted_v: f64,
}

struct ProbeState {
    o: Vec<f64>,
    inside: Vec<bool>,
}

fn probe_state(kernel: &FieldKernel, probes: &[[f64; 3]]) -> ProbeState {
    let c = kernel.convexes();
    let mut o = vec![0.0; probes.len() * c];
    if c > 0 {
        o.par_chunks_mut(c)
            .zip(probes)
            .for_each(|(row, &x)| kernel.eval_o(x, row));
    }
    let inside = (0..probes.len())
        .map(|k| {
            min_active(&o[k * c..(k + 1) * c], kernel.active())
                .is_some_and(|(a, _)| a < DROPOUT_INSIDE_THRESHOLD)
        })
        .collect();
    ProbeState { o, inside }
}

/// Try zeroing each nonzero row of `T` in index order against the current
/// bank, keeping the removal when the fraction of probes whose inside state
/// (`a* < 0.1`) flips is at most `v_threshold`.
pub fn primitive_dropout(
    bank: &mut PrimitiveBank,
    probes: &[[f64; 3]],
    v_threshold: f64,
) -> Result<DropoutStats> {
    if bank.mode() != SelectionMode::Binary {
        return Err(Error::Mode { expected: "binary" });
    }
    let rows_before = bank.active_primitive_count();
    let mut stats = DropoutStats {
        rows_before,
        ..Default::default()
    };
    if probes.is_empty() {
        stats.rows_after = rows_before;
        return Ok(stats);
    }
    let c_n = bank.convex_count();
    let k_n = probes.len() as f64;
    let lifted: Vec<[f64; 7]> = probes.iter().map(|&x| lift(x)).collect();
    let mut kernel = FieldKernel::new(bank);
    let mut state = probe_state(&kernel, probes);
    let mut column_nnz: Vec<usize> = (0..c_n)
        .map(|c| (0..bank.primitive_count()).filter(|&p| bank.selection.get(p, c) != 0.0).count())
        .collect();

    for p in 0..bank.primitive_count() {
        let row: Vec<(usize, f64)> = bank
            .selection
            .row(p)
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .map(|(c, &t)| (c, t))
            .collect();
        if row.is_empty() {
            continue;
        }
        let mut active_after = kernel.active().to_vec();
        for &(c, _) in &row {
            if column_nnz[c] == 1 {
                active_after[c] = false;
            }
        }
        let coef = kernel.coefs[p];
        let o = &state.o;
        let inside = &state.inside;
        let flips: usize = (0..probes.len())
            .into_par_iter()
            .with_min_len(1024)
            .map_init(
                || vec![0.0; c_n],
                |buf, k| {
                    let r = dot7(&lifted[k], &coef).max(0.0);
                    let o_row = &o[k * c_n..(k + 1) * c_n];
                    buf.copy_from_slice(o_row);
                    for &(c, t) in &row {
                        buf[c] -= r * t;
                    }
                    let b_inside = min_active(buf, &active_after)
                        .is_some_and(|(b, _)| b < DROPOUT_INSIDE_THRESHOLD);
                    usize::from(b_inside != inside[k])
                },
            )
            .sum();
        let v = flips as f64 / k_n;
        if v <= v_threshold {
            bank.zero_selection_row(p);
            for &(c, _) in &row {
                column_nnz[c] -= 1;
            }
            kernel = FieldKernel::new(bank);
            state = probe_state(&kernel, probes);
            stats.dropped.push(p);
            stats.max_accepted_v = stats.max_accepted_v.max(v);
        }
    }
    debug_assert!(stats.max_accepted_v <= v_threshold);
    stats.rows_after = bank.active_primitive_count();
    debug_assert!(stats.rows_after <= stats.rows_before);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(axis: usize, sign: f64, offset: f64) -> [f64; 7] {
        // Steep flattened quadric 100·(sign·x_axis − offset), negative inside.
        let mut r = [0.0; 7];
        r[3 + axis] = 100.0 * sign;
        r[6] = -100.0 * offset;
        r
    }

    fn cube_rows() -> Vec<[f64; 7]> {
        let mut rows = Vec::new();
        for axis in 0..3 {
            rows.push(plane(axis, 1.0, 0.5));
            rows.push(plane(axis, -1.0, 0.5));
        }
        rows
    }

    fn bank_from(rows: &[[f64; 7]], t: Matrix) -> PrimitiveBank {
        let c = t.cols();
        PrimitiveBank::new(Matrix::from_rows(rows), t, vec![1.0; c], SelectionMode::Binary).unwrap()
    }

    fn brute_inside(bank: &PrimitiveBank, probes: &[[f64; 3]]) -> Vec<bool> {
        let kernel = FieldKernel::new(bank);
        let mut s = vec![0.0; bank.convex_count()];
        probes
            .iter()
            .map(|&x| kernel.a_star(x, &mut s) < DROPOUT_INSIDE_THRESHOLD)
            .collect()
    }

    fn probes(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn binarize_examples() {
        let mut bank = PrimitiveBank::new(
            Matrix::from_rows(&[[1.0; 7], [1.0; 7]]),
            Matrix::from_rows(&[[0.009, 0.5], [0.01, 0.011]]),
            vec![1.0; 2],
            SelectionMode::Float,
        )
        .unwrap();
        binarize_selection(&mut bank, 0.01).unwrap();
        assert_eq!(bank.selection().as_slice(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(bank.mode(), SelectionMode::Binary);
        assert!(binarize_selection(&mut bank, 0.01).is_err());

        let mut empty = PrimitiveBank::new(
            Matrix::from_rows(&[[1.0; 7]]),
            Matrix::from_rows(&[[0.005]]),
            vec![1.0],
            SelectionMode::Float,
        )
        .unwrap();
        assert!(matches!(binarize_selection(&mut empty, 0.01), Err(Error::NoActiveConvex)));
        assert_eq!(empty.mode(), SelectionMode::Float);
    }

    #[test]
    fn far_primitive_is_dropped() {
        let mut rows = cube_rows();
        // sphere centered at (5,5,5), never reaching the probe box
        rows.push([1.0, 1.0, 1.0, -10.0, -10.0, -10.0, 75.0 - 0.04]);
        let mut t = Matrix::zeros(7, 2);
        for p in 0..6 {
            t.set(p, 0, 1.0);
        }
        t.set(6, 1, 1.0);
        let mut bank = bank_from(&rows, t);
        let stats = primitive_dropout(&mut bank, &probes(4096, 1), 0.002).unwrap();
        assert_eq!(stats.dropped, vec![6]);
        assert_eq!(stats.rows_after, 6);
    }

    #[test]
    fn bounding_plane_is_kept() {
        let mut t = Matrix::zeros(6, 1);
        for p in 0..6 {
            t.set(p, 0, 1.0);
        }
        let mut bank = bank_from(&cube_rows(), t);
        let stats = primitive_dropout(&mut bank, &probes(4096, 2), 0.002).unwrap();
        assert!(stats.dropped.is_empty());
        assert_eq!(stats.rows_after, 6);
    }

    #[test]
    fn duplicate_primitive_loses_its_first_copy() {
        let mut rows = cube_rows();
        rows.insert(0, rows[0]);
        let mut t = Matrix::zeros(7, 1);
        for p in 0..7 {
            t.set(p, 0, 1.0);
        }
        let mut bank = bank_from(&rows, t);
        let pts = probes(4096, 3);
        let before = brute_inside(&bank, &pts);
        let stats = primitive_dropout(&mut bank, &pts, 0.002).unwrap();
        assert_eq!(stats.dropped, vec![0]);
        let after = brute_inside(&bank, &pts);
        let flips = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        assert_eq!(flips, 0);
        assert_eq!(stats.max_accepted_v, 0.0);
    }

    #[test]
    fn dropout_requires_binary_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = PrimitiveBank::random(4, 2, &Default::default(), &mut rng).unwrap();
        assert!(primitive_dropout(&mut bank, &probes(10, 0), 0.002).is_err());
    }

    #[test]
    fn probes_cover_dilated_bounds() {
        let mut t = Matrix::zeros(6, 1);
        for p in 0..6 {
            t.set(p, 0, 1.0);
        }
        let bank = bank_from(&cube_rows(), t);
        let (lo, hi) = shape_bounds(&bank).unwrap();
        for d in 0..3 {
            assert!(lo[d] <= -0.5 && lo[d] > -0.7);
            assert!(hi[d] >= 0.5 && hi[d] < 0.7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = probe_points(&bank, 1000, &mut rng);
        assert!(pts.iter().flatten().all(|v| v.abs() <= 0.8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn each_accepted_drop_stays_within_threshold(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 10;
            let c = 3;
            let rows: Vec<[f64; 7]> = (0..p)
                .map(|_| {
                    let ctr: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.4..0.4));
                    let r2: f64 = rng.random_range(0.05..0.3);
                    [1.0, 1.0, 1.0, -2.0 * ctr[0], -2.0 * ctr[1], -2.0 * ctr[2],
                     ctr.iter().map(|v| v * v).sum::<f64>() - r2]
                })
                .collect();
            let mut t = Matrix::zeros(p, c);
            for i in 0..p {
                t.set(i, rng.random_range(0..c), 1.0);
            }
            let mut bank = bank_from(&rows, t);
            let pts = probes(2000, seed + 1);
            let thr = 0.01;
            let mut replay = bank.clone();
            let stats = primitive_dropout(&mut bank, &pts, thr).unwrap();
            prop_assert!(stats.rows_after <= stats.rows_before);
            // Replaying accepted drops one by one, every step changes at most thr·K probes.
            for &row in &stats.dropped {
                let before = brute_inside(&replay, &pts);
                replay.zero_selection_row(row);
                let after = brute_inside(&replay, &pts);
                let flips = before.iter().zip(&after).filter(|(a, b)| a != b).count();
                prop_assert!(flips as f64 / pts.len() as f64 <= thr);
            }
            prop_assert_eq!(replay.selection(), bank.selection());
        }
    }
}
