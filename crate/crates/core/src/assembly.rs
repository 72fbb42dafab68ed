//! Quadric primitives, their grouping into convexes, and the occupancy fields
//! derived from them.
//!
//! A primitive is the quadric `|a|x² + |b|y² + |c|z² + dx + ey + fz + g`; it is
//! negative inside. The `P×C` selection matrix `T` groups primitives into
//! convexes through `O = ReLU(D)·T`, and convexes are merged either by a hard
//! minimum (`a*`, zero inside) or by a clipped weighted sum (`a⁺`, one inside).

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Coefficients per primitive: `(a, b, c, d, e, f, g)`.
pub const PARAM_COLS: usize = 7;
pub const DEFAULT_PRIMITIVES: usize = 4096;
pub const DEFAULT_CONVEXES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Float,
    Binary,
}

/// How initial primitive coefficients are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitLayout {
    /// Every coefficient i.i.d. Gaussian around zero, `g` shifted by `g_shift`.
    Gaussian,
    /// Primitive `p` belongs to cluster `p % C` around a center `m` drawn
    /// uniformly from `[-cluster_extent, cluster_extent]³`. It is a nearly
    /// flat face at distance `cluster_radius` from `m`: the first six faces
    /// of a cluster are the axis directions, later ones random. Gaussian
    /// noise of `param_sigma` is added to every coefficient. Convexes start
    /// as separate small boxes instead of copies of one blob.
    Clustered,
}

/// Initial distribution of the learnable assembly state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitParams {
    pub layout: InitLayout,
    /// Standard deviation of every quadric coefficient.
    pub param_sigma: f64,
    /// Offset added to the constant coefficient `g` (Gaussian layout only).
    pub g_shift: f64,
    pub cluster_radius: f64,
    pub cluster_extent: f64,
    /// Scale of each clustered face quadric; steeper faces give thinner
    /// rendered halos from the start.
    pub cluster_sharpness: f64,
    /// Selection entries are drawn from `U[0, selection_max]`.
    pub selection_max: f64,
    /// Probability that a selection entry starts nonzero. Every column keeps
    /// at least one entry: an empty column is all of space under the soft union.
    pub selection_density: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            layout: InitLayout::Gaussian,
            param_sigma: 0.1,
            g_shift: -0.2,
            cluster_radius: 0.3,
            cluster_extent: 0.6,
            cluster_sharpness: 1.0,
            selection_max: 0.05,
            selection_density: 1.0,
        }
    }
}

/// `(n·(x − m))/r − 1 + ε(|x − m|²/r² − 1)`: zero on the face plane at its
/// foot point, `−1 − ε` at `m`. The small curvature `ε` keeps a cluster with
/// fewer than six faces bounded.
fn face_quadric(m: [f64; 3], n: [f64; 3], r: f64) -> [f64; PARAM_COLS] {
    const EPS: f64 = 0.1;
    let k = EPS / (r * r);
    let mm = m[0] * m[0] + m[1] * m[1] + m[2] * m[2];
    let nm = n[0] * m[0] + n[1] * m[1] + n[2] * m[2];
    [
        k,
        k,
        k,
        n[0] / r - 2.0 * k * m[0],
        n[1] / r - 2.0 * k * m[1],
        n[2] / r - 2.0 * k * m[2],
        -nm / r - 1.0 + k * mm - EPS,
    ]
}

/// The learnable assembly state: primitive coefficients `P`, selection `T`
/// and union weights `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveBank {
    pub(crate) params: Matrix,
    pub(crate) selection: Matrix,
    pub(crate) weights: Vec<f64>,
    pub(crate) mode: SelectionMode,
}

impl PrimitiveBank {
    pub fn new(
        params: Matrix,
        selection: Matrix,
        weights: Vec<f64>,
        mode: SelectionMode,
    ) -> Result<Self> {
        if params.cols() != PARAM_COLS || params.rows() == 0 {
            return Err(Error::shape(
                "PrimitiveBank::new",
                format!("P×{PARAM_COLS} params with P > 0"),
                format!("{}×{}", params.rows(), params.cols()),
            ));
        }
        if selection.rows() != params.rows() || selection.cols() == 0 {
            return Err(Error::shape(
                "PrimitiveBank::new",
                format!("{}×C selection with C > 0", params.rows()),
                format!("{}×{}", selection.rows(), selection.cols()),
            ));
        }
        if weights.len() != selection.cols() {
            return Err(Error::shape(
                "PrimitiveBank::new",
                format!("{} weights", selection.cols()),
                weights.len(),
            ));
        }
        if let Some((row, col)) = params.find_non_finite() {
            return Err(Error::NonFinite {
                what: "primitive params",
                row,
                col,
            });
        }
        if mode == SelectionMode::Binary
            && selection.as_slice().iter().any(|&t| t != 0.0 && t != 1.0)
        {
            return Err(Error::Mode {
                expected: "0/1 entries for binary",
            });
        }
        Ok(Self {
            params,
            selection,
            weights,
            mode,
        })
    }

    /// Random initial state: Gaussian coefficients with `g` shifted so that
    /// primitives start with a nonempty interior near the origin, small
    /// positive selections and unit weights.
    pub fn random<R: Rng + ?Sized>(
        primitives: usize,
        convexes: usize,
        init: &InitParams,
        rng: &mut R,
    ) -> Result<Self> {
        if primitives == 0 || convexes == 0 {
            return Err(Error::Config(
                "primitive and convex counts must be positive".into(),
            ));
        }
        let normal = Normal::new(0.0, init.param_sigma)
            .map_err(|e| Error::Config(format!("param_sigma: {e}")))?;
        let mut params = Matrix::zeros(primitives, PARAM_COLS);
        match init.layout {
            InitLayout::Gaussian => {
                for p in 0..primitives {
                    let row = params.row_mut(p);
                    for v in row.iter_mut() {
                        *v = normal.sample(rng);
                    }
                    row[6] += init.g_shift;
                }
            }
            InitLayout::Clustered => {
                if !(init.cluster_radius > 0.0
                    && init.cluster_extent >= 0.0
                    && init.cluster_sharpness > 0.0)
                {
                    return Err(Error::Config(
                        "cluster_radius and cluster_sharpness must be positive, cluster_extent nonnegative"
                            .into(),
                    ));
                }
                let e = init.cluster_extent;
                let centers: Vec<[f64; 3]> = (0..convexes)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-e..=e)))
                    .collect();
                let normal_dir = Normal::new(0.0, 1.0).expect("unit normal");
                for p in 0..primitives {
                    let m = centers[p % convexes];
                    let j = p / convexes;
                    let n: [f64; 3] = if j < 6 {
                        let mut n = [0.0; 3];
                        n[j / 2] = if j % 2 == 0 { 1.0 } else { -1.0 };
                        n
                    } else {
                        let v: [f64; 3] = std::array::from_fn(|_| normal_dir.sample(rng));
                        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                        v.map(|x| x / len)
                    };
                    let face = face_quadric(m, n, init.cluster_radius);
                    let row = params.row_mut(p);
                    for (v, b) in row.iter_mut().zip(face) {
                        *v = init.cluster_sharpness * b + normal.sample(rng);
                    }
                }
            }
        }
        let uniform = Uniform::new_inclusive(0.0, init.selection_max)
            .map_err(|e| Error::Config(format!("selection_max: {e}")))?;
        if !(0.0..=1.0).contains(&init.selection_density) {
            return Err(Error::Config("selection_density must lie in [0, 1]".into()));
        }
        let mut selection = Matrix::zeros(primitives, convexes);
        for p in 0..primitives {
            for c in 0..convexes {
                let keep = p % convexes == c
                    || init.selection_density >= 1.0
                    || rng.random::<f64>() < init.selection_density;
                let v = uniform.sample(rng);
                if keep {
                    selection.set(p, c, v);
                }
            }
        }
        Self::new(
            params,
            selection,
            vec![1.0; convexes],
            SelectionMode::Float,
        )
    }

    pub fn primitive_count(&self) -> usize {
        self.params.rows()
    }

    pub fn convex_count(&self) -> usize {
        self.selection.cols()
    }

    pub fn params(&self) -> &Matrix {
        &self.params
    }

    pub fn selection(&self) -> &Matrix {
        &self.selection
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    pub fn params_mut(&mut self) -> &mut Matrix {
        &mut self.params
    }

    /// Mutable selection access; only allowed while `T` is still real-valued.
    pub fn selection_mut(&mut self) -> Result<&mut Matrix> {
        match self.mode {
            SelectionMode::Float => Ok(&mut self.selection),
            SelectionMode::Binary => Err(Error::Mode { expected: "float" }),
        }
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Zero one row of `T`, detaching primitive `p` from every convex.
    pub fn zero_selection_row(&mut self, p: usize) {
        self.selection.row_mut(p).fill(0.0);
    }

    /// Convexes whose selection column has at least one nonzero entry.
    pub fn active_convexes(&self) -> Vec<bool> {
        let mut active = vec![false; self.convex_count()];
        for p in 0..self.primitive_count() {
            for (c, &t) in self.selection.row(p).iter().enumerate() {
                if t != 0.0 {
                    active[c] = true;
                }
            }
        }
        active
    }

    /// Number of primitives with a nonzero selection row.
    pub fn active_primitive_count(&self) -> usize {
        (0..self.primitive_count())
            .filter(|&p| self.selection.row(p).iter().any(|&t| t != 0.0))
            .count()
    }

    pub fn active_convex_count(&self) -> usize {
        self.active_convexes().iter().filter(|&&a| a).count()
    }

    /// Coefficient rows with the absolute value applied to `a, b, c`.
    pub fn evaluated_params(&self) -> Vec<[f64; PARAM_COLS]> {
        (0..self.primitive_count())
            .map(|p| {
                let r = self.params.row(p);
                [r[0].abs(), r[1].abs(), r[2].abs(), r[3], r[4], r[5], r[6]]
            })
            .collect()
    }
}

/// Query points together with their lifted rows `(x², y², z², x, y, z, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<[f64; 3]>,
    pub q_rows: Matrix,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
pub fn lift(p: [f64; 3]) -> [f64; PARAM_COLS] {
    let [x, y, z] = p;
    [x * x, y * y, z * z, x, y, z, 1.0]
}

pub fn lift_points(points: &[[f64; 3]]) -> Result<QueryBatch> {
    let mut q_rows = Matrix::zeros(points.len(), PARAM_COLS);
    for (i, &p) in points.iter().enumerate() {
        if let Some(col) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "query points",
                row: i,
                col,
            });
        }
        q_rows.row_mut(i).copy_from_slice(&lift(p));
    }
    Ok(QueryBatch {
        points: points.to_vec(),
        q_rows,
    })
}

/// `D = Q·Pᵀ` with the absolute value applied to the quadratic coefficients.
pub fn distance_matrix(q: &QueryBatch, bank: &PrimitiveBank) -> Result<Matrix> {
    if q.q_rows.cols() != PARAM_COLS {
        return Err(Error::shape(
            "distance_matrix",
            format!("N×{PARAM_COLS} lifted rows"),
            format!("N×{}", q.q_rows.cols()),
        ));
    }
    if let Some((row, col)) = bank.params.find_non_finite() {
        return Err(Error::NonFinite {
            what: "primitive params",
            row,
            col,
        });
    }
    let evaluated = bank.evaluated_params();
    let mut d = Matrix::zeros(q.len(), bank.primitive_count());
    for i in 0..q.len() {
        let qi = q.q_rows.row(i);
        for (p, coef) in evaluated.iter().enumerate() {
            d.set(i, p, dot7(qi, coef));
        }
    }
    Ok(d)
}

#[inline]
pub(crate) fn dot7(q: &[f64], coef: &[f64; PARAM_COLS]) -> f64 {
    q[0] * coef[0]
        + q[1] * coef[1]
        + q[2] * coef[2]
        + q[3] * coef[3]
        + q[4] * coef[4]
        + q[5] * coef[5]
        + q[6] * coef[6]
}

/// `O = ReLU(D)·T`.
pub fn intersect(d: &Matrix, t: &Matrix) -> Result<Matrix> {
    if d.cols() != t.rows() {
        return Err(Error::shape(
            "intersect",
            format!("T with {} rows", d.cols()),
            format!("{}×{}", t.rows(), t.cols()),
        ));
    }
    let mut o = Matrix::zeros(d.rows(), t.cols());
    for i in 0..d.rows() {
        let out = o.row_mut(i);
        for (p, &dv) in d.row(i).iter().enumerate() {
            if dv > 0.0 {
                for (acc, &tv) in out.iter_mut().zip(t.row(p)) {
                    *acc += dv * tv;
                }
            }
        }
    }
    Ok(o)
}

/// Minimum over active entries of one row, with its lowest-index argmin.
#[inline]
pub fn min_active(o_row: &[f64], active: &[bool]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (c, (&v, &on)) in o_row.iter().zip(active).enumerate() {
        if on && best.is_none_or(|(b, _)| v < b) {
            best = Some((v, c));
        }
    }
    best
}

/// Hard union `a*_i = min_c O[i,c]` over active convexes.
pub fn union_hard(o: &Matrix, active: &[bool]) -> Result<Vec<f64>> {
    Ok(union_hard_argmin(o, active)?
        .into_iter()
        .map(|(v, _)| v)
        .collect())
}

/// Hard union together with the routing index of each minimum.
pub fn union_hard_argmin(o: &Matrix, active: &[bool]) -> Result<Vec<(f64, usize)>> {
    if active.len() != o.cols() {
        return Err(Error::shape("union_hard", o.cols(), active.len()));
    }
    if !active.iter().any(|&a| a) {
        return Err(Error::NoActiveConvex);
    }
    Ok((0..o.rows())
        .map(|i| min_active(o.row(i), active).expect("at least one active convex"))
        .collect())
}

#[inline]
pub fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Soft union `a⁺_i = clip(Σ_c w_c · clip(1 − O[i,c]))`.
pub fn union_soft(o: &Matrix, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != o.cols() {
        return Err(Error::shape("union_soft", o.cols(), w.len()));
    }
    Ok((0..o.rows())
        .map(|i| clip01(soft_sum(o.row(i), w)))
        .collect())
}

/// The inner sum of the soft union, before the outer clip.
#[inline]
pub(crate) fn soft_sum(o_row: &[f64], w: &[f64]) -> f64 {
    o_row
        .iter()
        .zip(w)
        .map(|(&o, &wc)| wc * clip01(1.0 - o))
        .sum()
}

/// `h_i = Σ_c exp(−10·O[i,c])`; large when a point sits inside several convexes.
pub fn overlap_indicator(o: &Matrix) -> Vec<f64> {
    (0..o.rows())
        .map(|i| o.row(i).iter().map(|&v| (-10.0 * v).exp()).sum())
        .collect()
}

/// Per-point evaluation of the whole assembly.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub d: Matrix,
    pub o: Matrix,
    pub a_star: Vec<f64>,
    pub a_plus: Vec<f64>,
}

impl FieldSample {
    pub fn evaluate(bank: &PrimitiveBank, points: &[[f64; 3]]) -> Result<Self> {
        let q = lift_points(points)?;
        let d = distance_matrix(&q, bank)?;
        let o = intersect(&d, &bank.selection)?;
        let a_star = union_hard(&o, &bank.active_convexes())?;
        let a_plus = union_soft(&o, &bank.weights)?;
        Ok(Self {
            d,
            o,
            a_star,
            a_plus,
        })
    }
}

/// Row-sparse view of `T`, precomputed once per step for the fused kernels.
#[derive(Clone, Debug)]
pub(crate) struct SelectionRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SelectionRows {
    pub fn new(t: &Matrix) -> Self {
        let rows = (0..t.rows())
            .map(|p| {
                t.row(p)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self { rows }
    }
}

/// Point evaluator shared by rendering, meshing and the fused gradient kernels.
#[derive(Clone, Debug)]
pub struct FieldKernel {
    pub(crate) coefs: Vec<[f64; PARAM_COLS]>,
    pub(crate) rows: SelectionRows,
    pub(crate) active: Vec<bool>,
    pub(crate) convexes: usize,
}

impl FieldKernel {
    pub fn new(bank: &PrimitiveBank) -> Self {
        Self {
            coefs: bank.evaluated_params(),
            rows: SelectionRows::new(&bank.selection),
            active: bank.active_convexes(),
            convexes: bank.convex_count(),
        }
    }

    pub fn primitives(&self) -> usize {
        self.coefs.len()
    }

    pub fn convexes(&self) -> usize {
        self.convexes
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }

    /// Fill `d` (length P) and `o` (length C) for one point.
    #[inline]
    pub fn eval(&self, x: [f64; 3], d: &mut [f64], o: &mut [f64]) {
        let q = lift(x);
        o.fill(0.0);
        for (p, coef) in self.coefs.iter().enumerate() {
            let dv = dot7(&q, coef);
            d[p] = dv;
            if dv > 0.0 {
                for &(c, t) in &self.rows.rows[p] {
                    o[c] += dv * t;
                }
            }
        }
    }

    /// Membership values `O[·,c]` only.
    #[inline]
    pub fn eval_o(&self, x: [f64; 3], o: &mut [f64]) {
        let q = lift(x);
        o.fill(0.0);
        for (p, coef) in self.coefs.iter().enumerate() {
            if self.rows.rows[p].is_empty() {
                continue;
            }
            let dv = dot7(&q, coef);
            if dv > 0.0 {
                for &(c, t) in &self.rows.rows[p] {
                    o[c] += dv * t;
                }
            }
        }
    }

    /// Hard occupancy `a*` at one point; `+∞` when no convex is active.
    pub fn a_star(&self, x: [f64; 3], scratch: &mut [f64]) -> f64 {
        self.eval_o(x, scratch);
        min_active(scratch, &self.active).map_or(f64::INFINITY, |(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_of(params: &[[f64; 7]], t: &[&[f64]]) -> PrimitiveBank {
        let c = t[0].len();
        let sel = Matrix::from_vec(
            t.len(),
            c,
            t.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap();
        PrimitiveBank::new(
            Matrix::from_rows(params),
            sel,
            vec![1.0; c],
            SelectionMode::Float,
        )
        .unwrap()
    }

    #[test]
    fn lift_examples() {
        let q = lift_points(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(q.q_rows.row(0), &[1.0, 4.0, 9.0, 1.0, 2.0, 3.0, 1.0]);
        assert_eq!(q.q_rows.row(1), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(q.q_rows.row(2), &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn lift_rejects_nan() {
        let err = lift_points(&[[0.0, f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1, .. }));
    }

    #[test]
    fn sphere_distance_examples() {
        let bank = bank_of(
            &[[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0], [-1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0]],
            &[&[1.0], &[1.0]],
        );
        let q = lift_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let d = distance_matrix(&q, &bank).unwrap();
        assert_eq!(d.get(0, 0), -1.0);
        assert_eq!(d.get(1, 0), 0.0);
        assert_eq!(d.get(0, 1), d.get(0, 0));
    }

    #[test]
    fn distance_rejects_bad_lift_width() {
        let bank = bank_of(&[[1.0; 7]], &[&[1.0]]);
        let q = QueryBatch {
            points: vec![[0.0; 3]],
            q_rows: Matrix::zeros(1, 6),
        };
        assert!(matches!(
            distance_matrix(&q, &bank),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn intersect_examples() {
        let d = Matrix::from_rows(&[[-2.0, 3.0]]);
        let o = intersect(&d, &Matrix::from_rows(&[[1.0], [0.0]])).unwrap();
        assert_eq!(o.get(0, 0), 0.0);
        let o = intersect(&d, &Matrix::from_rows(&[[1.0], [1.0]])).unwrap();
        assert_eq!(o.get(0, 0), 3.0);
        let d = Matrix::from_rows(&[[0.5, 0.25]]);
        let o = intersect(&d, &Matrix::from_rows(&[[0.5], [1.0]])).unwrap();
        assert!((o.get(0, 0) - 0.5).abs() < 1e-15);
        assert!(intersect(&d, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn union_hard_examples() {
        let o = Matrix::from_rows(&[[0.0, 0.5, 2.0]]);
        assert_eq!(union_hard(&o, &[true; 3]).unwrap(), vec![0.0]);
        let o = Matrix::from_rows(&[[0.3, 0.7]]);
        assert_eq!(union_hard(&o, &[true; 2]).unwrap(), vec![0.3]);
        let o = Matrix::from_rows(&[[0.0, 0.5]]);
        assert_eq!(union_hard(&o, &[false, true]).unwrap(), vec![0.5]);
        assert!(matches!(
            union_hard(&o, &[false, false]),
            Err(Error::NoActiveConvex)
        ));
    }

    #[test]
    fn union_hard_ties_route_to_lowest_index() {
        let o = Matrix::from_rows(&[[0.4, 0.2, 0.2]]);
        assert_eq!(union_hard_argmin(&o, &[true; 3]).unwrap(), vec![(0.2, 1)]);
    }

    #[test]
    fn union_soft_examples() {
        let w = [1.0, 1.0];
        let a = union_soft(&Matrix::from_rows(&[[0.0, 2.0], [0.5, 2.0], [0.6, 0.7]]), &w).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 0.5);
        assert!((a[2] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        let h = overlap_indicator(&Matrix::from_rows(&[[0.0, 50.0, 50.0]]));
        assert!((h[0] - 1.0).abs() < 1e-12);
        let h = overlap_indicator(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(h[0], 2.0);
        let h = overlap_indicator(&Matrix::from_rows(&[[0.1, 0.2]]));
        assert!((h[0] - 0.503214724408055).abs() < 1e-12);
    }

    fn quadric_at(row: &[f64], x: [f64; 3]) -> f64 {
        row[0].abs() * x[0] * x[0]
            + row[1].abs() * x[1] * x[1]
            + row[2].abs() * x[2] * x[2]
            + row[3] * x[0]
            + row[4] * x[1]
            + row[5] * x[2]
            + row[6]
    }

    #[test]
    fn clustered_faces_pass_through_their_foot_points() {
        let init = InitParams {
            layout: InitLayout::Clustered,
            param_sigma: 0.0,
            cluster_radius: 0.25,
            cluster_extent: 0.0,
            cluster_sharpness: 2.0,
            selection_density: 0.0,
            ..InitParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = PrimitiveBank::random(16, 2, &init, &mut rng).unwrap();
        // extent 0 puts every center at the origin; p / C indexes the face.
        for p in 0..16 {
            let row = bank.params().row(p);
            assert!((quadric_at(row, [0.0; 3]) + 2.0 * 1.1).abs() < 1e-12);
            let j = p / 2;
            if j < 6 {
                let mut foot = [0.0; 3];
                foot[j / 2] = if j % 2 == 0 { 0.25 } else { -0.25 };
                assert!(quadric_at(row, foot).abs() < 1e-12, "face {j}");
            }
        }
        // Density 0 leaves only the block entries p % C == c.
        for p in 0..16 {
            for c in 0..2 {
                if p % 2 != c {
                    assert_eq!(bank.selection().get(p, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn clustered_layout_rejects_bad_radius() {
        let init = InitParams {
            layout: InitLayout::Clustered,
            cluster_radius: 0.0,
            ..InitParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PrimitiveBank::random(4, 2, &init, &mut rng).is_err());
    }

    #[test]
    fn random_bank_respects_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = PrimitiveBank::random(64, 8, &InitParams::default(), &mut rng).unwrap();
        assert_eq!(bank.weights(), &[1.0; 8]);
        assert!(bank
            .selection()
            .as_slice()
            .iter()
            .all(|&t| (0.0..=0.05).contains(&t)));
        let mean_g: f64 = (0..64).map(|p| bank.params().get(p, 6)).sum::<f64>() / 64.0;
        assert!((mean_g + 0.2).abs() < 0.05);
    }

    #[test]
    fn binary_mode_rejects_fractional_selection() {
        let err = PrimitiveBank::new(
            Matrix::zeros(1, 7),
            Matrix::from_rows(&[[0.5]]),
            vec![1.0],
            SelectionMode::Binary,
        );
        assert!(err.is_err());
    }

    #[test]
    fn kernel_matches_matrix_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = PrimitiveBank::random(16, 4, &InitParams::default(), &mut rng).unwrap();
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let fs = FieldSample::evaluate(&bank, &pts).unwrap();
        let k = FieldKernel::new(&bank);
        let mut d = vec![0.0; 16];
        let mut o = vec![0.0; 4];
        for (i, &x) in pts.iter().enumerate() {
            k.eval(x, &mut d, &mut o);
            assert_eq!(d.as_slice(), fs.d.row(i));
            for c in 0..4 {
                assert!((o[c] - fs.o.get(i, c)).abs() <= 1e-14 * (1.0 + o[c].abs()));
            }
            assert!((k.a_star(x, &mut o) - fs.a_star[i]).abs() < 1e-14);
        }
    }

    fn binary_bank(seed: u64, p: usize, c: usize) -> PrimitiveBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Matrix::zeros(p, 7);
        for v in params.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut t = Matrix::zeros(p, c);
        for v in t.as_mut_slice() {
            *v = if rng.random_bool(0.4) { 1.0 } else { 0.0 };
        }
        PrimitiveBank::new(params, t, vec![1.0; c], SelectionMode::Binary).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn monotone_in_positive_distances(seed in 0u64..1000, scale in 1.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6; let p = 5; let c = 3;
            let mut d = Matrix::zeros(n, p);
            for v in d.as_mut_slice() { *v = rng.random_range(-1.0..1.0); }
            let mut t = Matrix::zeros(p, c);
            for v in t.as_mut_slice() { *v = rng.random_range(0.0..1.0); }
            let mut scaled = d.clone();
            for v in scaled.as_mut_slice() { if *v > 0.0 { *v *= scale; } }
            let o = intersect(&d, &t).unwrap();
            let o2 = intersect(&scaled, &t).unwrap();
            let active = vec![true; c];
            let w = vec![1.0; c];
            let (a1, a2) = (union_hard(&o, &active).unwrap(), union_hard(&o2, &active).unwrap());
            let (s1, s2) = (union_soft(&o, &w).unwrap(), union_soft(&o2, &w).unwrap());
            for i in 0..n {
                for j in 0..c { prop_assert!(o2.get(i, j) >= o.get(i, j)); }
                prop_assert!(a2[i] >= a1[i]);
                prop_assert!(s2[i] <= s1[i]);
            }
        }

        #[test]
        fn binary_convex_parts_are_convex(seed in 0u64..1000) {
            let bank = binary_bank(seed, 6, 3);
            let kernel = FieldKernel::new(&bank);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut o = vec![0.0; 3];
            let mut inside: Vec<Vec<[f64; 3]>> = vec![Vec::new(); 3];
            for _ in 0..400 {
                let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                kernel.eval_o(x, &mut o);
                for c in 0..3 {
                    if kernel.active[c] && o[c] == 0.0 { inside[c].push(x); }
                }
            }
            for c in 0..3 {
                for pair in inside[c].windows(2).take(20) {
                    for k in 1..10 {
                        let s = k as f64 / 10.0;
                        let x = [0, 1, 2].map(|j| pair[0][j] + s * (pair[1][j] - pair[0][j]));
                        kernel.eval_o(x, &mut o);
                        prop_assert!(o[c] <= 1e-6, "convex {c} leaks at {x:?}: {}", o[c]);
                    }
                }
            }
        }
    }
}
