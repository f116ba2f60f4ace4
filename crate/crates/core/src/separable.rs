//! Kernel shared by every k-separable model.
//!
//! A model is k-separable when `ŷ(c, i) = ⟨φ(c), ψ(i)⟩` with `φ` depending only
//! on context-side parameters and `ψ` only on item-side parameters. The sum of
//! squared predictions over all `|C|·|I|` cells then factors through two
//! `k×k` Gram matrices, and so do its first and second derivatives with
//! respect to any single parameter. Everything here works on the cached
//! tables `Φ` (`|C|×k`) and `Ψ` (`|I|×k`).

use rayon::prelude::*;

use crate::error::{IcdError, Result};
use crate::matrix::Matrix;

/// Cached `Φ` and `Ψ` tables of a model's separable form.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableState {
    pub phi: Matrix,
    pub psi: Matrix,
}

impl SeparableState {
    pub fn new(phi: Matrix, psi: Matrix) -> Result<Self> {
        if phi.cols() != psi.cols() {
            return Err(IcdError::DimensionMismatch {
                what: "separable width",
                expected: phi.cols(),
                found: psi.cols(),
            });
        }
        Ok(SeparableState { phi, psi })
    }

    pub fn k_sep(&self) -> usize {
        self.phi.cols()
    }

    #[inline]
    pub fn predict(&self, context: usize, item: usize) -> f64 {
        crate::matrix::dot(self.phi.row(context), self.psi.row(item))
    }

    /// Scores of every item for one context.
    pub fn scores(&self, context: usize) -> Vec<f64> {
        let phi = self.phi.row(context);
        self.psi.iter_rows().map(|psi| crate::matrix::dot(phi, psi)).collect()
    }

    /// `R(Θ)` through the two Gram matrices.
    pub fn regularizer(&self) -> f64 {
        reg_value(&compute_gram(&self.phi), &compute_gram(&self.psi))
            .expect("phi and psi share a width")
    }
}

/// First and second derivative of a scalar objective along one coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradPair {
    pub first: f64,
    pub second: f64,
}

impl GradPair {
    pub const ZERO: GradPair = GradPair {
        first: 0.0,
        second: 0.0,
    };

    pub fn new(first: f64, second: f64) -> Self {
        GradPair { first, second }
    }

    pub fn is_finite(&self) -> bool {
        self.first.is_finite() && self.second.is_finite()
    }
}

/// Symmetric `k×k` matrix `J(f, f') = Σ_rows row[f]·row[f']`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(Matrix);

impl GramMatrix {
    pub fn zeros(k: usize) -> Self {
        GramMatrix(Matrix::zeros(k, k))
    }

    /// Wraps a square matrix. Callers guarantee symmetry.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(IcdError::DimensionMismatch {
                what: "gram matrix columns",
                expected: m.rows(),
                found: m.cols(),
            });
        }
        Ok(GramMatrix(m))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, f: usize, g: usize) -> f64 {
        self.0[(f, g)]
    }

    #[inline]
    pub fn row(&self, f: usize) -> &[f64] {
        self.0.row(f)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    /// Recomputes `J(f, ·)` and mirrors it into column `f`. The other entries
    /// are left as they are.
    pub fn refresh_row(&mut self, table: &Matrix, f: usize) -> u64 {
        let k = self.dim();
        debug_assert_eq!(table.cols(), k);
        let mut acc = vec![0.0; k];
        for r in table.iter_rows() {
            let a = r[f];
            for (g, &b) in r.iter().enumerate() {
                acc[g] += a * b;
            }
        }
        for (g, v) in acc.into_iter().enumerate() {
            self.0[(f, g)] = v;
            self.0[(g, f)] = v;
        }
        (table.rows() * k) as u64
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let k = self.dim();
        (0..k)
            .map(|f| x[f] * (0..k).map(|g| self.get(f, g) * x[g]).sum::<f64>())
            .sum()
    }
}

/// Gram matrix of the rows of `table`. Only the upper triangle is
/// accumulated, then mirrored, so the result is exactly symmetric.
pub fn compute_gram(table: &Matrix) -> GramMatrix {
    let k = table.cols();
    let mut upper = vec![0.0; k * k];
    for r in table.iter_rows() {
        accumulate_upper(&mut upper, r);
    }
    mirror(upper, k)
}

/// Rayon variant of [`compute_gram`]: fixed-size row chunks reduced in chunk
/// order. Not bit-identical to the sequential sum.
pub fn compute_gram_par(table: &Matrix) -> GramMatrix {
    const CHUNK_ROWS: usize = 1024;
    let k = table.cols();
    if k == 0 || table.rows() <= CHUNK_ROWS {
        return compute_gram(table);
    }
    let partials: Vec<Vec<f64>> = table
        .as_slice()
        .par_chunks(CHUNK_ROWS * k)
        .map(|chunk| {
            let mut upper = vec![0.0; k * k];
            for r in chunk.chunks_exact(k) {
                accumulate_upper(&mut upper, r);
            }
            upper
        })
        .collect();
    let mut upper = vec![0.0; k * k];
    for p in partials {
        for (u, v) in upper.iter_mut().zip(p) {
            *u += v;
        }
    }
    mirror(upper, k)
}

#[inline]
fn accumulate_upper(upper: &mut [f64], r: &[f64]) {
    let k = r.len();
    for f in 0..k {
        let a = r[f];
        let dst = &mut upper[f * k..(f + 1) * k];
        for g in f..k {
            dst[g] += a * r[g];
        }
    }
}

fn mirror(mut upper: Vec<f64>, k: usize) -> GramMatrix {
    for f in 0..k {
        for g in 0..f {
            upper[f * k + g] = upper[g * k + f];
        }
    }
    GramMatrix(Matrix::from_vec(k, k, upper).expect("k*k entries"))
}

/// `R = Σ_f Σ_f' J_C(f, f')·J_I(f, f')`.
pub fn reg_value(j_context: &GramMatrix, j_item: &GramMatrix) -> Result<f64> {
    if j_context.dim() != j_item.dim() {
        return Err(IcdError::DimensionMismatch {
            what: "gram dimension",
            expected: j_context.dim(),
            found: j_item.dim(),
        });
    }
    Ok(j_context
        .0
        .as_slice()
        .iter()
        .zip(j_item.0.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Derivative of one `φ_f` (or `ψ_f`) column with respect to the parameter
/// being updated, stored sparsely as `(row, value)` with rows ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportColumn {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SupportColumn {
    pub fn new(dim: usize, entries: Vec<(usize, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        SupportColumn { dim, entries }
    }
}

/// Regularizer derivatives of any separable model for one parameter.
///
/// `first` lists the dimensions `f` whose `∂φ_f/∂θ` is non-zero, `second` the
/// dimensions with non-zero `∂²φ_f/∂θ²`. `phi` is the table on the
/// parameter's own side and `j_other` the Gram of the opposite side. Cost is
/// `O(k·nnz)` plus one merge per pair of support columns.
pub fn reg_grads_generic(
    first: &[SupportColumn],
    phi: &Matrix,
    j_other: &GramMatrix,
    second: &[SupportColumn],
) -> GradPair {
    let k = phi.cols();
    let mut d1 = 0.0;
    let mut d2 = 0.0;

    for col in first {
        let mut cross = vec![0.0; k];
        for &(c, v) in &col.entries {
            for (acc, &p) in cross.iter_mut().zip(phi.row(c)) {
                *acc += p * v;
            }
        }
        let j = j_other.row(col.dim);
        d1 += cross.iter().zip(j).map(|(a, b)| a * b).sum::<f64>();
    }

    for a in first {
        for b in first {
            let overlap = sparse_dot(&a.entries, &b.entries);
            if overlap != 0.0 {
                d2 += j_other.get(a.dim, b.dim) * overlap;
            }
        }
    }

    for col in second {
        let mut cross = vec![0.0; k];
        for &(c, v) in &col.entries {
            for (acc, &p) in cross.iter_mut().zip(phi.row(c)) {
                *acc += p * v;
            }
        }
        let j = j_other.row(col.dim);
        d2 += cross.iter().zip(j).map(|(a, b)| a * b).sum::<f64>();
    }

    GradPair::new(2.0 * d1, 2.0 * d2)
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// `∂φ_f(r)/∂θ` for one parameter `θ`, restricted to its non-zero support:
/// `values[d][j]` is the derivative of column `dims[d]` at row `rows[j]`.
/// Every shipped model is multilinear, so `∂²φ/∂θ² = 0` and this fully
/// describes how the table moves when `θ` changes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhiDerivative {
    pub rows: Vec<usize>,
    pub dims: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl PhiDerivative {
    pub fn single(dim: usize, entries: &[(usize, f64)]) -> Self {
        PhiDerivative {
            rows: entries.iter().map(|e| e.0).collect(),
            dims: vec![dim],
            values: vec![entries.iter().map(|e| e.1).collect()],
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.len() * self.dims.len()
    }

    pub fn support_columns(&self) -> Vec<SupportColumn> {
        self.dims
            .iter()
            .zip(&self.values)
            .map(|(&dim, vals)| SupportColumn::new(dim, self.rows.iter().copied().zip(vals.iter().copied()).collect()))
            .collect()
    }

    /// Same result as [`reg_grads_generic`] on [`Self::support_columns`],
    /// exploiting the shared row set.
    pub fn reg_grads(&self, table: &Matrix, j_other: &GramMatrix) -> GradPair {
        let k = table.cols();
        let mut d1 = 0.0;
        for (&dim, vals) in self.dims.iter().zip(&self.values) {
            let mut cross = vec![0.0; k];
            for (&r, &v) in self.rows.iter().zip(vals) {
                if v != 0.0 {
                    for (acc, &p) in cross.iter_mut().zip(table.row(r)) {
                        *acc += p * v;
                    }
                }
            }
            d1 += crate::matrix::dot(&cross, j_other.row(dim));
        }
        let mut d2 = 0.0;
        for (a, va) in self.dims.iter().zip(&self.values) {
            for (b, vb) in self.dims.iter().zip(&self.values) {
                d2 += j_other.get(*a, *b) * crate::matrix::dot(va, vb);
            }
        }
        GradPair::new(2.0 * d1, 2.0 * d2)
    }

    /// Moves `table` by `delta·∂φ/∂θ`; exact for multilinear models.
    pub fn apply(&self, table: &mut Matrix, delta: f64) {
        for (&dim, vals) in self.dims.iter().zip(&self.values) {
            for (&r, &v) in self.rows.iter().zip(vals) {
                table[(r, dim)] += delta * v;
            }
        }
    }

    /// `Σ_d values[d][j]·other_row[dims[d]]`: the prediction derivative for a
    /// cell whose own side is `rows[j]`.
    #[inline]
    pub fn pred_derivative(&self, j: usize, other_row: &[f64]) -> f64 {
        self.dims
            .iter()
            .zip(&self.values)
            .map(|(&dim, vals)| vals[j] * other_row[dim])
            .sum()
    }
}

/// One rescaled positive touching the parameter: prediction, target,
/// confidence and the first two derivatives of the prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub y_hat: f64,
    pub y: f64,
    pub alpha: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Contribution {
    /// Contribution of a prediction that is affine in the parameter.
    #[inline]
    pub fn linear(y_hat: f64, y: f64, alpha: f64, d1: f64) -> Self {
        Contribution {
            y_hat,
            y,
            alpha,
            d1,
            d2: 0.0,
        }
    }
}

/// Derivatives of the weighted squared loss plus `λθ²`.
pub fn explicit_grads<I>(theta: f64, contributions: I, lambda: f64) -> GradPair
where
    I: IntoIterator<Item = Contribution>,
{
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for c in contributions {
        let err = c.y_hat - c.y;
        d1 += c.alpha * err * c.d1;
        d2 += c.alpha * (err * c.d2 + c.d1 * c.d1);
    }
    GradPair::new(2.0 * d1 + 2.0 * lambda * theta, 2.0 * d2 + 2.0 * lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonStep {
    pub value: f64,
    /// Set when the combined curvature fell below the guard.
    pub skipped: bool,
}

/// `θ − η·(L′+α₀R′)/(L″+α₀R″)`, or `θ` unchanged when the curvature
/// magnitude is below `epsilon_guard`.
pub fn newton_step(
    theta: f64,
    loss: GradPair,
    reg: GradPair,
    alpha0: f64,
    eta: f64,
    epsilon_guard: f64,
) -> Result<NewtonStep> {
    if !theta.is_finite() || !loss.is_finite() || !reg.is_finite() {
        return Err(IcdError::NonFinite("newton step input"));
    }
    let g = loss.first + alpha0 * reg.first;
    let h = loss.second + alpha0 * reg.second;
    if !(h.abs() >= epsilon_guard) {
        return Ok(NewtonStep {
            value: theta,
            skipped: true,
        });
    }
    Ok(NewtonStep {
        value: theta - eta * g / h,
        skipped: false,
    })
}
