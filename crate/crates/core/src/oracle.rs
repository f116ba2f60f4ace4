//! Brute-force references for tests and the cost benchmark.
//!
//! Everything here materializes the full context-item grid and is only
//! meant for toy sizes; [`DEFAULT_CELL_CAP`] guards against misuse.

use crate::config::{Lambdas, SolverConfig};
use crate::data::{ImplicitDataset, TensorDataset};
use crate::error::{IcdError, Result};
use crate::feature::{FeatureData, FmParams, MfsiParams};
use std::ops::{Add, Mul, Sub};

use crate::mf::MfParams;
use crate::params::{Coordinate, Family, ParamKind, ParamStore, UpdateTrace};
use crate::separable::{newton_step, GradPair};
use crate::tensor::{ParafacParams, TensorParams, TuckerParams};

pub const DEFAULT_CELL_CAP: usize = 1_000_000;

/// A model evaluated by its defining formula.
pub trait BruteForceModel: ParamStore {
    fn num_contexts(&self) -> usize;
    fn num_items(&self) -> usize;
    /// The model formula evaluated in `T` arithmetic.
    fn predict_in<T: Scalar>(&self, context: usize, item: usize) -> T;
    fn predict(&self, context: usize, item: usize) -> f64 {
        self.predict_in::<f64>(context, item)
    }
    /// Multiply-adds per call to [`BruteForceModel::predict`].
    fn predict_cost(&self) -> u64;
    fn l2(&self, lambda: &Lambdas) -> f64;
    /// Cells whose prediction depends on `coord`.
    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)>;
    /// Coordinates in the sweep order of the matching trainer.
    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate>;
}

fn grid_rows(rows: impl IntoIterator<Item = usize>, num_items: usize) -> Vec<(usize, usize)> {
    rows.into_iter().flat_map(|c| (0..num_items).map(move |i| (c, i))).collect()
}

fn grid_cols(num_contexts: usize, cols: impl IntoIterator<Item = usize> + Clone) -> Vec<(usize, usize)> {
    (0..num_contexts).flat_map(|c| cols.clone().into_iter().map(move |i| (c, i))).collect()
}

fn embedding_order(k: usize, context_rows: usize, item_rows: usize, config: &SolverConfig) -> Vec<Coordinate> {
    let tc = !config.is_frozen(ParamKind::ContextEmbedding);
    let ti = !config.is_frozen(ParamKind::ItemEmbedding);
    let mut out = Vec::new();
    for dim in 0..k {
        if tc {
            out.extend((0..context_rows).map(|row| Coordinate::ContextEmbedding { row, dim }));
        }
        if ti {
            out.extend((0..item_rows).map(|row| Coordinate::ItemEmbedding { row, dim }));
        }
    }
    out
}

impl BruteForceModel for MfParams {
    fn num_contexts(&self) -> usize {
        self.w.rows()
    }

    fn num_items(&self) -> usize {
        self.h.rows()
    }

    fn predict_in<T: Scalar>(&self, c: usize, i: usize) -> T {
        dot_in(self.w.row(c), self.h.row(i))
    }

    fn predict_cost(&self) -> u64 {
        self.k() as u64
    }

    fn l2(&self, lambda: &Lambdas) -> f64 {
        MfParams::l2(self, lambda)
    }

    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)> {
        match coord {
            Coordinate::ContextEmbedding { row, .. } => grid_rows([row], self.num_items()),
            Coordinate::ItemEmbedding { row, .. } => grid_cols(self.num_contexts(), [row]),
            other => panic!("{other:?} is not an MF parameter"),
        }
    }

    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate> {
        embedding_order(self.k(), self.w.rows(), self.h.rows(), config)
    }
}

/// MFSI with its design matrices.
#[derive(Clone, Debug)]
pub struct MfsiModel {
    pub params: MfsiParams,
    pub feats: FeatureData,
}

/// FM with its design matrices.
#[derive(Clone, Debug)]
pub struct FmModel {
    pub params: FmParams,
    pub feats: FeatureData,
}

macro_rules! delegate_params {
    ($t:ty) => {
        impl ParamStore for $t {
            fn family(&self) -> Family {
                self.params.family()
            }
            fn get(&self, coord: Coordinate) -> f64 {
                self.params.get(coord)
            }
            fn set(&mut self, coord: Coordinate, value: f64) {
                self.params.set(coord, value)
            }
            fn all_coordinates(&self) -> Vec<Coordinate> {
                self.params.all_coordinates()
            }
        }
    };
}

delegate_params!(MfsiModel);
delegate_params!(FmModel);
delegate_params!(TensorModel);

fn rows_with_feature(m: &crate::data::FeatureMatrix, l: usize) -> Vec<usize> {
    (0..m.num_rows()).filter(|&r| m.row(r).iter().any(|&(j, _)| j == l)).collect()
}

fn feature_embedding<T: Scalar>(x: &[(usize, f64)], table: &crate::matrix::Matrix, f: usize) -> T {
    x.iter().fold(T::ZERO, |acc, &(l, v)| acc + T::from(v) * T::from(table[(l, f)]))
}

fn dot_in<T: Scalar>(a: &[f64], b: &[f64]) -> T {
    a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + T::from(x) * T::from(y))
}

impl BruteForceModel for MfsiModel {
    fn num_contexts(&self) -> usize {
        self.feats.x.num_rows()
    }

    fn num_items(&self) -> usize {
        self.feats.z.num_rows()
    }

    fn predict_in<T: Scalar>(&self, c: usize, i: usize) -> T {
        let (x, z) = (self.feats.x.row(c), self.feats.z.row(i));
        (0..self.params.k()).fold(T::ZERO, |acc, f| {
            acc + feature_embedding::<T>(x, &self.params.w, f) * feature_embedding::<T>(z, &self.params.h, f)
        })
    }

    fn predict_cost(&self) -> u64 {
        let nnz = (self.feats.x.nnz() + self.feats.z.nnz()) as u64;
        let rows = (self.num_contexts() + self.num_items()).max(1) as u64;
        (nnz / rows + 1) * self.params.k() as u64
    }

    fn l2(&self, lambda: &Lambdas) -> f64 {
        self.params.l2(lambda)
    }

    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)> {
        match coord {
            Coordinate::ContextEmbedding { row, .. } => {
                grid_rows(rows_with_feature(&self.feats.x, row), self.num_items())
            }
            Coordinate::ItemEmbedding { row, .. } => {
                grid_cols(self.num_contexts(), rows_with_feature(&self.feats.z, row))
            }
            other => panic!("{other:?} is not an MFSI parameter"),
        }
    }

    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate> {
        embedding_order(self.params.k(), self.params.w.rows(), self.params.h.rows(), config)
    }
}

impl BruteForceModel for FmModel {
    fn num_contexts(&self) -> usize {
        self.feats.x.num_rows()
    }

    fn num_items(&self) -> usize {
        self.feats.z.num_rows()
    }

    /// Bias, linear terms and every pairwise interaction of the
    /// concatenated feature vector `(x_c, z_i)`.
    fn predict_in<T: Scalar>(&self, c: usize, i: usize) -> T {
        let p = &self.params;
        let mut feats: Vec<(f64, f64, &[f64])> = Vec::new();
        for &(l, v) in self.feats.x.row(c) {
            feats.push((v, p.w_linear[l], p.w.row(l)));
        }
        for &(l, v) in self.feats.z.row(i) {
            feats.push((v, p.h_linear[l], p.h.row(l)));
        }
        let mut y = T::from(p.b);
        for (a, &(va, lin, ea)) in feats.iter().enumerate() {
            y = y + T::from(lin) * T::from(va);
            for &(vb, _, eb) in &feats[a + 1..] {
                y = y + dot_in::<T>(ea, eb) * T::from(va) * T::from(vb);
            }
        }
        y
    }

    fn predict_cost(&self) -> u64 {
        let rows = (self.num_contexts() + self.num_items()).max(1);
        let avg = (self.feats.x.nnz() + self.feats.z.nnz()) / rows + 1;
        (avg * avg * self.params.k()) as u64
    }

    fn l2(&self, lambda: &Lambdas) -> f64 {
        self.params.l2(lambda)
    }

    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)> {
        let (nc, ni) = (self.num_contexts(), self.num_items());
        match coord {
            Coordinate::Bias => grid_rows(0..nc, ni),
            Coordinate::ContextLinear(l) | Coordinate::ContextEmbedding { row: l, .. } => {
                grid_rows(rows_with_feature(&self.feats.x, l), ni)
            }
            Coordinate::ItemLinear(l) | Coordinate::ItemEmbedding { row: l, .. } => {
                grid_cols(nc, rows_with_feature(&self.feats.z, l))
            }
            other => panic!("{other:?} is not an FM parameter"),
        }
    }

    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate> {
        let p = &self.params;
        let mut out = Vec::new();
        if !config.is_frozen(ParamKind::Bias) {
            out.push(Coordinate::Bias);
        }
        if !config.is_frozen(ParamKind::ContextLinear) {
            out.extend((0..p.w_linear.len()).map(Coordinate::ContextLinear));
        }
        if !config.is_frozen(ParamKind::ItemLinear) {
            out.extend((0..p.h_linear.len()).map(Coordinate::ItemLinear));
        }
        out.extend(embedding_order(p.k(), p.w.rows(), p.h.rows(), config));
        out
    }
}

/// PARAFAC or Tucker over an explicit list of context tuples (observed
/// tuples for sparse context, the full grid for dense context).
#[derive(Clone, Debug)]
pub struct TensorModel {
    pub params: TensorParams,
    pub tuples: Vec<(usize, usize)>,
}

impl TensorModel {
    pub fn new(params: impl Into<TensorParams>, dataset: &TensorDataset) -> Self {
        TensorModel {
            params: params.into(),
            tuples: dataset.contexts().iter().map(|t| (t.values()[0], t.values()[1])).collect(),
        }
    }

    pub fn parafac(params: ParafacParams, dataset: &TensorDataset) -> Self {
        TensorModel::new(params, dataset)
    }

    pub fn tucker(params: TuckerParams, dataset: &TensorDataset) -> Self {
        TensorModel::new(params, dataset)
    }
}

impl BruteForceModel for TensorModel {
    fn num_contexts(&self) -> usize {
        self.tuples.len()
    }

    fn num_items(&self) -> usize {
        self.params.w.rows()
    }

    /// Direct triple sum over the core (superdiagonal for PARAFAC).
    fn predict_in<T: Scalar>(&self, c: usize, i: usize) -> T {
        let (a, b) = self.tuples[c];
        let p = &self.params;
        let t = |x: f64| T::from(x);
        match p.core_tensor() {
            None => (0..p.u.cols()).fold(T::ZERO, |acc, f| acc + t(p.u[(a, f)]) * t(p.v[(b, f)]) * t(p.w[(i, f)])),
            Some(core) => {
                let [k1, k2, k3] = core.dims();
                let mut y = T::ZERO;
                for f1 in 0..k1 {
                    for f2 in 0..k2 {
                        for f3 in 0..k3 {
                            y = y + t(core.get(f1, f2, f3)) * t(p.u[(a, f1)]) * t(p.v[(b, f2)]) * t(p.w[(i, f3)]);
                        }
                    }
                }
                y
            }
        }
    }

    fn predict_cost(&self) -> u64 {
        match self.params.core_tensor() {
            None => self.params.u.cols() as u64,
            Some(core) => core.dims().iter().product::<usize>() as u64,
        }
    }

    fn l2(&self, lambda: &Lambdas) -> f64 {
        self.params.l2(lambda)
    }

    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)> {
        let ni = self.num_items();
        let having = |pred: &dyn Fn(&(usize, usize)) -> bool| -> Vec<usize> {
            (0..self.tuples.len()).filter(|&c| pred(&self.tuples[c])).collect()
        };
        match coord {
            Coordinate::ModeOne { row, .. } => grid_rows(having(&|t| t.0 == row), ni),
            Coordinate::ModeTwo { row, .. } => grid_rows(having(&|t| t.1 == row), ni),
            Coordinate::Core { .. } => grid_rows(0..self.tuples.len(), ni),
            Coordinate::ItemEmbedding { row, .. } => grid_cols(self.tuples.len(), [row]),
            other => panic!("{other:?} is not a tensor parameter"),
        }
    }

    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate> {
        let p = &self.params;
        let [k1, k2, k3] = p.dims();
        let [t_core, t_u, t_v, t_w] =
            [ParamKind::Core, ParamKind::ModeOne, ParamKind::ModeTwo, ParamKind::ItemEmbedding].map(|k| !config.is_frozen(k));
        let mut out = Vec::new();
        if t_core && p.core_tensor().is_some() {
            for f1 in 0..k1 {
                for f2 in 0..k2 {
                    out.extend((0..k3).map(|f3| Coordinate::Core { f1, f2, f3 }));
                }
            }
        }
        for dim in 0..k1.max(k2).max(k3) {
            if t_u && dim < k1 {
                out.extend((0..p.u.rows()).map(|row| Coordinate::ModeOne { row, dim }));
            }
            if t_v && dim < k2 {
                out.extend((0..p.v.rows()).map(|row| Coordinate::ModeTwo { row, dim }));
            }
            if t_w && dim < k3 {
                out.extend((0..p.w.rows()).map(|row| Coordinate::ItemEmbedding { row, dim }));
            }
        }
        out
    }
}

/// Target and confidence of every context-item cell: `(y, α)` for
/// positives, `(0, α₀)` elsewhere.
#[derive(Clone, Debug)]
pub struct ImplicitCells {
    num_items: usize,
    cells: Vec<(f64, f64)>,
}

impl ImplicitCells {
    pub fn new(dataset: &ImplicitDataset, cap: usize) -> Result<Self> {
        let (nc, ni) = (dataset.num_contexts(), dataset.num_items());
        let n = check_cap(nc, ni, cap)?;
        let mut cells = vec![(0.0, dataset.alpha0()); n];
        for o in dataset.positives() {
            cells[o.context * ni + o.item] = (o.y, o.alpha);
        }
        Ok(ImplicitCells { num_items: ni, cells })
    }

    pub fn get(&self, c: usize, i: usize) -> (f64, f64) {
        self.cells[c * self.num_items + i]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn check_cap(nc: usize, ni: usize, cap: usize) -> Result<usize> {
    match nc.checked_mul(ni) {
        Some(n) if n <= cap => Ok(n),
        n => Err(IcdError::OracleCap {
            cells: n.unwrap_or(usize::MAX),
            cap,
        }),
    }
}

fn check_model<M: BruteForceModel + ?Sized>(model: &M, dataset: &ImplicitDataset) -> Result<()> {
    if model.num_contexts() != dataset.num_contexts() {
        return Err(IcdError::DimensionMismatch {
            what: "oracle contexts",
            expected: dataset.num_contexts(),
            found: model.num_contexts(),
        });
    }
    if model.num_items() != dataset.num_items() {
        return Err(IcdError::DimensionMismatch {
            what: "oracle items",
            expected: dataset.num_items(),
            found: model.num_items(),
        });
    }
    Ok(())
}

/// `Σ_c Σ_i ŷ(c,i)²` by enumeration.
pub fn naive_regularizer<M: BruteForceModel + ?Sized>(model: &M, cap: usize) -> Result<f64> {
    let (nc, ni) = (model.num_contexts(), model.num_items());
    check_cap(nc, ni, cap)?;
    let mut r = Neumaier::default();
    for c in 0..nc {
        for i in 0..ni {
            let y = model.predict(c, i);
            r.add(y * y);
        }
    }
    Ok(r.total())
}

/// Compensated summation, so that cells which do not move between probes
/// cancel in finite differences.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `Σ_{S⁺} α(ŷ−y)² + Σ_{S⁰} α₀ŷ² + L2`, by enumeration.
pub fn naive_implicit_objective<M: BruteForceModel + ?Sized>(
    model: &M,
    dataset: &ImplicitDataset,
    lambda: &Lambdas,
) -> Result<f64> {
    check_model(model, dataset)?;
    let cells = ImplicitCells::new(dataset, DEFAULT_CELL_CAP)?;
    let mut total = Neumaier::default();
    for c in 0..model.num_contexts() {
        for i in 0..model.num_items() {
            let (y, a) = cells.get(c, i);
            let e = model.predict(c, i) - y;
            total.add(a * e * e);
        }
    }
    total.add(model.l2(lambda));
    Ok(total.total())
}

/// Loss derivatives over the cells `coord` touches. Predictions are affine
/// in each coordinate, so `ŷ′ = ŷ(θ+1) − ŷ(θ)`; the model is restored to
/// `θ` exactly afterwards.
fn grads_over<M: BruteForceModel>(model: &mut M, cells: &ImplicitCells, coord: Coordinate, lambda: f64) -> (GradPair, usize) {
    let touched = model.touched_cells(coord);
    let theta = model.get(coord);
    let base: Vec<f64> = touched.iter().map(|&(c, i)| model.predict(c, i)).collect();
    model.set(coord, theta + 1.0);
    let (mut d1, mut d2) = (0.0, 0.0);
    for (&(c, i), &y_hat) in touched.iter().zip(&base) {
        let slope = model.predict(c, i) - y_hat;
        let (y, a) = cells.get(c, i);
        d1 += a * (y_hat - y) * slope;
        d2 += a * slope * slope;
    }
    model.set(coord, theta);
    (GradPair::new(2.0 * d1 + 2.0 * lambda * theta, 2.0 * d2 + 2.0 * lambda), touched.len())
}

/// First and second derivative of the naive implicit objective in `coord`.
pub fn naive_coordinate_grads<M: BruteForceModel + Clone>(
    model: &M,
    dataset: &ImplicitDataset,
    coord: Coordinate,
    lambda: &Lambdas,
) -> Result<GradPair> {
    check_model(model, dataset)?;
    let cells = ImplicitCells::new(dataset, DEFAULT_CELL_CAP)?;
    Ok(grads_over(&mut model.clone(), &cells, coord, lambda.for_kind(coord.kind())).0)
}

#[derive(Clone, Debug, Default)]
pub struct NaiveEpoch {
    pub trace: UpdateTrace,
    pub skipped: u64,
    /// Multiply-adds spent, by the same accounting as the model's
    /// `predict_cost`.
    pub flops: u64,
}

/// One conventional CD epoch over the materialized implicit cells, in the
/// trainer's coordinate order.
pub fn naive_cd_epoch<M: BruteForceModel + Clone>(
    model: &mut M,
    dataset: &ImplicitDataset,
    config: &SolverConfig,
) -> Result<NaiveEpoch> {
    config.validate()?;
    check_model(model, dataset)?;
    let cells = ImplicitCells::new(dataset, DEFAULT_CELL_CAP)?;
    let mut out = NaiveEpoch::default();
    let cost = model.predict_cost();
    for coord in model.coordinate_order(config) {
        let (g, n) = grads_over(model, &cells, coord, config.lambda.for_kind(coord.kind()));
        out.flops += n as u64 * (2 * cost + 4);
        let theta = model.get(coord);
        let s = newton_step(theta, g, GradPair::ZERO, 0.0, config.eta, config.epsilon_guard)?;
        out.skipped += s.skipped as u64;
        model.set(coord, s.value);
        out.trace.push(coord, s.value);
    }
    Ok(out)
}

/// Arithmetic the brute-force formulas can be evaluated in.
pub trait Scalar: Copy + From<f64> + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    const ZERO: Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    fn to_f64(self) -> f64 {
        self
    }
}

/// Double-double number `hi + lo`, about 32 significant digits.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> DoubleDouble {
    let s = a + b;
    DoubleDouble { hi: s, lo: b - (s - a) }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + DoubleDouble { hi: -o.hi, lo: -o.lo }
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Scalar for DoubleDouble {
    const ZERO: Self = DoubleDouble { hi: 0.0, lo: 0.0 };
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn regularizer_in<T: Scalar, M: BruteForceModel + ?Sized>(model: &M) -> T {
    let mut r = T::ZERO;
    for c in 0..model.num_contexts() {
        for i in 0..model.num_items() {
            let y = model.predict_in::<T>(c, i);
            r = r + y * y;
        }
    }
    r
}

/// A real function of one parameter value, everything else held fixed.
pub struct ScalarField<'a> {
    f: Box<dyn Fn(f64) -> f64 + 'a>,
}

impl<'a> ScalarField<'a> {
    pub fn new(f: impl Fn(f64) -> f64 + 'a) -> Self {
        ScalarField { f: Box::new(f) }
    }

    /// Naive regularizer as a function of `coord`, shifted by its value at
    /// the current parameters. The enumeration runs in double-double
    /// arithmetic: a second difference at `h = 1e-5` amplifies f64 rounding
    /// of `R` by `1/h²`, which would otherwise swamp the curvature.
    pub fn regularizer<M: BruteForceModel + Clone + 'a>(model: &'a M, coord: Coordinate) -> Self {
        check_cap(model.num_contexts(), model.num_items(), DEFAULT_CELL_CAP).expect("probe within cap");
        let center: DoubleDouble = regularizer_in(model);
        ScalarField::new(move |theta| {
            let mut m = model.clone();
            m.set(coord, theta);
            (regularizer_in::<DoubleDouble, _>(&m) - center).to_f64()
        })
    }

    /// Naive implicit objective as a function of `coord`.
    pub fn objective<M: BruteForceModel + Clone + 'a>(
        model: &'a M,
        dataset: &'a ImplicitDataset,
        lambda: Lambdas,
        coord: Coordinate,
    ) -> Self {
        ScalarField::new(move |theta| {
            let mut m = model.clone();
            m.set(coord, theta);
            naive_implicit_objective(&m, dataset, &lambda).expect("probe within cap")
        })
    }

    pub fn eval(&self, theta: f64) -> f64 {
        (self.f)(theta)
    }
}

/// Central differences `((f(θ+h)−f(θ−h))/2h, (f(θ+h)−2f(θ)+f(θ−h))/h²)`.
pub fn central_difference(field: &ScalarField<'_>, theta: f64, h: f64) -> Result<GradPair> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(IcdError::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let (lo, mid, hi) = (field.eval(theta - h), field.eval(theta), field.eval(theta + h));
    if !(lo.is_finite() && mid.is_finite() && hi.is_finite()) {
        return Err(IcdError::NonFinite("finite-difference probe"));
    }
    Ok(GradPair::new((hi - lo) / (2.0 * h), (hi - 2.0 * mid + lo) / (h * h)))
}

/// `|a − b| ≤ tol·max(|a|, |b|, 1)`.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
