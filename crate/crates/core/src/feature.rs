//! Models over sparse design matrices: MF with side information and
//! second-order factorization machines.
//!
//! MFSI scores `ŷ(c, i) = x_c W (z_i H)ᵀ`. FM scores the concatenated
//! feature vector `(x_c, z_i)` with a bias, linear weights and all pairwise
//! factorized interactions. Its separable form has width `k + 2`: dims
//! `0..k` carry the context-item interactions, dim `k` carries the bias,
//! context linear terms and context-internal pairs (`ψ_k = 1`), and dim
//! `k + 1` carries the item linear terms and item-internal pairs (`φ_{k+1} = 1`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Lambdas, SolverConfig};
use crate::data::{FeatureMatrix, ImplicitDataset};
use crate::error::{IcdError, Result};
use crate::matrix::{dot, Matrix};
use crate::mf::{check_shape, embedding_coordinates};
use crate::params::{Coordinate, Family, ParamKind, ParamStore};
use crate::separable::{
    reg_grads_generic, reg_value, GradPair, GramMatrix, PhiDerivative, SeparableState,
};
use crate::train::{
    fit, implicit_objective, separable_grads, update_separable, CoordGrads, Explicit, ImplicitSolver,
    Runtime, Side, TrainReport,
};

/// Design matrices for both sides plus their column views.
#[derive(Clone, Debug)]
pub struct FeatureData {
    pub x: FeatureMatrix,
    pub z: FeatureMatrix,
    xt: FeatureMatrix,
    zt: FeatureMatrix,
}

impl FeatureData {
    pub fn new(x: FeatureMatrix, z: FeatureMatrix) -> Self {
        let (xt, zt) = (x.transpose(), z.transpose());
        FeatureData { x, z, xt, zt }
    }

    /// `(context, x_{c,l})` for every context with a non-zero feature `l`.
    pub fn context_column(&self, l: usize) -> &[(usize, f64)] {
        self.xt.row(l)
    }

    pub fn item_column(&self, l: usize) -> &[(usize, f64)] {
        self.zt.row(l)
    }

    fn check(&self, dataset: &ImplicitDataset) -> Result<()> {
        check_shape("context feature rows", self.x.num_rows(), dataset.num_contexts())?;
        check_shape("item feature rows", self.z.num_rows(), dataset.num_items())
    }
}

/// `X·W` for a sparse `X`.
pub fn sparse_product(x: &FeatureMatrix, w: &Matrix) -> Result<Matrix> {
    check_shape("embedding rows", w.rows(), x.num_features())?;
    let mut out = Matrix::zeros(x.num_rows(), w.cols());
    for (r, row) in x.rows().iter().enumerate() {
        let dst = out.row_mut(r);
        for &(l, v) in row {
            for (d, &e) in dst.iter_mut().zip(w.row(l)) {
                *d += v * e;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfsiParams {
    pub w: Matrix,
    pub h: Matrix,
}

impl MfsiParams {
    pub fn new(w: Matrix, h: Matrix) -> Result<Self> {
        check_shape("embedding width", h.cols(), w.cols())?;
        Ok(MfsiParams { w, h })
    }

    pub fn init(context_features: usize, item_features: usize, config: &SolverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = Matrix::random_normal(context_features, config.k, config.sigma, &mut rng);
        let h = Matrix::random_normal(item_features, config.k, config.sigma, &mut rng);
        MfsiParams { w, h }
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    pub fn l2(&self, lambda: &Lambdas) -> f64 {
        lambda.embedding * (sum_sq(self.w.as_slice()) + sum_sq(self.h.as_slice()))
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl ParamStore for MfsiParams {
    fn family(&self) -> Family {
        Family::Mfsi
    }

    fn get(&self, coord: Coordinate) -> f64 {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)],
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)],
            other => panic!("{other:?} is not an MFSI parameter"),
        }
    }

    fn set(&mut self, coord: Coordinate, value: f64) {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)] = value,
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)] = value,
            other => panic!("{other:?} is not an MFSI parameter"),
        }
    }

    fn all_coordinates(&self) -> Vec<Coordinate> {
        embedding_coordinates(&self.w, &self.h)
    }
}

/// `Φ = X·W`, `Ψ = Z·H`.
pub fn mfsi_representation(params: &MfsiParams, x: &FeatureMatrix, z: &FeatureMatrix) -> Result<SeparableState> {
    SeparableState::new(sparse_product(x, &params.w)?, sparse_product(z, &params.h)?)
}

/// Regularizer derivatives for `w_{l*, f*}`, where `column` lists the
/// non-zero entries `(c, x_{c,l*})` of feature `l*`.
pub fn mfsi_reg_grads(column: &[(usize, f64)], f_star: usize, phi: &Matrix, j_other: &GramMatrix) -> GradPair {
    let k = phi.cols();
    let mut cross = vec![0.0; k];
    let mut sq = 0.0;
    for &(c, x) in column {
        for (acc, &p) in cross.iter_mut().zip(phi.row(c)) {
            *acc += x * p;
        }
        sq += x * x;
    }
    GradPair::new(
        2.0 * dot(j_other.row(f_star), &cross),
        2.0 * j_other.get(f_star, f_star) * sq,
    )
}

/// Keeps `Φ` consistent after `w_{l*, f*}` moved from `w_old` to `w_new`.
pub fn phi_sync(phi: &mut Matrix, column: &[(usize, f64)], f_star: usize, w_old: f64, w_new: f64) {
    let delta = w_new - w_old;
    if delta == 0.0 {
        return;
    }
    for &(c, x) in column {
        phi[(c, f_star)] += x * delta;
    }
}

/// Coordinate-descent solver for MFSI. Per dimension `f`: every context
/// feature, then every item feature.
#[derive(Clone, Debug)]
pub struct MfsiSolver {
    rt: Runtime,
    params: MfsiParams,
    feats: FeatureData,
    ex: Explicit,
    phi: Matrix,
    psi: Matrix,
    j_c: GramMatrix,
    j_i: GramMatrix,
}

impl MfsiSolver {
    pub fn new(
        dataset: &ImplicitDataset,
        feats: FeatureData,
        config: SolverConfig,
        params: MfsiParams,
    ) -> Result<Self> {
        config.check_alpha0(dataset.alpha0())?;
        feats.check(dataset)?;
        check_shape("W rows", params.w.rows(), feats.x.num_features())?;
        check_shape("H rows", params.h.rows(), feats.z.num_features())?;
        check_shape("embedding width", params.k(), config.k)?;
        let state = mfsi_representation(&params, &feats.x, &feats.z)?;
        let k = params.k();
        let mut s = MfsiSolver {
            rt: Runtime::new(config)?,
            ex: Explicit::new(dataset)?,
            params,
            feats,
            phi: state.phi,
            psi: state.psi,
            j_c: GramMatrix::zeros(k),
            j_i: GramMatrix::zeros(k),
        };
        s.refresh();
        Ok(s)
    }

    pub fn params(&self) -> &MfsiParams {
        &self.params
    }

    pub fn into_params(self) -> MfsiParams {
        self.params
    }

    /// Largest gap between the incrementally synced `Φ`/`Ψ` and a recompute.
    pub fn phi_drift(&self) -> f64 {
        let fresh = self.separable_state();
        self.phi.max_abs_diff(&fresh.phi).max(self.psi.max_abs_diff(&fresh.psi))
    }

    fn grads(&self, side: Side, l: usize, f: usize) -> (CoordGrads, Vec<(usize, f64)>) {
        let lambda = self.rt.config.lambda.embedding;
        match side {
            Side::Context => {
                let col = self.feats.context_column(l);
                let d = PhiDerivative::single(f, col);
                let touched = self.ex.touched(side, &d, &self.psi);
                let g = CoordGrads {
                    loss: self.ex.grads(self.params.w[(l, f)], lambda, &touched),
                    reg: mfsi_reg_grads(col, f, &self.phi, &self.j_i),
                };
                (g, touched)
            }
            Side::Item => {
                let col = self.feats.item_column(l);
                let d = PhiDerivative::single(f, col);
                let touched = self.ex.touched(side, &d, &self.phi);
                let g = CoordGrads {
                    loss: self.ex.grads(self.params.h[(l, f)], lambda, &touched),
                    reg: mfsi_reg_grads(col, f, &self.psi, &self.j_c),
                };
                (g, touched)
            }
        }
    }

    fn update(&mut self, side: Side, l: usize, f: usize) -> Result<()> {
        let (g, touched) = self.grads(side, l, f);
        let (coord, theta, col_len) = match side {
            Side::Context => (
                Coordinate::ContextEmbedding { row: l, dim: f },
                self.params.w[(l, f)],
                self.feats.context_column(l).len(),
            ),
            Side::Item => (
                Coordinate::ItemEmbedding { row: l, dim: f },
                self.params.h[(l, f)],
                self.feats.item_column(l).len(),
            ),
        };
        let k = self.params.k() as u64;
        let c = &mut self.rt.counters;
        c.explicit_flops += 2 * touched.len() as u64;
        c.reg_flops += col_len as u64 * k + k;
        c.sync_flops += col_len as u64;
        if side == Side::Context {
            c.context_visits += col_len as u64;
        }
        let value = self.rt.step(coord, theta, g)?;
        let delta = value - theta;
        if delta != 0.0 {
            match side {
                Side::Context => {
                    self.params.w[(l, f)] = value;
                    phi_sync(&mut self.phi, self.feats.xt.row(l), f, theta, value);
                }
                Side::Item => {
                    self.params.h[(l, f)] = value;
                    phi_sync(&mut self.psi, self.feats.zt.row(l), f, theta, value);
                }
            }
            self.ex.shift(&touched, delta);
        }
        Ok(())
    }
}

impl ImplicitSolver for MfsiSolver {
    fn family(&self) -> Family {
        Family::Mfsi
    }

    fn runtime(&self) -> &Runtime {
        &self.rt
    }

    fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.rt
    }

    fn refresh(&mut self) {
        let state = self.separable_state();
        self.phi = state.phi;
        self.psi = state.psi;
        refresh_common(&mut self.rt, &mut self.ex, &self.phi, &self.psi, &mut self.j_c, &mut self.j_i);
        let k = self.params.k() as u64;
        self.rt.counters.sync_flops += (self.feats.x.nnz() + self.feats.z.nnz()) as u64 * k;
    }

    fn run_epoch(&mut self) -> Result<()> {
        self.refresh();
        let (pc, pi) = (self.params.w.rows(), self.params.h.rows());
        let train_c = !self.rt.config.is_frozen(ParamKind::ContextEmbedding);
        let train_i = !self.rt.config.is_frozen(ParamKind::ItemEmbedding);
        for f in 0..self.params.k() {
            if train_c {
                for l in 0..pc {
                    self.update(Side::Context, l, f)?;
                }
                self.rt.counters.gram_flops += self.j_c.refresh_row(&self.phi, f);
            }
            if train_i {
                for l in 0..pi {
                    self.update(Side::Item, l, f)?;
                }
                self.rt.counters.gram_flops += self.j_i.refresh_row(&self.psi, f);
            }
        }
        Ok(())
    }

    fn objective(&self) -> Result<f64> {
        let s = self.separable_state();
        objective_from_state(&self.rt, &self.ex, &s, self.params.l2(&self.rt.config.lambda))
    }

    fn gradients(&self, coord: Coordinate) -> Result<CoordGrads> {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => Ok(self.grads(Side::Context, row, dim).0),
            Coordinate::ItemEmbedding { row, dim } => Ok(self.grads(Side::Item, row, dim).0),
            other => Err(IcdError::InvalidConfig(format!("{other:?} is not an MFSI parameter"))),
        }
    }

    fn separable_state(&self) -> SeparableState {
        mfsi_representation(&self.params, &self.feats.x, &self.feats.z).expect("shapes checked at construction")
    }
}

fn refresh_common(
    rt: &mut Runtime,
    ex: &mut Explicit,
    phi: &Matrix,
    psi: &Matrix,
    j_c: &mut GramMatrix,
    j_i: &mut GramMatrix,
) {
    let k = phi.cols() as u64;
    *j_c = rt.gram_par(phi);
    *j_i = rt.gram_par(psi);
    rt.counters.gram_flops += (phi.rows() + psi.rows()) as u64 * k * k;
    ex.recompute(|o| dot(phi.row(o.context), psi.row(o.item)));
    rt.counters.explicit_flops += ex.obs.len() as u64 * k;
}

fn objective_from_state(rt: &Runtime, ex: &Explicit, s: &SeparableState, l2: f64) -> Result<f64> {
    let loss = ex.loss_with(|o| s.predict(o.context, o.item));
    let reg = reg_value(&rt.gram_par(&s.phi), &rt.gram_par(&s.psi))?;
    Ok(implicit_objective(loss, rt.config.alpha0, reg, l2, ex.offset))
}

pub fn train_mfsi(
    dataset: &ImplicitDataset,
    feats: FeatureData,
    config: &SolverConfig,
) -> Result<(MfsiParams, TrainReport)> {
    let params = MfsiParams::init(feats.x.num_features(), feats.z.num_features(), config);
    let mut solver = MfsiSolver::new(dataset, feats, config.clone(), params)?;
    let report = fit(&mut solver)?;
    Ok((solver.into_params(), report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmParams {
    pub b: f64,
    pub w_linear: Vec<f64>,
    pub h_linear: Vec<f64>,
    pub w: Matrix,
    pub h: Matrix,
}

impl FmParams {
    pub fn new(b: f64, w_linear: Vec<f64>, h_linear: Vec<f64>, w: Matrix, h: Matrix) -> Result<Self> {
        check_shape("embedding width", h.cols(), w.cols())?;
        check_shape("context linear weights", w_linear.len(), w.rows())?;
        check_shape("item linear weights", h_linear.len(), h.rows())?;
        Ok(FmParams {
            b,
            w_linear,
            h_linear,
            w,
            h,
        })
    }

    /// `W` then `H` from `N(0, sigma)`; bias and linear weights start at 0.
    pub fn init(context_features: usize, item_features: usize, config: &SolverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = Matrix::random_normal(context_features, config.k, config.sigma, &mut rng);
        let h = Matrix::random_normal(item_features, config.k, config.sigma, &mut rng);
        FmParams {
            b: 0.0,
            w_linear: vec![0.0; context_features],
            h_linear: vec![0.0; item_features],
            w,
            h,
        }
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    pub fn l2(&self, lambda: &Lambdas) -> f64 {
        lambda.bias * self.b * self.b
            + lambda.linear * (sum_sq(&self.w_linear) + sum_sq(&self.h_linear))
            + lambda.embedding * (sum_sq(self.w.as_slice()) + sum_sq(self.h.as_slice()))
    }
}

impl ParamStore for FmParams {
    fn family(&self) -> Family {
        Family::Fm
    }

    fn get(&self, coord: Coordinate) -> f64 {
        match coord {
            Coordinate::Bias => self.b,
            Coordinate::ContextLinear(l) => self.w_linear[l],
            Coordinate::ItemLinear(l) => self.h_linear[l],
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)],
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)],
            other => panic!("{other:?} is not an FM parameter"),
        }
    }

    fn set(&mut self, coord: Coordinate, value: f64) {
        match coord {
            Coordinate::Bias => self.b = value,
            Coordinate::ContextLinear(l) => self.w_linear[l] = value,
            Coordinate::ItemLinear(l) => self.h_linear[l] = value,
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)] = value,
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)] = value,
            other => panic!("{other:?} is not an FM parameter"),
        }
    }

    fn all_coordinates(&self) -> Vec<Coordinate> {
        let mut out = vec![Coordinate::Bias];
        out.extend((0..self.w_linear.len()).map(Coordinate::ContextLinear));
        out.extend((0..self.h_linear.len()).map(Coordinate::ItemLinear));
        out.extend(embedding_coordinates(&self.w, &self.h));
        out
    }
}

/// One side of the FM separable form: factorized columns, then the
/// linear-plus-internal-pairs column.
fn fm_side(x: &FeatureMatrix, linear: &[f64], v: &Matrix, offset: f64) -> Result<(Matrix, Vec<f64>)> {
    let xv = sparse_product(x, v)?;
    let extra = x
        .rows()
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let lin: f64 = row.iter().map(|&(l, val)| val * linear[l]).sum();
            let mut pairs = 0.0;
            for f in 0..v.cols() {
                let sq: f64 = row.iter().map(|&(l, val)| val * val * v[(l, f)] * v[(l, f)]).sum();
                pairs += xv[(r, f)] * xv[(r, f)] - sq;
            }
            offset + lin + 0.5 * pairs
        })
        .collect();
    Ok((xv, extra))
}

/// `(k+2)`-wide `Φ`, `Ψ` for FM.
pub fn fm_representation(params: &FmParams, x: &FeatureMatrix, z: &FeatureMatrix) -> Result<SeparableState> {
    check_shape("context linear weights", params.w_linear.len(), x.num_features())?;
    check_shape("item linear weights", params.h_linear.len(), z.num_features())?;
    let k = params.k();
    let (xw, ctx_extra) = fm_side(x, &params.w_linear, &params.w, params.b)?;
    let (zh, item_extra) = fm_side(z, &params.h_linear, &params.h, 0.0)?;
    let mut phi = Matrix::zeros(x.num_rows(), k + 2);
    for c in 0..x.num_rows() {
        let row = phi.row_mut(c);
        row[..k].copy_from_slice(xw.row(c));
        row[k] = ctx_extra[c];
        row[k + 1] = 1.0;
    }
    let mut psi = Matrix::zeros(z.num_rows(), k + 2);
    for i in 0..z.num_rows() {
        let row = psi.row_mut(i);
        row[..k].copy_from_slice(zh.row(i));
        row[k] = 1.0;
        row[k + 1] = item_extra[i];
    }
    SeparableState::new(phi, psi)
}

/// Side and non-zero `∂φ/∂θ` (or `∂ψ/∂θ`) of one FM parameter, read from the
/// current tables.
pub fn fm_phi_derivative(
    coord: Coordinate,
    params: &FmParams,
    feats: &FeatureData,
    state: &SeparableState,
) -> Result<(Side, PhiDerivative)> {
    let k = params.k();
    let embedding = |col: &[(usize, f64)], table: &Matrix, f: usize, theta: f64, extra: usize| PhiDerivative {
        rows: col.iter().map(|e| e.0).collect(),
        dims: vec![f, extra],
        values: vec![
            col.iter().map(|e| e.1).collect(),
            col.iter().map(|&(r, x)| x * (table[(r, f)] - x * theta)).collect(),
        ],
    };
    Ok(match coord {
        Coordinate::Bias => {
            let n = state.phi.rows();
            (
                Side::Context,
                PhiDerivative {
                    rows: (0..n).collect(),
                    dims: vec![k],
                    values: vec![vec![1.0; n]],
                },
            )
        }
        Coordinate::ContextLinear(l) => (Side::Context, PhiDerivative::single(k, feats.context_column(l))),
        Coordinate::ItemLinear(l) => (Side::Item, PhiDerivative::single(k + 1, feats.item_column(l))),
        Coordinate::ContextEmbedding { row, dim } => (
            Side::Context,
            embedding(feats.context_column(row), &state.phi, dim, params.w[(row, dim)], k),
        ),
        Coordinate::ItemEmbedding { row, dim } => (
            Side::Item,
            embedding(feats.item_column(row), &state.psi, dim, params.h[(row, dim)], k + 1),
        ),
        other => return Err(IcdError::InvalidConfig(format!("{other:?} is not an FM parameter"))),
    })
}

/// Regularizer derivatives of one FM parameter through the generic kernel.
pub fn fm_reg_grads(
    coord: Coordinate,
    params: &FmParams,
    feats: &FeatureData,
    state: &SeparableState,
    j_c: &GramMatrix,
    j_i: &GramMatrix,
) -> Result<GradPair> {
    let (side, d) = fm_phi_derivative(coord, params, feats, state)?;
    let (table, j_other) = match side {
        Side::Context => (&state.phi, j_i),
        Side::Item => (&state.psi, j_c),
    };
    Ok(reg_grads_generic(&d.support_columns(), table, j_other, &[]))
}

/// Coordinate-descent solver for FM. Per epoch: bias, context linear
/// weights, item linear weights, then per dimension `f` every context
/// feature and every item feature.
#[derive(Clone, Debug)]
pub struct FmSolver {
    rt: Runtime,
    params: FmParams,
    feats: FeatureData,
    ex: Explicit,
    state: SeparableState,
    j_c: GramMatrix,
    j_i: GramMatrix,
}

impl FmSolver {
    pub fn new(dataset: &ImplicitDataset, feats: FeatureData, config: SolverConfig, params: FmParams) -> Result<Self> {
        config.check_alpha0(dataset.alpha0())?;
        feats.check(dataset)?;
        check_shape("W rows", params.w.rows(), feats.x.num_features())?;
        check_shape("H rows", params.h.rows(), feats.z.num_features())?;
        check_shape("embedding width", params.k(), config.k)?;
        let state = fm_representation(&params, &feats.x, &feats.z)?;
        let k = params.k();
        let mut s = FmSolver {
            rt: Runtime::new(config)?,
            ex: Explicit::new(dataset)?,
            params,
            feats,
            state,
            j_c: GramMatrix::zeros(k + 2),
            j_i: GramMatrix::zeros(k + 2),
        };
        s.refresh();
        Ok(s)
    }

    pub fn params(&self) -> &FmParams {
        &self.params
    }

    pub fn into_params(self) -> FmParams {
        self.params
    }

    pub fn phi_drift(&self) -> f64 {
        let fresh = self.separable_state();
        self.state
            .phi
            .max_abs_diff(&fresh.phi)
            .max(self.state.psi.max_abs_diff(&fresh.psi))
    }

    fn update(&mut self, coord: Coordinate) -> Result<()> {
        let (side, d) = fm_phi_derivative(coord, &self.params, &self.feats, &self.state)?;
        let theta = self.params.get(coord);
        let SeparableState { phi, psi } = &mut self.state;
        let value = match side {
            Side::Context => update_separable(&mut self.rt, &mut self.ex, coord, side, &d, theta, phi, psi, &self.j_i)?,
            Side::Item => update_separable(&mut self.rt, &mut self.ex, coord, side, &d, theta, psi, phi, &self.j_c)?,
        };
        self.params.set(coord, value);
        Ok(())
    }

    fn refresh_rows(&mut self, side: Side, rows: &[usize]) {
        for &f in rows {
            self.rt.counters.gram_flops += match side {
                Side::Context => self.j_c.refresh_row(&self.state.phi, f),
                Side::Item => self.j_i.refresh_row(&self.state.psi, f),
            };
        }
    }
}

impl ImplicitSolver for FmSolver {
    fn family(&self) -> Family {
        Family::Fm
    }

    fn runtime(&self) -> &Runtime {
        &self.rt
    }

    fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.rt
    }

    fn refresh(&mut self) {
        self.state = self.separable_state();
        refresh_common(
            &mut self.rt,
            &mut self.ex,
            &self.state.phi,
            &self.state.psi,
            &mut self.j_c,
            &mut self.j_i,
        );
        let k = self.params.k() as u64;
        self.rt.counters.sync_flops += (self.feats.x.nnz() + self.feats.z.nnz()) as u64 * 2 * k;
    }

    fn run_epoch(&mut self) -> Result<()> {
        self.refresh();
        let k = self.params.k();
        let (pc, pi) = (self.params.w.rows(), self.params.h.rows());
        let cfg = &self.rt.config;
        let [bias, c_lin, i_lin, c_emb, i_emb] = [
            ParamKind::Bias,
            ParamKind::ContextLinear,
            ParamKind::ItemLinear,
            ParamKind::ContextEmbedding,
            ParamKind::ItemEmbedding,
        ]
        .map(|kind| !cfg.is_frozen(kind));

        if bias {
            self.update(Coordinate::Bias)?;
        }
        if c_lin {
            for l in 0..pc {
                self.update(Coordinate::ContextLinear(l))?;
            }
        }
        if bias || c_lin {
            self.refresh_rows(Side::Context, &[k]);
        }
        if i_lin {
            for l in 0..pi {
                self.update(Coordinate::ItemLinear(l))?;
            }
            self.refresh_rows(Side::Item, &[k + 1]);
        }
        for f in 0..k {
            if c_emb {
                for l in 0..pc {
                    self.update(Coordinate::ContextEmbedding { row: l, dim: f })?;
                }
                self.refresh_rows(Side::Context, &[f, k]);
            }
            if i_emb {
                for l in 0..pi {
                    self.update(Coordinate::ItemEmbedding { row: l, dim: f })?;
                }
                self.refresh_rows(Side::Item, &[f, k + 1]);
            }
        }
        Ok(())
    }

    fn objective(&self) -> Result<f64> {
        let s = self.separable_state();
        objective_from_state(&self.rt, &self.ex, &s, self.params.l2(&self.rt.config.lambda))
    }

    fn gradients(&self, coord: Coordinate) -> Result<CoordGrads> {
        let (side, d) = fm_phi_derivative(coord, &self.params, &self.feats, &self.state)?;
        let lambda = self.rt.config.lambda.for_kind(coord.kind());
        let theta = self.params.get(coord);
        let (s, j_c, j_i) = (&self.state, &self.j_c, &self.j_i);
        Ok(match side {
            Side::Context => separable_grads(&self.ex, side, &d, theta, lambda, &s.phi, &s.psi, j_i).0,
            Side::Item => separable_grads(&self.ex, side, &d, theta, lambda, &s.psi, &s.phi, j_c).0,
        })
    }

    fn separable_state(&self) -> SeparableState {
        fm_representation(&self.params, &self.feats.x, &self.feats.z).expect("shapes checked at construction")
    }
}

pub fn train_fm(dataset: &ImplicitDataset, feats: FeatureData, config: &SolverConfig) -> Result<(FmParams, TrainReport)> {
    let params = FmParams::init(feats.x.num_features(), feats.z.num_features(), config);
    let mut solver = FmSolver::new(dataset, feats, config.clone(), params)?;
    let report = fit(&mut solver)?;
    Ok((solver.into_params(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assemble_feature_matrix;
    use crate::mf::{mf_reg_grads, MfParams};
    use crate::separable::compute_gram;

    fn fm_toy() -> (FmParams, FeatureData) {
        let x = assemble_feature_matrix(vec![vec![(0, 1.0)]], 1).unwrap();
        let z = assemble_feature_matrix(vec![vec![(0, 1.0)]], 1).unwrap();
        let p = FmParams::new(
            0.0,
            vec![0.0],
            vec![0.0],
            Matrix::from_rows(&[[2.0]]),
            Matrix::from_rows(&[[3.0]]),
        )
        .unwrap();
        (p, FeatureData::new(x, z))
    }

    #[test]
    fn mfsi_representation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MfsiParams::new(
            Matrix::random_normal(3, 2, 1.0, &mut rng),
            Matrix::random_normal(2, 2, 1.0, &mut rng),
        )
        .unwrap();
        let s = mfsi_representation(&p, &FeatureMatrix::one_hot(3), &FeatureMatrix::one_hot(2)).unwrap();
        assert_eq!((s.phi, s.psi), (p.w.clone(), p.h.clone()));

        let x = assemble_feature_matrix(vec![vec![(0, 1.0), (1, 1.0)]], 2).unwrap();
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(sparse_product(&x, &w).unwrap().row(0), &[4.0, 6.0]);
    }

    #[test]
    fn mfsi_reg_grads_reduce_to_mf_on_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mf = MfParams::init(5, 4, &SolverConfig { k: 3, sigma: 1.0, ..Default::default() });
        let j_i = compute_gram(&mf.h);
        let xt = FeatureMatrix::one_hot(5).transpose();
        for c in 0..5 {
            for f in 0..3 {
                let a = mfsi_reg_grads(xt.row(c), f, &mf.w, &j_i);
                let b = mf_reg_grads(mf.w.row(c), f, &j_i);
                assert!((a.first - b.first).abs() <= 1e-12 * (1.0 + b.first.abs()));
                assert_eq!(a.second, b.second);
            }
        }
        let empty = mfsi_reg_grads(&[], 0, &Matrix::random_normal(5, 3, 1.0, &mut rng), &j_i);
        assert_eq!(empty, GradPair::ZERO);
    }

    #[test]
    fn phi_sync_examples() {
        let mut phi = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let before = phi.clone();
        phi_sync(&mut phi, &[(0, 1.0), (1, 2.0)], 1, 0.5, 0.5);
        assert_eq!(phi, before);
        phi_sync(&mut phi, &[(1, 1.0)], 0, 0.5, 1.5);
        assert_eq!(phi, Matrix::from_rows(&[[1.0, 2.0], [4.0, 4.0]]));
    }

    #[test]
    fn fm_representation_examples() {
        let (p, feats) = fm_toy();
        let s = fm_representation(&p, &feats.x, &feats.z).unwrap();
        assert_eq!(s.phi.row(0), &[2.0, 0.0, 1.0]);
        assert_eq!(s.psi.row(0), &[3.0, 1.0, 0.0]);
        assert_eq!(s.predict(0, 0), 6.0);

        let x = assemble_feature_matrix(vec![vec![(0, 1.0), (1, 1.0)]], 2).unwrap();
        let z = FeatureMatrix::one_hot(1);
        let p = FmParams::new(
            0.5,
            vec![1.0, 2.0],
            vec![0.0],
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            Matrix::from_rows(&[[0.0, 0.0]]),
        )
        .unwrap();
        let s = fm_representation(&p, &x, &z).unwrap();
        assert_eq!(s.phi[(0, 2)], 14.5);
    }

    #[test]
    fn fm_embedding_derivative_of_extra_column() {
        // x_c = (1, 1), column f* of W = (1, 3): ∂φ_k/∂w_{0,f*} = 1·(4 − 1·1) = 3.
        let x = assemble_feature_matrix(vec![vec![(0, 1.0), (1, 1.0)]], 2).unwrap();
        let p = FmParams::new(
            0.0,
            vec![0.0, 0.0],
            vec![0.0],
            Matrix::from_rows(&[[1.0], [3.0]]),
            Matrix::from_rows(&[[1.0]]),
        )
        .unwrap();
        let feats = FeatureData::new(x, FeatureMatrix::one_hot(1));
        let s = fm_representation(&p, &feats.x, &feats.z).unwrap();
        let (_, d) = fm_phi_derivative(Coordinate::ContextEmbedding { row: 0, dim: 0 }, &p, &feats, &s).unwrap();
        assert_eq!(d.dims, vec![0, 1]);
        assert_eq!(d.values[1], vec![3.0]);
    }

    #[test]
    fn fm_constant_model_regularizer() {
        // Only b non-zero: R = |C|·|I|·b², R′(b) = 2|C||I|b.
        let (nc, ni, b) = (3, 4, 0.7);
        let p = FmParams::new(
            b,
            vec![0.0; nc],
            vec![0.0; ni],
            Matrix::zeros(nc, 2),
            Matrix::zeros(ni, 2),
        )
        .unwrap();
        let feats = FeatureData::new(FeatureMatrix::one_hot(nc), FeatureMatrix::one_hot(ni));
        let s = fm_representation(&p, &feats.x, &feats.z).unwrap();
        assert!((s.regularizer() - (nc * ni) as f64 * b * b).abs() < 1e-12);
        let (j_c, j_i) = (compute_gram(&s.phi), compute_gram(&s.psi));
        let g = fm_reg_grads(Coordinate::Bias, &p, &feats, &s, &j_c, &j_i).unwrap();
        assert!((g.first - 2.0 * (nc * ni) as f64 * b).abs() < 1e-12);
        assert!((g.second - 2.0 * (nc * ni) as f64).abs() < 1e-12);
    }
}
