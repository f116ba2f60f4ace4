//! Three-mode models over `(c₁, c₂, item)`: PARAFAC and Tucker.
//!
//! Both are separable with `φ_f(c₁, c₂) = Σ_{f₁,f₂} B[f₁,f₂,f]·u_{c₁,f₁}·v_{c₂,f₂}`
//! and `ψ_f(i) = w_{i,f}`; PARAFAC is the case of a superdiagonal core of
//! ones, which is never materialized.
//!
//! In sparse-context mode the context set is the list of observed tuples.
//! In dense-context mode it is the full product `C₁×C₂`; its Gram matrix is
//! assembled from the per-mode Grams of `U` and `V` and the grid itself is
//! never enumerated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Lambdas, SolverConfig};
use crate::data::{ContextTuple, TensorDataset};
use crate::error::{IcdError, Result};
use crate::matrix::{dot, Matrix};
use crate::mf::check_shape;
use crate::params::{Coordinate, Family, ParamKind, ParamStore};
use crate::separable::{compute_gram, reg_value, GradPair, GramMatrix, PhiDerivative, SeparableState};
use crate::train::{fit, implicit_objective, CoordGrads, Csr, Explicit, ImplicitSolver, Runtime, Side, TrainReport};

/// Dense `k₁×k₂×k₃` core, stored with `f₃` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreTensor {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl CoreTensor {
    pub fn zeros(dims: [usize; 3]) -> Self {
        CoreTensor {
            dims,
            values: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        check_shape("core entries", values.len(), dims.iter().product())?;
        Ok(CoreTensor { dims, values })
    }

    /// `B[f,f,f] = 1`, zero elsewhere.
    pub fn superdiagonal(k: usize) -> Self {
        let mut b = CoreTensor::zeros([k, k, k]);
        for f in 0..k {
            b.set(f, f, f, 1.0);
        }
        b
    }

    pub fn random_normal<R: rand::Rng + ?Sized>(dims: [usize; 3], sigma: f64, rng: &mut R) -> Self {
        let m = Matrix::random_normal(1, dims.iter().product(), sigma, rng);
        CoreTensor {
            dims,
            values: m.as_slice().to_vec(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn index(&self, f1: usize, f2: usize, f3: usize) -> usize {
        (f1 * self.dims[1] + f2) * self.dims[2] + f3
    }

    #[inline]
    pub fn get(&self, f1: usize, f2: usize, f3: usize) -> f64 {
        self.values[self.index(f1, f2, f3)]
    }

    pub fn set(&mut self, f1: usize, f2: usize, f3: usize, value: f64) {
        let i = self.index(f1, f2, f3);
        self.values[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParafacParams {
    pub u: Matrix,
    pub v: Matrix,
    pub w: Matrix,
}

impl ParafacParams {
    pub fn new(u: Matrix, v: Matrix, w: Matrix) -> Result<Self> {
        check_shape("V width", v.cols(), u.cols())?;
        check_shape("W width", w.cols(), u.cols())?;
        Ok(ParafacParams { u, v, w })
    }

    /// `U`, `V`, `W` in that order from `N(0, sigma)`.
    pub fn init(mode_sizes: [usize; 2], num_items: usize, config: &SolverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let u = Matrix::random_normal(mode_sizes[0], config.k, config.sigma, &mut rng);
        let v = Matrix::random_normal(mode_sizes[1], config.k, config.sigma, &mut rng);
        let w = Matrix::random_normal(num_items, config.k, config.sigma, &mut rng);
        ParafacParams { u, v, w }
    }

    pub fn k(&self) -> usize {
        self.u.cols()
    }

    pub fn predict(&self, a: usize, b: usize, i: usize) -> f64 {
        (0..self.k()).map(|f| self.u[(a, f)] * self.v[(b, f)] * self.w[(i, f)]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerParams {
    pub core: CoreTensor,
    pub u: Matrix,
    pub v: Matrix,
    pub w: Matrix,
}

impl TuckerParams {
    pub fn new(core: CoreTensor, u: Matrix, v: Matrix, w: Matrix) -> Result<Self> {
        let [k1, k2, k3] = core.dims();
        check_shape("U width", u.cols(), k1)?;
        check_shape("V width", v.cols(), k2)?;
        check_shape("W width", w.cols(), k3)?;
        Ok(TuckerParams { core, u, v, w })
    }

    /// `U`, `V`, `W`, then the core, all from `N(0, sigma)`.
    pub fn init(mode_sizes: [usize; 2], num_items: usize, config: &SolverConfig) -> Self {
        let [k1, k2, k3] = config.core_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let u = Matrix::random_normal(mode_sizes[0], k1, config.sigma, &mut rng);
        let v = Matrix::random_normal(mode_sizes[1], k2, config.sigma, &mut rng);
        let w = Matrix::random_normal(num_items, k3, config.sigma, &mut rng);
        let core = CoreTensor::random_normal(config.core_dims, config.sigma, &mut rng);
        TuckerParams { core, u, v, w }
    }

    pub fn predict(&self, a: usize, b: usize, i: usize) -> f64 {
        tucker_predict_counted(self, a, b, i).0
    }
}

/// Direct triple sum over the core, with the number of multiply-adds.
pub fn tucker_predict_counted(p: &TuckerParams, a: usize, b: usize, i: usize) -> (f64, u64) {
    let [k1, k2, k3] = p.core.dims();
    let mut acc = 0.0;
    let mut ops = 0;
    for f1 in 0..k1 {
        for f2 in 0..k2 {
            for f3 in 0..k3 {
                acc += p.core.get(f1, f2, f3) * p.u[(a, f1)] * p.v[(b, f2)] * p.w[(i, f3)];
                ops += 1;
            }
        }
    }
    (acc, ops)
}

#[derive(Clone, Debug, PartialEq)]
enum Core {
    /// PARAFAC: superdiagonal of ones, width `k`.
    Diagonal,
    Full(CoreTensor),
}

/// Parameters of either tensor family.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorParams {
    core: Core,
    pub u: Matrix,
    pub v: Matrix,
    pub w: Matrix,
}

impl From<ParafacParams> for TensorParams {
    fn from(p: ParafacParams) -> Self {
        TensorParams {
            core: Core::Diagonal,
            u: p.u,
            v: p.v,
            w: p.w,
        }
    }
}

impl From<TuckerParams> for TensorParams {
    fn from(p: TuckerParams) -> Self {
        TensorParams {
            core: Core::Full(p.core),
            u: p.u,
            v: p.v,
            w: p.w,
        }
    }
}

impl TensorParams {
    pub fn family(&self) -> Family {
        match self.core {
            Core::Diagonal => Family::Parafac,
            Core::Full(_) => Family::Tucker,
        }
    }

    pub fn into_parafac(self) -> Option<ParafacParams> {
        match self.core {
            Core::Diagonal => Some(ParafacParams {
                u: self.u,
                v: self.v,
                w: self.w,
            }),
            Core::Full(_) => None,
        }
    }

    pub fn into_tucker(self) -> Option<TuckerParams> {
        match self.core {
            Core::Full(core) => Some(TuckerParams {
                core,
                u: self.u,
                v: self.v,
                w: self.w,
            }),
            Core::Diagonal => None,
        }
    }

    pub fn core_tensor(&self) -> Option<&CoreTensor> {
        match &self.core {
            Core::Full(b) => Some(b),
            Core::Diagonal => None,
        }
    }

    /// `(k₁, k₂, k₃)`.
    pub fn dims(&self) -> [usize; 3] {
        match &self.core {
            Core::Diagonal => [self.u.cols(); 3],
            Core::Full(b) => b.dims(),
        }
    }

    fn check(&self) -> Result<()> {
        let [k1, k2, k3] = self.dims();
        check_shape("U width", self.u.cols(), k1)?;
        check_shape("V width", self.v.cols(), k2)?;
        check_shape("W width", self.w.cols(), k3)
    }

    pub fn l2(&self, lambda: &Lambdas) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let core = match &self.core {
            Core::Full(b) => lambda.core * sq(b.as_slice()),
            Core::Diagonal => 0.0,
        };
        core + lambda.embedding * (sq(self.u.as_slice()) + sq(self.v.as_slice()) + sq(self.w.as_slice()))
    }

    /// `φ(a, b)` into `out` (length `k₃`).
    pub fn phi_into(&self, a: usize, b: usize, out: &mut [f64]) {
        match &self.core {
            Core::Diagonal => {
                for (f, o) in out.iter_mut().enumerate() {
                    *o = self.u[(a, f)] * self.v[(b, f)];
                }
            }
            Core::Full(core) => {
                let [k1, k2, _] = core.dims();
                out.fill(0.0);
                for f1 in 0..k1 {
                    let uf = self.u[(a, f1)];
                    for f2 in 0..k2 {
                        let uv = uf * self.v[(b, f2)];
                        for (f, o) in out.iter_mut().enumerate() {
                            *o += core.get(f1, f2, f) * uv;
                        }
                    }
                }
            }
        }
    }

    pub fn phi_table(&self, tuples: &[(usize, usize)]) -> Matrix {
        let k3 = self.dims()[2];
        let mut phi = Matrix::zeros(tuples.len(), k3);
        for (c, &(a, b)) in tuples.iter().enumerate() {
            self.phi_into(a, b, phi.row_mut(c));
        }
        phi
    }

    /// Dims of `φ` that move with `u_{·,g}` (or `v_{·,g}`).
    fn mode_dims(&self, g: usize) -> Vec<usize> {
        match self.core {
            Core::Diagonal => vec![g],
            Core::Full(_) => (0..self.dims()[2]).collect(),
        }
    }

    /// `∂φ(a, b)/∂u_{a,g}` over `mode_dims(g)`.
    fn du(&self, b: usize, g: usize, out: &mut Vec<f64>) {
        out.clear();
        match &self.core {
            Core::Diagonal => out.push(self.v[(b, g)]),
            Core::Full(core) => {
                let [_, k2, k3] = core.dims();
                out.extend((0..k3).map(|f| (0..k2).map(|f2| core.get(g, f2, f) * self.v[(b, f2)]).sum::<f64>()));
            }
        }
    }

    /// `∂φ(a, b)/∂v_{b,g}` over `mode_dims(g)`.
    fn dv(&self, a: usize, g: usize, out: &mut Vec<f64>) {
        out.clear();
        match &self.core {
            Core::Diagonal => out.push(self.u[(a, g)]),
            Core::Full(core) => {
                let [k1, _, k3] = core.dims();
                out.extend((0..k3).map(|f| (0..k1).map(|f1| core.get(f1, g, f) * self.u[(a, f1)]).sum::<f64>()));
            }
        }
    }
}

impl ParamStore for TensorParams {
    fn family(&self) -> Family {
        TensorParams::family(self)
    }

    fn get(&self, coord: Coordinate) -> f64 {
        match (coord, &self.core) {
            (Coordinate::ModeOne { row, dim }, _) => self.u[(row, dim)],
            (Coordinate::ModeTwo { row, dim }, _) => self.v[(row, dim)],
            (Coordinate::ItemEmbedding { row, dim }, _) => self.w[(row, dim)],
            (Coordinate::Core { f1, f2, f3 }, Core::Full(b)) => b.get(f1, f2, f3),
            (other, _) => panic!("{other:?} is not a {} parameter", self.family()),
        }
    }

    fn set(&mut self, coord: Coordinate, value: f64) {
        let family = self.family();
        match (coord, &mut self.core) {
            (Coordinate::ModeOne { row, dim }, _) => self.u[(row, dim)] = value,
            (Coordinate::ModeTwo { row, dim }, _) => self.v[(row, dim)] = value,
            (Coordinate::ItemEmbedding { row, dim }, _) => self.w[(row, dim)] = value,
            (Coordinate::Core { f1, f2, f3 }, Core::Full(b)) => b.set(f1, f2, f3, value),
            (other, _) => panic!("{other:?} is not a {family} parameter"),
        }
    }

    fn all_coordinates(&self) -> Vec<Coordinate> {
        let mut out = Vec::new();
        if let Core::Full(b) = &self.core {
            let [k1, k2, k3] = b.dims();
            for f1 in 0..k1 {
                for f2 in 0..k2 {
                    for f3 in 0..k3 {
                        out.push(Coordinate::Core { f1, f2, f3 });
                    }
                }
            }
        }
        let push = |out: &mut Vec<Coordinate>, m: &Matrix, make: fn(usize, usize) -> Coordinate| {
            for row in 0..m.rows() {
                for dim in 0..m.cols() {
                    out.push(make(row, dim));
                }
            }
        };
        push(&mut out, &self.u, |row, dim| Coordinate::ModeOne { row, dim });
        push(&mut out, &self.v, |row, dim| Coordinate::ModeTwo { row, dim });
        push(&mut out, &self.w, |row, dim| Coordinate::ItemEmbedding { row, dim });
        out
    }
}

fn pairs(contexts: &[ContextTuple]) -> Result<Vec<(usize, usize)>> {
    contexts
        .iter()
        .map(|t| match t.values() {
            &[a, b] => Ok((a, b)),
            v => Err(IcdError::DimensionMismatch {
                what: "context arity",
                expected: 2,
                found: v.len(),
            }),
        })
        .collect()
}

fn check_modes(p: &TensorParams, contexts: &[(usize, usize)]) -> Result<()> {
    for &(a, b) in contexts {
        if a >= p.u.rows() {
            return Err(IcdError::IndexOutOfRange {
                what: "first context mode",
                index: a,
                bound: p.u.rows(),
            });
        }
        if b >= p.v.rows() {
            return Err(IcdError::IndexOutOfRange {
                what: "second context mode",
                index: b,
                bound: p.v.rows(),
            });
        }
    }
    Ok(())
}

/// `Φ` per context tuple, `Ψ = W`.
pub fn parafac_representation(params: &ParafacParams, contexts: &[ContextTuple]) -> Result<SeparableState> {
    tensor_representation(&TensorParams::from(params.clone()), contexts)
}

pub fn tucker_representation(params: &TuckerParams, contexts: &[ContextTuple]) -> Result<SeparableState> {
    tensor_representation(&TensorParams::from(params.clone()), contexts)
}

pub fn tensor_representation(params: &TensorParams, contexts: &[ContextTuple]) -> Result<SeparableState> {
    params.check()?;
    let tuples = pairs(contexts)?;
    check_modes(params, &tuples)?;
    SeparableState::new(params.phi_table(&tuples), params.w.clone())
}

/// Gram over `C₁×C₂` of a PARAFAC model: the Hadamard product of the
/// per-mode Grams.
pub fn dense_context_gram(mode_grams: &[GramMatrix]) -> Result<GramMatrix> {
    let first = mode_grams
        .first()
        .ok_or_else(|| IcdError::InvalidConfig("dense context gram needs at least one mode".into()))?;
    let k = first.dim();
    let mut out = first.as_matrix().clone();
    for g in &mode_grams[1..] {
        check_shape("mode gram dimension", g.dim(), k)?;
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.as_matrix().as_slice()) {
            *o *= v;
        }
    }
    GramMatrix::from_matrix(out)
}

/// Gram over `C₁×C₂` of a Tucker model:
/// `J(f,f') = Σ B[f₁,f₂,f]·B[f₁',f₂',f']·J₁(f₁,f₁')·J₂(f₂,f₂')`.
pub fn tucker_dense_gram(core: &CoreTensor, j1: &GramMatrix, j2: &GramMatrix) -> Result<GramMatrix> {
    let [k1, k2, k3] = core.dims();
    check_shape("first mode gram", j1.dim(), k1)?;
    check_shape("second mode gram", j2.dim(), k2)?;
    // T[f1',f2',f] = Σ_{f1,f2} J1(f1',f1) J2(f2',f2) B[f1,f2,f]
    let mut t = vec![0.0; k1 * k2 * k3];
    for a in 0..k1 {
        for b in 0..k2 {
            for f1 in 0..k1 {
                for f2 in 0..k2 {
                    let s = j1.get(a, f1) * j2.get(b, f2);
                    for f in 0..k3 {
                        t[(a * k2 + b) * k3 + f] += s * core.get(f1, f2, f);
                    }
                }
            }
        }
    }
    let mut m = Matrix::zeros(k3, k3);
    for f in 0..k3 {
        for g in f..k3 {
            let mut acc = 0.0;
            for a in 0..k1 {
                for b in 0..k2 {
                    acc += core.get(a, b, f) * t[(a * k2 + b) * k3 + g];
                }
            }
            m[(f, g)] = acc;
            m[(g, f)] = acc;
        }
    }
    GramMatrix::from_matrix(m)
}

/// Observed context tuples and their per-mode groupings.
#[derive(Clone, Debug)]
struct ContextIndex {
    tuples: Vec<(usize, usize)>,
    by_first: Csr,
    by_second: Csr,
}

impl ContextIndex {
    fn new(tuples: Vec<(usize, usize)>, n1: usize, n2: usize) -> Self {
        ContextIndex {
            by_first: Csr::group(n1, tuples.iter().map(|t| t.0)),
            by_second: Csr::group(n2, tuples.iter().map(|t| t.1)),
            tuples,
        }
    }
}

/// Coordinate-descent solver for PARAFAC and Tucker.
///
/// Per epoch: the core in lexicographic `(f₁, f₂, f₃)` order (Tucker only),
/// then for each `f`: column `f` of `U`, of `V`, of `W` (columns past a
/// mode's width are skipped).
#[derive(Clone, Debug)]
pub struct TensorSolver {
    rt: Runtime,
    params: TensorParams,
    index: ContextIndex,
    dense: bool,
    ex: Explicit,
    /// `Φ` over the observed tuples, kept in sync.
    phi: Matrix,
    j_c: GramMatrix,
    j_i: GramMatrix,
    j1: GramMatrix,
    j2: GramMatrix,
}

impl TensorSolver {
    pub fn new(dataset: &TensorDataset, config: SolverConfig, params: impl Into<TensorParams>) -> Result<Self> {
        let params = params.into();
        config.check_alpha0(dataset.data().alpha0())?;
        params.check()?;
        let sizes = dataset.mode_sizes();
        check_shape("context arity", sizes.len(), 2)?;
        check_shape("U rows", params.u.rows(), sizes[0])?;
        check_shape("V rows", params.v.rows(), sizes[1])?;
        check_shape("W rows", params.w.rows(), dataset.data().num_items())?;
        match &params.core {
            Core::Diagonal => check_shape("embedding width", params.u.cols(), config.k)?,
            Core::Full(b) => {
                if b.dims() != config.core_dims {
                    return Err(IcdError::InvalidConfig(format!(
                        "core dims {:?} differ from configured {:?}",
                        b.dims(),
                        config.core_dims
                    )));
                }
            }
        }
        let tuples = pairs(dataset.contexts())?;
        let [k1, k2, k3] = params.dims();
        let mut s = TensorSolver {
            dense: config.dense_context,
            rt: Runtime::new(config)?,
            ex: Explicit::new(dataset.data())?,
            phi: Matrix::zeros(tuples.len(), k3),
            index: ContextIndex::new(tuples, sizes[0], sizes[1]),
            params,
            j_c: GramMatrix::zeros(k3),
            j_i: GramMatrix::zeros(k3),
            j1: GramMatrix::zeros(k1),
            j2: GramMatrix::zeros(k2),
        };
        s.refresh();
        Ok(s)
    }

    pub fn params(&self) -> &TensorParams {
        &self.params
    }

    pub fn into_params(self) -> TensorParams {
        self.params
    }

    /// Gram over the implicit context set, from scratch.
    fn fresh_context_gram(&self, phi: &Matrix) -> GramMatrix {
        if !self.dense {
            return self.rt.gram_par(phi);
        }
        let j1 = compute_gram(&self.params.u);
        let j2 = compute_gram(&self.params.v);
        match &self.params.core {
            Core::Diagonal => dense_context_gram(&[j1, j2]),
            Core::Full(b) => tucker_dense_gram(b, &j1, &j2),
        }
        .expect("gram widths match the core")
    }

    fn rebuild_context_gram(&mut self) {
        let [k1, k2, k3] = self.params.dims();
        let c = &mut self.rt.counters;
        if self.dense {
            self.j_c = match &self.params.core {
                Core::Diagonal => dense_context_gram(&[self.j1.clone(), self.j2.clone()]),
                Core::Full(b) => tucker_dense_gram(b, &self.j1, &self.j2),
            }
            .expect("gram widths match the core");
            c.gram_flops += (k1 * k2 * (k1 * k2 + k3) * k3) as u64;
        } else {
            self.j_c = self.rt.gram_par(&self.phi);
            self.rt.counters.gram_flops += (self.phi.rows() * k3 * k3) as u64;
        }
    }

    /// Non-zero `∂φ/∂θ` over the observed tuples for a context-side
    /// parameter.
    fn context_derivative(&self, coord: Coordinate) -> PhiDerivative {
        let p = &self.params;
        let mut buf = Vec::new();
        match coord {
            Coordinate::ModeOne { row, dim } => {
                let rows = self.index.by_first.row(row).to_vec();
                let dims = p.mode_dims(dim);
                let mut values = vec![Vec::with_capacity(rows.len()); dims.len()];
                for &c in &rows {
                    p.du(self.index.tuples[c].1, dim, &mut buf);
                    for (col, &v) in values.iter_mut().zip(&buf) {
                        col.push(v);
                    }
                }
                PhiDerivative { rows, dims, values }
            }
            Coordinate::ModeTwo { row, dim } => {
                let rows = self.index.by_second.row(row).to_vec();
                let dims = p.mode_dims(dim);
                let mut values = vec![Vec::with_capacity(rows.len()); dims.len()];
                for &c in &rows {
                    p.dv(self.index.tuples[c].0, dim, &mut buf);
                    for (col, &v) in values.iter_mut().zip(&buf) {
                        col.push(v);
                    }
                }
                PhiDerivative { rows, dims, values }
            }
            Coordinate::Core { f1, f2, f3 } => {
                let t = &self.index.tuples;
                PhiDerivative {
                    rows: (0..t.len()).collect(),
                    dims: vec![f3],
                    values: vec![t.iter().map(|&(a, b)| p.u[(a, f1)] * p.v[(b, f2)]).collect()],
                }
            }
            other => unreachable!("{other:?} is not a context-side tensor parameter"),
        }
    }

    /// Regularizer derivatives of a context-side parameter over `C₁×C₂`.
    fn dense_reg(&self, coord: Coordinate) -> GradPair {
        let p = &self.params;
        let (j_i, j1, j2) = (&self.j_i, &self.j1, &self.j2);
        match (&p.core, coord) {
            (Core::Diagonal, Coordinate::ModeOne { row, dim: g }) => parafac_dense_mode_grads(p.u.row(row), g, j2, j_i),
            (Core::Diagonal, Coordinate::ModeTwo { row, dim: g }) => parafac_dense_mode_grads(p.v.row(row), g, j1, j_i),
            (Core::Full(b), Coordinate::ModeOne { row, dim: g }) => {
                let [k1, k2, k3] = b.dims();
                // P[f2][f] = Σ_{f1} B[f1,f2,f] u_{a,f1}; Q[f2][f] = B[g,f2,f]
                let pm = Matrix::from_vec(
                    k2,
                    k3,
                    (0..k2 * k3)
                        .map(|x| (0..k1).map(|f1| b.get(f1, x / k3, x % k3) * p.u[(row, f1)]).sum())
                        .collect(),
                )
                .expect("k2*k3 entries");
                let qm = Matrix::from_vec(k2, k3, (0..k2 * k3).map(|x| b.get(g, x / k3, x % k3)).collect())
                    .expect("k2*k3 entries");
                bilinear_grads(&qm, &pm, j2, j_i)
            }
            (Core::Full(b), Coordinate::ModeTwo { row, dim: g }) => {
                let [k1, k2, k3] = b.dims();
                let pm = Matrix::from_vec(
                    k1,
                    k3,
                    (0..k1 * k3)
                        .map(|x| (0..k2).map(|f2| b.get(x / k3, f2, x % k3) * p.v[(row, f2)]).sum())
                        .collect(),
                )
                .expect("k1*k3 entries");
                let qm = Matrix::from_vec(k1, k3, (0..k1 * k3).map(|x| b.get(x / k3, g, x % k3)).collect())
                    .expect("k1*k3 entries");
                bilinear_grads(&qm, &pm, j1, j_i)
            }
            (Core::Full(b), Coordinate::Core { f1: g1, f2: g2, f3: g3 }) => {
                let [k1, k2, k3] = b.dims();
                let mut first = 0.0;
                for f in 0..k3 {
                    let mut s = 0.0;
                    for f1 in 0..k1 {
                        for f2 in 0..k2 {
                            s += b.get(f1, f2, f) * j1.get(f1, g1) * j2.get(f2, g2);
                        }
                    }
                    first += j_i.get(f, g3) * s;
                }
                GradPair::new(2.0 * first, 2.0 * j_i.get(g3, g3) * j1.get(g1, g1) * j2.get(g2, g2))
            }
            (_, other) => unreachable!("{other:?} is not a context-side tensor parameter"),
        }
    }

    /// Derivatives at the current state, plus the touched positives.
    fn grads(&self, coord: Coordinate) -> Result<(CoordGrads, Vec<(usize, f64)>, Option<PhiDerivative>)> {
        let lambda = self.rt.config.lambda.for_kind(coord.kind());
        let theta = self.params.get(coord);
        match coord {
            Coordinate::ItemEmbedding { row, dim } => {
                let d = PhiDerivative::single(dim, &[(row, 1.0)]);
                let touched = self.ex.touched(Side::Item, &d, &self.phi);
                let g = CoordGrads {
                    loss: self.ex.grads(theta, lambda, &touched),
                    reg: d.reg_grads(&self.params.w, &self.j_c),
                };
                Ok((g, touched, None))
            }
            Coordinate::ModeOne { .. } | Coordinate::ModeTwo { .. } | Coordinate::Core { .. } => {
                if matches!(coord, Coordinate::Core { .. }) && self.params.core_tensor().is_none() {
                    return Err(IcdError::InvalidConfig("PARAFAC has no core tensor".into()));
                }
                let d = self.context_derivative(coord);
                let touched = self.ex.touched(Side::Context, &d, &self.params.w);
                let reg = if self.dense {
                    self.dense_reg(coord)
                } else {
                    d.reg_grads(&self.phi, &self.j_i)
                };
                let g = CoordGrads {
                    loss: self.ex.grads(theta, lambda, &touched),
                    reg,
                };
                Ok((g, touched, Some(d)))
            }
            other => Err(IcdError::InvalidConfig(format!(
                "{other:?} is not a {} parameter",
                self.params.family()
            ))),
        }
    }

    fn update(&mut self, coord: Coordinate) -> Result<()> {
        let (g, touched, d) = self.grads(coord)?;
        let theta = self.params.get(coord);
        let k3 = self.params.dims()[2] as u64;
        let c = &mut self.rt.counters;
        match &d {
            Some(d) => {
                let dims = d.dims.len() as u64;
                c.explicit_flops += 2 * touched.len() as u64 * dims;
                c.sync_flops += d.nnz() as u64;
                if !self.dense {
                    c.reg_flops += d.nnz() as u64 * k3 + dims * dims * d.rows.len() as u64;
                    c.context_visits += d.rows.len() as u64;
                } else {
                    let [k1, k2, k3] = self.params.dims();
                    c.reg_flops += (k1.max(k2) * k1.max(k2) * k3 + k3 * k3) as u64;
                }
            }
            None => {
                c.explicit_flops += 2 * touched.len() as u64;
                c.reg_flops += k3;
            }
        }
        let value = self.rt.step(coord, theta, g)?;
        let delta = value - theta;
        if delta != 0.0 {
            self.params.set(coord, value);
            if let Some(d) = &d {
                d.apply(&mut self.phi, delta);
            }
            self.ex.shift(&touched, delta);
        }
        Ok(())
    }

    /// `Φ` over the full grid `C₁×C₂`, context `c₁·|C₂| + c₂`.
    pub fn grid_state(&self) -> SeparableState {
        let (n1, n2) = (self.params.u.rows(), self.params.v.rows());
        let tuples: Vec<_> = (0..n1).flat_map(|a| (0..n2).map(move |b| (a, b))).collect();
        SeparableState {
            phi: self.params.phi_table(&tuples),
            psi: self.params.w.clone(),
        }
    }

    pub fn phi_drift(&self) -> f64 {
        self.phi.max_abs_diff(&self.params.phi_table(&self.index.tuples))
    }
}

/// Dense-context PARAFAC derivatives for `row[g]` of one mode, given the
/// other mode's Gram: `R′ = 2Σ_f J_I(g,f)·J_other(g,f)·row[f]`,
/// `R″ = 2·J_I(g,g)·J_other(g,g)`.
pub fn parafac_dense_mode_grads(row: &[f64], g: usize, j_other_mode: &GramMatrix, j_i: &GramMatrix) -> GradPair {
    let first: f64 = row
        .iter()
        .enumerate()
        .map(|(f, &x)| j_i.get(g, f) * j_other_mode.get(g, f) * x)
        .sum();
    GradPair::new(2.0 * first, 2.0 * j_i.get(g, g) * j_other_mode.get(g, g))
}

/// `R′ = 2·Σ J_I ∘ (Qᵀ J P)`, `R″ = 2·Σ J_I ∘ (Qᵀ J Q)` for
/// `φ_f = Σ_m P[m][f]·x_m` and `∂φ_f/∂θ = Σ_m Q[m][f]·x_m` summed over the
/// free mode with Gram `J`.
fn bilinear_grads(q: &Matrix, p: &Matrix, j: &GramMatrix, j_i: &GramMatrix) -> GradPair {
    let (m, k3) = (q.rows(), q.cols());
    let jp = mat_mul_gram(j, p);
    let jq = mat_mul_gram(j, q);
    let (mut first, mut second) = (0.0, 0.0);
    for f in 0..k3 {
        for g in 0..k3 {
            let (mut a, mut b) = (0.0, 0.0);
            for r in 0..m {
                a += q[(r, f)] * jp[(r, g)];
                b += q[(r, f)] * jq[(r, g)];
            }
            first += j_i.get(f, g) * a;
            second += j_i.get(f, g) * b;
        }
    }
    GradPair::new(2.0 * first, 2.0 * second)
}

fn mat_mul_gram(j: &GramMatrix, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for s in 0..x.rows() {
            let js = j.get(r, s);
            for c in 0..x.cols() {
                out[(r, c)] += js * x[(s, c)];
            }
        }
    }
    out
}

impl ImplicitSolver for TensorSolver {
    fn family(&self) -> Family {
        self.params.family()
    }

    fn runtime(&self) -> &Runtime {
        &self.rt
    }

    fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.rt
    }

    fn refresh(&mut self) {
        let [k1, k2, k3] = self.params.dims();
        self.phi = self.params.phi_table(&self.index.tuples);
        self.j_i = self.rt.gram_par(&self.params.w);
        self.j1 = self.rt.gram_par(&self.params.u);
        self.j2 = self.rt.gram_par(&self.params.v);
        let c = &mut self.rt.counters;
        c.sync_flops += (self.index.tuples.len() * k1 * k2 * k3) as u64;
        c.gram_flops += (self.params.w.rows() * k3 * k3 + self.params.u.rows() * k1 * k1 + self.params.v.rows() * k2 * k2) as u64;
        self.rebuild_context_gram();
        let (phi, w, tuples) = (&self.phi, &self.params.w, &self.index.tuples);
        let _ = tuples;
        self.ex.recompute(|o| dot(phi.row(o.context), w.row(o.item)));
        self.rt.counters.explicit_flops += self.ex.obs.len() as u64 * k3 as u64;
    }

    fn run_epoch(&mut self) -> Result<()> {
        self.refresh();
        let [k1, k2, k3] = self.params.dims();
        let (n1, n2, ni) = (self.params.u.rows(), self.params.v.rows(), self.params.w.rows());
        let cfg = &self.rt.config;
        let [t_core, t_u, t_v, t_w] =
            [ParamKind::Core, ParamKind::ModeOne, ParamKind::ModeTwo, ParamKind::ItemEmbedding].map(|k| !cfg.is_frozen(k));

        if t_core && self.params.core_tensor().is_some() {
            for f1 in 0..k1 {
                for f2 in 0..k2 {
                    for f3 in 0..k3 {
                        self.update(Coordinate::Core { f1, f2, f3 })?;
                    }
                }
            }
        }
        for f in 0..k1.max(k2).max(k3) {
            if t_u && f < k1 {
                for row in 0..n1 {
                    self.update(Coordinate::ModeOne { row, dim: f })?;
                }
                self.rt.counters.gram_flops += self.j1.refresh_row(&self.params.u, f);
            }
            if t_v && f < k2 {
                for row in 0..n2 {
                    self.update(Coordinate::ModeTwo { row, dim: f })?;
                }
                self.rt.counters.gram_flops += self.j2.refresh_row(&self.params.v, f);
            }
            if t_w && f < k3 {
                match (&self.params.core, self.dense) {
                    (Core::Diagonal, false) => self.rt.counters.gram_flops += self.j_c.refresh_row(&self.phi, f),
                    _ => self.rebuild_context_gram(),
                }
                for row in 0..ni {
                    self.update(Coordinate::ItemEmbedding { row, dim: f })?;
                }
                self.rt.counters.gram_flops += self.j_i.refresh_row(&self.params.w, f);
            }
        }
        Ok(())
    }

    fn objective(&self) -> Result<f64> {
        let phi = self.params.phi_table(&self.index.tuples);
        let w = &self.params.w;
        let loss = self.ex.loss_with(|o| dot(phi.row(o.context), w.row(o.item)));
        let reg = reg_value(&self.fresh_context_gram(&phi), &self.rt.gram_par(w))?;
        let l2 = self.params.l2(&self.rt.config.lambda);
        Ok(implicit_objective(loss, self.rt.config.alpha0, reg, l2, self.ex.offset))
    }

    fn gradients(&self, coord: Coordinate) -> Result<CoordGrads> {
        Ok(self.grads(coord)?.0)
    }

    /// Over the observed tuples; see [`TensorSolver::grid_state`] for the
    /// dense context set.
    fn separable_state(&self) -> SeparableState {
        SeparableState {
            phi: self.params.phi_table(&self.index.tuples),
            psi: self.params.w.clone(),
        }
    }
}

pub fn train_parafac(dataset: &TensorDataset, config: &SolverConfig) -> Result<(ParafacParams, TrainReport)> {
    let sizes = mode_sizes(dataset)?;
    let params = ParafacParams::init(sizes, dataset.data().num_items(), config);
    let mut solver = TensorSolver::new(dataset, config.clone(), params)?;
    let report = fit(&mut solver)?;
    Ok((solver.into_params().into_parafac().expect("diagonal core"), report))
}

pub fn train_tucker(dataset: &TensorDataset, config: &SolverConfig) -> Result<(TuckerParams, TrainReport)> {
    let sizes = mode_sizes(dataset)?;
    let params = TuckerParams::init(sizes, dataset.data().num_items(), config);
    let mut solver = TensorSolver::new(dataset, config.clone(), params)?;
    let report = fit(&mut solver)?;
    Ok((solver.into_params().into_tucker().expect("full core"), report))
}

fn mode_sizes(dataset: &TensorDataset) -> Result<[usize; 2]> {
    match dataset.mode_sizes() {
        &[a, b] => Ok([a, b]),
        s => Err(IcdError::DimensionMismatch {
            what: "context arity",
            expected: 2,
            found: s.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_grid_gram(p: &TensorParams) -> Matrix {
        let (n1, n2) = (p.u.rows(), p.v.rows());
        let tuples: Vec<_> = (0..n1).flat_map(|a| (0..n2).map(move |b| (a, b))).collect();
        compute_gram(&p.phi_table(&tuples)).as_matrix().clone()
    }

    #[test]
    fn parafac_representation_examples() {
        let p = ParafacParams::new(
            Matrix::from_rows(&[[1.0]]),
            Matrix::from_rows(&[[2.0]]),
            Matrix::from_rows(&[[3.0]]),
        )
        .unwrap();
        assert_eq!(p.predict(0, 0, 0), 6.0);

        let p = ParafacParams::new(
            Matrix::from_rows(&[[1.0], [2.0]]),
            Matrix::from_rows(&[[1.0]]),
            Matrix::from_rows(&[[1.0]]),
        )
        .unwrap();
        let s = parafac_representation(&p, &[ContextTuple::pair(0, 0), ContextTuple::pair(1, 0)]).unwrap();
        assert_eq!(s.phi, Matrix::from_rows(&[[1.0], [2.0]]));

        let bad = ContextTuple::new(vec![0]).unwrap();
        assert!(parafac_representation(&p, &[bad]).is_err());
    }

    #[test]
    fn dense_gram_examples() {
        let u = Matrix::from_rows(&[[1.0], [2.0]]);
        let v = Matrix::from_rows(&[[1.0], [1.0]]);
        let j = dense_context_gram(&[compute_gram(&u), compute_gram(&v)]).unwrap();
        assert_eq!(j.get(0, 0), 10.0);
        let p = TensorParams::from(ParafacParams::new(u, v, Matrix::from_rows(&[[1.0]])).unwrap());
        assert_eq!(brute_grid_gram(&p)[(0, 0)], 10.0);

        let eye = GramMatrix::from_matrix(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(dense_context_gram(&[eye.clone(), eye.clone()]).unwrap(), eye);
        assert!(dense_context_gram(&[eye, GramMatrix::zeros(3)]).is_err());
    }

    #[test]
    fn tucker_representation_examples() {
        let one = |x: f64| Matrix::from_rows(&[[x]]);
        let p = TuckerParams::new(CoreTensor::from_vec([1, 1, 1], vec![2.0]).unwrap(), one(1.0), one(1.0), one(1.0)).unwrap();
        assert_eq!(p.predict(0, 0, 0), 2.0);

        let p = TuckerParams::new(
            CoreTensor::from_vec([2, 2, 1], vec![1.0; 4]).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0]]),
            Matrix::from_rows(&[[3.0, 4.0]]),
            one(1.0),
        )
        .unwrap();
        let s = tucker_representation(&p, &[ContextTuple::pair(0, 0)]).unwrap();
        assert_eq!(s.phi[(0, 0)], 21.0);
    }

    #[test]
    fn superdiagonal_tucker_matches_parafac() {
        let cfg = SolverConfig { k: 3, sigma: 1.0, seed: 5, ..Default::default() };
        let pf = ParafacParams::init([4, 3], 5, &cfg);
        let tk = TuckerParams::new(CoreTensor::superdiagonal(3), pf.u.clone(), pf.v.clone(), pf.w.clone()).unwrap();
        let ctx: Vec<_> = (0..4).flat_map(|a| (0..3).map(move |b| ContextTuple::pair(a, b))).collect();
        let a = parafac_representation(&pf, &ctx).unwrap();
        let b = tucker_representation(&tk, &ctx).unwrap();
        assert!(a.phi.max_abs_diff(&b.phi) == 0.0);
    }

    #[test]
    fn tucker_dense_gram_matches_enumeration() {
        let cfg = SolverConfig { core_dims: [2, 3, 2], sigma: 1.0, seed: 2, ..Default::default() };
        let tk = TuckerParams::init([5, 4], 3, &cfg);
        let j = tucker_dense_gram(&tk.core, &compute_gram(&tk.u), &compute_gram(&tk.v)).unwrap();
        let brute = brute_grid_gram(&TensorParams::from(tk));
        assert!(j.as_matrix().max_abs_diff(&brute) <= 1e-10 * (1.0 + brute.max_abs()));
    }

    #[test]
    fn tucker_eval_cost_is_product_of_core_dims() {
        for dims in [[1, 1, 1], [2, 3, 4], [4, 3, 2], [5, 1, 2]] {
            let cfg = SolverConfig { core_dims: dims, ..Default::default() };
            let p = TuckerParams::init([2, 2], 2, &cfg);
            assert_eq!(tucker_predict_counted(&p, 1, 0, 1).1, dims.iter().product::<usize>() as u64);
        }
    }
}
