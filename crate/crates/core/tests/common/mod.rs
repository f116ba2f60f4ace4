//! Random toy instances shared by the integration suites.
#![allow(dead_code)]

use icd::data::{assemble_feature_matrix, ContextTuple, FeatureMatrix, ImplicitDataset, Observation, TensorDataset};
use icd::feature::{FeatureData, FmParams, FmSolver, MfsiParams, MfsiSolver};
use icd::mf::{MfParams, MfSolver};
use icd::oracle::{naive_cd_epoch, rel_close, BruteForceModel, FmModel, MfsiModel, Scalar, TensorModel};
use icd::tensor::{ParafacParams, TensorParams, TensorSolver, TuckerParams};
use icd::train::ImplicitSolver;
use icd::{Coordinate, Family, Lambdas, ParamStore, Result, SolverConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Each cell positive with probability `density`; `y ∈ [0.5, 2)`,
/// `α ∈ [α₀+0.5, α₀+3)`.
pub fn random_dataset(nc: usize, ni: usize, density: f64, alpha0: f64, rng: &mut ChaCha8Rng) -> ImplicitDataset {
    let mut pos = Vec::new();
    for c in 0..nc {
        for i in 0..ni {
            if rng.random::<f64>() < density {
                pos.push(Observation::new(c, i, rng.random_range(0.5..2.0), alpha0 + rng.random_range(0.5..3.0)));
            }
        }
    }
    ImplicitDataset::new(nc, ni, pos, alpha0).unwrap()
}

/// Every row gets 1..=max_nnz distinct features with values in `[0.5, 1.5)`.
pub fn random_features(rows: usize, p: usize, max_nnz: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..rows)
        .map(|_| {
            let n = rng.random_range(1..=max_nnz.min(p));
            let mut idx: Vec<usize> = sample(rng, p, n).into_iter().collect();
            idx.sort_unstable();
            idx.into_iter().map(|l| (l, rng.random_range(0.5..1.5))).collect()
        })
        .collect();
    assemble_feature_matrix(data, p).unwrap()
}

pub fn random_feature_data(nc: usize, ni: usize, pc: usize, pi: usize, rng: &mut ChaCha8Rng) -> FeatureData {
    FeatureData::new(random_features(nc, pc, 3, rng), random_features(ni, pi, 3, rng))
}

/// Observed tuples drawn from `C₁×C₂` with probability `density` (at least
/// one), positives over them with the given density.
pub fn random_tensor_dataset(
    n1: usize,
    n2: usize,
    ni: usize,
    density: f64,
    alpha0: f64,
    rng: &mut ChaCha8Rng,
) -> TensorDataset {
    let mut tuples = Vec::new();
    for a in 0..n1 {
        for b in 0..n2 {
            if rng.random::<f64>() < density {
                tuples.push(ContextTuple::pair(a, b));
            }
        }
    }
    if tuples.is_empty() {
        tuples.push(ContextTuple::pair(0, 0));
    }
    let data = random_dataset(tuples.len(), ni, 0.3, alpha0, rng);
    TensorDataset::new(vec![n1, n2], tuples, data).unwrap()
}

pub fn fm_with_random_linear(mut p: FmParams, rng: &mut ChaCha8Rng) -> FmParams {
    p.b = rng.random_range(-0.5..0.5);
    p.w_linear.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    p.h_linear.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    p
}

pub fn mf_params(nc: usize, ni: usize, cfg: &SolverConfig) -> MfParams {
    MfParams::init(nc, ni, cfg)
}

pub fn mfsi_params(f: &FeatureData, cfg: &SolverConfig) -> MfsiParams {
    MfsiParams::init(f.x.num_features(), f.z.num_features(), cfg)
}

pub fn parafac_params(d: &TensorDataset, cfg: &SolverConfig) -> ParafacParams {
    ParafacParams::init([d.mode_sizes()[0], d.mode_sizes()[1]], d.data().num_items(), cfg)
}

pub fn tucker_params(d: &TensorDataset, cfg: &SolverConfig) -> TuckerParams {
    TuckerParams::init([d.mode_sizes()[0], d.mode_sizes()[1]], d.data().num_items(), cfg)
}

/// Runs `epochs` trainer epochs and naive CD epochs side by side and
/// returns the largest relative difference over every recorded update.
pub fn trajectory_gap<S, M>(
    solver: &mut S,
    model: &mut M,
    dataset: &ImplicitDataset,
    config: &SolverConfig,
    epochs: usize,
) -> Result<f64>
where
    S: ImplicitSolver + ?Sized,
    M: BruteForceModel + Clone,
{
    solver.enable_trace();
    let mut worst: f64 = 0.0;
    for _ in 0..epochs {
        solver.run_epoch()?;
        let fast = solver.take_trace();
        let slow = naive_cd_epoch(model, dataset, config)?.trace;
        assert_eq!(fast.len(), slow.len(), "update counts differ");
        for ((ca, va), (cb, vb)) in fast.steps.iter().zip(&slow.steps) {
            assert_eq!(ca, cb, "coordinate order differs");
            let gap = (va - vb).abs() / va.abs().max(vb.abs()).max(1.0);
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    rel_close(a, b, tol)
}

/// Any shipped model in brute-force form.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Mf(MfParams),
    Mfsi(MfsiModel),
    Fm(FmModel),
    Tensor(TensorModel),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Mf($m) => $e,
            AnyModel::Mfsi($m) => $e,
            AnyModel::Fm($m) => $e,
            AnyModel::Tensor($m) => $e,
        }
    };
}

impl ParamStore for AnyModel {
    fn family(&self) -> Family {
        dispatch!(self, m => m.family())
    }
    fn get(&self, coord: Coordinate) -> f64 {
        dispatch!(self, m => m.get(coord))
    }
    fn set(&mut self, coord: Coordinate, value: f64) {
        dispatch!(self, m => m.set(coord, value))
    }
    fn all_coordinates(&self) -> Vec<Coordinate> {
        dispatch!(self, m => m.all_coordinates())
    }
}

impl BruteForceModel for AnyModel {
    fn num_contexts(&self) -> usize {
        dispatch!(self, m => m.num_contexts())
    }
    fn num_items(&self) -> usize {
        dispatch!(self, m => m.num_items())
    }
    fn predict_in<T: Scalar>(&self, c: usize, i: usize) -> T {
        dispatch!(self, m => m.predict_in::<T>(c, i))
    }
    fn predict_cost(&self) -> u64 {
        dispatch!(self, m => m.predict_cost())
    }
    fn l2(&self, lambda: &Lambdas) -> f64 {
        dispatch!(self, m => BruteForceModel::l2(m, lambda))
    }
    fn touched_cells(&self, coord: Coordinate) -> Vec<(usize, usize)> {
        dispatch!(self, m => m.touched_cells(coord))
    }
    fn coordinate_order(&self, config: &SolverConfig) -> Vec<Coordinate> {
        dispatch!(self, m => m.coordinate_order(config))
    }
}

/// A solver, the same model in brute-force form, and the dataset the
/// oracle should enumerate (the full grid for dense-context tensors).
pub struct Case {
    pub family: Family,
    pub solver: Box<dyn ImplicitSolver>,
    pub model: AnyModel,
    pub oracle_data: ImplicitDataset,
    pub config: SolverConfig,
}

pub struct CaseSpec {
    pub max_side: usize,
    pub k: usize,
    pub dense: bool,
    pub lambda: f64,
    /// Seeds the parameters separately from the data when set.
    pub param_seed: Option<u64>,
}

impl Default for CaseSpec {
    fn default() -> Self {
        CaseSpec { max_side: 8, k: 2, dense: false, lambda: 0.05, param_seed: None }
    }
}

pub fn random_case(family: Family, seed: u64, spec: &CaseSpec) -> Case {
    let mut r = rng(seed);
    let n = spec.max_side.max(2);
    let nc = r.random_range(2..=n);
    let ni = r.random_range(2..=n);
    let alpha0 = r.random_range(0.2..1.5);
    let mut config = SolverConfig {
        k: spec.k,
        alpha0,
        sigma: 0.5,
        seed: spec.param_seed.unwrap_or(seed),
        lambda: Lambdas::uniform(spec.lambda),
        dense_context: spec.dense,
        ..Default::default()
    };
    match family {
        Family::Mf => {
            let ds = random_dataset(nc, ni, 0.3, alpha0, &mut r);
            let p = mf_params(nc, ni, &config);
            let solver = MfSolver::new(&ds, config.clone(), p.clone()).unwrap();
            Case { family, solver: Box::new(solver), model: AnyModel::Mf(p), oracle_data: ds, config }
        }
        Family::Mfsi => {
            let ds = random_dataset(nc, ni, 0.3, alpha0, &mut r);
            let feats = random_feature_data(nc, ni, r.random_range(2..=5), r.random_range(2..=5), &mut r);
            let p = mfsi_params(&feats, &config);
            let solver = MfsiSolver::new(&ds, feats.clone(), config.clone(), p.clone()).unwrap();
            let model = AnyModel::Mfsi(MfsiModel { params: p, feats });
            Case { family, solver: Box::new(solver), model, oracle_data: ds, config }
        }
        Family::Fm => {
            let ds = random_dataset(nc, ni, 0.3, alpha0, &mut r);
            let feats = random_feature_data(nc, ni, r.random_range(2..=5), r.random_range(2..=5), &mut r);
            let p = FmParams::init(feats.x.num_features(), feats.z.num_features(), &config);
            let p = fm_with_random_linear(p, &mut rng(config.seed ^ 0x5eed));
            let solver = FmSolver::new(&ds, feats.clone(), config.clone(), p.clone()).unwrap();
            let model = AnyModel::Fm(FmModel { params: p, feats });
            Case { family, solver: Box::new(solver), model, oracle_data: ds, config }
        }
        Family::Parafac | Family::Tucker => {
            let side = ((n as f64).sqrt().floor() as usize).max(2);
            let (n1, n2) = (r.random_range(1..=side), r.random_range(2..=side));
            let td = random_tensor_dataset(n1, n2, ni, 0.6, alpha0, &mut r);
            let params: TensorParams = if family == Family::Parafac {
                parafac_params(&td, &config).into()
            } else {
                config.core_dims = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
                tucker_params(&td, &config).into()
            };
            let solver = TensorSolver::new(&td, config.clone(), params.clone()).unwrap();
            let oracle_td = if spec.dense { td.to_dense_grid().unwrap() } else { td };
            let model = AnyModel::Tensor(TensorModel::new(params, &oracle_td));
            Case { family, solver: Box::new(solver), model, oracle_data: oracle_td.data().clone(), config }
        }
    }
}
