//! Matrix factorization: `ŷ(c, i) = ⟨w_c, h_i⟩`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Lambdas, SolverConfig};
use crate::data::ImplicitDataset;
use crate::error::{IcdError, Result};
use crate::matrix::{dot, Matrix};
use crate::params::{Coordinate, Family, ParamKind, ParamStore};
use crate::separable::{explicit_grads, reg_value, Contribution, GradPair, GramMatrix, SeparableState};
use crate::train::{fit, implicit_objective, CoordGrads, Explicit, ImplicitSolver, Runtime, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct MfParams {
    pub w: Matrix,
    pub h: Matrix,
}

impl MfParams {
    pub fn new(w: Matrix, h: Matrix) -> Result<Self> {
        if w.cols() != h.cols() {
            return Err(IcdError::DimensionMismatch {
                what: "embedding width",
                expected: w.cols(),
                found: h.cols(),
            });
        }
        Ok(MfParams { w, h })
    }

    /// `W` then `H`, entries drawn from `N(0, sigma)`.
    pub fn init(num_contexts: usize, num_items: usize, config: &SolverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = Matrix::random_normal(num_contexts, config.k, config.sigma, &mut rng);
        let h = Matrix::random_normal(num_items, config.k, config.sigma, &mut rng);
        MfParams { w, h }
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    pub fn l2(&self, lambda: &Lambdas) -> f64 {
        let sq = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>();
        lambda.embedding * (sq(&self.w) + sq(&self.h))
    }
}

impl ParamStore for MfParams {
    fn family(&self) -> Family {
        Family::Mf
    }

    fn get(&self, coord: Coordinate) -> f64 {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)],
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)],
            other => panic!("{other:?} is not an MF parameter"),
        }
    }

    fn set(&mut self, coord: Coordinate, value: f64) {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => self.w[(row, dim)] = value,
            Coordinate::ItemEmbedding { row, dim } => self.h[(row, dim)] = value,
            other => panic!("{other:?} is not an MF parameter"),
        }
    }

    fn all_coordinates(&self) -> Vec<Coordinate> {
        embedding_coordinates(&self.w, &self.h)
    }
}

pub(crate) fn embedding_coordinates(w: &Matrix, h: &Matrix) -> Vec<Coordinate> {
    let mut out = Vec::with_capacity(w.as_slice().len() + h.as_slice().len());
    for row in 0..w.rows() {
        for dim in 0..w.cols() {
            out.push(Coordinate::ContextEmbedding { row, dim });
        }
    }
    for row in 0..h.rows() {
        for dim in 0..h.cols() {
            out.push(Coordinate::ItemEmbedding { row, dim });
        }
    }
    out
}

/// `Φ = W`, `Ψ = H`.
pub fn mf_representation(params: &MfParams) -> SeparableState {
    SeparableState {
        phi: params.w.clone(),
        psi: params.h.clone(),
    }
}

/// Regularizer derivatives for one entry `row[f_star]` of an embedding row,
/// given the Gram matrix of the opposite side.
pub fn mf_reg_grads(row: &[f64], f_star: usize, j_other: &GramMatrix) -> GradPair {
    GradPair::new(2.0 * dot(j_other.row(f_star), row), 2.0 * j_other.get(f_star, f_star))
}

/// Coordinate-descent solver for MF. Per epoch and per dimension `f`: every
/// context row, then every item row.
#[derive(Clone, Debug)]
pub struct MfSolver {
    rt: Runtime,
    params: MfParams,
    ex: Explicit,
    j_c: GramMatrix,
    j_i: GramMatrix,
}

impl MfSolver {
    pub fn new(dataset: &ImplicitDataset, config: SolverConfig, params: MfParams) -> Result<Self> {
        config.check_alpha0(dataset.alpha0())?;
        check_shape("W rows", params.w.rows(), dataset.num_contexts())?;
        check_shape("H rows", params.h.rows(), dataset.num_items())?;
        check_shape("embedding width", params.k(), config.k)?;
        if !params.w.is_finite() || !params.h.is_finite() {
            return Err(IcdError::NonFinite("initial parameters"));
        }
        let k = params.k();
        let mut s = MfSolver {
            rt: Runtime::new(config)?,
            ex: Explicit::new(dataset)?,
            params,
            j_c: GramMatrix::zeros(k),
            j_i: GramMatrix::zeros(k),
        };
        s.refresh();
        Ok(s)
    }

    pub fn params(&self) -> &MfParams {
        &self.params
    }

    pub fn into_params(self) -> MfParams {
        self.params
    }

    fn lambda(&self) -> f64 {
        self.rt.config.lambda.embedding
    }

    fn context_grads(&self, c: usize, f: usize) -> CoordGrads {
        let (w, h, ex) = (&self.params.w, &self.params.h, &self.ex);
        let contributions = ex.by_context.row(c).iter().map(|&p| {
            let o = &ex.obs[p];
            Contribution::linear(ex.preds[p], o.y, o.alpha, h[(o.item, f)])
        });
        CoordGrads {
            loss: explicit_grads(w[(c, f)], contributions, self.lambda()),
            reg: mf_reg_grads(w.row(c), f, &self.j_i),
        }
    }

    fn item_grads(&self, i: usize, f: usize) -> CoordGrads {
        let (w, h, ex) = (&self.params.w, &self.params.h, &self.ex);
        let contributions = ex.by_item.row(i).iter().map(|&p| {
            let o = &ex.obs[p];
            Contribution::linear(ex.preds[p], o.y, o.alpha, w[(o.context, f)])
        });
        CoordGrads {
            loss: explicit_grads(h[(i, f)], contributions, self.lambda()),
            reg: mf_reg_grads(h.row(i), f, &self.j_c),
        }
    }

    fn update_context(&mut self, c: usize, f: usize) -> Result<()> {
        let g = self.context_grads(c, f);
        let theta = self.params.w[(c, f)];
        let value = self.rt.step(Coordinate::ContextEmbedding { row: c, dim: f }, theta, g)?;
        let n = self.ex.by_context.row(c).len() as u64;
        self.rt.counters.explicit_flops += 2 * n;
        self.rt.counters.reg_flops += self.params.k() as u64;
        let delta = value - theta;
        if delta != 0.0 {
            self.params.w[(c, f)] = value;
            for &p in self.ex.by_context.row(c) {
                self.ex.preds[p] += delta * self.params.h[(self.ex.obs[p].item, f)];
            }
        }
        Ok(())
    }

    fn update_item(&mut self, i: usize, f: usize) -> Result<()> {
        let g = self.item_grads(i, f);
        let theta = self.params.h[(i, f)];
        let value = self.rt.step(Coordinate::ItemEmbedding { row: i, dim: f }, theta, g)?;
        let n = self.ex.by_item.row(i).len() as u64;
        self.rt.counters.explicit_flops += 2 * n;
        self.rt.counters.reg_flops += self.params.k() as u64;
        let delta = value - theta;
        if delta != 0.0 {
            self.params.h[(i, f)] = value;
            for &p in self.ex.by_item.row(i) {
                self.ex.preds[p] += delta * self.params.w[(self.ex.obs[p].context, f)];
            }
        }
        Ok(())
    }
}

pub(crate) fn check_shape(what: &'static str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(IcdError::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

impl ImplicitSolver for MfSolver {
    fn family(&self) -> Family {
        Family::Mf
    }

    fn runtime(&self) -> &Runtime {
        &self.rt
    }

    fn runtime_mut(&mut self) -> &mut Runtime {
        &mut self.rt
    }

    fn refresh(&mut self) {
        let k = self.params.k() as u64;
        self.j_c = self.rt.gram_par(&self.params.w);
        self.j_i = self.rt.gram_par(&self.params.h);
        self.rt.counters.gram_flops += (self.params.w.rows() + self.params.h.rows()) as u64 * k * k;
        let (w, h) = (&self.params.w, &self.params.h);
        self.ex.recompute(|o| dot(w.row(o.context), h.row(o.item)));
        self.rt.counters.explicit_flops += self.ex.obs.len() as u64 * k;
    }

    fn run_epoch(&mut self) -> Result<()> {
        self.refresh();
        let (nc, ni) = (self.params.w.rows(), self.params.h.rows());
        let train_c = !self.rt.config.is_frozen(ParamKind::ContextEmbedding);
        let train_i = !self.rt.config.is_frozen(ParamKind::ItemEmbedding);
        for f in 0..self.params.k() {
            if train_c {
                for c in 0..nc {
                    self.update_context(c, f)?;
                }
                self.rt.counters.gram_flops += self.j_c.refresh_row(&self.params.w, f);
            }
            if train_i {
                for i in 0..ni {
                    self.update_item(i, f)?;
                }
                self.rt.counters.gram_flops += self.j_i.refresh_row(&self.params.h, f);
            }
        }
        Ok(())
    }

    fn objective(&self) -> Result<f64> {
        let (w, h) = (&self.params.w, &self.params.h);
        let loss = self.ex.loss_with(|o| dot(w.row(o.context), h.row(o.item)));
        let reg = reg_value(&self.rt.gram_par(w), &self.rt.gram_par(h))?;
        let l2 = self.params.l2(&self.rt.config.lambda);
        Ok(implicit_objective(loss, self.rt.config.alpha0, reg, l2, self.ex.offset))
    }

    fn gradients(&self, coord: Coordinate) -> Result<CoordGrads> {
        match coord {
            Coordinate::ContextEmbedding { row, dim } => Ok(self.context_grads(row, dim)),
            Coordinate::ItemEmbedding { row, dim } => Ok(self.item_grads(row, dim)),
            other => Err(IcdError::InvalidConfig(format!("{other:?} is not an MF parameter"))),
        }
    }

    fn separable_state(&self) -> SeparableState {
        mf_representation(&self.params)
    }
}

/// Initializes from `config.seed` and trains to convergence.
pub fn train_mf(dataset: &ImplicitDataset, config: &SolverConfig) -> Result<(MfParams, TrainReport)> {
    let params = MfParams::init(dataset.num_contexts(), dataset.num_items(), config);
    let mut solver = MfSolver::new(dataset, config.clone(), params)?;
    let report = fit(&mut solver)?;
    Ok((solver.into_params(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::separable::{compute_gram, reg_grads_generic, SupportColumn};

    fn toy() -> MfParams {
        MfParams::new(
            Matrix::from_rows(&[[1.0], [2.0]]),
            Matrix::from_rows(&[[1.0], [3.0]]),
        )
        .unwrap()
    }

    #[test]
    fn representation_examples() {
        let p = MfParams::new(Matrix::from_rows(&[[1.0]]), Matrix::from_rows(&[[2.0]])).unwrap();
        assert_eq!(mf_representation(&p).predict(0, 0), 2.0);

        let s = mf_representation(&toy());
        let grid: Vec<f64> = (0..2).flat_map(|c| (0..2).map(move |i| (c, i))).map(|(c, i)| s.predict(c, i)).collect();
        assert_eq!(grid, vec![1.0, 3.0, 2.0, 6.0]);
    }

    #[test]
    fn reg_grads_examples() {
        let p = toy();
        let j_i = compute_gram(&p.h);
        assert_eq!(mf_reg_grads(p.w.row(0), 0, &j_i), GradPair::new(20.0, 20.0));
        assert_eq!(mf_reg_grads(&[0.0], 0, &j_i), GradPair::new(0.0, 20.0));
    }

    #[test]
    fn reg_grads_match_generic_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let h = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let j_i = compute_gram(&h);
        for c in 0..6 {
            for f in 0..3 {
                let a = mf_reg_grads(w.row(c), f, &j_i);
                let b = reg_grads_generic(&[SupportColumn::new(f, vec![(c, 1.0)])], &w, &j_i, &[]);
                assert!((a.first - b.first).abs() <= 1e-12 * (1.0 + a.first.abs()));
                assert_eq!(a.second, b.second);
            }
        }
    }

    #[test]
    fn empty_positives_drive_objective_down() {
        let ds = ImplicitDataset::new(4, 3, vec![], 1.0).unwrap();
        let cfg = SolverConfig { k: 2, max_epochs: 5, tol: 0.0, ..Default::default() };
        let params = MfParams::init(4, 3, &cfg);
        let mut s = MfSolver::new(&ds, cfg, params).unwrap();
        let report = fit(&mut s).unwrap();
        let mut prev = report.initial_objective;
        for e in &report.epochs {
            assert!(e.objective <= prev + 1e-10 * prev.abs().max(1.0), "{report:?}");
            prev = e.objective;
        }
        assert!(report.final_objective() < report.initial_objective, "{report:?}");
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let obs = vec![
            Observation::new(0, 1, 1.0, 2.0),
            Observation::new(1, 0, 1.0, 3.0),
            Observation::new(2, 2, 2.0, 2.0),
        ];
        let ds = ImplicitDataset::new(3, 3, obs, 1.0).unwrap();
        let cfg = SolverConfig { k: 2, seed: 4, ..Default::default() };
        let (a, _) = train_mf(&ds, &cfg).unwrap();
        let (b, _) = train_mf(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
