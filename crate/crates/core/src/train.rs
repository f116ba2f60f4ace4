//! Machinery shared by every coordinate-descent solver: cached explicit
//! predictions, operation counters, the per-coordinate Newton update and the
//! epoch loop.

use std::time::Instant;

use crate::config::SolverConfig;
use crate::data::{ImplicitDataset, Observation};
use crate::error::{IcdError, Result};
use crate::params::{Coordinate, Family, UpdateTrace};
use crate::matrix::Matrix;
use crate::separable::{
    explicit_grads, newton_step, Contribution, GradPair, GramMatrix, PhiDerivative, SeparableState,
};

/// Rows of a sparse index, e.g. the positives of each context.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    values: Vec<usize>,
}

impl Csr {
    /// Groups `0..keys.len()` by key, preserving order within a row.
    pub fn group(num_rows: usize, keys: impl IntoIterator<Item = usize>) -> Self {
        let keys: Vec<usize> = keys.into_iter().collect();
        let mut offsets = vec![0usize; num_rows + 1];
        for &k in &keys {
            offsets[k + 1] += 1;
        }
        for r in 0..num_rows {
            offsets[r + 1] += offsets[r];
        }
        let mut fill = offsets.clone();
        let mut values = vec![0; keys.len()];
        for (idx, &k) in keys.iter().enumerate() {
            values[fill[k]] = idx;
            fill[k] += 1;
        }
        Csr { offsets, values }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.values[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Rescaled positives with their cached predictions.
#[derive(Clone, Debug)]
pub struct Explicit {
    pub obs: Vec<Observation>,
    pub by_context: Csr,
    pub by_item: Csr,
    pub preds: Vec<f64>,
    /// Parameter-independent gap between the implicit objective and the
    /// rescaled loss plus `alpha0·R`.
    pub offset: f64,
}

impl Explicit {
    pub fn new(dataset: &ImplicitDataset) -> Result<Self> {
        let obs = dataset.rescaled()?;
        let offset = dataset
            .positives()
            .iter()
            .zip(&obs)
            .map(|(o, r)| o.alpha * o.y * o.y - r.alpha * r.y * r.y)
            .sum();
        Ok(Explicit {
            by_context: Csr::group(dataset.num_contexts(), obs.iter().map(|o| o.context)),
            by_item: Csr::group(dataset.num_items(), obs.iter().map(|o| o.item)),
            preds: vec![0.0; obs.len()],
            obs,
            offset,
        })
    }

    pub fn recompute(&mut self, mut predict: impl FnMut(&Observation) -> f64) {
        for (p, o) in self.preds.iter_mut().zip(&self.obs) {
            *p = predict(o);
        }
    }

    /// Weighted squared loss over the rescaled positives, using cached
    /// predictions.
    pub fn loss(&self) -> f64 {
        self.obs
            .iter()
            .zip(&self.preds)
            .map(|(o, p)| o.alpha * (p - o.y) * (p - o.y))
            .sum()
    }

    pub fn loss_with(&self, mut predict: impl FnMut(&Observation) -> f64) -> f64 {
        self.obs
            .iter()
            .map(|o| {
                let e = predict(o) - o.y;
                o.alpha * e * e
            })
            .sum()
    }
}

/// Which side of the separable form a parameter lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Context,
    Item,
}

impl Explicit {
    /// `(positive, ŷ′)` for every rescaled positive whose own-side row is in
    /// the support of `d`. `other` is the opposite table (Ψ for context-side
    /// parameters).
    pub fn touched(&self, side: Side, d: &PhiDerivative, other: &Matrix) -> Vec<(usize, f64)> {
        let index = match side {
            Side::Context => &self.by_context,
            Side::Item => &self.by_item,
        };
        let mut out = Vec::new();
        for (j, &r) in d.rows.iter().enumerate() {
            for &p in index.row(r) {
                let o = &self.obs[p];
                let opposite = match side {
                    Side::Context => o.item,
                    Side::Item => o.context,
                };
                out.push((p, d.pred_derivative(j, other.row(opposite))));
            }
        }
        out
    }

    pub fn grads(&self, theta: f64, lambda: f64, touched: &[(usize, f64)]) -> GradPair {
        explicit_grads(
            theta,
            touched.iter().map(|&(p, d1)| {
                let o = &self.obs[p];
                Contribution::linear(self.preds[p], o.y, o.alpha, d1)
            }),
            lambda,
        )
    }

    pub fn shift(&mut self, touched: &[(usize, f64)], delta: f64) {
        for &(p, d1) in touched {
            self.preds[p] += delta * d1;
        }
    }
}

/// Loss and regularizer derivatives of a parameter whose effect on the
/// model is `d`, plus the touched positives for the follow-up update.
pub fn separable_grads(
    ex: &Explicit,
    side: Side,
    d: &PhiDerivative,
    theta: f64,
    lambda: f64,
    own: &Matrix,
    other: &Matrix,
    j_other: &GramMatrix,
) -> (CoordGrads, Vec<(usize, f64)>) {
    let touched = ex.touched(side, d, other);
    let g = CoordGrads {
        loss: ex.grads(theta, lambda, &touched),
        reg: d.reg_grads(own, j_other),
    };
    (g, touched)
}

/// One Newton update of a parameter of a separable model: computes the
/// derivatives, steps, then syncs the own-side table and cached predictions.
/// Returns the new value; the caller stores it in its parameter struct.
#[allow(clippy::too_many_arguments)]
pub fn update_separable(
    rt: &mut Runtime,
    ex: &mut Explicit,
    coord: Coordinate,
    side: Side,
    d: &PhiDerivative,
    theta: f64,
    own: &mut Matrix,
    other: &Matrix,
    j_other: &GramMatrix,
) -> Result<f64> {
    let lambda = rt.config.lambda.for_kind(coord.kind());
    let (g, touched) = separable_grads(ex, side, d, theta, lambda, own, other, j_other);
    let (nnz, dims, k) = (d.nnz() as u64, d.dims.len() as u64, own.cols() as u64);
    let c = &mut rt.counters;
    c.explicit_flops += 2 * touched.len() as u64 * dims;
    c.reg_flops += nnz * k + dims * dims * d.rows.len() as u64;
    c.sync_flops += nnz;
    if side == Side::Context {
        c.context_visits += d.rows.len() as u64;
    }
    let value = rt.step(coord, theta, g)?;
    let delta = value - theta;
    if delta != 0.0 {
        d.apply(own, delta);
        ex.shift(&touched, delta);
    }
    Ok(value)
}

/// Running operation counts. A flop here is one multiply-add.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub gram_flops: u64,
    pub reg_flops: u64,
    pub explicit_flops: u64,
    pub sync_flops: u64,
    /// Context rows read while computing regularizer gradients.
    pub context_visits: u64,
    pub updates: u64,
    pub skipped: u64,
}

impl Counters {
    pub fn total_flops(&self) -> u64 {
        self.gram_flops + self.reg_flops + self.explicit_flops + self.sync_flops
    }

    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            gram_flops: self.gram_flops - earlier.gram_flops,
            reg_flops: self.reg_flops - earlier.reg_flops,
            explicit_flops: self.explicit_flops - earlier.explicit_flops,
            sync_flops: self.sync_flops - earlier.sync_flops,
            context_visits: self.context_visits - earlier.context_visits,
            updates: self.updates - earlier.updates,
            skipped: self.skipped - earlier.skipped,
        }
    }
}

/// Loss and regularizer derivatives for one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordGrads {
    pub loss: GradPair,
    pub reg: GradPair,
}

impl CoordGrads {
    /// Derivatives of `L + alpha0·R`.
    pub fn combined(&self, alpha0: f64) -> GradPair {
        GradPair::new(
            self.loss.first + alpha0 * self.reg.first,
            self.loss.second + alpha0 * self.reg.second,
        )
    }
}

/// State shared by all solvers besides the model itself.
#[derive(Clone, Debug)]
pub struct Runtime {
    pub config: SolverConfig,
    pub counters: Counters,
    pub trace: Option<UpdateTrace>,
}

impl Runtime {
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Runtime {
            config,
            counters: Counters::default(),
            trace: None,
        })
    }

    /// Newton update of one coordinate; returns the new value.
    pub fn step(&mut self, coord: Coordinate, theta: f64, g: CoordGrads) -> Result<f64> {
        let c = &self.config;
        let s = newton_step(theta, g.loss, g.reg, c.alpha0, c.eta, c.epsilon_guard)?;
        if s.skipped {
            self.counters.skipped += 1;
        } else {
            self.counters.updates += 1;
        }
        if let Some(t) = self.trace.as_mut() {
            t.push(coord, s.value);
        }
        Ok(s.value)
    }

    pub fn gram_par(&self, table: &crate::matrix::Matrix) -> crate::separable::GramMatrix {
        if self.config.parallel {
            crate::separable::compute_gram_par(table)
        } else {
            crate::separable::compute_gram(table)
        }
    }
}

/// `L(Θ|S) + alpha0·R(Θ) + L2 + offset`.
pub fn implicit_objective(loss: f64, alpha0: f64, reg: f64, l2: f64, offset: f64) -> f64 {
    loss + alpha0 * reg + l2 + offset
}

/// Common surface of the five coordinate-descent solvers.
pub trait ImplicitSolver {
    fn family(&self) -> Family;
    fn runtime(&self) -> &Runtime;
    fn runtime_mut(&mut self) -> &mut Runtime;
    /// Recomputes every cache (Φ, Ψ, Gram matrices, predictions) from the
    /// parameters.
    fn refresh(&mut self);
    /// One pass over every non-frozen coordinate.
    fn run_epoch(&mut self) -> Result<()>;
    /// Implicit objective evaluated from scratch through the Gram
    /// decomposition.
    fn objective(&self) -> Result<f64>;
    /// Derivatives at the current parameters. Caches must be fresh.
    fn gradients(&self, coord: Coordinate) -> Result<CoordGrads>;
    /// Freshly computed `Φ`, `Ψ` over the model's context and item sets.
    fn separable_state(&self) -> SeparableState;

    fn config(&self) -> &SolverConfig {
        &self.runtime().config
    }

    fn counters(&self) -> &Counters {
        &self.runtime().counters
    }

    fn enable_trace(&mut self) {
        self.runtime_mut().trace = Some(UpdateTrace::default());
    }

    /// Updates recorded since the last call; recording continues.
    fn take_trace(&mut self) -> UpdateTrace {
        self.runtime_mut().trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: f64,
    pub seconds: f64,
    pub updates: u64,
    pub skipped: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_objective: f64,
    pub epochs: Vec<EpochLog>,
    pub converged: bool,
}

impl TrainReport {
    pub fn final_objective(&self) -> f64 {
        self.epochs.last().map_or(self.initial_objective, |e| e.objective)
    }

    pub fn total_skipped(&self) -> u64 {
        self.epochs.iter().map(|e| e.skipped).sum()
    }
}

/// Runs epochs until the relative objective change falls below `tol` or
/// `max_epochs` is reached.
pub fn fit<S: ImplicitSolver + ?Sized>(solver: &mut S) -> Result<TrainReport> {
    fit_with(solver, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<S, F>(solver: &mut S, mut on_epoch: F) -> Result<TrainReport>
where
    S: ImplicitSolver + ?Sized,
    F: FnMut(&EpochLog),
{
    let (max_epochs, tol) = (solver.config().max_epochs, solver.config().tol);
    let initial = solver.objective()?;
    let mut prev = initial;
    let mut epochs = Vec::with_capacity(max_epochs);
    let mut converged = false;
    for epoch in 1..=max_epochs {
        let before = solver.counters().clone();
        let start = Instant::now();
        solver.run_epoch()?;
        let seconds = start.elapsed().as_secs_f64();
        let objective = solver.objective()?;
        if !objective.is_finite() {
            return Err(IcdError::NonFinite("objective"));
        }
        let delta = solver.counters().since(&before);
        let log = EpochLog {
            epoch,
            objective,
            seconds,
            updates: delta.updates,
            skipped: delta.skipped,
        };
        on_epoch(&log);
        epochs.push(log);
        let rel = (prev - objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = objective;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(TrainReport {
        initial_objective: initial,
        epochs,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_groups_in_order() {
        let csr = Csr::group(3, [2, 0, 2, 1, 0]);
        assert_eq!(csr.row(0), &[1, 4]);
        assert_eq!(csr.row(1), &[3]);
        assert_eq!(csr.row(2), &[0, 2]);
        assert_eq!(csr.num_rows(), 3);
    }

    #[test]
    fn offset_closes_the_rescaling_gap() {
        // One positive y=5, α=3, α₀=1: rescaled (7.5, 2).
        let ds = ImplicitDataset::new(1, 1, vec![Observation::new(0, 0, 5.0, 3.0)], 1.0).unwrap();
        let ex = Explicit::new(&ds).unwrap();
        for yhat in [0.0, 1.0, -2.5, 4.0] {
            let implicit = 3.0 * (yhat - 5.0) * (yhat - 5.0);
            let rescaled = ex.loss_with(|_| yhat) + 1.0 * yhat * yhat + ex.offset;
            assert!((implicit - rescaled).abs() < 1e-12);
        }
    }
}
