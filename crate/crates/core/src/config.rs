use crate::error::{IcdError, Result};
use crate::params::ParamKind;

/// L2 constants per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub embedding: f64,
    pub linear: f64,
    pub bias: f64,
    pub core: f64,
}

impl Lambdas {
    pub fn uniform(lambda: f64) -> Self {
        Lambdas {
            embedding: lambda,
            linear: lambda,
            bias: lambda,
            core: lambda,
        }
    }

    pub fn for_kind(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::ContextEmbedding
            | ParamKind::ItemEmbedding
            | ParamKind::ModeOne
            | ParamKind::ModeTwo => self.embedding,
            ParamKind::ContextLinear | ParamKind::ItemLinear => self.linear,
            ParamKind::Bias => self.bias,
            ParamKind::Core => self.core,
        }
    }
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas::uniform(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Embedding dimension for MF, MFSI, FM and PARAFAC.
    pub k: usize,
    /// Tucker core dimensions `(k1, k2, k3)`.
    pub core_dims: [usize; 3],
    pub alpha0: f64,
    pub eta: f64,
    pub lambda: Lambdas,
    pub sigma: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop once the relative objective change of an epoch drops below this.
    pub tol: f64,
    /// Curvatures below this magnitude skip the update.
    pub epsilon_guard: f64,
    pub dense_context: bool,
    /// Groups held at their initial values.
    pub frozen: Vec<ParamKind>,
    /// Use the rayon Gram reduction. Results then differ from the sequential
    /// path in the last bits.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k: 8,
            core_dims: [2, 2, 2],
            alpha0: 1.0,
            eta: 1.0,
            lambda: Lambdas::default(),
            sigma: 0.1,
            seed: 0,
            max_epochs: 10,
            tol: 1e-5,
            epsilon_guard: 1e-12,
            dense_context: false,
            frozen: Vec::new(),
            parallel: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IcdError::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.core_dims.contains(&0) {
            return bad(format!("core dims must be >= 1, got {:?}", self.core_dims));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.epsilon_guard > 0.0) {
            return bad(format!("epsilon_guard must be > 0, got {}", self.epsilon_guard));
        }
        if !(self.alpha0 >= 0.0) || !self.alpha0.is_finite() {
            return bad(format!("alpha0 must be >= 0, got {}", self.alpha0));
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol must be >= 0, got {}", self.tol));
        }
        let l = self.lambda;
        if [l.embedding, l.linear, l.bias, l.core].iter().any(|v| !(*v >= 0.0)) {
            return bad("lambda constants must be >= 0".into());
        }
        Ok(())
    }

    pub fn is_frozen(&self, kind: ParamKind) -> bool {
        self.frozen.contains(&kind)
    }

    /// Checks that the dataset was built with the same `alpha0`.
    pub(crate) fn check_alpha0(&self, dataset_alpha0: f64) -> Result<()> {
        if self.alpha0 != dataset_alpha0 {
            return Err(IcdError::InvalidConfig(format!(
                "solver alpha0 {} differs from dataset alpha0 {}",
                self.alpha0, dataset_alpha0
            )));
        }
        Ok(())
    }
}
