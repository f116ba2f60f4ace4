//! Observations, vocabularies, sparse design matrices and context tuples.

use std::collections::{HashMap, HashSet};

use crate::error::{IcdError, Result};

/// One `(context, item, y, alpha)` tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub context: usize,
    pub item: usize,
    pub y: f64,
    pub alpha: f64,
}

impl Observation {
    pub fn new(context: usize, item: usize, y: f64, alpha: f64) -> Self {
        Observation {
            context,
            item,
            y,
            alpha,
        }
    }
}

/// Observed positives plus the uniform confidence `alpha0` of every cell not
/// listed; the full `|C|·|I|` grid is never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitDataset {
    num_contexts: usize,
    num_items: usize,
    positives: Vec<Observation>,
    alpha0: f64,
}

impl ImplicitDataset {
    pub fn new(
        num_contexts: usize,
        num_items: usize,
        positives: Vec<Observation>,
        alpha0: f64,
    ) -> Result<Self> {
        if !(alpha0 >= 0.0) || !alpha0.is_finite() {
            return Err(IcdError::InvalidConfig(format!(
                "alpha0 must be finite and >= 0, got {alpha0}"
            )));
        }
        let mut seen = HashSet::with_capacity(positives.len());
        for o in &positives {
            if o.context >= num_contexts {
                return Err(IcdError::IndexOutOfRange {
                    what: "context",
                    index: o.context,
                    bound: num_contexts,
                });
            }
            if o.item >= num_items {
                return Err(IcdError::IndexOutOfRange {
                    what: "item",
                    index: o.item,
                    bound: num_items,
                });
            }
            if !o.y.is_finite() || !o.alpha.is_finite() {
                return Err(IcdError::NonFinite("observation"));
            }
            if o.alpha <= alpha0 {
                return Err(IcdError::NonPositiveConfidence {
                    context: o.context,
                    item: o.item,
                    alpha: o.alpha,
                    alpha0,
                });
            }
            if !seen.insert((o.context, o.item)) {
                return Err(IcdError::DuplicatePair {
                    context: o.context.to_string(),
                    item: o.item.to_string(),
                });
            }
        }
        Ok(ImplicitDataset {
            num_contexts,
            num_items,
            positives,
            alpha0,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn positives(&self) -> &[Observation] {
        &self.positives
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    /// Positives after the `alpha0` rescaling; the explicit part of the
    /// implicit objective is a weighted squared loss over these.
    pub fn rescaled(&self) -> Result<Vec<Observation>> {
        rescale_observations(&self.positives, self.alpha0)
    }
}

/// Maps each `(c, i, y, α)` to `(c, i, α/(α−α₀)·y, α−α₀)`, preserving order.
pub fn rescale_observations(positives: &[Observation], alpha0: f64) -> Result<Vec<Observation>> {
    if !(alpha0 >= 0.0) {
        return Err(IcdError::InvalidConfig(format!(
            "alpha0 must be >= 0, got {alpha0}"
        )));
    }
    positives
        .iter()
        .map(|o| {
            let confidence = o.alpha - alpha0;
            if !(confidence > 0.0) {
                return Err(IcdError::NonPositiveConfidence {
                    context: o.context,
                    item: o.item,
                    alpha: o.alpha,
                    alpha0,
                });
            }
            Ok(Observation {
                context: o.context,
                item: o.item,
                y: o.alpha / confidence * o.y,
                alpha: confidence,
            })
        })
        .collect()
}

/// String ids to dense indices, assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::new();
        for id in ids {
            let id = id.into();
            if v.index.contains_key(&id) {
                return Err(IcdError::InvalidData(format!("duplicate vocabulary id '{id}'")));
            }
            v.intern(&id);
        }
        Ok(v)
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One parsed line of an interaction file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub context: String,
    pub item: String,
    pub y: f64,
    pub alpha: Option<f64>,
    pub timestamp: Option<f64>,
}

impl RawInteraction {
    pub fn new(context: impl Into<String>, item: impl Into<String>, y: f64) -> Self {
        RawInteraction {
            context: context.into(),
            item: item.into(),
            y,
            alpha: None,
            timestamp: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }
}

#[derive(Clone, Debug)]
pub struct AssembledDataset {
    pub dataset: ImplicitDataset,
    pub contexts: Vocabulary,
    pub items: Vocabulary,
}

pub fn assemble_dataset(
    raw: &[RawInteraction],
    alpha0: f64,
    default_alpha: f64,
) -> Result<AssembledDataset> {
    assemble_dataset_with(raw, Vocabulary::new(), Vocabulary::new(), alpha0, default_alpha)
}

/// Like [`assemble_dataset`] but starting from pre-populated vocabularies, so
/// a training subset can share indices with the full interaction log.
pub fn assemble_dataset_with(
    raw: &[RawInteraction],
    mut contexts: Vocabulary,
    mut items: Vocabulary,
    alpha0: f64,
    default_alpha: f64,
) -> Result<AssembledDataset> {
    if !(default_alpha > alpha0) {
        return Err(IcdError::InvalidConfig(format!(
            "default alpha {default_alpha} must exceed alpha0 {alpha0}"
        )));
    }
    let mut seen = HashSet::with_capacity(raw.len());
    let mut positives = Vec::with_capacity(raw.len());
    for r in raw {
        let c = contexts.intern(&r.context);
        let i = items.intern(&r.item);
        if !seen.insert((c, i)) {
            return Err(IcdError::DuplicatePair {
                context: r.context.clone(),
                item: r.item.clone(),
            });
        }
        positives.push(Observation::new(c, i, r.y, r.alpha.unwrap_or(default_alpha)));
    }
    let dataset = ImplicitDataset::new(contexts.len(), items.len(), positives, alpha0)?;
    Ok(AssembledDataset {
        dataset,
        contexts,
        items,
    })
}

/// Sparse design matrix, one ascending `(feature, value)` list per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    num_features: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FeatureMatrix {
    pub fn one_hot(n: usize) -> Self {
        FeatureMatrix {
            num_features: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Column-major view: row `l` of the result lists `(row, value)` for
    /// every stored entry of feature `l`, rows ascending.
    pub fn transpose(&self) -> FeatureMatrix {
        let mut cols = vec![Vec::new(); self.num_features];
        for (r, row) in self.rows.iter().enumerate() {
            for &(l, v) in row {
                cols[l].push((r, v));
            }
        }
        FeatureMatrix {
            num_features: self.rows.len(),
            rows: cols,
        }
    }

    pub fn to_dense(&self) -> crate::matrix::Matrix {
        let mut m = crate::matrix::Matrix::zeros(self.rows.len(), self.num_features);
        for (r, row) in self.rows.iter().enumerate() {
            for &(l, v) in row {
                m[(r, l)] = v;
            }
        }
        m
    }
}

/// Normalizes rows to ascending feature order and validates them.
pub fn assemble_feature_matrix(
    rows: Vec<Vec<(usize, f64)>>,
    num_features: usize,
) -> Result<FeatureMatrix> {
    let mut out = Vec::with_capacity(rows.len());
    for (r, mut row) in rows.into_iter().enumerate() {
        for &(l, v) in &row {
            if l >= num_features {
                return Err(IcdError::IndexOutOfRange {
                    what: "feature",
                    index: l,
                    bound: num_features,
                });
            }
            if !v.is_finite() {
                return Err(IcdError::NonFinite("feature value"));
            }
        }
        row.sort_by_key(|&(l, _)| l);
        if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(IcdError::DuplicateFeature {
                row: r,
                index: w[0].0,
            });
        }
        out.push(row);
    }
    Ok(FeatureMatrix {
        num_features,
        rows: out,
    })
}

/// Per-mode indices of a multi-variable context, e.g. `(user, query)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextTuple(Vec<usize>);

impl ContextTuple {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(IcdError::InvalidData("context tuple needs arity >= 1".into()));
        }
        Ok(ContextTuple(values))
    }

    pub fn pair(a: usize, b: usize) -> Self {
        ContextTuple(vec![a, b])
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }
}

/// Contexts made of several categorical variables. `contexts[c]` is the tuple
/// behind context index `c` of `data`.
#[derive(Clone, Debug)]
pub struct TensorDataset {
    mode_sizes: Vec<usize>,
    contexts: Vec<ContextTuple>,
    data: ImplicitDataset,
}

impl TensorDataset {
    pub fn new(mode_sizes: Vec<usize>, contexts: Vec<ContextTuple>, data: ImplicitDataset) -> Result<Self> {
        if contexts.len() != data.num_contexts() {
            return Err(IcdError::DimensionMismatch {
                what: "context tuples",
                expected: data.num_contexts(),
                found: contexts.len(),
            });
        }
        let mut seen = HashSet::with_capacity(contexts.len());
        for t in &contexts {
            if t.arity() != mode_sizes.len() {
                return Err(IcdError::DimensionMismatch {
                    what: "context arity",
                    expected: mode_sizes.len(),
                    found: t.arity(),
                });
            }
            for (&v, &n) in t.values().iter().zip(&mode_sizes) {
                if v >= n {
                    return Err(IcdError::IndexOutOfRange {
                        what: "context mode value",
                        index: v,
                        bound: n,
                    });
                }
            }
            if !seen.insert(t.clone()) {
                return Err(IcdError::InvalidData(format!(
                    "duplicate context tuple {:?}",
                    t.values()
                )));
            }
        }
        Ok(TensorDataset {
            mode_sizes,
            contexts,
            data,
        })
    }

    pub fn mode_sizes(&self) -> &[usize] {
        &self.mode_sizes
    }

    pub fn contexts(&self) -> &[ContextTuple] {
        &self.contexts
    }

    pub fn data(&self) -> &ImplicitDataset {
        &self.data
    }

    /// Same positives over the full product grid `C₁×C₂`; context `c₁·|C₂|+c₂`.
    pub fn to_dense_grid(&self) -> Result<TensorDataset> {
        if self.mode_sizes.len() != 2 {
            return Err(IcdError::DimensionMismatch {
                what: "context arity",
                expected: 2,
                found: self.mode_sizes.len(),
            });
        }
        let (n1, n2) = (self.mode_sizes[0], self.mode_sizes[1]);
        let grid = (0..n1)
            .flat_map(|a| (0..n2).map(move |b| ContextTuple::pair(a, b)))
            .collect();
        let positives = self
            .data
            .positives()
            .iter()
            .map(|o| {
                let t = self.contexts[o.context].values();
                Observation::new(t[0] * n2 + t[1], o.item, o.y, o.alpha)
            })
            .collect();
        let data = ImplicitDataset::new(n1 * n2, self.data.num_items(), positives, self.data.alpha0())?;
        TensorDataset::new(self.mode_sizes.clone(), grid, data)
    }
}

#[derive(Clone, Debug)]
pub struct AssembledTensorDataset {
    pub dataset: TensorDataset,
    /// Whole context strings, e.g. `u3,q7`.
    pub contexts: Vocabulary,
    pub modes: Vec<Vocabulary>,
    pub items: Vocabulary,
}

/// Tensor variant of [`assemble_dataset`]: context ids are comma-separated
/// mode values, all lines must share one arity.
pub fn assemble_tensor_dataset(
    raw: &[RawInteraction],
    alpha0: f64,
    default_alpha: f64,
) -> Result<AssembledTensorDataset> {
    assemble_tensor_dataset_with(raw, &[], alpha0, default_alpha)
}

/// Interns every id of `vocab_log` first so that a training subset shares
/// indices with the full interaction log.
pub fn assemble_tensor_dataset_with(
    raw: &[RawInteraction],
    vocab_log: &[RawInteraction],
    alpha0: f64,
    default_alpha: f64,
) -> Result<AssembledTensorDataset> {
    let mut contexts = Vocabulary::new();
    let mut items = Vocabulary::new();
    let mut modes: Vec<Vocabulary> = Vec::new();
    let mut tuples: Vec<ContextTuple> = Vec::new();
    let mut arity: Option<usize> = None;

    let mut intern = |r: &RawInteraction,
                      contexts: &mut Vocabulary,
                      items: &mut Vocabulary,
                      modes: &mut Vec<Vocabulary>,
                      tuples: &mut Vec<ContextTuple>|
     -> Result<(usize, usize)> {
        let parts: Vec<&str> = r.context.split(',').collect();
        match arity {
            None => {
                arity = Some(parts.len());
                modes.resize_with(parts.len(), Vocabulary::new);
            }
            Some(a) if a != parts.len() => {
                return Err(IcdError::DimensionMismatch {
                    what: "context arity",
                    expected: a,
                    found: parts.len(),
                })
            }
            _ => {}
        }
        let before = contexts.len();
        let c = contexts.intern(&r.context);
        if c == before {
            let values = parts
                .iter()
                .zip(modes.iter_mut())
                .map(|(p, m)| m.intern(p))
                .collect();
            tuples.push(ContextTuple::new(values)?);
        }
        Ok((c, items.intern(&r.item)))
    };

    for r in vocab_log {
        intern(r, &mut contexts, &mut items, &mut modes, &mut tuples)?;
    }
    if !(default_alpha > alpha0) {
        return Err(IcdError::InvalidConfig(format!(
            "default alpha {default_alpha} must exceed alpha0 {alpha0}"
        )));
    }
    let mut seen = HashSet::with_capacity(raw.len());
    let mut positives = Vec::with_capacity(raw.len());
    for r in raw {
        let (c, i) = intern(r, &mut contexts, &mut items, &mut modes, &mut tuples)?;
        if !seen.insert((c, i)) {
            return Err(IcdError::DuplicatePair {
                context: r.context.clone(),
                item: r.item.clone(),
            });
        }
        positives.push(Observation::new(c, i, r.y, r.alpha.unwrap_or(default_alpha)));
    }
    let data = ImplicitDataset::new(contexts.len(), items.len(), positives, alpha0)?;
    let mode_sizes = modes.iter().map(Vocabulary::len).collect();
    let dataset = TensorDataset::new(mode_sizes, tuples, data)?;
    Ok(AssembledTensorDataset {
        dataset,
        contexts,
        modes,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        let out = rescale_observations(&[Observation::new(0, 0, 5.0, 3.0)], 1.0).unwrap();
        assert_eq!(out[0].y, 7.5);
        assert_eq!(out[0].alpha, 2.0);

        let out = rescale_observations(&[Observation::new(0, 0, 1.0, 2.0)], 0.0).unwrap();
        assert_eq!((out[0].y, out[0].alpha), (1.0, 2.0));

        let err = rescale_observations(&[Observation::new(3, 4, 4.0, 1.0)], 1.0).unwrap_err();
        assert!(matches!(
            err,
            IcdError::NonPositiveConfidence { context: 3, item: 4, .. }
        ));
    }

    #[test]
    fn rescale_preserves_order() {
        let obs = [
            Observation::new(2, 0, 1.0, 3.0),
            Observation::new(0, 1, 0.0, 2.0),
            Observation::new(1, 1, 2.0, 5.0),
        ];
        let out = rescale_observations(&obs, 1.0).unwrap();
        let keys: Vec<_> = out.iter().map(|o| (o.context, o.item)).collect();
        assert_eq!(keys, vec![(2, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn assemble_single_tuple() {
        let a = assemble_dataset(&[RawInteraction::new("u1", "v1", 5.0)], 1.0, 2.0).unwrap();
        assert_eq!(a.dataset.num_contexts(), 1);
        assert_eq!(a.dataset.num_items(), 1);
        assert_eq!(a.dataset.positives(), &[Observation::new(0, 0, 5.0, 2.0)]);
    }

    #[test]
    fn assemble_rejects_duplicates_and_bad_default() {
        let raw = [
            RawInteraction::new("u1", "v1", 5.0),
            RawInteraction::new("u1", "v1", 3.0),
        ];
        assert!(matches!(
            assemble_dataset(&raw, 1.0, 2.0),
            Err(IcdError::DuplicatePair { .. })
        ));
        assert!(assemble_dataset(&raw[..1], 1.0, 1.0).is_err());
    }

    #[test]
    fn assemble_empty_is_allowed() {
        let a = assemble_dataset(&[], 1.0, 2.0).unwrap();
        assert!(a.dataset.positives().is_empty());
    }

    #[test]
    fn assemble_uses_first_seen_order() {
        let raw = [
            RawInteraction::new("zed", "b", 1.0),
            RawInteraction::new("amy", "a", 1.0),
            RawInteraction::new("zed", "a", 1.0),
        ];
        let a = assemble_dataset(&raw, 1.0, 2.0).unwrap();
        assert_eq!(a.contexts.ids(), &["zed".to_string(), "amy".to_string()]);
        assert_eq!(a.items.ids(), &["b".to_string(), "a".to_string()]);
        let b = assemble_dataset(&raw, 1.0, 2.0).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn zero_score_positive_is_allowed() {
        let a = assemble_dataset(&[RawInteraction::new("u", "i", 0.0)], 1.0, 2.0).unwrap();
        assert_eq!(a.dataset.positives()[0].y, 0.0);
    }

    #[test]
    fn dataset_rejects_alpha_not_above_alpha0() {
        let err = ImplicitDataset::new(1, 1, vec![Observation::new(0, 0, 1.0, 1.0)], 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn feature_matrix_examples() {
        let m = FeatureMatrix::one_hot(3);
        assert_eq!(m.rows(), &[vec![(0, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)]]);

        let m = assemble_feature_matrix(vec![vec![(2, 0.5), (0, 1.0)]], 3).unwrap();
        assert_eq!(m.row(0), &[(0, 1.0), (2, 0.5)]);

        assert!(matches!(
            assemble_feature_matrix(vec![vec![(1, 1.0), (1, 2.0)]], 3),
            Err(IcdError::DuplicateFeature { row: 0, index: 1 })
        ));
        assert!(matches!(
            assemble_feature_matrix(vec![vec![(3, 1.0)]], 3),
            Err(IcdError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn transpose_lists_columns() {
        let m = assemble_feature_matrix(vec![vec![(0, 1.0), (1, 2.0)], vec![(1, 3.0)]], 3).unwrap();
        let t = m.transpose();
        assert_eq!(t.num_rows(), 3);
        assert_eq!(t.row(1), &[(0, 2.0), (1, 3.0)]);
        assert!(t.row(2).is_empty());
    }

    #[test]
    fn tensor_assembly_splits_modes() {
        let raw = [
            RawInteraction::new("u1,q1", "a", 1.0),
            RawInteraction::new("u2,q1", "b", 1.0),
            RawInteraction::new("u1,q2", "a", 1.0),
        ];
        let a = assemble_tensor_dataset(&raw, 1.0, 2.0).unwrap();
        assert_eq!(a.dataset.mode_sizes(), &[2, 2]);
        assert_eq!(a.dataset.contexts()[2], ContextTuple::pair(0, 1));

        let bad = [
            RawInteraction::new("u1,q1", "a", 1.0),
            RawInteraction::new("u1", "a", 1.0),
        ];
        assert!(assemble_tensor_dataset(&bad, 1.0, 2.0).is_err());
    }

    #[test]
    fn dense_grid_remaps_positives() {
        let raw = [
            RawInteraction::new("u1,q1", "a", 1.0),
            RawInteraction::new("u2,q2", "b", 2.0),
        ];
        let a = assemble_tensor_dataset(&raw, 1.0, 2.0).unwrap();
        let g = a.dataset.to_dense_grid().unwrap();
        assert_eq!(g.contexts().len(), 4);
        assert_eq!(g.data().positives()[1].context, 3);
    }
}
