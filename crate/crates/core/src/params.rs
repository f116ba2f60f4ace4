//! Model families, parameter kinds and single-coordinate addressing.

use std::fmt;
use std::str::FromStr;

use crate::error::IcdError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Mf,
    Mfsi,
    Fm,
    Parafac,
    Tucker,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Mf,
        Family::Mfsi,
        Family::Fm,
        Family::Parafac,
        Family::Tucker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mf => "mf",
            Family::Mfsi => "mfsi",
            Family::Fm => "fm",
            Family::Parafac => "parafac",
            Family::Tucker => "tucker",
        }
    }

    /// Every kind of trainable parameter the family owns.
    pub fn param_kinds(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            Family::Mf | Family::Mfsi => &[ContextEmbedding, ItemEmbedding],
            Family::Fm => &[
                Bias,
                ContextLinear,
                ItemLinear,
                ContextEmbedding,
                ItemEmbedding,
            ],
            Family::Parafac => &[ModeOne, ModeTwo, ItemEmbedding],
            Family::Tucker => &[Core, ModeOne, ModeTwo, ItemEmbedding],
        }
    }

    pub fn needs_features(self) -> bool {
        matches!(self, Family::Mfsi | Family::Fm)
    }

    pub fn is_tensor(self) -> bool {
        matches!(self, Family::Parafac | Family::Tucker)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = IcdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| IcdError::InvalidConfig(format!("unknown model family '{s}'")))
    }
}

/// Parameter groups. Each group has its own L2 constant and can be frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    /// `w` rows: per context (MF) or per context feature (MFSI, FM).
    ContextEmbedding,
    /// `h` rows: per item (MF) or per item feature; `W` for tensor models.
    ItemEmbedding,
    /// FM global bias `b`.
    Bias,
    /// FM context linear weights `w̃`.
    ContextLinear,
    /// FM item linear weights `h̃`.
    ItemLinear,
    /// Tensor factor `U` over the first context mode.
    ModeOne,
    /// Tensor factor `V` over the second context mode.
    ModeTwo,
    /// Tucker core tensor `B`.
    Core,
}

impl ParamKind {
    pub fn is_context_side(self) -> bool {
        matches!(
            self,
            ParamKind::ContextEmbedding
                | ParamKind::Bias
                | ParamKind::ContextLinear
                | ParamKind::ModeOne
                | ParamKind::ModeTwo
                | ParamKind::Core
        )
    }
}

/// Address of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coordinate {
    ContextEmbedding { row: usize, dim: usize },
    ItemEmbedding { row: usize, dim: usize },
    Bias,
    ContextLinear(usize),
    ItemLinear(usize),
    ModeOne { row: usize, dim: usize },
    ModeTwo { row: usize, dim: usize },
    Core { f1: usize, f2: usize, f3: usize },
}

impl Coordinate {
    pub fn kind(self) -> ParamKind {
        match self {
            Coordinate::ContextEmbedding { .. } => ParamKind::ContextEmbedding,
            Coordinate::ItemEmbedding { .. } => ParamKind::ItemEmbedding,
            Coordinate::Bias => ParamKind::Bias,
            Coordinate::ContextLinear(_) => ParamKind::ContextLinear,
            Coordinate::ItemLinear(_) => ParamKind::ItemLinear,
            Coordinate::ModeOne { .. } => ParamKind::ModeOne,
            Coordinate::ModeTwo { .. } => ParamKind::ModeTwo,
            Coordinate::Core { .. } => ParamKind::Core,
        }
    }
}

/// Read/write access to individual parameters of a model.
pub trait ParamStore {
    fn family(&self) -> Family;
    fn get(&self, coord: Coordinate) -> f64;
    fn set(&mut self, coord: Coordinate, value: f64);
    /// All coordinates, grouped by kind in a fixed order.
    fn all_coordinates(&self) -> Vec<Coordinate>;
}

/// Coordinates recorded by a solver, in the order they were visited.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateTrace {
    pub steps: Vec<(Coordinate, f64)>,
}

impl UpdateTrace {
    pub fn push(&mut self, coord: Coordinate, value: f64) {
        self.steps.push((coord, value));
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
