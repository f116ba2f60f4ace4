//! Text model format and id sidecar.
//!
//! ```text
//! icd-model v1 <family>
//! dims k=<k>                  (tucker: dims k1=.. k2=.. k3=..)
//! block <name> <rows> <cols>
//! <row values, space separated, 17 significant digits>
//! ```
//!
//! Block sets per family: mf/mfsi `W H`; fm `b w_linear h_linear W H`;
//! parafac `U V W`; tucker `B U V W` with `B` stored as `(k₁·k₂)×k₃`, row
//! `f₁·k₂+f₂`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{ContextTuple, FeatureMatrix, Vocabulary};
use crate::error::{IcdError, Result};
use crate::feature::{fm_representation, mfsi_representation, FmParams, MfsiParams};
use crate::matrix::Matrix;
use crate::mf::MfParams;
use crate::params::Family;
use crate::separable::SeparableState;
use crate::tensor::{tensor_representation, CoreTensor, ParafacParams, TensorParams, TuckerParams};

const MAGIC: &str = "icd-model v1";

/// Trained parameters of any family.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Mf(MfParams),
    Mfsi(MfsiParams),
    Fm(FmParams),
    Parafac(ParafacParams),
    Tucker(TuckerParams),
}

fn err(msg: impl Into<String>) -> IcdError {
    IcdError::ModelFile(msg.into())
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_vec(v.len(), 1, v.to_vec()).expect("one column")
}

impl ModelParams {
    pub fn family(&self) -> Family {
        match self {
            ModelParams::Mf(_) => Family::Mf,
            ModelParams::Mfsi(_) => Family::Mfsi,
            ModelParams::Fm(_) => Family::Fm,
            ModelParams::Parafac(_) => Family::Parafac,
            ModelParams::Tucker(_) => Family::Tucker,
        }
    }

    fn dims_line(&self) -> String {
        match self {
            ModelParams::Mf(p) => format!("k={}", p.k()),
            ModelParams::Mfsi(p) => format!("k={}", p.k()),
            ModelParams::Fm(p) => format!("k={}", p.k()),
            ModelParams::Parafac(p) => format!("k={}", p.k()),
            ModelParams::Tucker(p) => {
                let [k1, k2, k3] = p.core.dims();
                format!("k1={k1} k2={k2} k3={k3}")
            }
        }
    }

    fn blocks(&self) -> Vec<(&'static str, Matrix)> {
        match self {
            ModelParams::Mf(p) => vec![("W", p.w.clone()), ("H", p.h.clone())],
            ModelParams::Mfsi(p) => vec![("W", p.w.clone()), ("H", p.h.clone())],
            ModelParams::Fm(p) => vec![
                ("b", column(&[p.b])),
                ("w_linear", column(&p.w_linear)),
                ("h_linear", column(&p.h_linear)),
                ("W", p.w.clone()),
                ("H", p.h.clone()),
            ],
            ModelParams::Parafac(p) => vec![("U", p.u.clone()), ("V", p.v.clone()), ("W", p.w.clone())],
            ModelParams::Tucker(p) => {
                let [k1, k2, k3] = p.core.dims();
                let b = Matrix::from_vec(k1 * k2, k3, p.core.as_slice().to_vec()).expect("core size");
                vec![("B", b), ("U", p.u.clone()), ("V", p.v.clone()), ("W", p.w.clone())]
            }
        }
    }

    fn block_names(family: Family) -> &'static [&'static str] {
        match family {
            Family::Mf | Family::Mfsi => &["W", "H"],
            Family::Fm => &["b", "w_linear", "h_linear", "W", "H"],
            Family::Parafac => &["U", "V", "W"],
            Family::Tucker => &["B", "U", "V", "W"],
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {}\ndims {}\n", self.family(), self.dims_line());
        for (name, m) in self.blocks() {
            writeln!(s, "block {name} {} {}", m.rows(), m.cols()).unwrap();
            for row in m.iter_rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(s, "{}", cells.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty file"))?;
        let family: Family = header
            .strip_prefix(MAGIC)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(format!("bad header '{header}'")))?
            .trim()
            .parse()
            .map_err(|_| err(format!("unknown family in header '{header}'")))?;
        let dims = parse_dims(lines.next().ok_or_else(|| err("missing dims line"))?)?;

        let mut blocks = Vec::new();
        for &expected in Self::block_names(family) {
            let head = lines.next().ok_or_else(|| err(format!("missing block {expected}")))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let (name, rows, cols) = match parts.as_slice() {
                ["block", n, r, c] => (
                    *n,
                    r.parse::<usize>().map_err(|_| err(format!("bad row count in '{head}'")))?,
                    c.parse::<usize>().map_err(|_| err(format!("bad column count in '{head}'")))?,
                ),
                _ => return Err(err(format!("bad block header '{head}'"))),
            };
            if name != expected {
                return Err(err(format!("expected block {expected}, found {name}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = lines.next().ok_or_else(|| err(format!("block {name}: missing row {r}")))?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| err(format!("block {name}: bad value '{tok}'")))?);
                }
                if data.len() - before != cols {
                    return Err(err(format!("block {name}: row {r} has {} values, expected {cols}", data.len() - before)));
                }
            }
            blocks.push(Matrix::from_vec(rows, cols, data)?);
        }
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(err(format!("unexpected trailing content '{extra}'")));
        }
        Self::assemble(family, &dims, blocks)
    }

    fn assemble(family: Family, dims: &[(String, usize)], mut b: Vec<Matrix>) -> Result<Self> {
        let dim = |key: &str| {
            dims.iter()
                .find(|(k, _)| k == key)
                .map(|&(_, v)| v)
                .ok_or_else(|| err(format!("dims line lacks {key}")))
        };
        let width_check = |m: &Matrix, k: usize, name: &str| {
            if m.cols() != k {
                return Err(err(format!("block {name} has {} columns, dims say {k}", m.cols())));
            }
            Ok(())
        };
        let flat = |m: Matrix| m.as_slice().to_vec();
        Ok(match family {
            Family::Mf | Family::Mfsi => {
                let k = dim("k")?;
                let h = b.pop().unwrap();
                let w = b.pop().unwrap();
                width_check(&w, k, "W")?;
                if family == Family::Mf {
                    ModelParams::Mf(MfParams::new(w, h)?)
                } else {
                    ModelParams::Mfsi(MfsiParams::new(w, h)?)
                }
            }
            Family::Fm => {
                let k = dim("k")?;
                let mut it = b.into_iter();
                let (bias, wl, hl, w, h) = (
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                );
                width_check(&w, k, "W")?;
                for (m, name) in [(&bias, "b"), (&wl, "w_linear"), (&hl, "h_linear")] {
                    width_check(m, 1, name)?;
                }
                if bias.rows() != 1 {
                    return Err(err("block b must be 1x1"));
                }
                ModelParams::Fm(FmParams::new(bias[(0, 0)], flat(wl), flat(hl), w, h)?)
            }
            Family::Parafac => {
                let k = dim("k")?;
                let mut it = b.into_iter();
                let (u, v, w) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                width_check(&u, k, "U")?;
                ModelParams::Parafac(ParafacParams::new(u, v, w)?)
            }
            Family::Tucker => {
                let d = [dim("k1")?, dim("k2")?, dim("k3")?];
                let mut it = b.into_iter();
                let (core, u, v, w) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                if core.rows() != d[0] * d[1] || core.cols() != d[2] {
                    return Err(err(format!("block B is {}x{}, dims say {}x{}", core.rows(), core.cols(), d[0] * d[1], d[2])));
                }
                ModelParams::Tucker(TuckerParams::new(CoreTensor::from_vec(d, flat(core))?, u, v, w)?)
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Scores of every item for one query context.
    pub fn score_items(&self, query: &ContextQuery, item_features: Option<&FeatureMatrix>) -> Result<Vec<f64>> {
        let state = self.query_state(query, item_features)?;
        Ok(state.scores(0))
    }

    fn query_state(&self, query: &ContextQuery, z: Option<&FeatureMatrix>) -> Result<SeparableState> {
        let need_z = || z.ok_or_else(|| IcdError::InvalidConfig(format!("{} needs item features", self.family())));
        let mismatch = || IcdError::InvalidConfig(format!("query does not fit a {} model", self.family()));
        match (self, query) {
            (ModelParams::Mf(p), ContextQuery::Index(c)) => {
                let phi = match c {
                    Some(c) if *c < p.w.rows() => Matrix::from_rows(&[p.w.row(*c)]),
                    Some(c) => {
                        return Err(IcdError::IndexOutOfRange {
                            what: "context",
                            index: *c,
                            bound: p.w.rows(),
                        })
                    }
                    None => Matrix::zeros(1, p.k()),
                };
                SeparableState::new(phi, p.h.clone())
            }
            (ModelParams::Mfsi(p), ContextQuery::Features(x)) => mfsi_representation(p, x, need_z()?),
            (ModelParams::Fm(p), ContextQuery::Features(x)) => fm_representation(p, x, need_z()?),
            (ModelParams::Parafac(_) | ModelParams::Tucker(_), ContextQuery::Pair(pair)) => {
                let params: TensorParams = match self {
                    ModelParams::Parafac(p) => p.clone().into(),
                    ModelParams::Tucker(p) => p.clone().into(),
                    _ => unreachable!(),
                };
                match pair {
                    Some((a, b)) => tensor_representation(&params, &[ContextTuple::pair(*a, *b)]),
                    None => SeparableState::new(Matrix::zeros(1, params.dims()[2]), params.w.clone()),
                }
            }
            _ => Err(mismatch()),
        }
    }
}

/// How a query context is presented to a model. `None` marks a context the
/// model has no parameters for; it scores every item 0.
#[derive(Clone, Debug)]
pub enum ContextQuery {
    Index(Option<usize>),
    /// A one-row design matrix.
    Features(FeatureMatrix),
    Pair(Option<(usize, usize)>),
}

fn parse_dims(line: &str) -> Result<Vec<(String, usize)>> {
    let rest = line
        .strip_prefix("dims")
        .ok_or_else(|| err(format!("bad dims line '{line}'")))?;
    rest.split_whitespace()
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("bad dims entry '{kv}'")))?;
            let v = v.parse().map_err(|_| err(format!("bad dims entry '{kv}'")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// Id maps saved next to a model: contexts, items and, for tensor models,
/// one vocabulary per context mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMaps {
    pub contexts: Vocabulary,
    pub items: Vocabulary,
    pub modes: Vec<Vocabulary>,
}

/// `<model path>.ids`
pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

impl IdMaps {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, v: &Vocabulary| {
            writeln!(s, "section {name} {}", v.len()).unwrap();
            for id in v.ids() {
                writeln!(s, "{id}").unwrap();
            }
        };
        section("contexts", &self.contexts);
        section("items", &self.items);
        for (m, v) in self.modes.iter().enumerate() {
            section(&format!("mode{m}"), v);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut out = IdMaps::default();
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = head.split_whitespace().collect();
            let (name, n) = match parts.as_slice() {
                ["section", name, n] => (*name, n.parse::<usize>().map_err(|_| err(format!("bad section '{head}'")))?),
                _ => return Err(err(format!("bad id section '{head}'"))),
            };
            let ids: Vec<&str> = (0..n)
                .map(|_| lines.next().ok_or_else(|| err(format!("section {name} is short"))))
                .collect::<Result<_>>()?;
            let vocab = Vocabulary::from_ids(ids)?;
            match name {
                "contexts" => out.contexts = vocab,
                "items" => out.items = vocab,
                m if m.strip_prefix("mode").and_then(|i| i.parse::<usize>().ok()) == Some(out.modes.len()) => {
                    out.modes.push(vocab)
                }
                other => return Err(err(format!("unexpected id section '{other}'"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SolverConfig;

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn mf_round_trip_is_bitwise() {
        let cfg = SolverConfig { k: 3, sigma: 0.7, seed: 9, ..Default::default() };
        let mut p = MfParams::init(4, 5, &cfg);
        p.w[(0, 0)] = 1.0 / 3.0;
        p.h[(1, 2)] = -2.5e-300;
        let back = ModelParams::from_text(&ModelParams::Mf(p.clone()).to_text()).unwrap();
        let ModelParams::Mf(q) = back else { panic!("family changed") };
        assert_eq!(bits(&p.w), bits(&q.w));
        assert_eq!(bits(&p.h), bits(&q.h));
    }

    #[test]
    fn every_family_round_trips() {
        let cfg = SolverConfig { k: 2, core_dims: [2, 3, 2], sigma: 1.0, seed: 3, ..Default::default() };
        let mut fm = FmParams::init(3, 2, &cfg);
        fm.b = 0.1;
        fm.w_linear[1] = -0.3;
        let models = [
            ModelParams::Mf(MfParams::init(3, 2, &cfg)),
            ModelParams::Mfsi(MfsiParams::init(4, 3, &cfg)),
            ModelParams::Fm(fm),
            ModelParams::Parafac(ParafacParams::init([2, 3], 4, &cfg)),
            ModelParams::Tucker(TuckerParams::init([2, 3], 4, &cfg)),
        ];
        for m in models {
            let text = m.to_text();
            let back = ModelParams::from_text(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn tucker_block_order_is_stable() {
        let cfg = SolverConfig { core_dims: [1, 2, 1], ..Default::default() };
        let text = ModelParams::Tucker(TuckerParams::init([1, 1], 1, &cfg)).to_text();
        let heads: Vec<&str> = text.lines().filter(|l| l.starts_with("block")).collect();
        assert_eq!(heads, ["block B 2 1", "block U 1 1", "block V 1 2", "block W 1 1"]);
        assert!(text.starts_with("icd-model v1 tucker\ndims k1=1 k2=2 k3=1\n"));
    }

    #[test]
    fn tampered_files_are_rejected() {
        let cfg = SolverConfig { k: 1, ..Default::default() };
        let good = ModelParams::Mf(MfParams::init(1, 1, &cfg)).to_text();
        for bad in [
            good.replace("icd-model v1", "icd-model v2"),
            good.replace("v1 mf", "v1 fm"),
            good.replace("block H", "block X"),
            good.replace("dims k=1", "dims k=2"),
            format!("{good}junk\n"),
            good.lines().take(3).collect::<Vec<_>>().join("\n"),
        ] {
            assert!(ModelParams::from_text(&bad).is_err(), "accepted:\n{bad}");
        }
    }

    #[test]
    fn mf_scores_and_unknown_context() {
        let p = MfParams::new(Matrix::from_rows(&[[1.0, 0.0]]), Matrix::from_rows(&[[2.0, 5.0], [3.0, 1.0]])).unwrap();
        let m = ModelParams::Mf(p);
        assert_eq!(m.score_items(&ContextQuery::Index(Some(0)), None).unwrap(), vec![2.0, 3.0]);
        assert_eq!(m.score_items(&ContextQuery::Index(None), None).unwrap(), vec![0.0, 0.0]);
        assert!(m.score_items(&ContextQuery::Pair(Some((0, 0))), None).is_err());
    }

    #[test]
    fn id_maps_round_trip() {
        let ids = IdMaps {
            contexts: Vocabulary::from_ids(["u1,q1", "u2,q1"]).unwrap(),
            items: Vocabulary::from_ids(["a", "b"]).unwrap(),
            modes: vec![Vocabulary::from_ids(["u1", "u2"]).unwrap(), Vocabulary::from_ids(["q1"]).unwrap()],
        };
        assert_eq!(IdMaps::from_text(&ids.to_text()).unwrap(), ids);
        assert_eq!(sidecar_path(Path::new("/tmp/m.txt")), PathBuf::from("/tmp/m.txt.ids"));
    }
}
