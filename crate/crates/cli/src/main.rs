//! `icd train | eval | bench`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use icd::bench::{run_mf_bench, Arm, BenchOptions};
use icd::data::{
    assemble_dataset_with, assemble_tensor_dataset_with, FeatureMatrix, RawInteraction, Vocabulary,
};
use icd::eval::{
    build_queries, evaluate_run, popularity_scores, split_dataset, CoviewCounts, MetricReport, Query, Split, SplitSpec,
};
use icd::feature::{FeatureData, FmParams, FmSolver, MfsiParams, MfsiSolver};
use icd::io::{read_features, read_interactions, FeatureTable};
use icd::mf::{MfParams, MfSolver};
use icd::model_file::{sidecar_path, ContextQuery, IdMaps, ModelParams};
use icd::tensor::{ParafacParams, TensorSolver, TuckerParams};
use icd::train::{fit_with, EpochLog, ImplicitSolver, TrainReport};
use icd::{Family, Lambdas, SolverConfig};

#[derive(Parser)]
#[command(name = "icd", version, about = "Implicit coordinate descent for factorization models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with its id maps.
    Train(TrainArgs),
    /// Score a split against popularity and coview baselines.
    Eval(EvalArgs),
    /// Per-epoch cost of iCD against naive CD on synthetic MF data.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SolverArgs {
    /// Embedding dimension (MF, MFSI, FM, PARAFAC); default for --k1..--k3.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    k3: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha0: f64,
    /// Confidence of lines without an alpha column.
    #[arg(long, default_value_t = 2.0)]
    default_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// L2 constant for every parameter group.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, alias = "epochs", default_value_t = 10)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tensor models: treat every mode pair as a context.
    #[arg(long)]
    dense_context: bool,
    /// Worker threads for Gram reductions; above 1 results are not
    /// bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            k: self.k,
            core_dims: [self.k1, self.k2, self.k3].map(|d| d.unwrap_or(self.k)),
            alpha0: self.alpha0,
            eta: self.eta,
            lambda: Lambdas::uniform(self.lambda),
            sigma: self.sigma,
            seed: self.seed,
            max_epochs: self.max_epochs,
            tol: self.tol,
            dense_context: self.dense_context,
            parallel: self.threads > 1,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKind {
    LeaveLastOut,
    CutoffTime,
    ColdStart,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_enum)]
    split: Option<SplitKind>,
    /// Events at or before this timestamp train (cutoff-time).
    #[arg(long)]
    cutoff: Option<f64>,
    /// Share of users held out (cold-start).
    #[arg(long, default_value_t = 0.1)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    fn spec(&self) -> Result<Option<SplitSpec>> {
        Ok(match self.split {
            None => None,
            Some(SplitKind::LeaveLastOut) => Some(SplitSpec::LeaveLastOut),
            Some(SplitKind::CutoffTime) => Some(SplitSpec::CutoffTime(
                self.cutoff.context("--split cutoff-time needs --cutoff")?,
            )),
            Some(SplitKind::ColdStart) => Some(SplitSpec::ColdStartUsers {
                fraction: self.holdout_fraction,
                seed: self.split_seed,
            }),
        })
    }
}

#[derive(Args)]
struct FeatureArgs {
    /// `entity<TAB>idx:val ...` rows keyed by context id.
    #[arg(long)]
    context_features: Option<PathBuf>,
    #[arg(long)]
    item_features: Option<PathBuf>,
}

impl FeatureArgs {
    fn load(&self) -> Result<Option<(FeatureTable, FeatureTable)>> {
        let read = |p: &Path| read_features(p, None).with_context(|| format!("reading {}", p.display()));
        match (&self.context_features, &self.item_features) {
            (Some(x), Some(z)) => Ok(Some((read(x)?, read(z)?))),
            (None, None) => Ok(None),
            _ => bail!("--context-features and --item-features go together"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    model: Family,
    /// `context<TAB>item<TAB>y[<TAB>alpha[<TAB>timestamp]]`
    #[arg(long)]
    interactions: PathBuf,
    /// Model file; id maps go to `<out>.ids`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Train on the training side of this split only.
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    interactions: PathBuf,
    /// Trained model; omit to report the baselines only.
    #[arg(long)]
    model_in: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Key-value report path; printed to stdout as well.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "250,500,1000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum timing budget per arm and size, in milliseconds.
    #[arg(long, default_value_t = 200)]
    min_ms: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: icd::IcdError| e.to_string())
}

fn set_threads(n: usize) -> Result<()> {
    ensure!(n >= 1, "--threads must be at least 1");
    if n > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn vocabularies(events: &[RawInteraction]) -> (Vocabulary, Vocabulary) {
    let (mut c, mut i) = (Vocabulary::new(), Vocabulary::new());
    for e in events {
        c.intern(&e.context);
        i.intern(&e.item);
    }
    (c, i)
}

fn log_epoch(e: &EpochLog) {
    eprintln!(
        "epoch {:>3}  objective {:.10e}  seconds {:.3}  updates {}  skipped {}",
        e.epoch, e.objective, e.seconds, e.updates, e.skipped
    );
}

fn fit_logged(solver: &mut dyn ImplicitSolver) -> Result<TrainReport> {
    eprintln!("epoch   0  objective {:.10e}", solver.objective()?);
    Ok(fit_with(solver, log_epoch)?)
}

/// Trains `family` on `train`; ids come from the whole log so that test
/// events map onto the same indices.
fn train_model(
    family: Family,
    train: &[RawInteraction],
    all: &[RawInteraction],
    features: Option<&(FeatureTable, FeatureTable)>,
    cfg: &SolverConfig,
    default_alpha: f64,
) -> Result<(ModelParams, IdMaps, TrainReport)> {
    ensure!(
        family.needs_features() == features.is_some(),
        "{family} {} feature files",
        if family.needs_features() { "requires" } else { "does not take" }
    );
    if family.is_tensor() {
        let a = assemble_tensor_dataset_with(train, all, cfg.alpha0, default_alpha)?;
        ensure!(
            a.modes.len() == 2,
            "{family} needs contexts of the form `a,b`; found arity {}",
            a.modes.len()
        );
        let sizes = [a.modes[0].len(), a.modes[1].len()];
        let n_items = a.items.len();
        let ids = IdMaps { contexts: a.contexts, items: a.items, modes: a.modes };
        let (params, report) = if family == Family::Parafac {
            let mut s = TensorSolver::new(&a.dataset, cfg.clone(), ParafacParams::init(sizes, n_items, cfg))?;
            let r = fit_logged(&mut s)?;
            (ModelParams::Parafac(s.into_params().into_parafac().expect("diagonal core")), r)
        } else {
            let mut s = TensorSolver::new(&a.dataset, cfg.clone(), TuckerParams::init(sizes, n_items, cfg))?;
            let r = fit_logged(&mut s)?;
            (ModelParams::Tucker(s.into_params().into_tucker().expect("full core")), r)
        };
        return Ok((params, ids, report));
    }

    let (contexts, items) = vocabularies(all);
    let a = assemble_dataset_with(train, contexts, items, cfg.alpha0, default_alpha)?;
    let (params, report) = match (family, features) {
        (Family::Mf, None) => {
            let p = MfParams::init(a.contexts.len(), a.items.len(), cfg);
            let mut s = MfSolver::new(&a.dataset, cfg.clone(), p)?;
            let r = fit_logged(&mut s)?;
            (ModelParams::Mf(s.into_params()), r)
        }
        (Family::Mfsi | Family::Fm, Some((x, z))) => {
            let feats = FeatureData::new(
                x.matrix_for(&a.contexts).context("context features")?,
                z.matrix_for(&a.items).context("item features")?,
            );
            let (px, pz) = (feats.x.num_features(), feats.z.num_features());
            if family == Family::Mfsi {
                let mut s = MfsiSolver::new(&a.dataset, feats, cfg.clone(), MfsiParams::init(px, pz, cfg))?;
                let r = fit_logged(&mut s)?;
                (ModelParams::Mfsi(s.into_params()), r)
            } else {
                let mut s = FmSolver::new(&a.dataset, feats, cfg.clone(), FmParams::init(px, pz, cfg))?;
                let r = fit_logged(&mut s)?;
                (ModelParams::Fm(s.into_params()), r)
            }
        }
        _ => unreachable!("feature presence checked above"),
    };
    let ids = IdMaps { contexts: a.contexts, items: a.items, modes: Vec::new() };
    Ok((params, ids, report))
}

fn read_log(path: &Path) -> Result<Vec<RawInteraction>> {
    read_interactions(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    set_threads(args.solver.threads)?;
    let cfg = args.solver.config();
    cfg.validate()?;
    let features = args.features.load()?;
    let all = read_log(&args.interactions)?;
    let train = match args.split.spec()? {
        Some(spec) => split_dataset(&all, &spec)?.train,
        None => all.clone(),
    };
    let (params, ids, report) =
        train_model(args.model, &train, &all, features.as_ref(), &cfg, args.solver.default_alpha)?;
    params.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let ids_path = sidecar_path(&args.out);
    ids.save(&ids_path).with_context(|| format!("writing {}", ids_path.display()))?;
    println!(
        "trained {} on {} events: {} epochs, objective {:.10e} -> {:.10e}, {}, {} skipped updates",
        args.model,
        train.len(),
        report.epochs.len(),
        report.initial_objective,
        report.final_objective(),
        if report.converged { "converged" } else { "epoch limit reached" },
        report.total_skipped(),
    );
    Ok(())
}

/// How a trained model sees one query context.
struct Scorer {
    params: ModelParams,
    ids: IdMaps,
    context_features: Option<FeatureTable>,
    item_matrix: Option<FeatureMatrix>,
}

impl Scorer {
    fn load(path: &Path, features: Option<(FeatureTable, FeatureTable)>) -> Result<Self> {
        let params = ModelParams::load(path).with_context(|| format!("reading {}", path.display()))?;
        let ids_path = sidecar_path(path);
        let ids = IdMaps::load(&ids_path).with_context(|| format!("reading {}", ids_path.display()))?;
        let family = params.family();
        ensure!(
            family.needs_features() == features.is_some(),
            "{family} {} feature files",
            if family.needs_features() { "requires" } else { "does not take" }
        );
        let (context_features, item_matrix) = match features {
            Some((x, z)) => (Some(x), Some(z.matrix_for(&ids.items).context("item features")?)),
            None => (None, None),
        };
        Ok(Scorer { params, ids, context_features, item_matrix })
    }

    fn query(&self, context: &str) -> icd::Result<ContextQuery> {
        Ok(match self.params.family() {
            Family::Mf => ContextQuery::Index(self.ids.contexts.get(context)),
            Family::Mfsi | Family::Fm => {
                let table = self.context_features.as_ref().expect("checked on load");
                let row = table.get(context).map(<[_]>::to_vec).unwrap_or_default();
                ContextQuery::Features(icd::data::assemble_feature_matrix(vec![row], table.num_features)?)
            }
            Family::Parafac | Family::Tucker => {
                let parts: Vec<&str> = context.split(',').collect();
                let pair = match (parts.as_slice(), self.ids.modes.as_slice()) {
                    ([a, b], [m0, m1]) => m0.get(a).zip(m1.get(b)),
                    _ => {
                        return Err(icd::IcdError::InvalidData(format!(
                            "context '{context}' is not of the form `a,b`"
                        )))
                    }
                };
                ContextQuery::Pair(pair)
            }
        })
    }

    fn scores(&self, q: &Query) -> icd::Result<Vec<f64>> {
        self.params.score_items(&self.query(&q.context)?, self.item_matrix.as_ref())
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    ensure!(args.k >= 1, "--k must be at least 1");
    let spec = args.split.spec()?.context("eval needs --split")?;
    let all = read_log(&args.interactions)?;
    let split: Split = split_dataset(&all, &spec)?;
    let scorer = match &args.model_in {
        Some(p) => Some(Scorer::load(p, args.features.load()?)?),
        None => None,
    };
    let items = match &scorer {
        Some(s) => s.ids.items.clone(),
        None => vocabularies(&all).1,
    };
    let queries = build_queries(&split, &items)?;
    let pop = popularity_scores(&split.train, &items);
    let coview = CoviewCounts::new(&split.train, &items)?;

    let popularity = evaluate_run("popularity", &queries, args.k, |_| Ok(pop.clone()))?;
    let mut runs = vec![evaluate_run("coview", &queries, args.k, |q| Ok(coview.scores(q.previous, &pop)))?];
    if let Some(s) = &scorer {
        let name = s.params.family().to_string();
        runs.push(evaluate_run(&name, &queries, args.k, |q| s.scores(q))?);
    }
    let report = MetricReport { k: args.k, split: spec.name().to_string(), popularity, runs };
    let kv = report.to_key_value();
    print!("{kv}");
    if let Some(p) = &args.report {
        fs::write(p, &kv).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    set_threads(args.threads)?;
    ensure!(!args.sizes.is_empty() && args.sizes.iter().all(|&n| n >= 1), "--sizes must list positive sizes");
    let opts = BenchOptions {
        sizes: args.sizes.clone(),
        k: args.k,
        seed: args.seed,
        min_total: Duration::from_millis(args.min_ms),
        parallel: args.threads > 1,
        ..Default::default()
    };
    let report = run_mf_bench(&opts)?;
    for n in &report.skipped_naive {
        eprintln!("notice: naive arm skipped at n={n}: {n}x{n} cells exceed the oracle cap");
    }
    print!("{}", report.to_table());
    let exp = |arm, f: fn(&icd::bench::BenchReport, Arm) -> Option<f64>| {
        f(&report, arm).map_or_else(|| "n/a".to_string(), |e| format!("{e:.3}"))
    };
    println!(
        "time exponent: icd {} naive {}; flop exponent: icd {} naive {}",
        exp(Arm::Icd, icd::bench::BenchReport::time_exponent),
        exp(Arm::Naive, icd::bench::BenchReport::time_exponent),
        exp(Arm::Icd, icd::bench::BenchReport::flop_exponent),
        exp(Arm::Naive, icd::bench::BenchReport::flop_exponent),
    );
    for &n in &args.sizes {
        if let Some(s) = report.speedup(n) {
            println!("speedup at n={n}: {s:.1}x");
        }
    }
    if let Some(p) = &args.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn tucker_dims_default_to_k() {
        let cli = Cli::parse_from(["icd", "train", "--model", "tucker", "--interactions", "x", "--out", "y", "--k", "3", "--k2", "5"]);
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.solver.config().core_dims, [3, 5, 3]);
        assert_eq!(a.model, Family::Tucker);
    }

    #[test]
    fn eval_k_defaults_to_100() {
        let cli = Cli::parse_from(["icd", "eval", "--interactions", "x", "--split", "leave-last-out"]);
        let Command::Eval(a) = cli.command else { panic!() };
        assert_eq!(a.k, 100);
    }

    #[test]
    fn split_flags() {
        let s = SplitArgs { split: Some(SplitKind::CutoffTime), cutoff: None, holdout_fraction: 0.1, split_seed: 0 };
        assert!(s.spec().is_err());
        let s = SplitArgs { split: Some(SplitKind::ColdStart), cutoff: None, holdout_fraction: 0.25, split_seed: 3 };
        assert_eq!(s.spec().unwrap(), Some(SplitSpec::ColdStartUsers { fraction: 0.25, seed: 3 }));
    }
}
