//! Command-line entry point: reproducible `gen-data` / `train` /
//! `backtest` / `gradcheck` / `analyze` runs driven by a JSON config.
//!
//! Every command writes `resolved-config.json` (all defaults and derived
//! seeds materialized) next to its outputs; re-running from that file on
//! the same platform reproduces the outputs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    assignments_for_dates, baseline_forward, baseline_params, check_baseline_params,
    write_graph_cache, BaselineConfig,
};
use crate::data::{
    compute_features, generate_synthetic, load_ohlcv_many, normalize, split, FeaturePanel,
    FeatureSet, Splits, SyntheticSpec,
};
use crate::data::write_ohlcv;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_day, lag_histogram, load_assignments, write_assignments, write_concentration_csv,
    write_lag_histogram_csv, AssignmentRecord, BacktestReport,
};
use crate::losses::loss_node;
use crate::model::{forward_cross_section, LeadLagAssignment, ModelConfig, Variant};
use crate::seed::derive_seed;
use crate::tensor::{
    grad_check, load_checkpoint, save_checkpoint, Array, BoundParams, Graph, NodeId, ParamSet,
};
use crate::train::{labeled_batch, train, TrainConfig};

/// Which prediction engine a run trains and evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// The learned attention model (variant chosen in the model config).
    Model,
    /// Frozen correlation-graph selection feeding a trained MLP.
    Baseline,
}

/// Train/validation/test boundaries: explicit label dates when both are
/// set, otherwise fractions of the panel's date count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_end: Option<NaiveDate>,
    pub val_end: Option<NaiveDate>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_end: None,
            val_end: None,
            train_frac: 0.70,
            val_frac: 0.15,
        }
    }
}

impl SplitConfig {
    pub fn resolve(&self, panel: &FeaturePanel) -> Result<Splits> {
        match (self.train_end, self.val_end) {
            (Some(train_end), Some(val_end)) => split(panel, train_end, val_end),
            (None, None) => self.fractional(panel.n_dates()),
            _ => Err(Error::Config(
                "train_end and val_end must be set together".into(),
            )),
        }
    }

    fn fractional(&self, n_dates: usize) -> Result<Splits> {
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0)
        {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum below 1, got train {} val {}",
                self.train_frac, self.val_frac
            )));
        }
        let b1 = (n_dates as f64 * self.train_frac).round() as usize;
        let b2 = b1 + (n_dates as f64 * self.val_frac).round() as usize;
        if b1 == 0 || b1 >= b2 || b2 >= n_dates {
            return Err(Error::Config(format!(
                "degenerate split over {n_dates} dates: train 0..{b1}, val {b1}..{b2}"
            )));
        }
        Ok(Splits {
            train: 0..b1,
            val: b1..b2,
            test: b2..n_dates,
        })
    }
}

/// Evaluation options for the long-short backtest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of the cross-section held long and short each day.
    pub decile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { decile: 0.1 }
    }
}

/// One run's full configuration. Exactly one of `data` (OHLCV CSV paths)
/// or `synthetic` must be present.
///
/// All randomness flows from `seed`: the synthetic generator, parameter
/// initialization, and epoch shuffling use the named sub-seeds `data`,
/// `init`, and `shuffle` derived from it. Seed fields nested inside
/// `synthetic` or `train` are overwritten with the derived values, so the
/// resolved file both shows them and stays reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Vec<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub features: FeatureSet,
    pub splits: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub engine: Engine,
    pub baseline: BaselineConfig,
    /// Baseline graphs never use data on or after this date.
    pub freeze_from: Option<NaiveDate>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: Vec::new(),
            synthetic: None,
            features: FeatureSet::Full,
            splits: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            engine: Engine::Model,
            baseline: BaselineConfig::default(),
            freeze_from: None,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load a config file and materialize every derived field.
    pub fn load(path: &Path, seed: Option<u64>, variant: Option<Variant>) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.resolve(seed, variant)?;
        Ok(config)
    }

    /// Apply CLI overrides, check cross-field invariants, and derive the
    /// sub-seeds. Idempotent: resolving a resolved config changes nothing.
    pub fn resolve(&mut self, seed: Option<u64>, variant: Option<Variant>) -> Result<()> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(variant) = variant {
            self.model.variant = variant;
        }
        if self.data.is_empty() == self.synthetic.is_none() {
            return Err(Error::Config(
                "config needs exactly one of `data` or `synthetic`".into(),
            ));
        }
        if !(self.eval.decile > 0.0 && self.eval.decile <= 0.5) {
            return Err(Error::Config(format!(
                "eval.decile must lie in (0, 0.5], got {}",
                self.eval.decile
            )));
        }
        if let Some(spec) = &mut self.synthetic {
            spec.seed = derive_seed(self.seed, "data");
            spec.validate()?;
        }
        self.train.seed = derive_seed(self.seed, "shuffle");
        self.model.n_features = self.features.width();
        self.train.validate()?;
        self.baseline.validate()?;
        Ok(())
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// Feature panel (normalized) from whichever source the config names.
    fn build_panel(&self) -> Result<FeaturePanel> {
        let bars = match &self.synthetic {
            Some(spec) => generate_synthetic(spec)?.0,
            None => load_ohlcv_many(&self.data)?,
        };
        let raw = compute_features(&bars, self.features)?;
        Ok(normalize(raw, None).0)
    }
}

fn write_resolved(config: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("resolved-config.json");
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Data(format!("serialize resolved config: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

/// First panel index whose date is on or after `from`; caps baseline
/// graph as-of dates. `None` leaves detection unfrozen.
fn freeze_index(panel: &FeaturePanel, from: Option<NaiveDate>) -> Option<usize> {
    from.map(|d| {
        panel
            .dates()
            .iter()
            .position(|&x| x >= d)
            .unwrap_or(panel.n_dates())
    })
}

/// Flatten per-date selections into dump rows; rank 1 is the heaviest pick.
fn assignment_records(
    panel: &FeaturePanel,
    assignments: &[LeadLagAssignment],
) -> Vec<AssignmentRecord> {
    let mut out = Vec::new();
    for a in assignments {
        for (i, p) in a.picks.iter().enumerate() {
            out.push(AssignmentRecord {
                date: panel.date(a.date_index),
                target: panel.ticker(a.target).to_string(),
                rank: i + 1,
                leader: panel.ticker(p.leader).to_string(),
                lag: p.lag,
                score: p.score,
                weight: p.weight,
            });
        }
    }
    out
}

#[derive(Parser)]
#[command(
    name = "deltalag",
    version,
    about = "Adaptive lead-lag detection and cross-sectional return ranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-structure synthetic market (OHLCV + ground truth).
    GenData(RunArgs),
    /// Train the configured engine; writes checkpoint.bin and history.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split; writes the report files.
    Backtest(BacktestArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Lag histogram and leader concentration from an assignment dump.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Trained parameters from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run configuration (JSON); must describe a tiny universe.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one analytic adjoint to prove the check can fail.
    #[arg(long, hide = true)]
    fault_inject: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Assignment dump CSV produced by `backtest`.
    assignments: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> Result<u8> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let config = RunConfig::load(&args.config, args.seed, args.variant)?;
            cmd_gen_data(&config, &args.out)?;
            Ok(0)
        }
        Command::Train(args) => {
            let config = RunConfig::load(&args.config, args.seed, args.variant)?;
            cmd_train(&config, &args.out)?;
            Ok(0)
        }
        Command::Backtest(args) => {
            let config = RunConfig::load(&args.run.config, args.run.seed, args.run.variant)?;
            cmd_backtest(&config, &args.checkpoint, &args.run.out)?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let config = RunConfig::load(&args.config, args.seed, args.variant)?;
            cmd_gradcheck(&config, args.fault_inject)
        }
        Command::Analyze(args) => {
            cmd_analyze(&args.assignments, &args.out)?;
            Ok(0)
        }
    }
}

fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let spec = config.synthetic.as_ref().ok_or_else(|| {
        Error::Config("gen-data needs a `synthetic` block in the config".into())
    })?;
    let (bars, truth) = generate_synthetic(spec)?;
    ensure_dir(out)?;
    write_ohlcv(&out.join("ohlcv.csv"), &bars)?;
    truth.write_csv(&out.join("ground_truth.csv"))?;
    write_resolved(config, out)?;
    println!(
        "generated {} tickers x {} days ({} planted pairs) in {}",
        bars.len(),
        spec.n_days,
        truth.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    let panel = config.build_panel()?;
    let splits = config.splits.resolve(&panel)?;
    ensure_dir(out)?;
    let started = Instant::now();
    let outcome = match config.engine {
        Engine::Model => {
            let params = config.model.init_params(config.init_seed());
            train(params, &config.train, &panel, &splits, |graph, bound, t| {
                forward_cross_section(graph, bound, &config.model, &panel, t)
            })?
        }
        Engine::Baseline => {
            let params =
                baseline_params(panel.n_features(), &config.model.mlp_hidden, config.init_seed());
            let range = splits.train.start..splits.val.end;
            let freeze = freeze_index(&panel, config.freeze_from);
            let assignments = assignments_for_dates(&panel, &config.baseline, range, freeze)?;
            train(params, &config.train, &panel, &splits, |graph, bound, t| {
                let todays = assignments.by_date.get(&t).ok_or_else(|| {
                    Error::Contract(format!("no baseline assignments for date index {t}"))
                })?;
                baseline_forward(
                    graph,
                    bound,
                    &config.model.mlp_hidden,
                    config.baseline.k,
                    &panel,
                    t,
                    todays,
                )
            })?
        }
    };
    save_checkpoint(&outcome.params, &out.join("checkpoint.bin"))?;
    outcome.history.write_csv(&out.join("history.csv"))?;
    write_resolved(config, out)?;
    let best = &outcome.history.records[outcome.history.best_epoch - 1];
    println!(
        "trained {} epochs in {:.1}s; best epoch {} (val IC {:.4}) -> {}",
        outcome.history.records.len(),
        started.elapsed().as_secs_f64(),
        best.epoch,
        best.val_ic,
        out.display()
    );
    Ok(())
}

fn cmd_backtest(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let panel = config.build_panel()?;
    let splits = config.splits.resolve(&panel)?;
    let params = load_checkpoint(checkpoint)?;
    ensure_dir(out)?;

    let incompatible = |e: Error| {
        Error::Config(format!(
            "checkpoint {} does not match the configured engine: {e}",
            checkpoint.display()
        ))
    };
    let baseline_assignments;
    type Forward<'a> = Box<dyn Fn(&mut Graph, &BoundParams, usize) -> Result<crate::model::CrossSectionOutput> + 'a>;
    let forward: Forward = match config.engine {
        Engine::Model => {
            config.model.check_params(&params).map_err(incompatible)?;
            Box::new(|graph, bound, t| {
                forward_cross_section(graph, bound, &config.model, &panel, t)
            })
        }
        Engine::Baseline => {
            check_baseline_params(panel.n_features(), &config.model.mlp_hidden, &params)
                .map_err(incompatible)?;
            let freeze = freeze_index(&panel, config.freeze_from);
            baseline_assignments =
                assignments_for_dates(&panel, &config.baseline, splits.test.clone(), freeze)?;
            write_graph_cache(&out.join("graphs.csv"), &baseline_assignments.graphs, &panel)?;
            let assignments = &baseline_assignments;
            let panel = &panel;
            Box::new(move |graph, bound, t| {
                let todays = assignments.by_date.get(&t).ok_or_else(|| {
                    Error::Contract(format!("no baseline assignments for date index {t}"))
                })?;
                baseline_forward(
                    graph,
                    bound,
                    &config.model.mlp_hidden,
                    config.baseline.k,
                    panel,
                    t,
                    todays,
                )
            })
        }
    };

    let mut daily = Vec::new();
    let mut records: Vec<AssignmentRecord> = Vec::new();
    let mut skipped = 0usize;
    for t in splits.test.clone() {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let output = forward(&mut graph, &bound, t)?;
        records.extend(assignment_records(&panel, &output.assignments));
        let batch = labeled_batch(&panel, t, &output);
        if batch.targets.len() < 2 {
            skipped += 1;
            continue;
        }
        let tickers: Vec<String> = batch
            .targets
            .iter()
            .map(|&u| panel.ticker(u).to_string())
            .collect();
        match evaluate_day(
            panel.date(t),
            &tickers,
            &batch.predictions,
            &batch.actuals,
            config.eval.decile,
        )? {
            Some(day) => daily.push(day),
            None => skipped += 1,
        }
    }

    let report = BacktestReport::from_parts(daily, &records, skipped)?;
    report.write_summary_json(&out.join("summary.json"))?;
    report.write_daily_csv(&out.join("daily.csv"))?;
    write_assignments(&out.join("assignments.csv"), &records)?;
    write_lag_histogram_csv(&out.join("lags.csv"), &report.lag_histogram)?;
    write_concentration_csv(&out.join("concentration.csv"), &records)?;
    write_resolved(config, out)?;
    let sr = report
        .sr
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "backtest over {} dates ({} skipped): IC {:.4}, AR {:.4}, SR {sr} -> {}",
        report.daily.len(),
        report.skipped_dates,
        report.ic_mean,
        report.ar,
        out.display()
    );
    Ok(())
}

/// Tolerance for `gradcheck` and the step used for central differences.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-5;

fn cmd_gradcheck(config: &RunConfig, fault_inject: bool) -> Result<u8> {
    let panel = config.build_panel()?;
    if panel.n_stocks() > 10 || config.model.window > 12 {
        return Err(Error::Config(format!(
            "gradcheck only runs on tiny configs (at most 10 stocks, window at most 12); \
             got {} stocks, window {}",
            panel.n_stocks(),
            config.model.window
        )));
    }
    let params = config.model.init_params(config.init_seed());
    let kind = config.train.loss;
    let t = pick_gradcheck_date(&panel, config, &params)?;
    let build = |graph: &mut Graph, bound: &BoundParams| -> Result<NodeId> {
        let output = forward_cross_section(graph, bound, &config.model, &panel, t)?;
        let batch = labeled_batch(&panel, t, &output);
        if batch.targets.len() < 2 {
            return Err(Error::Data(format!(
                "date index {t} has fewer than two labeled targets"
            )));
        }
        let preds = graph.concat_rows(&batch.nodes)?;
        loss_node(graph, kind, preds, &batch.actuals)
    };

    let started = Instant::now();
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = build(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let mut analytic = BTreeMap::new();
    for (name, value) in params.iter() {
        let g = match grads.get(bound.node(name)?) {
            Some(g) => g.clone(),
            None => Array::zeros(value.rows(), value.cols()),
        };
        analytic.insert(name.to_string(), g);
    }
    if fault_inject {
        if let Some(g) = analytic.values_mut().next() {
            g.data_mut()[0] += 1.0;
        }
    }
    let report = grad_check(
        |p| {
            let mut graph = Graph::new();
            let bound = p.bind(&mut graph);
            let loss = build(&mut graph, &bound)?;
            Ok(graph.value(loss).as_scalar())
        },
        &params,
        &analytic,
        GRADCHECK_EPS,
    )?;
    match &report.worst {
        Some((name, i)) => println!(
            "max relative error {:.3e} at {name}[{i}] over {} elements ({:.1}s, {} loss, date index {t})",
            report.max_rel_error,
            report.elements_checked,
            started.elapsed().as_secs_f64(),
            kind
        ),
        None => println!("no parameter elements checked"),
    }
    if report.passes(GRADCHECK_TOLERANCE) {
        println!("gradcheck: PASS (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(0)
    } else {
        println!("gradcheck: FAIL (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(1)
    }
}

/// Earliest date whose forward pass yields at least two labeled targets.
fn pick_gradcheck_date(
    panel: &FeaturePanel,
    config: &RunConfig,
    params: &ParamSet,
) -> Result<usize> {
    let start = config.model.window.saturating_sub(1);
    for t in start..panel.n_dates().saturating_sub(1) {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let Ok(output) = forward_cross_section(&mut graph, &bound, &config.model, panel, t) else {
            continue;
        };
        if labeled_batch(panel, t, &output).targets.len() >= 2 {
            return Ok(t);
        }
    }
    Err(Error::Data(
        "no date offers two labeled targets for the gradient check".into(),
    ))
}

fn cmd_analyze(input: &Path, out: &Path) -> Result<()> {
    let records = load_assignments(input)?;
    ensure_dir(out)?;
    let histogram = if records.is_empty() {
        BTreeMap::new()
    } else {
        lag_histogram(&records)?
    };
    write_lag_histogram_csv(&out.join("lags.csv"), &histogram)?;
    write_concentration_csv(&out.join("concentration.csv"), &records)?;
    let dates: std::collections::BTreeSet<NaiveDate> = records.iter().map(|r| r.date).collect();
    println!(
        "analyzed {} assignment rows over {} dates -> {}",
        records.len(),
        dates.len(),
        out.display()
    );
    Ok(())
}
