use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use parity_lab::fourier::{brute_force_fourier, half_coeff_exact, half_table, majority_coeff_exact, majority_table_any_n, TieRule, MAX_TABLE_DIM};
use parity_lab::harness::{frontier_stats, lottery_experiment, run_sweep_with, worker_count, CellKey, LotteryConfig, RunRecord, SampleSize, SweepGrid};
use parity_lab::io::{emit_results, parse_config, write_json, write_records_csv, OutputFormat, RunManifest};
use parity_lab::mlp::{InitScheme, LayerRates, LossKind};
use parity_lab::popgrad::{brute_force_neuron_grad, gap_constants, good_neuron_probability, population_grad, undersparse_gap_ratio, SparseNeuron};
use parity_lab::sq::{budget_check, find_hard_parity, hidden_fraction_bound, star_trajectory, SqBudget, StarConfig};
use parity_lab::theory::{run_oversparse, run_undersparse, OversparseRun, UndersparseRun};
use parity_lab::train::{self as trainer, DataSource, TrainConfig};
use parity_lab::{data::generate_dataset, mlp::init_params, ParityInstance};
use serde::Serialize;
use serde_json::json;

use crate::{Common, Format};

fn out_path(c: &Common, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    Ok(c.out_dir.join(name))
}

fn emit_json<T: Serialize>(c: &Common, name: &str, subcommand: &str, config: &impl Serialize, result: &T) -> Result<PathBuf> {
    let path = out_path(c, name)?;
    let mut manifest = RunManifest::new(subcommand, c.seed, config)?;
    manifest.outputs = vec![path.clone()];
    write_json(&path, &manifest, result)?;
    println!("wrote {}", path.display());
    Ok(path)
}

/// Writes a CSV table preceded by the manifest line.
fn emit_table(c: &Common, name: &str, subcommand: &str, config: &impl Serialize, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
    let path = out_path(c, name)?;
    let mut manifest = RunManifest::new(subcommand, c.seed, config)?;
    manifest.outputs = vec![path.clone()];
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "# manifest: {}", serde_json::to_string(&manifest)?)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn json_only(c: &Common, what: &str) -> Result<()> {
    if c.format == Some(Format::Csv) {
        bail!("{what} writes a JSON report only; drop --format csv");
    }
    Ok(())
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoolFn {
    Maj,
    Half,
}

#[derive(Args, Debug, Serialize)]
pub struct FourierArgs {
    #[arg(long, value_enum, default_value = "maj")]
    function: BoolFn,
    #[arg(long)]
    n: usize,
    /// A single order; all valid orders when omitted.
    #[arg(long)]
    order: Option<usize>,
}

pub fn fourier(c: &Common, a: FourierArgs) -> Result<()> {
    let n = a.n;
    match a.function {
        BoolFn::Maj if n.is_multiple_of(2) => bail!("Majority needs odd n, got {n}"),
        BoolFn::Half if n % 2 == 1 || n == 0 => bail!("Half needs even positive n, got {n}"),
        _ => {}
    }
    let table = (n <= MAX_TABLE_DIM)
        .then(|| match a.function {
            BoolFn::Maj => majority_table_any_n(n),
            BoolFn::Half => half_table(n),
        })
        .transpose()?;
    let orders: Vec<usize> = match a.order {
        Some(d) if d > n => bail!("order {d} exceeds n = {n}"),
        Some(d) => vec![d],
        None => (0..=n).collect(),
    };
    let mut rows = Vec::new();
    for d in orders {
        let exact = match a.function {
            BoolFn::Maj => majority_coeff_exact(n, d, TieRule::Negative),
            BoolFn::Half => half_coeff_exact(n, d),
        };
        let value = parity_lab::fourier::FourierCoefficient::from_rational(exact.clone()).approx;
        let brute = table.as_ref().map(|t| brute_force_fourier(t, &(0..d).collect::<Vec<_>>())).transpose()?;
        rows.push(json!({"order": d, "exact": exact.to_string(), "value": value, "brute_force": brute}));
    }
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, "fourier.json", "fourier", &a, &rows)?,
        Format::Csv => {
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r["order"].to_string(),
                        r["exact"].as_str().unwrap_or_default().to_string(),
                        float(r["value"].as_f64().unwrap_or(f64::NAN)),
                        r["brute_force"].as_f64().map(float).unwrap_or_default(),
                    ]
                })
                .collect();
            emit_table(c, "fourier.csv", "fourier", &a, &["order", "exact", "value", "brute_force"], &table)?
        }
    };
    for r in &rows {
        println!("d={} {}", r["order"], r["exact"].as_str().unwrap_or_default());
    }
    Ok(())
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Over,
    Under,
}

#[derive(Args, Debug, Serialize)]
pub struct PopgradArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "over")]
    variant: Variant,
    /// Active coordinates, comma separated; defaults to `0..s`.
    #[arg(long, value_delimiter = ',')]
    active: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    s: usize,
    /// Background weight of under-sparse neurons; defaults to `1/(2n)`.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = -0.1, allow_hyphen_values = true)]
    bias: f64,
}

pub fn popgrad(c: &Common, a: PopgradArgs) -> Result<()> {
    let inst = ParityInstance::leading(a.n, a.k)?;
    let active: Vec<usize> = if a.active.is_empty() { (0..a.s).collect() } else { a.active.clone() };
    let s = active.len();
    let neuron = match a.variant {
        Variant::Over => SparseNeuron::over_sparse(a.n, active.clone(), a.bias)?,
        Variant::Under => SparseNeuron::under_sparse(a.n, active.clone(), a.eps.unwrap_or(1.0 / (2.0 * a.n as f64)), a.bias)?,
    };
    let analytic = population_grad(&neuron, &inst)?;
    let brute = (a.n <= MAX_TABLE_DIM).then(|| brute_force_neuron_grad(&neuron, &inst)).transpose()?;
    let constants = (a.variant == Variant::Over).then(|| gap_constants(a.k, s).ok()).flatten();
    let ratio = (a.variant == Variant::Under).then(|| undersparse_gap_ratio(a.n, a.k, s).ok()).flatten();
    let prob = good_neuron_probability(a.n, a.k, s)?;
    let report = json!({
        "n": a.n, "k": a.k, "s": s, "active": active,
        "analytic": analytic,
        "brute_force": brute,
        "gap_constants": constants.as_ref().map(|g| json!({
            "c_relevant": g.c_relevant, "c_irrelevant": g.c_irrelevant,
            "c_relevant_exact": g.c_relevant_exact.to_string(), "c_irrelevant_exact": g.c_irrelevant_exact.to_string(),
            "kappa_lower": g.kappa_lower, "ratio_bound": g.ratio_bound,
            "ratio_within_bound": g.ratio_within_bound(a.k, s),
        })),
        "gap_ratio": ratio,
        "good_neuron_probability": {"exact": prob.exact.to_string(), "value": prob.exact_f64(), "lower_bound": prob.lower_bound},
    });
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, "popgrad.json", "popgrad", &a, &report)?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = analytic
                .iter()
                .enumerate()
                .map(|(i, &g)| vec![i.to_string(), float(g), brute.as_ref().map(|b| float(b[i])).unwrap_or_default()])
                .collect();
            emit_table(c, "popgrad.csv", "popgrad", &a, &["coordinate", "analytic", "brute_force"], &rows)?
        }
    };
    Ok(())
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Dense,
    Sparse,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    r: usize,
    /// Dataset size or `online`.
    #[arg(long, default_value = "online")]
    m: SampleSize,
    #[arg(long, value_enum, default_value = "sparse")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Training config (.json or .toml); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    square_loss: bool,
    /// Keep the error trace in the JSON output.
    #[arg(long)]
    trace: bool,
}

pub fn train_cmd_config(c: &Common, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = c.seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.eta {
        cfg.rule.eta = LayerRates::uniform(v);
    }
    if let Some(v) = a.lambda {
        cfg.rule.lambda = LayerRates::uniform(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.square_loss {
        cfg.loss = LossKind::Square;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(c: &Common, a: TrainArgs) -> Result<()> {
    let cfg = train_cmd_config(c, &a)?;
    let inst = ParityInstance::leading(a.n, a.k)?;
    let scheme = match a.scheme {
        SchemeArg::Dense => InitScheme::uniform_dense(),
        SchemeArg::Sparse => InitScheme::sparse(a.s),
    };
    let data = match a.m {
        SampleSize::Offline(m) => Some(generate_dataset(&inst, m, c.seed)?),
        SampleSize::Online => None,
    };
    let source = data.as_ref().map_or(DataSource::Online, DataSource::Offline);
    let run = trainer::train(&inst, source, a.r, &scheme, &cfg)?;
    let o = &run.outcome;
    println!(
        "success={} steps_to_success={} final_test_err={} diverged={}",
        o.success,
        o.steps_to_success.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        o.final_test_err.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        o.diverged
    );
    let s = if matches!(a.scheme, SchemeArg::Dense) { 0 } else { a.s };
    let cell = CellKey::new(a.n, a.k, a.m, a.r, scheme.label(), s);
    let record = RunRecord::from_outcome(cell, 0, c.seed, run.outcome, a.trace);
    let config = json!({"args": &a, "train": &cfg});
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, "train.json", "train", &config, &record)?,
        Format::Csv => {
            let path = out_path(c, "train.csv")?;
            let mut manifest = RunManifest::new("train", c.seed, &config)?;
            manifest.outputs = vec![path.clone()];
            write_records_csv(fs::File::create(&path)?, &manifest, &[record])?;
            println!("wrote {}", path.display());
            path
        }
    };
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    /// Sweep grid (.json or .toml).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the environment setting or the core count.
    #[arg(long)]
    workers: Option<usize>,
    /// Confidence level for frontier statistics.
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
}

pub fn sweep(c: &Common, a: SweepArgs) -> Result<()> {
    let mut grid: SweepGrid = parse_config(&a.config)?;
    grid.base_seed = grid.base_seed.wrapping_add(c.seed);
    let workers = a.workers.unwrap_or_else(worker_count);
    let result = run_sweep_with(&grid, workers)?;
    let format = match c.format.unwrap_or(Format::Csv) {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    fs::create_dir_all(&c.out_dir)?;
    let manifest = RunManifest::new("sweep", grid.base_seed, &grid)?;
    let path = emit_results(&c.out_dir, "sweep", &manifest, &result, format)?;
    println!("wrote {}", path.display());
    let frontier = frontier_stats(&result, a.confidence);
    emit_json(c, "sweep_summary.json", "sweep", &grid, &json!({"cells": result.cells, "frontier": frontier}))?;
    for cell in &result.cells {
        println!("n={} k={} m={} r={} {}: {}/{}", cell.cell.n, cell.cell.k, cell.cell.m, cell.cell.r, cell.cell.scheme, cell.successes, cell.trials);
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct LotteryArgs {
    /// Lottery config (.json or .toml); defaults to the standard protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    retrain_seeds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

pub fn lottery(c: &Common, a: LotteryArgs) -> Result<()> {
    let mut cfg: LotteryConfig = match &a.config {
        Some(p) => parse_config(p)?,
        None => LotteryConfig::default(),
    };
    cfg.base_seed = cfg.base_seed.wrapping_add(c.seed);
    if let Some(v) = a.retrain_seeds {
        cfg.retrain_seeds = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    let report = lottery_experiment(&cfg)?;
    println!(
        "rewound {}/{} random {}/{} p={} significant={}",
        report.rewound_successes(),
        report.rewound.len(),
        report.random_successes(),
        report.random.len(),
        report.test.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
        report.test.significant
    );
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, "lottery.json", "lottery", &cfg, &report)?,
        Format::Csv => {
            let mut rows = Vec::new();
            for (arm, runs) in [("rewound", &report.rewound), ("random", &report.random)] {
                for (i, o) in runs.iter().enumerate() {
                    rows.push(vec![
                        arm.to_string(),
                        i.to_string(),
                        o.success.to_string(),
                        o.steps_to_success.map(|v| v.to_string()).unwrap_or_default(),
                        o.final_test_err.map(float).unwrap_or_default(),
                        o.diverged.to_string(),
                    ]);
                }
            }
            emit_table(c, "lottery.csv", "lottery", &cfg, &["arm", "trial", "success", "steps_to_success", "final_test_err", "diverged"], &rows)?
        }
    };
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SqArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Hidden width of the audited MLP.
    #[arg(long, default_value_t = 1)]
    width: usize,
    /// Gradient steps T.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
}

pub fn sqcheck(c: &Common, a: SqArgs) -> Result<()> {
    let init = init_params(&InitScheme::uniform_dense(), a.width, a.n, c.seed)?;
    let budget = SqBudget { r: init.num_params(), t: a.steps, tau: a.tau, delta: a.delta };
    let in_regime = budget_check(a.n, a.k, &budget)?;
    let traj = star_trajectory(&init, StarConfig { eta: a.eta, steps: a.steps, weight_decay: a.weight_decay })?;
    let report = find_hard_parity(&traj, a.k, a.tau)?;
    let rows: Vec<Vec<String>> = report
        .audit
        .iter()
        .map(|p| vec![p.support.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"), float(p.max_corr), p.hidden.to_string()])
        .collect();
    emit_table(c, "sq_audit.csv", "sqcheck", &a, &["S", "max_corr", "hidden"], &rows)?;
    let summary = json!({
        "budget": budget,
        "cost": budget.cost(),
        "in_regime": in_regime,
        "hidden_support": report.hidden_support,
        "hidden_fraction": report.hidden_fraction,
        "hidden_fraction_bound": hidden_fraction_bound(a.n, a.k, budget.r, budget.t, a.tau),
        "normalization": report.normalization,
        "queries": report.queries,
        "max_parseval_mean": report.max_parseval_mean,
        "parseval_ok": report.parseval_ok,
    });
    emit_json(c, "sq_summary.json", "sqcheck", &a, &summary)?;
    println!("in_regime={} hidden_fraction={:.4} parseval_ok={}", in_regime, report.hidden_fraction, report.parseval_ok);
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct OversparseArgs {
    /// Run config (.json or .toml); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    /// Sample size; the full cube when omitted.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    phase2_steps: Option<usize>,
    #[arg(long)]
    eps_accuracy: Option<f64>,
    #[arg(long)]
    b_proxy: Option<f64>,
}

fn read_run_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    })
}

pub fn theory_oversparse(c: &Common, a: OversparseArgs) -> Result<()> {
    json_only(c, "theory-oversparse")?;
    let mut cfg: OversparseRun = read_run_config(&a.config)?;
    cfg.seed = cfg.seed.wrapping_add(c.seed);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.s = a.s.unwrap_or(cfg.s);
    cfg.r = a.r.unwrap_or(cfg.r);
    cfg.m = a.m.or(cfg.m);
    cfg.phase2_steps = a.phase2_steps.unwrap_or(cfg.phase2_steps);
    cfg.eps_accuracy = a.eps_accuracy.unwrap_or(cfg.eps_accuracy);
    cfg.b_proxy = a.b_proxy.or(cfg.b_proxy);
    let report = run_oversparse(&cfg)?;
    println!(
        "good={} exact_weights={} ideal_cube_error={} phase2_test_error={:.4}",
        report.good_neurons, report.good_weights_exact, report.ideal_cube_error, report.phase2_test_error
    );
    emit_json(c, "theory_oversparse.json", "theory-oversparse", &cfg, &report)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct UndersparseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    width_const: Option<f64>,
    #[arg(long)]
    eps_init: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    /// Number of init seeds, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

pub fn theory_undersparse(c: &Common, a: UndersparseArgs) -> Result<()> {
    json_only(c, "theory-undersparse")?;
    let mut cfg: UndersparseRun = read_run_config(&a.config)?;
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.s = a.s.unwrap_or(cfg.s);
    cfg.width_const = a.width_const.unwrap_or(cfg.width_const);
    cfg.eps_init = a.eps_init.or(cfg.eps_init);
    cfg.m = a.m.or(cfg.m);
    let base = cfg.seed.wrapping_add(c.seed);
    let runs = (0..a.seeds)
        .map(|i| run_undersparse(&UndersparseRun { seed: base + i, ..cfg.clone() }))
        .collect::<parity_lab::Result<Vec<_>>>()?;
    let passes = runs.iter().filter(|r| r.report.pass).count();
    let infeasible = runs.iter().filter(|r| r.report.infeasible_gamma).count();
    println!("pass {passes}/{} infeasible_gamma {infeasible} width {}", runs.len(), runs.first().map_or(0, |r| r.r));
    emit_json(c, "theory_undersparse.json", "theory-undersparse", &cfg, &json!({"passes": passes, "infeasible_gamma": infeasible, "runs": runs}))?;
    Ok(())
}
