//! Grid sweeps, the lottery-ticket protocol and frontier statistics.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, LabError, Result};
use crate::fourier::ParityInstance;
use crate::mlp::{init_params, InitScheme, InitVariant};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::train::{train, train_from, DataSource, TrainConfig, TrainOutcome};

pub use crate::data::generate_dataset;

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "PARITY_LAB_WORKERS";

/// Dataset size of a cell; `Online` draws a fresh batch every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "SampleSizeRepr", into = "SampleSizeRepr")]
pub enum SampleSize {
    Offline(usize),
    Online,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SampleSizeRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<SampleSizeRepr> for SampleSize {
    type Error = String;

    fn try_from(v: SampleSizeRepr) -> std::result::Result<Self, String> {
        match v {
            SampleSizeRepr::Count(0) => Err("dataset size must be at least 1".into()),
            SampleSizeRepr::Count(m) => Ok(SampleSize::Offline(m)),
            SampleSizeRepr::Word(w) => w.parse(),
        }
    }
}

impl From<SampleSize> for SampleSizeRepr {
    fn from(m: SampleSize) -> Self {
        match m {
            SampleSize::Offline(m) => SampleSizeRepr::Count(m),
            SampleSize::Online => SampleSizeRepr::Word("online".into()),
        }
    }
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::Offline(m) => write!(f, "{m}"),
            SampleSize::Online => f.write_str("online"),
        }
    }
}

impl std::str::FromStr for SampleSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("online") {
            return Ok(SampleSize::Online);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("dataset size must be at least 1".into()),
            Ok(m) => Ok(SampleSize::Offline(m)),
            Err(_) => Err(format!("dataset size must be a positive integer or \"online\", got {s:?}")),
        }
    }
}

impl SampleSize {
    fn code(self) -> u64 {
        match self {
            SampleSize::Offline(m) => m as u64,
            SampleSize::Online => u64::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub m: Vec<SampleSize>,
    pub r: Vec<usize>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<InitScheme>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    /// Keep per-run error traces in the result (JSON only).
    #[serde(default)]
    pub keep_traces: bool,
}

fn default_schemes() -> Vec<InitScheme> {
    vec![InitScheme::sparse(2)]
}

fn default_trials() -> usize {
    50
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let axes = [("n", self.n.is_empty()), ("k", self.k.is_empty()), ("m", self.m.is_empty()), ("r", self.r.is_empty()), ("schemes", self.schemes.is_empty())];
        if let Some((name, _)) = axes.iter().find(|(_, empty)| *empty) {
            return Err(LabError::Config { field: (*name).into(), message: "axis must be nonempty".into() });
        }
        if self.trials == 0 {
            return Err(LabError::Config { field: "trials".into(), message: "trials must be at least 1".into() });
        }
        if self.r.contains(&0) {
            return Err(LabError::Config { field: "r".into(), message: "widths must be positive".into() });
        }
        self.train.validate()?;
        for &n in &self.n {
            for &k in &self.k {
                if k == 0 || k > n {
                    return Err(LabError::Config { field: "k".into(), message: format!("need 1 <= k <= n, got k = {k}, n = {n}") });
                }
            }
            for scheme in &self.schemes {
                scheme.validate(n).map_err(|e| LabError::Config { field: "schemes".into(), message: e.to_string() })?;
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &n in &self.n {
            for &k in &self.k {
                for &m in &self.m {
                    for &r in &self.r {
                        for (scheme_index, scheme) in self.schemes.iter().enumerate() {
                            cells.push(CellKey { n, k, m, r, scheme: scheme.label().into(), s: scheme_sparsity(scheme), scheme_index });
                        }
                    }
                }
            }
        }
        cells
    }
}

fn scheme_sparsity(scheme: &InitScheme) -> usize {
    match scheme.variant {
        InitVariant::UniformDense => 0,
        _ => scheme.s,
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub n: usize,
    pub k: usize,
    pub m: SampleSize,
    pub r: usize,
    pub scheme: String,
    /// Row sparsity; 0 for dense schemes.
    pub s: usize,
    #[serde(skip)]
    scheme_index: usize,
}

impl CellKey {
    pub fn new(n: usize, k: usize, m: SampleSize, r: usize, scheme: impl Into<String>, s: usize) -> Self {
        Self { n, k, m, r, scheme: scheme.into(), s, scheme_index: 0 }
    }
}

/// Per-trial seed; a pure function of the base seed and cell coordinates.
pub fn trial_seed(base: u64, cell: &CellKey, trial: usize) -> u64 {
    let scheme_code = cell.scheme.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    derive_seed(base, &[cell.n as u64, cell.k as u64, cell.m.code(), cell.r as u64, scheme_code, cell.s as u64, trial as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub cell: CellKey,
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub steps_to_success: Option<usize>,
    pub final_test_err: Option<f64>,
    pub final_train_err: Option<f64>,
    pub diverged: bool,
    /// Steps between meeting the threshold on training batches and on held-out data.
    pub grokking_gap: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<crate::train::Snapshot>,
}

impl RunRecord {
    pub fn from_outcome(cell: CellKey, trial: usize, seed: u64, outcome: TrainOutcome, keep_trace: bool) -> Self {
        Self {
            cell,
            trial,
            seed,
            success: outcome.success,
            steps_to_success: outcome.steps_to_success,
            final_test_err: outcome.final_test_err,
            final_train_err: outcome.final_train_err,
            diverged: outcome.diverged,
            grokking_gap: outcome.grokking_gap(),
            trace: if keep_trace { outcome.trace } else { Vec::new() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub cell: CellKey,
    pub trials: usize,
    pub successes: usize,
    pub success_prob: f64,
    pub median_steps_to_success: Option<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellSummary>,
    pub records: Vec<RunRecord>,
}

fn median(mut v: Vec<usize>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] as f64 } else { (v[mid - 1] + v[mid]) as f64 / 2.0 })
}

impl SweepResult {
    /// Aggregates records per cell; the output does not depend on record order.
    pub fn from_records(mut records: Vec<RunRecord>) -> Self {
        records.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.trial.cmp(&b.trial)).then(a.seed.cmp(&b.seed)));
        let mut groups: BTreeMap<CellKey, Vec<&RunRecord>> = BTreeMap::new();
        for rec in &records {
            let mut key = rec.cell.clone();
            key.scheme_index = 0;
            groups.entry(key).or_default().push(rec);
        }
        let cells = groups
            .into_iter()
            .map(|(cell, recs)| {
                let successes = recs.iter().filter(|r| r.success).count();
                CellSummary {
                    trials: recs.len(),
                    successes,
                    success_prob: successes as f64 / recs.len() as f64,
                    median_steps_to_success: median(recs.iter().filter_map(|r| r.steps_to_success).collect()),
                    diverged: recs.iter().filter(|r| r.diverged).count(),
                    cell,
                }
            })
            .collect();
        Self { cells, records }
    }

    pub fn cell(&self, key: &CellKey) -> Option<&CellSummary> {
        self.cells.iter().find(|c| &c.cell == key)
    }
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1))
}

fn run_trial(grid: &SweepGrid, cell: &CellKey, trial: usize) -> Result<RunRecord> {
    let seed = trial_seed(grid.base_seed, cell, trial);
    let inst = ParityInstance::leading(cell.n, cell.k)?;
    let scheme = &grid.schemes[cell.scheme_index];
    let config = TrainConfig { seed, ..grid.train.clone() };
    let run = match cell.m {
        SampleSize::Online => train(&inst, DataSource::Online, cell.r, scheme, &config)?,
        SampleSize::Offline(m) => {
            let data = generate_dataset(&inst, m, seed)?;
            train(&inst, DataSource::Offline(&data), cell.r, scheme, &config)?
        }
    };
    let mut key = cell.clone();
    key.scheme_index = 0;
    Ok(RunRecord::from_outcome(key, trial, seed, run.outcome, grid.keep_traces))
}

/// Runs every trial of every cell on `workers` threads.
pub fn run_sweep_with(grid: &SweepGrid, workers: usize) -> Result<SweepResult> {
    grid.validate()?;
    let tasks: Vec<(CellKey, usize)> = grid.cells().into_iter().flat_map(|c| (0..grid.trials).map(move |t| (c.clone(), t))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let records = pool.install(|| tasks.par_iter().map(|(cell, t)| run_trial(grid, cell, *t)).collect::<Result<Vec<_>>>())?;
    Ok(SweepResult::from_records(records))
}

pub fn run_sweep(grid: &SweepGrid) -> Result<SweepResult> {
    run_sweep_with(grid, worker_count())
}

/// How neurons are ranked for pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneNorm {
    /// ℓ2 norm of the incoming weight row.
    #[default]
    Incoming,
    /// `|u_i|` times the incoming-row ℓ2 norm.
    OutputWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LotteryConfig {
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    /// Neurons kept after pruning.
    pub keep: usize,
    /// Retraining seeds for each of the rewound and random subnetworks.
    pub retrain_seeds: usize,
    /// Full-network seeds tried until one succeeds.
    pub max_full_attempts: usize,
    pub prune_norm: PruneNorm,
    pub base_seed: u64,
    pub train: TrainConfig,
}

impl Default for LotteryConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.rule.lambda = crate::mlp::LayerRates::uniform(0.0);
        Self { n: 50, k: 5, r: 100, s: 2, keep: 5, retrain_seeds: 20, max_full_attempts: 5, prune_norm: PruneNorm::Incoming, base_seed: 0, train }
    }
}

/// Outcome of a one-sided two-proportion z-test of `p_a > p_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionTest {
    pub successes_a: usize,
    pub trials_a: usize,
    pub successes_b: usize,
    pub trials_b: usize,
    /// `None` when the pooled proportion is 0 or 1.
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
}

/// One-sided pooled two-proportion z-test at level `alpha`.
pub fn one_sided_proportion_test(successes_a: usize, trials_a: usize, successes_b: usize, trials_b: usize, alpha: f64) -> Result<ProportionTest> {
    if trials_a == 0 || trials_b == 0 || successes_a > trials_a || successes_b > trials_b {
        return invalid("proportion test needs positive trial counts and successes <= trials");
    }
    let (na, nb) = (trials_a as f64, trials_b as f64);
    let pa = successes_a as f64 / na;
    let pb = successes_b as f64 / nb;
    let pooled = (successes_a + successes_b) as f64 / (na + nb);
    let var = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    let normal = Normal::standard();
    let (z, p_value) = if var > 0.0 {
        let z = (pa - pb) / var.sqrt();
        (Some(z), Some(1.0 - normal.cdf(z)))
    } else {
        (None, None)
    };
    Ok(ProportionTest { successes_a, trials_a, successes_b, trials_b, z, p_value, significant: p_value.is_some_and(|p| p < alpha) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryReport {
    pub full: TrainOutcome,
    pub full_seed: u64,
    pub full_attempts: usize,
    /// Kept neuron indices, most important first.
    pub kept: Vec<usize>,
    pub rewound: Vec<TrainOutcome>,
    pub random: Vec<TrainOutcome>,
    pub test: ProportionTest,
}

impl LotteryReport {
    pub fn rewound_successes(&self) -> usize {
        self.rewound.iter().filter(|o| o.success).count()
    }

    pub fn random_successes(&self) -> usize {
        self.random.iter().filter(|o| o.success).count()
    }
}

/// Indices of the `keep` neurons with the largest pruning score.
pub fn top_neurons(params: &crate::mlp::MlpParams, keep: usize, norm: PruneNorm) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = params
        .w
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let l2 = row.dot(&row).sqrt();
            let score = match norm {
                PruneNorm::Incoming => l2,
                PruneNorm::OutputWeighted => l2 * params.u[i].abs(),
            };
            (score, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(keep).map(|(_, i)| i).collect()
}

/// Train a wide sparse network online for the full step budget, prune it to its top neurons, and
/// compare retraining the rewound subnetwork against random subnetworks of
/// fresh initialisations.
pub fn lottery_experiment(cfg: &LotteryConfig) -> Result<LotteryReport> {
    cfg.train.validate()?;
    if cfg.keep == 0 || cfg.keep > cfg.r {
        return invalid(format!("keep = {} must lie in 1..={}", cfg.keep, cfg.r));
    }
    if cfg.retrain_seeds == 0 || cfg.max_full_attempts == 0 {
        return invalid("retrain_seeds and max_full_attempts must be positive");
    }
    let inst = ParityInstance::leading(cfg.n, cfg.k)?;
    let scheme = InitScheme::sparse(cfg.s);
    let mut attempt = 0;
    let (full, full_seed, init, trained) = loop {
        let seed = derive_seed(cfg.base_seed, &[0, attempt as u64]);
        let init = init_params(&scheme, cfg.r, cfg.n, seed)?;
        let full_cfg = TrainConfig { seed, early_stop: false, ..cfg.train.clone() };
        let run = train_from(&inst, DataSource::Online, init.clone(), &full_cfg)?;
        attempt += 1;
        if run.outcome.success || attempt == cfg.max_full_attempts {
            break (run.outcome, seed, init, run.params);
        }
    };
    let kept = top_neurons(&trained, cfg.keep, cfg.prune_norm);
    let rewound_init = init.subnetwork(&kept)?;

    let retrain = |i: usize, rewind: bool| -> Result<TrainOutcome> {
        let seed = derive_seed(cfg.base_seed, &[if rewind { 1 } else { 2 }, i as u64]);
        let params = if rewind {
            rewound_init.clone()
        } else {
            let fresh = init_params(&scheme, cfg.r, cfg.n, seed)?;
            let mut rng = stream_rng(seed, Stream::Aux);
            let pick: Vec<usize> = sample(&mut rng, cfg.r, cfg.keep).into_vec();
            fresh.subnetwork(&pick)?
        };
        Ok(train_from(&inst, DataSource::Online, params, &TrainConfig { seed, ..cfg.train.clone() })?.outcome)
    };
    let rewound = (0..cfg.retrain_seeds).map(|i| retrain(i, true)).collect::<Result<Vec<_>>>()?;
    let random = (0..cfg.retrain_seeds).map(|i| retrain(i, false)).collect::<Result<Vec<_>>>()?;
    let wins = |v: &[TrainOutcome]| v.iter().filter(|o| o.success).count();
    let test = one_sided_proportion_test(wins(&rewound), rewound.len(), wins(&random), random.len(), 0.05)?;
    Ok(LotteryReport { full, full_seed, full_attempts: attempt, kept, rewound, random, test })
}

/// Wilson score interval at the given two-sided confidence level.
pub fn wilson_interval(successes: usize, trials: usize, confidence: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Width slice at fixed `(n, k, m, scheme)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSlice {
    pub n: usize,
    pub k: usize,
    pub m: SampleSize,
    pub scheme: String,
    pub s: usize,
    /// `(r, successes, trials)` ordered by width.
    pub points: Vec<(usize, usize, usize)>,
    /// Success counts never decrease with width.
    pub strictly_monotone: bool,
    /// No wider cell is significantly worse than a narrower one.
    pub monotone_within_ci: bool,
}

/// Sample-size slice at fixed `(n, k, r, scheme)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSlice {
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub scheme: String,
    pub s: usize,
    /// `(m, successes, trials)` ordered by dataset size, online last.
    pub points: Vec<(SampleSize, usize, usize)>,
    /// A significant drop in success followed by a significant recovery as `m` grows.
    pub double_descent: bool,
    /// Adjacent-in-order `m` regions where success falls.
    pub drops: Vec<(SampleSize, SampleSize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierReport {
    pub confidence: f64,
    pub width_slices: Vec<WidthSlice>,
    pub sample_slices: Vec<SampleSlice>,
    pub width_monotone: bool,
    pub double_descent: bool,
}

fn significantly_below(lower: (usize, usize), upper: (usize, usize), confidence: f64) -> bool {
    let (_, hi) = wilson_interval(lower.0, lower.1, confidence);
    let (lo, _) = wilson_interval(upper.0, upper.1, confidence);
    hi < lo
}

/// Width monotonicity per vertical slice and double-descent flags per
/// horizontal slice. Slices with fewer than 2 widths or 3 sizes are skipped.
pub fn frontier_stats(result: &SweepResult, confidence: f64) -> FrontierReport {
    type Group = (usize, usize, String, usize);
    type Slices<K, P> = BTreeMap<(Group, K), Vec<(P, usize, usize)>>;
    let mut by_m: Slices<SampleSize, usize> = BTreeMap::new();
    let mut by_r: Slices<usize, SampleSize> = BTreeMap::new();
    for c in &result.cells {
        let g = (c.cell.n, c.cell.k, c.cell.scheme.clone(), c.cell.s);
        by_m.entry((g.clone(), c.cell.m)).or_default().push((c.cell.r, c.successes, c.trials));
        by_r.entry((g, c.cell.r)).or_default().push((c.cell.m, c.successes, c.trials));
    }
    let width_slices: Vec<WidthSlice> = by_m
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 2)
        .map(|(((n, k, scheme, s), m), mut points)| {
            points.sort();
            let rate = |p: &(usize, usize, usize)| p.1 as f64 / p.2 as f64;
            let strictly_monotone = points.windows(2).all(|w| rate(&w[1]) >= rate(&w[0]));
            let monotone_within_ci = points
                .iter()
                .enumerate()
                .all(|(i, narrow)| points[i + 1..].iter().all(|wide| !significantly_below((wide.1, wide.2), (narrow.1, narrow.2), confidence)));
            WidthSlice { n, k, m, scheme, s, points, strictly_monotone, monotone_within_ci }
        })
        .collect();
    let sample_slices: Vec<SampleSlice> = by_r
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 3)
        .map(|(((n, k, scheme, s), r), mut points)| {
            points.sort();
            let drops = points.windows(2).filter(|w| w[1].1 as f64 / (w[1].2 as f64) < w[0].1 as f64 / (w[0].2 as f64)).map(|w| (w[0].0, w[1].0)).collect();
            let mut double_descent = false;
            for j in 1..points.len() {
                let mid = (points[j].1, points[j].2);
                let dropped = points[..j].iter().any(|a| significantly_below(mid, (a.1, a.2), confidence));
                let recovered = points[j + 1..].iter().any(|c| significantly_below(mid, (c.1, c.2), confidence));
                double_descent |= dropped && recovered;
            }
            SampleSlice { n, k, r, scheme, s, points, double_descent, drops }
        })
        .collect();
    FrontierReport {
        confidence,
        width_monotone: width_slices.iter().all(|w| w.monotone_within_ci),
        double_descent: sample_slices.iter().any(|s| s.double_descent),
        width_slices,
        sample_slices,
    }
}
