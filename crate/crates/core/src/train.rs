//! Minibatch SGD on a parity task with held-out evaluation.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fill_uniform, sample_dataset, Dataset};
use crate::error::{LabError, Result};
use crate::fourier::ParityInstance;
use crate::mlp::{apply_step, init_params, loss_and_grad_unchecked, predict, InitScheme, LossKind, MlpParams, StepRule};
use crate::rng::{stream_rng, Stream};

const EVAL_CHUNK: usize = 1000;
const TRAIN_EVAL_CAP: usize = 10_000;

/// Where minibatches come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// A fresh i.i.d. batch every step.
    Online,
    /// Batches drawn uniformly with replacement from a fixed sample.
    Offline(&'a Dataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rule: StepRule,
    pub batch_size: usize,
    pub steps: usize,
    pub loss: LossKind,
    pub eval_interval: usize,
    pub success_threshold: f64,
    pub test_size: usize,
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rule: StepRule::default(),
            batch_size: 32,
            steps: 100_000,
            loss: LossKind::Hinge,
            eval_interval: 100,
            success_threshold: 0.1,
            test_size: 10_000,
            early_stop: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        let bad = |field: &str, message: String| Err(LabError::Config { field: field.into(), message });
        if self.batch_size == 0 {
            return bad("batch_size", "batch size must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps", "number of steps must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "evaluation interval must be at least 1".into());
        }
        if self.test_size == 0 {
            return bad("test_size", "held-out sample must be nonempty".into());
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return bad("success_threshold", format!("must lie in [0, 1], got {}", self.success_threshold));
        }
        Ok(())
    }
}

/// Errors at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    /// 0-1 error of the pre-update predictions on the minibatches since the
    /// last snapshot; `None` before the first step.
    pub train_err: Option<f64>,
    /// 0-1 error on the held-out prefix that was evaluated.
    pub test_err: f64,
    /// Held-out points evaluated; fewer than the full sample once the
    /// error count already rules out success.
    pub test_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub success: bool,
    pub steps_to_success: Option<usize>,
    /// First snapshot whose running train error met the threshold.
    pub train_success_step: Option<usize>,
    /// `None` when the run diverged.
    pub final_train_err: Option<f64>,
    pub final_test_err: Option<f64>,
    pub diverged: bool,
    pub steps_run: usize,
    pub trace: Vec<Snapshot>,
}

impl TrainOutcome {
    /// Steps between fitting the training batches and generalising.
    pub fn grokking_gap(&self) -> Option<usize> {
        match (self.train_success_step, self.steps_to_success) {
            (Some(a), Some(b)) => Some(b.saturating_sub(a)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub params: MlpParams,
}

/// Held-out error, stopping early once more than `limit` mistakes are seen.
fn held_out_error(params: &MlpParams, test: &Dataset, limit: Option<usize>) -> (f64, usize) {
    let m = test.len();
    let mut wrong = 0usize;
    let mut seen = 0usize;
    while seen < m {
        let end = (seen + EVAL_CHUNK).min(m);
        let pred = predict(params, test.x.slice(s![seen..end, ..])).expect("dimensions checked at start");
        wrong += pred
            .iter()
            .zip(test.y.slice(s![seen..end]))
            .filter(|(&p, &t)| (p > 0.0) != (t > 0.0))
            .count();
        seen = end;
        if limit.is_some_and(|l| wrong > l) {
            break;
        }
    }
    (wrong as f64 / seen as f64, seen)
}

/// Trains a fresh network drawn from `scheme` with `config.seed`.
pub fn train(inst: &ParityInstance, source: DataSource<'_>, r: usize, scheme: &InitScheme, config: &TrainConfig) -> Result<TrainRun> {
    let params = init_params(scheme, r, inst.n(), config.seed)?;
    train_from(inst, source, params, config)
}

/// Trains the given parameters; batches and the held-out sample come from `config.seed`.
pub fn train_from(inst: &ParityInstance, source: DataSource<'_>, mut params: MlpParams, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let n = inst.n();
    if params.input_dim() != n {
        return Err(LabError::DimensionMismatch { expected: n, got: params.input_dim() });
    }
    params.check_finite()?;
    if let DataSource::Offline(d) = source {
        if d.is_empty() {
            return Err(LabError::InvalidArgument("offline dataset is empty".into()));
        }
        if d.n() != n {
            return Err(LabError::DimensionMismatch { expected: n, got: d.n() });
        }
    }
    let test = sample_dataset(inst, config.test_size, &mut stream_rng(config.seed, Stream::Test))?;
    let limit = (config.success_threshold * config.test_size as f64).floor() as usize;
    let mut batch_rng = stream_rng(config.seed, Stream::Batches);
    let bsz = config.batch_size;
    let mut xb = Array2::<f64>::zeros((bsz, n));
    let mut yb = Array1::<f64>::zeros(bsz);
    let mut idx = vec![0usize; bsz];

    let mut trace = Vec::new();
    let mut steps_to_success = None;
    let mut train_success_step = None;
    let mut diverged = false;
    let mut window_wrong = 0usize;
    let mut window_seen = 0usize;
    let mut last_train_err = None;
    let mut step = 0usize;

    loop {
        if step.is_multiple_of(config.eval_interval) || step == config.steps {
            let train_err = (window_seen > 0).then(|| window_wrong as f64 / window_seen as f64);
            if train_err.is_some() {
                last_train_err = train_err;
            }
            window_wrong = 0;
            window_seen = 0;
            let (test_err, test_evaluated) = held_out_error(&params, &test, Some(limit));
            trace.push(Snapshot { step, train_err, test_err, test_evaluated });
            if train_success_step.is_none() && train_err.is_some_and(|e| e <= config.success_threshold) {
                train_success_step = Some(step);
            }
            if steps_to_success.is_none() && test_evaluated == test.len() && test_err <= config.success_threshold {
                steps_to_success = Some(step);
                if config.early_stop {
                    break;
                }
            }
        }
        if step == config.steps {
            break;
        }
        match source {
            DataSource::Online => fill_uniform(&mut batch_rng, inst, xb.view_mut(), yb.view_mut()),
            DataSource::Offline(d) => {
                for i in idx.iter_mut() {
                    *i = batch_rng.random_range(0..d.len());
                }
                d.gather_into(&idx, xb.view_mut(), yb.view_mut());
            }
        }
        let (loss, grads, yhat) = loss_and_grad_unchecked(&params, xb.view(), yb.view(), config.loss);
        if !loss.is_finite() || !grads.is_finite() {
            diverged = true;
            break;
        }
        window_wrong += yhat.iter().zip(&yb).filter(|(&p, &t)| (p > 0.0) != (t > 0.0)).count();
        window_seen += bsz;
        apply_step(&mut params, &grads, &config.rule, step);
        step += 1;
    }

    diverged |= !params.is_finite();
    let final_test_err = (!diverged).then(|| held_out_error(&params, &test, None).0);
    let final_train_err = match source {
        _ if diverged => None,
        DataSource::Offline(d) => {
            let m = d.len().min(TRAIN_EVAL_CAP);
            let pred = predict(&params, d.x.slice(s![..m, ..]))?;
            Some(crate::mlp::zero_one_error(pred.view(), d.y.slice(s![..m])))
        }
        DataSource::Online => last_train_err,
    };
    Ok(TrainRun {
        outcome: TrainOutcome {
            success: steps_to_success.is_some(),
            steps_to_success,
            train_success_step,
            final_train_err,
            final_test_err,
            diverged,
            steps_run: step,
            trace,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig { steps, test_size: 2000, ..TrainConfig::default() }
    }

    #[test]
    fn single_coordinate_is_learned() {
        let inst = ParityInstance::new(20, [7]).unwrap();
        let run = train(&inst, DataSource::Online, 20, &InitScheme::uniform_dense(), &quick(5000)).unwrap();
        assert!(run.outcome.success, "{:?}", run.outcome.trace.last());
        assert_eq!(run.outcome.steps_to_success.is_some(), run.outcome.success);
    }

    #[test]
    fn symmetric_start_is_chance() {
        let inst = ParityInstance::leading(12, 2).unwrap();
        let scheme = InitScheme::over_sparse_theory(2, 3);
        let run = train(&inst, DataSource::Online, 10, &scheme, &TrainConfig { eval_interval: 1, ..quick(1) }).unwrap();
        let first = run.outcome.trace[0];
        assert_eq!(first.step, 0);
        assert!((first.test_err - 0.5).abs() < 0.05, "{first:?}");
    }

    #[test]
    fn runs_are_deterministic() {
        let inst = ParityInstance::leading(15, 2).unwrap();
        let data = crate::data::generate_dataset(&inst, 200, 4).unwrap();
        let cfg = TrainConfig { seed: 11, ..quick(300) };
        let a = train(&inst, DataSource::Offline(&data), 16, &InitScheme::sparse(2), &cfg).unwrap();
        let b = train(&inst, DataSource::Offline(&data), 16, &InitScheme::sparse(2), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_flagged() {
        let inst = ParityInstance::leading(10, 2).unwrap();
        let mut cfg = quick(200);
        cfg.loss = LossKind::Square;
        cfg.rule.eta = crate::mlp::LayerRates::uniform(1e6);
        let run = train(&inst, DataSource::Online, 8, &InitScheme::uniform_dense(), &cfg).unwrap();
        assert!(run.outcome.diverged);
        assert!(!run.outcome.success);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let inst = ParityInstance::leading(10, 2).unwrap();
        let cfg = TrainConfig { batch_size: 0, ..quick(1) };
        assert!(train(&inst, DataSource::Online, 4, &InitScheme::uniform_dense(), &cfg).is_err());
    }
}
