//! Statistical-query lower-bound checks on small cubes.
//!
//! A gradient step is a batch of `r` queries `E[∂h/∂θ_i · ℓ']`. With square
//! loss, `ℓ'(ŷ, y) = ŷ − y`, so the label only enters through the
//! correlations `⟨∂h/∂θ_i, χ_S⟩`. The trajectory θ* trained against the zero
//! target never sees the labels; any parity whose correlations with every
//! query along θ* stay within `τ` can be hidden by adversarial noise.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::fourier::{big_binomial, bits_to_signs, guard_dim, walsh_hadamard, BooleanFnTable};
use crate::mlp::{loss_and_grad_unchecked, LossKind, MlpParams};

/// Largest dimension for the exhaustive audits.
pub const MAX_AUDIT_DIM: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqBudget {
    /// Parameters, i.e. queries per step.
    pub r: usize,
    /// Gradient steps.
    pub t: usize,
    pub tau: f64,
    pub delta: f64,
}

impl SqBudget {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.t == 0 {
            return invalid("r and T must be positive");
        }
        if !(self.tau > 0.0) || !(self.delta > 0.0) {
            return invalid("tau and delta must be positive");
        }
        Ok(())
    }

    /// `rT/(τ²δ)`.
    pub fn cost(&self) -> f64 {
        (self.r as f64 * self.t as f64) / (self.tau * self.tau * self.delta)
    }
}

fn binomial_f64(n: usize, k: usize) -> f64 {
    crate::fourier::rational_to_f64(&num_rational::BigRational::from_integer(big_binomial(n as u64, k as u64)))
}

/// True iff `rT/(τ²δ) ≤ ½·C(n, k)`, the regime where some parity stays hidden.
pub fn budget_check(n: usize, k: usize, budget: &SqBudget) -> Result<bool> {
    budget.validate()?;
    if k > n {
        return invalid(format!("k = {k} exceeds n = {n}"));
    }
    Ok(budget.cost() <= 0.5 * binomial_f64(n, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsevalAudit {
    /// `Σ_{|S|=k} ⟨q, χ_S⟩²`.
    pub sum: f64,
    /// `sum / C(n, k)`.
    pub mean: f64,
    pub count: usize,
}

impl ParsevalAudit {
    pub fn within_bound(&self) -> bool {
        const SLACK: f64 = 1e-12;
        self.sum <= 1.0 + SLACK && self.mean <= (1.0 + SLACK) / self.count as f64
    }
}

fn degree_k_masks(n: usize, k: usize) -> Vec<u64> {
    (0..1u64 << n).filter(|m| m.count_ones() as usize == k).collect()
}

fn parseval_from_coeffs(coeffs: &[f64], masks: &[u64]) -> ParsevalAudit {
    let sum: f64 = masks.iter().map(|&m| coeffs[m as usize] * coeffs[m as usize]).sum();
    ParsevalAudit { sum, mean: sum / masks.len() as f64, count: masks.len() }
}

/// Squared correlations of a bounded query with every degree-`k` parity.
pub fn parseval_audit(query: &BooleanFnTable, k: usize) -> Result<ParsevalAudit> {
    let n = query.n();
    if n > 20 {
        return Err(LabError::ScaleGuard { n, limit: 20 });
    }
    if k == 0 || k > n {
        return invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}"));
    }
    if let Some(v) = query.values().iter().find(|v| !(v.abs() <= 1.0)) {
        return invalid(format!("query value {v} is outside [-1, 1]"));
    }
    Ok(parseval_from_coeffs(&walsh_hadamard(query), &degree_k_masks(n, k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StarConfig {
    pub eta: f64,
    pub steps: usize,
    /// Coefficient of `R(θ) = (λ/2)‖θ‖²`.
    pub weight_decay: f64,
}

/// θ*_0..θ*_T: full-cube gradient descent on `E[ℓ(h(x), 0)] + R(θ)` with square loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarTrajectory {
    pub n: usize,
    pub config: StarConfig,
    pub thetas: Vec<MlpParams>,
}

fn cube_inputs(n: usize) -> Result<Array2<f64>> {
    guard_dim(n)?;
    let total = 1usize << n;
    let mut x = Array2::zeros((total, n));
    let mut buf = vec![0.0; n];
    for bits in 0..total {
        bits_to_signs(bits as u64, &mut buf);
        x.row_mut(bits).assign(&ndarray::ArrayView1::from(&buf));
    }
    Ok(x)
}

pub fn star_trajectory(init: &MlpParams, config: StarConfig) -> Result<StarTrajectory> {
    let n = init.input_dim();
    if n > MAX_AUDIT_DIM {
        return Err(LabError::ScaleGuard { n, limit: MAX_AUDIT_DIM });
    }
    if !(config.eta > 0.0) || !(config.weight_decay >= 0.0) {
        return invalid("eta must be positive and weight decay nonnegative");
    }
    init.check_finite()?;
    let x = cube_inputs(n)?;
    let zero = Array1::zeros(x.nrows());
    let mut thetas = Vec::with_capacity(config.steps + 1);
    let mut theta = init.clone();
    thetas.push(theta.clone());
    for _ in 0..config.steps {
        let (_, g, _) = loss_and_grad_unchecked(&theta, x.view(), zero.view(), LossKind::Square);
        let flat: Vec<f64> = theta
            .to_flat()
            .iter()
            .zip(g.to_flat())
            .map(|(&p, gi)| p - config.eta * (gi + config.weight_decay * p))
            .collect();
        theta = MlpParams::from_flat(theta.width(), n, &flat)?;
        thetas.push(theta.clone());
    }
    Ok(StarTrajectory { n, config, thetas })
}

/// `∂h_θ(x)/∂θ` for every cube point: one row per parameter in flat order.
pub fn jacobian_on_cube(params: &MlpParams) -> Result<Array2<f64>> {
    let n = params.input_dim();
    let r = params.width();
    let x = cube_inputs(n)?;
    let z = crate::mlp::preactivations(params, x.view());
    let mut jac = Array2::zeros((params.num_params(), x.nrows()));
    for (p, zrow) in z.rows().into_iter().enumerate() {
        let xp = x.row(p);
        for j in 0..r {
            let on = zrow[j] > 0.0;
            let d = if on { params.u[j] } else { 0.0 };
            for l in 0..n {
                jac[[j * n + l, p]] = d * xp[l];
            }
            jac[[r * n + j, p]] = d;
            jac[[r * n + r + j, p]] = if on { zrow[j] } else { 0.0 };
        }
        jac[[r * n + 2 * r, p]] = 1.0;
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityAudit {
    pub support: Vec<usize>,
    /// Largest `|⟨q, χ_S⟩|` over queries `q` at steps `0..T`.
    pub max_corr: f64,
    pub hidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardParityReport {
    pub n: usize,
    pub k: usize,
    pub tau: f64,
    /// Every query is divided by this factor (≥ 1) so that `‖∇h‖_∞ ≤ 1`.
    pub normalization: f64,
    pub queries: usize,
    pub audit: Vec<ParityAudit>,
    pub hidden_support: Option<Vec<usize>>,
    pub hidden_fraction: f64,
    /// Largest Parseval mean over all audited queries.
    pub max_parseval_mean: f64,
    pub parseval_ok: bool,
}

fn mask_to_support(mask: u64) -> Vec<usize> {
    (0..64).filter(|i| mask >> i & 1 == 1).collect()
}

/// Audits every degree-`k` parity against the gradient queries of the first
/// `T` states of the trajectory, i.e. the states at which steps are taken.
pub fn find_hard_parity(traj: &StarTrajectory, k: usize, tau: f64) -> Result<HardParityReport> {
    let n = traj.n;
    if n > MAX_AUDIT_DIM {
        return Err(LabError::ScaleGuard { n, limit: MAX_AUDIT_DIM });
    }
    if k == 0 || k > n {
        return invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}"));
    }
    if !(tau >= 0.0) {
        return invalid("tau must be nonnegative");
    }
    let steps = traj.thetas.len().saturating_sub(1).max(1);
    let jacs: Vec<Array2<f64>> = traj.thetas[..steps].iter().map(jacobian_on_cube).collect::<Result<_>>()?;
    let sup = jacs.iter().flat_map(|j| j.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    let normalization = sup.max(1.0);
    let masks = degree_k_masks(n, k);
    let per_query: Vec<(Vec<f64>, ParsevalAudit)> = jacs
        .iter()
        .flat_map(|j| j.rows().into_iter().map(|row| row.to_vec()).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|values| {
            let table = BooleanFnTable::from_values(n, values.iter().map(|v| v / normalization).collect())?;
            let coeffs = walsh_hadamard(&table);
            let audit = parseval_from_coeffs(&coeffs, &masks);
            Ok((masks.iter().map(|&m| coeffs[m as usize].abs()).collect(), audit))
        })
        .collect::<Result<_>>()?;
    let mut max_corr = vec![0.0f64; masks.len()];
    let mut max_parseval_mean = 0.0f64;
    let mut parseval_ok = true;
    for (corrs, audit) in &per_query {
        for (m, c) in max_corr.iter_mut().zip(corrs) {
            *m = m.max(*c);
        }
        max_parseval_mean = max_parseval_mean.max(audit.mean);
        parseval_ok &= audit.within_bound();
    }
    let audit: Vec<ParityAudit> = masks
        .iter()
        .zip(&max_corr)
        .map(|(&m, &c)| ParityAudit { support: mask_to_support(m), max_corr: c, hidden: c <= tau })
        .collect();
    let hidden_count = audit.iter().filter(|a| a.hidden).count();
    Ok(HardParityReport {
        n,
        k,
        tau,
        normalization,
        queries: per_query.len(),
        hidden_support: audit.iter().find(|a| a.hidden).map(|a| a.support.clone()),
        hidden_fraction: hidden_count as f64 / audit.len() as f64,
        audit,
        max_parseval_mean,
        parseval_ok,
    })
}

/// Markov bound on the hidden fraction: `1 − rT/(τ²·C(n, k))`.
pub fn hidden_fraction_bound(n: usize, k: usize, r: usize, t: usize, tau: f64) -> f64 {
    1.0 - (r as f64 * t as f64) / (tau * tau * binomial_f64(n, k))
}
