//! One-step feature-learning constructions for sparse initialisations.
//!
//! The over-sparse pipeline takes one full-batch step on the first layer
//! (weights fully decayed, `η = 1/(2k|C_{k,s}|)`), compares the resulting
//! features with the idealised map ψ*, builds a second layer that computes the
//! parity exactly on ψ*, and then trains the second layer on a convex
//! objective. The under-sparse pipeline takes one truncated step and checks
//! that a parity-computing subnetwork has appeared.
//!
//! "Theory mode" uses the planted support to set step sizes and thresholds.
//! It verifies the constructions; it is not a learning algorithm.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, LabError, Result};
use crate::fourier::{rational_to_f64, ParityInstance};
use crate::mlp::{loss_and_grad, LossKind, MlpParams};
use crate::popgrad::{gap_constants, pop_grad_undersparse, SparseNeuron};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// ψ*: good neurons see only the relevant coordinates, bad neurons are 0.
    Ideal,
    /// ψ: ψ* plus the `η c_{k,s}` term on active irrelevant coordinates.
    IdealWithIrrelevant,
    /// φ⁽¹⁾: the first layer after the training step.
    PostStep,
}

/// `x ↦ (1, σ(Wx + b))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kind: FeatureKind,
}

impl FeatureMap {
    /// Output dimension, including the constant feature.
    pub fn dim(&self) -> usize {
        self.w.nrows() + 1
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w.ncols() {
            return Err(LabError::DimensionMismatch { expected: self.w.ncols(), got: x.len() });
        }
        let mut out = Vec::with_capacity(self.dim());
        out.push(1.0);
        for (row, &b) in self.w.rows().into_iter().zip(&self.b) {
            let mut z = b;
            for (w, xv) in row.iter().zip(x) {
                z += w * xv;
            }
            out.push(z.max(0.0));
        }
        Ok(out)
    }

    /// Features of every row of `x`, as an `m × (r+1)` matrix.
    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.w.ncols() {
            return Err(LabError::DimensionMismatch { expected: self.w.ncols(), got: x.ncols() });
        }
        let mut z = x.dot(&self.w.t());
        z += &self.b;
        z.mapv_inplace(|v| v.max(0.0));
        let ones = Array2::ones((x.nrows(), 1));
        ndarray::concatenate(Axis(1), &[ones.view(), z.view()]).map_err(|e| LabError::InvalidArgument(e.to_string()))
    }
}

/// Largest `‖f(x) − g(x)‖₂` over the rows of `x`.
pub fn max_feature_distance(f: &FeatureMap, g: &FeatureMap, x: ArrayView2<'_, f64>) -> Result<f64> {
    let a = f.eval_batch(x)?;
    let b = g.eval_batch(x)?;
    if a.ncols() != b.ncols() {
        return Err(LabError::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    Ok((a - b).rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max))
}

/// Active coordinates of each row: entries exactly equal to 1.
fn active_sets(params: &MlpParams) -> Vec<Vec<usize>> {
    params
        .w
        .rows()
        .into_iter()
        .map(|row| row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect())
        .collect()
}

/// Good neurons grouped by bias-grid index and orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodNeuronLayout {
    pub grid: Vec<f64>,
    /// `plus[j]`: good neurons with bias `grid[j]` whose post-step weights on S are positive.
    pub plus: Vec<Vec<usize>>,
    pub minus: Vec<Vec<usize>>,
}

impl GoodNeuronLayout {
    pub fn good_count(&self) -> usize {
        self.plus.iter().chain(&self.minus).map(Vec::len).sum()
    }

    /// `r'` with `r'/2 <= |I_j| <= 2r'` for every set, if one exists.
    pub fn r_prime(&self) -> Option<f64> {
        let sizes: Vec<usize> = self.plus.iter().chain(&self.minus).map(Vec::len).collect();
        let lo = *sizes.iter().min()? as f64;
        let hi = *sizes.iter().max()? as f64;
        let r = hi / 2.0;
        (lo > 0.0 && r / 2.0 <= lo).then_some(r.max(lo / 2.0))
    }
}

/// Sign of `C_{k,s}`, the relevant-coordinate gradient constant.
fn relevant_sign(k: usize, s: usize) -> Result<f64> {
    Ok(gap_constants(k, s)?.c_relevant.signum())
}

/// Classifies neurons of an over-sparse init as good (active set ⊇ S) and
/// groups them by bias and by the sign `u_i·sign(C_{k,s})` of their step.
pub fn good_neuron_layout(params: &MlpParams, inst: &ParityInstance, s: usize, grid: &[f64]) -> Result<GoodNeuronLayout> {
    let k = inst.k();
    let sign_c = relevant_sign(k, s)?;
    let mut plus = vec![Vec::new(); grid.len()];
    let mut minus = vec![Vec::new(); grid.len()];
    for (i, active) in active_sets(params).iter().enumerate() {
        if !inst.support().iter().all(|j| active.binary_search(j).is_ok()) {
            continue;
        }
        let Some(j) = grid.iter().position(|&g| g == params.b[i]) else {
            return invalid(format!("bias {} of good neuron {i} is not on the grid", params.b[i]));
        };
        if params.u[i] * sign_c > 0.0 {
            plus[j].push(i);
        } else {
            minus[j].push(i);
        }
    }
    Ok(GoodNeuronLayout { grid: grid.to_vec(), plus, minus })
}

fn check_over_sparse(params: &MlpParams, inst: &ParityInstance, s: usize) -> Result<()> {
    let k = inst.k();
    if s.is_multiple_of(2) || k % 2 == 1 || s <= k {
        return invalid(format!("over-sparse pipeline needs odd s > k and even k, got s = {s}, k = {k}"));
    }
    if params.input_dim() != inst.n() {
        return Err(LabError::DimensionMismatch { expected: inst.n(), got: params.input_dim() });
    }
    for (i, row) in params.w.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != s || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid(format!("row {i} is not a binary {s}-hot vector"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Result {
    pub params: MlpParams,
    pub phi1: FeatureMap,
    /// `1/(2k|C_{k,s}|)`.
    pub eta: f64,
    pub c_relevant: f64,
    pub c_irrelevant: f64,
}

/// One full-batch hinge step on the first-layer weights with weight decay 1.
///
/// The new weights are `W' = −∇_W L / (2k|C_{k,s}|)`, i.e. `−η∇_W L`; biases
/// and the second layer are left untouched. Dividing by `2k|C_{k,s}|` instead
/// of multiplying by a rounded `η` keeps the good-neuron weights at exactly
/// `±1/2k` on full-cube data.
pub fn oversparse_phase1(params: &MlpParams, data: &Dataset, inst: &ParityInstance, s: usize) -> Result<Phase1Result> {
    if data.is_empty() {
        return invalid("phase 1 needs a nonempty dataset");
    }
    check_over_sparse(params, inst, s)?;
    let k = inst.k();
    let consts = gap_constants(k, s)?;
    let denom = 2.0 * k as f64 * consts.c_relevant.abs();
    let (_, grads) = loss_and_grad(params, data.x(), data.y(), LossKind::Hinge)?;
    let mut next = params.clone();
    next.w = grads.w.mapv(|g| -g / denom);
    Ok(Phase1Result {
        phi1: FeatureMap { w: next.w.clone(), b: next.b.clone(), kind: FeatureKind::PostStep },
        params: next,
        eta: 1.0 / denom,
        c_relevant: consts.c_relevant,
        c_irrelevant: consts.c_irrelevant,
    })
}

/// The idealised post-step features ψ* (or ψ with `with_irrelevant`).
///
/// Good neurons get weight `±1/2k` on S, with the sign their step would give;
/// ψ also keeps `±c_{k,s}/(2k|C_{k,s}|)` on active irrelevant coordinates.
/// Bad neurons are the zero feature.
pub fn ideal_feature_map(init: &MlpParams, inst: &ParityInstance, s: usize, with_irrelevant: bool) -> Result<FeatureMap> {
    check_over_sparse(init, inst, s)?;
    let k = inst.k();
    let consts = gap_constants(k, s)?;
    let denom = 2.0 * k as f64 * consts.c_relevant.abs();
    let r = init.width();
    let mut w = Array2::zeros((r, inst.n()));
    let mut b = Array1::zeros(r);
    for (i, active) in active_sets(init).iter().enumerate() {
        if !inst.support().iter().all(|j| active.binary_search(j).is_ok()) {
            continue;
        }
        let u = init.u[i];
        for &j in active {
            if inst.contains(j) {
                w[[i, j]] = u * consts.c_relevant / denom;
            } else if with_irrelevant {
                w[[i, j]] = u * consts.c_irrelevant / denom;
            }
        }
        b[i] = init.b[i];
    }
    let kind = if with_irrelevant { FeatureKind::IdealWithIrrelevant } else { FeatureKind::Ideal };
    Ok(FeatureMap { w, b, kind })
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap_or_else(BigRational::zero)
}

/// Gaussian elimination over the rationals.
fn solve_rational(mut a: Vec<Vec<BigRational>>, mut rhs: Vec<BigRational>) -> Result<Vec<BigRational>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).ok_or_else(|| LabError::Singular(format!("no pivot in column {col}")))?;
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in 0..n {
            if row == col || a[row][col].is_zero() {
                continue;
            }
            let f = &a[row][col] / &a[col][col];
            for c in col..n {
                let d = &f * &a[col][c];
                a[row][c] -= d;
            }
            let d = &f * &rhs[col];
            rhs[row] -= d;
        }
    }
    Ok((0..n).map(|i| &rhs[i] / &a[i][i]).collect())
}

/// The second layer that computes `χ_S` exactly on ψ*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealSecondLayer {
    /// `(ν_0, ν_0^+, …, ν_{k/2−1}^+, ν_0^−, …, ν_{k/2−1}^−)`.
    pub nu: Vec<f64>,
    #[serde(skip)]
    pub nu_exact: Vec<BigRational>,
    /// Length `r + 1`; entry 0 multiplies the constant feature.
    pub u_star: Vec<f64>,
    /// `‖ν‖₂`, the norm proxy for the second layer.
    pub norm_bound: f64,
}

/// Solves `V ν = χ` over relevant sums `t ∈ {−k, −k+2, …, k}`, where row `t` of
/// `V` is `(1, σ(t/2k + β_j) for each j, σ(−t/2k + β_j) for each j)`, then
/// spreads `ν` evenly over the index sets.
pub fn construct_ideal_second_layer(k: usize, layout: &GoodNeuronLayout, r: usize) -> Result<IdealSecondLayer> {
    let grid = &layout.grid;
    if grid.len() * 2 != k {
        return invalid(format!("bias grid has {} values; the relevant-sum system needs k/2 = {}", grid.len(), k / 2));
    }
    if let Some(j) = (0..grid.len()).find(|&j| layout.plus[j].is_empty() || layout.minus[j].is_empty()) {
        return invalid(format!("no good neuron of one orientation carries bias index {j}"));
    }
    let two_k = BigRational::from_integer(BigInt::from(2 * k));
    let relu = |q: BigRational| if q.is_positive() { q } else { BigRational::zero() };
    let mut rows = Vec::with_capacity(k + 1);
    let mut rhs = Vec::with_capacity(k + 1);
    for step in 0..=k {
        let t = BigRational::from_integer(BigInt::from(2 * step as i64 - k as i64));
        let mut row = vec![BigRational::one()];
        row.extend(grid.iter().map(|&b| relu(&t / &two_k + rat(b))));
        row.extend(grid.iter().map(|&b| relu(-&t / &two_k + rat(b))));
        rows.push(row);
        let parity_negative = (k - step) % 2 == 1;
        rhs.push(BigRational::from_integer(BigInt::from(if parity_negative { -1 } else { 1 })));
    }
    let nu_exact = solve_rational(rows, rhs)?;
    let nu: Vec<f64> = nu_exact.iter().map(rational_to_f64).collect();
    let half = grid.len();
    let mut u_star = vec![0.0; r + 1];
    u_star[0] = nu[0];
    for j in 0..half {
        for (set, coef) in [(&layout.plus[j], nu[1 + j]), (&layout.minus[j], nu[1 + half + j])] {
            for &i in set {
                u_star[i + 1] = coef / set.len() as f64;
            }
        }
    }
    let norm_bound = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(IdealSecondLayer { nu, nu_exact, u_star, norm_bound })
}

/// `⟨φ(x), u⟩` for every row of `x`.
pub fn linear_readout(features: &FeatureMap, u: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if u.len() != features.dim() {
        return Err(LabError::DimensionMismatch { expected: features.dim(), got: u.len() });
    }
    Ok(features.eval_batch(x)?.dot(&Array1::from(u.to_vec())))
}

/// 0-1 error of `sign⟨φ(x), u⟩` on a dataset.
pub fn readout_error(features: &FeatureMap, u: &[f64], data: &Dataset) -> Result<f64> {
    let pred = linear_readout(features, u, data.x())?;
    Ok(crate::mlp::zero_one_error(pred.view(), data.y()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "eta")]
pub enum Phase2Schedule {
    /// `η_t = 1/(λt)`.
    InverseLambdaT,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub lambda: f64,
    pub schedule: Phase2Schedule,
    pub steps: usize,
}

impl Phase2Config {
    /// `λ = ε/B²` with the `1/(λt)` schedule.
    pub fn from_accuracy(eps: f64, norm_bound: f64, steps: usize) -> Result<Self> {
        if !(eps > 0.0 && norm_bound > 0.0) {
            return invalid("accuracy and norm bound must be positive");
        }
        Ok(Self { lambda: eps / (norm_bound * norm_bound), schedule: Phase2Schedule::InverseLambdaT, steps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Result {
    pub u: Vec<f64>,
    /// Mean hinge loss before each step and after the last.
    pub loss_trace: Vec<f64>,
    /// Hinge loss plus `λ/2‖u‖²`, aligned with `loss_trace`.
    pub objective_trace: Vec<f64>,
    pub diverged: bool,
}

impl Phase2Result {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

/// Full-batch subgradient descent on `L_S(⟨φ, u⟩) + λ/2‖u‖²` from `u = 0`,
/// reporting the last iterate.
pub fn oversparse_phase2(features: &FeatureMap, data: &Dataset, cfg: &Phase2Config) -> Result<Phase2Result> {
    if data.is_empty() {
        return invalid("phase 2 needs a nonempty dataset");
    }
    if !(cfg.lambda >= 0.0) {
        return invalid("lambda must be nonnegative");
    }
    match cfg.schedule {
        Phase2Schedule::InverseLambdaT if cfg.lambda <= 0.0 => return invalid("the 1/(λt) schedule needs λ > 0"),
        Phase2Schedule::Constant(eta) if !(eta > 0.0) => return invalid("constant step size must be positive"),
        _ => {}
    }
    let phi = features.eval_batch(data.x())?;
    let m = data.len() as f64;
    let y = data.y();
    let mut u = Array1::<f64>::zeros(features.dim());
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    let mut objective_trace = Vec::with_capacity(cfg.steps + 1);
    let mut diverged = false;
    for t in 0..=cfg.steps {
        let out = phi.dot(&u);
        let mut loss = 0.0;
        let coef: Array1<f64> = out
            .iter()
            .zip(y)
            .map(|(&p, &yy)| {
                loss += LossKind::Hinge.value(p, yy);
                LossKind::Hinge.derivative(p, yy) / m
            })
            .collect();
        loss /= m;
        let objective = loss + 0.5 * cfg.lambda * u.dot(&u);
        loss_trace.push(loss);
        objective_trace.push(objective);
        if !objective.is_finite() {
            diverged = true;
            break;
        }
        if t == cfg.steps {
            break;
        }
        let grad = phi.t().dot(&coef) + cfg.lambda * &u;
        let eta = match cfg.schedule {
            Phase2Schedule::InverseLambdaT => 1.0 / (cfg.lambda * (t + 1) as f64),
            Phase2Schedule::Constant(eta) => eta,
        };
        u.scaled_add(-eta, &grad);
    }
    Ok(Phase2Result { u: u.to_vec(), loss_trace, objective_trace, diverged })
}

/// Step sizes for the under-sparse step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum UnderSparseMode {
    /// `η = ε/(2k|ξ_on|)`, `λ = 1 − ε/2k`, and `γ` halfway between the
    /// population magnitudes `|ξ_off|` and `|ξ_on|`; label-aware.
    Theory,
    Manual { eta: f64, gamma: f64, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkReport {
    pub eps_init: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Population gradient magnitudes on `S \ S'` and off `S` for good neurons.
    pub xi_on: f64,
    pub xi_off: f64,
    /// Neurons whose active set lies inside S.
    pub good_neurons: Vec<usize>,
    /// Good neurons with `w ≈ ε/2k` on S and `|w| ≤ 2ε²` off S.
    pub qualifying: Vec<usize>,
    /// Grid biases carried by at least one qualifying neuron.
    pub biases_covered: Vec<f64>,
    pub grid: Vec<f64>,
    /// Smallest empirical `|g|` on `S \ S'` and largest off S, over good neurons.
    pub min_grad_on: Option<f64>,
    pub max_grad_off: Option<f64>,
    /// `γ` does not separate the empirical good-neuron gradients.
    pub infeasible_gamma: bool,
    /// 0-1 error on the cube of the best readout of one qualifying neuron per bias.
    pub subnetwork_parity_error: Option<f64>,
    pub pass: bool,
}

/// One truncated gradient step on the first-layer weights of an under-sparse init.
pub fn undersparse_one_step(
    params: &MlpParams,
    data: &Dataset,
    inst: &ParityInstance,
    s: usize,
    eps_init: f64,
    grid: &[f64],
    mode: UnderSparseMode,
) -> Result<(MlpParams, SubnetworkReport)> {
    let (n, k) = (inst.n(), inst.k());
    if s >= k {
        return invalid(format!("under-sparse pipeline needs s < k, got s = {s}, k = {k}"));
    }
    if data.is_empty() {
        return invalid("under-sparse step needs a nonempty dataset");
    }
    if params.input_dim() != n {
        return Err(LabError::DimensionMismatch { expected: n, got: params.input_dim() });
    }
    let probe = SparseNeuron::under_sparse(n, inst.support()[..s].iter().copied(), eps_init, eps_init / (2.0 * k as f64))?;
    let oracle = pop_grad_undersparse(&probe, inst)?;
    let off_index = (0..n).find(|i| !inst.contains(*i)).ok_or_else(|| LabError::InvalidArgument("k = n leaves no irrelevant coordinate".into()))?;
    let xi_on = oracle[inst.support()[s]].abs();
    let xi_off = oracle[off_index].abs();
    let (eta, gamma, lambda) = match mode {
        UnderSparseMode::Theory => (eps_init / (2.0 * k as f64 * xi_on), 0.5 * (xi_on + xi_off), 1.0 - eps_init / (2.0 * k as f64)),
        UnderSparseMode::Manual { eta, gamma, lambda } => (eta, gamma, lambda),
    };

    let (_, grads) = loss_and_grad(params, data.x(), data.y(), LossKind::Hinge)?;
    let mut next = params.clone();
    for (wv, &g) in next.w.iter_mut().zip(grads.w.iter()) {
        let g = if g.abs() <= gamma { 0.0 } else { g };
        *wv = (1.0 - lambda) * *wv - eta * g;
    }

    let actives = active_sets(params);
    let good: Vec<usize> = (0..params.width())
        .filter(|&i| actives[i].len() == s && actives[i].iter().all(|&j| inst.contains(j)))
        .collect();
    let mut min_on: Option<f64> = None;
    let mut max_off: Option<f64> = None;
    for &i in &good {
        for j in 0..n {
            let g = grads.w[[i, j]].abs();
            if inst.contains(j) && actives[i].binary_search(&j).is_err() {
                min_on = Some(min_on.map_or(g, |v| v.min(g)));
            } else if !inst.contains(j) {
                max_off = Some(max_off.map_or(g, |v| v.max(g)));
            }
        }
    }
    let infeasible_gamma = match (min_on, max_off) {
        (Some(on), Some(off)) => off >= on || off > gamma || on <= gamma,
        _ => false,
    };

    let target = eps_init / (2.0 * k as f64);
    let tol_on = eps_init * eps_init * k as f64;
    let tol_off = 2.0 * eps_init * eps_init;
    let qualifying: Vec<usize> = good
        .iter()
        .copied()
        .filter(|&i| {
            (0..n).all(|j| {
                let w = next.w[[i, j]];
                if inst.contains(j) {
                    (w - target).abs() <= tol_on
                } else {
                    w.abs() <= tol_off
                }
            })
        })
        .collect();
    let mut biases_covered: Vec<f64> = grid.iter().copied().filter(|b| qualifying.iter().any(|&i| params.b[i] == *b)).collect();
    biases_covered.dedup();
    let pass = !infeasible_gamma && qualifying.len() > k && biases_covered.len() == grid.len();
    let subnetwork_parity_error = if biases_covered.len() == grid.len() && n <= 16 {
        Some(subnetwork_parity_error(&next, inst, &qualifying, grid, eps_init)?)
    } else {
        None
    };
    let report = SubnetworkReport {
        eps_init,
        eta,
        gamma,
        lambda,
        xi_on,
        xi_off,
        good_neurons: good,
        qualifying,
        biases_covered,
        grid: grid.to_vec(),
        min_grad_on: min_on,
        max_grad_off: max_off,
        infeasible_gamma,
        subnetwork_parity_error,
        pass,
    };
    Ok((next, report))
}

/// Reads out the parity from one qualifying neuron per grid bias, using the
/// exact solution for idealised features `σ(ε t/2k + b)`, and measures the
/// cube error of the actual post-step neurons.
fn subnetwork_parity_error(params: &MlpParams, inst: &ParityInstance, qualifying: &[usize], grid: &[f64], eps: f64) -> Result<f64> {
    let k = inst.k();
    let chosen: Vec<usize> = grid.iter().map(|b| *qualifying.iter().find(|&&i| params.b[i] == *b).expect("bias covered")).collect();
    let scale = rat(eps) / BigRational::from_integer(BigInt::from(2 * k));
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for step in 0..=k {
        let t = BigRational::from_integer(BigInt::from(2 * step as i64 - k as i64));
        let mut row = vec![BigRational::one()];
        for &b in grid {
            let z = &scale * &t + rat(b);
            row.push(if z.is_positive() { z } else { BigRational::zero() });
        }
        rows.push(row);
        rhs.push(BigRational::from_integer(BigInt::from(if (k - step) % 2 == 1 { -1 } else { 1 })));
    }
    let nu: Vec<f64> = solve_rational(rows, rhs)?.iter().map(rational_to_f64).collect();
    let sub = params.subnetwork(&chosen)?;
    let sub = MlpParams { u: Array1::from(nu[1..].to_vec()), beta: nu[0], ..sub };
    let cube = crate::data::full_cube(inst)?;
    let pred = crate::mlp::predict(&sub, cube.x())?;
    Ok(crate::mlp::zero_one_error(pred.view(), cube.y()))
}

/// Width `c·k²(n/k)^s` used for the under-sparse construction.
pub fn undersparse_width(n: usize, k: usize, s: usize, c: f64) -> usize {
    let r = (c * (k * k) as f64 * (n as f64 / k as f64).powi(s as i32)).ceil() as usize;
    r + r % 2
}

/// Inputs for an end-to-end over-sparse run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OversparseRun {
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub r: usize,
    /// Sample size; `None` uses the full cube.
    pub m: Option<usize>,
    pub seed: u64,
    pub eps_accuracy: f64,
    /// Norm proxy for `λ = ε/B²`; defaults to `‖ν‖₂`.
    pub b_proxy: Option<f64>,
    pub phase2_steps: usize,
    pub test_size: usize,
}

impl Default for OversparseRun {
    fn default() -> Self {
        Self { n: 8, k: 2, s: 3, r: 200, m: None, seed: 0, eps_accuracy: 0.1, b_proxy: None, phase2_steps: 20_000, test_size: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversparseReport {
    pub config: OversparseRun,
    pub eta: f64,
    pub good_neurons: usize,
    /// Every good neuron ends with exactly `±1/2k` on S.
    pub good_weights_exact: bool,
    /// Largest `|w|` of neurons missing two or more relevant coordinates.
    pub bad_max_abs_weight: f64,
    pub r_prime: Option<f64>,
    pub psi_norm_max: f64,
    pub psi_norm_bound: Option<f64>,
    /// `max_x ‖ψ(x) − φ⁽¹⁾(x)‖₂` over the cube.
    pub phi_psi_distance: f64,
    /// Largest entrywise gap between the sample and population first-layer gradients.
    pub tau: f64,
    pub closeness_bound: Option<f64>,
    pub ideal: IdealSecondLayer,
    pub ideal_cube_error: f64,
    pub ideal_max_deviation: f64,
    pub phase2_lambda: f64,
    pub phase2_final_objective: f64,
    pub phase2_norm_ok: bool,
    pub phase2_train_error: f64,
    pub phase2_test_error: f64,
    pub phase2_diverged: bool,
}

/// Runs both phases and every intermediate check on one seed.
pub fn run_oversparse(cfg: &OversparseRun) -> Result<OversparseReport> {
    use crate::data::{full_cube, generate_dataset, sample_dataset};
    use crate::mlp::{init_params, over_sparse_bias_grid, InitScheme};
    use crate::rng::{stream_rng, Stream};

    let inst = ParityInstance::leading(cfg.n, cfg.k)?;
    let init = init_params(&InitScheme::over_sparse_theory(cfg.k, cfg.s), cfg.r, cfg.n, cfg.seed)?;
    let cube = full_cube(&inst)?;
    let data = match cfg.m {
        Some(m) => generate_dataset(&inst, m, cfg.seed)?,
        None => cube.clone(),
    };
    let p1 = oversparse_phase1(&init, &data, &inst, cfg.s)?;
    let grid = over_sparse_bias_grid(cfg.k);
    let layout = good_neuron_layout(&init, &inst, cfg.s, &grid)?;
    let target = 1.0 / (2.0 * cfg.k as f64);
    let good_weights_exact = layout.plus.iter().flatten().all(|&i| inst.support().iter().all(|&j| p1.params.w[[i, j]] == target))
        && layout.minus.iter().flatten().all(|&i| inst.support().iter().all(|&j| p1.params.w[[i, j]] == -target));
    let actives = active_sets(&init);
    let bad_max_abs_weight = (0..cfg.r)
        .filter(|&i| inst.support().iter().filter(|j| actives[i].binary_search(j).is_err()).count() >= 2)
        .flat_map(|i| p1.params.w.row(i).to_vec())
        .fold(0.0, |a: f64, v| a.max(v.abs()));

    let psi_star = ideal_feature_map(&init, &inst, cfg.s, false)?;
    let psi = ideal_feature_map(&init, &inst, cfg.s, true)?;
    let psi_norm_max = psi.eval_batch(cube.x())?.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    let r_prime = layout.r_prime();
    let phi_psi_distance = max_feature_distance(&psi, &p1.phi1, cube.x())?;
    let (_, pop) = loss_and_grad(&init, cube.x(), cube.y(), LossKind::Hinge)?;
    let (_, emp) = loss_and_grad(&init, data.x(), data.y(), LossKind::Hinge)?;
    let tau = pop.w.iter().zip(emp.w.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let k = cfg.k as f64;

    let ideal = construct_ideal_second_layer(cfg.k, &layout, cfg.r)?;
    let h = linear_readout(&psi_star, &ideal.u_star, cube.x())?;
    let ideal_cube_error = crate::mlp::zero_one_error(h.view(), cube.y());
    let ideal_max_deviation = h.iter().zip(cube.y()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let p2cfg = Phase2Config::from_accuracy(cfg.eps_accuracy, cfg.b_proxy.unwrap_or(ideal.norm_bound), cfg.phase2_steps)?;
    let p2 = oversparse_phase2(&p1.phi1, &data, &p2cfg)?;
    let test = sample_dataset(&inst, cfg.test_size, &mut stream_rng(cfg.seed, Stream::Test))?;
    let unorm: f64 = p2.u.iter().map(|v| v * v).sum();
    Ok(OversparseReport {
        config: cfg.clone(),
        eta: p1.eta,
        good_neurons: layout.good_count(),
        good_weights_exact,
        bad_max_abs_weight,
        r_prime,
        psi_norm_max,
        psi_norm_bound: r_prime.map(|rp| (8.0 * k * rp).sqrt()),
        phi_psi_distance,
        tau,
        closeness_bound: r_prime.map(|rp| 4.0 * k * rp * cfg.n as f64 * p1.eta * tau),
        ideal,
        ideal_cube_error,
        ideal_max_deviation,
        phase2_lambda: p2cfg.lambda,
        phase2_final_objective: p2.final_objective(),
        phase2_norm_ok: unorm <= 2.0 / p2cfg.lambda * p2.final_objective() * (1.0 + 1e-12),
        phase2_train_error: readout_error(&p1.phi1, &p2.u, &data)?,
        phase2_test_error: readout_error(&p1.phi1, &p2.u, &test)?,
        phase2_diverged: p2.diverged,
    })
}

/// Inputs for an under-sparse run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UndersparseRun {
    pub n: usize,
    pub k: usize,
    pub s: usize,
    /// Width is `width_const·k²(n/k)^s`, rounded up to even.
    pub width_const: f64,
    /// Defaults to `1/(2n)`.
    pub eps_init: Option<f64>,
    pub m: Option<usize>,
    pub seed: u64,
}

impl Default for UndersparseRun {
    fn default() -> Self {
        Self { n: 10, k: 4, s: 2, width_const: 4.0, eps_init: None, m: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndersparseRunReport {
    pub config: UndersparseRun,
    pub r: usize,
    pub report: SubnetworkReport,
}

pub fn run_undersparse(cfg: &UndersparseRun) -> Result<UndersparseRunReport> {
    use crate::data::{full_cube, generate_dataset};
    use crate::mlp::{init_params, under_sparse_bias_grid, InitScheme};

    let eps = cfg.eps_init.unwrap_or(1.0 / (2.0 * cfg.n as f64));
    let inst = ParityInstance::leading(cfg.n, cfg.k)?;
    let r = undersparse_width(cfg.n, cfg.k, cfg.s, cfg.width_const);
    let init = init_params(&InitScheme::under_sparse_theory(cfg.k, cfg.s, eps), r, cfg.n, cfg.seed)?;
    let data = match cfg.m {
        Some(m) => generate_dataset(&inst, m, cfg.seed)?,
        None => full_cube(&inst)?,
    };
    let grid = under_sparse_bias_grid(cfg.k, eps);
    let (_, report) = undersparse_one_step(&init, &data, &inst, cfg.s, eps, &grid, UnderSparseMode::Theory)?;
    Ok(UndersparseRunReport { config: cfg.clone(), r, report })
}
