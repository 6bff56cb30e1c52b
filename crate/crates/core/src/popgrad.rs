//! Population gradients of a single sparse ReLU neuron against a parity.
//!
//! Every quantity here is the correlation `E_x[σ'(⟨w,x⟩ + b) · x_i · χ_S(x)]`,
//! the label-dependent part of the first-layer gradient for any loss with
//! `ℓ'(ŷ, y) = -y + ℓ0(ŷ)`. `σ'(0)` is taken to be 0.
//!
//! Over-sparse neurons (`s` ones, zeros elsewhere, `s` odd) and under-sparse
//! neurons (`s` ones, a small background weight `ε` elsewhere, `s < k`) have
//! closed forms in terms of Majority and Half coefficients; the
//! [`brute_force_neuron_grad`] oracle enumerates the cube instead.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::fourier::{
    big_binomial, guard_dim, half_coeff_exact, majority_coeff_exact, maj_fourier_coeff,
    parity_of_mask, rational_to_f64, ParityInstance, TieRule,
};
use crate::rng::LabRng;
use rand::SeedableRng;

/// A ReLU neuron with weight 1 on `active` and `background` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseNeuron {
    n: usize,
    active: Vec<usize>,
    background: f64,
    bias: f64,
}

impl SparseNeuron {
    pub fn new(n: usize, active: impl IntoIterator<Item = usize>, background: f64, bias: f64) -> Result<Self> {
        let mut active: Vec<usize> = active.into_iter().collect();
        active.sort_unstable();
        active.dedup();
        if let Some(&max) = active.last() {
            if max >= n {
                return invalid(format!("active index {max} out of range for n = {n}"));
            }
        }
        let s = active.len();
        if !(background == 0.0 || (background > 0.0 && background * ((n - s) as f64) < 1.0)) {
            return invalid(format!(
                "background weight {background} must be 0 or in (0, 1/(n - s)) with n - s = {}",
                n - s
            ));
        }
        if !bias.is_finite() {
            return Err(LabError::NonFinite("neuron bias"));
        }
        Ok(Self { n, active, background, bias })
    }

    /// An over-sparse neuron: ones on `active`, zeros elsewhere.
    pub fn over_sparse(n: usize, active: impl IntoIterator<Item = usize>, bias: f64) -> Result<Self> {
        Self::new(n, active, 0.0, bias)
    }

    /// An under-sparse neuron: ones on `active`, `eps` elsewhere.
    pub fn under_sparse(n: usize, active: impl IntoIterator<Item = usize>, eps: f64, bias: f64) -> Result<Self> {
        if eps <= 0.0 {
            return invalid("under-sparse background weight must be positive");
        }
        Self::new(n, active, eps, bias)
    }

    /// Arbitrary weights (bypasses the sparse-structure invariant); used by oracles.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active.binary_search(&i).is_ok()
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| if self.is_active(i) { 1.0 } else { self.background })
            .collect()
    }
}

/// Exact and bound forms of the good-neuron probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodNeuronProbability {
    /// `C(n-k, s-k) / C(n, s)`.
    pub exact: BigRational,
    /// `(s / 2n)^k` as a rational.
    pub lower_bound_exact: BigRational,
    pub lower_bound: f64,
}

impl GoodNeuronProbability {
    pub fn exact_f64(&self) -> f64 {
        rational_to_f64(&self.exact)
    }
}

/// Probability that a uniformly random `s`-subset of `[n]` contains a fixed `k`-set.
pub fn good_neuron_probability(n: usize, k: usize, s: usize) -> Result<GoodNeuronProbability> {
    if k == 0 || s > n {
        return invalid(format!("need 1 <= k and s <= n, got n = {n}, k = {k}, s = {s}"));
    }
    let exact = if s < k {
        BigRational::zero()
    } else {
        BigRational::new(
            big_binomial((n - k) as u64, (s - k) as u64),
            big_binomial(n as u64, s as u64),
        )
    };
    let base = BigRational::new(BigInt::from(s), BigInt::from(2 * n));
    let lower_bound_exact = num_traits::pow(base, k);
    let lower_bound = rational_to_f64(&lower_bound_exact);
    Ok(GoodNeuronProbability { exact, lower_bound_exact, lower_bound })
}

/// Gradient constants for a good over-sparse neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct GapConstants {
    /// Entry on each relevant coordinate, `½·Maj_s(k-1)`.
    pub c_relevant: f64,
    /// Entry on each active irrelevant coordinate, `½·Maj_s(k+1)`.
    pub c_irrelevant: f64,
    pub c_relevant_exact: BigRational,
    pub c_irrelevant_exact: BigRational,
    /// `½·√ρ(k-1)·C(s,k-1)^{-1/2}`.
    pub kappa_lower: f64,
    /// `4k / s`.
    pub ratio_bound: f64,
}

impl GapConstants {
    /// `|c_irrelevant| / |c_relevant| <= 4k/s`, decided in rational arithmetic.
    pub fn ratio_within_bound(&self, k: usize, s: usize) -> bool {
        let lhs = self.c_irrelevant_exact.abs() * BigRational::from_integer(BigInt::from(s));
        let rhs = self.c_relevant_exact.abs() * BigRational::from_integer(BigInt::from(4 * k));
        lhs <= rhs
    }
}

/// `ρ(v) = 2/(π v 2^v) · C(v-1, (v-1)/2)` for odd `v`.
pub fn rho(v: usize) -> f64 {
    let c = big_binomial(v as u64 - 1, (v as u64 - 1) / 2).to_f64().unwrap_or(f64::INFINITY);
    2.0 / (std::f64::consts::PI * v as f64 * 2f64.powi(v as i32)) * c
}

pub fn gap_constants(k: usize, s: usize) -> Result<GapConstants> {
    if k % 2 == 1 || s.is_multiple_of(2) || k >= s || k == 0 {
        return invalid(format!("gap_constants needs even k >= 2, odd s, k < s; got k = {k}, s = {s}"));
    }
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let c_relevant_exact = maj_fourier_coeff(s, k - 1)?.exact * half.clone();
    let c_irrelevant_exact = maj_fourier_coeff(s, k + 1)?.exact * half;
    let binom = big_binomial(s as u64, k as u64 - 1).to_f64().unwrap_or(f64::INFINITY);
    Ok(GapConstants {
        c_relevant: rational_to_f64(&c_relevant_exact),
        c_irrelevant: rational_to_f64(&c_irrelevant_exact),
        c_relevant_exact,
        c_irrelevant_exact,
        kappa_lower: 0.5 * rho(k - 1).sqrt() / binom.sqrt(),
        ratio_bound: 4.0 * k as f64 / s as f64,
    })
}

fn check_dims(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<()> {
    if neuron.n != inst.n() {
        return Err(LabError::DimensionMismatch { expected: inst.n(), got: neuron.n });
    }
    Ok(())
}

fn half_rational() -> BigRational {
    BigRational::new(BigInt::from(1), BigInt::from(2))
}

/// Exact over-sparse population gradient.
///
/// Requires zero background, odd `s` and `|b| < 1/2`, so that the
/// pre-activation is a nonzero odd integer shifted by less than one half.
pub fn pop_grad_oversparse_exact(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<BigRational>> {
    check_dims(neuron, inst)?;
    if neuron.background != 0.0 {
        return invalid("over-sparse gradient needs zero background weight");
    }
    let s = neuron.s();
    if s.is_multiple_of(2) {
        return invalid(format!("over-sparse closed form needs odd s, got s = {s}"));
    }
    if neuron.bias.abs() >= 0.5 {
        return invalid(format!("over-sparse closed form needs |bias| < 1/2, got {}", neuron.bias));
    }
    let n = inst.n();
    let k = inst.k();
    let mut grad = vec![BigRational::zero(); n];
    let missing: Vec<usize> = inst.support().iter().copied().filter(|&i| !neuron.is_active(i)).collect();
    let half = half_rational();
    match missing.len() {
        0 => {
            let relevant = majority_coeff_exact(s, k - 1, TieRule::Negative) * half.clone();
            let irrelevant = majority_coeff_exact(s, k + 1, TieRule::Negative) * half;
            for &i in neuron.active() {
                grad[i] = if inst.contains(i) { relevant.clone() } else { irrelevant.clone() };
            }
        }
        1 => {
            grad[missing[0]] = majority_coeff_exact(s, k - 1, TieRule::Negative) * half;
        }
        _ => {}
    }
    Ok(grad)
}

pub fn pop_grad_oversparse(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<f64>> {
    Ok(pop_grad_oversparse_exact(neuron, inst)?.iter().map(rational_to_f64).collect())
}

/// Exact under-sparse population gradient for an arbitrary active set `S'`.
///
/// With `S̄ = S ∩ S'`:
/// - `i ∈ S`: `½·Half_s(|S̄ \ {i}|)·Maj_{n-s}(|S \ (S̄ ∪ {i})|)`
/// - `i ∉ S`: `½·Half_s(|S̄ ∪ (S' ∩ {i})|)·Maj_{n-s}(|(S ∪ {i}) \ S'|)`
///
/// When `n - s` is even the background sum can tie at zero; the bias then
/// decides activation, so `Maj_{n-s}` uses `sgn(0) = +1` iff `b > 0`.
pub fn pop_grad_undersparse_exact(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<BigRational>> {
    check_dims(neuron, inst)?;
    let n = inst.n();
    let k = inst.k();
    let s = neuron.s();
    let eps = neuron.background;
    if s >= k {
        return invalid(format!("under-sparse closed form needs s < k, got s = {s}, k = {k}"));
    }
    if s % 2 == 1 || k % 2 == 1 {
        return invalid(format!("under-sparse closed form needs even s and k, got s = {s}, k = {k}"));
    }
    if !(eps > 0.0 && eps * ((n - s) as f64) < 1.0) {
        return invalid(format!("eps_init must lie in (0, 1/(n - s)), got {eps} with n - s = {}", n - s));
    }
    if neuron.bias.abs() >= eps {
        return invalid(format!("bias {} must satisfy |b| < eps_init = {eps}", neuron.bias));
    }
    let tie = if neuron.bias > 0.0 { TieRule::Positive } else { TieRule::Negative };
    let rest = n - s;
    let s_bar = inst.support().iter().filter(|&&i| neuron.is_active(i)).count();
    let half = half_rational();
    let grad = (0..n)
        .map(|i| {
            let in_s = inst.contains(i);
            let in_active = neuron.is_active(i);
            let (half_order, maj_order) = if in_s {
                let h = if in_active { s_bar - 1 } else { s_bar };
                let covered = if in_active { s_bar } else { s_bar + 1 };
                (h, k - covered)
            } else if in_active {
                (s_bar + 1, k - s_bar)
            } else {
                (s_bar, k - s_bar + 1)
            };
            half_coeff_exact(s, half_order) * majority_coeff_exact(rest, maj_order, tie) * half.clone()
        })
        .collect();
    Ok(grad)
}

pub fn pop_grad_undersparse(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<f64>> {
    Ok(pop_grad_undersparse_exact(neuron, inst)?.iter().map(rational_to_f64).collect())
}

/// Ratio of good-neuron gradient magnitudes on `S \ S'` versus `[n] \ S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRatio {
    /// Value computed from the exact Majority coefficients.
    pub value: f64,
    /// `(n - s)/(k - s - 1)`, the form quoted alongside the one-step construction.
    pub quoted_form: f64,
    /// `(n - k + 1)/(k - s - 1)` (even `n - s`) or `(n - k)/(k - s - 1)` (odd `n - s`).
    pub derived_form: f64,
    pub matches_quoted_form: bool,
}

pub fn undersparse_gap_ratio(n: usize, k: usize, s: usize) -> Result<GapRatio> {
    if s >= k || k > n {
        return invalid(format!("need s < k <= n, got n = {n}, k = {k}, s = {s}"));
    }
    if k - s - 1 == 0 {
        return invalid("degenerate separation: k - s - 1 = 0");
    }
    if (k - s) % 2 == 1 {
        return invalid("k - s must be even for a good-neuron gap");
    }
    let rest = n - s;
    let on = majority_coeff_exact(rest, k - s - 1, TieRule::Negative);
    let off = majority_coeff_exact(rest, k - s + 1, TieRule::Negative);
    if off.is_zero() {
        return invalid(format!("irrelevant-coordinate gradient vanishes for n - s = {rest}, k - s + 1 = {}", k - s + 1));
    }
    let value = rational_to_f64(&(on.abs() / off.abs()));
    let denom = (k - s - 1) as f64;
    let quoted_form = (n - s) as f64 / denom;
    let derived_form = if rest.is_multiple_of(2) { (n - k + 1) as f64 } else { (n - k) as f64 } / denom;
    Ok(GapRatio {
        value,
        quoted_form,
        derived_form,
        matches_quoted_form: (value - quoted_form).abs() <= 1e-12 * quoted_form.abs(),
    })
}

/// Exact sign of `Σ_j w_j x_j + b`, with `x` given by `bits`.
pub(crate) struct ExactPreactivation {
    weights: Vec<f64>,
    bias: f64,
    slack: f64,
}

impl ExactPreactivation {
    pub(crate) fn new(weights: Vec<f64>, bias: f64) -> Self {
        let scale = weights.iter().map(|w| w.abs()).sum::<f64>() + bias.abs();
        let slack = scale * (weights.len() as f64 + 2.0) * f64::EPSILON * 2.0;
        Self { weights, bias, slack }
    }

    /// Returns true iff the exact pre-activation is strictly positive.
    pub(crate) fn is_active(&self, bits: u64) -> bool {
        let mut z = self.bias;
        for (j, &w) in self.weights.iter().enumerate() {
            if (bits >> j) & 1 == 1 {
                z += w;
            } else {
                z -= w;
            }
        }
        if z.abs() > self.slack {
            return z > 0.0;
        }
        let mut exact = BigRational::from_float(self.bias).unwrap_or_else(BigRational::zero);
        for (j, &w) in self.weights.iter().enumerate() {
            let q = BigRational::from_float(w).unwrap_or_else(BigRational::zero);
            if (bits >> j) & 1 == 1 {
                exact += q;
            } else {
                exact -= q;
            }
        }
        exact.is_positive()
    }
}

/// `E_x[σ'(⟨w,x⟩+b)·x_i·χ_S(x)]` by enumerating all `2^n` inputs.
pub fn brute_force_neuron_grad(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<f64>> {
    check_dims(neuron, inst)?;
    brute_force_grad_from_weights(&neuron.weights(), neuron.bias, inst)
}

/// Brute-force correlation gradient for arbitrary weights.
pub fn brute_force_grad_from_weights(weights: &[f64], bias: f64, inst: &ParityInstance) -> Result<Vec<f64>> {
    let n = inst.n();
    if weights.len() != n {
        return Err(LabError::DimensionMismatch { expected: n, got: weights.len() });
    }
    guard_dim(n)?;
    let pre = ExactPreactivation::new(weights.to_vec(), bias);
    let mask = inst.mask();
    let mut counts = vec![0i64; n];
    for bits in 0..1u64 << n {
        if !pre.is_active(bits) {
            continue;
        }
        let chi = (mask & !bits).count_ones().is_multiple_of(2);
        for (j, c) in counts.iter_mut().enumerate() {
            let xj = (bits >> j) & 1 == 1;
            if xj == chi {
                *c += 1;
            } else {
                *c -= 1;
            }
        }
    }
    let total = (1u64 << n) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Population gradient from the closed forms where they apply, else by enumeration.
pub fn population_grad(neuron: &SparseNeuron, inst: &ParityInstance) -> Result<Vec<f64>> {
    let s = neuron.s();
    let k = inst.k();
    if neuron.background == 0.0 && s % 2 == 1 && neuron.bias.abs() < 0.5 {
        return pop_grad_oversparse(neuron, inst);
    }
    if neuron.background > 0.0 && s < k && s.is_multiple_of(2) && k.is_multiple_of(2) && neuron.bias.abs() < neuron.background {
        return pop_grad_undersparse(neuron, inst);
    }
    brute_force_neuron_grad(neuron, inst)
}

/// Empirical correlation gradient of one neuron on bit-encoded inputs.
pub fn empirical_neuron_grad(neuron: &SparseNeuron, inst: &ParityInstance, inputs: &[u64]) -> Result<Vec<f64>> {
    check_dims(neuron, inst)?;
    if inputs.is_empty() {
        return invalid("empirical gradient needs at least one sample");
    }
    let pre = ExactPreactivation::new(neuron.weights(), neuron.bias);
    let mask = inst.mask();
    let n = inst.n();
    let mut counts = vec![0i64; n];
    for &bits in inputs {
        if !pre.is_active(bits) {
            continue;
        }
        let chi = parity_of_mask(mask, bits) > 0.0;
        for (j, c) in counts.iter_mut().enumerate() {
            if ((bits >> j) & 1 == 1) == chi {
                *c += 1;
            } else {
                *c -= 1;
            }
        }
    }
    let m = inputs.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / m).collect())
}

/// Sup-norm gap between empirical and population gradients over an ensemble,
/// on the given inputs.
pub fn empirical_grad_gap_on(neurons: &[SparseNeuron], inst: &ParityInstance, inputs: &[u64]) -> Result<f64> {
    let mut gap = 0.0f64;
    for neuron in neurons {
        let emp = empirical_neuron_grad(neuron, inst, inputs)?;
        let pop = population_grad(neuron, inst)?;
        for (a, b) in emp.iter().zip(&pop) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

/// Sup-norm gap on `m` i.i.d. uniform samples drawn from `seed`.
pub fn empirical_grad_gap(neurons: &[SparseNeuron], inst: &ParityInstance, m: usize, seed: u64) -> Result<f64> {
    if m == 0 {
        return invalid("empirical_grad_gap needs m >= 1");
    }
    let n = inst.n();
    if n > 64 {
        return invalid("bit-encoded sampling supports n <= 64");
    }
    let mut rng = LabRng::seed_from_u64(seed);
    let mask = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let inputs: Vec<u64> = (0..m).map(|_| rng.random::<u64>() & mask).collect();
    empirical_grad_gap_on(neurons, inst, &inputs)
}

/// Sample size sufficient for a sup-norm gap of `tau` with probability `1 - delta`
/// over `n·r` coordinates: `4·log(4nr/δ)/τ²`.
pub fn concentration_sample_size(n: usize, r: usize, tau: f64, delta: f64) -> usize {
    (4.0 * (4.0 * n as f64 * r as f64 / delta).ln() / (tau * tau)).ceil() as usize
}
