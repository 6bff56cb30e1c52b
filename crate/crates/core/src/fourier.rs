//! Boolean Fourier analysis over the cube {±1}^n.
//!
//! Inputs are encoded as bit patterns with bit `i` set iff `x_i = +1`. Under
//! this encoding the parity `χ_S(b)` equals `(-1)^{|S \ b|}`.

use num_bigint::BigInt;
use num_integer::binomial;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

/// Largest dimension for which full truth tables are materialised.
pub const MAX_TABLE_DIM: usize = 24;

/// An `(n, k)` sparse parity problem: the hidden support `S ⊆ [n]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParityInstance {
    n: usize,
    support: Vec<usize>,
}

impl ParityInstance {
    pub fn new(n: usize, support: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut support: Vec<usize> = support.into_iter().collect();
        support.sort_unstable();
        if support.is_empty() {
            return invalid("parity support must be nonempty (k >= 1)");
        }
        if support.windows(2).any(|w| w[0] == w[1]) {
            return invalid(format!("duplicate index in support {support:?}"));
        }
        if let Some(&max) = support.last() {
            if max >= n {
                return invalid(format!("support index {max} out of range for n = {n}"));
            }
        }
        Ok(Self { n, support })
    }

    /// The support `{0, .., k-1}`.
    pub fn leading(n: usize, k: usize) -> Result<Self> {
        Self::new(n, 0..k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn contains(&self, i: usize) -> bool {
        self.support.binary_search(&i).is_ok()
    }

    /// Bit mask of the support; only meaningful for `n <= 64`.
    pub fn mask(&self) -> u64 {
        index_mask(&self.support)
    }

    /// `χ_S(x)` for a ±1 vector.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        eval_parity(self, x)
    }

    /// `χ_S` on a bit-encoded input.
    #[inline]
    pub fn eval_bits(&self, bits: u64) -> f64 {
        parity_of_mask(self.mask(), bits)
    }
}

pub(crate) fn index_mask(indices: &[usize]) -> u64 {
    indices.iter().fold(0u64, |m, &i| m | (1u64 << i))
}

/// `χ_mask(bits)` under the bit = +1 encoding.
#[inline]
pub fn parity_of_mask(mask: u64, bits: u64) -> f64 {
    if (mask & !bits).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Writes the ±1 vector encoded by `bits` into `out`.
#[inline]
pub fn bits_to_signs(bits: u64, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate() {
        *v = if (bits >> i) & 1 == 1 { 1.0 } else { -1.0 };
    }
}

fn check_signs(x: &[f64]) -> Result<()> {
    if x.iter().all(|&v| v == 1.0 || v == -1.0) {
        Ok(())
    } else {
        invalid("input entries must be exactly +1 or -1")
    }
}

pub fn eval_parity(inst: &ParityInstance, x: &[f64]) -> Result<f64> {
    if x.len() != inst.n {
        return Err(LabError::DimensionMismatch { expected: inst.n, got: x.len() });
    }
    check_signs(x)?;
    Ok(inst.support.iter().map(|&i| x[i]).product())
}

/// `sgn(Σ x_i)` with ties mapped to −1.
pub fn eval_majority(x: &[f64]) -> f64 {
    if x.iter().sum::<f64>() > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Indicator that the coordinate sum is zero.
pub fn eval_half(x: &[f64]) -> f64 {
    if x.iter().sum::<f64>() == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// How `sgn(0)` is resolved for Majority on an even number of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieRule {
    /// `sgn(0) = -1`.
    Negative,
    /// `sgn(0) = +1`.
    Positive,
}

/// An exact Fourier coefficient with its nearest `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierCoefficient {
    pub exact: BigRational,
    pub approx: f64,
}

impl FourierCoefficient {
    pub fn from_rational(exact: BigRational) -> Self {
        let approx = rational_to_f64(&exact);
        Self { exact, approx }
    }
}

pub(crate) fn rational_to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

pub(crate) fn big_binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    binomial(BigInt::from(n), BigInt::from(k))
}

/// `(-1)^j C(m,j)/C(2m,2j) · C(2m,m)/2^{2m}`: the common value of
/// `Half_{2m}(2j)` and `Maj_{2m+1}(2j+1)`.
fn closed_form(m: u64, j: u64) -> BigRational {
    debug_assert!(j <= m);
    let num = big_binomial(m, j) * big_binomial(2 * m, m);
    let den = big_binomial(2 * m, 2 * j) * (BigInt::one() << (2 * m) as usize);
    let q = BigRational::new(num, den);
    if j % 2 == 1 {
        -q
    } else {
        q
    }
}

/// Degree-`d` coefficient of `Maj_n` for odd `n` and odd `d`.
pub fn maj_fourier_coeff(n: usize, d: usize) -> Result<FourierCoefficient> {
    if n.is_multiple_of(2) || d.is_multiple_of(2) {
        return invalid(format!("maj_fourier_coeff needs odd n and odd d, got n = {n}, d = {d}"));
    }
    if d > n {
        return invalid(format!("order {d} exceeds dimension {n}"));
    }
    let m = (n as u64 - 1) / 2;
    let j = (d as u64 - 1) / 2;
    Ok(FourierCoefficient::from_rational(closed_form(m, j)))
}

/// Degree-`d` coefficient of `Half_n` for even `n` and even `d`.
pub fn half_fourier_coeff(n: usize, d: usize) -> Result<FourierCoefficient> {
    if n % 2 == 1 || d % 2 == 1 {
        return invalid(format!("half_fourier_coeff needs even n and even d, got n = {n}, d = {d}"));
    }
    if d > n {
        return invalid(format!("order {d} exceeds dimension {n}"));
    }
    Ok(FourierCoefficient::from_rational(closed_form(n as u64 / 2, d as u64 / 2)))
}

/// Exact degree-`d` coefficient of `Half_n` for any `n`, `d`.
pub fn half_coeff_exact(n: usize, d: usize) -> BigRational {
    if d > n || n % 2 == 1 || d % 2 == 1 {
        return BigRational::zero();
    }
    closed_form(n as u64 / 2, d as u64 / 2)
}

/// Exact degree-`d` coefficient of `Maj_n` for any `n` under the given tie rule.
///
/// For even `n`, `Maj_n = Sym_n ∓ Half_n` where `Sym_n` (ties to 0) is odd and
/// agrees with `Maj_{n+1}` on sets avoiding the extra coordinate.
pub fn majority_coeff_exact(n: usize, d: usize, tie: TieRule) -> BigRational {
    if d > n {
        return BigRational::zero();
    }
    if n % 2 == 1 {
        if d.is_multiple_of(2) {
            return BigRational::zero();
        }
        return closed_form((n as u64 - 1) / 2, (d as u64 - 1) / 2);
    }
    if d % 2 == 1 {
        return closed_form(n as u64 / 2, (d as u64 - 1) / 2);
    }
    let half = closed_form(n as u64 / 2, d as u64 / 2);
    match tie {
        TieRule::Negative => -half,
        TieRule::Positive => half,
    }
}

/// A full truth table of a real-valued function on {±1}^n.
#[derive(Debug, Clone, PartialEq)]
pub struct BooleanFnTable {
    n: usize,
    values: Vec<f64>,
}

impl BooleanFnTable {
    pub fn from_fn(n: usize, mut f: impl FnMut(u64) -> f64) -> Result<Self> {
        guard_dim(n)?;
        let values = (0..1u64 << n).map(&mut f).collect();
        Ok(Self { n, values })
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        guard_dim(n)?;
        if values.len() != 1 << n {
            return Err(LabError::DimensionMismatch { expected: 1 << n, got: values.len() });
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bits: u64) -> f64 {
        self.values[bits as usize]
    }
}

pub(crate) fn guard_dim(n: usize) -> Result<()> {
    if n > MAX_TABLE_DIM {
        Err(LabError::ScaleGuard { n, limit: MAX_TABLE_DIM })
    } else {
        Ok(())
    }
}

fn signed_sum(bits: u64, n: usize) -> i64 {
    2 * (bits.count_ones() as i64) - n as i64
}

/// Truth table of `Maj_n` with `sgn(0) = -1`; works for every `n`.
pub fn majority_table_any_n(n: usize) -> Result<BooleanFnTable> {
    BooleanFnTable::from_fn(n, |b| if signed_sum(b, n) > 0 { 1.0 } else { -1.0 })
}

pub fn half_table(n: usize) -> Result<BooleanFnTable> {
    BooleanFnTable::from_fn(n, |b| if signed_sum(b, n) == 0 { 1.0 } else { 0.0 })
}

pub fn parity_table(inst: &ParityInstance) -> Result<BooleanFnTable> {
    let mask = inst.mask();
    BooleanFnTable::from_fn(inst.n(), |b| parity_of_mask(mask, b))
}

/// `(1/2^n) Σ_x f(x) χ_S(x)` by direct enumeration.
pub fn brute_force_fourier(f: &BooleanFnTable, support: &[usize]) -> Result<f64> {
    if let Some(&bad) = support.iter().find(|&&i| i >= f.n) {
        return invalid(format!("index {bad} out of range for n = {}", f.n));
    }
    let mask = index_mask(support);
    let total: f64 = f
        .values
        .iter()
        .enumerate()
        .map(|(b, &v)| v * parity_of_mask(mask, b as u64))
        .sum();
    Ok(total / (1u64 << f.n) as f64)
}

/// All `2^n` Fourier coefficients at once, indexed by support mask.
pub fn walsh_hadamard(f: &BooleanFnTable) -> Vec<f64> {
    let mut a = f.values.clone();
    let len = a.len();
    let mut h = 1;
    while h < len {
        for block in (0..len).step_by(2 * h) {
            for i in block..block + h {
                let (x, y) = (a[i], a[i + h]);
                a[i] = x + y;
                a[i + h] = x - y;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / len as f64;
    for (mask, v) in a.iter_mut().enumerate() {
        // standard transform uses x_i = -1 on set bits; flip to the bit = +1 encoding
        let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        *v *= sign * scale;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn parity_examples() {
        let inst = ParityInstance::new(3, [0, 2]).unwrap();
        assert_eq!(eval_parity(&inst, &[1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(eval_parity(&inst, &[-1.0, 1.0, 1.0]).unwrap(), -1.0);
        assert!(ParityInstance::new(3, []).is_err());
        assert!(eval_parity(&inst, &[1.0, 1.0]).is_err());
        assert!(eval_parity(&inst, &[1.0, 0.5, 1.0]).is_err());
        assert!(ParityInstance::new(3, [0, 3]).is_err());
        assert!(ParityInstance::new(3, [1, 1]).is_err());
    }

    #[test]
    fn parity_bits_agree_with_vectors() {
        let inst = ParityInstance::new(5, [1, 3, 4]).unwrap();
        let mut x = [0.0; 5];
        for b in 0..32u64 {
            bits_to_signs(b, &mut x);
            assert_eq!(inst.eval_bits(b), inst.eval(&x).unwrap());
        }
    }

    #[test]
    fn majority_and_half_examples() {
        assert_eq!(eval_majority(&[1.0, 1.0, -1.0]), 1.0);
        assert_eq!(eval_majority(&[1.0, -1.0]), -1.0);
        assert_eq!(eval_majority(&[-1.0, -1.0, -1.0]), -1.0);
        assert_eq!(eval_half(&[1.0, -1.0]), 1.0);
        assert_eq!(eval_half(&[1.0, 1.0]), 0.0);
        assert_eq!(eval_half(&[1.0, -1.0, 1.0, -1.0]), 1.0);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(maj_fourier_coeff(3, 1).unwrap().exact, q(1, 2));
        assert_eq!(maj_fourier_coeff(3, 3).unwrap().exact, q(-1, 2));
        assert_eq!(maj_fourier_coeff(1, 1).unwrap().exact, q(1, 1));
        assert_eq!(maj_fourier_coeff(5, 1).unwrap().exact, q(3, 8));
        assert_eq!(half_fourier_coeff(2, 0).unwrap().exact, q(1, 2));
        assert_eq!(half_fourier_coeff(2, 2).unwrap().exact, q(-1, 2));
        assert_eq!(half_fourier_coeff(4, 2).unwrap().exact, q(-1, 8));
        assert!(maj_fourier_coeff(4, 1).is_err());
        assert!(maj_fourier_coeff(5, 2).is_err());
        assert!(maj_fourier_coeff(3, 5).is_err());
        assert!(half_fourier_coeff(3, 0).is_err());
        assert!(half_fourier_coeff(4, 1).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let maj3 = majority_table_any_n(3).unwrap();
        assert_eq!(brute_force_fourier(&maj3, &[1]).unwrap(), 0.5);
        let half4 = half_table(4).unwrap();
        assert_eq!(brute_force_fourier(&half4, &[0]).unwrap(), 0.0);
        let chi = parity_table(&ParityInstance::new(2, [0, 1]).unwrap()).unwrap();
        assert_eq!(brute_force_fourier(&chi, &[0, 1]).unwrap(), 1.0);
        assert!(brute_force_fourier(&maj3, &[3]).is_err());
    }

    #[test]
    fn majority_table_edge_cases() {
        let t2 = majority_table_any_n(2).unwrap();
        assert_eq!(brute_force_fourier(&t2, &[0]).unwrap(), 0.5);
        let t1 = majority_table_any_n(1).unwrap();
        assert_eq!(t1.values(), &[-1.0, 1.0]);
        assert!(matches!(majority_table_any_n(25), Err(LabError::ScaleGuard { .. })));
    }

    #[test]
    fn even_majority_coefficients_match_enumeration() {
        for n in [2usize, 4, 6, 8] {
            let table = majority_table_any_n(n).unwrap();
            let flipped = BooleanFnTable::from_fn(n, |b| if signed_sum(b, n) >= 0 { 1.0 } else { -1.0 }).unwrap();
            for d in 0..=n {
                let support: Vec<usize> = (0..d).collect();
                let neg = brute_force_fourier(&table, &support).unwrap();
                let pos = brute_force_fourier(&flipped, &support).unwrap();
                assert_eq!(neg, rational_to_f64(&majority_coeff_exact(n, d, TieRule::Negative)), "n={n} d={d}");
                assert_eq!(pos, rational_to_f64(&majority_coeff_exact(n, d, TieRule::Positive)), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn walsh_hadamard_matches_direct() {
        let table = BooleanFnTable::from_fn(6, |b| ((b * 2654435761) % 17) as f64 / 17.0 - 0.5).unwrap();
        let all = walsh_hadamard(&table);
        for mask in 0..64u64 {
            let support: Vec<usize> = (0..6).filter(|i| mask >> i & 1 == 1).collect();
            let direct = brute_force_fourier(&table, &support).unwrap();
            assert!((all[mask as usize] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_dimensional_conventions() {
        assert_eq!(majority_coeff_exact(0, 0, TieRule::Negative), q(-1, 1));
        assert_eq!(half_coeff_exact(0, 0), q(1, 1));
    }
}
