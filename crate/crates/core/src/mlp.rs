//! A 2-layer ReLU MLP `ŷ(x) = Σ_i u_i σ(⟨w_i, x⟩ + b_i) + β` with explicit backprop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// First-layer weights, one row per hidden neuron.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Second-layer weights.
    pub u: Array1<f64>,
    pub beta: f64,
}

impl MlpParams {
    pub fn new(w: Array2<f64>, b: Array1<f64>, u: Array1<f64>, beta: f64) -> Result<Self> {
        let r = w.nrows();
        if b.len() != r {
            return Err(LabError::DimensionMismatch { expected: r, got: b.len() });
        }
        if u.len() != r {
            return Err(LabError::DimensionMismatch { expected: r, got: u.len() });
        }
        Ok(Self { w, b, u, beta })
    }

    pub fn zeros(r: usize, n: usize) -> Self {
        Self { w: Array2::zeros((r, n)), b: Array1::zeros(r), u: Array1::zeros(r), beta: 0.0 }
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len() + self.u.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.beta.is_finite()
            && self.w.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.u.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LabError::NonFinite("MLP parameters"))
        }
    }

    /// The subnetwork on the listed neurons, in the given order; `β` is kept.
    pub fn subnetwork(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.width()) {
            return invalid(format!("neuron index {bad} out of range for width {}", self.width()));
        }
        Ok(Self {
            w: self.w.select(Axis(0), keep),
            b: self.b.select(Axis(0), keep),
            u: self.u.select(Axis(0), keep),
            beta: self.beta,
        })
    }

    /// Flattened parameter vector in the order `W` (row-major), `b`, `u`, `β`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(self.w.iter());
        v.extend(self.b.iter());
        v.extend(self.u.iter());
        v.push(self.beta);
        v
    }

    pub fn from_flat(r: usize, n: usize, flat: &[f64]) -> Result<Self> {
        let total = r * n + 2 * r + 1;
        if flat.len() != total {
            return Err(LabError::DimensionMismatch { expected: total, got: flat.len() });
        }
        let w = Array2::from_shape_vec((r, n), flat[..r * n].to_vec()).map_err(|e| LabError::InvalidArgument(e.to_string()))?;
        let b = Array1::from(flat[r * n..r * n + r].to_vec());
        let u = Array1::from(flat[r * n + r..r * n + 2 * r].to_vec());
        Self::new(w, b, u, flat[total - 1])
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn check_input(params: &MlpParams, n: usize) -> Result<()> {
    if n != params.input_dim() {
        return Err(LabError::DimensionMismatch { expected: params.input_dim(), got: n });
    }
    Ok(())
}

/// Pre-activation of neuron `i`, summed left to right.
#[inline]
fn preactivation(params: &MlpParams, i: usize, x: &[f64]) -> f64 {
    let row = params.w.row(i);
    let mut z = params.b[i];
    for (w, xv) in row.iter().zip(x) {
        z += w * xv;
    }
    z
}

/// Network output on one input.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    check_input(params, x.len())?;
    params.check_finite()?;
    let mut out = 0.0;
    for i in 0..params.width() {
        out += params.u[i] * relu(preactivation(params, i, x));
    }
    Ok(out + params.beta)
}

/// `Σ_{i ∈ keep} u_i σ(⟨w_i,x⟩ + b_i) + β`, with the same summation order as
/// [`forward`] on `params.subnetwork(keep)`.
pub fn partial_forward(params: &MlpParams, x: &[f64], keep: &[usize]) -> Result<f64> {
    check_input(params, x.len())?;
    let mut out = 0.0;
    for &i in keep {
        if i >= params.width() {
            return invalid(format!("neuron index {i} out of range"));
        }
        out += params.u[i] * relu(preactivation(params, i, x));
    }
    Ok(out + params.beta)
}

/// Hidden-layer pre-activations `XWᵀ + b` for a batch.
pub fn preactivations(params: &MlpParams, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = x.dot(&params.w.t());
    z += &params.b;
    z
}

/// Outputs on a batch (rows of `x`).
pub fn predict(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_input(params, x.ncols())?;
    let h = preactivations(params, x).mapv_into(relu);
    Ok(h.dot(&params.u) + params.beta)
}

/// 0-1 error of `sign(ŷ)` against ±1 labels, with `ŷ = 0` read as −1.
pub fn zero_one_error(pred: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let wrong = pred.iter().zip(y).filter(|(&p, &t)| (p > 0.0) != (t > 0.0)).count();
    wrong as f64 / y.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `max(1 - yŷ, 0)`.
    #[default]
    Hinge,
    /// `½(ŷ - y)²`, so `ℓ'(ŷ, y) = -y + ŷ`.
    Square,
}

impl LossKind {
    pub fn value(self, yhat: f64, y: f64) -> f64 {
        match self {
            LossKind::Hinge => (1.0 - y * yhat).max(0.0),
            LossKind::Square => 0.5 * (yhat - y) * (yhat - y),
        }
    }

    /// `∂ℓ/∂ŷ`; the hinge subgradient at margin exactly 1 is 0.
    pub fn derivative(self, yhat: f64, y: f64) -> f64 {
        match self {
            LossKind::Hinge => {
                if y * yhat < 1.0 {
                    -y
                } else {
                    0.0
                }
            }
            LossKind::Square => yhat - y,
        }
    }
}

/// Mean loss and its gradient on a batch, without input validation.
pub(crate) fn loss_and_grad_unchecked(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    loss: LossKind,
) -> (f64, MlpParams, Array1<f64>) {
    let m = y.len() as f64;
    let z = preactivations(params, x);
    let h = z.mapv(relu);
    let yhat = h.dot(&params.u) + params.beta;
    let mut total = 0.0;
    let g: Array1<f64> = Zip::from(&yhat)
        .and(&y)
        .map_collect(|&p, &t| {
            total += loss.value(p, t);
            loss.derivative(p, t) / m
        });
    let gu = h.t().dot(&g);
    let gbeta = g.sum();
    let mut delta = z;
    Zip::from(delta.rows_mut()).and(&g).for_each(|mut row, &gi| {
        Zip::from(&mut row).and(&params.u).for_each(|d, &uj| {
            *d = if *d > 0.0 { gi * uj } else { 0.0 };
        });
    });
    let gw = delta.t().dot(&x);
    let gb = delta.sum_axis(Axis(0));
    (total / m, MlpParams { w: gw, b: gb, u: gu, beta: gbeta }, yhat)
}

/// Mean loss over the batch and the exact gradient with respect to every parameter.
///
/// The ReLU derivative at 0 is 0; the hinge subgradient is `-y·∂ŷ` when the
/// margin is below 1 and 0 otherwise.
pub fn loss_and_grad(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    loss: LossKind,
) -> Result<(f64, MlpParams)> {
    if y.is_empty() {
        return invalid("loss_and_grad needs a nonempty batch");
    }
    if x.nrows() != y.len() {
        return Err(LabError::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    check_input(params, x.ncols())?;
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return invalid("labels must be exactly +1 or -1");
    }
    params.check_finite()?;
    let (l, g, _) = loss_and_grad_unchecked(params, x, y, loss);
    Ok((l, g))
}

/// One value per parameter group. Configs may give a single number for all four.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "LayerRatesRepr")]
pub struct LayerRates {
    pub w: f64,
    pub b: f64,
    pub u: f64,
    pub beta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PerGroup {
    w: f64,
    b: f64,
    u: f64,
    beta: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayerRatesRepr {
    Uniform(f64),
    PerGroup(PerGroup),
}

impl From<LayerRatesRepr> for LayerRates {
    fn from(r: LayerRatesRepr) -> Self {
        match r {
            LayerRatesRepr::Uniform(v) => Self::uniform(v),
            LayerRatesRepr::PerGroup(PerGroup { w, b, u, beta }) => Self { w, b, u, beta },
        }
    }
}

impl LayerRates {
    pub const fn uniform(v: f64) -> Self {
        Self { w: v, b: v, u: v, beta: v }
    }

    fn all(&self) -> [(&'static str, f64); 4] {
        [("w", self.w), ("b", self.b), ("u", self.u), ("beta", self.beta)]
    }
}

/// How the weight-decay coefficient enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayForm {
    /// `θ ← (1 - λ)θ - η g`.
    Multiplicative,
    /// `θ ← θ - η(g + λθ)`, i.e. decay factor `1 - ηλ` (PyTorch SGD `weight_decay`).
    #[default]
    Coupled,
}

/// Learning-rate schedule applied to every group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// `η_t = η / (1 + t / t0)`.
    InverseTime { t0: f64 },
}

impl Schedule {
    pub fn factor(self, step: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::InverseTime { t0 } => 1.0 / (1.0 + step as f64 / t0),
        }
    }
}

/// Update rule shared by training and the theory pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepRule {
    pub eta: LayerRates,
    pub lambda: LayerRates,
    /// Gradient entries with `|g| <= gamma` are zeroed when `gamma > 0`.
    pub gamma: f64,
    pub decay: DecayForm,
    pub schedule: Schedule,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            eta: LayerRates::uniform(0.1),
            lambda: LayerRates::uniform(0.01),
            gamma: 0.0,
            decay: DecayForm::default(),
            schedule: Schedule::Constant,
        }
    }
}

impl StepRule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.eta.all() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::Config { field: format!("eta.{name}"), message: format!("learning rate must be finite and >= 0, got {v}") });
            }
        }
        for (name, v) in self.lambda.all() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::Config { field: format!("lambda.{name}"), message: format!("weight decay must be finite and >= 0, got {v}") });
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(LabError::Config { field: "gamma".into(), message: format!("truncation threshold must be >= 0, got {}", self.gamma) });
        }
        if let Schedule::InverseTime { t0 } = self.schedule {
            if !(t0 > 0.0) {
                return Err(LabError::Config { field: "schedule.t0".into(), message: "t0 must be positive".into() });
            }
        }
        Ok(())
    }

    /// `(decay factor, learning rate)` for a group at `step`.
    fn coefficients(&self, eta: f64, lambda: f64, step: usize) -> (f64, f64) {
        let eta = eta * self.schedule.factor(step);
        match self.decay {
            DecayForm::Multiplicative => (1.0 - lambda, eta),
            DecayForm::Coupled => (1.0 - eta * lambda, eta),
        }
    }
}

#[inline]
fn update_group<'a>(theta: impl IntoIterator<Item = &'a mut f64>, grad: impl IntoIterator<Item = &'a f64>, keep: f64, eta: f64, gamma: f64) {
    for (t, &g) in theta.into_iter().zip(grad) {
        let g = if gamma > 0.0 && g.abs() <= gamma { 0.0 } else { g };
        *t = keep * *t - eta * g;
    }
}

/// In-place `θ ← c·θ - η·trunc_γ(g)` for every group.
pub fn apply_step(params: &mut MlpParams, grads: &MlpParams, rule: &StepRule, step: usize) {
    let gamma = rule.gamma;
    let (k, e) = rule.coefficients(rule.eta.w, rule.lambda.w, step);
    update_group(params.w.iter_mut(), grads.w.iter(), k, e, gamma);
    let (k, e) = rule.coefficients(rule.eta.b, rule.lambda.b, step);
    update_group(params.b.iter_mut(), grads.b.iter(), k, e, gamma);
    let (k, e) = rule.coefficients(rule.eta.u, rule.lambda.u, step);
    update_group(params.u.iter_mut(), grads.u.iter(), k, e, gamma);
    let (k, e) = rule.coefficients(rule.eta.beta, rule.lambda.beta, step);
    update_group(std::iter::once(&mut params.beta), std::iter::once(&grads.beta), k, e, gamma);
}

pub fn sgd_step(params: &MlpParams, grads: &MlpParams, rule: &StepRule, step: usize) -> Result<MlpParams> {
    if params.w.dim() != grads.w.dim() {
        return Err(LabError::DimensionMismatch { expected: params.w.len(), got: grads.w.len() });
    }
    grads.check_finite().map_err(|_| LabError::NonFinite("gradients"))?;
    let mut next = params.clone();
    apply_step(&mut next, grads, rule, step);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitVariant {
    /// Uniform on `[-1/√n, 1/√n]`.
    UniformDense,
    /// `s` ones per row, zeros elsewhere.
    OverSparse,
    /// `s` ones per row, `eps_init` elsewhere.
    UnderSparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum BiasInit {
    /// Uniform on `[-1/√n, 1/√n]`.
    #[default]
    Default,
    Zero,
    /// Uniform choice from the listed values.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    /// `u` uniform on `[-1/√r, 1/√r]`, `β` likewise.
    #[default]
    Default,
    /// `u ∈ {±1}` uniformly, `β = 0`.
    Signs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub variant: InitVariant,
    #[serde(default)]
    pub s: usize,
    #[serde(default)]
    pub eps_init: f64,
    #[serde(default)]
    pub bias: BiasInit,
    #[serde(default)]
    pub output: OutputInit,
    #[serde(default)]
    pub symmetric_pairing: bool,
}

/// Over-sparse bias grid `β_i = (−k + 2i + 1/16)/2k` for `i = 0..k/2`.
///
/// Starting at `i = 0` gives `k/2` values, which together with the constant
/// feature make the relevant-sum system square and nonsingular.
pub fn over_sparse_bias_grid(k: usize) -> Vec<f64> {
    let k2 = 2.0 * k as f64;
    (0..k / 2).map(|i| (-(k as f64) + 2.0 * i as f64 + 1.0 / 16.0) / k2).collect()
}

/// Under-sparse bias grid `{±ε(2j−1)/2k : j = 1..k/2}`, ascending.
pub fn under_sparse_bias_grid(k: usize, eps: f64) -> Vec<f64> {
    let k2 = 2.0 * k as f64;
    let pos: Vec<f64> = (1..=k / 2).map(|j| eps * (2 * j - 1) as f64 / k2).collect();
    pos.iter().rev().map(|v| -v).chain(pos.iter().copied()).collect()
}

impl InitScheme {
    pub fn uniform_dense() -> Self {
        Self { variant: InitVariant::UniformDense, s: 0, eps_init: 0.0, bias: BiasInit::Default, output: OutputInit::Default, symmetric_pairing: false }
    }

    /// `s`-hot rows with default biases and second layer.
    pub fn sparse(s: usize) -> Self {
        Self { variant: InitVariant::OverSparse, s, ..Self::uniform_dense() }
    }

    /// Binary `s`-hot rows, grid biases, `±1` output weights, symmetric pairs.
    pub fn over_sparse_theory(k: usize, s: usize) -> Self {
        Self {
            variant: InitVariant::OverSparse,
            s,
            eps_init: 0.0,
            bias: BiasInit::Grid(over_sparse_bias_grid(k)),
            output: OutputInit::Signs,
            symmetric_pairing: true,
        }
    }

    pub fn under_sparse_theory(k: usize, s: usize, eps_init: f64) -> Self {
        Self {
            variant: InitVariant::UnderSparse,
            s,
            eps_init,
            bias: BiasInit::Grid(under_sparse_bias_grid(k, eps_init)),
            output: OutputInit::Signs,
            symmetric_pairing: true,
        }
    }

    /// Short label used in result files.
    pub fn label(&self) -> &'static str {
        match self.variant {
            InitVariant::UniformDense => "dense",
            InitVariant::OverSparse => "sparse",
            InitVariant::UnderSparse => "undersparse",
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self.variant {
            InitVariant::UniformDense => {}
            InitVariant::OverSparse | InitVariant::UnderSparse => {
                if self.s == 0 || self.s > n {
                    return invalid(format!("sparsity s = {} must lie in 1..={n}", self.s));
                }
            }
        }
        if self.variant == InitVariant::UnderSparse && !(self.eps_init > 0.0 && self.eps_init * ((n - self.s) as f64) < 1.0) {
            return invalid(format!("eps_init = {} must lie in (0, 1/(n - s))", self.eps_init));
        }
        if let BiasInit::Grid(g) = &self.bias {
            if g.is_empty() || g.iter().any(|v| !v.is_finite()) {
                return invalid("bias grid must be nonempty and finite");
            }
        }
        Ok(())
    }
}

/// Draws parameters for width `r` and input dimension `n`; deterministic in `seed`.
pub fn init_params(scheme: &InitScheme, r: usize, n: usize, seed: u64) -> Result<MlpParams> {
    scheme.validate(n)?;
    if r == 0 {
        return invalid("width r must be at least 1");
    }
    if scheme.symmetric_pairing && r % 2 == 1 {
        return invalid(format!("symmetric pairing needs even width, got r = {r}"));
    }
    let mut rng = stream_rng(seed, Stream::Init);
    let drawn = if scheme.symmetric_pairing { r / 2 } else { r };
    let in_scale = 1.0 / (n as f64).sqrt();
    let out_scale = 1.0 / (r as f64).sqrt();
    let mut p = MlpParams::zeros(r, n);
    for i in 0..drawn {
        let mut row = p.w.row_mut(i);
        match scheme.variant {
            InitVariant::UniformDense => row.iter_mut().for_each(|v| *v = rng.random_range(-in_scale..=in_scale)),
            InitVariant::OverSparse | InitVariant::UnderSparse => {
                let background = if scheme.variant == InitVariant::UnderSparse { scheme.eps_init } else { 0.0 };
                row.fill(background);
                for j in sample(&mut rng, n, scheme.s) {
                    row[j] = 1.0;
                }
            }
        }
        p.b[i] = match &scheme.bias {
            BiasInit::Default => rng.random_range(-in_scale..=in_scale),
            BiasInit::Zero => 0.0,
            BiasInit::Grid(g) => g[rng.random_range(0..g.len())],
        };
        p.u[i] = match scheme.output {
            OutputInit::Default => rng.random_range(-out_scale..=out_scale),
            OutputInit::Signs => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        };
    }
    if scheme.symmetric_pairing {
        for i in 0..drawn {
            let row = p.w.row(i).to_owned();
            p.w.row_mut(i + drawn).assign(&row);
            p.b[i + drawn] = p.b[i];
            p.u[i + drawn] = -p.u[i];
        }
    }
    p.beta = if scheme.output == OutputInit::Default && !scheme.symmetric_pairing {
        rng.random_range(-out_scale..=out_scale)
    } else {
        0.0
    };
    Ok(p)
}
