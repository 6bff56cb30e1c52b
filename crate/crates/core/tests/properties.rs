use ndarray::{Array1, Array2};
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use parity_lab::data::full_cube;
use parity_lab::fourier::{
    brute_force_fourier, half_coeff_exact, half_table, maj_fourier_coeff, majority_coeff_exact, majority_table_any_n,
    walsh_hadamard,
};
use parity_lab::harness::{run_sweep_with, wilson_interval, CellKey, SampleSize, SweepGrid, SweepResult};
use parity_lab::io::{read_records_csv, write_records_csv, RunManifest};
use parity_lab::mlp::{
    forward, init_params, loss_and_grad, partial_forward, sgd_step, DecayForm, InitScheme, LayerRates, StepRule,
};
use parity_lab::popgrad::{
    brute_force_neuron_grad, gap_constants, pop_grad_oversparse, pop_grad_oversparse_exact, pop_grad_undersparse,
};
use parity_lab::sq::{find_hard_parity, parseval_audit, star_trajectory, StarConfig};
use parity_lab::theory::{
    construct_ideal_second_layer, good_neuron_layout, ideal_feature_map, oversparse_phase1, oversparse_phase2,
    Phase2Config, Phase2Schedule,
};
use parity_lab::{BooleanFnTable, Dataset, LossKind, MlpParams, ParityInstance, RunRecord, SparseNeuron, TieRule};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, size).into_vec()
}

fn random_params(rng: &mut ChaCha8Rng, r: usize, n: usize) -> MlpParams {
    let w = Array2::from_shape_fn((r, n), |_| rng.random_range(-1.0..1.0));
    let b = Array1::from_shape_fn(r, |_| rng.random_range(-1.0..1.0));
    let u = Array1::from_shape_fn(r, |_| rng.random_range(-1.0..1.0));
    MlpParams::new(w, b, u, rng.random_range(-0.5..0.5)).unwrap()
}

fn random_signs(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

// ---- boolean fourier ----

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn majority_coefficients_depend_only_on_size(m in 0usize..6, seed in any::<u64>()) {
        let n = 2 * m + 1;
        let table = majority_table_any_n(n).unwrap();
        let mut r = rng(seed);
        let d = r.random_range(0..=n);
        let a = random_subset(&mut r, n, d);
        let b = random_subset(&mut r, n, d);
        prop_assert_eq!(brute_force_fourier(&table, &a).unwrap(), brute_force_fourier(&table, &b).unwrap());
    }

    #[test]
    fn majority_is_odd_and_half_is_even(m in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 2 * m + 1;
        let maj = majority_table_any_n(n).unwrap();
        let d = 2 * r.random_range(0..=m);
        prop_assert_eq!(brute_force_fourier(&maj, &random_subset(&mut r, n, d)).unwrap(), 0.0);
        let half = half_table(2 * m).unwrap();
        let d = 2 * r.random_range(0..m) + 1;
        prop_assert_eq!(brute_force_fourier(&half, &random_subset(&mut r, 2 * m, d)).unwrap(), 0.0);
    }

    #[test]
    fn majority_closed_form_matches_enumeration(m in 0usize..6, j in 0usize..6) {
        prop_assume!(j <= m);
        let n = 2 * m + 1;
        let d = 2 * j + 1;
        let table = majority_table_any_n(n).unwrap();
        let support: Vec<usize> = (0..d).collect();
        let brute = brute_force_fourier(&table, &support).unwrap();
        prop_assert!((maj_fourier_coeff(n, d).unwrap().approx - brute).abs() <= 1e-12);
    }

    #[test]
    fn half_equals_shifted_majority(m in 0usize..40, j in 0usize..40) {
        prop_assume!(j <= m);
        prop_assert_eq!(half_coeff_exact(2 * m, 2 * j), majority_coeff_exact(2 * m + 1, 2 * j + 1, TieRule::Negative));
    }
}

#[test]
fn parseval_holds_for_majority() {
    for n in (1..=13).step_by(2) {
        let coeffs = walsh_hadamard(&majority_table_any_n(n).unwrap());
        let total: f64 = coeffs.iter().map(|c| c * c).sum();
        assert!((total - 1.0).abs() <= 1e-12, "n = {n}: sum of squares {total}");
    }
    let mut exact = BigRational::zero();
    let n = 11;
    for d in 0..=n {
        let c = majority_coeff_exact(n, d, TieRule::Negative);
        let count = num_integer::binomial(n as u64, d as u64);
        exact += c.clone() * c * BigRational::from_integer(count.into());
    }
    assert_eq!(exact, BigRational::one());
}

// ---- population gradients ----

fn oversparse_case(seed: u64) -> (SparseNeuron, ParityInstance) {
    let mut r = rng(seed);
    let n: usize = r.random_range(4..=12);
    let k = if n >= 5 && r.random_bool(0.5) { 4 } else { 2 };
    let s = 2 * r.random_range(0..n.div_ceil(2)) + 1;
    let inst = ParityInstance::new(n, random_subset(&mut r, n, k)).unwrap();
    let neuron = SparseNeuron::over_sparse(n, random_subset(&mut r, n, s), r.random_range(-0.49..0.49)).unwrap();
    (neuron, inst)
}

fn undersparse_case(seed: u64) -> (SparseNeuron, ParityInstance) {
    let mut r = rng(seed);
    let n = r.random_range(5..=12);
    let k = if r.random_bool(0.5) { 4 } else { 2 };
    let s = if k == 4 && r.random_bool(0.5) { 2 } else { 0 };
    let eps = r.random_range(0.01..0.99) / (n - s) as f64;
    let inst = ParityInstance::new(n, random_subset(&mut r, n, k)).unwrap();
    let bias = r.random_range(-0.99..0.99) * eps;
    let neuron = SparseNeuron::under_sparse(n, random_subset(&mut r, n, s), eps, bias).unwrap();
    (neuron, inst)
}

fn permuted(neuron: &SparseNeuron, inst: &ParityInstance, perm: &[usize]) -> (SparseNeuron, ParityInstance) {
    let n = inst.n();
    let active = neuron.active().iter().map(|&i| perm[i]);
    let p_neuron = SparseNeuron::new(n, active, neuron.background(), neuron.bias()).unwrap();
    let p_inst = ParityInstance::new(n, inst.support().iter().map(|&i| perm[i])).unwrap();
    (p_neuron, p_inst)
}

proptest! {
    #![proptest_config(cfg(128))]

    #[test]
    fn oversparse_gradient_matches_enumeration(seed in any::<u64>()) {
        let (neuron, inst) = oversparse_case(seed);
        let analytic = pop_grad_oversparse(&neuron, &inst).unwrap();
        let brute = brute_force_neuron_grad(&neuron, &inst).unwrap();
        for (a, b) in analytic.iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-12, "{analytic:?} vs {brute:?}");
        }
    }

    #[test]
    fn undersparse_gradient_matches_enumeration(seed in any::<u64>()) {
        let (neuron, inst) = undersparse_case(seed);
        let analytic = pop_grad_undersparse(&neuron, &inst).unwrap();
        let brute = brute_force_neuron_grad(&neuron, &inst).unwrap();
        for (a, b) in analytic.iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-12, "{analytic:?} vs {brute:?}");
        }
    }

    #[test]
    fn relabeling_coordinates_permutes_the_gradient(seed in any::<u64>(), under in any::<bool>()) {
        let (neuron, inst) = if under { undersparse_case(seed) } else { oversparse_case(seed) };
        let n = inst.n();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng(seed ^ 0x5eed));
        let (p_neuron, p_inst) = permuted(&neuron, &inst, &perm);
        let g = brute_force_neuron_grad(&neuron, &inst).unwrap();
        let pg = brute_force_neuron_grad(&p_neuron, &p_inst).unwrap();
        for i in 0..n {
            prop_assert_eq!(g[i], pg[perm[i]]);
        }
    }

    #[test]
    fn neurons_missing_two_relevant_coordinates_have_zero_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(6..=12);
        let k = if r.random_bool(0.5) { 4 } else { 2 };
        let support = random_subset(&mut r, n, k);
        let inst = ParityInstance::new(n, support.clone()).unwrap();
        let outside: Vec<usize> = (0..n).filter(|i| !support.contains(i)).collect();
        let keep = r.random_range(0..=k - 2);
        let mut active: Vec<usize> = support[..keep].to_vec();
        let extra = r.random_range(0..=outside.len());
        active.extend(random_subset(&mut r, outside.len(), extra).into_iter().map(|i| outside[i]));
        if active.len().is_multiple_of(2) {
            prop_assume!(active.len() < n - (k - keep));
            let spare = (0..n).find(|i| !active.contains(i) && !support[keep..].contains(i)).unwrap();
            active.push(spare);
        }
        let neuron = SparseNeuron::over_sparse(n, active, r.random_range(-0.49..0.49)).unwrap();
        prop_assert!(pop_grad_oversparse_exact(&neuron, &inst).unwrap().iter().all(Zero::is_zero));
        prop_assert!(brute_force_neuron_grad(&neuron, &inst).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn irrelevant_to_relevant_ratio_is_bounded(j in 1usize..6, t in 0usize..20) {
        let k = 2 * j;
        let s = 4 * k + 1 + 2 * t;
        let gc = gap_constants(k, s).unwrap();
        prop_assert!(gc.ratio_within_bound(k, s));
    }
}

// ---- mlp core ----

fn kink_free(params: &MlpParams, x: &Array2<f64>, y: &Array1<f64>, loss: LossKind) -> bool {
    let z = x.dot(&params.w.t()) + &params.b;
    if z.iter().any(|v| v.abs() < 1e-3) {
        return false;
    }
    if loss == LossKind::Hinge {
        for i in 0..y.len() {
            let yhat = forward(params, x.row(i).as_slice().unwrap()).unwrap();
            if (1.0 - y[i] * yhat).abs() < 1e-3 {
                return false;
            }
        }
    }
    true
}

fn fd_max_violation(params: &MlpParams, x: &Array2<f64>, y: &Array1<f64>, loss: LossKind) -> f64 {
    let (_, g) = loss_and_grad(params, x.view(), y.view(), loss).unwrap();
    let analytic = g.to_flat();
    let theta = params.to_flat();
    let (r, n) = (params.width(), params.input_dim());
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let lp = loss_and_grad(&MlpParams::from_flat(r, n, &plus).unwrap(), x.view(), y.view(), loss).unwrap().0;
        let lm = loss_and_grad(&MlpParams::from_flat(r, n, &minus).unwrap(), x.view(), y.view(), loss).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs().max(analytic[i].abs()) + 1e-4);
        worst = worst.max(err);
    }
    worst
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn backprop_matches_finite_differences(seed in any::<u64>(), square in any::<bool>()) {
        let loss = if square { LossKind::Square } else { LossKind::Hinge };
        let mut r = rng(seed);
        let (n, width, m) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let (params, x, y) = loop {
            let params = random_params(&mut r, width, n);
            let x = random_signs(&mut r, m, n);
            let y = Array1::from_shape_fn(m, |_| if r.random_bool(0.5) { 1.0 } else { -1.0 });
            if kink_free(&params, &x, &y, loss) {
                break (params, x, y);
            }
        };
        prop_assert!(fd_max_violation(&params, &x, &y, loss) <= 1e-5);
    }

    #[test]
    fn zero_gradient_step_scales_each_group(seed in any::<u64>(), lw in 0.0..1.0f64, lb in 0.0..1.0f64, lu in 0.0..1.0f64, lbeta in 0.0..1.0f64) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 5, 4);
        let zero = MlpParams::zeros(5, 4);
        let rule = StepRule {
            eta: LayerRates::uniform(0.3),
            lambda: LayerRates { w: lw, b: lb, u: lu, beta: lbeta },
            decay: DecayForm::Multiplicative,
            ..StepRule::default()
        };
        let next = sgd_step(&params, &zero, &rule, 0).unwrap();
        prop_assert_eq!(next.w, params.w.mapv(|v| (1.0 - lw) * v));
        prop_assert_eq!(next.b, params.b.mapv(|v| (1.0 - lb) * v));
        prop_assert_eq!(next.u, params.u.mapv(|v| (1.0 - lu) * v));
        prop_assert_eq!(next.beta, (1.0 - lbeta) * params.beta);
    }

    #[test]
    fn truncation_above_every_gradient_leaves_only_decay(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 4, 6);
        let grads = random_params(&mut r, 4, 6);
        let rule = StepRule { gamma: 1.0, decay: DecayForm::Multiplicative, ..StepRule::default() };
        let truncated = sgd_step(&params, &grads, &rule, 0).unwrap();
        let plain = sgd_step(&params, &MlpParams::zeros(4, 6), &rule, 0).unwrap();
        prop_assert_eq!(truncated, plain);
    }

    #[test]
    fn subnetwork_agrees_with_partial_forward(seed in any::<u64>(), keep in subsequence((0..10usize).collect::<Vec<_>>(), 0..=10)) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 10, 6);
        let sub = params.subnetwork(&keep).unwrap();
        for row in random_signs(&mut r, 8, 6).rows() {
            let x = row.as_slice().unwrap();
            prop_assert_eq!(forward(&sub, x).unwrap(), partial_forward(&params, x, &keep).unwrap());
        }
    }

    #[test]
    fn flat_round_trip(seed in any::<u64>(), r in 1usize..6, n in 1usize..6) {
        let params = random_params(&mut rng(seed), r, n);
        let flat = params.to_flat();
        prop_assert_eq!(flat.len(), params.num_params());
        prop_assert_eq!(MlpParams::from_flat(r, n, &flat).unwrap(), params);
    }

    #[test]
    fn init_is_deterministic(seed in any::<u64>(), s in 1usize..5) {
        let scheme = InitScheme::sparse(s);
        prop_assert_eq!(init_params(&scheme, 7, 9, seed).unwrap(), init_params(&scheme, 7, 9, seed).unwrap());
    }

    #[test]
    fn symmetric_theory_inits_start_at_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let over = init_params(&InitScheme::over_sparse_theory(2, 3), 20, 8, seed).unwrap();
        let dyadic = init_params(&InitScheme::under_sparse_theory(4, 2, 1.0 / 16.0), 20, 8, seed).unwrap();
        let general = init_params(&InitScheme::under_sparse_theory(4, 2, 0.05), 20, 8, seed).unwrap();
        for row in random_signs(&mut r, 16, 8).rows() {
            let x = row.as_slice().unwrap();
            prop_assert_eq!(forward(&over, x).unwrap(), 0.0);
            prop_assert_eq!(forward(&dyadic, x).unwrap(), 0.0);
            prop_assert!(forward(&general, x).unwrap().abs() <= 1e-12);
        }
    }
}

// ---- experiment harness and io ----

fn random_records(seed: u64, count: usize) -> Vec<RunRecord> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let m = if r.random_bool(0.3) { SampleSize::Online } else { SampleSize::Offline(r.random_range(1..5000)) };
            let cell = CellKey::new(r.random_range(2..60), r.random_range(1..5), m, [10, 100][r.random_range(0..2)], "sparse", 2);
            let success = r.random_bool(0.5);
            RunRecord {
                cell,
                trial: i,
                seed: r.random(),
                success,
                steps_to_success: success.then(|| r.random_range(1..100_000)),
                final_test_err: r.random_bool(0.9).then(|| r.random::<f64>()),
                final_train_err: None,
                diverged: r.random_bool(0.1),
                grokking_gap: None,
                trace: Vec::new(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn aggregation_ignores_record_order(seed in any::<u64>(), count in 0usize..40) {
        let records = random_records(seed, count);
        let mut shuffled = records.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng(!seed));
        prop_assert_eq!(SweepResult::from_records(records), SweepResult::from_records(shuffled));
    }

    #[test]
    fn csv_round_trip_is_lossless(seed in any::<u64>(), count in 0usize..30) {
        let records = random_records(seed, count);
        let manifest = RunManifest::new("sweep", seed, &serde_json::json!({"seed": seed})).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &manifest, &records).unwrap();
        let (back_manifest, back) = read_records_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back_manifest, Some(manifest));
        prop_assert_eq!(back, records);
    }

    #[test]
    fn json_round_trip_is_lossless(seed in any::<u64>(), count in 0usize..30) {
        let result = SweepResult::from_records(random_records(seed, count));
        let text = serde_json::to_string(&result).unwrap();
        prop_assert_eq!(serde_json::from_str::<SweepResult>(&text).unwrap(), result);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(trials in 1usize..500, frac in 0.0..=1.0f64) {
        let successes = (frac * trials as f64).floor() as usize;
        let (lo, hi) = wilson_interval(successes, trials, 0.95);
        let p = successes as f64 / trials as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }
}

#[test]
fn sweep_result_does_not_depend_on_worker_count() {
    let grid: SweepGrid = toml::from_str(
        r#"
        n = [10]
        k = [2]
        m = ["online", 200]
        r = [20]
        trials = 3
        base_seed = 7
        [train]
        steps = 400
        test_size = 500
        "#,
    )
    .unwrap();
    let one = run_sweep_with(&grid, 1).unwrap();
    let three = run_sweep_with(&grid, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.records.len(), 6);
}

// ---- statistical-query frontier ----

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn hidden_set_grows_with_tau(seed in any::<u64>(), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let init = init_params(&InitScheme::uniform_dense(), 2, 6, seed).unwrap();
        let traj = star_trajectory(&init, StarConfig { eta: 0.1, steps: 2, weight_decay: 0.0 }).unwrap();
        let a = find_hard_parity(&traj, 2, lo).unwrap();
        let b = find_hard_parity(&traj, 2, hi).unwrap();
        for (x, y) in a.audit.iter().zip(&b.audit) {
            prop_assert!(!x.hidden || y.hidden);
        }
    }

    #[test]
    fn normalized_gradient_queries_satisfy_parseval(seed in any::<u64>(), k in 1usize..5) {
        let init = init_params(&InitScheme::uniform_dense(), 3, 7, seed).unwrap();
        let traj = star_trajectory(&init, StarConfig { eta: 0.1, steps: 1, weight_decay: 0.01 }).unwrap();
        let jac = parity_lab::sq::jacobian_on_cube(&traj.thetas[0]).unwrap();
        let scale = jac.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for row in jac.rows() {
            let table = BooleanFnTable::from_values(7, row.iter().map(|v| v / scale).collect()).unwrap();
            let audit = parseval_audit(&table, k).unwrap();
            prop_assert!(audit.sum <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn star_trajectory_never_sees_labels() {
    // The trajectory takes no instance, so every planted parity shares it;
    // repeated calls must agree bit for bit.
    let init = init_params(&InitScheme::uniform_dense(), 1, 8, 3).unwrap();
    let config = StarConfig { eta: 0.1, steps: 3, weight_decay: 0.0 };
    let a = star_trajectory(&init, config).unwrap();
    let b = star_trajectory(&init, config).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

// ---- theory pipelines ----

fn oversparse_setup(seed: u64) -> (MlpParams, ParityInstance, Dataset) {
    let inst = ParityInstance::leading(8, 2).unwrap();
    let init = init_params(&InitScheme::over_sparse_theory(2, 3), 60, 8, seed).unwrap();
    let cube = full_cube(&inst).unwrap();
    (init, inst, cube)
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn phase1_weights_are_scaled_negative_gradient(seed in any::<u64>()) {
        let (init, inst, cube) = oversparse_setup(seed);
        let p1 = oversparse_phase1(&init, &cube, &inst, 3).unwrap();
        let (_, g) = loss_and_grad(&init, cube.x(), cube.y(), LossKind::Hinge).unwrap();
        let denom = 2.0 * 2.0 * p1.c_relevant.abs();
        prop_assert_eq!(p1.params.w, g.w.mapv(|v| -v / denom));
    }

    #[test]
    fn ideal_features_depend_only_on_relevant_sum(seed in any::<u64>()) {
        let (init, inst, cube) = oversparse_setup(seed);
        let psi = ideal_feature_map(&init, &inst, 3, false).unwrap();
        let feats = psi.eval_batch(cube.x()).unwrap();
        let mut by_sum: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
        for (i, row) in cube.x().rows().into_iter().enumerate() {
            let sum = inst.support().iter().map(|&j| row[j]).sum::<f64>() as i64;
            let f = feats.row(i).to_vec();
            let seen = by_sum.entry(sum).or_insert_with(|| f.clone());
            prop_assert_eq!(&*seen, &f);
        }
    }

    #[test]
    fn ideal_second_layer_norm_is_bounded_by_nu(seed in any::<u64>()) {
        let (init, inst, _) = oversparse_setup(seed);
        let grid = parity_lab::mlp::over_sparse_bias_grid(2);
        let layout = good_neuron_layout(&init, &inst, 3, &grid).unwrap();
        prop_assume!(layout.plus.iter().chain(&layout.minus).all(|v| !v.is_empty()));
        let ideal = construct_ideal_second_layer(2, &layout, 60).unwrap();
        let u: f64 = ideal.u_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nu: f64 = ideal.nu.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(u <= nu * (1.0 + 1e-12));
    }

    #[test]
    fn phase2_norm_is_controlled_by_objective(seed in any::<u64>(), lambda in 1e-3..1e-1f64) {
        let (init, inst, cube) = oversparse_setup(seed);
        let p1 = oversparse_phase1(&init, &cube, &inst, 3).unwrap();
        let cfg = Phase2Config { lambda, schedule: Phase2Schedule::InverseLambdaT, steps: 300 };
        let p2 = oversparse_phase2(&p1.phi1, &cube, &cfg).unwrap();
        let norm2: f64 = p2.u.iter().map(|v| v * v).sum();
        prop_assert!(norm2 <= 2.0 / lambda * p2.final_objective() * (1.0 + 1e-9));
    }
}

#[test]
fn unregularised_phase2_descends_on_separable_features() {
    let (init, inst, cube) = oversparse_setup(1);
    let psi = ideal_feature_map(&init, &inst, 3, false).unwrap();
    let cfg = Phase2Config { lambda: 0.0, schedule: Phase2Schedule::Constant(1e-3), steps: 500 };
    let p2 = oversparse_phase2(&psi, &cube, &cfg).unwrap();
    for pair in p2.objective_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "objective rose from {} to {}", pair[0], pair[1]);
    }
}
