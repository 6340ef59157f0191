//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the report is always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use ltr_core::analysis::{
    bias_hessian, lognormal_mean_mc, perturbation_sim, psd_check, quadratic_form,
    shift_invariance_check, PerturbationSpec,
};
use ltr_core::benchmark::{benchmark_csv, run_benchmark, BenchmarkRun, BENCHMARK_SEEDS};
use ltr_core::classifier::{
    forward_logits, inference_logits, predict, write_checkpoint, ClassifierParams, Head,
    PosthocSpec, DEFAULT_COSINE_SCALE,
};
use ltr_core::data::{generate_synthetic, ClassStats, GroupThresholds, SyntheticSpec};
use ltr_core::losses::{loss_and_logit_grad, lort_targets, LossSpec};
use ltr_core::matrix::norm;
use ltr_core::metrics::{predictions, DEFAULT_BIN_WIDTH};
use ltr_core::training::{gradcheck, train_classifier, TrainConfig};
use ltr_core::verify::{
    gradcheck_specs, random_probabilities, run_verify, VerifyOptions, GRADCHECK_INSTANCES,
    GRADCHECK_STEP, GRADCHECK_TOLERANCE, LORT_DELTAS, PSD_DIRECTIONS, PSD_MAX_CLASSES,
    PSD_VECTORS, SHIFT_NORM,
};
use ltr_core::{seed, Result};

const TIME_BUDGET: Duration = Duration::from_secs(300);
const SEED_BUDGET: Duration = Duration::from_secs(60);

type Verdict = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn small_problem(seed: u64, counts_equal: bool) -> Result<(ltr_core::data::FeatureDataset, ltr_core::data::FeatureDataset)> {
    generate_synthetic(&SyntheticSpec {
        num_classes: 6,
        dim: 5,
        n_max: 60,
        imbalance_ratio: if counts_equal { 1.0 } else { 10.0 },
        test_per_class: 15,
        class_separation: 3.0,
        within_std: 1.0,
        seed,
    })
}

fn checkpoint_bytes(p: &ClassifierParams) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(p, &mut buf).expect("in-memory write");
    buf
}

fn c1_gradients() -> Verdict {
    let mut worst = (0.0f64, String::new());
    for spec in gradcheck_specs() {
        for head in [Head::Linear, Head::Cosine, Head::Lws] {
            for (k, d) in [(10, 8), (5, 3), (2, 1)] {
                let s = seed::derive_str(7, &format!("{}:{}:{head}:{k}x{d}", spec.method, spec.gamma));
                let err = gradcheck(&spec, k, d, head, GRADCHECK_INSTANCES, GRADCHECK_STEP, DEFAULT_COSINE_SCALE, s)
                    .map_err(|e| e.to_string())?;
                if err > worst.0 {
                    worst = (err, format!("{} {head} {k}x{d}", spec.method));
                }
            }
        }
    }
    check(
        worst.0 <= GRADCHECK_TOLERANCE,
        format!("max relative error {:.2e} ({}) <= {GRADCHECK_TOLERANCE:e}", worst.0, worst.1),
    )
}

fn c2_convexity() -> Verdict {
    let mut rng = seed::rng(11);
    let mut worst = f64::INFINITY;
    let mut ones_worst = 0.0f64;
    for v in 0..PSD_VECTORS {
        let k = rng.random_range(2..=PSD_MAX_CLASSES);
        let s = random_probabilities(&mut rng, k);
        let h = bias_hessian(&s).map_err(|e| e.to_string())?;
        let min = psd_check(&h, PSD_DIRECTIONS, seed::derive_index(11, "dir", v as u64)).map_err(|e| e.to_string())?;
        worst = worst.min(min / k as f64);
        ones_worst = ones_worst.max(quadratic_form(&h, &vec![1.0; k]).abs() / k as f64);
    }
    check(
        worst >= -1e-12 && ones_worst <= 1e-15,
        format!("min xHx/K = {worst:.3e} >= -1e-12, all-ones |xHx|/K = {ones_worst:.1e} <= 1e-15"),
    )
}

fn c3_shift() -> Verdict {
    let (train, test) = small_problem(21, false).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (params, _) = train_classifier(&train, None, &LossSpec::ce(), &cfg, None).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(23);
    let raw: Vec<f64> = (0..params.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = raw.iter().map(|v| v * SHIFT_NORM / norm(&raw)).collect();
    let dp = shift_invariance_check(&params, &test, &eps).map_err(|e| e.to_string())?;
    let shifted = ltr_core::analysis::shift_rows(&params, &eps);
    let before = ltr_core::metrics::weight_norms(&params);
    let after = ltr_core::metrics::weight_norms(&shifted);
    let mean_change =
        before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum::<f64>() / before.len() as f64;
    check(
        dp <= 1e-12 && mean_change >= 0.5 * SHIFT_NORM,
        format!("max |ds| = {dp:.2e} <= 1e-12, mean |d||W_i||| = {mean_change:.2} for ||eps|| = {SHIFT_NORM}"),
    )
}

fn c4_perturbation() -> Verdict {
    let sigma: f64 = 0.5;
    let (mean, _) = lognormal_mean_mc(sigma, 1_000_000, 31).map_err(|e| e.to_string())?;
    let exact = (sigma * sigma / 2.0).exp();
    let rel = (mean - exact).abs() / exact;
    // balanced case: every class has the same r_i L_i and the base logits are
    // cyclic shifts of one vector, so no class is favoured
    let k = 8;
    let base: Vec<f64> = (0..k).map(|i| 0.3 * i as f64).collect();
    let rows: Vec<Vec<f64>> = (0..k).map(|s| (0..k).map(|i| base[(i + s) % k]).collect()).collect();
    let logits = ltr_core::matrix::Matrix::from_rows(&rows);
    let res = perturbation_sim(
        &vec![2.0; k],
        &vec![0.5; k],
        &PerturbationSpec {
            xi_std: 1.0,
            trials: 1_000_000,
            seed: 37,
            shared_xi: false,
        },
        &logits,
    )
    .map_err(|e| e.to_string())?;
    check(
        rel <= 0.01 && res.spread <= 0.02,
        format!("E[e^D] rel err {rel:.2e} <= 1e-2, balanced ratio spread {:.2e} <= 2e-2", res.spread),
    )
}

fn c5_lort() -> Verdict {
    let mut worst_sum = 0.0f64;
    for &delta in &LORT_DELTAS {
        for k in [2, 5, 20, 100] {
            for y in [0, k - 1] {
                let t = lort_targets(k, y, delta).map_err(|e| e.to_string())?;
                let p = t.probs();
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
                let neg = p.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v).fold(0.0, f64::max);
                if p[y] <= neg {
                    return Err(format!("positive entry not above negatives at delta={delta}, K={k}"));
                }
            }
        }
    }
    let (train, _) = small_problem(41, false).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 4,
        seed: 43,
        ..TrainConfig::default()
    };
    let (ce, _) = train_classifier(&train, None, &LossSpec::ce(), &cfg, None).map_err(|e| e.to_string())?;
    let (lort0, _) = train_classifier(&train, None, &LossSpec::lort(0.0), &cfg, None).map_err(|e| e.to_string())?;
    let identical = checkpoint_bytes(&ce) == checkpoint_bytes(&lort0);
    check(
        worst_sum <= 1e-12 && identical,
        format!("target sum error {worst_sum:.1e} <= 1e-12, delta=0 checkpoint bitwise equal to CE: {identical}"),
    )
}

fn c6_identities() -> Verdict {
    let (train, test) = small_problem(51, false).map_err(|e| e.to_string())?;
    let (eq_train, eq_test) = small_problem(52, true).map_err(|e| e.to_string())?;
    let stats = ClassStats::from_counts(train.label_counts(), GroupThresholds::default()).map_err(|e| e.to_string())?;
    let eq_stats = ClassStats::from_counts(eq_train.label_counts(), GroupThresholds::default()).map_err(|e| e.to_string())?;
    let e = |x: ltr_core::Error| x.to_string();

    // loss-value identities on random logits
    let mut rng = seed::rng(53);
    let mut worst_loss = 0.0f64;
    for _ in 0..200 {
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y = rng.random_range(0..6);
        let (ce, _) = loss_and_logit_grad(&LossSpec::ce(), &z, y, &stats).map_err(e)?;
        let (ce_eq, _) = loss_and_logit_grad(&LossSpec::ce(), &z, y, &eq_stats).map_err(e)?;
        for (spec, st, reference) in [
            (LossSpec::focal(0.0), &stats, ce),
            (LossSpec::cb_ce(0.0), &stats, ce),
            (LossSpec::balanced_softmax(), &eq_stats, ce_eq),
        ] {
            let (l, _) = loss_and_logit_grad(&spec, &z, y, st).map_err(e)?;
            worst_loss = worst_loss.max((l - reference).abs());
        }
    }

    // prediction identities after training
    let cfg = TrainConfig {
        epochs: 4,
        seed: 55,
        ..TrainConfig::default()
    };
    let train_preds = |spec: &LossSpec, tr, te: &ltr_core::data::FeatureDataset, st: &ClassStats| -> Result<Vec<usize>> {
        let (p, _) = train_classifier(tr, None, spec, &cfg, None)?;
        predictions(&ltr_core::metrics::eval_logits(&p, &PosthocSpec::NONE, te, st, DEFAULT_COSINE_SCALE)?)
    };
    let ce_preds = train_preds(&LossSpec::ce(), &train, &test, &stats).map_err(e)?;
    let ce_eq_preds = train_preds(&LossSpec::ce(), &eq_train, &eq_test, &eq_stats).map_err(e)?;
    let mut mismatched = Vec::new();
    for (name, spec) in [("focal(0)", LossSpec::focal(0.0)), ("cb-ce(0)", LossSpec::cb_ce(0.0))] {
        if train_preds(&spec, &train, &test, &stats).map_err(e)? != ce_preds {
            mismatched.push(name);
        }
    }
    if train_preds(&LossSpec::balanced_softmax(), &eq_train, &eq_test, &eq_stats).map_err(e)? != ce_eq_preds {
        mismatched.push("bs(equal counts)");
    }

    // post-hoc identities: tau-norm drops the bias, so compare on a bias-free head
    let (mut params, _) = train_classifier(&train, None, &LossSpec::ce(), &cfg, None).map_err(e)?;
    params.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut worst_logit = 0.0f64;
    for i in 0..test.len() {
        let x = test.feature(i);
        let plain = forward_logits(&params, x, DEFAULT_COSINE_SCALE).map_err(e)?;
        for (name, post) in [("tau-norm(0)", PosthocSpec::tau_norm(0.0)), ("logit-adjust(0)", PosthocSpec::logit_adjust(0.0))] {
            let adj = inference_logits(&params, &post, &stats, x, DEFAULT_COSINE_SCALE).map_err(e)?;
            let d = plain.iter().zip(&adj).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_logit = worst_logit.max(d);
            if predict(&adj).map_err(e)? != predict(&plain).map_err(e)? && !mismatched.contains(&name) {
                mismatched.push(name);
            }
        }
    }
    check(
        worst_loss <= 1e-12 && worst_logit <= 1e-12 && mismatched.is_empty(),
        format!(
            "loss diff {worst_loss:.1e}, post-hoc logit diff {worst_logit:.1e} (<= 1e-12), prediction mismatches: {mismatched:?}"
        ),
    )
}

fn c7_sweep_direction(runs: &[BenchmarkRun]) -> Verdict {
    let ce = median(runs.iter().map(|r| r.ce.accuracy.all).collect());
    let l90 = median(runs.iter().map(|r| r.lort_090.accuracy.all).collect());
    let few_wins = runs
        .iter()
        .filter(|r| r.lort_098.accuracy.few.unwrap_or(f64::NAN) > r.ce.accuracy.few.unwrap_or(f64::NAN))
        .count();
    check(
        l90 >= ce && few_wins >= 4,
        format!("median acc_all {l90:.1} (delta=0.9) vs {ce:.1} (delta=0); Few improves at delta=0.98 in {few_wins}/{}", runs.len()),
    )
}

fn c8_magnitude_spread(runs: &[BenchmarkRun]) -> Verdict {
    let wins = runs
        .iter()
        .filter(|r| r.lort_098.magnitude_spread(DEFAULT_BIN_WIDTH) < r.ce.magnitude_spread(DEFAULT_BIN_WIDTH))
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.lort_098.magnitude_spread(DEFAULT_BIN_WIDTH), r.ce.magnitude_spread(DEFAULT_BIN_WIDTH)))
        .collect();
    check(
        wins >= 4,
        format!("LORT(0.98) spread below CE in {wins}/{} seeds (lort/ce: {})", runs.len(), pairs.join(" ")),
    )
}

fn c9_group_order(runs: &[BenchmarkRun]) -> Verdict {
    let ordered = runs
        .iter()
        .filter(|r| {
            let a = &r.ce.accuracy;
            matches!((a.many, a.medium, a.few), (Some(m), Some(d), Some(f)) if m > d && d > f)
        })
        .count();
    check(ordered >= 4, format!("CE Many > Medium > Few in {ordered}/{} seeds", runs.len()))
}

fn c10_determinism(first_csv: &str, bench_time: Duration) -> Verdict {
    let opts = VerifyOptions::default();
    let t = Instant::now();
    let v1 = run_verify(&opts).map_err(|e| e.to_string())?;
    let verify_time = t.elapsed();
    let v2 = run_verify(&opts).map_err(|e| e.to_string())?;
    let verify_same = v1.to_text() == v2.to_text() && v1.passed();

    let again = benchmark_csv(&run_benchmark(&BENCHMARK_SEEDS).map_err(|e| e.to_string())?);
    let bench_same = again == first_csv;

    // one seed on a single thread must match the multi-threaded result and fit its own budget
    let t = Instant::now();
    let single = single_thread(|| run_benchmark(&[0])).map_err(|e| e.to_string())?;
    let single_time = t.elapsed();
    let single_same = first_csv.contains(&single[0].csv_rows());

    check(
        verify_same
            && bench_same
            && single_same
            && verify_time + bench_time <= TIME_BUDGET
            && single_time <= SEED_BUDGET,
        format!(
            "verify {:.1}s + benchmark {:.1}s <= {}s, one seed single-threaded {:.1}s <= {}s; identical reruns: verify {verify_same}, benchmark {bench_same}, single-thread {single_same}",
            verify_time.as_secs_f64(),
            bench_time.as_secs_f64(),
            TIME_BUDGET.as_secs(),
            single_time.as_secs_f64(),
            SEED_BUDGET.as_secs()
        ),
    )
}

#[cfg(feature = "parallel")]
fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn single_thread<T>(f: impl FnOnce() -> T) -> T {
    f()
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &verdict {
        Ok(d) => println!("criterion {n:>2} PASS  {title}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} FAIL  {title}: {d} [{secs:.1}s]"),
    }
    verdict.is_ok()
}

fn main() {
    let t = Instant::now();
    let runs = run_benchmark(&BENCHMARK_SEEDS);
    let bench_time = t.elapsed();
    let bench = |f: fn(&[BenchmarkRun]) -> Verdict| -> Verdict {
        match &runs {
            Ok(r) => f(r),
            Err(e) => Err(format!("benchmark failed: {e}")),
        }
    };
    let csv = runs.as_ref().map(|r| benchmark_csv(r)).unwrap_or_default();

    let results = [
        report(1, "gradient correctness", c1_gradients),
        report(2, "bias Hessian is PSD", c2_convexity),
        report(3, "common row shift invariance", c3_shift),
        report(4, "lognormal identity and balanced perturbation", c4_perturbation),
        report(5, "LORT targets and delta=0 anchor", c5_lort),
        report(6, "identity reductions", c6_identities),
        report(7, "smoothing sweep direction", || bench(c7_sweep_direction)),
        report(8, "regularized magnitude spread", || bench(c8_magnitude_spread)),
        report(9, "CE group accuracy ordering", || bench(c9_group_order)),
        report(10, "determinism and runtime", || c10_determinism(&csv, bench_time)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
