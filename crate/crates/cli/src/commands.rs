use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;

use ltr_core::analysis::{
    comparison_csv, delta_sweep, lr_wd_grid, method_comparison, perturbation_sim, MethodSpec,
    PerturbationSpec, METHOD_NAMES,
};
use ltr_core::benchmark::{benchmark_csv, run_benchmark, BENCHMARK_SEEDS};
use ltr_core::classifier::{load_checkpoint, save_checkpoint, ClassifierParams};
use ltr_core::data::{class_stats, generate_synthetic, load_features, save_features, ClassStats, FeatureDataset};
use ltr_core::losses::LossSpec;
use ltr_core::metrics::{eval_logits, group_accuracy, metrics_report, GroupAccuracy, DEFAULT_BIN_WIDTH};
use ltr_core::training::train_classifier;
use ltr_core::verify::{run_verify, VerifyOptions};

use crate::config::{
    load_config, required_path, resolve_loss, resolve_posthoc, resolve_synthetic,
    resolve_thresholds, resolve_train, write_resolved, DataArgs, GenArgs, LossArgs, PosthocArgs,
    RunConfig, TrainArgs,
};
use crate::{CliError, Common};

pub const DEFAULT_DELTAS: [f64; 7] = [0.0, 0.2, 0.5, 0.8, 0.9, 0.98, 0.99];
pub const DEFAULT_LRS: [f64; 3] = [0.003, 0.01, 0.03];
pub const DEFAULT_WDS: [f64; 3] = [0.0, 1e-4, 5e-4];

type CliResult = Result<(), CliError>;

// Console output is informational (every result is also written to a file),
// so a closed stdout is ignored instead of aborting the run.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Output directory plus the one file allowed to differ between reruns.
struct Run {
    out: PathBuf,
    command: &'static str,
    started: Instant,
}

impl Run {
    fn start(out: &Path, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            command,
            started: Instant::now(),
        })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn finish(self, cfg: Option<&RunConfig>) -> CliResult {
        if let Some(cfg) = cfg {
            write_resolved(cfg, &self.out)?;
        }
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        let log = format!(
            "command={}\nfinished_unix={unix}\nelapsed_ms={}\nparallel={}\n",
            self.command,
            self.started.elapsed().as_millis(),
            ltr_core::par::is_parallel()
        );
        self.write("run.log", log)
    }
}

fn core(e: ltr_core::Error) -> CliError {
    CliError::from_core(e)
}

fn load(path: &Path) -> Result<FeatureDataset, CliError> {
    load_features(path).map_err(core)
}

fn load_data(cfg: &mut RunConfig, need_eval: bool) -> Result<(FeatureDataset, Option<FeatureDataset>, ClassStats), CliError> {
    let train_path = required_path(&cfg.data.train, "train")?;
    let eval = match (&cfg.data.eval, need_eval) {
        (Some(p), _) => Some(load(p)?),
        (None, true) => return Err(CliError::Usage("missing required input `--eval`".into())),
        (None, false) => None,
    };
    let train = load(&train_path)?;
    let thresholds = resolve_thresholds(cfg)?;
    let stats = class_stats(&train, thresholds).map_err(core)?;
    Ok((train, eval, stats))
}

fn load_init(cfg: &RunConfig) -> Result<Option<ClassifierParams>, CliError> {
    cfg.train
        .init
        .as_ref()
        .map(|p| load_checkpoint(p).map_err(core))
        .transpose()
}

fn accuracy_text(a: &GroupAccuracy) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "absent".into());
    format!(
        "acc_all={}\nacc_many={}\nacc_medium={}\nacc_few={}\n",
        a.all,
        o(a.many),
        o(a.medium),
        o(a.few)
    )
}

pub fn gen(common: &Common, args: &GenArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref())?;
    args.apply(&mut cfg);
    let spec = resolve_synthetic(&mut cfg)?;
    let run = Run::start(&common.out, "gen")?;
    let (train, test) = generate_synthetic(&spec).map_err(core)?;
    save_features(&train, common.out.join("train.ltfeat")).map_err(core)?;
    save_features(&test, common.out.join("test.ltfeat")).map_err(core)?;
    outln!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        common.out.display()
    );
    run.finish(Some(&cfg))
}

pub fn train(
    common: &Common,
    data: &DataArgs,
    loss: &LossArgs,
    train: &TrainArgs,
    posthoc: &PosthocArgs,
) -> CliResult {
    let mut cfg = load_config(common.config.as_deref())?;
    data.apply(&mut cfg);
    loss.apply(&mut cfg);
    train.apply(&mut cfg);
    posthoc.apply(&mut cfg);
    let (train_set, eval_set, stats) = load_data(&mut cfg, false)?;
    let spec = resolve_loss(&mut cfg, &stats)?;
    let tcfg = resolve_train(&mut cfg)?;
    let post = resolve_posthoc(&mut cfg)?;
    let init = load_init(&cfg)?;
    let run = Run::start(&common.out, "train")?;

    let (params, history) =
        train_classifier(&train_set, eval_set.as_ref(), &spec, &tcfg, init).map_err(core)?;
    save_checkpoint(&params, common.out.join("checkpoint.ltcls")).map_err(core)?;
    run.write("history.csv", history.to_csv())?;
    let report_set = eval_set.as_ref().unwrap_or(&train_set);
    let report = metrics_report(&params, &post, report_set, &stats, tcfg.cosine_scale).map_err(core)?;
    run.write("metrics.txt", report.to_key_value())?;
    run.write("metrics.csv", report.to_csv())?;
    out!("{}", accuracy_text(&report.accuracy));
    run.finish(Some(&cfg))
}

fn checkpoint_inputs(
    common: &Common,
    data: &DataArgs,
    posthoc: &PosthocArgs,
) -> Result<(RunConfig, FeatureDataset, ClassStats, ltr_core::classifier::PosthocSpec), CliError> {
    let mut cfg = load_config(common.config.as_deref())?;
    data.apply(&mut cfg);
    posthoc.apply(&mut cfg);
    let (_, eval, stats) = load_data(&mut cfg, true)?;
    let post = resolve_posthoc(&mut cfg)?;
    Ok((cfg, eval.expect("eval is required"), stats, post))
}

fn cosine_scale(cfg: &mut RunConfig) -> Result<f64, CliError> {
    Ok(resolve_train(cfg)?.cosine_scale)
}

pub fn eval(common: &Common, checkpoint: &Path, data: &DataArgs, posthoc: &PosthocArgs) -> CliResult {
    let (mut cfg, eval, stats, post) = checkpoint_inputs(common, data, posthoc)?;
    let scale = cosine_scale(&mut cfg)?;
    let params = load_checkpoint(checkpoint).map_err(core)?;
    let run = Run::start(&common.out, "eval")?;
    let acc = group_accuracy(&params, &post, &eval, &stats, scale).map_err(core)?;
    let text = accuracy_text(&acc);
    run.write("eval.txt", &text)?;
    out!("{text}");
    run.finish(Some(&cfg))
}

pub fn metrics(
    common: &Common,
    checkpoint: &Path,
    data: &DataArgs,
    posthoc: &PosthocArgs,
    bin_width: usize,
    perturb: Option<(f64, usize, bool)>,
) -> CliResult {
    if bin_width == 0 {
        return Err(CliError::Usage("--bin-width must be >= 1".into()));
    }
    let (mut cfg, eval, stats, post) = checkpoint_inputs(common, data, posthoc)?;
    let scale = cosine_scale(&mut cfg)?;
    let params = load_checkpoint(checkpoint).map_err(core)?;
    let run = Run::start(&common.out, "metrics")?;
    let report = metrics_report(&params, &post, &eval, &stats, scale).map_err(core)?;
    run.write("metrics.txt", report.to_key_value())?;
    run.write("metrics.csv", report.to_csv())?;
    run.write("metrics_binned.csv", report.to_binned_csv(bin_width))?;
    out!("{}", accuracy_text(&report.accuracy));
    outln!("magnitude_spread={}", report.magnitude_spread(bin_width));

    if let Some((xi_std, trials, shared_xi)) = perturb {
        let r: Vec<f64> = report
            .reg_std
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    CliError::Failure(anyhow::anyhow!(
                        "regularized std undefined for class {i}; cannot simulate perturbations"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        let pspec = PerturbationSpec {
            xi_std,
            trials,
            seed: cfg.train.seed.unwrap_or_default(),
            shared_xi,
        };
        let base = eval_logits(&params, &post, &eval, &stats, scale).map_err(core)?;
        let res = perturbation_sim(&report.magnitude, &r, &pspec, &base).map_err(core)?;
        let mut csv = String::from("class,ratio\n");
        for (i, v) in res.ratios.iter().enumerate() {
            let _ = writeln!(csv, "{i},{v}");
        }
        run.write("perturbation.csv", csv)?;
        outln!("perturbation_spread={}", res.spread);
        if trials < PerturbationSpec::MIN_CONFIDENT_TRIALS {
            outln!("note: fewer than {} trials; low-confidence estimate", PerturbationSpec::MIN_CONFIDENT_TRIALS);
        }
    }
    run.finish(Some(&cfg))
}

pub fn verify(out: Option<&Path>, seed: u64, trials: Option<usize>, negate_hessian: bool) -> CliResult {
    let opts = VerifyOptions {
        seed,
        trials,
        negate_hessian,
    };
    let run = out.map(|o| Run::start(o, "verify")).transpose()?;
    let report = run_verify(&opts).map_err(core)?;
    let text = report.to_text();
    out!("{text}");
    if let Some(run) = run {
        run.write("verify.txt", &text)?;
        run.finish(None)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::Failure(anyhow::anyhow!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

pub fn sweep(common: &Common, data: &DataArgs, train: &TrainArgs, deltas: Option<Vec<f64>>) -> CliResult {
    let mut cfg = load_config(common.config.as_deref())?;
    data.apply(&mut cfg);
    train.apply(&mut cfg);
    if deltas.is_some() {
        cfg.sweep.deltas = deltas;
    }
    let deltas = cfg.sweep.deltas.get_or_insert_with(|| DEFAULT_DELTAS.to_vec()).clone();
    if let Some(d) = deltas.iter().find(|d| !(0.0..1.0).contains(*d)) {
        return Err(CliError::Usage(format!("delta {d} is outside [0, 1)")));
    }
    let (train_set, eval_set, stats) = load_data(&mut cfg, true)?;
    let tcfg = resolve_train(&mut cfg)?;
    let init = load_init(&cfg)?;
    let run = Run::start(&common.out, "sweep")?;
    let res = delta_sweep(
        &train_set,
        eval_set.as_ref().expect("eval is required"),
        &deltas,
        &tcfg,
        stats.thresholds(),
        init.as_ref(),
    )
    .map_err(core)?;
    let csv = res.to_csv();
    run.write("sweep.csv", &csv)?;
    out!("{csv}");
    run.finish(Some(&cfg))
}

pub fn grid(
    common: &Common,
    data: &DataArgs,
    loss: &LossArgs,
    train: &TrainArgs,
    lrs: Option<Vec<f64>>,
    wds: Option<Vec<f64>>,
) -> CliResult {
    let mut cfg = load_config(common.config.as_deref())?;
    data.apply(&mut cfg);
    loss.apply(&mut cfg);
    train.apply(&mut cfg);
    if lrs.is_some() {
        cfg.sweep.lrs = lrs;
    }
    if wds.is_some() {
        cfg.sweep.wds = wds;
    }
    let lrs = cfg.sweep.lrs.get_or_insert_with(|| DEFAULT_LRS.to_vec()).clone();
    let wds = cfg.sweep.wds.get_or_insert_with(|| DEFAULT_WDS.to_vec()).clone();
    if lrs.is_empty() || wds.is_empty() {
        return Err(CliError::Usage("--lrs and --wds need at least one value".into()));
    }
    let (train_set, eval_set, stats) = load_data(&mut cfg, true)?;
    let spec: LossSpec = resolve_loss(&mut cfg, &stats)?;
    let tcfg = resolve_train(&mut cfg)?;
    for (&lr, &wd) in lrs.iter().zip(wds.iter().cycle()) {
        ltr_core::training::TrainConfig {
            lr0: lr,
            weight_decay: wd,
            ..tcfg.clone()
        }
        .validate()
        .map_err(core)?;
    }
    let init = load_init(&cfg)?;
    let run = Run::start(&common.out, "grid")?;
    let res = lr_wd_grid(
        &train_set,
        eval_set.as_ref().expect("eval is required"),
        &lrs,
        &wds,
        &tcfg,
        &spec,
        stats.thresholds(),
        init.as_ref(),
    )
    .map_err(core)?;
    let csv = res.to_csv();
    run.write("grid.csv", &csv)?;
    out!("{csv}");
    run.finish(Some(&cfg))
}

pub fn compare(common: &Common, data: &DataArgs, train: &TrainArgs, methods: Option<Vec<String>>) -> CliResult {
    let mut cfg = load_config(common.config.as_deref())?;
    data.apply(&mut cfg);
    train.apply(&mut cfg);
    if methods.is_some() {
        cfg.sweep.methods = methods;
    }
    let names = cfg
        .sweep
        .methods
        .get_or_insert_with(|| METHOD_NAMES.iter().map(|s| s.to_string()).collect())
        .clone();
    let (train_set, eval_set, stats) = load_data(&mut cfg, true)?;
    let specs: Vec<MethodSpec> = names
        .iter()
        .map(|n| MethodSpec::preset(n.trim(), &stats).map_err(core))
        .collect::<Result<_, _>>()?;
    let tcfg = resolve_train(&mut cfg)?;
    let init = load_init(&cfg)?;
    let run = Run::start(&common.out, "compare")?;
    let rows = method_comparison(
        &train_set,
        eval_set.as_ref().expect("eval is required"),
        &specs,
        &tcfg,
        stats.thresholds(),
        init.as_ref(),
    )
    .map_err(core)?;
    for r in &rows {
        run.write(&format!("metrics_{}.csv", r.name), r.report.to_csv())?;
    }
    let csv = comparison_csv(&rows, DEFAULT_BIN_WIDTH);
    run.write("compare.csv", &csv)?;
    out!("{csv}");
    run.finish(Some(&cfg))
}

pub fn benchmark(out: &Path, seeds: Option<Vec<u64>>) -> CliResult {
    let seeds = seeds.unwrap_or_else(|| BENCHMARK_SEEDS.to_vec());
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one value".into()));
    }
    let run = Run::start(out, "benchmark")?;
    let runs = run_benchmark(&seeds).map_err(core)?;
    let csv = benchmark_csv(&runs);
    run.write("benchmark.csv", &csv)?;
    out!("{csv}");
    run.finish(None)
}
