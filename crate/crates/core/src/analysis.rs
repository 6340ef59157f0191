//! Numerical checks of the bias-convexity, weight-shift and perturbation
//! arguments, plus the experiment sweeps (δ sweep, LR×WD grid, method
//! comparison).

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::classifier::{forward_logits, ClassifierParams, Head, PosthocSpec};
use crate::data::{class_stats, ClassStats, FeatureDataset, GroupThresholds};
use crate::losses::{
    LossSpec, DEFAULT_CB_BETA, DEFAULT_FOCAL_GAMMA, DEFAULT_LDAM_GAMMA, DEFAULT_LDAM_MAX_MARGIN,
    DEFAULT_LORT_DELTA,
};
use crate::matrix::{dot, softmax, Matrix};
use crate::metrics::{group_accuracy, metrics_report, GroupAccuracy, MetricsReport};
use crate::training::{train_classifier, Sampler, TrainConfig};
use crate::{par, seed, Error, Result};

/// Monte Carlo trials per independently seeded work unit.
const MC_CHUNK: usize = 8192;

/// Hessian of softmax cross-entropy w.r.t. the bias: `diag(s) - s sᵀ`.
pub fn bias_hessian(s: &[f64]) -> Result<Matrix> {
    if s.len() < 2 {
        return Err(Error::invalid("s", "need at least 2 classes"));
    }
    if s.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::invalid("s", "probabilities must be finite and > 0"));
    }
    let total: f64 = s.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("s", format!("probabilities sum to {total}, not 1")));
    }
    let k = s.len();
    let mut h = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] = if i == j { s[i] * (1.0 - s[i]) } else { -s[i] * s[j] };
        }
    }
    Ok(h)
}

/// `x H xᵀ`.
pub fn quadratic_form(h: &Matrix, x: &[f64]) -> f64 {
    dot(x, &h.mul_vec(x))
}

/// Minimum of `x H xᵀ` over `trials` random unit vectors.
pub fn psd_check(h: &Matrix, trials: usize, seed: u64) -> Result<f64> {
    if h.rows() != h.cols() {
        return Err(Error::invalid("H", "matrix must be square"));
    }
    if trials < 1 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let k = h.rows();
    let n_chunks = trials.div_ceil(MC_CHUNK);
    let minima = par::map_range(n_chunks, |c| {
        let mut rng = seed::rng(seed::derive_index(seed, "psd", c as u64));
        let len = MC_CHUNK.min(trials - c * MC_CHUNK);
        let mut best = f64::INFINITY;
        let mut x = vec![0.0; k];
        for _ in 0..len {
            loop {
                x.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let n = dot(&x, &x).sqrt();
                if n > 1e-12 {
                    x.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
            best = best.min(quadratic_form(h, &x));
        }
        best
    });
    Ok(minima.into_iter().fold(f64::INFINITY, f64::min))
}

/// Adds the same vector `epsilon` to every weight row and returns the largest
/// absolute change of any softmax probability over `data`.
pub fn shift_invariance_check(
    params: &ClassifierParams,
    data: &FeatureDataset,
    epsilon: &[f64],
) -> Result<f64> {
    if params.head != Head::Linear {
        return Err(Error::invalid("params", "shift invariance holds for the linear head only"));
    }
    if epsilon.len() != params.dim() {
        return Err(Error::invalid("epsilon", "length must equal D"));
    }
    let shifted = shift_rows(params, epsilon);
    let diffs = par::map_range_min_len(data.len(), 64, |i| -> Result<f64> {
        let x = data.feature(i);
        let a = softmax(&forward_logits(params, x, 1.0)?);
        let b = softmax(&forward_logits(&shifted, x, 1.0)?);
        Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    });
    diffs.into_iter().try_fold(0.0f64, |m, d| Ok(m.max(d?)))
}

/// Copy of `params` with `epsilon` added to every weight row.
pub fn shift_rows(params: &ClassifierParams, epsilon: &[f64]) -> ClassifierParams {
    let mut out = params.clone();
    for i in 0..out.num_classes() {
        out.weights.row_mut(i).iter_mut().zip(epsilon).for_each(|(w, e)| *w += e);
    }
    out
}

/// Random logit perturbations `Δ_i = ξ_i r_i L_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Standard deviation of the zero-mean normal `ξ`.
    pub xi_std: f64,
    pub trials: usize,
    pub seed: u64,
    /// One `ξ` shared by all classes instead of independent draws.
    pub shared_xi: bool,
}

impl PerturbationSpec {
    /// Trial count below which estimates are reported as low-confidence.
    pub const MIN_CONFIDENT_TRIALS: usize = 100_000;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    /// `E[s'_i] / E[s_i]` per class.
    pub ratios: Vec<f64>,
    /// `(max - min) / mean` of the ratios.
    pub spread: f64,
}

/// Monte Carlo estimate of how logit perturbations move the expected softmax.
/// Trial `t` perturbs base row `t mod N`; `E[s]` is averaged over the same rows.
pub fn perturbation_sim(
    magnitude: &[f64],
    reg_std: &[f64],
    pspec: &PerturbationSpec,
    base_logits: &Matrix,
) -> Result<PerturbationResult> {
    let k = magnitude.len();
    if reg_std.len() != k || base_logits.cols() != k {
        return Err(Error::invalid("L/r", "L, r and base logits must share K"));
    }
    if base_logits.rows() == 0 {
        return Err(Error::invalid("base_logits", "need at least one row"));
    }
    if magnitude.iter().chain(reg_std).any(|v| !v.is_finite()) {
        return Err(Error::invalid("L/r", "entries must be finite"));
    }
    if !(pspec.xi_std >= 0.0) || !pspec.xi_std.is_finite() {
        return Err(Error::invalid("xi_std", "must be finite and >= 0"));
    }
    if pspec.trials < 1 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let amplitude: Vec<f64> = magnitude.iter().zip(reg_std).map(|(l, r)| r * l).collect();
    let rows = base_logits.rows();
    let n_chunks = pspec.trials.div_ceil(MC_CHUNK);
    let sums = par::map_range(n_chunks, |c| {
        let mut rng = seed::rng(seed::derive_index(pspec.seed, "perturb", c as u64));
        let start = c * MC_CHUNK;
        let end = (start + MC_CHUNK).min(pspec.trials);
        let mut base_sum = vec![0.0; k];
        let mut pert_sum = vec![0.0; k];
        let mut z = vec![0.0; k];
        for t in start..end {
            let row = base_logits.row(t % rows);
            let shared: f64 = if pspec.shared_xi {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            for i in 0..k {
                let xi = if pspec.shared_xi {
                    shared
                } else {
                    StandardNormal.sample(&mut rng)
                };
                z[i] = row[i] + pspec.xi_std * xi * amplitude[i];
            }
            for (acc, s) in base_sum.iter_mut().zip(softmax(row)) {
                *acc += s;
            }
            for (acc, s) in pert_sum.iter_mut().zip(softmax(&z)) {
                *acc += s;
            }
        }
        (base_sum, pert_sum)
    });
    let mut base = vec![0.0; k];
    let mut pert = vec![0.0; k];
    for (b, p) in sums {
        base.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        pert.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let ratios: Vec<f64> = pert.iter().zip(&base).map(|(p, b)| p / b).collect();
    let mean = ratios.iter().sum::<f64>() / k as f64;
    let spread = crate::metrics::spread(&ratios) / mean;
    Ok(PerturbationResult { ratios, spread })
}

/// Monte Carlo `E[exp(Δ)]` for `Δ ~ Normal(0, sigma²)`: `(estimate, standard error)`.
pub fn lognormal_mean_mc(sigma: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials < 2 {
        return Err(Error::invalid("trials", "need at least 2 trials"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let n_chunks = trials.div_ceil(MC_CHUNK);
    let sums = par::map_range(n_chunks, |c| {
        let mut rng = seed::rng(seed::derive_index(seed, "lognormal", c as u64));
        let len = MC_CHUNK.min(trials - c * MC_CHUNK);
        (0..len).fold((0.0, 0.0), |(s, s2), _| {
            let v = normal.sample(&mut rng).exp();
            (s + v, s2 + v * v)
        })
    });
    let (s, s2) = sums.into_iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = trials as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Seed shared by every cell of a δ sweep or method comparison, so the
/// cells differ only in the loss and see identical sampling streams.
pub fn paired_cell_seed(root: u64) -> u64 {
    seed::derive_str(root, "paired-cell")
}

/// Seed of one LR×WD grid cell, keyed by the exact bit patterns.
pub fn grid_cell_seed(root: u64, lr: f64, wd: f64) -> u64 {
    let mut key = b"grid".to_vec();
    key.extend_from_slice(&lr.to_bits().to_le_bytes());
    key.extend_from_slice(&wd.to_bits().to_le_bytes());
    seed::derive(root, &key)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepKey {
    Delta(f64),
    Grid { lr: f64, wd: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub key: SweepKey,
    pub seed: u64,
    /// `None` when the run diverged.
    pub accuracy: Option<GroupAccuracy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

fn acc_fields(a: Option<&GroupAccuracy>) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    match a {
        Some(a) => format!("{},{},{},{}", a.all, o(a.many), o(a.medium), o(a.few)),
        None => ",,,".into(),
    }
}

impl SweepResult {
    pub fn accuracy_for_delta(&self, delta: f64) -> Option<&GroupAccuracy> {
        self.cells.iter().find_map(|c| match c.key {
            SweepKey::Delta(d) if d == delta => c.accuracy.as_ref(),
            _ => None,
        })
    }

    pub fn accuracy_for_grid(&self, lr: f64, wd: f64) -> Option<&GroupAccuracy> {
        self.cells.iter().find_map(|c| match c.key {
            SweepKey::Grid { lr: l, wd: w } if l == lr && w == wd => c.accuracy.as_ref(),
            _ => None,
        })
    }

    /// `max - min` of overall accuracy over non-diverged cells.
    pub fn accuracy_spread(&self) -> f64 {
        let all: Vec<f64> = self.cells.iter().filter_map(|c| c.accuracy.map(|a| a.all)).collect();
        crate::metrics::spread(&all)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.cells.first().map(|c| c.key) {
            Some(SweepKey::Grid { .. }) => out.push_str("lr,wd,acc_all,acc_many,acc_medium,acc_few\n"),
            _ => out.push_str("delta,acc_all,acc_many,acc_medium,acc_few\n"),
        }
        for c in &self.cells {
            let acc = acc_fields(c.accuracy.as_ref());
            let _ = match c.key {
                SweepKey::Delta(d) => writeln!(out, "{d},{acc}"),
                SweepKey::Grid { lr, wd } => writeln!(out, "{lr},{wd},{acc}"),
            };
        }
        out
    }
}

/// Trains one LORT head per δ and records its group accuracies. With `init`
/// every cell fine-tunes a copy of that (stage-one) head.
pub fn delta_sweep(
    train: &FeatureDataset,
    eval: &FeatureDataset,
    deltas: &[f64],
    cfg: &TrainConfig,
    thresholds: GroupThresholds,
    init: Option<&ClassifierParams>,
) -> Result<SweepResult> {
    if deltas.is_empty() {
        return Err(Error::invalid("deltas", "need at least one value"));
    }
    if let Some(d) = deltas.iter().find(|d| !(0.0..1.0).contains(*d)) {
        return Err(Error::invalid("deltas", format!("{d} is outside [0, 1)")));
    }
    let stats = class_stats(train, thresholds)?;
    let cell_seed = paired_cell_seed(cfg.seed);
    let cell_cfg = TrainConfig {
        seed: cell_seed,
        ..cfg.clone()
    };
    let cells = par::map_slice(deltas, |&delta| -> Result<SweepCell> {
        let (params, _) =
            train_classifier(train, None, &LossSpec::lort(delta), &cell_cfg, init.cloned())?;
        let acc = group_accuracy(&params, &PosthocSpec::NONE, eval, &stats, cfg.cosine_scale)?;
        Ok(SweepCell {
            key: SweepKey::Delta(delta),
            seed: cell_seed,
            accuracy: Some(acc),
        })
    });
    Ok(SweepResult {
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

/// Full learning-rate × weight-decay grid under a fixed epoch budget.
pub fn lr_wd_grid(
    train: &FeatureDataset,
    eval: &FeatureDataset,
    lrs: &[f64],
    wds: &[f64],
    cfg: &TrainConfig,
    spec: &LossSpec,
    thresholds: GroupThresholds,
    init: Option<&ClassifierParams>,
) -> Result<SweepResult> {
    if lrs.is_empty() || wds.is_empty() {
        return Err(Error::invalid("grid", "both axes need at least one value"));
    }
    let stats = class_stats(train, thresholds)?;
    let keys: Vec<(f64, f64)> = lrs
        .iter()
        .flat_map(|&lr| wds.iter().map(move |&wd| (lr, wd)))
        .collect();
    let cells = par::map_slice(&keys, |&(lr, wd)| -> Result<SweepCell> {
        let cell_cfg = TrainConfig {
            lr0: lr,
            weight_decay: wd,
            seed: grid_cell_seed(cfg.seed, lr, wd),
            ..cfg.clone()
        };
        cell_cfg.validate()?;
        let accuracy = match train_classifier(train, None, spec, &cell_cfg, init.cloned()) {
            Ok((params, _)) => {
                Some(group_accuracy(&params, &PosthocSpec::NONE, eval, &stats, cfg.cosine_scale)?)
            }
            Err(Error::Divergence { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(SweepCell {
            key: SweepKey::Grid { lr, wd },
            seed: cell_cfg.seed,
            accuracy,
        })
    });
    Ok(SweepResult {
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

/// One row of the method table: loss, head, sampler, projection and
/// inference-time adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub name: String,
    pub loss: LossSpec,
    pub head: Head,
    pub sampler: Sampler,
    pub maxnorm: Option<f64>,
    pub posthoc: PosthocSpec,
}

pub const DEFAULT_POSTHOC_TAU: f64 = 1.0;
pub const DEFAULT_MAXNORM: f64 = 1.0;

/// Every preset name accepted by [`MethodSpec::preset`].
pub const METHOD_NAMES: [&str; 13] = [
    "ce",
    "cosine",
    "lws",
    "ldam",
    "bs",
    "resample",
    "focal",
    "cb-ce",
    "cb-bce",
    "maxnorm",
    "tau-norm",
    "logit-adjust",
    "lort",
];

impl MethodSpec {
    fn plain(name: &str, loss: LossSpec) -> Self {
        Self {
            name: name.to_string(),
            loss,
            head: Head::Linear,
            sampler: Sampler::Shuffle,
            maxnorm: None,
            posthoc: PosthocSpec::NONE,
        }
    }

    /// Method row with default hyperparameters. `stats` calibrates the LDAM
    /// margin constant.
    pub fn preset(name: &str, stats: &ClassStats) -> Result<Self> {
        let ce = LossSpec::ce();
        Ok(match name {
            "ce" => Self::plain(name, ce),
            "cosine" => Self {
                head: Head::Cosine,
                ..Self::plain(name, ce)
            },
            "lws" => Self {
                head: Head::Lws,
                ..Self::plain(name, ce)
            },
            "ldam" => Self::plain(
                name,
                LossSpec::ldam_calibrated(stats, DEFAULT_LDAM_GAMMA, DEFAULT_LDAM_MAX_MARGIN),
            ),
            "bs" => Self::plain(name, LossSpec::balanced_softmax()),
            "resample" => Self {
                sampler: Sampler::ClassBalanced,
                ..Self::plain(name, ce)
            },
            "focal" => Self::plain(name, LossSpec::focal(DEFAULT_FOCAL_GAMMA)),
            "cb-ce" => Self::plain(name, LossSpec::cb_ce(DEFAULT_CB_BETA)),
            "cb-bce" => Self::plain(name, LossSpec::cb_bce(DEFAULT_CB_BETA)),
            "maxnorm" => Self {
                maxnorm: Some(DEFAULT_MAXNORM),
                ..Self::plain(name, ce)
            },
            "tau-norm" => Self {
                posthoc: PosthocSpec::tau_norm(DEFAULT_POSTHOC_TAU),
                ..Self::plain(name, ce)
            },
            "logit-adjust" => Self {
                posthoc: PosthocSpec::logit_adjust(DEFAULT_POSTHOC_TAU),
                ..Self::plain(name, ce)
            },
            "lort" => Self::plain(name, LossSpec::lort(DEFAULT_LORT_DELTA)),
            other => {
                return Err(Error::invalid(
                    "method",
                    format!("unknown method `{other}` (expected one of {})", METHOD_NAMES.join(", ")),
                ))
            }
        })
    }

    /// Training config for this row, derived from a shared base config.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            head: self.head,
            sampler: self.sampler,
            maxnorm: self.maxnorm.or(base.maxnorm),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub name: String,
    pub params: ClassifierParams,
    pub report: MetricsReport,
}

/// Trains every method on the same frozen features and sampling stream,
/// optionally fine-tuning from a shared stage-one head.
pub fn method_comparison(
    train: &FeatureDataset,
    eval: &FeatureDataset,
    methods: &[MethodSpec],
    cfg: &TrainConfig,
    thresholds: GroupThresholds,
    init: Option<&ClassifierParams>,
) -> Result<Vec<MethodRow>> {
    let stats = class_stats(train, thresholds)?;
    let base = TrainConfig {
        seed: paired_cell_seed(cfg.seed),
        ..cfg.clone()
    };
    let rows = par::map_slice(methods, |m| -> Result<MethodRow> {
        let mcfg = m.train_config(&base);
        let (params, _) = train_classifier(train, None, &m.loss, &mcfg, init.cloned())?;
        let report = metrics_report(&params, &m.posthoc, eval, &stats, mcfg.cosine_scale)?;
        Ok(MethodRow {
            name: m.name.clone(),
            params,
            report,
        })
    });
    rows.into_iter().collect()
}

/// `method,acc_all,acc_many,acc_medium,acc_few,L_reg_spread`
pub fn comparison_csv(rows: &[MethodRow], bin_width: usize) -> String {
    let mut out = String::from("method,acc_all,acc_many,acc_medium,acc_few,L_reg_spread\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.name,
            acc_fields(Some(&r.report.accuracy)),
            r.report.magnitude_spread(bin_width)
        );
    }
    out
}

/// Random probability vector with entries bounded away from zero.
pub fn random_simplex_point(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).exp() * 2.0).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}
