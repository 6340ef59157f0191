//! Run configuration: an optional TOML file with `[data]`, `[loss]`,
//! `[train]`, `[posthoc]` and `[sweep]` sections, overridden by flags and then
//! completed with defaults. The completed form is what gets written next to
//! every command's outputs.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use ltr_core::benchmark::BENCHMARK_SEPARATION;
use ltr_core::classifier::{Head, PosthocKind, PosthocSpec, DEFAULT_COSINE_SCALE};
use ltr_core::data::{ClassStats, GroupThresholds, SyntheticSpec};
use ltr_core::losses::{
    LossMethod, LossSpec, DEFAULT_CB_BETA, DEFAULT_FOCAL_GAMMA, DEFAULT_LDAM_GAMMA,
    DEFAULT_LDAM_MAX_MARGIN, DEFAULT_LORT_DELTA,
};
use ltr_core::training::{Sampler, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub posthoc: PosthocSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmax: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ir: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub many_threshold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_threshold: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maxnorm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosthocSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn fill<T>(slot: &mut Option<T>, default: T) {
    if slot.is_none() {
        *slot = Some(default);
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Synthetic-data flags of `gen`.
#[derive(Debug, Clone, Default, Args)]
pub struct GenArgs {
    /// Number of classes.
    #[arg(long)]
    pub k: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Training samples in the largest class.
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Imbalance ratio n_max / n_min (>= 1).
    #[arg(long)]
    pub ir: Option<f64>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Distance between two orthogonal cluster means.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub within_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GenArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        set(&mut d.k, &self.k);
        set(&mut d.d, &self.d);
        set(&mut d.nmax, &self.nmax);
        set(&mut d.ir, &self.ir);
        set(&mut d.test_per_class, &self.test_per_class);
        set(&mut d.separation, &self.separation);
        set(&mut d.within_std, &self.within_std);
        set(&mut d.seed, &self.seed);
    }
}

pub fn resolve_synthetic(cfg: &mut RunConfig) -> Result<SyntheticSpec, CliError> {
    let defaults = SyntheticSpec {
        num_classes: 20,
        class_separation: BENCHMARK_SEPARATION,
        test_per_class: 50,
        ..SyntheticSpec::default()
    };
    let d = &mut cfg.data;
    fill(&mut d.k, defaults.num_classes);
    fill(&mut d.d, defaults.dim);
    fill(&mut d.nmax, defaults.n_max);
    fill(&mut d.ir, defaults.imbalance_ratio);
    fill(&mut d.test_per_class, defaults.test_per_class);
    fill(&mut d.separation, defaults.class_separation);
    fill(&mut d.within_std, defaults.within_std);
    fill(&mut d.seed, defaults.seed);
    let spec = SyntheticSpec {
        num_classes: d.k.unwrap_or_default(),
        dim: d.d.unwrap_or_default(),
        n_max: d.nmax.unwrap_or_default(),
        imbalance_ratio: d.ir.unwrap_or_default(),
        test_per_class: d.test_per_class.unwrap_or_default(),
        class_separation: d.separation.unwrap_or_default(),
        within_std: d.within_std.unwrap_or_default(),
        seed: d.seed.unwrap_or_default(),
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

/// Feature-file inputs.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Training features (LTFEAT); class counts and groups come from here.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Evaluation features (LTFEAT).
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Classes with more training samples than this are "Many".
    #[arg(long)]
    pub many_threshold: Option<usize>,
    /// Classes with fewer training samples than this are "Few".
    #[arg(long)]
    pub few_threshold: Option<usize>,
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        set(&mut d.train, &self.train);
        set(&mut d.eval, &self.eval);
        set(&mut d.many_threshold, &self.many_threshold);
        set(&mut d.few_threshold, &self.few_threshold);
    }
}

pub fn required_path(slot: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    slot.clone()
        .ok_or_else(|| CliError::Usage(format!("missing required input `--{flag}`")))
}

/// Thresholds: explicit values win, then a `<train>.manifest` file, then the defaults.
pub fn resolve_thresholds(cfg: &mut RunConfig) -> Result<GroupThresholds, CliError> {
    let from_file = match &cfg.data.train {
        Some(p) => ltr_core::data::load_thresholds(p).map_err(CliError::from_core)?,
        None => GroupThresholds::default(),
    };
    let d = &mut cfg.data;
    fill(&mut d.many_threshold, from_file.many);
    fill(&mut d.few_threshold, from_file.few);
    let t = GroupThresholds {
        many: d.many_threshold.unwrap_or_default(),
        few: d.few_threshold.unwrap_or_default(),
    };
    if t.many <= t.few {
        return Err(usage("many_threshold must exceed few_threshold"));
    }
    Ok(t)
}

/// Loss selection.
#[derive(Debug, Clone, Default, Args)]
pub struct LossArgs {
    /// One of ce, lort, focal, cb-ce, cb-bce, ldam, bs.
    #[arg(long)]
    pub loss: Option<String>,
    /// LORT smoothing value in [0, 1).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Focal exponent, or the LDAM count exponent.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Class-balanced β in [0, 1).
    #[arg(long)]
    pub beta: Option<f64>,
    /// LDAM margin constant; calibrated from the rarest class when omitted.
    #[arg(long)]
    pub c: Option<f64>,
    /// Class-balanced resampling on top of the loss.
    #[arg(long)]
    pub resample: bool,
}

impl LossArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let l = &mut cfg.loss;
        set(&mut l.loss, &self.loss);
        set(&mut l.delta, &self.delta);
        set(&mut l.gamma, &self.gamma);
        set(&mut l.beta, &self.beta);
        set(&mut l.c, &self.c);
        if self.resample {
            l.resample = Some(true);
        }
    }
}

/// Fills the loss section and builds the spec. Only the parameters of the
/// selected method are recorded.
pub fn resolve_loss(cfg: &mut RunConfig, stats: &ClassStats) -> Result<LossSpec, CliError> {
    let l = &mut cfg.loss;
    fill(&mut l.loss, "ce".to_string());
    fill(&mut l.resample, false);
    let method: LossMethod = l.loss.as_deref().unwrap_or("ce").parse().map_err(usage)?;
    let spec = match method {
        LossMethod::Ce => LossSpec::ce(),
        LossMethod::Lort => {
            fill(&mut l.delta, DEFAULT_LORT_DELTA);
            LossSpec::lort(l.delta.unwrap_or_default())
        }
        LossMethod::Focal => {
            fill(&mut l.gamma, DEFAULT_FOCAL_GAMMA);
            LossSpec::focal(l.gamma.unwrap_or_default())
        }
        LossMethod::ClassBalancedCe => {
            fill(&mut l.beta, DEFAULT_CB_BETA);
            LossSpec::cb_ce(l.beta.unwrap_or_default())
        }
        LossMethod::ClassBalancedBce => {
            fill(&mut l.beta, DEFAULT_CB_BETA);
            LossSpec::cb_bce(l.beta.unwrap_or_default())
        }
        LossMethod::Ldam => {
            fill(&mut l.gamma, DEFAULT_LDAM_GAMMA);
            let gamma = l.gamma.unwrap_or_default();
            let spec = match l.c {
                Some(c) => LossSpec::ldam(c, gamma),
                None => LossSpec::ldam_calibrated(stats, gamma, DEFAULT_LDAM_MAX_MARGIN),
            };
            l.c = Some(spec.margin);
            spec
        }
        LossMethod::BalancedSoftmax => LossSpec::balanced_softmax(),
    };
    let spec = spec.with_resampling(l.resample.unwrap_or_default());
    spec.validate().map_err(usage)?;
    Ok(spec)
}

/// Optimizer and head flags.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay on W.
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// shuffle or balanced.
    #[arg(long)]
    pub sampler: Option<String>,
    /// linear, cosine or lws.
    #[arg(long)]
    pub head: Option<String>,
    /// Project weight rows into a ball of this radius after every step.
    #[arg(long)]
    pub maxnorm: Option<f64>,
    #[arg(long)]
    pub cosine_scale: Option<f64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, &self.epochs);
        set(&mut t.batch_size, &self.batch_size);
        set(&mut t.lr, &self.lr);
        set(&mut t.wd, &self.wd);
        set(&mut t.momentum, &self.momentum);
        set(&mut t.seed, &self.seed);
        set(&mut t.sampler, &self.sampler);
        set(&mut t.head, &self.head);
        set(&mut t.maxnorm, &self.maxnorm);
        set(&mut t.cosine_scale, &self.cosine_scale);
        set(&mut t.init, &self.init);
    }
}

pub fn resolve_train(cfg: &mut RunConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let t = &mut cfg.train;
    fill(&mut t.epochs, d.epochs);
    fill(&mut t.batch_size, d.batch_size);
    fill(&mut t.lr, d.lr0);
    fill(&mut t.wd, d.weight_decay);
    fill(&mut t.momentum, d.momentum);
    fill(&mut t.seed, d.seed);
    fill(&mut t.sampler, d.sampler.to_string());
    fill(&mut t.head, d.head.to_string().to_lowercase());
    fill(&mut t.cosine_scale, DEFAULT_COSINE_SCALE);
    let sampler: Sampler = t.sampler.as_deref().unwrap_or_default().parse().map_err(usage)?;
    let head: Head = t.head.as_deref().unwrap_or_default().parse().map_err(usage)?;
    let out = TrainConfig {
        epochs: t.epochs.unwrap_or_default(),
        batch_size: t.batch_size.unwrap_or_default(),
        lr0: t.lr.unwrap_or_default(),
        weight_decay: t.wd.unwrap_or_default(),
        momentum: t.momentum.unwrap_or_default(),
        seed: t.seed.unwrap_or_default(),
        sampler,
        maxnorm: t.maxnorm,
        cosine_scale: t.cosine_scale.unwrap_or_default(),
        head,
        ..d
    };
    out.validate().map_err(usage)?;
    Ok(out)
}

/// Inference-time logit adjustment.
#[derive(Debug, Clone, Default, Args)]
pub struct PosthocArgs {
    /// none, tau-norm or logit-adjust.
    #[arg(long)]
    pub posthoc: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
}

impl PosthocArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.posthoc.kind, &self.posthoc);
        set(&mut cfg.posthoc.tau, &self.tau);
    }
}

pub fn resolve_posthoc(cfg: &mut RunConfig) -> Result<PosthocSpec, CliError> {
    let p = &mut cfg.posthoc;
    fill(&mut p.kind, "none".to_string());
    let kind: PosthocKind = p.kind.as_deref().unwrap_or_default().parse().map_err(usage)?;
    if kind != PosthocKind::None {
        fill(&mut p.tau, ltr_core::analysis::DEFAULT_POSTHOC_TAU);
    }
    let spec = PosthocSpec {
        kind,
        tau: p.tau.unwrap_or_default(),
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

pub fn write_resolved(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\n").is_err());
        let ok: RunConfig = toml::from_str("[train]\nlr = 0.1\n[sweep]\ndeltas = [0.0, 0.9]\n").unwrap();
        assert_eq!(ok.train.lr, Some(0.1));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg: RunConfig = toml::from_str("[train]\nlr = 0.1\nepochs = 3\n").unwrap();
        TrainArgs {
            lr: Some(0.5),
            ..Default::default()
        }
        .apply(&mut cfg);
        let t = resolve_train(&mut cfg).unwrap();
        assert_eq!((t.lr0, t.epochs), (0.5, 3));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        resolve_train(&mut cfg).unwrap();
        resolve_posthoc(&mut cfg).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
