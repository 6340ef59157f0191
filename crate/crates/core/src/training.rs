//! Classifier re-training: seeded momentum SGD with a cosine schedule,
//! optional class-balanced resampling and MaxNorm projection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{forward_logits, predict, ClassifierParams, Head, DEFAULT_COSINE_SCALE};
use crate::data::{class_stats, ClassStats, FeatureDataset, GroupThresholds};
use crate::losses::{accumulate_head_grad, loss_and_logit_grad, per_sample_loss, LossSpec, ParamGrads};
use crate::matrix::{norm, Matrix};
use crate::{par, seed, Error, Result};

/// Samples per work unit when a batch gradient is split across threads.
/// Chunk boundaries are fixed so the summation order never depends on
/// the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sampler {
    Shuffle,
    ClassBalanced,
}

impl FromStr for Sampler {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "shuffle" => Ok(Sampler::Shuffle),
            "balanced" | "class-balanced" => Ok(Sampler::ClassBalanced),
            _ => Err(format!("unknown sampler `{s}` (expected shuffle or balanced)")),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Shuffle => "shuffle",
            Sampler::ClassBalanced => "balanced",
        })
    }
}

/// Which parameter blocks an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    pub weights: bool,
    pub bias: bool,
    pub scales: bool,
}

impl ParamGroups {
    pub const ALL: ParamGroups = ParamGroups {
        weights: true,
        bias: true,
        scales: true,
    };
    pub const BIAS_ONLY: ParamGroups = ParamGroups {
        weights: false,
        bias: true,
        scales: false,
    };
    pub const SCALES_ONLY: ParamGroups = ParamGroups {
        weights: false,
        bias: false,
        scales: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub sampler: Sampler,
    pub maxnorm: Option<f64>,
    pub cosine_scale: f64,
    pub head: Head,
    pub trainable: ParamGroups,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr0: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            sampler: Sampler::Shuffle,
            maxnorm: None,
            cosine_scale: DEFAULT_COSINE_SCALE,
            head: Head::Linear,
            trainable: ParamGroups::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid("lr0", format!("must be finite and > 0, got {}", self.lr0)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if let Some(d) = self.maxnorm {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid("maxnorm", "must be finite and > 0"));
            }
        }
        if !(self.cosine_scale > 0.0) || !self.cosine_scale.is_finite() {
            return Err(Error::invalid("cosine_scale", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamGrads,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ClassifierParams) -> Self {
        Self {
            velocity: ParamGrads::zeros_like(params),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }

    /// `epoch,loss,lr,eval_acc` CSV; a missing eval accuracy is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr,eval_acc\n");
        for r in &self.epochs {
            let acc = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.lr, acc));
        }
        out
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps", "must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::invalid(
            "step",
            format!("step {step} exceeds total_steps {total_steps}"),
        ));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Draws `epoch_len` indices by picking a class uniformly, then a member of
/// that class uniformly (with replacement).
pub fn balanced_sample_indices(
    stats: &ClassStats,
    class_indices: &[Vec<usize>],
    epoch_len: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if class_indices.len() != stats.num_classes() {
        return Err(Error::invalid("class_indices", "one index list per class required"));
    }
    if let Some(k) = class_indices.iter().position(Vec::is_empty) {
        return Err(Error::InvalidDataset(format!("class {k} has no samples to draw from")));
    }
    let mut rng = seed::rng(seed);
    let k = class_indices.len();
    Ok((0..epoch_len)
        .map(|_| {
            let members = &class_indices[rng.random_range(0..k)];
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// One momentum-SGD update: `v ← μv + g + λw`, `w ← w − ηv`.
/// Weight decay applies to the weight matrix only.
pub fn sgd_step(
    params: &mut ClassifierParams,
    grads: &ParamGrads,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    groups: ParamGroups,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NumericalDomain(format!(
            "non-finite gradient at optimizer step {}",
            opt.step
        )));
    }
    let v = &mut opt.velocity;
    if groups.weights {
        let w = params.weights.as_mut_slice();
        for ((p, vel), g) in w
            .iter_mut()
            .zip(v.weights.as_mut_slice())
            .zip(grads.weights.as_slice())
        {
            *vel = momentum * *vel + g + weight_decay * *p;
            *p -= lr * *vel;
        }
    }
    let update = |ps: &mut [f64], vs: &mut [f64], gs: &[f64]| {
        for ((p, vel), g) in ps.iter_mut().zip(vs).zip(gs) {
            *vel = momentum * *vel + g;
            *p -= lr * *vel;
        }
    };
    if groups.bias {
        update(&mut params.bias, &mut v.bias, &grads.bias);
    }
    if groups.scales {
        update(&mut params.scales, &mut v.scales, &grads.scales);
    }
    opt.step += 1;
    Ok(())
}

/// Mean loss and gradient over `indices`, reduced in a fixed order.
pub fn batch_loss_and_grad(
    spec: &LossSpec,
    params: &ClassifierParams,
    stats: &ClassStats,
    data: &FeatureDataset,
    indices: &[usize],
    cosine_scale: f64,
) -> Result<(f64, ParamGrads)> {
    if indices.is_empty() {
        return Err(Error::invalid("indices", "empty batch"));
    }
    let n_chunks = indices.len().div_ceil(GRAD_CHUNK);
    let partials = par::map_range(n_chunks, |c| -> Result<(f64, ParamGrads)> {
        let mut grads = ParamGrads::zeros_like(params);
        let mut loss = 0.0;
        for &i in &indices[c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(indices.len())] {
            let x = data.feature(i);
            let z = forward_logits(params, x, cosine_scale)?;
            let (l, dz) = loss_and_logit_grad(spec, &z, data.label(i), stats)?;
            loss += l;
            accumulate_head_grad(params, x, &dz, cosine_scale, &mut grads)?;
        }
        Ok((loss, grads))
    });
    let mut total = ParamGrads::zeros_like(params);
    let mut loss = 0.0;
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / indices.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Top-1 accuracy in percent, no post-hoc adjustment.
pub fn accuracy(params: &ClassifierParams, data: &FeatureDataset, cosine_scale: f64) -> Result<f64> {
    let hits = par::map_range_min_len(data.len(), 64, |i| -> Result<bool> {
        let z = forward_logits(params, data.feature(i), cosine_scale)?;
        Ok(predict(&z)? == data.label(i))
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

struct Phase<'a> {
    train: &'a FeatureDataset,
    eval: Option<&'a FeatureDataset>,
    stats: &'a ClassStats,
    class_indices: &'a [Vec<usize>],
    spec: &'a LossSpec,
    cfg: &'a TrainConfig,
    sampler: Sampler,
    groups: ParamGroups,
    stream: u64,
}

fn run_phase(phase: &Phase<'_>, params: &mut ClassifierParams) -> Result<TrainHistory> {
    let cfg = phase.cfg;
    let n = phase.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = OptimizerState::new(params);
    let mut shuffle_rng = seed::rng(seed::derive_str(phase.stream, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let diverged = |reason: String| Error::Divergence {
            epoch,
            last_good: epoch.checked_sub(1),
            reason,
        };
        let epoch_order: Vec<usize> = match phase.sampler {
            Sampler::Shuffle => {
                order.shuffle(&mut shuffle_rng);
                order.clone()
            }
            Sampler::ClassBalanced => balanced_sample_indices(
                phase.stats,
                phase.class_indices,
                n,
                seed::derive_index(phase.stream, "balanced", epoch as u64),
            )?,
        };
        let epoch_lr = cosine_lr(opt.step, total_steps, cfg.lr0)?;
        let mut loss_sum = 0.0;
        for batch in epoch_order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_loss_and_grad(
                phase.spec,
                params,
                phase.stats,
                phase.train,
                batch,
                cfg.cosine_scale,
            )?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(format!("non-finite loss or gradient at step {}", opt.step)));
            }
            let lr = cosine_lr(opt.step, total_steps, cfg.lr0)?;
            sgd_step(
                params,
                &grads,
                &mut opt,
                lr,
                cfg.weight_decay,
                cfg.momentum,
                phase.groups,
            )
            .map_err(|e| diverged(e.to_string()))?;
            if let Some(d) = cfg.maxnorm {
                params.project_rows(d);
            }
            if params.validate().is_err() {
                return Err(diverged(format!("parameters became non-finite at step {}", opt.step)));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let eval_acc = match phase.eval {
            Some(ev) => Some(accuracy(params, ev, cfg.cosine_scale)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / epoch_order.len() as f64,
            lr: epoch_lr,
            eval_acc,
        });
    }
    Ok(history)
}

/// Trains the classification head on frozen features.
///
/// The sampler is class-balanced when either `cfg.sampler` asks for it or
/// `spec.use_resampling` is set. An LWS head without `init` is trained in two
/// phases: `W, b` as a plain linear head, then the scales alone with `W, b`
/// frozen; the returned history covers the scale phase. With `init`, the
/// given parameters are adopted under `cfg.head`.
pub fn train_classifier(
    train: &FeatureDataset,
    eval: Option<&FeatureDataset>,
    spec: &LossSpec,
    cfg: &TrainConfig,
    init: Option<ClassifierParams>,
) -> Result<(ClassifierParams, TrainHistory)> {
    spec.validate()?;
    cfg.validate()?;
    if let Some(ev) = eval {
        if ev.dim() != train.dim() || ev.num_classes() != train.num_classes() {
            return Err(Error::invalid("eval", "eval set dimensions differ from the train set"));
        }
    }
    let stats = class_stats(train, GroupThresholds::default())?;
    let class_indices = train.class_indices();
    let (k, d) = (train.num_classes(), train.dim());
    let sampler = if spec.use_resampling {
        Sampler::ClassBalanced
    } else {
        cfg.sampler
    };
    let phase = |spec, groups, stream| Phase {
        train,
        eval,
        stats: &stats,
        class_indices: &class_indices,
        spec,
        cfg,
        sampler,
        groups,
        stream,
    };

    let mut params = match init {
        Some(mut p) => {
            if p.num_classes() != k || p.dim() != d {
                return Err(Error::invalid("init", "initial params do not match K x D"));
            }
            p.head = cfg.head;
            p.validate()?;
            p
        }
        None if cfg.head == Head::Lws => {
            let mut p = ClassifierParams::init(k, d, Head::Linear, seed::derive_str(cfg.seed, "init"));
            run_phase(&phase(spec, cfg.trainable, seed::derive_str(cfg.seed, "stream")), &mut p)?;
            p.head = Head::Lws;
            p
        }
        None => ClassifierParams::init(k, d, cfg.head, seed::derive_str(cfg.seed, "init")),
    };

    let (groups, stream) = if cfg.head == Head::Lws {
        (ParamGroups::SCALES_ONLY, seed::derive_str(cfg.seed, "lws-scales"))
    } else {
        (cfg.trainable, seed::derive_str(cfg.seed, "stream"))
    };
    let history = run_phase(&phase(spec, groups, stream), &mut params)?;
    Ok((params, history))
}

fn random_instance(
    rng: &mut impl Rng,
    num_classes: usize,
    dim: usize,
    head: Head,
) -> (ClassifierParams, Vec<f64>, usize, ClassStats) {
    // Rows get a random direction and a norm in [0.5, 2]: the cosine head is
    // singular at |W_i| = 0 and its curvature grows like 1/|W_i|².
    let mut params = ClassifierParams::zeros(num_classes, dim, head);
    for i in 0..num_classes {
        let row = params.weights.row_mut(i);
        loop {
            row.iter_mut().for_each(|w| *w = StandardNormal.sample(rng));
            if norm(row) > 1e-6 {
                break;
            }
        }
        let target = rng.random_range(0.5..2.0) / norm(row);
        row.iter_mut().for_each(|w| *w *= target);
    }
    for b in &mut params.bias {
        *b = rng.random_range(-1.0..1.0);
    }
    for c in &mut params.scales {
        *c = rng.random_range(0.5..2.0);
    }
    let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let y = rng.random_range(0..num_classes);
    let counts = (0..num_classes).map(|_| rng.random_range(1..=300)).collect();
    let stats = ClassStats::from_counts(counts, GroupThresholds::default()).expect("positive counts");
    (params, x, y, stats)
}

fn flat_params(p: &ClassifierParams) -> Vec<f64> {
    p.weights
        .as_slice()
        .iter()
        .chain(&p.bias)
        .chain(&p.scales)
        .copied()
        .collect()
}

fn with_flat(p: &ClassifierParams, flat: &[f64]) -> ClassifierParams {
    let (k, d) = (p.num_classes(), p.dim());
    ClassifierParams {
        weights: Matrix::from_vec(k, d, flat[..k * d].to_vec()),
        bias: flat[k * d..k * d + k].to_vec(),
        scales: flat[k * d + k..].to_vec(),
        head: p.head,
    }
}

/// Gradient norms below this are treated as exactly zero by [`gradcheck`].
pub const GRADCHECK_ZERO: f64 = 1e-12;

/// Worst norm-wise relative error `|g - g_fd| / max(|g|, |g_fd|)` between the
/// analytic gradient and central finite differences over `trials` random
/// instances. Each trial draws its own `W, b, c, x, y` and class counts.
pub fn gradcheck(
    spec: &LossSpec,
    num_classes: usize,
    dim: usize,
    head: Head,
    trials: usize,
    step: f64,
    cosine_scale: f64,
    seed: u64,
) -> Result<f64> {
    spec.validate()?;
    if trials < 1 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let errors = par::map_range(trials, |t| -> Result<f64> {
        let mut rng = seed::rng(seed::derive_index(seed, "gradcheck", t as u64));
        let (params, x, y, stats) = random_instance(&mut rng, num_classes, dim, head);
        let (_, grads) =
            crate::losses::per_sample_loss_and_grad(spec, &params, &stats, &x, y, cosine_scale)?;
        let analytic: Vec<f64> = grads.values().collect();
        let base = flat_params(&params);
        let mut probe = base.clone();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..base.len() {
            probe[j] = base[j] + step;
            let up = per_sample_loss(spec, &with_flat(&params, &probe), &stats, &x, y, cosine_scale)?;
            probe[j] = base[j] - step;
            let down = per_sample_loss(spec, &with_flat(&params, &probe), &stats, &x, y, cosine_scale)?;
            probe[j] = base[j];
            let numeric = (up - down) / (2.0 * step);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        // Relative error is undefined for a gradient that vanishes identically
        // (e.g. a cosine head with D = 1); fall back to the absolute error there.
        let denom = a2.sqrt().max(n2.sqrt());
        Ok(if denom < GRADCHECK_ZERO { diff2.sqrt() } else { diff2.sqrt() / denom })
    });
    errors
        .into_iter()
        .try_fold(0.0f64, |worst, e| Ok(worst.max(e?)))
}
