//! Logits-magnitude diagnostics, weight norms and group-wise accuracy.

use std::fmt::Write as _;

use crate::classifier::{inference_logits, predict, ClassifierParams, PosthocSpec};
use crate::data::{ClassStats, FeatureDataset, Group};
use crate::matrix::{norm, Matrix};
use crate::{par, Error, Result};

/// Below this `|L_i|` the regularized standard deviation is undefined.
pub const DEFAULT_MAGNITUDE_TOLERANCE: f64 = 1e-9;
/// Classes per bin in the binned curves.
pub const DEFAULT_BIN_WIDTH: usize = 10;

/// Positive/negative logit moments of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLogitStats {
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub pos_std: f64,
    pub neg_std: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsStats {
    pub classes: Vec<ClassLogitStats>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

impl LogitsStats {
    /// Moments from an `N x K` logit matrix and the true labels.
    /// Standard deviations use the population (divide-by-n) form.
    pub fn from_logits(logits: &Matrix, labels: &[usize]) -> Result<Self> {
        if logits.rows() != labels.len() {
            return Err(Error::invalid("labels", "one label per logit row required"));
        }
        let k = logits.cols();
        let classes = (0..k)
            .map(|i| {
                let column = |positive: bool| {
                    labels
                        .iter()
                        .enumerate()
                        .filter(move |(_, &y)| (y == i) == positive)
                        .map(move |(n, _)| logits[(n, i)])
                };
                let (pos_mean, pos_std, pos_count) = mean_std(column(true));
                let (neg_mean, neg_std, neg_count) = mean_std(column(false));
                if pos_count == 0 {
                    return Err(Error::MetricUndefined {
                        class: i,
                        reason: "no positive samples in the evaluation set".into(),
                    });
                }
                if neg_count == 0 {
                    return Err(Error::MetricUndefined {
                        class: i,
                        reason: "no negative samples in the evaluation set".into(),
                    });
                }
                Ok(ClassLogitStats {
                    pos_mean,
                    neg_mean,
                    pos_std,
                    neg_std,
                    pos_count,
                    neg_count,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// `N x K` logits of `params` (after `posthoc`) over `eval`.
pub fn eval_logits(
    params: &ClassifierParams,
    posthoc: &PosthocSpec,
    eval: &FeatureDataset,
    stats: &ClassStats,
    cosine_scale: f64,
) -> Result<Matrix> {
    let rows = par::map_range_min_len(eval.len(), 64, |i| {
        inference_logits(params, posthoc, stats, eval.feature(i), cosine_scale)
    });
    let mut data = Vec::with_capacity(eval.len() * params.num_classes());
    for r in rows {
        data.extend(r?);
    }
    Ok(Matrix::from_vec(eval.len(), params.num_classes(), data))
}

pub fn collect_logits_stats(
    params: &ClassifierParams,
    posthoc: &PosthocSpec,
    eval: &FeatureDataset,
    stats: &ClassStats,
    cosine_scale: f64,
) -> Result<LogitsStats> {
    let logits = eval_logits(params, posthoc, eval, stats, cosine_scale)?;
    LogitsStats::from_logits(&logits, eval.labels())
}

/// Logits magnitude `L_i = E[z_i | y = i] - E[z_i | y != i]`.
pub fn logits_magnitude(ls: &LogitsStats) -> Vec<f64> {
    ls.classes.iter().map(|c| c.pos_mean - c.neg_mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StdSource {
    Positives,
    Negatives,
}

/// Regularized standard deviation `r_i = σ_i / L_i` (positive-sample σ).
pub fn regularized_std(ls: &LogitsStats, magnitude: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    regularized_std_from(ls, magnitude, tolerance, StdSource::Positives)
}

pub fn regularized_std_from(
    ls: &LogitsStats,
    magnitude: &[f64],
    tolerance: f64,
    source: StdSource,
) -> Result<Vec<f64>> {
    ls.classes
        .iter()
        .zip(magnitude)
        .enumerate()
        .map(|(i, (c, &l))| {
            if !(l.abs() > tolerance) {
                return Err(Error::MetricUndefined {
                    class: i,
                    reason: format!("|L| = {} is within tolerance {tolerance}", l.abs()),
                });
            }
            let sigma = match source {
                StdSource::Positives => c.pos_std,
                StdSource::Negatives => c.neg_std,
            };
            Ok(sigma / l)
        })
        .collect()
}

/// Rescales `L` so its mean absolute value is 1 (1-norm equals K).
pub fn l1_regularize_magnitude(magnitude: &[f64]) -> Result<Vec<f64>> {
    let l1: f64 = magnitude.iter().map(|v| v.abs()).sum();
    if !(l1 > 0.0) || !l1.is_finite() {
        return Err(Error::invalid("L", "1-norm must be finite and non-zero"));
    }
    let k = magnitude.len() as f64;
    Ok(magnitude.iter().map(|v| v * k / l1).collect())
}

/// Euclidean norm of each weight row.
pub fn weight_norms(params: &ClassifierParams) -> Vec<f64> {
    params.weights.iter_rows().map(norm).collect()
}

/// Means over consecutive runs of `width` entries (last bin may be short).
pub fn binned_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks(width.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// `max - min` of the binned values.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Top-1 accuracy in percent; group entries are `None` when no eval sample
/// belongs to that group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAccuracy {
    pub all: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl GroupAccuracy {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

pub fn group_accuracy_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    stats: &ClassStats,
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions", "one prediction per label required"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("eval", "empty evaluation set"));
    }
    // [many, medium, few] x (hits, total)
    let mut tally = [(0usize, 0usize); 3];
    let mut hits = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let slot = &mut tally[stats.group(y) as usize];
        slot.1 += 1;
        if p == y {
            slot.0 += 1;
            hits += 1;
        }
    }
    let pct = |(h, n): (usize, usize)| (n > 0).then(|| 100.0 * h as f64 / n as f64);
    Ok(GroupAccuracy {
        all: 100.0 * hits as f64 / labels.len() as f64,
        many: pct(tally[0]),
        medium: pct(tally[1]),
        few: pct(tally[2]),
    })
}

pub fn predictions(logits: &Matrix) -> Result<Vec<usize>> {
    logits.iter_rows().map(predict).collect()
}

pub fn group_accuracy(
    params: &ClassifierParams,
    posthoc: &PosthocSpec,
    eval: &FeatureDataset,
    stats: &ClassStats,
    cosine_scale: f64,
) -> Result<GroupAccuracy> {
    let logits = eval_logits(params, posthoc, eval, stats, cosine_scale)?;
    group_accuracy_from_predictions(&predictions(&logits)?, eval.labels(), stats)
}

/// Every per-class diagnostic for one trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub counts: Vec<usize>,
    pub groups: Vec<Group>,
    pub logits: LogitsStats,
    pub magnitude: Vec<f64>,
    pub magnitude_regularized: Vec<f64>,
    /// Positive-sample regularized std; `None` where `|L_i|` is too small.
    pub reg_std: Vec<Option<f64>>,
    /// Negative-sample variant.
    pub reg_std_neg: Vec<Option<f64>>,
    pub weight_norms: Vec<f64>,
    pub accuracy: GroupAccuracy,
}

fn per_class_r(ls: &LogitsStats, l: &[f64], source: StdSource) -> Vec<Option<f64>> {
    ls.classes
        .iter()
        .zip(l)
        .map(|(c, &li)| {
            let s = match source {
                StdSource::Positives => c.pos_std,
                StdSource::Negatives => c.neg_std,
            };
            (li.abs() > DEFAULT_MAGNITUDE_TOLERANCE).then(|| s / li)
        })
        .collect()
}

pub fn metrics_report(
    params: &ClassifierParams,
    posthoc: &PosthocSpec,
    eval: &FeatureDataset,
    stats: &ClassStats,
    cosine_scale: f64,
) -> Result<MetricsReport> {
    let logits = eval_logits(params, posthoc, eval, stats, cosine_scale)?;
    let ls = LogitsStats::from_logits(&logits, eval.labels())?;
    let accuracy = group_accuracy_from_predictions(&predictions(&logits)?, eval.labels(), stats)?;
    let magnitude = logits_magnitude(&ls);
    let magnitude_regularized = l1_regularize_magnitude(&magnitude)?;
    Ok(MetricsReport {
        counts: stats.counts().to_vec(),
        groups: stats.groups().to_vec(),
        reg_std: per_class_r(&ls, &magnitude, StdSource::Positives),
        reg_std_neg: per_class_r(&ls, &magnitude, StdSource::Negatives),
        logits: ls,
        magnitude,
        magnitude_regularized,
        weight_norms: weight_norms(params),
        accuracy,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(values: impl Iterator<Item = String>) -> String {
    values.collect::<Vec<_>>().join(",")
}

impl MetricsReport {
    /// Spread of the binned 1-norm regularized magnitude.
    pub fn magnitude_spread(&self, bin_width: usize) -> f64 {
        spread(&binned_means(&self.magnitude_regularized, bin_width))
    }

    /// `key=value` summary; vectors are comma-separated, absent values empty.
    pub fn to_key_value(&self) -> String {
        let a = &self.accuracy;
        let mut out = String::new();
        let _ = writeln!(out, "acc_all={}", a.all);
        let _ = writeln!(out, "acc_many={}", opt(a.many));
        let _ = writeln!(out, "acc_medium={}", opt(a.medium));
        let _ = writeln!(out, "acc_few={}", opt(a.few));
        let _ = writeln!(out, "L={}", join(self.magnitude.iter().map(f64::to_string)));
        let _ = writeln!(out, "L_reg={}", join(self.magnitude_regularized.iter().map(f64::to_string)));
        let _ = writeln!(out, "r={}", join(self.reg_std.iter().map(|v| opt(*v))));
        let _ = writeln!(out, "r_neg={}", join(self.reg_std_neg.iter().map(|v| opt(*v))));
        let _ = writeln!(out, "weight_norm={}", join(self.weight_norms.iter().map(f64::to_string)));
        let _ = writeln!(out, "L_reg_bin10_spread={}", self.magnitude_spread(DEFAULT_BIN_WIDTH));
        out
    }

    /// `class,count,group,L,L_reg,r,weight_norm`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,group,L,L_reg,r,weight_norm\n");
        for i in 0..self.counts.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                self.counts[i],
                self.groups[i],
                self.magnitude[i],
                self.magnitude_regularized[i],
                opt(self.reg_std[i]),
                self.weight_norms[i]
            );
        }
        out
    }

    /// Bin means of the per-class columns. Undefined `r` entries are skipped
    /// inside a bin; a bin with none defined leaves the field empty.
    pub fn to_binned_csv(&self, bin_width: usize) -> String {
        let w = bin_width.max(1);
        let mut out = String::from("bin,first_class,last_class,L,L_reg,r,weight_norm\n");
        let bins_l = binned_means(&self.magnitude, w);
        let bins_lr = binned_means(&self.magnitude_regularized, w);
        let bins_wn = binned_means(&self.weight_norms, w);
        for (b, chunk) in self.reg_std.chunks(w).enumerate() {
            let defined: Vec<f64> = chunk.iter().flatten().copied().collect();
            let r = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            let first = b * w;
            let last = (first + w).min(self.counts.len()) - 1;
            let _ = writeln!(
                out,
                "{b},{first},{last},{},{},{},{}",
                bins_l[b],
                bins_lr[b],
                opt(r),
                bins_wn[b]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupThresholds;

    fn hand_table() -> LogitsStats {
        // class 0 positives: 2, 4; negatives: 0, 1, -1, 0
        let logits = Matrix::from_rows(&[
            vec![2.0, 0.0],
            vec![4.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 1.0],
            vec![0.0, 1.0],
        ]);
        LogitsStats::from_logits(&logits, &[0, 0, 1, 1, 1, 1]).unwrap()
    }

    #[test]
    fn hand_table_moments() {
        let ls = hand_table();
        let c0 = ls.classes[0];
        assert_eq!((c0.pos_mean, c0.neg_mean, c0.pos_std), (3.0, 0.0, 1.0));
        assert_eq!((c0.pos_count, c0.neg_count), (2, 4));
        assert_eq!(logits_magnitude(&ls)[0], 3.0);
        let r = regularized_std(&ls, &logits_magnitude(&ls), DEFAULT_MAGNITUDE_TOLERANCE).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn constant_logits_have_zero_std() {
        let logits = Matrix::from_rows(&[vec![5.0, -2.0], vec![-2.0, 5.0]]);
        let ls = LogitsStats::from_logits(&logits, &[0, 1]).unwrap();
        for c in &ls.classes {
            assert_eq!((c.pos_mean, c.neg_mean, c.pos_std), (5.0, -2.0, 0.0));
        }
    }

    #[test]
    fn missing_positives_is_undefined() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0, 0.5], vec![2.0, 0.0, 0.5]]);
        assert!(matches!(
            LogitsStats::from_logits(&logits, &[0, 1]),
            Err(Error::MetricUndefined { class: 2, .. })
        ));
    }

    #[test]
    fn reg_std_undefined_for_zero_magnitude() {
        let logits = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let ls = LogitsStats::from_logits(&logits, &[0, 1]).unwrap();
        let l = logits_magnitude(&ls);
        assert_eq!(l, vec![0.0, 0.0]);
        assert!(matches!(
            regularized_std(&ls, &l, DEFAULT_MAGNITUDE_TOLERANCE),
            Err(Error::MetricUndefined { class: 0, .. })
        ));
    }

    #[test]
    fn l1_regularization() {
        assert_eq!(l1_regularize_magnitude(&[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(l1_regularize_magnitude(&[3.0, 1.0]).unwrap(), vec![1.5, 0.5]);
        assert!(l1_regularize_magnitude(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn hand_built_group_accuracy() {
        // classes 0: Many, 1: Medium, 2: Few
        let stats = ClassStats::from_counts(vec![200, 50, 5], GroupThresholds::default()).unwrap();
        let labels = [0, 0, 0, 1, 1, 2, 2, 2];
        let preds = [0, 0, 1, 1, 0, 2, 0, 0];
        let acc = group_accuracy_from_predictions(&preds, &labels, &stats).unwrap();
        // exhaustive count: many 2/3, medium 1/2, few 1/3, all 4/8
        assert_eq!(acc.all, 50.0);
        assert!((acc.many.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.medium, Some(50.0));
        assert!((acc.few.unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_group_is_none() {
        let stats = ClassStats::from_counts(vec![200, 150], GroupThresholds::default()).unwrap();
        let acc = group_accuracy_from_predictions(&[0, 0], &[0, 1], &stats).unwrap();
        assert_eq!(acc.all, 50.0);
        assert_eq!(acc.many, Some(50.0));
        assert_eq!(acc.medium, None);
        assert_eq!(acc.few, None);
    }

    #[test]
    fn weight_norm_examples() {
        let mut p = ClassifierParams::zeros(3, 3, crate::classifier::Head::Linear);
        assert_eq!(weight_norms(&p), vec![0.0; 3]);
        p.weights = Matrix::identity(3);
        assert_eq!(weight_norms(&p), vec![1.0; 3]);
    }

    #[test]
    fn binning() {
        assert_eq!(binned_means(&[1.0, 3.0, 5.0, 7.0, 10.0], 2), vec![2.0, 6.0, 10.0]);
        assert_eq!(spread(&[2.0, 6.0, 10.0]), 8.0);
    }
}
