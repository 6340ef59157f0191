//! The unified loss engine: soft-label cross-entropy, target construction,
//! per-sample re-weighting and analytic gradients through every head.

use std::fmt;
use std::str::FromStr;

use crate::classifier::{
    apply_balanced_softmax_offset, apply_ldam_margin, forward_logits, ClassifierParams, Head,
};
use crate::data::ClassStats;
use crate::matrix::{dot, log_softmax, norm, sigmoid, softmax, softmax_complement, Matrix};
use crate::{Error, Result};

pub const DEFAULT_FOCAL_GAMMA: f64 = 1.0;
pub const DEFAULT_CB_BETA: f64 = 0.9999;
pub const DEFAULT_LDAM_GAMMA: f64 = 0.25;
/// Largest LDAM margin (the one of the rarest class) used when calibrating `C`.
pub const DEFAULT_LDAM_MAX_MARGIN: f64 = 0.5;
pub const DEFAULT_LORT_DELTA: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMethod {
    Ce,
    Lort,
    Focal,
    ClassBalancedCe,
    ClassBalancedBce,
    Ldam,
    BalancedSoftmax,
}

impl LossMethod {
    pub const ALL: [LossMethod; 7] = [
        LossMethod::Ce,
        LossMethod::Lort,
        LossMethod::Focal,
        LossMethod::ClassBalancedCe,
        LossMethod::ClassBalancedBce,
        LossMethod::Ldam,
        LossMethod::BalancedSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMethod::Ce => "ce",
            LossMethod::Lort => "lort",
            LossMethod::Focal => "focal",
            LossMethod::ClassBalancedCe => "cb-ce",
            LossMethod::ClassBalancedBce => "cb-bce",
            LossMethod::Ldam => "ldam",
            LossMethod::BalancedSoftmax => "bs",
        }
    }

    /// Whether the loss is a softmax cross-entropy (gradient sums to zero).
    pub fn is_softmax_based(self) -> bool {
        self != LossMethod::ClassBalancedBce
    }
}

impl fmt::Display for LossMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        LossMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                format!("unknown loss `{s}` (expected ce, lort, focal, cb-ce, cb-bce, ldam or bs)")
            })
    }
}

/// One loss method with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub method: LossMethod,
    /// LORT label smooth value, in `[0, 1)`.
    pub delta: f64,
    /// Focal exponent or LDAM margin exponent.
    pub gamma: f64,
    /// Class-balanced β, in `[0, 1)`.
    pub beta: f64,
    /// LDAM margin constant `C`.
    pub margin: f64,
    /// Class-balanced resampling of training batches.
    pub use_resampling: bool,
}

impl LossSpec {
    fn base(method: LossMethod) -> Self {
        Self {
            method,
            delta: 0.0,
            gamma: 0.0,
            beta: 0.0,
            margin: 0.0,
            use_resampling: false,
        }
    }

    pub fn ce() -> Self {
        Self::base(LossMethod::Ce)
    }

    pub fn lort(delta: f64) -> Self {
        Self {
            delta,
            ..Self::base(LossMethod::Lort)
        }
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::base(LossMethod::Focal)
        }
    }

    pub fn cb_ce(beta: f64) -> Self {
        Self {
            beta,
            ..Self::base(LossMethod::ClassBalancedCe)
        }
    }

    pub fn cb_bce(beta: f64) -> Self {
        Self {
            beta,
            ..Self::base(LossMethod::ClassBalancedBce)
        }
    }

    pub fn ldam(margin: f64, gamma: f64) -> Self {
        Self {
            margin,
            gamma,
            ..Self::base(LossMethod::Ldam)
        }
    }

    /// LDAM with `C` chosen so the rarest class gets margin `max_margin`.
    pub fn ldam_calibrated(stats: &ClassStats, gamma: f64, max_margin: f64) -> Self {
        let c = max_margin * (stats.min_count() as f64).powf(gamma);
        Self::ldam(c, gamma)
    }

    pub fn balanced_softmax() -> Self {
        Self::base(LossMethod::BalancedSoftmax)
    }

    pub fn with_resampling(mut self, on: bool) -> Self {
        self.use_resampling = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("C", self.margin),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::invalid("loss", format!("{name} must be finite, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid("delta", format!("need 0 <= delta < 1, got {}", self.delta)));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma", format!("need gamma >= 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("need 0 <= beta < 1, got {}", self.beta)));
        }
        if self.margin < 0.0 {
            return Err(Error::invalid("C", format!("need C >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Soft label vector `ỹ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn one_hot(num_classes: usize, y: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[y] = 1.0;
        Self { probs }
    }

    /// Wraps an arbitrary distribution after checking it is one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("target", "entries must be finite and >= 0"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("target", format!("entries sum to {s}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// LORT targets: `1 - δ + δ/K` on the true class, `δ/K` elsewhere.
pub fn lort_targets(num_classes: usize, y: usize, delta: f64) -> Result<TargetDistribution> {
    if num_classes < 2 {
        return Err(Error::invalid("K", "need K >= 2"));
    }
    if y >= num_classes {
        return Err(Error::invalid("y", format!("label {y} out of range for K = {num_classes}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid("delta", format!("need 0 <= delta < 1, got {delta}")));
    }
    let off = delta / num_classes as f64;
    let mut probs = vec![off; num_classes];
    probs[y] = 1.0 - delta + off;
    Ok(TargetDistribution { probs })
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::NumericalDomain("NaN logit".into()));
    }
    Ok(())
}

/// `-Σ ỹ_i log softmax(z)_i`.
pub fn soft_ce_loss(z: &[f64], target: &TargetDistribution) -> Result<f64> {
    check_logits(z)?;
    let ls = log_softmax(z);
    Ok(-target.probs.iter().zip(&ls).map(|(t, l)| t * l).sum::<f64>())
}

/// `softmax(z) - ỹ`. The entry of the largest logit is formed as
/// `(1 - ỹ_i) - Σ_{j≠i} s_j` to avoid cancellation near saturation.
pub fn soft_ce_grad(z: &[f64], target: &TargetDistribution) -> Result<Vec<f64>> {
    check_logits(z)?;
    let s = softmax(z);
    let top = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
    Ok(s.iter()
        .zip(&target.probs)
        .enumerate()
        .map(|(i, (&si, &ti))| {
            if i == top {
                (1.0 - ti) - softmax_complement(z, i)
            } else {
                si - ti
            }
        })
        .collect())
}

/// Focal weight `(1 - p_y)^γ`.
pub fn focal_weight(p_y: f64, gamma: f64) -> f64 {
    (1.0 - p_y).powf(gamma)
}

/// Class-balanced weight `(1 - β) / (1 - β^n)`, with `β^n` taken as
/// `exp(n ln β)` so large counts cannot underflow through repeated products.
pub fn cb_weight(n_y: usize, beta: f64) -> f64 {
    let one_minus_pow = -(n_y as f64 * beta.ln()).exp_m1();
    (1.0 - beta) / one_minus_pow
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss value and `dL/dz` for one sample, given head logits `z`.
pub fn loss_and_logit_grad(
    spec: &LossSpec,
    z: &[f64],
    y: usize,
    stats: &ClassStats,
) -> Result<(f64, Vec<f64>)> {
    check_logits(z)?;
    let k = z.len();
    if y >= k {
        return Err(Error::invalid("y", format!("label {y} out of range for K = {k}")));
    }
    let one_hot = || TargetDistribution::one_hot(k, y);
    let ce_on = |logits: &[f64], t: &TargetDistribution| -> Result<(f64, Vec<f64>)> {
        Ok((soft_ce_loss(logits, t)?, soft_ce_grad(logits, t)?))
    };
    match spec.method {
        LossMethod::Ce => ce_on(z, &one_hot()),
        LossMethod::Lort => ce_on(z, &lort_targets(k, y, spec.delta)?),
        LossMethod::Ldam => {
            // the margin is a constant shift, so dL/dz = dL/dz'
            let zm = apply_ldam_margin(z, y, stats, spec.margin, spec.gamma);
            ce_on(&zm, &one_hot())
        }
        LossMethod::BalancedSoftmax => {
            let zb = apply_balanced_softmax_offset(z, stats);
            ce_on(&zb, &one_hot())
        }
        LossMethod::ClassBalancedCe => {
            let w = cb_weight(stats.count(y), spec.beta);
            let (l, g) = ce_on(z, &one_hot())?;
            Ok((w * l, g.into_iter().map(|v| w * v).collect()))
        }
        LossMethod::Focal => {
            let log_p = log_softmax(z)[y];
            let s = softmax(z);
            let p = s[y];
            let q = softmax_complement(z, y);
            let w = q.powf(spec.gamma);
            let loss = -w * log_p;
            // d/dz_j of -(1-p)^γ ln p = coef · (s_j - 1{j=y})
            let mut coef = w;
            if spec.gamma != 0.0 && q > 0.0 {
                coef -= spec.gamma * q.powf(spec.gamma - 1.0) * p * log_p;
            }
            let grad = s
                .iter()
                .enumerate()
                .map(|(j, &sj)| coef * if j == y { -q } else { sj })
                .collect();
            Ok((loss, grad))
        }
        LossMethod::ClassBalancedBce => {
            let w = cb_weight(stats.count(y), spec.beta);
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(k);
            for (j, &zj) in z.iter().enumerate() {
                if j == y {
                    loss += softplus(-zj);
                    grad.push(-w * sigmoid(-zj));
                } else {
                    loss += softplus(zj);
                    grad.push(w * sigmoid(zj));
                }
            }
            Ok((w * loss, grad))
        }
    }
}

/// Gradient buffers congruent to [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
            scales: vec![0.0; num_classes],
        }
    }

    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Self::zeros(params.num_classes(), params.dim())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        let pairs = self
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(other.weights.as_slice())
            .chain(self.bias.iter_mut().zip(&other.bias))
            .chain(self.scales.iter_mut().zip(&other.scales));
        for (a, b) in pairs {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.scales.iter_mut())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .as_slice()
            .iter()
            .chain(&self.bias)
            .chain(&self.scales)
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Backpropagates `dL/dz` through the head and adds the result into `out`.
pub fn accumulate_head_grad(
    params: &ClassifierParams,
    x: &[f64],
    dz: &[f64],
    cosine_scale: f64,
    out: &mut ParamGrads,
) -> Result<()> {
    let k = params.num_classes();
    match params.head {
        Head::Linear => {
            for i in 0..k {
                let g = dz[i];
                out.weights.row_mut(i).iter_mut().zip(x).for_each(|(w, xv)| *w += g * xv);
                out.bias[i] += g;
            }
        }
        Head::Lws => {
            for i in 0..k {
                let g = dz[i];
                let row = params.weights.row(i);
                let gc = g * params.scales[i];
                out.weights.row_mut(i).iter_mut().zip(x).for_each(|(w, xv)| *w += gc * xv);
                out.bias[i] += g;
                out.scales[i] += g * dot(row, x);
            }
        }
        Head::Cosine => {
            let xn = norm(x);
            if xn == 0.0 {
                return Err(Error::NumericalDomain("cosine head on a zero feature vector".into()));
            }
            for i in 0..k {
                let row = params.weights.row(i);
                let wn = norm(row);
                if wn == 0.0 {
                    return Err(Error::NumericalDomain(format!(
                        "cosine head with zero-norm weight row {i}"
                    )));
                }
                // dz_i/dW_i = s/(|W_i||x|) · (x - (W_i·x) W_i / |W_i|²)
                let a = dot(row, x);
                let f = dz[i] * cosine_scale / (wn * xn);
                let proj = a / (wn * wn);
                for ((gw, &xv), &wv) in out.weights.row_mut(i).iter_mut().zip(x).zip(row) {
                    *gw += f * (xv - proj * wv);
                }
            }
        }
    }
    Ok(())
}

/// Loss and parameter gradient for one labelled feature vector.
pub fn per_sample_loss_and_grad(
    spec: &LossSpec,
    params: &ClassifierParams,
    stats: &ClassStats,
    x: &[f64],
    y: usize,
    cosine_scale: f64,
) -> Result<(f64, ParamGrads)> {
    let z = forward_logits(params, x, cosine_scale)?;
    let (loss, dz) = loss_and_logit_grad(spec, &z, y, stats)?;
    let mut grads = ParamGrads::zeros_like(params);
    accumulate_head_grad(params, x, &dz, cosine_scale, &mut grads)?;
    Ok((loss, grads))
}

/// Loss only (used by finite-difference checks).
pub fn per_sample_loss(
    spec: &LossSpec,
    params: &ClassifierParams,
    stats: &ClassStats,
    x: &[f64],
    y: usize,
    cosine_scale: f64,
) -> Result<f64> {
    let z = forward_logits(params, x, cosine_scale)?;
    Ok(loss_and_logit_grad(spec, &z, y, stats)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupThresholds;

    fn stats(counts: &[usize]) -> ClassStats {
        ClassStats::from_counts(counts.to_vec(), GroupThresholds::default()).unwrap()
    }

    #[test]
    fn lort_target_examples() {
        let t = lort_targets(4, 0, 0.98).unwrap();
        let want = [0.265, 0.245, 0.245, 0.245];
        for (a, b) in t.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(lort_targets(5, 2, 0.0).unwrap(), TargetDistribution::one_hot(5, 2));
        assert_eq!(lort_targets(2, 1, 0.5).unwrap().probs(), &[0.25, 0.75]);
    }

    #[test]
    fn lort_rejects_bad_delta() {
        for d in [1.0, -0.1, f64::NAN, 1.5] {
            assert!(matches!(lort_targets(3, 0, d), Err(Error::InvalidArgument { .. })));
        }
        assert!(lort_targets(3, 3, 0.5).is_err());
    }

    #[test]
    fn soft_ce_examples() {
        let oh = TargetDistribution::one_hot(2, 0);
        assert!((soft_ce_loss(&[0.0, 0.0], &oh).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // oracle: ln(1 + e^-2) = 0.12692801104297249644 (mpmath, 40 digits)
        assert!((soft_ce_loss(&[2.0, 0.0], &oh).unwrap() - 0.126_928_011_042_972_5).abs() < 1e-15);
        assert_eq!(soft_ce_grad(&[0.0, 0.0], &oh).unwrap(), vec![-0.5, 0.5]);
        assert!(soft_ce_loss(&[f64::NAN, 0.0], &oh).is_err());
    }

    #[test]
    fn soft_ce_at_matching_target_is_entropy() {
        let z = [0.3, -1.0, 2.2, 0.0];
        let t = TargetDistribution::new(softmax(&z)).unwrap();
        let entropy: f64 = -t.probs().iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((soft_ce_loss(&z, &t).unwrap() - entropy).abs() < 1e-14);
        assert!(soft_ce_grad(&z, &t).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(focal_weight(0.3, 0.0), 1.0);
        assert_eq!(focal_weight(1.0, 2.0), 0.0);
        assert_eq!(focal_weight(0.5, 2.0), 0.25);
        assert_eq!(cb_weight(17, 0.0), 1.0);
        for b in [0.1, 0.9, 0.9999] {
            assert!((cb_weight(1, b) - 1.0).abs() < 1e-12);
        }
        // oracle: 0.001/(1 - 0.999^100) = 0.0105033352783863763 (mpmath, 40 digits)
        assert!((cb_weight(100, 0.999) - 0.010_503_335_278_386_376).abs() < 1e-15);
    }

    #[test]
    fn lort_zero_is_ce() {
        let s = stats(&[10, 5, 2]);
        let z = [0.2, 1.5, -0.7];
        let a = loss_and_logit_grad(&LossSpec::ce(), &z, 1, &s).unwrap();
        let b = loss_and_logit_grad(&LossSpec::lort(0.0), &z, 1, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn balanced_softmax_equal_counts_is_ce() {
        let s = stats(&[4, 4, 4]);
        let z = [0.2, 1.5, -0.7];
        let a = loss_and_logit_grad(&LossSpec::ce(), &z, 2, &s).unwrap();
        let b = loss_and_logit_grad(&LossSpec::balanced_softmax(), &z, 2, &s).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::lort(1.0).validate().is_err());
        assert!(LossSpec::focal(-1.0).validate().is_err());
        assert!(LossSpec::cb_ce(1.0).validate().is_err());
        assert!(LossSpec::ldam(-0.1, 0.25).validate().is_err());
        assert!(LossSpec::ldam(0.5, 0.25).validate().is_ok());
        assert_eq!("cb-bce".parse::<LossMethod>().unwrap(), LossMethod::ClassBalancedBce);
        assert!("softmax".parse::<LossMethod>().is_err());
    }

    #[test]
    fn ldam_calibration_hits_max_margin() {
        let s = stats(&[500, 80, 5]);
        let spec = LossSpec::ldam_calibrated(&s, 0.25, 0.5);
        let m = crate::classifier::ldam_margin(&s, 2, spec.margin, spec.gamma);
        assert!((m - 0.5).abs() < 1e-15);
    }
}
