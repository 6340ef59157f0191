//! Classifier heads, training-time logit transforms and inference-time
//! post-hoc adjustments.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::data::{header_value, parse_header_fields, ClassStats};
use crate::matrix::{dot, norm, Matrix};
use crate::{seed, Error, Result};

/// Default scale applied to cosine logits. A scale of 1 gives raw cosines.
pub const DEFAULT_COSINE_SCALE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// `z_i = W_i·x + b_i`
    Linear,
    /// `z_i = s · cos(W_i, x)`, no bias
    Cosine,
    /// Learnable weight scaling: `z_i = c_i (W_i·x) + b_i`
    Lws,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Linear => "Linear",
            Head::Cosine => "Cosine",
            Head::Lws => "LWS",
        })
    }
}

impl FromStr for Head {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Head::Linear),
            "cosine" => Ok(Head::Cosine),
            "lws" => Ok(Head::Lws),
            _ => Err(format!("unknown head `{s}` (expected linear, cosine or lws)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub scales: Vec<f64>,
    pub head: Head,
}

impl ClassifierParams {
    pub fn zeros(num_classes: usize, dim: usize, head: Head) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
            scales: vec![1.0; num_classes],
            head,
        }
    }

    /// Weights uniform in `[-1/sqrt(D), 1/sqrt(D))`, zero bias, unit scales.
    pub fn init(num_classes: usize, dim: usize, head: Head, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut p = Self::zeros(num_classes, dim, head);
        for w in p.weights.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if self.bias.len() != k || self.scales.len() != k {
            return Err(Error::invalid("params", "bias/scale length differs from K"));
        }
        let all_finite = self
            .weights
            .as_slice()
            .iter()
            .chain(&self.bias)
            .chain(&self.scales)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NumericalDomain("non-finite classifier parameter".into()));
        }
        if self.head == Head::Lws && self.scales.iter().any(|&c| c <= 0.0) {
            return Err(Error::invalid("scales", "LWS scales must be strictly positive"));
        }
        Ok(())
    }

    /// Head logits for one feature vector.
    pub fn forward(&self, x: &[f64], cosine_scale: f64) -> Result<Vec<f64>> {
        forward_logits(self, x, cosine_scale)
    }

    /// Rescales every row whose norm exceeds `delta_max` onto the sphere of
    /// radius `delta_max`. Rows inside the ball are left bit-for-bit alone.
    pub fn project_rows(&mut self, delta_max: f64) {
        // rows already projected land within a few ulps of delta_max
        let limit = delta_max * (1.0 + 8.0 * f64::EPSILON);
        for i in 0..self.num_classes() {
            let row = self.weights.row_mut(i);
            let n = norm(row);
            if n > limit {
                let s = delta_max / n;
                row.iter_mut().for_each(|w| *w *= s);
            }
        }
    }
}

pub fn forward_logits(params: &ClassifierParams, x: &[f64], cosine_scale: f64) -> Result<Vec<f64>> {
    if x.len() != params.dim() {
        return Err(Error::invalid(
            "x",
            format!("feature length {} != D = {}", x.len(), params.dim()),
        ));
    }
    let w = &params.weights;
    match params.head {
        Head::Linear => Ok(w
            .iter_rows()
            .zip(&params.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()),
        Head::Lws => Ok(w
            .iter_rows()
            .zip(params.scales.iter().zip(&params.bias))
            .map(|(row, (c, b))| c * dot(row, x) + b)
            .collect()),
        Head::Cosine => {
            if !(cosine_scale > 0.0) {
                return Err(Error::invalid("cosine_scale", "must be > 0"));
            }
            let xn = norm(x);
            if xn == 0.0 {
                return Err(Error::NumericalDomain("cosine head on a zero feature vector".into()));
            }
            w.iter_rows()
                .enumerate()
                .map(|(i, row)| {
                    let wn = norm(row);
                    if wn == 0.0 {
                        return Err(Error::NumericalDomain(format!(
                            "cosine head with zero-norm weight row {i}"
                        )));
                    }
                    Ok(cosine_scale * dot(row, x) / (wn * xn))
                })
                .collect()
        }
    }
}

/// LDAM margin for class `y`: `C / n_y^gamma`.
pub fn ldam_margin(stats: &ClassStats, y: usize, c: f64, gamma: f64) -> f64 {
    c / (stats.count(y) as f64).powf(gamma)
}

/// Subtracts the label-dependent LDAM margin from the true-class logit.
pub fn apply_ldam_margin(z: &[f64], y: usize, stats: &ClassStats, c: f64, gamma: f64) -> Vec<f64> {
    let mut out = z.to_vec();
    out[y] -= ldam_margin(stats, y, c, gamma);
    out
}

/// Adds `ln n_i` to every logit (balanced softmax).
pub fn apply_balanced_softmax_offset(z: &[f64], stats: &ClassStats) -> Vec<f64> {
    z.iter()
        .zip(stats.counts())
        .map(|(v, &n)| v + (n as f64).ln())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosthocKind {
    None,
    TauNorm,
    LogitAdjust,
}

impl FromStr for PosthocKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PosthocKind::None),
            "tau-norm" | "taunorm" | "tau_norm" => Ok(PosthocKind::TauNorm),
            "logit-adjust" | "logitadjust" | "logit_adjust" | "la" => Ok(PosthocKind::LogitAdjust),
            _ => Err(format!(
                "unknown post-hoc kind `{s}` (expected none, tau-norm or logit-adjust)"
            )),
        }
    }
}

impl fmt::Display for PosthocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosthocKind::None => "none",
            PosthocKind::TauNorm => "tau-norm",
            PosthocKind::LogitAdjust => "logit-adjust",
        })
    }
}

/// Inference-time logit modification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosthocSpec {
    pub kind: PosthocKind,
    pub tau: f64,
}

impl PosthocSpec {
    pub const NONE: PosthocSpec = PosthocSpec {
        kind: PosthocKind::None,
        tau: 0.0,
    };

    pub fn tau_norm(tau: f64) -> Self {
        Self {
            kind: PosthocKind::TauNorm,
            tau,
        }
    }

    pub fn logit_adjust(tau: f64) -> Self {
        Self {
            kind: PosthocKind::LogitAdjust,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::invalid("tau", format!("need finite tau >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}

impl Default for PosthocSpec {
    fn default() -> Self {
        Self::NONE
    }
}

/// Effective τ-normalized weight rows `W_i / ||W_i||^τ`.
pub fn tau_normalized_rows(params: &ClassifierParams, tau: f64) -> Result<Matrix> {
    let mut out = params.weights.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::NumericalDomain(format!(
                "tau-norm with zero-norm weight row {i}"
            )));
        }
        let d = n.powf(tau);
        row.iter_mut().for_each(|w| *w /= d);
    }
    Ok(out)
}

/// Applies `spec` to logits `z` produced by `params` on feature `x`.
///
/// τ-norm recomputes the logits from `W` and `x` and drops the bias.
pub fn posthoc_adjust(
    params: &ClassifierParams,
    z: &[f64],
    spec: &PosthocSpec,
    stats: &ClassStats,
    x: &[f64],
) -> Result<Vec<f64>> {
    match spec.kind {
        PosthocKind::None => Ok(z.to_vec()),
        PosthocKind::LogitAdjust => Ok(z
            .iter()
            .zip(stats.counts())
            .map(|(v, &n)| v - spec.tau * (n as f64).ln())
            .collect()),
        PosthocKind::TauNorm => Ok(tau_normalized_rows(params, spec.tau)?.mul_vec(x)),
    }
}

/// Forward pass followed by the post-hoc adjustment.
pub fn inference_logits(
    params: &ClassifierParams,
    posthoc: &PosthocSpec,
    stats: &ClassStats,
    x: &[f64],
    cosine_scale: f64,
) -> Result<Vec<f64>> {
    let z = forward_logits(params, x, cosine_scale)?;
    match posthoc.kind {
        PosthocKind::None => Ok(z),
        _ => posthoc_adjust(params, &z, posthoc, stats, x),
    }
}

/// MaxNorm projection (returns a projected copy).
pub fn maxnorm_project(params: &ClassifierParams, delta_max: f64) -> Result<ClassifierParams> {
    if !(delta_max > 0.0) || !delta_max.is_finite() {
        return Err(Error::invalid("delta_max", "must be finite and > 0"));
    }
    let mut out = params.clone();
    out.project_rows(delta_max);
    Ok(out)
}

/// Top-1 decision; ties go to the lowest class index.
pub fn predict(z: &[f64]) -> Result<usize> {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NumericalDomain(format!("NaN logit at index {i}")));
        }
        if v > z[best] {
            best = i;
        }
    }
    if z.is_empty() {
        return Err(Error::invalid("logits", "empty logit vector"));
    }
    Ok(best)
}

const CHECKPOINT_MAGIC: &str = "LTCLS";

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> std::io::Result<()> {
    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", line.join(" "))
}

/// Serializes params in the `LTCLS v1` text format.
pub fn write_checkpoint<W: Write>(params: &ClassifierParams, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "{CHECKPOINT_MAGIC} v1 K={} D={} HEAD={}",
        params.num_classes(),
        params.dim(),
        params.head
    )?;
    for row in params.weights.iter_rows() {
        write_row(&mut w, row)?;
    }
    write_row(&mut w, &params.bias)?;
    write_row(&mut w, &params.scales)?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(params: &ClassifierParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, fs::File::create(path)?)
}

pub fn read_checkpoint<R: BufRead>(reader: R, origin: &Path) -> Result<ClassifierParams> {
    let err = |line: usize, reason: String| Error::Ingestion {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))??;
    let fields = parse_header_fields(&header, CHECKPOINT_MAGIC).map_err(|e| err(1, e))?;
    let k: usize = header_value(&fields, "K").map_err(|e| err(1, e))?;
    let d: usize = header_value(&fields, "D").map_err(|e| err(1, e))?;
    let head: Head = header_value(&fields, "HEAD").map_err(|e| err(1, e))?;

    let mut next_row = |line_no: usize, len: usize| -> Result<Vec<f64>> {
        let line = lines
            .next()
            .ok_or_else(|| err(line_no, "unexpected end of file".into()))??;
        let row: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(line_no, format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        if row.len() != len {
            return Err(err(line_no, format!("expected {len} values, found {}", row.len())));
        }
        Ok(row)
    };
    let mut data = Vec::with_capacity(k * d);
    for i in 0..k {
        data.extend(next_row(i + 2, d)?);
    }
    let bias = next_row(k + 2, k)?;
    let scales = next_row(k + 3, k)?;
    let params = ClassifierParams {
        weights: Matrix::from_vec(k, d, data),
        bias,
        scales,
        head,
    };
    params.validate().map_err(|e| err(1, e.to_string()))?;
    Ok(params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierParams> {
    let path = path.as_ref();
    read_checkpoint(BufReader::new(fs::File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupThresholds;
    use crate::matrix::softmax;

    fn stats(counts: &[usize]) -> ClassStats {
        ClassStats::from_counts(counts.to_vec(), GroupThresholds::default()).unwrap()
    }

    fn linear(rows: &[Vec<f64>], bias: Vec<f64>) -> ClassifierParams {
        let k = rows.len();
        ClassifierParams {
            weights: Matrix::from_rows(rows),
            bias,
            scales: vec![1.0; k],
            head: Head::Linear,
        }
    }

    #[test]
    fn linear_identity() {
        let p = linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert_eq!(p.forward(&[3.0, -1.0], 1.0).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn cosine_self_similarity() {
        let x = [0.3, -1.2, 2.0];
        let mut p = ClassifierParams::init(3, 3, Head::Cosine, 1);
        p.weights.row_mut(1).copy_from_slice(&x);
        let z = p.forward(&x, 16.0).unwrap();
        assert!((z[1] - 16.0).abs() < 1e-12);
        assert!(z.iter().all(|v| v.abs() <= 16.0 + 1e-12));
    }

    #[test]
    fn cosine_rejects_zero_norms() {
        let p = ClassifierParams::init(2, 2, Head::Cosine, 3);
        assert!(matches!(p.forward(&[0.0, 0.0], 1.0), Err(Error::NumericalDomain(_))));
        let z = ClassifierParams::zeros(2, 2, Head::Cosine);
        assert!(matches!(z.forward(&[1.0, 0.0], 1.0), Err(Error::NumericalDomain(_))));
    }

    #[test]
    fn lws_uniform_scale_keeps_argmax() {
        let mut p = ClassifierParams::init(4, 3, Head::Linear, 9);
        p.bias = vec![0.0; 4];
        let mut q = p.clone();
        q.head = Head::Lws;
        q.scales = vec![2.0; 4];
        for x in [[1.0, 2.0, -0.5], [-3.0, 0.1, 0.2], [0.0, 0.0, 1.0]] {
            let a = predict(&p.forward(&x, 1.0).unwrap()).unwrap();
            let b = predict(&q.forward(&x, 1.0).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ldam_margins() {
        let s = stats(&[100, 1]);
        assert_eq!(apply_ldam_margin(&[1.0, 2.0], 1, &s, 0.5, 0.25), vec![1.0, 1.5]);
        assert_eq!(apply_ldam_margin(&[1.0, 2.0], 0, &s, 0.0, 0.25), vec![1.0, 2.0]);
        // oracle: 0.5/1 over 0.5/100^0.25 = 100^0.25 = sqrt(10)
        let ratio = ldam_margin(&s, 1, 0.5, 0.25) / ldam_margin(&s, 0, 0.5, 0.25);
        assert!((ratio - 3.162_277_660_168_379_4).abs() < 1e-12);
    }

    #[test]
    fn balanced_softmax_offsets() {
        let z = [0.3, -1.0, 2.0];
        let eq = apply_balanced_softmax_offset(&z, &stats(&[7, 7, 7]));
        for (a, b) in softmax(&eq).iter().zip(softmax(&z)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(apply_balanced_softmax_offset(&z, &stats(&[1, 1, 1])), z.to_vec());
        let o = apply_balanced_softmax_offset(&[0.0, 0.0], &stats(&[100, 10]));
        assert!(((o[0] - o[1]) - std::f64::consts::LN_10).abs() < 1e-14);
    }

    #[test]
    fn posthoc_reductions() {
        let p = linear(&[vec![2.0, 0.0], vec![1.0, 1.0], vec![0.0, -3.0]], vec![0.5, -0.5, 0.1]);
        let s = stats(&[50, 10, 2]);
        let x = [0.7, -1.3];
        let z = p.forward(&x, 1.0).unwrap();
        let h = posthoc_adjust(&p, &z, &PosthocSpec::tau_norm(0.0), &s, &x).unwrap();
        let wx: Vec<f64> = p.weights.mul_vec(&x);
        assert_eq!(h, wx);
        let h = posthoc_adjust(&p, &z, &PosthocSpec::logit_adjust(0.0), &s, &x).unwrap();
        assert_eq!(h, z);
        let h = posthoc_adjust(&p, &z, &PosthocSpec::NONE, &s, &x).unwrap();
        assert_eq!(h, z);
        let eq = stats(&[5, 5, 5]);
        let h = posthoc_adjust(&p, &z, &PosthocSpec::logit_adjust(1.0), &eq, &x).unwrap();
        assert_eq!(predict(&h).unwrap(), predict(&z).unwrap());
    }

    #[test]
    fn tau_norm_unit_rows() {
        let p = ClassifierParams::init(5, 4, Head::Linear, 2);
        let rows = tau_normalized_rows(&p, 1.0).unwrap();
        for r in rows.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-14);
        }
        let z = ClassifierParams::zeros(2, 2, Head::Linear);
        assert!(matches!(tau_normalized_rows(&z, 1.0), Err(Error::NumericalDomain(_))));
    }

    #[test]
    fn maxnorm_behaviour() {
        let p = linear(&[vec![2.0, 0.0], vec![0.3, 0.4]], vec![1.0, 2.0]);
        let q = maxnorm_project(&p, 1.0).unwrap();
        assert!((norm(q.weights.row(0)) - 1.0).abs() < 1e-15);
        assert_eq!(q.weights.row(0)[1], 0.0);
        assert_eq!(q.weights.row(1), p.weights.row(1));
        assert_eq!(q.bias, p.bias);
        assert_eq!(maxnorm_project(&q, 1.0).unwrap(), q);
        let inside = maxnorm_project(&q, 5.0).unwrap();
        assert_eq!(inside, q);
        assert!(maxnorm_project(&p, 0.0).is_err());
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[0.1, 0.9]).unwrap(), 1);
        assert_eq!(predict(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(predict(&[0.5, 0.5, 0.7, 0.7]).unwrap(), 2);
        assert!(matches!(predict(&[0.5, f64::NAN]), Err(Error::NumericalDomain(_))));
        assert!(predict(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ClassifierParams::init(3, 4, Head::Lws, 11);
        p.bias = vec![0.1, -1e-300, 3.5];
        p.scales = vec![1.0, 0.25, 7.0];
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("LTCLS v1 K=3 D=4 HEAD=LWS\n"));
        assert_eq!(text.lines().count(), 1 + 3 + 2);
        let q = read_checkpoint(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_bad_rows() {
        let text = "LTCLS v1 K=2 D=2 HEAD=Linear\n1 2\n3\n0 0\n1 1\n";
        match read_checkpoint(text.as_bytes(), Path::new("c")) {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
