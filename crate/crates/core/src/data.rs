//! Long-tailed feature datasets: construction, text I/O and class statistics.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::{norm, Matrix};
use crate::{seed, Error, Result};

pub const DEFAULT_MANY_THRESHOLD: usize = 100;
pub const DEFAULT_FEW_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Frozen feature vectors with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<usize>,
    split: Split,
    num_classes: usize,
}

impl FeatureDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        split: Split,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if features.cols() < 1 {
            return Err(Error::InvalidDataset("feature dimension must be >= 1".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if split == Split::Train && labels.len() < num_classes {
            return Err(Error::InvalidDataset(format!(
                "train split has {} rows, fewer than K = {num_classes}",
                labels.len()
            )));
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "row {row}: label {y} out of range for K = {num_classes}"
            )));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "row {}: non-finite feature value",
                pos / features.cols()
            )));
        }
        Ok(Self {
            features,
            labels,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Number of rows carrying each label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            lists[y].push(i);
        }
        lists
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        })
    }
}

/// Many/Medium/Few boundaries. `Many` is strictly above `many`, `Few`
/// strictly below `few`; boundary counts fall into `Medium`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupThresholds {
    pub many: usize,
    pub few: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            many: DEFAULT_MANY_THRESHOLD,
            few: DEFAULT_FEW_THRESHOLD,
        }
    }
}

impl GroupThresholds {
    pub fn group_of(&self, count: usize) -> Group {
        if count > self.many {
            Group::Many
        } else if count < self.few {
            Group::Few
        } else {
            Group::Medium
        }
    }
}

/// Per-class training counts and their group assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    counts: Vec<usize>,
    imbalance_ratio: f64,
    groups: Vec<Group>,
    thresholds: GroupThresholds,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>, thresholds: GroupThresholds) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidDataset("need at least 2 classes".into()));
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDataset(format!("class {i} has no samples")));
        }
        if thresholds.many <= thresholds.few {
            return Err(Error::invalid(
                "thresholds",
                format!(
                    "many threshold ({}) must exceed few threshold ({})",
                    thresholds.many, thresholds.few
                ),
            ));
        }
        let max = *counts.iter().max().unwrap_or(&1);
        let min = *counts.iter().min().unwrap_or(&1);
        let groups = counts.iter().map(|&c| thresholds.group_of(c)).collect();
        Ok(Self {
            imbalance_ratio: max as f64 / min as f64,
            counts,
            groups,
            thresholds,
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn imbalance_ratio(&self) -> f64 {
        self.imbalance_ratio
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn thresholds(&self) -> GroupThresholds {
        self.thresholds
    }

    pub fn min_count(&self) -> usize {
        *self.counts.iter().min().expect("non-empty")
    }
}

pub fn class_stats(ds: &FeatureDataset, thresholds: GroupThresholds) -> Result<ClassStats> {
    ClassStats::from_counts(ds.label_counts(), thresholds)
}

/// Class sizes decaying exponentially from `n_max` down to `n_max / ir`.
pub fn exponential_profile(num_classes: usize, n_max: usize, ir: f64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid("K", format!("need K >= 2, got {num_classes}")));
    }
    if n_max < 1 {
        return Err(Error::invalid("n_max", "must be >= 1"));
    }
    if !(ir >= 1.0) || !ir.is_finite() {
        return Err(Error::invalid("imbalance_ratio", format!("need finite IR >= 1, got {ir}")));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|i| {
            let c = (n_max as f64 * ir.powf(-(i as f64) / last)).round_ties_even();
            (c as usize).max(1)
        })
        .collect())
}

/// Parameters of the seeded Gaussian-cluster stand-in for backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_max: usize,
    pub imbalance_ratio: f64,
    pub test_per_class: usize,
    /// Approximate distance between two cluster means.
    pub class_separation: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            n_max: 500,
            imbalance_ratio: 100.0,
            test_per_class: 20,
            class_separation: 4.0,
            within_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("K", "need K >= 2"));
        }
        if self.dim < 1 {
            return Err(Error::invalid("D", "need D >= 1"));
        }
        if self.n_max < 1 {
            return Err(Error::invalid("n_max", "must be >= 1"));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::invalid("imbalance_ratio", "need finite IR >= 1"));
        }
        if self.test_per_class < 1 {
            return Err(Error::invalid("test_per_class", "must be >= 1"));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::invalid("class_separation", "must be finite and > 0"));
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return Err(Error::invalid("within_std", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Training-split class sizes.
    pub fn train_counts(&self) -> Result<Vec<usize>> {
        exponential_profile(self.num_classes, self.n_max, self.imbalance_ratio)
    }
}

/// Class means: seeded random unit directions scaled so that orthogonal
/// means sit `class_separation` apart.
pub fn cluster_means(spec: &SyntheticSpec) -> Matrix {
    let mut rng = seed::rng(seed::derive_str(spec.seed, "means"));
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let mut means = Matrix::zeros(spec.num_classes, spec.dim);
    for k in 0..spec.num_classes {
        let dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if norm(&v) > 1e-12 {
                break v;
            }
        };
        let n = norm(&dir);
        for (m, d) in means.row_mut(k).iter_mut().zip(&dir) {
            *m = radius * d / n;
        }
    }
    means
}

fn sample_split(
    spec: &SyntheticSpec,
    means: &Matrix,
    counts: &[usize],
    split: Split,
    rng: &mut impl Rng,
) -> Result<FeatureDataset> {
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &mu in means.row(k) {
                let e: f64 = StandardNormal.sample(rng);
                data.push(mu + spec.within_std * e);
            }
            labels.push(k);
        }
    }
    FeatureDataset::new(
        Matrix::from_vec(n, spec.dim, data),
        labels,
        split,
        spec.num_classes,
    )
}

/// Draws an imbalanced train split and a balanced test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    let means = cluster_means(spec);
    let train_counts = spec.train_counts()?;
    let test_counts = vec![spec.test_per_class; spec.num_classes];
    let mut train_rng = seed::rng(seed::derive_str(spec.seed, "train"));
    let mut test_rng = seed::rng(seed::derive_str(spec.seed, "test"));
    let train = sample_split(spec, &means, &train_counts, Split::Train, &mut train_rng)?;
    let test = sample_split(spec, &means, &test_counts, Split::Test, &mut test_rng)?;
    Ok((train, test))
}

const FEATURE_MAGIC: &str = "LTFEAT";
const FORMAT_VERSION: &str = "v1";

/// Serializes a dataset in the `LTFEAT v1` text format.
pub fn write_features<W: Write>(ds: &FeatureDataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "{FEATURE_MAGIC} {FORMAT_VERSION} N={} D={} K={} SPLIT={}",
        ds.len(),
        ds.dim(),
        ds.num_classes(),
        ds.split()
    )?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for v in ds.feature(i) {
            // `{}` on f64 prints the shortest string that parses back exactly
            let _ = write!(line, "{v} ");
        }
        let _ = write!(line, "{}", ds.label(i));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    write_features(ds, fs::File::create(path)?)
}

pub(crate) fn parse_header_fields<'a>(
    header: &'a str,
    magic: &str,
) -> std::result::Result<Vec<(&'a str, &'a str)>, String> {
    let mut parts = header.split_ascii_whitespace();
    match (parts.next(), parts.next()) {
        (Some(m), Some(v)) if m == magic && v == FORMAT_VERSION => {}
        _ => return Err(format!("expected header `{magic} {FORMAT_VERSION} ...`")),
    }
    parts
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| format!("malformed header field `{kv}`"))
        })
        .collect()
}

pub(crate) fn header_value<T: FromStr>(
    fields: &[(&str, &str)],
    key: &str,
) -> std::result::Result<T, String> {
    let raw = fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format!("header missing `{key}`"))?;
    raw.parse()
        .map_err(|_| format!("header field `{key}` has invalid value `{raw}`"))
}

/// Parses an `LTFEAT v1` stream. `origin` only labels error messages.
pub fn read_features<R: BufRead>(reader: R, origin: &Path) -> Result<FeatureDataset> {
    let err = |line: usize, reason: String| Error::Ingestion {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| err(1, "empty file".into()))??;
    let fields = parse_header_fields(&header, FEATURE_MAGIC).map_err(|e| err(1, e))?;
    let n: usize = header_value(&fields, "N").map_err(|e| err(1, e))?;
    let d: usize = header_value(&fields, "D").map_err(|e| err(1, e))?;
    let k: usize = header_value(&fields, "K").map_err(|e| err(1, e))?;
    let split: Split = header_value(&fields, "SPLIT").map_err(|e| err(1, e))?;
    if d < 1 || k < 2 {
        return Err(err(1, format!("need D >= 1 and K >= 2, got D={d} K={k}")));
    }

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let line_no = row + 2;
        let line = lines
            .next()
            .ok_or_else(|| err(line_no, format!("expected {n} data rows, found {row}")))??;
        let tokens: Vec<&str> = line.split_ascii_whitespace().collect();
        if tokens.len() != d + 1 {
            return Err(err(
                line_no,
                format!("expected {} values (D={d} + label), found {}", d + 1, tokens.len()),
            ));
        }
        for tok in &tokens[..d] {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(line_no, format!("cannot parse `{tok}` as a number")))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite feature value `{tok}`")));
            }
            data.push(v);
        }
        let y: usize = tokens[d]
            .parse()
            .map_err(|_| err(line_no, format!("cannot parse label `{}`", tokens[d])))?;
        if y >= k {
            return Err(err(line_no, format!("label {y} out of range for K={k}")));
        }
        labels.push(y);
    }
    for (extra, line) in lines.enumerate() {
        if !line?.trim().is_empty() {
            return Err(err(n + 2 + extra, format!("trailing data after {n} rows")));
        }
    }
    FeatureDataset::new(Matrix::from_vec(n, d, data), labels, split, k)
        .map_err(|e| err(1, e.to_string()))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    read_features(BufReader::new(file), path)
}

/// Sidecar manifest path for a feature file: `<file>.manifest`.
pub fn manifest_path(features: &Path) -> PathBuf {
    let mut p = features.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Reads `key=value` group thresholds (`many_threshold`, `few_threshold`).
/// Blank lines and `#` comments are ignored; unknown keys are rejected.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<GroupThresholds> {
    let mut t = GroupThresholds::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Ingestion {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| err(format!("`{}` is not a non-negative integer", value.trim())))?;
        match key.trim() {
            "many_threshold" => t.many = value,
            "few_threshold" => t.few = value,
            other => return Err(err(format!("unknown manifest key `{other}`"))),
        }
    }
    Ok(t)
}

/// Thresholds from the sidecar manifest if present, defaults otherwise.
pub fn load_thresholds(features: &Path) -> Result<GroupThresholds> {
    let path = manifest_path(features);
    match fs::read_to_string(&path) {
        Ok(text) => parse_manifest(&text, &path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(GroupThresholds::default()),
        Err(e) => Err(e.into()),
    }
}
