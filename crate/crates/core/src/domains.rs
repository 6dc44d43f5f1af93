//! Synthetic shifted-domain generators, augmentations, density oracles and
//! CSV ingestion.
//!
//! Every generator labels both domains with one labeling function, so
//! `P_s(Y|X) = P_t(Y|X)` holds by construction.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown scenario kind `{0}` (expected a, b, c or d)")]
    InvalidKind(String),
    #[error("support violation: source density is zero at {x:?}")]
    SupportViolation { x: Vec<f64> },
    #[error("density ratio undefined: source distribution is not absolutely continuous")]
    DensityRatioUndefined,
    #[error("dataset has no density oracle")]
    MissingOracle,
    #[error("csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Target-train labels, kept apart from the training inputs.
///
/// Only evaluation code should call [`HiddenLabels::reveal`]; training reads
/// them solely for the oracle baseline.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SupportKind {
    /// Target support inside source support.
    A,
    /// Source support inside target support.
    B,
    /// Disjoint supports.
    C,
    /// Overlapping, non-nested supports.
    D,
}

impl FromStr for SupportKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(Self::A),
            "b" | "B" => Ok(Self::B),
            "c" | "C" => Ok(Self::C),
            "d" | "D" => Ok(Self::D),
            _ => Err(DomainError::InvalidKind(s.to_string())),
        }
    }
}

impl fmt::Display for SupportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        };
        f.write_str(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    Toy1d { c: f64, d: f64 },
    TwoMoons(MoonTransform),
    Support(SupportKind),
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub task: String,
    pub num_classes: usize,
    pub input_dim: usize,
    pub scenario: Scenario,
}

/// Closed axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b), "empty rectangle");
        Self { lo, hi }
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(&a, &b)| rng.random_range(a..b)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    Uniform(Rect),
    /// Finite set of atoms; no density with respect to Lebesgue measure.
    PointMasses(Vec<Vec<f64>>),
}

impl Density {
    pub fn pdf(&self, x: &[f64]) -> Result<f64, DomainError> {
        match self {
            Density::Uniform(r) => Ok(if r.contains(x) { 1.0 / r.volume() } else { 0.0 }),
            Density::PointMasses(_) => Err(DomainError::DensityRatioUndefined),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityOracle {
    pub source: Density,
    pub target: Density,
}

/// `w(x) = p_t(x) / p_s(x)`.
pub fn importance_weight(x: &[f64], oracle: &DensityOracle) -> Result<f64, DomainError> {
    if matches!(oracle.source, Density::PointMasses(_)) {
        return Err(DomainError::DensityRatioUndefined);
    }
    let ps = oracle.source.pdf(x)?;
    if ps <= 0.0 {
        return Err(DomainError::SupportViolation { x: x.to_vec() });
    }
    Ok(oracle.target.pdf(x)? / ps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub source_labeled: Vec<LabeledSample>,
    pub target_unlabeled: Vec<Vec<f64>>,
    pub target_train_labels: HiddenLabels,
    pub target_test: Vec<LabeledSample>,
    pub density_oracle: Option<DensityOracle>,
    pub metadata: Metadata,
}

fn rows_tensor<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f64>>, dim: usize) -> Tensor {
    let n = rows.len();
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![n, dim], data).expect("rows share input_dim")
}

impl DomainDataset {
    pub fn input_dim(&self) -> usize {
        self.metadata.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.metadata.num_classes
    }

    pub fn source_x(&self) -> Tensor {
        rows_tensor(self.source_labeled.iter().map(|s| &s.x), self.input_dim())
    }

    pub fn source_y(&self) -> Vec<usize> {
        self.source_labeled.iter().map(|s| s.y).collect()
    }

    pub fn target_x(&self) -> Tensor {
        rows_tensor(self.target_unlabeled.iter(), self.input_dim())
    }

    pub fn test_x(&self) -> Tensor {
        rows_tensor(self.target_test.iter().map(|s| &s.x), self.input_dim())
    }

    pub fn test_y(&self) -> Vec<usize> {
        self.target_test.iter().map(|s| s.y).collect()
    }

    /// Checks the structural invariants every dataset must satisfy.
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: String| Err(DomainError::InvalidParameter(m));
        if self.target_train_labels.len() != self.target_unlabeled.len() {
            return bad(format!(
                "{} hidden labels for {} target samples",
                self.target_train_labels.len(),
                self.target_unlabeled.len()
            ));
        }
        let k = self.num_classes();
        let d = self.input_dim();
        let labeled = self.source_labeled.iter().chain(&self.target_test);
        for s in labeled {
            if s.y >= k || s.x.len() != d || !s.x.iter().all(|v| v.is_finite()) {
                return bad(format!("invalid sample {s:?}"));
            }
        }
        if self.target_train_labels.reveal().iter().any(|&y| y >= k) {
            return bad("hidden label out of range".into());
        }
        if self.target_unlabeled.iter().any(|x| x.len() != d || !x.iter().all(|v| v.is_finite())) {
            return bad("invalid target sample".into());
        }
        Ok(())
    }
}

/// Threshold labeling of the 1-D toy task: 0 iff x ≤ 0.5.
pub fn toy1d_label(x: f64) -> usize {
    usize::from(x > 0.5)
}

/// Two labeled source points `(c, 0)`, `(d, 1)` against a uniform target on
/// [0, 1]. The target test set holds ⌈n_target/4⌉ further uniform draws.
pub fn gen_toy1d(c: f64, d: f64, n_target: usize, seed: u64) -> Result<DomainDataset, DomainError> {
    if !(0.0..=0.5).contains(&c) || !(d > 0.5 && d <= 1.0) {
        return Err(DomainError::InvalidParameter(format!(
            "toy1d needs 0 <= c <= 0.5 < d <= 1, got c={c}, d={d}"
        )));
    }
    if n_target == 0 {
        return Err(DomainError::InvalidParameter("n_target must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_unlabeled: Vec<Vec<f64>> = (0..n_target).map(|_| vec![rng.random_range(0.0..=1.0)]).collect();
    let labels = target_unlabeled.iter().map(|x| toy1d_label(x[0])).collect();
    let target_test = (0..n_target.div_ceil(4))
        .map(|_| {
            let x = rng.random_range(0.0..=1.0);
            LabeledSample {
                x: vec![x],
                y: toy1d_label(x),
            }
        })
        .collect();
    Ok(DomainDataset {
        source_labeled: vec![LabeledSample { x: vec![c], y: 0 }, LabeledSample { x: vec![d], y: 1 }],
        target_unlabeled,
        target_train_labels: HiddenLabels(labels),
        target_test,
        density_oracle: Some(DensityOracle {
            source: Density::PointMasses(vec![vec![c], vec![d]]),
            target: Density::Uniform(Rect::new(vec![0.0], vec![1.0])),
        }),
        metadata: Metadata {
            task: format!("toy1d_c{c}_d{d}"),
            num_classes: 2,
            input_dim: 1,
            scenario: Scenario::Toy1d { c, d },
        },
    })
}

/// Centroid of the noiseless two-moons curves.
pub const MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

/// Rotation about [`MOONS_CENTROID`] followed by a translation.
#[derive(Clone, Debug, PartialEq)]
pub struct MoonTransform {
    pub rotation_deg: f64,
    pub translation: [f64; 2],
}

impl MoonTransform {
    pub fn apply(&self, x: &[f64]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x[0] - MOONS_CENTROID[0], x[1] - MOONS_CENTROID[1]);
        [
            c * dx - s * dy + MOONS_CENTROID[0] + self.translation[0],
            s * dx + c * dy + MOONS_CENTROID[1] + self.translation[1],
        ]
    }

    pub fn invert(&self, x: &[f64]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let dx = x[0] - self.translation[0] - MOONS_CENTROID[0];
        let dy = x[1] - self.translation[1] - MOONS_CENTROID[1];
        [c * dx + s * dy + MOONS_CENTROID[0], -s * dx + c * dy + MOONS_CENTROID[1]]
    }

    /// Label of a target-coordinate point: the moon label of its pre-image.
    pub fn label(&self, x: &[f64]) -> usize {
        moon_label(&self.invert(x))
    }
}

fn arc_distance(q: [f64; 2], upper: bool) -> f64 {
    let on_arc = if upper { q[1] >= 0.0 } else { q[1] <= 0.0 };
    let r = q[0].hypot(q[1]);
    if on_arc {
        (r - 1.0).abs()
    } else {
        let a = (q[0] - 1.0).hypot(q[1]);
        let b = (q[0] + 1.0).hypot(q[1]);
        a.min(b)
    }
}

/// Nearest-curve label: 0 for the upper moon `(cos t, sin t)`, 1 for the lower
/// moon `(1 − cos t, 0.5 − sin t)`, ties to 0.
pub fn moon_label(x: &[f64]) -> usize {
    let d0 = arc_distance([x[0], x[1]], true);
    let d1 = arc_distance([x[0] - 1.0, x[1] - 0.5], false);
    usize::from(d1 < d0)
}

fn sample_moons(n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, sigma).expect("sigma checked");
    (0..n)
        .map(|i| {
            let t = rng.random_range(0.0..=PI);
            let (x, y) = if i % 2 == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            vec![x + noise.sample(rng), y + noise.sample(rng)]
        })
        .collect()
}

fn split_target(
    xs: Vec<Vec<f64>>,
    label: impl Fn(&[f64]) -> usize,
) -> (Vec<Vec<f64>>, HiddenLabels, Vec<LabeledSample>) {
    let n_train = (xs.len() * 4).div_ceil(5);
    let mut xs = xs;
    let test = xs.split_off(n_train);
    let labels = xs.iter().map(|x| label(x)).collect();
    let test = test
        .into_iter()
        .map(|x| {
            let y = label(&x);
            LabeledSample { x, y }
        })
        .collect();
    (xs, HiddenLabels(labels), test)
}

/// Two-moons source and a rotated and translated copy as target. The
/// target is split 80/20 into unlabeled train and held-out test.
pub fn gen_two_moons_shift(
    n_src: usize,
    n_tgt: usize,
    rotation_deg: f64,
    translation: [f64; 2],
    noise_sigma: f64,
    seed: u64,
) -> Result<DomainDataset, DomainError> {
    if n_src == 0 || n_tgt == 0 {
        return Err(DomainError::InvalidParameter("n_src and n_tgt must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DomainError::InvalidParameter(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let transform = MoonTransform {
        rotation_deg,
        translation,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_labeled = sample_moons(n_src, noise_sigma, &mut rng)
        .into_iter()
        .map(|x| {
            let y = moon_label(&x);
            LabeledSample { x, y }
        })
        .collect();
    let target: Vec<Vec<f64>> = sample_moons(n_tgt, noise_sigma, &mut rng)
        .iter()
        .map(|x| transform.apply(x).to_vec())
        .collect();
    let (target_unlabeled, target_train_labels, target_test) = split_target(target, |x| transform.label(x));
    Ok(DomainDataset {
        source_labeled,
        target_unlabeled,
        target_train_labels,
        target_test,
        density_oracle: None,
        metadata: Metadata {
            task: format!("two_moons_rot{rotation_deg}"),
            num_classes: 2,
            input_dim: 2,
            scenario: Scenario::TwoMoons(transform),
        },
    })
}

/// Shared labeling of the rectangle scenarios: 1 iff x₀ > 0.
pub fn support_label(x: &[f64]) -> usize {
    usize::from(x[0] > 0.0)
}

/// Source and target rectangles of each support regime.
pub fn support_rects(kind: SupportKind) -> (Rect, Rect) {
    let r = |x0: f64, x1: f64, y0: f64, y1: f64| Rect::new(vec![x0, y0], vec![x1, y1]);
    match kind {
        SupportKind::A => (r(-2.0, 2.0, -2.0, 2.0), r(-1.0, 1.0, -1.0, 1.0)),
        SupportKind::B => (r(-0.25, 0.25, -0.25, 0.25), r(-2.0, 2.0, -2.0, 2.0)),
        SupportKind::C => (r(-1.0, 1.0, 0.0, 1.0), r(-1.0, 1.0, 1.5, 2.5)),
        SupportKind::D => (r(-1.0, 1.0, -1.0, 1.0), r(-1.0, 1.0, 0.0, 2.0)),
    }
}

/// Class-balanced uniform draws: alternate halves `x₀ ≤ 0`, `x₀ > 0`. Every
/// rectangle is symmetric in x₀, so the mixture is exactly uniform.
fn sample_rect_balanced(rect: &Rect, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut x = rect.sample(rng);
            x[0] = if i % 2 == 0 {
                rng.random_range(rect.lo[0]..=0.0)
            } else {
                rng.random_range(0.0..rect.hi[0]).max(f64::MIN_POSITIVE)
            };
            x
        })
        .collect()
}

pub fn gen_support_scenario(kind: SupportKind, n_src: usize, n_tgt: usize, seed: u64) -> Result<DomainDataset, DomainError> {
    if n_src == 0 || n_tgt == 0 {
        return Err(DomainError::InvalidParameter("n_src and n_tgt must be positive".into()));
    }
    let (src_rect, tgt_rect) = support_rects(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_labeled = sample_rect_balanced(&src_rect, n_src, &mut rng)
        .into_iter()
        .map(|x| {
            let y = support_label(&x);
            LabeledSample { x, y }
        })
        .collect();
    let target = sample_rect_balanced(&tgt_rect, n_tgt, &mut rng);
    let (target_unlabeled, target_train_labels, target_test) = split_target(target, support_label);
    Ok(DomainDataset {
        source_labeled,
        target_unlabeled,
        target_train_labels,
        target_test,
        density_oracle: Some(DensityOracle {
            source: Density::Uniform(src_rect),
            target: Density::Uniform(tgt_rect),
        }),
        metadata: Metadata {
            task: format!("support_{kind}"),
            num_classes: 2,
            input_dim: 2,
            scenario: Scenario::Support(kind),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Identity,
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Rotation range in degrees, applied as a uniform angle in ±range to 2-D inputs.
    pub rotation_deg: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            kind: AugKind::Weak,
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.25,
            dropout_prob: 0.1,
            rotation_deg: 15.0,
        }
    }
}

impl AugmentationSpec {
    pub fn with_kind(&self, kind: AugKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let ok = self.weak_noise_sigma >= 0.0
            && self.strong_noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.dropout_prob)
            && self.rotation_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DomainError::InvalidParameter(format!("invalid augmentation spec {self:?}")))
        }
    }
}

/// Applies `spec` to one input using randomness from `rng`.
pub fn augment_with_rng(x: &[f64], spec: &AugmentationSpec, rng: &mut impl Rng) -> Vec<f64> {
    let gauss = |v: &mut Vec<f64>, sigma: f64, rng: &mut dyn rand::RngCore| {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma checked");
            v.iter_mut().for_each(|e| *e += n.sample(rng));
        }
    };
    let mut out = x.to_vec();
    match spec.kind {
        AugKind::Identity => {}
        AugKind::Weak => gauss(&mut out, spec.weak_noise_sigma, rng),
        AugKind::Strong => {
            gauss(&mut out, spec.strong_noise_sigma, rng);
            for v in out.iter_mut() {
                if rng.random::<f64>() < spec.dropout_prob {
                    *v = 0.0;
                }
            }
            if out.len() == 2 && spec.rotation_deg > 0.0 {
                let a = rng.random_range(-spec.rotation_deg..=spec.rotation_deg).to_radians();
                let (s, c) = a.sin_cos();
                out = vec![c * out[0] - s * out[1], s * out[0] + c * out[1]];
            }
        }
    }
    out
}

pub fn augment(x: &[f64], spec: &AugmentationSpec, seed: u64) -> Vec<f64> {
    augment_with_rng(x, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Row-wise augmentation of a `(B, D)` batch.
pub fn augment_batch(x: &Tensor, spec: &AugmentationSpec, rng: &mut impl Rng) -> Tensor {
    let d = x.cols();
    let data: Vec<f64> = (0..x.rows()).flat_map(|i| augment_with_rng(x.row(i), spec, rng)).collect();
    Tensor::new(vec![x.rows(), d], data).expect("row length preserved")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub num_classes: usize,
    pub task: String,
}

/// Writes `f0..fD,label,domain,split` rows: source, target-train, target-test.
pub fn export_csv(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<(), DomainError> {
    let csv_err = |e: csv::Error| DomainError::Csv {
        line: 0,
        reason: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    let d = dataset.input_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.extend(["label", "domain", "split"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = |x: &[f64], y: usize, dom: &str, split: &str| {
        let mut r: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        r.extend([y.to_string(), dom.to_string(), split.to_string()]);
        w.write_record(&r)
    };
    for s in &dataset.source_labeled {
        row(&s.x, s.y, "src", "train").map_err(csv_err)?;
    }
    for (x, &y) in dataset.target_unlabeled.iter().zip(dataset.target_train_labels.reveal()) {
        row(x, y, "tgt", "train").map_err(csv_err)?;
    }
    for s in &dataset.target_test {
        row(&s.x, s.y, "tgt", "test").map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset, DomainError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv(reader: impl std::io::Read, schema: &CsvSchema) -> Result<DomainDataset, DomainError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DomainError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let d = cols.len().saturating_sub(3);
    let expected: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["label", "domain", "split"].map(String::from))
        .collect();
    if d == 0 || cols != expected {
        return Err(DomainError::Csv {
            line: 1,
            reason: format!("expected header {}", expected.join(",")),
        });
    }
    let mut ds = DomainDataset {
        source_labeled: Vec::new(),
        target_unlabeled: Vec::new(),
        target_train_labels: HiddenLabels::default(),
        target_test: Vec::new(),
        density_oracle: None,
        metadata: Metadata {
            task: schema.task.clone(),
            num_classes: schema.num_classes,
            input_dim: d,
            scenario: Scenario::Csv,
        },
    };
    let mut hidden = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DomainError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |reason: String| DomainError::Csv { line, reason };
        if rec.len() != d + 3 {
            return Err(err(format!("expected {} columns, found {}", d + 3, rec.len())));
        }
        let x = (0..d)
            .map(|i| {
                let v: f64 = rec[i].trim().parse().map_err(|_| err(format!("f{i}: not a number `{}`", &rec[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("f{i}: non-finite value")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let y: usize = rec[d].trim().parse().map_err(|_| err(format!("label: not a class index `{}`", &rec[d])))?;
        if y >= schema.num_classes {
            return Err(err(format!("label {y} out of range for K={}", schema.num_classes)));
        }
        match (rec[d + 1].trim(), rec[d + 2].trim()) {
            ("src", "train") => ds.source_labeled.push(LabeledSample { x, y }),
            ("tgt", "train") => {
                ds.target_unlabeled.push(x);
                hidden.push(y);
            }
            ("tgt", "test") => ds.target_test.push(LabeledSample { x, y }),
            (dom, split) => return Err(err(format!("unknown domain/split `{dom}`/`{split}`"))),
        }
    }
    ds.target_train_labels = HiddenLabels(hidden);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy1d_source_is_the_two_labeled_points() {
        let ds = gen_toy1d(0.25, 0.75, 500, 0).unwrap();
        assert_eq!(
            ds.source_labeled,
            vec![LabeledSample { x: vec![0.25], y: 0 }, LabeledSample { x: vec![0.75], y: 1 }]
        );
        assert_eq!(ds.target_unlabeled.len(), 500);
        assert_eq!(ds.target_test.len(), 125);
        ds.validate().unwrap();
        assert!(ds.target_unlabeled.iter().all(|x| (0.0..=1.0).contains(&x[0])));
    }

    #[test]
    fn toy1d_threshold_and_ranges() {
        assert_eq!(toy1d_label(0.5), 0);
        assert_eq!(toy1d_label(0.5 + 1e-9), 1);
        assert!(gen_toy1d(0.6, 0.75, 10, 0).is_err());
        assert!(gen_toy1d(0.25, 0.5, 10, 0).is_err());
        assert!(gen_toy1d(0.5, 1.0, 10, 0).is_ok());
    }

    #[test]
    fn toy1d_source_density_ratio_is_undefined() {
        let ds = gen_toy1d(0.25, 0.75, 10, 0).unwrap();
        let oracle = ds.density_oracle.unwrap();
        assert!(matches!(importance_weight(&[0.25], &oracle), Err(DomainError::DensityRatioUndefined)));
    }

    #[test]
    fn uniform_interval_weights() {
        let oracle = DensityOracle {
            source: Density::Uniform(Rect::new(vec![0.0], vec![2.0])),
            target: Density::Uniform(Rect::new(vec![0.0], vec![1.0])),
        };
        assert_eq!(importance_weight(&[0.5], &oracle).unwrap(), 2.0);
        assert_eq!(importance_weight(&[1.5], &oracle).unwrap(), 0.0);
        assert!(matches!(importance_weight(&[3.0], &oracle), Err(DomainError::SupportViolation { .. })));
    }

    #[test]
    fn scenario_a_weight_is_area_ratio() {
        let ds = gen_support_scenario(SupportKind::A, 50, 50, 1).unwrap();
        let (s, t) = support_rects(SupportKind::A);
        let oracle = ds.density_oracle.as_ref().unwrap();
        for x in &ds.target_unlabeled {
            assert_eq!(importance_weight(x, oracle).unwrap(), s.volume() / t.volume());
        }
    }

    #[test]
    fn support_regimes_hold_samplewise() {
        for kind in [SupportKind::A, SupportKind::B, SupportKind::C, SupportKind::D] {
            let ds = gen_support_scenario(kind, 200, 200, 3).unwrap();
            ds.validate().unwrap();
            let (s, t) = support_rects(kind);
            let tgt = ds.target_unlabeled.iter().chain(ds.target_test.iter().map(|x| &x.x));
            let src = ds.source_labeled.iter().map(|x| &x.x);
            assert!(src.clone().all(|x| s.contains(x)));
            match kind {
                SupportKind::A => assert!(tgt.clone().all(|x| s.contains(x))),
                SupportKind::B => assert!(src.clone().all(|x| t.contains(x))),
                SupportKind::C => assert!(tgt.clone().all(|x| !s.contains(x))),
                SupportKind::D => {
                    assert!(tgt.clone().any(|x| s.contains(x)));
                    assert!(tgt.clone().any(|x| !s.contains(x)));
                    assert!(src.clone().any(|x| !t.contains(x)));
                }
            }
        }
        assert!(matches!("e".parse::<SupportKind>(), Err(DomainError::InvalidKind(_))));
    }

    #[test]
    fn scenario_b_small_source_is_balanced_and_covered() {
        let ds = gen_support_scenario(SupportKind::B, 4, 200, 0).unwrap();
        assert_eq!(ds.source_y().iter().filter(|&&y| y == 1).count(), 2);
        let (_, t) = support_rects(SupportKind::B);
        assert!(ds.source_labeled.iter().all(|s| t.contains(&s.x) && s.x[0].abs() <= 0.25));
    }

    #[test]
    fn two_moons_identity_transform_shares_labeling() {
        let ds = gen_two_moons_shift(100, 100, 0.0, [0.0, 0.0], 0.1, 5).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.target_unlabeled.len(), 80);
        assert_eq!(ds.target_test.len(), 20);
        for (x, &y) in ds.target_unlabeled.iter().zip(ds.target_train_labels.reveal()) {
            assert_eq!(moon_label(x), y);
        }
    }

    #[test]
    fn two_moons_rotation_moves_class_means() {
        // Noiseless moons with many points: class means rotate with the data.
        let n = 4000;
        let rot = 30.0;
        let ds = gen_two_moons_shift(n, n, rot, [0.0, 0.0], 0.0, 2).unwrap();
        let t = MoonTransform {
            rotation_deg: rot,
            translation: [0.0, 0.0],
        };
        let mean = |xs: Vec<&Vec<f64>>| {
            let m = xs.len() as f64;
            [xs.iter().map(|x| x[0]).sum::<f64>() / m, xs.iter().map(|x| x[1]).sum::<f64>() / m]
        };
        for class in 0..2 {
            let src = mean(ds.source_labeled.iter().filter(|s| s.y == class).map(|s| &s.x).collect());
            let tgt = mean(
                ds.target_unlabeled
                    .iter()
                    .zip(ds.target_train_labels.reveal())
                    .filter(|(_, &y)| y == class)
                    .map(|(x, _)| x)
                    .collect(),
            );
            let expected = t.apply(&src);
            assert!((expected[0] - tgt[0]).abs() < 0.05 && (expected[1] - tgt[1]).abs() < 0.05);
        }
    }

    #[test]
    fn moon_transform_round_trips() {
        let t = MoonTransform {
            rotation_deg: 37.0,
            translation: [0.3, -1.2],
        };
        let p = [0.7, -0.4];
        let q = t.invert(&t.apply(&p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_two_moons_shift(50, 50, 30.0, [0.1, 0.2], 0.1, 9).unwrap(),
            gen_two_moons_shift(50, 50, 30.0, [0.1, 0.2], 0.1, 9).unwrap()
        );
        assert_eq!(gen_toy1d(0.2, 0.9, 30, 4).unwrap(), gen_toy1d(0.2, 0.9, 30, 4).unwrap());
        assert_eq!(
            gen_support_scenario(SupportKind::D, 30, 30, 4).unwrap(),
            gen_support_scenario(SupportKind::D, 30, 30, 4).unwrap()
        );
    }

    #[test]
    fn augmentation_edge_cases() {
        let x = vec![0.3, -1.7];
        let spec = AugmentationSpec::default();
        assert_eq!(augment(&x, &spec.with_kind(AugKind::Identity), 1), x);
        let quiet = AugmentationSpec {
            weak_noise_sigma: 0.0,
            ..spec.clone()
        };
        assert_eq!(augment(&x, &quiet, 1), x);
        let drop_all = AugmentationSpec {
            kind: AugKind::Strong,
            dropout_prob: 1.0,
            ..spec.clone()
        };
        assert_eq!(augment(&x, &drop_all, 1), vec![0.0, 0.0]);
        let strong = spec.with_kind(AugKind::Strong);
        assert_eq!(augment(&x, &strong, 7), augment(&x, &strong, 7));
        assert_ne!(augment(&x, &strong, 7), augment(&x, &strong, 8));
    }

    #[test]
    fn csv_minimal_file_and_label_bounds() {
        let text = "f0,f1,label,domain,split\n0,1,0,src,train\n1,2,1,tgt,train\n2,3,0,tgt,train\n3,4,1,tgt,test\n";
        let schema = CsvSchema {
            num_classes: 2,
            task: "mini".into(),
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(
            (ds.source_labeled.len(), ds.target_unlabeled.len(), ds.target_test.len()),
            (1, 2, 1)
        );
        let bad = "f0,label,domain,split\n0.5,0,src,train\n0.1,3,tgt,test\n";
        let err = read_csv(bad.as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DomainError::Csv { line: 3, .. }), "{err}");
        let ragged = "f0,label,domain,split\n0.5,0,src\n";
        assert!(matches!(read_csv(ragged.as_bytes(), &schema), Err(DomainError::Csv { line: 2, .. })));
        let token = "f0,label,domain,split\n0.5,0,elsewhere,train\n";
        assert!(read_csv(token.as_bytes(), &schema).unwrap_err().to_string().contains("elsewhere"));
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_two_moons_shift(20, 20, 30.0, [0.0, 0.0], 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        export_csv(&ds, &path).unwrap();
        let back = load_csv(
            &path,
            &CsvSchema {
                num_classes: 2,
                task: ds.metadata.task.clone(),
            },
        )
        .unwrap();
        assert_eq!(back.source_labeled, ds.source_labeled);
        assert_eq!(back.target_unlabeled, ds.target_unlabeled);
        assert_eq!(back.target_train_labels, ds.target_train_labels);
        assert_eq!(back.target_test, ds.target_test);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn covariate_shift_labels_are_reproducible(seed in 0u64..1000, rot in -90.0f64..90.0, kind in 0usize..4) {
            let ds = gen_two_moons_shift(30, 30, rot, [0.2, -0.1], 0.15, seed).unwrap();
            let Scenario::TwoMoons(t) = &ds.metadata.scenario else { unreachable!() };
            for (x, &y) in ds.target_unlabeled.iter().zip(ds.target_train_labels.reveal()) {
                prop_assert_eq!(t.label(x), y);
            }
            for s in &ds.target_test {
                prop_assert_eq!(t.label(&s.x), s.y);
            }
            let kind = [SupportKind::A, SupportKind::B, SupportKind::C, SupportKind::D][kind];
            let ds = gen_support_scenario(kind, 30, 30, seed).unwrap();
            for (x, &y) in ds.target_unlabeled.iter().zip(ds.target_train_labels.reveal()) {
                prop_assert_eq!(support_label(x), y);
            }
            let ds = gen_toy1d(0.25, 0.75, 30, seed).unwrap();
            for (x, &y) in ds.target_unlabeled.iter().zip(ds.target_train_labels.reveal()) {
                prop_assert_eq!(toy1d_label(x[0]), y);
            }
        }

        #[test]
        fn augment_is_deterministic(x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, seed: u64) {
            let spec = AugmentationSpec::default().with_kind(AugKind::Strong);
            prop_assert_eq!(augment(&[x0, x1], &spec, seed), augment(&[x0, x1], &spec, seed));
        }
    }
}
