//! Divergence diagnostics over finite hypothesis classes and the proxy
//! A-distance between feature sets.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimizerConfig, ParamGroup, SgdMomentum, Tensor};
use crate::domains::LabeledSample;
use crate::models::{ModelBundle, ModelError};

/// Slack allowed when checking `R_t ≤ rhs`.
pub const BOUND_SLACK: f64 = 1e-12;

/// Steps used to fit the domain classifier of the proxy A-distance.
pub const PROXY_STEPS: usize = 500;

pub const MIN_PROXY_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("hypothesis class is empty")]
    EmptyClass,
    #[error("{0} sample set is empty")]
    EmptySample(&'static str),
    #[error("bound violated for {hypothesis}: R_t={r_t} > rhs={rhs}")]
    BoundViolated { hypothesis: String, r_t: f64, rhs: f64 },
    #[error("proxy A-distance needs at least {MIN_PROXY_SAMPLES} samples per domain, got {source_n} and {target_n}")]
    TooFewSamples { source_n: usize, target_n: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A deterministic binary classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum Hypothesis {
    Constant(usize),
    /// Predicts 1 when `x[dim] > threshold` (or `≤` when `above` is false).
    Stump { dim: usize, threshold: f64, above: bool },
}

impl Hypothesis {
    pub fn predict(&self, x: &[f64]) -> usize {
        match *self {
            Hypothesis::Constant(c) => c,
            Hypothesis::Stump { dim, threshold, above } => usize::from((x[dim] > threshold) == above),
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hypothesis::Constant(c) => write!(f, "constant({c})"),
            Hypothesis::Stump { dim, threshold, above } => {
                let op = if *above { ">" } else { "<=" };
                write!(f, "1[x{dim} {op} {threshold}]")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHypothesisClass {
    hypotheses: Vec<Hypothesis>,
}

impl FiniteHypothesisClass {
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self, AnalysisError> {
        if hypotheses.is_empty() {
            return Err(AnalysisError::EmptyClass);
        }
        Ok(Self { hypotheses })
    }

    /// Every stump over `dims` input dimensions at each grid threshold, in
    /// both orientations.
    pub fn stumps(dims: usize, grid: &[f64]) -> Result<Self, AnalysisError> {
        let mut hs = Vec::with_capacity(2 * dims * grid.len());
        for dim in 0..dims {
            for &threshold in grid {
                for above in [true, false] {
                    hs.push(Hypothesis::Stump { dim, threshold, above });
                }
            }
        }
        Self::new(hs)
    }

    /// Stumps at `per_dim` evenly spaced thresholds spanning the samples' range.
    pub fn stumps_covering(samples: &[&[f64]], per_dim: usize) -> Result<Self, AnalysisError> {
        let first = samples.first().ok_or(AnalysisError::EmptySample("covering"))?;
        let mut hs = Vec::new();
        for dim in 0..first.len() {
            let lo = samples.iter().map(|x| x[dim]).fold(f64::INFINITY, f64::min);
            let hi = samples.iter().map(|x| x[dim]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..per_dim {
                let threshold = lo + (hi - lo) * (i as f64 + 0.5) / per_dim as f64;
                for above in [true, false] {
                    hs.push(Hypothesis::Stump { dim, threshold, above });
                }
            }
        }
        Self::new(hs)
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    fn prediction_table(&self, xs: &[&[f64]]) -> Vec<Vec<usize>> {
        self.hypotheses
            .iter()
            .map(|h| xs.iter().map(|x| h.predict(x)).collect())
            .collect()
    }
}

fn disagreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(p, q)| p != q).count() as f64 / a.len() as f64
}

fn risk(h: &Hypothesis, samples: &[LabeledSample]) -> f64 {
    samples.iter().filter(|s| h.predict(&s.x) != s.y).count() as f64 / samples.len() as f64
}

/// `2 · max_{h,h′} |P_S[h ≠ h′] − P_T[h ≠ h′]|` over the empirical measures.
pub fn hdh_divergence(class: &FiniteHypothesisClass, s: &[&[f64]], t: &[&[f64]]) -> Result<f64, AnalysisError> {
    if s.is_empty() {
        return Err(AnalysisError::EmptySample("source"));
    }
    if t.is_empty() {
        return Err(AnalysisError::EmptySample("target"));
    }
    let ps = class.prediction_table(s);
    let pt = class.prediction_table(t);
    let mut best = 0.0f64;
    for i in 0..class.len() {
        for j in 0..class.len() {
            let gap = (disagreement(&ps[i], &ps[j]) - disagreement(&pt[i], &pt[j])).abs();
            best = best.max(gap);
        }
    }
    Ok(2.0 * best)
}

/// `min_h R_s(h) + R_t(h)`.
pub fn lambda_h(class: &FiniteHypothesisClass, s: &[LabeledSample], t: &[LabeledSample]) -> Result<f64, AnalysisError> {
    if s.is_empty() {
        return Err(AnalysisError::EmptySample("source"));
    }
    if t.is_empty() {
        return Err(AnalysisError::EmptySample("target"));
    }
    Ok(class
        .hypotheses
        .iter()
        .map(|h| risk(h, s) + risk(h, t))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub hypothesis: Hypothesis,
    pub r_t: f64,
    pub r_s: f64,
    pub d_hdh: f64,
    pub lambda: f64,
    /// `r_s + d_hdh / 2 + lambda`.
    pub rhs: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn gap(&self) -> f64 {
        self.rhs - self.r_t
    }
}

/// One report per hypothesis; any violation is an error naming it.
pub fn verify_bound(
    class: &FiniteHypothesisClass,
    s: &[LabeledSample],
    t: &[LabeledSample],
) -> Result<Vec<BoundReport>, AnalysisError> {
    let sx: Vec<&[f64]> = s.iter().map(|v| v.x.as_slice()).collect();
    let tx: Vec<&[f64]> = t.iter().map(|v| v.x.as_slice()).collect();
    let d_hdh = hdh_divergence(class, &sx, &tx)?;
    let lambda = lambda_h(class, s, t)?;
    let mut out = Vec::with_capacity(class.len());
    for h in &class.hypotheses {
        let (r_s, r_t) = (risk(h, s), risk(h, t));
        let rhs = r_s + d_hdh / 2.0 + lambda;
        let holds = r_t <= rhs + BOUND_SLACK;
        if !holds {
            return Err(AnalysisError::BoundViolated {
                hypothesis: h.to_string(),
                r_t,
                rhs,
            });
        }
        out.push(BoundReport {
            hypothesis: h.clone(),
            r_t,
            r_s,
            d_hdh,
            lambda,
            rhs,
            holds,
        });
    }
    Ok(out)
}

/// `2 · (1 − 2ε)` clamped to `[0, 2]`.
pub fn a_distance_from_error(eps: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0)
}

/// Fits a logistic domain classifier on half of each feature set and converts
/// its error on the other half into an A-distance.
pub fn proxy_a_distance(features_s: &Tensor, features_t: &Tensor, seed: u64) -> Result<f64, AnalysisError> {
    let (ns, nt) = (features_s.rows(), features_t.rows());
    if ns < MIN_PROXY_SAMPLES || nt < MIN_PROXY_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            source_n: ns,
            target_n: nt,
        });
    }
    let d = features_s.cols();
    if features_t.cols() != d {
        return Err(AnalysisError::DimensionMismatch(d, features_t.cols()));
    }

    let n = (ns + nt) as f64;
    let rows = || (0..ns).map(|i| features_s.row(i)).chain((0..nt).map(|i| features_t.row(i)));
    let mut mean = vec![0.0; d];
    for r in rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in rows() {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |r: &[f64]| -> Vec<f64> { r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is: Vec<usize> = (0..ns).collect();
    let mut it: Vec<usize> = (0..nt).collect();
    is.shuffle(&mut rng);
    it.shuffle(&mut rng);
    let mut train: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut test: Vec<(Vec<f64>, f64)> = Vec::new();
    for (k, &i) in is.iter().enumerate() {
        let dst = if k < ns / 2 { &mut train } else { &mut test };
        dst.push((standardize(features_s.row(i)), 0.0));
    }
    for (k, &i) in it.iter().enumerate() {
        let dst = if k < nt / 2 { &mut train } else { &mut test };
        dst.push((standardize(features_t.row(i)), 1.0));
    }

    let mut w = Tensor::zeros(&[d]);
    let mut b = Tensor::scalar(0.0);
    let cfg = OptimizerConfig {
        base_lr: 0.1,
        ..OptimizerConfig::default()
    };
    let mut opt = SgdMomentum::new(cfg, [&w, &b]);
    let groups = [ParamGroup::Backbone, ParamGroup::Backbone];
    let m = train.len() as f64;
    for step in 0..PROXY_STEPS {
        opt.set_progress(step as f64 / PROXY_STEPS as f64)?;
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = x.iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>() + b.item();
            let r = (1.0 / (1.0 + (-z).exp()) - y) / m;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += r * a;
            }
            gb += r;
        }
        let (gw, gb) = (Tensor::vector(gw), Tensor::scalar(gb));
        opt.step(&mut [&mut w, &mut b], &[&gw, &gb], &groups)?;
    }
    let wrong = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>() + b.item();
            (z > 0.0) != (*y == 1.0)
        })
        .count();
    Ok(a_distance_from_error(wrong as f64 / test.len() as f64))
}

/// Proxy A-distance between the model's source and target features.
pub fn feature_a_distance(model: &ModelBundle, x_s: &Tensor, x_t: &Tensor, seed: u64) -> Result<f64, AnalysisError> {
    proxy_a_distance(&model.features(x_s)?, &model.features(x_t)?, seed)
}

/// Points in `[lo, hi]` where the 1-D model's predicted class changes,
/// located by bisection to within `tol` after a uniform scan of `scan` cells.
pub fn decision_crossings_1d(model: &ModelBundle, lo: f64, hi: f64, scan: usize, tol: f64) -> Result<Vec<f64>, AnalysisError> {
    let label = |x: f64| -> Result<usize, AnalysisError> { Ok(model.predict_labels(&Tensor::from_rows(&[[x]])?)?[0]) };
    let grid: Vec<f64> = (0..=scan).map(|i| lo + (hi - lo) * i as f64 / scan as f64).collect();
    let xs = Tensor::from_rows(&grid.iter().map(|&x| [x]).collect::<Vec<_>>())?;
    let labels = model.predict_labels(&xs)?;
    let mut out = Vec::new();
    for i in 0..scan {
        if labels[i] == labels[i + 1] {
            continue;
        }
        let (mut a, mut b) = (grid[i], grid[i + 1]);
        let la = labels[i];
        while b - a > tol {
            let mid = 0.5 * (a + b);
            if label(mid)? == la {
                a = mid;
            } else {
                b = mid;
            }
        }
        out.push(0.5 * (a + b));
    }
    Ok(out)
}
