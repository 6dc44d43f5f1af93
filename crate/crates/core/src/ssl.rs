//! The eight unlabeled-data regularizers, each yielding one or more
//! [`LossTerm`]s on a model [`Session`].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::domains::{augment_batch, AugKind, AugmentationSpec};
use crate::models::{ModelBundle, ModelError, Session};

#[derive(Debug, Error)]
pub enum SslError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid ssl config: {0}")]
    InvalidConfig(String),
    #[error("unknown method `{name}`; valid: {valid}")]
    UnknownMethod { name: String, valid: String },
}

impl From<AutodiffError> for SslError {
    fn from(e: AutodiffError) -> Self {
        SslError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SslMethod {
    EntropyMin,
    SelfTraining,
    PiModel,
    MeanTeacher,
    Vat,
    MixMatch,
    UdaConsistency,
    FixMatch,
}

impl SslMethod {
    pub const ALL: [SslMethod; 8] = [
        SslMethod::EntropyMin,
        SslMethod::SelfTraining,
        SslMethod::PiModel,
        SslMethod::MeanTeacher,
        SslMethod::Vat,
        SslMethod::MixMatch,
        SslMethod::UdaConsistency,
        SslMethod::FixMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslMethod::EntropyMin => "entropy_min",
            SslMethod::SelfTraining => "self_training",
            SslMethod::PiModel => "pi_model",
            SslMethod::MeanTeacher => "mean_teacher",
            SslMethod::Vat => "vat",
            SslMethod::MixMatch => "mixmatch",
            SslMethod::UdaConsistency => "uda_consistency",
            SslMethod::FixMatch => "fixmatch",
        }
    }

    /// MixMatch supplies its own supervised term on mixed labeled inputs.
    pub fn replaces_supervised(self) -> bool {
        self == SslMethod::MixMatch
    }

    pub fn needs_teacher(self) -> bool {
        self == SslMethod::MeanTeacher
    }
}

impl fmt::Display for SslMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SslMethod {
    type Err = SslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SslMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SslError::UnknownMethod {
                name: s.to_string(),
                valid: SslMethod::ALL.map(|m| m.name()).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub method: SslMethod,
    pub omega: f64,
    pub ramp_up_fraction: f64,
    pub tau: f64,
    pub sharpen_temperature: f64,
    pub mixup_alpha: f64,
    pub mixmatch_n_aug: usize,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
    pub vat_power_iters: usize,
    pub ema_alpha: f64,
}

impl SslConfig {
    pub fn new(method: SslMethod) -> Self {
        Self {
            method,
            omega: 1.0,
            ramp_up_fraction: 0.1,
            tau: 0.95,
            sharpen_temperature: 0.5,
            mixup_alpha: 0.75,
            mixmatch_n_aug: 2,
            vat_epsilon: 1.0,
            vat_xi: 1e-6,
            vat_power_iters: 1,
            ema_alpha: 0.99,
        }
    }

    pub fn validate(&self) -> Result<(), SslError> {
        let bad = |m: String| Err(SslError::InvalidConfig(m));
        if !(self.omega >= 0.0) {
            return bad(format!("omega must be >= 0, got {}", self.omega));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0,1], got {}", self.tau));
        }
        if !(self.sharpen_temperature > 0.0) {
            return bad(format!("sharpen temperature must be > 0, got {}", self.sharpen_temperature));
        }
        if !(self.vat_epsilon >= 0.0) || !(self.vat_xi > 0.0) {
            return bad(format!("vat needs epsilon >= 0 and xi > 0, got {} and {}", self.vat_epsilon, self.vat_xi));
        }
        if !(self.mixup_alpha > 0.0) || self.mixmatch_n_aug == 0 {
            return bad("mixmatch needs mixup_alpha > 0 and n_aug >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must be in [0,1], got {}", self.ema_alpha));
        }
        if !(self.ramp_up_fraction >= 0.0) {
            return bad(format!("ramp_up_fraction must be >= 0, got {}", self.ramp_up_fraction));
        }
        Ok(())
    }

    /// `ω · min(1, p / ramp_up_fraction)`.
    pub fn effective_weight(&self, progress: f64) -> f64 {
        ramp_weight(self.omega, self.ramp_up_fraction, progress)
    }
}

pub fn ramp_weight(omega: f64, ramp_up_fraction: f64, progress: f64) -> f64 {
    if ramp_up_fraction <= 0.0 {
        omega
    } else {
        omega * (progress / ramp_up_fraction).min(1.0)
    }
}

/// Which parameters a loss term may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Route {
    FullModel,
    /// Activations flow through `h`, but `h` accumulates no gradient.
    FeatureExtractorOnly,
}

impl Route {
    pub fn name(self) -> &'static str {
        match self {
            Route::FullModel => "full_model",
            Route::FeatureExtractorOnly => "feature_extractor_only",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_model" => Ok(Route::FullModel),
            "feature_extractor_only" => Ok(Route::FeatureExtractorOnly),
            _ => Err(format!("unknown route `{s}` (expected full_model or feature_extractor_only)")),
        }
    }
}

/// A named scalar on a session tape with its weight and routing.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub value: Var,
    pub weight: f64,
    pub route: Route,
    pub mask_rate: Option<f64>,
}

impl LossTerm {
    pub fn new(name: impl Into<String>, value: Var) -> Self {
        Self {
            name: name.into(),
            value,
            weight: 1.0,
            route: Route::FullModel,
            mask_rate: None,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    pub fn with_route(mut self, r: Route) -> Self {
        self.route = r;
        self
    }

    fn with_mask(mut self, rate: f64) -> Self {
        self.mask_rate = Some(rate);
        self
    }
}

/// Weak and strong views used by the consistency methods.
#[derive(Clone, Debug, PartialEq)]
pub struct AugViews {
    pub weak: AugmentationSpec,
    pub strong: AugmentationSpec,
}

impl AugViews {
    pub fn from_spec(base: &AugmentationSpec) -> Self {
        Self {
            weak: base.with_kind(AugKind::Weak),
            strong: base.with_kind(AugKind::Strong),
        }
    }

    pub fn identity() -> Self {
        let id = AugmentationSpec::default().with_kind(AugKind::Identity);
        Self {
            weak: id.clone(),
            strong: id,
        }
    }
}

/// Row entropies of `softmax(logits / T)`.
pub fn entropy_rows(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var, AutodiffError> {
    let p = tape.softmax(logits, temperature)?;
    let lp = tape.log_softmax(logits, temperature)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_axis(plp, 1)?;
    Ok(tape.neg(s))
}

/// Row mask `max_k q_ik ≥ τ`, the argmax pseudo-labels, and the kept fraction.
pub fn confidence_mask(q: &Tensor, tau: f64) -> (Vec<bool>, Vec<usize>, f64) {
    let mask: Vec<bool> = q.max_rows().into_iter().map(|m| m >= tau).collect();
    let rate = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    (mask, q.argmax_rows(), rate)
}

/// Cross-entropy of `logits` against argmax pseudo-labels of `q` on rows with
/// `max q ≥ τ`, averaged over the full batch.
pub fn masked_pseudo_label_ce(tape: &mut Tape, q: &Tensor, logits: Var, tau: f64) -> Result<(Var, f64), AutodiffError> {
    let (mask, labels, rate) = confidence_mask(q, tau);
    let k = q.cols();
    let mut targets = Tensor::one_hot(&labels, k)?;
    for (i, keep) in mask.iter().enumerate() {
        if !keep {
            targets.data_mut()[i * k..(i + 1) * k].fill(0.0);
        }
    }
    let t = tape.constant(targets);
    let ce = tape.cross_entropy_rows(logits, t)?;
    Ok((tape.mean(ce), rate))
}

/// `p_k^{1/T} / Σ_j p_j^{1/T}` per row; `T = 1` returns `p` unchanged.
pub fn sharpen(p: &Tensor, temperature: f64) -> Tensor {
    if temperature == 1.0 {
        return p.clone();
    }
    let k = p.cols();
    let mut out = p.map(|v| v.powf(1.0 / temperature));
    for row in out.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `λ·a + (1−λ)·b`; `λ = 1` returns `a` exactly.
pub fn mixup(a: &Tensor, b: &Tensor, lambda: f64) -> Tensor {
    if lambda == 1.0 {
        return a.clone();
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shapes")
}

fn mean_squared_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var, AutodiffError> {
    let se = tape.squared_error_rows(a, b)?;
    Ok(tape.mean(se))
}

pub fn entropy_min(s: &mut Session, x_u: &Tensor) -> Result<LossTerm, SslError> {
    let x = s.input(x_u);
    let logits = s.logits(x)?;
    let h = entropy_rows(&mut s.tape, logits, 1.0)?;
    Ok(LossTerm::new("entropy_min", s.tape.mean(h)))
}

pub fn self_training(s: &mut Session, x_u: &Tensor, tau: f64) -> Result<LossTerm, SslError> {
    let q = s.model().predict(x_u, false)?;
    let x = s.input(x_u);
    let logits = s.logits(x)?;
    let (v, rate) = masked_pseudo_label_ce(&mut s.tape, &q, logits, tau)?;
    Ok(LossTerm::new("self_training", v).with_mask(rate))
}

pub fn pi_model(s: &mut Session, x_u: &Tensor, views: &AugViews, rng: &mut impl Rng) -> Result<LossTerm, SslError> {
    let a = augment_batch(x_u, &views.weak, rng);
    let b = augment_batch(x_u, &views.weak, rng);
    let (xa, xb) = (s.input(&a), s.input(&b));
    let pa = s.probs(xa)?;
    let pb = s.probs(xb)?;
    Ok(LossTerm::new("pi_model", mean_squared_rows(&mut s.tape, pa, pb)?))
}

pub fn mean_teacher(s: &mut Session, x_u: &Tensor, views: &AugViews, rng: &mut impl Rng) -> Result<LossTerm, SslError> {
    let a = augment_batch(x_u, &views.weak, rng);
    let b = augment_batch(x_u, &views.weak, rng);
    let (xa, xb) = (s.input(&a), s.input(&b));
    let pt = s.teacher_probs(xb)?;
    let ps = s.probs(xa)?;
    Ok(LossTerm::new("mean_teacher", mean_squared_rows(&mut s.tape, ps, pt)?))
}

fn normalize_rows_into(d: &mut Tensor, g: &Tensor) {
    let c = d.cols();
    for (drow, grow) in d.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
        let n = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            drow.iter_mut().zip(grow).for_each(|(dv, gv)| *dv = gv / n);
        }
    }
}

/// Random unit rows, refined by `power_iters` steps of
/// `d ← normalize(∇_d Σ_i KL(p̂_i ‖ p(x_i + ξ d_i)))`.
pub fn vat_direction(
    model: &ModelBundle,
    x: &Tensor,
    p_hat: &Tensor,
    xi: f64,
    power_iters: usize,
    rng: &mut impl Rng,
) -> Result<Tensor, SslError> {
    let raw: Vec<f64> = (0..x.numel()).map(|_| StandardNormal.sample(rng)).collect();
    let raw = Tensor::new(x.shape().to_vec(), raw)?;
    let mut d = Tensor::full(x.shape(), 1.0 / (x.cols() as f64).sqrt());
    normalize_rows_into(&mut d, &raw);
    for _ in 0..power_iters {
        let mut sub = Session::new(model);
        let xc = sub.input(x);
        let dv = sub.tape.param(d.clone());
        let step = sub.tape.scale(dv, xi);
        let xp = sub.tape.add(xc, step)?;
        let q = sub.probs(xp)?;
        let p = sub.tape.constant(p_hat.clone());
        let kl = sub.tape.kl_div_rows(p, q)?;
        let total = sub.tape.sum(kl);
        sub.tape.backward(total)?;
        if let Some(g) = sub.tape.grad(dv) {
            let g = g.clone();
            normalize_rows_into(&mut d, &g);
        }
    }
    Ok(d)
}

pub fn vat(
    s: &mut Session,
    x_u: &Tensor,
    epsilon: f64,
    xi: f64,
    power_iters: usize,
    rng: &mut impl Rng,
) -> Result<LossTerm, SslError> {
    let p_hat = s.model().predict(x_u, false)?;
    let d = vat_direction(s.model(), x_u, &p_hat, xi, power_iters, rng)?;
    let perturbed = Tensor::new(
        x_u.shape().to_vec(),
        x_u.data().iter().zip(d.data()).map(|(x, d)| x + epsilon * d).collect(),
    )?;
    let xp = s.input(&perturbed);
    let q = s.probs(xp)?;
    let p = s.tape.constant(p_hat);
    let kl = s.tape.kl_div_rows(p, q)?;
    Ok(LossTerm::new("vat", s.tape.mean(kl)))
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let c = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len() / c;
    Tensor::new(vec![n, c], data).expect("equal widths")
}

fn split_rows(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let head: Vec<usize> = (0..at).collect();
    let tail: Vec<usize> = (at..t.rows()).collect();
    (t.select_rows(&head), t.select_rows(&tail))
}

/// MixMatch: returns the supervised term on mixed labeled inputs and the
/// unsupervised squared-error term on mixed unlabeled inputs.
#[allow(clippy::too_many_arguments)]
pub fn mixmatch(
    s: &mut Session,
    x_l: &Tensor,
    y_l: &[usize],
    x_u: &Tensor,
    temperature: f64,
    mixup_alpha: f64,
    n_aug: usize,
    views: &AugViews,
    rng: &mut impl Rng,
) -> Result<(LossTerm, LossTerm), SslError> {
    let model = s.model();
    let k = model.num_classes();
    let xl_aug = augment_batch(x_l, &views.weak, rng);
    let u_augs: Vec<Tensor> = (0..n_aug).map(|_| augment_batch(x_u, &views.weak, rng)).collect();
    let mut q_avg = Tensor::zeros(&[x_u.rows(), k]);
    for ua in &u_augs {
        let p = model.predict(ua, false)?;
        q_avg.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b / n_aug as f64);
    }
    let q = sharpen(&q_avg, temperature);

    let yl = Tensor::one_hot(y_l, k)?;
    let mut xs: Vec<&Tensor> = vec![&xl_aug];
    xs.extend(u_augs.iter());
    let mut ps: Vec<&Tensor> = vec![&yl];
    ps.extend(std::iter::repeat_n(&q, n_aug));
    let all_x = concat_rows(&xs);
    let all_p = concat_rows(&ps);
    let mut perm: Vec<usize> = (0..all_x.rows()).collect();
    perm.shuffle(rng);
    let beta = Beta::new(mixup_alpha, mixup_alpha).map_err(|e| SslError::InvalidConfig(e.to_string()))?;
    let lam: f64 = beta.sample(rng);
    let lam = lam.max(1.0 - lam);
    let mixed_x = mixup(&all_x, &all_x.select_rows(&perm), lam);
    let mixed_p = mixup(&all_p, &all_p.select_rows(&perm), lam);
    let (xl_mix, xu_mix) = split_rows(&mixed_x, x_l.rows());
    let (pl_mix, pu_mix) = split_rows(&mixed_p, x_l.rows());

    let xl = s.input(&xl_mix);
    let logits_l = s.logits(xl)?;
    let tl = s.tape.constant(pl_mix);
    let sup = s.tape.cross_entropy(logits_l, tl)?;
    let xu = s.input(&xu_mix);
    let pu = s.probs(xu)?;
    let tu = s.tape.constant(pu_mix);
    let unsup = mean_squared_rows(&mut s.tape, pu, tu)?;
    Ok((LossTerm::new("mixmatch_sup", sup), LossTerm::new("mixmatch", unsup)))
}

/// `KL(sharpen(p̂(x), T) ‖ p(strong(x)))` on rows with `max p̂ ≥ τ`, averaged
/// over the full batch.
pub fn uda_consistency(
    s: &mut Session,
    x_u: &Tensor,
    temperature: f64,
    tau: f64,
    views: &AugViews,
    rng: &mut impl Rng,
) -> Result<LossTerm, SslError> {
    let p_hat = s.model().predict(x_u, false)?;
    let (mask, _, rate) = confidence_mask(&p_hat, tau);
    let target = sharpen(&p_hat, temperature);
    let strong = augment_batch(x_u, &views.strong, rng);
    let xs = s.input(&strong);
    let q = s.probs(xs)?;
    let t = s.tape.constant(target);
    let kl = s.tape.kl_div_rows(t, q)?;
    let m = s.tape.constant(Tensor::vector(mask.iter().map(|&b| f64::from(u8::from(b))).collect()));
    let masked = s.tape.mul(kl, m)?;
    Ok(LossTerm::new("uda_consistency", s.tape.mean(masked)).with_mask(rate))
}

pub fn fixmatch(s: &mut Session, x_u: &Tensor, tau: f64, views: &AugViews, rng: &mut impl Rng) -> Result<LossTerm, SslError> {
    let weak = augment_batch(x_u, &views.weak, rng);
    let strong = augment_batch(x_u, &views.strong, rng);
    let q = s.model().predict(&weak, false)?;
    let xs = s.input(&strong);
    let logits = s.logits(xs)?;
    let (v, rate) = masked_pseudo_label_ce(&mut s.tape, &q, logits, tau)?;
    Ok(LossTerm::new("fixmatch", v).with_mask(rate))
}

/// Inputs of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct SslBatch<'a> {
    pub x_l: &'a Tensor,
    pub y_l: &'a [usize],
    pub x_u: &'a Tensor,
}

/// Runs the configured regularizer. The unsupervised term carries the ramped
/// weight and `route`; MixMatch's supervised term is always full-model with
/// weight 1.
pub fn regularizer_terms(
    s: &mut Session,
    cfg: &SslConfig,
    views: &AugViews,
    batch: SslBatch<'_>,
    progress: f64,
    route: Route,
    rng: &mut impl Rng,
) -> Result<Vec<LossTerm>, SslError> {
    let w = cfg.effective_weight(progress);
    let mut out = Vec::with_capacity(2);
    let x_u = batch.x_u;
    let term = match cfg.method {
        SslMethod::EntropyMin => entropy_min(s, x_u)?,
        SslMethod::SelfTraining => self_training(s, x_u, cfg.tau)?,
        SslMethod::PiModel => pi_model(s, x_u, views, rng)?,
        SslMethod::MeanTeacher => mean_teacher(s, x_u, views, rng)?,
        SslMethod::Vat => vat(s, x_u, cfg.vat_epsilon, cfg.vat_xi, cfg.vat_power_iters, rng)?,
        SslMethod::MixMatch => {
            let (sup, unsup) = mixmatch(
                s,
                batch.x_l,
                batch.y_l,
                x_u,
                cfg.sharpen_temperature,
                cfg.mixup_alpha,
                cfg.mixmatch_n_aug,
                views,
                rng,
            )?;
            out.push(sup);
            unsup
        }
        SslMethod::UdaConsistency => uda_consistency(s, x_u, cfg.sharpen_temperature, cfg.tau, views, rng)?,
        SslMethod::FixMatch => fixmatch(s, x_u, cfg.tau, views, rng)?,
    };
    out.push(term.with_weight(w).with_route(route));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_of(p: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&p.iter().map(|r| r.iter().map(|v| v.ln()).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap()
    }

    fn model(k: usize, seed: u64) -> ModelBundle {
        init_model(&ModelConfig::new(2, k), seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Scales `h` so predictions are far from uniform.
    fn confident(mut m: ModelBundle, factor: f64) -> ModelBundle {
        m.h.weight = m.h.weight.map(|v| v * factor);
        m
    }

    fn value(s: &Session, t: &LossTerm) -> f64 {
        s.tape.item(t.value)
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::new();
        let one_hot = t.constant(Tensor::from_rows(&[[50.0, -50.0], [-50.0, 50.0]]).unwrap());
        let e = entropy_rows(&mut t, one_hot, 1.0).unwrap();
        let e = t.mean(e);
        assert!(t.item(e) < 1e-12);
        let uniform = t.constant(Tensor::zeros(&[3, 4]));
        let e = entropy_rows(&mut t, uniform, 1.0).unwrap();
        let e = t.mean(e);
        assert!((t.item(e) - 4f64.ln()).abs() < 1e-12);
        let z = t.constant(logits_of(&[&[0.9, 0.1]]));
        let e = entropy_rows(&mut t, z, 1.0).unwrap();
        assert!((t.value(e).data()[0] - 0.3250829733914482).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let mut t = Tape::new();
        let q = Tensor::from_rows(&[[0.96, 0.04]]).unwrap();
        let z = t.param(logits_of(&[&[0.96, 0.04]]));
        let (l, rate) = masked_pseudo_label_ce(&mut t, &q, z, 0.95).unwrap();
        assert!((t.item(l) - 0.040821994520255166).abs() < 1e-12);
        assert_eq!(rate, 1.0);
        let (l, rate) = masked_pseudo_label_ce(&mut t, &q, z, 0.99).unwrap();
        assert_eq!((t.item(l), rate), (0.0, 0.0));

        let q = Tensor::from_rows(&[[0.97, 0.03]]).unwrap();
        let strong = t.param(logits_of(&[&[0.8, 0.2]]));
        let (l, _) = masked_pseudo_label_ce(&mut t, &q, strong, 0.95).unwrap();
        assert!((t.item(l) - 0.2231435513142097).abs() < 1e-12);

        // τ = 0 with exactly one-hot predictions.
        let q = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let z = t.param(Tensor::from_rows(&[[800.0, 0.0]]).unwrap());
        let (l, rate) = masked_pseudo_label_ce(&mut t, &q, z, 0.0).unwrap();
        assert_eq!((t.item(l), rate), (0.0, 1.0));
    }

    #[test]
    fn sharpen_and_mixup_examples() {
        let p = Tensor::from_rows(&[[0.6, 0.4]]).unwrap();
        assert_eq!(sharpen(&p, 1.0), p);
        let s = sharpen(&p, 0.5);
        assert!((s.data()[0] - 0.6923076923076923).abs() < 1e-12);
        assert!((s.data()[1] - 0.3076923076923077).abs() < 1e-12);
        let a = Tensor::from_rows(&[[1.0, -0.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 7.0]]).unwrap();
        assert_eq!(mixup(&a, &b, 1.0), a);
    }

    #[test]
    fn self_training_masks_unconfident_model() {
        // Freshly initialized h gives near-uniform predictions.
        let m = model(2, 1);
        let mut s = Session::new(&m);
        let t = self_training(&mut s, &batch(16, 1), 0.95).unwrap();
        assert_eq!((value(&s, &t), t.mask_rate), (0.0, Some(0.0)));
    }

    #[test]
    fn self_training_gradient_ignores_pseudo_label_branch() {
        let m = confident(model(2, 1), 40.0);
        let x = batch(16, 2);
        let mut s = Session::new(&m);
        let t = self_training(&mut s, &x, 0.6).unwrap();
        s.tape.backward(t.value).unwrap();
        let routed = s.student_grads();

        // Reference: the same cross-entropy with the pseudo-labels supplied as data.
        let q = m.predict(&x, false).unwrap();
        let mut r = Session::new(&m);
        let xv = r.input(&x);
        let logits = r.logits(xv).unwrap();
        let (l, _) = masked_pseudo_label_ce(&mut r.tape, &q, logits, 0.6).unwrap();
        r.tape.backward(l).unwrap();
        assert_eq!(routed, r.student_grads());
    }

    #[test]
    fn pi_model_identity_views_and_bounds() {
        let m = model(3, 2);
        let x = batch(8, 3);
        let mut s = Session::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = pi_model(&mut s, &x, &AugViews::identity(), &mut rng).unwrap();
        assert_eq!(value(&s, &t), 0.0);

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        let l = mean_squared_rows(&mut tape, a, b).unwrap();
        assert_eq!(tape.item(l), 2.0);

        let run = || {
            let mut s = Session::new(&m);
            let views = AugViews::from_spec(&AugmentationSpec::default());
            let t = pi_model(&mut s, &x, &views, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            s.tape.item(t.value).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mean_teacher_contracts() {
        let mut m = model(2, 3);
        let x = batch(8, 4);
        let mut s = Session::new(&m);
        assert!(matches!(
            mean_teacher(&mut s, &x, &AugViews::identity(), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SslError::Model(ModelError::MissingTeacher))
        ));
        m.attach_teacher();
        let mut s = Session::new(&m);
        let t = mean_teacher(&mut s, &x, &AugViews::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(value(&s, &t), 0.0);

        let mut m2 = m.clone();
        m2.h.weight = m2.h.weight.map(|v| v * 3.0);
        let mut s = Session::new(&m2);
        let views = AugViews::from_spec(&AugmentationSpec::default());
        let t = mean_teacher(&mut s, &x, &views, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(value(&s, &t) > 0.0);
        s.tape.backward(t.value).unwrap();
        for v in s.teacher_vars() {
            assert!(s.tape.grad(v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        }
        assert!(s.student_grads().iter().any(|g| g.data().iter().any(|&x| x != 0.0)));

        let frozen = m.teacher.clone();
        let mut m3 = m.clone();
        m3.h.bias = Tensor::vector(vec![1.0, -1.0]);
        m3.ema_update(1.0).unwrap();
        assert_eq!(m3.teacher, frozen);
    }

    #[test]
    fn vat_degenerate_cases() {
        let m = model(2, 4);
        let x = batch(8, 5);
        let mut s = Session::new(&m);
        let t = vat(&mut s, &x, 0.0, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(value(&s, &t), 0.0);

        let mut flat = m.clone();
        flat.h.weight = Tensor::zeros(flat.h.weight.shape());
        let mut s = Session::new(&flat);
        let t = vat(&mut s, &x, 1.0, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(value(&s, &t), 0.0);
    }

    #[test]
    fn vat_perturbation_has_norm_epsilon() {
        let m = model(2, 4);
        let x = batch(8, 5);
        let p = m.predict(&x, false).unwrap();
        let d = vat_direction(&m, &x, &p, 1e-6, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..8 {
            let n: f64 = d.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vat_adversarial_direction_beats_random() {
        let m = confident(model(2, 6), 5.0);
        let x = batch(100, 7);
        // Small enough that the second-order expansion behind VAT holds.
        let eps = 0.01;
        let p = m.predict(&x, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adv = vat_direction(&m, &x, &p, 1e-6, 1, &mut rng).unwrap();
        let rand_dir = vat_direction(&m, &x, &p, 1e-6, 0, &mut rng).unwrap();
        let kl_at = |d: &Tensor| {
            let xp = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(d.data()).map(|(a, b)| a + eps * b).collect(),
            )
            .unwrap();
            let q = m.predict(&xp, false).unwrap();
            (0..100)
                .map(|i| p.row(i).iter().zip(q.row(i)).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>())
                .collect::<Vec<_>>()
        };
        let (ka, kr) = (kl_at(&adv), kl_at(&rand_dir));
        let wins = ka.iter().zip(&kr).filter(|(a, r)| a >= r).count();
        assert!(wins >= 90, "adversarial won {wins}/100");
    }

    #[test]
    fn mixmatch_terms_are_finite_and_separate() {
        let m = model(2, 8);
        let mut s = Session::new(&m);
        let views = AugViews::from_spec(&AugmentationSpec::default());
        let (sup, unsup) =
            mixmatch(&mut s, &batch(6, 1), &[0, 1, 0, 1, 1, 0], &batch(6, 2), 0.5, 0.75, 2, &views, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        assert!(value(&s, &sup).is_finite() && value(&s, &sup) > 0.0);
        assert!(value(&s, &unsup).is_finite() && value(&s, &unsup) >= 0.0);
        assert_eq!((sup.name.as_str(), unsup.name.as_str()), ("mixmatch_sup", "mixmatch"));
    }

    #[test]
    fn uda_consistency_examples() {
        let m = confident(model(2, 9), 30.0);
        let x = batch(10, 3);
        let mut s = Session::new(&m);
        let t = uda_consistency(&mut s, &x, 1.0, 1e-9, &AugViews::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(value(&s, &t), 0.0);
        assert_eq!(t.mask_rate, Some(1.0));

        let flat = model(2, 9);
        let mut s = Session::new(&flat);
        let views = AugViews::from_spec(&AugmentationSpec::default());
        let t = uda_consistency(&mut s, &x, 0.5, 0.95, &views, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((value(&s, &t), t.mask_rate), (0.0, Some(0.0)));
    }

    fn permute_classes(m: &ModelBundle, perm: &[usize]) -> ModelBundle {
        let mut out = m.clone();
        let k = m.num_classes();
        let (w, b) = (&m.h.weight, &m.h.bias);
        for r in 0..w.rows() {
            for (j, &pj) in perm.iter().enumerate() {
                out.h.weight.data_mut()[r * k + j] = w.get(r, pj);
            }
        }
        for (j, &pj) in perm.iter().enumerate() {
            out.h.bias.data_mut()[j] = b.data()[pj];
        }
        out
    }

    #[test]
    fn regularizers_are_permutation_invariant() {
        let mut m = confident(model(3, 10), 20.0);
        m.h.bias = Tensor::vector(vec![0.3, -0.2, 0.1]);
        m.attach_teacher();
        let mut p = permute_classes(&m, &[2, 0, 1]);
        p.attach_teacher();
        let x = batch(12, 11);
        let views = AugViews::from_spec(&AugmentationSpec::default());
        for method in SslMethod::ALL {
            if method == SslMethod::MixMatch {
                continue; // labeled targets are class indices, not model outputs
            }
            let mut cfg = SslConfig::new(method);
            cfg.tau = 0.6;
            let eval = |model: &ModelBundle| {
                let mut s = Session::new(model);
                let b = SslBatch {
                    x_l: &x,
                    y_l: &[],
                    x_u: &x,
                };
                let terms =
                    regularizer_terms(&mut s, &cfg, &views, b, 1.0, Route::FullModel, &mut ChaCha8Rng::seed_from_u64(4))
                        .unwrap();
                s.tape.item(terms[0].value)
            };
            let (a, b) = (eval(&m), eval(&p));
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{method}: {a} vs {b}");
        }
    }

    #[test]
    fn names_round_trip_and_config_bounds() {
        for m in SslMethod::ALL {
            assert_eq!(m.name().parse::<SslMethod>().unwrap(), m);
        }
        assert!("nope".parse::<SslMethod>().unwrap_err().to_string().contains("fixmatch"));
        let mut c = SslConfig::new(SslMethod::FixMatch);
        c.tau = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("tau must be in (0,1]"));
    }

    #[test]
    fn regularizer_terms_carry_ramp_and_route() {
        let m = model(2, 12);
        let x = batch(6, 1);
        let b = SslBatch {
            x_l: &x,
            y_l: &[0, 1, 0, 1, 0, 1],
            x_u: &x,
        };
        let mut cfg = SslConfig::new(SslMethod::MixMatch);
        cfg.omega = 2.0;
        let mut s = Session::new(&m);
        let views = AugViews::from_spec(&AugmentationSpec::default());
        let terms =
            regularizer_terms(&mut s, &cfg, &views, b, 0.05, Route::FeatureExtractorOnly, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(terms.len(), 2);
        assert_eq!((terms[0].weight, terms[0].route), (1.0, Route::FullModel));
        assert_eq!((terms[1].weight, terms[1].route), (1.0, Route::FeatureExtractorOnly));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ramp_is_monotone_and_capped(omega in 0.0f64..5.0, frac in 0.0f64..1.0, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(ramp_weight(omega, frac, lo) <= ramp_weight(omega, frac, hi));
            prop_assert!(ramp_weight(omega, frac, hi) <= omega);
        }

        #[test]
        fn mask_rate_is_monotone_in_tau(rows in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let q = Tensor::from_rows(&rows.iter().map(|(a, b)| {
                let s = a + b + 1e-9;
                [a / s, b / s]
            }).collect::<Vec<_>>()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(confidence_mask(&q, hi).2 <= confidence_mask(&q, lo).2);
        }

        #[test]
        fn every_regularizer_is_finite_and_nonnegative(seed in 0u64..200, method in 0usize..8, scale in 0.5f64..30.0) {
            let mut m = confident(model(3, seed), scale);
            m.attach_teacher();
            let x = batch(8, seed + 1);
            let mut cfg = SslConfig::new(SslMethod::ALL[method]);
            cfg.tau = 0.5;
            let mut s = Session::new(&m);
            let views = AugViews::from_spec(&AugmentationSpec::default());
            let b = SslBatch { x_l: &x, y_l: &[0, 1, 2, 0, 1, 2, 0, 1], x_u: &x };
            let terms = regularizer_terms(&mut s, &cfg, &views, b, 1.0, Route::FullModel, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for t in &terms {
                let v = s.tape.item(t.value);
                prop_assert!(v.is_finite() && v >= 0.0, "{} = {}", t.name, v);
                if let Some(r) = t.mask_rate {
                    prop_assert!((0.0..=1.0).contains(&r));
                }
            }
            if cfg.method == SslMethod::EntropyMin {
                prop_assert!(s.tape.item(terms[0].value) <= 3f64.ln() + 1e-12);
            }
        }
    }
}
