//! The unified training loop: supervised loss on the source plus weighted
//! regularizers on the target, with gradient routing, EMA teacher upkeep and
//! periodic evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimizerConfig, SgdMomentum, Tensor, Var};
use crate::domains::{importance_weight, AugmentationSpec, DomainDataset, DomainError};
use crate::models::{init_model, DiscriminatorInput, ModelBundle, ModelConfig, ModelError, Session};
use crate::ssl::{regularizer_terms, AugViews, LossTerm, Route, SslBatch, SslConfig, SslError, SslMethod};
use crate::uda::{importance_weighted_sup, uda_term, DomainForward, UdaConfig, UdaError, UdaMethod};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value in term `{term}` at step {step}")]
    NonFinite { step: usize, term: String },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("cannot evaluate on an empty {0} split")]
    EmptySplit(Split),
    #[error("unknown method `{name}`; valid: {valid}")]
    UnknownMethod { name: String, valid: String },
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Uda(#[from] UdaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MethodSpec {
    SourceOnly,
    /// Supervised training on the target-train split with its labels revealed.
    Oracle,
    Ssl(SslConfig),
    /// A UDA loss, optionally combined with an SSL regularizer.
    Uda(UdaConfig),
}

impl MethodSpec {
    /// Every accepted single-method name; hybrids are written `uda+ssl`.
    pub fn valid_names() -> Vec<&'static str> {
        let mut v = vec!["source_only", "oracle"];
        v.extend(SslMethod::ALL.map(|m| m.name()));
        v.extend(UdaMethod::ALL.map(|m| m.name()));
        v
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::SourceOnly => "source_only".into(),
            MethodSpec::Oracle => "oracle".into(),
            MethodSpec::Ssl(c) => c.method.name().into(),
            MethodSpec::Uda(u) => match &u.combine_with_consistency {
                Some(s) => format!("{}+{}", u.method, s.method),
                None => u.method.name().into(),
            },
        }
    }

    pub fn ssl_config(&self) -> Option<&SslConfig> {
        match self {
            MethodSpec::Ssl(c) => Some(c),
            MethodSpec::Uda(u) => u.combine_with_consistency.as_ref(),
            _ => None,
        }
    }

    pub fn ssl_config_mut(&mut self) -> Option<&mut SslConfig> {
        match self {
            MethodSpec::Ssl(c) => Some(c),
            MethodSpec::Uda(u) => u.combine_with_consistency.as_mut(),
            _ => None,
        }
    }

    pub fn uda_config(&self) -> Option<&UdaConfig> {
        match self {
            MethodSpec::Uda(u) => Some(u),
            _ => None,
        }
    }

    pub fn uda_config_mut(&mut self) -> Option<&mut UdaConfig> {
        match self {
            MethodSpec::Uda(u) => Some(u),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(u) = self.uda_config() {
            u.validate()?;
        }
        if let Some(s) = self.ssl_config() {
            s.validate()?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || TrainError::UnknownMethod {
            name: s.to_string(),
            valid: format!("{} (hybrids: <uda>+<ssl>)", MethodSpec::valid_names().join(", ")),
        };
        if let Some((u, c)) = s.split_once('+') {
            let mut cfg = UdaConfig::new(u.parse().map_err(|_| unknown())?);
            if cfg.method.replaces_supervised() {
                return Err(unknown());
            }
            cfg.combine_with_consistency = Some(SslConfig::new(c.parse().map_err(|_| unknown())?));
            return Ok(MethodSpec::Uda(cfg));
        }
        match s {
            "source_only" => Ok(MethodSpec::SourceOnly),
            "oracle" => Ok(MethodSpec::Oracle),
            _ => {
                if let Ok(m) = s.parse::<SslMethod>() {
                    Ok(MethodSpec::Ssl(SslConfig::new(m)))
                } else if let Ok(m) = s.parse::<UdaMethod>() {
                    Ok(MethodSpec::Uda(UdaConfig::new(m)))
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub method: MethodSpec,
    pub loss_route: Route,
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub discriminator_hidden: usize,
    pub augmentation: AugmentationSpec,
}

impl TrainConfig {
    pub fn new(method: MethodSpec, seed: u64) -> Self {
        Self {
            total_steps: 2000,
            batch_labeled: 32,
            batch_unlabeled: 32,
            seed,
            method,
            loss_route: Route::FeatureExtractorOnly,
            eval_every: 100,
            optimizer: OptimizerConfig::default(),
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            discriminator_hidden: 32,
            augmentation: AugmentationSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_steps == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.eval_every == 0 {
            return Err(TrainError::InvalidConfig(
                "total_steps, batch sizes and eval_every must be positive".into(),
            ));
        }
        self.augmentation.validate()?;
        self.method.validate()
    }

    pub fn model_config(&self, dataset: &DomainDataset) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.input_dim(),
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes: dataset.num_classes(),
            discriminator_hidden: self.discriminator_hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Transductive,
    Inductive,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Transductive => "transductive",
            Split::Inductive => "inductive",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Instance accuracy.
    pub acc: f64,
    /// Mean per-class recall over the classes present in the split.
    pub cat_acc: f64,
}

pub fn accuracy_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Metrics {
    let n = truth.len();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        tot[t] += 1;
        hit[t] += usize::from(p == t);
    }
    let recalls: Vec<f64> = hit
        .iter()
        .zip(&tot)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Metrics {
        acc: correct as f64 / n as f64,
        cat_acc: recalls.iter().sum::<f64>() / recalls.len() as f64,
    }
}

/// Transductive: target-train against its hidden labels. Inductive: the
/// held-out target test set.
pub fn evaluate(model: &ModelBundle, dataset: &DomainDataset, split: Split) -> Result<Metrics, TrainError> {
    let (x, y) = match split {
        Split::Transductive => {
            if dataset.target_unlabeled.is_empty() {
                return Err(TrainError::EmptySplit(split));
            }
            (dataset.target_x(), dataset.target_train_labels.reveal().to_vec())
        }
        Split::Inductive => {
            if dataset.target_test.is_empty() {
                return Err(TrainError::EmptySplit(split));
            }
            (dataset.test_x(), dataset.test_y())
        }
    };
    let pred = model.predict_labels(&x)?;
    Ok(accuracy_metrics(&pred, &y, dataset.num_classes()))
}

/// Backward pass honoring each term's route and returning the total
/// `Σ ω_i · value_i`.
///
/// With no feature-extractor-only term this is one backward on the total.
/// Otherwise the full-model terms get one backward and the remaining terms a
/// second one in which `h` accumulates nothing.
pub fn route_gradients(s: &mut Session, terms: &[LossTerm]) -> Result<Var, TrainError> {
    let weighted_sum = |s: &mut Session, ts: &[&LossTerm]| -> Result<Option<Var>, AutodiffError> {
        let mut acc: Option<Var> = None;
        for t in ts {
            let w = s.tape.scale(t.value, t.weight);
            acc = Some(match acc {
                Some(a) => s.tape.add(a, w)?,
                None => w,
            });
        }
        Ok(acc)
    };
    let all: Vec<&LossTerm> = terms.iter().collect();
    let total = weighted_sum(s, &all)?.ok_or_else(|| TrainError::InvalidConfig("no loss terms".into()))?;
    let (full, reg): (Vec<&LossTerm>, Vec<&LossTerm>) = terms.iter().partition(|t| t.route == Route::FullModel);
    if reg.is_empty() {
        s.tape.backward(total)?;
    } else {
        if let Some(f) = weighted_sum(s, &full)? {
            s.tape.backward(f)?;
        }
        let r = weighted_sum(s, &reg)?.expect("non-empty");
        let head = s.head_vars();
        s.tape.backward_blocked(r, &head)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermRecord {
    pub name: String,
    pub value: f64,
    pub weight: f64,
    pub mask_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    /// The supervised term, always `terms[0]` with weight 1.
    pub sup_loss: f64,
    pub terms: Vec<TermRecord>,
    pub total_loss: f64,
    pub mask_rate: Option<f64>,
    pub transductive: Metrics,
    pub inductive: Metrics,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// The record with the highest accuracy on `split` (earliest on ties).
    pub fn best(&self, split: Split) -> Option<&HistoryRecord> {
        let acc = |r: &HistoryRecord| match split {
            Split::Transductive => r.transductive.acc,
            Split::Inductive => r.inductive.acc,
        };
        self.records
            .iter()
            .fold(None, |best: Option<&HistoryRecord>, r| match best {
                Some(b) if acc(b) >= acc(r) => Some(b),
                _ => Some(r),
            })
    }
}

/// Endless minibatches over `0..n`, reshuffled at every pass.
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct LabeledPool {
    x: Tensor,
    y: Vec<usize>,
    weights: Option<Vec<f64>>,
}

fn labeled_pool(dataset: &DomainDataset, method: &MethodSpec) -> Result<LabeledPool, TrainError> {
    if *method == MethodSpec::Oracle {
        return Ok(LabeledPool {
            x: dataset.target_x(),
            y: dataset.target_train_labels.reveal().to_vec(),
            weights: None,
        });
    }
    let weights = match method.uda_config() {
        Some(u) if u.method == UdaMethod::ImportanceWeighting => {
            let oracle = dataset.density_oracle.as_ref().ok_or(DomainError::MissingOracle)?;
            let w = dataset
                .source_labeled
                .iter()
                .map(|s| importance_weight(&s.x, oracle))
                .collect::<Result<Vec<_>, _>>()?;
            Some(w)
        }
        _ => None,
    };
    Ok(LabeledPool {
        x: dataset.source_x(),
        y: dataset.source_y(),
        weights,
    })
}

/// Builds the model required by `config.method`: discriminator for the
/// adversarial losses, synced teacher for mean teacher.
pub fn build_model(dataset: &DomainDataset, config: &TrainConfig) -> Result<ModelBundle, TrainError> {
    let mut model = init_model(&config.model_config(dataset), config.seed)?;
    if let Some(u) = config.method.uda_config() {
        match u.method {
            UdaMethod::Dann => model.attach_discriminator(DiscriminatorInput::Features, config.seed),
            UdaMethod::Cdan => model.attach_discriminator(DiscriminatorInput::Conditioned, config.seed),
            _ => {}
        }
    }
    if config.method.ssl_config().is_some_and(|c| c.method.needs_teacher()) {
        model.attach_teacher();
    }
    Ok(model)
}

/// Runs `config.total_steps` optimizer steps and returns the final model and
/// the evaluation history (steps 0, eval_every, 2·eval_every, …, total_steps).
pub fn train(dataset: &DomainDataset, config: &TrainConfig) -> Result<(ModelBundle, TrainHistory), TrainError> {
    config.validate()?;
    dataset.validate()?;
    let mut model = build_model(dataset, config)?;
    let pool = labeled_pool(dataset, &config.method)?;
    let target = dataset.target_x();
    let k = dataset.num_classes();
    let views = AugViews::from_spec(&config.augmentation);
    let ssl = config.method.ssl_config().cloned();
    let uda = config.method.uda_config().cloned();
    let replaces_sup = ssl.as_ref().is_some_and(|c| c.method.replaces_supervised());

    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba7c_4000);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa06_0000);
    let mut lab = Cycler::new(pool.y.len(), &mut batch_rng);
    let mut unl = Cycler::new(target.rows(), &mut batch_rng);
    let mut opt = SgdMomentum::new(config.optimizer.clone(), model.student_tensors());
    let groups = model.param_groups();
    let mut history = TrainHistory::default();
    let total = config.total_steps;

    for step in 0..=total {
        let progress = step as f64 / total as f64;
        opt.set_progress(progress)?;
        let li = lab.next(config.batch_labeled, &mut batch_rng);
        let ui = unl.next(config.batch_unlabeled, &mut batch_rng);
        let x_l = pool.x.select_rows(&li);
        let y_l: Vec<usize> = li.iter().map(|&i| pool.y[i]).collect();
        let x_u = target.select_rows(&ui);

        let mut s = Session::new(&model);
        let xl = s.input(&x_l);
        let z_s = s.features(xl)?;
        let logits_s = s.classify(z_s)?;
        let onehot = s.tape.constant(Tensor::one_hot(&y_l, k)?);
        let mut terms: Vec<LossTerm> = Vec::new();
        if let Some(w) = &pool.weights {
            let wb: Vec<f64> = li.iter().map(|&i| w[i]).collect();
            terms.push(importance_weighted_sup(&mut s.tape, logits_s, onehot, &wb)?);
        } else if !replaces_sup {
            let ce = s.tape.cross_entropy(logits_s, onehot)?;
            terms.push(LossTerm::new("sup", ce));
        }
        if let Some(u) = &uda {
            let xu = s.input(&x_u);
            let z_t = s.features(xu)?;
            let logits_t = s.classify(z_t)?;
            let fwd = DomainForward {
                z_s,
                z_t,
                logits_s,
                logits_t,
            };
            if let Some(t) = uda_term(&mut s, u, fwd, progress)? {
                terms.push(t);
            }
        }
        if let Some(c) = &ssl {
            let batch = SslBatch {
                x_l: &x_l,
                y_l: &y_l,
                x_u: &x_u,
            };
            terms.extend(regularizer_terms(&mut s, c, &views, batch, progress, config.loss_route, &mut aug_rng)?);
        }
        for t in &terms {
            if !s.tape.item(t.value).is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    term: t.name.clone(),
                });
            }
        }
        let logged = step % config.eval_every == 0 || step == total;
        if logged {
            let recs: Vec<TermRecord> = terms
                .iter()
                .map(|t| TermRecord {
                    name: t.name.clone(),
                    value: s.tape.item(t.value),
                    weight: t.weight,
                    mask_rate: t.mask_rate,
                })
                .collect();
            let total_loss = recs.iter().map(|r| r.weight * r.value).sum();
            history.records.push(HistoryRecord {
                step,
                sup_loss: recs[0].value,
                mask_rate: recs.iter().find_map(|r| r.mask_rate),
                terms: recs,
                total_loss,
                transductive: evaluate(&model, dataset, Split::Transductive)?,
                inductive: evaluate(&model, dataset, Split::Inductive)?,
                lr: opt.lr(),
            });
        }
        if step == total {
            break;
        }
        let total_var = route_gradients(&mut s, &terms)?;
        if !s.tape.item(total_var).is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: "total".into(),
            });
        }
        let grads = s.student_grads();
        drop(s);
        let grefs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut model.student_params_mut(), &grefs, &groups)?;
        if model.teacher.is_some() {
            let alpha = ssl.as_ref().map_or(0.99, |c| c.ema_alpha);
            model.ema_update(alpha)?;
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{gen_support_scenario, gen_toy1d, gen_two_moons_shift, SupportKind};
    use crate::autodiff::lr_at;
    use crate::ssl::entropy_rows;

    fn quick(method: &str, seed: u64, steps: usize) -> TrainConfig {
        let mut c = TrainConfig::new(method.parse().unwrap(), seed);
        c.total_steps = steps;
        c.eval_every = 10;
        c.hidden_dims = vec![16];
        c.feature_dim = 8;
        c
    }

    fn moons() -> DomainDataset {
        gen_two_moons_shift(60, 60, 30.0, [0.0, 0.0], 0.1, 1).unwrap()
    }

    #[test]
    fn metric_examples() {
        let m = accuracy_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2);
        assert_eq!((m.acc, m.cat_acc), (1.0, 1.0));
        let m = accuracy_metrics(&[0; 4], &[0, 1, 0, 1], 2);
        assert_eq!((m.acc, m.cat_acc), (0.5, 0.5));
        let truth: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let m = accuracy_metrics(&[0; 10], &truth, 2);
        assert_eq!((m.acc, m.cat_acc), (0.9, 0.5));
    }

    #[test]
    fn method_names_parse() {
        for name in MethodSpec::valid_names() {
            assert_eq!(name.parse::<MethodSpec>().unwrap().name(), name);
        }
        assert_eq!("mcc+uda_consistency".parse::<MethodSpec>().unwrap().name(), "mcc+uda_consistency");
        assert!("magic".parse::<MethodSpec>().unwrap_err().to_string().contains("fixmatch"));
        assert!("importance_weighting+fixmatch".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn source_only_logs_only_supervised_term() {
        let (_, h) = train(&moons(), &quick("source_only", 0, 40)).unwrap();
        let steps: Vec<usize> = h.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40]);
        assert!(h.records.iter().all(|r| r.terms.len() == 1 && r.total_loss == r.sup_loss));
    }

    #[test]
    fn training_is_deterministic() {
        for m in ["fixmatch", "dann", "mean_teacher", "mixmatch", "vat"] {
            let a = train(&moons(), &quick(m, 3, 20)).unwrap();
            let b = train(&moons(), &quick(m, 3, 20)).unwrap();
            assert_eq!(a, b, "{m}");
        }
    }

    #[test]
    fn history_invariants() {
        let ds = moons();
        for m in ["entropy_min", "cdan", "mcc+fixmatch", "pi_model", "uda_consistency", "self_training"] {
            let cfg = quick(m, 1, 30);
            let (_, h) = train(&ds, &cfg).unwrap();
            for w in h.records.windows(2) {
                assert!(w[0].step < w[1].step);
            }
            for r in &h.records {
                let recomputed: f64 = r.terms.iter().map(|t| t.weight * t.value).sum();
                assert!((recomputed - r.total_loss).abs() <= 1e-10);
                assert_eq!(r.lr, lr_at(r.step as f64 / 30.0).unwrap());
                for a in [r.transductive.acc, r.inductive.acc, r.transductive.cat_acc] {
                    assert!((0.0..=1.0).contains(&a));
                }
                assert!(r.terms.iter().all(|t| t.value.is_finite()));
            }
        }
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let ds = moons();
        let mut cfg = quick("mean_teacher", 2, 5);
        cfg.method.ssl_config_mut().unwrap().ema_alpha = 1.0;
        let (m, _) = train(&ds, &cfg).unwrap();
        let init = build_model(&ds, &cfg).unwrap();
        assert_eq!(m.teacher, init.teacher);
        assert_ne!(m.g, init.g);
    }

    #[test]
    fn zero_ssl_weight_matches_uda_only() {
        let ds = moons();
        let uda_only = train(&ds, &quick("mcc", 4, 15)).unwrap().0;
        let mut cfg = quick("mcc+fixmatch", 4, 15);
        cfg.method.ssl_config_mut().unwrap().omega = 0.0;
        let hybrid = train(&ds, &cfg).unwrap().0;
        assert_eq!(hybrid.student_tensors(), uda_only.student_tensors());

        let ssl_only = train(&ds, &quick("fixmatch", 4, 15)).unwrap().0;
        let mut cfg = quick("mcc+fixmatch", 4, 15);
        cfg.method.uda_config_mut().unwrap().omega = 0.0;
        let hybrid = train(&ds, &cfg).unwrap().0;
        assert_eq!(hybrid.student_tensors(), ssl_only.student_tensors());
    }

    #[test]
    fn supervised_loss_decreases_on_every_generator() {
        let sets = [
            moons(),
            gen_toy1d(0.25, 0.75, 100, 0).unwrap(),
            gen_support_scenario(SupportKind::A, 100, 100, 0).unwrap(),
            gen_support_scenario(SupportKind::C, 100, 100, 0).unwrap(),
        ];
        for ds in &sets {
            let (_, h) = train(ds, &quick("source_only", 0, 200)).unwrap();
            let (first, last) = (h.records[0].sup_loss, h.last().unwrap().sup_loss);
            assert!(last <= first, "{}: {first} -> {last}", ds.metadata.task);
        }
    }

    #[test]
    fn oracle_trains_on_revealed_target_labels() {
        let ds = moons();
        let mut cfg = quick("oracle", 0, 500);
        cfg.hidden_dims = vec![64, 64];
        cfg.optimizer.base_lr = 0.05;
        let (_, h) = train(&ds, &cfg).unwrap();
        let a = h.last().unwrap().transductive.acc;
        assert!(a > 0.9, "{a}");
    }

    #[test]
    fn importance_weighting_needs_density_oracle() {
        let err = train(&moons(), &quick("importance_weighting", 0, 5)).unwrap_err();
        assert!(matches!(err, TrainError::Domain(DomainError::MissingOracle)));
        let toy = gen_toy1d(0.25, 0.75, 20, 0).unwrap();
        let err = train(&toy, &quick("importance_weighting", 0, 5)).unwrap_err();
        assert!(err.to_string().contains("density ratio undefined"));
        let a = gen_support_scenario(SupportKind::A, 50, 50, 0).unwrap();
        train(&a, &quick("importance_weighting", 0, 5)).unwrap();
    }

    #[test]
    fn divergence_is_reported_with_step_and_term() {
        let mut cfg = quick("entropy_min", 0, 50);
        cfg.optimizer.base_lr = 1e200;
        let err = train(&moons(), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let mut ds = moons();
        ds.target_test.clear();
        let m = build_model(&ds, &quick("source_only", 0, 1)).unwrap();
        assert!(matches!(evaluate(&m, &ds, Split::Inductive), Err(TrainError::EmptySplit(_))));
    }

    fn routed_grads(model: &ModelBundle, x_l: &Tensor, y: &[usize], x_u: &Tensor, route: Route, sup_scale: f64) -> Vec<Tensor> {
        let mut s = Session::new(model);
        let xl = s.input(x_l);
        let logits = s.logits(xl).unwrap();
        let t = s.tape.constant(Tensor::one_hot(y, 2).unwrap());
        let ce = s.tape.cross_entropy(logits, t).unwrap();
        let sup = LossTerm::new("sup", ce).with_weight(sup_scale);
        let reg = crate::ssl::entropy_min(&mut s, x_u).unwrap().with_route(route);
        route_gradients(&mut s, &[sup, reg]).unwrap();
        s.student_grads()
    }

    #[test]
    fn routing_contracts() {
        let ds = moons();
        let m = build_model(&ds, &quick("entropy_min", 5, 1)).unwrap();
        let x_l = ds.source_x().select_rows(&[0, 1, 2, 3, 4, 5]);
        let y: Vec<usize> = (0..6).map(|i| ds.source_labeled[i].y).collect();
        let x_u = ds.target_x().select_rows(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let n_g = 2 * m.g.layers.len();

        // Supervised weight 0: h receives nothing from the regularizer.
        let g0 = routed_grads(&m, &x_l, &y, &x_u, Route::FeatureExtractorOnly, 0.0);
        assert!(g0[n_g..n_g + 2].iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        // Full model equals an unrouted single backward.
        let full = routed_grads(&m, &x_l, &y, &x_u, Route::FullModel, 1.0);
        let mut s = Session::new(&m);
        let xl = s.input(&x_l);
        let logits = s.logits(xl).unwrap();
        let t = s.tape.constant(Tensor::one_hot(&y, 2).unwrap());
        let ce = s.tape.cross_entropy(logits, t).unwrap();
        let ce = s.tape.scale(ce, 1.0);
        let reg = crate::ssl::entropy_min(&mut s, &x_u).unwrap();
        let r = s.tape.scale(reg.value, 1.0);
        let tot = s.tape.add(ce, r).unwrap();
        s.tape.backward(tot).unwrap();
        assert_eq!(full, s.student_grads());

        // Dual path: g-gradients equal a reference whose regularizer sees h as constants.
        let routed = routed_grads(&m, &x_l, &y, &x_u, Route::FeatureExtractorOnly, 1.0);
        let mut s = Session::new(&m);
        let xl = s.input(&x_l);
        let logits = s.logits(xl).unwrap();
        let t = s.tape.constant(Tensor::one_hot(&y, 2).unwrap());
        let ce = s.tape.cross_entropy(logits, t).unwrap();
        let ce = s.tape.scale(ce, 1.0);
        s.tape.backward(ce).unwrap();
        let xu = s.input(&x_u);
        let z = s.features(xu).unwrap();
        let l = s.classify_detached(z).unwrap();
        let e = entropy_rows(&mut s.tape, l, 1.0).unwrap();
        let e = s.tape.mean(e);
        let e = s.tape.scale(e, 1.0);
        s.tape.backward(e).unwrap();
        let reference = s.student_grads();
        assert_eq!(routed[..n_g], reference[..n_g]);
        assert_ne!(routed[n_g..], full[n_g..]);
    }
}
