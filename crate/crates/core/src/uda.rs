//! Domain-adaptation loss terms: adversarial alignment (DANN, CDAN), minimum
//! class confusion, and importance-weighted supervision.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::models::{GrlSchedule, ModelError, Session};
use crate::ssl::{entropy_rows, ramp_weight, LossTerm, SslConfig};

#[derive(Debug, Error)]
pub enum UdaError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid uda config: {0}")]
    InvalidConfig(String),
    #[error("importance weight {weight} at index {index} is negative")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("{0} weights for {1} labeled samples")]
    WeightCount(usize, usize),
    #[error("unknown method `{name}`; valid: {valid}")]
    UnknownMethod { name: String, valid: String },
}

impl From<AutodiffError> for UdaError {
    fn from(e: AutodiffError) -> Self {
        UdaError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UdaMethod {
    Dann,
    Cdan,
    Mcc,
    ImportanceWeighting,
}

impl UdaMethod {
    pub const ALL: [UdaMethod; 4] = [UdaMethod::Dann, UdaMethod::Cdan, UdaMethod::Mcc, UdaMethod::ImportanceWeighting];

    pub fn name(self) -> &'static str {
        match self {
            UdaMethod::Dann => "dann",
            UdaMethod::Cdan => "cdan",
            UdaMethod::Mcc => "mcc",
            UdaMethod::ImportanceWeighting => "importance_weighting",
        }
    }

    /// Importance weighting reweights the supervised loss instead of adding a term.
    pub fn replaces_supervised(self) -> bool {
        self == UdaMethod::ImportanceWeighting
    }
}

impl fmt::Display for UdaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UdaMethod {
    type Err = UdaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UdaMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UdaError::UnknownMethod {
                name: s.to_string(),
                valid: UdaMethod::ALL.map(|m| m.name()).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UdaConfig {
    pub method: UdaMethod,
    pub omega: f64,
    /// Linear warm-up of ω; 0 disables it (the reversal schedule already ramps).
    pub ramp_up_fraction: f64,
    pub grl: GrlSchedule,
    pub mcc_temperature: f64,
    pub combine_with_consistency: Option<SslConfig>,
}

impl UdaConfig {
    pub fn new(method: UdaMethod) -> Self {
        Self {
            method,
            omega: 1.0,
            ramp_up_fraction: 0.0,
            grl: GrlSchedule::default(),
            mcc_temperature: 2.5,
            combine_with_consistency: None,
        }
    }

    pub fn validate(&self) -> Result<(), UdaError> {
        if !(self.omega >= 0.0) {
            return Err(UdaError::InvalidConfig(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.mcc_temperature > 0.0) {
            return Err(UdaError::InvalidConfig(format!(
                "mcc temperature must be > 0, got {}",
                self.mcc_temperature
            )));
        }
        if !(self.grl.lambda_max >= 0.0) || !(self.ramp_up_fraction >= 0.0) {
            return Err(UdaError::InvalidConfig("lambda_max and ramp_up_fraction must be >= 0".into()));
        }
        if let Some(c) = &self.combine_with_consistency {
            c.validate().map_err(|e| UdaError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    pub fn effective_weight(&self, progress: f64) -> f64 {
        ramp_weight(self.omega, self.ramp_up_fraction, progress)
    }
}

/// Mean binary cross-entropy of discriminator outputs against source = 1,
/// target = 0.
fn domain_bce(tape: &mut Tape, d_s: Var, d_t: Var) -> Result<Var, AutodiffError> {
    let d = tape.concat(&[d_s, d_t], 0)?;
    let (ns, nt) = (tape.value(d_s).rows(), tape.value(d_t).rows());
    let mut labels = vec![1.0; ns];
    labels.resize(ns + nt, 0.0);
    let y = tape.constant(Tensor::new(vec![ns + nt, 1], labels)?);
    let bce = tape.binary_cross_entropy(d, y)?;
    Ok(tape.mean(bce))
}

pub fn dann_loss(s: &mut Session, z_s: Var, z_t: Var, lambda: f64) -> Result<LossTerm, UdaError> {
    let d_s = s.discriminate(z_s, None, lambda)?;
    let d_t = s.discriminate(z_t, None, lambda)?;
    Ok(LossTerm::new("dann", domain_bce(&mut s.tape, d_s, d_t)?))
}

/// Conditional adversarial loss on `flatten(z ⊗ p)`; the class
/// probabilities enter as constants.
pub fn cdan_loss(s: &mut Session, z_s: Var, p_s: Var, z_t: Var, p_t: Var, lambda: f64) -> Result<LossTerm, UdaError> {
    let k = s.model().num_classes();
    for p in [p_s, p_t] {
        if s.tape.value(p).cols() != k {
            return Err(AutodiffError::ShapeMismatch {
                op: "cdan_loss",
                lhs: s.tape.shape(p).to_vec(),
                rhs: vec![s.tape.value(p).rows(), k],
            }
            .into());
        }
    }
    let (ps, pt) = (s.tape.stop_gradient(p_s), s.tape.stop_gradient(p_t));
    let d_s = s.discriminate(z_s, Some(ps), lambda)?;
    let d_t = s.discriminate(z_t, Some(pt), lambda)?;
    Ok(LossTerm::new("cdan", domain_bce(&mut s.tape, d_s, d_t)?))
}

/// Minimum class confusion on target logits.
///
/// `Ŷ = softmax(logits/T)`; sample weights `W_i ∝ 1 + e^{−H(ŷ_i)}` (detached,
/// scaled to sum to B); `C = Ŷᵀ diag(W) Ŷ`, row-normalized to `C̃`; the loss
/// is `(1/K) Σ_{j≠j′} C̃_{jj′}`. A class with zero total mass contributes a
/// zero row.
pub fn mcc_loss(tape: &mut Tape, logits: Var, temperature: f64) -> Result<LossTerm, AutodiffError> {
    let (b, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    let y = tape.softmax(logits, temperature)?;
    let h = entropy_rows(tape, logits, temperature)?;
    let raw: Vec<f64> = tape.value(h).data().iter().map(|h| 1.0 + (-h).exp()).collect();
    let total: f64 = raw.iter().sum();
    let w = Tensor::new(vec![b, 1], raw.iter().map(|r| b as f64 * r / total).collect())?;
    let w = tape.constant(w);
    let wy = tape.mul(y, w)?;
    let yt = tape.transpose(y)?;
    let c = tape.matmul(yt, wy)?;
    let rs = tape.sum_axis(c, 1)?;
    let rs = tape.reshape(rs, vec![k, 1])?;
    let guard = tape.value(rs).map(|v| if v == 0.0 { 1.0 } else { 0.0 });
    let guard = tape.constant(guard);
    let denom = tape.add(rs, guard)?;
    let ct = tape.div(c, denom)?;
    let mut off = Tensor::full(&[k, k], 1.0);
    for j in 0..k {
        off.data_mut()[j * k + j] = 0.0;
    }
    let off = tape.constant(off);
    let masked = tape.mul(ct, off)?;
    let s = tape.sum(masked);
    Ok(LossTerm::new("mcc", tape.scale(s, 1.0 / k as f64)))
}

/// `(1/n) Σ_i w_i · CE(logits_i, targets_i)`.
pub fn importance_weighted_sup(tape: &mut Tape, logits: Var, targets: Var, weights: &[f64]) -> Result<LossTerm, UdaError> {
    let n = tape.value(logits).rows();
    if weights.len() != n {
        return Err(UdaError::WeightCount(weights.len(), n));
    }
    if let Some((index, &weight)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(UdaError::NegativeWeight { index, weight });
    }
    let ce = tape.cross_entropy_rows(logits, targets)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let wce = tape.mul(ce, w)?;
    Ok(LossTerm::new("iw_sup", tape.mean(wce)))
}

/// Emits both terms unchanged; the trainer sums `ω_i · value_i` over all terms.
pub fn combine_uda_ssl(uda_term: LossTerm, ssl_terms: Vec<LossTerm>) -> Vec<LossTerm> {
    let mut out = vec![uda_term];
    out.extend(ssl_terms);
    out
}

/// Source and target forward results shared by the UDA terms.
#[derive(Clone, Copy, Debug)]
pub struct DomainForward {
    pub z_s: Var,
    pub z_t: Var,
    pub logits_s: Var,
    pub logits_t: Var,
}

/// The additive UDA term of `cfg` (none for importance weighting).
pub fn uda_term(s: &mut Session, cfg: &UdaConfig, fwd: DomainForward, progress: f64) -> Result<Option<LossTerm>, UdaError> {
    let lambda = cfg.grl.lambda(progress);
    let term = match cfg.method {
        UdaMethod::Dann => dann_loss(s, fwd.z_s, fwd.z_t, lambda)?,
        UdaMethod::Cdan => {
            let p_s = s.tape.softmax(fwd.logits_s, 1.0)?;
            let p_t = s.tape.softmax(fwd.logits_t, 1.0)?;
            cdan_loss(s, fwd.z_s, p_s, fwd.z_t, p_t, lambda)?
        }
        UdaMethod::Mcc => mcc_loss(&mut s.tape, fwd.logits_t, cfg.mcc_temperature)?,
        UdaMethod::ImportanceWeighting => return Ok(None),
    };
    Ok(Some(term.with_weight(cfg.effective_weight(progress))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{OptimizerConfig, SgdMomentum};
    use crate::models::{init_model, DiscriminatorInput, ModelBundle, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn with_disc(k: usize, kind: DiscriminatorInput) -> ModelBundle {
        let mut m = init_model(&ModelConfig::new(2, k), 3).unwrap();
        m.attach_discriminator(kind, 4);
        m
    }

    /// Zeroes the last discriminator layer so it outputs sigmoid(0) = 0.5.
    fn neutral(mut m: ModelBundle) -> ModelBundle {
        let last = m.discriminator.as_mut().unwrap().net.layers.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
        m
    }

    #[test]
    fn neutral_discriminator_gives_ln2() {
        for kind in [DiscriminatorInput::Features, DiscriminatorInput::Conditioned] {
            let m = neutral(with_disc(3, kind));
            let mut s = Session::new(&m);
            let zs = s.tape.constant(rand_tensor(5, 16, 1));
            let zt = s.tape.constant(rand_tensor(7, 16, 2));
            let t = match kind {
                DiscriminatorInput::Features => dann_loss(&mut s, zs, zt, 1.0).unwrap(),
                DiscriminatorInput::Conditioned => {
                    let ps = s.tape.constant(Tensor::full(&[5, 3], 1.0 / 3.0));
                    let pt = s.tape.constant(Tensor::full(&[7, 3], 1.0 / 3.0));
                    cdan_loss(&mut s, zs, ps, zt, pt, 1.0).unwrap()
                }
            };
            assert!((s.tape.item(t.value) - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_blocks_g_and_h() {
        for kind in [DiscriminatorInput::Features, DiscriminatorInput::Conditioned] {
            let m = with_disc(2, kind);
            let mut s = Session::new(&m);
            let xs = s.input(&rand_tensor(6, 2, 3));
            let xt = s.input(&rand_tensor(6, 2, 4));
            let (zs, zt) = (s.features(xs).unwrap(), s.features(xt).unwrap());
            let (ls, lt) = (s.classify(zs).unwrap(), s.classify(zt).unwrap());
            let fwd = DomainForward {
                z_s: zs,
                z_t: zt,
                logits_s: ls,
                logits_t: lt,
            };
            let method = if kind == DiscriminatorInput::Features { UdaMethod::Dann } else { UdaMethod::Cdan };
            let t = uda_term(&mut s, &UdaConfig::new(method), fwd, 0.0).unwrap().unwrap();
            s.tape.backward(t.value).unwrap();
            let mut gh = s.feature_vars();
            gh.extend(s.head_vars());
            for v in gh {
                assert!(s.tape.grad(v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
            }
        }
    }

    #[test]
    fn cdan_with_uniform_predictions_is_dann_on_replicated_features() {
        let k = 4;
        let m = with_disc(k, DiscriminatorInput::Conditioned);
        let (zs, zt) = (rand_tensor(5, 16, 5), rand_tensor(6, 16, 6));
        let mut s = Session::new(&m);
        let (a, b) = (s.tape.constant(zs.clone()), s.tape.constant(zt.clone()));
        let ps = s.tape.constant(Tensor::full(&[5, k], 0.25));
        let pt = s.tape.constant(Tensor::full(&[6, k], 0.25));
        let cdan = cdan_loss(&mut s, a, ps, b, pt, 0.5).unwrap();
        let replicate = |z: &Tensor| {
            let data = (0..z.rows())
                .flat_map(|i| z.row(i).iter().flat_map(|v| std::iter::repeat_n(v / k as f64, k)).collect::<Vec<_>>())
                .collect();
            Tensor::new(vec![z.rows(), 16 * k], data).unwrap()
        };
        let mut r = Session::new(&m);
        let (a, b) = (r.tape.constant(replicate(&zs)), r.tape.constant(replicate(&zt)));
        let dann = dann_loss(&mut r, a, b, 0.5).unwrap();
        assert!((s.tape.item(cdan.value) - r.tape.item(dann.value)).abs() <= 1e-12);

        let bad = s.tape.constant(Tensor::full(&[5, 3], 1.0 / 3.0));
        assert!(cdan_loss(&mut s, a, bad, b, pt, 0.5).is_err());
    }

    #[test]
    fn dann_is_symmetric_for_identical_batches() {
        let m = with_disc(2, DiscriminatorInput::Features);
        let z = rand_tensor(8, 16, 7);
        let mut s = Session::new(&m);
        let (a, b) = (s.tape.constant(z.clone()), s.tape.constant(z));
        let l1 = dann_loss(&mut s, a, b, 1.0).unwrap();
        let l2 = dann_loss(&mut s, b, a, 1.0).unwrap();
        assert!((s.tape.item(l1.value) - s.tape.item(l2.value)).abs() < 1e-15);
    }

    #[test]
    fn discriminator_cannot_separate_identical_batches() {
        let mut m = with_disc(2, DiscriminatorInput::Features);
        let z = rand_tensor(32, 16, 8);
        let mut opt = SgdMomentum::new(OptimizerConfig::default(), m.student_tensors());
        let mut last = 0.0;
        for _ in 0..300 {
            let mut s = Session::new(&m);
            let (a, b) = (s.tape.constant(z.clone()), s.tape.constant(z.clone()));
            let l = dann_loss(&mut s, a, b, 1.0).unwrap();
            last = s.tape.item(l.value);
            s.tape.backward(l.value).unwrap();
            let grads = s.student_grads();
            let groups = m.param_groups();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut m.student_params_mut(), &grefs, &groups).unwrap();
        }
        let ln2 = std::f64::consts::LN_2;
        assert!(last >= ln2 - 1e-12 && last - ln2 < 0.05, "{last}");
    }

    fn mcc_value(logits: &Tensor, t: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let term = mcc_loss(&mut tape, l, t).unwrap();
        tape.item(term.value)
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc_value(&Tensor::zeros(&[6, 2]), 1.0), 0.5);
        let onehot = Tensor::from_rows(&[[3000.0, -3000.0]; 5]).unwrap();
        assert_eq!(mcc_value(&onehot, 2.5), 0.0);
        let l = rand_tensor(9, 3, 9).map(|v| 4.0 * v);
        let perm: Vec<usize> = vec![4, 2, 8, 0, 1, 7, 3, 6, 5];
        assert!((mcc_value(&l, 2.5) - mcc_value(&l.select_rows(&perm), 2.5)).abs() < 1e-14);
    }

    #[test]
    fn importance_weights_of_one_match_plain_loss() {
        let mut t = Tape::new();
        let z = t.param(rand_tensor(5, 3, 10));
        let y = t.constant(Tensor::one_hot(&[0, 2, 1, 1, 0], 3).unwrap());
        let plain = t.cross_entropy(z, y).unwrap();
        let iw = importance_weighted_sup(&mut t, z, y, &[1.0; 5]).unwrap();
        assert_eq!(t.item(plain).to_bits(), t.item(iw.value).to_bits());
        assert!(matches!(
            importance_weighted_sup(&mut t, z, y, &[1.0, -0.5, 1.0, 1.0, 1.0]),
            Err(UdaError::NegativeWeight { index: 1, .. })
        ));
        assert!(importance_weighted_sup(&mut t, z, y, &[1.0]).is_err());
    }

    #[test]
    fn zero_weight_sample_only_counts_in_normalizer() {
        let mut t = Tape::new();
        let z = t.constant(rand_tensor(4, 2, 11));
        let y = t.constant(Tensor::one_hot(&[0, 1, 1, 0], 2).unwrap());
        let full = importance_weighted_sup(&mut t, z, y, &[1.0, 2.0, 0.0, 0.5]).unwrap();
        let ce = t.cross_entropy_rows(z, y).unwrap();
        let c = t.value(ce).data().to_vec();
        let expected = (c[0] + 2.0 * c[1] + 0.5 * c[3]) / 4.0;
        assert!((t.item(full.value) - expected).abs() < 1e-15);
    }

    #[test]
    fn combine_keeps_both_terms() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(2.0));
        let out = combine_uda_ssl(LossTerm::new("mcc", a).with_weight(0.3), vec![LossTerm::new("fixmatch", b)]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].weight, 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mcc_is_bounded(seed in 0u64..10_000, k in 2usize..5, b in 1usize..12, scale in 0.1f64..20.0, t in 0.2f64..5.0) {
            let l = rand_tensor(b, k, seed).map(|v| v * scale);
            let v = mcc_value(&l, t);
            prop_assert!(v >= -1e-15 && v <= (k as f64 - 1.0) / k as f64 + 1e-12, "{}", v);
        }

        #[test]
        fn mcc_sharpens_to_zero(seed in 0u64..10_000, k in 2usize..4) {
            // Every class is the unique argmax of some row.
            let mut l = rand_tensor(3 * k, k, seed);
            for i in 0..3 * k {
                l.data_mut()[i * k + i % k] += 2.0;
            }
            let margin = (0..3 * k)
                .map(|i| {
                    let r = l.row(i);
                    let top = r[i % k];
                    top - r.iter().enumerate().filter(|(j, _)| *j != i % k).map(|(_, v)| *v).fold(f64::MIN, f64::max)
                })
                .fold(f64::MAX, f64::min);
            let mut ts = vec![5.0, 2.5, 1.0, 0.5, 0.25, 0.1, 0.05, 0.02];
            ts.push((margin / 20.0).min(0.01));
            let vals: Vec<f64> = ts.iter().map(|&t| mcc_value(&l, t)).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", vals);
            }
            prop_assert!(vals[vals.len() - 1] < 1e-3);
        }
    }
}
