//! Feature extractor `g`, linear classifier `h`, domain discriminator and
//! EMA teacher, plus the tape bindings used to run them.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamGroup, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("teacher requested but the model has none")]
    MissingTeacher,
    #[error("discriminator requested but the model has none")]
    MissingDiscriminator,
    #[error("discriminator expects {expected} inputs, got {got}")]
    DiscriminatorInput { expected: usize, got: usize },
    #[error("ema alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub discriminator_hidden: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            num_classes,
            discriminator_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims_ok = self.input_dim > 0
            && self.feature_dim > 0
            && self.discriminator_hidden > 0
            && self.hidden_dims.iter().all(|&d| d > 0);
        if !dims_ok {
            return Err(ModelError::InvalidConfig(format!("all dimensions must be positive: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform in ±1/sqrt(fan_in), zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of linear layers with ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }
}

/// What the discriminator consumes: raw features, or the flattened outer
/// product of features and class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscriminatorInput {
    Features,
    Conditioned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input: DiscriminatorInput,
    pub net: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub g: Mlp,
    pub h: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub g: Mlp,
    pub h: Linear,
    pub discriminator: Option<Discriminator>,
    pub teacher: Option<Teacher>,
}

/// Deterministic initialization of `g` and `h`; no discriminator or teacher.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![config.input_dim];
    dims.extend(&config.hidden_dims);
    dims.push(config.feature_dim);
    let g = Mlp::init(&dims, &mut rng);
    let h = Linear::init(config.feature_dim, config.num_classes, &mut rng);
    Ok(ModelBundle {
        config: config.clone(),
        g,
        h,
        discriminator: None,
        teacher: None,
    })
}

/// Gradient-reversal coefficient ramp `λ(p) = λ_max (2 / (1 + e^{-10p}) − 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlSchedule {
    pub lambda_max: f64,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self { lambda_max: 1.0 }
    }
}

impl GrlSchedule {
    pub fn lambda(&self, p: f64) -> f64 {
        self.lambda_max * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
    }
}

impl ModelBundle {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn discriminator_input_dim(&self, kind: DiscriminatorInput) -> usize {
        match kind {
            DiscriminatorInput::Features => self.config.feature_dim,
            DiscriminatorInput::Conditioned => self.config.feature_dim * self.config.num_classes,
        }
    }

    /// Adds a two-layer discriminator with one output unit.
    pub fn attach_discriminator(&mut self, input: DiscriminatorInput, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c_0000);
        let dims = [
            self.discriminator_input_dim(input),
            self.config.discriminator_hidden,
            1,
        ];
        self.discriminator = Some(Discriminator {
            input,
            net: Mlp::init(&dims, &mut rng),
        });
    }

    /// Adds (or resets) a teacher equal to the current student.
    pub fn attach_teacher(&mut self) {
        self.teacher = Some(Teacher {
            g: self.g.clone(),
            h: self.h.clone(),
        });
    }

    fn student_params(&self) -> Vec<(String, &Tensor, ParamGroup)> {
        let mut out = Vec::new();
        push_mlp(&mut out, "g", &self.g, ParamGroup::Backbone);
        push_linear(&mut out, "h", &self.h, ParamGroup::Head);
        if let Some(d) = &self.discriminator {
            push_mlp(&mut out, "d", &d.net, ParamGroup::Head);
        }
        out
    }

    /// Every named parameter, student first, then teacher.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .student_params()
            .into_iter()
            .map(|(n, t, _)| (n, t))
            .collect();
        if let Some(t) = &self.teacher {
            let mut tp = Vec::new();
            push_mlp(&mut tp, "teacher.g", &t.g, ParamGroup::Backbone);
            push_linear(&mut tp, "teacher.h", &t.h, ParamGroup::Head);
            out.extend(tp.into_iter().map(|(n, t, _)| (n, t)));
        }
        out
    }

    /// Trainable tensors in canonical order: g layers, h, discriminator layers.
    pub fn student_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.g.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.h.weight);
        out.push(&mut self.h.bias);
        if let Some(d) = &mut self.discriminator {
            for l in &mut d.net.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn student_tensors(&self) -> Vec<&Tensor> {
        self.student_params().into_iter().map(|(_, t, _)| t).collect()
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.student_params().into_iter().map(|(_, _, g)| g).collect()
    }

    /// `teacher ← α·teacher + (1−α)·student` over g and h.
    pub fn ema_update(&mut self, alpha: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ModelError::InvalidAlpha(alpha));
        }
        let teacher = self.teacher.as_mut().ok_or(ModelError::MissingTeacher)?;
        let pairs = teacher
            .g
            .layers
            .iter_mut()
            .zip(&self.g.layers)
            .chain(std::iter::once((&mut teacher.h, &self.h)));
        for (t, s) in pairs {
            for (tv, sv) in [(&mut t.weight, &s.weight), (&mut t.bias, &s.bias)] {
                for (a, &b) in tv.data_mut().iter_mut().zip(sv.data()) {
                    *a = alpha * *a + (1.0 - alpha) * b;
                }
            }
        }
        Ok(())
    }

    /// Class probabilities for every row of `x`.
    pub fn predict(&self, x: &Tensor, use_teacher: bool) -> Result<Tensor, ModelError> {
        let mut s = Session::new(self);
        let xv = s.tape.constant(x.clone());
        let p = if use_teacher {
            s.teacher_probs(xv)?
        } else {
            s.probs(xv)?
        };
        Ok(s.tape.value(p).clone())
    }

    /// Feature-extractor output `g(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut s = Session::new(self);
        let xv = s.tape.constant(x.clone());
        let z = s.features(xv)?;
        Ok(s.tape.value(z).clone())
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.predict(x, false)?.argmax_rows())
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor, ParamGroup)>, prefix: &str, l: &'a Linear, g: ParamGroup) {
    out.push((format!("{prefix}.weight"), &l.weight, g));
    out.push((format!("{prefix}.bias"), &l.bias, g));
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor, ParamGroup)>, prefix: &str, m: &'a Mlp, g: ParamGroup) {
    for (i, l) in m.layers.iter().enumerate() {
        push_linear(out, &format!("{prefix}.{i}"), l, g);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

fn bind_linear(tape: &mut Tape, l: &Linear) -> BoundLinear {
    BoundLinear {
        weight: tape.param(l.weight.clone()),
        bias: tape.param(l.bias.clone()),
    }
}

fn run_linear(tape: &mut Tape, l: &BoundLinear, x: Var) -> Result<Var, AutodiffError> {
    let z = tape.matmul(x, l.weight)?;
    tape.add(z, l.bias)
}

fn run_mlp(tape: &mut Tape, layers: &[BoundLinear], x: Var) -> Result<Var, AutodiffError> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = run_linear(tape, l, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// One forward/backward pass of a [`ModelBundle`] on a fresh tape.
///
/// Student parameters are bound as gradient-carrying leaves at construction;
/// the teacher is bound lazily on first use and its outputs are always
/// passed through stop-gradient.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m ModelBundle,
    g: Vec<BoundLinear>,
    h: BoundLinear,
    d: Option<Vec<BoundLinear>>,
    teacher: Option<(Vec<BoundLinear>, BoundLinear)>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m ModelBundle) -> Self {
        let mut tape = Tape::new();
        let g = model.g.layers.iter().map(|l| bind_linear(&mut tape, l)).collect();
        let h = bind_linear(&mut tape, &model.h);
        let d = model
            .discriminator
            .as_ref()
            .map(|d| d.net.layers.iter().map(|l| bind_linear(&mut tape, l)).collect());
        Self {
            tape,
            model,
            g,
            h,
            d,
            teacher: None,
        }
    }

    pub fn model(&self) -> &'m ModelBundle {
        self.model
    }

    pub fn input(&mut self, x: &Tensor) -> Var {
        self.tape.constant(x.clone())
    }

    pub fn features(&mut self, x: Var) -> Result<Var, AutodiffError> {
        run_mlp(&mut self.tape, &self.g, x)
    }

    /// Classifier logits `h(z)`.
    pub fn classify(&mut self, z: Var) -> Result<Var, AutodiffError> {
        run_linear(&mut self.tape, &self.h, z)
    }

    /// `h(z)` with `h`'s parameters entering as constants: gradients reach `z`
    /// but never `h`.
    pub fn classify_detached(&mut self, z: Var) -> Result<Var, AutodiffError> {
        let h = BoundLinear {
            weight: self.tape.constant(self.model.h.weight.clone()),
            bias: self.tape.constant(self.model.h.bias.clone()),
        };
        run_linear(&mut self.tape, &h, z)
    }

    pub fn logits(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let z = self.features(x)?;
        self.classify(z)
    }

    pub fn probs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let l = self.logits(x)?;
        self.tape.softmax(l, 1.0)
    }

    /// Teacher class probabilities, detached from every gradient path.
    pub fn teacher_probs(&mut self, x: Var) -> Result<Var, ModelError> {
        if self.teacher.is_none() {
            let t = self.model.teacher.as_ref().ok_or(ModelError::MissingTeacher)?;
            let g = t.g.layers.iter().map(|l| bind_linear(&mut self.tape, l)).collect();
            let h = bind_linear(&mut self.tape, &t.h);
            self.teacher = Some((g, h));
        }
        let (g, h) = self.teacher.as_ref().expect("bound above");
        let z = run_mlp(&mut self.tape, g, x)?;
        let l = run_linear(&mut self.tape, h, z)?;
        let p = self.tape.softmax(l, 1.0)?;
        Ok(self.tape.stop_gradient(p))
    }

    /// Probability that each row of `z` comes from the source domain.
    ///
    /// The input (z, or flatten(z ⊗ p) with conditioning) passes through a
    /// gradient-reversal layer with coefficient `lambda` before the
    /// discriminator.
    pub fn discriminate(&mut self, z: Var, conditioning: Option<Var>, lambda: f64) -> Result<Var, ModelError> {
        let d = self.d.clone().ok_or(ModelError::MissingDiscriminator)?;
        let input = match conditioning {
            Some(p) => self.tape.outer(z, p)?,
            None => z,
        };
        let expected = self.model.discriminator.as_ref().expect("bound with d").net.input_dim();
        let got = self.tape.value(input).cols();
        if got != expected {
            return Err(ModelError::DiscriminatorInput { expected, got });
        }
        let r = self.tape.grad_reverse(input, lambda);
        let logit = run_mlp(&mut self.tape, &d, r)?;
        Ok(self.tape.sigmoid(logit))
    }

    /// Leaves of the classifier `h`.
    pub fn head_vars(&self) -> [Var; 2] {
        [self.h.weight, self.h.bias]
    }

    pub fn feature_vars(&self) -> Vec<Var> {
        self.g.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn teacher_vars(&self) -> Vec<Var> {
        match &self.teacher {
            Some((g, h)) => g.iter().chain(std::iter::once(h)).flat_map(|l| [l.weight, l.bias]).collect(),
            None => Vec::new(),
        }
    }

    /// Student leaves in the order of [`ModelBundle::student_params_mut`].
    pub fn student_vars(&self) -> Vec<Var> {
        let mut v = self.feature_vars();
        v.extend(self.head_vars());
        if let Some(d) = &self.d {
            v.extend(d.iter().flat_map(|l| [l.weight, l.bias]));
        }
        v
    }

    /// Gradients of the student leaves (zero where nothing arrived).
    pub fn student_grads(&self) -> Vec<Tensor> {
        self.student_vars()
            .into_iter()
            .map(|v| {
                self.tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)))
            })
            .collect()
    }
}

const CHECKPOINT_MAGIC: &str = "shiftbench-checkpoint 1";

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Textual checkpoint: a config line, optional discriminator kind, then one
/// `param <name> <shape> <values...>` record per tensor. Floats use Rust's
/// shortest round-trip formatting, so save → load → save is byte-identical.
pub fn checkpoint_to_string(model: &ModelBundle) -> String {
    let c = &model.config;
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(
        s,
        "config input_dim={} hidden_dims={} feature_dim={} num_classes={} discriminator_hidden={}",
        c.input_dim,
        join_usize(&c.hidden_dims),
        c.feature_dim,
        c.num_classes,
        c.discriminator_hidden
    )
    .unwrap();
    if let Some(d) = &model.discriminator {
        let kind = match d.input {
            DiscriminatorInput::Features => "features",
            DiscriminatorInput::Conditioned => "conditioned",
        };
        writeln!(s, "discriminator {kind}").unwrap();
    }
    for (name, t) in model.named_params() {
        write!(s, "param {name} {}", join_usize(t.shape())).unwrap();
        for v in t.data() {
            write!(s, " {v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelBundle, ModelError> {
    let err = |line: usize, reason: String| ModelError::Checkpoint { line, reason };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(err(1, format!("expected header `{CHECKPOINT_MAGIC}`"))),
    }
    let (ln, cfg_line) = lines.next().ok_or_else(|| err(2, "missing config line".into()))?;
    let mut config = ModelConfig::new(1, 2);
    let mut fields = cfg_line.split_whitespace();
    if fields.next() != Some("config") {
        return Err(err(ln, "expected `config`".into()));
    }
    for kv in fields {
        let (k, v) = kv.split_once('=').ok_or_else(|| err(ln, format!("bad field `{kv}`")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| err(ln, format!("{k}: {e}")));
        match k {
            "input_dim" => config.input_dim = num(v)?,
            "feature_dim" => config.feature_dim = num(v)?,
            "num_classes" => config.num_classes = num(v)?,
            "discriminator_hidden" => config.discriminator_hidden = num(v)?,
            "hidden_dims" => {
                config.hidden_dims = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(num).collect::<Result<_, _>>()?
                }
            }
            _ => return Err(err(ln, format!("unknown config key `{k}`"))),
        }
    }
    config.validate()?;
    let mut model = init_model(&config, 0)?;
    let mut params: Vec<(usize, String, Tensor)> = Vec::new();
    for (ln, line) in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            None => continue,
            Some("discriminator") => {
                let kind = match parts.next() {
                    Some("features") => DiscriminatorInput::Features,
                    Some("conditioned") => DiscriminatorInput::Conditioned,
                    other => return Err(err(ln, format!("unknown discriminator kind {other:?}"))),
                };
                model.attach_discriminator(kind, 0);
            }
            Some("param") => {
                let name = parts.next().ok_or_else(|| err(ln, "missing name".into()))?.to_string();
                let shape = parts
                    .next()
                    .ok_or_else(|| err(ln, "missing shape".into()))?
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|e| err(ln, e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?;
                let values = parts
                    .map(|v| v.parse::<f64>().map_err(|e| err(ln, format!("value `{v}`: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let t = Tensor::new(shape, values).map_err(|e| err(ln, e.to_string()))?;
                params.push((ln, name, t));
            }
            Some(other) => return Err(err(ln, format!("unknown record `{other}`"))),
        }
    }
    if params.iter().any(|(_, n, _)| n.starts_with("teacher.")) {
        model.attach_teacher();
    }
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != params.len() {
        return Err(err(0, format!("expected {} parameters, found {}", expected.len(), params.len())));
    }
    for ((ln, name, t), (en, es)) in params.iter().zip(&expected) {
        if name != en || t.shape() != es.as_slice() {
            return Err(err(*ln, format!("expected {en} {es:?}, found {name} {:?}", t.shape())));
        }
    }
    let mut values = params.into_iter().map(|(_, _, t)| t);
    for slot in model.student_params_mut() {
        *slot = values.next().expect("count checked");
    }
    if let Some(t) = &mut model.teacher {
        for l in t.g.layers.iter_mut().chain(std::iter::once(&mut t.h)) {
            l.weight = values.next().expect("count checked");
            l.bias = values.next().expect("count checked");
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelBundle, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle, ModelError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
