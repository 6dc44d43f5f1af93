//! Experiment configuration: a line-based `key = value` grammar with
//! `[task]`, `[methods]`, `[train]` and `[output]` sections.
//!
//! `[task]` may repeat; every other section appears at most once. `#` and `;`
//! start comment lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use shiftbench_core::autodiff::OptimizerConfig;
use shiftbench_core::domains::{
    gen_support_scenario, gen_toy1d, gen_two_moons_shift, load_csv, AugmentationSpec, CsvSchema, DomainDataset,
    DomainError, SupportKind,
};
use shiftbench_core::ssl::{Route, SslConfig, SslMethod};
use shiftbench_core::trainer::{MethodSpec, TrainConfig, TrainError};
use shiftbench_core::uda::{UdaConfig, UdaMethod};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    TwoMoons {
        n_src: usize,
        n_tgt: usize,
        rotation_deg: f64,
        translation: [f64; 2],
        noise_sigma: f64,
    },
    Toy1d {
        c: f64,
        d: f64,
        n_target: usize,
    },
    Support {
        kind: SupportKind,
        n_src: usize,
        n_tgt: usize,
    },
    Csv {
        path: PathBuf,
        num_classes: usize,
    },
}

impl Generator {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Generator::TwoMoons { .. } => "two_moons",
            Generator::Toy1d { .. } => "toy1d",
            Generator::Support { .. } => "support",
            Generator::Csv { .. } => "csv",
        }
    }

    fn default_for(kind: &str) -> Option<Self> {
        Some(match kind {
            "two_moons" => Generator::TwoMoons {
                n_src: 200,
                n_tgt: 200,
                rotation_deg: 30.0,
                translation: [0.0, 0.0],
                noise_sigma: 0.1,
            },
            "toy1d" => Generator::Toy1d {
                c: 0.25,
                d: 0.75,
                n_target: 500,
            },
            "support" => Generator::Support {
                kind: SupportKind::A,
                n_src: 200,
                n_tgt: 200,
            },
            "csv" => Generator::Csv {
                path: PathBuf::new(),
                num_classes: 2,
            },
            _ => return None,
        })
    }

    fn default_name(&self) -> String {
        match self {
            Generator::TwoMoons { rotation_deg, .. } => format!("two_moons_rot{rotation_deg}"),
            Generator::Toy1d { c, d, .. } => format!("toy1d_c{c}_d{d}"),
            Generator::Support { kind, .. } => format!("support_{kind}"),
            Generator::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub generator: Generator,
    pub augmentation: AugmentationSpec,
}

impl TaskSpec {
    pub fn new(generator: Generator) -> Self {
        Self {
            name: generator.default_name(),
            generator,
            augmentation: AugmentationSpec::default(),
        }
    }

    /// Draws the dataset; synthetic generators use `seed`, CSV files ignore it.
    pub fn build(&self, seed: u64) -> Result<DomainDataset, DomainError> {
        let mut ds = match &self.generator {
            Generator::TwoMoons {
                n_src,
                n_tgt,
                rotation_deg,
                translation,
                noise_sigma,
            } => gen_two_moons_shift(*n_src, *n_tgt, *rotation_deg, *translation, *noise_sigma, seed)?,
            Generator::Toy1d { c, d, n_target } => gen_toy1d(*c, *d, *n_target, seed)?,
            Generator::Support { kind, n_src, n_tgt } => gen_support_scenario(*kind, *n_src, *n_tgt, seed)?,
            Generator::Csv { path, num_classes } => load_csv(
                path,
                &CsvSchema {
                    num_classes: *num_classes,
                    task: self.name.clone(),
                },
            )?,
        };
        ds.metadata.task = self.name.clone();
        Ok(ds)
    }
}

/// Hyperparameters shared by every method in the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodParams {
    /// `method` is a placeholder; only the numeric fields are used.
    pub ssl: SslConfig,
    pub uda: UdaConfig,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            ssl: SslConfig::new(SslMethod::EntropyMin),
            uda: UdaConfig::new(UdaMethod::Dann),
        }
    }
}

/// A `[methods] list` entry: a method name with an optional `:route` suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodEntry {
    pub label: String,
    pub method: MethodSpec,
    pub route: Option<Route>,
}

impl MethodParams {
    pub fn resolve(&self, label: &str) -> Result<MethodEntry, ConfigError> {
        let (name, route) = match label.split_once(':') {
            Some((n, r)) => (
                n,
                Some(r.parse::<Route>().map_err(|_| {
                    ConfigError::Invalid(format!(
                        "unknown loss route `{r}` in `{label}`; valid: full_model, feature_extractor_only"
                    ))
                })?),
            ),
            None => (label, None),
        };
        let mut method: MethodSpec = name.parse()?;
        let apply_ssl = |c: &mut SslConfig, p: &SslConfig| {
            *c = SslConfig {
                method: c.method,
                ..p.clone()
            };
        };
        match &mut method {
            MethodSpec::Ssl(c) => apply_ssl(c, &self.ssl),
            MethodSpec::Uda(u) => {
                let inner = u.combine_with_consistency.take().map(|mut c| {
                    apply_ssl(&mut c, &self.ssl);
                    c
                });
                *u = UdaConfig {
                    method: u.method,
                    combine_with_consistency: inner,
                    ..self.uda.clone()
                };
            }
            _ => {}
        }
        method.validate()?;
        Ok(MethodEntry {
            label: label.to_string(),
            method,
            route,
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.ssl.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.uda.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub eval_every: usize,
    pub loss_route: Route,
    pub optimizer: OptimizerConfig,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub discriminator_hidden: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::new(MethodSpec::SourceOnly, 0);
        Self {
            seeds: vec![0, 1, 2],
            total_steps: t.total_steps,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            eval_every: t.eval_every,
            loss_route: t.loss_route,
            optimizer: t.optimizer,
            hidden_dims: t.hidden_dims,
            feature_dim: t.feature_dim,
            discriminator_hidden: t.discriminator_hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Txt,
}

impl FromStr for OutputFormat {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "txt" => Ok(OutputFormat::Txt),
            _ => Err(ConfigError::Invalid(format!("unknown format `{s}`; valid: csv, txt"))),
        }
    }
}

impl OutputFormat {
    pub fn name(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Txt => "txt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSettings {
    /// `None` defers to `--out`, then `SHIFTBENCH_OUT`.
    pub dir: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: None,
            format: OutputFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<String>,
    pub params: MethodParams,
    pub train: TrainSettings,
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn new(tasks: Vec<TaskSpec>, methods: Vec<String>) -> Self {
        Self {
            tasks,
            methods,
            params: MethodParams::default(),
            train: TrainSettings::default(),
            output: OutputSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tasks.is_empty() {
            return Err(ConfigError::Invalid("at least one [task] section is required".into()));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("at least one method is required".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid(format!("duplicate task name `{}`", w[0])));
        }
        for t in &self.tasks {
            t.augmentation.validate()?;
            if let Generator::Csv { path, .. } = &t.generator {
                if path.as_os_str().is_empty() {
                    return Err(ConfigError::Invalid(format!("task `{}`: csv generator needs `path`", t.name)));
                }
            }
        }
        self.params.validate()?;
        for m in &self.methods {
            self.params.resolve(m)?;
        }
        self.train_config(&self.methods[0], 0)?.validate()?;
        Ok(())
    }

    pub fn method_entries(&self) -> Result<Vec<MethodEntry>, ConfigError> {
        self.methods.iter().map(|m| self.params.resolve(m)).collect()
    }

    pub fn train_config(&self, method: &str, seed: u64) -> Result<TrainConfig, ConfigError> {
        let entry = self.params.resolve(method)?;
        let t = &self.train;
        let mut c = TrainConfig::new(entry.method, seed);
        c.total_steps = t.total_steps;
        c.batch_labeled = t.batch_labeled;
        c.batch_unlabeled = t.batch_unlabeled;
        c.eval_every = t.eval_every;
        c.loss_route = entry.route.unwrap_or(t.loss_route);
        c.optimizer = t.optimizer.clone();
        c.hidden_dims = t.hidden_dims.clone();
        c.feature_dim = t.feature_dim;
        c.discriminator_hidden = t.discriminator_hidden;
        Ok(c)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            s.push_str("[task]\n");
            let _ = writeln!(s, "name = {}", t.name);
            let _ = writeln!(s, "generator = {}", t.generator.kind_name());
            match &t.generator {
                Generator::TwoMoons {
                    n_src,
                    n_tgt,
                    rotation_deg,
                    translation,
                    noise_sigma,
                } => {
                    let _ = writeln!(s, "n_src = {n_src}\nn_tgt = {n_tgt}\nrotation_deg = {rotation_deg}");
                    let _ = writeln!(s, "translation = {}, {}\nnoise_sigma = {noise_sigma}", translation[0], translation[1]);
                }
                Generator::Toy1d { c, d, n_target } => {
                    let _ = writeln!(s, "c = {c}\nd = {d}\nn_target = {n_target}");
                }
                Generator::Support { kind, n_src, n_tgt } => {
                    let _ = writeln!(s, "kind = {kind}\nn_src = {n_src}\nn_tgt = {n_tgt}");
                }
                Generator::Csv { path, num_classes } => {
                    let _ = writeln!(s, "path = {}\nnum_classes = {num_classes}", path.display());
                }
            }
            let a = &t.augmentation;
            let _ = writeln!(
                s,
                "aug_weak_sigma = {}\naug_strong_sigma = {}\naug_dropout = {}\naug_rotation_deg = {}\n",
                a.weak_noise_sigma, a.strong_noise_sigma, a.dropout_prob, a.rotation_deg
            );
        }
        let (p, u) = (&self.params.ssl, &self.params.uda);
        s.push_str("[methods]\n");
        let _ = writeln!(s, "list = {}", self.methods.join(", "));
        let _ = writeln!(s, "ssl_omega = {}\nssl_ramp_up_fraction = {}\ntau = {}", p.omega, p.ramp_up_fraction, p.tau);
        let _ = writeln!(s, "sharpen_temperature = {}\nmixup_alpha = {}\nmixmatch_n_aug = {}", p.sharpen_temperature, p.mixup_alpha, p.mixmatch_n_aug);
        let _ = writeln!(s, "vat_epsilon = {}\nvat_xi = {}\nvat_power_iters = {}", p.vat_epsilon, p.vat_xi, p.vat_power_iters);
        let _ = writeln!(s, "ema_alpha = {}", p.ema_alpha);
        let _ = writeln!(s, "uda_omega = {}\nuda_ramp_up_fraction = {}", u.omega, u.ramp_up_fraction);
        let _ = writeln!(s, "grl_lambda_max = {}\nmcc_temperature = {}\n", u.grl.lambda_max, u.mcc_temperature);
        let t = &self.train;
        let o = &t.optimizer;
        s.push_str("[train]\n");
        let seeds: Vec<String> = t.seeds.iter().map(u64::to_string).collect();
        let dims: Vec<String> = t.hidden_dims.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "seeds = {}\ntotal_steps = {}\neval_every = {}", seeds.join(", "), t.total_steps, t.eval_every);
        let _ = writeln!(s, "batch_labeled = {}\nbatch_unlabeled = {}\nloss_route = {}", t.batch_labeled, t.batch_unlabeled, t.loss_route);
        let _ = writeln!(s, "base_lr = {}\nmomentum = {}\nclassifier_lr_multiplier = {}", o.base_lr, o.momentum, o.classifier_lr_multiplier);
        let _ = writeln!(s, "weight_decay = {}\nnesterov = {}", o.weight_decay, o.nesterov);
        let _ = writeln!(s, "hidden_dims = {}\nfeature_dim = {}\ndiscriminator_hidden = {}\n", dims.join(", "), t.feature_dim, t.discriminator_hidden);
        s.push_str("[output]\n");
        if let Some(d) = &self.output.dir {
            let _ = writeln!(s, "dir = {}", d.display());
        }
        let _ = writeln!(s, "format = {}", self.output.format.name());
        s
    }
}

/// Every key accepted by the grammar with its default, for `--help`.
pub const CONFIG_REFERENCE: &str = "\
[task]     (repeatable)
  generator = two_moons | toy1d | support | csv     (required)
  name = <default derived from generator>
  two_moons: n_src = 200, n_tgt = 200, rotation_deg = 30, translation = 0, 0, noise_sigma = 0.1
  toy1d:     c = 0.25, d = 0.75, n_target = 500
  support:   kind = a|b|c|d (a), n_src = 200, n_tgt = 200
  csv:       path = <file>, num_classes = 2
  aug_weak_sigma = 0.05, aug_strong_sigma = 0.25, aug_dropout = 0.1, aug_rotation_deg = 15
[methods]
  list = <name>[:route], ...   (required; hybrids as uda+ssl, e.g. mcc+uda_consistency)
  ssl_omega = 1, ssl_ramp_up_fraction = 0.1, tau = 0.95, sharpen_temperature = 0.5,
  mixup_alpha = 0.75, mixmatch_n_aug = 2, vat_epsilon = 1, vat_xi = 1e-6, vat_power_iters = 1,
  ema_alpha = 0.99, uda_omega = 1, uda_ramp_up_fraction = 0, grl_lambda_max = 1, mcc_temperature = 2.5
[train]
  seeds = 0, 1, 2, total_steps = 2000, eval_every = 100, batch_labeled = 32, batch_unlabeled = 32,
  loss_route = feature_extractor_only | full_model (feature_extractor_only),
  base_lr = 0.01, momentum = 0.9, classifier_lr_multiplier = 1, weight_decay = 0, nesterov = false,
  hidden_dims = 64, 64, feature_dim = 16, discriminator_hidden = 32
[output]
  dir = <path>   (else --out, else $SHIFTBENCH_OUT, else ./shiftbench_out)
  format = csv | txt";

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Task,
    Methods,
    Train,
    Output,
}

struct Parser {
    cfg: ExperimentConfig,
    /// Keys seen in the current section (a fresh set per `[task]`).
    seen: Vec<String>,
    section: Option<Section>,
    seen_sections: Vec<Section>,
    task_raw: Vec<(usize, String, String)>,
    section_line: usize,
}

fn syntax(line: usize, reason: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        reason: reason.into(),
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| syntax(line, format!("`{key}` expects a number, got `{v}`")))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').map(|x| num(line, key, x.trim())).collect()
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(syntax(line, format!("`{key}` expects true or false, got `{v}`"))),
    }
}

impl Parser {
    fn finish_task(&mut self) -> Result<(), ConfigError> {
        if self.section != Some(Section::Task) {
            return Ok(());
        }
        let raw = std::mem::take(&mut self.task_raw);
        let header_line = self.section_line;
        let (gl, kind) = raw
            .iter()
            .find(|(_, k, _)| k == "generator")
            .map(|(l, _, v)| (*l, v.clone()))
            .ok_or_else(|| syntax(header_line, "[task] needs `generator`"))?;
        let mut g = Generator::default_for(&kind)
            .ok_or_else(|| syntax(gl, format!("unknown generator `{kind}`; valid: two_moons, toy1d, support, csv")))?;
        let mut aug = AugmentationSpec::default();
        let mut name = None;
        for (line, key, v) in &raw {
            let (line, key, v) = (*line, key.as_str(), v.as_str());
            match (&mut g, key) {
                (_, "generator") => {}
                (_, "name") => name = Some(v.to_string()),
                (_, "aug_weak_sigma") => aug.weak_noise_sigma = num(line, key, v)?,
                (_, "aug_strong_sigma") => aug.strong_noise_sigma = num(line, key, v)?,
                (_, "aug_dropout") => aug.dropout_prob = num(line, key, v)?,
                (_, "aug_rotation_deg") => aug.rotation_deg = num(line, key, v)?,
                (Generator::TwoMoons { n_src, .. } | Generator::Support { n_src, .. }, "n_src") => {
                    *n_src = num(line, key, v)?
                }
                (Generator::TwoMoons { n_tgt, .. } | Generator::Support { n_tgt, .. }, "n_tgt") => {
                    *n_tgt = num(line, key, v)?
                }
                (Generator::TwoMoons { rotation_deg, .. }, "rotation_deg") => *rotation_deg = num(line, key, v)?,
                (Generator::TwoMoons { noise_sigma, .. }, "noise_sigma") => *noise_sigma = num(line, key, v)?,
                (Generator::TwoMoons { translation, .. }, "translation") => {
                    let t: Vec<f64> = list(line, key, v)?;
                    *translation = t
                        .try_into()
                        .map_err(|_| syntax(line, "`translation` expects two numbers"))?;
                }
                (Generator::Toy1d { c, .. }, "c") => *c = num(line, key, v)?,
                (Generator::Toy1d { d, .. }, "d") => *d = num(line, key, v)?,
                (Generator::Toy1d { n_target, .. }, "n_target") => *n_target = num(line, key, v)?,
                (Generator::Support { kind, .. }, "kind") => {
                    *kind = v
                        .parse()
                        .map_err(|_| syntax(line, format!("unknown support kind `{v}`; valid: a, b, c, d")))?
                }
                (Generator::Csv { path, .. }, "path") => *path = PathBuf::from(v),
                (Generator::Csv { num_classes, .. }, "num_classes") => *num_classes = num(line, key, v)?,
                _ => return Err(syntax(line, format!("unknown key `{key}` for {kind} task"))),
            }
        }
        let mut task = TaskSpec::new(g);
        task.augmentation = aug;
        if let Some(n) = name {
            task.name = n;
        }
        self.cfg.tasks.push(task);
        Ok(())
    }

    fn key(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let section = self
            .section
            .ok_or_else(|| syntax(line, "key outside of a section"))?;
        if self.seen.iter().any(|k| k == key) {
            return Err(syntax(line, format!("duplicate key `{key}`")));
        }
        self.seen.push(key.to_string());
        let p = &mut self.cfg.params;
        let t = &mut self.cfg.train;
        match section {
            Section::Task => self.task_raw.push((line, key.to_string(), v.to_string())),
            Section::Methods => match key {
                "list" => {
                    self.cfg.methods = v
                        .split(',')
                        .map(|m| m.trim().to_string())
                        .filter(|m| !m.is_empty())
                        .collect();
                    for m in &self.cfg.methods {
                        p.resolve(m).map_err(|e| syntax(line, e.to_string()))?;
                    }
                }
                "ssl_omega" => p.ssl.omega = num(line, key, v)?,
                "ssl_ramp_up_fraction" => p.ssl.ramp_up_fraction = num(line, key, v)?,
                "tau" => p.ssl.tau = num(line, key, v)?,
                "sharpen_temperature" => p.ssl.sharpen_temperature = num(line, key, v)?,
                "mixup_alpha" => p.ssl.mixup_alpha = num(line, key, v)?,
                "mixmatch_n_aug" => p.ssl.mixmatch_n_aug = num(line, key, v)?,
                "vat_epsilon" => p.ssl.vat_epsilon = num(line, key, v)?,
                "vat_xi" => p.ssl.vat_xi = num(line, key, v)?,
                "vat_power_iters" => p.ssl.vat_power_iters = num(line, key, v)?,
                "ema_alpha" => p.ssl.ema_alpha = num(line, key, v)?,
                "uda_omega" => p.uda.omega = num(line, key, v)?,
                "uda_ramp_up_fraction" => p.uda.ramp_up_fraction = num(line, key, v)?,
                "grl_lambda_max" => p.uda.grl.lambda_max = num(line, key, v)?,
                "mcc_temperature" => p.uda.mcc_temperature = num(line, key, v)?,
                _ => return Err(syntax(line, format!("unknown key `{key}` in [methods]"))),
            },
            Section::Train => match key {
                "seeds" => t.seeds = list(line, key, v)?,
                "total_steps" => t.total_steps = num(line, key, v)?,
                "eval_every" => t.eval_every = num(line, key, v)?,
                "batch_labeled" => t.batch_labeled = num(line, key, v)?,
                "batch_unlabeled" => t.batch_unlabeled = num(line, key, v)?,
                "loss_route" => {
                    t.loss_route = v
                        .parse()
                        .map_err(|_| syntax(line, format!("unknown loss route `{v}`; valid: full_model, feature_extractor_only")))?
                }
                "base_lr" => t.optimizer.base_lr = num(line, key, v)?,
                "momentum" => t.optimizer.momentum = num(line, key, v)?,
                "classifier_lr_multiplier" => t.optimizer.classifier_lr_multiplier = num(line, key, v)?,
                "weight_decay" => t.optimizer.weight_decay = num(line, key, v)?,
                "nesterov" => t.optimizer.nesterov = boolean(line, key, v)?,
                "hidden_dims" => t.hidden_dims = list(line, key, v)?,
                "feature_dim" => t.feature_dim = num(line, key, v)?,
                "discriminator_hidden" => t.discriminator_hidden = num(line, key, v)?,
                _ => return Err(syntax(line, format!("unknown key `{key}` in [train]"))),
            },
            Section::Output => match key {
                "dir" => self.cfg.output.dir = Some(PathBuf::from(v)),
                "format" => self.cfg.output.format = v.parse().map_err(|e: ConfigError| syntax(line, e.to_string()))?,
                _ => return Err(syntax(line, format!("unknown key `{key}` in [output]"))),
            },
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut p = Parser {
        cfg: ExperimentConfig::new(Vec::new(), Vec::new()),
        seen: Vec::new(),
        section: None,
        seen_sections: Vec::new(),
        task_raw: Vec::new(),
        section_line: 0,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
            continue;
        }
        if let Some(name) = l.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| syntax(line, format!("malformed section header `{l}`")))?;
            let section = match name.trim() {
                "task" => Section::Task,
                "methods" => Section::Methods,
                "train" => Section::Train,
                "output" => Section::Output,
                other => return Err(syntax(line, format!("unknown section `[{other}]`; valid: task, methods, train, output"))),
            };
            p.finish_task()?;
            if section != Section::Task && p.seen_sections.contains(&section) {
                return Err(syntax(line, format!("section `[{}]` repeated", name.trim())));
            }
            p.seen_sections.push(section);
            p.section = Some(section);
            p.seen.clear();
            p.section_line = line;
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected `key = value`, got `{l}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax(line, "empty key"));
        }
        p.key(line, k, v)?;
    }
    p.finish_task()?;
    let cfg = p.cfg;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}
