use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use shiftbench::config::{parse_config, ExperimentConfig, Generator, OutputFormat, TaskSpec, CONFIG_REFERENCE};
use shiftbench::plot::{adist_bars, bars_svg, boundary_svg, convergence_series, convergence_svg, summary_table};
use shiftbench::records::{emit_csv, load_records, ExperimentRecord};
use shiftbench::runner::{input_space_bound, run_matrix, run_one};
use shiftbench_core::analysis::{feature_a_distance, proxy_a_distance};
use shiftbench_core::autodiff::Tensor;
use shiftbench_core::domains::export_csv;
use shiftbench_core::models::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "shiftbench", version, about = "Semi-supervised learning vs. domain adaptation on synthetic shifts", after_help = CONFIG_REFERENCE)]
struct Cli {
    /// Output directory [default: $SHIFTBENCH_OUT, else ./shiftbench_out]
    #[arg(long, global = true, env = "SHIFTBENCH_OUT")]
    out: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Txt,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Boundary,
    Convergence,
    #[value(name = "adist_bars")]
    AdistBars,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Export every configured synthetic task to CSV.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one method on one task and save its history and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Method label as in `[methods] list`, e.g. `fixmatch` or `entropy_min:full_model`.
        #[arg(long)]
        method: String,
        /// Task name; defaults to the first configured task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Run the methods × tasks × seeds matrix.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Summary printed to stdout; results.csv is always written.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Divergence diagnostics on a checkpoint's features or on saved feature files.
    Adist {
        #[arg(long, requires = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, requires = "features_target", conflicts_with = "checkpoint")]
        features_source: Option<PathBuf>,
        #[arg(long)]
        features_target: Option<PathBuf>,
    },
    /// Render an SVG figure.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// results.csv for convergence, adist_bars and table.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint for boundary plots (with --config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "transductive")]
        split: String,
        #[arg(long, default_value = "acc")]
        metric: String,
        /// Destination file.
        #[arg(long)]
        output: PathBuf,
    },
}

fn out_dir(cli: &Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.clone()
        .or_else(|| cfg.and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("shiftbench_out"))
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.train.seeds = vec![s];
    }
    Ok(cfg)
}

fn pick_task<'a>(cfg: &'a ExperimentConfig, name: &Option<String>) -> Result<&'a TaskSpec> {
    match name {
        None => Ok(&cfg.tasks[0]),
        Some(n) => cfg.tasks.iter().find(|t| &t.name == n).with_context(|| {
            let names: Vec<&str> = cfg.tasks.iter().map(|t| t.name.as_str()).collect();
            format!("no task `{n}`; configured: {}", names.join(", "))
        }),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_features(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, r) in rdr.records().enumerate() {
        let r = r?;
        let row: std::result::Result<Vec<f64>, _> = r.iter().map(str::parse).collect();
        match row {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}: row {}: {e}", path.display(), i + 1),
        }
    }
    Ok(Tensor::from_rows(&rows)?)
}

fn summaries(records: &[ExperimentRecord]) -> String {
    let mut s = String::new();
    for (split, metric) in [("inductive", "acc"), ("transductive", "acc"), ("transductive", "proxy_a_distance")] {
        s.push_str(&summary_table(records, split, metric).to_text());
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { config } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cli.out, Some(&cfg));
            std::fs::create_dir_all(&dir)?;
            for task in cfg.tasks.iter().filter(|t| !matches!(t.generator, Generator::Csv { .. })) {
                for &seed in &cfg.train.seeds {
                    let ds = task.build(seed)?;
                    let path = dir.join(format!("{}_seed{seed}.csv", task.name));
                    export_csv(&ds, &path)?;
                    println!("{}", path.display());
                }
            }
            Ok(true)
        }
        Command::Train { config, method, task } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cli.out, Some(&cfg));
            let task = pick_task(&cfg, task)?;
            let seed = cfg.train.seeds[0];
            let out = run_one(&cfg, task, method, seed).map_err(anyhow::Error::msg)?;
            std::fs::create_dir_all(&dir)?;
            emit_csv(&out.records, dir.join("history.csv"))?;
            save_checkpoint(&out.model, dir.join("model.ckpt"))?;
            if out.dataset.input_dim() <= 2 {
                write(&dir.join("boundary.svg"), &boundary_svg(&out.model, &out.dataset, &format!("{} on {}", method, task.name))?)?;
            }
            let last = out.history.last().context("empty history")?;
            println!(
                "{} {} seed {}: transductive acc {:.4}, inductive acc {:.4} (outputs in {})",
                task.name,
                method,
                seed,
                last.transductive.acc,
                last.inductive.acc,
                dir.display()
            );
            Ok(true)
        }
        Command::Bench { config, jobs, format } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cli.out, Some(&cfg));
            std::fs::create_dir_all(&dir)?;
            let out = run_matrix(&cfg, *jobs, Some(&dir.join("runs")))?;
            let results = dir.join("results.csv");
            emit_csv(&out.records, &results)?;
            write(&dir.join("config.ini"), &cfg.to_config_string())?;
            for task in &cfg.tasks {
                let series = convergence_series(&out.records, &task.name, "transductive", "acc");
                if let Ok(svg) = convergence_svg(&series, &format!("{} convergence", task.name), "transductive acc") {
                    write(&dir.join("plots").join(format!("{}_convergence.svg", task.name)), &svg)?;
                }
                if let Ok(svg) = bars_svg(&adist_bars(&out.records, &task.name), &format!("{} proxy A-distance", task.name), "d_A") {
                    write(&dir.join("plots").join(format!("{}_adist.svg", task.name)), &svg)?;
                }
            }
            let text = summaries(&out.records);
            write(&dir.join("results.txt"), &text)?;
            let format = match format {
                Some(Format::Csv) => OutputFormat::Csv,
                Some(Format::Txt) => OutputFormat::Txt,
                None => cfg.output.format,
            };
            match format {
                OutputFormat::Txt => print!("{text}"),
                OutputFormat::Csv => print!("{}", std::fs::read_to_string(&results)?),
            }
            let failed = out.failures.iter().map(|f| format!("{} {} seed {}: {}\n", f.task, f.method, f.seed, f.error));
            let failed: String = failed.collect();
            if !failed.is_empty() {
                write(&dir.join("failures.txt"), &failed)?;
                eprint!("{failed}");
            }
            Ok(out.succeeded())
        }
        Command::Adist {
            checkpoint,
            config,
            task,
            features_source,
            features_target,
        } => {
            let seed = cli.seed.unwrap_or(0);
            if let (Some(fs), Some(ft)) = (features_source, features_target) {
                let d = proxy_a_distance(&read_features(fs)?, &read_features(ft)?, seed)?;
                println!("metric,value\nproxy_a_distance,{d}");
                return Ok(true);
            }
            let (Some(ckpt), Some(config)) = (checkpoint, config) else {
                bail!("adist needs --checkpoint with --config, or --features-source with --features-target");
            };
            let cfg = load(config, cli.seed)?;
            let task = pick_task(&cfg, task)?;
            let ds = task.build(cfg.train.seeds[0])?;
            let model = load_checkpoint(ckpt)?;
            let d = feature_a_distance(&model, &ds.source_x(), &ds.target_x(), seed)?;
            println!("metric,value\nproxy_a_distance,{d}");
            if let Some((h, lambda, gap)) = input_space_bound(&ds)? {
                println!("d_hdh,{h}\nlambda_h,{lambda}\nbound_gap,{gap}");
            }
            Ok(true)
        }
        Command::Plot {
            kind,
            input,
            checkpoint,
            config,
            task,
            split,
            metric,
            output,
        } => {
            let svg = match kind {
                PlotKind::Boundary => {
                    let (Some(ckpt), Some(config)) = (checkpoint, config) else {
                        bail!("boundary plots need --checkpoint and --config");
                    };
                    let cfg = load(config, cli.seed)?;
                    let t = pick_task(&cfg, task)?;
                    let ds = t.build(cfg.train.seeds[0])?;
                    boundary_svg(&load_checkpoint(ckpt)?, &ds, &t.name)?
                }
                _ => {
                    let input = input.as_ref().context("this plot kind needs --input results.csv")?;
                    let records = load_records(input)?;
                    let wanted = if matches!(kind, PlotKind::AdistBars) { "proxy_a_distance" } else { metric.as_str() };
                    let first_task = records
                        .iter()
                        .find(|r| r.metric == wanted)
                        .map(|r| r.task.clone())
                        .unwrap_or_default();
                    let t = task.clone().unwrap_or(first_task);
                    match kind {
                        PlotKind::Convergence => convergence_svg(
                            &convergence_series(&records, &t, split, metric),
                            &format!("{t} convergence"),
                            &format!("{metric} ({split})"),
                        )?,
                        PlotKind::AdistBars => bars_svg(&adist_bars(&records, &t), &format!("{t} proxy A-distance"), "d_A")?,
                        _ => summary_table(&records, split, metric).to_svg(&format!("{metric} ({split})")),
                    }
                }
            };
            write(output, &svg)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
