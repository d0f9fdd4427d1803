//! `mvc` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or file-format error,
//! 3 training failure or a violated cluster-count bound.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mvc_core::data::{self, generate_toy, mean_feature_std, DataFormat, MultiViewDataset, ToySpec};
use mvc_core::metrics::{acc, nmi, NMI_NORMALIZATION};
use mvc_core::model::ModelState;
use mvc_core::plot::{emit_svg_scatter, to_2d};
use mvc_core::propcheck::{sweep_two_views, verify_proposition, ViewPartitions};
use mvc_core::trainer::{
    ablate_contrastive, ablate_loss_terms, noise_sweep, train_protocol, AblationRow, ModelKind,
    NoiseRow, RunRecord, TrainConfig,
};
use mvc_core::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mvc_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mvc_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Json { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Usage(_) => EXIT_USAGE,
                E::Shape(_) | E::Domain(_) | E::Format { .. } | E::Io { .. } => EXIT_DATA,
                E::Training(_) | E::PropositionViolation(_) => EXIT_TRAINING,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mvc", version, about = "Deep multi-view clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a two-view Gaussian toy dataset.
    GenerateToy {
        /// Number of clusters: 3 or 5.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples_per_cluster: Option<usize>,
        /// Multiplies every covariance.
        #[arg(long)]
        cov_scale: Option<f64>,
    },
    /// Train the multi-run protocol; writes records.json and best.mvck.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive toggles and loss-term subsets.
    Ablate(TrainArgs),
    /// Train on increasingly corrupted copies of one view.
    NoiseSweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 1)]
        view: usize,
        /// Comma list; an `x` suffix means a multiple of the view's per-feature std.
        #[arg(long, default_value = "0,1x,5x")]
        noise_stds: String,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Compare cluster-count formulas against brute force.
    Propcheck {
        #[arg(long, conflicts_with_all = ["toy3", "partitions", "sweep"])]
        toy5: bool,
        #[arg(long, conflicts_with_all = ["partitions", "sweep"])]
        toy3: bool,
        /// Views separated by `;`, cells by `|`, 1-based clusters, e.g. `123|45;1|24|35`.
        #[arg(long, conflicts_with = "sweep")]
        partitions: Option<String>,
        /// Exhaustive two-view sweep for every k up to this value.
        #[arg(long)]
        sweep: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG scatter panels of inputs and, with a checkpoint, learned representations.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mvc-out")]
    out: PathBuf,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ModelKind>,
    #[arg(long)]
    runs: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| mvc_core::Error::Io { path: p.clone(), source: e })?;
                TrainConfig::from_toml(&text).map_err(|e| {
                    CliError::Usage(format!("{}: {e}", p.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors are printed to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateToy {
            k,
            seed,
            out,
            samples_per_cluster,
            cov_scale,
        } => {
            let mut spec = ToySpec::preset(k, seed)?;
            if let Some(n) = samples_per_cluster {
                spec = spec.with_samples(n);
            }
            if let Some(f) = cov_scale {
                spec = spec.with_cov_scale(f);
            }
            let ds = generate_toy(&spec)?;
            data::save(&ds, &out)?;
            println!("wrote {} objects, {} views to {}", ds.n(), ds.n_views(), out.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate { checkpoint, data } => cmd_evaluate(&checkpoint, &data),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::NoiseSweep {
            train,
            view,
            noise_stds,
            noise_seed,
        } => cmd_noise_sweep(&train, view, &noise_stds, noise_seed),
        Command::Propcheck {
            toy5,
            toy3,
            partitions,
            sweep,
            out,
        } => cmd_propcheck(toy5, toy3, partitions.as_deref(), sweep, out.as_deref()),
        Command::Plot {
            data,
            checkpoint,
            out,
        } => cmd_plot(&data, checkpoint.as_deref(), &out),
    }
}

fn load_data(path: &Path) -> Result<MultiViewDataset> {
    Ok(data::load(path, DataFormat::from_path(path))?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| mvc_core::Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| mvc_core::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn fmt_weights(w: &[f64]) -> String {
    let parts: Vec<String> = w.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Contents of `records.json`.
#[derive(Serialize)]
pub struct RecordsDocument<'a> {
    pub config: &'a TrainConfig,
    pub config_hash: String,
    pub best_index: usize,
    pub records: &'a [RunRecord],
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let ds = load_data(&args.data)?;
    let res = train_protocol(&cfg, &ds)?;
    create_dir(&args.out)?;
    write_json(
        &args.out.join("records.json"),
        &RecordsDocument {
            config: &cfg,
            config_hash: cfg.hash(),
            best_index: res.best_index,
            records: &res.records,
        },
    )?;
    res.best.save(&args.out.join("best.mvck"))?;
    for (i, r) in res.records.iter().enumerate() {
        let mark = if i == res.best_index { "*" } else { " " };
        println!(
            "{mark} seed {:>4}  score {}  acc {}  nmi {}  weights {}  {:.1}s{}",
            r.seed,
            fmt_opt(r.selection_score),
            fmt_opt(r.acc),
            fmt_opt(r.nmi),
            fmt_weights(&r.fusion_weights),
            r.wall_time_s,
            r.aborted.as_ref().map_or(String::new(), |m| format!("  aborted: {m}"))
        );
    }
    let best = res.best_record();
    println!(
        "best run {} (seed {}): acc={} nmi={}",
        res.best_index,
        best.seed,
        fmt_opt(best.acc),
        fmt_opt(best.nmi)
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, data_path: &Path) -> Result<()> {
    let model = ModelState::load(checkpoint)?;
    let ds = load_data(data_path)?;
    let inf = model.infer(&ds.views)?;
    let pred = inf.predictions();
    println!("fusion_weights={:?}", model.fusion_weights());
    match &ds.labels {
        Some(labels) => {
            println!("acc={:?}", acc(&pred, labels)?);
            println!("nmi={:?} ({NMI_NORMALIZATION})", nmi(&pred, labels)?);
        }
        None => println!("dataset has no labels; predictions only"),
    }
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:<44} {:>7} {:>7} {:>9}  weights",
        "model", "setting", "acc", "nmi", "score"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:<44} {:>7} {:>7} {:>9}  {}",
            r.model.name(),
            r.label,
            fmt_opt(r.acc),
            fmt_opt(r.nmi),
            fmt_opt(r.selection_score),
            fmt_weights(&r.fusion_weights)
        );
    }
    s
}

/// Contents of `ablation.json`.
#[derive(Serialize)]
pub struct AblationDocument {
    pub dataset: String,
    pub contrastive: Vec<AblationRow>,
    pub loss_terms: Vec<AblationRow>,
}

fn cmd_ablate(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let ds = load_data(&args.data)?;
    let contrastive = ablate_contrastive(&cfg, &ds)?;
    let mut loss_terms = ablate_loss_terms(&cfg, &ds, ModelKind::Simvc)?;
    loss_terms.extend(ablate_loss_terms(&cfg, &ds, ModelKind::Comvc)?);
    let doc = AblationDocument {
        dataset: ds.name.clone(),
        contrastive,
        loss_terms,
    };
    let table = format!(
        "dataset {}\n\ncontrastive components\n{}\nloss terms\n{}",
        doc.dataset,
        ablation_table(&doc.contrastive),
        ablation_table(&doc.loss_terms)
    );
    create_dir(&args.out)?;
    write_json(&args.out.join("ablation.json"), &doc)?;
    write_text(&args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Parses `0,1x,5x`; `x` multiplies `unit`.
pub fn parse_noise_stds(spec: &str, unit: f64) -> std::result::Result<Vec<f64>, String> {
    let out: Vec<f64> = spec
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (num, scale) = match item.strip_suffix('x') {
                Some(n) => (n, unit),
                None => (item, 1.0),
            };
            num.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(|v| v * scale)
                .ok_or_else(|| format!("--noise-stds: bad entry {item:?}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if out.is_empty() {
        return Err("--noise-stds: empty list".into());
    }
    Ok(out)
}

fn cmd_noise_sweep(args: &TrainArgs, view: usize, stds: &str, noise_seed: u64) -> Result<()> {
    let cfg = args.config()?;
    let ds = load_data(&args.data)?;
    if view >= ds.n_views() {
        return Err(CliError::Usage(format!(
            "--view {view}: dataset has {} views",
            ds.n_views()
        )));
    }
    let stds = parse_noise_stds(stds, mean_feature_std(&ds, view)).map_err(CliError::Usage)?;
    let rows: Vec<NoiseRow> = noise_sweep(&cfg, &ds, view, &stds, noise_seed)?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>10} {:>8} {:>12} {:>7} {:>7}  weights",
        "std", "x data", "noisy w", "acc", "nmi"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:>10.4} {:>8.2} {:>12.4} {:>7} {:>7}  {}",
            r.std,
            r.relative_std,
            r.noisy_view_weight,
            fmt_opt(r.acc),
            fmt_opt(r.nmi),
            fmt_weights(&r.fusion_weights)
        );
    }
    create_dir(&args.out)?;
    write_json(&args.out.join("noise_sweep.json"), &rows)?;
    write_text(&args.out.join("noise_sweep.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Parses `123|45;1|24|35` (1-based clusters, single-digit labels or
/// comma-separated numbers inside a cell).
pub fn parse_partitions(spec: &str) -> std::result::Result<ViewPartitions, String> {
    let mut views = Vec::new();
    let mut k = 0;
    for view in spec.split(';') {
        let mut blocks = Vec::new();
        for cell in view.split('|') {
            let cell = cell.trim();
            let ids: Vec<usize> = if cell.contains(',') {
                cell.split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad cluster {t:?}")))
                    .collect::<std::result::Result<_, _>>()?
            } else {
                cell.chars()
                    .map(|c| c.to_digit(10).map(|d| d as usize).ok_or(format!("bad cluster {c:?}")))
                    .collect::<std::result::Result<_, _>>()?
            };
            if ids.contains(&0) {
                return Err("clusters are numbered from 1".into());
            }
            k = k.max(ids.iter().copied().max().unwrap_or(0));
            blocks.push(ids.into_iter().map(|i| i - 1).collect::<Vec<_>>());
        }
        views.push(blocks);
    }
    ViewPartitions::from_blocks(k, &views).map_err(|e| e.to_string())
}

fn cmd_propcheck(
    toy5: bool,
    toy3: bool,
    partitions: Option<&str>,
    sweep: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(k_max) = sweep {
        if k_max > mvc_core::propcheck::MAX_BRUTE_K {
            return Err(CliError::Usage(format!(
                "--sweep {k_max}: at most {}",
                mvc_core::propcheck::MAX_BRUTE_K
            )));
        }
        let s = sweep_two_views(k_max)?;
        println!(
            "instances={} violations={} tight_aligned={} tight_unaligned={} meet_mismatches={}",
            s.instances, s.violations, s.tight_aligned, s.tight_unaligned, s.meet_mismatches
        );
        if let Some(p) = out {
            write_json(p, &s)?;
        }
        if s.violations > 0 {
            return Err(mvc_core::Error::PropositionViolation(format!(
                "{} of {} instances exceed a bound",
                s.violations, s.instances
            ))
            .into());
        }
        return Ok(());
    }
    let parts = if toy3 {
        ViewPartitions::toy3()
    } else if let Some(spec) = partitions {
        parse_partitions(spec).map_err(|e| CliError::Usage(format!("--partitions: {e}")))?
    } else {
        let _ = toy5;
        ViewPartitions::toy5()
    };
    let r = verify_proposition(&parts)?;
    println!("k={} view_counts={:?}", r.k, r.view_counts);
    println!("aligned={}, unaligned={}", r.formula_aligned, r.formula_unaligned);
    println!(
        "brute force: aligned={}, unaligned={} ({}, {})",
        r.brute_aligned.count,
        r.brute_unaligned.count,
        if r.tight_aligned { "tight" } else { "slack" },
        if r.tight_unaligned { "tight" } else { "slack" }
    );
    println!("aligned witness={:?}", r.brute_aligned.witness);
    if let Some(p) = out {
        write_json(p, &r)?;
    }
    Ok(())
}

fn cmd_plot(data_path: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let ds = load_data(data_path)?;
    create_dir(out)?;
    let inference = match checkpoint {
        Some(p) => Some(ModelState::load(p)?.infer(&ds.views)?),
        None => None,
    };
    let colors: Vec<usize> = match (&ds.labels, &inference) {
        (Some(l), _) => l.clone(),
        (None, Some(inf)) => inf.predictions(),
        (None, None) => vec![0; ds.n()],
    };
    let mut panels: Vec<(String, &Tensor)> = ds
        .views
        .iter()
        .enumerate()
        .map(|(v, t)| (format!("input_view{}", v + 1), t))
        .collect();
    if let Some(inf) = &inference {
        for (v, r) in inf.reps.iter().enumerate() {
            panels.push((format!("rep_view{}", v + 1), r));
        }
        panels.push(("fused".to_string(), &inf.fused));
    }
    for (name, t) in panels {
        let path = out.join(format!("{name}.svg"));
        emit_svg_scatter(&to_2d(t)?, &colors, &path, &name)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_list_parsing() {
        assert_eq!(parse_noise_stds("0,1x,5x", 2.0).unwrap(), vec![0.0, 2.0, 10.0]);
        assert_eq!(parse_noise_stds("0.5", 2.0).unwrap(), vec![0.5]);
        assert!(parse_noise_stds("a", 1.0).is_err());
        assert!(parse_noise_stds("-1", 1.0).is_err());
    }

    #[test]
    fn partition_parsing() {
        assert_eq!(parse_partitions("123|45;1|24|35").unwrap(), ViewPartitions::toy5());
        assert_eq!(parse_partitions("1|23;12|3").unwrap(), ViewPartitions::toy3());
        assert!(parse_partitions("12|2").is_err());
        assert!(parse_partitions("0|1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_command(["mvc", "--bogus"]), EXIT_USAGE);
        assert_eq!(run_command(["mvc", "propcheck", "--toy5", "--nope"]), EXIT_USAGE);
        assert_eq!(run_command(["mvc", "--help"]), EXIT_OK);
        assert_eq!(
            run_command(["mvc", "evaluate", "--checkpoint", "/nonexistent/x", "--data", "y"]),
            EXIT_DATA
        );
    }
}
