use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vace::encoder::encode_params;
use vace::geometry::{write_geometry_csv, GeometryRow};
use vace::metrics::{evaluate, MetricsConfig};
use vace::pipeline::{
    exit_code, run_ablations, run_benchmark, run_geometry, run_sensitivity, run_series_full, run_stem, write_runs,
    ErrorRecord, MetricsRecord, RunConfig, Scorer,
};
use vace::scoring::read_scores_csv;
use vace::series::{generate_synthetic, load_series, save_series, AnomalyKind};
use vace::{Result, VaceError};

#[derive(Parser)]
#[command(
    name = "vace",
    version,
    about = "Velocity-aligned channel embeddings for time-series anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, score and evaluate a single series.
    Run {
        /// Series CSV.
        input: PathBuf,
        /// Training prefix length when the file name carries none.
        #[arg(long)]
        train_len: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Every series of a directory under every seed.
    Bench {
        dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full model against each single-component ablation.
    Ablate {
        dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Spectral diagnostics of the training embeddings.
    Geometry {
        dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// One-at-a-time hyperparameter sensitivity grid.
    Sweep {
        dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a corpus of labeled synthetic series.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long, default_value_t = 4000)]
        len: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0.02)]
        ratio: f64,
        #[arg(long, default_value = "spike")]
        kind: String,
        /// First seed; series use consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Metrics of a scores CSV with a label column.
    Metrics {
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "vus-l", default_value_t = 48)]
        vus_l: usize,
        #[arg(long, default_value_t = 9)]
        vus_grid: usize,
    },
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "P", alias = "patch-len")]
    patch_len: Option<usize>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    c_e: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_anchors: Option<usize>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long = "K-cap", alias = "k-cap")]
    k_cap: Option<usize>,
    #[arg(long)]
    k_np: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Single run seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `mahalanobis` or `memory_bank`.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    no_channel_encoder: bool,
    #[arg(long)]
    no_velocity_pretext: bool,
    #[arg(long)]
    no_velocity_scoring: bool,
    #[arg(long)]
    no_batchnorm: bool,
    #[arg(long)]
    no_global_znorm: bool,
    #[arg(long = "vus-L", alias = "vus-l")]
    vus_l: Option<usize>,
    #[arg(long)]
    vus_grid: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        set!(patch_len => patch_len, delta => delta, d_z => d_z, c_e => c_e, steps => steps,
             batch_anchors => batch_anchors, w => w, k_cap => k_cap, k_np => k_np, lr => lr,
             seeds => seeds, vus_l => vus_max_buffer, vus_grid => vus_grid, workers => workers);
        if let Some(seed) = self.seed {
            c.seeds = vec![seed];
        }
        if let Some(s) = &self.scorer {
            c.scorer = s.parse::<Scorer>()?;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        c.channel_encoder &= !self.no_channel_encoder;
        c.velocity_pretext &= !self.no_velocity_pretext;
        c.velocity_scoring &= !self.no_velocity_scoring;
        c.batchnorm &= !self.no_batchnorm;
        c.global_znorm &= !self.no_global_znorm;
        c.validate()?;
        Ok(c)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| VaceError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| VaceError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn report_errors(errors: &[ErrorRecord]) {
    for e in errors {
        match e.seed {
            Some(seed) => eprintln!("error: {} (seed {seed}, {}): {}", e.series, e.variant, e.message),
            None => eprintln!("error: {}: {}", e.series, e.message),
        }
    }
}

fn cmd_run(input: &Path, train_len: Option<usize>, args: &ConfigArgs) -> Result<i32> {
    let mut config = args.resolve()?;
    let out = config.out.take().unwrap_or_else(|| PathBuf::from("vace_out"));
    let series = load_series(input, train_len)?;
    create_dir(&out)?;
    let mut failures = 0;
    let mut successes = 0;
    for &seed in &config.seeds {
        match run_series_full(&series, &config, seed) {
            Ok((run, artifacts)) => {
                successes += 1;
                for w in &run.scores.warnings {
                    eprintln!("warning: {w}");
                }
                write_runs(&out, std::slice::from_ref(&run), std::slice::from_ref(&series))?;
                let stem = run_stem(&run);
                write(
                    &out.join(format!("{stem}.encoder.bin")),
                    encode_params(&artifacts.encoder),
                )?;
                write(&out.join(format!("{stem}.model.json")), artifacts.model.to_json())?;
                if let Some(g) = &run.geometry {
                    let row = GeometryRow::new(&run.series, &run.variant, Some(seed), g);
                    let path = out.join(format!("{stem}.geometry.csv"));
                    let file = fs::File::create(&path).map_err(|e| VaceError::Io { path, source: e })?;
                    write_geometry_csv(&[row], file)?;
                }
                println!(
                    "{}",
                    serde_json::to_string(&MetricsRecord::from_run(&run)).expect("metrics serialize")
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {e}");
            }
        }
    }
    Ok(exit_code(successes, failures))
}

fn cmd_bench(dir: &Path, args: &ConfigArgs) -> Result<i32> {
    let summary = run_benchmark(dir, &args.resolve()?)?;
    report_errors(&summary.errors);
    match &summary.aggregate {
        Some(a) => println!("{}", serde_json::to_string_pretty(a).expect("aggregate serializes")),
        None => eprintln!("no series completed"),
    }
    Ok(summary.exit_code())
}

fn cmd_ablate(dir: &Path, args: &ConfigArgs) -> Result<i32> {
    let report = run_ablations(dir, &args.resolve()?)?;
    report_errors(&report.errors);
    println!("{:<22} {:>9} {:>9} {:>9}", "variant", "VUS-PR", "dVUS-PR", "AUC-ROC");
    for r in &report.rows {
        println!(
            "{:<22} {:>9.4} {:>+9.4} {:>9.4}",
            r.variant, r.metrics.vus_pr, r.delta_vus_pr, r.metrics.auc_roc
        );
    }
    Ok(report.exit_code())
}

fn cmd_geometry(dir: &Path, args: &ConfigArgs) -> Result<i32> {
    let (rows, errors) = run_geometry(dir, &args.resolve()?)?;
    report_errors(&errors);
    write_geometry_csv(&rows, std::io::stdout())?;
    Ok(exit_code(rows.len(), errors.len()))
}

fn cmd_sweep(dir: &Path, args: &ConfigArgs) -> Result<i32> {
    let (rows, errors) = run_sensitivity(dir, &args.resolve()?)?;
    report_errors(&errors);
    for r in &rows {
        println!(
            "{:<6} {:>6} vus_pr={:.4} vus_roc={:.4}",
            r.parameter, r.value, r.vus_pr, r.vus_roc
        );
    }
    Ok(exit_code(rows.len(), errors.len()))
}

fn cmd_synth(out: &Path, count: u64, len: usize, channels: usize, ratio: f64, kind: &str, seed: u64) -> Result<i32> {
    let kind: AnomalyKind = kind.parse()?;
    create_dir(out)?;
    for s in seed..seed + count {
        let series = generate_synthetic(s, len, channels, ratio, kind)?;
        let path = out.join(format!("{}.csv", series.name));
        save_series(&series, &path)?;
        println!("{}", path.display());
    }
    Ok(0)
}

fn cmd_metrics(scores: &Path, out: Option<&Path>, vus_l: usize, vus_grid: usize) -> Result<i32> {
    let file = fs::File::open(scores).map_err(|e| VaceError::Io {
        path: scores.to_path_buf(),
        source: e,
    })?;
    let rows = read_scores_csv(file)?;
    let labels = rows
        .iter()
        .map(|r| r.label)
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| VaceError::Format("every row needs a label".into()))?;
    let values: Vec<f64> = rows.iter().map(|r| r.point_score).collect();
    let config = MetricsConfig {
        vus_max_buffer: vus_l,
        vus_grid,
        ..MetricsConfig::default()
    };
    let result = evaluate(&values, &labels, &config)?;
    let json = serde_json::to_string_pretty(&result).expect("metrics serialize");
    match out {
        Some(path) => write(path, json)?,
        None => println!("{json}"),
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            input,
            train_len,
            config,
        } => cmd_run(&input, train_len, &config),
        Command::Bench { dir, config } => cmd_bench(&dir, &config),
        Command::Ablate { dir, config } => cmd_ablate(&dir, &config),
        Command::Geometry { dir, config } => cmd_geometry(&dir, &config),
        Command::Sweep { dir, config } => cmd_sweep(&dir, &config),
        Command::Synth {
            out,
            count,
            len,
            channels,
            ratio,
            kind,
            seed,
        } => cmd_synth(&out, count, len, channels, ratio, &kind, seed),
        Command::Metrics {
            scores,
            out,
            vus_l,
            vus_grid,
        } => cmd_metrics(&scores, out.as_deref(), vus_l, vus_grid),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
