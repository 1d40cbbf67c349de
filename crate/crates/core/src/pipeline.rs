//! End-to-end runs over single series and directories: training, scoring,
//! evaluation, ablation matrices, sensitivity sweeps and aggregation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, EncoderVariant};
use crate::error::{Result, VaceError};
use crate::geometry::{geometry_report, write_geometry_csv, GeometryReport, GeometryRow};
use crate::metrics::{evaluate, EvalResult, MetricsConfig};
use crate::patching::extract_patches;
use crate::scoring::{
    build_velocity_bank, fit_gaussian, memory_bank_score, patch_to_point, positional_score, score_with_positional,
    write_scores_csv, BankConfig, GaussianFit, MemoryBank, ScoreSeries, VelocityBank,
};
use crate::series::{load_series, znormalize, LabeledSeries};
use crate::training::{refresh_statistics, train, write_trace_csv, TraceRow, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Mahalanobis,
    MemoryBank,
}

impl std::str::FromStr for Scorer {
    type Err = VaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Scorer::Mahalanobis),
            "memory_bank" | "memory-bank" => Ok(Scorer::MemoryBank),
            other => Err(VaceError::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "P")]
    pub patch_len: usize,
    pub delta: usize,
    pub d_z: usize,
    pub c_e: usize,
    pub steps: usize,
    pub batch_anchors: usize,
    pub w: f64,
    #[serde(rename = "K_cap")]
    pub k_cap: usize,
    pub k_np: usize,
    pub seeds: Vec<u64>,
    pub channel_encoder: bool,
    pub velocity_pretext: bool,
    pub scorer: Scorer,
    pub velocity_scoring: bool,
    pub batchnorm: bool,
    #[serde(rename = "vus_L")]
    pub vus_max_buffer: usize,
    pub vus_grid: usize,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub global_znorm: bool,
    pub kernel_sizes: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub eps_vel: f64,
    pub memory_bank_k: usize,
    pub memory_bank_cap: usize,
    pub max_thresholds: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_len: 96,
            delta: 48,
            d_z: 64,
            c_e: 8,
            steps: 20,
            batch_anchors: 512,
            w: 1.0,
            k_cap: 500,
            k_np: 3,
            seeds: (0..10).collect(),
            channel_encoder: true,
            velocity_pretext: true,
            scorer: Scorer::Mahalanobis,
            velocity_scoring: true,
            batchnorm: true,
            vus_max_buffer: 48,
            vus_grid: 9,
            out: None,
            workers: 1,
            global_znorm: true,
            kernel_sizes: vec![9, 7, 5, 3],
            lr: 1e-3,
            weight_decay: 1e-4,
            lambda_start: 1.0,
            lambda_end: 0.1,
            eps_vel: 1e-6,
            memory_bank_k: MemoryBank::DEFAULT_K,
            memory_bank_cap: MemoryBank::DEFAULT_CAP,
            max_thresholds: Some(1000),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| VaceError::Config(format!("bad run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| VaceError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(VaceError::Config(m.into()));
        if self.patch_len < 2 {
            return fail("P must be at least 2");
        }
        if self.delta == 0 {
            return fail("delta must be at least 1");
        }
        if self.batch_anchors == 0 || self.k_cap == 0 || self.k_np == 0 || self.workers == 0 {
            return fail("batch_anchors, K_cap, k_np and workers must be positive");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return fail("w must be finite and non-negative");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps_vel > 0.0) {
            return fail("lr and eps_vel must be positive and weight_decay non-negative");
        }
        if self.vus_grid == 0 || self.memory_bank_k == 0 || self.memory_bank_cap == 0 {
            return fail("vus_grid and the memory-bank sizes must be positive");
        }
        self.encoder_config(1, 0).validate()?;
        self.train_config(0).validate()
    }

    pub fn encoder_config(&self, channels: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            channels,
            patch_len: self.patch_len,
            d_z: self.d_z,
            c_e: self.c_e,
            kernel_sizes: self.kernel_sizes.clone(),
            variant: if self.channel_encoder {
                EncoderVariant::ChannelAware
            } else {
                EncoderVariant::SharedKernel
            },
            batchnorm: self.batchnorm,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_anchors: self.batch_anchors,
            delta: self.delta,
            lr: self.lr,
            weight_decay: self.weight_decay,
            lambda_start: self.lambda_start,
            lambda_end: self.lambda_end,
            eps_vel: self.eps_vel,
            seed,
        }
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            k_cap: self.k_cap,
            k_np: self.k_np,
            eps_vel: self.eps_vel,
            ..BankConfig::default()
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            vus_max_buffer: self.vus_max_buffer,
            vus_grid: self.vus_grid,
            max_thresholds: self.max_thresholds,
        }
    }

    /// Name of the ablation this configuration corresponds to, or `custom`.
    pub fn variant_label(&self) -> String {
        let base = RunConfig {
            channel_encoder: true,
            velocity_pretext: true,
            scorer: Scorer::Mahalanobis,
            velocity_scoring: true,
            batchnorm: true,
            ..self.clone()
        };
        Variant::ALL
            .iter()
            .find(|v| v.apply(&base) == *self)
            .map_or_else(|| "custom".to_string(), |v| v.name().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoChannelEncoder,
    NoVelocityPretext,
    NoMahalanobis,
    NoVelocityScoring,
    /// Only used for geometry diagnostics.
    NoBatchnorm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoChannelEncoder,
        Variant::NoVelocityPretext,
        Variant::NoMahalanobis,
        Variant::NoVelocityScoring,
        Variant::NoBatchnorm,
    ];

    pub const DETECTION: [Variant; 5] = [
        Variant::Full,
        Variant::NoChannelEncoder,
        Variant::NoVelocityPretext,
        Variant::NoMahalanobis,
        Variant::NoVelocityScoring,
    ];

    pub const GEOMETRY: [Variant; 3] = [Variant::Full, Variant::NoVelocityPretext, Variant::NoBatchnorm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoChannelEncoder => "no_channel_encoder",
            Variant::NoVelocityPretext => "no_velocity_pretext",
            Variant::NoMahalanobis => "no_mahalanobis",
            Variant::NoVelocityScoring => "no_velocity_scoring",
            Variant::NoBatchnorm => "no_batchnorm",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoChannelEncoder => c.channel_encoder = false,
            Variant::NoVelocityPretext => c.velocity_pretext = false,
            Variant::NoMahalanobis => c.scorer = Scorer::MemoryBank,
            Variant::NoVelocityScoring => c.velocity_scoring = false,
            Variant::NoBatchnorm => c.batchnorm = false,
        }
        c
    }
}

/// Independent per-stage seed derived from a run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut x = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const ENCODER_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const BANK_STREAM: u64 = 3;
const MEMORY_STREAM: u64 = 4;

/// Fitted normal model for a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalModel {
    pub config: RunConfig,
    pub seed: u64,
    pub gaussian: Option<GaussianFit>,
    pub memory_bank: Option<MemoryBank>,
    pub velocity_bank: Option<VelocityBank>,
}

impl NormalModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: NormalModel =
            serde_json::from_str(text).map_err(|e| VaceError::Format(format!("bad normal model: {e}")))?;
        if model.gaussian.is_none() && model.memory_bank.is_none() {
            return Err(VaceError::Format("normal model has no positional component".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRun {
    pub series: String,
    pub seed: u64,
    pub variant: String,
    pub anomaly_ratio: f64,
    pub scores: ScoreSeries,
    pub eval: EvalResult,
    pub geometry: Option<GeometryReport>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub encoder: EncoderParams,
    pub model: NormalModel,
}

pub fn run_series(series: &LabeledSeries, config: &RunConfig, seed: u64) -> Result<SeriesRun> {
    run_series_full(series, config, seed).map(|(run, _)| run)
}

/// Full pipeline for one series and seed, also returning the trained
/// encoder and fitted model.
pub fn run_series_full(series: &LabeledSeries, config: &RunConfig, seed: u64) -> Result<(SeriesRun, RunArtifacts)> {
    let name = series.name.as_str();
    let at = |stage: &'static str| move |e: VaceError| e.at_stage(name, stage);
    config.validate().map_err(at("config"))?;
    let labels = series
        .labels
        .as_ref()
        .ok_or_else(|| VaceError::DegenerateLabels("series has no labels".into()))
        .map_err(at("metrics"))?;
    if series.test_len() <= config.patch_len {
        return Err(VaceError::InsufficientLength {
            len: series.test_len(),
            patch_len: config.patch_len + 1,
        })
        .map_err(at("patching"));
    }
    let x = if config.global_znorm {
        znormalize(series)
    } else {
        series.clone()
    };
    let train_patches = extract_patches(&x.train_values(), config.patch_len)
        .map_err(at("patching"))?
        .normalized();
    let test_patches = extract_patches(&x.test_values(), config.patch_len)
        .map_err(at("patching"))?
        .normalized();

    let encoder_config = config.encoder_config(series.channels(), stage_seed(seed, ENCODER_STREAM));
    let mut encoder = init_encoder(&encoder_config).map_err(at("encoder"))?;
    let mut trace = Vec::new();
    if config.velocity_pretext {
        let outcome = train(
            encoder,
            &train_patches,
            &config.train_config(stage_seed(seed, TRAIN_STREAM)),
        )
        .map_err(at("training"))?;
        encoder = outcome.params;
        trace = outcome.trace;
    } else {
        refresh_statistics(&mut encoder, &train_patches.patches).map_err(at("training"))?;
        encoder.set_training(false);
    }

    let z_train = encoder.embed(&train_patches.patches).map_err(at("embedding"))?;
    let z_test = encoder.embed(&test_patches.patches).map_err(at("embedding"))?;

    let (gaussian, memory_bank, s_p) = match config.scorer {
        Scorer::Mahalanobis => {
            let fit = fit_gaussian(&z_train).map_err(at("fitting"))?;
            let s: Vec<f64> = z_test.iter_rows().map(|z| positional_score(z, &fit)).collect();
            (Some(fit), None, s)
        }
        Scorer::MemoryBank => {
            let bank = MemoryBank::build(
                &z_train,
                config.memory_bank_k,
                config.memory_bank_cap,
                stage_seed(seed, MEMORY_STREAM),
            )
            .map_err(at("fitting"))?;
            let s: Vec<f64> = z_test.iter_rows().map(|z| memory_bank_score(z, &bank)).collect();
            (None, Some(bank), s)
        }
    };
    let velocity_bank = if config.velocity_scoring {
        Some(
            build_velocity_bank(
                &z_train,
                config.delta,
                stage_seed(seed, BANK_STREAM),
                &config.bank_config(),
            )
            .map_err(at("velocity_bank"))?,
        )
    } else {
        None
    };

    let mut scores = score_with_positional(&z_test, s_p, velocity_bank.as_ref(), config.w, config.eps_vel);
    scores.point_scores = patch_to_point(&scores.s, config.patch_len, series.test_len()).map_err(at("scoring"))?;
    let eval = evaluate(&scores.point_scores, labels, &config.metrics_config()).map_err(at("metrics"))?;
    let geometry = match geometry_report(&z_train) {
        Ok(g) => Some(g),
        Err(e) => {
            scores.warnings.push(format!("geometry unavailable: {e}"));
            None
        }
    };

    let run = SeriesRun {
        series: series.name.clone(),
        seed,
        variant: config.variant_label(),
        anomaly_ratio: series.anomaly_ratio(),
        scores,
        eval,
        geometry,
        trace,
    };
    let model = NormalModel {
        config: config.clone(),
        seed,
        gaussian,
        memory_bank,
        velocity_bank,
    };
    Ok((run, RunArtifacts { encoder, model }))
}

/// Dataset family: the file stem up to the first underscore.
pub fn category(series_name: &str) -> &str {
    series_name.split('_').next().unwrap_or(series_name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub series: String,
    pub seed: u64,
    pub variant: String,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

impl MetricsRecord {
    pub fn from_run(run: &SeriesRun) -> Self {
        Self {
            series: run.series.clone(),
            seed: run.seed,
            variant: run.variant.clone(),
            metrics: run.eval.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub series: String,
    pub category: String,
    pub seed: u64,
    pub variant: String,
    pub anomaly_ratio: f64,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub series: String,
    pub seed: Option<u64>,
    pub variant: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMean {
    pub series: String,
    pub category: String,
    pub anomaly_ratio: f64,
    pub seeds: usize,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub bin: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub series: usize,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub variant: String,
    pub rows: Vec<ResultRow>,
    pub errors: Vec<ErrorRecord>,
    pub per_series: Vec<SeriesMean>,
    /// Mean over seeds, then over series.
    pub aggregate: Option<EvalResult>,
    pub per_category: BTreeMap<String, EvalResult>,
    pub density_bins: Vec<DensityBin>,
}

/// 0 when every run succeeded, 2 on partial failure, 1 when nothing ran.
pub fn exit_code(successes: usize, failures: usize) -> i32 {
    match (successes, failures) {
        (0, _) => 1,
        (_, 0) => 0,
        _ => 2,
    }
}

impl BenchSummary {
    pub fn exit_code(&self) -> i32 {
        exit_code(self.rows.len(), self.errors.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VaceError::Format(format!("bad summary: {e}")))
    }

    pub fn from_rows(variant: &str, rows: Vec<ResultRow>, errors: Vec<ErrorRecord>) -> Self {
        let mut grouped: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
        for r in &rows {
            grouped.entry(&r.series).or_default().push(r);
        }
        let per_series: Vec<SeriesMean> = grouped
            .into_iter()
            .map(|(series, rs)| SeriesMean {
                series: series.to_string(),
                category: rs[0].category.clone(),
                anomaly_ratio: rs[0].anomaly_ratio,
                seeds: rs.len(),
                metrics: EvalResult::mean(&rs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())
                    .expect("non-empty group"),
            })
            .collect();
        let aggregate = EvalResult::mean(&per_series.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>());
        let mut by_category: BTreeMap<String, Vec<EvalResult>> = BTreeMap::new();
        for s in &per_series {
            by_category
                .entry(s.category.clone())
                .or_default()
                .push(s.metrics.clone());
        }
        let per_category = by_category
            .into_iter()
            .map(|(k, v)| (k, EvalResult::mean(&v).expect("non-empty category")))
            .collect();
        let density_bins = density_bins(&per_series, 4);
        Self {
            variant: variant.to_string(),
            rows,
            errors,
            per_series,
            aggregate,
            per_category,
            density_bins,
        }
    }
}

/// Equal-count bins of series ordered by anomaly ratio.
pub fn density_bins(per_series: &[SeriesMean], bins: usize) -> Vec<DensityBin> {
    let mut sorted: Vec<&SeriesMean> = per_series.iter().collect();
    sorted.sort_by(|a, b| {
        a.anomaly_ratio
            .total_cmp(&b.anomaly_ratio)
            .then(a.series.cmp(&b.series))
    });
    let n = sorted.len();
    (0..bins)
        .filter_map(|b| {
            let members = &sorted[b * n / bins..(b + 1) * n / bins];
            let metrics = EvalResult::mean(&members.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>())?;
            Some(DensityBin {
                bin: b,
                min_ratio: members[0].anomaly_ratio,
                max_ratio: members[members.len() - 1].anomaly_ratio,
                series: members.len(),
                metrics,
            })
        })
        .collect()
}

/// Conforming series files in a directory, sorted by name.
pub fn list_series(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| VaceError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(VaceError::NoInput(format!("no CSV series in {}", dir.display())));
    }
    Ok(paths)
}

/// Every loadable series of a directory, plus a record per unreadable file.
pub fn load_directory(dir: &Path) -> Result<(Vec<LabeledSeries>, Vec<ErrorRecord>)> {
    let mut series = Vec::new();
    let mut errors = Vec::new();
    for path in list_series(dir)? {
        match load_series(&path, None) {
            Ok(s) => series.push(s),
            Err(e) => errors.push(ErrorRecord {
                series: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                seed: None,
                variant: String::new(),
                message: e.at_stage(&path.display().to_string(), "load").to_string(),
            }),
        }
    }
    Ok((series, errors))
}

/// Every (series, seed, configuration) job on a pool of `workers` threads.
/// Results come back sorted by series, seed and variant whatever the
/// scheduling.
pub fn run_jobs(
    series: &[LabeledSeries],
    configs: &[RunConfig],
    workers: usize,
) -> Result<Vec<std::result::Result<SeriesRun, ErrorRecord>>> {
    let mut jobs: Vec<(&LabeledSeries, &RunConfig, u64)> = Vec::new();
    for s in series {
        for c in configs {
            for &seed in &c.seeds {
                jobs.push((s, c, seed));
            }
        }
    }
    let labels: Vec<String> = configs.iter().map(RunConfig::variant_label).collect();
    jobs.sort_by(|a, b| {
        a.0.name
            .cmp(&b.0.name)
            .then(a.2.cmp(&b.2))
            .then_with(|| variant_of(&labels, configs, a.1).cmp(variant_of(&labels, configs, b.1)))
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| VaceError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(s, c, seed)| {
                run_series(s, c, seed).map_err(|e| ErrorRecord {
                    series: s.name.clone(),
                    seed: Some(seed),
                    variant: c.variant_label(),
                    message: e.to_string(),
                })
            })
            .collect()
    }))
}

fn variant_of<'a>(labels: &'a [String], configs: &[RunConfig], c: &RunConfig) -> &'a str {
    let i = configs
        .iter()
        .position(|x| std::ptr::eq(x, c))
        .expect("job config comes from the list");
    &labels[i]
}

fn result_row(run: &SeriesRun) -> ResultRow {
    ResultRow {
        series: run.series.clone(),
        category: category(&run.series).to_string(),
        seed: run.seed,
        variant: run.variant.clone(),
        anomaly_ratio: run.anomaly_ratio,
        metrics: run.eval.clone(),
    }
}

fn split(outcomes: Vec<std::result::Result<SeriesRun, ErrorRecord>>) -> (Vec<SeriesRun>, Vec<ErrorRecord>) {
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(e) => errors.push(e),
        }
    }
    (runs, errors)
}

/// Runs over preloaded series; per-run files are written when `config.out`
/// is set.
pub fn benchmark_series(series: &[LabeledSeries], config: &RunConfig) -> Result<(BenchSummary, Vec<SeriesRun>)> {
    config.validate()?;
    let (runs, errors) = split(run_jobs(series, std::slice::from_ref(config), config.workers)?);
    if let Some(out) = &config.out {
        write_runs(out, &runs, series)?;
    }
    let rows = runs.iter().map(result_row).collect();
    Ok((BenchSummary::from_rows(&config.variant_label(), rows, errors), runs))
}

pub fn run_benchmark(dir: &Path, config: &RunConfig) -> Result<BenchSummary> {
    config.validate()?;
    let (series, load_errors) = load_directory(dir)?;
    let (mut summary, _) = benchmark_series(&series, config)?;
    let mut errors = load_errors;
    errors.append(&mut summary.errors);
    summary.errors = errors;
    if let Some(out) = &config.out {
        write_text(&out.join("summary.json"), &summary.to_json())?;
    }
    Ok(summary)
}

pub fn run_stem(run: &SeriesRun) -> String {
    format!("{}__seed{}__{}", run.series, run.seed, run.variant)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| VaceError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| VaceError::io(path, e))
}

/// Scores CSV, metrics JSON and loss trace for every run, one after another.
pub fn write_runs(out: &Path, runs: &[SeriesRun], series: &[LabeledSeries]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| VaceError::io(out, e))?;
    for run in runs {
        let stem = run_stem(run);
        let labels = series
            .iter()
            .find(|s| s.name == run.series)
            .and_then(|s| s.labels.as_deref());
        write_scores_csv(&run.scores, labels, create(&out.join(format!("{stem}.scores.csv")))?)?;
        let metrics = serde_json::to_string_pretty(&MetricsRecord::from_run(run)).expect("metrics serialize");
        write_text(&out.join(format!("{stem}.metrics.json")), &metrics)?;
        if !run.trace.is_empty() {
            write_trace_csv(&run.trace, create(&out.join(format!("{stem}.trace.csv")))?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub series: usize,
    pub delta_vus_pr: f64,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<BenchSummary>,
    pub geometry: Vec<GeometryRow>,
    pub errors: Vec<ErrorRecord>,
}

impl AblationReport {
    pub fn exit_code(&self) -> i32 {
        let ok: usize = self.summaries.iter().map(|s| s.rows.len()).sum();
        exit_code(ok, self.errors.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation report serializes")
    }
}

/// Seed-averaged geometry per (series, variant).
fn geometry_rows(runs: &[SeriesRun]) -> Vec<GeometryRow> {
    let mut grouped: BTreeMap<(&str, &str), Vec<&GeometryReport>> = BTreeMap::new();
    for r in runs {
        if let Some(g) = &r.geometry {
            grouped.entry((&r.series, &r.variant)).or_default().push(g);
        }
    }
    grouped
        .into_iter()
        .map(|((series, variant), gs)| {
            let n = gs.len() as f64;
            let mean = |f: fn(&GeometryReport) -> f64| gs.iter().map(|g| f(g)).sum::<f64>() / n;
            GeometryRow {
                series: series.to_string(),
                variant: variant.to_string(),
                seed: None,
                rho_pr_norm: mean(|g| g.rho_pr_norm),
                rho_h_norm: mean(|g| g.rho_h_norm),
                active_fraction: mean(|g| g.active_fraction),
                top1_fraction: mean(|g| g.top1_fraction),
            }
        })
        .collect()
}

fn run_variants(
    series: &[LabeledSeries],
    base: &RunConfig,
    variants: &[Variant],
) -> Result<(Vec<SeriesRun>, Vec<ErrorRecord>)> {
    base.validate()?;
    let configs: Vec<RunConfig> = variants.iter().map(|v| v.apply(base)).collect();
    let (runs, errors) = split(run_jobs(series, &configs, base.workers)?);
    if let Some(out) = &base.out {
        write_runs(out, &runs, series)?;
    }
    Ok((runs, errors))
}

/// Ablation matrix over preloaded series.
pub fn ablate_series(series: &[LabeledSeries], base: &RunConfig) -> Result<AblationReport> {
    let (runs, errors) = run_variants(series, base, &Variant::ALL)?;
    let summaries: Vec<BenchSummary> = Variant::DETECTION
        .iter()
        .map(|v| {
            let rows = runs.iter().filter(|r| r.variant == v.name()).map(result_row).collect();
            let errs = errors.iter().filter(|e| e.variant == v.name()).cloned().collect();
            BenchSummary::from_rows(v.name(), rows, errs)
        })
        .collect();
    let full_vus = summaries[0].aggregate.as_ref().map(|a| a.vus_pr);
    let rows = summaries
        .iter()
        .filter_map(|s| {
            let metrics = s.aggregate.clone()?;
            Some(AblationRow {
                variant: s.variant.clone(),
                series: s.per_series.len(),
                delta_vus_pr: full_vus.map_or(f64::NAN, |f| metrics.vus_pr - f),
                metrics,
            })
        })
        .collect();
    let geometry = geometry_rows(&runs);
    Ok(AblationReport {
        rows,
        summaries,
        geometry,
        errors,
    })
}

pub fn run_ablations(dir: &Path, base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    let (series, load_errors) = load_directory(dir)?;
    let mut report = ablate_series(&series, base)?;
    let mut errors = load_errors;
    errors.append(&mut report.errors);
    report.errors = errors;
    if let Some(out) = &base.out {
        write_text(&out.join("ablation.json"), &report.to_json())?;
        write_geometry_csv(&report.geometry, create(&out.join("geometry.csv"))?)?;
    }
    Ok(report)
}

/// Geometry diagnostics for the full model and the two collapse-prone
/// variants.
pub fn run_geometry(dir: &Path, base: &RunConfig) -> Result<(Vec<GeometryRow>, Vec<ErrorRecord>)> {
    base.validate()?;
    let (series, mut errors) = load_directory(dir)?;
    let (runs, mut run_errors) = run_variants(&series, base, &Variant::GEOMETRY)?;
    errors.append(&mut run_errors);
    let rows = geometry_rows(&runs);
    if let Some(out) = &base.out {
        write_geometry_csv(&rows, create(&out.join("geometry.csv"))?)?;
    }
    Ok((rows, errors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub series: usize,
    pub vus_pr: f64,
    pub vus_roc: f64,
}

/// One-at-a-time grid around the base configuration.
pub fn sensitivity_grid(base: &RunConfig) -> Vec<(&'static str, f64, RunConfig)> {
    let mut out = Vec::new();
    for p in [48usize, 96, 128] {
        out.push((
            "P",
            p as f64,
            RunConfig {
                patch_len: p,
                ..base.clone()
            },
        ));
    }
    for d in [24usize, 48, 96] {
        out.push((
            "delta",
            d as f64,
            RunConfig {
                delta: d,
                ..base.clone()
            },
        ));
    }
    for s in [10usize, 20, 40] {
        out.push((
            "steps",
            s as f64,
            RunConfig {
                steps: s,
                ..base.clone()
            },
        ));
    }
    for w in [0.5, 1.0, 2.0] {
        out.push(("w", w, RunConfig { w, ..base.clone() }));
    }
    for c in [4usize, 8, 16] {
        out.push(("c_e", c as f64, RunConfig { c_e: c, ..base.clone() }));
    }
    out
}

pub fn sweep_series(series: &[LabeledSeries], base: &RunConfig) -> Result<(Vec<SweepRow>, Vec<ErrorRecord>)> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut cache: Vec<(RunConfig, Option<EvalResult>, usize)> = Vec::new();
    for (parameter, value, config) in sensitivity_grid(base) {
        let found = cache.iter().find(|c| c.0 == config).map(|c| (c.1.clone(), c.2));
        let (aggregate, n) = match found {
            Some(hit) => hit,
            None => {
                let config = RunConfig {
                    out: None,
                    ..config.clone()
                };
                let (summary, _) = benchmark_series(series, &config)?;
                errors.extend(summary.errors.iter().cloned());
                let entry = (summary.aggregate.clone(), summary.per_series.len());
                cache.push((config, entry.0.clone(), entry.1));
                entry
            }
        };
        if let Some(a) = aggregate {
            rows.push(SweepRow {
                parameter: parameter.to_string(),
                value,
                series: n,
                vus_pr: a.vus_pr,
                vus_roc: a.vus_roc,
            });
        }
    }
    Ok((rows, errors))
}

pub fn run_sensitivity(dir: &Path, base: &RunConfig) -> Result<(Vec<SweepRow>, Vec<ErrorRecord>)> {
    let (series, mut errors) = load_directory(dir)?;
    let (rows, mut run_errors) = sweep_series(&series, base)?;
    errors.append(&mut run_errors);
    if let Some(out) = &base.out {
        fs::create_dir_all(out).map_err(|e| VaceError::io(out, e))?;
        let mut w = csv::Writer::from_writer(create(&out.join("sensitivity.csv"))?);
        for r in &rows {
            w.serialize(r).map_err(|e| VaceError::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| VaceError::io(out, e))?;
    }
    Ok((rows, errors))
}
