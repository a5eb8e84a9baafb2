//! Evaluation runs, sweeps, replay recording, conflict scans and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{input_variance, AugError};
use crate::conflict::{sweep_fig10, write_fig10_csv, ConflictError, Fig10Row, SweepOptions, FIG10_MUS, FIG10_SIGMAS};
use crate::ensemble::{
    detect_conflict, logit_average, nss, stable_tta_aggregate, topk_accuracy, EnsembleError, LogitMatrix, StrategyPair,
};
use crate::providers::replay::{AtomicFile, ReplayWriter};
use crate::providers::{
    AugMode, LiveConfig, LiveSource, LogitSource, ProviderError, ReplayError, ReplaySource, SyntheticSource,
    SyntheticTaskSpec,
};
use crate::stats::{
    default_alpha_grid, holder_fit, jb_over_groups, jensen_bound_check, logit_variance, write_ecdf_csv, write_jb_csv,
    HolderFit, StatsError, VarianceReport,
};
use crate::tensor::PreprocessConfig;

pub const DEFAULT_N: usize = 32;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_N_GRID: [usize; 4] = [4, 8, 16, 32];
/// `C` is appended at run time.
pub const DEFAULT_K_GRID: [usize; 5] = [1, 2, 5, 10, 20];

const TOPK_TIE_CAVEAT: &str = "K < 5: suppressed classes share the row minimum, so acc@5 ranks them by lowest class index";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Augment(#[from] AugError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 2 for provider or protocol failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Provider(ProviderError::InvalidConfig(_)) => 1,
            HarnessError::Provider(_) | HarnessError::Replay(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Tta,
    StableTta,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Tta => "tta",
            Method::StableTta => "stable_tta",
        })
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "tta" => Ok(Method::Tta),
            "stable_tta" | "stabletta" => Ok(Method::StableTta),
            other => Err(HarnessError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Where logits come from. The run seed replaces the synthetic and live
/// seeds; replay files are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProviderSpec {
    Synthetic(SyntheticTaskSpec),
    Replay {
        path: PathBuf,
    },
    Adapter {
        command: String,
        manifest: PathBuf,
        preprocess: PreprocessConfig,
        timeout_secs: f64,
    },
}

impl ProviderSpec {
    pub fn adapter(command: impl Into<String>, manifest: impl Into<PathBuf>) -> Self {
        ProviderSpec::Adapter {
            command: command.into(),
            manifest: manifest.into(),
            preprocess: PreprocessConfig::default(),
            timeout_secs: 60.0,
        }
    }

    pub fn open(&self, seed: u64, aug: &AugMode, batch_size: usize) -> Result<Box<dyn LogitSource>, HarnessError> {
        Ok(match self {
            ProviderSpec::Synthetic(spec) => Box::new(SyntheticSource::new(SyntheticTaskSpec { seed, ..*spec })?),
            ProviderSpec::Replay { path } => Box::new(ReplaySource::open(path)?),
            ProviderSpec::Adapter { .. } => Box::new(self.open_live(seed, aug, batch_size)?),
        })
    }

    pub fn open_live(&self, seed: u64, aug: &AugMode, batch_size: usize) -> Result<LiveSource, HarnessError> {
        match self {
            ProviderSpec::Adapter {
                command,
                manifest,
                preprocess,
                timeout_secs,
            } => {
                if !(*timeout_secs > 0.0) {
                    return Err(HarnessError::Config("adapter timeout must be positive".into()));
                }
                let cfg = LiveConfig {
                    command: command.clone(),
                    manifest: manifest.clone(),
                    preprocess: preprocess.clone(),
                    aug: aug.clone(),
                    batch_size,
                    timeout: Duration::from_secs_f64(*timeout_secs),
                    seed,
                };
                Ok(LiveSource::open(&cfg)?)
            }
            _ => Err(HarnessError::Config("this operation needs the adapter provider".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: Method,
    pub n_experts: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub provider: ProviderSpec,
    pub aug: AugMode,
}

impl EvalConfig {
    pub fn new(method: Method, provider: ProviderSpec) -> Self {
        Self {
            method,
            n_experts: DEFAULT_N,
            k: DEFAULT_K,
            seeds: DEFAULT_SEEDS.to_vec(),
            batch_size: DEFAULT_BATCH_SIZE,
            provider,
            aug: AugMode::default(),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.n_experts == 0 {
            return Err(HarnessError::Config("N must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(HarnessError::Config("K must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// `(N, K)` actually used: baseline runs one pass, tta keeps all classes.
    pub fn effective(&self, num_classes: usize) -> Result<(usize, usize), HarnessError> {
        let n = match self.method {
            Method::Baseline => 1,
            _ => self.n_experts,
        };
        let k = match self.method {
            Method::StableTta => {
                if self.k > num_classes {
                    return Err(HarnessError::Config(format!(
                        "K = {} exceeds the {num_classes} classes",
                        self.k
                    )));
                }
                self.k
            }
            _ => num_classes,
        };
        Ok((n, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub acc1: f64,
    pub acc5: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub n_experts: usize,
    pub k: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub per_seed: Vec<SeedResult>,
    pub acc1_mean: f64,
    pub acc1_std: f64,
    pub acc5_mean: f64,
    pub acc5_std: f64,
    pub skipped: usize,
    pub caveat: Option<String>,
    pub config: EvalConfig,
}

/// Mean and sample standard deviation (`n - 1` divisor; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn aggregate(method: Method, m: &LogitMatrix, k: usize) -> Result<Vec<f64>, EnsembleError> {
    Ok(match method {
        Method::Baseline => m.rows()[0].values().to_vec(),
        Method::Tta => logit_average(m).1.into_values(),
        Method::StableTta => stable_tta_aggregate(m, k)?.1.into_values(),
    })
}

/// Per-sample logits, fetched in parallel when the source allows it.
/// Samples with non-finite logits come back as `None`.
fn collect_samples(
    source: &dyn LogitSource,
    n: usize,
    augmented: bool,
) -> Result<Vec<Option<LogitMatrix>>, HarnessError> {
    let fetch = |i: usize| match source.sample_logits(i, n, augmented) {
        Ok(m) => Ok(Some(m)),
        Err(ProviderError::Ensemble(EnsembleError::NonFinite(_))) => Ok(None),
        Err(e) => Err(HarnessError::from(e)),
    };
    if source.parallel() {
        (0..source.num_samples()).into_par_iter().map(fetch).collect()
    } else {
        (0..source.num_samples()).map(fetch).collect()
    }
}

fn score(
    samples: &[Option<LogitMatrix>],
    labels: &[usize],
    method: Method,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<SeedResult, HarnessError> {
    let c = samples
        .iter()
        .flatten()
        .map(LogitMatrix::n_classes)
        .next()
        .ok_or_else(|| HarnessError::Config("every sample was skipped".into()))?;
    let top5 = c.min(5);
    let hits = samples
        .par_iter()
        .zip(labels)
        .filter_map(|(m, &label)| m.as_ref().map(|m| (m, label)))
        .map(|(m, label)| {
            let rows = LogitMatrix::new(m.rows()[..n].to_vec())?;
            let agg = aggregate(method, &rows, k)?;
            Ok((
                topk_accuracy(&agg, label, 1)? as usize,
                topk_accuracy(&agg, label, top5)? as usize,
            ))
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    let evaluated = hits.len();
    let (h1, h5) = hits.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok(SeedResult {
        seed,
        acc1: 100.0 * h1 as f64 / evaluated as f64,
        acc5: 100.0 * h5 as f64 / evaluated as f64,
        evaluated,
        skipped: samples.len() - evaluated,
    })
}

fn finish_report(cfg: &EvalConfig, n: usize, k: usize, c: usize, m: usize, per_seed: Vec<SeedResult>) -> EvalReport {
    let acc1: Vec<f64> = per_seed.iter().map(|s| s.acc1).collect();
    let acc5: Vec<f64> = per_seed.iter().map(|s| s.acc5).collect();
    let (acc1_mean, acc1_std) = mean_std(&acc1);
    let (acc5_mean, acc5_std) = mean_std(&acc5);
    EvalReport {
        method: cfg.method,
        n_experts: n,
        k,
        num_classes: c,
        num_samples: m,
        skipped: per_seed.iter().map(|s| s.skipped).sum(),
        per_seed,
        acc1_mean,
        acc1_std,
        acc5_mean,
        acc5_std,
        caveat: (cfg.method == Method::StableTta && k < 5 && c > 5).then(|| TOPK_TIE_CAVEAT.to_string()),
        config: cfg.clone(),
    }
}

pub fn evaluate(cfg: &EvalConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut shape = (0, 0, 0, 0);
    for &seed in &cfg.seeds {
        let source = cfg.provider.open(seed, &cfg.aug, cfg.batch_size)?;
        let c = source.num_classes();
        let (n, k) = cfg.effective(c)?;
        let labels: Vec<usize> = (0..source.num_samples()).map(|i| source.label(i)).collect();
        let samples = collect_samples(source.as_ref(), n, cfg.method != Method::Baseline)?;
        per_seed.push(score(&samples, &labels, cfg.method, n, k, seed)?);
        shape = (n, k, c, labels.len());
    }
    let (n, k, c, m) = shape;
    Ok(finish_report(cfg, n, k, c, m, per_seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub acc1_mean: f64,
    pub acc1_std: f64,
    pub acc5_mean: f64,
    pub acc5_std: f64,
}

/// K values to run: sorted, deduplicated, `K > C` dropped.
pub fn resolve_k_grid(k_grid: &[usize], num_classes: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = k_grid.iter().copied().filter(|&k| k >= 1 && k <= num_classes).collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// One evaluation per `(N, K)` cell on shared seeds. Logits are fetched
/// once per seed at the largest `N`; pass `i` does not depend on `N`, so
/// every cell equals a standalone [`evaluate`].
pub fn sweep(template: &EvalConfig, n_grid: &[usize], k_grid: &[usize]) -> Result<Vec<SweepRow>, HarnessError> {
    template.validate()?;
    if n_grid.is_empty() || k_grid.is_empty() {
        return Err(HarnessError::Config("sweep grids must be nonempty".into()));
    }
    if n_grid.contains(&0) {
        return Err(HarnessError::Config("N values must be at least 1".into()));
    }
    let n_max = *n_grid.iter().max().expect("nonempty");
    let mut cells: BTreeMap<(usize, usize), Vec<SeedResult>> = BTreeMap::new();
    let mut ks = Vec::new();
    for &seed in &template.seeds {
        let source = template.provider.open(seed, &template.aug, template.batch_size)?;
        let c = source.num_classes();
        ks = resolve_k_grid(k_grid, c);
        if ks.is_empty() {
            return Err(HarnessError::Config(format!("no K in the grid is within 1..={c}")));
        }
        let labels: Vec<usize> = (0..source.num_samples()).map(|i| source.label(i)).collect();
        let samples = collect_samples(source.as_ref(), n_max, template.method != Method::Baseline)?;
        for &n in n_grid {
            for &k in &ks {
                let cell = EvalConfig {
                    n_experts: n,
                    k,
                    ..template.clone()
                };
                let (n_eff, k_eff) = cell.effective(c)?;
                let result = score(&samples, &labels, template.method, n_eff, k_eff, seed)?;
                cells.entry((n, k)).or_default().push(result);
            }
        }
    }
    let mut rows = Vec::new();
    for &n in n_grid {
        for &k in &ks {
            let results = &cells[&(n, k)];
            let acc1: Vec<f64> = results.iter().map(|s| s.acc1).collect();
            let acc5: Vec<f64> = results.iter().map(|s| s.acc5).collect();
            let (acc1_mean, acc1_std) = mean_std(&acc1);
            let (acc5_mean, acc5_std) = mean_std(&acc5);
            rows.push(SweepRow {
                n,
                k,
                acc1_mean,
                acc1_std,
                acc5_mean,
                acc5_std,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "n,k,acc1_mean,acc1_std,acc5_mean,acc5_std")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.n, r.k, r.acc1_mean, r.acc1_std, r.acc5_mean, r.acc5_std
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub num_samples: usize,
    pub num_passes: usize,
    pub num_classes: usize,
}

/// Write `n_passes` augmented logits per sample of `source` to `out`.
/// `wrap` decorates the file handle (buffering, fault injection). On any
/// error the partial file is removed.
pub fn record_source_with<W: Write>(
    source: &dyn LogitSource,
    n_passes: usize,
    out: &Path,
    wrap: impl FnOnce(File) -> W,
) -> Result<RecordSummary, HarnessError> {
    if n_passes == 0 {
        return Err(HarnessError::Config("N must be at least 1".into()));
    }
    let (guard, file) = AtomicFile::create(out)?;
    let (m, c) = (source.num_samples(), source.num_classes());
    let mut writer = ReplayWriter::new(wrap(file), m, n_passes, c)?;
    for i in 0..m {
        let logits = source.sample_logits(i, n_passes, true)?;
        let flat: Vec<f32> = logits.rows().iter().flat_map(|r| r.values().iter().map(|&v| v as f32)).collect();
        let label = u32::try_from(source.label(i)).map_err(|_| HarnessError::Config("label exceeds u32".into()))?;
        writer.write_record(label, &flat)?;
    }
    writer.finish()?;
    guard.commit()?;
    Ok(RecordSummary {
        num_samples: m,
        num_passes: n_passes,
        num_classes: c,
    })
}

pub fn record_source(source: &dyn LogitSource, n_passes: usize, out: &Path) -> Result<RecordSummary, HarnessError> {
    record_source_with(source, n_passes, out, BufWriter::new)
}

/// Record a live adapter run: the passes `evaluate` would use for `seed`.
pub fn record_replay(
    provider: &ProviderSpec,
    aug: &AugMode,
    n_passes: usize,
    seed: u64,
    batch_size: usize,
    out: &Path,
) -> Result<RecordSummary, HarnessError> {
    let source = provider.open_live(seed, aug, batch_size)?;
    record_source(&source, n_passes, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictScanReport {
    pub num_samples: usize,
    pub n_experts: usize,
    pub k: usize,
    pub skipped: usize,
    /// Pair label (e.g. `hard_logit`) to the fraction of samples whose
    /// two predictions differ.
    pub before_nss: BTreeMap<String, f64>,
    pub after_nss: BTreeMap<String, f64>,
    pub any_conflict_before: f64,
    pub any_conflict_after: f64,
}

pub fn conflict_scan(source: &dyn LogitSource, n: usize, k: usize) -> Result<ConflictScanReport, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Config("N must be at least 1".into()));
    }
    let c = source.num_classes();
    if k == 0 || k > c {
        return Err(EnsembleError::KOutOfRange { k, classes: c }.into());
    }
    let samples = collect_samples(source, n, true)?;
    let outcomes: Vec<_> = samples
        .par_iter()
        .flatten()
        .map(|m| {
            let processed = m.map_rows(|r| nss(r, k).expect("K checked against C"));
            (detect_conflict(m), detect_conflict(&processed))
        })
        .collect();
    let total = outcomes.len();
    if total == 0 {
        return Err(HarnessError::Config("every sample was skipped".into()));
    }
    let rate = |count: usize| count as f64 / total as f64;
    let mut before = BTreeMap::new();
    let mut after = BTreeMap::new();
    for pair in StrategyPair::all() {
        before.insert(pair.label(), rate(outcomes.iter().filter(|(b, _)| b.conflict_pairs.contains(&pair)).count()));
        after.insert(pair.label(), rate(outcomes.iter().filter(|(_, a)| a.conflict_pairs.contains(&pair)).count()));
    }
    Ok(ConflictScanReport {
        num_samples: source.num_samples(),
        n_experts: n,
        k,
        skipped: samples.len() - total,
        before_nss: before,
        after_nss: after,
        any_conflict_before: rate(outcomes.iter().filter(|(b, _)| b.has_conflict()).count()),
        any_conflict_after: rate(outcomes.iter().filter(|(_, a)| a.has_conflict()).count()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JbSummary {
    pub tests: usize,
    pub skipped: usize,
    pub alpha: f64,
    pub rejection_fraction: f64,
}

/// JB test per (image, class) over `n` passes. Writes `jb.csv` and
/// `jb_ecdf.csv` into `out_dir`.
pub fn report_jb(source: &dyn LogitSource, n: usize, alpha: f64, out_dir: &Path) -> Result<JbSummary, HarnessError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HarnessError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    if n < 4 {
        return Err(StatsError::TooFewSamples { needed: 4, got: n }.into());
    }
    let groups: Vec<LogitMatrix> = collect_samples(source, n, true)?.into_iter().flatten().collect();
    let suite = jb_over_groups(&groups, alpha);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let jb_path = out_dir.join("jb.csv");
    write_jb_csv(&suite.records, BufWriter::new(File::create(&jb_path).map_err(io_err(&jb_path))?))
        .map_err(io_err(&jb_path))?;
    let ecdf_path = out_dir.join("jb_ecdf.csv");
    write_ecdf_csv(
        &suite.ecdf.on_grid(&default_alpha_grid()),
        BufWriter::new(File::create(&ecdf_path).map_err(io_err(&ecdf_path))?),
    )
    .map_err(io_err(&ecdf_path))?;
    Ok(JbSummary {
        tests: suite.records.len(),
        skipped: suite.skipped.len(),
        alpha,
        rejection_fraction: suite.rejection_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderRecord {
    pub sample: usize,
    pub fit: HolderFit,
    pub variance: VarianceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub records: Vec<HolderRecord>,
    /// Samples whose passes admit no fit (e.g. the sample is the reference
    /// image, so every pass is identical), with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Hölder fit and variance bound per sample of a live source. Writes
/// `holder.csv` into `out_dir`. Fails if no sample admits a fit.
pub fn report_holder(source: &LiveSource, n: usize, out_dir: &Path) -> Result<HolderReport, HarnessError> {
    if n < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: n }.into());
    }
    let mut records = Vec::with_capacity(source.num_samples());
    let mut skipped = Vec::new();
    let mut last_degenerate = None;
    for sample in 0..source.num_samples() {
        let inputs = source.sample_inputs(sample, n, true)?;
        let logits = source.score(&inputs)?;
        let fit = match holder_fit(&inputs, &logits) {
            Ok(fit) => fit,
            Err(e @ (StatsError::DegenerateRegressor(_) | StatsError::InsufficientPairs(_))) => {
                skipped.push((sample, e.to_string()));
                last_degenerate = Some(e);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let variance = jensen_bound_check(&fit, input_variance(&inputs)?, logit_variance(&logits)?);
        records.push(HolderRecord { sample, fit, variance });
    }
    if records.is_empty() {
        if let Some(e) = last_degenerate {
            return Err(e.into());
        }
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("holder.csv");
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(
            out,
            "sample,c,d,r2,pairs,var_input,var_logits,jensen_bound,power_bound,applicable,satisfied"
        )?;
        for r in &records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.sample,
                r.fit.c,
                r.fit.d,
                r.fit.r2,
                r.fit.pairs_used,
                r.variance.var_input,
                r.variance.var_logits,
                r.variance.jensen_bound,
                r.variance.power_bound,
                r.variance.applicable,
                r.variance.satisfied
            )?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_err(&path))?;
    Ok(HolderReport { records, skipped })
}

/// Conflict-probability grid (closed form vs simulation). Writes
/// `fig10.csv` into `out_dir`.
pub fn report_fig10(opts: &SweepOptions, out_dir: &Path) -> Result<Vec<Fig10Row>, HarnessError> {
    let rows = sweep_fig10(&FIG10_MUS, &FIG10_SIGMAS, opts)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("fig10.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    write_fig10_csv(&rows, BufWriter::new(file)).map_err(io_err(&path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(c: usize, m: usize, sigma: f64) -> ProviderSpec {
        ProviderSpec::Synthetic(SyntheticTaskSpec::new(c, m, 1.0, sigma, 0))
    }

    #[test]
    fn noiseless_is_perfect_for_every_method() {
        for method in [Method::Baseline, Method::Tta, Method::StableTta] {
            let mut cfg = EvalConfig::new(method, synthetic(10, 100, 1e-9));
            cfg.n_experts = 4;
            cfg.k = 3;
            let r = evaluate(&cfg).unwrap();
            assert_eq!(r.acc1_mean, 100.0, "{method}");
            assert_eq!(r.acc1_std, 0.0);
            assert_eq!(r.skipped, 0);
        }
    }

    #[test]
    fn stable_with_k_equal_c_matches_tta() {
        let mut a = EvalConfig::new(Method::StableTta, synthetic(6, 300, 2.0));
        a.n_experts = 8;
        a.k = 6;
        let mut b = a.clone();
        b.method = Method::Tta;
        let (ra, rb) = (evaluate(&a).unwrap(), evaluate(&b).unwrap());
        assert_eq!(ra.per_seed, rb.per_seed);
        assert_eq!(ra.k, rb.k);
    }

    #[test]
    fn effective_parameters() {
        let mut cfg = EvalConfig::new(Method::Baseline, synthetic(10, 10, 1.0));
        assert_eq!(cfg.effective(10).unwrap(), (1, 10));
        cfg.method = Method::Tta;
        assert_eq!(cfg.effective(10).unwrap(), (32, 10));
        cfg.method = Method::StableTta;
        assert_eq!(cfg.effective(10).unwrap(), (32, 10));
        cfg.k = 11;
        assert!(cfg.effective(10).is_err());
    }

    #[test]
    fn mean_std_uses_sample_divisor() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let mut cfg = EvalConfig::new(Method::StableTta, synthetic(10, 200, 2.0));
        cfg.n_experts = 8;
        cfg.k = 3;
        cfg.seeds = vec![4, 9];
        assert_eq!(evaluate(&cfg).unwrap(), evaluate(&cfg).unwrap());
    }

    #[test]
    fn caveat_only_for_small_k() {
        let mut cfg = EvalConfig::new(Method::StableTta, synthetic(10, 20, 1.0));
        cfg.n_experts = 2;
        cfg.seeds = vec![1];
        cfg.k = 3;
        assert!(evaluate(&cfg).unwrap().caveat.is_some());
        cfg.k = 5;
        assert!(evaluate(&cfg).unwrap().caveat.is_none());
    }

    #[test]
    fn k_grid_resolution() {
        assert_eq!(resolve_k_grid(&[1, 2, 5, 10, 20, 10], 10), vec![1, 2, 5, 10]);
        assert_eq!(resolve_k_grid(&[20], 10), Vec::<usize>::new());
    }

    #[test]
    fn single_cell_sweep_equals_evaluate() {
        let mut cfg = EvalConfig::new(Method::StableTta, synthetic(10, 150, 2.0));
        cfg.n_experts = 4;
        cfg.k = 2;
        cfg.seeds = vec![1, 2, 3];
        let report = evaluate(&cfg).unwrap();
        let rows = sweep(&cfg, &[4], &[2]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].acc1_mean, report.acc1_mean);
        assert_eq!(rows[0].acc1_std, report.acc1_std);
        assert_eq!(rows[0].acc5_mean, report.acc5_mean);
        assert_eq!(rows[0].acc5_std, report.acc5_std);
    }

    #[test]
    fn sweep_csv_has_six_decimals() {
        let rows = vec![SweepRow {
            n: 4,
            k: 2,
            acc1_mean: 50.0,
            acc1_std: 1.0 / 3.0,
            acc5_mean: 90.0,
            acc5_std: 0.0,
        }];
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "n,k,acc1_mean,acc1_std,acc5_mean,acc5_std\n4,2,50.000000,0.333333,90.000000,0.000000\n"
        );
    }

    #[test]
    fn conflict_scan_zero_noise_and_bounds() {
        let src = SyntheticSource::new(SyntheticTaskSpec::new(5, 100, 1.0, 1e-9, 0)).unwrap();
        let r = conflict_scan(&src, 8, 2).unwrap();
        assert!(r.before_nss.values().chain(r.after_nss.values()).all(|&v| v == 0.0));

        let src = SyntheticSource::new(SyntheticTaskSpec::new(5, 500, 1.0, 1.5, 0)).unwrap();
        let r = conflict_scan(&src, 8, 1).unwrap();
        assert_eq!(r.before_nss.len(), 3);
        assert!(r.before_nss.values().chain(r.after_nss.values()).all(|&v| (0.0..=1.0).contains(&v)));
        assert!(r.any_conflict_before > 0.0);
    }

    #[test]
    fn record_then_replay_matches_source() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.sttr");
        let spec = SyntheticTaskSpec::new(4, 12, 1.0, 1.0, 3);
        let src = SyntheticSource::new(spec).unwrap();
        let summary = record_source(&src, 5, &out).unwrap();
        assert_eq!(summary.num_samples, 12);
        let replay = ReplaySource::open(&out).unwrap();
        for i in 0..12 {
            let a = src.sample_logits(i, 5, true).unwrap();
            let b = replay.sample_logits(i, 5, true).unwrap();
            for (ra, rb) in a.rows().iter().zip(b.rows()) {
                for (x, y) in ra.values().iter().zip(rb.values()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
            assert_eq!(replay.label(i), src.label(i));
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            HarnessError::Provider(ProviderError::Replay(ReplayError::TruncatedHeader)).exit_code(),
            2
        );
        assert_eq!(HarnessError::Replay(ReplayError::TruncatedHeader).exit_code(), 2);
    }
}
