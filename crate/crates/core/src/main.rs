use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stabletta::augment::{AugPolicyConfig, BaselineAug};
use stabletta::conflict::{write_fig10_csv, AnalyticForm, SweepOptions, TieRule};
use stabletta::harness::{
    self, conflict_scan, evaluate, record_replay, report_fig10, report_holder, report_jb, sweep, write_sweep_csv,
    EvalConfig, HarnessError, Method, ProviderSpec, DEFAULT_K_GRID, DEFAULT_N_GRID,
};
use stabletta::providers::{AugMode, NoiseFamily, SyntheticTaskSpec};
use stabletta::tensor::PreprocessConfig;

#[derive(Parser)]
#[command(name = "stabletta", version, about = "Stabilized test-time augmentation ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate baseline, tta or stable_tta over one or more seeds.
    Eval {
        #[arg(long, value_enum, default_value_t = MethodArg::StableTta)]
        method: MethodArg,
        #[arg(long, default_value_t = harness::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = harness::DEFAULT_K)]
        k: usize,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Accuracy over an N by K grid on shared seeds (CSV).
    Sweep {
        #[arg(long, value_enum, default_value_t = MethodArg::StableTta)]
        method: MethodArg,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_N_GRID)]
        n_grid: Vec<usize>,
        /// Defaults to 1,2,5,10,20 plus the number of classes.
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Record augmented adapter logits into a replay file.
    Record {
        #[arg(long, default_value_t = harness::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Strategy disagreement rates before and after suppression (JSON).
    ConflictScan {
        #[arg(long, default_value_t = harness::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = harness::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Normality, Hölder or conflict-grid reports written as CSV files.
    Stats {
        #[arg(long, value_enum)]
        mode: StatsMode,
        #[arg(long, default_value_t = harness::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = stabletta::stats::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Closed-form vs simulated conflict probability grid (CSV).
    Fig10 {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Tta,
    #[value(name = "stable_tta")]
    StableTta,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Baseline => Method::Baseline,
            MethodArg::Tta => Method::Tta,
            MethodArg::StableTta => Method::StableTta,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderKind {
    Synthetic,
    Replay,
    Adapter,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsMode {
    Jb,
    Holder,
    Fig10,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    Fair,
    Second,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Corrected,
    Density,
    Continuity,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Synthetic)]
    provider: ProviderKind,
    /// CSV manifest with `path,label` rows (adapter provider).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Adapter launch line, run through `sh -c`.
    #[arg(long)]
    adapter_cmd: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    /// Synthetic task: number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Synthetic task: number of samples.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Synthetic task: true-class logit offset.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Synthetic task: noise scale.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    /// Synthetic task: Student-t noise with this many degrees of freedom.
    #[arg(long)]
    student_t: Option<f64>,
    /// `stable`, `identity`, or a comma list of standard augmentations
    /// (hflip, random_crop, random_affine, random_erasing, mixup, cutmix).
    #[arg(long, default_value = "stable")]
    aug: String,
    #[arg(long, default_value_t = 0)]
    reference_seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_delimiter = ',', default_values_t = harness::DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    grid_seed: u64,
    #[arg(long, value_enum, default_value_t = TieArg::Fair)]
    ties: TieArg,
    #[arg(long, value_enum, default_value_t = FormArg::Corrected)]
    form: FormArg,
}

impl GridArgs {
    fn options(&self, n: usize) -> SweepOptions {
        SweepOptions {
            n_experts: n,
            trials: self.trials,
            seed: self.grid_seed,
            ties: match self.ties {
                TieArg::Fair => TieRule::FairCoin,
                TieArg::Second => TieRule::SecondClass,
                TieArg::First => TieRule::FirstClass,
            },
            form: match self.form {
                FormArg::Corrected => AnalyticForm::Corrected,
                FormArg::Density => AnalyticForm::DensityForm,
                FormArg::Continuity => AnalyticForm::ContinuityCorrected,
            },
        }
    }
}

fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, HarnessError> {
    value
        .clone()
        .ok_or_else(|| HarnessError::Config(format!("{flag} is required for this provider")))
}

impl ProviderArgs {
    fn spec(&self) -> Result<ProviderSpec, HarnessError> {
        Ok(match self.provider {
            ProviderKind::Synthetic => {
                let mut spec = SyntheticTaskSpec::new(self.classes, self.samples, self.delta, self.sigma, 0);
                if let Some(dof) = self.student_t {
                    spec.noise = NoiseFamily::StudentT { dof };
                }
                ProviderSpec::Synthetic(spec)
            }
            ProviderKind::Replay => ProviderSpec::Replay {
                path: require(&self.replay, "--replay")?,
            },
            ProviderKind::Adapter => ProviderSpec::Adapter {
                command: require(&self.adapter_cmd, "--adapter-cmd")?,
                manifest: require(&self.manifest, "--manifest")?,
                preprocess: PreprocessConfig::default(),
                timeout_secs: self.timeout_secs,
            },
        })
    }

    fn aug(&self) -> Result<AugMode, HarnessError> {
        Ok(match self.aug.as_str() {
            "stable" => AugMode::Stable(AugPolicyConfig {
                reference_seed: self.reference_seed,
                ..AugPolicyConfig::default()
            }),
            "identity" => AugMode::Stable(AugPolicyConfig::identity()),
            list => AugMode::Standard {
                ops: list
                    .split(',')
                    .map(|s| BaselineAug::from_name(s.trim()))
                    .collect::<Result<_, _>>()?,
            },
        })
    }

    fn open(&self, seed: u64) -> Result<Box<dyn stabletta::providers::LogitSource>, HarnessError> {
        self.spec()?.open(seed, &self.aug()?, self.batch_size)
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

fn eval_text(r: &harness::EvalReport, csv: bool) -> String {
    let mut s = String::new();
    if csv {
        s.push_str("seed,acc1,acc5,evaluated,skipped\n");
        for p in &r.per_seed {
            let _ = writeln!(s, "{},{:.6},{:.6},{},{}", p.seed, p.acc1, p.acc5, p.evaluated, p.skipped);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},,", r.acc1_mean, r.acc5_mean);
        let _ = writeln!(s, "std,{:.6},{:.6},,", r.acc1_std, r.acc5_std);
        return s;
    }
    let _ = writeln!(
        s,
        "{} N={} K={} C={} M={} skipped={}",
        r.method, r.n_experts, r.k, r.num_classes, r.num_samples, r.skipped
    );
    for p in &r.per_seed {
        let _ = writeln!(s, "  seed {:>4}: acc@1 {:8.3}  acc@5 {:8.3}", p.seed, p.acc1, p.acc5);
    }
    let _ = writeln!(s, "  mean     : acc@1 {:8.3}  acc@5 {:8.3}", r.acc1_mean, r.acc5_mean);
    let _ = writeln!(s, "  std      : acc@1 {:8.3}  acc@5 {:8.3}", r.acc1_std, r.acc5_std);
    if let Some(c) = &r.caveat {
        let _ = writeln!(s, "  note: {c}");
    }
    s
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Eval {
            method,
            n,
            k,
            run,
            output,
        } => {
            let cfg = EvalConfig {
                method: method.into(),
                n_experts: n,
                k,
                seeds: run.seeds.clone(),
                batch_size: run.provider.batch_size,
                provider: run.provider.spec()?,
                aug: run.provider.aug()?,
            };
            let report = evaluate(&cfg)?;
            let text = if output.json {
                to_json(&report)
            } else {
                eval_text(&report, output.csv)
            };
            emit(&output.out, &text)
        }
        Command::Sweep {
            method,
            n_grid,
            k_grid,
            run,
            output,
        } => {
            let provider = run.provider.spec()?;
            let k_grid = match k_grid {
                Some(g) => g,
                None => {
                    let c = run.provider.open(run.seeds[0])?.num_classes();
                    DEFAULT_K_GRID.iter().copied().chain([c]).collect()
                }
            };
            let cfg = EvalConfig {
                method: method.into(),
                seeds: run.seeds.clone(),
                batch_size: run.provider.batch_size,
                aug: run.provider.aug()?,
                ..EvalConfig::new(method.into(), provider)
            };
            let rows = sweep(&cfg, &n_grid, &k_grid)?;
            let text = if output.json {
                to_json(&rows)
            } else {
                let mut buf = Vec::new();
                write_sweep_csv(&rows, &mut buf).expect("writing to memory");
                String::from_utf8(buf).expect("ascii csv")
            };
            emit(&output.out, &text)
        }
        Command::Record { n, seed, provider, out } => {
            let summary = record_replay(&provider.spec()?, &provider.aug()?, n, seed, provider.batch_size, &out)?;
            eprintln!(
                "wrote {}: M={} N={} C={}",
                out.display(),
                summary.num_samples,
                summary.num_passes,
                summary.num_classes
            );
            Ok(())
        }
        Command::ConflictScan {
            n,
            k,
            seed,
            provider,
            output,
        } => {
            let source = provider.open(seed)?;
            let report = conflict_scan(source.as_ref(), n, k)?;
            if output.csv {
                let mut s = String::from("pair,before_nss,after_nss\n");
                for (pair, before) in &report.before_nss {
                    let _ = writeln!(s, "{pair},{before:.6},{:.6}", report.after_nss[pair]);
                }
                emit(&output.out, &s)
            } else {
                emit(&output.out, &to_json(&report))
            }
        }
        Command::Stats {
            mode,
            n,
            alpha,
            seed,
            provider,
            grid,
            out,
        } => {
            ensure_dir(&out)?;
            match mode {
                StatsMode::Jb => {
                    let source = provider.open(seed)?;
                    let summary = report_jb(source.as_ref(), n, alpha, &out)?;
                    print!("{}", to_json(&summary));
                }
                StatsMode::Holder => {
                    let source = provider.spec()?.open_live(seed, &provider.aug()?, provider.batch_size)?;
                    let report = report_holder(&source, n, &out)?;
                    let satisfied = report.records.iter().filter(|r| r.variance.satisfied).count();
                    println!(
                        "{} samples fitted, {} skipped, bound satisfied on {satisfied}",
                        report.records.len(),
                        report.skipped.len()
                    );
                }
                StatsMode::Fig10 => {
                    let rows = report_fig10(&grid.options(n), &out)?;
                    println!("{} grid points written to {}", rows.len(), out.join("fig10.csv").display());
                }
            }
            Ok(())
        }
        Command::Fig10 { n, grid, out } => {
            let rows = stabletta::conflict::sweep_fig10(
                &stabletta::conflict::FIG10_MUS,
                &stabletta::conflict::FIG10_SIGMAS,
                &grid.options(n),
            )?;
            let mut buf = Vec::new();
            write_fig10_csv(&rows, &mut buf).expect("writing to memory");
            emit(&out, &String::from_utf8(buf).expect("ascii csv"))
        }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
