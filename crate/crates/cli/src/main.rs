//! `wavedoa` command line: dictionaries, simulated captures, estimation and
//! batch evaluation reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use wavedoa::frontend::MultichannelAudio;
use wavedoa::harness::{estimate_capture, likelihood_dump_csv, MleOrSrp};
use wavedoa::{run_experiment, Error, EstimatorKind, ExperimentConfig, Result, RunOptions};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "wavedoa",
    version,
    about = "Maximum-likelihood sound direction estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steering dictionaries.
    Dict {
        #[command(subcommand)]
        action: DictAction,
    },
    /// Simulated captures.
    Sim {
        #[command(subcommand)]
        action: SimAction,
    },
    /// Direction estimates for recorded captures.
    Estimate {
        #[command(subcommand)]
        action: EstimateAction,
    },
    /// Batch evaluation over the configured scenario grid.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
}

#[derive(Subcommand)]
enum DictAction {
    /// Build the configured dictionary and save it to `<out>/dictionary.wdd`.
    Build(Common),
}

#[derive(Subcommand)]
enum SimAction {
    /// Write one multichannel WAV per scenario plus a `truth.jsonl` sidecar.
    Generate(Common),
}

#[derive(Subcommand)]
enum EstimateAction {
    /// Estimate the azimuth of each multichannel WAV file.
    Run {
        #[command(flatten)]
        common: Common,
        /// Multichannel WAV captures, channel order matching the array.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalAction {
    /// Simulate, estimate and write the error report files.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Which estimators to run; overrides `estimators` from the configuration.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorChoice>,
    /// Write per-frame likelihood grids as CSV under `<out>/likelihood/`.
    #[arg(long)]
    dump_likelihood: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorChoice {
    Mle,
    Srp,
    Both,
}

impl EstimatorChoice {
    fn kinds(self) -> Vec<EstimatorKind> {
        match self {
            EstimatorChoice::Mle => vec![EstimatorKind::Mle],
            EstimatorChoice::Srp => vec![EstimatorKind::Srp],
            EstimatorChoice::Both => vec![EstimatorKind::Mle, EstimatorKind::Srp],
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(choice) = self.estimator {
            cfg.estimators = choice.kinds();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }

    fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = cfg.out_dir.clone().ok_or_else(|| {
            Error::Config("no output directory: pass --out or set out_dir".into())
        })?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn dict_build(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = Common::out_dir(&cfg)?;
    let dict = cfg.dictionary()?;
    let path = out.join("dictionary.wdd");
    dict.save(&path)?;
    println!(
        "{}: {} mics x {} directions x {} frequencies",
        path.display(),
        dict.mic_count(),
        dict.direction_count(),
        dict.frequencies.len()
    );
    Ok(())
}

fn sim_generate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    cfg.validate()?;
    let out = Common::out_dir(&cfg)?;
    let geometry = cfg.geometry.build()?;
    let stimuli = cfg.all_stimuli()?;
    let specs = cfg.scenarios()?;
    let mut sidecar = std::io::BufWriter::new(fs::File::create(out.join("truth.jsonl"))?);
    for spec in &specs {
        let capture = spec.simulate(&stimuli[spec.stimulus], &geometry, &cfg)?;
        let wav = format!("{}.wav", spec.id);
        capture.audio.write_wav(out.join(&wav))?;
        let line = serde_json::to_string(&spec.truth_record(&capture.truth, wav))?;
        writeln!(sidecar, "{line}")?;
        info!("simulated {}", spec.id);
    }
    sidecar.flush()?;
    println!("{} captures written to {}", specs.len(), out.display());
    Ok(())
}

fn estimate_run(common: &Common, inputs: &[PathBuf]) -> Result<()> {
    let cfg = common.load()?;
    let dict = cfg.dictionary()?;
    let dump_dir = match (&cfg.out_dir, common.dump_likelihood) {
        (Some(out), true) => Some(out.join("likelihood")),
        (None, true) => {
            return Err(Error::Config(
                "--dump-likelihood needs --out or out_dir".into(),
            ));
        }
        _ => None,
    };
    if let Some(dir) = &dump_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rows = vec!["input,estimator,azimuth_deg,error".to_string()];
    let mut failed = 0;
    for input in inputs {
        let audio = MultichannelAudio::read_wav(input)?;
        if (audio.sample_rate() - cfg.sample_rate).abs() > 0.5 {
            return Err(Error::Config(format!(
                "{} is {} Hz, configuration expects {} Hz",
                input.display(),
                audio.sample_rate(),
                cfg.sample_rate
            )));
        }
        for (kind, result) in estimate_capture(&audio, &dict, &cfg, &cfg.estimators)? {
            let row = match result {
                Ok(est) => {
                    if let (Some(dir), MleOrSrp::Mle(o)) = (&dump_dir, &est) {
                        fs::write(dir.join(stem_csv(input)), likelihood_dump_csv(o)?)?;
                    }
                    format!(
                        "{},{},{:.1},",
                        input.display(),
                        kind.name(),
                        est.azimuth().to_degrees()
                    )
                }
                Err(e) => {
                    failed += 1;
                    format!(
                        "{},{},,{}",
                        input.display(),
                        kind.name(),
                        e.to_string().replace(',', ";")
                    )
                }
            };
            println!("{row}");
            rows.push(row);
        }
    }
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out)?;
        fs::write(out.join("estimates.csv"), rows.join("\n") + "\n")?;
    }
    if failed > 0 {
        return Err(Error::NoEstimate(format!("{failed} estimate(s) failed")));
    }
    Ok(())
}

fn stem_csv(input: &Path) -> String {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy())
        .unwrap_or_default();
    format!("{stem}.csv")
}

fn eval_report(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    cfg.validate()?;
    let out = Common::out_dir(&cfg)?;
    let opts = RunOptions {
        dump_likelihood: common.dump_likelihood.then(|| out.join("likelihood")),
        threads: None,
    };
    let report = run_experiment(&cfg, &opts)?;
    report.write(&out)?;
    println!("config {}", report.config_hash);
    println!(
        "{:<10}{:>6}{:>8}{:>9}{:>9}{:>9}{:>9}",
        "estimator", "n", "failed", "MAE", "P50", "P90", "P95"
    );
    for name in report.estimators() {
        let s = report.summary(&name);
        println!(
            "{:<10}{:>6}{:>8}{:>9.2}{:>9.1}{:>9.1}{:>9.1}",
            s.estimator, s.count, s.failures, s.mae_deg, s.p50_deg, s.p90_deg, s.p95_deg
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are successes; bad arguments are
            // configuration errors.
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Dict {
            action: DictAction::Build(c),
        } => dict_build(c),
        Command::Sim {
            action: SimAction::Generate(c),
        } => sim_generate(c),
        Command::Estimate {
            action: EstimateAction::Run { common, inputs },
        } => estimate_run(common, inputs),
        Command::Eval {
            action: EvalAction::Report(c),
        } => eval_report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
