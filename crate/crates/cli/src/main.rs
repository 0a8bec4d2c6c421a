use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regtsc::bench::{
    build_guidance, collect_imitation, compare, export_refinement, load_buffers, run, BenchError,
    Policy, RefinementParams, RunManifest,
};
use regtsc::gateway::{BackendConfig, BackendKind, Gateway};
use regtsc::training::FilterParams;

#[derive(Parser)]
#[command(
    name = "regtsc",
    version,
    about = "Emergency-aware traffic signal control runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, decision trace and buffers.
    Run(RunArgs),
    /// Run with a language-model policy and export filtered imitation data.
    Collect {
        #[command(flatten)]
        run: RunArgs,
        /// Forward reward window, in decisions.
        #[arg(long)]
        t_re: usize,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        /// Keep every parseable trajectory.
        #[arg(long)]
        no_filter: bool,
    },
    /// Distill a case log into a guidance repository.
    BuildGuidance {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Evenly thin the log to at most this many cases (0 keeps all).
        #[arg(long, default_value_t = 50)]
        max_cases: usize,
    },
    /// Run several policies on the same scenario and seed.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "fixed-time,random,mock-heuristic"
        )]
        policies: Vec<PolicyArg>,
        #[arg(long, value_enum, default_value = "fixed-time")]
        baseline: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        decision_interval: Option<u32>,
        #[arg(long)]
        guidance: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Prioritized refinement datasets from a buffer snapshot.
    Export {
        #[arg(long)]
        buffers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_epoch: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Give negative-reward samples zero weight.
        #[arg(long)]
        clamp_negative: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    MockHeuristic,
    Remote,
    FixedTime,
    Random,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::MockHeuristic => Policy::MockHeuristic,
            PolicyArg::Remote => Policy::Remote,
            PolicyArg::FixedTime => Policy::FixedTime,
            PolicyArg::Random => Policy::Random,
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    /// `mock`, `remote`, or a JSON backend config file.
    #[arg(long, default_value = "mock")]
    backend: String,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    chat_model: Option<String>,
    #[arg(long)]
    embedding_model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl BackendArgs {
    fn config(&self) -> Result<BackendConfig, BenchError> {
        let mut c = match self.backend.as_str() {
            "mock" => BackendConfig::mock(),
            "remote" => BackendConfig {
                kind: BackendKind::Remote,
                ..BackendConfig::default()
            },
            path => {
                let path = Path::new(path);
                let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| BenchError::Json {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })?
            }
        };
        if let Some(u) = &self.base_url {
            c.base_url = Some(u.clone());
        }
        if let Some(m) = &self.chat_model {
            c.chat_model = m.clone();
        }
        if let Some(m) = &self.embedding_model {
            c.embedding_model = m.clone();
        }
        if let Some(d) = &self.cache_dir {
            c.cache_dir = Some(d.clone());
        }
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "fidelity")]
    decision_interval: Option<u32>,
    /// Decide at every simulation step.
    #[arg(long)]
    fidelity: bool,
    /// Guidance repository directory for deep reasoning.
    #[arg(long)]
    guidance: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

impl RunArgs {
    fn manifest(&self) -> Result<RunManifest, BenchError> {
        Ok(RunManifest {
            scenario: self.scenario.clone(),
            policy: self.policy.into(),
            backend: self.backend.config()?,
            out: self.out.clone(),
            seed: self.seed,
            decision_interval: if self.fidelity {
                Some(1)
            } else {
                self.decision_interval
            },
            guidance: self.guidance.clone(),
        })
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn execute(command: Command) -> Result<(), BenchError> {
    match command {
        Command::Run(args) => {
            let result = run(&args.manifest()?)?;
            print_json(&result.metrics);
        }
        Command::Collect {
            run,
            t_re,
            eta,
            no_filter,
        } => {
            let eta = if no_filter { f64::NEG_INFINITY } else { eta };
            let filter = FilterParams::new(t_re, eta)?;
            print_json(&collect_imitation(&run.manifest()?, &filter)?);
        }
        Command::BuildGuidance {
            cases,
            out,
            backend,
            max_cases,
        } => {
            let gateway = Gateway::from_config(&backend.config()?)?;
            let repo = build_guidance(&cases, &gateway, &out, max_cases)?;
            println!("{} guidance items written to {}", repo.len(), out.display());
        }
        Command::Compare {
            scenario,
            policies,
            baseline,
            seed,
            out,
            decision_interval,
            guidance,
            backend,
        } => {
            let backend = backend.config()?;
            let manifests: Vec<RunManifest> = policies
                .iter()
                .map(|&p| {
                    let policy = Policy::from(p);
                    RunManifest {
                        scenario: scenario.clone(),
                        policy,
                        backend: backend.clone(),
                        out: out.join(policy.name()),
                        seed,
                        decision_interval,
                        guidance: guidance.clone(),
                    }
                })
                .collect();
            let report = compare(&manifests, baseline.into(), Some(&out))?;
            use std::io::Write;
            let _ = write!(std::io::stdout(), "{}", report.to_csv());
        }
        Command::Export {
            buffers,
            out,
            max_epoch,
            batch_size,
            epsilon,
            seed,
            clamp_negative,
        } => {
            let set = load_buffers(&buffers)?;
            let params = RefinementParams {
                max_epoch,
                batch_size,
                epsilon,
                seed,
                clamp_negative,
            };
            print_json(&export_refinement(&set, &params, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
