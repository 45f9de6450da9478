use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dialogue_forge_cli::commands::{
    self, cmd_evaluate, cmd_export, cmd_generate, cmd_probe, cmd_report, CliError, ExportFormat,
};
use dialogue_forge_cli::config::{self, Overrides, RawConfig};
use dialogue_forge_core::corpus::SourceLanguage;
use dialogue_forge_core::sandbox::{Sandbox, SandboxConfig};

#[derive(Parser)]
#[command(name = "dialogue-forge", version, about = "Verified code-translation dataset pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the translation pipeline over a corpus slice.
    Generate {
        /// Translation direction, e.g. cpp:cuda or fortran:cpp.
        #[arg(long)]
        direction: Option<String>,
        /// Half-open origin-index range A:B.
        #[arg(long)]
        range: Option<String>,
        /// Replay fixture; overrides any configured backend.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mark stages with a missing toolchain untested instead of failing.
        #[arg(long)]
        compile_skip: bool,
    },
    /// Export a dataset store into split files of one supervision format.
    Export {
        /// Store directory or dialogues JSONL file.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Ratio splits, e.g. train=0.8,val=0.1,test=0.1.
        #[arg(long)]
        ratios: Option<String>,
        /// Index-range splits, e.g. train=0:3000,test=3000:3394.
        #[arg(long)]
        ranges: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile/run/test candidate programs and report success metrics.
    Evaluate {
        /// Candidates JSONL: {"id", "code", optional "harness"}.
        #[arg(long)]
        candidates: PathBuf,
        /// References JSONL for CodeBLEU: {"id", "code"}.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        language: String,
        #[arg(long, default_value_t = 0)]
        debug_rounds: u32,
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scratch: Option<PathBuf>,
        #[arg(long)]
        compile_skip: bool,
    },
    /// Probe toolchain and backend availability.
    Probe {
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Aggregate a records JSONL into a metric report.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Write the per-round curve CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_raw(path: Option<&PathBuf>) -> Result<RawConfig, CliError> {
    match path {
        Some(p) => RawConfig::load(p).map_err(|e| CliError::Config(vec![e])),
        None => Ok(RawConfig::default()),
    }
}

fn scratch_sandbox(scratch: Option<PathBuf>, compile_skip: bool) -> Sandbox {
    let root = scratch.unwrap_or_else(std::env::temp_dir).join("dialogue-forge-scratch");
    let mut config = SandboxConfig::with_defaults(root);
    config.compile_skip = compile_skip;
    Sandbox::new(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { direction, range, replay, workers, out, compile_skip } => {
            let raw = load_raw(cli.config.as_ref())?;
            let overrides = Overrides { direction, range, replay, workers, out, compile_skip };
            let run_config = config::resolve(&raw, &overrides).map_err(CliError::Config)?;
            cmd_generate(&run_config)?;
            Ok(())
        }
        Command::Export { store, format, ratios, ranges, seed, out } => {
            let spec = commands::parse_split(format, ratios.as_deref(), ranges.as_deref(), seed)?;
            cmd_export(&store, format, &spec, &out)?;
            Ok(())
        }
        Command::Evaluate {
            candidates,
            references,
            language,
            debug_rounds,
            replay,
            out,
            scratch,
            compile_skip,
        } => {
            let language = SourceLanguage::parse(&language)
                .ok_or_else(|| CliError::Config(vec![format!("unknown language {language:?}")]))?;
            let raw = load_raw(cli.config.as_ref())?;
            let run_config = if raw.backend.is_some() {
                Some(config::resolve(&raw, &Overrides::default()).map_err(CliError::Config)?)
            } else {
                None
            };
            let gateway = commands::optional_gateway(run_config.as_ref(), replay.as_deref())?;
            let sandbox = scratch_sandbox(scratch, compile_skip);
            if !compile_skip && !sandbox.is_available(language) {
                return Err(CliError::Toolchain(format!(
                    "{language} toolchain unavailable (pass --compile-skip to mark records untested)"
                )));
            }
            cmd_evaluate(
                &candidates,
                references.as_deref(),
                language,
                debug_rounds,
                gateway.as_ref(),
                &sandbox,
                out.as_deref(),
            )?;
            Ok(())
        }
        Command::Probe { replay, scratch } => {
            let gateway = commands::optional_gateway(None, replay.as_deref())?;
            let sandbox = scratch_sandbox(scratch, true);
            cmd_probe(&sandbox, gateway.as_ref())
        }
        Command::Report { records, csv } => {
            cmd_report(&records, csv.as_deref())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
