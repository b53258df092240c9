use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::RngCore;
use tracing_subscriber::EnvFilter;
use wattline_cli::presets::{preset, PRESETS};
use wattline_cli::{
    run_exporter, run_gate, run_registry, shutdown_signal, CliError, Overrides, StackConfig, EXIT_CONFIG, EXIT_OK,
    EXIT_RUNTIME,
};
use wattline_core::auth::PasswordHash;
use wattline_core::rules::{generate_rule_file, NamingMap, DEFAULT_RATE_WINDOW};

#[derive(Parser)]
#[command(name = "wattline", version, about = "Per-workload energy and emissions monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve node metrics.
    Exporter(ServiceArgs),
    /// Ingest accounting, attribute power, aggregate and serve the API.
    Registry(ServiceArgs),
    /// Ownership-checking proxy in front of the TSDB.
    Gate(ServiceArgs),
    /// Print the per-workload power recording rule.
    Rules {
        /// Built-in profile: cpu-dram, cpu-only or gpu-ipmi.
        #[arg(long, conflicts_with = "config")]
        profile: Option<String>,
        /// Generate one file per profile of the registry section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_RATE_WINDOW)]
        rate_window: String,
    },
    /// Hash a password for the `users` lists (reads stdin without --password).
    HashPassword {
        #[arg(long)]
        password: Option<String>,
    },
    /// Validate a config file and print its normalized form.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct ServiceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Listen address; wins over the file.
    #[arg(long)]
    listen: Option<String>,
}

fn init_logging(level: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn serve(args: ServiceArgs, which: &str) -> Result<(), CliError> {
    let cfg = StackConfig::load(&args.config)?;
    init_logging(&cfg.log_level);
    let overrides = Overrides { listen: args.listen };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        match which {
            "exporter" => run_exporter(&cfg, &overrides, shutdown_signal()).await,
            "registry" => run_registry(&cfg, &overrides, shutdown_signal()).await,
            _ => run_gate(&cfg, &overrides, shutdown_signal()).await,
        }
    })
}

fn rules(profile: Option<String>, config: Option<PathBuf>, window: &str) -> Result<(), CliError> {
    let naming = NamingMap::default();
    if let Some(path) = config {
        let cfg = StackConfig::load(&path)?;
        for p in &cfg.registry()?.profiles {
            let names = p.naming.clone().unwrap_or_else(|| naming.clone());
            let text = generate_rule_file(&p.name, &p.profile(), &names, window)
                .map_err(|e| CliError::Config(format!("profile {}: {e}", p.name)))?;
            println!("# profile: {}\n{text}", p.name);
        }
        return Ok(());
    }
    let name = profile.ok_or_else(|| CliError::Config("pass --profile or --config".into()))?;
    let p = preset(&name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown profile `{name}`; expected one of {}",
            PRESETS.join(", ")
        ))
    })?;
    let text = generate_rule_file(&name, &p, &naming, window).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn hash_password(password: Option<String>) -> Result<(), CliError> {
    let password = match password {
        Some(p) => p,
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            s.trim_end_matches(['\r', '\n']).to_string()
        }
    };
    if password.is_empty() {
        return Err(CliError::Config("empty password".into()));
    }
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    println!("{}", PasswordHash::new(&password, &salt).encode());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_CONFIG as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    let result = match cli.command {
        Command::Exporter(a) => serve(a, "exporter"),
        Command::Registry(a) => serve(a, "registry"),
        Command::Gate(a) => serve(a, "gate"),
        Command::Rules {
            profile,
            config,
            rate_window,
        } => rules(profile, config, &rate_window),
        Command::HashPassword { password } => hash_password(password),
        Command::CheckConfig { config } => StackConfig::load(&config).map(|c| print!("{}", c.redacted())),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("wattline: {e}");
            let code = e.exit_code();
            debug_assert!(code == EXIT_CONFIG || code == EXIT_RUNTIME);
            ExitCode::from(code as u8)
        }
    }
}
