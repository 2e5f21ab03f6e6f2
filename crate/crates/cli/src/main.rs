mod detect;

use std::fs::{self, File};
use std::io::BufReader;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nbeval_core::algorithms::{self, ModelParams};
use nbeval_core::driver::{self, DriverError};
use nbeval_core::interactions::{self, IngestError, Ingested};
use nbeval_core::protocol::{EvaluationContext, ProtocolError, RunRegistry};
use nbeval_core::SplitConfig;
use nbeval_service::{ServeError, ServiceConfig};
use thiserror::Error;

use detect::DescriptorArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Environment(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 2,
            CliError::Environment(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(_) => CliError::Environment(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Model(e) => CliError::Validation(e.to_string()),
            DriverError::Protocol(ProtocolError::InvalidConfig(e)) => CliError::Validation(e.to_string()),
            DriverError::Protocol(e) => CliError::Internal(e.to_string()),
        }
    }
}

/// Next-batch recommendation evaluation on a global timeline.
#[derive(Debug, Parser)]
#[command(name = "nbeval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check that a dataset file parses and summarize it.
    ValidateDataset {
        file: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a built-in model and write report.json, report.csv and series.csv.
    Run(RunArgs),
    /// Start the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<IpAddr>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Bearer token required for write requests.
        #[arg(long)]
        token: Option<String>,
    },
}

#[derive(Debug, Args)]
struct FormatArgs {
    /// Column mapping, e.g. user=0,item=1,timestamp=3 (indices or header names).
    #[arg(long)]
    mapping: Option<String>,
    /// Field delimiter: a single character, or tab/comma/semicolon/space.
    #[arg(long)]
    delimiter: Option<String>,
    /// Whether the first row is a header; detected when omitted.
    #[arg(long, value_parser = parse_switch)]
    header: Option<bool>,
}

impl FormatArgs {
    fn descriptor_args(&self) -> DescriptorArgs {
        DescriptorArgs {
            mapping: self.mapping.clone(),
            delimiter: self.delimiter.clone(),
            header: self.header,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    format: FormatArgs,
    /// JSON split configuration; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// End of the background segment (exclusive).
    #[arg(long = "split-t", visible_alias = "t-background-end")]
    split_t: Option<i64>,
    #[arg(long, visible_alias = "n-windows")]
    windows: Option<usize>,
    /// recent_popularity, decay_popularity or item_knn_incremental.
    #[arg(long)]
    model: String,
    /// Model parameter as name=value; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, serde_json::Value)>,
    /// Cutoffs, e.g. 5,10,20.
    #[arg(long, visible_alias = "k-values", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, visible_alias = "include-unknown-users", value_parser = parse_switch)]
    unknown_users: Option<bool>,
    #[arg(long, visible_alias = "include-unknown-items", value_parser = parse_switch)]
    unknown_items: Option<bool>,
    #[arg(long, visible_alias = "n-max-requests-per-user")]
    max_requests: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, short)]
    quiet: bool,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn parse_param(s: &str) -> Result<(String, serde_json::Value), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("{s:?} is not name=value"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
    Ok((name.trim().to_string(), value))
}

fn load(path: &Path, format: &FormatArgs) -> Result<Ingested, CliError> {
    let descriptor = detect::resolve(path, &format.descriptor_args())?;
    let file = File::open(path).map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
    Ok(interactions::ingest(&descriptor, BufReader::new(file))?)
}

fn validate_dataset(file: &Path, format: &FormatArgs, json: bool) -> Result<(), CliError> {
    let descriptor = detect::resolve(file, &format.descriptor_args())?;
    let ingested = load(file, format)?;
    let (t_min, t_max) = ingested.log.span().unwrap_or((0, 0));
    let summary = serde_json::json!({
        "descriptor": descriptor,
        "accepted": ingested.accepted,
        "rejected": ingested.rejected,
        "n_users": ingested.log.users().len(),
        "n_items": ingested.log.items().len(),
        "t_min": t_min,
        "t_max": t_max,
        "rejections": ingested.rejections,
    });
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("summary serializes")
        );
        return Ok(());
    }
    println!("accepted  {}", ingested.accepted);
    println!("rejected  {}", ingested.rejected);
    println!("users     {}", ingested.log.users().len());
    println!("items     {}", ingested.log.items().len());
    println!("span      {t_min} .. {t_max}");
    for r in ingested.rejections.iter().take(20) {
        println!("  line {}: {}", r.line, r.reason);
    }
    Ok(())
}

fn split_config(args: &RunArgs) -> Result<SplitConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => {
            let (Some(t), Some(n)) = (args.split_t, args.windows) else {
                return Err(CliError::Usage(
                    "--split-t and --windows are required without --config".into(),
                ));
            };
            SplitConfig::new(t, n)
        }
    };
    if let Some(t) = args.split_t {
        config.t_background_end = t;
    }
    if let Some(n) = args.windows {
        config.n_windows = n;
    }
    if let Some(k) = &args.k {
        config.k_values = k.clone();
    }
    if let Some(v) = args.unknown_users {
        config.include_unknown_users = v;
    }
    if let Some(v) = args.unknown_items {
        config.include_unknown_items = v;
    }
    if let Some(n) = args.max_requests {
        config.n_max_requests_per_user = n;
    }
    Ok(config)
}

fn write_file(path: PathBuf, body: &str) -> Result<(), CliError> {
    fs::write(&path, body).map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = split_config(args)?;
    let ingested = load(&args.dataset, &args.format)?;
    if ingested.rejected > 0 && !args.quiet {
        eprintln!("{} rows rejected", ingested.rejected);
    }
    let params: ModelParams = args.params.iter().cloned().collect();
    let name = algorithms::canonical_model_name(&args.model).map_err(|e| CliError::Validation(e.to_string()))?;

    let ctx =
        EvaluationContext::new(Arc::new(ingested.log), config).map_err(|e| CliError::Validation(e.to_string()))?;
    let ctx = Arc::new(ctx);
    let mut model = algorithms::build_model(name, &params, driver::model_defaults(&ctx))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let registry = RunRegistry::default();
    let run_id = registry
        .register_with(ctx, driver::model_metadata(name, &params))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let quiet = args.quiet;
    let report = driver::drive(&registry, run_id, model.as_mut(), |done, total| {
        if !quiet {
            eprintln!("window {done}/{total}");
        }
    })?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Environment(format!("{}: {e}", args.out.display())))?;
    write_file(args.out.join("report.json"), &report.to_json())?;
    write_file(args.out.join("report.csv"), &report.to_csv())?;
    write_file(args.out.join("series.csv"), &report.to_series_csv())?;
    if !quiet {
        for (key, value) in &report.macro_avg {
            eprintln!("{key:<16} macro {value:.5}  micro {:.5}", report.micro_avg[key]);
        }
        eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}

fn serve(
    port: Option<u16>,
    bind: Option<IpAddr>,
    data_dir: Option<PathBuf>,
    token: Option<String>,
) -> Result<(), CliError> {
    let mut config = ServiceConfig::from_env().map_err(|e| CliError::Usage(e.to_string()))?;
    let ip = bind.unwrap_or(config.bind.ip());
    config.bind = SocketAddr::new(ip, port.unwrap_or(config.bind.port()));
    if let Some(dir) = data_dir {
        config.data_dir = dir;
    }
    if token.is_some() {
        config.token = token;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Environment(e.to_string()))?;
    runtime.block_on(nbeval_service::serve(config)).map_err(|e| match e {
        ServeError::Config(m) => CliError::Usage(m),
        e @ (ServeError::Bind { .. } | ServeError::Storage(_)) => CliError::Environment(e.to_string()),
        e => CliError::Internal(e.to_string()),
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ValidateDataset { file, format, json } => validate_dataset(file, format, *json),
        Command::Run(args) => run(args),
        Command::Serve {
            port,
            bind,
            data_dir,
            token,
        } => serve(*port, *bind, data_dir.clone(), token.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
