//! `caspaas` command line: scenario runs, the service, and maintenance tools.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::IntoResponse;
use axum::Router;
use caspaas_core::harness::{self, service::Service, Scenario};
use caspaas_core::reasoning::{train, Classifier, TrainingExample};
use caspaas_core::{policy, trust};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caspaas", version, about = "Context-aware security and privacy service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or the built-in "bob") and emit its trace.
    Run {
        #[arg(long)]
        scenario: String,
        /// Trace output; stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ledger export (JSON lines).
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Serve the HTTP API over the declarations in a scenario-style config.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `config.listen`.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Policy maintenance.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Verify an exported ledger.
    VerifyLedger { file: PathBuf },
    /// Learn classifier rules from labelled examples.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    Lint { file: PathBuf },
}

/// Domain failure: reported on stderr, exit code 1.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: &str) -> Result<(), Failure> {
    std::fs::write(path, data).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn load_scenario(name: &str) -> Result<Scenario, Failure> {
    let path = Path::new(name);
    if !path.exists() {
        if let Some(text) = Scenario::builtin(name) {
            return Ok(Scenario::parse(text)?);
        }
    }
    Scenario::load(path).map_err(|e| Failure(format!("{name}: {e}")))
}

fn run(scenario: &str, trace: Option<&Path>, seed: Option<u64>, ledger: Option<&Path>) -> Result<(), Failure> {
    let s = load_scenario(scenario)?;
    let out = harness::run(&s, seed)?;
    match trace {
        Some(p) => write(p, &out.trace_jsonl())?,
        None => print!("{}", out.trace_jsonl()),
    }
    if let Some(p) = ledger {
        write(p, &out.ledger_jsonl())?;
    }
    log::info!(
        "{}: {} trace records, {} ledger blocks",
        s.name,
        out.trace.len(),
        out.ledger.len()
    );
    Ok(())
}

fn lint(file: &Path) -> Result<(), Failure> {
    let policies = policy::lint_document(&read(file)?).map_err(|e| Failure(format!("{}: {e}", file.display())))?;
    println!("{}: {} policies ok", file.display(), policies.len());
    Ok(())
}

fn verify_ledger(file: &Path) -> Result<(), Failure> {
    let f = std::fs::File::open(file).map_err(|e| Failure(format!("{}: {e}", file.display())))?;
    let blocks = trust::chain::import_jsonl(std::io::BufReader::new(f))?;
    if trust::verify_chain(&blocks) {
        println!("valid ({} blocks)", blocks.len());
        Ok(())
    } else {
        Err(Failure(format!("{}: chain does not verify", file.display())))
    }
}

fn train_rules(data: &Path, out: &Path) -> Result<(), Failure> {
    let examples: Vec<TrainingExample> = serde_json::from_str(&read(data)?)?;
    let classifier: Classifier = train(&examples)?;
    write(out, &serde_json::to_string_pretty(&classifier)?)?;
    println!("{} rules written to {}", classifier.rules.len(), out.display());
    Ok(())
}

async fn route(State(svc): State<Arc<Service>>, method: Method, uri: Uri, body: String) -> impl IntoResponse {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64);
    let r = svc.handle(method.as_str(), uri.path(), uri.query().unwrap_or(""), &body, now);
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, r.content_type)], r.body)
}

fn serve(config: &Path, listen: Option<String>) -> Result<(), Failure> {
    let s = Scenario::load(config).map_err(|e| Failure(format!("{}: {e}", config.display())))?;
    let addr = listen
        .or_else(|| s.config.listen.clone())
        .unwrap_or_else(|| "127.0.0.1:8080".into());
    let svc = Arc::new(Service::new(&s)?);
    let app = Router::new().fallback(route).with_state(svc);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on {addr}");
        axum::serve(listener, app).await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            trace,
            seed,
            ledger,
        } => run(&scenario, trace.as_deref(), seed, ledger.as_deref()),
        Command::Serve { config, listen } => serve(&config, listen),
        Command::Policy {
            command: PolicyCommand::Lint { file },
        } => lint(&file),
        Command::VerifyLedger { file } => verify_ledger(&file),
        Command::Train { data, out } => train_rules(&data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
