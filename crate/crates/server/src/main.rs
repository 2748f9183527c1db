use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tutor_core::content::{load_content_pack, ContentError};
use tutor_core::harness::{evaluate, kfold_split, parse_corpus, HarnessConfig, Method};
use tutor_core::pipeline::AggregationRule;
use tutor_core::{EventStore, PipelineConfig, PromptSet};
use tutor_server::api::export_filter;
use tutor_server::{build_state, make_gateway, serve, GatewayKind, ServeOptions};

#[derive(Parser)]
#[command(name = "tutor", version, about = "Dialogue tutor for teacher professional development")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Content pack tools.
    Content {
        #[command(subcommand)]
        command: ContentCommand,
    },
    /// Event log tools.
    Events {
        #[command(subcommand)]
        command: EventsCommand,
    },
    /// Offline evaluation of prompt improvements.
    Harness {
        #[command(subcommand)]
        command: HarnessCommand,
    },
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Content pack directory (manifest.json + assets/).
    #[arg(long)]
    pack: PathBuf,
    /// Event log file; omitted means in-memory.
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, value_enum, default_value = "live")]
    gateway: GatewayKind,
    /// Script file for the scripted gateway.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Directory of prompt overrides (<role>.txt).
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    judges: usize,
    /// Judge aggregation: union or majority.
    #[arg(long, default_value = "union")]
    aggregation: String,
    #[arg(long, env = "ADMIN_TOKEN", hide_env_values = true)]
    admin_token: Option<String>,
}

#[derive(Subcommand)]
enum ContentCommand {
    /// Check a content pack; exits 1 and lists every violation if invalid.
    Validate { path: PathBuf },
}

#[derive(Subcommand)]
enum EventsCommand {
    /// Write events as JSON lines.
    Export {
        #[arg(long)]
        db: PathBuf,
        /// Comma-separated kinds, e.g. UserMessage,Feedback.
        #[arg(long)]
        kinds: Option<String>,
        /// Inclusive lower bound (RFC 3339 or epoch ms).
        #[arg(long)]
        since: Option<String>,
        /// Exclusive upper bound.
        #[arg(long)]
        until: Option<String>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        pseudonymize: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum HarnessCommand {
    /// k-fold evaluation of one method over a failure-case corpus.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// baseline | rubric | fewshot | both
        #[arg(long, default_value = "baseline")]
        method: String,
        #[arg(long, value_enum, default_value = "scripted")]
        gateway: GatewayKind,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// In-context exemplars per case.
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 0.6)]
        f1_threshold: f64,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_rule(s: &str) -> anyhow::Result<AggregationRule> {
    match s.to_ascii_lowercase().as_str() {
        "union" => Ok(AggregationRule::Union),
        "majority" => Ok(AggregationRule::Majority),
        _ => anyhow::bail!("unknown aggregation {s:?} (union|majority)"),
    }
}

fn output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_serve(args: ServeArgs) -> anyhow::Result<()> {
    let config = PipelineConfig { n_judges: args.judges.max(1), rule: parse_rule(&args.aggregation)?, ..Default::default() };
    let gateway = make_gateway(args.gateway, args.script.as_deref())?;
    let opts = ServeOptions { pack: args.pack, db: args.db, prompts: args.prompts, config, admin_token: args.admin_token };
    let state = build_state(&opts, gateway)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.bind.as_str(), args.port)).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        serve(listener, state).await
    })?;
    Ok(())
}

fn run_validate(path: PathBuf) -> anyhow::Result<ExitCode> {
    match load_content_pack(&path) {
        Ok(pack) => {
            println!("ok: {} modules, {} activities", pack.modules.len(), pack.activities().count());
            Ok(ExitCode::SUCCESS)
        }
        Err(ContentError::Validation(violations)) => {
            for v in &violations {
                eprintln!("{v}");
            }
            eprintln!("{} violation(s)", violations.len());
            Ok(ExitCode::FAILURE)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Serve(args) => run_serve(args).map(|_| ExitCode::SUCCESS),
        Command::Content { command: ContentCommand::Validate { path } } => run_validate(path),
        Command::Events {
            command: EventsCommand::Export { db, kinds, since, until, user, pseudonymize, out },
        } => {
            let store = EventStore::open(&db).with_context(|| format!("opening {}", db.display()))?;
            let filter = export_filter(kinds.as_deref(), since.as_deref(), until.as_deref(), user.as_deref())
                .map_err(anyhow::Error::msg)?;
            let mut w = output(out.as_ref())?;
            let n = store.write_export(&mut w, &filter, pseudonymize)?;
            w.flush()?;
            eprintln!("exported {n} events");
            Ok(ExitCode::SUCCESS)
        }
        Command::Harness {
            command: HarnessCommand::Run { corpus, k, seed, method, gateway, script, prompts, m, f1_threshold, out },
        } => {
            let method: Method = method.parse().map_err(anyhow::Error::msg)?;
            let cases = parse_corpus(BufReader::new(File::open(&corpus).with_context(|| format!("opening {}", corpus.display()))?))?;
            let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
            let plan = kfold_split(&ids, k, seed)?;
            let gw = make_gateway(gateway, script.as_deref())?;
            let prompts = match prompts {
                Some(dir) => PromptSet::load_dir(dir)?,
                None => PromptSet::default(),
            };
            let config = HarnessConfig { m, f1_threshold, ..Default::default() };
            let report = evaluate(&plan, &cases, method, gw.as_ref(), &prompts, &config)?;
            let mut w = output(out.as_ref())?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
            eprintln!("{method}: mean accuracy {:.2} over {} folds", report.mean_accuracy, plan.k);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
