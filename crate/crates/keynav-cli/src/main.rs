use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use keynav::eval::ScStrategy;
use keynav::probing::Strategy;
use keynav_cli::config::RunConfig;
use keynav_cli::{pipeline, CliError};

#[derive(Parser)]
#[command(name = "keynav", version, about = "Key-space analysis and decoding-path navigation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the backend endpoint URL (http kind).
    #[arg(long, global = true)]
    backend_url: Option<String>,

    /// Name of the environment variable holding the API key.
    #[arg(long, global = true)]
    api_key_env: Option<String>,

    /// Record backend traffic to a replayable trace.
    #[arg(long, global = true)]
    trace: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the key space and persist the result.
    Cluster {
        #[arg(long, default_value_t = 1024)]
        k: usize,
        /// Greedy equal-size assignment instead of plain Lloyd's.
        #[arg(long)]
        balanced: bool,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Run probing sessions and emit MAP/precision metrics.
    Probe {
        /// Restrict to these categories (repeatable).
        #[arg(long)]
        category: Vec<String>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        n_query: Option<usize>,
        #[arg(long)]
        n_key: Option<usize>,
        /// Monte-Carlo correctness with this many samples per path.
        #[arg(long)]
        mc: Option<usize>,
    },
    /// InTop/OutTop group metrics over recorded sessions.
    Metrics {
        /// Session NDJSON files (default: every session under the output dir).
        session: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k_top: usize,
        #[arg(long, default_value_t = 100)]
        n_top: usize,
    },
    /// Show the cluster-penalty rerank on the worked example or a dump.
    RerankDemo {
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        context: Option<String>,
        #[arg(long, default_value_t = 20)]
        top_n: usize,
    },
    /// Compare two key spaces; optionally the probability-shift metric.
    Drift {
        #[arg(long)]
        tensor_a: PathBuf,
        #[arg(long)]
        tensor_b: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n_pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        n_tokens: usize,
        #[arg(long)]
        before_dump: Option<PathBuf>,
        #[arg(long)]
        after_dump: Option<PathBuf>,
        /// NDJSON lines {before_context, after_context, trained_token, correct}.
        #[arg(long)]
        shift_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Recorded session whose per-iteration queries are analyzed.
        #[arg(long)]
        session: Option<PathBuf>,
        /// Full-logit dump covering every session query context.
        #[arg(long)]
        queries_dump: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top_keys: usize,
    },
    /// Open-ended generation with first-token navigation; UNG diversity.
    Gen {
        #[arg(long)]
        class: String,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 10)]
        n_query: usize,
        #[arg(long, default_value_t = 10)]
        n_key: usize,
        #[arg(long, default_value = "icn")]
        strategy: Strategy,
    },
    /// Chain-of-thought self-consistency over a question file.
    Cot {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value = "icn")]
        strategy: ScStrategy,
        #[arg(long, default_value_t = 4)]
        n_paths: usize,
    },
    /// 2-D PCA projection of a token subset for external plotting.
    Project {
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u32>,
        /// JSON array with a query vector to include.
        #[arg(long)]
        query: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.trace {
        cfg.trace = true;
    }
    if let Some(url) = &cli.backend_url {
        match &mut cfg.backend {
            Some(backend) => backend.endpoint_url = Some(url.clone()),
            None => {
                cfg.backend = Some(keynav::backend::BackendConfig::http(url, "default"));
            }
        }
    }
    if let Some(env_name) = &cli.api_key_env {
        if let Some(backend) = &mut cfg.backend {
            backend.api_key_env = Some(env_name.clone());
        }
        if let Some(judge) = &mut cfg.judge {
            judge.api_key_env = Some(env_name.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Cluster {
            k,
            balanced,
            max_iters,
            tol,
        } => pipeline::cmd_cluster(&cfg, *k, *balanced, *max_iters, *tol),
        Command::Probe {
            category,
            strategy,
            n_query,
            n_key,
            mc,
        } => {
            if let Some(s) = strategy {
                cfg.probe.strategy = *s;
            }
            if let Some(q) = n_query {
                cfg.probe.n_query = *q;
            }
            if let Some(k) = n_key {
                cfg.probe.n_key = *k;
            }
            if let Some(k) = mc {
                cfg.probe.correctness = keynav::probing::CorrectnessMode::Mc(*k);
            }
            pipeline::cmd_probe(&cfg, category)
        }
        Command::Metrics {
            session,
            k_top,
            n_top,
        } => pipeline::cmd_metrics(&cfg, session, *k_top, *n_top),
        Command::RerankDemo {
            dump,
            context,
            top_n,
        } => pipeline::cmd_rerank_demo(&cfg, dump.as_deref(), context.as_deref(), *top_n),
        Command::Drift {
            tensor_a,
            tensor_b,
            n_pairs,
            n_tokens,
            before_dump,
            after_dump,
            shift_spec,
            window,
            session,
            queries_dump,
            top_keys,
        } => pipeline::cmd_drift(
            &cfg,
            tensor_a,
            tensor_b,
            *n_pairs,
            *n_tokens,
            before_dump.as_deref(),
            after_dump.as_deref(),
            shift_spec.as_deref(),
            *window,
            session.as_deref(),
            queries_dump.as_deref(),
            *top_keys,
        ),
        Command::Gen {
            class,
            domain,
            n_query,
            n_key,
            strategy,
        } => pipeline::cmd_gen(&cfg, class, domain, *n_query, *n_key, *strategy),
        Command::Cot {
            questions,
            strategy,
            n_paths,
        } => pipeline::cmd_cot(&cfg, questions, *strategy, *n_paths),
        Command::Project { ids, query } => pipeline::cmd_project(&cfg, ids, query.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
