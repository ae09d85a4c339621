use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use privgendb_core::crypto::KeySet;
use privgendb_core::eval::bench::{bench_run, format_table, write_csv, BenchGrid};
use privgendb_core::index::{Egdb, DEFAULT_FP_RATE};
use privgendb_core::query::{AuditLog, Policy};
use privgendb_core::services::wire::QueryRequest;
use privgendb_core::services::{
    format_answer, format_denial, serve_data, serve_vetter, submit_query, trustee_build,
    BuildError, DataServer, Reply, ServerConfig, Vetter, VetterConfig,
};

const EXIT_ERROR: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_DENIED: u8 = 3;

#[derive(Parser)]
#[command(name = "privgendb", version, about = "Encrypted SNP/phenotype database")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encrypt a CSV table into a key file and an EGDB file.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        egdb: PathBuf,
        /// Bloom filter false-positive rate.
        #[arg(long, default_value_t = DEFAULT_FP_RATE)]
        fp: f64,
        /// Derive keys and nonces from this seed (reproducible output).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve an EGDB to vetters.
    Server {
        #[arg(long)]
        egdb: PathBuf,
        #[arg(long)]
        listen: String,
        /// Seconds before an idle search session is dropped.
        #[arg(long, default_value_t = 60)]
        idle_timeout: u64,
    },
    /// Vet user queries and run them against a data server.
    Vetter {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long)]
        listen: String,
        /// Append audit lines to this file instead of stderr.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Submit a query to a vetter.
    Query {
        #[arg(long)]
        vetter: String,
        #[arg(long)]
        user: String,
        /// count, boolean or match.
        #[arg(long = "type")]
        query_type: String,
        /// Comma-separated `field=value` / `field!=value` terms.
        #[arg(long = "where")]
        where_expr: String,
        #[arg(long)]
        kprime: Option<usize>,
        #[arg(long, default_value_t = 300)]
        timeout: u64,
    },
    /// Time build, token generation and search over a grid of synthetic tables.
    Bench {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn require_file(path: &Path) -> Result<(), ExitCode> {
    if path.exists() {
        return Ok(());
    }
    eprintln!("error: file not found: {}", path.display());
    Err(ExitCode::from(EXIT_MISSING))
}

fn build(input: &Path, keys: &Path, egdb: &Path, fp: f64, seed: Option<u64>) -> Result<ExitCode> {
    if !(fp > 0.0 && fp < 1.0) {
        anyhow::bail!("--fp must lie in (0, 1)");
    }
    let s = match trustee_build(input, keys, egdb, fp, seed) {
        Ok(s) => s,
        Err(e @ BuildError::Missing(_)) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_MISSING));
        }
        Err(e) => return Err(e.into()),
    };
    println!("records (r):     {}", s.records);
    println!("SNPs (l):        {}", s.snps);
    println!("entries (N):     {}", s.entries);
    println!("keywords:        {}", s.keywords);
    println!("bloom filter:    m={} bits, k={}, p={fp:e}", s.bloom_m, s.bloom_k);
    println!("egdb size:       {} bytes", s.egdb_bytes);
    println!("elapsed:         {:.3} s", s.elapsed.as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn server(egdb: &Path, listen: &str, idle_timeout: u64) -> Result<ExitCode> {
    if let Err(code) = require_file(egdb) {
        return Ok(code);
    }
    let egdb = Egdb::read_file(egdb).with_context(|| format!("loading {}", egdb.display()))?;
    log::info!("loaded EGDB with {} entries", egdb.inv_g.len());
    let config = ServerConfig {
        idle_timeout: Duration::from_secs(idle_timeout),
    };
    let handle = serve_data(Arc::new(DataServer::new(egdb, config)), listen)
        .with_context(|| format!("binding {listen}"))?;
    eprintln!("data server listening on {}", handle.local_addr());
    handle.join();
    Ok(ExitCode::SUCCESS)
}

fn vetter(keys: &Path, policy: &Path, server: &str, listen: &str, audit: Option<&Path>) -> Result<ExitCode> {
    for p in [keys, policy] {
        if let Err(code) = require_file(p) {
            return Ok(code);
        }
    }
    let keys = KeySet::read_file(keys).with_context(|| format!("loading {}", keys.display()))?;
    let text = fs::read_to_string(policy).with_context(|| format!("reading {}", policy.display()))?;
    let policy = Policy::parse(&text).with_context(|| format!("parsing {}", policy.display()))?;
    let sink: Box<dyn Write + Send> = match audit {
        Some(p) => Box::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        ),
        None => Box::new(io::stderr()),
    };
    let vetter = Vetter::new(keys, policy, AuditLog::new(sink), VetterConfig::new(server));
    let handle = serve_vetter(Arc::new(vetter), listen).with_context(|| format!("binding {listen}"))?;
    eprintln!("vetter listening on {}", handle.local_addr());
    handle.join();
    Ok(ExitCode::SUCCESS)
}

fn query(vetter: &str, req: QueryRequest, timeout: u64) -> Result<ExitCode> {
    let reply = submit_query(vetter, &req, Duration::from_secs(timeout))
        .with_context(|| format!("querying vetter at {vetter}"))?;
    Ok(match reply {
        Reply::Answer(a) => {
            println!("{}", format_answer(&a));
            ExitCode::SUCCESS
        }
        Reply::Denied(d) => {
            eprintln!("{}", format_denial(&d));
            ExitCode::from(EXIT_DENIED)
        }
        Reply::Error(e) => {
            eprintln!("error ({}): {}", e.code.as_str(), e.detail);
            ExitCode::from(EXIT_ERROR)
        }
    })
}

fn bench(grid: &Path, out: &Path) -> Result<ExitCode> {
    if let Err(code) = require_file(grid) {
        return Ok(code);
    }
    let text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let grid = BenchGrid::from_toml(&text).context("parsing the grid")?;
    let reports = bench_run(&grid, |r| {
        log::info!(
            "r={} l={} alpha={} n={} gamma={}: search {:.3} ms",
            r.r, r.l, r.alpha, r.n, r.gamma, r.search_ms
        )
    })?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&reports, file)?;
    print!("{}", format_table(&reports));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRIVGENDB_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build {
            input,
            keys,
            egdb,
            fp,
            seed,
        } => build(&input, &keys, &egdb, fp, seed),
        Command::Server {
            egdb,
            listen,
            idle_timeout,
        } => server(&egdb, &listen, idle_timeout),
        Command::Vetter {
            keys,
            policy,
            server,
            listen,
            audit,
        } => vetter(&keys, &policy, &server, &listen, audit.as_deref()),
        Command::Query {
            vetter,
            user,
            query_type,
            where_expr,
            kprime,
            timeout,
        } => query(
            &vetter,
            QueryRequest {
                user,
                query_type,
                where_expr,
                kprime,
            },
            timeout,
        ),
        Command::Bench { grid, out } => bench(&grid, &out),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_ERROR)
    })
}
