use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use entkd::app::{record_streams, run_loopback, run_node, Role, SessionConfig, SessionReport};
use entkd::Error;

#[derive(Parser)]
#[command(name = "entkd", version, about = "Entangled-photon QKD link simulator and post-processing nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both parties in one process over an in-memory channel.
    Loopback(RunArgs),
    /// Run the source-side node; listens on the peer address.
    Alice(RunArgs),
    /// Run the receiver-side node; connects to the peer address.
    Bob(RunArgs),
    /// Write the simulated detection streams of both sides to a directory.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    peer: Option<String>,
    /// Metrics CSV output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Key file for a node; output directory for loopback.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

impl RunArgs {
    fn config(&self) -> Result<SessionConfig, Error> {
        let mut cfg = SessionConfig::load(&self.config)?;
        let s = &mut cfg.session;
        if self.peer.is_some() {
            s.peer.clone_from(&self.peer);
        }
        if self.metrics.is_some() {
            s.metrics.clone_from(&self.metrics);
        }
        if self.keys.is_some() {
            s.keys.clone_from(&self.keys);
        }
        if self.seed.is_some() {
            s.seed = self.seed;
        }
        if self.duration.is_some() {
            s.duration = self.duration;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summary(who: &str, r: &SessionReport) {
    eprintln!(
        "{who}: {} epochs, {} sifted bits, {} clusters ({} discarded, {} mismatched), {} secret bits, secret/sifted {:.4}, error fraction {:.4}",
        r.epochs,
        r.sifted_bits,
        r.clusters.len(),
        r.discarded_clusters(),
        r.mismatched_clusters,
        r.secret_bits,
        r.secret_fraction(),
        r.error_fraction()
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Loopback(args) => {
            let report = run_loopback(&args.config()?)?;
            summary("alice", &report.alice);
            summary("bob", &report.bob);
        }
        Command::Alice(args) => summary("alice", &run_node(&args.config()?, Role::Alice)?),
        Command::Bob(args) => summary("bob", &run_node(&args.config()?, Role::Bob)?),
        Command::Simulate { run, out } => {
            let (a, b) = record_streams(&run.config()?, &out)?;
            eprintln!("wrote {} and {}", a.display(), b.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::ChannelClosed => 3,
        Error::Protocol(_) | Error::Decode { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("entkd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
