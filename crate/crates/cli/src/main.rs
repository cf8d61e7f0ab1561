use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use treedoc::bench::{self, BenchConfig};
use treedoc::protocol::{initiate_flatten, CoreEndpoint, OpKind, Operation, Role, Site};
use treedoc::sim::{self, SimConfig};
use treedoc::trace::{self, Granularity, Replayer};
use treedoc::SiteId;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "treedoc", version, about = "Replay, simulate and benchmark the Treedoc CRDT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replay an edit trace and write per-operation metrics.
    Replay {
        /// Trace file. With --revisions it is written from the revision
        /// history first, otherwise it is read.
        #[arg(long)]
        trace: PathBuf,
        /// Directory of revision files, diffed in file-name order.
        #[arg(long)]
        revisions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Gran::Paragraph)]
        granularity: Gran,
        /// Revisions between flattens; 0 disables flattening.
        #[arg(long, default_value_t = 0)]
        flatten_every: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        sites: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the network simulator and check convergence.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        core: usize,
        #[arg(long, default_value_t = 0)]
        nebula: usize,
        #[arg(long, default_value_t = 1000)]
        ops: usize,
        #[arg(long, default_value_t = 0.3, value_parser = probability)]
        delete_ratio: f64,
        /// Generated operations between flatten attempts; 0 disables flattening.
        #[arg(long, default_value_t = 500)]
        flatten_every: usize,
        /// Metrics CSV sampled from the first core site.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tab-separated event log.
        #[arg(long)]
        event_log: Option<PathBuf>,
        /// Test hook: lose one operation message so the run diverges.
        #[arg(long)]
        inject_skip_delivery: bool,
    },
    /// Replay a synthetic single-site workload and report throughput.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        ops: usize,
        /// Revisions between flattens; 0 disables flattening.
        #[arg(long, default_value_t = 1000)]
        flatten_every: u64,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        ops_per_revision: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Walk through a nebula catching up with a committed flatten.
    DemoCatchup,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Gran {
    Paragraph,
    Word,
}

impl From<Gran> for Granularity {
    fn from(g: Gran) -> Self {
        match g {
            Gran::Paragraph => Granularity::Paragraph,
            Gran::Word => Granularity::Word,
        }
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Replay { trace, revisions, granularity, flatten_every, sites, out } => {
            replay(&trace, revisions.as_deref(), granularity.into(), flatten_every, sites as usize, &out)
        }
        Command::Simulate { seed, core, nebula, ops, delete_ratio, flatten_every, out, event_log, inject_skip_delivery } => {
            let cfg = SimConfig {
                seed,
                core_count: core,
                nebula_count: nebula,
                op_count: ops,
                delete_ratio,
                flatten_interval: flatten_every,
                inject_skip_delivery,
                ..SimConfig::default()
            };
            simulate(&cfg, out.as_deref(), event_log.as_deref())
        }
        Command::Bench { ops, flatten_every, ops_per_revision, seed } => {
            bench(&BenchConfig { ops, flatten_every, ops_per_revision: ops_per_revision as usize, seed })
        }
        Command::DemoCatchup => demo_catchup(),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    File::create(path).map(BufWriter::new).map_err(|e| format!("{}: {e}", path.display()))
}

fn replay(
    trace_path: &Path,
    revisions: Option<&Path>,
    granularity: Granularity,
    flatten_every: u64,
    sites: usize,
    out: &Path,
) -> Result<ExitCode, String> {
    let events = match revisions {
        Some(dir) => {
            let revs = trace::read_revisions_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let events = trace::revisions_to_trace(&revs, granularity);
            let mut w = create(trace_path)?;
            trace::write_trace(&events, &mut w).and_then(|_| w.flush()).map_err(|e| e.to_string())?;
            events
        }
        None => {
            let f = File::open(trace_path).map_err(|e| format!("{}: {e}", trace_path.display()))?;
            trace::read_trace(BufReader::new(f)).map_err(|e| format!("{}: {e}", trace_path.display()))?
        }
    };
    let mut replayer = Replayer::new(flatten_every, sites);
    for e in &events {
        replayer.apply(e).map_err(|e| e.to_string())?;
    }
    let text_len = replayer.text().len();
    let epoch = replayer.site().epoch();
    let rows = replayer.into_rows();
    let mut w = create(out)?;
    trace::write_metrics_csv(&rows, &mut w).map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())?;
    let last = rows.last();
    println!("replayed {} operations across {sites} site(s)", events.len());
    println!("final document: {text_len} bytes, epoch {epoch}");
    if let Some(r) = last {
        println!(
            "final tree: {} nodes, {:.1}% tombstones, mean TID {:.1} bytes",
            r.tree_size_nodes,
            r.tombstone_fraction * 100.0,
            r.mean_tid_encoded_bytes
        );
    }
    println!("metrics written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn simulate(cfg: &SimConfig, out: Option<&Path>, event_log: Option<&Path>) -> Result<ExitCode, String> {
    let report = match sim::run(cfg) {
        Ok(r) => r,
        Err(sim::SimError::InvalidConfig(msg)) => return Err(format!("invalid configuration: {msg}")),
        Err(e) => {
            eprintln!("simulation failed: {e}");
            return Ok(ExitCode::from(EXIT_DIVERGED));
        }
    };
    if let Some(path) = out {
        let mut w = create(path)?;
        sim::write_metrics_csv(&report.metrics, &mut w).map_err(|e| e.to_string())?;
        w.flush().map_err(|e| e.to_string())?;
    }
    if let Some(path) = event_log {
        let mut w = create(path)?;
        report.event_log.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| e.to_string())?;
    }
    let s = &report.stats;
    println!(
        "{} core + {} nebula sites, {} ops generated, {} messages, final tick {}",
        cfg.core_count, cfg.nebula_count, s.ops_generated, s.messages_sent, s.final_tick
    );
    println!(
        "flattens: {} committed, {} aborted; nebula catch-ups: {}",
        s.flattens_committed, s.flattens_aborted, s.catch_ups
    );
    if report.converged {
        println!("converged: digest {}", report.final_digest);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("NOT converged");
        for d in &report.divergence {
            eprintln!("  {d}");
        }
        Ok(ExitCode::from(EXIT_DIVERGED))
    }
}

fn bench(cfg: &BenchConfig) -> Result<ExitCode, String> {
    let r = bench::run(cfg).map_err(|e| e.to_string())?;
    println!("{} ops in {:.3} s: {:.0} ops/sec", r.ops, r.elapsed_secs, r.ops_per_sec);
    println!("max per-op latency: {:.3} ms", r.max_op_latency_ns as f64 / 1e6);
    println!("flattens: {} (slowest {:.3} ms), final epoch {}", r.flattens, r.max_flatten_ns as f64 / 1e6, r.final_epoch);
    Ok(ExitCode::SUCCESS)
}

fn print_ops(ops: &[Operation]) {
    for op in ops {
        match op.kind {
            OpKind::Insert => println!(
                "  insert {:?} at {} (origin {}#{})",
                String::from_utf8_lossy(op.atom.as_ref().map(|a| a.as_bytes()).unwrap_or_default()),
                op.tid,
                op.origin,
                op.origin_seq
            ),
            OpKind::Delete => println!("  delete {} (origin {}#{})", op.tid, op.origin, op.origin_seq),
        }
    }
}

fn demo_catchup() -> Result<ExitCode, String> {
    let err = |e: treedoc::protocol::ProtocolError| e.to_string();
    let mut c1 = Site::new(SiteId::from("C1"), Role::Core);
    let mut c2 = Site::new(SiteId::from("C2"), Role::Core);
    let mut n = Site::new(SiteId::from("N"), Role::Nebula);

    c1.insert_at(0, "a").map_err(err)?;
    c1.insert_at(1, "c").map_err(err)?;
    for op in c1.take_outbox() {
        c2.deliver(op.clone());
        n.deliver(op);
    }
    println!("cores C1, C2 and nebula N share {:?}", n.replica().text_string());

    n.insert_at(1, "b").map_err(err)?;
    n.delete_at(2).map_err(err)?;
    n.take_outbox();
    println!("N edits locally to {:?} while the cores flatten without it", n.replica().text_string());

    let core_log = c1.log().ops().to_vec();
    let outcome = initiate_flatten(&mut c1, &mut [&mut c2 as &mut dyn CoreEndpoint], 1).map_err(err)?;
    println!("core flatten: {outcome:?}\n");

    println!("N's tree before colouring:");
    print!("{}", n.replica().dump());
    let mut coloured = n.clone();
    let core_ids: HashSet<_> = core_log.iter().map(|o| o.id()).collect();
    coloured.mark_colors(&core_ids).map_err(err)?;
    println!("\nN's tree after colouring:");
    print!("{}", coloured.replica().dump());

    let report = n.catch_up_with_report(&core_log, c1.epoch()).map_err(err)?;
    println!("\ncyan list:");
    for entry in &report.list {
        let anchor = entry.anchor.as_ref().map_or("sentinel".to_string(), |t| t.to_string());
        let atom = entry.atom.as_ref().map(|a| String::from_utf8_lossy(a.as_bytes()).into_owned());
        let black: Vec<String> = entry.black_subtrees.iter().map(|t| t.to_string()).collect();
        println!("  {anchor} {atom:?} black subtrees: [{}]", black.join(", "));
    }
    println!("\nN's tree in epoch {}:", n.epoch());
    print!("{}", n.replica().dump());
    println!("\nemitted operations:");
    print_ops(&report.emitted);

    for op in n.take_outbox() {
        c1.deliver(op.clone());
        c2.deliver(op);
    }
    let texts = [c1.replica().text_string(), c2.replica().text_string(), n.replica().text_string()];
    println!("\nafter delivery: C1 {:?}, C2 {:?}, N {:?}", texts[0], texts[1], texts[2]);
    let same = c1.replica().digest() == n.replica().digest() && c2.replica().digest() == n.replica().digest();
    println!("replicas identical: {same}");
    Ok(if same { ExitCode::SUCCESS } else { ExitCode::from(EXIT_DIVERGED) })
}
