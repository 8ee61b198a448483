use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use detr_assign::assignment::{Assignment, CostMatrix};
use detr_assign::experiment::{run_ablation, run_train, ExperimentManifest, ExperimentReport};
use detr_assign::metrics::{
    dataset_instability, fcs, fis, fos, group_by_epoch, is_metric, read_assignment_log, write_instability_csv,
};
use detr_assign::refinement::{fd_sensitivities, gradient_flow, tape_sensitivities, GradFlowMatrix, RefineScheme};
use detr_assign::selftest::{self, random_trace_point, SelftestOptions};
use detr_assign::Error;

const EXIT_PROPERTY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "detr-assign", version, about = "Query assignment, box refinement and assignment stability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Hungarian,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in property suites and print a pass/fail table.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        fault_inject: Option<Fault>,
    },
    /// Gradient reach of each offset into each layer loss, symbolic and measured.
    Gradflow {
        #[arg(long)]
        scheme: RefineScheme,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the manifest's strategy and scheme over its seed list.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the strategy x scheme grid over the manifest's seed list.
    Ablate {
        #[arg(long, alias = "grid")]
        manifest: PathBuf,
    },
    /// Per-epoch IS/FIS from assignment log lines.
    AnalyzeLogs {
        #[arg(long)]
        logs: PathBuf,
        /// One row per image instead of dataset means.
        #[arg(long)]
        per_image: bool,
    },
}

enum Failure {
    Property(String),
    Usage(String),
    Divergence(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            Error::InvalidArgument(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Row-by-row greedy picks; feasible but not optimal.
fn greedy_solver(cost: &CostMatrix) -> detr_assign::Result<Assignment> {
    let mut used = vec![false; cost.cols()];
    let mut pairs = vec![];
    for r in 0..cost.rows().min(cost.cols()) {
        let c = (0..cost.cols())
            .filter(|c| !used[*c])
            .min_by(|a, b| cost.get(r, *a).total_cmp(&cost.get(r, *b)))
            .expect("a free column remains");
        used[c] = true;
        pairs.push((r, c));
    }
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment {
        pairs,
        total_cost,
        excess_gts: 0,
    })
}

fn cmd_selftest(seed: u64, fault: Option<Fault>) -> Result<(), Failure> {
    let mut opts = SelftestOptions {
        seed,
        ..SelftestOptions::default()
    };
    if let Some(Fault::Hungarian) = fault {
        opts.solver = greedy_solver;
    }
    let report = selftest::run(&opts);
    println!("{report}");
    if report.passed() {
        return Ok(());
    }
    let names: Vec<&str> = report.failures().map(|c| c.property).collect();
    Err(Failure::Property(format!("failed: {}", names.join(", "))))
}

fn cmd_gradflow(scheme: RefineScheme, layers: usize, seed: u64) -> Result<(), Failure> {
    if layers == 0 {
        return Err(Failure::Usage("--layers must be at least 1".into()));
    }
    let symbolic = gradient_flow(scheme, layers)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (refs, offs) = random_trace_point(&mut rng, layers);
    let tape = tape_sensitivities(scheme, &refs, &offs)?;
    let fd = fd_sensitivities(scheme, &refs, &offs)?;
    let tape_reach = GradFlowMatrix::from_sensitivities(&tape, 1e-12);
    let fd_reach = GradFlowMatrix::from_sensitivities(&fd, 1e-9);

    let mut out = csv::Writer::from_writer(io::stdout().lock());
    out.write_record(["loss_layer", "offset_layer", "symbolic", "tape", "finite_difference", "tape_grad", "fd_grad"])
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let bit = |b: bool| if b { "1" } else { "0" }.to_string();
    let mut mismatches = 0;
    for l in 0..layers {
        for n in 0..layers {
            let (s, t, f) = (symbolic.reach[l][n], tape_reach.reach[l][n], fd_reach.reach[l][n]);
            mismatches += usize::from(s != t || s != f);
            let mag = |x: [f64; 4]| x.iter().map(|v| v.abs()).fold(0.0, f64::max);
            out.write_record([
                (l + 1).to_string(),
                (n + 1).to_string(),
                bit(s),
                bit(t),
                bit(f),
                format!("{:.6e}", mag(tape[l][n])),
                format!("{:.6e}", mag(fd[l][n])),
            ])
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    out.flush()?;
    log::info!("{scheme} L={layers}: {} reachable cells", symbolic.count_true());
    if mismatches > 0 {
        return Err(Failure::Property(format!("gradient_reach: {mismatches} cells disagree with the symbolic pattern")));
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<ExperimentManifest, Failure> {
    ExperimentManifest::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn report(r: &ExperimentReport) -> Result<(), Failure> {
    println!("{}", r.run_dir.join("summary.csv").display());
    for c in &r.cells {
        log::info!("{}/{}: {} AP median {:.4}", c.strategy, c.scheme, c.status, c.ap_median);
    }
    match r.divergence() {
        Some(c) => Err(Failure::Divergence(format!("{}/{}: {}", c.strategy, c.scheme, c.status))),
        None => Ok(()),
    }
}

fn cmd_analyze_logs(path: &Path, per_image: bool) -> Result<(), Failure> {
    let file = File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let records = read_assignment_log(BufReader::new(file))?;
    if records.is_empty() {
        return Err(Failure::Usage(format!("{}: no assignment records", path.display())));
    }
    let logs = group_by_epoch(records)?;
    if logs.len() < 2 {
        return Err(Failure::Usage(format!("{}: need at least two epochs", path.display())));
    }
    let stdout = io::stdout().lock();
    if !per_image {
        let rows = logs
            .windows(2)
            .map(|w| dataset_instability(&w[1], &w[0]))
            .collect::<detr_assign::Result<Vec<_>>>()?;
        return Ok(write_instability_csv(stdout, &rows)?);
    }
    let mut out = csv::Writer::from_writer(stdout);
    let csv_err = |e: csv::Error| Failure::Runtime(e.to_string());
    out.write_record(["epoch", "image_id", "IS", "FCS", "FOS", "FIS"]).map_err(csv_err)?;
    for w in logs.windows(2) {
        dataset_instability(&w[1], &w[0])?;
        for (cur, prev) in w[1].records.values().zip(w[0].records.values()) {
            out.write_record([
                cur.epoch.to_string(),
                cur.image_id.to_string(),
                is_metric(cur, prev)?.to_string(),
                fcs(cur, prev)?.to_string(),
                fos(cur, prev)?.to_string(),
                fis(cur, prev)?.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Selftest { seed, fault_inject } => cmd_selftest(seed, fault_inject),
        Command::Gradflow { scheme, layers, seed } => cmd_gradflow(scheme, layers, seed),
        Command::Train { manifest } => load_manifest(&manifest).and_then(|m| report(&run_train(&m)?)),
        Command::Ablate { manifest } => load_manifest(&manifest).and_then(|m| report(&run_ablation(&m)?)),
        Command::AnalyzeLogs { logs, per_image } => cmd_analyze_logs(&logs, per_image),
    };
    let _ = io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_PROPERTY)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Divergence(m)) => {
            eprintln!("error: diverged: {m}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_PROPERTY)
        }
    }
}
