use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use streamtrig::bench::{
    self, life::LifeConfig, parse_grid, parse_size, pingpong::default_iterations, Backend, BenchResult, Board,
    SweepConfig,
};
use streamtrig::{CostModel, Error, Result};

#[derive(Parser)]
#[command(name = "bench", about = "Stream-triggered communication benchmarks on the simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-rank GPU ping-pong latency and bandwidth.
    Pingpong,
    /// Game of Life halo exchange on one rank grid.
    Life,
    /// Strong-scaling sweep of Life over several rank grids.
    Sweep,
}

#[derive(Args)]
struct Opts {
    /// Backends, comma separated: baseline, st-send, st-rsend. Default: all.
    #[arg(long, global = true, value_delimiter = ',')]
    backend: Vec<Backend>,
    /// Ping-pong message sizes, or the Life board edge (first value).
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_size)]
    sizes: Vec<usize>,
    /// Rank grid `RxC`; the sweep accepts a comma separated list.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_grid)]
    grid: Vec<(usize, usize)>,
    /// Life generations.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Ping-pong round trips per size (default depends on size).
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Cost model file of `key=value` lines.
    #[arg(long, global = true)]
    cost_model: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Write the event trace (`time,seq,target,kind` per line) here.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Seed of the random initial Life board.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Opts {
    fn backends(&self) -> Vec<Backend> {
        if self.backend.is_empty() {
            Backend::ALL.to_vec()
        } else {
            self.backend.clone()
        }
    }

    fn board_edge(&self, default: usize) -> usize {
        self.sizes.first().copied().unwrap_or(default)
    }
}

const DEFAULT_SIZES: [usize; 8] = [8, 64, 512, 4 << 10, 32 << 10, 256 << 10, 2 << 20, 8 << 20];

fn open_trace(opts: &Opts) -> Result<Option<BufWriter<File>>> {
    Ok(opts.trace.as_ref().map(File::create).transpose()?.map(BufWriter::new))
}

fn write_trace(out: &mut Option<BufWriter<File>>, trace: &[streamtrig::simclock::TraceRecord]) -> Result<()> {
    if let Some(w) = out {
        for rec in trace {
            writeln!(w, "{rec}")?;
        }
    }
    Ok(())
}

fn pingpong(cost: &CostModel, opts: &Opts) -> Result<Vec<BenchResult>> {
    let sizes = if opts.sizes.is_empty() {
        DEFAULT_SIZES.to_vec()
    } else {
        opts.sizes.clone()
    };
    let mut trace = open_trace(opts)?;
    let mut out = Vec::new();
    for backend in opts.backends() {
        for &size in &sizes {
            let n = opts.iterations.unwrap_or_else(|| default_iterations(size));
            let run = bench::run_pingpong_size(cost, backend, size, n, trace.is_some())?;
            info!("{backend} {size} B: {:.1} ns one-way", run.result.mean_ns / 2.0);
            write_trace(&mut trace, &run.trace)?;
            out.push(run.result);
        }
    }
    Ok(out)
}

fn life(cost: &CostModel, opts: &Opts) -> Result<Vec<BenchResult>> {
    let n = opts.board_edge(64);
    let initial = match opts.seed {
        Some(seed) => Board::soup(n, seed),
        None => Board::glider_blinker(n),
    };
    let grid = opts.grid.first().copied().unwrap_or((2, 2));
    let mut trace = open_trace(opts)?;
    let mut out = Vec::new();
    for backend in opts.backends() {
        let cfg = LifeConfig {
            backend,
            grid,
            steps: opts.steps.unwrap_or(100),
            initial: initial.clone(),
            verify: true,
            trace: trace.is_some(),
        };
        let run = bench::run_game_of_life(cost, &cfg)?;
        eprintln!("{backend}: digest {} solve {} ns", run.digest, run.solve_ns);
        write_trace(&mut trace, &run.trace)?;
        out.push(run.result);
    }
    Ok(out)
}

fn sweep(cost: &CostModel, opts: &Opts) -> Result<Vec<BenchResult>> {
    let cfg = SweepConfig {
        n: opts.board_edge(256),
        grids: if opts.grid.is_empty() {
            SweepConfig::default_grids()
        } else {
            opts.grid.clone()
        },
        backends: opts.backends(),
        steps: opts.steps.unwrap_or(50),
        seed: opts.seed.unwrap_or(0),
    };
    let mut trace = open_trace(opts)?;
    let out = bench::run_scaling_sweep(cost, &cfg, trace.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let cost = match &cli.opts.cost_model {
        Some(path) => CostModel::load(path)?,
        None => CostModel::default(),
    };
    let results = match cli.cmd {
        Cmd::Pingpong => pingpong(&cost, &cli.opts)?,
        Cmd::Life => life(&cost, &cli.opts)?,
        Cmd::Sweep => sweep(&cost, &cli.opts)?,
    };
    match &cli.opts.csv {
        Some(path) => bench::write_csv(BufWriter::new(File::create(path)?), &results),
        None => bench::write_csv(io::stdout().lock(), &results),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            if let Error::Bench(_) | Error::Config(_) = e {
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
