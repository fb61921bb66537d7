use std::path::PathBuf;

use clap::Parser;

use attnbench::{
    compare_report, emit_csv_string, run_benchmark, BenchError, BenchSpec, Method, PassKind,
};

/// Benchmark tiled attention against the quadratic reference.
///
/// Each case processes the same total token count: batch size is the
/// token budget divided by the sequence length. Results are written as
/// CSV (stdout by default); `--report` adds a plain-text comparison.
#[derive(Parser, Debug)]
#[command(name = "attnbench", version)]
struct Cli {
    /// Sequence lengths to sweep; each must divide the token budget.
    #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024, 2048])]
    seq_lens: Vec<usize>,

    /// Total tokens per case.
    #[arg(long, default_value_t = 2048)]
    token_budget: usize,

    /// Per-head feature dimension.
    #[arg(long, default_value_t = 64)]
    head_dim: usize,

    /// Model width; head count is hidden-dim / head-dim.
    #[arg(long, default_value_t = 512)]
    hidden_dim: usize,

    /// Apply causal masking.
    #[arg(long)]
    causal: bool,

    /// Implementations to measure.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = vec![Method::Naive, Method::Flash])]
    methods: Vec<Method>,

    /// Which pass to time.
    #[arg(long, value_enum, default_value_t = PassKind::Fwd)]
    pass: PassKind,

    /// Timed repetitions per case; the median is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,

    /// Seed for input generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads for the tiled method; 1 runs serially.
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Rows per block for the tiled method.
    #[arg(long, default_value_t = 64)]
    block_rows: usize,

    /// Columns per block for the tiled method.
    #[arg(long, default_value_t = 64)]
    block_cols: usize,

    /// Time candidate block shapes per sequence length and use the
    /// fastest instead of --block-rows/--block-cols.
    #[arg(long)]
    autotune: bool,

    /// Skip the quadratic reference above this sequence length.
    #[arg(long, default_value_t = 4096)]
    naive_max_seq_len: usize,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,

    /// Print a comparison report after the CSV.
    #[arg(long)]
    report: bool,
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let spec = BenchSpec {
        seq_lens: cli.seq_lens,
        token_budget: cli.token_budget,
        head_dim: cli.head_dim,
        hidden_dim: cli.hidden_dim,
        causal: cli.causal,
        methods: cli.methods,
        pass: cli.pass,
        repeats: cli.repeats,
        seed: cli.seed,
        workers: cli.workers,
        block_rows: cli.block_rows,
        block_cols: cli.block_cols,
        autotune: cli.autotune,
        naive_max_seq_len: cli.naive_max_seq_len,
    };
    let run = run_benchmark(&spec)?;
    for note in &run.notes {
        eprintln!("note: {note}");
    }
    for case in &run.skipped {
        eprintln!(
            "skipped: {} at seq_len {} ({})",
            case.method, case.seq_len, case.reason
        );
    }

    let text = emit_csv_string(&run.rows)?;
    match &cli.csv {
        Some(path) => std::fs::write(path, &text)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    if cli.report {
        println!("{}", compare_report(&run.rows));
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = execute(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
