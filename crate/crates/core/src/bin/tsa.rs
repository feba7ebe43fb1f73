use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use token_sparse::bench::{run, Command, Format, ModeName, RunConfig};
use token_sparse::coverage::ForcedPolicy;

#[derive(Parser)]
#[command(name = "tsa", version, about = "Token sparse attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Fast path vs. masked oracle on random instances.
    Equiv,
    /// Coverage budgets and FLOP speedup across tau and length.
    Sweep,
    /// Dynamic coverage next to fixed-ratio budgets.
    FixedVsDynamic,
    /// Per-layer drift profile and sparse-layer set.
    Drift,
    /// Random layer triplets: drift rank vs. output deviation.
    Triplet,
    /// FLOP breakdown for one configuration.
    Flops,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Equiv => Command::Equiv,
            Cmd::Sweep => Command::Sweep,
            Cmd::FixedVsDynamic => Command::FixedVsDynamic,
            Cmd::Drift => Command::Drift,
            Cmd::Triplet => Command::Triplet,
            Cmd::Flops => Command::Flops,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Dynamic,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Forced {
    None,
    LastToken,
    TrailingWindow,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(clap::Args)]
struct Opts {
    /// JSON run config; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Coverage thresholds, comma separated.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    tau: Option<Vec<f64>>,
    /// Fixed sparsity ratios, comma separated.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    s_fixed: Option<Vec<f64>>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    last_q: Option<usize>,
    #[arg(long, global = true)]
    kernel: Option<usize>,
    #[arg(long, global = true, value_enum)]
    forced: Option<Forced>,
    /// Sequence lengths, comma separated.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    seq_len: Option<Vec<usize>>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Use seeded random weights (the default when no checkpoint is set).
    #[arg(long, global = true)]
    random_init: bool,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    prompts: Option<usize>,
    /// Explicit budgets per sparse layer for `flops`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    k_keep: Option<Vec<usize>>,
    /// Report path; `.csv` selects CSV. Stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutFormat>,
}

impl Opts {
    fn into_config(self) -> token_sparse::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            c.mode = match m {
                Mode::Dense => ModeName::Dense,
                Mode::Dynamic => ModeName::Dynamic,
                Mode::Fixed => ModeName::Fixed,
            };
        }
        if let Some(f) = self.forced {
            c.forced = match f {
                Forced::None => ForcedPolicy::None,
                Forced::LastToken => ForcedPolicy::LastToken,
                Forced::TrailingWindow => ForcedPolicy::TrailingWindow,
            };
        }
        if let Some(f) = self.format {
            c.format = Some(match f {
                OutFormat::Json => Format::Json,
                OutFormat::Csv => Format::Csv,
            });
        }
        c.tau = self.tau.or(c.tau);
        c.s_fixed = self.s_fixed.or(c.s_fixed);
        c.seq_len = self.seq_len.or(c.seq_len);
        c.k_keep = self.k_keep.or(c.k_keep);
        c.trials = self.trials.or(c.trials);
        c.delta = self.delta.unwrap_or(c.delta);
        c.epsilon = self.epsilon.unwrap_or(c.epsilon);
        c.last_q = self.last_q.unwrap_or(c.last_q);
        c.kernel = self.kernel.unwrap_or(c.kernel);
        c.seed = self.seed.unwrap_or(c.seed);
        c.runs = self.runs.unwrap_or(c.runs);
        c.prompts = self.prompts.unwrap_or(c.prompts);
        c.out = self.out.or(c.out);
        if self.random_init {
            c.checkpoint = None;
        } else if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint;
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command = Command::from(cli.command);
    let result = cli.opts.into_config().and_then(|config| {
        let out = config.out.clone();
        let format = config
            .format
            .or_else(|| out.as_deref().map(Format::from_path))
            .unwrap_or(Format::Json);
        let report = run(command, config)?;
        let text = report.render(format)?;
        match &out {
            Some(path) => fs::write(path, text)?,
            None => print!("{text}"),
        }
        Ok(report)
    });
    match result {
        Ok(report) => {
            for w in report.warnings() {
                eprintln!("warning: {w}");
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("tsa {command}: suite failed");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("tsa {command}: {e}");
            ExitCode::from(1)
        }
    }
}
