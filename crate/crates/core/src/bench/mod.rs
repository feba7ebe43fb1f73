//! Experiment commands behind the `tsa` binary.
//!
//! Every command is a pure function of a [`RunConfig`]: same config, same
//! bytes out. Reports embed the resolved config they were produced with.

mod compare;
mod equiv;
mod profile;
mod stats;
mod sweep;
mod triplet;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageParams, ForcedPolicy, DEFAULT_KERNEL, DEFAULT_LAST_Q};
use crate::drift::{DEFAULT_DELTA, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model, ModelConfig};

pub use compare::{cmd_fixed_vs_dynamic, CompareReport, CompareRow, ReferenceSparsity};
pub use equiv::{cmd_equiv, EquivReport, EquivTrial, EQUIV_TOLERANCE};
pub use profile::{cmd_drift, cmd_flops, DriftReport, FlopsReport};
pub use stats::{relative_l2, spearman};
pub use sweep::{cmd_sweep, synthetic_tail_scores, SweepReport, SweepRow};
pub use triplet::{cmd_triplet, TripletReport, TripletRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Equiv,
    Sweep,
    FixedVsDynamic,
    Drift,
    Triplet,
    Flops,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Command::Equiv => "equiv",
            Command::Sweep => "sweep",
            Command::FixedVsDynamic => "fixed-vs-dynamic",
            Command::Drift => "drift",
            Command::Triplet => "triplet",
            Command::Flops => "flops",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// `.csv` means CSV, anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Dense,
    #[default]
    Dynamic,
    Fixed,
}

/// Parameters shared by all commands. List-valued fields left unset take a
/// per-command default in [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ModeName,
    pub tau: Option<Vec<f64>>,
    pub delta: f64,
    pub epsilon: f64,
    pub last_q: usize,
    pub kernel: usize,
    pub forced: ForcedPolicy,
    pub s_fixed: Option<Vec<f64>>,
    pub seq_len: Option<Vec<usize>>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Model shape used when no checkpoint is given.
    pub model: ModelConfig,
    /// Randomised instances for `equiv`.
    pub trials: Option<usize>,
    /// Sampled layer triplets for `triplet`.
    pub runs: usize,
    /// Calibration prompts for `drift`.
    pub prompts: usize,
    /// Explicit per-sparse-layer budgets for `flops`.
    pub k_keep: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ModeName::default(),
            tau: None,
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
            last_q: DEFAULT_LAST_Q,
            kernel: DEFAULT_KERNEL,
            forced: ForcedPolicy::default(),
            s_fixed: None,
            seq_len: None,
            seed: 0,
            checkpoint: None,
            model: ModelConfig::default(),
            trials: None,
            runs: 200,
            prompts: 2,
            k_keep: None,
            out: None,
            format: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    /// Fills the per-command defaults and checks every parameter range.
    pub fn resolve(mut self, command: Command) -> Result<Self> {
        let (tau, seq_len): (&[f64], &[usize]) = match command {
            Command::Equiv => (&[0.0, 0.005, 0.1, 0.5, 0.99], &[16, 64, 256]),
            Command::Sweep => (&[0.0, 0.005, 0.01, 0.05, 0.1, 0.3], &[64, 128, 256]),
            Command::FixedVsDynamic => (&[0.005, 0.01], &[256]),
            Command::Drift => (&[], &[128]),
            Command::Triplet => (&[0.99], &[128]),
            Command::Flops => (&[0.005], &[256]),
        };
        self.tau.get_or_insert_with(|| tau.to_vec());
        self.seq_len.get_or_insert_with(|| seq_len.to_vec());
        self.s_fixed.get_or_insert_with(|| vec![0.3, 0.5]);
        if command == Command::Equiv {
            self.trials.get_or_insert(135);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(t) = self.tau.iter().flatten().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("tau values must lie in [0, 1], got {t}"));
        }
        if let Some(s) = self.s_fixed.iter().flatten().find(|s| !(0.0..1.0).contains(*s)) {
            return bad(format!("fixed sparsity must lie in [0, 1), got {s}"));
        }
        if self.seq_len.iter().flatten().any(|&l| l == 0) {
            return bad("seq_len values must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1], got {}", self.delta));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.last_q == 0 {
            return bad("last_q must be at least 1".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd and positive, got {}", self.kernel));
        }
        if self.prompts == 0 {
            return bad("prompts must be at least 1".into());
        }
        self.model.validate()
    }

    pub fn coverage(&self) -> CoverageParams {
        CoverageParams {
            last_q: self.last_q,
            kernel: self.kernel,
            forced: self.forced,
        }
    }

    pub(crate) fn taus(&self) -> &[f64] {
        self.tau.as_deref().unwrap_or_default()
    }

    pub(crate) fn seq_lens(&self) -> &[usize] {
        self.seq_len.as_deref().unwrap_or_default()
    }

    pub(crate) fn fixed_ratios(&self) -> &[f64] {
        self.s_fixed.as_deref().unwrap_or_default()
    }

    /// Sequence length for single-length commands.
    pub(crate) fn first_seq_len(&self) -> Result<usize> {
        self.seq_lens()
            .first()
            .copied()
            .ok_or_else(|| Error::Config("seq_len list is empty".into()))
    }

    /// The checkpoint if one is configured, otherwise random weights drawn
    /// from `seed`.
    pub fn load_model(&self) -> Result<Model> {
        match &self.checkpoint {
            Some(path) => load_checkpoint(path),
            None => Model::init_random(self.model.clone(), self.seed),
        }
    }
}

/// Uniform random token ids; `stream` separates independent prompts drawn
/// from the same seed.
pub fn random_tokens(seed: u64, stream: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Output of any command.
#[derive(Debug, Clone)]
pub enum Report {
    Equiv(EquivReport),
    Sweep(SweepReport),
    FixedVsDynamic(CompareReport),
    Drift(DriftReport),
    Triplet(TripletReport),
    Flops(FlopsReport),
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let text = match self {
            Report::Equiv(r) => serde_json::to_string_pretty(r)?,
            Report::Sweep(r) => serde_json::to_string_pretty(r)?,
            Report::FixedVsDynamic(r) => serde_json::to_string_pretty(r)?,
            Report::Drift(r) => r.profile.to_json()?,
            Report::Triplet(r) => serde_json::to_string_pretty(r)?,
            Report::Flops(r) => serde_json::to_string_pretty(r)?,
        };
        Ok(text + "\n")
    }

    pub fn to_csv(&self) -> String {
        match self {
            Report::Equiv(r) => r.to_csv(),
            Report::Sweep(r) => r.to_csv(),
            Report::FixedVsDynamic(r) => r.to_csv(),
            Report::Drift(r) => r.profile.to_csv(),
            Report::Triplet(r) => r.to_csv(),
            Report::Flops(r) => r.to_csv(),
        }
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => Ok(self.to_csv()),
        }
    }

    /// `false` only for an equivalence suite with a trial over tolerance.
    pub fn passed(&self) -> bool {
        match self {
            Report::Equiv(r) => r.passed,
            _ => true,
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        match self {
            Report::Equiv(r) => r.warnings.clone(),
            Report::Triplet(r) if !r.correlation_defined => {
                vec!["rank correlation undefined (constant column); reported as 0".into()]
            }
            _ => Vec::new(),
        }
    }
}

/// Resolves `config` for `command` and runs it.
pub fn run(command: Command, config: RunConfig) -> Result<Report> {
    let config = config.resolve(command)?;
    Ok(match command {
        Command::Equiv => Report::Equiv(cmd_equiv(&config)?),
        Command::Sweep => Report::Sweep(cmd_sweep(&config)?),
        Command::FixedVsDynamic => Report::FixedVsDynamic(cmd_fixed_vs_dynamic(&config)?),
        Command::Drift => Report::Drift(cmd_drift(&config)?),
        Command::Triplet => Report::Triplet(cmd_triplet(&config)?),
        Command::Flops => Report::Flops(cmd_flops(&config)?),
    })
}

pub(crate) fn csv_row(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}
