use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use persrep_core::pipeline::PipelineConfig;
use persrep_core::training::LossKind;

#[derive(Parser, Debug)]
#[command(name = "persrep", version, about = "Personalized encoder adaptation from synthetic pools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset directory and print a summary.
    Ingest {
        root: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_test: usize,
    },
    /// Synthesize the pool of one instance.
    Generate(StageArgs),
    /// Filter a pool by masked perceptual similarity to the real images.
    Filter(StageArgs),
    /// Fine-tune adapters on a pool.
    Train(StageArgs),
    /// Evaluate the base encoder, or one instance's adapted encoder.
    Eval(EvalArgs),
    /// Fidelity and diversity of a pool.
    Analyze(StageArgs),
    /// Full pipeline for every instance.
    Run(RunArgs),
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every child of the config's sweep grid.
    Sweep(RunArgs),
    /// Write the procedural dataset and the bundled CPU config.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Infonce,
    InfonceMultipos,
    Hinge,
    CrossEntropy,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Infonce => LossKind::InfoNce,
            LossArg::InfonceMultipos => LossKind::InfoNceMultipos,
            LossArg::Hinge => LossKind::Hinge,
            LossArg::CrossEntropy => LossKind::CrossEntropy,
        }
    }
}

/// Flags that override fields of the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Pipeline config (JSON). Defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Encoder name [default: toy-vit].
    #[arg(long)]
    pub encoder: Option<String>,
    /// Seed for generation and training [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic positives per instance [default: 450].
    #[arg(long)]
    pub n_positives: Option<usize>,
    /// Synthetic negatives per instance [default: 1000].
    #[arg(long)]
    pub n_negatives: Option<usize>,
    /// Guidance scale for generated pools [default: 5.0].
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Prompt with the bare category instead of the caption corpus.
    #[arg(long)]
    pub no_llm_captions: bool,
    /// Contrastive objective [default: infonce].
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Training pairs per epoch [default: 4500].
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep positives at least this similar to the real images [suggested: 0.6].
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    /// Concurrent instances; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Restrict to these instances.
    #[arg(long = "instance-filter")]
    pub instances: Vec<String>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: PipelineConfig) -> PipelineConfig {
        if let Some(v) = &self.dataset_root {
            cfg.dataset_root = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.encoder {
            cfg.encoder_name = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.generator.seed = v;
            cfg.train.seed = v;
        }
        if let Some(v) = self.n_positives {
            cfg.generator.n_positives = v;
        }
        if let Some(v) = self.n_negatives {
            cfg.generator.n_negatives = v;
        }
        if let Some(v) = self.cfg_scale {
            cfg.generator.cfg_scale = v;
        }
        if self.no_llm_captions {
            cfg.generator.use_llm_captions = false;
        }
        if let Some(v) = self.loss {
            cfg.train.loss_kind = v.into();
        }
        if let Some(v) = self.n_pairs {
            cfg.train.n_pairs = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.learning_rate = v;
        }
        if self.filter_threshold.is_some() {
            cfg.filter_threshold = self.filter_threshold;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if !self.instances.is_empty() {
            cfg.instances = self.instances.clone();
        }
        cfg
    }
}

#[derive(Args, Debug)]
pub struct StageArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub instance: String,
    /// Input pool directory (filter, train, analyze).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Adapter checkpoint; requires --instance.
    #[arg(long, requires = "instance")]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub instance: Option<String>,
    /// Report JSON path; a CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Stop at the first failing instance.
    #[arg(long)]
    pub fail_fast: bool,
}
