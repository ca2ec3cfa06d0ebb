//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use msegnn::{EncoderKind, FeatureKind, SplitRole};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "msegnn",
    version,
    about = "Explainer-predictor graph classifier meta-trained on N-way K-shot episodes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run seed; overrides the preset and config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Named starting configuration.
    #[arg(long, global = true)]
    pub preset: Option<String>,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate the synthetic motif dataset.
    GenData(GenDataArgs),
    /// Meta-train a model on a dataset.
    MetaTrain(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Export node masks for sampled query graphs.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub ba_edges: Option<usize>,
    #[arg(long)]
    pub features: Option<FeatureKind>,
    /// Output path, relative to the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenDataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.classes {
            cfg.data.classes = v;
        }
        if let Some(v) = self.per_class {
            cfg.data.per_class = v;
        }
        let g = &mut cfg.data.generator;
        if let Some(v) = self.feature_dim {
            g.feature_dim = v;
        }
        if let Some(v) = self.ba_edges {
            g.ba_edges = v;
        }
        if let Some(v) = self.features {
            g.features = v;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub query_per_class: Option<usize>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub mask_hidden: Option<usize>,
    #[arg(long)]
    pub predictor_hidden: Option<usize>,
    /// Target rationale fraction, for both loss levels.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha_a: Option<f64>,
    #[arg(long)]
    pub alpha_reg: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Local adaptation steps.
    #[arg(long = "T", alias = "local-steps")]
    pub local_steps: Option<usize>,
    #[arg(long)]
    pub local_lr: Option<f64>,
    #[arg(long)]
    pub global_lr: Option<f64>,
    #[arg(long)]
    pub episodes_per_update: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fingerprint slow parameters around every local adaptation.
    #[arg(long)]
    pub audit: bool,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let m = &mut cfg.meta;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$src { $dst = v; })*
            };
        }
        set! {
            n_way => m.n_way,
            k_shot => m.k_shot,
            query_per_class => m.query_per_class,
            local_steps => m.local_steps,
            local_lr => m.local_lr,
            global_lr => m.global_lr,
            episodes_per_update => m.episodes_per_meta_update,
            iterations => m.max_meta_iterations,
            eval_every => m.eval_every,
            val_episodes => m.val_episodes,
            patience => m.patience,
        }
        if self.audit {
            m.audit_slow_params = true;
        }
        for w in [&mut m.local_weights, &mut m.global_weights] {
            set! {
                gamma => w.gamma,
                alpha_a => w.alpha_a,
                alpha_reg => w.alpha_reg,
                tau => w.tau,
            }
        }
        let model = &mut cfg.model;
        set! {
            encoder => model.encoder,
            layers => model.layers,
            hidden => model.hidden,
            mask_hidden => model.mask_hidden,
            predictor_hidden => model.predictor_hidden,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `best`, `last` or a checkpoint path.
    #[arg(long, default_value = "best")]
    pub ckpt: String,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Query graphs per class in each episode.
    #[arg(long)]
    pub query_per_class: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: SplitRole,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "best")]
    pub ckpt: String,
    /// Episodes to export.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: SplitRole,
    /// Also write a DOT rendering of the exported graphs.
    #[arg(long)]
    pub dot: bool,
}
