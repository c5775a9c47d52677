use std::path::PathBuf;

use clap::Args;
use gapcraft::lipschitz::LipschitzConfig;
use gapcraft::pipeline::{PipelineConfig, Variant};
use gapcraft::synthtasks::{Family, TaskSpec};
use gapcraft::transport::SinkhornConfig;
use serde::{Deserialize, Serialize};

fn task_default() -> TaskSpec {
    TaskSpec::default()
}

fn pipeline_default() -> PipelineConfig {
    PipelineConfig::default()
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TaskArgs {
    #[arg(long, default_value_t = task_default().source_dim)]
    pub source_dim: usize,
    #[arg(long, default_value_t = task_default().target_dim)]
    pub target_dim: usize,
    #[arg(long, default_value_t = task_default().source_classes)]
    pub source_classes: usize,
    #[arg(long, default_value_t = task_default().target_classes)]
    pub target_classes: usize,
    #[arg(long, default_value_t = task_default().n_source)]
    pub n_source: usize,
    #[arg(long, default_value_t = task_default().n_proxy)]
    pub n_proxy: usize,
    /// Target training samples (kappa).
    #[arg(long, default_value_t = task_default().n_target)]
    pub n_target: usize,
    #[arg(long, default_value_t = task_default().n_test)]
    pub n_test: usize,
    #[arg(long, default_value_t = task_default().gap_knob)]
    pub gap_knob: f64,
    #[arg(long, default_value_t = task_default().separation)]
    pub separation: f64,
    #[arg(long, default_value_t = task_default().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = task_default().support_points)]
    pub support_points: usize,
    /// Planted label permutation, e.g. `2,0,1`.
    #[arg(long, value_delimiter = ',')]
    pub permutation: Option<Vec<usize>>,
}

impl TaskArgs {
    pub fn spec(&self, family: Family, seed: u64) -> TaskSpec {
        TaskSpec {
            family,
            source_dim: self.source_dim,
            target_dim: self.target_dim,
            source_classes: self.source_classes,
            target_classes: self.target_classes,
            n_source: self.n_source,
            n_proxy: self.n_proxy,
            n_target: self.n_target,
            n_test: self.n_test,
            gap_knob: self.gap_knob,
            separation: self.separation,
            noise: self.noise,
            support_points: self.support_points,
            permutation: self.permutation.clone(),
            seed,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Stage-2 epochs.
    #[arg(long, default_value_t = pipeline_default().n0)]
    pub n0: usize,
    /// Feature-alignment epochs.
    #[arg(long, default_value_t = pipeline_default().n1)]
    pub n1: usize,
    /// Feature-label distortion epochs.
    #[arg(long, default_value_t = pipeline_default().n2)]
    pub n2: usize,
    #[arg(long, default_value_t = pipeline_default().pretrain_epochs)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = pipeline_default().lr_pretrain)]
    pub lr_pretrain: f64,
    #[arg(long, default_value_t = pipeline_default().lr_fa)]
    pub lr_fa: f64,
    #[arg(long, default_value_t = pipeline_default().lr_fld)]
    pub lr_fld: f64,
    #[arg(long, default_value_t = pipeline_default().lr_stage2)]
    pub lr_stage2: f64,
    /// Stage-1 minibatch size; 0 is full batch.
    #[arg(long, default_value_t = pipeline_default().batch_size)]
    pub batch_size: usize,
    /// Lipschitz target for recalibration and the FA weight.
    #[arg(long, default_value_t = pipeline_default().omega)]
    pub omega: f64,
    #[arg(long, default_value_t = SinkhornConfig::default().epsilon)]
    pub epsilon: f64,
    #[arg(long, default_value_t = SinkhornConfig::default().max_iter)]
    pub sinkhorn_max_iter: usize,
    #[arg(long, default_value_t = SinkhornConfig::default().tol)]
    pub sinkhorn_tol: f64,
    #[arg(long, default_value_t = LipschitzConfig::default().penalty_weight)]
    pub penalty_weight: f64,
    #[arg(long, default_value_t = LipschitzConfig::default().epochs)]
    pub recalibration_epochs: usize,
    #[arg(long, default_value_t = LipschitzConfig::default().lr)]
    pub recalibration_lr: f64,
    /// Skip Lipschitz recalibration inside full runs.
    #[arg(long)]
    pub no_recalibrate: bool,
    /// Multiplies every epoch count.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value = "recraft")]
    pub variant: Variant,
}

impl PipelineArgs {
    pub fn config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            n0: self.n0,
            n1: self.n1,
            n2: self.n2,
            pretrain_epochs: self.pretrain_epochs,
            lr_pretrain: self.lr_pretrain,
            lr_fa: self.lr_fa,
            lr_fld: self.lr_fld,
            lr_stage2: self.lr_stage2,
            batch_size: self.batch_size,
            omega: self.omega,
            sinkhorn: SinkhornConfig {
                epsilon: self.epsilon,
                max_iter: self.sinkhorn_max_iter,
                tol: self.sinkhorn_tol,
            },
            lipschitz: LipschitzConfig {
                omega: self.omega,
                penalty_weight: self.penalty_weight,
                epochs: self.recalibration_epochs,
                lr: self.recalibration_lr,
            },
            recalibrate: !self.no_recalibrate,
            scale: self.scale,
            seed,
            baseline: self.variant,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value = "rotated")]
    pub family: Family,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Resolved-config JSON from an earlier run; explicit flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Task directory written by `gen`.
    #[arg(long)]
    pub task: PathBuf,
    /// Directory holding `theta.json` and `head.json`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory (or file) holding the target embedder `phi.json`.
    #[arg(long)]
    pub phi: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BoundReportArgs {
    /// Number of exact synthetic tasks, seeded `seed..seed + tasks`.
    #[arg(long, default_value_t = 5, conflicts_with = "instance")]
    pub tasks: usize,
    /// Evaluate a single instance JSON instead of generated tasks.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    #[arg(long, default_value_t = task_default().support_points)]
    pub support_points: usize,
    #[arg(long, default_value_t = task_default().source_classes)]
    pub source_classes: usize,
    #[arg(long, default_value_t = task_default().target_classes)]
    pub target_classes: usize,
    #[arg(long, default_value_t = 0.5)]
    pub gap_knob: f64,
    /// Also write the stacked-bar decomposition CSV.
    #[arg(long)]
    pub bars: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub slack: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `theorem.json`; the summary always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Directory holding the unconstrained `theta.json` and `head.json`.
    #[arg(long)]
    pub model: PathBuf,
    /// Inclusive grid `start:stop:step`.
    #[arg(long, default_value = "0.1:1.0:0.1", value_parser = parse_grid)]
    pub grid: Grid,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long, value_delimiter = ',', default_value = "rotated,permuted_labels")]
    pub families: Vec<Family>,
    #[arg(long, value_delimiter = ',', default_value = "nft,fa_only,recraft")]
    pub variants: Vec<Variant>,
    /// Number of seed replicas, seeded `seed..seed + seeds`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CorrelateArgs {
    /// Run log (JSON lines) written by `stage1`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    /// Points rounded to 12 decimals so `0.1:1.0:0.1` yields exact tenths.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((self.start + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect()
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected start:stop:step, got `{s}`"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    let g = Grid {
        start: num(a)?,
        stop: num(b)?,
        step: num(c)?,
    };
    if !(g.step > 0.0 && g.start > 0.0 && g.stop >= g.start) {
        return Err("grid needs 0 < start <= stop and step > 0".into());
    }
    Ok(g)
}
