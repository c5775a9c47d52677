//! Two-stage training: source pretraining, Lipschitz recalibration, feature
//! alignment then distortion descent on the target embedder, and the
//! frozen-feature transport head. Baseline variants and the gap/error
//! correlation study run on top.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distortion::{fld_loss_and_grad, fld_surrogate, joint_from_predictions, JointLabelStats, PseudoLabelMode};
use crate::error::{Error, Result};
use crate::lipschitz::{recalibrate_head, zero_one_error, LipschitzConfig};
use crate::models::{
    embed, predict_source, predict_target, stage2_nll, stage2_nll_and_grad, MlpGrads, MlpParams, Role,
    TransportHeadParams, FEATURE_DIM,
};
use crate::numgrad::{Matrix, Tape};
use crate::rng::SeedStream;
use crate::synthtasks::{generate, TaskBundle, TaskSpec};
use crate::transport::{fa_loss_and_grad_features, SinkhornConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Recraft,
    Nft,
    FaOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nft, Variant::FaOnly, Variant::Recraft];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Recraft => "recraft",
            Variant::Nft => "nft",
            Variant::FaOnly => "fa_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recraft" => Ok(Variant::Recraft),
            "nft" => Ok(Variant::Nft),
            "fa_only" => Ok(Variant::FaOnly),
            _ => Err(Error::invalid(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Stage-2 epochs.
    pub n0: usize,
    /// Alignment epochs.
    pub n1: usize,
    /// Distortion epochs.
    pub n2: usize,
    pub pretrain_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_fa: f64,
    pub lr_fld: f64,
    pub lr_stage2: f64,
    /// Minibatch size for stage 1; 0 means full batch.
    pub batch_size: usize,
    pub omega: f64,
    pub sinkhorn: SinkhornConfig,
    pub lipschitz: LipschitzConfig,
    pub recalibrate: bool,
    /// Multiplies every epoch count.
    pub scale: f64,
    pub seed: u64,
    pub baseline: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n0: 30,
            n1: 60,
            n2: 4,
            pretrain_epochs: 400,
            lr_pretrain: 0.5,
            lr_fa: 0.5,
            lr_fld: 0.5,
            lr_stage2: 1.0,
            batch_size: 0,
            omega: 0.3,
            sinkhorn: SinkhornConfig::default(),
            lipschitz: LipschitzConfig::default(),
            recalibrate: true,
            scale: 1.0,
            seed: 0,
            baseline: Variant::Recraft,
        }
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * scale).round() as usize).max(1)
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_fa", self.lr_fa),
            ("lr_fld", self.lr_fld),
            ("lr_stage2", self.lr_stage2),
        ] {
            if !(lr > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::invalid("omega must be nonnegative"));
        }
        self.sinkhorn.validate()?;
        self.lipschitz.validate()
    }

    /// Epoch counts after the variant's reduction and the scale factor.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        match self.baseline {
            Variant::Nft => {
                c.n1 = 0;
                c.n2 = 0;
            }
            Variant::FaOnly => c.n2 = 0,
            Variant::Recraft => {}
        }
        c.n0 = scaled(c.n0, self.scale);
        c.n1 = scaled(c.n1, self.scale);
        c.n2 = scaled(c.n2, self.scale);
        c.pretrain_epochs = scaled(c.pretrain_epochs, self.scale);
        c.scale = 1.0;
        c
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        Self {
            baseline: v,
            ..self.clone()
        }
    }

    fn seeds(&self) -> SeedStream {
        SeedStream::new(self.seed).child("pipeline")
    }

    /// Lipschitz settings used for recalibration, with `omega` taken from
    /// this config.
    pub fn recalibration(&self) -> LipschitzConfig {
        LipschitzConfig {
            omega: self.omega.max(f64::MIN_POSITIVE),
            ..self.lipschitz
        }
    }

    /// The seeded random target embedder every variant starts from.
    pub fn initial_phi(&self, target_dim: usize) -> MlpParams {
        MlpParams::embedder(target_dim, Role::TargetEmbedder, &mut self.seeds().rng("phi"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fa,
    Fld,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub l_fa: Option<f64>,
    pub l_fld: Option<f64>,
    pub semantic_gap: Option<f64>,
    /// Stage-2 negative log-likelihood.
    pub nll: Option<f64>,
    pub target_error: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<CheckpointRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: CheckpointRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if (r.phase, r.epoch) <= (last.phase, last.epoch) {
                return Err(Error::invalid(format!(
                    "checkpoint ({:?}, {}) does not follow ({:?}, {})",
                    r.phase, r.epoch, last.phase, last.epoch
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn extend(&mut self, other: RunLog) -> Result<()> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn phase(&self, p: Phase) -> impl Iterator<Item = &CheckpointRecord> {
        self.records.iter().filter(move |r| r.phase == p)
    }

    /// Copy with wall times zeroed, for bitwise comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            records: self
                .records
                .iter()
                .map(|r| CheckpointRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log = RunLog::default();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                log.push(serde_json::from_str(&line)?)?;
            }
        }
        Ok(log)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn check_finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} became non-finite at epoch {epoch}; lower the learning rate")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub theta: MlpParams,
    pub head: MlpParams,
    pub source_error: f64,
    pub meets_threshold: bool,
    pub losses: Vec<f64>,
}

fn source_ce_and_grads(theta: &MlpParams, head: &MlpParams, d: &Dataset) -> Result<(f64, MlpGrads, MlpGrads)> {
    let mut tape = Tape::new();
    let x = tape.leaf(d.x.clone());
    let (u, tv) = theta.record(&mut tape, x)?;
    let (logits, hv) = head.record(&mut tape, u)?;
    let lp = tape.log_softmax(logits)?;
    let y = tape.leaf(d.one_hot());
    let picked = tape.mul(lp, y)?;
    let s = tape.sum(picked)?;
    let loss = tape.scale(s, -1.0 / d.len() as f64)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), MlpGrads::collect(&g, &tv), MlpGrads::collect(&g, &hv)))
}

/// Full-batch gradient descent on the source cross-entropy.
pub fn pretrain_source(bundle: &TaskBundle, cfg: &PipelineConfig) -> Result<Pretrained> {
    let cfg = cfg.resolved();
    let seeds = cfg.seeds();
    let src = &bundle.source;
    if src.is_empty() {
        return Err(Error::invalid("pretraining needs source data"));
    }
    let mut theta = MlpParams::embedder(src.dim(), Role::SourceEmbedder, &mut seeds.rng("theta"));
    let mut head = MlpParams::head(FEATURE_DIM, src.classes, &mut seeds.rng("source-head"));
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let (l, gt, gh) = source_ce_and_grads(&theta, &head, src)?;
        losses.push(check_finite(l, "source cross-entropy", epoch)?);
        theta = theta.apply_gradients(&gt, cfg.lr_pretrain)?;
        head = head.apply_gradients(&gh, cfg.lr_pretrain)?;
    }
    let pred = predict_source(&head, &embed(&theta, &bundle.source_test.x)?)?;
    let source_error = zero_one_error(&pred, &bundle.source_test.labels);
    let meets_threshold = source_error <= bundle.metadata.trainability_threshold;
    if !meets_threshold {
        log::warn!(
            "held-out source error {source_error:.4} exceeds the trainability threshold {:.4}",
            bundle.metadata.trainability_threshold
        );
    }
    Ok(Pretrained {
        theta,
        head,
        source_error,
        meets_threshold,
        losses,
    })
}

/// Stage-1 objective terms at one embedder state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEval {
    pub l_fa: f64,
    pub l_fld: f64,
    pub semantic_gap: f64,
    pub target_error: f64,
}

fn soft_joint(ps: &Matrix, d: &Dataset) -> Result<JointLabelStats> {
    // soft counts draw no samples
    let mut idle = SeedStream::new(0).rng("soft");
    joint_from_predictions(ps, &d.labels, d.classes, PseudoLabelMode::Soft, &mut idle)
}

/// Held-out error of `p_s(phi(x')) * J(z'|z)`, with `J` the soft joint of
/// pseudo source labels and target labels on the training set.
pub fn pseudo_label_error(phi: &MlpParams, head: &MlpParams, train: &Dataset, eval: &Dataset) -> Result<f64> {
    let ps = predict_source(head, &embed(phi, &train.x)?)?;
    let joint = soft_joint(&ps, train)?.joint;
    let cond = Matrix::from_fn(joint.rows(), joint.cols(), |z, zp| {
        let r: f64 = joint.row(z).iter().sum();
        if r > 0.0 {
            joint.get(z, zp) / r
        } else {
            1.0 / joint.cols() as f64
        }
    });
    let pe = predict_source(head, &embed(phi, &eval.x)?)?;
    Ok(zero_one_error(&pe.matmul(&cond)?, &eval.labels))
}

/// Evaluates both stage-1 losses on the full data.
pub fn evaluate_gap(
    phi: &MlpParams,
    source_u: &Matrix,
    head: &MlpParams,
    target: &Dataset,
    eval: &Dataset,
    cfg: &PipelineConfig,
) -> Result<GapEval> {
    Ok(evaluate_with_grads(phi, source_u, head, target, eval, cfg)?.0)
}

/// The evaluation together with the full-batch alignment gradient, which
/// shares its transport plan.
fn evaluate_with_grads(
    phi: &MlpParams,
    source_u: &Matrix,
    head: &MlpParams,
    target: &Dataset,
    eval: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(GapEval, MlpGrads)> {
    let fa = fa_loss_and_grad_features(phi, &target.x, source_u, cfg.omega, &cfg.sinkhorn)?;
    if !fa.converged {
        log::debug!("sinkhorn stopped at max_iter during stage-1 evaluation");
    }
    let ps = predict_source(head, &embed(phi, &target.x)?)?;
    let l_fld = fld_surrogate(&soft_joint(&ps, target)?);
    let ev = GapEval {
        l_fa: fa.loss,
        l_fld,
        semantic_gap: fa.loss + l_fld,
        target_error: pseudo_label_error(phi, head, target, eval)?,
    };
    Ok((ev, fa.grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub phi: MlpParams,
    pub log: RunLog,
    pub initial: GapEval,
    pub last: GapEval,
}

fn batches(n: usize, size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if size == 0 || size >= n {
        return vec![idx];
    }
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

/// `n1` epochs of alignment descent, then `n2` epochs of distortion
/// descent, logging both losses and the held-out pseudo-label error after
/// every epoch.
pub fn stage1(
    phi_init: &MlpParams,
    theta: &MlpParams,
    head: &MlpParams,
    proxy: &Dataset,
    target: &Dataset,
    eval: &Dataset,
    cfg: &PipelineConfig,
) -> Result<Stage1Output> {
    let cfg = cfg.resolved();
    let start = Instant::now();
    let source_u = embed(theta, &proxy.x)?;
    let nan = GapEval {
        l_fa: f64::NAN,
        l_fld: f64::NAN,
        semantic_gap: f64::NAN,
        target_error: f64::NAN,
    };
    let (initial, mut fa_grads) = if cfg.n1 + cfg.n2 > 0 {
        evaluate_with_grads(phi_init, &source_u, head, target, eval, &cfg)?
    } else {
        (nan, MlpGrads::zeros_like(phi_init))
    };
    let mut rng = cfg.seeds().rng("stage1-batches");
    let mut phi = phi_init.clone();
    let mut log = RunLog::default();
    let mut last = initial;
    let phases = [(Phase::Fa, cfg.n1, cfg.lr_fa), (Phase::Fld, cfg.n2, cfg.lr_fld)];
    for (phase, epochs, lr) in phases {
        for epoch in 0..epochs {
            let tb = batches(target.len(), cfg.batch_size, &mut rng);
            if phase == Phase::Fa && tb.len() == 1 {
                phi = phi.apply_gradients(&fa_grads, lr)?;
            } else {
                let sb = batches(source_u.rows(), cfg.batch_size, &mut rng);
                for (i, t_idx) in tb.iter().enumerate() {
                    let tbatch = target.subset(t_idx);
                    let grads = match phase {
                        Phase::Fa => {
                            let s_idx = &sb[i % sb.len()];
                            fa_loss_and_grad_features(&phi, &tbatch.x, &source_u.select_rows(s_idx), cfg.omega, &cfg.sinkhorn)?
                                .grads
                        }
                        _ => fld_loss_and_grad(&phi, head, &tbatch)?.1,
                    };
                    phi = phi.apply_gradients(&grads, lr)?;
                }
            }
            let (ev, g) = evaluate_with_grads(&phi, &source_u, head, target, eval, &cfg)?;
            check_finite(ev.semantic_gap, "semantic gap", epoch)?;
            last = ev;
            fa_grads = g;
            log.push(CheckpointRecord {
                phase,
                epoch,
                l_fa: Some(last.l_fa),
                l_fld: Some(last.l_fld),
                semantic_gap: Some(last.semantic_gap),
                nll: None,
                target_error: last.target_error,
                wall_time_s: start.elapsed().as_secs_f64(),
            })?;
        }
    }
    Ok(Stage1Output {
        phi,
        log,
        initial,
        last,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub kernel: TransportHeadParams,
    pub log: RunLog,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub target_error: f64,
}

/// Trains the transport head on frozen features with the target negative
/// log-likelihood.
pub fn stage2(
    phi: &MlpParams,
    head: &MlpParams,
    kernel_init: &TransportHeadParams,
    target: &Dataset,
    eval: &Dataset,
    cfg: &PipelineConfig,
) -> Result<Stage2Output> {
    let cfg = cfg.resolved();
    let start = Instant::now();
    let u = embed(phi, &target.x)?;
    let ue = embed(phi, &eval.x)?;
    let mut kernel = kernel_init.clone();
    let initial_nll = stage2_nll(head, &kernel, &u, &target.labels)?;
    let mut log = RunLog::default();
    let mut nll = initial_nll;
    for epoch in 0..cfg.n0 {
        let (_, g) = stage2_nll_and_grad(head, &kernel, &u, &target.labels)?;
        kernel.mlp = kernel.mlp.apply_gradients(&g, cfg.lr_stage2)?;
        nll = check_finite(stage2_nll(head, &kernel, &u, &target.labels)?, "stage-2 loss", epoch)?;
        log.push(CheckpointRecord {
            phase: Phase::Stage2,
            epoch,
            l_fa: None,
            l_fld: None,
            semantic_gap: None,
            nll: Some(nll),
            target_error: zero_one_error(&predict_target(head, &kernel, &ue)?, &eval.labels),
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
    }
    let target_error = zero_one_error(&predict_target(head, &kernel, &ue)?, &eval.labels);
    Ok(Stage2Output {
        kernel,
        log,
        initial_nll,
        final_nll: nll,
        target_error,
    })
}

/// Source-side artifacts shared by every variant of one run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub pretrained: Pretrained,
    pub head: MlpParams,
    pub phi_init: MlpParams,
}

pub fn prepare(bundle: &TaskBundle, cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let pretrained = pretrain_source(bundle, cfg)?;
    let head = if cfg.recalibrate {
        recalibrate_head(&pretrained.head, &pretrained.theta, &bundle.proxy, &cfg.recalibration())?.head
    } else {
        pretrained.head.clone()
    };
    let phi_init = cfg.initial_phi(bundle.target.dim());
    Ok(Prepared {
        pretrained,
        head,
        phi_init,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub phi: MlpParams,
    pub kernel: TransportHeadParams,
    pub log: RunLog,
    pub target_error: f64,
    pub source_error: f64,
}

pub fn run_prepared(bundle: &TaskBundle, prep: &Prepared, cfg: &PipelineConfig) -> Result<RunResult> {
    let s1 = stage1(
        &prep.phi_init,
        &prep.pretrained.theta,
        &prep.head,
        &bundle.proxy,
        &bundle.target,
        &bundle.target_test,
        cfg,
    )?;
    let kinit = TransportHeadParams::init(FEATURE_DIM, bundle.source.classes, bundle.target.classes);
    let s2 = stage2(&s1.phi, &prep.head, &kinit, &bundle.target, &bundle.target_test, cfg)?;
    let mut log = s1.log;
    log.extend(s2.log)?;
    Ok(RunResult {
        variant: cfg.baseline,
        phi: s1.phi,
        kernel: s2.kernel,
        log,
        target_error: s2.target_error,
        source_error: prep.pretrained.source_error,
    })
}

/// Pretraining, recalibration and both stages for `cfg.baseline`.
pub fn run_variant(bundle: &TaskBundle, cfg: &PipelineConfig) -> Result<RunResult> {
    run_prepared(bundle, &prepare(bundle, cfg)?, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub task: String,
    pub variant: Variant,
    pub errors: Vec<f64>,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl BaselineCell {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub cells: Vec<BaselineCell>,
    pub bayes_error: Vec<(String, f64)>,
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

impl BaselineTable {
    pub fn cell(&self, task: &str, v: Variant) -> Option<&BaselineCell> {
        self.cells.iter().find(|c| c.task == task && c.variant == v)
    }

    /// One row per task with median and IQR columns per variant.
    pub fn write_csv<W: Write>(&self, w: W, variants: &[Variant]) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["task".to_string()];
        for v in variants {
            header.push(format!("{}_median", v.name()));
            header.push(format!("{}_iqr", v.name()));
        }
        header.push("bayes_error".into());
        wr.write_record(&header)?;
        for (task, bayes) in &self.bayes_error {
            let mut rec = vec![task.clone()];
            for &v in variants {
                let c = self.cell(task, v);
                rec.push(c.map_or(String::new(), |c| c.median.to_string()));
                rec.push(c.map_or(String::new(), |c| c.iqr().to_string()));
            }
            rec.push(bayes.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Every (task, seed, variant) combination. Each seed is a full replica:
/// the task is regenerated with that seed and the run uses it too. Runs
/// fan out across threads and are reduced per (task, variant); the
/// reported Bayes error is the median over replicas.
pub fn run_baseline(
    variants: &[Variant],
    tasks: &[(String, TaskSpec)],
    seeds: &[u64],
    cfg: &PipelineConfig,
) -> Result<BaselineTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::invalid("baseline needs at least one seed and one variant"));
    }
    let jobs: Vec<(usize, u64)> = (0..tasks.len()).flat_map(|t| seeds.iter().map(move |&s| (t, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(t, seed)| {
            let bundle = generate(&TaskSpec {
                seed,
                ..tasks[t].1.clone()
            })?;
            let c = PipelineConfig { seed, ..cfg.clone() };
            let prep = prepare(&bundle, &c)?;
            let errors = variants
                .iter()
                .map(|&v| Ok((v, run_prepared(&bundle, &prep, &c.with_variant(v))?.target_error)))
                .collect::<Result<Vec<_>>>()?;
            Ok((t, bundle.metadata.bayes_error_target, errors))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    let mut bayes_error = Vec::new();
    for (t, (name, _)) in tasks.iter().enumerate() {
        let runs: Vec<_> = results.iter().filter(|r| r.0 == t).collect();
        for &v in variants {
            let errors: Vec<f64> = runs
                .iter()
                .flat_map(|r| r.2.iter().filter(|e| e.0 == v).map(|e| e.1))
                .collect();
            cells.push(BaselineCell {
                task: name.clone(),
                variant: v,
                median: median(&errors),
                q25: quantile(&errors, 0.25),
                q75: quantile(&errors, 0.75),
                errors,
            });
        }
        bayes_error.push((name.clone(), median(&runs.iter().map(|r| r.1).collect::<Vec<_>>())));
    }
    Ok(BaselineTable { cells, bayes_error })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("pearson", format!("{} vs {} values", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if xs.len() < 2 || constant(xs) || constant(ys) {
        return Err(Error::UndefinedCorrelation(format!(
            "{} points with variances {sxx:e} and {syy:e}",
            xs.len()
        )));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCorrelation {
    pub pearson_r: f64,
    /// `(phase, epoch, semantic_gap, target_error)` per stage-1 checkpoint.
    pub series: Vec<(Phase, usize, f64, f64)>,
}

impl GapCorrelation {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["phase", "epoch", "semantic_gap", "target_error"])?;
        for (p, e, g, t) in &self.series {
            let p = match p {
                Phase::Fa => "fa",
                Phase::Fld => "fld",
                Phase::Stage2 => "stage2",
            };
            wr.write_record([p.to_string(), e.to_string(), g.to_string(), t.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Pearson correlation between semantic gap and held-out error over the
/// checkpoints that carry both.
pub fn correlate_gap_error(log: &RunLog) -> Result<GapCorrelation> {
    let series: Vec<_> = log
        .records
        .iter()
        .filter_map(|r| r.semantic_gap.map(|g| (r.phase, r.epoch, g, r.target_error)))
        .collect();
    if series.len() < 5 {
        log::warn!("only {} checkpoints carry a semantic gap", series.len());
    }
    let xs: Vec<f64> = series.iter().map(|s| s.2).collect();
    let ys: Vec<f64> = series.iter().map(|s| s.3).collect();
    Ok(GapCorrelation {
        pearson_r: pearson(&xs, &ys)?,
        series,
    })
}

/// `||pred - truth|| / ||truth||`.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("nrmse", format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::invalid("nrmse is undefined for an all-zero target"));
    }
    Ok((num / den).sqrt())
}
