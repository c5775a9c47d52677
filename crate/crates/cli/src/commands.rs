use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use gapcraft::bound::{evaluate_bound, save_bars_csv, verify_theorem, BoundReport, DiscreteInstance};
use gapcraft::lipschitz::{evaluate_head, recalibrate_head, save_sweep_csv, sweep_omega};
use gapcraft::models::{MlpParams, TransportHeadParams};
use gapcraft::pipeline::{
    correlate_gap_error, pretrain_source, run_baseline, stage1, stage2, PipelineConfig, RunLog, Variant,
};
use gapcraft::synthtasks::{generate, to_discrete_instance, Family, TaskBundle, TaskSpec};
use serde_json::json;

use crate::args::*;
use crate::config::{ensure_dir, merge, read_json, require_path, write_json, write_resolved};
use crate::{Command, UsageError};

pub fn run(command: Command, matches: &ArgMatches) -> Result<()> {
    match command {
        Command::Gen(a) => {
            let c = a.config.clone();
            gen(merge(a, matches, c.as_deref())?)
        }
        Command::Pretrain(a) => {
            let c = a.config.clone();
            pretrain(merge(a, matches, c.as_deref())?)
        }
        Command::Recalibrate(a) => {
            let c = a.config.clone();
            recalibrate(merge(a, matches, c.as_deref())?)
        }
        Command::Stage1(a) => {
            let c = a.config.clone();
            run_stage1(merge(a, matches, c.as_deref())?)
        }
        Command::Stage2(a) => {
            let c = a.config.clone();
            run_stage2(merge(a, matches, c.as_deref())?)
        }
        Command::BoundReport(a) => {
            let c = a.config.clone();
            bound_report(merge(a, matches, c.as_deref())?)
        }
        Command::VerifyTheorem(a) => {
            let c = a.config.clone();
            verify(merge(a, matches, c.as_deref())?)
        }
        Command::SweepOmega(a) => {
            let c = a.config.clone();
            sweep(merge(a, matches, c.as_deref())?)
        }
        Command::Baseline(a) => {
            let c = a.config.clone();
            baseline(merge(a, matches, c.as_deref())?)
        }
        Command::Correlate(a) => {
            let c = a.config.clone();
            correlate(merge(a, matches, c.as_deref())?)
        }
    }
}

fn load_task(dir: &Path) -> Result<TaskBundle> {
    require_path(dir, "task directory")?;
    TaskBundle::load(dir).with_context(|| format!("loading task {}", dir.display()))
}

fn load_model(dir: Option<&Path>) -> Result<(MlpParams, MlpParams)> {
    let dir = dir.ok_or_else(|| UsageError("--model is required for this command".into()))?;
    require_path(dir, "model directory")?;
    Ok((read_json(&dir.join("theta.json"))?, read_json(&dir.join("head.json"))?))
}

fn phi_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("phi.json")
    } else {
        p.to_path_buf()
    }
}

fn load_phi(arg: Option<&Path>, bundle: &TaskBundle, cfg: &PipelineConfig) -> Result<MlpParams> {
    match arg {
        Some(p) => {
            require_path(p, "feature map")?;
            read_json(&phi_path(p))
        }
        None => Ok(cfg.initial_phi(bundle.target.dim())),
    }
}

fn train_config(a: &TrainArgs) -> Result<PipelineConfig> {
    let cfg = a.pipeline.config(a.seed);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = a.task.spec(a.family, a.seed);
    let bundle = generate(&spec)?;
    ensure_dir(&a.out)?;
    bundle.save(&a.out)?;
    write_resolved(&a.out, "gen", &a, &spec)?;
    log::info!(
        "{} task (seed {}) written to {}; Bayes error source {:.4}, target {:.4}",
        spec.family.name(),
        spec.seed,
        a.out.display(),
        bundle.metadata.bayes_error_source,
        bundle.metadata.bayes_error_target
    );
    Ok(())
}

fn pretrain(a: TrainArgs) -> Result<()> {
    let bundle = load_task(&a.task)?;
    let cfg = train_config(&a)?;
    let p = pretrain_source(&bundle, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("theta.json"), &p.theta)?;
    write_json(&a.out.join("head.json"), &p.head)?;
    write_json(
        &a.out.join("pretrain.json"),
        &json!({
            "source_error": p.source_error,
            "trainability_threshold": bundle.metadata.trainability_threshold,
            "meets_threshold": p.meets_threshold,
            "losses": p.losses,
        }),
    )?;
    write_resolved(&a.out, "pretrain", &a, &cfg.resolved())?;
    if !p.meets_threshold {
        log::warn!(
            "held-out source error {:.4} is above the trainability threshold {:.4}",
            p.source_error,
            bundle.metadata.trainability_threshold
        );
    }
    log::info!("held-out source error {:.4}", p.source_error);
    Ok(())
}

fn recalibrate(a: TrainArgs) -> Result<()> {
    let bundle = load_task(&a.task)?;
    let cfg = train_config(&a)?;
    let (theta, head) = load_model(a.model.as_deref())?;
    let lc = cfg.recalibration();
    let rec = recalibrate_head(&head, &theta, &bundle.proxy, &lc)?;
    let before = evaluate_head(&head, &theta, &bundle.proxy_test)?;
    let after = evaluate_head(&rec.head, &theta, &bundle.proxy_test)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("theta.json"), &theta)?;
    write_json(&a.out.join("head.json"), &rec.head)?;
    write_json(
        &a.out.join("recalibration.json"),
        &json!({
            "omega": lc.omega,
            "initial_penalty": rec.initial_penalty,
            "final_penalty": rec.final_penalty,
            "heldout_before": before,
            "heldout_after": after,
        }),
    )?;
    write_resolved(&a.out, "recalibrate", &a, &lc)?;
    log::info!(
        "p95 held-out gradient norm {:.4} -> {:.4} (omega {}), proxy error {:.4} -> {:.4}",
        before.grad_norm_p95,
        after.grad_norm_p95,
        lc.omega,
        before.error,
        after.error
    );
    Ok(())
}

fn run_stage1(a: TrainArgs) -> Result<()> {
    let bundle = load_task(&a.task)?;
    let cfg = train_config(&a)?;
    let (theta, head) = load_model(a.model.as_deref())?;
    let phi = load_phi(a.phi.as_deref(), &bundle, &cfg)?;
    let out = stage1(&phi, &theta, &head, &bundle.proxy, &bundle.target, &bundle.target_test, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("phi.json"), &out.phi)?;
    out.log.save_jsonl(&a.out.join("stage1.jsonl"))?;
    write_json(
        &a.out.join("stage1.json"),
        &json!({ "initial": out.initial, "last": out.last }),
    )?;
    write_resolved(&a.out, "stage1", &a, &cfg.resolved())?;
    log::info!(
        "semantic gap {:.4} -> {:.4}, target error {:.4} -> {:.4}",
        out.initial.semantic_gap,
        out.last.semantic_gap,
        out.initial.target_error,
        out.last.target_error
    );
    Ok(())
}

fn run_stage2(a: TrainArgs) -> Result<()> {
    let bundle = load_task(&a.task)?;
    let cfg = train_config(&a)?;
    let (_, head) = load_model(a.model.as_deref())?;
    let phi = load_phi(a.phi.as_deref(), &bundle, &cfg)?;
    let kinit = TransportHeadParams::init(phi.output_dim(), bundle.source.classes, bundle.target.classes);
    let out = stage2(&phi, &head, &kinit, &bundle.target, &bundle.target_test, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("kernel.json"), &out.kernel)?;
    out.log.save_jsonl(&a.out.join("stage2.jsonl"))?;
    write_json(
        &a.out.join("stage2.json"),
        &json!({
            "initial_nll": out.initial_nll,
            "final_nll": out.final_nll,
            "target_error": out.target_error,
        }),
    )?;
    write_resolved(&a.out, "stage2", &a, &cfg.resolved())?;
    log::info!(
        "stage-2 NLL {:.4} -> {:.4}, held-out target error {:.4}",
        out.initial_nll,
        out.final_nll,
        out.target_error
    );
    Ok(())
}

fn bound_report(a: BoundReportArgs) -> Result<()> {
    let instances: Vec<(String, DiscreteInstance)> = match &a.instance {
        Some(p) => {
            require_path(p, "instance")?;
            vec![("instance".into(), read_json(p)?)]
        }
        None => (0..a.tasks as u64)
            .map(|i| {
                let spec = TaskSpec {
                    family: Family::DiscreteExact,
                    support_points: a.support_points,
                    source_classes: a.source_classes,
                    target_classes: a.target_classes,
                    gap_knob: a.gap_knob,
                    seed: a.seed + i,
                    ..TaskSpec::default()
                };
                Ok((format!("discrete_exact-{}", spec.seed), to_discrete_instance(&spec)?))
            })
            .collect::<Result<_>>()?,
    };
    let reports: Vec<(String, BoundReport)> = instances
        .iter()
        .map(|(n, inst)| Ok((n.clone(), evaluate_bound(inst)?)))
        .collect::<Result<_>>()?;
    ensure_dir(&a.out)?;
    let named: Vec<_> = reports.iter().map(|(n, r)| json!({ "task": n, "report": r })).collect();
    write_json(&a.out.join("report.json"), &named)?;
    if a.bars {
        save_bars_csv(&reports, &a.out.join("bars.csv"))?;
    }
    write_resolved(&a.out, "bound-report", &a, &json!({ "tasks": reports.len() }))?;
    let finite: Vec<f64> = reports.iter().map(|r| r.1.relative_gap).filter(|g| g.is_finite()).collect();
    log::info!(
        "{} tasks, mean relative gap {:.4}",
        reports.len(),
        finite.iter().sum::<f64>() / finite.len().max(1) as f64
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let summary = verify_theorem(a.instances, a.seed, a.slack)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(&out.join("theorem.json"), &summary)?;
        write_resolved(out, "verify-theorem", &a, &json!({ "seeds": [a.seed, a.seed + a.instances as u64] }))?;
    }
    if summary.violations + summary.proof_term_violations > 0 {
        bail!(
            "{} bound violations and {} proof-term violations",
            summary.violations,
            summary.proof_term_violations
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let bundle = load_task(&a.task)?;
    let (theta, head) = load_model(Some(&a.model))?;
    let cfg = a.pipeline.config(a.seed);
    let grid = a.grid.points();
    let rows = sweep_omega(&grid, &bundle.proxy, &bundle.proxy_test, &theta, &head, &cfg.recalibration())?;
    ensure_dir(&a.out)?;
    save_sweep_csv(&rows, &a.out.join("sweep.csv"))?;
    write_resolved(&a.out, "sweep-omega", &a, &json!({ "grid": grid, "lipschitz": cfg.recalibration() }))?;
    log::info!("{} omega values swept", rows.len());
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    if a.families.is_empty() || a.variants.is_empty() || a.seeds == 0 {
        return Err(UsageError("baseline needs families, variants and at least one seed".into()).into());
    }
    let cfg = a.pipeline.config(a.seed);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let tasks: Vec<(String, TaskSpec)> = a
        .families
        .iter()
        .map(|&f| (f.name().to_string(), a.task.spec(f, a.seed)))
        .collect();
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let table = run_baseline(&a.variants, &tasks, &seeds, &cfg)?;
    ensure_dir(&a.out)?;
    table.write_csv(File::create(a.out.join("table.csv"))?, &a.variants)?;
    write_json(&a.out.join("table.json"), &table)?;
    write_resolved(
        &a.out,
        "baseline",
        &a,
        &json!({ "pipeline": cfg, "tasks": tasks, "seeds": seeds }),
    )?;
    for (task, bayes) in &table.bayes_error {
        let med = |v: Variant| table.cell(task, v).map_or(f64::NAN, |c| c.median);
        log::info!(
            "{task}: nft {:.4}, fa_only {:.4}, recraft {:.4}, Bayes {:.4}",
            med(Variant::Nft),
            med(Variant::FaOnly),
            med(Variant::Recraft),
            bayes
        );
    }
    Ok(())
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    require_path(&a.log, "run log")?;
    let log = RunLog::load_jsonl(&a.log)?;
    let c = correlate_gap_error(&log)?;
    ensure_dir(&a.out)?;
    c.write_csv(File::create(a.out.join("series.csv"))?)?;
    write_json(
        &a.out.join("correlation.json"),
        &json!({ "pearson_r": c.pearson_r, "checkpoints": c.series.len() }),
    )?;
    write_resolved(&a.out, "correlate", &a, &json!({ "log": a.log }))?;
    log::info!("Pearson r = {:.4} over {} checkpoints", c.pearson_r, c.series.len());
    Ok(())
}
