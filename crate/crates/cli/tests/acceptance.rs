//! Acceptance suite: one `criterion N: PASS|FAIL` line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gapcraft::bound::{random_feasible_tf_case, tf_closed_form, tf_convex_oracle, theorem_instance, verify_proof_terms};
use gapcraft::data::Dataset;
use gapcraft::distortion::{fld_exact, fld_loss_and_grad, fld_random_search, pseudo_label_stats, fld_surrogate, PseudoLabelMode, TransportKernel};
use gapcraft::infotheory::entropy;
use gapcraft::lipschitz::{lipschitz_penalty, penalty_and_grad};
use gapcraft::models::{embed, stage2_nll, stage2_nll_and_grad, Activation, MlpParams, Role, TransportHeadParams};
use gapcraft::numgrad::{central_difference, max_relative_error};
use gapcraft::pipeline::{
    correlate_gap_error, median, prepare, run_baseline, run_prepared, PipelineConfig, RunResult, Variant,
};
use gapcraft::rng::SeedStream;
use gapcraft::synthtasks::{generate, Family, TaskSpec};
use gapcraft::transport::{
    cost_matrix, exact_w1, fa_loss_and_grad, random_vertex, sinkhorn, uniform, Coupling, SinkhornConfig,
};
use gapcraft::Matrix;
use rand::Rng;
use rayon::prelude::*;
use serde_json::Value;

type Check = anyhow::Result<(bool, String)>;

const FD_FLOOR: f64 = 1e-3;

fn gapcraft(args: &[&str]) -> anyhow::Result<std::process::Output> {
    let out = Command::new(env!("CARGO_BIN_EXE_gapcraft"))
        .args(args)
        .env("GAPCRAFT_LOG", "quiet")
        .output()?;
    if !out.status.success() {
        anyhow::bail!("gapcraft {:?} exited with {:?}: {}", args, out.status.code(), String::from_utf8_lossy(&out.stderr));
    }
    Ok(out)
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn simplex(rng: &mut impl Rng, len: usize, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| if zeros && rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.01..1.0) })
        .collect();
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn theorem() -> Check {
    let start = Instant::now();
    let out = gapcraft(&["verify-theorem", "--instances", "1000", "--seed", "0"])?;
    let secs = start.elapsed().as_secs_f64();
    let v: Value = serde_json::from_slice(&out.stdout)?;
    let violations = v["violations"].as_u64().unwrap_or(u64::MAX);
    Ok((
        violations == 0 && secs < 60.0,
        format!("1000 instances, {violations} violations, min margin {:.3e}, {secs:.1}s", v["min_margin"].as_f64().unwrap_or(f64::NAN)),
    ))
}

fn proof_terms() -> Check {
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for i in 0..500u64 {
        let t = verify_proof_terms(&theorem_instance(1_000_000 + i))?;
        if !t.hold(1e-9) {
            violations += 1;
        }
        worst = worst
            .min(t.term_a_rhs - t.term_a_lhs)
            .min(t.term_b_rhs - t.term_b_lhs);
    }
    Ok((violations == 0, format!("500 instances, {violations} violations, smallest slack {worst:.3e}")))
}

fn fld_oracle() -> Check {
    let start = Instant::now();
    let results: Vec<(bool, bool, f64)> = (0..500u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedStream::new(i).rng("fld-pair");
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=4);
            let w = simplex(&mut rng, n, true);
            let q = simplex(&mut rng, m, true);
            let (v, _) = fld_exact(&w, &q)?;
            let mut couplings = vec![Coupling::new(
                Matrix::from_fn(n, m, |a, b| w[a] * q[b]),
                w.clone(),
                q.clone(),
            )?];
            for _ in 0..20 {
                couplings.push(random_vertex(&w, &q, &mut rng));
            }
            let below_feasible = couplings
                .iter()
                .all(|c| v <= TransportKernel::from_coupling(c).expected_entropy(&w) + 1e-12);
            let below_hq = v <= entropy(&q) + 1e-12;
            let search = fld_random_search(&w, &q, 100_000, &mut rng);
            Ok((below_feasible, below_hq, (search - v).abs()))
        })
        .collect::<anyhow::Result<_>>()?;
    let secs = start.elapsed().as_secs_f64();
    let feasible = results.iter().filter(|r| r.0).count();
    let hq = results.iter().filter(|r| r.1).count();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok((
        feasible == 500 && hq == 500 && worst <= 1e-9 && secs < 30.0,
        format!("500 pairs: below feasible couplings {feasible}, below H(q) {hq}, max |exact - search| {worst:.2e}, {secs:.1}s"),
    ))
}

fn tf() -> Check {
    let mut rng = SeedStream::new(4).rng("tf-cases");
    let (mut found, mut tries, mut worst) = (0, 0, 0.0f64);
    while found < 200 && tries < 100_000 {
        tries += 1;
        if let Some((w, q, plan, p_tau)) = random_feasible_tf_case(&mut rng)? {
            let closed = tf_closed_form(&plan, &w, &q, &p_tau)?.tf;
            let oracle = tf_convex_oracle(&plan, &w, &p_tau)?;
            worst = worst.max((closed - oracle).abs());
            found += 1;
        }
    }
    Ok((found == 200 && worst <= 1e-4, format!("{found} feasible cases, max |closed - oracle| {worst:.2e}")))
}

/// `x -> min_k (a_k + |x - c_k|)` is 1-Lipschitz for the Euclidean metric.
fn lipschitz_test_function(rng: &mut impl Rng, d: usize) -> impl Fn(&[f64]) -> f64 {
    let k = rng.random_range(1..=4);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let offsets: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    move |x: &[f64]| {
        centers
            .iter()
            .zip(&offsets)
            .map(|(c, a)| a + c.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

fn sinkhorn_vs_lp() -> Check {
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        ..Default::default()
    };
    let results: Vec<(f64, bool, f64)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedStream::new(i).rng("sinkhorn-lp");
            let (n, m, d) = (rng.random_range(2..=32), rng.random_range(2..=32), rng.random_range(1..=3));
            let x = Matrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0));
            let y = Matrix::from_fn(m, d, |_, _| rng.random_range(0.0..1.0));
            let mu = simplex(&mut rng, n, false);
            let nu = simplex(&mut rng, m, false);
            let cost = cost_matrix(&x, &y)?;
            let (_, w1) = exact_w1(&cost, &mu, &nu)?;
            let est = sinkhorn(&cost, &mu, &nu, &cfg)?.w1_estimate;
            let ok = (est - w1).abs() <= 0.05 * w1 + 1e-3;
            let mut duality = f64::NEG_INFINITY;
            for _ in 0..10 {
                let f = lipschitz_test_function(&mut rng, d);
                let ef = (0..n).map(|a| mu[a] * f(x.row(a))).sum::<f64>() - (0..m).map(|b| nu[b] * f(y.row(b))).sum::<f64>();
                duality = duality.max(ef - w1);
            }
            Ok(((est - w1).abs() / w1.max(1e-12), ok, duality))
        })
        .collect::<anyhow::Result<_>>()?;
    let within = results.iter().filter(|r| r.1).count();
    let worst_rel = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_dual = results.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        within == 100 && worst_dual <= 1e-9,
        format!("100 instances up to 32x32: {within} within tolerance (max rel {worst_rel:.3}), max dual excess {worst_dual:.2e}"),
    ))
}

fn random_net(dims: &[usize], role: Role, rng: &mut impl Rng) -> MlpParams {
    MlpParams::random(dims, Activation::Tanh, Activation::Identity, role, rng)
}

fn with_weight(p: &MlpParams, layer: usize, w: &Matrix) -> MlpParams {
    let mut layers = p.layers().to_vec();
    layers[layer].w = w.clone();
    MlpParams::new(layers, p.role()).unwrap()
}

fn gradients() -> Check {
    let (mut fa, mut fld, mut pen, mut s2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..50u64 {
        let s = SeedStream::new(c).child("gradients");
        let mut rng = s.rng("config");
        let (dt, ds, h) = (rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(3..=6));
        let k = rng.random_range(2..=4);
        let phi = random_net(&[dt, h, 3], Role::TargetEmbedder, &mut rng);
        let theta = random_net(&[ds, h, 3], Role::SourceEmbedder, &mut rng);
        let head = random_net(&[3, h, k], Role::SourceHead, &mut rng);

        let nt = rng.random_range(3..=8);
        let ns = rng.random_range(3..=8);
        let xt = Matrix::from_fn(nt, dt, |_, _| rng.random_range(-1.0..1.0));
        let xs = Matrix::from_fn(ns, ds, |_, _| rng.random_range(-1.0..1.0));
        let omega = rng.random_range(0.1..2.0);
        let scfg = SinkhornConfig::default();
        let out = fa_loss_and_grad(&phi, &theta, &xt, &xs, omega, &scfg)?;
        let v = embed(&theta, &xs)?;
        let plan = sinkhorn(&cost_matrix(&embed(&phi, &xt)?, &v)?, &uniform(nt), &uniform(ns), &scfg)?
            .coupling
            .into_pi();
        for l in 0..2 {
            let fd = central_difference(
                &mut |w| {
                    let c = cost_matrix(&embed(&with_weight(&phi, l, w), &xt).unwrap(), &v).unwrap();
                    omega * c.hadamard(&plan).unwrap().sum()
                },
                &phi.layers()[l].w,
                1e-6,
            );
            fa = fa.max(max_relative_error(&out.grads.layers[l].0, &fd, FD_FLOOR));
        }

        let kp = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..nt).map(|_| rng.random_range(0..kp)).collect();
        let target = Dataset::new(xt.clone(), labels.clone(), kp)?;
        let (_, g) = fld_loss_and_grad(&phi, &head, &target)?;
        let mut unused = s.rng("hard");
        for l in 0..2 {
            let fd = central_difference(
                &mut |w| {
                    let p = with_weight(&phi, l, w);
                    fld_surrogate(&pseudo_label_stats(&p, &head, &target, PseudoLabelMode::Soft, &mut unused).unwrap())
                },
                &phi.layers()[l].w,
                1e-6,
            );
            fld = fld.max(max_relative_error(&g.layers[l].0, &fd, FD_FLOOR));
        }

        let u = Matrix::from_fn(nt, 3, |_, _| rng.random_range(-1.5..1.5));
        let cond = Matrix::one_hot(&(0..nt).map(|_| rng.random_range(0..k)).collect::<Vec<_>>(), k)?;
        let pomega = rng.random_range(0.01..0.3);
        let (_, gw, gb) = penalty_and_grad(&head, &u, &cond, pomega)?;
        let last = head.layers().last().unwrap().clone();
        let penalty = |w: &Matrix, b: &Matrix| lipschitz_penalty(&head.with_last_layer(w.clone(), b.clone()).unwrap(), &u, &cond, pomega).unwrap();
        let fdw = central_difference(&mut |w| penalty(w, &last.b), &last.w, 1e-6);
        let fdb = central_difference(&mut |b| penalty(&last.w, b), &last.b, 1e-6);
        pen = pen.max(max_relative_error(&gw, &fdw, FD_FLOOR)).max(max_relative_error(&gb, &fdb, FD_FLOOR));

        let kernel_mlp = random_net(&[3 + k, h, kp], Role::TransportHead, &mut rng);
        let kernel = TransportHeadParams::new(kernel_mlp, k, kp)?;
        let (_, g) = stage2_nll_and_grad(&head, &kernel, &u, &labels)?;
        for l in 0..2 {
            let fd = central_difference(
                &mut |w| {
                    let mut k2 = kernel.clone();
                    k2.mlp = with_weight(&kernel.mlp, l, w);
                    stage2_nll(&head, &k2, &u, &labels).unwrap()
                },
                &kernel.mlp.layers()[l].w,
                1e-6,
            );
            s2 = s2.max(max_relative_error(&g.layers[l].0, &fd, FD_FLOOR));
        }
    }
    let worst = fa.max(fld).max(pen).max(s2);
    Ok((
        worst <= 1e-4,
        format!("50 configurations per loss, max relative error FA {fa:.1e}, FLD {fld:.1e}, penalty {pen:.1e}, stage-2 {s2:.1e}"),
    ))
}

fn lipschitz() -> Check {
    let dir = tempfile::tempdir()?;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let s = seed.to_string();
        let root = dir.path().join(&s);
        let (task, m0, m1) = (root.join("task"), root.join("m0"), root.join("m1"));
        let p = |x: &Path| x.to_str().unwrap().to_string();
        gapcraft(&["gen", "--family", "rotated", "--n-proxy", "300", "--seed", &s, "--out", &p(&task)])?;
        gapcraft(&["pretrain", "--task", &p(&task), "--seed", &s, "--out", &p(&m0)])?;
        gapcraft(&[
            "recalibrate",
            "--task",
            &p(&task),
            "--model",
            &p(&m0),
            "--omega",
            "0.3",
            "--penalty-weight",
            "1000",
            "--recalibration-epochs",
            "3000",
            "--recalibration-lr",
            "0.002",
            "--seed",
            &s,
            "--out",
            &p(&m1),
        ])?;
        let r = read_json(&m1.join("recalibration.json"))?;
        let p95 = r["heldout_after"]["grad_norm_p95"].as_f64().unwrap_or(f64::NAN);
        let degrade = r["heldout_after"]["error"].as_f64().unwrap_or(f64::NAN) - r["heldout_before"]["error"].as_f64().unwrap_or(f64::NAN);
        ok &= p95 <= 1.1 * 0.3 && degrade < 0.02;
        lines.push(format!("seed {seed}: p95 {p95:.3}, error change {:+.1}pp", 100.0 * degrade));
    }
    Ok((ok, lines.join("; ")))
}

fn correlation() -> Check {
    let start = Instant::now();
    let jobs: Vec<(u64, u64)> = (0..3).flat_map(|t| (0..5).map(move |r| (t, r))).collect();
    let rs: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, r)| {
            let bundle = generate(&TaskSpec::new(Family::Rotated, t))?;
            let cfg = PipelineConfig {
                seed: r,
                ..Default::default()
            };
            let prep = prepare(&bundle, &cfg)?;
            let run = run_prepared(&bundle, &prep, &cfg)?;
            Ok(correlate_gap_error(&run.log)?.pearson_r)
        })
        .collect::<anyhow::Result<_>>()?;
    let secs = start.elapsed().as_secs_f64();
    let med = median(&rs);
    let lo = rs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        med >= 0.8 && secs < 300.0,
        format!("3 task seeds x 5 run seeds: median r {med:.3} (min {lo:.3}), {secs:.1}s"),
    ))
}

fn table7() -> Check {
    let tasks: Vec<(String, TaskSpec)> = [Family::Rotated, Family::PermutedLabels]
        .iter()
        .map(|&f| (f.name().to_string(), TaskSpec::new(f, 0)))
        .collect();
    let seeds: Vec<u64> = (0..5).collect();
    let table = run_baseline(&Variant::ALL, &tasks, &seeds, &PipelineConfig::default())?;
    let mut ok = true;
    let mut lines = Vec::new();
    for (task, bayes) in &table.bayes_error {
        let m = |v| table.cell(task, v).map_or(f64::NAN, |c| c.median);
        let (nft, fa, re) = (m(Variant::Nft), m(Variant::FaOnly), m(Variant::Recraft));
        ok &= re <= fa && fa <= nft && re <= 1.5 * bayes;
        lines.push(format!("{task}: nft {nft:.3}, fa_only {fa:.3}, recraft {re:.3}, Bayes {bayes:.3}"));
    }
    Ok((ok, lines.join("; ")))
}

fn same_run(a: &RunResult, b: &RunResult) -> bool {
    a.phi == b.phi
        && a.kernel == b.kernel
        && a.log.without_timing() == b.log.without_timing()
        && a.target_error.to_bits() == b.target_error.to_bits()
}

fn reductions() -> Check {
    let mut checked = 0;
    let mut ok = true;
    for family in [Family::Rotated, Family::PermutedLabels] {
        for seed in 0..2u64 {
            let bundle = generate(&TaskSpec {
                n_source: 300,
                n_test: 500,
                ..TaskSpec::new(family, seed)
            })?;
            let cfg = PipelineConfig {
                seed,
                scale: 0.5,
                ..Default::default()
            };
            let run = |c: &PipelineConfig| -> anyhow::Result<RunResult> { Ok(run_prepared(&bundle, &prepare(&bundle, c)?, c)?) };
            let nft = run(&cfg.with_variant(Variant::Nft))?;
            let zero = run(&PipelineConfig { n1: 0, n2: 0, ..cfg.with_variant(Variant::Recraft) })?;
            let fa = run(&cfg.with_variant(Variant::FaOnly))?;
            let no_fld = run(&PipelineConfig { n2: 0, ..cfg.with_variant(Variant::Recraft) })?;
            ok &= same_run(&nft, &zero) && same_run(&fa, &no_fld);
            checked += 2;
        }
    }
    Ok((ok, format!("{checked} reductions compared bitwise over 2 families x 2 seeds")))
}

fn bars() -> Check {
    let dir = tempfile::tempdir()?;
    let out = dir.path().to_str().unwrap();
    gapcraft(&["bound-report", "--bars", "--tasks", "5", "--seed", "0", "--out", out])?;
    let mut rdr = csv::Reader::from_path(dir.path().join("bars.csv"))?;
    let mut ok = true;
    let (mut rows, mut gaps) = (0, Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
        let (err_s, fa, fld, tf, rhs, rel) = (f(1), f(2), f(3), f(4), f(5), f(8));
        ok &= [err_s, fa, fld, tf].iter().all(|x| *x >= 0.0);
        ok &= (err_s + fa + fld + tf - rhs).abs() <= 1e-9;
        ok &= rel.is_finite();
        gaps.push(rel);
        rows += 1;
    }
    ok &= rows == 5;
    Ok((
        ok,
        format!("{rows} tasks, mean relative gap {:.3} (reported)", gaps.iter().sum::<f64>() / gaps.len().max(1) as f64),
    ))
}

fn main() {
    let criteria: [(usize, fn() -> Check); 11] = [
        (1, theorem),
        (2, proof_terms),
        (3, fld_oracle),
        (4, tf),
        (5, sinkhorn_vs_lp),
        (6, gradients),
        (7, lipschitz),
        (8, correlation),
        (9, table7),
        (10, reductions),
        (11, bars),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        failed += usize::from(!pass);
        println!(
            "criterion {n}: {} ({detail}) [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
