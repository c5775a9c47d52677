use gapcraft::data::Dataset;
use gapcraft::models::{embed, predict_source, Layer, MlpParams, Role, TransportHeadParams};
use gapcraft::pipeline::*;
use gapcraft::synthtasks::{generate, Family, TaskBundle, TaskSpec};
use gapcraft::Matrix;

fn planted_phi(theta: &MlpParams, bundle: &TaskBundle) -> MlpParams {
    let m = Matrix::from_rows(bundle.metadata.planted_map.as_ref().unwrap()).unwrap();
    let mut layers: Vec<Layer> = theta.layers().to_vec();
    layers[0].w = m.matmul(&layers[0].w).unwrap();
    MlpParams::new(layers, Role::TargetEmbedder).unwrap()
}

#[test]
fn separable_source_pretrains_below_five_percent() {
    let spec = TaskSpec {
        source_classes: 2,
        target_classes: 2,
        separation: 4.0,
        noise: 0.5,
        ..TaskSpec::new(Family::Rotated, 3)
    };
    let b = generate(&spec).unwrap();
    assert!(b.metadata.bayes_error_source < 0.01);
    let p = pretrain_source(&b, &PipelineConfig::default()).unwrap();
    assert!(p.source_error < 0.05, "held-out error {}", p.source_error);
    assert!(p.meets_threshold);
}

#[test]
fn stage1_halves_fa_loss_on_rotated_family() {
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let b = generate(&TaskSpec::new(Family::Rotated, seed)).unwrap();
            let cfg = PipelineConfig {
                seed,
                ..Default::default()
            };
            let prep = prepare(&b, &cfg).unwrap();
            let cfg = PipelineConfig { n2: 0, ..cfg };
            let out = stage1(
                &prep.phi_init,
                &prep.pretrained.theta,
                &prep.head,
                &b.proxy,
                &b.target,
                &b.target_test,
                &cfg,
            )
            .unwrap();
            assert_eq!(out.log.phase(Phase::Fa).count(), cfg.n1);
            out.last.l_fa / out.initial.l_fa
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] <= 0.5, "L_FA ratios {ratios:?}");
}

#[test]
fn aligned_labels_leave_little_for_stage2() {
    let b = generate(&TaskSpec::new(Family::Rotated, 5)).unwrap();
    let cfg = PipelineConfig {
        seed: 5,
        n0: 200,
        ..Default::default()
    };
    let p = pretrain_source(&b, &cfg).unwrap();
    let phi = planted_phi(&p.theta, &b);
    let u = embed(&phi, &b.target.x).unwrap();
    let pseudo = predict_source(&p.head, &u).unwrap().argmax_rows();
    let target = Dataset::new(b.target.x.clone(), pseudo, b.target.classes).unwrap();
    let k = target.classes;
    let kinit = TransportHeadParams::init(phi.output_dim(), k, k);
    let out = stage2(&phi, &p.head, &kinit, &target, &b.target_test, &cfg).unwrap();
    let decrease = out.initial_nll - out.final_nll;
    let ps = predict_source(&p.head, &u).unwrap();
    let pseudo_nll = (0..u.rows()).map(|i| -ps.get(i, target.labels[i]).ln()).sum::<f64>() / u.rows() as f64;
    let ceiling = (1.0 + (k as f64 - 1.0) * (-2.0f64).exp()).ln() + pseudo_nll;
    assert!(decrease >= 0.0);
    assert!(decrease <= ceiling, "decrease {decrease} above {ceiling}");
    let lambda = out.kernel.kernel(&u).unwrap();
    for z in 0..k {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..u.rows() {
            num += ps.get(i, z) * lambda.get(i * k + z, z);
            den += ps.get(i, z);
        }
        assert!(num / den >= 0.9, "row {z}: {}", num / den);
    }
}

#[test]
fn permuted_labels_concentrate_the_kernel() {
    for seed in 0..3 {
        let spec = TaskSpec {
            separation: 3.0,
            ..TaskSpec::new(Family::PermutedLabels, seed)
        };
        let b = generate(&spec).unwrap();
        let perm = b.metadata.permutation.clone().unwrap();
        let cfg = PipelineConfig {
            seed,
            n0: 300,
            ..Default::default()
        };
        let p = pretrain_source(&b, &cfg).unwrap();
        let phi = planted_phi(&p.theta, &b);
        let before = phi.clone();
        let k = b.target.classes;
        let kinit = TransportHeadParams::init(phi.output_dim(), b.source.classes, k);
        let out = stage2(&phi, &p.head, &kinit, &b.target, &b.target_test, &cfg).unwrap();
        assert_eq!(phi, before);
        let u = embed(&phi, &b.target_test.x).unwrap();
        let ps = predict_source(&p.head, &u).unwrap();
        let lambda = out.kernel.kernel(&u).unwrap();
        for (z, &zp) in perm.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..u.rows() {
                let w = ps.get(i, z);
                num += w * lambda.get(i * b.source.classes + z, zp);
                den += w;
            }
            assert!(num / den >= 0.9, "seed {seed} row {z}: {}", num / den);
        }
    }
}

#[test]
fn stage1_closes_the_gap_and_stage2_descends() {
    let mut gap_ratios = Vec::new();
    let mut worst_rises = Vec::new();
    for seed in 0..3 {
        let b = generate(&TaskSpec::new(Family::Rotated, seed)).unwrap();
        let cfg = PipelineConfig {
            seed,
            ..Default::default()
        };
        let prep = prepare(&b, &cfg).unwrap();
        let s1 = stage1(
            &prep.phi_init,
            &prep.pretrained.theta,
            &prep.head,
            &b.proxy,
            &b.target,
            &b.target_test,
            &cfg,
        )
        .unwrap();
        assert_eq!(s1.log.phase(Phase::Fa).count(), cfg.n1);
        assert_eq!(s1.log.phase(Phase::Fld).count(), cfg.n2);
        gap_ratios.push(s1.last.semantic_gap / s1.initial.semantic_gap);
        let before = s1.phi.clone();
        let kinit = TransportHeadParams::init(s1.phi.output_dim(), b.source.classes, b.target.classes);
        let s2 = stage2(&s1.phi, &prep.head, &kinit, &b.target, &b.target_test, &cfg).unwrap();
        assert_eq!(s1.phi, before);
        let mut prev = s2.initial_nll;
        let mut rise = 0.0f64;
        for r in s2.log.phase(Phase::Stage2) {
            let nll = r.nll.unwrap();
            rise = rise.max(nll - prev);
            prev = nll;
        }
        worst_rises.push(rise);
    }
    assert!(median(&gap_ratios) <= 1.0, "{gap_ratios:?}");
    assert!(median(&worst_rises) <= 1e-3, "{worst_rises:?}");
}
