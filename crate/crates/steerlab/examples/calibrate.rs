//! End-to-end calibration run: pretrains a base model on a builtin world,
//! trains the steering variants, and prints the audit metrics. Useful when
//! touching hyperparameter defaults.
//!
//! Usage: cargo run --release --example calibrate [world] [guidance_scale] [lambda]

use std::collections::BTreeMap;
use std::time::Instant;

use steerlab::eval::{
    alignment_rate, audit_fairness, bootstrap_mode_conditional_upper, fidelity, safety_rate,
};
use steerlab::numerics::Rng;
use steerlab::schedule::{GuidanceConfig, ScheduleConfig};
use steerlab::scorenet::{pretrain_base, ConceptVocabulary, NetworkConfig, PretrainConfig, ScoreNetwork};
use steerlab::steering::{SafetyBundle, SteerModules, TransformKind};
use steerlab::train::{
    generate, train_concept_only, train_shared, train_steering, GenerateMode, GenerationAssets,
    SteerPolicy, SteerTrainConfig,
};
use steerlab::worlds::{self, neutral_reference, OracleClassifier};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let world_name = args.get(1).map(String::as_str).unwrap_or("gauss2d_gender");
    let scale: f64 = args
        .get(2)
        .map(|s| s.parse().expect("guidance scale must be a number"))
        .unwrap_or(1.5);
    let lambda: f64 = args
        .get(3)
        .map(|s| s.parse().expect("lambda must be a number"))
        .unwrap_or(1.0);
    let lr: f64 = args
        .get(4)
        .map(|s| s.parse().expect("lr must be a number"))
        .unwrap_or(1e-2);
    let iterations: usize = args
        .get(5)
        .map(|s| s.parse().expect("iterations must be an integer"))
        .unwrap_or(5000);
    let stop_below: usize = args
        .get(6)
        .map(|s| s.parse().expect("stop_below must be an integer"))
        .unwrap_or(15);
    let start_at: usize = args
        .get(9)
        .map(|s| s.parse().expect("start_at must be an integer"))
        .unwrap_or(usize::MAX);
    let policy = SteerPolicy { start_at, stop_below };
    let gamma: f64 = args
        .get(7)
        .map(|s| s.parse().expect("gamma must be a number"))
        .unwrap_or(1.0);
    let kind = match args.get(8).map(String::as_str) {
        Some("mlp") => TransformKind::Mlp,
        _ => TransformKind::Constant,
    };

    let world = worlds::builtin(world_name).expect("unknown world");
    let oracle = OracleClassifier::new(&world).unwrap();
    let vocab = ConceptVocabulary::from_world(&world).unwrap();
    let (sched, grid) = ScheduleConfig::default().build().unwrap();
    let net_cfg = NetworkConfig::default();
    let pre_cfg = PretrainConfig::default();

    let mut rng = Rng::seed_from(7);
    let mut net = ScoreNetwork::new(net_cfg, vocab.clone(), &mut rng);
    let dataset = worlds::make_dataset(&world, pre_cfg.dataset_size, &mut rng).unwrap();

    let t0 = Instant::now();
    let log = pretrain_base(&mut net, &dataset, &sched, &pre_cfg, &mut rng).unwrap();
    println!(
        "pretrain: {} epochs in {:.1?}; loss {:.4} -> {:.4}",
        pre_cfg.epochs,
        t0.elapsed(),
        log.epoch_losses.first().unwrap(),
        log.epoch_losses.last().unwrap()
    );

    let guidance = Some(GuidanceConfig::new(scale, net.vocab().uncond().0).unwrap());
    let gen_rng = Rng::seed_from(99);

    // Base-model neutral sampling.
    let t0 = Instant::now();
    let base_samples = generate(
        &net,
        &world.category,
        &GenerationAssets::default(),
        &GenerateMode::Base,
        2000,
        guidance,
        policy,
        &grid,
        &sched,
        &gen_rng,
    )
    .unwrap();
    let base_x: Vec<Vec<f64>> = base_samples.iter().map(|s| s.x.clone()).collect();
    let base_report = audit_fairness(&base_x, &oracle).unwrap();
    println!(
        "base: gen 2000 in {:.1?}; DevRat {:.3}; rates {:?}",
        t0.elapsed(),
        base_report.delta,
        base_report.rates
    );
    if world.is_safety_world() {
        println!("base unsafe rate {:.3}", safety_rate(&base_x, &oracle).unwrap());
    }

    let mut ref_rng = Rng::seed_from(1234);
    let reference = neutral_reference(&world, 2000, &mut ref_rng).unwrap();
    let base_fid = fidelity(&base_x, &reference, &oracle).unwrap();
    println!(
        "base fidelity: pooled {:.4}, mode-conditional {:.4}, coverage {:?}",
        base_fid.energy_distance, base_fid.mode_conditional, base_fid.coverage
    );

    let steer_cfg = |target: &str, negative: bool| SteerTrainConfig {
        iterations,
        batch: 1,
        lr,
        lambda,
        t_max: grid.steps(),
        neutral: world.neutral.clone(),
        target: target.to_string(),
        negative_mode: negative,
        negative_scale: gamma,
        kind,
        mlp_hidden: 32,
        weight_decay: if negative { 0.0 } else { 1e-4 },
        seed: 17,
    };

    if world.is_safety_world() {
        let mut members = Vec::new();
        for concept in &world.unsafe_attributes {
            let t0 = Instant::now();
            let (c, s, log) =
                train_steering(&net, &sched, &grid, guidance, policy, &steer_cfg(concept, true)).unwrap();
            println!(
                "steer anti-{concept}: {:.1?}; loss first10% {:.4} last10% {:.4}; |v_c| {:.3} |v_s| {:.3}",
                t0.elapsed(),
                log.mean_concept_loss(0..log.records.len() / 10),
                log.mean_concept_loss(log.records.len() * 9 / 10..log.records.len()),
                c.store().iter().map(|(_, p)| p.value.l2_norm().powi(2)).sum::<f64>().sqrt(),
                s.store().iter().map(|(_, p)| p.value.l2_norm().powi(2)).sum::<f64>().sqrt(),
            );
            members.push(c);
            members.push(s);
        }
        let bundle = SafetyBundle::new(members).unwrap();
        let assets = GenerationAssets {
            per_concept: BTreeMap::new(),
            bundle: Some(bundle),
        };
        let safe_samples = generate(
            &net,
            &world.category,
            &assets,
            &GenerateMode::Safety,
            2000,
            guidance,
            policy,
            &grid,
            &sched,
            &gen_rng,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = safe_samples.iter().map(|s| s.x.clone()).collect();
        println!("steered unsafe rate {:.3}", safety_rate(&xs, &oracle).unwrap());
        let fid = fidelity(&xs, &reference, &oracle).unwrap();
        println!(
            "steered fidelity: pooled {:.4}, mode-conditional {:.4}, coverage {:?}, per_mode {:?}",
            fid.energy_distance, fid.mode_conditional, fid.coverage, fid.per_mode
        );
        let mut boot_rng = Rng::seed_from(555);
        let upper = bootstrap_mode_conditional_upper(
            &base_x, &reference, &oracle, 100, 0.975, &mut boot_rng,
        )
        .unwrap();
        println!("base bootstrap 97.5% mode-conditional {upper:.4}");
        for (name, set) in [("ref", &reference), ("base", &base_x), ("steered", &xs)] {
            let mut by_label: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
            for x in set.iter() {
                by_label.entry(oracle.classify(x).unwrap()).or_default().push(x);
            }
            for (label, pts) in by_label {
                let n = pts.len() as f64;
                let mean: Vec<f64> = (0..2)
                    .map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / n)
                    .collect();
                let std: Vec<f64> = (0..2)
                    .map(|d| {
                        (pts.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt()
                    })
                    .collect();
                println!(
                    "  {name}/{label}: n={} mean=({:.2},{:.2}) std=({:.2},{:.2})",
                    pts.len(), mean[0], mean[1], std[0], std[1]
                );
            }
        }
        return;
    }

    // Fairness: train every variant per concept.
    let concepts = world.sensitive_concepts();
    let mut dual = GenerationAssets::default();
    let mut ram_only = GenerationAssets::default();
    let mut shared = GenerationAssets::default();
    for concept in &concepts {
        let cfg = steer_cfg(concept, false);
        let t0 = Instant::now();
        let (c, s, log) = train_steering(&net, &sched, &grid, guidance, policy, &cfg).unwrap();
        let vc = c.store().value(c.store().ids().next().unwrap()).clone();
        let vs = s.store().value(s.store().ids().next().unwrap()).clone();
        let dot: f64 = vc.data().iter().zip(vs.data()).map(|(a, b)| a * b).sum();
        let cos = dot / (vc.l2_norm() * vs.l2_norm()).max(1e-12);
        println!(
            "steer {concept}: {:.1?}; loss first10% {:.4} last10% {:.4}; |v_c| {:.3} |v_s| {:.3} cos {:.3} |net| {:.3}",
            t0.elapsed(),
            log.mean_concept_loss(0..cfg.iterations / 10),
            log.mean_concept_loss(cfg.iterations * 9 / 10..cfg.iterations),
            vc.l2_norm(),
            vs.l2_norm(),
            cos,
            vc.add(&vs).unwrap().l2_norm(),
        );
        dual.per_concept.insert(
            concept.clone(),
            SteerModules::Pair {
                concept: c,
                semantic: s,
            },
        );
        let (c, _) = train_concept_only(&net, &sched, &grid, guidance, policy, &cfg).unwrap();
        println!(
            "  ram[{concept}] |v| {:.3}",
            c.store().value(c.store().ids().next().unwrap()).l2_norm()
        );
        ram_only
            .per_concept
            .insert(concept.clone(), SteerModules::ConceptOnly { concept: c });
        let (sh, _) = train_shared(&net, &sched, &grid, guidance, policy, &cfg).unwrap();
        println!(
            "  shared[{concept}] |v| {:.3}",
            sh.store().value(sh.store().ids().next().unwrap()).l2_norm()
        );
        shared
            .per_concept
            .insert(concept.clone(), SteerModules::Shared { shared: sh });
    }

    for (name, assets) in [("dual", &dual), ("ram_only", &ram_only), ("shared", &shared)] {
        let t0 = Instant::now();
        let fair = generate(
            &net,
            &world.category,
            assets,
            &GenerateMode::FairRandom,
            2000,
            guidance,
            policy,
            &grid,
            &sched,
            &gen_rng,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = fair.iter().map(|s| s.x.clone()).collect();
        let report = audit_fairness(&xs, &oracle).unwrap();
        let fid = fidelity(&xs, &reference, &oracle).unwrap();
        print!(
            "{name}: gen {:.1?}; DevRat {:.3}; fid pooled {:.4} cond {:.4};",
            t0.elapsed(),
            report.delta,
            fid.energy_distance,
            fid.mode_conditional
        );
        for concept in &concepts {
            let fixed = generate(
                &net,
                &world.category,
                assets,
                &GenerateMode::FixedConcept(concept.clone()),
                500,
                guidance,
                policy,
                &grid,
                &sched,
                &gen_rng,
            )
            .unwrap();
            let xs: Vec<Vec<f64>> = fixed.iter().map(|s| s.x.clone()).collect();
            print!(" align[{concept}] {:.3}", alignment_rate(&xs, &oracle, concept).unwrap());
        }
        println!();
    }

    let mut boot_rng = Rng::seed_from(555);
    let upper =
        bootstrap_mode_conditional_upper(&base_x, &reference, &oracle, 100, 0.975, &mut boot_rng)
            .unwrap();
    println!("base bootstrap 97.5% mode-conditional {upper:.4}");
}
