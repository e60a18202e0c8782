//! Acceptance criteria. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line under `cargo test`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lbgen::alignment::{individual_alignment_loss, select_negative_class};
use lbgen::evaluation::{
    background_gap, context_bias_avg, fewshot_curve, linear_probe, stratified_subsample, texture_inclination, CueConflictDecision,
    LabeledFeatures, PartitionAccuracyTable,
};
use lbgen::generator::{make_grad_mask, GradMask, LowRankAdapter};
use lbgen::quality::{level_probabilities, quality_loss, quality_score, LevelLogits, QualityScorer};
use lbgen::stack::{tiny_config, ToyStack};
use lbgen::synthesis::{generate_dataset, SynthConfig};
use lbgen::trainer::{train_step, window_mean, LossBreakdown, TrainerState};
use lbgen::worldgen::World;
use lbgen::{derive_stream, RngStream, RunConfig};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed < limit {
        Ok(String::new())
    } else {
        Err(format!("took {elapsed:?}, limit {limit:?}"))
    }
}

fn random_logits(rng: &mut RngStream) -> LevelLogits {
    let mut l = [0.0; 5];
    for v in &mut l {
        *v = 4.0 * rng.normal();
    }
    LevelLogits(l)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let uniform = quality_score(&level_probabilities(&LevelLogits([0.0; 5])).map_err(|e| e.to_string())?);
    check!((uniform - 3.0).abs() < 1e-9, "uniform score {uniform}");
    let mut rng = derive_stream(1, "acceptance/quality");
    let mut worst_shift: f64 = 0.0;
    for _ in 0..1000 {
        let l = random_logits(&mut rng);
        let c = 50.0 * rng.normal();
        let shifted = LevelLogits(l.0.map(|x| x + c));
        let a = level_probabilities(&l).unwrap();
        let b = level_probabilities(&shifted).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    check!(worst_shift < 1e-9, "shift changed probabilities by {worst_shift}");
    for _ in 0..100_000 {
        let s = 1.0 + 4.0 * rng.uniform();
        let l = quality_loss(s).map_err(|e| e.to_string())?;
        check!((0.0..=0.8).contains(&l), "L_q({s}) = {l}");
    }
    let hand = quality_score(&level_probabilities(&LevelLogits([0.0, 0.0, 0.0, 0.0, 4f64.ln()])).unwrap());
    check!((hand - 3.75).abs() < 1e-9, "(0,0,0,0,ln 4) scored {hand}");
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("uniform 3.0, max shift delta {worst_shift:.1e}, hand case {hand}"))
}

fn brute_ti(d: &[CueConflictDecision]) -> f64 {
    let texture = d.iter().filter(|x| x.predicted_class == x.texture_class).count() as f64;
    let shape = d.iter().filter(|x| x.predicted_class == x.shape_class).count() as f64;
    texture / (texture + shape) * 100.0
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = derive_stream(2, "acceptance/metrics");
    let mut worst: f64 = 0.0;
    let mut tables = 0;
    while tables < 1000 {
        let c = 2 + rng.below(9);
        let n = 1 + rng.below(200);
        let decisions: Vec<CueConflictDecision> = (0..n)
            .map(|_| {
                let s = rng.below(c);
                let t = (s + 1 + rng.below(c - 1)) % c;
                CueConflictDecision {
                    shape_class: s,
                    texture_class: t,
                    predicted_class: rng.below(c),
                }
            })
            .collect();
        let Ok(ti) = texture_inclination(&decisions) else { continue };
        worst = worst.max((ti - brute_ti(&decisions)).abs());

        let acc: Vec<f64> = (0..4).map(|_| 0.1 + 0.9 * rng.uniform()).collect();
        let cb = context_bias_avg(&PartitionAccuracyTable::from_accuracies(&acc)).map_err(|e| e.to_string())?;
        worst = worst.max((cb - 100.0 * (acc[1] + acc[2] + acc[3]) / (3.0 * acc[0])).abs());
        let scale = 0.1 + 0.9 * rng.uniform();
        let scaled: Vec<f64> = acc.iter().map(|a| a * scale).collect();
        let cb_scaled = context_bias_avg(&PartitionAccuracyTable::from_accuracies(&scaled)).unwrap();
        worst = worst.max((cb_scaled - cb).abs());

        let (a, b) = (rng.uniform(), rng.uniform());
        worst = worst.max((background_gap(a, b).unwrap() - (a * 100.0 - b * 100.0)).abs());
        tables += 1;
    }
    check!(worst <= 1e-12, "max deviation from brute force {worst:e}");
    let hand = context_bias_avg(&PartitionAccuracyTable::from_accuracies(&[0.8, 0.6, 0.4, 0.2])).unwrap();
    check!((hand - 50.0).abs() < 1e-12, "hand case gave {hand}");
    check!(
        context_bias_avg(&PartitionAccuracyTable::from_accuracies(&[0.0, 0.5, 0.5, 0.5])).is_err(),
        "CB_avg accepted zero P_0 accuracy"
    );
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 tables, max deviation {worst:.1e}, hand case {hand}"))
}

fn unit(rng: &mut RngStream, d: usize) -> Vec<f64> {
    let v = rng.normals(d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = derive_stream(3, "acceptance/algebra");
    for _ in 0..1000 {
        let (en, inn, q, lambda) = (rng.normal(), 2.0 * rng.uniform(), 0.8 * rng.uniform(), rng.uniform());
        let b = LossBreakdown::compose(en, inn, q, lambda, 0, GradMask::all(1));
        check!(b.l_bi == en + inn, "L_bi {} != {}", b.l_bi, en + inn);
        check!(b.l_total == b.l_bi + lambda * q, "L_total {} != {}", b.l_total, b.l_bi + lambda * q);
    }
    for _ in 0..100_000 {
        let d = 2 + rng.below(31);
        let l = individual_alignment_loss(&unit(&mut rng, d), &unit(&mut rng, d)).map_err(|e| e.to_string())?;
        check!((0.0..=2.0).contains(&l), "L_in out of range: {l}");
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let l = individual_alignment_loss(&[1.0, 0.0], &[h, h]).unwrap();
    check!((l - 0.2928932).abs() < 1e-6, "45 degree case gave {l}");
    Ok(format!("identities exact on 1000 draws, 45 degree L_in {l:.7}"))
}

fn criterion_4(stack: &ToyStack) -> Outcome {
    let start = Instant::now();
    let cfg = &stack.config;
    let ctx = stack.context(cfg).map_err(|e| e.to_string())?;
    let state = TrainerState::init(&stack.generator, cfg).unwrap();
    let mut adapter = state.adapter.clone();
    let mut rng = derive_stream(4, "acceptance/perturb");
    for (_, t) in adapter.params.iter_mut() {
        for v in &mut t.data {
            *v += 0.2 * rng.normal();
        }
    }
    let draws = ctx.draw_step(5).unwrap();
    let out = ctx.compute_loss_step(&adapter, &state.disc, &draws, None).unwrap();
    let names: Vec<String> = adapter.params.names().cloned().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..24 {
        let name = &names[rng.below(names.len())];
        let i = rng.below(adapter.params.get(name).len());
        let eval = |delta: f64| {
            let mut a = adapter.clone();
            a.params.get_mut(name).data[i] += delta;
            ctx.compute_loss_step(&a, &state.disc, &draws, Some(&out.frozen_eps)).unwrap().breakdown.l_total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = out.adapter_grads.get(name).data[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    check!(worst < 1e-3, "finite-difference relative error {worst:e}");

    let mut full_draws = draws.clone();
    full_draws.mask = make_grad_mask(cfg.t_steps, cfg.t_steps, &mut rng).unwrap();
    let masked = ctx.compute_loss_step(&adapter, &state.disc, &full_draws, None).unwrap();
    full_draws.mask = GradMask::all(cfg.t_steps);
    let unmasked = ctx.compute_loss_step(&adapter, &state.disc, &full_draws, None).unwrap();
    let mut worst_mask: f64 = 0.0;
    for name in &names {
        for (a, b) in masked.adapter_grads.get(name).data.iter().zip(&unmasked.adapter_grads.get(name).data) {
            worst_mask = worst_mask.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
        }
    }
    check!(worst_mask < 1e-6, "k = T masked gradient differs by {worst_mask:e}");
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("24 coordinates, max relative error {worst:.1e}; k = T deviation {worst_mask:.1e}"))
}

fn criterion_5(stack: &ToyStack) -> Outcome {
    let mut rng = derive_stream(5, "acceptance/masks");
    let (t, k, draws) = (10usize, 5usize, 10_000usize);
    let mut freq = vec![0usize; t];
    for _ in 0..draws {
        let m = make_grad_mask(t, k, &mut rng).unwrap();
        check!(m.count() == k, "mask with {} flags", m.count());
        for (f, &on) in freq.iter_mut().zip(&m.flags) {
            *f += on as usize;
        }
    }
    let p = k as f64 / t as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (j, &f) in freq.iter().enumerate() {
        check!((f as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "position {j} selected {f} times");
    }

    let g = &stack.generator;
    let zero = LowRankAdapter::new(&g.base, 4, 4.0, &mut rng).unwrap();
    for class in 0..g.config.num_classes {
        let (a, _) = g.sample(None, Some(class), 2.0, &mut derive_stream(class as u64, "acceptance/sample")).unwrap();
        let (b, _) = g.sample(Some(&zero), Some(class), 2.0, &mut derive_stream(class as u64, "acceptance/sample")).unwrap();
        check!(a.pixels() == b.pixels(), "zero adapter changed class {class} sample");
    }

    let (c, n, exclude) = (10usize, 100_000usize, 3usize);
    let mut counts = vec![0usize; c];
    for _ in 0..n {
        let neg = select_negative_class(c, exclude, &mut rng).unwrap();
        check!(neg != exclude, "negative equals excluded class {exclude}");
        counts[neg] += 1;
    }
    let p = 1.0 / (c - 1) as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (j, &x) in counts.iter().enumerate().filter(|&(j, _)| j != exclude) {
        check!((x as f64 - n as f64 * p).abs() <= 3.0 * sigma, "negative class {j} drawn {x} times");
    }
    Ok(format!("{draws} masks exact, positions within 3 sigma, zero adapter bit-identical, negatives uniform"))
}

fn criterion_6(stack: &ToyStack) -> Outcome {
    let cfg = &stack.config;
    let ctx = stack.context(cfg).map_err(|e| e.to_string())?;
    let mut state = TrainerState::init(&stack.generator, cfg).unwrap();
    let draws = ctx.draw_step(0).unwrap();
    let probe = ctx.compute_loss_step(&state.adapter, &state.disc, &draws, None).unwrap();
    let features = probe.image_features.clone();
    let (initial, _) = ctx.discriminator_step_grads(&state.disc, &features, draws.negative);
    let mut disc = state.disc.clone();
    let mut opt = state.disc_opt.clone();
    for _ in 0..200 {
        let (_, mut grads) = ctx.discriminator_step_grads(&disc, &features, draws.negative);
        opt.update(&mut disc.params, &mut grads);
    }
    let (last, _) = ctx.discriminator_step_grads(&disc, &features, draws.negative);
    check!(last > initial, "L_en did not increase: {initial} -> {last}");

    let base = stack.generator.base_hash();
    let encoder = stack.encoder.param_hash();
    for step in 0..500 {
        let draws = ctx.draw_step(step).unwrap();
        let out = ctx.compute_loss_step(&state.adapter, &state.disc, &draws, None).unwrap();
        let disc_before = state.disc.param_hash();
        let adapter_before = state.adapter.param_hash();
        let mut g = out.adapter_grads;
        state.gen_opt.update(&mut state.adapter.params, &mut g);
        check!(state.disc.param_hash() == disc_before, "generator step {step} touched the discriminator");
        let adapter_after = state.adapter.param_hash();
        check!(step > 0 || adapter_after != adapter_before, "generator step did not move the adapter");
        let (_, mut dg) = ctx.discriminator_step_grads(&state.disc, &out.image_features, draws.negative);
        state.disc_opt.update(&mut state.disc.params, &mut dg);
        check!(state.adapter.param_hash() == adapter_after, "discriminator step {step} touched the adapter");
        check!(state.disc.param_hash() != disc_before, "discriminator step {step} did not update");
        check!(stack.generator.base_hash() == base, "base weights changed at step {step}");
        check!(stack.encoder.param_hash() == encoder, "encoder changed at step {step}");
    }
    Ok(format!("L_en {initial:.5} -> {last:.5} over 200 D steps; 500 steps exclusive"))
}

fn mean_quality(stack: &ToyStack, adapter: Option<&LowRankAdapter>, n: usize) -> f64 {
    let g = &stack.generator;
    let total: f64 = (0..n)
        .map(|i| {
            let mut rng = derive_stream(99, &format!("acceptance/quality-sample/{i}"));
            let (img, _) = g.sample(adapter, Some(i % g.config.num_classes), stack.config.guidance_scale, &mut rng).unwrap();
            stack.scorer.score(&img)
        })
        .sum();
    total / n as f64
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let base_cfg = RunConfig::default();
    let stack = ToyStack::build(&base_cfg).map_err(|e| e.to_string())?;
    let before = mean_quality(&stack, None, 100);
    let mut lines = vec![];
    let mut failures = vec![];
    for seed in 0..3u64 {
        let cfg = RunConfig { seed, ..base_cfg.clone() };
        let ctx = stack.context(&cfg).map_err(|e| e.to_string())?;
        let mut state = TrainerState::init(&stack.generator, &cfg).unwrap();
        let mut l_in = vec![];
        while state.step < cfg.total_steps() {
            l_in.push(train_step(&ctx, &mut state, false).map_err(|e| e.to_string())?.breakdown.l_in);
        }
        let n = l_in.len();
        let first = window_mean(&l_in, 0, 50).unwrap();
        let last = window_mean(&l_in, n - 50, 50).unwrap();
        let after = mean_quality(&stack, Some(&state.adapter), 100);
        lines.push(format!("seed {seed}: L_in {first:.4} -> {last:.4}, quality {before:.3} -> {after:.3}"));
        if !(last < first) {
            failures.push(format!("seed {seed} L_in did not decrease"));
        }
        if after < before - 0.25 {
            failures.push(format!("seed {seed} quality dropped by {:.3}", before - after));
        }
    }
    check!(failures.is_empty(), "{}; {}", failures.join(", "), lines.join("; "));
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(lines.join("; "))
}

fn dir_contents(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(stack: &ToyStack) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = &stack.config;
    let state = TrainerState::init(&stack.generator, cfg).unwrap();
    let mut outputs = vec![];
    for workers in [1, 4] {
        let dir = tmp.path().join(format!("w{workers}"));
        let synth = SynthConfig {
            workers,
            per_class: 8,
            ..SynthConfig::from_run(cfg)
        };
        generate_dataset(&stack.generator, Some(&state.adapter), &stack.vocab, &stack.scorer, &synth, &dir).map_err(|e| e.to_string())?;
        outputs.push(dir_contents(&dir));
    }
    check!(outputs[0] == outputs[1], "synthesis output depends on the worker count");
    let files = outputs[0].len();

    let cfg = RunConfig {
        steps_per_epoch: 60,
        ..cfg.clone()
    };
    let ctx = stack.context(&cfg).map_err(|e| e.to_string())?;
    let mut straight = TrainerState::init(&stack.generator, &cfg).unwrap();
    let mut reference = vec![];
    while straight.step < 102 {
        reference.push(train_step(&ctx, &mut straight, false).unwrap().breakdown);
    }
    let mut partial = TrainerState::init(&stack.generator, &cfg).unwrap();
    while partial.step < 100 {
        train_step(&ctx, &mut partial, false).unwrap();
    }
    let ckpt = tmp.path().join("trainer.ckpt");
    partial.save(&ckpt).map_err(|e| e.to_string())?;
    drop(partial);
    let mut resumed = TrainerState::load(&ckpt).map_err(|e| e.to_string())?;
    for step in 100..102 {
        let b = train_step(&ctx, &mut resumed, false).unwrap().breakdown;
        check!(b == reference[step], "step {step} breakdown differs after resume");
    }
    check!(resumed == straight, "resumed state differs from the uninterrupted run");
    Ok(format!("{files} files identical across 1 and 4 workers; step 101 breakdown identical after resume"))
}

fn criterion_9() -> Outcome {
    let cfg = RunConfig::default();
    let world = World::new(cfg.num_classes, cfg.image_resolution).map_err(|e| e.to_string())?;
    let encoder = lbgen::stack::build_encoder(&cfg).map_err(|e| e.to_string())?;
    let features = |n: usize, name: &str| {
        let items = world.sample_dataset(n, 0.0, &mut derive_stream(9, name)).unwrap();
        let imgs: Vec<_> = items.iter().map(|li| li.image.clone()).collect();
        let f = encoder.encode_image(&imgs).unwrap();
        let rows: Vec<Vec<f64>> = f.iter().map(|v| v.as_slice().to_vec()).collect();
        LabeledFeatures::new(rows, items.iter().map(|li| li.class_id).collect()).unwrap()
    };
    let train = features(2000, "acceptance/probe-train");
    let test = features(2000, "acceptance/probe-test");

    let plain = linear_probe(&train, &test, 10, 0, 1.0).map_err(|e| e.to_string())?;
    let curve = fewshot_curve(&train, &test, 10, &[1.0], &[0], 1.0).map_err(|e| e.to_string())?;
    check!(curve[0].accuracy == plain.accuracy, "fraction 1.0 gave {} vs plain {}", curve[0].accuracy, plain.accuracy);

    for fraction in [0.5, 0.2, 0.1] {
        for seed in 0..3 {
            let idx = stratified_subsample(&train.labels, fraction, seed).map_err(|e| e.to_string())?;
            for c in 0..10 {
                let total = train.labels.iter().filter(|&&y| y == c).count() as f64;
                let got = idx.iter().filter(|&&i| train.labels[i] == c).count() as f64;
                check!((got - fraction * total).abs() <= 1.0, "class {c} at fraction {fraction}: {got} of {total}");
            }
        }
    }

    // Labels permuted on both splits, so no feature carries label information.
    let mut shuffled = train.clone();
    let mut shuffled_test = test.clone();
    let mut rng = derive_stream(9, "acceptance/shuffle");
    rng.shuffle(&mut shuffled.labels);
    rng.shuffle(&mut shuffled_test.labels);
    let chance = linear_probe(&shuffled, &shuffled_test, 10, 0, 1.0).map_err(|e| e.to_string())?;
    check!((chance.accuracy - 0.1).abs() <= 0.05, "shuffled-label accuracy {}", chance.accuracy);
    Ok(format!(
        "plain probe {:.4} equals fraction 1.0; stratification within 1; shuffled labels {:.4}",
        plain.accuracy, chance.accuracy
    ))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
        Err(detail) => println!("FAIL {name} ({secs:.1}s): {detail}"),
    }
    result.is_ok()
}

fn main() {
    let tiny = ToyStack::build(&tiny_config()).expect("tiny stack builds");
    let results = [
        run("criterion 1 quality formula", criterion_1),
        run("criterion 2 bias metric formulas", criterion_2),
        run("criterion 3 loss algebra", criterion_3),
        run("criterion 4 gradient correctness", || criterion_4(&tiny)),
        run("criterion 5 masking and sampling contracts", || criterion_5(&tiny)),
        run("criterion 6 adversarial direction", || criterion_6(&tiny)),
        run("criterion 7 end-to-end fine-tuning", criterion_7),
        run("criterion 8 pipeline determinism", || criterion_8(&tiny)),
        run("criterion 9 few-shot harness", criterion_9),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
