//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with:
//!   cargo test -p rora-cli --test acceptance -- --test-threads=1 --nocapture

use rora_core::adapters::{
    scaling_factor, AdaptedLinear, InitPreset, LowRankAdapter, ScalingPolicy,
};
use rora_core::grad::{
    grad_adapter, gradcheck, sgd_step, two_step_increment, Hyperparams, UpstreamGradient,
};
use rora_core::linalg::{gaussian_matrix_from, gaussian_vector_from, Matrix, RngSeed, SeededRng};
use rora_core::train::{
    finetune, pretrain_base, pruned_finetune_experiment, rank_sweep_experiment, AdapterSpec,
    ModelSpec, SweepPlan, TaskKind, ToyTask, TrainRecord,
};
use rora_core::variance::{monte_carlo_increment_stats, rank_norm_sweep, VarianceExperiment};
use std::time::{Duration, Instant};

fn report(name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let verdict = if pass && elapsed <= budget { "PASS" } else { "FAIL" };
    println!(
        "[{verdict}] {name} ({:.1}s of {:.0}s budget): {detail}",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let rep = gradcheck(100, RngSeed(7)).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(10);
    let pass = rep.failures == 0 && rep.max_rel_error < 1e-6;
    report(
        "criterion 1: gradient oracle",
        pass,
        elapsed,
        budget,
        &format!(
            "trials={} failures={} max_rel_error={:.3e}",
            rep.trials, rep.failures, rep.max_rel_error
        ),
    );
    assert!(pass, "gradient check failed: {rep:?}");
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_2_two_step_equivalence() {
    let start = Instant::now();
    let mut rng = SeededRng::new(RngSeed(90));
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let r = 1 + rng.below(8);
        let p_in = 1 + rng.below(16);
        let p_out = 1 + rng.below(16);
        let scaling = 0.25 + 1.75 * rng.uniform();
        let lr = 0.1;
        let a = gaussian_matrix_from(r, p_in, 0.0, 1.0, &mut rng).unwrap();
        let adapter =
            LowRankAdapter::from_parts(a.clone(), Matrix::zeros(p_out, r), scaling).unwrap();
        let x_t = gaussian_vector_from(p_in, 0.0, 1.0, &mut rng).unwrap();
        let x_t1 = gaussian_vector_from(p_in, 0.0, 1.0, &mut rng).unwrap();
        let delta = gaussian_vector_from(p_out, 0.0, 1.0, &mut rng).unwrap();

        let closed = two_step_increment(&a, &x_t, &x_t1, lr, &delta, scaling).unwrap();
        let grads = grad_adapter(&adapter, &x_t, &UpstreamGradient::new(delta.clone())).unwrap();
        let stepped = sgd_step(&adapter, &grads, lr, true).unwrap();
        let piped = stepped.increment(&x_t1).unwrap();

        for (c, p) in closed.as_slice().iter().zip(piped.as_slice()) {
            let scale = 1.0_f64.max(c.abs()).max(p.abs());
            worst = worst.max((c - p).abs() / scale);
            assert!(
                (c - p).abs() <= 1e-12 * scale,
                "trial {trial}: closed {c} vs pipeline {p}"
            );
        }
    }
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(5);
    report(
        "criterion 2: closed-form two-step increment equals the composed pipeline",
        true,
        elapsed,
        budget,
        &format!("100 instances, worst scaled difference {worst:.3e}"),
    );
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_3_variance_law_grid() {
    let start = Instant::now();
    // single worker, as the budget is stated for one
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let ranks = [1usize, 2, 4, 8, 16];
    let p_ins = [4usize, 16, 64];
    let gammas = [0.25f64, 1.0, 2.0];
    let mut failures = Vec::new();
    let mut mean_failures = Vec::new();
    let mut worst_rel: f64 = 0.0;
    let mut worst_exact_rel: f64 = 0.0;
    pool.install(|| {
        for &r in &ranks {
            for &p_in in &p_ins {
                for &gamma in &gammas {
                    let exp = VarianceExperiment {
                        r,
                        p_in,
                        p_out: 1,
                        lr: 0.1,
                        delta: 1.0,
                        policy: ScalingPolicy::Custom(gamma),
                        alpha: 16.0,
                        n_samples: 200_000,
                        seed: RngSeed(300)
                            .child(r as u64)
                            .child(p_in as u64)
                            .child(gamma.to_bits()),
                    };
                    let rep = monte_carlo_increment_stats(&exp).unwrap();
                    worst_rel = worst_rel.max(rep.rel_error);
                    worst_exact_rel = worst_exact_rel.max(rep.exact_rel_error());
                    if rep.rel_error >= 0.05 {
                        failures.push(format!(
                            "  cell r={r} p_in={p_in} gamma={gamma}: empirical_var={:.5e} \
                             closed_form={:.5e} rel_error={:.3} (exact model {:.5e}, rel {:.4})",
                            rep.empirical_var,
                            rep.closed_form_var,
                            rep.rel_error,
                            rep.exact_var,
                            rep.exact_rel_error()
                        ));
                    }
                    if !rep.mean_within_sigma(4.0) {
                        mean_failures.push(format!("  mean 4-sigma failure at r={r} p_in={p_in} gamma={gamma}"));
                    }
                }
            }
        }
    });
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(300);
    let pass = failures.is_empty() && mean_failures.is_empty();
    report(
        "criterion 3: variance law lr^2 delta^2 gamma^4 r^2 p_in on the full grid",
        pass,
        elapsed,
        budget,
        &format!(
            "{} of 45 cells exceed 5% vs the r^2 p_in closed form (worst rel {:.2}); \
             all cells match the exact r p_in (p_in+r+1) law (worst rel {:.4}); \
             zero-mean 4-sigma failures: {}",
            failures.len(),
            worst_rel,
            worst_exact_rel,
            mean_failures.len()
        ),
    );
    for f in &failures {
        println!("{f}");
    }
    for f in &mean_failures {
        println!("{f}");
    }
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
    assert!(
        mean_failures.is_empty(),
        "zero-mean consistency failed:\n{}",
        mean_failures.join("\n")
    );
    assert!(
        failures.is_empty(),
        "Monte Carlo variance does not match the stated closed form \
         lr^2 delta^2 gamma^4 r^2 p_in on {} of 45 grid cells (the measured \
         variance follows lr^2 delta^2 gamma^4 r p_in (p_in + r + 1) instead; \
         the two agree only for r >> p_in, which no grid cell satisfies):\n{}",
        failures.len(),
        failures.join("\n")
    );
}

#[test]
fn criterion_4_slope_trichotomy() {
    let start = Instant::now();
    let ranks = [4usize, 8, 16, 32, 64];
    let cases = [
        (ScalingPolicy::Unit, 1.0),
        (ScalingPolicy::Lora, -1.0),
        (ScalingPolicy::Rora, 0.0),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for (policy, want) in cases {
        let fit = rank_norm_sweep(
            policy,
            16.0,
            &ranks,
            1,
            1,
            0.05,
            1.0,
            100_000,
            RngSeed(400),
        )
        .unwrap();
        let ok = (fit.slope - want).abs() < 0.1 && fit.residual < 0.05;
        pass &= ok;
        details.push(format!(
            "{policy}: slope {:.4} (want {want} +/- 0.1), residual {:.4}",
            fit.slope, fit.residual
        ));
    }
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(120);
    report(
        "criterion 4: scaling-law slope trichotomy (+1 unit, -1 lora, 0 rora)",
        pass,
        elapsed,
        budget,
        &details.join("; "),
    );
    assert!(pass, "{}", details.join("\n"));
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_5_rank_one_policy_coincidence() {
    let start = Instant::now();
    // forward outputs
    let mut rng = SeededRng::new(RngSeed(500));
    let base = gaussian_matrix_from(6, 5, 0.0, 1.0, &mut rng).unwrap();
    let mk = |policy| {
        let cfg = rora_core::adapters::AdapterConfig::new(5, 6, 1, 16.0, policy, InitPreset::Train)
            .unwrap();
        let mut adapter = LowRankAdapter::init(&cfg, RngSeed(501)).unwrap();
        // give b nonzero content so the adapter path actually contributes
        adapter.b = gaussian_matrix_from(6, 1, 0.0, 1.0, &mut SeededRng::new(RngSeed(502))).unwrap();
        AdaptedLinear::new(base.clone(), adapter).unwrap()
    };
    let lora_layer = mk(ScalingPolicy::Lora);
    let rora_layer = mk(ScalingPolicy::Rora);
    let mut forwards_equal = true;
    for _ in 0..20 {
        let x = gaussian_vector_from(5, 0.0, 1.0, &mut rng).unwrap();
        let a = lora_layer.forward(&x).unwrap();
        let b = rora_layer.forward(&x).unwrap();
        forwards_equal &= a.bits_eq(&b);
    }

    // training trajectories
    let task = ToyTask {
        kind: TaskKind::TeacherStudent,
        d_in: 8,
        d_hidden: 4,
        d_out: 8,
        n_train: 64,
        n_eval: 32,
        noise_std: 0.01,
        seed: RngSeed(503),
    };
    let model = pretrain_base(
        &task,
        &ModelSpec {
            widths: vec![8, 8],
            init_std: 0.05,
        },
        &Hyperparams::new(0.1, 20, 0).unwrap(),
    )
    .unwrap();
    let run = |policy| {
        finetune(
            &model,
            &task,
            &AdapterSpec {
                r: 1,
                alpha: 16.0,
                policy,
                init: InitPreset::Train,
            },
            &Hyperparams::new(0.002, 30, 0).unwrap(),
            RngSeed(504),
        )
        .unwrap()
    };
    let lora_rec = run(ScalingPolicy::Lora);
    let rora_rec = run(ScalingPolicy::Rora);
    let traj_equal = lora_rec
        .losses
        .iter()
        .zip(&rora_rec.losses)
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && lora_rec
            .update_norms
            .iter()
            .zip(&rora_rec.update_norms)
            .all(|(a, b)| a.to_bits() == b.to_bits())
        && lora_rec.final_eval.to_bits() == rora_rec.final_eval.to_bits();

    let elapsed = start.elapsed();
    let budget = Duration::from_secs(30);
    let pass = forwards_equal && traj_equal;
    report(
        "criterion 5: lora and rora coincide bit-for-bit at rank 1",
        pass,
        elapsed,
        budget,
        &format!("forward outputs equal: {forwards_equal}; trajectories equal: {traj_equal}"),
    );
    assert!(pass);
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

fn echo_plan() -> SweepPlan {
    SweepPlan {
        task: ToyTask {
            kind: TaskKind::TeacherStudent,
            d_in: 64,
            d_hidden: 4,
            d_out: 64,
            n_train: 512,
            n_eval: 256,
            noise_std: 0.01,
            seed: RngSeed(2024),
        },
        model: ModelSpec {
            widths: vec![64, 64],
            init_std: 0.001,
        },
        pretrain: Hyperparams::new(0.3, 3, 0).unwrap(),
        finetune: Hyperparams::new(0.0005, 50, 0).unwrap(),
        alpha: 16.0,
        init: InitPreset::Train,
        policies: vec![ScalingPolicy::Lora, ScalingPolicy::Rora],
        ranks: vec![4, 8, 16, 32, 64],
        seeds: vec![11, 12, 13],
    }
}

fn seed_mean_update_norm(records: &[TrainRecord], policy: ScalingPolicy, rank: usize) -> f64 {
    let cells: Vec<&TrainRecord> = records
        .iter()
        .filter(|r| r.policy == policy && r.rank == rank)
        .collect();
    assert!(!cells.is_empty());
    cells.iter().map(|r| r.mean_update_norm(50)).sum::<f64>() / cells.len() as f64
}

#[test]
fn criterion_6_training_time_rank_invariance_echo() {
    let start = Instant::now();
    let plan = echo_plan();
    let out = rank_sweep_experiment(&plan).unwrap();
    let ratio_for = |policy| {
        let means: Vec<f64> = plan
            .ranks
            .iter()
            .map(|&r| seed_mean_update_norm(&out.records, policy, r))
            .collect();
        let max = means.iter().cloned().fold(f64::MIN, f64::max);
        let min = means.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    };
    let rora_ratio = ratio_for(ScalingPolicy::Rora);
    let lora_ratio = ratio_for(ScalingPolicy::Lora);
    let pass = rora_ratio < 1.5 && lora_ratio > 4.0;
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(180);
    report(
        "criterion 6: first-50-step update-norm ratio across ranks 4..64",
        pass,
        elapsed,
        budget,
        &format!("rora max/min {rora_ratio:.3} (< 1.5), lora max/min {lora_ratio:.1} (> 4)"),
    );
    assert!(pass, "rora {rora_ratio}, lora {lora_ratio}");
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_7_pruned_recovery() {
    let start = Instant::now();
    let plan = SweepPlan {
        task: ToyTask {
            kind: TaskKind::TeacherStudent,
            d_in: 64,
            d_hidden: 4,
            d_out: 64,
            n_train: 512,
            n_eval: 256,
            noise_std: 0.01,
            seed: RngSeed(700),
        },
        model: ModelSpec {
            widths: vec![64, 64],
            init_std: 0.001,
        },
        pretrain: Hyperparams::new(0.3, 150, 0).unwrap(),
        finetune: Hyperparams::new(0.01, 300, 0).unwrap(),
        alpha: 16.0,
        init: InitPreset::Train,
        policies: vec![
            ScalingPolicy::Lora,
            ScalingPolicy::Rora,
            ScalingPolicy::Unit,
        ],
        ranks: vec![8, 16, 32, 64],
        seeds: vec![1, 2, 3],
    };
    let out = pruned_finetune_experiment(&plan, 0.814).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for (i, (&b, &p)) in out.base_eval.iter().zip(&out.pruned_eval).enumerate() {
        if p <= b {
            pass = false;
            details.push(format!("seed {i}: pruned {p} not worse than base {b}"));
        }
    }
    let mut worst_margin = f64::MAX;
    for rec in &out.sweep.records {
        let idx = plan.seeds.iter().position(|&s| s == rec.seed).unwrap();
        let margin = out.pruned_eval[idx] - rec.final_eval;
        worst_margin = worst_margin.min(margin);
        if rec.final_eval >= out.pruned_eval[idx] {
            pass = false;
            details.push(format!(
                "cell (policy={}, rank={}, seed={}) did not improve: {} >= {}",
                rec.policy, rec.rank, rec.seed, rec.final_eval, out.pruned_eval[idx]
            ));
        }
    }
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(300);
    report(
        "criterion 7: pruned-model damage and adapter recovery at 81.4% sparsity",
        pass,
        elapsed,
        budget,
        &format!(
            "pruned worse than base on all {} seeds; all {} fine-tuned cells improve \
             (worst margin {:.4})",
            out.base_eval.len(),
            out.sweep.records.len(),
            worst_margin
        ),
    );
    assert!(pass, "{}", details.join("\n"));
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_8_byte_reproducibility_across_workers() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_rora-lab");
    let dir = tempfile::tempdir().unwrap();

    let variance_cfg = r#"
kind = "variance"
seed = 42

[variance.grid]
lr = 0.1
delta = 1.0
p_out = 1
n_samples = 20000
ranks = [1, 2]
p_ins = [4]
gammas = [1.0]
"#;
    let sweep_cfg = r#"
kind = "sweep"
seed = 42

[sweep]
policies = ["lora", "rora"]
ranks = [2, 4]
seeds = [1, 2, 3]
alpha = 16.0
adapter_init = "train"

[sweep.task]
kind = "teacher-student"
d_in = 8
d_hidden = 4
d_out = 8
n_train = 64
n_eval = 32
noise_std = 0.01

[sweep.model]
widths = [8, 8]
init_std = 0.05

[sweep.pretrain]
lr = 0.1
steps = 20
batch = 0

[sweep.finetune]
lr = 0.0005
steps = 10
batch = 0
"#;

    let mut pass = true;
    let mut details = Vec::new();
    for (name, cfg) in [("variance", variance_cfg), ("sweep", sweep_cfg)] {
        let cfg_path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&cfg_path, cfg).unwrap();
        let mut outputs = Vec::new();
        for (run, workers) in [(0, "1"), (1, "4"), (2, "1"), (3, "4")] {
            let out_dir = dir.path().join(format!("{name}_{run}"));
            let status = std::process::Command::new(bin)
                .args([
                    "run",
                    cfg_path.to_str().unwrap(),
                    "--out-dir",
                    out_dir.to_str().unwrap(),
                    "--workers",
                    workers,
                ])
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{name} run failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            outputs.push(std::fs::read(out_dir.join("results.csv")).unwrap());
        }
        let identical = outputs.windows(2).all(|w| w[0] == w[1]);
        pass &= identical;
        details.push(format!(
            "{name}: 4 runs (workers 1,4,1,4) byte-identical: {identical}"
        ));
    }
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(120);
    report(
        "criterion 8: results.csv byte-reproducible across reruns and worker counts",
        pass,
        elapsed,
        budget,
        &details.join("; "),
    );
    assert!(pass, "{}", details.join("\n"));
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}

#[test]
fn criterion_9_zero_init_neutrality_in_sweeps() {
    let start = Instant::now();
    let mut pass = true;
    let mut checked = 0usize;
    // regression sweep
    let plan = SweepPlan {
        task: ToyTask {
            kind: TaskKind::TeacherStudent,
            d_in: 8,
            d_hidden: 4,
            d_out: 8,
            n_train: 64,
            n_eval: 32,
            noise_std: 0.01,
            seed: RngSeed(900),
        },
        model: ModelSpec {
            widths: vec![8, 8],
            init_std: 0.05,
        },
        pretrain: Hyperparams::new(0.1, 20, 0).unwrap(),
        finetune: Hyperparams::new(0.0005, 5, 0).unwrap(),
        alpha: 16.0,
        init: InitPreset::Train,
        policies: vec![
            ScalingPolicy::Lora,
            ScalingPolicy::Rora,
            ScalingPolicy::Unit,
        ],
        ranks: vec![1, 2, 4, 8],
        seeds: vec![1, 2, 3],
    };
    let out = rank_sweep_experiment(&plan).unwrap();
    for rec in &out.records {
        checked += 1;
        if rec.losses[0].to_bits() != rec.frozen_train_loss.to_bits() {
            pass = false;
            println!(
                "  neutrality violated at (policy={}, rank={}, seed={})",
                rec.policy, rec.rank, rec.seed
            );
        }
    }
    // classification sweep
    let plan_cls = SweepPlan {
        task: ToyTask {
            kind: TaskKind::Classification,
            d_in: 16,
            d_hidden: 0,
            d_out: 4,
            n_train: 128,
            n_eval: 64,
            noise_std: 0.0,
            seed: RngSeed(901),
        },
        model: ModelSpec {
            widths: vec![16, 4],
            init_std: 0.05,
        },
        pretrain: Hyperparams::new(0.1, 20, 0).unwrap(),
        finetune: Hyperparams::new(0.0005, 5, 0).unwrap(),
        alpha: 16.0,
        init: InitPreset::Train,
        policies: vec![ScalingPolicy::Lora, ScalingPolicy::Rora],
        ranks: vec![2, 4],
        seeds: vec![1, 2, 3],
    };
    let out_cls = rank_sweep_experiment(&plan_cls).unwrap();
    for rec in &out_cls.records {
        checked += 1;
        if rec.losses[0].to_bits() != rec.frozen_train_loss.to_bits() {
            pass = false;
            println!(
                "  neutrality violated at (policy={}, rank={}, seed={})",
                rec.policy, rec.rank, rec.seed
            );
        }
    }
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(60);
    report(
        "criterion 9: step-0 loss equals frozen-model loss bit-wise in every cell",
        pass,
        elapsed,
        budget,
        &format!("{checked} cells checked across regression and classification sweeps"),
    );
    assert!(pass);
    assert!(elapsed <= budget, "over budget: {elapsed:?}");
}
