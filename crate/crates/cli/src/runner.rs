//! Experiment dispatch: config in, deterministic result rows out.

use crate::config::{
    parse_init, parse_policy, ExperimentKind, RunConfig, SweepSection, TrainSection,
};
use crate::error::CliError;
use crate::report::{fmt_f64, ResultRow};
use rora_core::adapters::{write_snapshot, ScalingPolicy};
use rora_core::grad::gradcheck;
use rora_core::linalg::RngSeed;
use rora_core::train::{
    finetune_full, pretrain_base, pruned_finetune_experiment, rank_sweep_experiment, SweepOutcome,
    SweepPlan,
};
use rora_core::variance::{monte_carlo_increment_stats, rank_norm_sweep, VarianceExperiment};
use std::path::Path;

/// First 50 fine-tuning steps: the window used for update-norm aggregates.
pub const UPDATE_NORM_WINDOW: usize = 50;

pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    /// Adapter snapshots to write: (file name, bytes).
    pub artifacts: Vec<(String, Vec<u8>)>,
}

pub fn execute(config: &RunConfig, config_hash: &str) -> Result<RunOutput, CliError> {
    match config.kind {
        ExperimentKind::Gradcheck => run_gradcheck(config, config_hash),
        ExperimentKind::Variance => run_variance(config, config_hash),
        ExperimentKind::Sweep => run_sweep(config, config_hash),
        ExperimentKind::Train => run_train(config, config_hash),
        ExperimentKind::PruneFinetune => run_prune(config, config_hash),
    }
}

fn run_gradcheck(config: &RunConfig, hash: &str) -> Result<RunOutput, CliError> {
    let section = config.gradcheck.as_ref().expect("validated");
    let report = gradcheck(section.trials, RngSeed(config.seed))?;
    let rows = vec![
        ResultRow::new("gradcheck", hash, "trials", report.trials as f64),
        ResultRow::new("gradcheck", hash, "failures", report.failures as f64),
        ResultRow::new("gradcheck", hash, "max_rel_error", report.max_rel_error),
    ];
    Ok(RunOutput {
        rows,
        artifacts: Vec::new(),
    })
}

fn run_variance(config: &RunConfig, hash: &str) -> Result<RunOutput, CliError> {
    let section = config.variance.as_ref().expect("validated");
    let mut rows = Vec::new();
    if let Some(grid) = &section.grid {
        for &r in &grid.ranks {
            for &p_in in &grid.p_ins {
                for &gamma in &grid.gammas {
                    let exp = VarianceExperiment {
                        r,
                        p_in,
                        p_out: grid.p_out,
                        lr: grid.lr,
                        delta: grid.delta,
                        policy: ScalingPolicy::Custom(gamma),
                        alpha: rora_core::adapters::DEFAULT_ALPHA,
                        n_samples: grid.n_samples,
                        seed: RngSeed(config.seed)
                            .child(r as u64)
                            .child(p_in as u64)
                            .child(gamma.to_bits()),
                    };
                    let rep = monte_carlo_increment_stats(&exp)?;
                    let extra = format!("r={r};p_in={p_in};gamma={}", fmt_f64(gamma));
                    let mut push = |metric: &str, value: f64| {
                        rows.push(
                            ResultRow::new("variance", hash, metric, value)
                                .rank(r)
                                .extra(extra.clone()),
                        );
                    };
                    push("empirical_mean", rep.empirical_mean);
                    push("empirical_var", rep.empirical_var);
                    push("closed_form_var", rep.closed_form_var);
                    push("exact_var", rep.exact_var);
                    push("rel_error", rep.rel_error);
                    push("exact_rel_error", rep.exact_rel_error());
                    push("ci95_halfwidth", rep.ci95_halfwidth);
                }
            }
        }
    }
    if let Some(ns) = &section.norm_sweep {
        for (pi, name) in ns.policies.iter().enumerate() {
            let policy = parse_policy(name)?;
            let fit = rank_norm_sweep(
                policy,
                ns.alpha,
                &ns.ranks,
                ns.p_in,
                ns.p_out,
                ns.lr,
                ns.delta,
                ns.n_samples,
                RngSeed(config.seed).child(pi as u64),
            )?;
            for (rank, norm) in fit.ranks.iter().zip(&fit.mean_norms) {
                rows.push(
                    ResultRow::new("variance", hash, "mean_norm", *norm)
                        .policy(name)
                        .rank(*rank)
                        .extra(format!("p_in={}", ns.p_in)),
                );
            }
            rows.push(ResultRow::new("variance", hash, "slope", fit.slope).policy(name));
            rows.push(ResultRow::new("variance", hash, "intercept", fit.intercept).policy(name));
            rows.push(ResultRow::new("variance", hash, "residual", fit.residual).policy(name));
        }
    }
    Ok(RunOutput {
        rows,
        artifacts: Vec::new(),
    })
}

fn sweep_plan_from(section: &SweepSection, seed: u64) -> Result<SweepPlan, CliError> {
    Ok(SweepPlan {
        task: section.task.to_task(seed)?,
        model: section.model.to_spec(),
        pretrain: section.pretrain.to_hyper()?,
        finetune: section.finetune.to_hyper()?,
        alpha: section.alpha,
        init: parse_init(&section.adapter_init)?,
        policies: section
            .policies
            .iter()
            .map(|p| parse_policy(p))
            .collect::<Result<_, _>>()?,
        ranks: section.ranks.clone(),
        seeds: section.seeds.clone(),
    })
}

fn sweep_rows(experiment: &str, hash: &str, outcome: &SweepOutcome, rows: &mut Vec<ResultRow>) {
    for rec in &outcome.records {
        let policy = rec.policy.to_string();
        let mut push = |metric: &str, value: f64| {
            rows.push(
                ResultRow::new(experiment, hash, metric, value)
                    .policy(&policy)
                    .rank(rec.rank)
                    .seed(rec.seed),
            );
        };
        push("frozen_eval", rec.frozen_eval);
        push("final_eval", rec.final_eval);
        push("mean_update_norm_50", rec.mean_update_norm(UPDATE_NORM_WINDOW));
        push("final_update_norm", rec.update_norms.last().copied().unwrap_or(0.0));
    }
    for summary in &outcome.summaries {
        let policy = summary.policy.to_string();
        for row in &summary.rows {
            let mut push = |metric: &str, value: f64| {
                rows.push(
                    ResultRow::new(experiment, hash, metric, value)
                        .policy(&policy)
                        .rank(row.rank),
                );
            };
            push("mean_eval", row.mean_eval);
            push("std_eval", row.std_eval);
            push("mean_final_update_norm", row.mean_final_update_norm);
        }
    }
}

fn run_sweep(config: &RunConfig, hash: &str) -> Result<RunOutput, CliError> {
    let section = config.sweep.as_ref().expect("validated");
    let plan = sweep_plan_from(section, config.seed)?;
    let outcome = rank_sweep_experiment(&plan)?;
    let mut rows = Vec::new();
    sweep_rows("sweep", hash, &outcome, &mut rows);
    Ok(RunOutput {
        rows,
        artifacts: Vec::new(),
    })
}

fn run_train(config: &RunConfig, hash: &str) -> Result<RunOutput, CliError> {
    let section: &TrainSection = config.train.as_ref().expect("validated");
    let policy = parse_policy(&section.policy)?;
    let init = parse_init(&section.adapter_init)?;
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &section.seeds {
        let task = section.task.to_task(config.seed)?.replicate(seed);
        let model = pretrain_base(&task, &section.model.to_spec(), &section.pretrain.to_hyper()?)?;
        let spec = rora_core::train::AdapterSpec {
            r: section.rank,
            alpha: section.alpha,
            policy,
            init,
        };
        let adapter_seed = task.seed.child(0xADA0 ^ (section.rank as u64));
        let (mut rec, adapters) = finetune_full(
            &model,
            &task,
            &spec,
            &section.finetune.to_hyper()?,
            adapter_seed,
        )?;
        rec.seed = seed;
        let policy_name = rec.policy.to_string();
        for (step, (&loss, &norm)) in rec.losses.iter().zip(&rec.update_norms).enumerate() {
            rows.push(
                ResultRow::new("train", hash, "loss", loss)
                    .policy(&policy_name)
                    .rank(rec.rank)
                    .seed(seed)
                    .step(step),
            );
            rows.push(
                ResultRow::new("train", hash, "update_norm", norm)
                    .policy(&policy_name)
                    .rank(rec.rank)
                    .seed(seed)
                    .step(step),
            );
        }
        let mut push = |metric: &str, value: f64| {
            rows.push(
                ResultRow::new("train", hash, metric, value)
                    .policy(&policy_name)
                    .rank(rec.rank)
                    .seed(seed),
            );
        };
        push("frozen_train_loss", rec.frozen_train_loss);
        push("frozen_eval", rec.frozen_eval);
        push("final_eval", rec.final_eval);
        push("mean_update_norm_50", rec.mean_update_norm(UPDATE_NORM_WINDOW));
        if section.save_adapters {
            for (layer, (cfg, adapter)) in adapters.iter().enumerate() {
                let mut bytes = Vec::new();
                write_snapshot(&mut bytes, cfg, adapter)?;
                artifacts.push((format!("adapter_seed{seed}_layer{layer}.bin"), bytes));
            }
        }
    }
    Ok(RunOutput { rows, artifacts })
}

fn run_prune(config: &RunConfig, hash: &str) -> Result<RunOutput, CliError> {
    let section = config.prune_finetune.as_ref().expect("validated");
    let plan = SweepPlan {
        task: section.task.to_task(config.seed)?,
        model: section.model.to_spec(),
        pretrain: section.pretrain.to_hyper()?,
        finetune: section.finetune.to_hyper()?,
        alpha: section.alpha,
        init: parse_init(&section.adapter_init)?,
        policies: section
            .policies
            .iter()
            .map(|p| parse_policy(p))
            .collect::<Result<_, _>>()?,
        ranks: section.ranks.clone(),
        seeds: section.seeds.clone(),
    };
    let outcome = pruned_finetune_experiment(&plan, section.sparsity)?;
    let mut rows = Vec::new();
    let extra = format!("sparsity={}", fmt_f64(section.sparsity));
    for (i, &seed) in section.seeds.iter().enumerate() {
        rows.push(
            ResultRow::new("prune-finetune", hash, "base_eval", outcome.base_eval[i])
                .seed(seed)
                .extra(extra.clone()),
        );
        rows.push(
            ResultRow::new("prune-finetune", hash, "pruned_eval", outcome.pruned_eval[i])
                .seed(seed)
                .extra(extra.clone()),
        );
    }
    sweep_rows("prune-finetune", hash, &outcome.sweep, &mut rows);
    Ok(RunOutput {
        rows,
        artifacts: Vec::new(),
    })
}

/// Write an artifact file, creating the directory if needed.
pub fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}
