//! Strict TOML run configuration.
//!
//! One file describes one experiment. The top level carries the experiment
//! kind and master seed; exactly one kind-specific table must be present.
//! Unknown keys anywhere are rejected, and `parse(emit(config)) == config`
//! holds for every valid configuration.

use rora_core::adapters::{InitPreset, ScalingPolicy};
use rora_core::grad::Hyperparams;
use rora_core::linalg::RngSeed;
use rora_core::train::{ModelSpec, TaskKind, ToyTask};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Gradcheck,
    Variance,
    Sweep,
    Train,
    PruneFinetune,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Variance => "variance",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Train => "train",
            ExperimentKind::PruneFinetune => "prune-finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    /// Master seed; all experiment randomness derives from it.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune_finetune: Option<PruneFinetuneSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<VarianceGridSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_sweep: Option<NormSweepSection>,
}

/// Cross product (ranks x p_ins x gammas) of Monte Carlo variance cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceGridSection {
    pub lr: f64,
    pub delta: f64,
    pub p_out: usize,
    pub n_samples: usize,
    pub ranks: Vec<usize>,
    pub p_ins: Vec<usize>,
    /// Fixed scaling values, applied through the custom policy.
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSweepSection {
    pub lr: f64,
    pub delta: f64,
    pub p_in: usize,
    pub p_out: usize,
    pub n_samples: usize,
    pub alpha: f64,
    pub ranks: Vec<usize>,
    pub policies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: String,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub lr: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub policies: Vec<String>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub adapter_init: String,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pretrain: HyperSection,
    pub finetune: HyperSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub policy: String,
    pub rank: usize,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub adapter_init: String,
    #[serde(default)]
    pub save_adapters: bool,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pretrain: HyperSection,
    pub finetune: HyperSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneFinetuneSection {
    pub sparsity: f64,
    pub policies: Vec<String>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub adapter_init: String,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pretrain: HyperSection,
    pub finetune: HyperSection,
}

pub fn parse_policy(name: &str) -> Result<ScalingPolicy, CliError> {
    if let Some(rest) = name.strip_prefix("custom:") {
        let g: f64 = rest
            .parse()
            .map_err(|_| CliError::Validation(format!("bad custom scaling value in '{name}'")))?;
        return Ok(ScalingPolicy::Custom(g));
    }
    match name {
        "lora" => Ok(ScalingPolicy::Lora),
        "rora" => Ok(ScalingPolicy::Rora),
        "unit" => Ok(ScalingPolicy::Unit),
        other => Err(CliError::Validation(format!(
            "unknown policy '{other}' (expected lora, rora, unit, or custom:<value>)"
        ))),
    }
}

pub fn parse_init(name: &str) -> Result<InitPreset, CliError> {
    match name {
        "analysis" => Ok(InitPreset::Analysis),
        "train" => Ok(InitPreset::Train),
        other => Err(CliError::Validation(format!(
            "unknown adapter_init '{other}' (expected analysis or train)"
        ))),
    }
}

pub fn parse_task_kind(name: &str) -> Result<TaskKind, CliError> {
    match name {
        "teacher-student" => Ok(TaskKind::TeacherStudent),
        "classification" => Ok(TaskKind::Classification),
        other => Err(CliError::Validation(format!(
            "unknown task kind '{other}' (expected teacher-student or classification)"
        ))),
    }
}

impl TaskSection {
    pub fn to_task(&self, seed: u64) -> Result<ToyTask, CliError> {
        Ok(ToyTask {
            kind: parse_task_kind(&self.kind)?,
            d_in: self.d_in,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
            n_train: self.n_train,
            n_eval: self.n_eval,
            noise_std: self.noise_std,
            seed: RngSeed(seed),
        })
    }
}

impl ModelSection {
    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            widths: self.widths.clone(),
            init_std: self.init_std,
        }
    }
}

impl HyperSection {
    pub fn to_hyper(&self) -> Result<Hyperparams, CliError> {
        Hyperparams::new(self.lr, self.steps, self.batch).map_err(CliError::from)
    }
}

impl RunConfig {
    /// Parse and validate a config document.
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config emit error: {e}")))
    }

    /// Exactly the section matching `kind` must be present.
    pub fn validate(&self) -> Result<(), CliError> {
        let sections = [
            ("gradcheck", self.gradcheck.is_some()),
            ("variance", self.variance.is_some()),
            ("sweep", self.sweep.is_some()),
            ("train", self.train.is_some()),
            ("prune_finetune", self.prune_finetune.is_some()),
        ];
        let expected = match self.kind {
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Variance => "variance",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Train => "train",
            ExperimentKind::PruneFinetune => "prune_finetune",
        };
        for (name, present) in sections {
            if name == expected && !present {
                return Err(CliError::Validation(format!(
                    "kind '{}' requires a [{name}] section",
                    self.kind.name()
                )));
            }
            if name != expected && present {
                return Err(CliError::Validation(format!(
                    "section [{name}] does not belong to kind '{}'",
                    self.kind.name()
                )));
            }
        }
        if let Some(v) = &self.variance {
            match (&v.grid, &v.norm_sweep) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(CliError::Validation(
                        "variance needs exactly one of [variance.grid] or [variance.norm_sweep]"
                            .into(),
                    ))
                }
            }
        }
        // surface policy/init/task-kind typos before any computation
        if let Some(v) = &self.variance {
            if let Some(ns) = &v.norm_sweep {
                for p in &ns.policies {
                    parse_policy(p)?;
                }
            }
        }
        if let Some(s) = &self.sweep {
            for p in &s.policies {
                parse_policy(p)?;
            }
            parse_init(&s.adapter_init)?;
            parse_task_kind(&s.task.kind)?;
        }
        if let Some(t) = &self.train {
            parse_policy(&t.policy)?;
            parse_init(&t.adapter_init)?;
            parse_task_kind(&t.task.kind)?;
        }
        if let Some(p) = &self.prune_finetune {
            for pol in &p.policies {
                parse_policy(pol)?;
            }
            parse_init(&p.adapter_init)?;
            parse_task_kind(&p.task.kind)?;
            if !(0.0..1.0).contains(&p.sparsity) {
                return Err(CliError::Validation(format!(
                    "sparsity must be in [0, 1), got {}",
                    p.sparsity
                )));
            }
        }
        Ok(())
    }
}
