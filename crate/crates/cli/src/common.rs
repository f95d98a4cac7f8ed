//! Argument groups and helpers shared by several commands.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use cona::cona::{recipe, ConaConfig};
use cona::encoders::{DualEncoderBundle, Encoder, EncoderSpec, StudentInit, DEFAULT_STUDENT_LAYERS};
use cona::io::{load_dataset, Checkpoint, EncoderRole};
use cona::retrieval::RecallReport;
use cona::training::{IntermediateConfig, RetrievalEval, SyntheticDataset, TapStrategy, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Optimisation schedule flags.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Passes over the training split.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warmup length as a fraction of all steps.
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Trailing fraction of the dataset held out for recall.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, base: TrainConfig, seed: u64) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            peak_lr: self.lr.unwrap_or(base.peak_lr),
            warmup_fraction: self.warmup.unwrap_or(base.warmup_fraction),
            val_fraction: self.val_fraction.unwrap_or(base.val_fraction),
            seed,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    FromTeacher,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapArg {
    Fd,
    Sd,
}

/// Student shape, loss options and intermediate-layer distillation.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct StudentFlags {
    #[arg(long)]
    pub student_layers: Option<usize>,
    /// Defaults to the teacher's hidden width.
    #[arg(long)]
    pub student_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub student_init: Option<InitArg>,
    /// Softmax temperature shared by InfoNCE and KL-Div terms.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Let gradient reach student target slots of SD / KL-Div terms.
    #[arg(long)]
    #[serde(default)]
    pub two_sided: bool,
    /// Match intermediate activations at this many part boundaries.
    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long, value_enum)]
    pub tap_strategy: Option<TapArg>,
    #[arg(long)]
    pub tap_weight: Option<f64>,
}

impl StudentFlags {
    /// Applies tau / two-sided overrides to a loss configuration.
    pub fn loss_options(&self, mut cfg: ConaConfig) -> CliResult<ConaConfig> {
        if let Some(tau) = self.tau {
            cfg = cfg.with_tau(tau);
        }
        if self.two_sided {
            cfg = cfg.with_two_sided(true);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn intermediate(&self) -> Option<IntermediateConfig> {
        self.parts.map(|parts| IntermediateConfig {
            parts,
            strategy: match self.tap_strategy.unwrap_or(TapArg::Sd) {
                TapArg::Fd => TapStrategy::FD,
                TapArg::Sd => TapStrategy::SD,
            },
            weight: self.tap_weight.unwrap_or(1.0),
        })
    }

    /// Frozen teachers plus freshly initialized students; `seed` drives any
    /// random initialization.
    pub fn bundle(&self, teachers: &Checkpoint<f64>, seed: u64) -> CliResult<DualEncoderBundle<f64>> {
        let tt = teachers.require(EncoderRole::TextTeacher)?.clone();
        let it = teachers.require(EncoderRole::ImageTeacher)?.clone();
        let spec = |t: &Encoder<f64>| {
            EncoderSpec::new(
                t.spec.input_dim,
                self.student_hidden.unwrap_or(t.spec.hidden_dim),
                self.student_layers.unwrap_or(DEFAULT_STUDENT_LAYERS),
                t.spec.output_dim,
            )
        };
        let init = match self.student_init.unwrap_or(InitArg::FromTeacher) {
            InitArg::FromTeacher => StudentInit::FromTeacher,
            InitArg::Random => StudentInit::Random,
        };
        let (ts, is) = (spec(&tt)?, spec(&it)?);
        Ok(DualEncoderBundle::for_distillation(tt, it, ts, is, init, init, &mut ChaCha8Rng::seed_from_u64(seed))?)
    }
}

/// Loss configuration from `--recipe` or `--terms`.
pub fn loss_config(recipe_name: Option<&str>, terms: Option<&str>, default: &str) -> CliResult<ConaConfig> {
    match (recipe_name, terms) {
        (Some(_), Some(_)) => Err(CliError::flag("--recipe and --terms are mutually exclusive")),
        (None, Some(t)) => {
            let doc = match serde_json::from_str::<serde_json::Value>(t) {
                Ok(v @ serde_json::Value::Array(_)) => serde_json::json!({ "terms": v }).to_string(),
                _ => t.to_string(),
            };
            ConaConfig::from_json(&doc).map_err(|e| CliError::flag(e.to_string()).context("--terms"))
        }
        (r, None) => recipe(r.unwrap_or(default)).map_err(|e| CliError::from(e).context("--recipe")),
    }
}

pub fn need<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::flag(format!("{flag} is required")))
}

pub fn read_dataset(path: &Path) -> CliResult<SyntheticDataset<f64>> {
    load_dataset(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint<f64>> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    cona::io::write_atomic(path, bytes).map_err(|e| CliError::from(e).context(path.display()))
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleArg {
    Student,
    Teacher,
}

/// The requested role, defaulting to students when the checkpoint has them.
pub fn pick_role(ckpt: &Checkpoint<f64>, role: Option<RoleArg>) -> RoleArg {
    role.unwrap_or(if ckpt.get(EncoderRole::TextStudent).is_some() { RoleArg::Student } else { RoleArg::Teacher })
}

pub fn encoder_role(role: RoleArg, modality: Modality) -> EncoderRole {
    match (role, modality) {
        (RoleArg::Student, Modality::Text) => EncoderRole::TextStudent,
        (RoleArg::Student, Modality::Image) => EncoderRole::ImageStudent,
        (RoleArg::Teacher, Modality::Text) => EncoderRole::TextTeacher,
        (RoleArg::Teacher, Modality::Image) => EncoderRole::ImageTeacher,
    }
}

pub fn encoder<'a>(ckpt: &'a Checkpoint<f64>, path: &Path, role: RoleArg, modality: Modality) -> CliResult<&'a Encoder<f64>> {
    ckpt.require(encoder_role(role, modality)).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn recall_line(direction: &str, r: &RecallReport) -> String {
    let cells: Vec<String> = r.recalls.iter().map(|(k, v)| format!("R@{k} {v:.4}")).collect();
    format!("{direction:<12} {}  ({} queries)", cells.join("  "), r.num_queries)
}

/// Human or NDJSON lines for both retrieval directions.
pub fn print_eval(eval: &RetrievalEval, json: bool) {
    for (name, label, r) in [
        ("text_to_image", "text->image", &eval.text_to_image),
        ("image_to_text", "image->text", &eval.image_to_text),
    ] {
        if json {
            println!("{}", serde_json::json!({ "direction": name, "recalls": r.recalls, "num_queries": r.num_queries }));
        } else {
            println!("{}", recall_line(label, r));
        }
    }
}

pub fn default_path(explicit: &Option<PathBuf>, output: &Path, suffix: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| crate::manifest::sibling(output, suffix))
}
