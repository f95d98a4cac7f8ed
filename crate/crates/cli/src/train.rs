use std::path::PathBuf;

use clap::Args;
use cona::encoders::{Encoder, EncoderSpec, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_TEACHER_LAYERS};
use cona::io::Checkpoint;
use cona::cona::recipe;
use cona::training::{distill, pretrain_teacher_with, validation_recall, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::common::{default_path, loss_config, need, print_eval, read_checkpoint, read_dataset, write_file, StudentFlags, TrainFlags};
use crate::config::{resolve_seed, Globals};
use crate::error::{CliError, CliResult};
use crate::manifest::{path_for, ManifestBuilder};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TeacherArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Teacher checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    /// Metrics log (NDJSON); defaults to `<out>.metrics.ndjson`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run_teacher(args: TeacherArgs, globals: &Globals) -> CliResult<()> {
    let data_path = need(&args.data, "--data")?;
    let out = need(&args.out, "--out")?.clone();
    let seed = resolve_seed(args.seed, globals)?;
    let cfg = args.train.apply(TrainConfig::teacher_default(), seed)?;
    let mut objective = recipe("clip")?;
    if let Some(tau) = args.tau {
        objective = objective.with_tau(tau);
        objective.validate()?;
    }
    let mut manifest = ManifestBuilder::new("train-teacher", &args, Some(seed), globals.deterministic);
    let data = read_dataset(data_path)?;

    let spec = |input_dim| {
        EncoderSpec::new(
            input_dim,
            args.hidden_dim.unwrap_or(DEFAULT_HIDDEN_DIM),
            args.layers.unwrap_or(DEFAULT_TEACHER_LAYERS),
            args.embed_dim.unwrap_or(DEFAULT_EMBED_DIM),
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = Encoder::random(spec(data.spec.text_dim)?, &mut rng)?;
    let mut image = Encoder::random(spec(data.spec.image_dim)?, &mut rng)?;
    let log = pretrain_teacher_with(&mut text, &mut image, &data, &objective, &cfg)?;

    let metrics = default_path(&args.metrics, &out, "metrics.ndjson");
    Checkpoint::teachers(&text, &image).save(&out).map_err(|e| CliError::from(e).context(out.display()))?;
    write_file(&metrics, log.to_ndjson().as_bytes())?;
    manifest.artifact("dataset", data_path);
    manifest.artifact("checkpoint", &out);
    manifest.artifact("metrics", &metrics);
    manifest.extra("train_config", &cfg);
    manifest.write(&path_for(args.manifest.as_deref(), &out))?;

    if let Some(eval) = validation_recall(&text, &image, &data, cfg.val_fraction, &cfg.ks)? {
        print_eval(&eval, globals.json);
    }
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DistillArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint holding the teacher pair.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Checkpoint to write (teachers and students).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Named loss recipe: motis or conaclip (default).
    #[arg(long)]
    pub recipe: Option<String>,
    /// Explicit loss terms as JSON, e.g. '[{"learning_type":"IntraTchStu","strategy":"SD"}]'.
    #[arg(long)]
    pub terms: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub student: StudentFlags,
    /// Metrics log (NDJSON); defaults to `<out>.metrics.ndjson`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run_distill(args: DistillArgs, globals: &Globals) -> CliResult<()> {
    let data_path = need(&args.data, "--data")?;
    let teacher_path = need(&args.teacher, "--teacher")?;
    let out = need(&args.out, "--out")?.clone();
    let seed = resolve_seed(args.seed, globals)?;
    let cona = args.student.loss_options(loss_config(args.recipe.as_deref(), args.terms.as_deref(), "conaclip")?)?;
    let cfg = TrainConfig {
        intermediate: args.student.intermediate(),
        ..args.train.apply(TrainConfig::default(), seed)?
    };
    cfg.validate()?;
    let mut manifest = ManifestBuilder::new("distill", &args, Some(seed), globals.deterministic);

    let data = read_dataset(data_path)?;
    let teachers = read_checkpoint(teacher_path)?;
    let mut bundle = args.student.bundle(&teachers, seed)?;
    let log = distill(&mut bundle, &data, &cona, &cfg)?;

    let metrics = default_path(&args.metrics, &out, "metrics.ndjson");
    Checkpoint::from_bundle(&bundle).save(&out).map_err(|e| CliError::from(e).context(out.display()))?;
    write_file(&metrics, log.to_ndjson().as_bytes())?;
    manifest.artifact("dataset", data_path);
    manifest.artifact("teacher", teacher_path);
    manifest.artifact("checkpoint", &out);
    manifest.artifact("metrics", &metrics);
    manifest.extra("loss_terms", cona.terms.iter().map(|t| t.label()).collect::<Vec<_>>());
    manifest.extra("loss_config", &cona);
    manifest.extra("train_config", &cfg);
    manifest.write(&path_for(args.manifest.as_deref(), &out))?;

    if let Some(eval) = validation_recall(&bundle.text_student, &bundle.image_student, &data, cfg.val_fraction, &cfg.ks)? {
        print_eval(&eval, globals.json);
    }
    Ok(())
}
