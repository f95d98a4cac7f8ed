use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use cona::io::{load_index, save_index};
use cona::numerics::Matrix;
use cona::retrieval::{build_index, topk, DEFAULT_KS};
use cona::training::{evaluate_retrieval, pair_id, validation_recall, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::common::{encoder, need, pick_role, print_eval, read_checkpoint, read_dataset, Modality, RoleArg};
use crate::config::Globals;
use crate::error::{CliError, CliResult};
use crate::manifest::{path_for, ManifestBuilder};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Held-out trailing rows.
    Val,
    All,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Encoders to evaluate; defaults to students when present.
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run_eval(args: EvalArgs, globals: &Globals) -> CliResult<()> {
    let ckpt_path = need(&args.checkpoint, "--checkpoint")?;
    let data_path = need(&args.data, "--data")?;
    let ks = args.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    let val_fraction = args.val_fraction.unwrap_or(TrainConfig::default().val_fraction);
    let manifest = ManifestBuilder::new("eval", &args, None, globals.deterministic);

    let ckpt = read_checkpoint(ckpt_path)?;
    let data = read_dataset(data_path)?;
    let role = pick_role(&ckpt, args.role);
    let text = encoder(&ckpt, ckpt_path, role, Modality::Text)?;
    let image = encoder(&ckpt, ckpt_path, role, Modality::Image)?;
    let eval = match args.split.unwrap_or(Split::Val) {
        Split::Val => validation_recall(text, image, &data, val_fraction, &ks)?
            .ok_or_else(|| CliError::flag("--val-fraction leaves no held-out rows"))?,
        Split::All => evaluate_retrieval(text, image, &data.text_inputs, &data.image_inputs, &ks)?,
    };
    print_eval(&eval, globals.json);
    if let Some(path) = &args.manifest {
        let mut manifest = manifest;
        manifest.artifact("checkpoint", ckpt_path);
        manifest.artifact("dataset", data_path);
        manifest.extra("recall", &eval);
        manifest.write(path)?;
    }
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Modality of the gallery items.
    #[arg(long, value_enum)]
    pub modality: Option<Modality>,
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    /// Index file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run_index(args: IndexArgs, globals: &Globals) -> CliResult<()> {
    let ckpt_path = need(&args.checkpoint, "--checkpoint")?;
    let data_path = need(&args.data, "--data")?;
    let out = need(&args.out, "--out")?.clone();
    let modality = args.modality.unwrap_or(Modality::Image);
    let mut manifest = ManifestBuilder::new("index", &args, None, globals.deterministic);

    let ckpt = read_checkpoint(ckpt_path)?;
    let data = read_dataset(data_path)?;
    let enc = encoder(&ckpt, ckpt_path, pick_role(&ckpt, args.role), modality)?;
    let inputs = match modality {
        Modality::Text => &data.text_inputs,
        Modality::Image => &data.image_inputs,
    };
    let emb = enc.encode(inputs).map_err(|e| CliError::from(e).context(data_path.display()))?;
    let ids = (0..inputs.rows()).map(pair_id).collect();
    let index = build_index(ids, emb.matrix().clone())?;
    save_index(&index, &out).map_err(|e| CliError::from(e).context(out.display()))?;
    manifest.artifact("checkpoint", ckpt_path);
    manifest.artifact("dataset", data_path);
    manifest.artifact("index", &out);
    manifest.write(&path_for(args.manifest.as_deref(), &out))?;
    if globals.json {
        println!("{}", serde_json::json!({ "index": out, "items": index.len(), "dim": index.dim() }));
    } else {
        println!("indexed {} items of dim {} into {}", index.len(), index.dim(), out.display());
    }
    Ok(())
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Modality of the query vector.
    #[arg(long, value_enum)]
    pub modality: Option<Modality>,
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    /// File holding one raw input vector (JSON array or whitespace/comma separated).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn read_vector(path: &Path) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(v);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| CliError::data(format!("`{s}`: {e}")).context(path.display())))
        .collect()
}

pub fn run_query(args: QueryArgs, globals: &Globals) -> CliResult<()> {
    let index_path = need(&args.index, "--index")?;
    let ckpt_path = need(&args.checkpoint, "--checkpoint")?;
    let input_path = need(&args.input, "--input")?;
    let k = args.k.unwrap_or(10);
    let modality = args.modality.unwrap_or(Modality::Text);
    let manifest = ManifestBuilder::new("query", &args, None, globals.deterministic);

    let index = load_index::<f64>(index_path).map_err(|e| CliError::from(e).context(index_path.display()))?;
    let ckpt = read_checkpoint(ckpt_path)?;
    let enc = encoder(&ckpt, ckpt_path, pick_role(&ckpt, args.role), modality)?;
    let raw = read_vector(input_path)?;
    if raw.len() != enc.spec.input_dim {
        return Err(CliError::data(format!(
            "input has {} values, the {modality:?} encoder in {} expects {}",
            raw.len(),
            ckpt_path.display(),
            enc.spec.input_dim
        ))
        .context(input_path.display()));
    }
    if index.dim() != enc.spec.output_dim {
        return Err(CliError::data(format!(
            "index dim {} differs from the encoder output dim {} of {}",
            index.dim(),
            enc.spec.output_dim,
            ckpt_path.display()
        ))
        .context(index_path.display()));
    }
    let len = raw.len();
    let emb = enc.encode(&Matrix::from_vec(1, len, raw)?)?;
    let hits = topk(&index, emb.matrix().row(0), k)?;
    for (rank, h) in hits.iter().enumerate() {
        if globals.json {
            println!("{}", serde_json::json!({ "rank": rank + 1, "id": h.id, "score": h.score }));
        } else {
            println!("{:>4}  {}  {:.6}", rank + 1, h.id, h.score);
        }
    }
    if let Some(path) = &args.manifest {
        let mut manifest = manifest;
        manifest.artifact("index", index_path);
        manifest.artifact("checkpoint", ckpt_path);
        manifest.artifact("input", input_path);
        manifest.write(path)?;
    }
    Ok(())
}
