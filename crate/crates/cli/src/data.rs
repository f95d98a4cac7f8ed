use std::path::PathBuf;

use clap::Args;
use cona::io::dataset_to_bytes;
use cona::training::{generate_pairs, DataSpec};
use serde::{Deserialize, Serialize};

use crate::common::{need, write_file};
use crate::config::{resolve_seed, Globals};
use crate::error::CliResult;
use crate::manifest::{path_for, ManifestBuilder};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Dataset file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Dimension of the shared latent.
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use identity modality maps (input dims must equal the latent dim).
    #[arg(long)]
    #[serde(default)]
    pub identity_maps: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run(args: GenDataArgs, globals: &Globals) -> CliResult<()> {
    let out = need(&args.out, "--out")?.clone();
    let seed = resolve_seed(args.seed, globals)?;
    let d = DataSpec::default();
    let spec = DataSpec {
        pairs: args.pairs.unwrap_or(d.pairs),
        latent_dim: args.latent.unwrap_or(d.latent_dim),
        text_dim: args.text_dim.unwrap_or(d.text_dim),
        image_dim: args.image_dim.unwrap_or(d.image_dim),
        noise: args.noise.unwrap_or(d.noise),
        seed,
        identity_maps: args.identity_maps,
    };
    let mut manifest = ManifestBuilder::new("gen-data", &args, Some(seed), globals.deterministic);
    let data = generate_pairs::<f64>(&spec)?;
    write_file(&out, &dataset_to_bytes(&data))?;
    manifest.artifact("dataset", &out);
    manifest.extra("data_spec", spec);
    manifest.write(&path_for(args.manifest.as_deref(), &out))?;
    if globals.json {
        println!("{}", serde_json::json!({ "dataset": out, "spec": spec }));
    } else {
        println!(
            "wrote {} pairs (latent {}, text {}, image {}, noise {}) to {}",
            spec.pairs,
            spec.latent_dim,
            spec.text_dim,
            spec.image_dim,
            spec.noise,
            out.display()
        );
    }
    Ok(())
}
