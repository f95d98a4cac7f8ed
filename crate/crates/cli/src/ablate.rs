//! Baseline-plus-one-cell sweep over the knowledge-interaction grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use cona::cona::{recipe, valid_cells, ConaConfig, LearningType, Strategy};
use cona::retrieval::RecallReport;
use cona::training::{distill, validation_recall, SyntheticDataset, TrainConfig};
use cona::io::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::common::{need, read_checkpoint, read_dataset, write_file, StudentFlags, TrainFlags};
use crate::config::{resolve_seed, Globals};
use crate::error::{CliError, CliResult};
use crate::manifest::{path_for, ManifestBuilder};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// `all`, or a comma-separated list of `LearningType:Strategy` cells.
    #[arg(long)]
    pub cells: Option<String>,
    /// Runs per row; seeds are `seed`, `seed + 1`, ...
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub student: StudentFlags,
    /// Results table as NDJSON, one row per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: BTreeMap<usize, f64>,
    /// Sample standard deviation (0 for a single run).
    pub std: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub text_to_image: RecallReport,
    pub image_to_text: RecallReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `baseline` or the learning-type description.
    pub group: String,
    pub learning_type: Option<LearningType>,
    pub strategy: Option<Strategy>,
    pub terms: Vec<String>,
    pub text_to_image: Stats,
    pub image_to_text: Stats,
    pub runs: Vec<RunResult>,
}

pub fn parse_cells(spec: &str) -> CliResult<Vec<(LearningType, Strategy)>> {
    if spec.trim() == "all" {
        return Ok(valid_cells());
    }
    let mut cells = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (lt, s) = item
            .split_once(':')
            .ok_or_else(|| CliError::flag(format!("cell `{item}` is not LearningType:Strategy")))?;
        let cell = (lt.parse()?, s.parse()?);
        cona::cona::build_term(cell.0, cell.1)?;
        cells.push(cell);
    }
    if cells.is_empty() {
        return Err(CliError::flag("--cells selects nothing"));
    }
    Ok(cells)
}

fn stats(reports: &[&RecallReport]) -> Stats {
    let n = reports.len() as f64;
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for &k in reports[0].recalls.keys() {
        let vals: Vec<f64> = reports.iter().map(|r| r.recalls[&k]).collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        mean.insert(k, m);
        std.insert(k, var.sqrt());
    }
    Stats { mean, std }
}

struct Sweep<'a> {
    data: &'a SyntheticDataset<f64>,
    teachers: &'a Checkpoint<f64>,
    student: &'a StudentFlags,
    train: &'a TrainFlags,
    seeds: Vec<u64>,
}

impl Sweep<'_> {
    fn row(&self, group: &str, cell: Option<(LearningType, Strategy)>, cona: &ConaConfig) -> CliResult<AblationRow> {
        let mut runs = Vec::new();
        for &seed in &self.seeds {
            let cfg = TrainConfig {
                intermediate: self.student.intermediate(),
                ..self.train.apply(TrainConfig::default(), seed)?
            };
            let mut bundle = self.student.bundle(self.teachers, seed)?;
            distill(&mut bundle, self.data, cona, &cfg)?;
            let eval = validation_recall(&bundle.text_student, &bundle.image_student, self.data, cfg.val_fraction, &cfg.ks)?
                .ok_or_else(|| CliError::flag("--val-fraction leaves no held-out rows"))?;
            runs.push(RunResult { seed, text_to_image: eval.text_to_image, image_to_text: eval.image_to_text });
        }
        Ok(AblationRow {
            group: group.to_string(),
            learning_type: cell.map(|c| c.0),
            strategy: cell.map(|c| c.1),
            terms: cona.terms.iter().map(|t| t.label()).collect(),
            text_to_image: stats(&runs.iter().map(|r| &r.text_to_image).collect::<Vec<_>>()),
            image_to_text: stats(&runs.iter().map(|r| &r.image_to_text).collect::<Vec<_>>()),
            runs,
        })
    }
}

/// Rows grouped by learning type, one column per direction and k.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else { return out };
    let ks: Vec<usize> = first.text_to_image.mean.keys().copied().collect();
    let _ = write!(out, "{:<30} {:<9}", "group", "strategy");
    for dir in ["t2i", "i2t"] {
        for k in &ks {
            let _ = write!(out, " {:>15}", format!("{dir} R@{k}"));
        }
    }
    out.push('\n');
    let mut last_group = "";
    for r in rows {
        let group = if r.group == last_group { "" } else { r.group.as_str() };
        last_group = &r.group;
        let strategy = r.strategy.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        let _ = write!(out, "{group:<30} {strategy:<9}");
        for s in [&r.text_to_image, &r.image_to_text] {
            for k in &ks {
                let _ = write!(out, " {:>15}", format!("{:.4}±{:.4}", s.mean[k], s.std[k]));
            }
        }
        out.push('\n');
    }
    out
}

pub fn run(args: AblateArgs, globals: &Globals) -> CliResult<()> {
    let data_path = need(&args.data, "--data")?;
    let teacher_path = need(&args.teacher, "--teacher")?;
    let cells = parse_cells(args.cells.as_deref().unwrap_or("all"))?;
    let n_seeds = args.seeds.unwrap_or(1);
    if n_seeds == 0 {
        return Err(CliError::flag("--seeds must be >= 1"));
    }
    let base_seed = resolve_seed(args.seed, globals)?;
    let baseline = args.student.loss_options(recipe("motis")?)?;
    let mut manifest = ManifestBuilder::new("ablate", &args, Some(base_seed), globals.deterministic);

    let data = read_dataset(data_path)?;
    let teachers = read_checkpoint(teacher_path)?;
    let sweep = Sweep {
        data: &data,
        teachers: &teachers,
        student: &args.student,
        train: &args.train,
        seeds: (0..n_seeds).map(|i| base_seed + i).collect(),
    };

    // Rows follow the grid order, so learning types stay contiguous.
    let mut rows = vec![sweep.row("baseline", None, &baseline)?];
    for (lt, s) in cells {
        let cona = baseline.clone().with_cell(lt, s)?;
        rows.push(sweep.row(lt.description(), Some((lt, s)), &cona)?);
    }

    let ndjson: String = rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect();
    if let Some(out) = &args.out {
        write_file(out, ndjson.as_bytes())?;
        manifest.artifact("table", out);
    }
    manifest.artifact("dataset", data_path);
    manifest.artifact("teacher", teacher_path);
    manifest.extra("rows", rows.len());
    if let Some(path) = args.manifest.as_deref().map(|p| p.to_path_buf()).or_else(|| args.out.as_deref().map(|o| path_for(None, o))) {
        manifest.write(&path)?;
    }
    if globals.json {
        print!("{ndjson}");
    } else {
        print!("{}", render_table(&rows));
    }
    Ok(())
}
