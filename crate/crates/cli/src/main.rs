//! Command-line entry point: scene synthesis, training, evaluation,
//! gradient checking, and the ablation grid, glued together with run
//! manifests so every artifact directory records how it was produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pyrpoint::check::{broken_backward_item, check_blocks, check_network, check_ops, CheckItem};
use pyrpoint::dataset::{
    class_histogram, read_ply, synth_scene, write_ply, DatasetSpec, Mode, PlyMode, SceneRecipe,
    SCENE_CLASS_NAMES,
};
use pyrpoint::net::{load_checkpoint, NetworkConfig};
use pyrpoint::train::{
    ablate, evaluate, format_ablation_table, format_confusion, format_metrics, train,
    AblationGrid, TrainSchedule,
};
use pyrpoint::{Error, Result};

const EVAL_BATCH: usize = 4;

/// Distinct label colors for prediction dumps, cycled past ten classes.
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Parser)]
#[command(name = "pyrpoint", version, about = "Point cloud semantic segmentation workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene as a PLY file.
    Synth {
        /// Scene recipe JSON.
        recipe: PathBuf,
        /// Output PLY path.
        out: PathBuf,
        /// Write ascii PLY instead of binary.
        #[arg(long)]
        ascii: bool,
    },
    /// Train a network and write checkpoints, logs, and a manifest.
    Train {
        /// Network and schedule config JSON.
        config: PathBuf,
        /// Dataset description JSON.
        dataset: PathBuf,
        /// Run directory.
        out_dir: PathBuf,
        /// Master seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force the single-thread deterministic path.
        #[arg(long)]
        deterministic: bool,
        /// Override the schedule's epoch count; 0 writes only the initial
        /// checkpoint.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Write one predicted-label PLY per input cloud.
        #[arg(long)]
        dump_predictions: bool,
        /// Run directory; defaults to eval_<split> beside the checkpoint.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Suite to run: ops, blocks, or network.
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run directory for the manifest and report.
        #[arg(long, default_value = "gradcheck_run")]
        out_dir: PathBuf,
        /// Corrupt one backward pass to prove failures are loud.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train and score every variant of an ablation grid.
    Ablate {
        /// Network and schedule config JSON.
        config: PathBuf,
        /// Dataset description JSON.
        dataset: PathBuf,
        /// Run directory.
        out_dir: PathBuf,
        /// Variant axis: attention, hidden, or both.
        #[arg(long)]
        grid: String,
        /// Master seed shared by every variant.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Network config plus an optional training schedule in one document.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigFile {
    network: NetworkConfig,
    #[serde(default)]
    schedule: Option<TrainSchedule>,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_paths: Vec<PathBuf>,
    resolved_seed: u64,
    out_dir: PathBuf,
    tool_version: String,
    threads: usize,
    started_at_unix: u64,
    finished_at_unix: Option<u64>,
    exit_status: Option<i32>,
    #[serde(skip, default)]
    path: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Write the manifest before any work so even aborted runs leave a
    /// record; `finish` amends it with the exit status.
    fn begin(
        path: PathBuf,
        command: &str,
        config_paths: Vec<PathBuf>,
        resolved_seed: u64,
        out_dir: &Path,
        threads: usize,
    ) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_paths,
            resolved_seed,
            out_dir: out_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            started_at_unix: now_unix(),
            finished_at_unix: None,
            exit_status: None,
            path,
        };
        manifest.write()?;
        Ok(manifest)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest does not serialize: {}", e)))?;
        fs::write(&self.path, text)?;
        Ok(())
    }

    fn finish(&mut self, status: i32) {
        self.exit_status = Some(status);
        self.finished_at_unix = Some(now_unix());
        // Best effort: the run's own result matters more than the amendment.
        let _ = self.write();
    }
}

/// Copy an input config into the run directory under a canonical name so
/// the run can be reproduced from its artifacts alone.
fn copy_config(src: &Path, out_dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::copy(src, out_dir.join(name))?;
    Ok(())
}

/// Thread cap from PYRPOINT_THREADS; 0 means the deterministic
/// single-thread path. Every module currently computes sequentially, so
/// any cap is honored trivially; the value is still validated and
/// recorded.
fn thread_cap() -> Result<usize> {
    match std::env::var("PYRPOINT_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("PYRPOINT_THREADS is not unicode: {}", e))),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map_err(|_| {
                Error::Config(format!(
                    "PYRPOINT_THREADS must be a non-negative integer, got {:?}",
                    s
                ))
            }),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {} {}: {}", what, path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} {}: {}", what, path.display(), e)))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Dispatch with manifest bracketing: write it, run the body, amend it.
fn run(cli: Cli) -> Result<()> {
    let threads = thread_cap()?;
    let (mut manifest, body): (RunManifest, Box<dyn FnOnce() -> Result<()>>) = match cli.command {
        Command::Synth { recipe, out, ascii } => {
            let recipe_doc: SceneRecipe = load_json(&recipe, "recipe")?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".to_string());
            let manifest = RunManifest::begin(
                dir.join(format!("{}.manifest.json", stem)),
                "synth",
                vec![recipe.clone()],
                recipe_doc.seed,
                &dir,
                threads,
            )?;
            copy_config(&recipe, &dir, &format!("{}.recipe.json", stem))?;
            let body = move || cmd_synth(&recipe_doc, &out, ascii);
            (manifest, Box::new(body))
        }
        Command::Train { config, dataset, out_dir, seed, deterministic, epochs, resume } => {
            let file: TrainConfigFile = load_json(&config, "config")?;
            let mut network = file.network;
            let mut schedule = file.schedule.unwrap_or_default();
            if let Some(e) = epochs {
                schedule.epochs = e;
            }
            let resolved = seed.unwrap_or(network.seed);
            network.seed = resolved;
            let spec = DatasetSpec::load(&dataset)?;
            let threads = if deterministic { 1 } else { threads.max(1) };
            let manifest = RunManifest::begin(
                out_dir.join("manifest.json"),
                "train",
                vec![config.clone(), dataset.clone()],
                resolved,
                &out_dir,
                threads,
            )?;
            copy_config(&config, &out_dir, "config.json")?;
            copy_config(&dataset, &out_dir, "dataset.json")?;
            let body = move || cmd_train(&network, &spec, &schedule, &out_dir, resolved, resume);
            (manifest, Box::new(body))
        }
        Command::Eval { checkpoint, dataset, split, dump_predictions, out_dir } => {
            let split: Mode = split.parse()?;
            let spec = DatasetSpec::load(&dataset)?;
            let dir = out_dir.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
                    .join(format!("eval_{}", split.name()))
            });
            let ckpt = load_checkpoint(&checkpoint)?;
            let manifest = RunManifest::begin(
                dir.join("manifest.json"),
                "eval",
                vec![checkpoint.clone(), dataset.clone()],
                ckpt.config.seed,
                &dir,
                threads,
            )?;
            copy_config(&dataset, &dir, "dataset.json")?;
            let body = move || cmd_eval(ckpt, &spec, split, dump_predictions, &dir);
            (manifest, Box::new(body))
        }
        Command::Gradcheck { scope, seed, out_dir, inject_fault } => {
            let manifest = RunManifest::begin(
                out_dir.join("manifest.json"),
                "gradcheck",
                Vec::new(),
                seed,
                &out_dir,
                threads,
            )?;
            let body = move || cmd_gradcheck(&scope, seed, &out_dir, inject_fault);
            (manifest, Box::new(body))
        }
        Command::Ablate { config, dataset, out_dir, grid, seed } => {
            let grid: AblationGrid = grid.parse()?;
            let file: TrainConfigFile = load_json(&config, "config")?;
            let mut network = file.network;
            let schedule = file.schedule.unwrap_or_default();
            let resolved = seed.unwrap_or(network.seed);
            network.seed = resolved;
            let spec = DatasetSpec::load(&dataset)?;
            let manifest = RunManifest::begin(
                out_dir.join("manifest.json"),
                "ablate",
                vec![config.clone(), dataset.clone()],
                resolved,
                &out_dir,
                threads,
            )?;
            copy_config(&config, &out_dir, "config.json")?;
            copy_config(&dataset, &out_dir, "dataset.json")?;
            let body = move || cmd_ablate(&network, &spec, &schedule, grid, &out_dir, resolved);
            (manifest, Box::new(body))
        }
    };
    let result = body();
    let status = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e) as i32,
    };
    manifest.finish(status);
    result
}

fn cmd_synth(recipe: &SceneRecipe, out: &Path, ascii: bool) -> Result<()> {
    let cloud = synth_scene(recipe)?;
    let mode = if ascii { PlyMode::Ascii } else { PlyMode::Binary };
    write_ply(&cloud, out, mode, None)?;
    let freq = class_histogram(std::slice::from_ref(&cloud), SCENE_CLASS_NAMES.len())?;
    println!("wrote {} points to {}", cloud.len(), out.display());
    println!("class histogram:");
    for (name, count) in SCENE_CLASS_NAMES.iter().zip(&freq) {
        println!("  {:<12} {}", name, count);
    }
    Ok(())
}

fn cmd_train(
    network: &NetworkConfig,
    spec: &DatasetSpec,
    schedule: &TrainSchedule,
    out_dir: &Path,
    seed: u64,
    resume: Option<PathBuf>,
) -> Result<()> {
    let outcome = train(network, spec, schedule, out_dir, seed, resume.as_deref())?;
    println!("{}", pyrpoint::net::summarize(&outcome.net, &outcome.store));
    match outcome.state.loss_history.last() {
        Some(loss) => println!("steps {}  final loss {:.6}", outcome.state.step, loss),
        None => println!("steps {}  (no optimizer steps ran)", outcome.state.step),
    }
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if let Some(best) = &outcome.best_checkpoint {
        println!("best checkpoint: {}", best.display());
    }
    println!("metrics log: {}", outcome.metrics_log.display());
    Ok(())
}

fn cmd_eval(
    ckpt: pyrpoint::net::Checkpoint,
    spec: &DatasetSpec,
    split: Mode,
    dump_predictions: bool,
    out_dir: &Path,
) -> Result<()> {
    let mut store = ckpt.store;
    let outcome = evaluate(&ckpt.net, &mut store, spec, split, EVAL_BATCH)?;
    match (&outcome.confusion, &outcome.metrics) {
        (Some(cm), Some(m)) => {
            print!("{}", format_confusion(cm, &spec.class_names));
            print!("{}", format_metrics(m, &spec.class_names));
            let cm_text = serde_json::to_string_pretty(cm)
                .map_err(|e| Error::Config(format!("confusion does not serialize: {}", e)))?;
            fs::write(out_dir.join("confusion.json"), cm_text)?;
            let m_text = serde_json::to_string_pretty(m)
                .map_err(|e| Error::Config(format!("metrics do not serialize: {}", e)))?;
            fs::write(out_dir.join("metrics.json"), m_text)?;
        }
        _ => println!("split has unlabeled clouds; skipping metrics"),
    }
    if dump_predictions {
        let class_count = ckpt.net.config.class_count;
        let palette: Vec<[u8; 3]> =
            (0..class_count).map(|k| PALETTE[k % PALETTE.len()]).collect();
        for (i, file) in spec.files_for(split).iter().enumerate() {
            let mut cloud = read_ply(file)?;
            cloud.labels = Some(outcome.predictions[i].clone());
            cloud.class_count = class_count;
            // Positions and predicted labels only; the palette colors the
            // classes for quick visual inspection.
            cloud.features.clear();
            cloud.feature_width = 0;
            cloud.feature_names.clear();
            let name = file
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("cloud_{}.ply", i));
            let dest = out_dir.join(format!("pred_{}", name));
            write_ply(&cloud, &dest, PlyMode::Binary, Some(&palette))?;
            println!("wrote predictions to {}", dest.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(scope: &str, seed: u64, out_dir: &Path, inject_fault: bool) -> Result<()> {
    let mut items = match scope {
        "ops" => check_ops(seed)?,
        "blocks" => check_blocks(seed)?,
        "network" => check_network(seed)?,
        other => {
            return Err(Error::Config(format!(
                "unknown scope {:?}; expected ops, blocks, or network",
                other
            )))
        }
    };
    if inject_fault {
        items.push(broken_backward_item()?);
    }
    let name_width = items.iter().map(|i| i.name.len()).chain(["item".len()]).max().unwrap();
    println!("{:<name_width$}  {:>12}  {:>10}  result", "item", "max rel err", "threshold");
    for item in &items {
        println!(
            "{:<name_width$}  {:>12.3e}  {:>10.1e}  {}",
            item.name,
            item.max_err,
            item.threshold,
            if item.passed() { "PASS" } else { "FAIL" }
        );
    }
    let report = serde_json::to_string_pretty(
        &items
            .iter()
            .map(|i| {
                serde_json::json!({
                    "name": i.name,
                    "max_rel_err": i.max_err,
                    "threshold": i.threshold,
                    "passed": i.passed(),
                })
            })
            .collect::<Vec<_>>(),
    )
    .map_err(|e| Error::Config(format!("report does not serialize: {}", e)))?;
    fs::write(out_dir.join("gradcheck.json"), report)?;
    let failed: Vec<&CheckItem> = items.iter().filter(|i| !i.passed()).collect();
    if failed.is_empty() {
        println!("all {} item(s) passed", items.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{} of {} gradient check(s) failed: {}",
            failed.len(),
            items.len(),
            failed.iter().map(|i| i.name.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }
}

fn cmd_ablate(
    network: &NetworkConfig,
    spec: &DatasetSpec,
    schedule: &TrainSchedule,
    grid: AblationGrid,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let rows = ablate(network, spec, schedule, grid, out_dir, seed)?;
    let table = format_ablation_table(&rows);
    print!("{}", table);
    fs::write(out_dir.join("ablation.txt"), &table)?;
    let rows_text = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Config(format!("rows do not serialize: {}", e)))?;
    fs::write(out_dir.join("ablation.json"), rows_text)?;
    // Sanity: the report must cover exactly the requested grid.
    let expected = pyrpoint::train::grid_variants(network, grid).len();
    if rows.len() != expected {
        return Err(Error::Config(format!(
            "grid expected {} variants, produced {}",
            expected,
            rows.len()
        )));
    }
    Ok(())
}
