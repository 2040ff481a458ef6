//! Command-line front end. `run` parses arguments, dispatches, and always
//! leaves a run manifest next to the requested output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_dataset, load_dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    annotated, cases_from_maps, cases_from_model, classification_eval, default_scales, detection_report, points_csv,
    top_weighted_prototype, ClassificationEval,
};
use crate::explain::{grid_to_pixel, render_heatmap, sheet_from_presence, top_prototypes, DEFAULT_ELIGIBILITY};
use crate::par::Exec;
use crate::prototype_head::activation_map;
use crate::raster::load_gray;
use crate::training::{finetune, load_checkpoint, pretrain, save_checkpoint, save_log, TrainConfig, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "protovit", version, about = "Prototype classifier pipeline on synthetic or folder datasets")]
pub struct Cli {
    /// Seed overriding the config's `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Additional copy of the JSON-lines training log.
    #[arg(long, global = true, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Config override, `key=value` with dotted keys for nested tables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with label and box manifests.
    SynthData {
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Self-supervised pre-training over the resolution ladder.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Supervised fine-tuning from a checkpoint.
    Finetune {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Scoring sheet and top-k prototype heatmaps for one image.
    Explain {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Localization sweep of one prototype against box annotations.
    #[command(group(ArgGroup::new("source").required(true).args(["ckpt", "maps"])))]
    EvalDetect {
        #[arg(long, value_name = "CKPT")]
        ckpt: Option<PathBuf>,
        /// Precomputed 16-bit activation maps mirroring the dataset layout.
        #[arg(long, value_name = "DIR")]
        maps: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Prototype id, or `auto` for the top-weighted prototype of the lesion class.
        #[arg(long, default_value = "auto")]
        prototype: String,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Minimum fraction of a ground-truth box that must be covered.
        #[arg(long, default_value_t = 0.0)]
        min_overlap: f64,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the PR points as CSV next to the report.
        #[arg(long)]
        csv: bool,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Classification metrics with bootstrap intervals.
    EvalClass {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Explain { .. } => "explain",
            Command::EvalDetect { .. } => "eval-detect",
            Command::EvalClass { .. } => "eval-class",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::SynthData { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Finetune { out, .. }
            | Command::Explain { out, .. }
            | Command::EvalDetect { out, .. }
            | Command::EvalClass { out, .. } => out,
        }
    }

    fn writes_file(&self) -> bool {
        matches!(self, Command::EvalDetect { .. } | Command::EvalClass { .. })
    }
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Where the manifest of a run writing to `out` goes.
pub fn manifest_path(out: &Path, writes_file: bool) -> PathBuf {
    if writes_file {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    } else {
        out.join(MANIFEST_NAME)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct Run {
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.to_path_buf());
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                usage_manifest(&args, &e.to_string());
            }
            return code;
        }
    };
    let start = Instant::now();
    let mut run = Run::default();
    let result = dispatch(&cli, &mut run);
    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(e) => {
            eprintln!("error: {e}");
            (e.exit_code(), Some(e.to_string()))
        }
    };
    let manifest = RunManifest {
        command: cli.command.name().into(),
        config: run.config,
        seed: run.seed.or(cli.seed),
        artifacts: run.artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        exit_status: code,
        error,
    };
    let path = manifest_path(cli.command.out(), cli.command.writes_file());
    if let Err(e) = write_json(&path, &manifest) {
        eprintln!("error: could not write run manifest: {e}");
        return if code == 0 { e.exit_code() } else { code };
    }
    code
}

/// Best effort for arguments clap rejected: recognizable subcommand and `--out`.
fn usage_manifest(args: &[OsString], message: &str) {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let names = ["synth-data", "pretrain", "finetune", "explain", "eval-detect", "eval-class"];
    let Some(command) = strs.iter().skip(1).find(|a| names.contains(&a.as_str())) else {
        return;
    };
    let Some(out) = strs.iter().position(|a| a == "--out").and_then(|i| strs.get(i + 1)) else {
        return;
    };
    let writes_file = command.starts_with("eval-");
    let manifest = RunManifest {
        command: command.clone(),
        config: serde_json::Value::Null,
        seed: None,
        artifacts: Vec::new(),
        wall_clock_seconds: 0.0,
        exit_status: 2,
        error: Some(message.trim().to_string()),
    };
    let _ = write_json(&manifest_path(Path::new(out), writes_file), &manifest);
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Sets `key` (dotted for nested tables) to `raw`, read as a TOML value when it parses as one.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads an optional TOML file, applies `--set` overrides and `--seed`, and deserializes.
pub fn resolve_config<T: DeserializeOwned + Serialize>(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<T> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        apply_override(&mut table, k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} does not fit a config integer")))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val or test")))
}

fn dispatch(cli: &Cli, run: &mut Run) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::SynthData { spec, out } => {
            let spec: SyntheticSpec = resolve_config(spec.as_deref(), &cli.overrides, cli.seed)?;
            run.config = to_json(&spec);
            run.seed = Some(spec.seed);
            let files = generate_synthetic_dataset(&spec, out, exec)?;
            log::info!("wrote {} files under {}", files.len(), out.display());
            run.artifacts.extend(files);
            Ok(())
        }
        Command::Pretrain { config, data, out } => {
            let config: TrainConfig = resolve_config(config.as_deref(), &cli.overrides, cli.seed)?;
            run.config = to_json(&config);
            run.seed = Some(config.seed);
            let dataset = load_dataset(data)?;
            let outcome = pretrain(&config, &dataset, exec)?;
            write_training(cli, run, &config, out, "pretrained.ckpt", &outcome)
        }
        Command::Finetune { config, data, init, out } => {
            let config: TrainConfig = resolve_config(config.as_deref(), &cli.overrides, cli.seed)?;
            run.config = to_json(&config);
            run.seed = Some(config.seed);
            let dataset = load_dataset(data)?;
            let start = load_checkpoint(init)?;
            let outcome = finetune(&config, &dataset, &start, exec)?;
            write_training(cli, run, &config, out, "finetuned.ckpt", &outcome)
        }
        Command::Explain { ckpt, image, topk, out } => {
            run.config = serde_json::json!({ "ckpt": ckpt, "image": image, "topk": topk });
            explain(ckpt, image, *topk, out, run)
        }
        Command::EvalDetect {
            ckpt,
            maps,
            data,
            prototype,
            tau,
            min_overlap,
            split,
            csv,
            out,
        } => {
            let seed = cli.seed.unwrap_or(0);
            run.seed = Some(seed);
            if !(*tau > 0.0 && *tau <= 1.0) {
                return Err(Error::Config(format!("--tau must lie in (0, 1], got {tau}")));
            }
            if !(0.0..=1.0).contains(min_overlap) {
                return Err(Error::Config(format!("--min-overlap must lie in [0, 1], got {min_overlap}")));
            }
            let split_v = parse_split(split)?;
            let dataset = load_dataset(data)?;
            let samples = annotated(&dataset.split(split_v));
            let mut config = serde_json::json!({
                "data": data, "split": split, "tau": tau, "min_overlap": min_overlap,
                "seed": seed, "prototype_arg": prototype,
            });
            let cases = match (ckpt, maps) {
                (Some(ckpt), _) => {
                    let model = load_checkpoint(ckpt)?.model;
                    let id = resolve_prototype(prototype, &model.classifier, &dataset)?;
                    config["ckpt"] = to_json(ckpt);
                    config["prototype"] = id.into();
                    cases_from_model(&model, &samples, id, *tau, exec)?
                }
                (None, Some(maps)) => {
                    config["maps"] = to_json(maps);
                    cases_from_maps(&samples, maps, *tau, exec)?
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            if cases.is_empty() {
                return Err(Error::data(data, None, format!("no annotated images in the {split} split")));
            }
            run.config = config.clone();
            let report = detection_report(&cases, &default_scales(), *tau, *min_overlap, seed, config, exec)?;
            log::info!("AP {:.4} (random-centroid baseline {:.4})", report.ap, report.baseline.ap);
            write_json(out, &report)?;
            run.artifact(out);
            if *csv {
                let path = out.with_extension("csv");
                fs::write(&path, points_csv(&report.points)).map_err(|e| Error::io(&path, e))?;
                run.artifact(&path);
            }
            Ok(())
        }
        Command::EvalClass {
            ckpt,
            data,
            bootstrap,
            split,
            out,
        } => {
            let seed = cli.seed.unwrap_or(0);
            run.seed = Some(seed);
            let config = serde_json::json!({
                "ckpt": ckpt, "data": data, "split": split, "bootstrap": bootstrap, "seed": seed,
            });
            run.config = config.clone();
            let split_v = parse_split(split)?;
            let model = load_checkpoint(ckpt)?.model;
            let dataset = load_dataset(data)?;
            if dataset.class_names != model.class_names() {
                return Err(Error::data(
                    data,
                    None,
                    format!("dataset classes {:?} differ from the model's {:?}", dataset.class_names, model.class_names()),
                ));
            }
            let samples = dataset.split(split_v);
            let eval = classification_eval(&model, &samples, *bootstrap, seed, exec)?;
            log::info!("BAcc {:.4} on {} images", eval.metrics.bacc, eval.samples);
            write_json(out, &ClassReportFile { config, eval })?;
            run.artifact(out);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ClassReportFile {
    config: serde_json::Value,
    #[serde(flatten)]
    eval: ClassificationEval,
}

fn resolve_prototype(arg: &str, c: &crate::classifier::SparseClassifier, dataset: &crate::data::Dataset) -> Result<usize> {
    if arg == "auto" {
        let lesion = dataset
            .lesion_class()
            .ok_or_else(|| Error::data(&dataset.root, None, "cannot pick a lesion class: boxes must belong to exactly one class"))?;
        let name = &dataset.class_names[lesion];
        let k = c
            .class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::data(&dataset.root, None, format!("model has no class {name:?}")))?;
        return top_weighted_prototype(c, k);
    }
    let id: usize = arg
        .parse()
        .map_err(|_| Error::Config(format!("--prototype must be an id or auto, got {arg:?}")))?;
    if id >= c.prototypes() {
        return Err(Error::Config(format!("prototype {id} out of range (model has {})", c.prototypes())));
    }
    Ok(id)
}

fn write_training(
    cli: &Cli,
    run: &mut Run,
    config: &TrainConfig,
    out: &Path,
    name: &str,
    outcome: &TrainOutcome,
) -> Result<()> {
    let ckpt = out.join(&config.checkpoint_dir).join(name);
    save_checkpoint(&outcome.checkpoint, &ckpt)?;
    run.artifact(&ckpt);
    let log_path = out.join("train_log.jsonl");
    save_log(&outcome.log, &log_path)?;
    run.artifact(&log_path);
    if let Some(extra) = &cli.log {
        ensure_parent(extra)?;
        save_log(&outcome.log, extra)?;
        run.artifact(extra);
    }
    Ok(())
}

#[derive(Serialize)]
struct TopEntry {
    rank: usize,
    id: usize,
    presence: f32,
    location: [usize; 2],
    pixel: [usize; 2],
    weights: std::collections::BTreeMap<String, f32>,
    heatmap: PathBuf,
}

fn explain(ckpt: &Path, image: &Path, k: usize, out: &Path, run: &mut Run) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("--topk must be at least 1".into()));
    }
    let model = load_checkpoint(ckpt)?.model;
    let img = load_gray(image)?;
    let inf = model.infer(&img)?;
    let sheet = sheet_from_presence(&inf.presence, &model.classifier)?;
    let top = top_prototypes(&inf.presence, &model.classifier, k, DEFAULT_ELIGIBILITY)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sheet_path = out.join("scoring_sheet.json");
    write_json(&sheet_path, &sheet)?;
    run.artifact(&sheet_path);
    let size = (img.width(), img.height());
    let grid = (inf.prototypes.width, inf.prototypes.height);
    let mut entries = Vec::new();
    for (rank, t) in top.iter().enumerate() {
        let map = activation_map(&inf.prototypes, t.id, size)?;
        let path = out.join(format!("heatmap_{:02}_proto{}.png", rank + 1, t.id));
        render_heatmap(&img, &map, &path)?;
        run.artifact(&path);
        let (px, py) = grid_to_pixel(t.location, grid, size);
        entries.push(TopEntry {
            rank: rank + 1,
            id: t.id,
            presence: t.presence,
            location: [t.location.0, t.location.1],
            pixel: [px, py],
            weights: model.class_names().iter().cloned().zip(t.weights.iter().copied()).collect(),
            heatmap: path,
        });
    }
    let top_path = out.join("topk.json");
    write_json(&top_path, &entries)?;
    run.artifact(&top_path);
    log::info!("predicted {} with {} eligible prototypes shown", sheet.prediction, entries.len());
    Ok(())
}
